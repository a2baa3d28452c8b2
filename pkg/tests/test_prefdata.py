import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from prefopt.errors import InvalidInputError
from prefopt.prefdata import (
    LatentReward,
    PreferenceDataset,
    bt_preference_prob,
    chosen_distribution,
    gen_dataset,
    overlap_prefix_len,
    shared_prefix_len,
)
from prefopt.seqmodel import TabularPolicy, enumerate_seqs

import oracles

# frozen from oracles.py
SIGMOID_1 = 0.73105857863000487925
CHOSEN_3SEQ = [0.6174717239156938, 0.2506089454116469, 0.13191933067265924]


def zero_reward(vocab=4):
    return LatentReward.feature_linear(np.zeros(vocab))


def three_seq_policy(probs=(0.5, 0.3, 0.2)) -> TabularPolicy:
    """V=3, L=2: responses (0,), (1,0), (2,0)."""
    pol = TabularPolicy(3, 2)
    pol.set_row((), (), np.log(probs))
    return pol


class TestBradleyTerry:
    def test_symmetric(self):
        assert bt_preference_prob(1.3, 1.3) == 0.5

    def test_saturation(self):
        assert bt_preference_prob(50.0, 0.0) == pytest.approx(1.0, abs=1e-9)

    def test_sigmoid_one(self):
        assert bt_preference_prob(1.0, 0.0) == pytest.approx(SIGMOID_1, abs=1e-15)
        assert bt_preference_prob(1.0, 0.0) == pytest.approx(0.731059, abs=1e-6)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            bt_preference_prob(math.inf, 0.0)

    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_complementary(self, a, b):
        assert bt_preference_prob(a, b) + bt_preference_prob(b, a) == pytest.approx(1.0, abs=1e-12)


class TestGenDataset:
    def test_byte_identical_rerun(self):
        ref = TabularPolicy(4, 6, init_scale=1.0, init_seed=2)
        r = LatentReward.feature_linear([0.0, 1.0, -1.0, 0.5])
        a = gen_dataset(ref, r, 200, 0.3, seed=5).dumps()
        b = gen_dataset(ref, r, 200, 0.3, seed=5).dumps()
        assert a == b
        assert gen_dataset(ref, r, 200, 0.3, seed=6).dumps() != a

    def test_file_round_trip(self, tmp_path):
        ref = TabularPolicy(4, 6, init_scale=1.0, init_seed=2)
        data = gen_dataset(ref, zero_reward(), 50, 0.5, seed=1)
        data.write(tmp_path / "d.jsonl")
        back = PreferenceDataset.read(tmp_path / "d.jsonl")
        assert back.dumps() == data.dumps()
        lines = (tmp_path / "d.jsonl").read_text().splitlines()
        assert len(lines) == 51

    def test_full_overlap_never_collides(self):
        ref = TabularPolicy(3, 5, init_scale=1.0, init_seed=0)
        data = gen_dataset(ref, zero_reward(3), 500, 1.0, seed=3)
        for ex in data:
            assert ex.chosen != ex.rejected
            assert ex.overlap_realized < 1.0

    def test_zero_reward_label_balance(self):
        ref = TabularPolicy(4, 5, init_scale=1.0, init_seed=1)
        n = 10_000
        data = gen_dataset(ref, zero_reward(), n, 0.0, seed=11)
        freq = np.mean([ex.first_chosen for ex in data])
        assert abs(freq - 0.5) < 3 * math.sqrt(0.25 / n)

    def test_gap_50_sequence_almost_always_chosen(self):
        ref = TabularPolicy(3, 3)
        star = (1, 0)
        r = LatentReward.from_table({star: 50.0})
        data = gen_dataset(ref, r, 5000, 0.0, seed=2)
        containing = [ex for ex in data if star in (ex.chosen, ex.rejected)]
        assert len(containing) > 1000
        assert np.mean([ex.chosen == star for ex in containing]) > 0.999

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(0, 10_000))
    def test_overlap_contract(self, overlap, seed):
        ref = TabularPolicy(3, 8, init_scale=0.5, init_seed=seed, eos_bias=-1.0)
        data = gen_dataset(ref, zero_reward(3), 40, overlap, seed=seed)
        for ex in data:
            length = min(len(ex.chosen), len(ex.rejected))
            assert ex.overlap_realized >= overlap - 1.0 / length - 1e-12
            assert ex.overlap_realized == shared_prefix_len(ex.chosen, ex.rejected) / length

    def test_label_consistency_with_bt(self):
        ref = TabularPolicy(4, 5, init_scale=1.0, init_seed=7)
        r = LatentReward.feature_linear([0.0, 2.0, -1.0, 0.5], scale=1.5)
        data = gen_dataset(ref, r, 10_000, 0.0, seed=4)
        hits = [max(ex.reward_chosen, ex.reward_rejected) == ex.reward_chosen for ex in data
                if ex.reward_chosen != ex.reward_rejected]
        expect = [bt_preference_prob(max(ex.reward_chosen, ex.reward_rejected),
                                     min(ex.reward_chosen, ex.reward_rejected)) for ex in data
                  if ex.reward_chosen != ex.reward_rejected]
        p = np.array(expect)
        se = math.sqrt(np.sum(p * (1 - p))) / len(p)
        assert abs(np.mean(hits) - p.mean()) < 3 * se

    def test_prompts_drawn_from_set(self):
        ref = TabularPolicy(4, 4, init_scale=1.0)
        data = gen_dataset(ref, zero_reward(), 300, 0.0, seed=0, prompts=[(1,), (2, 3)])
        assert set(data.prompts) == {(1,), (2, 3)}

    def test_reference_mode_rejected_independent_of_label(self):
        ref = TabularPolicy(2, 4)
        r = LatentReward.from_table({(1, 0): 5.0})
        data = gen_dataset(ref, r, 2000, 0.0, seed=0, rejected_from="reference")
        assert all(ex.chosen != ex.rejected for ex in data)

    def test_invalid_arguments(self):
        ref = TabularPolicy(3, 3)
        with pytest.raises(InvalidInputError):
            gen_dataset(ref, zero_reward(3), 0, 0.0, seed=0)
        with pytest.raises(InvalidInputError):
            gen_dataset(ref, zero_reward(3), 5, 1.5, seed=0)

    def test_overlap_prefix_len_never_full(self):
        assert overlap_prefix_len(1.0, 4) == 3
        assert overlap_prefix_len(0.5, 8) == 4
        assert overlap_prefix_len(0.0, 8) == 0


class TestChosenDistribution:
    def test_zero_reward_equals_reference(self):
        ref = TabularPolicy(3, 4, init_scale=1.0, init_seed=5)
        got = chosen_distribution(ref, zero_reward(3), (), resample_ties=False)
        want = dict(enumerate_seqs(ref, ()))
        for s, p in got.as_dict().items():
            assert p == pytest.approx(want[s], abs=1e-12)

    def test_two_sequence_hand_case(self):
        ref = TabularPolicy(2, 2)
        r = LatentReward.from_table({(0,): math.log(3), (1, 0): 0.0})
        got = chosen_distribution(ref, r, (), resample_ties=False).as_dict()
        assert got[(0,)] == pytest.approx(0.625, abs=1e-12)
        # the generator redraws identical pairs, so its winner law conditions on a != b
        assert chosen_distribution(ref, r, ()).as_dict()[(0,)] == pytest.approx(0.75, abs=1e-12)

    def test_three_sequence_against_pair_loops(self):
        ref = three_seq_policy()
        r = LatentReward.from_table({(0,): 1.0, (1, 0): 0.0, (2, 0): -0.5})
        got = chosen_distribution(ref, r, ()).probs
        np.testing.assert_allclose(got, CHOSEN_3SEQ, atol=1e-12)
        np.testing.assert_allclose(oracles.chosen_probs([0.5, 0.3, 0.2], [1.0, 0.0, -0.5]), CHOSEN_3SEQ, atol=1e-15)

    def test_deterministic_reference_point_mass(self):
        ref = TabularPolicy(3, 3)
        ref.set_row((), (), [-np.inf, 0.0, -np.inf])
        ref.set_row((), (1,), [0.0, -np.inf, -np.inf])
        got = chosen_distribution(ref, zero_reward(3), (), resample_ties=False)
        assert got.as_dict() == {(1, 0): 1.0}

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 0.9))
    def test_sums_to_one(self, seed, overlap):
        ref = TabularPolicy(3, 4, init_scale=1.0, init_seed=seed)
        r = LatentReward.feature_linear(np.random.default_rng(seed).standard_normal(3))
        assert chosen_distribution(ref, r, (), overlap).probs.sum() == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("overlap", [0.0, 0.5])
    def test_matches_empirical_winners(self, overlap):
        ref = TabularPolicy(2, 4, init_scale=1.0, init_seed=3)
        r = LatentReward.feature_linear([0.0, 1.0], scale=2.0)
        n = 100_000
        data = gen_dataset(ref, r, n, overlap, seed=9)
        dist = chosen_distribution(ref, r, (), overlap)
        counts = {s: 0 for s in dist.seqs}
        for ex in data:
            counts[ex.chosen] += 1
        obs = [counts[s] for s in dist.seqs]
        assert chisquare(obs, dist.probs * n).pvalue > 0.001
