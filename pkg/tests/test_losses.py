import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefopt import gradcheck
from prefopt.errors import ConfigError, InvalidInputError, ZeroProbabilityError
from prefopt.losses import (
    OBJECTIVES,
    RATIO_CLAMP_LOG,
    LossSpec,
    PairTerms,
    batch_loss,
    dpo_critic,
    grad_weight_profile,
    loss_dpo,
    loss_infonce_with_critic,
    loss_infopo,
    loss_ipo,
    loss_rm,
    loss_simpo,
    pair_loss,
    policy_loss,
)
from prefopt.prefdata import LatentReward, PreferenceExample
from prefopt.seqmodel import TabularPolicy, policy_from_dict, seq_logprob

# frozen from oracles.py
NEG_LOG_SIGMOID_2 = 0.12692801104297249644
INFOPO_SCALAR = 1.1931471805599453094


def terms(lw, ll, rw=0.0, rl=0.0, nw=2, nl=2):
    return PairTerms(lw, ll, rw, rl, nw, nl)


def two_policies(seed=0, vocab=4, max_len=5):
    ref = TabularPolicy(vocab, max_len, init_scale=1.0, init_seed=seed)
    pol = TabularPolicy(vocab, max_len, init_scale=1.0, init_seed=seed + 1000)
    return pol, ref


EX = PreferenceExample((1,), (2, 3, 0), (2, 1, 0))


class TestDPO:
    def test_equal_policies_ln2(self):
        pol, ref = two_policies()
        assert loss_dpo(LossSpec("dpo", beta=0.3), ref, ref, EX).value == pytest.approx(math.log(2), abs=1e-15)

    def test_scalar_case(self):
        pl = pair_loss(LossSpec("dpo", beta=1.0), terms(1.0, -1.0))
        assert pl.value == pytest.approx(NEG_LOG_SIGMOID_2, abs=1e-15)
        assert pl.value == pytest.approx(0.126928, abs=1e-6)

    @given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.01, 5))
    def test_label_antisymmetry(self, a, b, beta):
        spec = LossSpec("dpo", beta=beta)
        v = pair_loss(spec, terms(a, b)).value
        w = pair_loss(spec, terms(b, a)).value
        # sigma(z) + sigma(-z) = 1
        assert math.exp(-v) + math.exp(-w) == pytest.approx(1.0, abs=1e-12)

    def test_step_zero_coefficient(self):
        pol, ref = two_policies()
        spec = LossSpec("dpo", beta=0.1)
        prof = grad_weight_profile(spec, ref.copy(), ref, EX, scale_steps=0)
        p_ref = math.exp(seq_logprob(ref, EX.prompt, EX.rejected))
        assert prof[0].coefficient == pytest.approx(0.1 * 0.5 / p_ref, rel=1e-12)


class TestInfoPO:
    def test_equal_policies(self):
        _, ref = two_policies()
        got = loss_infopo(LossSpec("infopo"), ref, ref, EX).value
        assert got == pytest.approx(-seq_logprob(ref, EX.prompt, EX.chosen) + 1.0, abs=1e-12)

    def test_scalar_case(self):
        t = terms(math.log(0.5), math.log(0.1), rl=math.log(0.2))
        assert pair_loss(LossSpec("infopo"), t).value == pytest.approx(INFOPO_SCALAR, abs=1e-14)

    @given(st.floats(-30, 0), st.floats(-30, 0), st.floats(-30, 0))
    def test_lower_bound(self, lw, ll, rl):
        assert pair_loss(LossSpec("infopo"), terms(lw, ll, rl=rl)).value >= -lw

    def test_clamp(self):
        pl = pair_loss(LossSpec("infopo"), terms(-1.0, -1.0, rl=-40.0))
        assert pl.clamped
        assert pl.value == pytest.approx(1.0 + math.exp(RATIO_CLAMP_LOG))

    def test_zero_reference_probability(self):
        with pytest.raises(ZeroProbabilityError):
            pair_loss(LossSpec("infopo"), terms(-1.0, -1.0, rl=-math.inf))

    def test_beta_does_not_change_value(self):
        pol, ref = two_policies()
        a = loss_infopo(LossSpec("infopo", beta=0.1), pol, ref, EX)
        b = loss_infopo(LossSpec("infopo", beta=3.0), pol, ref, EX)
        assert a.value == b.value


class TestRewardModel:
    def test_equal_rewards_ln2(self):
        r = LatentReward.feature_linear([0.0, 1.0, 1.0, 0.0])
        ex = PreferenceExample((), (1, 0), (2, 0))
        assert loss_rm(LossSpec("rm"), r, ex).value == pytest.approx(math.log(2), abs=1e-15)

    def test_saturation(self):
        r = LatentReward.feature_linear([0.0, 100.0, 0.0])
        ex = PreferenceExample((), (1, 0), (2, 0))
        # r(1,0) - r(2,0) = 50
        assert loss_rm(LossSpec("rm"), r, ex).value <= 1e-9


class TestInfoNCE:
    def test_equal_critics_ln2(self):
        assert loss_infonce_with_critic(0.7, 0.7).value == pytest.approx(math.log(2), abs=1e-15)

    def test_scalar_case(self):
        assert loss_infonce_with_critic(2.0, 0.0).value == pytest.approx(NEG_LOG_SIGMOID_2, abs=1e-15)

    @pytest.mark.parametrize("backend", ["tabular", "logbilinear"])
    def test_dpo_identity(self, backend):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(200):
            inst = gradcheck.random_instance("dpo", backend, rng)
            spec, pol, ref, ex = inst.spec, inst.policy, inst.ref, inst.example
            spec = spec.replace(length_normalize=False)
            fw = dpo_critic(spec.beta, pol, ref, ex.prompt, ex.chosen)
            fl = dpo_critic(spec.beta, pol, ref, ex.prompt, ex.rejected)
            worst = max(worst, abs(loss_dpo(spec, pol, ref, ex).value - loss_infonce_with_critic(fw, fl).value))
        assert worst <= 1e-12


class TestBaselines:
    def test_ipo_minimum(self):
        tau = 0.4
        h = 1.0 / (2 * tau)
        assert pair_loss(LossSpec("ipo", tau=tau), terms(h, 0.0)).value == 0.0

    def test_simpo_equal_averages(self):
        spec = LossSpec("simpo", beta=2.0, gamma=0.0)
        assert pair_loss(spec, terms(-3.0, -6.0, nw=2, nl=4)).value == pytest.approx(math.log(2), abs=1e-15)

    def test_simpo_normalises(self):
        pol, ref = two_policies()
        v = loss_simpo(LossSpec("simpo", beta=1.0), pol, ref, EX).value
        aw = seq_logprob(pol, EX.prompt, EX.chosen) / 3
        al = seq_logprob(pol, EX.prompt, EX.rejected) / 3
        assert v == pytest.approx(-math.log(1 / (1 + math.exp(-(aw - al)))), abs=1e-12)

    def test_ipo_ignores_beta(self):
        pol, ref = two_policies()
        assert loss_ipo(LossSpec("ipo", beta=0.01), pol, ref, EX).value == \
            loss_ipo(LossSpec("ipo", beta=2.0), pol, ref, EX).value


class TestGradients:
    @pytest.mark.parametrize("objective", OBJECTIVES)
    @pytest.mark.parametrize("backend", gradcheck.BACKENDS)
    def test_finite_differences(self, objective, backend):
        rows = gradcheck.run(20, seed=1, objectives=[objective], backends=[backend])
        assert rows[0].passed, rows[0].max_rel_err

    def test_sign_flip_detected(self):
        rows = gradcheck.run(3, seed=0, objectives=["infopo"], backends=["tabular"], flip_sign="infopo")
        assert not rows[0].passed


class TestProfile:
    def test_infopo_constant_coefficient(self):
        _, ref = two_policies(seed=4)
        spec = LossSpec("infopo")
        prof = grad_weight_profile(spec, ref.copy(), ref, EX, scale_steps=6)
        p_ref = math.exp(seq_logprob(ref, EX.prompt, EX.rejected))
        coefs = [p.coefficient for p in prof]
        assert prof[0].p_rejected / prof[-1].p_rejected == pytest.approx(1e6, rel=1e-6)
        for c in coefs:
            assert c == pytest.approx(1 / p_ref, rel=1e-9)

    def test_dpo_slope_in_saturated_regime(self):
        _, ref = two_policies(seed=4)
        spec = LossSpec("dpo", beta=0.01)
        prof = grad_weight_profile(spec, ref.copy(), ref, EX, scale_steps=6)
        x = np.log([1 / p.p_rejected for p in prof])
        y = np.log([p.coefficient for p in prof])
        assert abs(np.polyfit(x, y, 1)[0] - 1.0) <= 0.05

    def test_needs_tabular(self):
        from prefopt.seqmodel import LogBilinearPolicy

        pol = LogBilinearPolicy.random(4, 5, 2, 0)
        with pytest.raises(InvalidInputError):
            grad_weight_profile(LossSpec("dpo"), pol, pol, EX)


class TestBatch:
    def test_mean_of_examples(self):
        pol, ref = two_policies()
        exs = [EX, PreferenceExample((1,), (3, 0), (1, 1, 0)), EX]
        spec = LossSpec("dpo", beta=0.5)
        for ex in exs:
            pol.register(ex.prompt, ex.chosen)
            pol.register(ex.prompt, ex.rejected)
        out, _ = batch_loss(spec, pol, ref, exs)
        singles = [policy_loss(spec, pol, ref, ex) for ex in exs]
        assert out.value == pytest.approx(np.mean([s.value for s in singles]), abs=1e-14)
        np.testing.assert_allclose(out.grad, np.mean([s.grad for s in singles], axis=0), atol=1e-14)

    def test_representation_invariance(self):
        pol, ref = two_policies()
        pol.register(EX.prompt, EX.chosen)
        pol.register(EX.prompt, EX.rejected)
        back = policy_from_dict(json.loads(json.dumps(pol.to_dict())))
        for obj in ("dpo", "infopo", "ipo", "cpo", "slic", "simpo"):
            spec = LossSpec(obj)
            assert policy_loss(spec, pol, ref, EX).value == policy_loss(spec, back, ref, EX).value

    def test_empty_batch(self):
        pol, ref = two_policies()
        with pytest.raises(InvalidInputError):
            batch_loss(LossSpec(), pol, ref, [])


class TestSpec:
    def test_unknown_objective_lists_valid(self):
        with pytest.raises(ConfigError) as err:
            LossSpec("bogus")
        for name in OBJECTIVES:
            assert name in str(err.value)

    def test_lambda_alias(self):
        assert LossSpec.from_mapping({"objective": "cpo", "lambda": 0.3}).lam == 0.3

    def test_rm_rejects_policy(self):
        pol, ref = two_policies()
        with pytest.raises(InvalidInputError):
            policy_loss(LossSpec("rm"), pol, ref, EX)
