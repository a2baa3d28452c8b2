"""Synthetic preference data labelled by a Bradley-Terry model over a latent reward."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import GenerationError, InvalidInputError
from .seeding import derive_seed
from .seqmodel import (
    DEFAULT_ENUM_CAP,
    Policy,
    SeqDistribution,
    TokenSeq,
    as_tokens,
    enumerate_distribution,
    sample,
)

SCHEMA = "prefopt.preference/1"
MAX_ATTEMPTS = 100
REJECTED_SOURCES = ("pair", "reference")


class LatentReward:
    """Deterministic reward ``r(x, y)``.

    ``table`` rewards look up ``(prompt, response)`` first, then ``response``
    alone, then fall back to ``default``. ``feature_linear`` rewards are
    ``scale * w . phi(y)`` where ``phi`` is the bag of response tokens divided
    by the response length.
    """

    def __init__(self, kind: str, *, table=None, weights=None, scale: float = 1.0, default: float = 0.0):
        if kind not in ("table", "feature_linear"):
            raise InvalidInputError(f"unknown reward kind {kind!r}")
        if not scale > 0:
            raise InvalidInputError("reward scale must be positive")
        self.kind = kind
        self.scale = float(scale)
        self.default = float(default)
        self.table: dict = {}
        self.weights = None
        if kind == "table":
            for key, val in (table or {}).items():
                self.table[_table_key(key)] = float(val)
        else:
            if weights is None:
                raise InvalidInputError("feature_linear reward needs a weight vector")
            self.weights = np.asarray(weights, dtype=float).copy()

    @classmethod
    def from_table(cls, table: Mapping, scale: float = 1.0, default: float = 0.0) -> "LatentReward":
        return cls("table", table=table, scale=scale, default=default)

    @classmethod
    def feature_linear(cls, weights, scale: float = 1.0) -> "LatentReward":
        return cls("feature_linear", weights=weights, scale=scale)

    @property
    def n_params(self) -> int:
        return 0 if self.weights is None else self.weights.size

    def features(self, prompt, response) -> np.ndarray:
        response = as_tokens(response)
        phi = np.zeros(self.weights.size)
        for t in response:
            phi[t] += 1.0
        return phi / len(response)

    def with_weights(self, weights) -> "LatentReward":
        return LatentReward.feature_linear(weights, self.scale)

    def __call__(self, prompt, response) -> float:
        if self.kind == "feature_linear":
            return self.scale * float(self.weights @ self.features(prompt, response))
        prompt, response = as_tokens(prompt), as_tokens(response)
        val = self.table.get((prompt, response), self.table.get(response, self.default))
        return self.scale * val

    def to_dict(self) -> dict:
        if self.kind == "feature_linear":
            return {"kind": self.kind, "scale": self.scale, "weights": self.weights.tolist()}
        entries = []
        for key, val in self.table.items():
            if len(key) == 2 and isinstance(key[0], tuple):
                entries.append({"prompt": list(key[0]), "response": list(key[1]), "value": val})
            else:
                entries.append({"response": list(key), "value": val})
        return {"kind": self.kind, "scale": self.scale, "default": self.default, "table": entries}

    @classmethod
    def from_dict(cls, doc: dict) -> "LatentReward":
        if doc["kind"] == "feature_linear":
            return cls.feature_linear(doc["weights"], doc.get("scale", 1.0))
        table = {}
        for e in doc.get("table", []):
            key = as_tokens(e["response"])
            if "prompt" in e:
                key = (as_tokens(e["prompt"]), key)
            table[key] = e["value"]
        return cls.from_table(table, doc.get("scale", 1.0), doc.get("default", 0.0))


def _table_key(key):
    if len(key) == 2 and not isinstance(key[0], (int, np.integer)):
        return (as_tokens(key[0]), as_tokens(key[1]))
    return as_tokens(key)


@dataclass(frozen=True)
class PreferenceExample:
    prompt: TokenSeq
    chosen: TokenSeq
    rejected: TokenSeq
    reward_chosen: float = 0.0
    reward_rejected: float = 0.0
    overlap_realized: float = 0.0
    # generation-time bookkeeping, not serialised
    first_chosen: bool | None = field(default=None, compare=False)

    def to_json(self) -> dict:
        return {
            "prompt": list(self.prompt),
            "chosen": list(self.chosen),
            "rejected": list(self.rejected),
            "reward_chosen": self.reward_chosen,
            "reward_rejected": self.reward_rejected,
            "overlap_realized": self.overlap_realized,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PreferenceExample":
        return cls(
            as_tokens(doc["prompt"]), as_tokens(doc["chosen"]), as_tokens(doc["rejected"]),
            float(doc.get("reward_chosen", 0.0)), float(doc.get("reward_rejected", 0.0)),
            float(doc.get("overlap_realized", 0.0)),
        )

    def swapped(self) -> "PreferenceExample":
        return PreferenceExample(
            self.prompt, self.rejected, self.chosen,
            self.reward_rejected, self.reward_chosen, self.overlap_realized,
        )


@dataclass
class PreferenceDataset:
    examples: list[PreferenceExample]
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def prompts(self) -> list[TokenSeq]:
        return list(dict.fromkeys(ex.prompt for ex in self.examples))

    def dumps(self) -> str:
        lines = [json.dumps(self.header)] if self.header else []
        lines += [json.dumps(ex.to_json()) for ex in self.examples]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "PreferenceDataset":
        header: dict = {}
        examples = []
        for i, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            doc = json.loads(line)
            if i == 0 and "schema" in doc:
                header = doc
            else:
                examples.append(PreferenceExample.from_json(doc))
        return cls(examples, header)

    @classmethod
    def read(cls, path) -> "PreferenceDataset":
        return cls.loads(Path(path).read_text())


def bt_preference_prob(reward_a: float, reward_b: float) -> float:
    """Bradley-Terry probability that ``a`` is preferred to ``b``."""
    if not (math.isfinite(reward_a) and math.isfinite(reward_b)):
        raise InvalidInputError(f"rewards must be finite, got ({reward_a}, {reward_b})")
    return float(expit(reward_a - reward_b))


def shared_prefix_len(a: Sequence[int], b: Sequence[int]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def overlap_prefix_len(overlap: float, length: int) -> int:
    """Tokens copied from a template of ``length`` tokens; never the whole template."""
    k = math.ceil(overlap * length - 1e-9)
    return max(0, min(k, length - 1))


def _partner(ref: Policy, prompt, template: TokenSeq, overlap: float, rng) -> TokenSeq:
    k = overlap_prefix_len(overlap, len(template)) if overlap > 0 else 0
    return sample(ref, prompt, rng, prefix=template[:k])


def _distinct_pair(ref, prompt, overlap, rng, attempts):
    for _ in range(attempts):
        a = sample(ref, prompt, rng)
        b = _partner(ref, prompt, a, overlap, rng)
        if a != b:
            return a, b
    raise GenerationError(f"could not draw two distinct responses for prompt {list(prompt)} "
                          f"in {attempts} attempts")


def generator_config_hash(ref_policy: Policy, reward: LatentReward, config: dict) -> str:
    doc = {"config": config, "reward": reward.to_dict(), "ref_policy": ref_policy.to_dict()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def gen_example(
    ref_policy: Policy,
    reward: LatentReward,
    prompt,
    overlap: float,
    rng: np.random.Generator,
    rejected_from: str = "pair",
    max_attempts: int = MAX_ATTEMPTS,
) -> PreferenceExample:
    prompt = ref_policy.check_prompt(prompt)
    pair_overlap = overlap if rejected_from == "pair" else 0.0
    a, b = _distinct_pair(ref_policy, prompt, pair_overlap, rng, max_attempts)
    ra, rb = reward(prompt, a), reward(prompt, b)
    first_wins = bool(rng.random() < bt_preference_prob(ra, rb))
    chosen, rejected = (a, b) if first_wins else (b, a)
    if rejected_from == "reference":
        # rejected response is a fresh reference draw, independent of the label
        for _ in range(max_attempts):
            rejected = _partner(ref_policy, prompt, chosen, overlap, rng)
            if rejected != chosen:
                break
        else:
            raise GenerationError(f"could not draw a rejected response distinct from the chosen "
                                  f"one for prompt {list(prompt)} in {max_attempts} attempts")
    shared = shared_prefix_len(chosen, rejected)
    return PreferenceExample(
        prompt, chosen, rejected,
        reward(prompt, chosen), reward(prompt, rejected),
        shared / min(len(chosen), len(rejected)),
        first_chosen=first_wins,
    )


def gen_dataset(
    ref_policy: Policy,
    reward: LatentReward,
    n: int,
    overlap: float,
    seed: int,
    prompts: Iterable[Sequence[int]] = ((),),
    rejected_from: str = "pair",
    max_attempts: int = MAX_ATTEMPTS,
) -> PreferenceDataset:
    """Sample ``n`` labelled pairs from ``ref_policy``.

    For each example a prompt is drawn uniformly from ``prompts`` and two
    responses are sampled from the reference policy. With ``overlap > 0`` the
    second response copies a prefix of ``ceil(overlap * len)`` tokens of the
    first (capped one short of the full response) and resamples the rest.
    Identical pairs are redrawn. The winner under the Bradley-Terry model
    becomes ``chosen``.

    ``rejected_from="reference"`` keeps the BT winner as ``chosen`` but draws
    the rejected response afresh from the reference policy, which is the
    sampling model under which the InfoPO objective targets the chosen
    distribution.

    Example ``i`` uses its own generator seeded from ``(seed, i)``, so the
    output is reproducible and independent of generation order.
    """
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    if not 0.0 <= overlap <= 1.0:
        raise InvalidInputError("overlap must lie in [0, 1]")
    if rejected_from not in REJECTED_SOURCES:
        raise InvalidInputError(f"rejected_from must be one of {REJECTED_SOURCES}")
    prompts = [ref_policy.check_prompt(p) for p in prompts]
    if not prompts:
        raise InvalidInputError("prompt set is empty")
    base = derive_seed(seed, "prefdata")
    examples = []
    for i in range(n):
        rng = np.random.default_rng([base, i])
        prompt = prompts[int(rng.integers(len(prompts)))]
        examples.append(gen_example(ref_policy, reward, prompt, overlap, rng, rejected_from, max_attempts))
    config = {
        "n": n, "overlap": overlap, "prompts": [list(p) for p in prompts],
        "rejected_from": rejected_from, "max_attempts": max_attempts,
    }
    header = {
        "schema": SCHEMA,
        "seed": int(seed),
        "vocab_size": ref_policy.vocab_size,
        "config_hash": generator_config_hash(ref_policy, reward, config),
    }
    return PreferenceDataset(examples, header)


def pair_distribution(
    ref_policy: Policy,
    prompt,
    overlap: float = 0.0,
    resample_ties: bool = True,
    cap: int = DEFAULT_ENUM_CAP,
) -> tuple[SeqDistribution, np.ndarray]:
    """Exact joint law of the ordered pair (first, second) drawn by the generator."""
    dist = enumerate_distribution(ref_policy, prompt, cap)
    p = dist.probs
    n = len(dist.seqs)
    if overlap > 0:
        prefix_mass: dict[TokenSeq, float] = {}
        for s, ps in zip(dist.seqs, p):
            for k in range(len(s)):
                prefix_mass[s[:k]] = prefix_mass.get(s[:k], 0.0) + ps
        joint = np.zeros((n, n))
        for i, a in enumerate(dist.seqs):
            pre = a[: overlap_prefix_len(overlap, len(a))]
            for j, b in enumerate(dist.seqs):
                if b[: len(pre)] == pre:
                    joint[i, j] = p[i] * p[j] / prefix_mass[pre]
    else:
        joint = np.outer(p, p)
    if resample_ties:
        np.fill_diagonal(joint, 0.0)
        total = joint.sum()
        if total <= 0:
            raise GenerationError(f"every pair collides for prompt {list(prompt)}")
        joint /= total
    return dist, joint


def chosen_distribution(
    ref_policy: Policy,
    reward: LatentReward,
    prompt,
    overlap: float = 0.0,
    resample_ties: bool = True,
    cap: int = DEFAULT_ENUM_CAP,
) -> SeqDistribution:
    """Exact distribution of the chosen response, by enumeration.

    Marginalises over pair sampling and the Bradley-Terry label. With
    ``resample_ties`` (the generator's behaviour) identical pairs are excluded;
    without it a pair ``(y, y)`` counts as ``y`` winning.
    """
    prompt = ref_policy.check_prompt(prompt)
    dist, joint = pair_distribution(ref_policy, prompt, overlap, resample_ties, cap)
    r = np.array([reward(prompt, s) for s in dist.seqs])
    win = expit(r[:, None] - r[None, :])  # win[i, j] = P(i beats j)
    chosen = (joint * win).sum(axis=1) + (joint * win.T).sum(axis=0)
    with np.errstate(divide="ignore"):
        logp = np.log(chosen / chosen.sum())
    return SeqDistribution(dist.seqs, logp)
