"""Finite-difference verification of every objective's analytic gradient on
random small instances of both policy backends."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .losses import OBJECTIVES, LossSpec, loss_rm, pair_terms, policy_loss
from .prefdata import LatentReward, PreferenceExample
from .seeding import derive_seed
from .seqmodel import LogBilinearPolicy, Policy, TabularPolicy, sample

BACKENDS = ("tabular", "logbilinear")
TOLERANCE = 1e-5
FD_STEP = 1e-5
# denominators below this are treated as this, so near-zero gradients are
# compared in absolute terms
GRAD_FLOOR = 1e-4


@dataclass(frozen=True)
class Instance:
    spec: LossSpec
    policy: Policy
    ref: Policy
    example: PreferenceExample
    reward: LatentReward | None = None


@dataclass(frozen=True)
class CheckRow:
    objective: str
    backend: str
    max_rel_err: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def _policies(backend: str, rng: np.random.Generator, vocab: int, max_len: int, dim: int):
    if backend == "tabular":
        ref = TabularPolicy(vocab, max_len, init_scale=1.0, init_seed=int(rng.integers(2**62)))
        pol = TabularPolicy(vocab, max_len, init_scale=1.0, init_seed=int(rng.integers(2**62)))
        return pol, ref
    ref = LogBilinearPolicy.random(vocab, max_len, dim, rng, decay=float(rng.uniform(0.2, 0.9)), bias_scale=0.5)
    pol = ref.copy()
    pol.set_params(ref.get_params() + 0.3 * rng.standard_normal(ref.n_params))
    return pol, ref


def random_instance(
    objective: str, backend: str, rng: np.random.Generator, vocab: int = 5, max_len: int = 4, dim: int = 3
) -> Instance:
    """Random policy pair, preference example and hyperparameters.

    The reward-model objective has no policy; there the backend only decides
    which policy samples the two responses.
    """
    pol, ref = _policies(backend, rng, vocab, max_len, dim)
    prompt = tuple(int(t) for t in rng.integers(1, vocab, size=int(rng.integers(0, 3))))
    while True:
        chosen, rejected = sample(ref, prompt, rng), sample(ref, prompt, rng)
        if chosen != rejected:
            break
    spec = LossSpec(
        objective=objective,
        beta=float(rng.uniform(0.1, 2.0)),
        gamma=float(rng.uniform(0.0, 1.0)),
        lam=float(rng.uniform(0.0, 2.0)),
        delta=float(rng.uniform(0.0, 2.0)),
        tau=float(rng.uniform(0.5, 2.0)),
        length_normalize=bool(rng.integers(2)),
    )
    ex = PreferenceExample(prompt, chosen, rejected, 0.0, 0.0, 0.0)
    reward = None
    if objective == "rm":
        reward = LatentReward.feature_linear(rng.standard_normal(vocab), scale=float(rng.uniform(0.5, 3.0)))
    return Instance(spec, pol, ref, ex, reward)


def _near_kink(inst: Instance, margin: float = 1e-3) -> bool:
    """SLiC's hinge is not differentiable at zero; skip instances sitting on it."""
    if inst.spec.objective != "slic":
        return False
    t = pair_terms(inst.policy, inst.ref, inst.example, with_ref=False)
    uw, ul = t.policy_chosen, t.policy_rejected
    if inst.spec.length_normalize:
        uw, ul = uw / t.len_chosen, ul / t.len_rejected
    return abs(inst.spec.delta - uw + ul) < margin


def _value_and_grad(inst: Instance) -> tuple[Callable[[np.ndarray], float], np.ndarray, np.ndarray]:
    if inst.spec.objective == "rm":
        w0 = inst.reward.weights.copy()

        def value(w):
            return loss_rm(inst.spec, inst.reward.with_weights(w), inst.example).value

        return value, w0, loss_rm(inst.spec, inst.reward, inst.example).grad
    out = policy_loss(inst.spec, inst.policy, inst.ref, inst.example)
    theta0 = inst.policy.get_params()

    def value(theta):
        inst.policy.set_params(theta)
        try:
            return policy_loss(inst.spec, inst.policy, inst.ref, inst.example).value
        finally:
            inst.policy.set_params(theta0)

    return value, theta0, out.grad


def relative_error(inst: Instance, step: float = FD_STEP, flip_sign: bool = False) -> float:
    """Max-norm error of the analytic gradient against central differences,
    relative to the larger gradient norm (floored at ``GRAD_FLOOR``)."""
    value, x0, analytic = _value_and_grad(inst)
    if flip_sign:
        analytic = -analytic
    numeric = np.empty_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        numeric[i] = (value(xp) - value(xm)) / (2.0 * step)
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), GRAD_FLOOR)
    return float(np.max(np.abs(numeric - analytic))) / scale


def run(
    n_instances: int = 100,
    seed: int = 0,
    objectives: Sequence[str] = OBJECTIVES,
    backends: Sequence[str] = BACKENDS,
    flip_sign: str | None = None,
) -> list[CheckRow]:
    """Check every (objective, backend) combination on ``n_instances`` instances.

    ``flip_sign`` names an objective whose analytic gradient is negated, to
    confirm the suite detects a wrong gradient.
    """
    rows = []
    for obj in objectives:
        for backend in backends:
            rng = np.random.default_rng(derive_seed(seed, f"gradcheck:{obj}:{backend}"))
            worst = 0.0
            done = 0
            while done < n_instances:
                inst = random_instance(obj, backend, rng)
                if _near_kink(inst):
                    continue
                err = relative_error(inst, flip_sign=(obj == flip_sign))
                worst = err if math.isnan(err) else max(worst, err)
                done += 1
            rows.append(CheckRow(obj, backend, worst, n_instances))
    return rows


def format_table(rows: Sequence[CheckRow]) -> str:
    lines = [f"{'objective':<10} {'backend':<12} {'max_rel_err':>12}  result"]
    for r in rows:
        lines.append(f"{r.objective:<10} {r.backend:<12} {r.max_rel_err:>12.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
