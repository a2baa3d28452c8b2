"""Exact computations on enumerable response spaces: the KL-regularised
optimal policy, its partition function, the regularised reward objective,
reverse KL and a brute-force maximiser used to validate the closed form.

Policies may be passed as :class:`~prefopt.seqmodel.Policy` objects,
:class:`~prefopt.seqmodel.SeqDistribution` objects, mappings from sequence to
probability, or arrays aligned with the reference policy's enumeration order.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, NamedTuple

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInputError, SupportError
from .seeding import as_generator
from .seqmodel import DEFAULT_ENUM_CAP, Policy, SeqDistribution, enumerate_distribution

# Stand-in for an objective of minus infinity in exported tables.
NEG_INF_SENTINEL = -1.0e300


def _space(ref_policy, prompt, cap: int = DEFAULT_ENUM_CAP) -> SeqDistribution:
    if isinstance(ref_policy, SeqDistribution):
        return ref_policy
    return enumerate_distribution(ref_policy, prompt, cap)


def as_probs(dist, space: SeqDistribution, prompt=()) -> np.ndarray:
    """Probabilities of ``dist`` aligned with ``space.seqs``."""
    if isinstance(dist, Policy):
        dist = enumerate_distribution(dist, prompt)
    if isinstance(dist, SeqDistribution):
        if dist.seqs == space.seqs:
            return dist.probs
        dist = dist.as_dict()
    if isinstance(dist, Mapping):
        extra = set(map(tuple, dist)) - set(space.seqs)
        if any(dist[s] > 0 for s in extra):
            raise SupportError("distribution has mass outside the enumerated space", sorted(extra))
        p = np.array([float(dist.get(s, 0.0)) for s in space.seqs])
    else:
        p = np.asarray(dist, dtype=float)
        if p.shape != (len(space.seqs),):
            raise InvalidInputError(f"expected {len(space.seqs)} probabilities, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidInputError("probabilities must be finite and non-negative")
    return p


def _rewards(reward: Callable, space: SeqDistribution, prompt) -> np.ndarray:
    r = np.array([reward(prompt, s) for s in space.seqs], dtype=float)
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("reward must be finite on the whole space")
    return r


def _check_beta(beta: float) -> None:
    if not beta > 0 or not math.isfinite(beta):
        raise InvalidInputError(f"beta must be positive and finite, got {beta}")


def log_partition_fn(ref_policy, reward, beta: float, prompt=()) -> float:
    _check_beta(beta)
    space = _space(ref_policy, prompt)
    return float(logsumexp(space.logprobs + _rewards(reward, space, prompt) / beta))


def partition_fn(ref_policy, reward, beta: float, prompt=()) -> float:
    """``Z = sum_y ref(y) exp(r(y) / beta)`` by enumeration."""
    return math.exp(log_partition_fn(ref_policy, reward, beta, prompt))


def optimal_policy(ref_policy, reward, beta: float, prompt=()) -> SeqDistribution:
    """Closed-form maximiser ``ref(y) exp(r(y) / beta) / Z``."""
    _check_beta(beta)
    space = _space(ref_policy, prompt)
    logits = space.logprobs + _rewards(reward, space, prompt) / beta
    return SeqDistribution(list(space.seqs), logits - logsumexp(logits))


class ObjectiveValue(NamedTuple):
    value: float
    infinite: bool  # true when value is the minus-infinity sentinel


def _objective_from_probs(p: np.ndarray, ref_logp: np.ndarray, r: np.ndarray, beta: float) -> float:
    mask = p > 0
    kl = float(np.sum(p[mask] * (np.log(p[mask]) - ref_logp[mask])))
    return float(np.dot(p, r)) - beta * kl


def rlhf_objective(policy, ref_policy, reward, beta: float, prompt=()) -> ObjectiveValue:
    """``E_policy[r] - beta * KL(policy || ref)`` computed exactly.

    Mass on sequences the reference never produces yields the sentinel
    :data:`NEG_INF_SENTINEL` with ``infinite`` set.
    """
    _check_beta(beta)
    space = _space(ref_policy, prompt)
    p = as_probs(policy, space, prompt)
    if np.any((p > 0) & np.isneginf(space.logprobs)):
        return ObjectiveValue(NEG_INF_SENTINEL, True)
    return ObjectiveValue(_objective_from_probs(p, space.logprobs, _rewards(reward, space, prompt), beta), False)


def _pair_probs(p, q, prompt) -> tuple[np.ndarray, np.ndarray, list]:
    """Align two distributions on a common list of outcomes."""
    for anchor in (q, p):
        if isinstance(anchor, (Policy, SeqDistribution)):
            space = _space(anchor, prompt)
            return as_probs(p, space, prompt), as_probs(q, space, prompt), space.seqs
    if isinstance(p, Mapping) or isinstance(q, Mapping):
        keys = sorted(set(map(tuple, p)) | set(map(tuple, q)))
        space = SeqDistribution(keys, np.zeros(len(keys)))
        return as_probs(p, space), as_probs(q, space), keys
    pa, qa = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if pa.shape != qa.shape or pa.ndim != 1:
        raise InvalidInputError("probability vectors must have matching 1-d shapes")
    if np.any(pa < 0) or np.any(qa < 0):
        raise InvalidInputError("probabilities must be non-negative")
    return pa, qa, list(range(pa.size))


def reverse_kl(policy_p, policy_q, prompt=()) -> float:
    """``KL(p || q)`` over the enumerated space, with ``0 log 0 = 0``."""
    p, q, labels = _pair_probs(policy_p, policy_q, prompt)
    mask = p > 0
    bad = mask & (q <= 0)
    if np.any(bad):
        raise SupportError("p puts mass where q is zero", [labels[i] for i in np.flatnonzero(bad)])
    return max(0.0, float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


def total_variation(policy_p, policy_q, prompt=()) -> float:
    p, q, _ = _pair_probs(policy_p, policy_q, prompt)
    return 0.5 * float(np.abs(p - q).sum())


def simplex_grid(n: int, step: float = 1e-3) -> np.ndarray:
    """All points of the probability simplex in ``n`` coordinates on a regular grid,
    in lexicographic order."""
    m = int(round(1.0 / step))
    if abs(m * step - 1.0) > 1e-12:
        raise InvalidInputError("grid step must divide 1")
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        i = np.arange(m + 1)
        return np.stack([i, m - i], axis=1) / m
    if n == 3:
        i, j = np.triu_indices(m + 1)
        # i <= j; coordinates (i, j - i, m - j)
        order = np.lexsort((j - i, i))
        i, j = i[order], j[order]
        return np.stack([i, j - i, m - j], axis=1) / m
    raise InvalidInputError("exhaustive grids are limited to 3 sequences")


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


class BruteForceResult(NamedTuple):
    probs: np.ndarray
    value: float
    method: str


def brute_force_optimum(
    ref_policy,
    reward,
    beta: float,
    prompt=(),
    step: float = 1e-3,
    restarts: int = 8,
    iters: int = 5000,
    lr: float = 0.05,
    rng=0,
) -> BruteForceResult:
    """Maximise the regularised objective without the closed form.

    Up to 3 sequences: exhaustive simplex grid, lowest index wins ties.
    Larger spaces: projected gradient ascent from random restarts.
    """
    _check_beta(beta)
    space = _space(ref_policy, prompt)
    r = _rewards(reward, space, prompt)
    ref_logp = space.logprobs
    n = len(space.seqs)
    if n <= 3:
        grid = simplex_grid(n, step)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(grid > 0, np.log(np.where(grid > 0, grid, 1.0)) - ref_logp, 0.0)
        vals = grid @ r - beta * np.sum(grid * logs, axis=1)
        vals = np.where(np.any((grid > 0) & np.isneginf(ref_logp), axis=1), -np.inf, vals)
        best = int(np.argmax(vals))
        return BruteForceResult(grid[best], float(vals[best]), "grid")
    g = as_generator(rng)
    best_p, best_v = None, -np.inf
    for _ in range(restarts):
        p = g.dirichlet(np.ones(n))
        for _ in range(iters):
            grad = r - beta * (np.log(np.maximum(p, 1e-300)) - ref_logp + 1.0)
            p = project_simplex(p + lr * grad)
        v = _objective_from_probs(p, ref_logp, r, beta)
        if v > best_v:
            best_p, best_v = p, v
    return BruteForceResult(best_p, float(best_v), "projected-gradient")


class ReparamCheck(NamedTuple):
    deviation: float
    log_partition: float
    policy_deviation: float | None


def density_ratio_reparam_check(policy, ref_policy, critic, prompt=()) -> ReparamCheck:
    """Check the log-ratio reparameterisation of a critic.

    Builds ``pi = ref exp(f) / Z`` and returns the largest
    ``|log(pi / ref) - (f - log Z)|`` over the support of the reference.
    Z is computed explicitly, never assumed to be 1. When ``policy`` is given,
    ``policy_deviation`` reports the same quantity with ``policy`` in place of
    ``pi``; for an inexact critic this is the reported discrepancy.

    ``critic`` is a callable ``(prompt, seq) -> float``, a mapping from
    sequence to value, or an array aligned with the reference enumeration.
    """
    space = _space(ref_policy, prompt)
    if callable(critic):
        f = np.array([critic(prompt, s) for s in space.seqs], dtype=float)
    elif isinstance(critic, Mapping):
        f = np.array([critic[s] for s in space.seqs], dtype=float)
    else:
        f = np.asarray(critic, dtype=float)
    support = np.isfinite(space.logprobs)
    if not np.all(np.isfinite(f[support])):
        raise InvalidInputError("critic must be finite on the reference support")
    log_z = float(logsumexp(space.logprobs[support] + f[support]))
    target = f[support] - log_z
    log_opt = space.logprobs[support] + f[support] - log_z
    deviation = float(np.max(np.abs((log_opt - space.logprobs[support]) - target)))
    policy_dev = None
    if policy is not None:
        p = as_probs(policy, space, prompt)
        with np.errstate(divide="ignore"):
            lp = np.log(p[support])
        policy_dev = float(np.max(np.abs((lp - space.logprobs[support]) - target)))
    return ReparamCheck(deviation, log_z, policy_dev)


def mode_seeking_surrogate(policy, chosen, ref_policy, prompt=()) -> float:
    """``E_policy[log(chosen / ref)] - KL(policy || ref)``.

    Equals ``-KL(policy || chosen)`` up to a policy-independent constant.
    """
    space = _space(ref_policy, prompt)
    p = as_probs(policy, space, prompt)
    c = as_probs(chosen, space, prompt)
    mask = p > 0
    if np.any(mask & (c <= 0)):
        raise SupportError("policy puts mass where chosen is zero",
                           [space.seqs[i] for i in np.flatnonzero(mask & (c <= 0))])
    return float(np.sum(p[mask] * (np.log(c[mask]) - space.logprobs[mask]))) - reverse_kl(p, space, prompt)
