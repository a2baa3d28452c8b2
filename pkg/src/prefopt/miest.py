"""Conditional mutual information on explicit discrete joints, and its NWJ and
InfoNCE variational lower bounds with tabular critics.

A :class:`DiscreteJoint` holds, for every prompt ``x``, a table
``P(Y=y, C=c | x)`` with ``c`` in {0, 1}. Critics are per-``x`` tables
``f(y, c)``, so the supremum over critics is exactly representable.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, InvalidInputError, TrainingError
from .seeding import as_generator

NORM_TOL = 1e-12
EXACT_INFONCE_CAP = 10**6


@dataclass
class DiscreteJoint:
    px: np.ndarray  # (n_x,)
    tables: list  # n_x arrays of shape (n_y, 2)

    def __post_init__(self):
        self.px = np.asarray(self.px, dtype=float)
        self.tables = [np.asarray(t, dtype=float) for t in self.tables]
        if self.px.ndim != 1 or len(self.tables) != self.px.size:
            raise InvalidInputError("need one table per x")
        if np.any(self.px < 0) or abs(self.px.sum() - 1.0) > NORM_TOL:
            raise InvalidInputError("p(x) must be non-negative and sum to 1")
        for i, t in enumerate(self.tables):
            if t.ndim != 2 or t.shape[1] != 2:
                raise InvalidInputError(f"table {i} must have shape (n_y, 2)")
            if np.any(t < 0) or abs(t.sum() - 1.0) > NORM_TOL:
                raise InvalidInputError(f"table {i} must be non-negative and sum to 1")

    @property
    def n_x(self) -> int:
        return self.px.size

    def marginals(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        t = self.tables[i]
        return t.sum(axis=1), t.sum(axis=0)

    def product(self, i: int) -> np.ndarray:
        py, pc = self.marginals(i)
        return np.outer(py, pc)

    @classmethod
    def from_json(cls, doc: dict) -> "DiscreteJoint":
        return cls([e["p"] for e in doc["x"]], [e["table"] for e in doc["x"]])

    def to_json(self) -> dict:
        return {"x": [{"p": float(p), "table": t.tolist()} for p, t in zip(self.px, self.tables)]}

    @classmethod
    def load(cls, path) -> "DiscreteJoint":
        return cls.from_json(json.loads(Path(path).read_text()))


def independent_joint(n_y: int = 2) -> DiscreteJoint:
    """Single prompt, Y uniform and independent of a uniform binary C."""
    return DiscreteJoint([1.0], [np.full((n_y, 2), 1.0 / (2 * n_y))])


def copy_joint() -> DiscreteJoint:
    """Single prompt, C uniform binary and Y = C."""
    return DiscreteJoint([1.0], [np.array([[0.5, 0.0], [0.0, 0.5]])])


def random_joint(rng, n_y: int = 3, n_x: int = 1) -> DiscreteJoint:
    g = as_generator(rng)
    px = g.dirichlet(np.ones(n_x))
    tables = [g.dirichlet(np.ones(2 * n_y)).reshape(n_y, 2) for _ in range(n_x)]
    return DiscreteJoint(px / px.sum(), [t / t.sum() for t in tables])


class TabularCritic:
    """Per-prompt critic tables ``f[x](y, c)``."""

    def __init__(self, values: Sequence):
        self.values = [np.array(v, dtype=float) for v in values]
        for v in self.values:
            if not np.all(np.isfinite(v)):
                raise InvalidInputError("critic entries must be finite")

    @classmethod
    def zeros(cls, joint: DiscreteJoint) -> "TabularCritic":
        return cls([np.zeros_like(t) for t in joint.tables])

    @classmethod
    def optimal(cls, joint: DiscreteJoint, floor: float = -50.0) -> "TabularCritic":
        """Log density ratio ``log P(y,c|x) / (P(y|x) P(c|x))``.

        Cells with zero joint mass get ``floor`` in place of minus infinity.
        """
        vals = []
        for i, t in enumerate(joint.tables):
            q = joint.product(i)
            with np.errstate(divide="ignore", invalid="ignore"):
                f = np.log(t) - np.log(q)
            vals.append(np.where(t > 0, f, floor))
        return cls(vals)

    def copy(self) -> "TabularCritic":
        return TabularCritic(self.values)


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def exact_cmi(joint: DiscreteJoint) -> float:
    """``E_x KL(P(Y,C|x) || P(Y|x) P(C|x))`` in nats, with ``0 log 0 = 0``."""
    return float(sum(px * _xlogy_ratio(t, joint.product(i)) for i, (px, t) in enumerate(zip(joint.px, joint.tables))))


class Estimate(NamedTuple):
    estimate: float
    stderr: float
    exact: float


def nwj_exact(joint: DiscreteJoint, critic: TabularCritic) -> float:
    """``E_P[f] - E_Q[exp f] + 1`` by enumeration, with ``Q`` the product of marginals."""
    total = 0.0
    for i, (px, t) in enumerate(zip(joint.px, joint.tables)):
        f = critic.values[i]
        total += px * (np.sum(t * f) - np.sum(joint.product(i) * np.exp(f)) + 1.0)
    return float(total)


def nwj_grad(joint: DiscreteJoint, critic: TabularCritic) -> list:
    return [px * (t - joint.product(i) * np.exp(critic.values[i]))
            for i, (px, t) in enumerate(zip(joint.px, joint.tables))]


def nwj_estimate(joint: DiscreteJoint, critic: TabularCritic, n_pos: int, n_neg: int, rng) -> Estimate:
    """Monte-Carlo NWJ bound with its exact-expectation counterpart.

    Prompts are drawn from ``p(x)``; each positive cell comes from the joint
    table of its prompt and each negative cell from the product of that
    prompt's marginals.
    """
    if n_pos < 1 or n_neg < 1:
        raise InvalidInputError("sample counts must be positive")
    g = as_generator(rng)
    pos = _sample_cells(joint, critic, n_pos, g, product=False)
    neg = np.exp(_sample_cells(joint, critic, n_neg, g, product=True))
    est = pos.mean() - neg.mean() + 1.0
    se = math.sqrt(pos.var(ddof=1) / n_pos + neg.var(ddof=1) / n_neg) if min(n_pos, n_neg) > 1 else math.nan
    return Estimate(float(est), se, nwj_exact(joint, critic))


def _sample_cells(joint, critic, n, g, product: bool) -> np.ndarray:
    xs = g.choice(joint.n_x, size=n, p=joint.px)
    out = np.empty(n)
    for i in range(joint.n_x):
        idx = np.flatnonzero(xs == i)
        if not idx.size:
            continue
        p = (joint.product(i) if product else joint.tables[i]).ravel()
        cells = g.choice(p.size, size=idx.size, p=p / p.sum())
        out[idx] = critic.values[i].ravel()[cells]
    return out


def _infonce_terms(f: np.ndarray, p: np.ndarray, q: np.ndarray, batch: int):
    """Enumerate (positive, negatives) tuples; returns probabilities and index tuples."""
    m = f.size
    if m**batch > EXACT_INFONCE_CAP:
        raise CapacityError(f"exact InfoNCE needs {m}**{batch} terms, above the cap")
    idx = np.array(list(itertools.product(range(m), repeat=batch)), dtype=int).reshape(-1, batch)
    prob = p[idx[:, 0]] * np.prod(q[idx[:, 1:]], axis=1)
    return idx, prob


def infonce_exact(joint: DiscreteJoint, critic: TabularCritic, batch: int = 2) -> float:
    """Exact expectation of ``log batch + f(pos) - logsumexp(f(pos), f(neg_1..neg_{batch-1}))``."""
    if batch < 2:
        raise InvalidInputError("batch must be at least 2")
    total = 0.0
    for i, (px, t) in enumerate(zip(joint.px, joint.tables)):
        f = critic.values[i].ravel()
        idx, prob = _infonce_terms(f, t.ravel(), joint.product(i).ravel(), batch)
        scores = f[idx]
        terms = scores[:, 0] - logsumexp(scores, axis=1)
        total += px * (math.log(batch) + float(np.sum(prob * terms)))
    return float(total)


def infonce_grad(joint: DiscreteJoint, critic: TabularCritic, batch: int = 2) -> list:
    grads = []
    for i, (px, t) in enumerate(zip(joint.px, joint.tables)):
        f = critic.values[i].ravel()
        idx, prob = _infonce_terms(f, t.ravel(), joint.product(i).ravel(), batch)
        scores = f[idx]
        soft = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
        g = np.bincount(idx[:, 0], weights=prob, minlength=f.size)
        g -= np.bincount(idx.ravel(), weights=(soft * prob[:, None]).ravel(), minlength=f.size)
        grads.append(px * g.reshape(t.shape))
    return grads


def infonce_estimate(joint: DiscreteJoint, critic: TabularCritic, batch: int, rng, n_anchors: int = 10_000,
                     exact: bool = True) -> Estimate:
    """Monte-Carlo InfoNCE: one positive and ``batch - 1`` product-of-marginals
    negatives per anchor. Never exceeds ``log(batch)``."""
    if batch < 2:
        raise InvalidInputError("batch must be at least 2")
    if n_anchors < 1:
        raise InvalidInputError("n_anchors must be positive")
    g = as_generator(rng)
    xs = g.choice(joint.n_x, size=n_anchors, p=joint.px)
    vals = np.empty(n_anchors)
    for i in range(joint.n_x):
        rows = np.flatnonzero(xs == i)
        if not rows.size:
            continue
        f = critic.values[i].ravel()
        p = joint.tables[i].ravel()
        q = joint.product(i).ravel()
        pos = g.choice(f.size, size=rows.size, p=p / p.sum())
        neg = g.choice(f.size, size=(rows.size, batch - 1), p=q / q.sum())
        scores = np.concatenate([f[pos][:, None], f[neg]], axis=1)
        vals[rows] = math.log(batch) + scores[:, 0] - logsumexp(scores, axis=1)
    se = float(vals.std(ddof=1) / math.sqrt(n_anchors)) if n_anchors > 1 else math.nan
    ex = infonce_exact(joint, critic, batch) if exact else math.nan
    return Estimate(float(vals.mean()), se, ex)


class TraceRow(NamedTuple):
    step: int
    bound: float
    grad_norm: float


def train_critic(
    joint: DiscreteJoint,
    bound: str = "nwj",
    steps: int = 2000,
    lr: float = 1.0,
    rng=0,
    batch: int = 2,
    init: TabularCritic | None = None,
) -> tuple[TabularCritic, list[TraceRow]]:
    """Full-batch gradient ascent on the exact-expectation bound.

    Both bounds are concave in the critic table, so a small enough ``lr``
    gives a non-decreasing trace. ``rng`` seeds a small random initial critic
    when ``init`` is not given; pass ``init=TabularCritic.zeros(joint)`` for a
    deterministic start.
    """
    if bound not in ("nwj", "infonce"):
        raise InvalidInputError(f"unknown bound {bound!r}")
    if init is None:
        g = as_generator(rng)
        init = TabularCritic([0.01 * g.standard_normal(t.shape) for t in joint.tables])
    critic = init.copy()
    value = (lambda c: nwj_exact(joint, c)) if bound == "nwj" else (lambda c: infonce_exact(joint, c, batch))
    gradient = (lambda c: nwj_grad(joint, c)) if bound == "nwj" else (lambda c: infonce_grad(joint, c, batch))
    trace = []
    for step in range(steps + 1):
        v = value(critic)
        grads = gradient(critic)
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(v) or not math.isfinite(gnorm):
            raise TrainingError(f"{bound} bound diverged at step {step}", step)
        trace.append(TraceRow(step, v, gnorm))
        if step == steps:
            break
        for f, g in zip(critic.values, grads):
            f += lr * g
    return critic, trace


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "bound", "grad_norm"])
        for row in trace:
            w.writerow([row.step, repr(row.bound), repr(row.grad_norm)])
