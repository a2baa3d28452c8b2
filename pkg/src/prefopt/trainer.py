"""Gradient-based training of a policy on a preference dataset, with the
likelihood trajectory statistics used to study chosen/rejected dynamics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, NumericError, TrainingError
from .losses import LossSpec, PairTerms, group_pairs, grouped_batch_loss, implicit_margin, pair_loss
from .oracle import reverse_kl
from .prefdata import PreferenceDataset, PreferenceExample
from .seeding import derive_seed
from .seqmodel import Policy, SeqDistribution, enumerate_distribution, policy_from_dict, seq_logprob

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("constant", "cosine")
TRAJECTORY_COLUMNS = (
    "step", "loss", "chosen_avg_logp", "rejected_avg_logp", "margin",
    "reward_accuracy", "reverse_kl", "clamp_count",
)


@dataclass(frozen=True)
class TrainConfig:
    objective: LossSpec = field(default_factory=LossSpec)
    optimizer: str = "adam"
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 5
    warmup_frac: float = 0.0
    schedule: str = "constant"
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {', '.join(OPTIMIZERS)}", "optimizer")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {', '.join(SCHEDULES)}", "schedule")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be finite and non-negative", "lr")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1", "batch_size")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1", "epochs")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1]", "warmup_frac")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1", "eval_every")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)", "betas")
        if not self.eps > 0:
            raise ConfigError("eps must be positive", "eps")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @classmethod
    def from_mapping(cls, doc: Mapping, objective: LossSpec | None = None) -> "TrainConfig":
        names = {f.name for f in fields(cls)} - {"objective"}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown training key {unknown[0]!r}", unknown[0])
        kw = dict(doc)
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        return cls(objective=objective or LossSpec(), **kw)

    def to_mapping(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "objective"}
        out["betas"] = list(self.betas)
        return out

    def total_steps(self, n_examples: int) -> int:
        return self.epochs * math.ceil(n_examples / self.batch_size)


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate for update ``step`` (0-based): linear warmup, then constant or cosine."""
    warm = math.ceil(cfg.warmup_frac * total)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


class Optimizer:
    """SGD or Adam on a flat parameter vector."""

    def __init__(self, cfg: TrainConfig, n_params: int):
        self.kind = cfg.optimizer
        self.beta1, self.beta2 = cfg.betas
        self.eps = cfg.eps
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)

    def update(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        if self.kind == "sgd":
            return params - lr * grad
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": self.kind, "t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}

    def load_state_dict(self, doc: dict) -> None:
        self.t = int(doc["t"])
        self.m = np.asarray(doc["m"], dtype=float)
        self.v = np.asarray(doc["v"], dtype=float)


@dataclass
class TrajectoryRecord:
    step: int
    loss: float
    chosen_avg_logp: float
    rejected_avg_logp: float
    margin: float
    reward_accuracy: float
    reverse_kl: float | None
    clamp_count: int
    chosen_seq_logp: float = math.nan
    rejected_seq_logp: float = math.nan


@dataclass
class TrainTrajectory:
    records: list[TrajectoryRecord] = field(default_factory=list)
    objective: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> TrajectoryRecord:
        return self.records[i]

    @property
    def initial(self) -> TrajectoryRecord:
        return self.records[0]

    @property
    def final(self) -> TrajectoryRecord:
        return self.records[-1]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in self.records:
            w.writerow([
                r.step, repr(r.loss), repr(r.chosen_avg_logp), repr(r.rejected_avg_logp), repr(r.margin),
                repr(r.reward_accuracy), "" if r.reverse_kl is None else repr(r.reverse_kl), r.clamp_count,
            ])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path, objective: str = "") -> "TrainTrajectory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and tuple(rows[0]) != TRAJECTORY_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected trajectory columns")
        recs = [
            TrajectoryRecord(
                int(r["step"]), float(r["loss"]), float(r["chosen_avg_logp"]), float(r["rejected_avg_logp"]),
                float(r["margin"]), float(r["reward_accuracy"]),
                None if r["reverse_kl"] == "" else float(r["reverse_kl"]), int(r["clamp_count"]),
            )
            for r in rows
        ]
        return cls(recs, objective)


def _eval_terms(policy: Policy, ref_policy: Policy, data: Sequence[PreferenceExample], ref_cache: dict,
                counts: dict | None = None):
    """Pair terms for each distinct triple, with its multiplicity."""
    cache: dict = {}

    def ell(key):
        if key not in cache:
            cache[key] = seq_logprob(policy, *key)
        return cache[key]

    def ref_ell(key):
        if key not in ref_cache:
            ref_cache[key] = seq_logprob(ref_policy, *key)
        return ref_cache[key]

    out = []
    counts = group_pairs(data) if counts is None else counts
    for (prompt, chosen, rejected), count in counts.items():
        kw, kl = (prompt, chosen), (prompt, rejected)
        out.append((PairTerms(ell(kw), ell(kl), ref_ell(kw), ref_ell(kl), len(chosen), len(rejected)), count))
    return out


def reward_accuracy(policy: Policy, ref_policy: Policy, data: Sequence[PreferenceExample], spec: LossSpec,
                    ref_cache: dict | None = None) -> float:
    """Fraction of examples whose implicit chosen score strictly exceeds the rejected one.

    Ties count as misses, so a policy equal to its reference scores 0.
    """
    if len(data) == 0:
        raise InvalidInputError("reward accuracy needs at least one example")
    terms = _eval_terms(policy, ref_policy, data, {} if ref_cache is None else ref_cache)
    return sum(c for t, c in terms if implicit_margin(spec, t) > 0) / len(data)


def _prompt_weights(data: Sequence[PreferenceExample]) -> dict:
    counts: dict = {}
    for ex in data:
        counts[ex.prompt] = counts.get(ex.prompt, 0) + 1
    return {p: c / len(data) for p, c in counts.items()}


def mean_reverse_kl(policy: Policy, chosen: Mapping, weights: Mapping) -> float:
    """Prompt-frequency weighted ``KL(policy || chosen)``."""
    total = 0.0
    for prompt, w in weights.items():
        total += w * reverse_kl(enumerate_distribution(policy, prompt), chosen[prompt], prompt)
    return total


def evaluate(
    policy: Policy,
    ref_policy: Policy,
    data: Sequence[PreferenceExample],
    spec: LossSpec,
    step: int,
    clamp_count: int = 0,
    chosen: Mapping | None = None,
    ref_cache: dict | None = None,
    counts: dict | None = None,
) -> TrajectoryRecord:
    """Full-dataset statistics for one trajectory record.

    ``counts`` optionally supplies ``data`` already grouped by triple.
    """
    ref_cache = {} if ref_cache is None else ref_cache
    terms = _eval_terms(policy, ref_policy, data, ref_cache, counts)
    n = len(data)
    loss = sum(c * pair_loss(spec, t).value for t, c in terms) / n
    chosen_avg = sum(c * t.policy_chosen / t.len_chosen for t, c in terms) / n
    rejected_avg = sum(c * t.policy_rejected / t.len_rejected for t, c in terms) / n
    acc = sum(c for t, c in terms if implicit_margin(spec, t) > 0) / n
    rkl = None
    if chosen is not None:
        rkl = mean_reverse_kl(policy, chosen, _prompt_weights(data))
    return TrajectoryRecord(
        step=step,
        loss=loss,
        chosen_avg_logp=chosen_avg,
        rejected_avg_logp=rejected_avg,
        margin=chosen_avg - rejected_avg,
        reward_accuracy=acc,
        reverse_kl=rkl,
        clamp_count=clamp_count,
        chosen_seq_logp=sum(c * t.policy_chosen for t, c in terms) / n,
        rejected_seq_logp=sum(c * t.policy_rejected for t, c in terms) / n,
    )


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([derive_seed(seed, "batch-order"), epoch])
    return rng.permutation(n)


@dataclass
class TrainResult:
    policy: Policy
    trajectory: TrainTrajectory
    optimizer: Optimizer
    steps: int


def train(
    policy: Policy,
    ref_policy: Policy,
    data: PreferenceDataset | Sequence[PreferenceExample],
    cfg: TrainConfig,
    chosen: Mapping[tuple, SeqDistribution] | None = None,
    copy: bool = True,
) -> tuple[Policy, TrainTrajectory]:
    """Train ``policy`` against the frozen ``ref_policy``; see :func:`train_full`."""
    res = train_full(policy, ref_policy, data, cfg, chosen=chosen, copy=copy)
    return res.policy, res.trajectory


def train_full(
    policy: Policy,
    ref_policy: Policy,
    data: PreferenceDataset | Sequence[PreferenceExample],
    cfg: TrainConfig,
    chosen: Mapping[tuple, SeqDistribution] | None = None,
    copy: bool = True,
) -> TrainResult:
    """Run the configured optimiser and record the trajectory.

    Parameters
    ----------
    policy, ref_policy
        Trainable policy and frozen reference; must share vocabulary and
        maximum length.
    data
        Non-empty preference examples.
    cfg
        Optimiser, schedule and objective settings.
    chosen
        Optional prompt to chosen-distribution map. When given (enumerable
        spaces only), every record carries the reverse KL to it.
    copy
        Train a copy of ``policy`` instead of mutating it.

    Records are taken before the first update, after every ``eval_every``
    updates, and after the last update.
    """
    examples = list(data)
    if not examples:
        raise InvalidInputError("cannot train on an empty dataset")
    if (policy.vocab_size, policy.max_len) != (ref_policy.vocab_size, ref_policy.max_len):
        raise InvalidInputError("policy and reference must share vocabulary size and maximum length")
    if cfg.objective.objective == "rm":
        raise InvalidInputError("the reward-model objective trains a reward, not a policy")
    policy = policy.copy() if copy else policy
    for ex in examples:
        policy.register(ex.prompt, ex.chosen)
        policy.register(ex.prompt, ex.rejected)
    spec = cfg.objective
    n = len(examples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    opt = Optimizer(cfg, policy.n_params)
    ref_cache: dict = {}
    clamps = 0
    all_counts = group_pairs(examples)
    traj = TrainTrajectory([evaluate(policy, ref_policy, examples, spec, 0, 0, chosen, ref_cache, all_counts)],
                           spec.objective)
    full_batch = per_epoch == 1
    step = 0
    for epoch in range(cfg.epochs):
        # a single full batch needs no shuffling; its grouping is reused every epoch
        order = None if full_batch else batch_order(cfg.seed, epoch, n)
        for b in range(per_epoch):
            if full_batch:
                counts = all_counts
            else:
                counts = group_pairs([examples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]])
            last_good = policy.get_params()
            try:
                out, c = grouped_batch_loss(spec, policy, ref_policy, counts, ref_cache)
            except NumericError as exc:
                raise TrainingError(f"numeric failure at step {step}: {exc}", step, last_good) from exc
            if not math.isfinite(out.value) or not np.all(np.isfinite(out.grad)):
                raise TrainingError(f"non-finite loss at step {step}", step, last_good)
            clamps += c
            new = opt.update(last_good, out.grad, lr_at(cfg, step, total))
            if not np.all(np.isfinite(new)):
                raise TrainingError(f"non-finite parameters after step {step}", step, last_good)
            policy.set_params(new)
            step += 1
            if step % cfg.eval_every == 0 or step == total:
                try:
                    rec = evaluate(policy, ref_policy, examples, spec, step, clamps, chosen, ref_cache, all_counts)
                except NumericError as exc:
                    raise TrainingError(f"numeric failure at step {step}: {exc}", step, last_good) from exc
                if not math.isfinite(rec.loss):
                    raise TrainingError(f"non-finite loss at step {step}", step, last_good)
                traj.records.append(rec)
        log.debug("epoch %d done, loss %.6f", epoch, traj.final.loss)
    return TrainResult(policy, traj, opt, step)


def save_checkpoint(path, policy: Policy, optimizer: Optimizer | None = None, step: int | None = None) -> None:
    """Policy JSON plus optional optimiser state."""
    doc = {"policy": policy.to_dict()}
    if optimizer is not None:
        doc["optimizer"] = optimizer.state_dict()
    if step is not None:
        doc["step"] = step
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> tuple[Policy, dict | None]:
    doc = json.loads(Path(path).read_text())
    return policy_from_dict(doc["policy"]), doc.get("optimizer")


def dynamics_experiment(
    policy: Policy,
    ref_policy: Policy,
    data: PreferenceDataset | Sequence[PreferenceExample],
    cfg: TrainConfig,
    objectives: Sequence[LossSpec | str],
    chosen: Mapping | None = None,
) -> dict[str, TrainTrajectory]:
    """Train each objective from the same initial policy, data and seed.

    ``objectives`` holds loss specs or objective names; names reuse the other
    settings of ``cfg.objective``.
    """
    out = {}
    for obj in objectives:
        spec = cfg.objective.replace(objective=obj) if isinstance(obj, str) else obj
        _, traj = train(policy, ref_policy, data, replace(cfg, objective=spec), chosen=chosen)
        out[spec.objective] = traj
    return out
