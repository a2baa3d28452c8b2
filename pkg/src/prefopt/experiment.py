"""Build the objects of a run (reference policy, reward, dataset, training
config) from a resolved config. Every random draw is seeded from the
config's single ``seed`` through :func:`~prefopt.seeding.derive_seed`."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import config as configmod
from .errors import ConfigError
from .prefdata import LatentReward, PreferenceDataset, chosen_distribution, gen_dataset
from .seeding import derive_seed
from .seqmodel import (
    LogBilinearPolicy,
    Policy,
    SeqDistribution,
    TabularPolicy,
    enumerate_seqs,
    space_size,
)
from .trainer import TrainConfig, TrainResult, train_full

log = logging.getLogger(__name__)

# reverse KL is tracked automatically up to this many responses per prompt
AUTO_REVERSE_KL_MAX = 1024


def build_reference(cfg: Mapping) -> Policy:
    p = cfg["policy"]
    seed = derive_seed(cfg["seed"], "reference")
    if p["backend"] == "tabular":
        ref = TabularPolicy(
            p["vocab_size"], p["max_len"], eos=p["eos"],
            init_scale=p["init_scale"], init_seed=seed, eos_bias=p["eos_bias"],
        )
        if p["uniform_sequences"]:
            for prompt in _prompts(cfg):
                seqs = [s for s, _ in enumerate_seqs(ref, prompt)]
                ref.set_sequence_distribution(prompt, {s: 1.0 / len(seqs) for s in seqs})
        return ref
    if p["uniform_sequences"]:
        raise ConfigError("policy.uniform_sequences needs the tabular backend", "policy.uniform_sequences")
    return LogBilinearPolicy.random(
        p["vocab_size"], p["max_len"], p["embed_dim"], seed, eos=p["eos"], decay=p["decay"],
        embed_scale=p["embed_scale"], weight_scale=p["weight_scale"], bias_scale=p["bias_scale"],
    )


def _prompts(cfg: Mapping) -> list[tuple]:
    return [tuple(int(t) for t in prompt) for prompt in cfg["data"]["prompts"]]


def build_reward(cfg: Mapping, ref: Policy) -> LatentReward:
    """Latent reward from the ``reward`` table.

    ``feature_linear`` uses the given weights or standard normal ones;
    ``modes`` gives ``mode_reward`` to the listed response indices (in
    enumeration order, for every prompt) and ``default`` elsewhere.
    """
    r = cfg["reward"]
    if r["kind"] == "feature_linear":
        weights = r["weights"]
        if not weights:
            rng = np.random.default_rng(derive_seed(cfg["seed"], "reward"))
            weights = rng.standard_normal(ref.vocab_size)
        if len(weights) != ref.vocab_size:
            raise ConfigError("reward.weights needs one entry per token", "reward.weights")
        return LatentReward.feature_linear(np.asarray(weights, dtype=float), scale=r["scale"])
    if r["kind"] == "modes":
        table = {}
        for prompt in _prompts(cfg):
            seqs = [s for s, _ in enumerate_seqs(ref, prompt)]
            for i in r["modes"]:
                if not 0 <= i < len(seqs):
                    raise ConfigError(f"reward mode index {i} is outside the response space", "reward.modes")
                table[(prompt, seqs[i])] = float(r["mode_reward"])
        return LatentReward.from_table(table, scale=r["scale"], default=r["default"])
    raise ConfigError("reward.kind 'table' needs an explicit table; use 'modes' in config files", "reward.kind")


def build_dataset(cfg: Mapping, ref: Policy, reward: LatentReward) -> PreferenceDataset:
    d = cfg["data"]
    if d["path"]:
        return PreferenceDataset.read(d["path"])
    return gen_dataset(
        ref, reward, d["n"], d["overlap"], cfg["seed"],
        prompts=_prompts(cfg), rejected_from=d["rejected_from"],
    )


def build_train_config(cfg: Mapping) -> TrainConfig:
    return TrainConfig.from_mapping(configmod.train_mapping(cfg), configmod.loss_spec(cfg))


def chosen_distributions(cfg: Mapping, ref: Policy, reward: LatentReward,
                         data: PreferenceDataset) -> dict[tuple, SeqDistribution] | None:
    """Exact chosen distribution per prompt, or ``None`` when not tracked."""
    mode = cfg["train"]["reverse_kl"]
    if mode == "off" or cfg["data"]["path"]:
        return None
    size = space_size(ref.vocab_size, ref.max_len)
    if mode == "auto" and size > AUTO_REVERSE_KL_MAX:
        return None
    overlap = cfg["data"]["overlap"] if cfg["data"]["rejected_from"] == "pair" else 0.0
    return {p: chosen_distribution(ref, reward, p, overlap) for p in dict.fromkeys(ex.prompt for ex in data)}


@dataclass
class Experiment:
    cfg: dict
    reference: Policy
    reward: LatentReward
    data: PreferenceDataset
    train_config: TrainConfig
    chosen: dict | None

    def run(self) -> TrainResult:
        return train_full(self.reference, self.reference, self.data, self.train_config, chosen=self.chosen)


def build(cfg: Mapping) -> Experiment:
    """Reference, reward, data and training settings for a resolved config.

    The trainable policy starts as a copy of the reference.
    """
    ref = build_reference(cfg)
    reward = build_reward(cfg, ref)
    data = build_dataset(cfg, ref, reward)
    return Experiment(dict(cfg), ref, reward, data, build_train_config(cfg), chosen_distributions(cfg, ref, reward, data))


def load_experiment(path_or_preset: str | Path, seed: int | None = None, **overrides) -> Experiment:
    cfg = configmod.load(path_or_preset, seed)
    if overrides:
        cfg = configmod.with_overrides(cfg, **overrides)
    return build(cfg)


def sweep_points(cfg: Mapping) -> list[dict]:
    """Cartesian product of the sweep axes, in a fixed order.

    Axis order is objective, beta, lr, seed. ``sweep.beta`` may map objective
    names to their own grids; objectives without an entry keep the configured
    beta.
    """
    sw = cfg["sweep"]
    objectives = sw.get("objective", [cfg["loss"]["objective"]])
    lrs = sw.get("lr", [None])
    seeds = sw.get("seed", [None])
    points = []
    for obj in objectives:
        betas = sw.get("beta", [None])
        if isinstance(betas, Mapping):
            betas = betas.get(obj, [None])
        for beta in betas:
            for lr in lrs:
                for seed in seeds:
                    points.append({"objective": obj, "beta": beta, "lr": lr, "seed": seed})
    return points


def point_config(cfg: Mapping, point: Mapping) -> dict:
    """Resolved config for one sweep point; the sweep table is dropped."""
    doc = {k: v for k, v in cfg.items() if k != "sweep"}
    loss = dict(doc["loss"], objective=point["objective"])
    if point["beta"] is not None:
        loss["beta"] = point["beta"]
    train = dict(doc["train"])
    if point["lr"] is not None:
        train["lr"] = point["lr"]
    doc = dict(doc, loss=loss, train=train)
    if point["seed"] is not None:
        doc["seed"] = point["seed"]
    doc.pop("preset", None)
    return configmod.resolve(doc)


def point_name(index: int, point: Mapping) -> str:
    parts = [f"run-{index:03d}", point["objective"]]
    if point["beta"] is not None:
        parts.append(f"beta{point['beta']:g}")
    if point["lr"] is not None:
        parts.append(f"lr{point['lr']:g}")
    if point["seed"] is not None:
        parts.append(f"seed{point['seed']}")
    return "-".join(parts)
