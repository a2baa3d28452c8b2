"""Preference objectives with analytic gradients.

Every policy objective is a function of four log-likelihoods: the policy's and
the reference's log-probability of the chosen and of the rejected response.
:func:`pair_loss` evaluates an objective on those scalars and returns the
derivatives with respect to the two policy terms; the parameter gradient is
then ``d_chosen * grad(l_w) + d_rejected * grad(l_l)``.

The reference policy is a constant: no gradient flows through it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, InvalidInputError, NumericError, ZeroProbabilityError
from .prefdata import LatentReward, PreferenceExample
from .seqmodel import Policy, TabularPolicy, _log_softmax, seq_logprob, seq_logprob_grad

OBJECTIVES = ("dpo", "infopo", "rm", "ipo", "cpo", "slic", "simpo")
POLICY_OBJECTIVES = tuple(o for o in OBJECTIVES if o != "rm")
USES_REFERENCE = ("dpo", "infopo", "ipo")

# the InfoPO ratio is computed as exp(min(log-ratio, RATIO_CLAMP_LOG))
RATIO_CLAMP_LOG = 30.0


@dataclass(frozen=True)
class LossSpec:
    """Objective selector and hyperparameters.

    Hyperparameters an objective does not use are kept but ignored. ``lam`` is
    the SFT weight of CPO/SLiC (``lambda`` in config files).
    """

    objective: str = "dpo"
    beta: float = 0.1
    gamma: float = 0.0
    lam: float = 1.0
    delta: float = 1.0
    tau: float = 1.0
    length_normalize: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(
                f"unknown objective {self.objective!r}; valid objectives: {', '.join(OBJECTIVES)}",
                key="objective",
            )
        if not self.beta > 0:
            raise ConfigError("beta must be positive", key="beta")
        if not self.tau > 0:
            raise ConfigError("tau must be positive", key="tau")
        for name in ("gamma", "lam", "delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", key=name)

    @classmethod
    def from_mapping(cls, doc: dict) -> "LossSpec":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f for f in cls.__dataclass_fields__}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown loss key {key!r}", key=key)
        if "objective" in doc:
            doc["objective"] = str(doc["objective"]).lower()
        return cls(**doc)

    def to_mapping(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        return doc

    def replace(self, **kw) -> "LossSpec":
        return LossSpec(**{**asdict(self), **kw})


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    diag: dict = field(default_factory=dict)
    clamped: bool = False


class PairTerms(NamedTuple):
    """Log-likelihoods of one example (raw, not length-normalised)."""

    policy_chosen: float
    policy_rejected: float
    ref_chosen: float
    ref_rejected: float
    len_chosen: int
    len_rejected: int


@dataclass(frozen=True)
class PairLoss:
    value: float
    d_chosen: float  # d value / d l_theta(y_w), raw log-likelihood
    d_rejected: float
    w_chosen: float  # coefficient of +grad l_w (normalised scale when normalising)
    w_rejected: float  # coefficient of -grad l_l
    clamped: bool = False


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def _check_finite(**terms) -> None:
    for name, val in terms.items():
        if not math.isfinite(val):
            raise NumericError(f"non-finite {name}: {val}")


def pair_loss(spec: LossSpec, t: PairTerms, objective: str | None = None) -> PairLoss:
    """Evaluate a policy objective on the scalar log-likelihood terms."""
    obj = objective or spec.objective
    beta = spec.beta
    norm = spec.length_normalize or obj == "simpo"
    sw = 1.0 / t.len_chosen if norm else 1.0
    sl = 1.0 / t.len_rejected if norm else 1.0
    uw = t.policy_chosen * sw if norm else t.policy_chosen
    ul = t.policy_rejected * sl if norm else t.policy_rejected

    if obj in USES_REFERENCE:
        rw = t.ref_chosen * sw if norm else t.ref_chosen
        rl = t.ref_rejected * sl if norm else t.ref_rejected
        if obj == "infopo" and rl == -math.inf:
            raise ZeroProbabilityError("reference probability of the rejected response is zero")
        _check_finite(policy_chosen=uw, ref_chosen=rw, ref_rejected=rl)
        if obj != "infopo":
            _check_finite(policy_rejected=ul)
        ratio_w = uw - rw
        ratio_l = ul - rl

    if obj == "dpo":
        z = beta * ratio_w - beta * ratio_l
        d = float(expit(-z))
        value = _softplus(-z)
        du_w, du_l = -beta * d, beta * d
    elif obj == "infopo":
        clamped = ratio_l > RATIO_CLAMP_LOG
        ratio = math.exp(min(ratio_l, RATIO_CLAMP_LOG))
        value = -uw + ratio
        du_w, du_l = -1.0, ratio
        return PairLoss(value, du_w * sw, du_l * sl, -du_w, du_l, clamped)
    elif obj == "ipo":
        h = ratio_w - ratio_l
        e = h - 1.0 / (2.0 * spec.tau)
        value = e * e
        du_w, du_l = 2.0 * e, -2.0 * e
    elif obj == "cpo":
        _check_finite(policy_chosen=uw, policy_rejected=ul)
        z = beta * (uw - ul)
        s = float(expit(-z))
        value = _softplus(-z) - spec.lam * uw
        du_w, du_l = -beta * s - spec.lam, beta * s
    elif obj == "slic":
        _check_finite(policy_chosen=uw, policy_rejected=ul)
        m = spec.delta - uw + ul
        active = 1.0 if m > 0 else 0.0
        value = max(0.0, m) - spec.lam * uw
        du_w, du_l = -active - spec.lam, active
    elif obj == "simpo":
        _check_finite(policy_chosen=uw, policy_rejected=ul)
        z = beta * uw - beta * ul - spec.gamma
        s = float(expit(-z))
        value = _softplus(-z)
        du_w, du_l = -beta * s, beta * s
    else:
        raise InvalidInputError(f"{obj!r} is not a policy objective")
    return PairLoss(value, du_w * sw, du_l * sl, -du_w, du_l)


def pair_terms(policy: Policy, ref_policy: Policy, ex: PreferenceExample, with_ref: bool = True) -> PairTerms:
    nan = math.nan
    return PairTerms(
        seq_logprob(policy, ex.prompt, ex.chosen),
        seq_logprob(policy, ex.prompt, ex.rejected),
        seq_logprob(ref_policy, ex.prompt, ex.chosen) if with_ref else nan,
        seq_logprob(ref_policy, ex.prompt, ex.rejected) if with_ref else nan,
        len(ex.chosen),
        len(ex.rejected),
    )


def policy_loss(
    spec: LossSpec, policy: Policy, ref_policy: Policy, example: PreferenceExample, objective: str | None = None
) -> LossOutput:
    obj = objective or spec.objective
    if obj == "rm":
        raise InvalidInputError("the reward-model loss takes a reward, not a policy; use loss_rm")
    policy.register(example.prompt, example.chosen)
    policy.register(example.prompt, example.rejected)
    terms = pair_terms(policy, ref_policy, example, with_ref=obj in USES_REFERENCE)
    pl = pair_loss(spec, terms, obj)
    gw = seq_logprob_grad(policy, example.prompt, example.chosen)
    gl = seq_logprob_grad(policy, example.prompt, example.rejected)
    grad = pl.d_chosen * gw + pl.d_rejected * gl
    return LossOutput(pl.value, grad, {"w_chosen": pl.w_chosen, "w_rejected": pl.w_rejected,
                                       "d_chosen": pl.d_chosen, "d_rejected": pl.d_rejected}, pl.clamped)


def loss_dpo(spec, policy, ref_policy, example) -> LossOutput:
    """``-log sigmoid(beta * (ratio_w - ratio_l))`` with log-ratios against the reference.

    ``diag["w_rejected"]`` is ``beta * d`` with ``d = sigmoid(beta*ratio_l - beta*ratio_w)``.
    """
    return policy_loss(spec, policy, ref_policy, example, "dpo")


def loss_infopo(spec, policy, ref_policy, example) -> LossOutput:
    """``-l_theta(y_w) + exp(l_theta(y_l) - l_ref(y_l))``.

    The gradient weight on the rejected response is ``pi_theta(y_l)/pi_ref(y_l)``,
    so its coefficient on ``grad pi_theta(y_l)`` is ``1/pi_ref(y_l)``. The ratio
    is clamped at ``exp(30)``; a clamped evaluation sets ``clamped`` and keeps
    the clamped ratio as the gradient weight.
    """
    return policy_loss(spec, policy, ref_policy, example, "infopo")


def loss_ipo(spec, policy, ref_policy, example) -> LossOutput:
    return policy_loss(spec, policy, ref_policy, example, "ipo")


def loss_cpo(spec, policy, ref_policy, example) -> LossOutput:
    return policy_loss(spec, policy, ref_policy, example, "cpo")


def loss_slic(spec, policy, ref_policy, example) -> LossOutput:
    return policy_loss(spec, policy, ref_policy, example, "slic")


def loss_simpo(spec, policy, ref_policy, example) -> LossOutput:
    return policy_loss(spec, policy, ref_policy, example, "simpo")


def loss_rm(spec: LossSpec, reward: LatentReward, example: PreferenceExample) -> LossOutput:
    """Bradley-Terry reward-model loss; the gradient is over the reward weights."""
    if reward.kind != "feature_linear":
        raise InvalidInputError("loss_rm needs a feature_linear reward")
    r_w = reward(example.prompt, example.chosen)
    r_l = reward(example.prompt, example.rejected)
    _check_finite(reward_chosen=r_w, reward_rejected=r_l)
    z = r_w - r_l
    s = float(expit(-z))
    feat = reward.features(example.prompt, example.chosen) - reward.features(example.prompt, example.rejected)
    return LossOutput(_softplus(-z), -s * reward.scale * feat, {"w_chosen": s, "w_rejected": s})


def loss_infonce_with_critic(f_w: float, f_l: float) -> LossOutput:
    """Two-term InfoNCE loss with one positive (chosen, c=1) and one negative.

    Evaluated in the contrastive form ``log(exp f_w + exp f_l) - f_w``;
    ``grad`` is the derivative with respect to ``(f_w, f_l)``.
    """
    _check_finite(f_w=f_w, f_l=f_l)
    value = float(np.logaddexp(f_w, f_l)) - f_w
    p_l = float(expit(f_l - f_w))
    return LossOutput(value, np.array([-p_l, p_l]), {"w_chosen": p_l, "w_rejected": p_l})


def dpo_critic(beta: float, policy: Policy, ref_policy: Policy, prompt, response) -> float:
    """Critic ``beta * log(pi_theta / pi_ref)`` under which InfoNCE reduces to DPO."""
    return beta * (seq_logprob(policy, prompt, response) - seq_logprob(ref_policy, prompt, response))


_DISPATCH = {
    "dpo": loss_dpo, "infopo": loss_infopo, "ipo": loss_ipo,
    "cpo": loss_cpo, "slic": loss_slic, "simpo": loss_simpo,
}


def loss(spec: LossSpec, policy: Policy, ref_policy: Policy, example: PreferenceExample) -> LossOutput:
    return _DISPATCH[spec.objective](spec, policy, ref_policy, example)


def implicit_margin(spec: LossSpec, t: PairTerms) -> float:
    """Chosen-minus-rejected implicit reward used for reward accuracy."""
    obj = spec.objective
    norm = spec.length_normalize or obj == "simpo"
    uw = t.policy_chosen / t.len_chosen if norm else t.policy_chosen
    ul = t.policy_rejected / t.len_rejected if norm else t.policy_rejected
    if obj in USES_REFERENCE:
        rw = t.ref_chosen / t.len_chosen if norm else t.ref_chosen
        rl = t.ref_rejected / t.len_rejected if norm else t.ref_rejected
        return spec.beta * (uw - rw) - spec.beta * (ul - rl)
    return spec.beta * uw - spec.beta * ul


def batch_loss(
    spec: LossSpec,
    policy: Policy,
    ref_policy: Policy,
    examples: Sequence[PreferenceExample],
    ref_cache: dict | None = None,
) -> tuple[LossOutput, int]:
    """Mean loss and gradient over ``examples``; also returns the clamp count.

    Identical triples are evaluated once and weighted by their count. Each
    distinct ``(prompt, response)`` has its log-likelihood and gradient
    computed once, and reductions run in first-occurrence order, so the result
    is deterministic for a given example order.
    """
    if not examples:
        raise InvalidInputError("empty batch")
    for ex in examples:
        policy.register(ex.prompt, ex.chosen)
        policy.register(ex.prompt, ex.rejected)
    return grouped_batch_loss(spec, policy, ref_policy, group_pairs(examples), ref_cache)


def grouped_batch_loss(
    spec: LossSpec,
    policy: Policy,
    ref_policy: Policy,
    counts: dict,
    ref_cache: dict | None = None,
) -> tuple[LossOutput, int]:
    """:func:`batch_loss` on pre-grouped ``{(prompt, chosen, rejected): count}``.

    Every response must already be registered with ``policy``.
    """
    need_ref = spec.objective in USES_REFERENCE
    ref_cache = {} if ref_cache is None else ref_cache
    lp: dict = {}

    def ell(key):
        if key not in lp:
            lp[key] = seq_logprob(policy, *key)
        return lp[key]

    def ref_ell(key):
        if key not in ref_cache:
            ref_cache[key] = seq_logprob(ref_policy, *key)
        return ref_cache[key]

    coef: dict = {}
    total = 0.0
    clamps = 0
    wc = wr = 0.0
    n = 0
    for (prompt, chosen, rejected), count in counts.items():
        kw, kl = (prompt, chosen), (prompt, rejected)
        t = PairTerms(
            ell(kw), ell(kl),
            ref_ell(kw) if need_ref else math.nan, ref_ell(kl) if need_ref else math.nan,
            len(chosen), len(rejected),
        )
        pl = pair_loss(spec, t)
        n += count
        total += count * pl.value
        clamps += count * pl.clamped
        wc += count * pl.w_chosen
        wr += count * pl.w_rejected
        coef[kw] = coef.get(kw, 0.0) + count * pl.d_chosen
        coef[kl] = coef.get(kl, 0.0) + count * pl.d_rejected
    if n == 0:
        raise InvalidInputError("empty batch")
    grad = np.zeros(policy.n_params)
    for key, c in coef.items():
        grad += c * seq_logprob_grad(policy, *key)
    out = LossOutput(total / n, grad / n, {"w_chosen": wc / n, "w_rejected": wr / n}, clamps > 0)
    return out, clamps


def group_pairs(examples: Sequence[PreferenceExample]) -> dict:
    """Count identical ``(prompt, chosen, rejected)`` triples, in first-occurrence order."""
    counts: dict = {}
    for ex in examples:
        key = (ex.prompt, ex.chosen, ex.rejected)
        counts[key] = counts.get(key, 0) + 1
    return counts


class ProfilePoint(NamedTuple):
    p_rejected: float
    w_rejected: float
    coefficient: float  # coefficient multiplying grad pi_theta(y_l | x)


def _scale_step(policy: TabularPolicy, prompt, response) -> tuple:
    """The deepest non-forced step of ``response``; its factor is what we rescale."""
    steps = [t for t in range(len(response)) if not policy.is_forced(t)]
    if not steps:
        raise InvalidInputError("response has no free generation step to rescale")
    t = steps[-1]
    return response[:t], response[t]


def grad_weight_profile(
    spec: LossSpec,
    policy: Policy,
    ref_policy: Policy,
    example: PreferenceExample,
    scale_steps: int = 6,
) -> list[ProfilePoint]:
    """Gradient weight on the rejected response as ``pi_theta(y_l|x)`` shrinks.

    Works on a copy of a tabular policy. At each step the probability of the
    rejected response is divided by 10 by shifting one logit on its path, and
    the loss diagnostics are recorded. The ``coefficient`` field is the factor
    in front of ``grad pi_theta(y_l|x)``: constant ``1/pi_ref(y_l|x)`` for
    InfoPO, ``beta * d / pi_theta(y_l|x)`` for DPO.
    """
    if not isinstance(policy, TabularPolicy):
        raise InvalidInputError("grad_weight_profile needs a TabularPolicy")
    pol = policy.copy()
    prompt, rejected = example.prompt, example.rejected
    prefix, tok = _scale_step(pol, prompt, rejected)
    out = []
    for k in range(scale_steps + 1):
        if k:
            row = pol.row(prompt, prefix)
            logp = _log_softmax(row)
            p_new = math.exp(logp[tok]) / 10.0
            others = np.delete(row, tok)
            log_rest = float(np.log(np.sum(np.exp(others - others.max())))) + others.max()
            row[tok] = math.log(p_new) - math.log1p(-p_new) + log_rest
            pol.set_row(prompt, prefix, row)
        res = policy_loss(spec, pol, ref_policy, example)
        p_l = math.exp(seq_logprob(pol, prompt, rejected))
        out.append(ProfilePoint(p_l, res.diag["w_rejected"], res.diag["d_rejected"] / p_l))
    return out
