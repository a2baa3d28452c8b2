"""Toy autoregressive policies with exact sequence log-likelihoods.

Two backends share one interface:

* :class:`TabularPolicy` keeps an independent logit row for every
  ``(prompt, prefix)`` context. Sequences never share parameters except through
  common prefixes, which makes every quantity exactly enumerable.
* :class:`LogBilinearPolicy` scores the next token with shared token
  embeddings, so updating one sequence moves the likelihood of every sequence
  that uses the same tokens.

A response is a tuple of token ids that ends with the end-of-sequence id. At
most ``max_len`` tokens are generated, EOS included; the ``max_len``-th token is
forced to EOS with probability one, which keeps the response space finite and
exactly normalised.

All probabilities are handled as natural-log values in float64.
"""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from .errors import CapacityError, InvalidInputError
from .seeding import as_generator, derive_seed

DEFAULT_ENUM_CAP = 10**6
# unregistered tabular rows are regenerated from a hash; cache this many
DEFAULT_ROW_CACHE = 1 << 16

TokenSeq = tuple[int, ...]
ContextKey = tuple[TokenSeq, TokenSeq]


def as_tokens(seq: Iterable[int]) -> TokenSeq:
    return tuple(int(t) for t in seq)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # plain numpy; scipy's logsumexp has a large per-call overhead on short rows
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


class Policy(ABC):
    """A conditional distribution over responses given a prompt."""

    backend: str = ""

    def __init__(self, vocab_size: int, max_len: int, eos: int = 0):
        if vocab_size < 2:
            raise InvalidInputError("vocab_size must be at least 2")
        if max_len < 1:
            raise InvalidInputError("max_len must be at least 1")
        if not 0 <= eos < vocab_size:
            raise InvalidInputError(f"eos id {eos} outside vocabulary of size {vocab_size}")
        self.vocab_size = int(vocab_size)
        self.max_len = int(max_len)
        self.eos = int(eos)

    # -- validation -------------------------------------------------------

    def check_prompt(self, prompt: Sequence[int]) -> TokenSeq:
        prompt = as_tokens(prompt)
        for t in prompt:
            if not 0 <= t < self.vocab_size:
                raise InvalidInputError(f"prompt token id {t} outside [0, {self.vocab_size})")
        return prompt

    def check_response(self, response: Sequence[int]) -> TokenSeq:
        response = as_tokens(response)
        if not response:
            raise InvalidInputError("response is empty; it must end with EOS")
        if len(response) > self.max_len:
            raise InvalidInputError(
                f"response length {len(response)} exceeds max_len {self.max_len}"
            )
        for t in response:
            if not 0 <= t < self.vocab_size:
                raise InvalidInputError(f"response token id {t} outside [0, {self.vocab_size})")
        if response[-1] != self.eos or response.count(self.eos) != 1:
            raise InvalidInputError("EOS must appear exactly once, as the final token")
        return response

    def is_forced(self, step: int) -> bool:
        """Whether generation step ``step`` (0-based) is the forced-EOS horizon."""
        return step == self.max_len - 1

    # -- distribution -----------------------------------------------------

    def next_logprobs(self, prompt: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        """Log-probabilities of the next token after ``prompt + prefix``."""
        prompt = self.check_prompt(prompt)
        prefix = as_tokens(prefix)
        if len(prefix) >= self.max_len:
            raise InvalidInputError("prefix already reaches max_len")
        if self.is_forced(len(prefix)):
            out = np.full(self.vocab_size, -np.inf)
            out[self.eos] = 0.0
            return out
        return _log_softmax(self._logits(prompt, prefix))

    def token_logprobs(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        """Per-step log-probabilities of a response (0.0 at a forced step)."""
        prompt = self.check_prompt(prompt)
        response = self.check_response(response)
        return self._token_logprobs(prompt, response)

    @abstractmethod
    def _logits(self, prompt: TokenSeq, prefix: TokenSeq) -> np.ndarray: ...

    @abstractmethod
    def _token_logprobs(self, prompt: TokenSeq, response: TokenSeq) -> np.ndarray: ...

    @abstractmethod
    def _logprob_grad(self, prompt: TokenSeq, response: TokenSeq) -> np.ndarray: ...

    # -- parameters -------------------------------------------------------

    def register(self, prompt: Sequence[int], response: Sequence[int]) -> None:
        """Materialise any lazily-created parameters that ``response`` touches.

        This never changes the distribution. It only fixes the layout of the
        flat parameter vector, so call it for every sequence of interest
        before comparing gradients or creating optimiser state.
        """

    @property
    @abstractmethod
    def n_params(self) -> int: ...

    @abstractmethod
    def get_params(self) -> np.ndarray: ...

    @abstractmethod
    def set_params(self, params: np.ndarray) -> None: ...

    @abstractmethod
    def copy(self) -> "Policy": ...

    @abstractmethod
    def to_dict(self) -> dict: ...


class TabularPolicy(Policy):
    """One logit row per ``(prompt, prefix)`` context.

    Rows are created lazily. An unregistered context uses its default row,
    ``init_logit + init_scale * N(0, 1)`` plus ``eos_bias`` on the EOS entry.
    The noise comes from a generator seeded by the context itself, so the
    distribution does not depend on the order in which rows are materialised.

    The flat parameter vector is the ``(n_rows, vocab_size)`` logit table in
    row-major order, rows in registration order.
    """

    backend = "tabular"

    def __init__(
        self,
        vocab_size: int,
        max_len: int,
        eos: int = 0,
        init_logit: float = 0.0,
        init_scale: float = 0.0,
        init_seed: int = 0,
        eos_bias: float = 0.0,
    ):
        super().__init__(vocab_size, max_len, eos)
        self.init_logit = float(init_logit)
        self.eos_bias = float(eos_bias)
        self.init_scale = float(init_scale)
        self.init_seed = int(init_seed)
        self._index: dict[ContextKey, int] = {}
        self._keys: list[ContextKey] = []
        self._table = np.zeros((8, self.vocab_size))
        self._defaults: dict[ContextKey, np.ndarray] = {}
        self._lock = threading.Lock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def contexts(self) -> list[ContextKey]:
        return list(self._keys)

    def default_row(self, key: ContextKey) -> np.ndarray:
        cached = self._defaults.get(key)
        if cached is not None:
            return cached.copy()
        row = np.full(self.vocab_size, self.init_logit)
        row[self.eos] += self.eos_bias
        if self.init_scale:
            rng = np.random.default_rng(derive_seed(self.init_seed, repr(key)))
            row = row + self.init_scale * rng.standard_normal(self.vocab_size)
        if len(self._defaults) >= DEFAULT_ROW_CACHE:
            self._defaults.clear()
        self._defaults[key] = row
        return row.copy()

    def row(self, prompt: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        key = (as_tokens(prompt), as_tokens(prefix))
        idx = self._index.get(key)
        if idx is None:
            return self.default_row(key)
        return self._table[idx].copy()

    def _ensure(self, key: ContextKey) -> int:
        idx = self._index.get(key)
        if idx is not None:
            return idx
        with self._lock:
            idx = self._index.get(key)
            if idx is not None:
                return idx
            idx = len(self._keys)
            if idx == self._table.shape[0]:
                grown = np.zeros((2 * idx, self.vocab_size))
                grown[:idx] = self._table
                self._table = grown
            self._table[idx] = self.default_row(key)
            self._keys.append(key)
            self._index[key] = idx
            return idx

    def set_row(self, prompt: Sequence[int], prefix: Sequence[int], logits) -> None:
        logits = np.asarray(logits, dtype=float)
        if logits.shape != (self.vocab_size,):
            raise InvalidInputError(f"row must have shape ({self.vocab_size},)")
        self._table[self._ensure((as_tokens(prompt), as_tokens(prefix)))] = logits

    def set_sequence_distribution(self, prompt: Sequence[int], dist: dict) -> None:
        """Set rows so that the policy reproduces ``dist`` (sequence -> prob) exactly.

        ``dist`` must give positive probability to every response in the
        enumerable space for ``prompt``.
        """
        prompt = self.check_prompt(prompt)
        probs = {self.check_response(s): float(p) for s, p in dist.items()}
        space = [s for s, _ in _enumerate_tree(self, prompt, DEFAULT_ENUM_CAP, use_policy=False)]
        if set(space) != set(probs) or min(probs.values()) <= 0.0:
            raise InvalidInputError("distribution must be positive on the whole response space")
        total = sum(probs.values())
        # mass flowing through each prefix
        mass: dict[TokenSeq, float] = {}
        for s, p in probs.items():
            for k in range(len(s)):
                mass[s[:k]] = mass.get(s[:k], 0.0) + p / total
        for prefix, m in mass.items():
            if self.is_forced(len(prefix)):
                continue
            cond = np.empty(self.vocab_size)
            for v in range(self.vocab_size):
                child = prefix + (v,)
                cond[v] = probs[child] / total if v == self.eos else mass[child]
            self.set_row(prompt, prefix, np.log(cond / m))

    def register(self, prompt, response) -> None:
        prompt = self.check_prompt(prompt)
        response = self.check_response(response)
        for t in range(len(response)):
            if not self.is_forced(t):
                self._ensure((prompt, response[:t]))

    def _logits(self, prompt, prefix):
        return self.row(prompt, prefix)

    def _token_logprobs(self, prompt, response):
        out = np.zeros(len(response))
        for t, tok in enumerate(response):
            if self.is_forced(t):
                continue
            out[t] = _log_softmax(self.row(prompt, response[:t]))[tok]
        return out

    def _logprob_grad(self, prompt, response):
        self.register(prompt, response)
        grad = np.zeros((len(self._keys), self.vocab_size))
        for t, tok in enumerate(response):
            if self.is_forced(t):
                continue
            idx = self._index[(prompt, response[:t])]
            grad[idx] -= np.exp(_log_softmax(self._table[idx]))
            grad[idx, tok] += 1.0
        return grad.ravel()

    @property
    def n_params(self) -> int:
        return len(self._keys) * self.vocab_size

    def get_params(self) -> np.ndarray:
        return self._table[: len(self._keys)].ravel().copy()

    def set_params(self, params) -> None:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise InvalidInputError(f"expected {self.n_params} parameters, got {params.shape}")
        self._table[: len(self._keys)] = params.reshape(-1, self.vocab_size)

    def copy(self) -> "TabularPolicy":
        new = TabularPolicy(
            self.vocab_size, self.max_len, self.eos, self.init_logit, self.init_scale, self.init_seed,
            self.eos_bias,
        )
        new._index = dict(self._index)
        new._keys = list(self._keys)
        new._table = self._table.copy()
        return new

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "eos": self.eos,
            "params": {
                "init_logit": self.init_logit,
                "init_scale": self.init_scale,
                "init_seed": self.init_seed,
                "eos_bias": self.eos_bias,
                "contexts": [[list(p), list(q)] for p, q in self._keys],
                "logits": self.get_params().tolist(),
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularPolicy":
        p = doc["params"]
        pol = cls(
            doc["vocab_size"], doc["max_len"], doc.get("eos", 0),
            p.get("init_logit", 0.0), p.get("init_scale", 0.0), p.get("init_seed", 0),
            p.get("eos_bias", 0.0),
        )
        for prompt, prefix in p["contexts"]:
            pol._ensure((as_tokens(prompt), as_tokens(prefix)))
        pol.set_params(np.asarray(p["logits"], dtype=float))
        return pol


class LogBilinearPolicy(Policy):
    """Log-bilinear next-token model with shared token embeddings.

    The context ``c = prompt + prefix`` is summarised by an exponentially
    decayed sum of its embeddings, ``s = sum_i decay**(|c|-1-i) E[c_i]``, and
    the next-token logits are ``E @ W @ s + b``. The same embedding matrix
    serves as input and output representation.

    Flat parameter layout: ``E`` (vocab_size x embed_dim, row-major), then
    ``W`` (embed_dim x embed_dim, row-major), then ``b`` (vocab_size).
    """

    backend = "logbilinear"

    def __init__(
        self,
        vocab_size: int,
        max_len: int,
        embed_dim: int,
        eos: int = 0,
        decay: float = 0.5,
        embeddings=None,
        context_weights=None,
        output_bias=None,
    ):
        super().__init__(vocab_size, max_len, eos)
        if embed_dim < 1:
            raise InvalidInputError("embed_dim must be positive")
        self.embed_dim = int(embed_dim)
        self.decay = float(decay)
        V, d = self.vocab_size, self.embed_dim
        self._theta = np.zeros(V * d + d * d + V)
        if embeddings is not None:
            self.E[...] = np.asarray(embeddings, dtype=float).reshape(V, d)
        if context_weights is not None:
            self.W[...] = np.asarray(context_weights, dtype=float).reshape(d, d)
        if output_bias is not None:
            self.b[...] = np.asarray(output_bias, dtype=float).reshape(V)

    @classmethod
    def random(
        cls,
        vocab_size: int,
        max_len: int,
        embed_dim: int,
        rng,
        eos: int = 0,
        decay: float = 0.5,
        embed_scale: float = 0.5,
        weight_scale: float = 0.5,
        bias_scale: float = 0.0,
    ) -> "LogBilinearPolicy":
        g = as_generator(rng)
        V, d = vocab_size, embed_dim
        return cls(
            V, max_len, d, eos=eos, decay=decay,
            embeddings=embed_scale * g.standard_normal((V, d)),
            context_weights=weight_scale / np.sqrt(d) * g.standard_normal((d, d)),
            output_bias=bias_scale * g.standard_normal(V),
        )

    @property
    def E(self) -> np.ndarray:
        V, d = self.vocab_size, self.embed_dim
        return self._theta[: V * d].reshape(V, d)

    @property
    def W(self) -> np.ndarray:
        V, d = self.vocab_size, self.embed_dim
        return self._theta[V * d : V * d + d * d].reshape(d, d)

    @property
    def b(self) -> np.ndarray:
        return self._theta[-self.vocab_size :]

    def _context_state(self, tokens: TokenSeq) -> np.ndarray:
        s = np.zeros(self.embed_dim)
        for t in tokens:
            s = self.decay * s + self.E[t]
        return s

    def _states(self, prompt: TokenSeq, response: TokenSeq) -> np.ndarray:
        """Row t is the state used to predict ``response[t]``."""
        S = np.empty((len(response), self.embed_dim))
        s = self._context_state(prompt)
        for t, tok in enumerate(response):
            S[t] = s
            s = self.decay * s + self.E[tok]
        return S

    def _logits(self, prompt, prefix):
        s = self._context_state(prompt + prefix)
        return self.E @ (self.W @ s) + self.b

    def _free_steps(self, response: TokenSeq) -> int:
        n = len(response)
        return n - 1 if self.is_forced(n - 1) else n

    def _token_logprobs(self, prompt, response):
        out = np.zeros(len(response))
        m = self._free_steps(response)
        if m:
            S = self._states(prompt, response[:m])
            logp = _log_softmax(S @ self.W.T @ self.E.T + self.b)
            out[:m] = logp[np.arange(m), list(response[:m])]
        return out

    def _logprob_grad(self, prompt, response):
        V, d = self.vocab_size, self.embed_dim
        E, W = self.E, self.W
        gE = np.zeros((V, d))
        gW = np.zeros((d, d))
        gb = np.zeros(V)
        m = self._free_steps(response)
        if m:
            S = self._states(prompt, response[:m])
            H = S @ W.T
            G = -np.exp(_log_softmax(H @ E.T + self.b))
            G[np.arange(m), list(response[:m])] += 1.0
            gb = G.sum(axis=0)
            gE += G.T @ H
            U = G @ E
            gW = U.T @ S
            dS = U @ W
            # back-propagate through the decayed context sum
            context = prompt + response[: m - 1]
            P = len(prompt)
            running = np.zeros(d)
            for j in range(len(context) - 1, -1, -1):
                running = self.decay * running
                t = j + 1 - P
                if 0 <= t < m:
                    running = running + dS[t]
                gE[context[j]] += running
        return np.concatenate([gE.ravel(), gW.ravel(), gb])

    @property
    def n_params(self) -> int:
        return self._theta.size

    def get_params(self) -> np.ndarray:
        return self._theta.copy()

    def set_params(self, params) -> None:
        params = np.asarray(params, dtype=float)
        if params.shape != self._theta.shape:
            raise InvalidInputError(f"expected {self._theta.size} parameters, got {params.shape}")
        self._theta[...] = params

    def copy(self) -> "LogBilinearPolicy":
        new = LogBilinearPolicy(self.vocab_size, self.max_len, self.embed_dim, self.eos, self.decay)
        new._theta[...] = self._theta
        return new

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "eos": self.eos,
            "params": {
                "embed_dim": self.embed_dim,
                "decay": self.decay,
                "embeddings": self.E.ravel().tolist(),
                "context_weights": self.W.ravel().tolist(),
                "output_bias": self.b.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LogBilinearPolicy":
        p = doc["params"]
        return cls(
            doc["vocab_size"], doc["max_len"], p["embed_dim"], eos=doc.get("eos", 0),
            decay=p.get("decay", 0.5), embeddings=p["embeddings"],
            context_weights=p["context_weights"], output_bias=p["output_bias"],
        )


_BACKENDS = {cls.backend: cls for cls in (TabularPolicy, LogBilinearPolicy)}


def policy_from_dict(doc: dict) -> Policy:
    try:
        cls = _BACKENDS[doc["backend"]]
    except KeyError:
        raise InvalidInputError(f"unknown policy backend {doc.get('backend')!r}") from None
    return cls.from_dict(doc)


# -- operations ---------------------------------------------------------------


def seq_logprob(policy: Policy, prompt, response) -> float:
    """Exact log-probability of ``response`` given ``prompt``, in nats."""
    return float(np.sum(policy.token_logprobs(prompt, response)))


def avg_logprob(policy: Policy, prompt, response) -> float:
    """Per-token log-probability; the token count includes EOS."""
    return seq_logprob(policy, prompt, response) / len(response)


def seq_logprob_grad(policy: Policy, prompt, response) -> np.ndarray:
    """Gradient of :func:`seq_logprob` with respect to ``policy.get_params()``.

    For a tabular policy this registers the rows the response visits, which
    may lengthen the parameter vector.
    """
    prompt = policy.check_prompt(prompt)
    response = policy.check_response(response)
    return policy._logprob_grad(prompt, response)


def sample(policy: Policy, prompt, rng, prefix: Sequence[int] = ()) -> TokenSeq:
    """Ancestral sampling until EOS, continuing from an optional ``prefix``.

    ``rng`` is a seed or a ``numpy.random.Generator``; each call consumes only
    the generator it is given.
    """
    g = as_generator(rng)
    prompt = policy.check_prompt(prompt)
    out = list(as_tokens(prefix))
    if policy.eos in out:
        raise InvalidInputError("prefix already contains EOS")
    while True:
        if policy.is_forced(len(out)):
            out.append(policy.eos)
            break
        cdf = np.cumsum(np.exp(policy.next_logprobs(prompt, out)))
        tok = int(np.searchsorted(cdf, g.random() * cdf[-1], side="right"))
        tok = min(tok, policy.vocab_size - 1)
        out.append(tok)
        if tok == policy.eos:
            break
    return tuple(out)


def space_size(vocab_size: int, max_len: int) -> int:
    """Number of distinct responses: sum over k < max_len of (V-1)**k."""
    return sum((vocab_size - 1) ** k for k in range(max_len))


def _enumerate_tree(policy: Policy, prompt: TokenSeq, cap: int, use_policy: bool = True):
    if policy.vocab_size**policy.max_len > cap:
        raise CapacityError(
            f"response space V**L = {policy.vocab_size}**{policy.max_len} exceeds cap {cap}"
        )
    out: list[tuple[TokenSeq, float]] = []

    def walk(prefix: TokenSeq, logp: float) -> None:
        if use_policy:
            nxt = policy.next_logprobs(prompt, prefix)
        else:
            nxt = np.zeros(policy.vocab_size)
            if policy.is_forced(len(prefix)):
                nxt[:] = -np.inf
                nxt[policy.eos] = 0.0
        for v in range(policy.vocab_size):
            if nxt[v] == -np.inf:
                continue
            if v == policy.eos:
                out.append((prefix + (v,), logp + nxt[v]))
            else:
                walk(prefix + (v,), logp + nxt[v])

    walk((), 0.0)
    return out


@dataclass
class SeqDistribution:
    """An explicit distribution over an enumerated response space."""

    seqs: list[TokenSeq]
    logprobs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logprobs)

    def index(self, seq) -> int:
        return self.seqs.index(as_tokens(seq))

    def as_dict(self) -> dict[TokenSeq, float]:
        return dict(zip(self.seqs, self.probs.tolist()))

    def top(self, k: int) -> list[TokenSeq]:
        order = np.argsort(-self.logprobs, kind="stable")
        return [self.seqs[i] for i in order[:k]]


def enumerate_distribution(policy: Policy, prompt, cap: int = DEFAULT_ENUM_CAP) -> SeqDistribution:
    prompt = policy.check_prompt(prompt)
    pairs = _enumerate_tree(policy, prompt, cap)
    return SeqDistribution([s for s, _ in pairs], np.array([lp for _, lp in pairs]))


def enumerate_seqs(policy: Policy, prompt, cap: int = DEFAULT_ENUM_CAP) -> list[tuple[TokenSeq, float]]:
    """All complete responses with their exact probabilities.

    Raises :class:`CapacityError` when ``V**L`` exceeds ``cap``. Responses with
    zero probability are omitted.
    """
    dist = enumerate_distribution(policy, prompt, cap)
    return list(zip(dist.seqs, dist.probs.tolist()))
