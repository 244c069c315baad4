"""Seedable Markov-chain language model, prompt pools and generation.

The model stands in for an LLM: each context of ``order`` tokens maps to a
probability row over the vocabulary. Rows for built models are a
deterministic function of ``(seed, context)``, so the table can be
materialized eagerly when small or filled lazily when ``V**order`` is
large, and both give the same numbers.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import _kernels
from .errors import InvalidLength, InvalidSpec
from .prf import MASK64, RandomStream, derive_seed

# Largest V**L * V table we are willing to materialize (float64 entries).
DENSE_LIMIT = 1 << 22

TAG_PROMPT = 0x50524F4D  # "PROM"


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int = 512
    order: int = 1
    concentration: float = 0.5
    smoothing: float = 0.1

    def validate(self) -> None:
        if int(self.vocab_size) < 2:
            raise InvalidSpec(f"vocab_size must be >= 2, got {self.vocab_size}")
        if int(self.order) < 0:
            raise InvalidSpec(f"order must be >= 0, got {self.order}")
        if not self.concentration > 0:
            raise InvalidSpec(f"concentration must be > 0, got {self.concentration}")
        if not 0.0 <= self.smoothing <= 1.0:
            raise InvalidSpec(f"smoothing must lie in [0, 1], got {self.smoothing}")


def dirichlet_row(seed: int, context: tuple[int, ...], vocab_size: int,
                  concentration: float, smoothing: float) -> np.ndarray:
    """One transition row: normalized Gamma draws mixed with uniform mass."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & MASK64, *context]))
    g = rng.standard_gamma(concentration, vocab_size)
    total = g.sum()
    if not total > 0 or not np.isfinite(total):
        g = np.ones(vocab_size)
        total = float(vocab_size)
    return (1.0 - smoothing) * (g / total) + smoothing / vocab_size


class Model:
    """Order-``order`` Markov chain over ``vocab_size`` tokens.

    Contexts missing from an explicit table, and contexts shorter than the
    order, fall back to the uniform row.
    """

    def __init__(self, vocab_size: int, order: int, *, smoothing: float = 0.0,
                 table: Mapping[tuple[int, ...], Sequence[float]] | None = None,
                 spec: ModelSpec | None = None, seed: int | None = None):
        if vocab_size < 2 or order < 0:
            raise InvalidSpec("vocab_size >= 2 and order >= 0 required")
        self.vocab_size = int(vocab_size)
        self.order = int(order)
        self.smoothing = float(smoothing)
        self.spec = spec
        self.seed = seed
        self._uniform = np.full(self.vocab_size, 1.0 / self.vocab_size)
        self._uniform.flags.writeable = False
        self._table: dict[tuple[int, ...], np.ndarray] = {}
        self._lock = threading.Lock()
        if table is not None:
            for ctx, row in table.items():
                arr = np.asarray(row, dtype=np.float64)
                if arr.shape != (self.vocab_size,) or len(ctx) != self.order:
                    raise InvalidSpec(f"bad table entry for context {ctx!r}")
                if (arr < 0).any() or abs(arr.sum() - 1.0) > 1e-9:
                    raise InvalidSpec(f"row for {ctx!r} is not a distribution")
                arr = arr.copy()
                arr.flags.writeable = False
                self._table[tuple(int(t) for t in ctx)] = arr
        self._dense: np.ndarray | None = None
        if self.n_contexts * self.vocab_size <= DENSE_LIMIT:
            self._dense = self._materialize()
            if self.derived:
                self._table.clear()

    @classmethod
    def from_table(cls, table, vocab_size: int, order: int) -> "Model":
        return cls(vocab_size, order, table=table)

    @property
    def n_contexts(self) -> int:
        return self.vocab_size ** self.order

    @property
    def derived(self) -> bool:
        return self.spec is not None

    def _derive(self, ctx: tuple[int, ...]) -> np.ndarray:
        row = dirichlet_row(self.seed, ctx, self.vocab_size,
                            self.spec.concentration, self.spec.smoothing)
        row.flags.writeable = False
        return row

    def _materialize(self) -> np.ndarray:
        dense = np.empty((self.n_contexts, self.vocab_size))
        for c in range(self.n_contexts):
            dense[c] = self._row_for(self.decode_context(c))
        dense.flags.writeable = False
        return dense

    def decode_context(self, index: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.order):
            index, rem = divmod(index, self.vocab_size)
            out.append(rem)
        return tuple(reversed(out))

    def encode_context(self, ctx: Sequence[int]) -> int:
        c = 0
        for t in ctx:
            c = c * self.vocab_size + int(t)
        return c

    def _row_for(self, ctx: tuple[int, ...]) -> np.ndarray:
        if self.derived:
            with self._lock:
                row = self._table.get(ctx)
                if row is None:
                    row = self._table[ctx] = self._derive(ctx)
            return row
        return self._table.get(ctx, self._uniform)

    @property
    def dense_table(self) -> np.ndarray | None:
        """All rows as a ``(V**order, V)`` array, or None when too large."""
        return self._dense

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        if len(context) < self.order:
            return self._uniform
        ctx = tuple(int(t) for t in context[len(context) - self.order:]) if self.order else ()
        if any(t < 0 or t >= self.vocab_size for t in ctx):
            return self._uniform
        if self._dense is not None:
            return self._dense[self.encode_context(ctx)]
        return self._row_for(ctx)


def build_model(spec: ModelSpec, seed: int) -> Model:
    spec.validate()
    return Model(spec.vocab_size, spec.order, smoothing=spec.smoothing,
                 spec=spec, seed=int(seed) & MASK64)


def next_dist(model: Model, context: Sequence[int]) -> np.ndarray:
    return model.next_dist(context)


def sample_index(weights: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from unnormalized weights with a uniform in [0, 1)."""
    cum = np.cumsum(weights)
    i = int(np.searchsorted(cum, u * cum[-1], side="right"))
    if i < len(cum):
        return i
    positive = np.flatnonzero(np.diff(cum, prepend=0.0) > 0)
    return int(positive[-1]) if positive.size else 0


@dataclass(frozen=True)
class Prompt:
    id: int
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class PromptPool:
    prompts: tuple[Prompt, ...]

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)

    def __getitem__(self, i) -> Prompt:
        return self.prompts[i]


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]
    prompt_id: int
    true_entity: int | None = None
    scheme_tag: str = "none"

    def __len__(self) -> int:
        return len(self.tokens)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


def build_prompt_pool(pool_size: int, prompt_len: int, model: Model, seed: int) -> PromptPool:
    if pool_size < 1:
        raise InvalidSpec(f"pool_size must be >= 1, got {pool_size}")
    if prompt_len < 1:
        raise InvalidSpec(f"prompt_len must be >= 1, got {prompt_len}")
    prompts = []
    for pid in range(pool_size):
        stream = RandomStream(derive_seed(seed, TAG_PROMPT, pid))
        toks: list[int] = []
        for _ in range(prompt_len):
            toks.append(sample_index(model.next_dist(toks), stream.uniform()))
        prompts.append(Prompt(pid, tuple(toks)))
    return PromptPool(tuple(prompts))


class Sampler(Protocol):
    """A per-step token chooser; plain sampling or a watermark embedder."""

    context_h: int
    scheme_tag: str

    def step(self, row: np.ndarray, history: Sequence[int], t: int, u: float) -> int: ...

    def fast_generate(self, model: Model, init_ctx: np.ndarray, seeds: np.ndarray,
                      length: int) -> np.ndarray | None: ...


class ChainSampler:
    """Samplers whose reweighted row depends only on (row, recent tokens, slot).

    Subclasses implement ``weights(row, history, slot)`` and ``slot_of``;
    when the joint context fits in memory generation runs through one
    precomputed cumulative table per slot.
    """

    context_h = 0
    n_slots = 1
    scheme_tag = "none"

    def weights(self, row, history, slot):
        return row

    def slot_of(self, t: int) -> int:
        return 0

    def step(self, row, history, t, u):
        return sample_index(self.weights(row, history, self.slot_of(t)), u)

    def weights_rows(self, rows, hists, slot):
        """``weights`` applied to every row; ``hists`` is ``(n_ctx, ctx_len)``."""
        return np.stack([self.weights(r, h.tolist(), slot) for r, h in zip(rows, hists)])

    def fast_generate(self, model, init_ctx, seeds, length):
        ctx_len = max(model.order, self.context_h)
        n_ctx = model.vocab_size ** ctx_len
        if n_ctx * model.vocab_size * self.n_slots > DENSE_LIMIT * 4 or model.dense_table is None:
            return None
        v = model.vocab_size
        hists = np.empty((n_ctx, ctx_len), dtype=np.int64)
        rem = np.arange(n_ctx, dtype=np.int64)
        for j in range(ctx_len - 1, -1, -1):
            rem, hists[:, j] = np.divmod(rem, v)
        rows = np.stack([model.next_dist(h.tolist()) for h in hists])
        cum = np.empty((self.n_slots, n_ctx, v))
        for s in range(self.n_slots):
            np.cumsum(self.weights_rows(rows, hists, s), axis=1, out=cum[s])
        slots = np.array([self.slot_of(t) for t in range(length)], dtype=np.int64)
        return _kernels.sample_chain(cum, slots, ctx_len, v,
                                     np.ascontiguousarray(init_ctx[:, init_ctx.shape[1] - ctx_len:]),
                                     seeds, length)


class PlainSampler(ChainSampler):
    """Unwatermarked multinomial sampling."""


def generate_batch(model: Model, prompts: Sequence[Prompt], length: int, sampler: Sampler,
                   seeds: Sequence[int], *, use_fast: bool = True) -> np.ndarray:
    """Generate one sequence per (prompt, seed); returns an ``(n, length)`` array.

    Row ``i`` equals ``generate(model, prompts[i], length, sampler,
    RandomStream(seeds[i])).tokens`` exactly; the fast kernels are only an
    execution strategy.
    """
    if length < 1:
        raise InvalidLength(f"length must be >= 1, got {length}")
    n = len(prompts)
    if n == 0:
        return np.empty((0, length), dtype=np.int64)
    need = max(model.order, sampler.context_h)
    p_len = min(len(p.tokens) for p in prompts)
    if p_len < need:
        raise InvalidLength(f"prompts need at least {need} tokens, got {p_len}")
    init = np.array([p.tokens[len(p.tokens) - p_len:] for p in prompts], dtype=np.int64)
    seed_arr = np.array([int(s) & MASK64 for s in seeds], dtype=np.uint64)
    if use_fast:
        out = sampler.fast_generate(model, init, seed_arr, length)
        if out is not None:
            return out
    out = np.empty((n, length), dtype=np.int64)
    for i in range(n):
        out[i] = _generate_reference(model, init[i].tolist(), length, sampler,
                                     RandomStream(int(seed_arr[i])))
    return out


def _generate_reference(model, history, length, sampler, stream):
    start = len(history)
    for t in range(length):
        row = model.next_dist(history)
        history.append(sampler.step(row, history, t, stream.uniform()))
    return history[start:]


def generate(model: Model, prompt: Prompt, length: int, sampler: Sampler,
             stream: RandomStream, *, true_entity: int | None = None) -> TokenSeq:
    if length < 1:
        raise InvalidLength(f"length must be >= 1, got {length}")
    need = max(model.order, sampler.context_h)
    if len(prompt.tokens) < need:
        raise InvalidLength(f"prompt needs at least {need} tokens")
    start = stream.counter
    if start == 0:
        toks = generate_batch(model, [prompt], length, sampler, [stream.seed])[0]
    else:
        toks = _generate_reference_from(model, prompt, length, sampler, stream.seed, start)
    stream.counter = start + length
    return TokenSeq(tuple(int(t) for t in toks), prompt.id, true_entity, sampler.scheme_tag)


def _generate_reference_from(model, prompt, length, sampler, seed, start):
    stream = RandomStream(seed, start)
    return _generate_reference(model, list(prompt.tokens), length, sampler, stream)
