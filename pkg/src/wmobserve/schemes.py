"""Zero-bit watermark embedding/detection and a slot-interleaved multi-bit wrapper.

Three schemes are provided:

* ``KGW``: a keyed green list of ``floor(gamma * V)`` tokens per context of
  ``context_h`` previous tokens; green logits get ``+delta``.
* ``UNIGRAM``: the same with a context-free green list (``context_h = 0``).
* ``EXP``: distribution-preserving selection ``argmax_i u_i ** (1 / p_i)``
  with ``u_i`` drawn from the keyed PRF over the previous ``context_h`` tokens.

Scores are z statistics over generated tokens; the first ``context_h``
generated tokens are not scored because their context reaches into the
prompt.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import DegenerateDist, EmptyMessage, InvalidSpec, TooShort, WrongScheme
from .prf import MASK64, fnv1a64, splitmix64
from .toylm import ChainSampler, Model, Prompt, RandomStream, TokenSeq, generate

KINDS = ("KGW", "UNIGRAM", "EXP")
DEFAULT_CONTEXT_H = {"KGW": 1, "UNIGRAM": 0, "EXP": 4}

# Above this many (context x vocab) cells green membership is computed per position.
GREEN_TABLE_LIMIT = 1 << 22


@dataclass(frozen=True)
class SchemeConfig:
    kind: str = "KGW"
    gamma: float = 0.25
    delta: float = 2.0
    context_h: int = 1
    vocab_size: int = 512

    def validate(self) -> "SchemeConfig":
        if self.kind not in KINDS:
            raise InvalidSpec(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidSpec(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.delta >= 0.0:
            raise InvalidSpec(f"delta must be >= 0, got {self.delta}")
        if self.context_h < 0:
            raise InvalidSpec(f"context_h must be >= 0, got {self.context_h}")
        if self.kind == "UNIGRAM" and self.context_h != 0:
            raise InvalidSpec("UNIGRAM requires context_h = 0")
        if self.vocab_size < 2:
            raise InvalidSpec("vocab_size must be >= 2")
        if self.kind != "EXP" and self.n_green < 1:
            raise InvalidSpec("gamma * vocab_size must be >= 1")
        return self

    @property
    def n_green(self) -> int:
        return int(math.floor(self.gamma * self.vocab_size))

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "SchemeConfig":
        return cls(kind=kind, context_h=DEFAULT_CONTEXT_H[kind], **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DetectorScore:
    z: float
    raw: float
    positions_scored: int


@dataclass(frozen=True)
class MessageBits:
    bits: tuple[int, ...]
    block_len: int = 32

    def __post_init__(self):
        if len(self.bits) == 0:
            raise EmptyMessage("message must carry at least one bit")
        if any(b not in (0, 1) for b in self.bits):
            raise InvalidSpec("bits must be 0 or 1")
        if self.block_len < 1:
            raise InvalidSpec("block_len must be >= 1")


def prf_uniform_many(key: int, context: Sequence[int], salts: Sequence[int]) -> np.ndarray:
    """Vectorized ``prf_uniform`` over many salts sharing one context."""
    return _kernels.prf_many(np.uint64(int(key) & MASK64),
                             np.asarray(context, dtype=np.int64),
                             np.asarray(salts, dtype=np.int64))


def _require_partition(cfg: SchemeConfig) -> None:
    if cfg.kind not in ("KGW", "UNIGRAM"):
        raise WrongScheme(f"{cfg.kind} has no green list")


@lru_cache(maxsize=512)
def _green_table_cached(key: int, vocab: int, h: int, n_green: int) -> np.ndarray:
    table = _kernels.green_table(np.uint64(key), vocab, h, n_green)
    table.flags.writeable = False
    return table


def green_table(key: int, cfg: SchemeConfig) -> np.ndarray | None:
    """Green masks for every context, shape ``(V**h, V)``; None if too large."""
    _require_partition(cfg)
    if cfg.vocab_size ** cfg.context_h * cfg.vocab_size > GREEN_TABLE_LIMIT:
        return None
    return _green_table_cached(int(key) & MASK64, cfg.vocab_size, cfg.context_h, cfg.n_green)


def green_set(key: int, context: Sequence[int], cfg: SchemeConfig) -> np.ndarray:
    """Boolean mask of the ``floor(gamma V)`` tokens with the smallest keyed hashes.

    Ties in the hash value go to the lower token id.
    """
    _require_partition(cfg)
    ctx = list(context[len(context) - cfg.context_h:]) if cfg.context_h else []
    u = prf_uniform_many(key, ctx, np.arange(cfg.vocab_size))
    mask = np.zeros(cfg.vocab_size, dtype=bool)
    mask[np.argsort(u, kind="stable")[: cfg.n_green]] = True
    return mask


def kgw_embed_step(dist: np.ndarray, green: np.ndarray, delta: float) -> np.ndarray:
    if delta == 0:
        return dist
    w = np.where(green, dist * math.exp(delta), dist)
    return w / w.sum()


def green_indicators(key: int, tokens: np.ndarray, cfg: SchemeConfig) -> np.ndarray:
    """Per-position green hits for an ``(n, T)`` token array; shape ``(n, T - h)``."""
    _require_partition(cfg)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    h = cfg.context_h
    # A table costs one ranking per context; skip it when there are fewer positions than contexts.
    few = tokens.shape[0] * max(tokens.shape[1] - h, 0) < cfg.vocab_size ** h
    table = None if few else green_table(key, cfg)
    if table is None:
        return _kernels.green_indicators_onfly(np.uint64(int(key) & MASK64), tokens, h,
                                               cfg.vocab_size, cfg.n_green)
    t_len = tokens.shape[1]
    ctx = np.zeros((tokens.shape[0], max(t_len - h, 0)), dtype=np.int64)
    for j in range(h):
        ctx = ctx * cfg.vocab_size + tokens[:, j:t_len - h + j]
    return table[ctx, tokens[:, h:]]


def z_from_hits(hits: np.ndarray, positions: np.ndarray | int, gamma: float) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (hits - gamma * positions) / np.sqrt(positions * gamma * (1.0 - gamma))


def _check_len(n_tokens: int, cfg: SchemeConfig) -> int:
    scored = n_tokens - cfg.context_h
    if scored < 1:
        raise TooShort(f"need at least {cfg.context_h + 1} tokens, got {n_tokens}")
    return scored


def kgw_score(key: int, x: TokenSeq | Sequence[int], cfg: SchemeConfig) -> DetectorScore:
    tokens = np.asarray(getattr(x, "tokens", x), dtype=np.int64)
    scored = _check_len(len(tokens), cfg)
    g = int(green_indicators(key, tokens[None, :], cfg).sum())
    return DetectorScore(float(z_from_hits(g, scored, cfg.gamma)), float(g), scored)


def exp_select(dist: np.ndarray, u: np.ndarray) -> int:
    """``argmax_i u_i ** (1 / p_i)`` over tokens with ``p_i > 0``; ties to the lower id."""
    dist = np.asarray(dist, dtype=np.float64)
    admissible = np.flatnonzero(dist > 0)
    if admissible.size == 0:
        raise DegenerateDist("all probabilities are zero")
    with np.errstate(divide="ignore", over="ignore"):
        s = np.log(np.asarray(u, dtype=np.float64)[admissible]) / dist[admissible]
    return int(admissible[np.argmax(s)])


def exp_embed_step(dist: np.ndarray, key: int, context: Sequence[int], context_h: int | None = None) -> int:
    ctx = list(context) if context_h is None else list(context[len(context) - context_h:])
    u = prf_uniform_many(key, ctx, np.arange(len(dist)))
    return exp_select(dist, u)


def exp_terms(key: int, tokens: np.ndarray, cfg: SchemeConfig) -> np.ndarray:
    """Per-position ``-ln(1 - u)``; Exp(1) under the null."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    return _kernels.exp_terms(np.uint64(int(key) & MASK64), tokens, cfg.context_h)


def exp_z(total: np.ndarray, positions: np.ndarray | int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    return (total - positions) / np.sqrt(positions)


def exp_score(key: int, x: TokenSeq | Sequence[int], cfg: SchemeConfig) -> DetectorScore:
    tokens = np.asarray(getattr(x, "tokens", x), dtype=np.int64)
    scored = _check_len(len(tokens), cfg)
    s = float(exp_terms(key, tokens[None, :], cfg).sum())
    return DetectorScore(float(exp_z(s, scored)), s, scored)


def score(key: int, x: TokenSeq | Sequence[int], cfg: SchemeConfig) -> DetectorScore:
    if cfg.kind == "EXP":
        return exp_score(key, x, cfg)
    return kgw_score(key, x, cfg)


def z_matrix(keys: Sequence[int], tokens: np.ndarray, cfg: SchemeConfig) -> np.ndarray:
    """z statistics of every row of ``tokens`` under every key, shape ``(n, len(keys))``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    scored = _check_len(tokens.shape[1], cfg)
    out = np.empty((tokens.shape[0], len(keys)))
    cache: dict[int, np.ndarray] = {}
    for j, key in enumerate(keys):
        key = int(key) & MASK64
        if key not in cache:
            if cfg.kind == "EXP":
                cache[key] = exp_z(exp_terms(key, tokens, cfg).sum(axis=1), scored)
            else:
                hits = green_indicators(key, tokens, cfg).sum(axis=1)
                cache[key] = z_from_hits(hits, scored, cfg.gamma)
        out[:, j] = cache[key]
    return out


# --- samplers (embedders) ---------------------------------------------------


class KGWSampler(ChainSampler):
    """Green-list logit bias under one key (KGW or UNIGRAM)."""

    def __init__(self, key: int, cfg: SchemeConfig):
        _require_partition(cfg)
        self.key = int(key) & MASK64
        self.cfg = cfg
        self.context_h = cfg.context_h
        self.scheme_tag = cfg.kind

    def _green(self, key, history):
        table = green_table(key, self.cfg)
        h = self.cfg.context_h
        if table is None:
            return green_set(key, history, self.cfg)
        c = 0
        for t in history[len(history) - h:] if h else ():
            c = c * self.cfg.vocab_size + int(t)
        return table[c]

    def key_for_slot(self, slot):
        return self.key

    def weights(self, row, history, slot):
        return kgw_embed_step(row, self._green(self.key_for_slot(slot), history), self.cfg.delta)

    def weights_rows(self, rows, hists, slot):
        table = green_table(self.key_for_slot(slot), self.cfg)
        if table is None or self.cfg.delta == 0:
            return super().weights_rows(rows, hists, slot)
        c = np.zeros(len(hists), dtype=np.int64)
        for j in range(hists.shape[1] - self.cfg.context_h, hists.shape[1]):
            c = c * self.cfg.vocab_size + hists[:, j]
        w = np.where(table[c], rows * math.exp(self.cfg.delta), rows)
        return w / w.sum(axis=1, keepdims=True)


class EXPSampler:
    """Distribution-preserving exponential-minimum sampling under one key."""

    def __init__(self, key: int, cfg: SchemeConfig):
        if cfg.kind != "EXP":
            raise WrongScheme("EXPSampler needs an EXP config")
        self.key = int(key) & MASK64
        self.cfg = cfg
        self.context_h = cfg.context_h
        self.scheme_tag = "EXP"

    def step(self, row, history, t, u):
        return exp_embed_step(row, self.key, history, self.cfg.context_h)

    def fast_generate(self, model: Model, init_ctx, seeds, length):
        probs = model.dense_table
        if probs is None:
            return None
        need = max(model.order, self.context_h)
        init = np.ascontiguousarray(init_ctx[:, init_ctx.shape[1] - need:])
        out, ok = _kernels.exp_generate(probs, model.order, model.vocab_size, np.uint64(self.key),
                                        self.context_h, init, length)
        if not ok:
            raise DegenerateDist("model row has no admissible token")
        return out


def sampler_for(key: int, cfg: SchemeConfig):
    if cfg.kind == "EXP":
        return EXPSampler(key, cfg)
    return KGWSampler(key, cfg)


# --- multi-bit ----------------------------------------------------------------


def derived_key(base_key: int, slot: int, bit: int) -> int:
    return splitmix64((int(base_key) & MASK64) ^ fnv1a64([slot, bit]))


def slot_of(t: int, block_len: int, num_bits: int) -> int:
    return (t // block_len) % num_bits


class MultibitSampler(KGWSampler):
    """KGW embedding whose key at position t encodes the bit of slot(t)."""

    def __init__(self, base_key: int, msg: MessageBits, cfg: SchemeConfig):
        super().__init__(base_key, cfg)
        self.msg = msg
        self.n_slots = len(msg.bits)
        self.slot_keys = [derived_key(self.key, b, v) for b, v in enumerate(msg.bits)]

    def slot_of(self, t):
        return slot_of(t, self.msg.block_len, len(self.msg.bits))

    def key_for_slot(self, slot):
        return self.slot_keys[slot]


def multibit_embed(model: Model, prompt: Prompt, base_key: int, msg: MessageBits, cfg: SchemeConfig,
                   length: int, stream: RandomStream) -> TokenSeq:
    _require_partition(cfg)
    if not msg.bits:
        raise EmptyMessage("message must carry at least one bit")
    return generate(model, prompt, length, MultibitSampler(base_key, msg, cfg), stream)


def multibit_decode_batch(base_key: int, tokens: np.ndarray, num_bits: int, block_len: int,
                          cfg: SchemeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Decode every row of an ``(n, T)`` array; returns ``(bits, confidence)`` of shape ``(n, num_bits)``."""
    if num_bits < 1:
        raise InvalidSpec("num_bits must be >= 1")
    _require_partition(cfg)
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    h = cfg.context_h
    positions = np.arange(h, tokens.shape[1])
    slots = (positions // block_len) % num_bits
    counts = np.bincount(slots, minlength=num_bits)
    if (counts == 0).any():
        raise TooShort(f"slot {int(np.argmin(counts))} has no scored positions")
    z = np.empty((2, tokens.shape[0], num_bits))
    for b in range(num_bits):
        sel = slots == b
        for v in (0, 1):
            hits = green_indicators(derived_key(base_key, b, v), tokens, cfg)[:, sel].sum(axis=1)
            z[v, :, b] = z_from_hits(hits, counts[b], cfg.gamma)
    bits = (z[1] > z[0]).astype(np.int64)
    return bits, np.abs(z[1] - z[0])


def multibit_decode(base_key: int, x: TokenSeq | Sequence[int], num_bits: int, block_len: int,
                    cfg: SchemeConfig) -> tuple[list[int], list[float]]:
    tokens = np.asarray(getattr(x, "tokens", x), dtype=np.int64)
    bits, conf = multibit_decode_batch(base_key, tokens[None, :], num_bits, block_len, cfg)
    return bits[0].tolist(), conf[0].tolist()
