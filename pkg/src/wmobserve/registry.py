"""Entity-to-key assignment under the three deployment modes.

Keys are derived from a master seed so that one integer reproduces a whole
experiment. A real deployment would draw independent secrets per entity.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import InvalidCount, NoKeys, SchemaError
from .prf import MASK64, fnv1a64, splitmix64
from .schemes import SchemeConfig, score, z_matrix
from .toylm import TokenSeq


class Mode(str, Enum):
    PER_ENTITY = "PER_ENTITY"
    SHARED = "SHARED"
    NONE = "NONE"


@dataclass(frozen=True)
class EntityRegistry:
    n: int
    mode: Mode
    keys: tuple[int, ...]
    master_seed: int

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        self.check()

    @property
    def entities(self) -> tuple[int, ...]:
        return tuple(range(self.n))

    def key_of(self, entity: int) -> int | None:
        return self.keys[entity] if self.keys else None

    def check(self) -> None:
        if self.n < 1:
            raise InvalidCount(f"need at least one entity, got {self.n}")
        if self.mode is Mode.NONE:
            if self.keys:
                raise SchemaError("keys", "NONE mode carries no keys")
            return
        if len(self.keys) != self.n:
            raise SchemaError("keys", f"expected {self.n} keys, got {len(self.keys)}")
        if self.mode is Mode.SHARED and len(set(self.keys)) != 1:
            raise SchemaError("keys", "SHARED mode requires identical keys")
        if self.mode is Mode.PER_ENTITY and len(set(self.keys)) != self.n:
            raise SchemaError("keys", "PER_ENTITY mode requires distinct keys")

    def to_dict(self, emit_secrets: bool = False) -> dict:
        out = {"n": self.n, "mode": self.mode.value, "master_seed": f"{self.master_seed:#018x}"}
        if emit_secrets:
            out["keys"] = [f"{k:#018x}" for k in self.keys]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EntityRegistry":
        if "keys" not in d:
            return assign_keys(int(d["n"]), Mode(d["mode"]), int(d["master_seed"], 16))
        return cls(int(d["n"]), Mode(d["mode"]), tuple(int(k, 16) for k in d["keys"]),
                   int(d["master_seed"], 16))


def assign_keys(n: int, mode: Mode | str, master_seed: int) -> EntityRegistry:
    if n < 1:
        raise InvalidCount(f"need at least one entity, got {n}")
    mode = Mode(mode)
    master = int(master_seed) & MASK64
    if mode is Mode.NONE:
        keys: tuple[int, ...] = ()
    elif mode is Mode.SHARED:
        keys = (splitmix64(master),) * n
    else:
        keys = tuple(splitmix64(master ^ fnv1a64([e])) for e in range(n))
    return EntityRegistry(n, mode, keys, master)


@dataclass(frozen=True)
class Detector:
    entity: int
    key: int
    cfg: SchemeConfig

    def score(self, x: TokenSeq):
        return score(self.key, x, self.cfg)


@dataclass(frozen=True)
class DetectorBank:
    detectors: tuple[Detector, ...]
    cfg: SchemeConfig

    def __len__(self) -> int:
        return len(self.detectors)

    @property
    def keys(self) -> list[int]:
        return [d.key for d in self.detectors]

    def score_matrix(self, tokens: np.ndarray | Sequence[TokenSeq]) -> np.ndarray:
        """z statistics, one row per output and one column per entity."""
        if not isinstance(tokens, np.ndarray):
            tokens = np.array([x.tokens for x in tokens], dtype=np.int64)
        return z_matrix(self.keys, tokens, self.cfg)


def detector_bank(registry: EntityRegistry, cfg: SchemeConfig) -> DetectorBank:
    if registry.mode is Mode.NONE:
        raise NoKeys("a NONE-mode registry has no detectors")
    return DetectorBank(tuple(Detector(e, k, cfg) for e, k in enumerate(registry.keys)), cfg)
