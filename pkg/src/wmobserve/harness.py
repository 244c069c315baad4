"""Scenario orchestration: prompt pools, prompt-disjoint corpora, both observers, sweeps.

Every random choice derives from ``master_seed`` through ``derive_seed`` with
a fixed tag, and every aggregation runs in index order, so a report depends
only on its config and never on scheduling.
"""

from __future__ import annotations

import contextlib
import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterator, Sequence

import numpy as np

from .errors import BadAxis, InsufficientPool, InvalidSpec, PoolTooSmall, SchemaError, StageError
from .external import FeatureConfig, LearningCurve, TrainHyper, featurize_batch, learning_curve
from .internal import AttributionReport, calibrate, evaluate_attribution
from .prf import MASK64, derive_seed, splitmix64
from .registry import EntityRegistry, Mode, assign_keys, detector_bank
from .schemes import DEFAULT_CONTEXT_H, SchemeConfig, sampler_for
from .toylm import ModelSpec, PlainSampler, Prompt, PromptPool, TokenSeq, build_model, \
    build_prompt_pool, generate_batch

SCHEMA_VERSION = 1

TAG_MODEL = 0x4D4F44  # "MOD"
TAG_POOL = 0x504F4F  # "POO"
TAG_SPLIT = 0x53504C  # "SPL"
TAG_SCHEDULE = 0x534348  # "SCH"
TAG_SAMPLE = 0x534D50  # "SMP"

SPLIT_TRAIN = 0
SPLIT_TEST = 1


class Observer(str, Enum):
    INTERNAL = "INTERNAL"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    model: ModelSpec = field(default_factory=ModelSpec)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    deployment: Mode = Mode.PER_ENTITY
    n_entities: int = 4
    samples_per_entity_train: int = 1000
    samples_per_entity_test: int = 100
    gen_length: int = 256
    prompt_pool_size: int = 500
    prompt_len: int = 8
    train_frac: float = 0.8
    sample_counts: tuple[int, ...] = (100, 250, 500, 1000)
    target_fpr: float = 0.01
    master_seed: int = 0
    observers: tuple[Observer, ...] = (Observer.INTERNAL, Observer.EXTERNAL)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    emit_secrets: bool = False

    def validate(self) -> "ScenarioConfig":
        self.model.validate()
        self.scheme.validate()
        if self.scheme.vocab_size != self.model.vocab_size:
            raise InvalidSpec("scheme.vocab_size must equal model.vocab_size")
        if self.features.vocab_size != self.model.vocab_size:
            raise InvalidSpec("features.vocab_size must equal model.vocab_size")
        if self.n_entities < 1:
            raise InvalidSpec("n_entities must be >= 1")
        if self.samples_per_entity_train < 1 or self.samples_per_entity_test < 1:
            raise InvalidSpec("per-entity sample counts must be >= 1")
        if self.gen_length <= self.scheme.context_h:
            raise InvalidSpec("gen_length must exceed scheme.context_h")
        if self.prompt_len < max(self.model.order, self.scheme.context_h):
            raise InvalidSpec("prompt_len must cover the model order and scheme context")
        if not 0.0 < self.target_fpr < 1.0:
            raise InvalidSpec("target_fpr must lie in (0, 1)")
        if not 0.0 < self.train_frac < 1.0:
            raise InvalidSpec("train_frac must lie in (0, 1)")
        counts = list(self.sample_counts)
        if Observer.EXTERNAL in self.observers:
            if not counts or any(b <= a for a, b in zip(counts, counts[1:])) or counts[0] < 1:
                raise InvalidSpec("sample_counts must be positive and strictly increasing")
            if counts[-1] > self.samples_per_entity_train:
                raise InsufficientPool("max(sample_counts) exceeds samples_per_entity_train")
        return self


# --- prompts and corpora -----------------------------------------------------


def split_prompts(pool: PromptPool, train_frac: float, seed: int) -> tuple[list[Prompt], list[Prompt]]:
    """Seeded shuffle, then cut; the two halves share no prompt id."""
    if len(pool) < 2:
        raise PoolTooSmall(f"need at least 2 prompts to split, got {len(pool)}")
    if not 0.0 < train_frac < 1.0:
        raise InvalidSpec(f"train_frac must lie in (0, 1), got {train_frac}")
    perm = np.random.default_rng(int(seed) & MASK64).permutation(len(pool))
    n_train = min(max(int(round(train_frac * len(pool))), 1), len(pool) - 1)
    return [pool[i] for i in perm[:n_train]], [pool[i] for i in perm[n_train:]]


@dataclass
class Corpus:
    """Entity-major labelled outputs: entity e's sample i sits at row ``e * count + i``."""

    tokens: np.ndarray
    labels: np.ndarray
    prompt_ids: np.ndarray
    scheme_tag: str
    count_per_entity: int

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> TokenSeq:
        return TokenSeq(tuple(int(t) for t in self.tokens[i]), int(self.prompt_ids[i]),
                        int(self.labels[i]), self.scheme_tag)

    def rows_of(self, entity: int) -> np.ndarray:
        c = self.count_per_entity
        return np.arange(entity * c, (entity + 1) * c)


def prompt_schedule(prompts: Sequence[Prompt], count: int, seed: int) -> list[Prompt]:
    """Prompt for each sample index; shared by all entities (prompt-matched)."""
    perm = np.random.default_rng(int(seed) & MASK64).permutation(len(prompts))
    return [prompts[perm[i % len(prompts)]] for i in range(count)]


def _sampler(cfg: ScenarioConfig, registry: EntityRegistry, entity: int):
    if registry.mode is Mode.NONE:
        return PlainSampler()
    return sampler_for(registry.keys[entity], cfg.scheme)


def generate_corpus(cfg: ScenarioConfig, registry: EntityRegistry, prompts: Sequence[Prompt],
                    count_per_entity: int, *, split: int = SPLIT_TRAIN, model=None,
                    workers: int = 1) -> Corpus:
    if registry.n != cfg.n_entities or registry.mode is not Mode(cfg.deployment):
        raise InvalidSpec("registry does not match the scenario config")
    if model is None:
        model = build_model(cfg.model, derive_seed(cfg.master_seed, TAG_MODEL))
    schedule = prompt_schedule(prompts, count_per_entity,
                               derive_seed(cfg.master_seed, TAG_SCHEDULE, split))

    def one(entity: int) -> np.ndarray:
        seeds = [derive_seed(cfg.master_seed, TAG_SAMPLE, split, entity, i)
                 for i in range(count_per_entity)]
        return generate_batch(model, schedule, cfg.gen_length, _sampler(cfg, registry, entity), seeds)

    entities = range(registry.n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            blocks = list(ex.map(one, entities))
    else:
        blocks = [one(e) for e in entities]
    tag = "none" if registry.mode is Mode.NONE else cfg.scheme.kind
    ids = np.array([p.id for p in schedule], dtype=np.int64)
    return Corpus(np.concatenate(blocks), np.repeat(np.arange(registry.n), count_per_entity),
                  np.tile(ids, registry.n), tag, count_per_entity)


# --- reports -------------------------------------------------------------------


@dataclass
class RunReport:
    scenario_id: str
    config: dict
    registry: dict
    controls: dict
    seeds: dict
    prompt_split: dict
    attribution: AttributionReport | None = None
    learning_curve: LearningCurve | None = None
    wall_clock_s: float = 0.0

    def metrics(self) -> list[dict]:
        """Flat metric rows (everything in the CSV)."""
        rows = []
        if self.attribution is not None:
            a = self.attribution
            spe = a.samples_per_entity
            rows += [
                {"observer": "INTERNAL", "samples_per_entity": spe, "metric": "top1_tpr_at_fpr",
                 "value": a.top1_tpr_at_fpr},
                {"observer": "INTERNAL", "samples_per_entity": spe, "metric": "argmax_accuracy",
                 "value": a.argmax_accuracy},
                {"observer": "INTERNAL", "samples_per_entity": spe, "metric": "misattribution_rate",
                 "value": a.misattribution_rate},
                {"observer": "INTERNAL", "samples_per_entity": spe, "metric": "unattributed_rate",
                 "value": a.unattributed_count / float(a.n_entities * spe)},
                {"observer": "INTERNAL", "samples_per_entity": spe, "metric": "mean_per_key_fpr",
                 "value": float(np.mean(a.per_key_fpr)) if a.per_key_fpr else 0.0},
            ]
        if self.learning_curve is not None:
            for p in self.learning_curve.points:
                for m in ("top1", "top3"):
                    rows.append({"observer": "EXTERNAL", "samples_per_entity": p["samples_per_entity"],
                                 "metric": m, "value": p[m]})
        return rows

    def to_dict(self) -> dict:
        """JSON body; wall-clock time is left out so identical configs give identical bytes."""
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "config": self.config,
            "seeds": self.seeds,
            "registry": self.registry,
            "controls": self.controls,
            "prompt_split": self.prompt_split,
            "attribution": self.attribution.to_dict() if self.attribution else None,
            "learning_curve": self.learning_curve.to_dict() if self.learning_curve else None,
            "metrics": self.metrics(),
        }

    def csv_rows(self) -> list[list]:
        cfg = self.config
        return [[self.scenario_id, cfg["scheme"]["kind"], cfg["deployment"], cfg["n_entities"],
                 m["samples_per_entity"], m["observer"], m["metric"], m["value"], cfg["master_seed"]]
                for m in self.metrics()]


CSV_COLUMNS = ["scenario_id", "scheme", "deployment", "n_entities", "samples_per_entity",
               "observer", "metric", "value", "seed"]


def config_to_dict(cfg: ScenarioConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["deployment"] = Mode(cfg.deployment).value
    d["observers"] = [Observer(o).value for o in cfg.observers]
    d["sample_counts"] = list(cfg.sample_counts)
    return d


_NESTED = {"model": ModelSpec, "scheme": SchemeConfig, "features": FeatureConfig, "train": TrainHyper}


def _build(cls, d: Any, prefix: str):
    if not isinstance(d, dict):
        raise SchemaError(prefix.rstrip("."), f"expected an object, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k in d:
        if k not in names:
            raise SchemaError(k, f"unknown key '{prefix}{k}'")
    return names, d


def _typed(key: str, value: Any, kind: type):
    if kind is bool:
        if not isinstance(value, bool):
            raise SchemaError(key, f"{key} must be a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(key, f"{key} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(key, f"{key} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise SchemaError(key, f"{key} must be a string")
        return value
    return value


def _leaf(cls, d: Any, prefix: str):
    names, d = _build(cls, d, prefix)
    kinds = {n: type(f.default) for n, f in names.items()}
    return cls(**{k: _typed(k, v, kinds[k]) for k, v in d.items()})


def config_from_dict(d: Any) -> ScenarioConfig:
    """Inverse of ``config_to_dict``; missing keys take defaults, unknown keys raise SchemaError."""
    names, d = _build(ScenarioConfig, d, "")
    base = ScenarioConfig()
    kw: dict[str, Any] = {}
    for k, v in d.items():
        if k in _NESTED:
            kw[k] = _leaf(_NESTED[k], v, k + ".")
        elif k == "deployment":
            try:
                kw[k] = Mode(v)
            except ValueError:
                raise SchemaError(k, f"deployment must be one of {[m.value for m in Mode]}") from None
        elif k == "observers":
            try:
                kw[k] = tuple(Observer(o) for o in v)
            except (ValueError, TypeError):
                raise SchemaError(k, "observers must list INTERNAL and/or EXTERNAL") from None
        elif k == "sample_counts":
            if not isinstance(v, list):
                raise SchemaError(k, "sample_counts must be a list of integers")
            kw[k] = tuple(_typed(k, c, int) for c in v)
        else:
            kw[k] = _typed(k, v, type(getattr(base, k)))
    cfg = ScenarioConfig(**kw)
    # a scheme without explicit context_h takes the kind's default
    scheme = d.get("scheme", {})
    if isinstance(scheme, dict) and "context_h" not in scheme:
        cfg = replace(cfg, scheme=replace(cfg.scheme, context_h=DEFAULT_CONTEXT_H.get(cfg.scheme.kind, 0)))
    return cfg


@contextlib.contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with stage context
        raise StageError(name, exc) from exc


def run_scenario(cfg: ScenarioConfig, *, scenario_id: str | None = None, workers: int = 1) -> RunReport:
    started = time.perf_counter()
    with _stage("config"):
        cfg.validate()
    master = int(cfg.master_seed) & MASK64
    mode = Mode(cfg.deployment)
    seeds = {"master_seed": master,
             "model_seed": derive_seed(master, TAG_MODEL),
             "pool_seed": derive_seed(master, TAG_POOL),
             "split_seed": derive_seed(master, TAG_SPLIT),
             "classifier_seed": cfg.train.seed}
    report = RunReport(
        scenario_id=scenario_id or cfg.name,
        config=config_to_dict(cfg),
        registry={},
        controls={"deployment": mode.value, "watermarked": mode is not Mode.NONE,
                  "key_dependent": mode is Mode.PER_ENTITY and cfg.n_entities > 1},
        seeds=seeds,
        prompt_split={},
    )
    with _stage("registry"):
        registry = assign_keys(cfg.n_entities, mode, master)
        report.registry = registry.to_dict(cfg.emit_secrets)
    if not cfg.observers:
        report.wall_clock_s = time.perf_counter() - started
        return report

    with _stage("model"):
        model = build_model(cfg.model, seeds["model_seed"])
        pool = build_prompt_pool(cfg.prompt_pool_size, cfg.prompt_len, model, seeds["pool_seed"])
        train_prompts, test_prompts = split_prompts(pool, cfg.train_frac, seeds["split_seed"])
        train_ids = {p.id for p in train_prompts}
        test_ids = {p.id for p in test_prompts}
        report.prompt_split = {"train_prompts": len(train_ids), "test_prompts": len(test_ids),
                               "overlap": len(train_ids & test_ids)}

    with _stage("generate"):
        train_count = cfg.samples_per_entity_train
        train = generate_corpus(cfg, registry, train_prompts, train_count, split=SPLIT_TRAIN,
                                model=model, workers=workers)
        test = generate_corpus(cfg, registry, test_prompts, cfg.samples_per_entity_test,
                               split=SPLIT_TEST, model=model, workers=workers)
        assert not set(train.prompt_ids.tolist()) & set(test.prompt_ids.tolist())

    if Observer.INTERNAL in cfg.observers:
        with _stage("internal"):
            # Without watermarks the observer still holds per-entity keys: probe with them.
            bank_registry = assign_keys(cfg.n_entities, Mode.PER_ENTITY, master) \
                if mode is Mode.NONE else registry
            bank = detector_bank(bank_registry, cfg.scheme)
            cal = calibrate(bank, train.tokens, train.labels, cfg.target_fpr)
            report.attribution = evaluate_attribution(bank, cal, test.tokens, test.labels)

    if Observer.EXTERNAL in cfg.observers:
        with _stage("external"):
            n_classes = max(cfg.n_entities, 2)
            pool_ds = featurize_batch(train.tokens, train.labels, cfg.features, n_classes)
            test_ds = featurize_batch(test.tokens, test.labels, cfg.features, n_classes)
            order = [train.rows_of(e) for e in range(cfg.n_entities)]
            report.learning_curve = learning_curve(pool_ds, order, test_ds, cfg.sample_counts, cfg.train)
            report.learning_curve.n_entities = cfg.n_entities

    report.wall_clock_s = time.perf_counter() - started
    return report


# --- sweeps ----------------------------------------------------------------------

AXES = ("n_entities", "delta", "sample_counts", "scheme")


def point_config(base: ScenarioConfig, axis: str, value: Any, index: int) -> ScenarioConfig:
    if axis not in AXES:
        raise BadAxis(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    seed = splitmix64((int(base.master_seed) & MASK64) ^ index)
    name = f"{base.name}/{axis}={_label(value)}"
    if axis == "n_entities":
        return replace(base, name=name, master_seed=seed, n_entities=int(value))
    if axis == "delta":
        return replace(base, name=name, master_seed=seed, scheme=replace(base.scheme, delta=float(value)))
    if axis == "sample_counts":
        counts = tuple(int(v) for v in value) if isinstance(value, (list, tuple)) else (int(value),)
        return replace(base, name=name, master_seed=seed, sample_counts=counts)
    kind = str(value)
    scheme = SchemeConfig.for_kind(kind, gamma=base.scheme.gamma, delta=base.scheme.delta,
                                   vocab_size=base.scheme.vocab_size)
    return replace(base, name=name, master_seed=seed, scheme=scheme)


def _label(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return "-".join(str(v) for v in value)
    return str(value)


def sweep(base: ScenarioConfig, axis: str, values: Sequence[Any], *, workers: int = 1) -> list[RunReport]:
    """One report per value; point ``i`` runs with seed ``SplitMix64(master_seed XOR i)``."""
    configs = [point_config(base, axis, v, i) for i, v in enumerate(values)]
    if workers > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(lambda c: run_scenario(c, scenario_id=c.name), configs))
    return [run_scenario(c, scenario_id=c.name) for c in configs]
