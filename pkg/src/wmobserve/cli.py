"""Command-line entry point: ``wm-observe run|plot|validate|version``.

Exit codes: 0 success, 1 config or I/O error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .errors import IoError, SchemaError, WatermarkSimError
from .harness import AXES, CSV_COLUMNS, SCHEMA_VERSION, Observer, RunReport, ScenarioConfig, \
    config_from_dict, config_to_dict, point_config, run_scenario, sweep
from .plot import CONFIG_AXES, AxisSpec, plot_curves

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SEED_ENV = "WM_OBS_SEED"


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[Any, ...]


@dataclass(frozen=True)
class PlotSpec:
    file: str
    axis: AxisSpec


@dataclass(frozen=True)
class CliConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sweep: SweepSpec | None = None
    out_dir: str = "out"
    plots: tuple[PlotSpec, ...] | None = None
    schema_version: int = SCHEMA_VERSION

    def reports_expected(self) -> int:
        return len(self.sweep.values) if self.sweep else 1


_TOP_KEYS = ("schema_version", "scenario", "sweep", "output", "plots")


def _require(d: dict, allowed: Sequence[str]) -> None:
    for k in d:
        if k not in allowed:
            raise SchemaError(k, f"unknown key '{k}'")


def _plot_from_dict(d: Any) -> PlotSpec:
    if not isinstance(d, dict):
        raise SchemaError("plots", "each plot must be an object")
    _require(d, ("file", "metrics", "observer", "x", "title", "y_label"))
    if "file" not in d or not str(d["file"]).endswith(".svg") or Path(d["file"]).name != d["file"]:
        raise SchemaError("file", "plot file must be a bare *.svg name")
    if d.get("x", "samples_per_entity") not in ("samples_per_entity", *CONFIG_AXES):
        raise SchemaError("x", f"x must be samples_per_entity or one of {sorted(CONFIG_AXES)}")
    metrics = d.get("metrics", ["top1"])
    if not isinstance(metrics, list) or not metrics or not all(isinstance(m, str) for m in metrics):
        raise SchemaError("metrics", "metrics must be a non-empty list of names")
    axis = AxisSpec(metrics=tuple(metrics), observer=str(d.get("observer", "EXTERNAL")),
                    x=d.get("x", "samples_per_entity"), title=str(d.get("title", "")),
                    y_label=str(d.get("y_label", "accuracy")))
    return PlotSpec(d["file"], axis)


def config_from_document(doc: Any) -> CliConfig:
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "config must be a JSON object")
    _require(doc, _TOP_KEYS)
    if "schema_version" not in doc:
        raise SchemaError("schema_version", "missing schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaError("schema_version", f"unsupported schema_version {doc['schema_version']!r}")
    scenario = config_from_dict(doc.get("scenario", {}))
    sweep_spec = None
    if doc.get("sweep") is not None:
        s = doc["sweep"]
        if not isinstance(s, dict):
            raise SchemaError("sweep", "sweep must be an object")
        _require(s, ("axis", "values"))
        if s.get("axis") not in AXES:
            raise SchemaError("axis", f"sweep axis must be one of {list(AXES)}")
        if not isinstance(s.get("values"), list) or not s["values"]:
            raise SchemaError("values", "sweep values must be a non-empty list")
        sweep_spec = SweepSpec(s["axis"], tuple(tuple(v) if isinstance(v, list) else v for v in s["values"]))
    out = doc.get("output", {})
    if not isinstance(out, dict):
        raise SchemaError("output", "output must be an object")
    _require(out, ("dir",))
    plots = doc.get("plots")
    if plots is not None:
        if not isinstance(plots, list):
            raise SchemaError("plots", "plots must be a list")
        plots = tuple(_plot_from_dict(p) for p in plots)
    cfg = CliConfig(scenario, sweep_spec, str(out.get("dir", "out")), plots)
    validate_config(cfg)
    return cfg


def config_to_document(cfg: CliConfig) -> dict:
    doc: dict[str, Any] = {"schema_version": cfg.schema_version, "scenario": config_to_dict(cfg.scenario)}
    if cfg.sweep is not None:
        doc["sweep"] = {"axis": cfg.sweep.axis,
                        "values": [list(v) if isinstance(v, tuple) else v for v in cfg.sweep.values]}
    doc["output"] = {"dir": cfg.out_dir}
    if cfg.plots is not None:
        doc["plots"] = [{"file": p.file, "metrics": list(p.axis.metrics), "observer": p.axis.observer,
                         "x": p.axis.x, "title": p.axis.title, "y_label": p.axis.y_label}
                        for p in cfg.plots]
    return doc


def validate_config(cfg: CliConfig) -> None:
    """Validate every scenario the config would run."""
    cfg.scenario.validate()
    if cfg.sweep is not None:
        for i, v in enumerate(cfg.sweep.values):
            try:
                point = point_config(cfg.scenario, cfg.sweep.axis, v, i)
            except (TypeError, ValueError, KeyError) as exc:
                raise SchemaError("values", f"bad value {v!r} for axis {cfg.sweep.axis}: {exc}") from exc
            point.validate()


def parse_config(path: str | os.PathLike) -> CliConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("<json>", f"invalid JSON: {exc}") from exc
    return config_from_document(doc)


def apply_overrides(cfg: CliConfig, seed: int | None = None, out_dir: str | None = None,
                    env: dict | None = None) -> CliConfig:
    """``--seed`` beats ``WM_OBS_SEED`` beats the config file."""
    env = os.environ if env is None else env
    if seed is None and env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV], 0)
        except ValueError:
            raise SchemaError(SEED_ENV, f"not an integer: {env[SEED_ENV]!r}") from None
    if seed is not None:
        if seed < 0 or seed >= 1 << 64:
            raise SchemaError("master_seed", "seed must fit in 64 unsigned bits")
        cfg = replace(cfg, scenario=replace(cfg.scenario, master_seed=seed))
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    return cfg


def default_plots(cfg: CliConfig) -> tuple[PlotSpec, ...]:
    plots = []
    observers = cfg.scenario.observers
    if Observer.INTERNAL in observers and cfg.sweep is not None and cfg.sweep.axis in CONFIG_AXES:
        plots.append(PlotSpec("internal.svg", AxisSpec(metrics=("top1_tpr_at_fpr",), observer="INTERNAL",
                                                       x=cfg.sweep.axis, y_label="top-1 TPR at target FPR",
                                                       title="internal attribution")))
    if Observer.EXTERNAL in observers:
        metrics = ("top1", "top3") if cfg.sweep is None else ("top1",)
        plots.append(PlotSpec("external.svg", AxisSpec(metrics=metrics, observer="EXTERNAL",
                                                       title="external identification")))
    return tuple(plots)


# --- outputs -------------------------------------------------------------------


def reports_document(reports: Sequence[RunReport | dict]) -> dict:
    return {"schema_version": SCHEMA_VERSION,
            "reports": [r if isinstance(r, dict) else r.to_dict() for r in reports]}


def dumps_json(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _cell(v: Any) -> str:
    # repr is the shortest string that round-trips a float
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        for row in r.csv_rows():
            w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_outputs(reports: Sequence[RunReport], plots: Sequence[PlotSpec], out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json", out / "report.csv"]
        written[0].write_text(dumps_json(reports_document(reports)), encoding="utf-8")
        written[1].write_text(reports_csv(reports), encoding="utf-8")
        for p in plots:
            path = out / p.file
            path.write_text(plot_curves(reports, p.axis), encoding="utf-8")
            written.append(path)
        timing = {r.scenario_id: round(r.wall_clock_s, 3) for r in reports}
        (out / "timing.json").write_text(dumps_json(timing), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write outputs to {out}: {exc.strerror or exc}") from exc
    return written


def execute(cfg: CliConfig, workers: int = 1) -> list[RunReport]:
    if cfg.sweep is None:
        return [run_scenario(cfg.scenario, workers=workers)]
    return sweep(cfg.scenario, cfg.sweep.axis, cfg.sweep.values, workers=workers)


# --- commands ------------------------------------------------------------------


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_run(config_path: str, out_dir: str | None = None, *, seed: int | None = None, workers: int = 1) -> int:
    try:
        cfg = apply_overrides(parse_config(config_path), seed, out_dir)
    except WatermarkSimError as exc:
        return _fail(EXIT_CONFIG, f"{type(exc).__name__}: {exc}")
    try:
        reports = execute(cfg, workers=max(1, workers))
        plots = cfg.plots if cfg.plots is not None else default_plots(cfg)
        written = write_outputs(reports, plots, cfg.out_dir)
    except IoError as exc:
        return _fail(EXIT_CONFIG, f"IoError: {exc}")
    except WatermarkSimError as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    for path in written:
        print(path)
    return EXIT_OK


def cmd_plot(report_path: str, out_path: str, axis: AxisSpec) -> int:
    try:
        doc = json.loads(Path(report_path).read_text(encoding="utf-8"))
    except OSError as exc:
        return _fail(EXIT_CONFIG, f"IoError: cannot read {report_path}: {exc.strerror or exc}")
    except json.JSONDecodeError as exc:
        return _fail(EXIT_CONFIG, f"SchemaError: invalid JSON: {exc}")
    try:
        svg = plot_curves(doc.get("reports", []), axis)
    except (WatermarkSimError, KeyError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    try:
        Path(out_path).write_text(svg, encoding="utf-8")
    except OSError as exc:
        return _fail(EXIT_CONFIG, f"IoError: cannot write {out_path}: {exc.strerror or exc}")
    print(out_path)
    return EXIT_OK


def cmd_validate(config_path: str) -> int:
    try:
        cfg = apply_overrides(parse_config(config_path))
    except WatermarkSimError as exc:
        return _fail(EXIT_CONFIG, f"{type(exc).__name__}: {exc}")
    print(f"ok: {cfg.reports_expected()} scenario(s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wm-observe", description="Multi-key watermark monitoring simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario or sweep from a JSON config")
    run.add_argument("config", help="path to the JSON config")
    run.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    run.add_argument("--seed", type=lambda s: int(s, 0), default=None,
                     help=f"master seed (overrides ${SEED_ENV} and the config)")
    run.add_argument("--workers", type=int, default=1, help="parallel scenario/entity workers")

    plot = sub.add_parser("plot", help="render an SVG from an existing report.json")
    plot.add_argument("report", help="path to report.json")
    plot.add_argument("--out", default="plot.svg", help="SVG file to write")
    plot.add_argument("--metric", action="append", dest="metrics", help="metric name (repeatable)")
    plot.add_argument("--observer", default="EXTERNAL", choices=[o.value for o in Observer])
    plot.add_argument("--x", default="samples_per_entity", choices=["samples_per_entity", *CONFIG_AXES])
    plot.add_argument("--title", default="")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")

    sub.add_parser("version", help="print the package version")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, seed=args.seed, workers=args.workers)
    if args.command == "plot":
        axis = AxisSpec(metrics=tuple(args.metrics or ["top1"]), observer=args.observer, x=args.x, title=args.title)
        return cmd_plot(args.report, args.out, axis)
    if args.command == "validate":
        return cmd_validate(args.config)
    print(__version__)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
