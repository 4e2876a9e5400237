"""Experiment plans: parse a config, execute every run, summarise across seeds."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from clhpo.clmethods import Method, TrainSettings
from clhpo.evalreport import _atomic_write, emit_histogram, load_run, persist_run
from clhpo.hpo import DEFAULT_HOLDOUT_FRACTION, Framework, run_framework
from clhpo.streamgen import (
    DEFAULT_TEST_FRACTION,
    DEFAULT_VAL_FRACTION,
    Dataset,
    ingest_csv,
    make_stream,
    synth_gaussian,
)

log = logging.getLogger(__name__)

CONFIG_SCHEMA = "clhpo-config-v1"
INDEX_NAME = "index.json"
REPORT_NAME = "comparison.csv"
BOLD_MARGIN = 0.005

_TOP_KEYS = {"schema", "stream", "methods", "frameworks", "seeds", "training", "output"}
_STREAM_KEYS = {
    "source", "n_classes", "dim", "n_per_class", "separation", "data_seed",
    "path", "label_column", "split", "n_tasks", "class_counts", "test_fraction",
}
_TRAINING_KEYS = {"epochs", "batch_size", "buffer_capacity", "hidden", "ema_decay", "val_fraction", "holdout_fraction"}


class ConfigError(ValueError):
    pass


@dataclass
class StreamSpec:
    source: str = "synthetic"
    n_classes: int = 10
    dim: int = 8
    n_per_class: int = 200
    separation: float = 4.0
    data_seed: int = 0
    path: str | None = None
    label_column: str = "label"
    split: str = "split"
    n_tasks: int | None = 5
    class_counts: list[int] | None = None
    test_fraction: float = DEFAULT_TEST_FRACTION

    def load_dataset(self) -> Dataset:
        if self.source == "csv":
            return ingest_csv(self.path, self.label_column)
        return synth_gaussian(self.n_classes, self.dim, self.n_per_class, self.separation, self.data_seed)


@dataclass
class TrainingParams:
    epochs: int = 5
    batch_size: int = 32
    buffer_capacity: int = 512
    hidden: tuple[int, ...] = (64,)
    ema_decay: float = 0.999
    val_fraction: float = DEFAULT_VAL_FRACTION
    holdout_fraction: float = DEFAULT_HOLDOUT_FRACTION

    def settings(self) -> TrainSettings:
        return TrainSettings(self.epochs, self.batch_size, self.buffer_capacity, tuple(self.hidden), self.ema_decay)


@dataclass
class ExperimentPlan:
    stream: StreamSpec
    methods: list[Method]
    frameworks: list[Framework]
    seeds: list[int]
    training: TrainingParams = field(default_factory=TrainingParams)
    output: Path = Path("results")

    def expand(self) -> list[tuple[Method, Framework, int]]:
        return [(m, f, s) for m in self.methods for f in self.frameworks for s in self.seeds]


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}; allowed: {', '.join(sorted(allowed))}")


def _enum_list(values, enum, what: str) -> list:
    if isinstance(values, str):
        values = [values]
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{what} must be a non-empty list")
    out = []
    for v in values:
        try:
            out.append(enum(v))
        except ValueError:
            valid = ", ".join(e.value for e in enum)
            raise ConfigError(f"invalid {what[:-1]} {v!r}; valid values: {valid}") from None
    return out


def _typed(section: dict, key: str, kind, default):
    if key not in section or section[key] is None:
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{key} must be of type {kind.__name__}, got {value!r}")
    return value


def plan_from_dict(data: dict, base_dir: Path = Path(".")) -> ExperimentPlan:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(data, _TOP_KEYS, "config")
    if data.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"schema must be {CONFIG_SCHEMA!r}, got {data.get('schema')!r}")
    for key in ("stream", "methods", "frameworks", "seeds"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")

    s = data["stream"] or {}
    _check_keys(s, _STREAM_KEYS, "stream")
    d = StreamSpec()
    source = _typed(s, "source", str, d.source)
    if source not in ("synthetic", "csv"):
        raise ConfigError(f"invalid stream source {source!r}; valid values: synthetic, csv")
    split = _typed(s, "split", str, d.split)
    if split not in ("split", "hetero"):
        raise ConfigError(f"invalid stream split {split!r}; valid values: split, hetero")
    path = s.get("path")
    if source == "csv":
        if not path:
            raise ConfigError("csv streams need stream.path")
        path = str((base_dir / path).resolve()) if not Path(path).is_absolute() else path
        if not Path(path).exists():
            raise ConfigError(f"stream.path {path} does not exist")
    class_counts = s.get("class_counts")
    if split == "hetero":
        if not isinstance(class_counts, list) or not all(isinstance(c, int) for c in class_counts):
            raise ConfigError("hetero streams need stream.class_counts as a list of integers")
    stream = StreamSpec(
        source=source,
        n_classes=_typed(s, "n_classes", int, d.n_classes),
        dim=_typed(s, "dim", int, d.dim),
        n_per_class=_typed(s, "n_per_class", int, d.n_per_class),
        separation=_typed(s, "separation", float, d.separation),
        data_seed=_typed(s, "data_seed", int, d.data_seed),
        path=path,
        label_column=_typed(s, "label_column", str, d.label_column),
        split=split,
        n_tasks=_typed(s, "n_tasks", int, d.n_tasks) if split == "split" else None,
        class_counts=class_counts if split == "hetero" else None,
        test_fraction=_typed(s, "test_fraction", float, d.test_fraction),
    )

    t = data.get("training") or {}
    _check_keys(t, _TRAINING_KEYS, "training")
    dt = TrainingParams()
    hidden = t.get("hidden", list(dt.hidden))
    if not isinstance(hidden, list) or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError(f"hidden must be a list of positive integers, got {hidden!r}")
    training = TrainingParams(
        epochs=_typed(t, "epochs", int, dt.epochs),
        batch_size=_typed(t, "batch_size", int, dt.batch_size),
        buffer_capacity=_typed(t, "buffer_capacity", int, dt.buffer_capacity),
        hidden=tuple(hidden),
        ema_decay=_typed(t, "ema_decay", float, dt.ema_decay),
        val_fraction=_typed(t, "val_fraction", float, dt.val_fraction),
        holdout_fraction=_typed(t, "holdout_fraction", float, dt.holdout_fraction),
    )
    for name in ("val_fraction", "holdout_fraction", "ema_decay"):
        if not 0 < getattr(training, name) < 1:
            raise ConfigError(f"{name} must lie in (0, 1)")
    for name in ("epochs", "batch_size", "buffer_capacity"):
        if getattr(training, name) < 1:
            raise ConfigError(f"{name} must be >= 1")

    seeds = data["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(x, int) and not isinstance(x, bool) for x in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    output = Path(data.get("output") or "results")
    if not output.is_absolute():
        output = base_dir / output
    return ExperimentPlan(
        stream=stream,
        methods=_enum_list(data["methods"], Method, "methods"),
        frameworks=_enum_list(data["frameworks"], Framework, "frameworks"),
        seeds=list(seeds),
        training=training,
        output=output,
    )


def parse_config(path) -> ExperimentPlan:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return plan_from_dict(data, path.parent)


def run_name(method: Method, framework: Framework, seed: int) -> str:
    return f"{method.value}__{framework.value}__seed{seed}"


def _execute_one(plan: ExperimentPlan, dataset: Dataset, method: Method, framework: Framework, seed: int, dump_buffer: bool) -> dict:
    name = run_name(method, framework, seed)
    entry = {"method": method.value, "framework": framework.value, "seed": seed}
    try:
        stream = make_stream(
            dataset, seed,
            n_tasks=plan.stream.n_tasks if plan.stream.split == "split" else None,
            class_counts=plan.stream.class_counts if plan.stream.split == "hetero" else None,
            val_fraction=plan.training.val_fraction,
            test_fraction=plan.stream.test_fraction,
        )
        record = run_framework(
            framework, stream, method, seed, plan.training.settings(),
            holdout_fraction=plan.training.holdout_fraction,
        )
        out = plan.output
        run_file = persist_run(record, out / "runs" / f"{name}.json")
        histograms = []
        for phase in record.selections:
            tag = "stream" if phase.task_id is None else f"task{phase.task_id}"
            h = emit_histogram(list(zip(phase.configs, phase.scores)), out / "histograms" / f"{name}__{tag}.csv")
            histograms.append(str(h.relative_to(out)))
        entry.update(status="ok", run_file=str(run_file.relative_to(out)), histograms=histograms)
        if dump_buffer and record.final is not None:
            buf_path = out / "buffers" / f"{name}.csv"
            buf_path.parent.mkdir(parents=True, exist_ok=True)
            record.final.buffer.to_csv(buf_path)
            entry["buffer_dump"] = str(buf_path.relative_to(out))
    except Exception as exc:  # one failed run must not sink the sweep
        log.exception("run %s failed", name)
        entry.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return entry


def _execute_star(args):
    return _execute_one(*args)


def execute(plan: ExperimentPlan, *, jobs: int = 1, dump_buffer: bool = False) -> Path:
    """Run every (method, framework, seed) triple; returns the index file path."""
    plan.output.mkdir(parents=True, exist_ok=True)
    dataset = plan.stream.load_dataset()
    work = [(plan, dataset, m, f, s, dump_buffer) for m, f, s in plan.expand()]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            entries = list(pool.map(_execute_star, work))
    else:
        entries = [_execute_star(w) for w in work]
    index = {
        "schema": "clhpo-index-v1",
        "n_runs": len(entries),
        "n_failed": sum(e["status"] != "ok" for e in entries),
        "runs": entries,
    }
    path = plan.output / INDEX_NAME
    _atomic_write(path, json.dumps(index, indent=2) + "\n")
    return path


def _mean_se(values: list[float]) -> tuple[float, float | None]:
    mean = statistics.fmean(values)
    se = statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else None
    return mean, se


def bold_markers(means: dict[str, float], margin: float = BOLD_MARGIN) -> dict[str, bool]:
    """True where a mean beats every other entry by more than ``margin``."""
    out = {}
    for key, value in means.items():
        others = [v for k, v in means.items() if k != key]
        out[key] = bool(others) and value - max(others) > margin
    return out


def report(results_dir) -> Path:
    """Write ``comparison.csv``: per (method, framework), mean and SE across seeds."""
    results_dir = Path(results_dir)
    index_path = results_dir / INDEX_NAME
    if index_path.exists():
        entries = json.loads(index_path.read_text(encoding="utf-8"))["runs"]
    else:
        entries = [{"status": "ok", "run_file": str(p.relative_to(results_dir))} for p in sorted((results_dir / "runs").glob("*.json"))]
    if not any(e["status"] == "ok" for e in entries):
        raise FileNotFoundError(f"{results_dir} holds no completed runs")

    cells: dict[tuple[str, str], dict] = {}
    for e in entries:
        if e["status"] == "ok":
            rec = load_run(results_dir / e["run_file"])
            key = (rec.method.value, rec.framework.value)
            cell = cells.setdefault(key, {"class_il": [], "task_il": [], "units": [], "failed": []})
            cell["class_il"].append(rec.eval.average_accuracy_class_il)
            cell["task_il"].append(rec.eval.average_accuracy_task_il)
            cell["units"].append(rec.ledger.total)
        else:
            cell = cells.setdefault((e["method"], e["framework"]), {"class_il": [], "task_il": [], "units": [], "failed": []})
            cell["failed"].append(e["seed"])

    method_order = [m.value for m in Method]
    fw_order = [f.value for f in Framework]
    keys = sorted(cells, key=lambda k: (method_order.index(k[0]), fw_order.index(k[1])))
    bold = {}
    for metric in ("class_il", "task_il"):
        for method in {k[0] for k in keys}:
            means = {k[1]: statistics.fmean(cells[k][metric]) for k in keys if k[0] == method and cells[k][metric]}
            for fw, flag in bold_markers(means).items():
                bold[(method, fw, metric)] = flag

    def num(v):
        return "" if v is None else repr(float(v))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([
        "method", "framework", "n_seeds", "class_il_mean", "class_il_se", "task_il_mean", "task_il_se",
        "ledger_total_mean", "bold_class_il", "bold_task_il", "missing_seeds",
    ])
    for key in keys:
        cell = cells[key]
        missing = ";".join(str(s) for s in cell["failed"])
        if not cell["class_il"]:
            w.writerow([*key, 0, "", "", "", "", "", "", "", missing])
            continue
        ci = _mean_se(cell["class_il"])
        ti = _mean_se(cell["task_il"])
        w.writerow([
            *key, len(cell["class_il"]), num(ci[0]), num(ci[1]), num(ti[0]), num(ti[1]),
            num(statistics.fmean(cell["units"])),
            int(bold.get((*key, "class_il"), False)), int(bold.get((*key, "task_il"), False)), missing,
        ])
    out = results_dir / REPORT_NAME
    _atomic_write(out, buf.getvalue())
    return out


def with_seed_override(plan: ExperimentPlan, seed: int) -> ExperimentPlan:
    return replace(plan, seeds=[seed])
