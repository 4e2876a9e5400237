"""Class-IL / task-IL evaluation, selection histograms and run files."""
from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

RUN_SCHEMA = "clhpo-run-v1"
HISTOGRAM_COLUMNS = ("config_id", "lr", "alpha", "beta", "loss_margin", "val_accuracy")


@dataclass
class EvalReport:
    per_task_class_il: list[float]
    per_task_task_il: list[float]
    average_accuracy_class_il: float
    average_accuracy_task_il: float
    per_class_accuracy: dict[int, float]


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    if len(y_true) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(y_true == np.asarray(y_pred)))


def _predict(predictor, X, class_mask=None):
    if hasattr(predictor, "predict"):
        return predictor.predict(X, class_mask)
    return predictor(X, class_mask)


def task_accuracies(predictor, stream, mode: str) -> list[float]:
    """Per-task test accuracy; ``mode`` is "class_il" or "task_il"."""
    if mode not in ("class_il", "task_il"):
        raise ValueError(f"mode must be 'class_il' or 'task_il', got {mode!r}")
    out = []
    for task in stream:
        if len(task.test) == 0:
            raise ValueError(f"task {task.task_id} has no test data")
        mask = task.classes if mode == "task_il" else None
        out.append(accuracy(task.test.y, _predict(predictor, task.test.X, mask)))
    return out


def evaluate(predictor, stream) -> EvalReport:
    """Test-set report. ``predictor`` has ``predict(X, class_mask)`` or is such a callable."""
    class_il, task_il, per_class = [], [], {}
    for task in stream:
        if len(task.test) == 0:
            raise ValueError(f"task {task.task_id} has no test data")
        pred = _predict(predictor, task.test.X)
        class_il.append(accuracy(task.test.y, pred))
        task_il.append(accuracy(task.test.y, _predict(predictor, task.test.X, task.classes)))
        for c in task.classes:
            rows = task.test.y == c
            if rows.any():
                per_class[int(c)] = float(np.mean(pred[rows] == c))
    return EvalReport(
        class_il, task_il, float(np.mean(class_il)), float(np.mean(task_il)), dict(sorted(per_class.items()))
    )


def median_per_class_accuracy(predictions) -> float:
    """Median over classes of per-class accuracy, from (true, predicted) pairs."""
    predictions = list(predictions)
    if not predictions:
        raise ValueError("no predictions")
    hits: dict[int, list[int]] = {}
    for true, pred in predictions:
        hits.setdefault(int(true), []).append(int(true == pred))
    return float(np.median([np.mean(v) for v in hits.values()]))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def emit_histogram(trial_scores, path) -> Path:
    """One CSV row per config, in grid order."""
    trial_scores = list(trial_scores)
    if not trial_scores:
        raise ValueError("no trial scores to write")
    rows = [",".join(HISTOGRAM_COLUMNS)]
    for i, (cfg, score) in enumerate(trial_scores):
        rows.append(",".join([str(i), _fmt(cfg.lr), _fmt(cfg.alpha), _fmt(cfg.beta), _fmt(cfg.loss_margin), _fmt(score)]))
    path = Path(path)
    _atomic_write(path, "\n".join(rows) + "\n")
    return path


def read_histogram(path):
    from clhpo.hpo import HyperparamConfig

    def opt(v):
        return None if v == "" else float(v)

    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTOGRAM_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = sorted(reader, key=lambda r: int(r["config_id"]))
    return [
        (HyperparamConfig(float(r["lr"]), opt(r["alpha"]), opt(r["beta"]), opt(r["loss_margin"])), float(r["val_accuracy"]))
        for r in rows
    ]


def run_to_dict(record) -> dict:
    def cfg(c):
        return c.to_dict()

    return {
        "schema": RUN_SCHEMA,
        "framework": record.framework.value,
        "method": record.method.value,
        "seed": record.seed,
        "chosen_configs": [cfg(c) for c in record.chosen_configs],
        "ledger": {
            "selection_units": record.ledger.selection_units,
            "retrain_units": record.ledger.retrain_units,
            "total_units": record.ledger.total,
            "per_task_breakdown": record.ledger.per_task_breakdown,
        },
        "eval": {
            **asdict(record.eval),
            "per_class_accuracy": {str(k): v for k, v in record.eval.per_class_accuracy.items()},
        },
        "selections": [
            {
                "task_id": s.task_id,
                "chosen_index": s.chosen_index,
                "configs": [cfg(c) for c in s.configs],
                "scores": s.scores,
                "per_task_scores": s.per_task_scores,
            }
            for s in record.selections
        ],
    }


def run_from_dict(data: dict):
    from clhpo.clmethods import Method
    from clhpo.hpo import CostLedger, Framework, HyperparamConfig, RunRecord, SelectionPhase

    if data.get("schema") != RUN_SCHEMA:
        raise ValueError(f"unsupported run schema {data.get('schema')!r}; expected {RUN_SCHEMA}")
    led = data["ledger"]
    ev = data["eval"]
    return RunRecord(
        framework=Framework(data["framework"]),
        method=Method(data["method"]),
        seed=data["seed"],
        chosen_configs=[HyperparamConfig(**c) for c in data["chosen_configs"]],
        ledger=CostLedger(led["selection_units"], led["retrain_units"], led["per_task_breakdown"]),
        eval=EvalReport(
            ev["per_task_class_il"], ev["per_task_task_il"], ev["average_accuracy_class_il"],
            ev["average_accuracy_task_il"], {int(k): v for k, v in ev["per_class_accuracy"].items()},
        ),
        selections=[
            SelectionPhase(
                s["task_id"], [HyperparamConfig(**c) for c in s["configs"]], s["scores"],
                s["chosen_index"], s["per_task_scores"],
            )
            for s in data["selections"]
        ],
    )


def persist_run(record, path) -> Path:
    path = Path(path)
    _atomic_write(path, json.dumps(run_to_dict(record), indent=2) + "\n")
    return path


def load_run(path):
    return run_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
