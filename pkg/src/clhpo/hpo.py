"""HPO frameworks for continual learning, driven by grid search.

Every framework charges one *task-training unit* to a :class:`CostLedger` per
``Trainer.train_task`` call. Trials within a selection phase start from a
snapshot of the learner and use sub-seeds derived from
``(seed, task_id, config_index)``, so they can run in any order or in
parallel without changing the result.
"""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from clhpo.clmethods import METHOD_COEFFICIENTS, Method, Trainer, TrainSettings
from clhpo.evalreport import EvalReport, accuracy, evaluate, median_per_class_accuracy
from clhpo.streamgen import Split, TaskStream

log = logging.getLogger(__name__)

LEARNING_RATES = (0.2, 0.15, 0.1, 0.075, 0.05, 0.03, 0.01, 0.0075, 0.005, 0.0025)
DERPP_ALPHAS = (0.2, 0.5, 1.0)
DERPP_BETAS = (0.2, 0.5, 1.0)
ESMER_MARGINS = (1.5, 1.2, 1.0)
DEFAULT_LR = 0.001
DEFAULT_COEFFICIENT = 1.0
DEFAULT_HOLDOUT_FRACTION = 0.1

# sub-seed tags; trial tags are the config index itself
_INIT_TAG = 1_000_001
_RETRAIN_TAG = 1_000_002
_HOLDOUT_TAG = 1_000_003


class Framework(str, Enum):
    END_OF_TRAINING = "end_of_training"
    FIRST_TASK = "first_task"
    CURRENT_TASK = "current_task"
    SEEN_TASKS_VAL = "seen_tasks_val"
    SEEN_TASKS_MEM = "seen_tasks_mem"
    DEFAULT_HP = "default_hp"


@dataclass(frozen=True)
class HyperparamConfig:
    lr: float
    alpha: float | None = None
    beta: float | None = None
    loss_margin: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def make_grid(method: Method | str) -> list[HyperparamConfig]:
    """Learning rates crossed with the method's coefficient values."""
    method = Method(method)
    if method is Method.DERPP:
        return [HyperparamConfig(lr, alpha=a, beta=b) for lr, a, b in itertools.product(LEARNING_RATES, DERPP_ALPHAS, DERPP_BETAS)]
    if method is Method.ESMER:
        return [HyperparamConfig(lr, loss_margin=m) for lr, m in itertools.product(LEARNING_RATES, ESMER_MARGINS)]
    return [HyperparamConfig(lr) for lr in LEARNING_RATES]


def default_config(method: Method | str) -> HyperparamConfig:
    coeffs = {name: DEFAULT_COEFFICIENT for name in METHOD_COEFFICIENTS[Method(method)]}
    return HyperparamConfig(DEFAULT_LR, **coeffs)


@dataclass
class CostLedger:
    selection_units: int = 0
    retrain_units: int = 0
    per_task_breakdown: list[dict] = field(default_factory=list)

    def charge(self, task_id: int, phase: str, units: int = 1) -> None:
        if units < 0:
            raise ValueError(f"ledger charges must be non-negative, got {units}")
        if phase == "selection":
            self.selection_units += units
        elif phase == "retrain":
            self.retrain_units += units
        else:
            raise ValueError(f"unknown ledger phase {phase!r}")
        for row in self.per_task_breakdown:
            if row["task_id"] == task_id:
                row[phase] += units
                return
        row = {"task_id": task_id, "selection": 0, "retrain": 0}
        row[phase] += units
        self.per_task_breakdown.append(row)
        self.per_task_breakdown.sort(key=lambda r: r["task_id"])

    def merge(self, other: "CostLedger") -> None:
        for row in other.per_task_breakdown:
            for phase in ("selection", "retrain"):
                if row[phase]:
                    self.charge(row["task_id"], phase, row[phase])

    @property
    def total(self) -> int:
        return self.selection_units + self.retrain_units


@dataclass
class SelectionPhase:
    """Validation scores of every config in one selection phase.

    ``task_id`` is None for end-of-training selection, which scores after the
    whole stream; ``per_task_scores`` then holds each config's per-task
    validation accuracies.
    """

    task_id: int | None
    configs: list[HyperparamConfig]
    scores: list[float]
    chosen_index: int
    per_task_scores: list[list[float]] | None = None


@dataclass
class RunRecord:
    framework: Framework
    method: Method
    seed: int
    chosen_configs: list[HyperparamConfig]
    ledger: CostLedger
    eval: EvalReport
    selections: list[SelectionPhase] = field(default_factory=list)
    # final learner, kept for buffer dumps; never persisted or compared
    final: Trainer | None = field(default=None, compare=False, repr=False)


def select_best(scores: list[tuple[HyperparamConfig, float]]) -> HyperparamConfig:
    """Highest score; ties go to the earliest entry."""
    return scores[_argmax([s for _, s in scores])][0]


def _argmax(values: list[float]) -> int:
    if not values:
        raise ValueError("cannot select from an empty score list")
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def derive_seed(seed: int, task_id: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, task_id, tag]).generate_state(1)[0])


class _Run:
    """Shared plumbing for one framework run."""

    def __init__(self, stream: TaskStream, method, grid, seed, settings, hook, jobs):
        if grid is not None and not len(grid):
            raise ValueError("the hyperparameter grid is empty")
        if hook is not None and jobs > 1:
            raise ValueError("step hooks need serial execution (jobs=1)")
        for t in stream:
            if len(t.val) == 0:
                raise ValueError(f"task {t.task_id} has no validation split")
        self.stream = stream
        self.method = Method(method)
        self.grid = list(grid) if grid is not None else None
        self.seed = seed
        self.settings = settings or TrainSettings()
        self.hook = hook
        self.jobs = jobs
        self.ledger = CostLedger()

    def new_trainer(self) -> Trainer:
        tr = Trainer(self.method, self.stream.dim, self.stream.n_classes, self.settings, derive_seed(self.seed, 0, _INIT_TAG))
        tr.hook = self.hook
        return tr

    def train(self, trainer: Trainer, task_index: int, hp, phase: str, *, with_val: bool, tag: int, ledger=None) -> Trainer:
        task = self.stream[task_index]
        data = task.train_val() if with_val else task.train
        return trainer.train_task(
            task.task_id, task.classes, data, hp,
            seed=derive_seed(self.seed, task.task_id, tag), ledger=self.ledger if ledger is None else ledger, phase=phase,
        )

    def trials(self, base: Trainer | None, task_indices: list[int]) -> list[Trainer]:
        """Train every grid config from ``base`` (or a fresh learner) over the given tasks."""
        jobs = [(self, base, k, hp, task_indices) for k, hp in enumerate(self.grid)]
        if self.jobs > 1:
            with ProcessPoolExecutor(self.jobs) as pool:
                results = list(pool.map(_trial, jobs))
        else:
            results = [_trial(j) for j in jobs]
        trained = []
        for trainer, ledger in results:
            self.ledger.merge(ledger)
            trainer.hook = self.hook
            trained.append(trainer)
        return trained

    def record(self, framework, chosen, final: Trainer, selections) -> RunRecord:
        return RunRecord(
            framework, self.method, self.seed, chosen, self.ledger, evaluate(final, self.stream), selections, final
        )

    def __getstate__(self):
        state = self.__dict__.copy()
        state["hook"] = None
        return state


def _trial(args) -> tuple[Trainer, CostLedger]:
    run, base, k, hp, task_indices = args
    trainer = run.new_trainer() if base is None else base.snapshot()
    ledger = CostLedger()
    for i in task_indices:
        run.train(trainer, i, hp, "selection", with_val=False, tag=k, ledger=ledger)
    return trainer, ledger


def _val_accuracy(trainer: Trainer, val: Split) -> float:
    return accuracy(val.y, trainer.predict(val.X))


def run_end_of_training(stream, method, grid, seed, settings=None, *, hook=None, jobs=1) -> RunRecord:
    run = _Run(stream, method, grid, seed, settings, hook, jobs)
    all_tasks = list(range(len(stream)))
    trained = run.trials(None, all_tasks)
    pooled = Split.concat([t.val for t in stream])
    scores = [_val_accuracy(tr, pooled) for tr in trained]
    per_task = [[_val_accuracy(tr, t.val) for t in stream] for tr in trained]
    best = _argmax(scores)
    hp = run.grid[best]
    final = run.new_trainer()
    for i in all_tasks:
        run.train(final, i, hp, "retrain", with_val=True, tag=_RETRAIN_TAG)
    selection = SelectionPhase(None, run.grid, scores, best, per_task)
    return run.record(Framework.END_OF_TRAINING, [hp] * len(stream), final, [selection])


def run_first_task(stream, method, grid, seed, settings=None, *, hook=None, jobs=1) -> RunRecord:
    run = _Run(stream, method, grid, seed, settings, hook, jobs)
    trained = run.trials(None, [0])
    scores = [_val_accuracy(tr, stream[0].val) for tr in trained]
    best = _argmax(scores)
    hp = run.grid[best]
    final = run.new_trainer()
    for i in range(len(stream)):
        run.train(final, i, hp, "retrain", with_val=True, tag=_RETRAIN_TAG)
    selection = SelectionPhase(stream[0].task_id, run.grid, scores, best)
    return run.record(Framework.FIRST_TASK, [hp] * len(stream), final, [selection])


def run_current_task(stream, method, grid, seed, settings=None, *, hook=None, jobs=1) -> RunRecord:
    run = _Run(stream, method, grid, seed, settings, hook, jobs)
    state = run.new_trainer()
    chosen, selections = [], []
    for i, task in enumerate(stream):
        trained = run.trials(state, [i])
        scores = [_val_accuracy(tr, task.val) for tr in trained]
        best = _argmax(scores)
        hp = run.grid[best]
        run.train(state, i, hp, "retrain", with_val=True, tag=_RETRAIN_TAG)
        chosen.append(hp)
        selections.append(SelectionPhase(task.task_id, run.grid, scores, best))
    return run.record(Framework.CURRENT_TASK, chosen, state, selections)


def run_seen_tasks_val(stream, method, grid, seed, settings=None, *, hook=None, jobs=1) -> RunRecord:
    """Select on the pooled validation sets seen so far and keep the best trial's model.

    There is no retraining, so validation data is never trained on.
    """
    run = _Run(stream, method, grid, seed, settings, hook, jobs)
    state = run.new_trainer()
    chosen, selections, stored_val = [], [], []
    for i, task in enumerate(stream):
        stored_val.append(task.val)
        pooled = Split.concat(stored_val)
        trained = run.trials(state, [i])
        scores = [_val_accuracy(tr, pooled) for tr in trained]
        best = _argmax(scores)
        state = trained[best]
        chosen.append(run.grid[best])
        selections.append(SelectionPhase(task.task_id, run.grid, scores, best))
    return run.record(Framework.SEEN_TASKS_VAL, chosen, state, selections)


def run_seen_tasks_mem(
    stream, method, grid, seed, settings=None, *, hook=None, jobs=1, holdout_fraction=DEFAULT_HOLDOUT_FRACTION
) -> RunRecord:
    """Select on current validation data plus a held-out sample of the replay buffer.

    The held-out entries are taken per task in equal proportion, excluded from
    replay during the trials, and released before the retrain. Configs are
    scored by median per-class accuracy.
    """
    run = _Run(stream, method, grid, seed, settings, hook, jobs)
    state = run.new_trainer()
    chosen, selections = [], []
    for i, task in enumerate(stream):
        base = state.snapshot()
        held: set[int] = set()
        if len(base.buffer):
            rng = np.random.default_rng(derive_seed(seed, task.task_id, _HOLDOUT_TAG))
            held = base.buffer.holdout_proportional(holdout_fraction, rng)
        slots = np.sort(base.buffer.slots_of(held)) if held else np.empty(0, dtype=np.int64)
        buf = base.buffer
        mem = Split(buf.X[slots].copy(), buf.y[slots].copy(), buf.example_ids[slots].copy())
        val = Split.concat([task.val, mem])
        trained = run.trials(base, [i])
        scores = [median_per_class_accuracy(list(zip(val.y.tolist(), tr.predict(val.X).tolist()))) for tr in trained]
        best = _argmax(scores)
        hp = run.grid[best]
        run.train(state, i, hp, "retrain", with_val=True, tag=_RETRAIN_TAG)
        chosen.append(hp)
        selections.append(SelectionPhase(task.task_id, run.grid, scores, best))
    return run.record(Framework.SEEN_TASKS_MEM, chosen, state, selections)


def run_default_hp(stream, method, seed, settings=None, *, hook=None, jobs=1) -> RunRecord:
    run = _Run(stream, method, None, seed, settings, hook, 1)
    hp = default_config(method)
    final = run.new_trainer()
    for i in range(len(stream)):
        run.train(final, i, hp, "retrain", with_val=True, tag=_RETRAIN_TAG)
    return run.record(Framework.DEFAULT_HP, [hp] * len(stream), final, [])


FRAMEWORK_RUNNERS = {
    Framework.END_OF_TRAINING: run_end_of_training,
    Framework.FIRST_TASK: run_first_task,
    Framework.CURRENT_TASK: run_current_task,
    Framework.SEEN_TASKS_VAL: run_seen_tasks_val,
    Framework.SEEN_TASKS_MEM: run_seen_tasks_mem,
}


def run_framework(framework, stream, method, seed, settings=None, *, grid=None, hook=None, jobs=1, holdout_fraction=DEFAULT_HOLDOUT_FRACTION) -> RunRecord:
    framework = Framework(framework)
    if framework is Framework.DEFAULT_HP:
        return run_default_hp(stream, method, seed, settings, hook=hook)
    grid = make_grid(method) if grid is None else grid
    kwargs = {"hook": hook, "jobs": jobs}
    if framework is Framework.SEEN_TASKS_MEM:
        kwargs["holdout_fraction"] = holdout_fraction
    return FRAMEWORK_RUNNERS[framework](stream, method, grid, seed, settings, **kwargs)


def expected_units(framework: Framework | str, K: int, T: int) -> tuple[int, int]:
    """Closed-form (selection, retrain) task-training units."""
    return {
        Framework.END_OF_TRAINING: (K * T, T),
        Framework.FIRST_TASK: (K, T),
        Framework.CURRENT_TASK: (K * T, T),
        Framework.SEEN_TASKS_VAL: (K * T, 0),
        Framework.SEEN_TASKS_MEM: (K * T, T),
        Framework.DEFAULT_HP: (0, T),
    }[Framework(framework)]


def ledger_sweep(Ks=(1, 3, 10), Ts=(1, 2, 5), seed: int = 0) -> list[dict]:
    """Measured vs closed-form units on a tiny stream with a one-step learner."""
    from clhpo.streamgen import make_stream, synth_gaussian

    settings = TrainSettings(epochs=1, batch_size=64, buffer_capacity=16, hidden=(4,))
    rows = []
    for T in Ts:
        dataset = synth_gaussian(2 * T, 2, 10, 3.0, seed)
        stream = make_stream(dataset, seed, n_tasks=T)
        for K in Ks:
            grid = make_grid(Method.ER)[:K]
            for fw in Framework:
                rec = run_framework(fw, stream, Method.ER, seed, settings, grid=grid)
                sel, ret = expected_units(fw, K, T)
                rows.append({
                    "framework": fw.value, "K": K, "T": T,
                    "selection": rec.ledger.selection_units, "retrain": rec.ledger.retrain_units,
                    "expected_selection": sel, "expected_retrain": ret,
                    "ok": (rec.ledger.selection_units, rec.ledger.retrain_units) == (sel, ret),
                })
    return rows
