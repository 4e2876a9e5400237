"""Replay-based continual learners behind one ``Trainer`` interface.

ER, ER-ACE and DER++ follow their usual formulations. iCaRL and ESMER are
simplified MLP-scale versions:

* iCaRL: cross-entropy on the current batch plus soft-target distillation
  toward the pre-task model on replayed inputs; herding exemplar selection;
  nearest-mean-of-exemplars prediction.
* ESMER: per-example cross-entropy whose large losses are damped relative to a
  running loss mean, plus a logit-consistency term toward an EMA copy of the
  model on replayed inputs.

Buffer updates happen once per task, after its last step, so the first task
never replays anything.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from clhpo.memory import ReplayBuffer, ema_update
from clhpo.neural import (
    MLP,
    features,
    forward,
    init_mlp,
    loss_and_grad,
    mse_logit_loss_and_grad,
    per_example_ce,
    predict,
    sgd_step,
    soft_ce_loss_and_grad,
)
from clhpo.streamgen import Split

ESMER_LOSS_MEAN_MOMENTUM = 0.99
ESMER_CONSISTENCY_WEIGHT = 0.15


class Method(str, Enum):
    ER = "er"
    ER_ACE = "er_ace"
    DERPP = "derpp"
    ICARL = "icarl"
    ESMER = "esmer"


# hyperparameters each method reads beyond the learning rate
METHOD_COEFFICIENTS: dict[Method, tuple[str, ...]] = {
    Method.ER: (),
    Method.ER_ACE: (),
    Method.DERPP: ("alpha", "beta"),
    Method.ICARL: (),
    Method.ESMER: ("loss_margin",),
}


class StreamError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 5
    batch_size: int = 32
    buffer_capacity: int = 512
    hidden: tuple[int, ...] = (64,)
    ema_decay: float = 0.999


@dataclass(frozen=True)
class StepEvent:
    """What one SGD step consumed; passed to ``Trainer.hook`` before the update."""

    phase: str
    task_id: int
    current_ids: np.ndarray
    replay_ids: np.ndarray
    replay_uids: np.ndarray
    held_out: frozenset


def check_hyperparams(method: Method, hp) -> None:
    if not hp.lr > 0:
        raise ValueError(f"learning rate must be > 0, got {hp.lr}")
    wanted = METHOD_COEFFICIENTS[method]
    for name in ("alpha", "beta", "loss_margin"):
        value = getattr(hp, name)
        if name in wanted and value is None:
            raise ValueError(f"{method.value} needs {name}")
        if name not in wanted and value is not None:
            raise ValueError(f"{method.value} does not use {name}")


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator, int]:
    """Independent streams for batch order and replay draws, plus a buffer seed."""
    ss = np.random.SeedSequence(seed)
    order, replay, buf = ss.spawn(3)
    return np.random.default_rng(order), np.random.default_rng(replay), int(buf.generate_state(1)[0])


def minibatches(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def train_plain_sgd(model: MLP, X, y, lr: float, epochs: int, batch_size: int, seed: int, on_step=None) -> MLP:
    """Fine-tuning with cross-entropy only, using the same batch order a Trainer would.

    ``on_step(model)`` runs before every update.
    """
    order_rng, _, _ = _rngs(seed)
    for idx in minibatches(len(y), batch_size, epochs, order_rng):
        _, grads = loss_and_grad(model, X[idx], y[idx])
        if on_step is not None:
            on_step(model)
        sgd_step(model, grads, lr)
    return model


# -- per-method batch losses ---------------------------------------------------

def batch_loss_er(model: MLP, cur_X, cur_y, rep_X, rep_y):
    """Cross-entropy over the current batch with the replay batch appended."""
    if len(rep_y) == 0:
        return loss_and_grad(model, cur_X, cur_y)
    return loss_and_grad(model, np.concatenate([cur_X, rep_X]), np.concatenate([cur_y, rep_y]))


def batch_loss_er_ace(model: MLP, cur_X, cur_y, rep_X, rep_y, current_classes, seen_classes):
    """Current batch restricted to the current task's classes, replay over all seen classes."""
    loss, grads = loss_and_grad(model, cur_X, cur_y, class_mask=current_classes)
    if len(rep_y):
        rep_loss, rep_grads = loss_and_grad(model, rep_X, rep_y, class_mask=seen_classes)
        loss, grads = loss + rep_loss, grads + rep_grads
    return loss, grads


def batch_loss_derpp(model: MLP, cur_X, cur_y, rep1_X, rep1_logits, rep2_X, rep2_y, alpha, beta):
    """CE(current) + alpha * MSE(logits, stored logits) + beta * CE(second replay batch)."""
    if rep1_logits is not None and np.isnan(rep1_logits).any():
        raise StateError("replayed DER++ entries are missing stored logits")
    loss, grads = loss_and_grad(model, cur_X, cur_y)
    if alpha and len(rep1_X):
        l, g = mse_logit_loss_and_grad(model, rep1_X, rep1_logits)
        loss, grads = loss + alpha * l, grads + g.scale(alpha)
    if beta and len(rep2_y):
        l, g = loss_and_grad(model, rep2_X, rep2_y)
        loss, grads = loss + beta * l, grads + g.scale(beta)
    return loss, grads


def esmer_weights(losses: np.ndarray, loss_mean: float | None, margin: float) -> np.ndarray:
    """1 for losses within margin * mean, else margin * mean / loss."""
    if loss_mean is None:
        return np.ones_like(losses)
    threshold = margin * loss_mean
    return np.where(losses > threshold, threshold / np.maximum(losses, 1e-300), 1.0)


def batch_loss_esmer(model: MLP, stable: MLP, cur_X, cur_y, rep_X, rep_y, margin, loss_mean):
    """Error-damped CE on current+replay, plus consistency toward ``stable`` on replay.

    Returns ``(loss, grads, batch_mean_ce)``; the caller folds the last value
    into its running loss mean.
    """
    X = np.concatenate([cur_X, rep_X]) if len(rep_y) else cur_X
    y = np.concatenate([cur_y, rep_y]) if len(rep_y) else cur_y
    losses, _ = per_example_ce(forward(model, X), y)
    w = esmer_weights(losses, loss_mean, margin)
    loss, grads = loss_and_grad(model, X, y, sample_weight=w)
    if len(rep_y):
        l, g = mse_logit_loss_and_grad(model, rep_X, forward(stable, rep_X))
        loss, grads = loss + ESMER_CONSISTENCY_WEIGHT * l, grads + g.scale(ESMER_CONSISTENCY_WEIGHT)
    return loss, grads, float(losses.mean())


def batch_loss_icarl(model: MLP, old_model: MLP | None, cur_X, cur_y, rep_X, old_classes):
    """CE(current) + soft-target CE toward the pre-task model's old-class probabilities."""
    loss, grads = loss_and_grad(model, cur_X, cur_y)
    if old_model is not None and len(rep_X) and old_classes:
        mask = sorted(old_classes)
        old_logits = forward(old_model, rep_X)
        keep = np.zeros(old_logits.shape[1], dtype=bool)
        keep[mask] = True
        z = np.where(keep, old_logits, -np.inf)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        targets = z / z.sum(axis=1, keepdims=True)
        l, g = soft_ce_loss_and_grad(model, rep_X, targets, class_mask=mask)
        loss, grads = loss + l, grads + g
    return loss, grads


def herding_select(feats: np.ndarray, m: int) -> np.ndarray:
    """Greedy herding: each pick brings the running exemplar mean closest to the class mean."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    m = min(m, len(feats))
    target = feats.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(feats.shape[1])
    available = np.ones(len(feats), dtype=bool)
    for k in range(1, m + 1):
        cand = (running + feats) / k
        dist = np.linalg.norm(cand - target, axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))
        chosen.append(pick)
        available[pick] = False
        running += feats[pick]
    return np.array(chosen, dtype=np.int64)


# -- trainer ------------------------------------------------------------------

class Trainer:
    """Model, replay buffer and method state for one learner on one stream."""

    def __init__(self, method: Method, n_inputs: int, n_classes: int, settings: TrainSettings, seed: int):
        self.method = Method(method)
        self.settings = settings
        self.n_classes = n_classes
        self.model = init_mlp([n_inputs, *settings.hidden, n_classes], seed)
        self.buffer = ReplayBuffer(settings.buffer_capacity, n_inputs, n_classes, seed)
        self.seen_classes: set[int] = set()
        self.trained_tasks: list[int] = []
        self.stable: MLP | None = self.model.copy() if self.method is Method.ESMER else None
        self.loss_mean: float | None = None
        self.hook: Callable[[StepEvent], None] | None = None

    def snapshot(self) -> "Trainer":
        hook, self.hook = self.hook, None
        try:
            clone = copy.deepcopy(self)
        finally:
            self.hook = hook
        clone.hook = hook
        return clone

    def __getstate__(self):
        state = self.__dict__.copy()
        state["hook"] = None
        return state

    # training

    def train_task(self, task_id: int, classes, data: Split, hp, *, seed: int, ledger=None, phase: str = "train") -> "Trainer":
        classes = set(int(c) for c in classes)
        if classes & self.seen_classes:
            raise StreamError(f"task {task_id} reuses already-seen classes {sorted(classes & self.seen_classes)}")
        check_hyperparams(self.method, hp)
        if len(data) and not np.isin(data.y, list(classes)).all():
            raise StreamError(f"task {task_id} data contains labels outside {sorted(classes)}")
        order_rng, replay_rng, buffer_seed = _rngs(seed)
        self.buffer.reseed(buffer_seed)
        old_model = self.model.copy() if self.method is Method.ICARL and self.seen_classes else None
        old_classes = set(self.seen_classes)
        seen_now = old_classes | classes
        bs = self.settings.batch_size
        empty = np.empty(0, dtype=np.int64)

        for idx in minibatches(len(data), bs, self.settings.epochs, order_rng):
            cur_X, cur_y = data.X[idx], data.y[idx]
            slots = self.buffer.sample_slots(bs, replay_rng) if len(self.buffer) else empty
            rep_X, rep_y = self.buffer.X[slots], self.buffer.y[slots]
            used = [slots]
            if self.method is Method.ER:
                _, grads = batch_loss_er(self.model, cur_X, cur_y, rep_X, rep_y)
            elif self.method is Method.ER_ACE:
                _, grads = batch_loss_er_ace(self.model, cur_X, cur_y, rep_X, rep_y, classes, seen_now)
            elif self.method is Method.DERPP:
                slots2 = self.buffer.sample_slots(bs, replay_rng) if len(self.buffer) else empty
                used.append(slots2)
                logits = self.buffer.logits[slots] if hp.alpha else None
                _, grads = batch_loss_derpp(
                    self.model, cur_X, cur_y, rep_X, logits,
                    self.buffer.X[slots2], self.buffer.y[slots2], hp.alpha, hp.beta,
                )
            elif self.method is Method.ICARL:
                _, grads = batch_loss_icarl(self.model, old_model, cur_X, cur_y, rep_X, old_classes)
            else:
                _, grads, batch_mean = batch_loss_esmer(
                    self.model, self.stable, cur_X, cur_y, rep_X, rep_y, hp.loss_margin, self.loss_mean
                )
                self.loss_mean = batch_mean if self.loss_mean is None else (
                    ESMER_LOSS_MEAN_MOMENTUM * self.loss_mean + (1 - ESMER_LOSS_MEAN_MOMENTUM) * batch_mean
                )
            if self.hook is not None:
                all_slots = np.concatenate(used)
                self.hook(StepEvent(
                    phase, task_id, data.ids[idx].copy(), self.buffer.example_ids[all_slots].copy(),
                    self.buffer.uids[all_slots].copy(), frozenset(self.buffer.held_out),
                ))
            sgd_step(self.model, grads, hp.lr)
            if self.stable is not None:
                ema_update(self.stable, self.model, self.settings.ema_decay)

        self.seen_classes = seen_now
        self.trained_tasks.append(task_id)
        if self.method is Method.ICARL:
            self._rebuild_exemplars(task_id, classes, data)
        else:
            self._reservoir_update(task_id, data, order_rng)
        if ledger is not None:
            ledger.charge(task_id, phase)
        return self

    def _reservoir_update(self, task_id: int, data: Split, rng: np.random.Generator) -> None:
        order = rng.permutation(len(data))
        logits = forward(self.model, data.X) if self.method is Method.DERPP else None
        for i in order:
            self.buffer.insert(
                data.X[i], int(data.y[i]), task_id, int(data.ids[i]),
                None if logits is None else logits[i],
            )

    def _rebuild_exemplars(self, task_id: int, classes: set[int], data: Split) -> None:
        per_class = self.buffer.capacity // len(self.seen_classes)
        if per_class < 1:
            raise ValueError(
                f"buffer capacity {self.buffer.capacity} cannot hold one exemplar for each of {len(self.seen_classes)} classes"
            )
        buf = self.buffer
        parts = []
        for c in sorted(self.seen_classes - classes):
            slots = np.flatnonzero(buf.y[:buf.size] == c)[:per_class]
            parts.append((buf.X[slots], buf.y[slots], buf.task_ids[slots], buf.example_ids[slots]))
        for c in sorted(classes):
            rows = np.flatnonzero(data.y == c)
            pick = rows[self.build_exemplars(data.X[rows], per_class)]
            parts.append((data.X[pick], data.y[pick], np.full(len(pick), task_id), data.ids[pick]))
        X, y, t, ids = (np.concatenate(col) for col in zip(*parts))
        buf.replace_contents(X, y, t, ids)

    def build_exemplars(self, X_class: np.ndarray, m: int) -> np.ndarray:
        """Row indices of ``m`` herding-selected exemplars, in selection order."""
        return herding_select(features(self.model, X_class), m)

    # prediction

    def class_means(self) -> dict[int, np.ndarray]:
        buf = self.buffer
        eligible = np.zeros(buf.size, dtype=bool)
        eligible[buf.eligible_slots()] = True
        feats = features(self.model, buf.X[:buf.size]) if buf.size else None
        means = {}
        for c in sorted(self.seen_classes):
            of_class = buf.y[:buf.size] == c
            rows = np.flatnonzero(of_class & eligible)
            if not len(rows):
                rows = np.flatnonzero(of_class)
            if len(rows):
                means[c] = feats[rows].mean(axis=0)
        return means

    def nme_predict(self, X, class_mask=None) -> np.ndarray:
        means = self.class_means()
        allowed = sorted(means) if class_mask is None else sorted(set(class_mask))
        missing = [c for c in allowed if c not in means]
        if missing:
            raise ValueError(f"no exemplars for classes {missing}")
        if not allowed:
            raise ValueError("no classes to predict")
        centers = np.stack([means[c] for c in allowed])
        feats = features(self.model, X)
        d = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return np.array(allowed)[d.argmin(axis=1)]

    def predict(self, X, class_mask=None) -> np.ndarray:
        if self.method is Method.ICARL and self.seen_classes:
            return self.nme_predict(X, class_mask)
        return predict(self.model, X, class_mask)


def steps_per_task(n_examples: int, settings: TrainSettings) -> int:
    return settings.epochs * math.ceil(n_examples / settings.batch_size)

