"""Replay memory: a reservoir-sampled buffer and the EMA helper."""
from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from clhpo.neural import MLP, ShapeError
from clhpo.streamgen import ceil_fraction


@dataclass(frozen=True)
class BufferEntry:
    x: np.ndarray
    y: int
    task_id: int
    example_id: int
    insertion_index: int
    stored_logits: np.ndarray | None = None


class ReplayBuffer:
    """Bounded exemplar memory.

    Entries are identified by ``insertion_index``: the number of items offered
    to the buffer before this one. It is unique and survives copies, so held-out
    marks can refer to it.
    """

    def __init__(self, capacity: int, dim: int, n_classes: int, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.n_classes = n_classes
        self.X = np.zeros((capacity, dim))
        self.y = np.zeros(capacity, dtype=np.int64)
        self.task_ids = np.zeros(capacity, dtype=np.int64)
        self.example_ids = np.zeros(capacity, dtype=np.int64)
        self.uids = np.zeros(capacity, dtype=np.int64)
        self.logits = np.full((capacity, n_classes), np.nan)
        self.has_logits = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.seen_count = 0
        self.held_out: set[int] = set()
        self._rng = random.Random(seed)

    def __len__(self) -> int:
        return self.size

    def reseed(self, seed: int) -> None:
        self._rng = random.Random(seed)

    def _write(self, slot, x, y, task_id, example_id, logits):
        self.X[slot] = x
        self.y[slot] = y
        self.task_ids[slot] = task_id
        self.example_ids[slot] = example_id
        self.uids[slot] = self.seen_count
        if logits is None:
            self.logits[slot] = np.nan
            self.has_logits[slot] = False
        else:
            self.logits[slot] = logits
            self.has_logits[slot] = True

    def insert(self, x, y: int, task_id: int, example_id: int = -1, logits=None) -> bool:
        """Reservoir insertion. Returns whether the item was stored."""
        if logits is not None and np.shape(logits) != (self.n_classes,):
            raise ShapeError(f"stored logits must have length {self.n_classes}, got {np.shape(logits)}")
        if np.shape(x) != (self.dim,):
            raise ShapeError(f"expected a feature vector of length {self.dim}, got {np.shape(x)}")
        if self.size < self.capacity:
            slot = self.size
            self.size += 1
        else:
            slot = self._rng.randint(0, self.seen_count)
            if slot >= self.capacity:
                slot = -1
            else:
                self.held_out.discard(int(self.uids[slot]))
        if slot >= 0:
            self._write(slot, x, y, task_id, example_id, logits)
        self.seen_count += 1
        return slot >= 0

    def entry(self, slot: int) -> BufferEntry:
        logits = self.logits[slot].copy() if self.has_logits[slot] else None
        return BufferEntry(
            self.X[slot].copy(), int(self.y[slot]), int(self.task_ids[slot]),
            int(self.example_ids[slot]), int(self.uids[slot]), logits,
        )

    def entries(self) -> list[BufferEntry]:
        return [self.entry(i) for i in range(self.size)]

    def eligible_slots(self) -> np.ndarray:
        slots = np.arange(self.size)
        if not self.held_out:
            return slots
        held = np.isin(self.uids[:self.size], np.fromiter(self.held_out, dtype=np.int64))
        return slots[~held]

    def sample_slots(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Up to ``k`` distinct non-held-out slots, uniformly at random."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        eligible = self.eligible_slots()
        if len(eligible) <= k:
            return eligible
        return eligible[rng.choice(len(eligible), size=k, replace=False)]

    def sample(self, k: int, rng: np.random.Generator) -> list[BufferEntry]:
        return [self.entry(s) for s in self.sample_slots(k, rng)]

    def holdout_proportional(self, fraction: float, rng: np.random.Generator) -> set[int]:
        """Reserve ceil(fraction * n_t) entries of every task present; returns their ids."""
        if not 0 < fraction < 1:
            raise ValueError(f"fraction must be in (0, 1), got {fraction}")
        chosen: set[int] = set()
        tasks = self.task_ids[:self.size]
        for t in np.unique(tasks):
            slots = np.flatnonzero(tasks == t)
            n_held = ceil_fraction(fraction, len(slots))
            picked = slots[rng.choice(len(slots), size=n_held, replace=False)]
            chosen.update(int(u) for u in self.uids[picked])
        self.held_out |= chosen
        return chosen

    def release_holdout(self) -> None:
        self.held_out = set()

    def slots_of(self, uids) -> np.ndarray:
        return np.flatnonzero(np.isin(self.uids[:self.size], np.fromiter(uids, dtype=np.int64)))

    def replace_contents(self, X, y, task_ids, example_ids) -> None:
        """Overwrite the whole buffer (used by herding-based exemplar sets)."""
        n = len(y)
        if n > self.capacity:
            raise ValueError(f"{n} exemplars exceed capacity {self.capacity}")
        keep_uids = {}
        for i in range(self.size):
            keep_uids.setdefault((int(self.example_ids[i]), int(self.task_ids[i])), int(self.uids[i]))
        self.size = n
        new_held = set()
        for slot in range(n):
            key = (int(example_ids[slot]), int(task_ids[slot]))
            if key in keep_uids:
                uid = keep_uids[key]
            else:
                uid = self.seen_count
                self.seen_count += 1
            self.X[slot] = X[slot]
            self.y[slot] = y[slot]
            self.task_ids[slot] = task_ids[slot]
            self.example_ids[slot] = example_ids[slot]
            self.uids[slot] = uid
            self.logits[slot] = np.nan
            self.has_logits[slot] = False
            if uid in self.held_out:
                new_held.add(uid)
        self.held_out = new_held

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["entry_id", "task_id", "example_id", "label", "held_out"]
                + [f"x{i}" for i in range(self.dim)]
                + [f"logit{c}" for c in range(self.n_classes)]
            )
            for e in self.entries():
                logits = [repr(float(v)) for v in e.stored_logits] if e.stored_logits is not None else [""] * self.n_classes
                w.writerow(
                    [e.insertion_index, e.task_id, e.example_id, e.y, int(e.insertion_index in self.held_out)]
                    + [repr(float(v)) for v in e.x]
                    + logits
                )


def ema_update(stable: MLP, online: MLP, decay: float) -> MLP:
    """In place: stable <- decay * stable + (1 - decay) * online."""
    if not 0 < decay < 1:
        raise ValueError(f"decay must be in (0, 1), got {decay}")
    if stable.layer_dims != online.layer_dims:
        raise ShapeError(f"model shapes differ: {stable.layer_dims} vs {online.layer_dims}")
    for s, o in zip(stable.parameters(), online.parameters()):
        s *= decay
        s += (1.0 - decay) * o
    return stable
