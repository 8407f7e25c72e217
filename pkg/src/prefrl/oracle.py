"""Preference providers: a synthetic oracle on hidden returns and a query queue
that lets humans answer asynchronously."""
from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .reward_model import PREFER0, PREFER1, BudgetExhaustedError, PreferenceTuple

ABSTAIN = -1
CHOICES = {"prefer0": PREFER0, "prefer1": PREFER1, "skip": None}
# Returns summed in different orders can differ by a few ulps; anything closer
# than this (relative) is a tie.
TIE_TOLERANCE = 1e-9


def synthetic_label(tau0, tau1, flip_probability: float = 0.0,
                    rng: np.random.Generator | None = None) -> int:
    """PREFER0 / PREFER1 by comparing true returns, ABSTAIN on an exact tie."""
    r0 = tau0.true_return()
    r1 = tau1.true_return()
    if abs(r0 - r1) <= TIE_TOLERANCE * max(1.0, abs(r0), abs(r1)):
        return ABSTAIN
    label = PREFER0 if r0 > r1 else PREFER1
    if flip_probability > 0.0:
        if rng is None:
            raise ValueError("a noisy oracle needs an rng")
        if rng.random() < flip_probability:
            label = 1 - label
    return label


class SyntheticOracle:
    def __init__(self, flip_probability: float = 0.0, rng: np.random.Generator | None = None):
        self.flip_probability = flip_probability
        self.rng = rng

    def label(self, tau0, tau1) -> int:
        return synthetic_label(tau0, tau1, self.flip_probability, self.rng)


class QueueFullError(RuntimeError):
    """Too many pending queries; try again after some are answered."""


class UnknownQueryError(KeyError):
    pass


class AlreadyResolvedError(RuntimeError):
    pass


@dataclass
class QueryRecord:
    id: int
    tau0: object
    tau1: object
    status: str = "pending"
    label: int | None = None
    created_at: float = field(default_factory=time.time)
    labeled_at: float | None = None

    def to_json(self) -> dict:
        cfg = self.tau0.config
        return {
            "id": self.id,
            "status": self.status,
            "label": None if self.label is None else ("prefer0" if self.label == PREFER0 else "prefer1"),
            "created_at": self.created_at,
            "labeled_at": self.labeled_at,
            "grid": {"width": cfg.width, "height": cfg.height,
                     "start": list(cfg.start), "goal": list(cfg.goal)},
            "tau0": self.tau0.render(),
            "tau1": self.tau1.render(),
        }


class QueryQueue:
    """Thread-safe store of human queries.

    Accepted labels count against ``max_feedback`` immediately and wait in an
    inbox until the trainer drains them at a session boundary.
    """

    def __init__(self, capacity: int = 8, max_feedback: int = 200):
        self.capacity = capacity
        self.max_feedback = max_feedback
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._records: dict[int, QueryRecord] = {}
        self._inbox: list[PreferenceTuple] = []
        self.feedback_used = 0

    def enqueue(self, tau0, tau1) -> int:
        with self._lock:
            if self._pending_count() >= self.capacity:
                raise QueueFullError(f"{self.capacity} queries already pending")
            rec = QueryRecord(next(self._ids), tau0, tau1)
            self._records[rec.id] = rec
            return rec.id

    def get(self, query_id: int) -> QueryRecord:
        with self._lock:
            try:
                return self._records[query_id]
            except KeyError:
                raise UnknownQueryError(query_id) from None

    def next_pending(self) -> QueryRecord | None:
        with self._lock:
            for rec in self._records.values():
                if rec.status == "pending":
                    return rec
            return None

    def submit_label(self, query_id: int, choice: str) -> PreferenceTuple | None:
        """Resolve a pending query. Returns the new tuple, or None for a skip."""
        if choice not in CHOICES:
            raise ValueError(f"choice must be one of {sorted(CHOICES)}, got {choice!r}")
        with self._lock:
            rec = self._records.get(query_id)
            if rec is None:
                raise UnknownQueryError(query_id)
            if rec.status != "pending":
                raise AlreadyResolvedError(f"query {query_id} is already {rec.status}")
            label = CHOICES[choice]
            if label is None:
                rec.status = "skipped"
                rec.labeled_at = time.time()
                return None
            if self.feedback_used >= self.max_feedback:
                raise BudgetExhaustedError(f"feedback budget of {self.max_feedback} is used up")
            rec.status = "labeled"
            rec.label = label
            rec.labeled_at = time.time()
            self.feedback_used += 1
            item = PreferenceTuple(rec.tau0.learner_view(), rec.tau1.learner_view(), label)
            self._inbox.append(item)
            return item

    def drain(self) -> list[PreferenceTuple]:
        with self._lock:
            out, self._inbox = self._inbox, []
            return out

    def _pending_count(self) -> int:
        return sum(1 for r in self._records.values() if r.status == "pending")

    def pending_count(self) -> int:
        with self._lock:
            return self._pending_count()

    def status(self) -> dict:
        with self._lock:
            return {"feedback_used": self.feedback_used,
                    "max_feedback": self.max_feedback,
                    "pending_count": self._pending_count()}
