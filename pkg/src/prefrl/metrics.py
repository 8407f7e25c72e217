"""Per-evaluation metrics rows, their CSV schema, and the reward-recovery score."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import stats

# Column order is part of the file format; append new columns at the end only.
METRICS_COLUMNS = (
    "run_id", "seed", "global_step", "feedback_used", "eval_true_return",
    "eval_success_rate", "reward_spearman", "loss_ce", "loss_t", "loss_a",
)


@dataclass
class MetricsRow:
    run_id: str
    seed: int
    global_step: int
    feedback_used: int
    eval_true_return: float
    eval_success_rate: float
    reward_spearman: float
    loss_ce: float
    loss_t: float
    loss_a: float

    def as_csv_row(self) -> list[str]:
        out = []
        for name in METRICS_COLUMNS:
            v = getattr(self, name)
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out


assert tuple(f.name for f in fields(MetricsRow)) == METRICS_COLUMNS


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRICS_COLUMNS)
        self._fh.flush()

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow(row.as_csv_row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for rec in reader:
            rows.append(MetricsRow(
                run_id=rec["run_id"], seed=int(rec["seed"]),
                global_step=int(rec["global_step"]), feedback_used=int(rec["feedback_used"]),
                **{k: float(rec[k]) for k in METRICS_COLUMNS[4:]}))
    return rows


def spearman(learned, true) -> tuple[float, bool]:
    """Spearman rank correlation with average ranks for ties.

    Returns ``(rho, degenerate)``; a constant input gives ``(0.0, True)``.
    """
    learned = np.asarray(learned, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if learned.size < 2 or np.ptp(learned) == 0.0 or np.ptp(true) == 0.0:
        return 0.0, True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = stats.spearmanr(learned, true).statistic
    if not math.isfinite(rho):
        return 0.0, True
    return float(rho), False


def sampled_spearman(learned_rewards, true_rewards, sample_size: int,
                     rng: np.random.Generator) -> tuple[float, bool]:
    """Spearman over ``sample_size`` transitions drawn uniformly (with replacement)
    from aligned arrays of learned and true per-step rewards."""
    learned = np.asarray(learned_rewards).ravel()
    true = np.asarray(true_rewards).ravel()
    if learned.shape != true.shape:
        raise ValueError("learned and true reward arrays must align")
    idx = rng.integers(0, learned.size, sample_size)
    return spearman(learned[idx], true[idx])


def compute_reward_spearman(reward_model, trajectories, sample_size: int,
                            rng: np.random.Generator) -> tuple[float, bool]:
    """Rank agreement between the learned reward and the hidden true reward
    on state-action pairs visited in ``trajectories``."""
    trajectories = list(trajectories)
    keys = np.concatenate([t.keys for t in trajectories])
    true = np.concatenate([t.true_rewards for t in trajectories])
    learned = reward_model.rewards_for(keys)
    return sampled_spearman(learned, true, sample_size, rng)


def row_dict(row: MetricsRow) -> dict:
    return asdict(row)
