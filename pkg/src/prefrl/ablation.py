"""Seeded ablation runs across loss arms, with summary and curve tables.

Layout under ``out_dir``::

    <arm>/seed_<k>/metrics.csv     one file per (arm, seed)
    <arm>/seed_<k>/config.resolved
    summary.csv                    final-performance summary per arm
    curves.csv                     median curves per arm (tidy, one row per session)
    paired.csv                     per-seed differences of every arm against ce-only
"""
from __future__ import annotations

import csv
import itertools
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .metrics import MetricsWriter, read_metrics
from .trainer import LOSS_ARMS, Trainer

log = logging.getLogger(__name__)

COMBINED = "ce,triplet,ad"
BASELINE = "ce"
UPPER = "true-reward"

SUMMARY_COLUMNS = ("arm", "n_seeds", "median_final_return", "q25_final_return",
                   "q75_final_return", "iqr_final_return", "median_final_success",
                   "median_final_spearman", "median_feedback_used", "failed_seeds")


def arm_slug(arm: str) -> str:
    return arm.replace(",", "+")


@dataclass
class ArmResult:
    arm: str
    seed: int
    rows: list = field(default_factory=list)
    error: str | None = None

    @property
    def final(self):
        return self.rows[-1] if self.rows else None


def run_one(run_config: RunConfig, arm: str, seed: int, out_dir=None) -> ArmResult:
    """Train one (arm, seed). Exceptions are captured, never raised."""
    cfg = replace(run_config, trainer=replace(run_config.trainer, losses=arm), seed=seed,
                  run_id=f"{arm_slug(arm)}-s{seed}")
    try:
        trainer = Trainer(cfg.trainer, cfg.env, seed=seed, run_id=cfg.run_id)
        if out_dir is None:
            return ArmResult(arm, seed, trainer.run())
        d = Path(out_dir) / arm_slug(arm) / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        cfg.write_resolved(d)
        with MetricsWriter(d / "metrics.csv") as writer:
            rows = trainer.run(writer)
        return ArmResult(arm, seed, rows)
    except Exception:  # noqa: BLE001 - keep the rest of the suite alive
        return ArmResult(arm, seed, error=traceback.format_exc())


def _run_one_star(args):
    return run_one(*args)


def run_suite(run_config: RunConfig, seeds, arms=LOSS_ARMS, out_dir=None,
              jobs: int = 1) -> list[ArmResult]:
    seeds = list(seeds)
    tasks = [(run_config, arm, s, out_dir) for arm in arms for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_star, tasks))
    else:
        results = [_run_one_star(t) for t in tasks]
    for r in results:
        if r.error:
            log.error("arm %s seed %d failed:\n%s", r.arm, r.seed, r.error)
    return results


def _quantiles(values):
    q25, q50, q75 = np.percentile(values, [25, 50, 75])
    return float(q25), float(q50), float(q75)


def summarize(results: list[ArmResult]) -> dict[str, dict]:
    by_arm: dict[str, list[ArmResult]] = {}
    for r in results:
        by_arm.setdefault(r.arm, []).append(r)
    summary = {}
    for arm, rs in by_arm.items():
        ok = [r for r in rs if r.error is None and r.rows]
        failed = [r.seed for r in rs if r not in ok]
        if not ok:
            summary[arm] = {"arm": arm, "n_seeds": 0, "failed_seeds": failed}
            continue
        finals = np.array([r.final.eval_true_return for r in ok])
        q25, med, q75 = _quantiles(finals)
        summary[arm] = {
            "arm": arm,
            "n_seeds": len(ok),
            "median_final_return": med,
            "q25_final_return": q25,
            "q75_final_return": q75,
            "iqr_final_return": q75 - q25,
            "median_final_success": float(np.median([r.final.eval_success_rate for r in ok])),
            "median_final_spearman": float(np.median([r.final.reward_spearman for r in ok])),
            "median_feedback_used": float(np.median([r.final.feedback_used for r in ok])),
            "failed_seeds": failed,
            "finals": finals.tolist(),
            "seeds": [r.seed for r in ok],
        }
    return summary


def median_curves(results: list[ArmResult]) -> list[dict]:
    """Per-arm median over seeds at each evaluation index (sessions align by step)."""
    out = []
    by_arm: dict[str, list[ArmResult]] = {}
    for r in results:
        if r.error is None and r.rows:
            by_arm.setdefault(r.arm, []).append(r)
    for arm, rs in by_arm.items():
        n = min(len(r.rows) for r in rs)
        for i in range(n):
            rows = [r.rows[i] for r in rs]
            ret = [row.eval_true_return for row in rows]
            q25, med, q75 = _quantiles(ret)
            out.append({
                "arm": arm,
                "global_step": rows[0].global_step,
                "median_feedback_used": float(np.median([row.feedback_used for row in rows])),
                "median_return": med,
                "q25_return": q25,
                "q75_return": q75,
                "median_success": float(np.median([row.eval_success_rate for row in rows])),
                "median_spearman": float(np.median([row.reward_spearman for row in rows])),
            })
    return out


def paired_differences(results: list[ArmResult], reference: str = BASELINE) -> list[dict]:
    finals = {(r.arm, r.seed): r.final.eval_true_return
              for r in results if r.error is None and r.rows}
    out = []
    for (arm, seed), value in sorted(finals.items()):
        if arm == reference or (reference, seed) not in finals:
            continue
        out.append({"arm": arm, "seed": seed, "reference": reference,
                    "difference": value - finals[(reference, seed)]})
    return out


def feedback_to_reach(curves: list[dict], arm: str, target: float) -> float | None:
    """Median feedback count at the first evaluation where the arm's median
    curve reaches ``target``; None if it never does."""
    for row in curves:
        if row["arm"] == arm and row["median_return"] >= target:
            return row["median_feedback_used"]
    return None


def ordering_report(summary: dict, curves: list[dict], budget: int) -> dict:
    """Evaluate the arm-ordering, upper-baseline and feedback-efficiency checks."""
    med = {arm: s.get("median_final_return", float("nan")) for arm, s in summary.items()}
    comb, ce = med.get(COMBINED, np.nan), med.get(BASELINE, np.nan)
    best_single = max(med.get("ce,triplet", np.nan), med.get("ce,ad", np.nan))
    ce_iqr = summary.get(BASELINE, {}).get("iqr_final_return", np.nan)
    upper = med.get(UPPER, np.nan)
    reach = feedback_to_reach(curves, COMBINED, ce)
    report = {
        "combined": comb, "ce": ce, "best_single": best_single, "ce_iqr": ce_iqr,
        "upper": upper, "feedback_to_reach_ce": reach, "budget": budget,
        "order_ok": bool(comb >= best_single >= ce),
        "margin_ok": bool(comb - ce > ce_iqr),
        "upper_ok": bool(comb >= 0.8 * upper),
        "efficiency_ok": reach is not None and reach <= 0.5 * budget,
    }
    report["ordering_ok"] = report["order_ok"] and report["margin_ok"] and report["upper_ok"]
    return report


def _write_csv(path, rows, columns):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (" ".join(map(str, v)) if isinstance(v, list) else v)
                        for k, v in row.items()})


def write_tables(out_dir, results: list[ArmResult]) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(results)
    curves = median_curves(results)
    _write_csv(out / "summary.csv", summary.values(), SUMMARY_COLUMNS)
    if curves:
        _write_csv(out / "curves.csv", curves, list(curves[0]))
    _write_csv(out / "paired.csv", paired_differences(results),
               ("arm", "seed", "reference", "difference"))
    return summary


def load_results(out_dir, arms=LOSS_ARMS) -> list[ArmResult]:
    """Rebuild results from the metrics files of a finished suite."""
    results = []
    for arm in arms:
        base = Path(out_dir) / arm_slug(arm)
        if not base.is_dir():
            continue
        for d in sorted(base.glob("seed_*"), key=lambda p: int(p.name.split("_")[1])):
            path = d / "metrics.csv"
            if path.exists():
                results.append(ArmResult(arm, int(d.name.split("_")[1]), read_metrics(path)))
    return results


SWEEP_K = (5, 10, 20)
SWEEP_MARGIN = (0.5, 1.0, 2.0)


def sweep(run_config: RunConfig, seeds, k_values=SWEEP_K, margins=SWEEP_MARGIN,
          jobs: int = 1, base_results: list[ArmResult] | None = None) -> list[dict]:
    """Grid over (k_window, margin).

    Each arm only runs for the knobs it reads: ce-only and true-reward use
    neither, the triplet arm only the margin and the action-distance arm only
    k_window, so those runs are shared across grid points.
    """
    seeds = list(seeds)
    base_results = base_results or []
    base = run_config.trainer

    def runs(arm, k, m):
        cfg = replace(run_config, trainer=replace(base, k_window=k, margin=m))
        reuse = [r for r in base_results if r.arm == arm]
        if reuse and (arm in (BASELINE, UPPER)
                      or (arm == "ce,triplet" and m == base.margin)
                      or (arm == "ce,ad" and k == base.k_window)
                      or (k == base.k_window and m == base.margin)):
            return reuse
        return run_suite(cfg, seeds, (arm,), jobs=jobs)

    shared = runs(BASELINE, base.k_window, base.margin) + runs(UPPER, base.k_window, base.margin)
    triplet = {m: runs("ce,triplet", base.k_window, m) for m in margins}
    ad = {k: runs("ce,ad", k, base.margin) for k in k_values}
    table = []
    for k, m in itertools.product(k_values, margins):
        res = shared + triplet[m] + ad[k] + runs(COMBINED, k, m)
        summary = summarize(res)
        report = ordering_report(summary, median_curves(res), base.max_feedback)
        table.append({"k_window": k, "margin": m, **report})
        log.info("sweep k=%d m=%.1f ordering_ok=%s", k, m, report["ordering_ok"])
    return table


def default_jobs() -> int:
    return max(1, min(8, (os.cpu_count() or 1)))
