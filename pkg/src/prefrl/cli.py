"""Command-line entry point: ``prefrl run | ablate | serve | eval``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import threading
from dataclasses import replace
from pathlib import Path

from . import ablation
from . import config as cfgmod
from .metrics import MetricsWriter
from .oracle import QueryQueue
from .trainer import LOSS_ARMS, Trainer

log = logging.getLogger("prefrl")


def _add_common(p: argparse.ArgumentParser, losses=True):
    p.add_argument("--config", type=Path, help="YAML run config (see prefrl.config)")
    p.add_argument("--env", choices=sorted(cfgmod.ENV_PRESETS))
    if losses:
        p.add_argument("--losses", choices=LOSS_ARMS)
    p.add_argument("--budget", type=int, help="maximum number of labelled preferences")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, default=Path("runs/latest"))
    p.add_argument("--set", dest="assignments", action="append", default=[],
                   metavar="KEY=VALUE", help="override any config field, e.g. reward.k_window=5")


def _resolve(args, parser, losses=None) -> cfgmod.RunConfig:
    try:
        base = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
        return cfgmod.apply_overrides(
            base, env=args.env, losses=losses if losses is not None else getattr(args, "losses", None),
            budget=args.budget, seed=args.seed, assignments=args.assignments)
    except (cfgmod.ConfigError, OSError) as exc:
        parser.error(str(exc))


def cmd_run(args, parser) -> int:
    rc = _resolve(args, parser)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.resume(out / "checkpoint")
        mode = "a"
    else:
        rc.write_resolved(out)
        trainer = Trainer(rc.trainer, rc.env, seed=rc.seed, run_id=rc.run_id)
        mode = "w"
    if mode == "a":
        writer = _AppendingWriter(out / "metrics.csv")
    else:
        writer = MetricsWriter(out / "metrics.csv")
    with writer:
        rows = trainer.run(writer, checkpoint_dir=out / "checkpoint",
                           on_row=lambda r: log.info(
                               "step %d feedback %d return %.3f spearman %.3f", r.global_step,
                               r.feedback_used, r.eval_true_return, r.reward_spearman))
    if rows:
        last = rows[-1]
        print(f"final: step={last.global_step} feedback={last.feedback_used} "
              f"return={last.eval_true_return:.3f} success={last.eval_success_rate:.2f} "
              f"spearman={last.reward_spearman:.3f}")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


class _AppendingWriter(MetricsWriter):
    """Continue an existing metrics file after a resume (no second header)."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("a", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")


def cmd_ablate(args, parser) -> int:
    if args.seeds < 3:
        parser.error("--seeds must be at least 3")
    rc = _resolve(args, parser, losses="ce")
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rc.write_resolved(out)
    seeds = range(args.first_seed, args.first_seed + args.seeds)
    arms = tuple(a.strip() for a in args.arms.split(";")) if args.arms else LOSS_ARMS
    results = ablation.run_suite(rc, seeds, arms, out_dir=out, jobs=args.jobs)
    summary = ablation.write_tables(out, results)
    for arm in arms:
        s = summary.get(arm, {})
        if s.get("n_seeds"):
            print(f"{arm:15s} median={s['median_final_return']:.3f} "
                  f"iqr={s['iqr_final_return']:.3f} spearman={s['median_final_spearman']:.3f} "
                  f"feedback={s['median_feedback_used']:.0f}")
        else:
            print(f"{arm:15s} all seeds failed")
    if set(LOSS_ARMS) <= set(arms):
        report = ablation.ordering_report(summary, ablation.median_curves(results),
                                          rc.trainer.max_feedback)
        (out / "ordering.json").write_text(json.dumps(report, indent=1))
        print("ordering:", json.dumps(report))
    if args.sweep:
        table = ablation.sweep(rc, seeds, jobs=args.jobs, base_results=results)
        with (out / "sweep.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(table)
        for row in table:
            print(f"sweep k={row['k_window']} m={row['margin']}: combined={row['combined']:.3f} "
                  f"ordering_ok={row['ordering_ok']}")
    failed = [(r.arm, r.seed) for r in results if r.error]
    if failed:
        print(f"{len(failed)} run(s) failed: {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_serve(args, parser) -> int:
    from .server import LabelServer

    rc = _resolve(args, parser)
    rc = replace(rc, trainer=replace(rc.trainer, oracle="human"))
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rc.write_resolved(out)
    queue = QueryQueue(rc.trainer.queue_capacity, rc.trainer.max_feedback)
    trainer = Trainer(rc.trainer, rc.env, seed=rc.seed, run_id=rc.run_id, queue=queue)
    server = LabelServer((args.host, args.port), queue, lambda: trainer.global_step, args.static)
    print(f"serving on http://{args.host}:{server.port}/", flush=True)

    def train():
        with MetricsWriter(out / "metrics.csv") as writer:
            trainer.run(writer, checkpoint_dir=out / "checkpoint")
        log.info("training finished; still serving status")

    worker = threading.Thread(target=train, name="trainer", daemon=True)
    worker.start()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_eval(args, parser) -> int:
    ckpt = args.checkpoint
    if not (ckpt / "trainer.json").exists():
        parser.error(f"{ckpt} is not a checkpoint directory (no trainer.json)")
    trainer = Trainer.resume(ckpt)
    if args.episodes:
        trainer.config = replace(trainer.config, eval_episodes=args.episodes)
    ret, success = trainer.evaluate()
    rho = trainer.reward_spearman()
    print(json.dumps({"global_step": trainer.global_step, "feedback_used": len(trainer.dataset),
                      "eval_true_return": ret, "eval_success_rate": success,
                      "reward_spearman": rho}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one loss arm")
    _add_common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from <out-dir>/checkpoint instead of starting fresh")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="all loss arms over several seeds")
    _add_common(p, losses=False)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (>= 3)")
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--arms", help="';'-separated subset of arms (default: all five)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--sweep", action="store_true",
                   help="also grid k_window in {5,10,20} x margin in {0.5,1,2}")
    p.set_defaults(func=cmd_ablate, out_dir=Path("runs/ablation"))

    p = sub.add_parser("serve", help="train with a human oracle behind the label API")
    _add_common(p)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--static", type=Path, help="directory of UI files served at /")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on the true reward")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args, parser)


if __name__ == "__main__":
    sys.exit(main())
