"""Time the numba and numpy kernels on the default 10x10 grid.

    python benchmarks/bench_kernels.py [--repeats 20] [--segments 10]

Both backends get identical inputs; the script also checks their outputs agree.
"""
import argparse
import time

import numpy as np

from prefrl import _accel
from prefrl.envs import GridWorldConfig
from prefrl.kernels import rollout_batch, soft_q_update


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--segments", type=int, default=10)
    parser.add_argument("--horizon", type=int, default=50)
    parser.add_argument("--batch", type=int, default=64)
    args = parser.parse_args(argv)

    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable (or PREFRL_BACKEND=numpy); nothing to compare")

    cfg = GridWorldConfig()
    rng = np.random.default_rng(0)
    q = rng.normal(size=(cfg.n_cells, 4))
    shape = (args.segments, args.horizon)
    u = [rng.random(shape) for _ in range(3)]
    grid = (cfg.width, cfg.height, cfg.start_cell, cfg.goal_cell, cfg.slip_probability,
            cfg.reward_mode == "sparse", cfg.episode_cap)

    s = rng.integers(0, cfg.n_cells, args.batch)
    a = rng.integers(0, 4, args.batch)
    r = rng.normal(size=args.batch)
    s2 = rng.integers(0, cfg.n_cells, args.batch)

    results = {}
    for backend in ("numba", "numpy"):
        # first call compiles under numba; keep it out of the timing
        out = rollout_batch(q, 0.5, False, *grid, *u, backend=backend)
        t_roll = best_of(lambda: rollout_batch(q, 0.5, False, *grid, *u, backend=backend),
                         args.repeats)
        qq = q.copy()
        soft_q_update(qq, s, a, r, s2, 0.1, 0.99, 0.5, np.log(4), backend=backend)
        t_q = best_of(lambda: soft_q_update(qq, s, a, r, s2, 0.1, 0.99, 0.5, np.log(4),
                                            backend=backend), args.repeats)
        after = q.copy()
        soft_q_update(after, s, a, r, s2, 0.1, 0.99, 0.5, np.log(4), backend=backend)
        results[backend] = (t_roll, t_q, out, after)

    for x, y in zip(results["numba"][2], results["numpy"][2]):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_allclose(results["numba"][3], results["numpy"][3], rtol=0, atol=1e-12)

    print(f"{'kernel':28s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for k, name in ((0, f"rollout {args.segments}x{args.horizon}"),
                    (1, f"soft_q_update batch {args.batch}")):
        nb, npy = results["numba"][k], results["numpy"][k]
        print(f"{name:28s} {nb * 1e6:8.1f}us {npy * 1e6:8.1f}us {npy / nb:7.1f}x")


if __name__ == "__main__":
    main()
