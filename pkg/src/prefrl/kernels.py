"""Hot loops: batched gridworld rollouts and tabular soft-Q updates.

Each kernel has a numba version (scalar loops) and a numpy version
(vectorised over the batch). Both consume the same pre-drawn uniforms, so
they produce the same trajectories and the same Q tables; the dispatching
wrappers pick one according to ``prefrl._accel.BACKEND``.

Actions: 0 = +x, 1 = +y, 2 = -x, 3 = -y. Cells are ``y * width + x``.
"""
from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

DX = np.array([1, 0, -1, 0], dtype=np.int64)
DY = np.array([0, 1, 0, -1], dtype=np.int64)
N_ACTIONS = 4


# --------------------------------------------------------------------------
# rollouts

@njit(cache=True)
def _rollout_numba(q, temperature, greedy, width, height, start, goal, slip,
                   sparse, episode_cap, u_act, u_slip, u_perp):
    n, horizon = u_act.shape
    n_act = q.shape[1]
    cells = np.empty((n, horizon), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    next_cells = np.empty((n, horizon), dtype=np.int64)
    boot_cells = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon), dtype=np.float64)
    dones = np.zeros((n, horizon), dtype=np.bool_)
    gx = goal % width
    gy = goal // width
    dx = np.array([1, 0, -1, 0])
    dy = np.array([0, 1, 0, -1])
    probs = np.empty(n_act, dtype=np.float64)
    for k in range(n):
        cell = start
        ep_t = 0
        for t in range(horizon):
            row = q[cell]
            if greedy:
                a = 0
                best = row[0]
                for b in range(1, n_act):
                    if row[b] > best:
                        best = row[b]
                        a = b
            else:
                m = row[0]
                for b in range(1, n_act):
                    if row[b] > m:
                        m = row[b]
                total = 0.0
                for b in range(n_act):
                    probs[b] = np.exp((row[b] - m) / temperature)
                    total += probs[b]
                target = u_act[k, t] * total
                a = n_act - 1
                acc = 0.0
                for b in range(n_act):
                    acc += probs[b]
                    if target < acc:
                        a = b
                        break
            move = a
            if u_slip[k, t] < slip:
                if u_perp[k, t] < 0.5:
                    move = (a + 1) % 4
                else:
                    move = (a + 3) % 4
            x = cell % width + dx[move]
            y = cell // width + dy[move]
            x = min(max(x, 0), width - 1)
            y = min(max(y, 0), height - 1)
            nxt = y * width + x
            at_goal = nxt == goal
            if sparse:
                r = 1.0 if at_goal else 0.0
            else:
                r = -(abs(x - gx) + abs(y - gy)) / (width + height)
            ep_t += 1
            done = at_goal or ep_t >= episode_cap
            cells[k, t] = cell
            actions[k, t] = a
            next_cells[k, t] = nxt
            rewards[k, t] = r
            dones[k, t] = done
            if done:
                # reaching the goal restarts the stream at the start cell;
                # a time-limit cut bootstraps from where the agent stands
                boot_cells[k, t] = start if at_goal else nxt
                cell = start
                ep_t = 0
            else:
                boot_cells[k, t] = nxt
                cell = nxt
    return cells, actions, next_cells, boot_cells, rewards, dones


def _rollout_numpy(q, temperature, greedy, width, height, start, goal, slip,
                   sparse, episode_cap, u_act, u_slip, u_perp):
    n, horizon = u_act.shape
    cells = np.empty((n, horizon), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    next_cells = np.empty((n, horizon), dtype=np.int64)
    boot_cells = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon), dtype=np.float64)
    dones = np.zeros((n, horizon), dtype=bool)
    gx, gy = goal % width, goal // width
    cell = np.full(n, start, dtype=np.int64)
    ep_t = np.zeros(n, dtype=np.int64)
    for t in range(horizon):
        qrow = q[cell]
        if greedy:
            a = np.argmax(qrow, axis=1)
        else:
            m = qrow.max(axis=1, keepdims=True)
            probs = np.exp((qrow - m) / temperature)
            cum = np.cumsum(probs, axis=1)
            target = u_act[:, t] * cum[:, -1]
            a = np.minimum((cum <= target[:, None]).sum(axis=1), q.shape[1] - 1)
        slipped = u_slip[:, t] < slip
        turn = np.where(u_perp[:, t] < 0.5, 1, 3)
        move = np.where(slipped, (a + turn) % 4, a)
        x = np.clip(cell % width + DX[move], 0, width - 1)
        y = np.clip(cell // width + DY[move], 0, height - 1)
        nxt = y * width + x
        at_goal = nxt == goal
        if sparse:
            r = at_goal.astype(np.float64)
        else:
            r = -(np.abs(x - gx) + np.abs(y - gy)) / (width + height)
        ep_t += 1
        done = at_goal | (ep_t >= episode_cap)
        cells[:, t] = cell
        actions[:, t] = a
        next_cells[:, t] = nxt
        rewards[:, t] = r
        dones[:, t] = done
        boot_cells[:, t] = np.where(at_goal, start, nxt)
        cell = np.where(done, start, nxt)
        ep_t[done] = 0
    return cells, actions, next_cells, boot_cells, rewards, dones


def rollout_batch(q, temperature, greedy, width, height, start, goal, slip,
                  sparse, episode_cap, u_act, u_slip, u_perp, backend=None):
    """Roll ``u_act.shape[0]`` independent segments of ``u_act.shape[1]`` steps.

    Every segment starts from ``start``. Returns arrays
    ``(cells, actions, next_cells, boot_cells, rewards, dones)``.
    """
    backend = backend or _accel.BACKEND
    args = (np.ascontiguousarray(q, dtype=np.float64), float(temperature), bool(greedy),
            int(width), int(height), int(start), int(goal), float(slip), bool(sparse),
            int(episode_cap), np.ascontiguousarray(u_act), np.ascontiguousarray(u_slip),
            np.ascontiguousarray(u_perp))
    if backend == "numba":
        if not _accel.HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return _rollout_numba(*args)
    return _rollout_numpy(*args)


# --------------------------------------------------------------------------
# soft Q-learning

@njit(cache=True)
def _soft_q_update_numba(q, s, a, r, s2, alpha, gamma, temperature, baseline):
    n = s.shape[0]
    n_act = q.shape[1]
    td = np.empty(n, dtype=np.float64)
    for i in range(n):
        row = q[s2[i]]
        m = row[0]
        for b in range(1, n_act):
            if row[b] > m:
                m = row[b]
        total = 0.0
        for b in range(n_act):
            total += np.exp((row[b] - m) / temperature)
        v = m + temperature * (np.log(total) - baseline)
        td[i] = r[i] + gamma * v - q[s[i], a[i]]
    sums = np.zeros(q.shape, dtype=np.float64)
    counts = np.zeros(q.shape, dtype=np.float64)
    for i in range(n):
        sums[s[i], a[i]] += td[i]
        counts[s[i], a[i]] += 1.0
    for c in range(q.shape[0]):
        for b in range(n_act):
            if counts[c, b] > 0:
                q[c, b] += alpha * (sums[c, b] / counts[c, b])
    return td


def _soft_q_update_numpy(q, s, a, r, s2, alpha, gamma, temperature, baseline):
    rows = q[s2]
    m = rows.max(axis=1)
    total = np.exp((rows - m[:, None]) / temperature).sum(axis=1)
    v = m + temperature * (np.log(total) - baseline)
    td = r + gamma * v - q[s, a]
    sums = np.zeros(q.shape)
    counts = np.zeros(q.shape)
    np.add.at(sums, (s, a), td)
    np.add.at(counts, (s, a), 1.0)
    hit = counts > 0
    q[hit] += alpha * (sums[hit] / counts[hit])
    return td


def soft_q_update(q, s, a, r, s2, alpha, gamma, temperature, baseline, backend=None):
    """In-place synchronous soft-Q update of ``q`` on one batch.

    Targets come from the table as it was before the batch:
    ``r + gamma * (m + T * (log sum_b exp((Q(s2,b) - m)/T) - baseline))``.
    Duplicate ``(s, a)`` entries in a batch are averaged. Returns the TD errors.
    """
    backend = backend or _accel.BACKEND
    args = (q, np.ascontiguousarray(s, dtype=np.int64), np.ascontiguousarray(a, dtype=np.int64),
            np.ascontiguousarray(r, dtype=np.float64), np.ascontiguousarray(s2, dtype=np.int64),
            float(alpha), float(gamma), float(temperature), float(baseline))
    if backend == "numba":
        if not _accel.HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return _soft_q_update_numba(*args)
    return _soft_q_update_numpy(*args)
