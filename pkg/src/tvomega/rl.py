"""Nonstationary gridworld and omega-weighted replay TD learning.

The goal cell walks around a closed loop, one cell per episode, so the task
repeats with the loop's period. The agent only sees its own cell. Replay
transitions are stamped with their episode index; the weighted learner
scales each squared TD error by ``omega(s, a, T, t)`` where ``T`` is the
current episode, and the unweighted learner is the same code with all
weights fixed to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import omega as om
from .drift import Stream
from .nn import Adam, InputError
from .seeding import child_rng

ACTIONS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])  # up, down, left, right as (drow, dcol)


def perimeter_loop(height: int, width: int) -> list[tuple[int, int]]:
    """Cells on the grid border in clockwise order starting at the top-left corner."""
    top = [(0, c) for c in range(width)]
    right = [(r, width - 1) for r in range(1, height)]
    bottom = [(height - 1, c) for c in range(width - 2, -1, -1)] if height > 1 else []
    left = [(r, 0) for r in range(height - 2, 0, -1)] if width > 1 else []
    return top + right + bottom + left


def bounce_loop(width: int, row: int = 0) -> list[tuple[int, int]]:
    """Cells of one row visited left to right and back, period ``2 * (width - 1)``."""
    cols = list(range(width)) + list(range(width - 2, 0, -1))
    return [(row, c) for c in cols]


LAYOUTS = {"bounce": lambda h, w: bounce_loop(w), "perimeter": perimeter_loop}


@dataclass(frozen=True)
class Transition:
    """One replay record. ``done`` marks reaching the goal; running out of steps is not terminal."""

    s: int
    a: int
    r: float
    s2: int
    t: int
    done: bool


@dataclass
class DriftGrid:
    """Gridworld whose goal follows ``goal_path`` cyclically (one step per episode)."""

    height: int = 6
    width: int = 6
    goal_path: tuple = ()
    start: tuple = (2, 2)
    step_penalty: float = -1.0
    goal_reward: float = 10.0
    max_steps: int = 40

    def __post_init__(self):
        if not self.goal_path:
            self.goal_path = tuple(perimeter_loop(self.height, self.width))
        self.goal_path = tuple(tuple(int(v) for v in c) for c in self.goal_path)
        for r, c in self.goal_path + (tuple(self.start),):
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise ValueError(f"cell {(r, c)} out of bounds")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def n_states(self) -> int:
        return self.height * self.width

    @property
    def n_actions(self) -> int:
        return len(ACTIONS)

    @property
    def period(self) -> int:
        return len(self.goal_path)

    def cell(self, s: int) -> tuple[int, int]:
        return divmod(int(s), self.width)

    def index(self, cell) -> int:
        return int(cell[0]) * self.width + int(cell[1])

    @property
    def start_state(self) -> int:
        return self.index(self.start)

    def goal(self, episode: int) -> int:
        return self.index(self.goal_path[episode % self.period])

    def phase(self, episode: int) -> int:
        return episode % self.period


def env_step(grid: DriftGrid, state: int, action: int, episode: int,
             step: int | None = None) -> tuple[int, float, bool]:
    """Deterministic move with wall clipping.

    ``done`` is true on reaching the goal, or when ``step`` (0-based index of
    this move) is given and the move uses up the episode cap.
    """
    if not 0 <= action < grid.n_actions:
        raise InputError(f"invalid action {action}")
    if not 0 <= state < grid.n_states:
        raise InputError(f"invalid state {state}")
    if episode < 0:
        raise InputError("episode must be >= 0")
    r, c = grid.cell(state)
    dr, dc = ACTIONS[action]
    nxt = grid.index((min(max(r + dr, 0), grid.height - 1), min(max(c + dc, 0), grid.width - 1)))
    if nxt == grid.goal(episode):
        return nxt, grid.goal_reward, True
    return nxt, grid.step_penalty, step is not None and step + 1 >= grid.max_steps


class ReplayBuffer:
    """FIFO replay store with episode stamps, held as parallel arrays."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._s, self._a, self._r, self._s2, self._t, self._d = ([] for _ in range(6))
        self._arrays = None

    def __len__(self) -> int:
        return len(self._s)

    def append(self, tr: Transition) -> None:
        if len(self._t) and tr.t < self._t[-1]:
            raise ValueError("episode stamps must be nondecreasing")
        if not np.isfinite(tr.r):
            raise ValueError("reward must be finite")
        for lst, v in zip((self._s, self._a, self._r, self._s2, self._t, self._d),
                          (tr.s, tr.a, tr.r, tr.s2, tr.t, tr.done)):
            lst.append(v)
        if len(self._s) > self.capacity:
            for lst in (self._s, self._a, self._r, self._s2, self._t, self._d):
                del lst[0]
        self._arrays = None

    def arrays(self) -> dict:
        if self._arrays is None:
            self._arrays = {
                "s": np.array(self._s, dtype=np.int64), "a": np.array(self._a, dtype=np.int64),
                "r": np.array(self._r, dtype=np.float64), "s2": np.array(self._s2, dtype=np.int64),
                "t": np.array(self._t, dtype=np.int64), "done": np.array(self._d, dtype=bool),
            }
        return self._arrays

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("buffer is empty")
        return rng.integers(0, len(self), size=n)

    def take(self, idx) -> dict:
        return {k: v[idx] for k, v in self.arrays().items()}

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        return self.take(self.sample_indices(n, rng))

    def __getitem__(self, i: int) -> Transition:
        return Transition(self._s[i], self._a[i], self._r[i], self._s2[i], self._t[i], self._d[i])


@dataclass
class QFunction:
    """Tabular Q with a soft-updated target copy."""

    table: np.ndarray
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 0.5
    target: np.ndarray | None = None
    updates: int = 0

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.target is None:
            self.target = self.table.copy()

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, **kw) -> "QFunction":
        return cls(np.zeros((n_states, n_actions)), **kw)

    def greedy(self, s: int) -> int:
        return int(np.argmax(self.table[s]))

    def copy(self) -> "QFunction":
        return QFunction(self.table.copy(), self.gamma, self.tau, self.lr, self.target.copy(), self.updates)


def td_errors(q: QFunction, batch: dict) -> np.ndarray:
    """``Q(s, a) - r - gamma * max_a' Qhat(s', a')`` with no bootstrap past the goal."""
    boot = np.where(batch["done"], 0.0, q.target[batch["s2"]].max(axis=1))
    return q.table[batch["s"], batch["a"]] - batch["r"] - q.gamma * boot


def rl_features(batch: dict, n_states: int, n_actions: int, with_reward: bool = True,
                goal_reward: float = 10.0) -> np.ndarray:
    """Estimator input: one-hot state and action, plus a reached-goal flag when ``with_reward``."""
    n = len(batch["s"])
    parts = [np.eye(n_states)[batch["s"]], np.eye(n_actions)[batch["a"]]]
    if with_reward:
        parts.append((batch["r"] >= goal_reward).astype(np.float64)[:, None])
    return np.concatenate(parts, axis=1) if n else np.zeros((0, n_states + n_actions + int(with_reward)))


def weighted_td_update(q: QFunction, batch: dict, weights=None) -> tuple[QFunction, float]:
    """One SGD step on ``mean(w * delta^2)``, then a soft target update.

    Weights are constants (no gradient flows through them); ``None`` means
    all ones. The gradient for each table entry is divided by how often that
    entry occurs in the batch, so an entry moves by ``lr`` times the mean of
    ``w * delta`` over its occurrences and ``lr <= 1`` cannot overshoot.
    """
    n = len(batch["s"])
    if n == 0:
        raise InputError("empty batch")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    delta = td_errors(q, batch)
    loss = float(np.mean(w * delta * delta))
    flat = batch["s"] * q.table.shape[1] + batch["a"]
    counts = np.bincount(flat, minlength=q.table.size)
    step = np.bincount(flat, weights=w * delta, minlength=q.table.size)
    hit = counts > 0
    q.table.reshape(-1)[hit] -= q.lr * step[hit] / counts[hit]
    q.target *= 1.0 - q.tau
    q.target += q.tau * q.table
    q.updates += 1
    return q, loss


def omega_td_update(q: QFunction, batch: dict, est: om.OmegaEstimator, T_now: int, grid: DriftGrid,
                    with_reward: bool = True) -> tuple[QFunction, float, np.ndarray]:
    """:func:`weighted_td_update` with ``w_i = omega(s_i, a_i, T_now, t_i)``."""
    if est is None or not est.trained:
        raise om.NotTrainedError("estimator has not been trained")
    F = rl_features(batch, grid.n_states, grid.n_actions, with_reward, grid.goal_reward)
    w = est.omega(F, T_now, batch["t"])
    q, loss = weighted_td_update(q, batch, w)
    return q, loss, w


def epsilon_greedy(q: QFunction, s: int, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(q.table.shape[1]))
    row = q.table[s]
    best = np.flatnonzero(row == row.max())
    return int(best[0]) if len(best) == 1 else int(rng.choice(best))


def collect_episode(grid: DriftGrid, q: QFunction, epsilon: float, episode: int,
                    rng: np.random.Generator, buffer: ReplayBuffer | None) -> float:
    """Epsilon-greedy rollout; transitions go to ``buffer`` stamped with ``episode``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    s, total = grid.start_state, 0.0
    for k in range(grid.max_steps):
        a = epsilon_greedy(q, s, epsilon, rng)
        s2, r, reached = env_step(grid, s, a, episode)
        total += r
        if buffer is not None:
            buffer.append(Transition(s, a, r, s2, episode, reached))
        s = s2
        if reached:
            break
    return total


def greedy_return(grid: DriftGrid, q: QFunction, episode: int) -> float:
    """Return of the deterministic greedy policy (first maximal action) for ``episode``'s goal."""
    s, total = grid.start_state, 0.0
    for _ in range(grid.max_steps):
        s, r, reached = env_step(grid, s, q.greedy(s), episode)
        total += r
        if reached:
            break
    return total


def shortest_path_q(grid: DriftGrid, episode: int) -> QFunction:
    """Q table whose greedy policy walks a shortest path to the episode's goal."""
    gr, gc = grid.cell(grid.goal(episode))
    table = np.zeros((grid.n_states, grid.n_actions))
    for s in range(grid.n_states):
        r, c = grid.cell(s)
        for a, (dr, dc) in enumerate(ACTIONS):
            nr = min(max(r + dr, 0), grid.height - 1)
            nc = min(max(c + dc, 0), grid.width - 1)
            table[s, a] = -(abs(nr - gr) + abs(nc - gc))
    return QFunction(table)


@dataclass
class RLConfig:
    height: int = 2
    width: int = 11
    layout: str = "bounce"
    stationary: bool = False
    start: tuple = (1, 5)
    step_penalty: float = -1.0
    goal_reward: float = 10.0
    max_steps: int = 40
    episodes: int = 300
    burn_in: int = 10
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_episodes: int = 100
    batch_size: int = 64
    updates_per_step: int = 1
    gamma: float = 0.99
    tau: float = 0.005
    q_lr: float = 0.5
    buffer_capacity: int = 1_000_000
    refresh_every: int = 10
    omega_epochs: int = 4
    omega_batch_size: int = 512
    omega_lr: float = 1e-3
    omega_hidden: tuple = (64, 64, 64)
    omega_mode: str = "method1"
    omega_clip: float | None = 1.0
    omega_with_reward: bool = False
    omega_n_freqs: int = 4
    omega_min_period: float | None = None  # None: the goal period

    @property
    def period(self) -> int:
        return len(self.goal_path())

    def goal_path(self) -> tuple:
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {sorted(LAYOUTS)}")
        path = tuple(LAYOUTS[self.layout](self.height, self.width))
        return path[:1] if self.stationary else path

    def grid(self) -> DriftGrid:
        return DriftGrid(self.height, self.width, goal_path=self.goal_path(), start=tuple(self.start),
                         step_penalty=self.step_penalty, goal_reward=self.goal_reward,
                         max_steps=self.max_steps)

    def epsilon(self, episode: int) -> float:
        if episode < self.burn_in:
            return 1.0
        frac = min(1.0, (episode - self.burn_in) / max(1, self.eps_decay_episodes))
        return self.eps_start + frac * (self.eps_end - self.eps_start)


@dataclass
class LearningCurve:
    seed: int
    weighted: bool
    episodes: list = field(default_factory=list)
    eval_returns: list = field(default_factory=list)
    buffer_sizes: list = field(default_factory=list)
    mean_omegas: list = field(default_factory=list)

    def rows(self):
        for e, ret, b, w in zip(self.episodes, self.eval_returns, self.buffer_sizes, self.mean_omegas):
            yield {"seed": self.seed, "episode": e, "eval_return": ret, "buffer_size": b, "mean_omega": w}

    def final_quarter_mean(self) -> float:
        n = len(self.eval_returns)
        return float(np.mean(self.eval_returns[n - max(1, n // 4):]))


def buffer_stream(buffer: ReplayBuffer, grid: DriftGrid, with_reward: bool) -> tuple[Stream, np.ndarray]:
    arr = buffer.arrays()
    F = rl_features(arr, grid.n_states, grid.n_actions, with_reward, grid.goal_reward)
    return Stream(F, -np.ones(len(F), dtype=np.int64), arr["t"]), F


def new_rl_estimator(cfg: RLConfig, grid: DriftGrid, seed: int) -> om.OmegaEstimator:
    in_dim = grid.n_states + grid.n_actions + int(cfg.omega_with_reward)
    return om.OmegaEstimator.create(in_dim, cfg.episodes, mode=cfg.omega_mode, clip=cfg.omega_clip,
                                    hidden=cfg.omega_hidden, n_freqs=cfg.omega_n_freqs,
                                    min_period=cfg.omega_min_period or max(grid.period, 2), rng=child_rng(seed, "rl-omega-init"))


def run_rl(cfg: RLConfig, seed: int, weighted: bool = True, force_unit_omega: bool = False,
           log=None) -> LearningCurve:
    """One learner on one seed.

    Collection, exploration and replay sampling draw from one generator
    keyed by ``seed`` only; estimator training uses its own child
    generators, so weighted and unweighted runs see the same random numbers.
    ``force_unit_omega`` skips the estimator and feeds weights of 1.
    """
    grid = cfg.grid()
    rng = child_rng(seed, "rl-agent")
    q = QFunction.zeros(grid.n_states, grid.n_actions, gamma=cfg.gamma, tau=cfg.tau, lr=cfg.q_lr)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    curve = LearningCurve(seed, weighted)
    use_omega = weighted and not force_unit_omega
    est, opt = None, None
    for episode in range(cfg.episodes):
        before = len(buffer)
        collect_episode(grid, q, cfg.epsilon(episode), episode, rng, buffer)
        n_steps = len(buffer) - before if before < buffer.capacity else grid.max_steps
        if use_omega and (episode + 1) % cfg.refresh_every == 0 and len(np.unique(buffer.arrays()["t"])) >= 2:
            if est is None:
                est, opt = new_rl_estimator(cfg, grid, seed), Adam(lr=cfg.omega_lr)
            stream, _ = buffer_stream(buffer, grid, cfg.omega_with_reward)
            om.train(est, stream, epochs=cfg.omega_epochs, batch_size=cfg.omega_batch_size,
                     rng=child_rng(seed, "rl-omega-train", episode), optimizer=opt)
        ws = []
        if episode >= cfg.burn_in:
            w_all = None
            if use_omega and est is not None:
                # weights depend only on the stored transition and T, so compute them once per episode
                stream, F = buffer_stream(buffer, grid, cfg.omega_with_reward)
                w_all = est.omega(F, episode, stream.t)
            for _ in range(n_steps * cfg.updates_per_step):
                idx = buffer.sample_indices(cfg.batch_size, rng)
                w = None if w_all is None else w_all[idx]
                weighted_td_update(q, buffer.take(idx), w)
                ws.append(1.0 if w is None else float(w.mean()))
        curve.episodes.append(episode)
        curve.eval_returns.append(greedy_return(grid, q, episode))
        curve.buffer_sizes.append(len(buffer))
        curve.mean_omegas.append(float(np.mean(ws)) if ws else 1.0)
        if log and episode % 50 == 0:
            log(f"seed={seed} weighted={weighted} episode={episode} return={curve.eval_returns[-1]:.1f}")
    return curve


def run_rl_experiment(cfg: RLConfig, seeds, baseline_only: bool = False, force_unit_omega: bool = False,
                      log=None) -> dict[int, dict[str, LearningCurve]]:
    """Paired weighted/unweighted learning curves per seed."""
    if not list(seeds):
        raise ValueError("need at least one seed")
    out = {}
    for seed in seeds:
        pair = {"unweighted": run_rl(cfg, seed, weighted=False, log=log)}
        if not baseline_only:
            pair["weighted"] = run_rl(cfg, seed, weighted=True, force_unit_omega=force_unit_omega, log=log)
        out[seed] = pair
    return out
