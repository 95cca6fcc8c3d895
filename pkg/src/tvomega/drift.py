"""Gradually drifting data streams.

Two schedules are provided:

* ``gaussian_walk``: 1-D Gaussian with unit variance whose mean moves by
  ``d/10`` per step and reverses direction every ``flip_period`` steps.
  Labels mark which side of the current mean a sample falls on.
* ``label_shift``: class-conditional Gaussian features with a label
  distribution that slides from one peaked base distribution to the next,
  one class pair every ``steps_per_pair`` steps, wrapping after the last
  class.

Streams are held columnar (:class:`Stream`); :class:`TimedSample` is the
single-record view.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .seeding import child_rng

KINDS = ("gaussian_walk", "label_shift")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class TimedSample:
    x: np.ndarray
    y: int | None
    t: int


@dataclass
class Stream:
    """Columnar batch of timed samples: ``X [n, d]``, ``y [n]`` (-1 = unlabeled), ``t [n]``."""

    X: np.ndarray
    y: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.t.shape != (n,):
            raise ValueError("X, y and t must have matching lengths")
        if n and self.t.min() < 0:
            raise ValueError("time indices must be >= 0")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> TimedSample:
        y = int(self.y[i])
        return TimedSample(self.X[i], None if y < 0 else y, int(self.t[i]))

    def __iter__(self) -> Iterator[TimedSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.unique(self.t)

    def select(self, mask) -> "Stream":
        return Stream(self.X[mask], self.y[mask], self.t[mask])

    def at(self, t: int) -> "Stream":
        return self.select(self.t == t)

    def upto(self, t: int) -> "Stream":
        return self.select(self.t <= t)

    def before(self, t: int) -> "Stream":
        return self.select(self.t < t)

    @classmethod
    def concat(cls, parts) -> "Stream":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.t for p in parts]))

    @classmethod
    def from_samples(cls, samples) -> "Stream":
        samples = list(samples)
        return cls(np.array([s.x for s in samples], dtype=np.float64).reshape(len(samples), -1),
                   np.array([-1 if s.y is None else s.y for s in samples]),
                   np.array([s.t for s in samples]))


@dataclass
class DriftSchedule:
    """How ``p_t`` evolves.

    gaussian_walk uses ``mu0``, ``d`` and ``flip_period``; label_shift uses
    ``n_classes``, ``steps_per_pair``, ``peak`` (mass of the dominant class
    in each base distribution), ``feat_dim``, ``class_scale`` and ``sigma``.
    """

    kind: str = "gaussian_walk"
    horizon: int = 160
    n_per_step: int = 200
    mu0: float = 0.5
    d: float = 1.0
    flip_period: int = 50
    n_classes: int = 10
    steps_per_pair: int = 6
    peak: float = 0.82
    feat_dim: int = 16
    class_scale: float = 3.0
    sigma: float = 1.0
    _means: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if int(self.horizon) < 1:
            raise ScheduleError("horizon must be >= 1")
        if int(self.n_per_step) < 1:
            raise ScheduleError("n_per_step must be >= 1")
        if self.kind == "gaussian_walk" and self.flip_period < 1:
            raise ScheduleError("flip_period must be >= 1")
        if self.kind == "label_shift":
            if self.n_classes < 2:
                raise ScheduleError("need at least two classes")
            if self.steps_per_pair < 1:
                raise ScheduleError("steps_per_pair must be >= 1")
            if not (0.0 <= self.peak <= 1.0):
                raise ScheduleError("peak must be a probability")
            if self.feat_dim < self.n_classes:
                raise ScheduleError("feat_dim must be >= n_classes")
            if self.sigma <= 0:
                raise ScheduleError("sigma must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("_means", None)
        return d

    @property
    def n_labels(self) -> int:
        return 2 if self.kind == "gaussian_walk" else self.n_classes

    @property
    def dim(self) -> int:
        return 1 if self.kind == "gaussian_walk" else self.feat_dim

    def _check_t(self, t: int, allow_horizon: bool = False) -> None:
        top = self.horizon if allow_horizon else self.horizon - 1
        if not 0 <= t <= top:
            raise IndexError(f"time {t} outside [0, {top}]")

    # -- gaussian walk -----------------------------------------------------

    def mean_at(self, t: int) -> float:
        """Mean of the Gaussian at step ``t``; direction flips after every ``flip_period`` steps."""
        if t < 0:
            raise IndexError("negative time")
        s = np.arange(1, t + 1)
        signs = np.where(((s - 1) // self.flip_period) % 2 == 0, 1.0, -1.0)
        return float(self.mu0 + np.sum(signs * (self.d / 10.0)))

    # -- label shift ---------------------------------------------------------

    def base_distribution(self, i: int) -> np.ndarray:
        C = self.n_classes
        q = np.full(C, (1.0 - self.peak) / (C - 1))
        q[i % C] = self.peak
        return q

    def class_means(self) -> np.ndarray:
        if self._means is None:
            M = np.zeros((self.n_classes, self.feat_dim))
            M[np.arange(self.n_classes), np.arange(self.n_classes)] = self.class_scale
            self._means = M
        return self._means


def interpolate_pair(q_from: np.ndarray, q_to: np.ndarray, offset: float, steps: int) -> np.ndarray:
    frac = offset / steps
    return (1.0 - frac) * q_from + frac * q_to


def label_shift_probs(schedule: DriftSchedule, t: int) -> np.ndarray:
    """Class probabilities ``v_t``.

    Pair ``i = (t // steps_per_pair) mod C`` is interpolated from ``q^i``
    towards ``q^{i+1}`` with fraction ``(t mod steps_per_pair) / steps_per_pair``.
    """
    if schedule.kind != "label_shift":
        raise ScheduleError("label_shift_probs needs a label_shift schedule")
    if t < 0:
        raise IndexError("negative time")
    P = schedule.steps_per_pair
    i = (t // P) % schedule.n_classes
    v = interpolate_pair(schedule.base_distribution(i), schedule.base_distribution(i + 1), t % P, P)
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def gaussian_step(schedule: DriftSchedule, t: int, rng: np.random.Generator,
                  n: int | None = None, allow_horizon: bool = False) -> Stream:
    if schedule.kind != "gaussian_walk":
        raise ScheduleError("gaussian_step needs a gaussian_walk schedule")
    schedule._check_t(t, allow_horizon)
    n = schedule.n_per_step if n is None else n
    mu = schedule.mean_at(t)
    x = rng.normal(mu, 1.0, size=n)
    return Stream(x[:, None], (x > mu).astype(np.int64), np.full(n, t))


def sample_classes(schedule: DriftSchedule, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    M = schedule.class_means()
    return M[y] + schedule.sigma * rng.normal(size=(len(y), schedule.feat_dim))


def label_shift_step(schedule: DriftSchedule, t: int, rng: np.random.Generator,
                     n: int | None = None, allow_horizon: bool = False) -> Stream:
    if schedule.kind != "label_shift":
        raise ScheduleError("label_shift_step needs a label_shift schedule")
    schedule._check_t(t, allow_horizon)
    n = schedule.n_per_step if n is None else n
    y = rng.choice(schedule.n_classes, size=n, p=label_shift_probs(schedule, t))
    return Stream(sample_classes(schedule, y, rng), y, np.full(n, t))


def draw_step(schedule: DriftSchedule, t: int, rng: np.random.Generator, n: int | None = None,
              allow_horizon: bool = False) -> Stream:
    step = gaussian_step if schedule.kind == "gaussian_walk" else label_shift_step
    return step(schedule, t, rng, n=n, allow_horizon=allow_horizon)


def train_rng(seed: int, t: int) -> np.random.Generator:
    return child_rng(seed, "train-stream", t)


def test_rng(seed: int, t: int) -> np.random.Generator:
    return child_rng(seed, "test-stream", t)


def generate_stream(schedule: DriftSchedule, seed: int, upto: int | None = None) -> Stream:
    """Training stream for steps ``0..upto`` (default: the whole horizon).

    Each step draws from its own child generator, so step ``t`` does not
    depend on how many steps were generated before it.
    """
    last = schedule.horizon - 1 if upto is None else upto
    return Stream.concat(draw_step(schedule, t, train_rng(seed, t)) for t in range(last + 1))


def test_set_at(schedule: DriftSchedule, t_next: int, rng: np.random.Generator,
                n: int | None = None) -> Stream:
    """Evaluation draw from ``p_{t_next}``; ``t_next`` may equal the horizon."""
    return draw_step(schedule, t_next, rng, n=n, allow_horizon=True)


def write_stream_csv(stream: Stream, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y"] + [f"x_{k}" for k in range(stream.dim)])
        for x, y, t in zip(stream.X, stream.y, stream.t):
            w.writerow([int(t), "" if y < 0 else int(y)] + [repr(float(v)) for v in x])


def read_stream_csv(path) -> Stream:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:] if rows and rows[0] and rows[0][0] == "t" else rows
    if not body:
        dim = max(len(rows[0]) - 2, 1) if rows else 1
        return Stream(np.zeros((0, dim)), np.zeros(0), np.zeros(0))
    t = [int(r[0]) for r in body]
    y = [-1 if r[1] == "" else int(r[1]) for r in body]
    X = [[float(v) for v in r[2:]] for r in body]
    return Stream(np.array(X), np.array(y), np.array(t))


def read_stream_dir(directory) -> Stream:
    files = sorted(Path(directory).glob("step_*.csv"))
    if not files:
        raise FileNotFoundError(f"no step_*.csv files in {directory}")
    return Stream.concat(read_stream_csv(f) for f in files)
