"""Supervised training protocols on drifting streams.

Every protocol trains a fresh task model per time step and is scored on a
draw from the next step's distribution:

everything      all samples with ``t_i <= t``
recent          only samples with ``t_i == t``
finetune        fit on ``t_i < t``, then continue on ``t_i == t`` from those weights
omega_weighted  everything, each loss term scaled by ``omega(x_i, t, t_i)``
beta_weighted   everything, scaled by a static propensity between the current
                step and the pooled history
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import omega as om
from .drift import DriftSchedule, Stream, generate_stream, test_rng, test_set_at
from .nn import Adam, DenseNet, InputError, softmax_cross_entropy
from .seeding import child_rng

PROTOCOLS = ("everything", "recent", "finetune", "omega_weighted", "beta_weighted")


class DegenerateObjectiveError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: tuple = (64, 64)
    lr: float = 3e-3
    epochs: int = 20
    batch_size: int = 128
    finetune_epochs: int | None = None
    normalize_weights: bool = False


@dataclass
class OmegaConfig:
    mode: str = "method1"
    clip: float | None = 1.0
    hidden: tuple = (64, 64)
    epochs: int = 200
    batch_size: int = 512
    lr: float = 3e-3
    use_labels: bool = True
    batchnorm: bool = False
    n_freqs: int = 4
    min_period: float = 4.0
    regenerate: bool = True
    # warm start: one estimator per seed, updated with ``epochs_per_step`` epochs at each step
    warm_start: bool = True
    epochs_per_step: int = 10
    # static propensity baseline, refit from scratch at every step
    beta_epochs: int = 20


class TaskModel:
    """Softmax classifier on top of a :class:`DenseNet`."""

    def __init__(self, net: DenseNet):
        self.net = net

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.net.forward(np.asarray(X, dtype=np.float64), mode="infer"), axis=1)

    def accuracy(self, stream: Stream) -> float:
        return float(np.mean(self.predict(stream.X) == stream.y))

    def copy(self) -> "TaskModel":
        return TaskModel(self.net.copy())


def new_model(in_dim: int, n_classes: int, config: ModelConfig, rng: np.random.Generator) -> TaskModel:
    return TaskModel(DenseNet([in_dim, *config.hidden, n_classes], rng=rng))


def objective(model: TaskModel, stream: Stream, weights=None, normalizer: float | None = None) -> float:
    """``(1/normalizer) * sum_i w_i * loss_i`` over the whole stream (normalizer defaults to its size)."""
    logits = model.net.forward(stream.X, mode="infer")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    loss, _ = softmax_cross_entropy(logits, stream.y, w, normalizer if normalizer else len(stream))
    return loss


def fit(model: TaskModel, stream: Stream, config: ModelConfig, rng: np.random.Generator,
        weights=None, epochs: int | None = None, trace: list | None = None) -> TaskModel:
    """Minibatch Adam on (weighted) cross-entropy, in place.

    Samples with zero weight never enter a minibatch. When ``trace`` is
    given, a flat copy of the parameters is appended after every step.
    """
    epochs = config.epochs if epochs is None else epochs
    if weights is None:
        weights = np.ones(len(stream))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(stream),):
            raise InputError("one weight per sample required")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InputError("weights must be finite and nonnegative")
        if not np.any(weights > 0):
            raise DegenerateObjectiveError("all weights are zero")
        keep = weights > 0
        if not keep.all():
            stream, weights = stream.select(keep), weights[keep]
        if config.normalize_weights:
            weights = weights / weights.mean()
    if len(stream) == 0:
        raise InputError("no training samples")
    opt = Adam(lr=config.lr)
    theta = model.net.flat
    X, y = stream.X, stream.y
    for _ in range(epochs):
        perm = rng.permutation(len(y))
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            yb, wb = y[idx], weights[idx]
            _, grads = model.net.grad(X[idx], lambda out: softmax_cross_entropy(out, yb, wb), flat=True)
            opt.step([theta], [grads])
            if trace is not None:
                trace.append(theta.copy())
    return model


def _fresh(stream: Stream, n_classes: int, config: ModelConfig, init_rng) -> TaskModel:
    return new_model(stream.dim, n_classes, config, init_rng)


def train_everything(history: Stream, n_classes: int, config: ModelConfig, init_rng, shuffle_rng,
                     trace=None) -> TaskModel:
    if len(history) == 0:
        raise InputError("empty history")
    return fit(_fresh(history, n_classes, config, init_rng), history, config, shuffle_rng, trace=trace)


def train_recent(stream: Stream, t: int, n_classes: int, config: ModelConfig, init_rng, shuffle_rng,
                 trace=None) -> TaskModel:
    """Fit on the samples stamped ``t`` only; ``stream`` may hold the full history."""
    latest = stream.at(t)
    if len(latest) == 0:
        raise InputError(f"no samples at t={t}")
    return fit(_fresh(latest, n_classes, config, init_rng), latest, config, shuffle_rng, trace=trace)


def train_finetune(history: Stream, t: int, n_classes: int, config: ModelConfig, init_rng,
                   shuffle_rng, stage2_epochs: int | None = None) -> tuple[TaskModel, TaskModel]:
    """Returns ``(finetuned, base)`` where ``base`` was fitted on ``t_i < t`` only."""
    past, latest = history.before(t), history.at(t)
    if len(past) == 0 or len(latest) == 0:
        raise InputError("finetune needs both past and current samples")
    base = fit(_fresh(history, n_classes, config, init_rng), past, config, shuffle_rng)
    if stage2_epochs is None:
        stage2_epochs = config.finetune_epochs if config.finetune_epochs is not None else config.epochs
    tuned = base.copy()
    if stage2_epochs > 0:
        fit(tuned, latest, config, shuffle_rng, epochs=stage2_epochs)
    return tuned, base


def train_weighted(history: Stream, weights, n_classes: int, config: ModelConfig, init_rng,
                   shuffle_rng, trace=None) -> TaskModel:
    if len(history) == 0:
        raise InputError("empty history")
    return fit(_fresh(history, n_classes, config, init_rng), history, config, shuffle_rng,
               weights=weights, trace=trace)


def evaluate_next_step(model: TaskModel, schedule: DriftSchedule, t: int, rng: np.random.Generator,
                       n: int = 2000) -> float:
    if t + 1 > schedule.horizon:
        raise IndexError(f"t+1={t + 1} is past the horizon {schedule.horizon}")
    return model.accuracy(test_set_at(schedule, t + 1, rng, n=n))


# -- benchmark driver ---------------------------------------------------------------


@dataclass
class ProtocolRun:
    protocol: str
    seed: int
    steps: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    n_train: list = field(default_factory=list)
    wallclock_ms: list = field(default_factory=list)

    def rows(self):
        for t, a, n, ms in zip(self.steps, self.accuracies, self.n_train, self.wallclock_ms):
            yield {"protocol": self.protocol, "seed": self.seed, "t": t, "accuracy": a,
                   "n_train": n, "wallclock_ms": ms}


def protocol_name(protocol: str, omega_mode: str | None = None) -> str:
    return protocol if omega_mode is None else f"{protocol}:{omega_mode}"


def _parse_protocol(name: str) -> tuple[str, str | None]:
    base, _, mode = name.partition(":")
    if base not in PROTOCOLS:
        raise ValueError(f"unknown protocol {name!r}")
    if mode and base != "omega_weighted":
        raise ValueError(f"only omega_weighted takes a mode suffix: {name!r}")
    if mode and mode not in om.MODES:
        raise ValueError(f"unknown omega mode in {name!r}")
    return base, mode or None


def benchmark_plan(schedule: DriftSchedule, protocols, seeds, start: int = 1):
    """Work items ``(seed, t, protocol)`` in execution order."""
    for name in protocols:
        _parse_protocol(name)
    return [(s, t, p) for s in seeds for t in range(start, schedule.horizon) for p in protocols]


class _OmegaTrack:
    """Per-seed estimator that is refreshed on the data seen so far at each step."""

    def __init__(self, schedule: DriftSchedule, cfg: OmegaConfig, seed: int, mode: str):
        self.schedule, self.cfg, self.seed, self.mode = schedule, cfg, seed, mode
        self.est = None
        self.opt = None

    def _new(self):
        cfg = self.cfg
        return om.OmegaEstimator.create(
            self.schedule.dim, self.schedule.horizon, mode=self.mode, clip=cfg.clip,
            hidden=cfg.hidden, n_labels=self.schedule.n_labels if cfg.use_labels else None,
            batchnorm=cfg.batchnorm, n_freqs=cfg.n_freqs, min_period=cfg.min_period,
            rng=child_rng(self.seed, "omega-init", self.mode))

    def at(self, history: Stream, t: int) -> om.OmegaEstimator:
        cfg = self.cfg
        rng = child_rng(self.seed, "omega-train", self.mode, t)
        if cfg.warm_start:
            if self.est is None:
                self.est, self.opt = self._new(), Adam(lr=cfg.lr)
            om.train(self.est, history, epochs=cfg.epochs_per_step, batch_size=cfg.batch_size, rng=rng,
                     regenerate=cfg.regenerate, optimizer=self.opt)
            return self.est
        est = self._new()
        return om.train(est, history, epochs=cfg.epochs, batch_size=cfg.batch_size, rng=rng,
                        lr=cfg.lr, regenerate=cfg.regenerate)


def beta_weights(history: Stream, t: int, schedule: DriftSchedule, cfg: OmegaConfig, seed: int) -> np.ndarray:
    """Static propensity weights ``beta(x_i)`` with the current step as target, pooled history as source."""
    n_labels = schedule.n_labels if cfg.use_labels else None
    F = om.estimator_features(history, n_labels)
    current = history.t == t
    model = om.fit_standard_propensity(F, F[current], child_rng(seed, "beta", t), hidden=cfg.hidden,
                                       epochs=cfg.beta_epochs, batch_size=cfg.batch_size, lr=cfg.lr)
    return model.beta(F, clip=cfg.clip)


def run_benchmark(schedule: DriftSchedule, protocols, seeds, model_config: ModelConfig | None = None,
                  omega_config: OmegaConfig | None = None, test_size: int = 2000, start: int = 1,
                  stop: int | None = None, log=None) -> list[ProtocolRun]:
    """Train every protocol from scratch at each step and score it on the next step.

    Model initialization and minibatch order are keyed by ``(seed, t)`` only,
    so protocols at the same step start from identical weights.
    """
    model_config = model_config or ModelConfig()
    omega_config = omega_config or OmegaConfig()
    parsed = [(_parse_protocol(p), p) for p in protocols]
    stop = schedule.horizon if stop is None else stop
    C = schedule.n_labels
    runs = []
    for seed in seeds:
        stream = generate_stream(schedule, seed, upto=stop - 1)
        seed_runs = {p: ProtocolRun(p, seed) for p in protocols}
        tracks = {}
        for t in range(start, stop):
            history = stream.upto(t)
            test = test_set_at(schedule, t + 1, test_rng(seed, t + 1), n=test_size)
            for (base, mode), name in parsed:
                t0 = time.perf_counter()
                init, shuf = child_rng(seed, "model-init", t), child_rng(seed, "shuffle", t)
                if base == "everything":
                    model, n_train = train_everything(history, C, model_config, init, shuf), len(history)
                elif base == "recent":
                    model = train_recent(history, t, C, model_config, init, shuf)
                    n_train = int(np.sum(history.t == t))
                elif base == "finetune":
                    model, _ = train_finetune(history, t, C, model_config, init, shuf)
                    n_train = len(history)
                elif base == "omega_weighted":
                    mode = mode or omega_config.mode
                    if mode not in tracks:
                        tracks[mode] = _OmegaTrack(schedule, omega_config, seed, mode)
                    est = tracks[mode].at(history, t)
                    w = est.weights_for(history, t)
                    model = train_weighted(history, w, C, model_config, init, shuf)
                    n_train = len(history)
                else:
                    w = beta_weights(history, t, schedule, omega_config, seed)
                    model = train_weighted(history, w, C, model_config, init, shuf)
                    n_train = len(history)
                acc = model.accuracy(test)
                run = seed_runs[name]
                run.steps.append(t)
                run.accuracies.append(acc)
                run.n_train.append(n_train)
                run.wallclock_ms.append(round(1000 * (time.perf_counter() - t0), 1))
                if log:
                    log(f"seed={seed} t={t} {name} acc={acc:.4f}")
        runs.extend(seed_runs.values())
    return runs


def summarize(runs: list[ProtocolRun]) -> list[dict]:
    """Per ``(protocol, t)`` mean and standard error over seeds."""
    table: dict = {}
    for run in runs:
        for t, a in zip(run.steps, run.accuracies):
            table.setdefault((run.protocol, t), []).append(a)
    out = []
    for (p, t), accs in sorted(table.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        a = np.asarray(accs)
        se = float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
        out.append({"protocol": p, "t": t, "mean_accuracy": float(a.mean()), "stderr": se, "n_seeds": len(a)})
    return out


def mean_accuracy(runs: list[ProtocolRun], protocol: str, t_min: int = 0) -> float:
    vals = [a for r in runs if r.protocol == protocol for t, a in zip(r.steps, r.accuracies) if t >= t_min]
    return float(np.mean(vals))


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
