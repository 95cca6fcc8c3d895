"""Time-varying importance weights ``omega(x, T, t) = dp_T / dp_t (x)``.

A network ``g(x, t)`` is fitted by time-contrastive logistic regression on
quadruples ``(x, t_pos, t_neg, z)``: ``t_pos`` is the sample's own time,
``t_neg`` a uniformly drawn other observed time, and ``z`` a fair coin that
decides which of the two fills the "candidate" slot ``t2``::

    z = +1:  t2, t1 = t_pos, t_neg
    z = -1:  t2, t1 = t_neg, t_pos

``method1`` scores the pair, ``s = g(x, t2) - g(x, t1)``; ``method2``
scores the candidate alone, ``s = g(x, t2)``. Either way the loss is
``log(1 + exp(-z s))`` and the weight is ``exp(g(x, T) - g(x, t))``.

At the optimum, ``method1`` recovers ``log p_a(x) / p_b(x)`` exactly for
any number of observed times. ``method2`` fits deviations from the time
marginal; because contrast times exclude the sample's own time its ratio
is biased by roughly ``1/K`` for ``K`` observed times, which is negligible
for long streams but not for two-step ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drift import Stream
from .nn import Adam, DenseNet, InputError, read_snapshot, write_snapshot

MODES = ("method1", "method2")


class DegenerateStreamError(ValueError):
    pass


class NotTrainedError(RuntimeError):
    pass


@dataclass
class QuadrupleExample:
    x: np.ndarray
    t_pos: int
    t_neg: int
    z: int


@dataclass
class Quadruples:
    """Columnar set of quadruple examples."""

    X: np.ndarray
    t_pos: np.ndarray
    t_neg: np.ndarray
    z: np.ndarray

    def __len__(self) -> int:
        return len(self.z)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return QuadrupleExample(self.X[i], int(self.t_pos[i]), int(self.t_neg[i]), int(self.z[i]))
        return Quadruples(self.X[i], self.t_pos[i], self.t_neg[i], self.z[i])

    def slots(self) -> tuple[np.ndarray, np.ndarray]:
        """``(t2, t1)`` per example, ordered by ``z``."""
        pos = self.z > 0
        return np.where(pos, self.t_pos, self.t_neg), np.where(pos, self.t_neg, self.t_pos)


@dataclass
class TimeEncoding:
    """``t -> [t / horizon, sin(2 pi t / P_k), cos(2 pi t / P_k)]``.

    Periods ``P_k`` are geometric between ``horizon`` and ``min_period``.
    """

    horizon: int
    n_freqs: int = 4
    min_period: float = 4.0

    @property
    def width(self) -> int:
        return 1 + 2 * self.n_freqs

    @property
    def periods(self) -> np.ndarray:
        if self.n_freqs == 0:
            return np.zeros(0)
        top = max(float(self.horizon), self.min_period)
        return np.geomspace(top, self.min_period, self.n_freqs)

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        ang = 2.0 * np.pi * t[:, None] / self.periods[None, :]
        return np.concatenate([t[:, None] / self.horizon, np.sin(ang), np.cos(ang)], axis=1)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "n_freqs": self.n_freqs, "min_period": self.min_period}


def estimator_features(stream: Stream, n_labels: int | None = None) -> np.ndarray:
    """Estimator input for a stream: ``x``, plus a one-hot label when ``n_labels`` is given."""
    if not n_labels:
        return stream.X
    if np.any(stream.y < 0):
        raise InputError("label-aware features need labeled samples")
    return np.concatenate([stream.X, np.eye(n_labels)[stream.y]], axis=1)


@dataclass
class OmegaEstimator:
    net: DenseNet
    encoding: TimeEncoding
    mode: str = "method1"
    clip: float | None = 1.0
    n_labels: int | None = None
    trained: bool = False
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.clip is not None and self.clip < 0:
            raise ValueError("clip must be nonnegative")

    @classmethod
    def create(cls, feature_dim: int, horizon: int, mode: str = "method1", clip: float | None = 1.0,
               hidden=(64, 64), n_labels: int | None = None, batchnorm: bool = False,
               n_freqs: int = 4, min_period: float = 4.0, rng=None) -> "OmegaEstimator":
        enc = TimeEncoding(horizon, n_freqs, min_period)
        in_dim = feature_dim + (n_labels or 0) + enc.width
        net = DenseNet([in_dim, *hidden, 1], batchnorm=batchnorm, rng=rng, zero_last=True)
        return cls(net, enc, mode, clip, n_labels)

    @property
    def horizon(self) -> int:
        return self.encoding.horizon

    def features(self, stream: Stream) -> np.ndarray:
        return estimator_features(stream, self.n_labels)

    def inputs(self, F: np.ndarray, t) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t), (F.shape[0],))
        return np.concatenate([F, self.encoding(t)], axis=1)

    def score(self, F, t) -> np.ndarray:
        """``g(x, t)`` for feature rows ``F`` (inference mode).

        Rows are grouped by time so a given ``(x, t)`` is always evaluated in
        the same batch, which keeps weight identities exact.
        """
        F = np.asarray(F, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t), (F.shape[0],))
        out = np.empty(F.shape[0])
        for u in np.unique(t):
            rows = t == u
            out[rows] = self.net.forward(self.inputs(F[rows], u), mode="infer")[:, 0]
        return out

    def log_omega(self, F, T, t) -> np.ndarray:
        F = np.asarray(F, dtype=np.float64)
        T = np.broadcast_to(np.asarray(T), (F.shape[0],))
        t = np.broadcast_to(np.asarray(t), (F.shape[0],))
        diff = self.score(F, T) - self.score(F, t)
        return np.where(T == t, 0.0, diff)

    def omega(self, F, T, t, clip: bool = True) -> np.ndarray:
        """``exp(g(x, T) - g(x, t))``, capped at ``self.clip`` when clipping is on."""
        if not self.trained:
            raise NotTrainedError("estimator has not been trained")
        w = np.exp(self.log_omega(F, T, t))
        if clip and self.clip is not None:
            w = np.minimum(w, self.clip)
        return w

    def weights_for(self, stream: Stream, T: int, clip: bool = True) -> np.ndarray:
        """``omega(x_i, T, t_i)`` for every sample of ``stream``."""
        return self.omega(self.features(stream), T, stream.t, clip=clip)

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        d = self.net.to_dict()
        header = {
            "kind": "omega-estimator",
            "mode": self.mode,
            "clip": self.clip,
            "n_labels": self.n_labels,
            "encoding": self.encoding.to_dict(),
            "activations": d["activations"],
            "batchnorm": d["batchnorm"],
        }
        write_snapshot(path, header, d["tensors"])

    @classmethod
    def load(cls, path) -> "OmegaEstimator":
        header, tensors = read_snapshot(path)
        if header.get("kind") != "omega-estimator":
            raise InputError(f"{path} is not an omega-estimator snapshot")
        net = DenseNet.from_dict({"activations": header["activations"],
                                  "batchnorm": header["batchnorm"], "tensors": tensors})
        return cls(net, TimeEncoding(**header["encoding"]), header["mode"], header["clip"],
                   header["n_labels"], trained=True)


def generate_data(stream: Stream, rng: np.random.Generator, features: np.ndarray | None = None) -> Quadruples:
    """One quadruple per sample: a uniform contrast time other than its own and a fair ``z``.

    Samples are put in a canonical order first, so the result does not depend
    on how the input happened to be ordered.
    """
    F = stream.X if features is None else np.asarray(features, dtype=np.float64)
    times = stream.times
    if len(times) < 2:
        raise DegenerateStreamError("stream must span at least two time indices")
    order = np.lexsort(tuple(F.T[::-1]) + (stream.t,)) if F.size else np.argsort(stream.t, kind="stable")
    F, t = F[order], stream.t[order]
    n, K = len(t), len(times)
    own = np.searchsorted(times, t)
    r = rng.integers(0, K - 1, size=n)
    r = r + (r >= own)
    z = np.where(rng.random(n) >= 0.5, 1, -1)
    return Quadruples(F, t, times[r], z)


def _softplus(u):
    return np.logaddexp(0.0, u)


def _sigmoid(u):
    return np.exp(-_softplus(-u))


def _margin_inputs(est: OmegaEstimator, batch: Quadruples) -> np.ndarray:
    t2, t1 = batch.slots()
    if est.mode == "method1":
        return np.concatenate([est.inputs(batch.X, t2), est.inputs(batch.X, t1)])
    return est.inputs(batch.X, t2)


def _margin(est: OmegaEstimator, out: np.ndarray, n: int) -> np.ndarray:
    return out[:n, 0] - out[n:, 0] if est.mode == "method1" else out[:, 0]


def pairwise_logistic_loss(est: OmegaEstimator, batch: Quadruples, mode: str = "infer") -> float:
    """Mean ``log(1 + exp(-z s))`` over the batch."""
    if len(batch) == 0:
        raise InputError("empty batch")
    out = est.net.forward(_margin_inputs(est, batch), mode=mode, update_stats=False)
    s = _margin(est, out, len(batch))
    return float(np.mean(_softplus(-batch.z * s)))


def loss_and_grads(est: OmegaEstimator, batch: Quadruples, mode: str = "train", update_stats: bool = True,
                   flat: bool = False):
    n = len(batch)
    z = batch.z.astype(np.float64)

    def closure(out):
        s = _margin(est, out, n)
        loss = np.mean(_softplus(-z * s))
        ds = -z * _sigmoid(-z * s) / n
        dout = np.zeros_like(out)
        if est.mode == "method1":
            dout[:n, 0] = ds
            dout[n:, 0] = -ds
        else:
            dout[:, 0] = ds
        return loss, dout

    return est.net.grad(_margin_inputs(est, batch), closure, mode=mode, update_stats=update_stats, flat=flat)


def quadruple_accuracy(est: OmegaEstimator, batch: Quadruples) -> float:
    out = est.net.forward(_margin_inputs(est, batch), mode="infer")
    s = _margin(est, out, len(batch))
    return float(np.mean(np.sign(s) == batch.z))


def train(est: OmegaEstimator, stream: Stream, epochs: int = 200, batch_size: int = 512,
          rng: np.random.Generator | None = None, lr: float = 1e-3, holdout: Stream | None = None,
          regenerate: bool = True, optimizer: Adam | None = None) -> OmegaEstimator:
    """Fit ``g`` by minibatch Adam on freshly generated quadruples each epoch.

    With ``regenerate=False`` the quadruples from the first epoch are reused
    (faster, but the contrast times are then fixed). When ``holdout`` is
    given, its quadruple loss before and after each epoch is appended to
    ``est.history`` as ``(epoch, train_loss, holdout_loss)``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    F = est.features(stream)
    opt = optimizer if optimizer is not None else Adam(lr=lr)
    theta = est.net.flat
    held = None
    if holdout is not None:
        held = generate_data(holdout, np.random.default_rng(rng.integers(2**63)), est.features(holdout))
        est.history.append((0, float("nan"), pairwise_logistic_loss(est, held)))
    quads = None
    for epoch in range(1, epochs + 1):
        if quads is None or regenerate:
            quads = generate_data(stream, rng, F)
        perm = rng.permutation(len(quads))
        total = 0.0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            if est.net.has_batchnorm and len(idx) < 2:
                continue
            loss, grads = loss_and_grads(est, quads[idx], flat=True)
            opt.step([theta], [grads])
            total += loss * len(idx)
        if held is not None:
            est.history.append((epoch, total / len(perm), pairwise_logistic_loss(est, held)))
    est.trained = True
    return est


# -- standard (static) propensity --------------------------------------------------


@dataclass
class PropensityModel:
    """Binary classifier ``g`` between two samples; ``beta(x) = exp(-g(x))`` estimates ``dq/dp``."""

    net: DenseNet

    def logit(self, X) -> np.ndarray:
        return self.net.forward(np.asarray(X, dtype=np.float64), mode="infer")[:, 0]

    def log_beta(self, X) -> np.ndarray:
        return -self.logit(X)

    def beta(self, X, clip: float | None = None) -> np.ndarray:
        b = np.exp(self.log_beta(X))
        return b if clip is None else np.minimum(b, clip)


def fit_standard_propensity(X_p, X_q, rng: np.random.Generator, hidden=(64, 64), epochs: int = 50,
                            batch_size: int = 512, lr: float = 1e-3) -> PropensityModel:
    """Logistic fit with ``z = +1`` on p-samples and ``z = -1`` on q-samples.

    Each side carries half the total loss weight, so unequal sample counts
    do not shift the logit; ``hidden=()`` gives plain logistic regression.
    """
    if len(X_p) == 0 or len(X_q) == 0:
        raise InputError("both samples must be nonempty")
    X_p = np.asarray(X_p, dtype=np.float64).reshape(len(X_p), -1)
    X_q = np.asarray(X_q, dtype=np.float64).reshape(len(X_q), -1)
    X = np.concatenate([X_p, X_q])
    z = np.concatenate([np.ones(len(X_p)), -np.ones(len(X_q))])
    w = np.concatenate([np.full(len(X_p), 0.5 / len(X_p)), np.full(len(X_q), 0.5 / len(X_q))]) * len(X)
    net = DenseNet([X.shape[1], *hidden, 1], rng=rng, zero_last=True)
    opt = Adam(lr=lr)
    for _ in range(epochs):
        perm = rng.permutation(len(X))
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            zb, wb = z[idx], w[idx]

            def closure(out, zb=zb, wb=wb):
                s = out[:, 0]
                loss = np.sum(wb * _softplus(-zb * s)) / len(zb)
                dout = np.zeros_like(out)
                dout[:, 0] = -wb * zb * _sigmoid(-zb * s) / len(zb)
                return loss, dout

            _, grads = net.grad(X[idx], closure, flat=True)
            opt.step([net.flat], [grads])
    return PropensityModel(net)
