"""Kernel MMD checks for drift and for learned weights.

All estimates use the Gaussian kernel ``k(u, v) = exp(-|u - v|^2 / (2 h^2))``.
Kernel sums are accumulated in row blocks so large pooled histories do not
materialize a full Gram matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .drift import Stream
from .nn import InputError

BLOCK = 2048


def _as2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def _sqdist(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def kernel_sum(A, B, bandwidth: float, wa=None, wb=None) -> float:
    """``sum_ij wa_i wb_j k(a_i, b_j)``."""
    A, B = _as2d(A), _as2d(B)
    wa = np.ones(len(A)) if wa is None else np.asarray(wa, dtype=np.float64)
    wb = np.ones(len(B)) if wb is None else np.asarray(wb, dtype=np.float64)
    g = -0.5 / bandwidth**2
    total = 0.0
    for s in range(0, len(A), BLOCK):
        K = np.exp(g * _sqdist(A[s:s + BLOCK], B))
        total += float(wa[s:s + BLOCK] @ K @ wb)
    return total


def _within(A, bandwidth, w=None) -> float:
    """Weighted U-statistic mean of ``k`` over distinct pairs; V-statistic if only one point carries weight."""
    w = np.ones(len(A)) if w is None else np.asarray(w, dtype=np.float64)
    full = kernel_sum(A, A, bandwidth, w, w)
    sw, sw2 = w.sum(), (w * w).sum()
    denom = sw * sw - sw2
    if denom <= 1e-300 * max(sw * sw, 1.0):
        return full / (sw * sw)
    return (full - sw2) / denom


def _check_bandwidth(bandwidth):
    if not bandwidth > 0:
        raise InputError("bandwidth must be positive")


def mmd2(X, Y, bandwidth: float) -> float:
    """Unbiased squared MMD; may come out slightly negative."""
    X, Y = _as2d(X), _as2d(Y)
    if len(X) < 2 or len(Y) < 2:
        raise InputError("need at least two samples per side")
    _check_bandwidth(bandwidth)
    # fixed argument order keeps mmd2(X, Y) == mmd2(Y, X) bit for bit
    if (len(X), X.tobytes()) > (len(Y), Y.tobytes()):
        X, Y = Y, X
    cross = kernel_sum(X, Y, bandwidth) / (len(X) * len(Y))
    return _within(X, bandwidth) + _within(Y, bandwidth) - 2.0 * cross


def weighted_mmd2(X, Y, w, bandwidth: float) -> float:
    """Squared MMD with ``Y``-side expectations taken under the normalized weights ``w``."""
    X, Y = _as2d(X), _as2d(Y)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(Y),):
        raise InputError("one weight per Y sample required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InputError("weights must be finite and nonnegative")
    if not w.sum() > 0:
        raise InputError("weights sum to zero")
    if len(X) < 2:
        raise InputError("need at least two X samples")
    _check_bandwidth(bandwidth)
    cross = kernel_sum(X, Y, bandwidth, wb=w) / (len(X) * w.sum())
    return _within(X, bandwidth) + _within(Y, bandwidth, w) - 2.0 * cross


def median_bandwidth(Z, max_points: int = 2000, seed: int = 0) -> float:
    """Median of the nonzero pairwise distances in (a subsample of) ``Z``; 1.0 if all points coincide."""
    Z = _as2d(Z)
    if len(Z) < 2:
        raise InputError("need at least two points")
    if len(Z) > max_points:
        Z = Z[np.random.default_rng(seed).choice(len(Z), max_points, replace=False)]
    d = pdist(Z)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def gaussian_mmd2(mean_x, mean_y, sigma: float, bandwidth: float) -> float:
    """Population squared MMD between ``N(mean_x, sigma^2 I)`` and ``N(mean_y, sigma^2 I)``."""
    mx, my = np.atleast_1d(mean_x).astype(float), np.atleast_1d(mean_y).astype(float)
    dim = len(mx)
    s = bandwidth**2 + 2.0 * sigma**2
    scale = (bandwidth**2 / s) ** (dim / 2.0)
    return float(2.0 * scale * (1.0 - np.exp(-np.sum((mx - my) ** 2) / (2.0 * s))))


@dataclass
class MMDReport:
    records: list = field(default_factory=list)

    FIELDS = ("t", "mmd_unweighted", "mmd_weighted", "bandwidth", "n_current", "n_past",
              "mmd_unweighted_pos", "mmd_weighted_pos")

    def add(self, t, unweighted, weighted, bandwidth, n_current, n_past):
        if not bandwidth > 0 or n_current < 2 or n_past < 2:
            raise InputError("invalid report record")
        self.records.append({
            "t": int(t), "mmd_unweighted": float(unweighted), "mmd_weighted": float(weighted),
            "bandwidth": float(bandwidth), "n_current": int(n_current), "n_past": int(n_past),
            "mmd_unweighted_pos": max(float(unweighted), 0.0), "mmd_weighted_pos": max(float(weighted), 0.0),
        })

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def fig3_protocol(stream: Stream, est, bandwidth: float | None = None, start: int = 1) -> MMDReport:
    """Distance between each step's samples and all earlier samples, plain and omega-weighted.

    One bandwidth (median heuristic over the whole stream unless given) is
    shared by every step so the curves are comparable.
    """
    times = stream.times
    if len(times) < 2:
        raise InputError("stream must span at least two steps")
    h = median_bandwidth(stream.X) if bandwidth is None else bandwidth
    report = MMDReport()
    for t in times:
        if t < start:
            continue
        cur, past = stream.at(t), stream.before(t)
        if len(cur) < 2 or len(past) < 2:
            continue
        w = est.weights_for(past, int(t))
        report.add(t, mmd2(cur.X, past.X, h), weighted_mmd2(cur.X, past.X, w, h), h, len(cur), len(past))
    return report
