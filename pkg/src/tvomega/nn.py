"""Small dense-network engine with hand-written backprop and Adam.

Everything runs in float64. Weight matrices are stored ``[out, in]`` so a
layer computes ``X @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")
BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class BatchNorm:
    """Per-feature batch normalization with running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, width: int) -> "BatchNorm":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width))


class DenseNet:
    """Feed-forward stack of dense layers.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including input and output, e.g. ``[3, 64, 64, 1]``.
    activations : sequence of str, optional
        One per layer; defaults to relu on hidden layers and identity on the
        output layer.
    batchnorm : bool
        Insert batch normalization before the activation of every hidden layer.
    rng : numpy Generator used for Glorot-uniform initialization.
    zero_last : bool
        Start the output layer at zero so the net initially emits a constant.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activations: Sequence[str] | None = None,
        batchnorm: bool = False,
        rng: np.random.Generator | None = None,
        zero_last: bool = False,
    ):
        if len(sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        rng = rng if rng is not None else np.random.default_rng(0)
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise ShapeError("one activation per layer required")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.activations = list(activations)
        self.weights = []
        self.biases = []
        for k in range(n_layers):
            W = glorot_uniform(sizes[k], sizes[k + 1], rng)
            if zero_last and k == n_layers - 1:
                W = np.zeros_like(W)
            self.weights.append(W)
            self.biases.append(np.zeros(sizes[k + 1]))
        self.norms: list[BatchNorm | None] = [
            BatchNorm.create(sizes[k + 1]) if batchnorm and k < n_layers - 1 else None
            for k in range(n_layers)
        ]
        self._bind_flat()

    @classmethod
    def from_layers(cls, layers, activations, norms=None) -> "DenseNet":
        """Build a net from explicit ``(W, b)`` pairs, checking that dimensions chain."""
        net = cls.__new__(cls)
        net.weights = [np.array(W, dtype=np.float64, ndmin=2) for W, _ in layers]
        net.biases = [np.array(b, dtype=np.float64, ndmin=1) for _, b in layers]
        net.activations = list(activations)
        net.norms = list(norms) if norms is not None else [None] * len(layers)
        net._check()
        net._bind_flat()
        return net

    def _bind_flat(self):
        """Move all trainable arrays into one contiguous vector and keep views into it."""
        arrays = self._param_list()
        self.flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
        views, pos = [], 0
        for a in arrays:
            views.append(self.flat[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        it = iter(views)
        for k, bn in enumerate(self.norms):
            self.weights[k] = next(it)
            self.biases[k] = next(it)
            if bn is not None:
                bn.gamma = next(it)
                bn.beta = next(it)

    def _check(self):
        if len(self.activations) != len(self.weights):
            raise ShapeError("one activation per layer required")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {k}: bias length {b.shape[0]} != {W.shape[0]}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k}: input {W.shape[1]} != previous output")

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_features(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def has_batchnorm(self) -> bool:
        return any(n is not None for n in self.norms)

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays, in the order gradients are returned (views into :attr:`flat`)."""
        return self._param_list()

    def _param_list(self) -> list[np.ndarray]:
        out = []
        for W, b, bn in zip(self.weights, self.biases, self.norms):
            out += [W, b]
            if bn is not None:
                out += [bn.gamma, bn.beta]
        return out

    def copy(self) -> "DenseNet":
        net = DenseNet.__new__(DenseNet)
        net.weights = [W.copy() for W in self.weights]
        net.biases = [b.copy() for b in self.biases]
        net.activations = list(self.activations)
        net.norms = [
            None if bn is None else BatchNorm(bn.gamma.copy(), bn.beta.copy(),
                                              bn.running_mean.copy(), bn.running_var.copy(),
                                              bn.momentum)
            for bn in self.norms
        ]
        net._bind_flat()
        return net

    def _validate_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.in_features:
            raise ShapeError(f"expected batch of width {self.in_features}, got {X.shape}")
        if X.shape[0] < 1:
            raise ShapeError("empty batch")
        if not np.all(np.isfinite(X)):
            raise InputError("non-finite input")
        return X

    def forward(self, X, mode: str = "infer", update_stats: bool = True, _cache: list | None = None):
        """Run the net on a ``[B, in]`` batch.

        ``mode="train"`` normalizes with batch statistics (and updates the
        running averages unless ``update_stats`` is False); ``"infer"`` uses
        running statistics only.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        h = self._validate_input(X)
        for W, b, act, bn in zip(self.weights, self.biases, self.activations, self.norms):
            a = h @ W.T + b
            bn_cache = None
            if bn is not None:
                if mode == "train":
                    mu = a.mean(axis=0)
                    var = a.var(axis=0)
                    if update_stats:
                        bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
                        bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var
                else:
                    mu, var = bn.running_mean, bn.running_var
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                a_hat = (a - mu) * inv_std
                bn_cache = (a_hat, inv_std, mode == "train")
                a = bn.gamma * a_hat + bn.beta
            out = np.maximum(a, 0.0) if act == "relu" else a
            if _cache is not None:
                _cache.append((h, a, bn_cache))
            h = out
        return h

    def backward(self, cache: list, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(dout * output)`` w.r.t. :meth:`parameters`."""
        grads: list[np.ndarray] = []
        delta = dout
        for k in range(len(self.weights) - 1, -1, -1):
            h, a, bn_cache = cache[k]
            if self.activations[k] == "relu":
                delta = delta * (a > 0)
            bn = self.norms[k]
            layer_grads = []
            if bn is not None:
                a_hat, inv_std, batch_stats = bn_cache
                layer_grads = [(delta * a_hat).sum(axis=0), delta.sum(axis=0)]
                d_hat = delta * bn.gamma
                if batch_stats:
                    n = d_hat.shape[0]
                    delta = (inv_std / n) * (
                        n * d_hat - d_hat.sum(axis=0) - a_hat * (d_hat * a_hat).sum(axis=0)
                    )
                else:
                    delta = d_hat * inv_std
            gW = delta.T @ h
            gb = delta.sum(axis=0)
            grads = [gW, gb] + layer_grads + grads
            if k:
                delta = delta @ self.weights[k]
        return grads

    def grad(self, X, loss_closure: Callable, mode: str = "train", update_stats: bool = True,
             flat: bool = False):
        """Evaluate a loss and its parameter gradients.

        ``loss_closure(output)`` must return ``(loss, d_loss/d_output)``.
        Returns ``(loss, grads)`` with grads aligned to :meth:`parameters`,
        or a single vector aligned to :attr:`flat` when ``flat`` is set.
        """
        cache: list = []
        out = self.forward(X, mode=mode, update_stats=update_stats, _cache=cache)
        loss, dout = loss_closure(out)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss}")
        grads = self.backward(cache, np.asarray(dout, dtype=np.float64))
        if flat:
            return float(loss), np.concatenate([g.ravel() for g in grads])
        return float(loss), grads

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        tensors = {}
        for k, (W, b, bn) in enumerate(zip(self.weights, self.biases, self.norms)):
            tensors[f"W{k}"] = W
            tensors[f"b{k}"] = b
            if bn is not None:
                for name in ("gamma", "beta", "running_mean", "running_var"):
                    tensors[f"bn{k}.{name}"] = getattr(bn, name)
        return {
            "activations": self.activations,
            "batchnorm": [bn is not None for bn in self.norms],
            "tensors": tensors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        t = d["tensors"]
        n = len(d["activations"])
        layers = [(t[f"W{k}"], t[f"b{k}"]) for k in range(n)]
        norms = []
        for k, has_bn in enumerate(d["batchnorm"]):
            if has_bn:
                norms.append(BatchNorm(*(np.asarray(t[f"bn{k}.{name}"], dtype=np.float64)
                                         for name in ("gamma", "beta", "running_mean", "running_var"))))
            else:
                norms.append(None)
        return cls.from_layers(layers, d["activations"], norms)


def write_snapshot(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Text snapshot: a JSON header line, then one ``name shape values...`` line per tensor.

    Values are written with ``repr`` so a reload is bit-exact.
    """
    lines = [json.dumps(header, sort_keys=True)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} " + " ".join(repr(float(v)) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path) -> tuple[dict, dict[str, np.ndarray]]:
    text = Path(path).read_text().splitlines()
    header = json.loads(text[0])
    tensors = {}
    for line in text[1:]:
        if not line.strip():
            continue
        name, shape, *vals = line.split(" ")
        dims = tuple(int(s) for s in shape.split("x")) if shape else ()
        tensors[name] = np.array([float(v) for v in vals], dtype=np.float64).reshape(dims)
    return header, tensors


def save_net(net: DenseNet, path, extra: dict | None = None) -> None:
    d = net.to_dict()
    header = {"kind": "densenet", "activations": d["activations"], "batchnorm": d["batchnorm"]}
    if extra:
        header.update(extra)
    write_snapshot(path, header, d["tensors"])


def load_net(path) -> tuple[DenseNet, dict]:
    header, tensors = read_snapshot(path)
    if header.get("kind") != "densenet":
        raise InputError(f"{path} is not a densenet snapshot")
    net = DenseNet.from_dict({"activations": header["activations"],
                              "batchnorm": header["batchnorm"], "tensors": tensors})
    return net, header


@dataclass
class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ShapeError("one gradient per parameter required")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        for p, g, m in zip(params, grads, self.m):
            if p.shape != g.shape or m.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None,
                          normalizer: float | None = None):
    """Weighted mean cross-entropy and its gradient w.r.t. the logits.

    The sum of per-sample losses (times ``weights``) is divided by
    ``normalizer``, defaulting to the batch size.
    """
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.ones(n) if weights is None else weights
    denom = float(n if normalizer is None else normalizer)
    loss = -(w * logp[np.arange(n), y]).sum() / denom
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return loss, d * (w / denom)[:, None]
