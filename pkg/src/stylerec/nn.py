"""Small differentiable building blocks with hand-written backward passes.

Every layer exposes ``forward(...) -> (out, cache)`` and
``backward(cache, dout) -> input gradient(s)``. Forward never mutates
state; backward only adds into ``Parameter.grad``; ``adagrad_step`` is the
sole place parameter values change.
"""

from __future__ import annotations

import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Parameter:
    """Values plus the gradient accumulator and Adagrad state, all one shape."""

    def __init__(self, name: str, values: np.ndarray, initial_accumulator: float = 0.1):
        self.name = name
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.state = np.full_like(self.values, initial_accumulator)

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Embedding:
    """Lookup table; rows are combined by per-index weights."""

    def __init__(self, name: str, rows: int, dim: int, rng: np.random.Generator, std: float = 0.05):
        self.table = Parameter(f"{name}.table", rng.normal(0.0, std, size=(rows, dim)))

    @property
    def parameters(self):
        return [self.table]

    def forward(self, indices: np.ndarray, weights: np.ndarray):
        """``indices``/``weights`` are ``[B, L]``; returns ``[B, dim]``."""
        rows = self.table.shape[0]
        if indices.size and (indices.min() < 0 or indices.max() >= rows):
            bad = indices[(indices < 0) | (indices >= rows)][0]
            raise IndexError(f"{self.table.name}: index {bad} out of range [0, {rows})")
        out = np.einsum("bl,bld->bd", weights, self.table.values[indices])
        return out, (indices, weights)

    def backward(self, cache, dout: np.ndarray) -> None:
        indices, weights = cache
        np.add.at(self.table.grad, indices.ravel(),
                  (weights[..., None] * dout[:, None, :]).reshape(-1, dout.shape[1]))

    def forward_dense(self, x: np.ndarray):
        """Weighted sum of all rows with a dense ``[B, rows]`` weight matrix."""
        if x.shape[1] != self.table.shape[0]:
            raise ShapeError(f"{self.table.name}: expected {self.table.shape[0]} slots, got {x.shape[1]}")
        return x @ self.table.values, x

    def backward_dense(self, cache, dout: np.ndarray) -> None:
        self.table.grad += cache.T @ dout


class Dense:
    """``activation(x W^T + b)`` with ``W`` stored as ``[out, in]``."""

    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator, activation: str = "relu"):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.W = Parameter(f"{name}.W", _uniform(rng, (n_out, n_in), n_in))
        self.b = Parameter(f"{name}.b", _uniform(rng, (n_out,), n_in))
        self.activation = activation

    @property
    def parameters(self):
        return [self.W, self.b]

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"{self.W.name}: expected input width {self.n_in}, got {x.shape[-1]}")
        z = x @ self.W.values.T + self.b.values
        out = np.maximum(z, 0.0) if self.activation == "relu" else z
        return out, (x, z)

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        x, z = cache
        dz = dout * (z > 0) if self.activation == "relu" else dout
        self.W.grad += dz.T @ x
        self.b.grad += dz.sum(axis=0)
        return dz @ self.W.values


class CrossLayer:
    """Low-rank cross layer: ``x0 * (U (V^T x) + b) + x``.

    Rank defaults to ``ceil(d / 4)``.
    """

    def __init__(self, name: str, dim: int, rng: np.random.Generator, rank: int | None = None):
        r = rank if rank is not None else max(1, math.ceil(dim / 4))
        if r < 1:
            raise ValueError("cross layer rank must be >= 1")
        self.U = Parameter(f"{name}.U", _uniform(rng, (dim, r), r))
        self.V = Parameter(f"{name}.V", _uniform(rng, (dim, r), dim))
        self.b = Parameter(f"{name}.b", _uniform(rng, (dim,), dim))

    @property
    def parameters(self):
        return [self.U, self.V, self.b]

    @property
    def dim(self):
        return self.U.shape[0]

    @property
    def rank(self):
        return self.U.shape[1]

    def forward(self, x0: np.ndarray, x: np.ndarray):
        d = self.dim
        if x0.shape[-1] != d or x.shape[-1] != d:
            raise ShapeError(f"{self.U.name}: expected width {d}, got {x0.shape[-1]} and {x.shape[-1]}")
        h = x @ self.V.values
        g = h @ self.U.values.T + self.b.values
        return x0 * g + x, (x0, x, h, g)

    def backward(self, cache, dout: np.ndarray):
        """Returns ``(d x0, d x)``."""
        x0, x, h, g = cache
        dg = dout * x0
        self.b.grad += dg.sum(axis=0)
        self.U.grad += dg.T @ h
        dh = dg @ self.U.values
        self.V.grad += x.T @ dh
        dx = dout + dh @ self.V.values.T
        return dout * g, dx


# ----------------------------------------------------- functional forms

def embedding_lookup(table: np.ndarray, indices, weights=None) -> np.ndarray:
    """Weighted sum of ``table`` rows for one example."""
    indices = np.asarray(indices, dtype=np.int64)
    weights = np.ones(len(indices)) if weights is None else np.asarray(weights, dtype=np.float64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    return weights @ table[indices]


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, activation: str = "relu") -> np.ndarray:
    if W.ndim != 2 or W.shape[1] != x.shape[-1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense shapes disagree: W{W.shape}, b{b.shape}, x{x.shape}")
    z = W @ x + b
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def cross_forward(layer: CrossLayer, x0: np.ndarray, x: np.ndarray) -> np.ndarray:
    out, _ = layer.forward(np.atleast_2d(x0), np.atleast_2d(x))
    return out.reshape(np.shape(x))


def adagrad_step(params: Iterable[Parameter], learning_rate: float, epsilon: float = 1e-7) -> None:
    """One Adagrad update; clears gradients afterwards.

    All gradients are checked before any value changes, so a non-finite
    gradient leaves every parameter untouched.
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be > 0")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {p.name}")
    for p in params:
        p.state += p.grad * p.grad
        p.values -= learning_rate * p.grad / (np.sqrt(p.state) + epsilon)
        p.zero_grad()


# ----------------------------------------------------------- checkpoints

def save_parameters(path, params: Iterable[Parameter], meta: Mapping | None = None) -> None:
    """Write named tensors plus a versioned JSON header into one ``.npz`` file.

    Adagrad state is stored too, so training can resume exactly.
    """
    params = list(params)
    header = {
        "version": CHECKPOINT_VERSION,
        "tensors": {p.name: list(p.shape) for p in params},
        **(meta or {}),
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for p in params:
        arrays[f"values/{p.name}"] = p.values
        arrays[f"state/{p.name}"] = p.state
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        values = {k[len("values/"):]: z[k] for k in z.files if k.startswith("values/")}
        state = {k[len("state/"):]: z[k] for k in z.files if k.startswith("state/")}
    return header, values, state


def load_parameters(path, params: Iterable[Parameter]) -> dict:
    """Fill ``params`` in place from ``path``; returns the header."""
    header, values, state = read_checkpoint(path)
    for p in params:
        if p.name not in values:
            raise KeyError(f"checkpoint lacks tensor {p.name}")
        if values[p.name].shape != p.shape:
            raise ShapeError(f"{p.name}: checkpoint shape {values[p.name].shape} != {p.shape}")
        p.values[...] = values[p.name]
        p.state[...] = state[p.name]
        p.zero_grad()
    return header
