"""Logistic regression and one-hidden-layer networks over binary features.

Parameters live in a single flat float64 vector (:class:`ParamVector`) so
that optimizers, clipping and federated averaging can treat every model
kind the same way. The layout is carried alongside the values and is the
contract for whether two vectors may be combined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

KINDS = ("logistic", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_dim: Optional[int] = None
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if self.kind == "mlp":
            if self.hidden_dim is None or int(self.hidden_dim) < 1:
                raise ValueError("mlp requires a positive hidden_dim")
            if self.activation != "relu":
                raise ValueError(f"unsupported activation {self.activation!r}")
        elif self.hidden_dim is not None:
            raise ValueError("hidden_dim is only valid for kind='mlp'")

    @property
    def layout(self) -> tuple:
        d = self.input_dim
        if self.kind == "logistic":
            return (("w", (d,)), ("b", ()))
        h = self.hidden_dim
        return (("W1", (d, h)), ("b1", (h,)), ("W2", (h,)), ("b2", ()))

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout)

    def label(self) -> str:
        return "logistic" if self.kind == "logistic" else f"mlp{self.hidden_dim}"


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter values plus the ``(name, shape)`` block layout."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        layout = tuple((str(name), tuple(shape)) for name, shape in self.layout)
        object.__setattr__(self, "layout", layout)
        expected = sum(int(np.prod(shape)) for _, shape in layout)
        if values.size != expected:
            raise ValueError(
                f"ParamVector has {values.size} values but layout needs {expected}"
            )

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None

    def blocks(self) -> dict:
        out, start = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[start:start + size].reshape(shape)
            start += size
        return out

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls(np.zeros_like(other.values), other.layout)


def check_same_layout(*vectors: ParamVector) -> None:
    first = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != first:
            raise ValueError(f"parameter layout mismatch: {first} vs {v.layout}")


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Deterministic initial parameters.

    Logistic weights start at zero. Network weight blocks are uniform on
    ``±sqrt(6 / (fan_in + fan_out))``; biases are always zero.
    """
    if spec.kind == "logistic":
        return ParamVector(np.zeros(spec.n_params), spec.layout)
    rng = np.random.default_rng(seed)
    d, h = spec.input_dim, spec.hidden_dim
    bound1 = np.sqrt(6.0 / (d + h))
    bound2 = np.sqrt(6.0 / (h + 1))
    W1 = rng.uniform(-bound1, bound1, size=(d, h))
    W2 = rng.uniform(-bound2, bound2, size=h)
    values = np.concatenate([W1.ravel(), np.zeros(h), W2, [0.0]])
    return ParamVector(values, spec.layout)


def _check(spec: ModelSpec, params: ParamVector, features) -> np.ndarray:
    if params.layout != spec.layout:
        raise ValueError(f"params layout {params.layout} does not match spec {spec.layout}")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(
            f"expected features of shape (n, {spec.input_dim}), got {X.shape}"
        )
    return X


def logits(spec: ModelSpec, params: ParamVector, features) -> np.ndarray:
    X = _check(spec, params, features)
    p = params.blocks()
    if spec.kind == "logistic":
        return X @ p["w"] + p["b"]
    hidden = np.maximum(X @ p["W1"] + p["b1"], 0.0)
    return hidden @ p["W2"] + p["b2"]


def forward(spec: ModelSpec, params: ParamVector, features) -> np.ndarray:
    """Predicted probability of the positive class for each record."""
    return expit(logits(spec, params, features))


def loss(probabilities, labels) -> float:
    """Mean binary cross-entropy of probabilities strictly inside (0, 1)."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def loss_from_logits(z, labels) -> float:
    """Same quantity as :func:`loss`, evaluated stably from logits."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    # -[y log s(z) + (1-y) log(1-s(z))] = log(1+e^z) - y z
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _batch(spec: ModelSpec, params: ParamVector, features, labels):
    X = _check(spec, params, features)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    if X.shape[0] < 1:
        raise ValueError("batch must contain at least one record")
    return X, y


def per_example_grad_matrix(spec: ModelSpec, params: ParamVector, features, labels) -> np.ndarray:
    """Row ``i`` is the flattened gradient of record ``i``'s loss, shape ``(B, P)``."""
    X, y = _batch(spec, params, features, labels)
    p = params.blocks()
    B = X.shape[0]
    if spec.kind == "logistic":
        err = expit(X @ p["w"] + p["b"]) - y
        return np.hstack([X * err[:, None], err[:, None]])
    pre = X @ p["W1"] + p["b1"]
    hidden = np.maximum(pre, 0.0)
    err = expit(hidden @ p["W2"] + p["b2"]) - y
    d_hidden = err[:, None] * p["W2"][None, :] * (pre > 0)
    dW1 = np.einsum("bi,bj->bij", X, d_hidden).reshape(B, -1)
    return np.hstack([dW1, d_hidden, hidden * err[:, None], err[:, None]])


def per_example_grads(spec: ModelSpec, params: ParamVector, features, labels) -> list:
    G = per_example_grad_matrix(spec, params, features, labels)
    return [ParamVector(row, params.layout) for row in G]


def grad(spec: ModelSpec, params: ParamVector, features, labels) -> ParamVector:
    """Exact gradient of the mean loss over the batch."""
    X, y = _batch(spec, params, features, labels)
    p = params.blocks()
    B = X.shape[0]
    if spec.kind == "logistic":
        err = expit(X @ p["w"] + p["b"]) - y
        values = np.concatenate([X.T @ err / B, [err.mean()]])
        return ParamVector(values, params.layout)
    pre = X @ p["W1"] + p["b1"]
    hidden = np.maximum(pre, 0.0)
    err = expit(hidden @ p["W2"] + p["b2"]) - y
    d_hidden = err[:, None] * p["W2"][None, :] * (pre > 0)
    values = np.concatenate([
        (X.T @ d_hidden / B).ravel(),
        d_hidden.mean(axis=0),
        hidden.T @ err / B,
        [err.mean()],
    ])
    return ParamVector(values, params.layout)


def stack(vectors: Sequence[ParamVector]) -> np.ndarray:
    check_same_layout(*vectors)
    return np.vstack([v.values for v in vectors])
