"""Adam and SGD updates, per-record clipping and noisy aggregation for DP-SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .models import ParamVector, check_same_layout


@dataclass(frozen=True)
class DpConfig:
    """DP-SGD settings for one training run.

    ``noise_multiplier`` is the ratio of the Gaussian noise standard deviation
    to ``clip_norm``. ``sampling_ratio`` is the Poisson inclusion probability
    of each record; ``None`` means "derive it from batch size and data size".
    """

    clip_norm: float
    noise_multiplier: float
    sampling_ratio: float | None = None
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise_multiplier must be nonnegative, got {self.noise_multiplier}")
        if self.sampling_ratio is not None and not 0 < self.sampling_ratio <= 1:
            raise ValueError(f"sampling_ratio must lie in (0, 1], got {self.sampling_ratio}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class AdamState:
    m: ParamVector
    v: ParamVector
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, like: ParamVector, lr: float) -> "AdamState":
        zeros = ParamVector.zeros_like(like)
        return cls(m=zeros, v=zeros, t=0, lr=lr)


def clip_to_norm(g: ParamVector, clip_norm: float) -> ParamVector:
    """Scale ``g`` down to L2 norm ``clip_norm``; shorter vectors pass through."""
    if not clip_norm > 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    norm = float(np.linalg.norm(g.values))
    if norm <= clip_norm:
        return g
    return g.replace(g.values * (clip_norm / norm))


def clip_rows(G: np.ndarray, clip_norm: float) -> np.ndarray:
    """Row-wise :func:`clip_to_norm` on a ``(B, P)`` gradient matrix."""
    norms = np.linalg.norm(G, axis=1)
    over = norms > clip_norm
    out = G.copy()
    out[over] *= (clip_norm / norms[over])[:, None]
    return out


def dp_aggregate(
    grads: Union[Sequence[ParamVector], np.ndarray],
    clip_norm: float,
    noise_multiplier: float,
    expected_batch: float,
    rng: np.random.Generator,
    layout: tuple | None = None,
) -> ParamVector:
    """Clip each record gradient, sum, add N(0, (z*S)^2) noise, divide by ``expected_batch``.

    ``grads`` is either a sequence of ParamVectors or a ``(B, P)`` matrix of
    per-record gradients (then ``layout`` is required).
    """
    if not expected_batch > 0:
        raise ValueError(f"expected_batch must be positive, got {expected_batch}")
    if isinstance(grads, np.ndarray):
        if layout is None:
            raise ValueError("layout is required when passing a gradient matrix")
        G = np.atleast_2d(grads)
    else:
        if len(grads) == 0:
            raise ValueError("dp_aggregate needs at least one gradient")
        check_same_layout(*grads)
        layout = grads[0].layout
        G = np.vstack([g.values for g in grads])
    total = clip_rows(G, clip_norm).sum(axis=0)
    if noise_multiplier > 0:
        total = total + rng.normal(0.0, noise_multiplier * clip_norm, size=total.shape)
    return ParamVector(total / expected_batch, layout)


def adam_step(state: AdamState, params: ParamVector, g: ParamVector):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    check_same_layout(params, g, state.m, state.v)
    t = state.t + 1
    m = state.beta1 * state.m.values + (1.0 - state.beta1) * g.values
    v = state.beta2 * state.v.values + (1.0 - state.beta2) * g.values ** 2
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        m=params.replace(m), v=params.replace(v), t=t, lr=state.lr,
        beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return params.replace(new), new_state


def sgd_step(params: ParamVector, g: ParamVector, lr: float) -> ParamVector:
    check_same_layout(params, g)
    return params.replace(params.values - lr * g.values)


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    """Optimizer steps that make up one pass: ``ceil(N / batch)``, i.e. ``ceil(1/q)``."""
    if n_records < 1:
        raise ValueError("training partition is empty")
    return math.ceil(n_records / batch_size)


def sampling_ratio(n_records: int, batch_size: int) -> float:
    if n_records < 1:
        raise ValueError("training partition is empty")
    return min(1.0, batch_size / n_records)
