"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Per-step RDP is evaluated at integer orders with the exact binomial
expansion, composed additively over steps and converted to (epsilon, delta)
with the standard ``eps(a) + log(1/delta) / (a - 1)`` bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.special import logsumexp

DEFAULT_ORDERS = tuple(range(2, 65))


def _check_order(alpha) -> int:
    if isinstance(alpha, bool) or not float(alpha).is_integer() or alpha < 2:
        raise ValueError(f"Renyi order must be an integer >= 2, got {alpha!r}")
    return int(alpha)


def rdp_step(q: float, z: float, alpha: int) -> float:
    """RDP of one subsampled Gaussian step at integer order ``alpha``.

    ``q`` is the Poisson sampling ratio and ``z`` the noise multiplier.
    """
    alpha = _check_order(alpha)
    if not 0 <= q <= 1:
        raise ValueError(f"sampling ratio must lie in [0, 1], got {q}")
    if not z > 0:
        raise ValueError(f"noise multiplier must be positive, got {z}")
    if q == 0:
        return 0.0
    if q == 1:
        return alpha / (2.0 * z * z)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = (
        math.lgamma(alpha + 1)
        - np.array([math.lgamma(i + 1) for i in range(alpha + 1)])
        - np.array([math.lgamma(alpha - i + 1) for i in range(alpha + 1)])
    )
    terms = (
        log_binom
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + k * (k - 1) / (2.0 * z * z)
    )
    # log A is >= 0 analytically; tiny negative values are rounding.
    return max(float(logsumexp(terms)), 0.0) / (alpha - 1)


@dataclass(frozen=True)
class RdpCurve:
    """Accumulated RDP epsilon per integer order."""

    orders: tuple
    epsilons: tuple

    def __post_init__(self):
        orders = tuple(_check_order(a) for a in self.orders)
        eps = tuple(float(e) for e in self.epsilons)
        if not orders:
            raise ValueError("RdpCurve needs at least one order")
        if len(orders) != len(eps):
            raise ValueError("orders and epsilons differ in length")
        if len(set(orders)) != len(orders) or list(orders) != sorted(orders):
            raise ValueError("orders must be distinct and ascending")
        if any(e < 0 for e in eps):
            raise ValueError("RDP epsilons must be nonnegative")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "epsilons", eps)

    @classmethod
    def zeros(cls, orders: Iterable[int] = DEFAULT_ORDERS) -> "RdpCurve":
        orders = tuple(orders)
        return cls(orders, (0.0,) * len(orders))

    def as_dict(self) -> dict:
        return dict(zip(self.orders, self.epsilons))

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise ValueError("cannot add RDP curves over different orders")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.epsilons, other.epsilons)))


def step_curve(q: float, z: float, orders: Iterable[int] = DEFAULT_ORDERS) -> RdpCurve:
    orders = tuple(orders)
    return RdpCurve(orders, tuple(rdp_step(q, z, a) for a in orders))


def compose(curve: RdpCurve, steps: int) -> RdpCurve:
    if steps < 0:
        raise ValueError(f"step count must be nonnegative, got {steps}")
    return RdpCurve(curve.orders, tuple(steps * e for e in curve.epsilons))


def to_eps_delta(curve: RdpCurve, delta: float) -> tuple:
    """Return ``(epsilon, best_order)``; ties go to the smallest order."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    log_inv_delta = math.log(1.0 / delta)
    best_eps, best_order = math.inf, None
    for alpha, eps in zip(curve.orders, curve.epsilons):
        candidate = eps + log_inv_delta / (alpha - 1)
        if candidate < best_eps:
            best_eps, best_order = candidate, alpha
    return best_eps, best_order


@dataclass(frozen=True)
class AccountantParams:
    q: float
    z: float
    steps: int
    delta: float = 1e-5
    orders: tuple = DEFAULT_ORDERS

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if not self.z > 0:
            raise ValueError(f"z must be positive, got {self.z}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a nonnegative integer, got {self.steps}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "orders", tuple(_check_order(a) for a in self.orders))


@dataclass
class PrivacyLedger:
    """Running RDP budget of one site; ``epsilon`` is always the resolved value at ``delta``."""

    site_id: str
    q: float
    z: float
    delta: float = 1e-5
    orders: tuple = DEFAULT_ORDERS
    steps: int = 0
    curve: RdpCurve = field(init=False)
    epsilon: float = field(init=False)
    best_order: int = field(init=False)

    def __post_init__(self):
        AccountantParams(self.q, self.z, self.steps, self.delta, self.orders)
        self._per_step = step_curve(self.q, self.z, self.orders)
        self._resolve()

    def _resolve(self):
        self.curve = compose(self._per_step, self.steps)
        self.epsilon, self.best_order = to_eps_delta(self.curve, self.delta)

    def record(self, steps: int) -> float:
        if steps < 0:
            raise ValueError("cannot refund privacy budget")
        self.steps += int(steps)
        self._resolve()
        return self.epsilon

    @property
    def params(self) -> AccountantParams:
        return AccountantParams(self.q, self.z, self.steps, self.delta, self.orders)


def epsilon_for_training(params: AccountantParams, site_id: str = "") -> PrivacyLedger:
    """Resolve (epsilon, delta) for ``params.steps`` subsampled Gaussian steps."""
    ledger = PrivacyLedger(site_id, params.q, params.z, params.delta, params.orders)
    ledger.record(params.steps)
    return ledger


def epsilon(q: float, z: float, steps: int, delta: float = 1e-5,
            orders: Iterable[int] = DEFAULT_ORDERS) -> float:
    return epsilon_for_training(AccountantParams(q, z, steps, delta, tuple(orders))).epsilon


def curve_from_mapping(mapping: Mapping[int, float]) -> RdpCurve:
    orders = sorted(mapping)
    return RdpCurve(tuple(orders), tuple(mapping[a] for a in orders))
