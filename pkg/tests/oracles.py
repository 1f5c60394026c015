"""Independent reference computations used by the test-suite.

None of these share code with the package paths they check.
"""

import itertools
import math

import numpy as np
from scipy import integrate


def rdp_by_quadrature(q, z, alpha):
    """Renyi divergence of order ``alpha`` of the Poisson-subsampled Gaussian.

    Integrates E_{x~N(0, z^2)}[((1-q) + q * mu1(x)/mu0(x))^alpha] numerically,
    with mu0 = N(0, z^2) and mu1 = N(1, z^2), then returns log(A) / (alpha-1).
    """
    var = z * z

    def log_f(x):
        log_ratio = (2.0 * x - 1.0) / (2.0 * var)
        log_mix = np.logaddexp(math.log1p(-q), math.log(q) + log_ratio)
        return -x * x / (2.0 * var) - 0.5 * math.log(2.0 * math.pi * var) + alpha * log_mix

    lo, hi = -40.0 * z, alpha + 40.0 * z
    grid = np.linspace(lo, hi, 20001)
    shift = float(np.max(log_f(grid)))
    value, _ = integrate.quad(
        lambda x: math.exp(log_f(x) - shift), lo, hi,
        points=[0.0, 1.0, float(alpha)], limit=2000, epsabs=0.0, epsrel=1e-12,
    )
    return (shift + math.log(value)) / (alpha - 1)


def eps_by_grid(alpha_to_eps, delta):
    """Brute-force ``min_a eps(a) + log(1/delta)/(a-1)`` over a dict of orders."""
    best = min(
        (eps + math.log(1.0 / delta) / (a - 1), a) for a, eps in sorted(alpha_to_eps.items())
    )
    return best


def auc_by_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def delong_by_loops(scores, labels):
    """AUC and DeLong variance from explicitly looped placement values."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]

    def psi(a, b):
        return 1.0 if a > b else (0.5 if a == b else 0.0)

    v10 = [sum(psi(p, n) for n in neg) / len(neg) for p in pos]
    v01 = [sum(psi(p, n) for p in pos) / len(pos) for n in neg]

    def sample_var(v):
        m = sum(v) / len(v)
        return sum((x - m) ** 2 for x in v) / (len(v) - 1)

    auc = sum(v10) / len(v10)
    return auc, sample_var(v10) / len(pos) + sample_var(v01) / len(neg), v10, v01


def finite_difference_grad(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g
