"""Independent reference computations used by the tests.

Nothing here calls the recursion, the closed-form compensators or the
gradient code under test.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad

from sshp.model import PairParameters


def rate_direct(t: float, pr: PairParameters, history) -> float:
    """Intensity written out term by term from the model definition."""
    comp = pr.components
    lam = 0.0
    if comp.habit:
        lam += pr.gamma_h * (math.sin(2 * math.pi * (t + pr.p) / pr.s) + pr.c)
    if comp.opening:
        lam += pr.gamma_o * pr.b ** (t / pr.s)
    if comp.deadline:
        w = pr.d - pr.m - t / pr.s
        if w > 1e-8:
            lam += pr.gamma_d * math.exp(-math.log(w) ** 2 / pr.v) / (math.sqrt(2 * math.pi * pr.v) * w)
    if comp.excitation:
        h = np.asarray(history, dtype=float)
        h = h[h < t]
        lam += float(np.sum(pr.alpha * pr.beta * np.exp(-pr.beta * (t - h))))
    return lam


def loglik_direct(x, T: float, pr: PairParameters) -> float:
    """Sum of log rates at the events minus the quadrature of the intensity over [0, T]."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for k, t in enumerate(x):
        total += math.log(max(rate_direct(t, pr, x[:k]), 1e-10))
    return total - integral_quad(x, 0.0, T, pr)


def integral_quad(x, a: float, T: float, pr: PairParameters) -> float:
    """Adaptive quadrature of the intensity over [a, T].

    Segments are cut at every event and at the end of deadline support; the
    segment that runs into the deadline cusp is integrated in y = log(distance)
    so the narrow peak is resolved.
    """
    x = np.asarray(x, dtype=float)
    end_support = (pr.d - pr.m) * pr.s
    cuts = sorted({a, T, *[t for t in x if a < t < T]} | ({end_support} if a < end_support < T else set()))
    total = 0.0
    D = pr.d - pr.m
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        hist = x[x <= lo]
        f = lambda t: rate_direct(t, pr, hist)  # noqa: E731
        if pr.components.deadline and hi <= end_support:
            # t = s (D - e^y); the sliver within 1e-8 of the support end has no deadline mass
            y_hi = math.log(D - lo / pr.s)
            y_lo = math.log(max(D - hi / pr.s, 1e-8))
            g = lambda y: f(pr.s * (D - math.exp(y))) * pr.s * math.exp(y)  # noqa: E731
            mid = -pr.v / 2.0
            pts = [q for q in (mid - 3 * math.sqrt(pr.v), mid, mid + 3 * math.sqrt(pr.v)) if y_lo < q < y_hi]
            val, _ = quad(g, y_lo, y_hi, points=pts or None, limit=400, epsabs=1e-11, epsrel=1e-11)
            if hi - lo > pr.s * 1e-8 and D - hi / pr.s < 1e-8:
                val += quad(f, hi - pr.s * 1e-8, hi, epsabs=1e-14)[0]
        else:
            val, _ = quad(f, lo, hi, limit=400, epsabs=1e-11, epsrel=1e-11)
        total += val
    return total


def excitation_sum_direct(x, beta: float) -> np.ndarray:
    """R(k) = sum_{j<k} exp(-beta (x_k - x_j)), summed pairwise."""
    x = np.asarray(x, dtype=float)
    return np.array([sum(math.exp(-beta * (x[k] - x[j])) for j in range(k)) for k in range(x.size)])


def random_pair(rng: np.random.Generator, *, s: float = 1.0, d: float = 80.0) -> PairParameters:
    """A constrained parameter draw around the synthetic generating ranges."""
    return PairParameters(
        alpha=rng.uniform(0.0, 0.8),
        beta=rng.choice([1.0, 6.0, 12.0]) if s != 1.0 else 1.0,
        s=s,
        p=rng.normal(6, 4),
        c=rng.uniform(1.0, 1.5),
        b=rng.uniform(0.05, 0.95),
        v=rng.uniform(1.0, 40.0),
        m=rng.normal(0, 5),
        gamma_h=rng.uniform(0.0, 1.0),
        gamma_o=rng.uniform(0.0, 8.0),
        gamma_d=rng.uniform(5.0, 20.0),
        d=d,
    )


def base_integral_closed(T: float, pr: PairParameters) -> float:
    """Weighted base-rate integral over [0, T] from hand-derived antiderivatives.

    The deadline part integrates the guarded rate, which is zero within 1e-8
    of the end of support, so its lower erf limit is taken there.
    """
    comp = pr.components
    total = 0.0
    if comp.habit:
        k = 2 * math.pi / pr.s
        total += pr.gamma_h * (pr.c * T - (math.cos(k * (T + pr.p)) - math.cos(k * pr.p)) / k)
    if comp.opening:
        total += pr.gamma_o * pr.s * (pr.b ** (T / pr.s) - 1.0) / math.log(pr.b)
    if comp.deadline:
        D = pr.d - pr.m
        if D > 1e-8:
            w_end = max(D - T / pr.s, 1e-8)
            rv = math.sqrt(pr.v)
            total += pr.gamma_d * pr.s / (2 * math.sqrt(2)) * (math.erf(math.log(D) / rv) - math.erf(math.log(w_end) / rv))
    return total


def loglik_pairwise(x, T: float, pr: PairParameters) -> float:
    """O(K^2) log-likelihood with every excitation term summed pairwise."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for k, t in enumerate(x):
        total += math.log(max(rate_direct(t, pr, x[:k]), 1e-10))
    total -= base_integral_closed(T, pr)
    if pr.components.excitation:
        total -= pr.alpha * sum(1.0 - math.exp(-pr.beta * (T - t)) for t in x)
    return total
