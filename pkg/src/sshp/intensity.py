"""Intensity components, compensators, log-likelihood and its analytic gradient.

The low-level kernels take numpy arrays for both times and parameters and
broadcast, so the same code evaluates one pair or a whole course at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .model import Components, EventSequence, PairParameters

TWO_PI = 2.0 * np.pi
W_GUARD = 1e-8
LOG_FLOOR = 1e-10
B_SERIES = 1e-6
ERF_SCALE = 2.0 ** -1.5


# --------------------------------------------------------------------------
# kernels (unweighted)


def habit_kernel(t, s, p, c):
    return np.sin(TWO_PI * (t + p) / s) + c


def opening_kernel(t, s, b):
    return np.power(b, t / s)


def deadline_kernel(t, s, d, m, v):
    """Reversed log-normal bump that vanishes once t/s passes d - m."""
    t, s, d, m, v = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (t, s, d, m, v)))
    w = d - m - t / s
    out = np.zeros(w.shape)
    live = w >= W_GUARD
    wl, vl = w[live], v[live]
    lw = np.log(wl)
    out[live] = np.exp(-lw * lw / vl) / (np.sqrt(TWO_PI * vl) * wl)
    return out if out.ndim else float(out)


def habit_cumulative(t, s, p, c):
    return c * t - (s / TWO_PI) * (np.cos(TWO_PI * (t + p) / s) - np.cos(TWO_PI * p / s))


def opening_cumulative(t, s, b):
    lb = np.log(b)
    u = t / s
    small = np.abs(lb) < B_SERIES
    safe = np.where(small, -1.0, lb)
    exact = s * np.expm1(u * safe) / safe
    series = s * (u + u * u * lb / 2.0 + u ** 3 * lb * lb / 6.0)
    return np.where(small, series, exact)


def _deadline_erf_args(t, s, d, m, v):
    # distance clamped at the rate guard so the compensator integrates exactly
    # the guarded rate; the clamped tail is erfc(18.4 / sqrt(v)) of the mass
    D = d - m
    rv = np.sqrt(v)
    w = D - t / s
    saturated = w < W_GUARD
    z_open = np.log(np.maximum(D, W_GUARD)) / rv
    z_now = np.log(np.maximum(w, W_GUARD)) / rv
    return D, w, rv, saturated, z_open, z_now


def deadline_cumulative(t, s, d, m, v):
    D, w, rv, saturated, z_open, z_now = _deadline_erf_args(t, s, d, m, v)
    out = s * ERF_SCALE * (erf(z_open) - erf(z_now))
    return np.where(D > W_GUARD, out, 0.0)


def deadline_mode(v):
    """Distance to the end of support (in t/s units) where the kernel peaks."""
    return np.exp(-np.asarray(v) / 2.0)


# --------------------------------------------------------------------------
# per-pair API


def habit_rate(t, pair: PairParameters):
    return habit_kernel(t, pair.s, pair.p, pair.c)


def opening_rate(t, pair: PairParameters):
    return opening_kernel(t, pair.s, pair.b)


def deadline_rate(t, pair: PairParameters):
    return deadline_kernel(t, pair.s, pair.d, pair.m, pair.v)


def excitation_rate(t, history, pair: PairParameters):
    """Self-excitation from events strictly before ``t``."""
    h = np.asarray(history.timestamps if isinstance(history, EventSequence) else history, dtype=float)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    lag = t_arr[:, None] - h[None, :]
    contrib = np.where(lag > 0, np.exp(-pair.beta * np.where(lag > 0, lag, 0.0)), 0.0)
    out = pair.alpha * pair.beta * contrib.sum(axis=1)
    return out if np.ndim(t) else float(out[0])


def base_rate(t, pair: PairParameters):
    """Weighted external-stimulus rate with ablated terms removed."""
    comp = pair.components
    total = np.zeros(np.shape(t))
    if comp.habit:
        total = total + pair.gamma_h * habit_rate(t, pair)
    if comp.opening:
        total = total + pair.gamma_o * opening_rate(t, pair)
    if comp.deadline:
        total = total + pair.gamma_d * deadline_rate(t, pair)
    return total if np.ndim(total) else float(total)


def total_intensity(t, pair: PairParameters, history=()):
    lam = base_rate(t, pair)
    if pair.components.excitation:
        lam = lam + excitation_rate(t, history, pair)
    return lam


def cumulative_base(t, pair: PairParameters):
    """Integrals of the unweighted habit, opening and deadline kernels over [0, t]."""
    return (
        habit_cumulative(t, pair.s, pair.p, pair.c),
        opening_cumulative(t, pair.s, pair.b),
        deadline_cumulative(t, pair.s, pair.d, pair.m, pair.v),
    )


def compensator(t, pair: PairParameters, history=()):
    """Full integrated intensity over [0, t] including excitation."""
    comp = pair.components
    uh, uo, ud = cumulative_base(t, pair)
    total = comp.habit * pair.gamma_h * uh + comp.opening * pair.gamma_o * uo + comp.deadline * pair.gamma_d * ud
    if comp.excitation:
        h = np.asarray(history.timestamps if isinstance(history, EventSequence) else history, dtype=float)
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        lag = np.clip(t_arr[:, None] - h[None, :], 0.0, None)
        exc = pair.alpha * (-np.expm1(-pair.beta * lag)).sum(axis=1)
        total = total + (exc if np.ndim(t) else exc[0])
    return total if np.ndim(total) else float(total)


# --------------------------------------------------------------------------
# likelihood


@dataclass(frozen=True)
class ExcitationState:
    R: float
    last_time: float


def excitation_recursion(x, beta: float) -> np.ndarray:
    """R(1)=0, R(k)=(1+R(k-1))exp(-beta(x_k - x_{k-1})); O(K)."""
    x = np.asarray(x, dtype=float)
    R = np.zeros(x.size)
    decay = np.exp(-beta * np.diff(x))
    acc = 0.0
    for k in range(1, x.size):
        acc = (1.0 + acc) * decay[k - 1]
        R[k] = acc
    return R


@dataclass
class EventBatch:
    """Concatenated events of many sequences plus per-pair bookkeeping.

    ``R`` and the excitation compensator term depend only on the timestamps and
    the fixed decay, so they are computed once here.
    """

    x: np.ndarray  # events
    seg: np.ndarray  # pair index of each event
    R: np.ndarray
    T: np.ndarray  # per-pair window end
    T0: np.ndarray  # per-pair window start
    d: np.ndarray  # per-pair deadline, scaled units
    counts: np.ndarray
    exc_comp: np.ndarray  # sum_tau (exp(-beta(T - x)) - 1) per pair
    beta: float

    @classmethod
    def build(cls, sequences, T, d, beta: float, T0=None) -> "EventBatch":
        xs, segs, Rs = [], [], []
        T = np.asarray(T, dtype=float)
        T0 = np.zeros(T.size) if T0 is None else np.asarray(T0, dtype=float)
        exc = np.zeros(len(sequences))
        for n, ts in enumerate(sequences):
            ts = np.asarray(ts, dtype=float)
            xs.append(ts)
            segs.append(np.full(ts.size, n))
            Rs.append(excitation_recursion(ts, beta))
            exc[n] = np.sum(np.expm1(-beta * (T[n] - ts)))
        x = np.concatenate(xs) if xs else np.zeros(0)
        return cls(
            x=x,
            seg=np.concatenate(segs).astype(int) if segs else np.zeros(0, int),
            R=np.concatenate(Rs) if Rs else np.zeros(0),
            T=T,
            T0=T0,
            d=np.asarray(d, dtype=float),
            counts=np.array([np.size(q) for q in sequences]),
            exc_comp=exc,
            beta=float(beta),
        )

    @property
    def n_pairs(self) -> int:
        return self.T.size


GRAD_KEYS = ("alpha", "m", "gamma_h", "gamma_o", "gamma_d", "c", "p", "b", "v")


def batch_log_likelihood(batch: EventBatch, prm: dict, s: float, components: Components = Components(), grad: bool = False, curvature: bool = False):
    """Per-pair log-likelihoods (and optionally per-pair partials).

    ``prm`` maps each symbol in ``GRAD_KEYS`` to a per-pair array. Returns the
    log-likelihood array, and when ``grad`` is set a dict of per-pair partial
    arrays. ``curvature`` adds, per pair and symbol, the larger of the
    diagonal second derivative of the negative log-likelihood and the sum of
    squared event scores.
    """
    seg, x, P = batch.seg, batch.x, batch.n_pairs
    T, T0, d, beta = batch.T, batch.T0, batch.d, batch.beta
    span = T - T0
    e = {k: np.asarray(prm[k], dtype=float)[seg] for k in GRAD_KEYS}

    lam = np.zeros(x.size)
    comp_total = np.zeros(P)
    parts = {}
    if components.habit:
        phase = TWO_PI * (x + e["p"]) / s
        mu_h = np.sin(phase) + e["c"]
        lam += e["gamma_h"] * mu_h
        Uh = habit_cumulative(T, s, prm["p"], prm["c"]) - habit_cumulative(T0, s, prm["p"], prm["c"])
        comp_total += prm["gamma_h"] * Uh
        parts["h"] = (mu_h, phase, Uh)
    if components.opening:
        mu_o = np.power(e["b"], x / s)
        lam += e["gamma_o"] * mu_o
        Uo = opening_cumulative(T, s, prm["b"]) - opening_cumulative(T0, s, prm["b"])
        comp_total += prm["gamma_o"] * Uo
        parts["o"] = (mu_o, Uo)
    if components.deadline:
        w = d[seg] - e["m"] - x / s
        live = w >= W_GUARD
        lw = np.log(np.where(live, w, 1.0))
        mu_d = np.where(live, np.exp(-lw * lw / e["v"]) / (np.sqrt(TWO_PI * e["v"]) * np.where(live, w, 1.0)), 0.0)
        lam += e["gamma_d"] * mu_d
        Ud = deadline_cumulative(T, s, d, prm["m"], prm["v"]) - deadline_cumulative(T0, s, d, prm["m"], prm["v"])
        comp_total += prm["gamma_d"] * Ud
        parts["d"] = (mu_d, w, lw, live, Ud)
    if components.excitation:
        lam += e["alpha"] * beta * batch.R
        comp_total -= prm["alpha"] * batch.exc_comp

    floored = lam < LOG_FLOOR
    log_lam = np.log(np.where(floored, LOG_FLOOR, lam))
    ll = np.bincount(seg, weights=log_lam, minlength=P) - comp_total
    if not grad:
        return ll

    inv = np.where(floored, 0.0, 1.0 / np.where(floored, 1.0, lam))
    scores = {}  # per-event d(log lam)/d theta, per-pair compensator partials
    comp_grad = {}
    second = {}  # per-event d2(lam)/d theta2 / lam, per-pair compensator second partials
    comp_second = {}
    if components.excitation:
        scores["alpha"] = beta * batch.R * inv
        comp_grad["alpha"] = -batch.exc_comp
    if components.habit:
        mu_h, phase, Uh = parts["h"]
        scores["gamma_h"] = mu_h * inv
        comp_grad["gamma_h"] = Uh
        scores["c"] = e["gamma_h"] * inv
        comp_grad["c"] = prm["gamma_h"] * span
        scores["p"] = e["gamma_h"] * np.cos(phase) * (TWO_PI / s) * inv
        comp_grad["p"] = prm["gamma_h"] * (
            np.sin(TWO_PI * (T + prm["p"]) / s) - np.sin(TWO_PI * (T0 + prm["p"]) / s)
        )
        if curvature:
            second["p"] = -e["gamma_h"] * np.sin(phase) * (TWO_PI / s) ** 2 * inv
            comp_second["p"] = prm["gamma_h"] * (TWO_PI / s) * (
                np.cos(TWO_PI * (T + prm["p"]) / s) - np.cos(TWO_PI * (T0 + prm["p"]) / s)
            )
    if components.opening:
        mu_o, Uo = parts["o"]
        scores["gamma_o"] = mu_o * inv
        comp_grad["gamma_o"] = Uo
        scores["b"] = e["gamma_o"] * (x / s) * mu_o / e["b"] * inv
        comp_grad["b"] = prm["gamma_o"] * (_opening_cumulative_db(T, s, prm["b"]) - _opening_cumulative_db(T0, s, prm["b"]))
        if curvature:
            u = x / s
            second["b"] = e["gamma_o"] * u * (u - 1.0) * mu_o / (e["b"] * e["b"]) * inv
            comp_second["b"] = prm["gamma_o"] * _central(
                lambda b: _opening_cumulative_db(T, s, b) - _opening_cumulative_db(T0, s, b),
                prm["b"],
                1e-5 * np.minimum(prm["b"], 1.0 - prm["b"]),
            )
    if components.deadline:
        mu_d, w, lw, live, Ud = parts["d"]
        v_e = e["v"]
        scores["gamma_d"] = mu_d * inv
        comp_grad["gamma_d"] = Ud
        dmu_dm = np.where(live, mu_d * (1.0 + 2.0 * lw / v_e) / np.where(live, w, 1.0), 0.0)
        dmu_dv = mu_d * (lw * lw / (v_e * v_e) - 0.5 / v_e)
        scores["m"] = e["gamma_d"] * dmu_dm * inv
        scores["v"] = e["gamma_d"] * dmu_dv * inv
        dUm, dUv = _deadline_cumulative_grads(T, s, d, prm["m"], prm["v"])
        dUm0, dUv0 = _deadline_cumulative_grads(T0, s, d, prm["m"], prm["v"])
        comp_grad["m"] = prm["gamma_d"] * (dUm - dUm0)
        comp_grad["v"] = prm["gamma_d"] * (dUv - dUv0)
        if curvature:
            w_safe = np.where(live, w, 1.0)
            g = -(1.0 + 2.0 * lw / v_e) / w_safe
            g_prime = (1.0 + 2.0 * lw / v_e - 2.0 / v_e) / (w_safe * w_safe)
            h = lw * lw / (v_e * v_e) - 0.5 / v_e
            h_prime = -2.0 * lw * lw / v_e ** 3 + 0.5 / (v_e * v_e)
            second["m"] = e["gamma_d"] * np.where(live, mu_d * (g * g + g_prime), 0.0) * inv
            second["v"] = e["gamma_d"] * mu_d * (h * h + h_prime) * inv
            comp_second["m"] = prm["gamma_d"] * _central(
                lambda m: _deadline_cumulative_grads(T, s, d, m, prm["v"])[0] - _deadline_cumulative_grads(T0, s, d, m, prm["v"])[0],
                prm["m"],
                np.minimum(1e-6 * np.maximum(1.0, np.abs(prm["m"])), 0.1 * (d - prm["m"])),
            )
            comp_second["v"] = prm["gamma_d"] * _central(
                lambda v: _deadline_cumulative_grads(T, s, d, prm["m"], v)[1] - _deadline_cumulative_grads(T0, s, d, prm["m"], v)[1],
                prm["v"],
                1e-5 * prm["v"],
            )

    grads = {}
    curv = {}
    for k in GRAD_KEYS:
        if k in scores:
            grads[k] = np.bincount(seg, weights=scores[k], minlength=P) - comp_grad[k]
            if curvature:
                fisher = np.bincount(seg, weights=scores[k] ** 2, minlength=P)
                if k in second:
                    hess = np.bincount(seg, weights=scores[k] ** 2 - second[k], minlength=P) + comp_second[k]
                    fisher = np.maximum(fisher, hess)
                curv[k] = fisher
        else:
            grads[k] = np.zeros(P)
            if curvature:
                curv[k] = np.zeros(P)
    if curvature:
        return ll, grads, curv
    return ll, grads


def _central(fn, x, h):
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


def _opening_cumulative_db(t, s, b):
    lb = np.log(b)
    u = t / s
    small = np.abs(lb) < B_SERIES
    safe = np.where(small, -1.0, lb)
    eu = np.exp(u * safe)
    exact = (u * safe * eu - np.expm1(u * safe)) / (safe * safe)
    series = u * u / 2.0 + u ** 3 * lb / 3.0
    return s * np.where(small, series, exact) / b


def _deadline_cumulative_grads(t, s, d, m, v):
    D, w, rv, saturated, z_open, z_now = _deadline_erf_args(t, s, d, m, v)
    k = s * ERF_SCALE * 2.0 / np.sqrt(np.pi)
    g_open = np.exp(-z_open ** 2)
    g_now = np.exp(-z_now ** 2)
    w_safe = np.where(saturated, 1.0, w)
    D_safe = np.maximum(D, W_GUARD)
    # once saturated, z_now no longer depends on m
    dm = k * (-g_open / (D_safe * rv) + np.where(saturated, 0.0, g_now / (w_safe * rv)))
    dv = k * (-g_open * z_open + g_now * z_now) / (2.0 * v)
    live = D > W_GUARD
    return np.where(live, dm, 0.0), np.where(live, dv, 0.0)


def _pair_prm(pair: PairParameters) -> dict:
    return {k: np.array([getattr(pair, k)]) for k in GRAD_KEYS}


@dataclass(frozen=True)
class GradientRecord:
    alpha: float
    m: float
    gamma_h: float
    gamma_o: float
    gamma_d: float
    c: float
    p: float
    b: float
    v: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in GRAD_KEYS}


def _single_batch(seq: EventSequence, pair: PairParameters) -> EventBatch:
    if len(seq) == 0:
        raise ValueError(f"sequence {seq.pair} is empty and has no likelihood")
    return EventBatch.build([seq.timestamps], [seq.window_end], [pair.d], pair.beta, [seq.window_start])


def sequence_log_likelihood(seq: EventSequence, pair: PairParameters) -> float:
    """Log-likelihood of one sequence over its window, in O(K)."""
    batch = _single_batch(seq, pair)
    return float(batch_log_likelihood(batch, _pair_prm(pair), pair.s, pair.components)[0])


def sequence_log_likelihood_gradient(seq: EventSequence, pair: PairParameters) -> GradientRecord:
    batch = _single_batch(seq, pair)
    _, g = batch_log_likelihood(batch, _pair_prm(pair), pair.s, pair.components, grad=True)
    return GradientRecord(**{k: float(g[k][0]) for k in GRAD_KEYS})
