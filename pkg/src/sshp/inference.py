"""Joint maximum-likelihood fitting with accelerated proximal gradient.

All observed pairs are fitted at once. Matrix parameters are shrunk toward
low rank by singular-value soft-thresholding and clamped to their sign
constraints; vector parameters are clamped to their intervals.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .intensity import GRAD_KEYS, W_GUARD, EventBatch, batch_log_likelihood
from .model import (
    MATRIX_SYMBOLS,
    NONNEG_MATRICES,
    VECTOR_BOUNDS,
    VECTOR_SYMBOLS,
    Components,
    Dataset,
    HyperParams,
    ParameterStore,
)

log = logging.getLogger(__name__)

# store block name for each likelihood symbol
BLOCK_OF = {"alpha": "A", "m": "M", "gamma_h": "Gh", "gamma_o": "Go", "gamma_d": "Gd", "c": "c", "p": "p", "b": "b", "v": "v"}
SYMBOL_OF = {v: k for k, v in BLOCK_OF.items()}

# blocks that carry no information once a component is ablated
FROZEN_BY = {
    "excitation": ("A",),
    "opening": ("Go", "b"),
    "habit": ("Gh", "c", "p"),
    "deadline": ("Gd", "M", "v"),
}
ZEROED_BY = {"excitation": "A", "opening": "Go", "habit": "Gh", "deadline": "Gd"}

M_MARGIN = 1e-6
COMPLETION_LEVELS = 40
COMPLETION_SWEEPS = 30
STALL_ROUNDS = 5
GAMMA_CEILING = 1e12
METRIC_FLOOR = 1e-2


class NumericalError(RuntimeError):
    """Raised when the loss or its gradient stops being finite."""


def prox_matrix(mat, rho: float, clamp_nonneg: bool = True) -> np.ndarray:
    """Soft-threshold the singular values by ``rho``, then optionally clamp at zero."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    mat = np.asarray(mat, dtype=float)
    if rho > 0:
        u, sv, vt = np.linalg.svd(mat, full_matrices=False)
        mat = (u * np.maximum(sv - rho, 0.0)) @ vt
    if clamp_nonneg:
        mat = np.maximum(mat, 0.0)
    return mat


def prox_vector(vec, bounds) -> np.ndarray:
    """Clamp to ``bounds``; a symbol name looks up the model's interval."""
    lo, hi = VECTOR_BOUNDS[bounds] if isinstance(bounds, str) else bounds
    return np.clip(np.asarray(vec, dtype=float), lo, hi)


@dataclass
class FittedModel:
    params: ParameterStore
    hyper: HyperParams
    components: Components
    students: tuple[str, ...]
    assignments: tuple[str, ...]
    final_loss: float
    iterations: int
    loss_trace: list[float]
    converged: bool
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        # wall time is left out so reruns serialize identically
        return {
            "params": self.params.to_dict(),
            "hyper": {k: getattr(self.hyper, k) for k in self.hyper.__dataclass_fields__},
            "components": self.components.as_dict(),
            "ablated": [k for k, on in self.components.as_dict().items() if not on],
            "students": list(self.students),
            "assignments": list(self.assignments),
            "diagnostics": {
                "final_loss": self.final_loss,
                "iterations": self.iterations,
                "converged": self.converged,
                "loss_trace": self.loss_trace,
                **self.extra,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FittedModel":
        diag = data["diagnostics"]
        extra = {k: v for k, v in diag.items() if k not in ("final_loss", "iterations", "converged", "loss_trace")}
        return cls(
            params=ParameterStore.from_dict(data["params"]),
            hyper=HyperParams(**data["hyper"]),
            components=Components(**data["components"]),
            students=tuple(data["students"]),
            assignments=tuple(data["assignments"]),
            final_loss=diag["final_loss"],
            iterations=diag["iterations"],
            loss_trace=list(diag["loss_trace"]),
            converged=diag["converged"],
            extra=extra,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FittedModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class CourseObjective:
    """Average negative log-likelihood over observed pairs, in block form."""

    def __init__(self, train: Dataset, s: float, beta: float, components: Components):
        seqs = train.observed()
        if not seqs:
            raise ValueError("training data has no nonempty sequence")
        si, ai = train.student_index(), train.assignment_index()
        self.rows = np.array([si[q.student_id] for q in seqs])
        self.cols = np.array([ai[q.assignment_id] for q in seqs])
        self.pairs = [q.pair for q in seqs]
        self.d_col = np.array([a.relative_deadline(s) for a in train.assignments])
        self.batch = EventBatch.build(
            [q.timestamps for q in seqs],
            [q.window_end for q in seqs],
            self.d_col[self.cols],
            beta,
            [q.window_start for q in seqs],
        )
        self.U, self.N = train.U, train.N
        self.s = s
        self.components = components
        self.n_obs = len(seqs)

    def _prm(self, blocks: dict) -> dict:
        out = {}
        for sym in GRAD_KEYS:
            arr = blocks[BLOCK_OF[sym]]
            out[sym] = arr[self.rows, self.cols] if arr.ndim == 2 else arr[self.rows]
        return out

    def loglik(self, blocks: dict) -> np.ndarray:
        return batch_log_likelihood(self.batch, self._prm(blocks), self.s, self.components)

    def loss(self, blocks: dict) -> float:
        return float(-np.sum(self.loglik(blocks)) / self.n_obs)

    def _scatter(self, per_pair: np.ndarray, name: str) -> np.ndarray:
        if name in MATRIX_SYMBOLS:
            out = np.zeros((self.U, self.N))
            out[self.rows, self.cols] = per_pair
            return out
        return np.bincount(self.rows, weights=per_pair, minlength=self.U)

    def loss_and_grad(self, blocks: dict, curvature: bool = False):
        res = batch_log_likelihood(self.batch, self._prm(blocks), self.s, self.components, grad=True, curvature=curvature)
        ll, g = res[0], res[1]
        loss = float(-np.sum(ll) / self.n_obs)
        grads = {BLOCK_OF[k]: -self._scatter(g[k], BLOCK_OF[k]) / self.n_obs for k in GRAD_KEYS}
        if not curvature:
            return loss, grads, ll
        curv = {BLOCK_OF[k]: self._scatter(res[2][k], BLOCK_OF[k]) / self.n_obs for k in GRAD_KEYS}
        return loss, grads, ll, curv

    def m_ceiling(self, M: np.ndarray) -> np.ndarray:
        """Upper bound on M that keeps every in-support event inside the support.

        The deadline rate can be large right up to the numerical guard, so an
        event leaving the support makes the loss jump; no single step may do that.
        """
        ceiling = np.broadcast_to(self.d_col[None, :] - M_MARGIN, (self.U, self.N)).copy()
        b = self.batch
        if not self.components.deadline or b.x.size == 0:
            return ceiling
        w = b.d[b.seg] - M[self.rows, self.cols][b.seg] - b.x / self.s
        live = w >= W_GUARD
        last = np.full(self.n_obs, -np.inf)
        np.maximum.at(last, b.seg[live], b.x[live])
        has = np.isfinite(last)
        limit = b.d[has] - last[has] / self.s - 2.0 * W_GUARD
        r, c = self.rows[has], self.cols[has]
        ceiling[r, c] = np.minimum(ceiling[r, c], np.maximum(limit, M[r, c]))
        return ceiling

    def offending_pair(self, ll: np.ndarray) -> tuple[str, str] | None:
        bad = np.flatnonzero(~np.isfinite(ll))
        return self.pairs[bad[0]] if bad.size else None


def _curvature_metric(curv: dict, active: list[str]) -> dict[str, np.ndarray]:
    """Diagonal metric from the per-entry curvature.

    Entries without data borrow the block mean, and every entry is floored at
    a small fraction of it so data-poor entries cannot take huge steps.
    """
    metric = {}
    for k in active:
        f = curv[k]
        seen = f[f > 0]
        ref = float(np.mean(seen)) if seen.size else 1.0
        metric[k] = np.maximum(np.where(f > 0, f, ref), METRIC_FLOOR * ref)
    return metric


def _box(blocks: dict, m_ceiling: np.ndarray) -> dict:
    out = {}
    for k, arr in blocks.items():
        if k in VECTOR_BOUNDS:
            out[k] = prox_vector(arr, k)
        elif k in NONNEG_MATRICES:
            out[k] = np.maximum(arr, 0.0)
        else:
            out[k] = np.minimum(arr, m_ceiling)
    return out


def complete_unobserved(mat: np.ndarray, observed: np.ndarray, clamp_nonneg: bool, cap=None) -> np.ndarray:
    """Fill unobserved cells by soft-impute with a shrinking threshold.

    Observed cells stay fixed. The threshold decreases geometrically from half
    the largest singular value of the zero-filled matrix, so the fill tends to
    the smallest trace norm consistent with the observed entries.
    """
    out = np.array(mat, dtype=float)
    hidden = ~observed
    if not hidden.any() or not observed.any():
        return out
    top = np.linalg.svd(np.where(observed, out, 0.0), compute_uv=False)[0]
    if top == 0:
        return out
    for tau in top * np.geomspace(0.5, 1e-4, COMPLETION_LEVELS):
        for _ in range(COMPLETION_SWEEPS):
            low = prox_matrix(out, tau, clamp_nonneg)
            if cap is not None:
                low = np.minimum(low, cap)
            out[hidden] = low[hidden]
    return out


def fit(train: Dataset, hyper: HyperParams, init: ParameterStore, components: Components = Components()) -> FittedModel:
    """Minimize the penalized average negative log-likelihood of ``train``.

    Returns the final iterate; ``loss_trace`` holds the penalized objective of
    every accepted iterate and never increases.
    """
    start = time.perf_counter()
    problem = CourseObjective(train, hyper.s, hyper.beta, components)
    if init.shape != (problem.U, problem.N):
        raise ValueError("init shape does not match the dataset grid")
    d_col = problem.d_col

    blocks = {k: np.array(v, dtype=float) for k, v in init.blocks().items()}
    frozen = set()
    for comp, names in FROZEN_BY.items():
        if not getattr(components, comp):
            frozen.update(names)
            blocks[ZEROED_BY[comp]] = np.zeros((problem.U, problem.N))
    active = [k for k in VECTOR_SYMBOLS + MATRIX_SYMBOLS if k not in frozen]
    blocks = _box(blocks, d_col[None, :] - M_MARGIN)

    # trace-norm weight is rho per unnormalized log-likelihood
    pen_weight = hyper.rho / problem.n_obs

    def penalty(bl):
        return pen_weight * sum(np.linalg.svd(bl[k], compute_uv=False).sum() for k in MATRIX_SYMBOLS if k in active)

    f0, g0, ll0 = problem.loss_and_grad(blocks)
    if not math.isfinite(f0):
        raise NumericalError(f"non-finite loss at initialization, pair {problem.offending_pair(ll0)}")

    def step(search, grad, metric, gamma, m_cap):
        cand = dict(search)
        for k in active:
            moved = search[k] - grad[k] / (gamma * metric[k])
            if k in MATRIX_SYMBOLS:
                tau = pen_weight / (gamma * float(np.mean(metric[k])))
                moved = prox_matrix(moved, tau, clamp_nonneg=k in NONNEG_MATRICES)
                if k == "M":
                    moved = np.minimum(moved, m_cap)
            else:
                moved = prox_vector(moved, k)
            cand[k] = moved
        return cand

    def model_terms(a, b, grad, metric):
        lin = sum(float(np.sum(grad[k] * (a[k] - b[k]))) for k in active)
        quad_ = sum(float(np.sum(metric[k] * (a[k] - b[k]) ** 2)) for k in active)
        return lin, quad_

    theta, theta_prev = blocks, blocks
    obj = f0 + penalty(theta)
    trace = [obj]
    mom_prev, mom = 0.0, 1.0
    gamma = float(hyper.gamma0)
    stall = 0
    converged = False
    it = 0
    for it in range(1, hyper.max_iter + 1):
        a = (mom_prev - 1.0) / mom
        search = _box({k: theta[k] + a * (theta[k] - theta_prev[k]) for k in theta}, problem.m_ceiling(theta["M"]))
        f_s, g_s, ll_s, curv_s = problem.loss_and_grad(search, curvature=True)
        if not math.isfinite(f_s) or not all(np.all(np.isfinite(g_s[k])) for k in active):
            raise NumericalError(f"non-finite loss or gradient at iteration {it}, pair {problem.offending_pair(ll_s)}")
        metric = _curvature_metric(curv_s, active)
        m_cap = problem.m_ceiling(search["M"])
        while True:
            cand = step(search, g_s, metric, gamma, m_cap)
            f_c = problem.loss(cand)
            lin, sq = model_terms(cand, search, g_s, metric)
            if math.isfinite(f_c) and f_c <= f_s + lin + 0.5 * gamma * sq:
                break
            gamma *= hyper.eta
            if gamma > GAMMA_CEILING * hyper.gamma0:
                break
        obj_c = f_c + penalty(cand) if math.isfinite(f_c) else math.inf
        if not obj_c <= obj:
            if a != 0.0:
                # extrapolation overshot: drop momentum and retry from theta
                theta_prev = theta
                mom_prev, mom = 0.0, 1.0
                continue
            gamma *= hyper.eta
            if gamma > GAMMA_CEILING * hyper.gamma0:
                converged = True
                break
            continue
        theta_prev, theta = theta, cand
        rel = abs(obj - obj_c) / max(abs(obj), 1e-12)
        obj = obj_c
        trace.append(obj)
        stall = stall + 1 if rel < hyper.tol else 0
        if stall >= STALL_ROUNDS:
            converged = True
            break
        mom_prev, mom = mom, (1.0 + math.sqrt(1.0 + 4.0 * mom * mom)) / 2.0

    # unobserved cells carry no likelihood; fill them with the lowest-norm
    # completion, keeping each block only if its trace norm does not grow
    observed = np.zeros((problem.U, problem.N), dtype=bool)
    observed[problem.rows, problem.cols] = True
    filled = dict(theta)
    for k in MATRIX_SYMBOLS:
        if k not in active:
            continue
        cap = d_col[None, :] - M_MARGIN if k == "M" else None
        cand = complete_unobserved(theta[k], observed, k in NONNEG_MATRICES, cap)
        if np.linalg.svd(cand, compute_uv=False).sum() <= np.linalg.svd(theta[k], compute_uv=False).sum():
            filled[k] = cand
    obj_fill = problem.loss(filled) + penalty(filled)
    if obj_fill <= obj:
        theta, obj = filled, obj_fill
        trace.append(obj)

    params = init.with_blocks(theta)
    params = ParameterStore(hyper.beta, hyper.s, **{k: getattr(params, k) for k in VECTOR_SYMBOLS + MATRIX_SYMBOLS})
    wall = time.perf_counter() - start
    log.info("fit: %d iterations, objective %.6g, gamma %.3g, %.1fs", it, obj, gamma, wall)
    return FittedModel(
        params=params,
        hyper=hyper,
        components=components,
        students=tuple(train.students),
        assignments=tuple(a.assignment_id for a in train.assignments),
        final_loss=obj,
        iterations=it,
        loss_trace=trace,
        converged=converged,
        wall_time=wall,
        extra={"nll": problem.loss(theta), "gamma_final": gamma, "n_observed": problem.n_obs},
    )
