"""Ogata thinning for stimuli-sensitive Hawkes intensities and synthetic course generation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .intensity import W_GUARD, deadline_kernel, opening_kernel
from .model import (
    AssignmentSchedule,
    Components,
    Dataset,
    EventSequence,
    PairParameters,
    ParameterStore,
)

TWO_PI = 2.0 * math.pi
BOUND_SLACK = 1e-9
# shrink the lookahead until the expected number of proposals per window is at most this
MAX_PROPOSALS_PER_WINDOW = 16.0


class BoundViolation(RuntimeError):
    """The dominating rate was below the intensity at a proposal."""


class PairIntensity:
    """Base rate of one pair with scalar and vectorized evaluation plus an upper bound.

    Self-excitation is carried by the samplers as a decaying state; ``jump`` is
    the increase of that state at each event.
    """

    def __init__(self, pair: PairParameters):
        self.pair = pair
        comp = pair.components
        self.gh = pair.gamma_h if comp.habit else 0.0
        self.go = pair.gamma_o if comp.opening else 0.0
        self.gd = pair.gamma_d if comp.deadline else 0.0
        self.beta = pair.beta
        self.jump = pair.alpha * pair.beta if comp.excitation else 0.0
        self._D = pair.d - pair.m
        self._mode = math.exp(-pair.v / 2.0)
        self._log_b = math.log(pair.b)

    def rate_at(self, t: float) -> float:
        pr = self.pair
        lam = 0.0
        if self.gh:
            lam += self.gh * (math.sin(TWO_PI * (t + pr.p) / pr.s) + pr.c)
        if self.go:
            lam += self.go * math.exp(self._log_b * t / pr.s)
        if self.gd:
            w = self._D - t / pr.s
            if w >= W_GUARD:
                lw = math.log(w)
                lam += self.gd * math.exp(-lw * lw / pr.v) / (math.sqrt(TWO_PI * pr.v) * w)
        return lam

    def _deadline_peak(self, w_lo: float, w_hi: float) -> float:
        # the kernel is unimodal in w with its mode at exp(-v/2)
        if w_hi < W_GUARD:
            return 0.0
        w = min(max(self._mode, w_lo, W_GUARD), w_hi)
        lw = math.log(w)
        return math.exp(-lw * lw / self.pair.v) / (math.sqrt(TWO_PI * self.pair.v) * w)

    def bound_at(self, t: float, lookahead: float) -> float:
        """Supremum of the base rate over [t, t + lookahead]."""
        pr = self.pair
        B = 0.0
        if self.gh:
            B += self.gh * (pr.c + 1.0)
        if self.go:
            B += self.go * math.exp(self._log_b * t / pr.s)
        if self.gd:
            B += self.gd * self._deadline_peak(self._D - (t + lookahead) / pr.s, self._D - t / pr.s)
        return B

    # vectorized forms used by the Monte Carlo predictor
    def rate(self, t: np.ndarray) -> np.ndarray:
        pr = self.pair
        lam = np.zeros(np.shape(t))
        if self.gh:
            lam += self.gh * (np.sin(TWO_PI * (t + pr.p) / pr.s) + pr.c)
        if self.go:
            lam += self.go * opening_kernel(t, pr.s, pr.b)
        if self.gd:
            lam += self.gd * deadline_kernel(t, pr.s, pr.d, pr.m, pr.v)
        return lam

    def bound(self, t: np.ndarray, lookahead: np.ndarray) -> np.ndarray:
        pr = self.pair
        B = np.zeros(np.shape(t))
        if self.gh:
            B += self.gh * (pr.c + 1.0)
        if self.go:
            B += self.go * opening_kernel(t, pr.s, pr.b)
        if self.gd:
            w_hi = self._D - t / pr.s
            w_lo = self._D - (t + lookahead) / pr.s
            w = np.maximum(np.minimum(np.maximum(self._mode, w_lo), w_hi), W_GUARD)
            lw = np.log(w)
            peak = np.exp(-lw * lw / pr.v) / (np.sqrt(TWO_PI * pr.v) * w)
            B += self.gd * np.where(w_hi < W_GUARD, 0.0, peak)
        return B

    @property
    def lookahead(self) -> float:
        return self.pair.s / 4.0


class ConstantIntensity:
    """Homogeneous Poisson rate with the same interface as :class:`PairIntensity`."""

    def __init__(self, rate: float, lookahead: float = 1.0):
        self.value = float(rate)
        self.beta = 1.0
        self.jump = 0.0
        self.lookahead = lookahead

    def rate_at(self, t):
        return self.value

    def bound_at(self, t, lookahead):
        return self.value

    def rate(self, t):
        return np.full(np.shape(t), self.value)

    def bound(self, t, lookahead):
        return np.full(np.shape(t), self.value)


def _excitation_now(t: float, history, beta: float, jump: float) -> float:
    h = np.asarray(history, dtype=float)
    h = h[h <= t]
    return float(jump * np.sum(np.exp(-beta * (t - h)))) if h.size else 0.0


def local_intensity_bound(pair, history, t: float, lookahead: float) -> float:
    """Upper bound on the intensity over [t, t + lookahead] if no new event arrives."""
    if lookahead <= 0:
        raise ValueError("lookahead must be positive")
    rate = pair if hasattr(pair, "bound_at") else PairIntensity(pair)
    return rate.bound_at(t, lookahead) + _excitation_now(t, history, rate.beta, rate.jump)


def _thin(rate, t_start: float, t_end: float, rng: np.random.Generator, history=()) -> np.ndarray:
    t = float(t_start)
    exc = _excitation_now(t, history, rate.beta, rate.jump)
    beta, jump = rate.beta, rate.jump
    events = []
    while t < t_end:
        L = min(rate.lookahead, t_end - t)
        B = rate.bound_at(t, L) + exc
        while B * L > MAX_PROPOSALS_PER_WINDOW and L > 1e-12:
            L *= 0.5
            B = rate.bound_at(t, L) + exc
        if B <= 0.0:
            t += L
            continue
        dt = rng.exponential(1.0 / B)
        if dt > L:
            t += L
            exc *= math.exp(-beta * L)
            continue
        t += dt
        exc *= math.exp(-beta * dt)
        if t > t_end:
            break
        lam = rate.rate_at(t) + exc
        if lam > B * (1.0 + BOUND_SLACK):
            raise BoundViolation(f"intensity {lam:.6g} exceeds bound {B:.6g} at t={t:.6g}")
        if rng.uniform() * B <= lam:
            events.append(t)
            exc += jump
    return np.array(events)


def sample_sequence(pair, t_start: float, t_end: float, seed=None, *, history=(), rng=None, ids=("", "")) -> EventSequence:
    """Draw one sequence on (t_start, t_end] by thinning.

    ``pair`` may be :class:`PairParameters` or any rate object exposing
    ``rate_at``/``bound_at``. Events in ``history`` (at or before ``t_start``)
    seed the self-excitation.
    """
    if not t_start < t_end:
        raise ValueError("t_start must precede t_end")
    rate = pair if hasattr(pair, "bound_at") else PairIntensity(pair)
    rng = rng if rng is not None else np.random.default_rng(seed)
    ts = _thin(rate, t_start, t_end, rng, history)
    return EventSequence(ids[0], ids[1], ts, t_start, t_end)


# --------------------------------------------------------------------------
# synthetic courses

SYNTHETIC_DISTRIBUTIONS = {
    "A": (0.4, 0.1),
    "M": (0.0, 5.0),
    "Gd": (15.0, 3.0),
    "Go": (5.0, 3.0),
    "Gh": (0.5, 0.1),
    "v": (20.0, 10.0),
    "b": (0.5, 0.3),
    "p": (6.0, 4.0),
    "c": (1.2, 0.1),
}

# ground-truth draws are projected into these (interior) boxes
GENERATION_BOUNDS = {
    "A": (0.0, 0.95),
    "M": (-math.inf, math.inf),
    "Gd": (0.0, math.inf),
    "Go": (0.0, math.inf),
    "Gh": (0.0, math.inf),
    "v": (0.5, math.inf),
    "b": (0.02, 0.98),
    "p": (-math.inf, math.inf),
    "c": (1.0, math.inf),
}
MAX_REDRAWS = 100
DEADLINE_MARGIN = 1e-3


@dataclass(frozen=True)
class SyntheticConfig:
    U: int = 500
    N: int = 20
    distributions: dict = field(default_factory=lambda: dict(SYNTHETIC_DISTRIBUTIONS))
    deadline: float = 80.0
    s: float = 1.0
    T: float | None = None  # defaults to 100 * s
    beta: float = 1.0
    mask_fraction: float = 0.1
    seed: int = 0
    structure: str = "iid"

    def __post_init__(self):
        if self.U < 1 or self.N < 1:
            raise ValueError("U and N must be at least 1")
        if not 0 <= self.mask_fraction < 1:
            raise ValueError("mask_fraction must be in [0, 1)")
        for k, (_, sd) in self.distributions.items():
            if sd < 0:
                raise ValueError(f"negative stddev for {k}")
        if self.structure not in ("iid", "factor"):
            raise ValueError("structure must be 'iid' or 'factor'")

    @property
    def window(self) -> float:
        return 100.0 * self.s if self.T is None else float(self.T)

    def to_dict(self) -> dict:
        return {
            "U": self.U,
            "N": self.N,
            "distributions": {k: list(v) for k, v in self.distributions.items()},
            "deadline": self.deadline,
            "s": self.s,
            "T": self.window,
            "beta": self.beta,
            "mask_fraction": self.mask_fraction,
            "seed": self.seed,
            "structure": self.structure,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        data = dict(data)
        if "distributions" in data:
            dist = dict(SYNTHETIC_DISTRIBUTIONS)
            dist.update({k: tuple(v) for k, v in data["distributions"].items()})
            data["distributions"] = dist
        return cls(**data)


@dataclass(frozen=True)
class SyntheticData:
    dataset: Dataset
    truth: ParameterStore
    masked: dict  # pair -> EventSequence withheld from ``dataset``
    config: SyntheticConfig

    def full_dataset(self) -> Dataset:
        seqs = dict(self.dataset.sequences)
        seqs.update({k: q for k, q in self.masked.items() if len(q)})
        return Dataset(self.dataset.students, self.dataset.assignments, seqs, self.dataset.grades, self.dataset.course_end)


def _draw(rng, mean, sd, shape, lo, hi):
    return np.clip(rng.normal(mean, sd, size=shape), lo, hi)


def _draw_matrix(rng, k, mean, sd, U, N, structure):
    lo, hi = GENERATION_BOUNDS[k]
    if structure == "iid":
        return _draw(rng, mean, sd, (U, N), lo, hi)
    # row + column factors keep each cell N(mean, sd^2) while making the grid low rank
    z = (rng.standard_normal(U)[:, None] + rng.standard_normal(N)[None, :]) / math.sqrt(2.0)
    return np.clip(mean + sd * z, lo, hi)


def generate_synthetic(config: SyntheticConfig, threads: int = 1) -> SyntheticData:
    """Draw ground-truth parameters, sample every pair, and mask a fraction of pairs."""
    rng = np.random.default_rng(config.seed)
    U, N, dist = config.U, config.N, config.distributions
    vec = {k: _draw(rng, *dist[k], U, *GENERATION_BOUNDS[k]) for k in ("c", "p", "b", "v")}
    mat = {k: _draw_matrix(rng, k, *dist[k], U, N, config.structure) for k in ("A", "M", "Gh", "Go", "Gd")}

    # pairs whose deadline effect would end before opening are redrawn
    M = mat["M"]
    for i, j in zip(*np.nonzero(config.deadline - M <= DEADLINE_MARGIN)):
        for _ in range(MAX_REDRAWS):
            M[i, j] = rng.normal(*dist["M"])
            if config.deadline - M[i, j] > DEADLINE_MARGIN:
                break
        else:
            raise ValueError(f"could not draw a deadline offset below d for pair ({i}, {j})")

    truth = ParameterStore(config.beta, config.s, **vec, **mat)
    students = tuple(f"s{i:04d}" for i in range(U))
    assignments = tuple(AssignmentSchedule(f"a{j:03d}", 0.0, config.deadline) for j in range(N))
    T = config.window

    def run(cell):
        i, j = cell
        pair = truth.pair(i, j, config.deadline)
        cell_rng = np.random.default_rng([config.seed, i, j])
        return sample_sequence(pair, 0.0, T, rng=cell_rng, ids=(students[i], assignments[j].assignment_id))

    cells = [(i, j) for i in range(U) for j in range(N)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            seqs = list(pool.map(run, cells))
    else:
        seqs = [run(c) for c in cells]

    n_mask = int(math.floor(config.mask_fraction * U * N))
    masked_idx = set(rng.permutation(U * N)[:n_mask].tolist())
    kept, masked = {}, {}
    for n, (cell, q) in enumerate(zip(cells, seqs)):
        if n in masked_idx:
            masked[q.pair] = q
        elif len(q):
            kept[q.pair] = q
    dataset = Dataset(students, assignments, kept, {}, T)
    return SyntheticData(dataset, truth, masked, config)
