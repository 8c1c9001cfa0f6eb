"""Clustering of fitted pair parameters and grade association tests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import gammaincc

from .inference import FittedModel

FEATURES = ("alpha", "m", "gamma_d", "gamma_o", "gamma_h", "v", "b", "p", "c")
# display scaling used for centroid plot data
DISPLAY_SCALE = {"m": 1.0 / 24.0, "alpha": 10.0, "b": 10.0}
DEFAULT_RESTARTS = 20
KMEANS_MAX_ITER = 300


@dataclass(frozen=True)
class PairFeature:
    student_id: str
    assignment_id: str
    alpha: float
    m: float
    gamma_d: float
    gamma_o: float
    gamma_h: float
    v: float
    b: float
    p: float
    c: float

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FEATURES])

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector())):
            raise ValueError(f"non-finite feature for pair {(self.student_id, self.assignment_id)}")


def pair_features(model: FittedModel, pairs=None) -> list[PairFeature]:
    """Feature rows for ``pairs`` (default: every grid cell, row-major)."""
    P = model.params
    si = {u: n for n, u in enumerate(model.students)}
    ai = {a: n for n, a in enumerate(model.assignments)}
    if pairs is None:
        pairs = [(u, a) for u in model.students for a in model.assignments]
    out = []
    for u, a in pairs:
        i, j = si[u], ai[a]
        out.append(PairFeature(u, a, P.A[i, j], P.M[i, j], P.Gd[i, j], P.Go[i, j], P.Gh[i, j], P.v[i], P.b[i], P.p[i], P.c[i]))
    return out


def _as_matrix(features) -> np.ndarray:
    if len(features) and isinstance(features[0], PairFeature):
        return np.array([f.vector() for f in features])
    X = np.asarray(features, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero mean, unit variance per column; constant columns are only centred."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mu) / sd, mu, sd


def _plusplus(Z, k, rng):
    centers = [Z[rng.integers(len(Z))]]
    d2 = np.sum((Z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(Z), p=d2 / total) if total > 0 else rng.integers(len(Z))
        centers.append(Z[idx])
        d2 = np.minimum(d2, np.sum((Z - Z[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(Z, centers):
    labels = None
    for _ in range(KMEANS_MAX_ITER):
        dist = np.sum((Z[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centers)):
            members = Z[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    loss = float(np.sum((Z - centers[labels]) ** 2))
    return labels, centers, loss


@dataclass(frozen=True)
class ClusterReport:
    k: int
    labels: np.ndarray
    centroids: np.ndarray  # original units
    loss: float  # within-cluster sum of squares, standardized units
    restart_losses: tuple[float, ...]
    feature_ci: np.ndarray | None = None  # k x dim x 2
    grade_summary: dict | None = None


def kmeans(features, k: int, seed=0, restarts: int = DEFAULT_RESTARTS) -> ClusterReport:
    """Best-of-``restarts`` k-means++ on standardized features."""
    X = _as_matrix(features)
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(np.unique(X, axis=0)) < k:
        raise ValueError(f"fewer distinct points than k={k}")
    Z, mu, sd = standardize(X)
    best = None
    losses = []
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        labels, centers, loss = _lloyd(Z, _plusplus(Z, k, rng))
        losses.append(loss)
        if best is None or loss < best[2]:
            best = (labels, centers, loss)
    labels, centers, loss = best
    # relabel by first appearance so output does not depend on seeding order
    order = list(dict.fromkeys(labels.tolist()))
    order += [c for c in range(k) if c not in order]
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    labels = remap[labels]
    centers = centers[order]
    centroids = np.array([X[labels == c].mean(axis=0) if np.any(labels == c) else centers[c] * sd + mu for c in range(k)])
    return ClusterReport(k, labels, centroids, loss, tuple(losses), _feature_ci(X, labels, k))


def _feature_ci(X, labels, k):
    ci = np.full((k, X.shape[1], 2), np.nan)
    for c in range(k):
        members = X[labels == c]
        if len(members) == 0:
            continue
        half = 1.96 * members.std(axis=0, ddof=1) / math.sqrt(len(members)) if len(members) > 1 else 0.0
        mean = members.mean(axis=0)
        ci[c, :, 0], ci[c, :, 1] = mean - half, mean + half
    return ci


def elbow_scan(features, k_range, seed=0, restarts: int = DEFAULT_RESTARTS) -> tuple[dict[int, float], int | None]:
    """Clustering loss per k and the k of largest discrete curvature."""
    ks = list(k_range)
    if not ks or any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("k_range must be nonempty and ascending")
    losses = {k: kmeans(features, k, seed, restarts).loss for k in ks}
    inner = [(losses[ks[n - 1]] - 2 * losses[ks[n]] + losses[ks[n + 1]], ks[n]) for n in range(1, len(ks) - 1)]
    suggested = max(inner, key=lambda t: (t[0], -t[1]))[1] if inner else None
    return losses, suggested


def _ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def kruskal_wallis(groups) -> tuple[float, float]:
    """Tie-corrected Kruskal-Wallis H and its chi-squared p-value."""
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    if any(g.size == 0 for g in groups):
        raise ValueError("every group must be nonempty")
    pooled = np.concatenate(groups)
    n = pooled.size
    if n < 3:
        raise ValueError("need at least three observations")
    r = _ranks(pooled)
    rbar = (n + 1) / 2.0
    h, at = 0.0, 0
    for g in groups:
        h += g.size * (r[at : at + g.size].mean() - rbar) ** 2
        at += g.size
    h *= 12.0 / (n * (n + 1))
    _, ties = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(ties**3 - ties)) / (n**3 - n)
    if correction <= 0:
        return 0.0, 1.0
    h /= correction
    return h, float(gammaincc((len(groups) - 1) / 2.0, h / 2.0))


def grade_tests(labels, grades, k: int) -> dict:
    """Omnibus and pairwise Kruskal-Wallis over clusters with grades."""
    by = {c: [g for lab, g in zip(labels, grades) if lab == c and g is not None] for c in range(k)}
    present = [c for c in range(k) if by[c]]
    out = {"groups": {str(c): {"n": len(by[c]), "median": float(np.median(by[c])) if by[c] else None} for c in range(k)}}
    if len(present) >= 2 and sum(len(by[c]) for c in present) >= 3:
        h, p = kruskal_wallis([by[c] for c in present])
        out["omnibus"] = {"H": h, "p": p}
    else:
        out["omnibus"] = None
    pairs = {}
    for a, b in combinations(present, 2):
        if len(by[a]) + len(by[b]) >= 3:
            h, p = kruskal_wallis([by[a], by[b]])
            pairs[f"{a}-{b}"] = {"H": h, "p": p}
    out["pairwise"] = pairs
    return out


def write_cluster_outputs(out_dir, features: list[PairFeature], report: ClusterReport, grade_test: dict, elbow: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "clusters.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("student_id,assignment_id,label\n")
        for f, lab in zip(features, report.labels):
            fh.write(f"{f.student_id},{f.assignment_id},{int(lab)}\n")
    shown = [f for f in FEATURES if f in DISPLAY_SCALE]
    with open(out / "centroids.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["cluster", "size", *FEATURES, *(f"{f}_display" for f in shown)]) + "\n")
        for c, row in enumerate(report.centroids):
            size = int(np.sum(report.labels == c))
            vals = [repr(float(x)) for x in row]
            disp = [repr(float(row[FEATURES.index(f)] * DISPLAY_SCALE[f])) for f in shown]
            fh.write(",".join([str(c), str(size), *vals, *disp]) + "\n")
    doc = dict(grade_test, k=report.k, loss=report.loss)
    if elbow is not None:
        doc["elbow"] = elbow
    with open(out / "grade_test.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
