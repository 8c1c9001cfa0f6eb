"""Domain types, dataset ingestion, train/test splitting and parameter initialization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

VECTOR_SYMBOLS = ("c", "p", "b", "v")
MATRIX_SYMBOLS = ("A", "M", "Gh", "Go", "Gd")

# constraint boxes; None means unbounded on that side
B_EPS = 1e-6
V_MIN = 1e-6
VECTOR_BOUNDS = {
    "c": (1.0, None),
    "p": (None, None),
    "b": (B_EPS, 1.0 - B_EPS),
    "v": (V_MIN, None),
}
NONNEG_MATRICES = ("A", "Gh", "Go", "Gd")


class DataError(ValueError):
    """Raised when input data violates a file schema or a domain invariant."""


@dataclass(frozen=True)
class Components:
    """Which intensity terms are active; turning one off gives an ablated model."""

    excitation: bool = True
    opening: bool = True
    habit: bool = True
    deadline: bool = True

    @classmethod
    def ablate(cls, letters: str | None) -> "Components":
        """Build flags from ablation letters: ``s`` excitation, ``o``, ``h``, ``d``."""
        letters = letters or ""
        unknown = set(letters) - set("sohd,")
        if unknown:
            raise ValueError(f"unknown ablation letters: {sorted(unknown)}")
        return cls(
            excitation="s" not in letters,
            opening="o" not in letters,
            habit="h" not in letters,
            deadline="d" not in letters,
        )

    def as_dict(self) -> dict[str, bool]:
        return {
            "excitation": self.excitation,
            "opening": self.opening,
            "habit": self.habit,
            "deadline": self.deadline,
        }


@dataclass(frozen=True)
class AssignmentSchedule:
    assignment_id: str
    open_time: float
    deadline: float  # scaled units (hours / s), measured from course start
    label: str = ""

    def relative_deadline(self, s: float) -> float:
        """Deadline in scaled units on the pair clock, which starts at opening."""
        return self.deadline - self.open_time / s


@dataclass(frozen=True)
class EventSequence:
    student_id: str
    assignment_id: str
    timestamps: np.ndarray
    window_start: float
    window_end: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        if ts.ndim != 1:
            raise DataError("timestamps must be one-dimensional")
        if self.window_end <= self.window_start:
            raise DataError("window_end must exceed window_start")
        if ts.size:
            if np.any(np.diff(ts) <= 0):
                raise DataError("timestamps must be strictly increasing")
            if ts[0] <= self.window_start or ts[-1] > self.window_end:
                raise DataError(
                    f"timestamps of ({self.student_id}, {self.assignment_id}) "
                    f"fall outside ({self.window_start}, {self.window_end}]"
                )

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def pair(self) -> tuple[str, str]:
        return (self.student_id, self.assignment_id)

    def __eq__(self, other):
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (
            self.pair == other.pair
            and self.window_start == other.window_start
            and self.window_end == other.window_end
            and np.array_equal(self.timestamps, other.timestamps)
        )

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    students: tuple[str, ...]
    assignments: tuple[AssignmentSchedule, ...]
    sequences: dict[tuple[str, str], EventSequence]
    grades: dict[tuple[str, str], float] = field(default_factory=dict)
    course_end: float = 0.0

    def __post_init__(self):
        if not self.students or not self.assignments:
            raise DataError("a dataset needs at least one student and one assignment")
        known_s = set(self.students)
        known_a = {a.assignment_id for a in self.assignments}
        for key in self.sequences:
            if key[0] not in known_s or key[1] not in known_a:
                raise DataError(f"sequence {key} references an unknown id")

    @property
    def U(self) -> int:
        return len(self.students)

    @property
    def N(self) -> int:
        return len(self.assignments)

    def student_index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.students)}

    def assignment_index(self) -> dict[str, int]:
        return {a.assignment_id: j for j, a in enumerate(self.assignments)}

    def schedule(self, assignment_id: str) -> AssignmentSchedule:
        for a in self.assignments:
            if a.assignment_id == assignment_id:
                return a
        raise KeyError(assignment_id)

    def observed(self) -> list[EventSequence]:
        """Nonempty sequences in (student, assignment) grid order."""
        si, ai = self.student_index(), self.assignment_index()
        seqs = [q for q in self.sequences.values() if len(q) > 0]
        return sorted(seqs, key=lambda q: (si[q.student_id], ai[q.assignment_id]))

    def pair_window(self, student_id: str, assignment_id: str) -> tuple[float, float]:
        seq = self.sequences.get((student_id, assignment_id))
        if seq is not None:
            return seq.window_start, seq.window_end
        sched = self.schedule(assignment_id)
        return 0.0, self.course_end - sched.open_time


# --------------------------------------------------------------------------
# ingestion


def _float(value: str, what: str, row: int, path: Path) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise DataError(f"{path.name} row {row}: non-numeric {what} {value!r}") from None
    if not math.isfinite(x):
        raise DataError(f"{path.name} row {row}: non-finite {what} {value!r}")
    return x


def _read_rows(path: Path, header: list[str]) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames][: len(header)] != header:
            raise DataError(f"{path.name}: expected header {','.join(header)}")
        return list(reader)


def load_dataset(
    events_path,
    assignments_path,
    grades_path=None,
    *,
    course_end: float | None = None,
    s: float = 24.0,
) -> Dataset:
    """Read the events/assignments/grades CSV files into a :class:`Dataset`.

    Event timestamps in the file are hours from course start; they are stored
    relative to each assignment's opening. ``course_end`` closes every pair's
    window; when omitted it is taken as the latest event or deadline.
    """
    events_path, assignments_path = Path(events_path), Path(assignments_path)

    schedules: list[AssignmentSchedule] = []
    seen = set()
    for n, row in enumerate(
        _read_rows(assignments_path, ["assignment_id", "open_time_hours", "deadline_scaled"]), start=2
    ):
        aid = row["assignment_id"].strip()
        if aid in seen:
            raise DataError(f"{assignments_path.name} row {n}: duplicate assignment {aid!r}")
        seen.add(aid)
        open_t = _float(row["open_time_hours"], "open time", n, assignments_path)
        dl = _float(row["deadline_scaled"], "deadline", n, assignments_path)
        if open_t < 0:
            raise DataError(f"{assignments_path.name} row {n}: negative open time")
        if dl * s <= open_t:
            raise DataError(f"{assignments_path.name} row {n}: deadline does not follow opening")
        schedules.append(AssignmentSchedule(aid, open_t, dl, (row.get("label") or "").strip()))
    by_id = {a.assignment_id: a for a in schedules}

    raw: dict[tuple[str, str], set[float]] = {}
    students: list[str] = []
    seen_students: set[str] = set()
    for n, row in enumerate(
        _read_rows(events_path, ["student_id", "assignment_id", "timestamp_hours"]), start=2
    ):
        sid, aid = row["student_id"].strip(), row["assignment_id"].strip()
        if aid not in by_id:
            raise DataError(f"{events_path.name} row {n}: unknown assignment {aid!r}")
        t = _float(row["timestamp_hours"], "timestamp", n, events_path)
        if t < 0:
            raise DataError(f"{events_path.name} row {n}: negative timestamp {t}")
        if t <= by_id[aid].open_time:
            raise DataError(f"{events_path.name} row {n}: event precedes opening of {aid!r}")
        if sid not in seen_students:
            seen_students.add(sid)
            students.append(sid)
        raw.setdefault((sid, aid), set()).add(t)

    grades: dict[tuple[str, str], float] = {}
    if grades_path is not None:
        grades_path = Path(grades_path)
        for n, row in enumerate(
            _read_rows(grades_path, ["student_id", "assignment_id", "grade"]), start=2
        ):
            sid, aid = row["student_id"].strip(), row["assignment_id"].strip()
            if aid not in by_id:
                raise DataError(f"{grades_path.name} row {n}: unknown assignment {aid!r}")
            if sid not in seen_students:
                seen_students.add(sid)
                students.append(sid)
            grades[(sid, aid)] = _float(row["grade"], "grade", n, grades_path)

    if course_end is None:
        latest = [max(ts) for ts in raw.values()] + [a.deadline * s for a in schedules]
        course_end = max(latest)
    for (sid, aid), ts in raw.items():
        if max(ts) > course_end:
            raise DataError(f"events of ({sid}, {aid}) fall after course end {course_end}")

    sequences = {}
    for key, ts in raw.items():
        sched = by_id[key[1]]
        rel = np.array(sorted(ts)) - sched.open_time
        sequences[key] = EventSequence(key[0], key[1], rel, 0.0, course_end - sched.open_time)
    return Dataset(tuple(students), tuple(schedules), sequences, grades, float(course_end))


def write_dataset(dataset: Dataset, directory, *, with_grades: bool = True) -> dict[str, Path]:
    """Write the dataset as events.csv / assignments.csv / grades.csv under ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {a.assignment_id: a for a in dataset.assignments}
    paths = {"events": out / "events.csv", "assignments": out / "assignments.csv"}
    with open(paths["assignments"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["assignment_id", "open_time_hours", "deadline_scaled", "label"])
        for a in dataset.assignments:
            w.writerow([a.assignment_id, repr(float(a.open_time)), repr(float(a.deadline)), a.label])
    with open(paths["events"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "assignment_id", "timestamp_hours"])
        for seq in dataset.observed():
            offset = by_id[seq.assignment_id].open_time
            for t in seq.timestamps:
                w.writerow([seq.student_id, seq.assignment_id, repr(float(t + offset))])
    if with_grades and dataset.grades:
        paths["grades"] = out / "grades.csv"
        with open(paths["grades"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["student_id", "assignment_id", "grade"])
            for (sid, aid), g in sorted(dataset.grades.items()):
                w.writerow([sid, aid, repr(float(g))])
    return paths


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    partial_test: dict[tuple[str, str], np.ndarray]
    complete_test: dict[tuple[str, str], EventSequence]
    holdout_fraction: float
    train_fraction: float
    seed: int


def split_dataset(
    dataset: Dataset,
    holdout_fraction: float = 0.2,
    train_fraction: float = 0.7,
    seed: int = 0,
    *,
    holdout_pairs=None,
) -> SplitDataset:
    """Hold out whole pairs, then cut each remaining pair chronologically.

    The training copy of a cut pair ends its observation window at its last
    training event, since nothing after that point was observed. Passing
    ``holdout_pairs`` fixes the held-out set (e.g. the masked synthetic pairs)
    instead of drawing it.
    """
    if not 0 <= holdout_fraction < 1:
        raise ValueError("holdout_fraction must be in [0, 1)")
    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must be in (0, 1]")
    observed = dataset.observed()
    if holdout_pairs is not None:
        wanted = set(holdout_pairs)
        held = {n for n, q in enumerate(observed) if q.pair in wanted}
        n_hold = len(held)
    else:
        n_hold = int(math.floor(holdout_fraction * len(observed)))
        rng = np.random.default_rng(seed)
        held = set(rng.permutation(len(observed))[:n_hold].tolist())
    if len(observed) - n_hold < 1:
        raise ValueError("holdout leaves no training pairs")

    train, partial, complete = {}, {}, {}
    for idx, seq in enumerate(observed):
        if idx in held:
            complete[seq.pair] = seq
            continue
        k = int(math.ceil(train_fraction * len(seq)))
        head, tail = seq.timestamps[:k], seq.timestamps[k:]
        end = float(head[-1]) if tail.size else seq.window_end
        train[seq.pair] = EventSequence(seq.student_id, seq.assignment_id, head, seq.window_start, end)
        if tail.size:
            partial[seq.pair] = tail.copy()
    train_ds = replace(dataset, sequences=train)
    return SplitDataset(train_ds, partial, complete, holdout_fraction, train_fraction, seed)


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class HyperParams:
    beta: float = 1.0
    s: float = 24.0
    gamma0: float = 100.0
    eta: float = 2.0
    rho: float = 1.0
    max_iter: int = 500
    tol: float = 1e-5
    n_trials: int = 1000
    z_max: int = 10

    def __post_init__(self):
        for name in ("beta", "s", "gamma0", "eta", "max_iter", "tol", "n_trials", "z_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.eta <= 1:
            raise ValueError("eta must exceed 1")


@dataclass
class ParameterStore:
    beta: float
    s: float
    c: np.ndarray
    p: np.ndarray
    b: np.ndarray
    v: np.ndarray
    A: np.ndarray
    M: np.ndarray
    Gh: np.ndarray
    Go: np.ndarray
    Gd: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def blocks(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in VECTOR_SYMBOLS + MATRIX_SYMBOLS}

    def with_blocks(self, blocks: dict[str, np.ndarray]) -> "ParameterStore":
        merged = {**self.blocks(), **blocks}
        return ParameterStore(self.beta, self.s, **{k: np.array(v, dtype=float) for k, v in merged.items()})

    def copy(self) -> "ParameterStore":
        return self.with_blocks({})

    def check(self, d: np.ndarray | None = None) -> None:
        """Raise ``ValueError`` unless every box constraint holds."""
        U, N = self.shape
        for k in MATRIX_SYMBOLS:
            if getattr(self, k).shape != (U, N):
                raise ValueError(f"{k} must have shape {(U, N)}")
        for k in VECTOR_SYMBOLS:
            if getattr(self, k).shape != (U,):
                raise ValueError(f"{k} must have length {U}")
        for k, arr in self.blocks().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{k} has non-finite entries")
        for k in NONNEG_MATRICES:
            if np.any(getattr(self, k) < 0):
                raise ValueError(f"{k} must be nonnegative")
        for k, (lo, hi) in VECTOR_BOUNDS.items():
            arr = getattr(self, k)
            if lo is not None and np.any(arr < lo):
                raise ValueError(f"{k} below {lo}")
            if hi is not None and np.any(arr > hi):
                raise ValueError(f"{k} above {hi}")
        if d is not None and np.any(np.asarray(d)[None, :] - self.M <= 0):
            raise ValueError("deadline offset m must stay below d")

    def pair(self, i: int, j: int, d: float, components: Components = Components()) -> "PairParameters":
        return PairParameters(
            alpha=float(self.A[i, j]),
            beta=self.beta,
            s=self.s,
            p=float(self.p[i]),
            c=float(self.c[i]),
            b=float(self.b[i]),
            v=float(self.v[i]),
            m=float(self.M[i, j]),
            gamma_h=float(self.Gh[i, j]),
            gamma_o=float(self.Go[i, j]),
            gamma_d=float(self.Gd[i, j]),
            d=float(d),
            components=components,
        )

    def to_dict(self) -> dict:
        out = {"beta": self.beta, "s": self.s}
        for k in VECTOR_SYMBOLS:
            out[k] = [float(x) for x in getattr(self, k)]
        for k in MATRIX_SYMBOLS:
            out[k] = [[float(x) for x in row] for row in getattr(self, k)]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterStore":
        arrays = {k: np.array(data[k], dtype=float) for k in VECTOR_SYMBOLS + MATRIX_SYMBOLS}
        return cls(float(data["beta"]), float(data["s"]), **arrays)


@dataclass(frozen=True)
class PairParameters:
    alpha: float
    beta: float
    s: float
    p: float
    c: float
    b: float
    v: float
    m: float
    gamma_h: float
    gamma_o: float
    gamma_d: float
    d: float
    components: Components = Components()


INIT_DEFAULTS = {"A": 0.1, "M": 0.0, "Gd": 1.0, "Go": 1.0, "Gh": 0.5, "v": 10.0, "b": 0.5, "p": 0.0, "c": 1.1}


def init_parameters(U: int, N: int, seed: int = 0, init_config: dict | None = None, *, beta: float = 1.0, s: float = 24.0) -> ParameterStore:
    """Draw a feasible starting point.

    ``init_config`` maps a symbol to a center value or to a ``(lo, hi)`` range;
    symbols given as a center get the default +/-10% uniform jitter.
    """
    if U < 1 or N < 1:
        raise ValueError("U and N must be at least 1")
    cfg = dict(INIT_DEFAULTS)
    cfg.update(init_config or {})
    rng = np.random.default_rng(seed)
    arrays = {}
    for k in VECTOR_SYMBOLS + MATRIX_SYMBOLS:
        given = cfg[k]
        if isinstance(given, (tuple, list)):
            lo, hi = float(given[0]), float(given[1])
        else:
            lo, hi = sorted((0.9 * float(given), 1.1 * float(given)))
            if k not in (init_config or {}):
                lo, hi = _intersect(k, lo, hi)
        _check_range(k, lo, hi)
        shape = (U,) if k in VECTOR_SYMBOLS else (U, N)
        arrays[k] = rng.uniform(lo, hi, size=shape)
    store = ParameterStore(float(beta), float(s), **arrays)
    store.check()
    return store


def _intersect(k: str, lo: float, hi: float) -> tuple[float, float]:
    blo, bhi = VECTOR_BOUNDS.get(k, (0.0 if k in NONNEG_MATRICES else None, None))
    if blo is not None:
        lo, hi = max(lo, blo), max(hi, blo)
    if bhi is not None:
        lo, hi = min(lo, bhi), min(hi, bhi)
    return lo, hi


def _check_range(k: str, lo: float, hi: float) -> None:
    if hi < lo:
        raise ValueError(f"init range for {k} is empty")
    if k in NONNEG_MATRICES and lo < 0:
        raise ValueError(f"init range for {k} must be nonnegative")
    if k in VECTOR_BOUNDS:
        blo, bhi = VECTOR_BOUNDS[k]
        if (blo is not None and lo < blo) or (bhi is not None and hi > bhi):
            raise ValueError(f"init range for {k} violates its constraint")
