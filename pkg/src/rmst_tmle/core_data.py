"""Observed-data model for discrete-time right-censored trial data.

A participant is summarised by ``(W, A, Delta, T~)``: baseline covariates,
arm, event indicator and the observed time ``T~ = min(C, T)`` on the grid
``0..K``.  The counting-process encoding lays the same information out as
the sequence ``R_0, L_1, R_1, L_2, ..., R_{K-1}, L_K`` where ``L_t`` flags an
observed event at ``t`` and ``R_t`` a censoring at ``t``.  Within a time
point the event comes before the censoring, so a subject censored at ``m``
is still at event risk at ``m``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DataValidationError",
    "SubjectRecord",
    "Dataset",
    "LongForm",
    "encode_counting",
    "risk_indicators",
    "expand_long",
    "reconstruct",
    "validate_dataset",
    "read_csv",
    "write_long_csv",
]


class DataValidationError(ValueError):
    """Raised when raw records do not form a valid dataset.

    The ``errors`` attribute holds one human-readable diagnostic per problem.
    """

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        head = "; ".join(self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} validation error(s): {head}{more}")


@dataclass(frozen=True)
class SubjectRecord:
    id: Any
    w: tuple[float, ...]
    a: int
    delta: int
    t_tilde: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Short-form sample held as column arrays.

    Parameters
    ----------
    ids : sequence
        Opaque subject identifiers, unique.
    w : ndarray, shape (n, p)
        Baseline covariates.
    a, delta, t_tilde : ndarray of int, shape (n,)
        Arm, event indicator and observed time.
    k_max : int
        Last monitoring time ``K``.
    covariate_names : tuple of str
    """

    ids: tuple
    w: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    t_tilde: np.ndarray
    k_max: int
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 0) if w.size == 0 else w.reshape(len(w), -1)
        object.__setattr__(self, "w", w)
        for name in ("a", "delta", "t_tilde"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not self.covariate_names:
            names = tuple(f"w{j + 1}" for j in range(w.shape[1]))
            object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def n(self) -> int:
        return len(self.a)

    @property
    def p(self) -> int:
        return self.w.shape[1]

    @property
    def records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(self.ids[i], tuple(self.w[i]), int(self.a[i]),
                          int(self.delta[i]), int(self.t_tilde[i]))
            for i in range(self.n)
        ]

    def subset(self, index: np.ndarray, relabel: bool = False) -> "Dataset":
        """Rows ``index`` (may repeat).  ``relabel`` makes ids unique again."""
        index = np.asarray(index, dtype=np.int64)
        ids = tuple(range(len(index))) if relabel else tuple(self.ids[i] for i in index)
        return Dataset(ids, self.w[index], self.a[index], self.delta[index],
                       self.t_tilde[index], self.k_max, self.covariate_names)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], k_max: int,
                     covariate_names: Sequence[str] = ()) -> "Dataset":
        records = list(records)
        p = len(records[0].w) if records else 0
        return cls(
            ids=tuple(r.id for r in records),
            w=np.array([r.w for r in records], dtype=float).reshape(len(records), p),
            a=[r.a for r in records],
            delta=[r.delta for r in records],
            t_tilde=[r.t_tilde for r in records],
            k_max=k_max,
            covariate_names=tuple(covariate_names),
        )


@dataclass(frozen=True, eq=False)
class LongForm:
    """Person-period rows ``(m, W, A, J_m, R_m, I_{m+1}, L_{m+1})``.

    One row per subject and ``m = 0..K-1``; rows after the subject's terminal
    transition are omitted.  All attributes are aligned arrays.
    """

    subject: np.ndarray
    m: np.ndarray
    j: np.ndarray
    r: np.ndarray
    i_next: np.ndarray
    l_next: np.ndarray
    a: np.ndarray
    k_max: int

    def __len__(self) -> int:
        return len(self.m)


def _check_record(t_tilde: int, delta: int, k: int) -> None:
    if not 0 <= t_tilde <= k:
        raise DataValidationError([f"time {t_tilde} outside 0..{k}"])
    if delta == 1 and t_tilde < 1:
        raise DataValidationError(["event time must be >=1"])


def encode_counting(record: SubjectRecord, k: int) -> np.ndarray:
    """Counting-process sequence ``(R_0, L_1, R_1, ..., R_{K-1}, L_K)``.

    Returns an int array of length ``2K``; position ``2t`` holds ``R_t`` and
    position ``2t - 1`` holds ``L_t``.
    """
    t, d = int(record.t_tilde), int(record.delta)
    _check_record(t, d, k)
    seq = np.zeros(2 * k, dtype=np.int64)
    if d == 1:
        seq[2 * t - 1] = 1
    elif t < k:
        seq[2 * t] = 1
    return seq


def risk_indicators(seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Risk indicators from a counting-process sequence.

    Returns ``(I, J)`` of length ``K + 1``: ``I[t]`` for ``t >= 1`` is
    ``1{R_0..R_{t-1} = 0, L_1..L_{t-1} = 0}`` and ``J[t]`` is
    ``1{R_0..R_{t-1} = 0, L_1..L_t = 0}``.  ``J[0] = 1`` by convention and
    ``I[0]`` is unused (set to 1).
    """
    k = len(seq) // 2
    # seen[s] = any nonzero among the first s entries of the sequence
    seen = np.concatenate([[0], np.cumsum(seq)]) > 0
    i_ind = np.ones(k + 1, dtype=np.int64)
    j_ind = np.ones(k + 1, dtype=np.int64)
    for t in range(1, k + 1):
        # entries before L_t: R_0, L_1, ..., L_{t-1}, R_{t-1} -> first 2t-1
        i_ind[t] = 0 if seen[2 * t - 1] else 1
        # entries through L_t: first 2t
        j_ind[t] = 0 if seen[2 * t] else 1
    return i_ind, j_ind


def expand_long(dataset: Dataset) -> LongForm:
    """Expand a dataset into its long form.

    Subject ``i`` contributes rows ``m = 0..min(T~_i, K-1)`` when censored and
    ``m = 0..T~_i - 1`` when its event is observed.
    """
    k = dataset.k_max
    tt, d = dataset.t_tilde, dataset.delta
    last = np.where(d == 1, tt - 1, np.minimum(tt, k - 1))
    counts = last + 1
    subject = np.repeat(np.arange(dataset.n), counts)
    starts = np.cumsum(counts) - counts
    m = np.arange(counts.sum()) - np.repeat(starts, counts)
    ts, ds = tt[subject], d[subject]
    j = ((ts > m) | ((ts == m) & (ds == 0))).astype(np.int64)
    r = ((ts == m) & (ds == 0)).astype(np.int64)
    i_next = (ts > m).astype(np.int64)
    l_next = ((ts == m + 1) & (ds == 1)).astype(np.int64)
    return LongForm(subject, m, j, r, i_next, l_next, dataset.a[subject], k)


def reconstruct(long: LongForm, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Recover ``(delta, t_tilde)`` per subject from long-form rows."""
    delta = np.zeros(n, dtype=np.int64)
    t_tilde = np.full(n, long.k_max, dtype=np.int64)
    ev = long.l_next == 1
    delta[long.subject[ev]] = 1
    t_tilde[long.subject[ev]] = long.m[ev] + 1
    ce = long.r == 1
    t_tilde[long.subject[ce]] = long.m[ce]
    return delta, t_tilde


def _as_int(value, name, errors, where):
    try:
        f = float(value)
    except (TypeError, ValueError):
        errors.append(f"{where}: {name} {value!r} is not a number")
        return None
    if not math.isfinite(f) or f != int(f):
        errors.append(f"{where}: {name} {value!r} is not an integer")
        return None
    return int(f)


def validate_dataset(raw: Iterable[Any], k: int | None = None,
                     covariate_names: Sequence[str] = ()) -> Dataset:
    """Validate raw records and build a :class:`Dataset`.

    ``raw`` items may be :class:`SubjectRecord` instances or mappings with
    keys ``id, w, a, delta, t_tilde``.  When ``k`` is None it is taken as the
    largest observed time.  Raises :class:`DataValidationError` listing every
    problem found.
    """
    rows = []
    for item in raw:
        if isinstance(item, Mapping):
            rows.append((item.get("id"), item.get("w", ()), item.get("a"),
                         item.get("delta"), item.get("t_tilde")))
        else:
            rows.append((item.id, item.w, item.a, item.delta, item.t_tilde))
    errors: list[str] = []
    if not rows:
        raise DataValidationError(["no records"])

    parsed = []
    p = None
    seen_ids: dict[Any, int] = {}
    for idx, (rid, w, a, d, t) in enumerate(rows):
        where = f"record {idx} (id={rid!r})"
        if rid in seen_ids:
            errors.append(f"{where}: duplicate id (first seen at record {seen_ids[rid]})")
        else:
            seen_ids[rid] = idx
        a_i = _as_int(a, "arm", errors, where)
        if a_i is not None and a_i not in (0, 1):
            errors.append(f"{where}: arm must be 0 or 1, got {a_i}")
        d_i = _as_int(d, "event", errors, where)
        if d_i is not None and d_i not in (0, 1):
            errors.append(f"{where}: event indicator must be 0 or 1, got {d_i}")
        t_i = _as_int(t, "time", errors, where)
        if t_i is not None and t_i < 0:
            errors.append(f"{where}: time must be >=0, got {t_i}")
        if t_i is not None and d_i == 1 and t_i == 0:
            errors.append(f"{where}: event time must be >=1")
        try:
            w_arr = np.asarray([float(x) for x in w], dtype=float)
        except (TypeError, ValueError):
            errors.append(f"{where}: covariates are not numeric")
            w_arr = None
        if w_arr is not None:
            if np.isnan(w_arr).any() or np.isinf(w_arr).any():
                errors.append(f"{where}: missing or non-finite covariate value")
            if p is None:
                p = len(w_arr)
            elif len(w_arr) != p:
                errors.append(f"{where}: expected {p} covariates, got {len(w_arr)}")
        parsed.append((rid, w_arr, a_i, d_i, t_i))

    times = [t for *_, t in parsed if t is not None]
    if k is None:
        k = max(times) if times else 0
    if k < 1:
        errors.append(f"K must be >=1, got {k}")
    for idx, (rid, _, _, _, t) in enumerate(parsed):
        if t is not None and t > k:
            errors.append(f"record {idx} (id={rid!r}): time {t} exceeds K={k}")
    arms = {a for _, _, a, _, _ in parsed}
    for arm in (0, 1):
        if arm not in arms:
            errors.append(f"arm {arm} has no subjects")
    if covariate_names and p is not None and len(covariate_names) != p:
        errors.append(f"{len(covariate_names)} covariate names for {p} covariates")
    if errors:
        raise DataValidationError(errors)

    p = p or 0
    return Dataset(
        ids=tuple(r[0] for r in parsed),
        w=np.array([r[1] for r in parsed], dtype=float).reshape(len(parsed), p),
        a=[r[2] for r in parsed],
        delta=[r[3] for r in parsed],
        t_tilde=[r[4] for r in parsed],
        k_max=int(k),
        covariate_names=tuple(covariate_names),
    )


REQUIRED_COLUMNS = ("id", "arm", "time", "event")


def read_csv(path, k: int | None = None) -> Dataset:
    """Read ``id, arm, time, event, <covariates...>`` with a header row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(["empty file"]) from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataValidationError([f"missing column(s): {', '.join(missing)}"])
        pos = {c: header.index(c) for c in REQUIRED_COLUMNS}
        cov_cols = [i for i, h in enumerate(header) if h not in REQUIRED_COLUMNS]
        raw = []
        errors = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                errors.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            w = []
            for i in cov_cols:
                cell = row[i].strip()
                w.append(float("nan") if cell in ("", "NA", "nan") else cell)
            raw.append({"id": row[pos["id"]].strip(), "a": row[pos["arm"]].strip(),
                        "delta": row[pos["event"]].strip(),
                        "t_tilde": row[pos["time"]].strip(), "w": w})
    if errors:
        raise DataValidationError(errors)
    return validate_dataset(raw, k, [header[i] for i in cov_cols])


def write_long_csv(dataset: Dataset, path) -> None:
    """Write the long form as ``id, m, a, w..., J, R, I_next, L_next``."""
    long = expand_long(dataset)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["id", "m", "a", *dataset.covariate_names, "J", "R", "I_next", "L_next"])
        for row in range(len(long)):
            i = long.subject[row]
            out.writerow([dataset.ids[i], long.m[row], long.a[row],
                          *(repr(float(x)) for x in dataset.w[i]),
                          long.j[row], long.r[row], long.i_next[row], long.l_next[row]])
