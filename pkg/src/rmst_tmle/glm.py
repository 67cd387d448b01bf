"""Offset-capable logistic regression and a small model-term grammar.

Every design column is either a *cell* column, a function of the
(time, arm) pair only (intercept, arm, time, time indicators and their arm
interactions), or a *dense* column that varies with covariates.  Rows are
mapped to cells, so cell columns are stored once per cell instead of once
per row.  When the cell columns span every observed cell (the saturated
case) the fit is carried out in the equivalent cell-effect basis, with the
dense block solved through a Schur complement.  Fitted values are the same
in both bases; coefficients are mapped back onto the expanded columns.

Grammar (terms joined by ``+``)::

    1               intercept
    a               arm
    t               time as a real value
    factor(t)       one indicator per time level
    a:factor(t)     arm x time indicators
    a:t             arm x linear time
    w3 / age        covariate main term (by 1-based index or column name)
    a:w3            arm x covariate
    W               every covariate as a main term
    c(name)         custom column supplied at design time
    saturated(t,a)  shorthand for 1 + factor(t) + a + a:factor(t)
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg
from scipy.special import expit

from . import _kernels as _k

__all__ = [
    "GlmError",
    "SpecError",
    "Term",
    "ModelSpec",
    "parse_spec",
    "Design",
    "build_design",
    "LogisticFit",
    "fit_logistic",
    "OffsetFit",
    "fit_offset_1d",
    "predict_prob",
    "predict_logit",
    "predict_logit_grid",
    "clamp_prob",
    "logit",
    "PROB_LO",
    "PROB_HI",
]

PROB_LO = 1e-6
PROB_HI = 1 - 1e-6
RIDGE = 1e-6
MAX_ITER = 100
MAX_HALVING = 10
DEV_TOL = 1e-10
ALIAS_TOL = 1e-9
ROLES = ("h", "g_R", "g_A")

_CELL_KINDS = {"intercept", "arm", "time", "time_factor", "arm:time_factor", "arm:time"}
_TIME_KINDS = {"time", "time_factor", "arm:time_factor", "arm:time"}


class GlmError(ValueError):
    """Raised for specification, design or fitting failures."""


class SpecError(GlmError):
    """A model specification does not parse or does not fit the data's shape."""


def logit(p):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


def clamp_prob(p, lo: float = PROB_LO, hi: float = PROB_HI):
    return np.clip(p, lo, hi)


@dataclass(frozen=True)
class Term:
    kind: str
    index: int | None = None  # covariate index (0-based)
    name: str | None = None  # custom column name

    def label(self, covariate_names=()) -> str:
        if self.kind in ("cov", "arm:cov"):
            w = (covariate_names[self.index] if self.index < len(covariate_names)
                 else f"w{self.index + 1}")
            return w if self.kind == "cov" else f"a:{w}"
        if self.kind == "custom":
            return f"c({self.name})"
        return {"intercept": "1", "arm": "a", "time": "t", "time_factor": "factor(t)",
                "arm:time_factor": "a:factor(t)", "arm:time": "a:t"}[self.kind]


@dataclass(frozen=True)
class ModelSpec:
    """Term list plus the hazard/probability the model is used for."""

    terms: tuple[Term, ...]
    response_role: str
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.terms:
            raise SpecError("model needs at least one term")
        if self.response_role not in ROLES:
            raise SpecError(f"unknown response role {self.response_role!r}")
        if self.response_role == "g_A":
            bad = [t for t in self.terms if t.kind in _TIME_KINDS or t.kind.startswith("arm")]
            if bad:
                raise SpecError("treatment model cannot contain time or arm terms: "
                               + ", ".join(t.label() for t in bad))
        if len(set(self.terms)) != len(self.terms):
            raise SpecError("duplicate terms in model")

    def __str__(self) -> str:
        return " + ".join(t.label(self.covariate_names) for t in self.terms)

    @property
    def has_time_factor(self) -> bool:
        return any(t.kind in ("time_factor", "arm:time_factor") for t in self.terms)

    def check(self, p: int) -> None:
        for t in self.terms:
            if t.index is not None and not 0 <= t.index < p:
                raise SpecError(f"covariate index {t.index + 1} out of range for p={p}")


_COV_RE = re.compile(r"^w(\d+)$")


def _parse_cov(tok: str, names) -> int:
    if tok in names:
        return list(names).index(tok)
    m = _COV_RE.match(tok)
    if m:
        j = int(m.group(1))
        if j < 1:
            raise SpecError(f"covariate index must be >=1 in {tok!r}")
        return j - 1
    raise SpecError(f"unknown term {tok!r}")


def parse_spec(text: str, role: str, covariate_names=(), p: int | None = None) -> ModelSpec:
    """Parse the textual grammar into a :class:`ModelSpec`.

    ``p`` (number of covariates) is needed only to expand ``W``; it defaults
    to ``len(covariate_names)``.
    """
    if p is None:
        p = len(covariate_names)
    terms: list[Term] = []

    def add(t: Term):
        if t not in terms:
            terms.append(t)

    for raw in text.split("+"):
        tok = "".join(raw.split())
        if not tok:
            raise SpecError(f"empty term in {text!r}")
        if tok == "1":
            add(Term("intercept"))
        elif tok == "a":
            add(Term("arm"))
        elif tok == "t":
            add(Term("time"))
        elif tok == "factor(t)":
            add(Term("time_factor"))
        elif tok in ("a:factor(t)", "factor(t):a"):
            add(Term("arm:time_factor"))
        elif tok in ("a:t", "t:a"):
            add(Term("arm:time"))
        elif tok in ("saturated(t,a)", "saturated(a,t)"):
            for k in ("intercept", "time_factor", "arm", "arm:time_factor"):
                add(Term(k))
        elif tok == "W":
            for j in range(p):
                add(Term("cov", j))
        elif tok.startswith("c(") and tok.endswith(")"):
            add(Term("custom", name=tok[2:-1]))
        elif ":" in tok:
            left, right = tok.split(":", 1)
            if left == "a":
                add(Term("arm:cov", _parse_cov(right, covariate_names)))
            elif right == "a":
                add(Term("arm:cov", _parse_cov(left, covariate_names)))
            else:
                raise SpecError(f"unknown term {tok!r}")
        else:
            add(Term("cov", _parse_cov(tok, covariate_names)))
    spec = ModelSpec(tuple(terms), role, tuple(covariate_names))
    if p:
        spec.check(p)
    return spec


def _time_levels(role: str, k: int) -> np.ndarray:
    return np.arange(1, k + 1) if role == "h" else np.arange(0, k)


@dataclass(frozen=True, eq=False)
class _Layout:
    names: tuple[str, ...]
    cell_cols: np.ndarray  # positions of cell columns in the expanded order
    dense_cols: np.ndarray
    cell_matrix: np.ndarray  # (n_cells, p_cell); cell id = 2*m + a
    dense_terms: tuple  # (kind, index/name) per dense column


@lru_cache(maxsize=64)
def _layout(spec: ModelSpec, k: int) -> _Layout:
    levels = _time_levels(spec.response_role, k)
    n_cells = 2 * (k + 1)
    mm = np.repeat(np.arange(k + 1), 2).astype(float)
    aa = np.tile([0.0, 1.0], k + 1)
    names, cell_cols, dense_cols, cell_blocks, dense_terms = [], [], [], [], []
    for t in spec.terms:
        if t.kind in _CELL_KINDS:
            if t.kind == "intercept":
                block, labels = np.ones((n_cells, 1)), ["1"]
            elif t.kind == "arm":
                block, labels = aa[:, None], ["a"]
            elif t.kind == "time":
                block, labels = mm[:, None], ["t"]
            elif t.kind == "arm:time":
                block, labels = (aa * mm)[:, None], ["a:t"]
            else:
                block = (mm[:, None] == levels[None, :]).astype(float)
                if t.kind == "arm:time_factor":
                    block = block * aa[:, None]
                    labels = [f"a:t{lv}" for lv in levels]
                else:
                    labels = [f"t{lv}" for lv in levels]
            for j, lab in enumerate(labels):
                cell_cols.append(len(names))
                names.append(lab)
            cell_blocks.append(block)
        else:
            dense_cols.append(len(names))
            names.append(t.label(spec.covariate_names))
            dense_terms.append((t.kind, t.index if t.kind != "custom" else t.name))
    cm = np.hstack(cell_blocks) if cell_blocks else np.zeros((n_cells, 0))
    return _Layout(tuple(names), np.array(cell_cols, dtype=np.int64),
                   np.array(dense_cols, dtype=np.int64), cm, tuple(dense_terms))


@dataclass(frozen=True, eq=False)
class Design:
    """Expanded design for a set of rows.

    ``cells`` maps each row to its (time, arm) cell; cell-level columns live
    in ``layout.cell_matrix``.  ``dense`` holds the covariate-dependent
    columns row by row.
    """

    spec: ModelSpec
    k: int
    cells: np.ndarray
    dense: np.ndarray
    layout: _Layout

    @property
    def columns(self) -> tuple[str, ...]:
        return self.layout.names

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    def to_dense(self) -> np.ndarray:
        """Full row-by-column matrix in expanded column order."""
        x = np.empty((self.n_rows, len(self.layout.names)))
        x[:, self.layout.cell_cols] = self.layout.cell_matrix[self.cells]
        x[:, self.layout.dense_cols] = self.dense
        return x


def _dense_block(layout: _Layout, a: np.ndarray, w: np.ndarray, extra) -> np.ndarray:
    cols = []
    for kind, ref in layout.dense_terms:
        if kind == "cov":
            cols.append(w[:, ref])
        elif kind == "arm:cov":
            cols.append(a * w[:, ref])
        else:
            if extra is None or ref not in extra:
                raise GlmError(f"custom column {ref!r} not supplied")
            cols.append(np.asarray(extra[ref], dtype=float))
    if not cols:
        return np.zeros((len(a), 0))
    return np.column_stack(cols)


def build_design(spec: ModelSpec, m, a, w, k: int, extra: dict | None = None) -> Design:
    """Build the design for rows with times ``m``, arms ``a`` and covariates ``w``.

    For the treatment role pass ``m = 0``; the arm does not enter its cells.
    """
    a = np.asarray(a, dtype=np.int64)
    n = len(a)
    m = np.broadcast_to(np.asarray(m, dtype=np.int64), (n,))
    w = np.asarray(w, dtype=float).reshape(n, -1) if n else np.zeros((0, 0))
    spec.check(w.shape[1])
    if m.size and (m.min() < 0 or m.max() > k):
        raise GlmError(f"time values outside 0..{k}")
    layout = _layout(spec, k)
    a_cell = np.zeros_like(a) if spec.response_role == "g_A" else a
    cells = 2 * m + a_cell
    dense = _dense_block(layout, a.astype(float), w, extra)
    return Design(spec, k, cells, dense, layout)


@dataclass(frozen=True, eq=False)
class LogisticFit:
    """Fitted logistic working model.

    ``coefficients`` follow ``columns``; aliased columns hold NaN.  For
    saturated cell structures the fit is stored as per-cell logits
    (``cell_logit``), which may be infinite for cells whose responses are all
    0 or all 1.  ``cell_seen`` marks cells that had fit rows; when the model
    has time indicators, unseen cells predict probability 0.
    """

    spec: ModelSpec
    k: int
    columns: tuple[str, ...]
    coefficients: np.ndarray
    aliased: np.ndarray
    converged: bool
    deviance: float
    n_rows_used: int
    ridge_used: bool
    iterations: int
    deviance_history: tuple[float, ...]
    cell_logit: np.ndarray
    cell_seen: np.ndarray
    dense_coef: np.ndarray
    separated_cells: int = 0
    info: dict = field(default_factory=dict)


def _cell_sum(pos: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(pos, weights=values, minlength=n)
    out = np.empty((n, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(pos, weights=values[:, j], minlength=n)
    return out


@lru_cache(maxsize=256)
def _kept_cells_cached(spec: ModelSpec, k: int, nonempty: bytes) -> np.ndarray:
    mask = np.frombuffer(nonempty, dtype=bool)
    return _sequential_independent(_layout(spec, k).cell_matrix[mask])


def _kept_cell_columns(spec: ModelSpec, k: int, nonempty: np.ndarray) -> np.ndarray:
    return _kept_cells_cached(spec, k, nonempty.tobytes())


def _sequential_independent(x: np.ndarray) -> np.ndarray:
    """Mask of columns not in the span of the preceding kept columns."""
    n, p = x.shape
    keep = np.zeros(p, dtype=bool)
    basis = np.zeros((n, 0))
    for j in range(p):
        v = x[:, j].astype(float)
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        r = v - basis @ (basis.T @ v)
        r = r - basis @ (basis.T @ r)
        rn = np.linalg.norm(r)
        if rn > ALIAS_TOL * norm * max(1.0, np.sqrt(n)):
            keep[j] = True
            basis = np.column_stack([basis, r / rn])
    return keep


def _gram_independent(gram: np.ndarray) -> np.ndarray:
    """Sequential aliasing test on a Gram matrix via incremental Cholesky."""
    p = gram.shape[0]
    keep = np.zeros(p, dtype=bool)
    lower = np.zeros((p, p))
    idx: list[int] = []
    for j in range(p):
        d = gram[j, j]
        if d <= 0:
            continue
        if idx:
            v = gram[idx, j]
            y = linalg.solve_triangular(lower[:len(idx), :len(idx)], v, lower=True)
            resid = d - y @ y
        else:
            y = np.zeros(0)
            resid = d
        if resid > ALIAS_TOL * d * 10:
            keep[j] = True
            r = len(idx)
            lower[r, :r] = y
            lower[r, r] = np.sqrt(resid)
            idx.append(j)
    return keep


def _bernoulli_dev(y: np.ndarray, eta: np.ndarray) -> float:
    # -2 * loglik, computed on the logit scale for stability
    return 2.0 * float(np.sum(np.logaddexp(0.0, eta) - y * eta))


class _Problem:
    """Rows of one fit, already restricted to the subset and active cells."""

    def __init__(self, cpos, n_cells, dense, y, offset, cell_design):
        self.cpos = np.ascontiguousarray(cpos, dtype=np.int64)
        self.n_cells = n_cells
        self.dense = np.ascontiguousarray(dense, dtype=float)
        self.y = np.ascontiguousarray(y, dtype=float)
        self.offset = np.ascontiguousarray(offset, dtype=float)
        self.cell_design = cell_design  # None for cell-effect basis
        self.n_cell_par = n_cells if cell_design is None else cell_design.shape[1]

    def alpha(self, theta):
        nc = self.n_cell_par
        if self.cell_design is None:
            return np.ascontiguousarray(theta[:nc])
        return self.cell_design @ theta[:nc]

    def eta(self, theta):
        e = self.alpha(theta)[self.cpos] + self.offset
        if self.dense.shape[1]:
            e = e + self.dense @ theta[self.n_cell_par:]
        return e

    def deviance(self, theta, ridge):
        beta = np.ascontiguousarray(theta[self.n_cell_par:])
        dev = _k.deviance(self.cpos, self.dense, self.y, self.offset, self.alpha(theta), beta)
        return dev + ridge * float(theta @ theta)


def _newton(prob: _Problem, theta0: np.ndarray, ridge: float):
    cd = prob.cell_design
    nc_par = prob.n_cell_par
    has_dense = prob.dense.shape[1] > 0

    def derivs(th):
        out = _k.derivatives(prob.cpos, prob.dense, prob.y, prob.offset, prob.alpha(th),
                             np.ascontiguousarray(th[nc_par:]), prob.n_cells)
        return (out[0] + ridge * float(th @ th),) + out[1:]

    theta = theta0.copy()
    dev, s_cell, g_cell, b, q, g_d = derivs(theta)
    history = [dev]
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        if cd is None:
            s_diag = s_cell + ridge
            g_a = g_cell - ridge * theta[:nc_par]
            if np.any(s_diag <= 0):
                raise np.linalg.LinAlgError("empty cell weight")
            if has_dense:
                g_b = g_d - ridge * theta[nc_par:]
                schur = q + ridge * np.eye(q.shape[0]) - b.T @ (b / s_diag[:, None])
                rhs = g_b - b.T @ (g_a / s_diag)
                step_b = linalg.solve(schur, rhs, assume_a="pos")
                step_a = (g_a - b @ step_b) / s_diag
                step = np.concatenate([step_a, step_b])
            else:
                step = g_a / s_diag
        else:
            h_cc = cd.T @ (cd * s_cell[:, None])
            g = cd.T @ g_cell
            if has_dense:
                h_cd = cd.T @ b
                hess = np.block([[h_cc, h_cd], [h_cd.T, q]])
                g = np.concatenate([g, g_d])
            else:
                hess = h_cc
            hess = hess + ridge * np.eye(len(g))
            g = g - ridge * theta
            step = linalg.solve(hess, g, assume_a="pos")
        if not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError("non-finite Newton step")
        cand = theta + step
        new = derivs(cand)
        scale = 1.0
        halvings = 0
        while new[0] > dev + 1e-12 * (1.0 + abs(dev)) and halvings < MAX_HALVING:
            scale *= 0.5
            halvings += 1
            cand = theta + scale * step
            new = derivs(cand)
        if new[0] > dev + 1e-12 * (1.0 + abs(dev)):
            # no improving step: we are at the optimum up to rounding
            converged = abs(new[0] - dev) <= DEV_TOL * (1.0 + abs(dev)) * 1e3
            break
        change = dev - new[0]
        theta = cand
        dev, s_cell, g_cell, b, q, g_d = new
        history.append(dev)
        if abs(change) <= DEV_TOL * (1.0 + abs(dev)):
            converged = True
            break
    return theta, prob.eta(theta), dev, converged, it, history


def fit_logistic(design: Design, response, offset=None, subset=None,
                 ridge: float = 0.0) -> LogisticFit:
    """Maximum likelihood logistic regression with a fixed offset.

    Newton-Raphson (IRLS) with step-halving.  Columns aliased by earlier
    columns are dropped (coefficient NaN).  When the likelihood has no finite
    maximiser or the weighted Gram matrix is singular, the fit is redone with
    a ridge penalty of ``1e-6`` and ``ridge_used`` is set.
    """
    y_all = np.asarray(response, dtype=float)
    n_all = design.n_rows
    if y_all.shape != (n_all,):
        raise GlmError(f"response has shape {y_all.shape}, expected ({n_all},)")
    off_all = np.zeros(n_all) if offset is None else np.broadcast_to(
        np.asarray(offset, dtype=float), (n_all,))
    if subset is None:
        rows = np.arange(n_all)
    else:
        subset = np.asarray(subset)
        rows = np.flatnonzero(subset) if subset.dtype == bool else subset.astype(np.int64)
    if len(rows) == 0:
        raise GlmError("empty fit subset")
    y = y_all[rows]
    off = np.asarray(off_all[rows], dtype=float)
    if not np.all(np.isfinite(off)):
        raise GlmError("offset must be finite on the fit subset")
    if np.any((y != 0) & (y != 1)):
        raise GlmError("response must be binary")
    cells = design.cells[rows]
    dense = design.dense[rows]
    layout = design.layout
    n_cells_total = layout.cell_matrix.shape[0]

    counts = np.bincount(cells, minlength=n_cells_total)
    seen = counts > 0
    keep_c = _kept_cell_columns(design.spec, design.k, seen)
    uc = np.flatnonzero(seen)
    remap = np.full(n_cells_total, -1)
    remap[uc] = np.arange(len(uc))
    cpos = remap[cells]
    n_c = counts[uc]
    cm_seen = layout.cell_matrix[uc][:, keep_c]

    # dense aliasing, given the kept cell columns
    keep_d = np.zeros(dense.shape[1], dtype=bool)
    saturated = cm_seen.shape[1] == len(uc)
    if dense.shape[1]:
        b0 = _cell_sum(cpos, dense, len(uc))
        if saturated:
            schur = dense.T @ dense - b0.T @ (b0 / n_c[:, None])
        else:
            g_cc = cm_seen.T @ (cm_seen * n_c[:, None])
            g_cd = cm_seen.T @ b0
            schur = dense.T @ dense - g_cd.T @ linalg.solve(g_cc, g_cd, assume_a="pos")
        gram_d = dense.T @ dense
        scale = np.sqrt(np.maximum(np.diag(gram_d), 1e-300))
        keep_d = _gram_independent(schur / np.outer(scale, scale)) & (np.diag(gram_d) > 0)
    dense_k = dense[:, keep_d]

    def attempt(ridge_val):
        if saturated:
            y_c = np.bincount(cpos, weights=y, minlength=len(uc))
            lo_cells = y_c == 0
            hi_cells = y_c == n_c
            active = ~(lo_cells | hi_cells)
            if ridge_val > 0:
                active = np.ones(len(uc), dtype=bool)
                lo_cells = hi_cells = np.zeros(len(uc), dtype=bool)
            amap = np.full(len(uc), -1)
            amap[active] = np.arange(active.sum())
            rmask = active[cpos]
            prob = _Problem(amap[cpos[rmask]], int(active.sum()), dense_k[rmask],
                            y[rmask], off[rmask], None)
            theta0 = np.zeros(prob.n_cells + dense_k.shape[1])
            closed = False
            if prob.n_cells:
                yc, nc_ = y_c[active], n_c[active]
                oc = np.bincount(prob.cpos, weights=prob.offset, minlength=prob.n_cells) / nc_
                theta0[:prob.n_cells] = logit((yc + 0.5) / (nc_ + 1.0)) - oc
                # independent cells with cell-constant offsets: exact MLE
                closed = (ridge_val == 0 and dense_k.shape[1] == 0
                          and np.array_equal(prob.offset, oc[prob.cpos]))
            if closed:
                theta = np.log(yc) - np.log(nc_ - yc) - oc
                eta = theta[prob.cpos] + prob.offset
                dev = _bernoulli_dev(prob.y, eta)
                conv, it, hist = True, 0, [dev]
            elif len(prob.y):
                theta, eta, dev, conv, it, hist = _newton(prob, theta0, ridge_val)
            else:
                theta, eta, dev, conv, it, hist = theta0, np.zeros(0), 0.0, True, 0, [0.0]
            alpha = np.empty(len(uc))
            alpha[active] = theta[:prob.n_cells]
            alpha[lo_cells] = -np.inf
            alpha[hi_cells] = np.inf
            return alpha, theta[prob.n_cells:], eta, dev, conv, it, hist, int((~active).sum())
        prob = _Problem(cpos, len(uc), dense_k, y, off, cm_seen)
        theta0 = np.zeros(cm_seen.shape[1] + dense_k.shape[1])
        if cm_seen.shape[1]:
            # weighted projection of smoothed empirical cell logits
            y_c = np.bincount(cpos, weights=y, minlength=len(uc))
            o_c = np.bincount(cpos, weights=off, minlength=len(uc)) / n_c
            target = logit((y_c + 0.5) / (n_c + 1.0)) - o_c
            sw = np.sqrt(n_c)
            theta0[:cm_seen.shape[1]] = np.linalg.lstsq(cm_seen * sw[:, None], target * sw,
                                                        rcond=None)[0]
        theta, eta, dev, conv, it, hist = _newton(prob, theta0, ridge_val)
        alpha = cm_seen @ theta[:cm_seen.shape[1]]
        return theta, theta[cm_seen.shape[1]:], eta, dev, conv, it, hist, 0

    ridge_used = ridge > 0
    try:
        out = attempt(ridge)
        if not ridge_used and (not out[4] or (len(out[2]) and np.max(np.abs(out[2])) > 35.0)):
            raise np.linalg.LinAlgError("separation suspected")
    except np.linalg.LinAlgError:
        ridge_used = True
        out = attempt(max(ridge, RIDGE))
    par, beta_d, eta, dev, converged, iters, hist, n_sep = out

    # per-cell logits and expanded coefficients
    n_cols = len(layout.names)
    coef = np.full(n_cols, np.nan)
    aliased = np.ones(n_cols, dtype=bool)
    cell_logit = np.full(n_cells_total, np.nan)
    kept_cell_pos = layout.cell_cols[keep_c]
    if saturated:
        alpha = par
        cell_logit[uc] = alpha
        if len(uc):
            finite = np.clip(alpha, -40.0, 40.0)
            beta_c = linalg.solve(cm_seen, finite) if cm_seen.size else np.zeros(0)
        else:
            beta_c = np.zeros(0)
    else:
        beta_c = par[:cm_seen.shape[1]]
        cell_logit[uc] = cm_seen @ beta_c
    coef[kept_cell_pos] = beta_c
    aliased[kept_cell_pos] = False
    kept_dense_pos = layout.dense_cols[keep_d]
    coef[kept_dense_pos] = beta_d
    aliased[kept_dense_pos] = False
    if not saturated or not np.all(seen):
        # cell logits for unseen cells from the coefficients
        beta_full = np.where(aliased, 0.0, coef)
        cl_all = layout.cell_matrix @ beta_full[layout.cell_cols]
        cell_logit[~seen] = cl_all[~seen]
    dense_coef = np.zeros(len(layout.dense_cols))
    dense_coef[keep_d] = beta_d
    return LogisticFit(
        spec=design.spec, k=design.k, columns=layout.names, coefficients=coef,
        aliased=aliased, converged=bool(converged), deviance=float(dev),
        n_rows_used=len(rows), ridge_used=ridge_used, iterations=int(iters),
        deviance_history=tuple(hist), cell_logit=cell_logit, cell_seen=seen,
        dense_coef=dense_coef, separated_cells=n_sep,
        info={"saturated_cells": bool(saturated)},
    )


@dataclass(frozen=True)
class OffsetFit:
    coef: float
    deviance: float
    converged: bool
    iterations: int
    ridge_used: bool


def fit_offset_1d(x, y, offset, weights=None) -> OffsetFit:
    """Logistic fit of ``y`` on a single covariate with offset and no intercept.

    Same estimator as :func:`fit_logistic` with one custom column, without
    the design machinery; used for the one-dimensional fluctuations.  An
    unidentified coefficient (covariate zero on every row) is reported as 0.
    """
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    off = np.ascontiguousarray(offset, dtype=float)
    w = np.ones(len(x)) if weights is None else np.ascontiguousarray(weights, dtype=float)
    if not (len(x) == len(y) == len(off) == len(w)):
        raise GlmError("fluctuation inputs differ in length")
    if np.any(np.isnan(off)) or np.any(off == np.inf):
        raise GlmError("offset must be finite or -inf")
    if np.any((off == -np.inf) & (y == 1)):
        raise GlmError("event on a row with probability 0")
    c, dev, conv, it = _k.offset_logistic_1d(x, y, off, w, 0.0, MAX_ITER, MAX_HALVING, DEV_TOL)
    if conv and math.isfinite(c):
        return OffsetFit(float(c), float(dev), True, int(it), False)
    c, dev, conv, it = _k.offset_logistic_1d(x, y, off, w, RIDGE, MAX_ITER, MAX_HALVING, DEV_TOL)
    if not math.isfinite(c):
        raise GlmError("fluctuation fit diverged")
    return OffsetFit(float(c), float(dev), bool(conv), int(it), True)


def _structural_zero(fit: LogisticFit) -> np.ndarray:
    if fit.spec.has_time_factor:
        return ~fit.cell_seen
    return np.zeros_like(fit.cell_seen)


def predict_logit(fit: LogisticFit, design: Design, offset=None,
                  lo: float = PROB_LO, hi: float = PROB_HI) -> np.ndarray:
    """Linear predictor clipped to ``[logit(lo), logit(hi)]``.

    Rows in cells with no fit data under a time-indicator model get ``-inf``
    (probability exactly 0).
    """
    if design.spec != fit.spec or design.k != fit.k:
        raise GlmError("design does not match the fitted model")
    eta = fit.cell_logit[design.cells].copy()
    if design.dense.shape[1]:
        eta = eta + design.dense @ fit.dense_coef
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float)
    eta = np.clip(eta, logit(lo), logit(hi))
    eta[_structural_zero(fit)[design.cells]] = -np.inf
    return eta


def predict_prob(fit: LogisticFit, design: Design, offset=None,
                 lo: float = PROB_LO, hi: float = PROB_HI) -> np.ndarray:
    """Fitted probabilities, clamped to ``[lo, hi]`` except structural zeros."""
    return expit(predict_logit(fit, design, offset, lo, hi))


def predict_logit_grid(fit: LogisticFit, w: np.ndarray, times,
                       lo: float = PROB_LO, hi: float = PROB_HI) -> np.ndarray:
    """Clipped logits on the grid ``subjects x arm x times``.

    Returns an array of shape ``(n, 2, len(times))``.  For the treatment
    role use ``times=[0]``; the arm axis then carries ``P(A=1|W)`` in both
    slots.
    """
    layout = _layout(fit.spec, fit.k)
    times = np.asarray(times, dtype=np.int64)
    w = np.asarray(w, dtype=float)
    n = w.shape[0]
    zero = _structural_zero(fit)
    out = np.empty((n, 2, len(times)))
    for arm in (0, 1):
        arm_cell = 0 if fit.spec.response_role == "g_A" else arm
        cells = 2 * times + arm_cell
        cpart = fit.cell_logit[cells]
        dense = _dense_block(layout, np.full(n, float(arm)), w, None)
        dpart = dense @ fit.dense_coef if dense.shape[1] else np.zeros(n)
        eta = np.clip(cpart[None, :] + dpart[:, None], logit(lo), logit(hi))
        eta[:, zero[cells]] = -np.inf
        out[:, arm, :] = eta
    return out
