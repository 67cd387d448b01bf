"""Compiled row loops for the logistic fitter and the survival recursions."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def deviance(cpos, dense, y, offset, alpha, beta):
    """``-2 loglik`` at per-cell logits ``alpha`` and dense coefficients ``beta``."""
    n, d = dense.shape
    tot = 0.0
    for i in range(n):
        eta = alpha[cpos[i]] + offset[i]
        for j in range(d):
            eta += dense[i, j] * beta[j]
        tot += max(eta, 0.0) + math.log1p(math.exp(-abs(eta))) - y[i] * eta
    return 2.0 * tot


@njit(cache=True)
def derivatives(cpos, dense, y, offset, alpha, beta, n_cells):
    """Per-cell and dense pieces of the score and Fisher information.

    Returns ``(dev, s_cell, g_cell, b, q, g_d)``: the deviance, per-cell
    sums of ``p(1-p)`` and ``y - p``, per-cell sums of ``p(1-p) x``,
    ``q = X' W X`` and ``g_d = X'(y - p)`` over the dense columns.
    """
    n, d = dense.shape
    dev = 0.0
    s_cell = np.zeros(n_cells)
    g_cell = np.zeros(n_cells)
    b = np.zeros((n_cells, d))
    q = np.zeros((d, d))
    g_d = np.zeros(d)
    for i in range(n):
        eta = alpha[cpos[i]] + offset[i]
        for j in range(d):
            eta += dense[i, j] * beta[j]
        e = math.exp(-abs(eta))
        dev += max(eta, 0.0) + math.log1p(e) - y[i] * eta
        p = 1.0 / (1.0 + e) if eta >= 0 else e / (1.0 + e)
        w = p * (1.0 - p)
        r = y[i] - p
        c = cpos[i]
        s_cell[c] += w
        g_cell[c] += r
        for j in range(d):
            xj = dense[i, j]
            b[c, j] += w * xj
            g_d[j] += r * xj
            wx = w * xj
            for l in range(j + 1):
                q[j, l] += wx * dense[i, l]
    for j in range(d):
        for l in range(j):
            q[l, j] = q[j, l]
    return 2.0 * dev, s_cell, g_cell, b, q, g_d


@njit(cache=True)
def tail_sums(h):
    """``U(m) = 1 + (1 - h(m+1)) U(m+1)`` with ``U(tau-1) = 1`` along the last axis."""
    n, arms, tau = h.shape
    u = np.empty_like(h)
    for i in range(n):
        for a in range(arms):
            u[i, a, tau - 1] = 1.0
            for m in range(tau - 2, -1, -1):
                u[i, a, m] = 1.0 + (1.0 - h[i, a, m + 1]) * u[i, a, m + 1]
    return u


# ------------------------------------------------------------ targeting loop


@njit(cache=True, inline="always")
def _expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, error_model="numpy")
def _offset_pass(x, y, offset, weight, c):
    # deviance, score and information at coefficient c in one pass
    dev = 0.0
    score = 0.0
    info = 0.0
    for i in range(x.shape[0]):
        if offset[i] == -np.inf and y[i] == 0.0:
            continue
        eta = offset[i] + c * x[i]
        e = math.exp(-abs(eta))
        dev += weight[i] * (max(eta, 0.0) + math.log1p(e) - y[i] * eta)
        p = 1.0 / (1.0 + e) if eta >= 0 else e / (1.0 + e)
        score += weight[i] * x[i] * (y[i] - p)
        info += weight[i] * x[i] * x[i] * p * (1.0 - p)
    return 2.0 * dev, score, info


@njit(cache=True, error_model="numpy")
def offset_logistic_1d(x, y, offset, weight, ridge, max_iter, max_halving, dev_tol):
    """One-coefficient logistic MLE with offset, no intercept.

    Returns ``(coef, deviance, converged, iterations)``.  Rows with offset
    ``-inf`` and response 0 carry no information and are skipped.
    """
    c = 0.0
    dev, score, info = _offset_pass(x, y, offset, weight, c)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        score -= ridge * c
        info += ridge
        if info <= 0.0:
            # covariate zero on every informative row: coefficient not identified
            converged = score == 0.0
            break
        step = score / info
        if not math.isfinite(step):
            break
        cand = c + step
        new, s_new, i_new = _offset_pass(x, y, offset, weight, cand)
        new += ridge * cand * cand
        h = 0
        while new > dev + 1e-12 * (1.0 + abs(dev)) and h < max_halving:
            step *= 0.5
            cand = c + step
            new, s_new, i_new = _offset_pass(x, y, offset, weight, cand)
            new += ridge * cand * cand
            h += 1
        if new > dev + 1e-12 * (1.0 + abs(dev)):
            converged = abs(new - dev) <= dev_tol * (1.0 + abs(dev)) * 1e3
            break
        change = dev - new
        c, dev, score, info = cand, new, s_new, i_new
        if change <= dev_tol * (1.0 + abs(dev)):
            converged = True
            break
    return c, dev, converged, it


@njit(cache=True)
def _censoring_path(gl, i, a, out):
    # out[m] = prod_{j<m} (1 - g_R(j)), m = 0..tau-1
    tau = out.shape[0]
    g = 1.0
    out[0] = 1.0
    for m in range(1, tau):
        g *= 1.0 - _expit(gl[i, a, m - 1])
        out[m] = g


@njit(cache=True, error_model="numpy")
def clever_z(hl, gl, ga1):
    """``Z(m, a, W_i) = -U(m) / (g_A(a) G(m))`` from logit grids; zero at ``m = 0``."""
    n, arms, tau = hl.shape
    z = np.zeros_like(hl)
    gp = np.empty(tau)
    for i in range(n):
        for a in range(arms):
            ga = ga1[i] if a == 1 else 1.0 - ga1[i]
            _censoring_path(gl, i, a, gp)
            u = 1.0
            for m in range(tau - 1, 0, -1):
                if m < tau - 1:
                    u = 1.0 + (1.0 - _expit(hl[i, a, m + 1])) * u
                z[i, a, m] = -u / (ga * gp[m])
    return z


@njit(cache=True, error_model="numpy")
def clever_h(hl, gl, ga1):
    """``H(m, a, W_i) = -(2a-1) (U(m) - 1) / (g_A(a) G(m+1))`` for ``m <= tau-2``."""
    n, arms, tau = hl.shape
    out = np.zeros_like(hl)
    gp = np.empty(tau)
    for i in range(n):
        for a in range(arms):
            ga = ga1[i] if a == 1 else 1.0 - ga1[i]
            sign = 1.0 if a == 0 else -1.0
            _censoring_path(gl, i, a, gp)
            u = 1.0
            for m in range(tau - 2, -1, -1):
                u = 1.0 + (1.0 - _expit(hl[i, a, m + 1])) * u
                out[i, a, m] = sign * (u - 1.0) / (ga * gp[m + 1])
    return out


@njit(cache=True, error_model="numpy")
def clever_m(hl, ga1):
    """``M(W_i) = sum_a sum_{t>=1} S(t, a, W_i) / g_A(a)``."""
    n, arms, tau = hl.shape
    out = np.zeros(n)
    for i in range(n):
        for a in range(arms):
            ga = ga1[i] if a == 1 else 1.0 - ga1[i]
            s = 1.0
            tot = 0.0
            for m in range(1, tau):
                s *= 1.0 - _expit(hl[i, a, m])
                tot += s
            out[i] += tot / ga
    return out


@njit(cache=True)
def shift_logit(x, direction, coef, lo, hi):
    """``clip(x + coef[a] * direction)`` per arm; ``-inf`` entries stay put."""
    n, arms, tau = x.shape
    out = np.empty_like(x)
    for i in range(n):
        for a in range(arms):
            c = coef[a]
            for m in range(tau):
                v = x[i, a, m]
                if v == -np.inf:
                    out[i, a, m] = v
                else:
                    out[i, a, m] = min(max(v + c * direction[i, a, m], lo), hi)
    return out


@njit(cache=True)
def marginal_survival(hl, weight):
    """Weighted mean over subjects of ``S(t, a, W_i)``, shape ``(2, tau)``."""
    n, arms, tau = hl.shape
    out = np.zeros((arms, tau))
    wsum = 0.0
    for i in range(n):
        wsum += weight[i]
        for a in range(arms):
            s = 1.0
            out[a, 0] += weight[i]
            for m in range(1, tau):
                s *= 1.0 - _expit(hl[i, a, m])
                out[a, m] += weight[i] * s
    return out / wsum
