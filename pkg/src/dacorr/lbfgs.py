"""Limited-memory BFGS with a strong Wolfe line search.

The objective is a callable ``x -> (value, gradient)``; non-finite trial
values are treated as infinitely bad so the line search backs off instead
of aborting (chaotic window costs can overflow on wild trial steps).
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iterations: int = 100
    gradient_tolerance: float = 1e-6  # scaled by sqrt(dim) of the problem
    sufficient_decrease: float = 1e-4  # Wolfe c1
    curvature: float = 0.9             # Wolfe c2
    max_line_search_evals: int = 25

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be at least 1")
        if not (0 < self.sufficient_decrease < self.curvature < 1):
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    evaluations: int
    converged: bool           # gradient tolerance reached
    line_search_failed: bool


def _finite(f, g):
    return np.isfinite(f) and np.all(np.isfinite(g))


def lbfgs_minimize(objective, x0, cfg=LbfgsConfig()):
    """Two-loop-recursion L-BFGS; returns the best iterate seen.

    Stops on gradient norm < tolerance * sqrt(dim) or the iteration cap;
    a failed line search returns the best iterate with a failure flag.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = objective(x)
    if not _finite(f, g):
        raise ValueError("objective must be finite at the starting point")
    evals = 1
    tol = cfg.gradient_tolerance * np.sqrt(x.size)

    s_list, y_list, rho_list = [], [], []
    best_x, best_f = x.copy(), f
    iterations = 0
    failed = False

    while iterations < cfg.max_iterations:
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            break

        d = _two_loop_direction(g, s_list, y_list, rho_list)
        if np.dot(d, g) >= 0.0:
            # not a descent direction (stale curvature); restart from steepest
            s_list, y_list, rho_list = [], [], []
            d = -g
        alpha0 = 1.0 if s_list else min(1.0, 1.0 / gnorm)
        step = _wolfe_line_search(objective, x, f, g, d, alpha0, cfg)
        evals += step.evals
        if step.alpha is None:
            failed = True
            break

        x_new = x + step.alpha * d
        s = x_new - x
        y = step.g - g
        sy = np.dot(s, y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if len(s_list) == cfg.memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
        x, f, g = x_new, step.f, step.g
        iterations += 1
        if f < best_f:
            best_x, best_f = x.copy(), f

    if f <= best_f:
        best_x, best_f = x, f
    gnorm = float(np.linalg.norm(g))
    return MinimizeResult(best_x, float(best_f), gnorm, iterations, evals,
                          gnorm < tol, failed)


def _two_loop_direction(g, s_list, y_list, rho_list):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list),
                         reversed(rho_list)):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    if s_list:
        gamma = np.dot(s_list[-1], y_list[-1]) / np.dot(y_list[-1], y_list[-1])
        q *= gamma
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list),
                              reversed(alphas)):
        beta = rho * np.dot(y, q)
        q += (a - beta) * s
    return -q


@dataclass
class _Step:
    alpha: float | None
    f: float = np.inf
    g: np.ndarray | None = None
    evals: int = 0


def _wolfe_line_search(objective, x, f0, g0, d, alpha0, cfg):
    """Strong Wolfe search (bracket then zoom, bisection refinement)."""
    c1, c2 = cfg.sufficient_decrease, cfg.curvature
    dphi0 = np.dot(g0, d)
    evals = 0

    def phi(alpha):
        nonlocal evals
        f, g = objective(x + alpha * d)
        evals += 1
        if not _finite(f, g):
            return np.inf, g
        return f, g

    alpha_prev, f_prev = 0.0, f0
    alpha = alpha0
    f_hi = None
    lo = hi = None
    for i in range(cfg.max_line_search_evals):
        f, g = phi(alpha)
        if f > f0 + c1 * alpha * dphi0 or (i > 0 and f >= f_prev):
            lo, f_lo, hi, f_hi = alpha_prev, f_prev, alpha, f
            break
        dphi = np.dot(g, d)
        if abs(dphi) <= -c2 * dphi0:
            return _Step(alpha, f, g, evals)
        if dphi >= 0.0:
            lo, f_lo, hi, f_hi = alpha, f, alpha_prev, f_prev
            break
        alpha_prev, f_prev = alpha, f
        alpha *= 2.0
    if lo is None:
        return _Step(None, evals=evals)

    # zoom: keep the sufficient-decrease end as lo, bisect towards Wolfe
    for _ in range(cfg.max_line_search_evals):
        alpha = 0.5 * (lo + hi)
        f, g = phi(alpha)
        if f > f0 + c1 * alpha * dphi0 or f >= f_lo:
            hi = alpha
        else:
            dphi = np.dot(g, d)
            if abs(dphi) <= -c2 * dphi0:
                return _Step(alpha, f, g, evals)
            if dphi * (hi - lo) >= 0.0:
                hi = lo
            lo, f_lo = alpha, f
        if abs(hi - lo) < 1e-14 * max(1.0, abs(lo)):
            break
    # accept a plain Armijo point if the curvature condition never held
    if f_lo < f0 + c1 * lo * dphi0 and lo > 0.0:
        f, g = phi(lo)
        return _Step(lo, f, g, evals)
    return _Step(None, evals=evals)
