"""Limited-memory BFGS with Armijo backtracking."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


class LineSearchFailed(RuntimeError):
    pass


class NonFiniteObjective(FloatingPointError):
    pass


@dataclass
class OptimResult:
    x: np.ndarray
    loss: float
    trace: list[float] = field(default_factory=list)  # loss at every accepted iterate, x0 first
    n_iter: int = 0
    n_eval: int = 0
    converged: bool = False  # stopped on the loss threshold or gradient tolerance
    reason: str = ""

    @property
    def best_trace(self) -> list[float]:
        return list(np.minimum.accumulate(self.trace)) if self.trace else []


def _two_loop(g: np.ndarray, s_hist, y_hist) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0,
                   max_steps: int = 20, threshold: float = 0.0, history: int = 10,
                   c1: float = 1e-4, shrink: float = 0.5, max_backtracks: int = 30,
                   gtol: float = 0.0, callback=None) -> OptimResult:
    """Minimize ``fun`` (returning loss and gradient) from ``x0``.

    Stops after ``max_steps`` iterations, when the loss drops below
    ``threshold``, or when the gradient max-norm falls under ``gtol``. The
    best iterate seen is returned. If backtracking along the quasi-Newton
    direction fails, one steepest-descent step with the last accepted step
    length is tried before giving up.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    n_eval = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective("objective is not finite at the starting point")
    res = OptimResult(x.copy(), float(f), [float(f)])
    if f < threshold:
        res.converged, res.reason = True, "threshold"
        return res
    s_hist: deque = deque(maxlen=history)
    y_hist: deque = deque(maxlen=history)
    last_step = 1.0
    for it in range(max_steps):
        if not np.any(g) or (gtol > 0 and np.max(np.abs(g)) < gtol):
            res.converged, res.reason = True, "gtol"
            break
        d = _two_loop(g, list(s_hist), list(y_hist))
        if not s_hist:
            d = d * min(1.0, 1.0 / max(float(np.linalg.norm(g)), 1e-300))
        if float(g @ d) >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g * min(1.0, 1.0 / max(float(np.linalg.norm(g)), 1e-300))
        try:
            x_new, f_new, g_new, step, k = _armijo(fun, x, f, g, d, 1.0, c1, shrink, max_backtracks)
        except LineSearchFailed:
            try:
                d = -g
                x_new, f_new, g_new, step, k = _armijo(fun, x, f, g, d, last_step, c1, shrink, max_backtracks)
            except LineSearchFailed:
                res.reason = "line search failed"
                n_eval += 2 * max_backtracks
                break
            s_hist.clear()
            y_hist.clear()
        n_eval += k
        last_step = step
        s, y = x_new - x, g_new - g
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
        x, f, g = x_new, f_new, g_new
        res.trace.append(float(f))
        res.n_iter = it + 1
        if f < res.loss:
            res.x, res.loss = x.copy(), float(f)
        if callback is not None:
            callback(it, x, f)
        if f < threshold:
            res.converged, res.reason = True, "threshold"
            break
    else:
        res.reason = res.reason or "max_steps"
    if not res.reason:
        res.reason = "max_steps"
    res.n_eval = n_eval
    return res


def _armijo(fun, x, f, g, d, step, c1, shrink, max_backtracks):
    slope = float(g @ d)
    for k in range(1, max_backtracks + 1):
        xn = x + step * d
        try:
            fn, gn = fun(xn)
        except (FloatingPointError, OverflowError, ValueError) as exc:
            log.debug("trial point rejected: %s", exc)
            fn, gn = np.inf, None
        if np.isfinite(fn) and gn is not None and np.all(np.isfinite(gn)) and fn <= f + c1 * step * slope:
            return xn, float(fn), gn, step, k
        step *= shrink
    raise LineSearchFailed("no step satisfied the sufficient-decrease condition")
