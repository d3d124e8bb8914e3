"""Limited-memory BFGS with a backtracking strong-Wolfe line search."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LbfgsConfig:
    history: int = 5
    max_iter: int = 200
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    stability_window: int = 20
    stability_rel_tol: float = 1e-5
    max_line_search_steps: int = 20
    gtol: float = 1e-5  # stop when |g| <= gtol * max(1, |x|)

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError(f"need 0 < c1 < c2 < 1, got c1={self.wolfe_c1}, c2={self.wolfe_c2}")
        if self.history < 1:
            raise ValueError(f"history size must be >= 1, got {self.history}")


@dataclass
class OptState:
    x: np.ndarray
    cost: float
    grad: np.ndarray
    pairs: deque
    iteration: int = 0
    costs: list = field(default_factory=list)


@dataclass
class OptResult:
    x: np.ndarray
    cost: float
    iterations: int
    reason: str
    costs: list
    evaluations: int


class NonFiniteError(FloatingPointError):
    pass


def two_loop(grad: np.ndarray, pairs) -> np.ndarray:
    """Apply the implicit inverse-Hessian approximation to ``grad``."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _check(cost, grad, where):
    if not math.isfinite(cost) or not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite cost or gradient at {where}")


def line_search(fun, x, f0, g0, d, step, cfg: LbfgsConfig):
    """Backtracking search for a step meeting the strong Wolfe conditions.

    Starts at ``step`` and shrinks it; when only sufficient decrease holds the
    best such point is kept as a fallback.  Returns ``(step, f, g, evals)``
    or ``None`` when no decreasing step was found.
    """
    slope0 = float(g0 @ d)
    fallback = None
    evals = 0
    lo, hi = 0.0, math.inf
    for _ in range(cfg.max_line_search_steps):
        xt = x + step * d
        ft, gt = fun(xt)
        evals += 1
        _check(ft, gt, "line search trial")
        if ft <= f0 + cfg.wolfe_c1 * step * slope0 and ft < f0:
            slope = float(gt @ d)
            if abs(slope) <= cfg.wolfe_c2 * abs(slope0):
                return step, ft, gt, evals
            if fallback is None or ft < fallback[1]:
                fallback = (step, ft, gt)
            if slope < 0:
                # still descending: extend unless a failing upper bound exists
                lo = step
                step = 2.0 * step if math.isinf(hi) else 0.5 * (lo + hi)
                continue
        hi = step
        step = 0.5 * (lo + hi)
    if fallback is not None:
        return (*fallback, evals)
    return None


def minimize(fun, x0, cfg: LbfgsConfig = LbfgsConfig(), callback=None) -> OptResult:
    """Minimize ``fun(x) -> (cost, grad)`` from ``x0``.

    Stops on ``max_iter``, on a cost history whose relative spread over the
    last ``stability_window`` iterations is below ``stability_rel_tol``, on a
    gradient norm below ``gtol * max(1, |x|)``, or when the line search cannot
    decrease the cost.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x)
    _check(f, g, "initial point")
    state = OptState(x, float(f), np.asarray(g, dtype=np.float64), deque(maxlen=cfg.history))
    state.costs.append(state.cost)
    evaluations = 1
    reason = "max_iter"
    while state.iteration < cfg.max_iter:
        gnorm = float(np.linalg.norm(state.grad))
        if gnorm <= cfg.gtol * max(1.0, float(np.linalg.norm(state.x))):
            reason = "gradient"
            break
        d = -two_loop(state.grad, state.pairs)
        if float(d @ state.grad) >= 0:
            state.pairs.clear()
            d = -state.grad
        step = 1.0 / gnorm if not state.pairs else 1.0
        found = line_search(fun, state.x, state.cost, state.grad, d, step, cfg)
        if found is None and state.pairs:
            # retry along steepest descent after dropping curvature history
            state.pairs.clear()
            d = -state.grad
            found = line_search(fun, state.x, state.cost, state.grad, d, 1.0 / gnorm, cfg)
        if found is None:
            reason = "line_search"
            break
        step, f_new, g_new, evals = found
        evaluations += evals
        s = step * d
        y = g_new - state.grad
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) and sy > 0:
            state.pairs.append((s, y, 1.0 / sy))
        state.x = state.x + s
        state.cost, state.grad = float(f_new), np.asarray(g_new, dtype=np.float64)
        state.iteration += 1
        state.costs.append(state.cost)
        if callback is not None:
            callback(state, step)
        log.debug("iter %d cost %.9g |g| %.3e step %.3e", state.iteration, state.cost,
                  float(np.linalg.norm(state.grad)), step)
        w = cfg.stability_window
        if len(state.costs) > w:
            tail = state.costs[-w:]
            spread = (max(tail) - min(tail)) / max(abs(min(tail)), 1e-12)
            if spread < cfg.stability_rel_tol:
                reason = "stable"
                break
    return OptResult(state.x, state.cost, state.iteration, reason, state.costs, evaluations)
