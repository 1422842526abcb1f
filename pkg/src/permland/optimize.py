"""Full-batch descent with Armijo backtracking.

The default search direction is limited-memory BFGS; ``method="gd"`` gives
plain steepest descent. Either way every accepted step satisfies the Armijo
condition, so the accepted losses never increase.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .network import Dataset, FlatObjective, NetworkParams

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The loss became non-finite."""


CONVERGED_STATUSES = ("converged", "converged-flat")


@dataclass(frozen=True)
class GDSettings:
    max_iters: int = 50000
    grad_tolerance: float | None = None  # default 1e-8 * sqrt(#free)
    initial_step: float = 1.0
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60
    method: str = "bfgs"  # "bfgs" (dense), "lbfgs" or "gd"
    memory: int = 20
    # Loss-stall stop: less than stall_rtol relative decrease over stall_window
    # iterations. Needed for relu, whose minima can sit on a gradient kink.
    stall_window: int = 50
    stall_rtol: float = 1e-12

    def tolerance_for(self, n_free: int) -> float:
        if self.grad_tolerance is not None:
            return self.grad_tolerance
        return 1e-8 * math.sqrt(max(n_free, 1))

    def with_(self, **kw) -> "GDSettings":
        return replace(self, **kw)


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    n_iters: int
    converged: bool
    status: str
    tolerance: float
    losses: list = field(default_factory=list)
    inv_hessian: np.ndarray | None = None

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((rho, a))
        q -= a * y
    s, y = s_hist[-1], y_hist[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def minimize(fun: Callable, x0, settings: GDSettings = GDSettings(),
             retract: Callable | None = None, inv_hessian=None) -> OptimResult:
    """Minimize ``fun(x) -> (value, grad)`` from ``x0``.

    ``retract`` maps a trial point to an equivalent representative (same
    loss) before it is evaluated; used for the unit-direction constraint of
    merge descent. ``inv_hessian`` warm-starts the dense BFGS estimate; the
    final estimate is returned in the result.

    Stops with status "converged" when |grad| is below the tolerance, and
    "converged-flat" when the loss has stopped decreasing or no Armijo step
    exists along -grad. The second case covers relu losses, whose gradient
    jumps where a data point crosses a hyperplane, so a minimum can sit on
    a kink with nonzero gradient.
    """
    x = np.array(x0, dtype=np.float64)
    if retract is not None:
        x = retract(x)
    f, g = fun(x)
    if not math.isfinite(f):
        raise DivergenceError(f"initial loss is not finite ({f})")
    tol = settings.tolerance_for(x.size)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    losses = [f]
    dense = settings.method == "bfgs"
    hinv = None
    if dense and inv_hessian is not None and np.shape(inv_hessian) == (x.size, x.size):
        hinv = np.array(inv_hessian, dtype=np.float64)
    gd_step = settings.initial_step
    status = "max-iters"
    it = 0
    while True:
        if float(np.linalg.norm(g)) < tol:
            status = "converged"
            break
        if it >= settings.max_iters:
            break
        w = settings.stall_window
        if w and len(losses) > w and losses[-w - 1] - f <= settings.stall_rtol * abs(f):
            status = "converged-flat"
            break
        if dense:
            use_memory = hinv is not None
            d = -(hinv @ g) if use_memory else -g
        else:
            use_memory = settings.method == "lbfgs" and bool(s_hist)
            d = _two_loop(g, s_hist, y_hist) if use_memory else -g
        slope = float(g @ d)
        if not slope < 0:
            s_hist.clear(), y_hist.clear()
            hinv = None
            use_memory = False
            d, slope = -g, -float(g @ g)
        if use_memory:
            alpha = 1.0
        elif settings.method == "gd":
            alpha = gd_step
        else:
            alpha = settings.initial_step / max(1.0, float(np.linalg.norm(g)))

        accepted = False
        for _ in range(settings.max_backtracks):
            xt = x + alpha * d
            if retract is not None:
                xt = retract(xt)
            ft, gt = fun(xt)
            if math.isfinite(ft) and ft <= f + settings.armijo_c * alpha * slope:
                accepted = True
                break
            alpha *= settings.shrink
        if not accepted:
            if use_memory:
                s_hist.clear(), y_hist.clear()
                hinv = None
                continue
            # no Armijo step along -g at any tried length: the point is a
            # kink minimum at working precision
            status = "converged-flat"
            break

        s_vec, y_vec = xt - x, gt - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * float(np.linalg.norm(s_vec)) * float(np.linalg.norm(y_vec)) and sy > 0:
            if dense:
                hinv = _bfgs_update(hinv, s_vec, y_vec, sy)
            else:
                s_hist.append(s_vec)
                y_hist.append(y_vec)
                if len(s_hist) > settings.memory:
                    s_hist.pop(0), y_hist.pop(0)
        if settings.method == "gd":
            gd_step = alpha * 2.0
        x, f, g = xt, ft, gt
        losses.append(f)
        it += 1

    return OptimResult(x, f, g, it, status in CONVERGED_STATUSES, status, tol, losses, hinv)


def _bfgs_update(hinv, s, y, sy):
    if hinv is None:
        hinv = np.eye(s.size) * (sy / float(y @ y))
    rho = 1.0 / sy
    hy = hinv @ y
    return (hinv - rho * (np.outer(s, hy) + np.outer(hy, s))
            + (rho * rho * float(y @ hy) + rho) * np.outer(s, s))


def gd_minimize(net: NetworkParams, data: Dataset, kind: str = "mse", frozen_mask=None,
                settings: GDSettings = GDSettings()):
    """Minimize the loss over the parameters not marked in ``frozen_mask``.

    Returns:
        (trained NetworkParams, OptimResult). ``result.converged`` is False
        when ``max_iters`` ran out; that is reported, not raised.
    """
    obj = FlatObjective(net, data, kind)
    theta0 = net.flatten()
    free = np.ones(theta0.size, dtype=bool)
    if frozen_mask is not None:
        frozen_mask = np.asarray(frozen_mask, dtype=bool)
        if frozen_mask.shape != theta0.shape:
            raise ValueError("frozen_mask must have one entry per parameter")
        free = ~frozen_mask
    idx = np.flatnonzero(free)

    def fun(z):
        theta = theta0.copy()
        theta[idx] = z
        v, gr = obj.value_and_grad(theta)
        return v, gr[idx]

    res = minimize(fun, theta0[idx], settings)
    theta = theta0.copy()
    theta[idx] = res.x
    if not res.converged:
        log.info("gd_minimize stopped (%s) after %d iterations, |g|=%.3e", res.status, res.n_iters, res.grad_norm)
    return net.with_flat(theta), res
