"""Low-loss paths between two permutation-equivalent minima.

The path has three pieces:

* merge segment, t in [0, 1/4]: the distance delta between neurons l and m
  of layer k shrinks on a log-spaced schedule down to ``delta_floor_ratio``
  of its start value and then to 0; at every delta the loss is minimized
  over everything else, with ``theta_m = theta_l + delta * e``, ``|e| = 1``;
* equalization segment, t in (1/4, 1/2]: the outgoing weights of l and m
  move to their midpoint with each pair sum held fixed;
* mirrored half, t in (1/2, 1]: earlier samples in reverse order with l and m
  swapped.

``t`` on the merge segment is ``(1 - delta / delta_0) / 4``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .network import Dataset, FlatObjective, NetworkParams, network_to_dict
from .numerics import classify_spectrum, jacobi_eigh
from .optimize import DivergenceError, GDSettings, minimize
from .symmetry import DEFAULT_GROUPING_TOL, distance, most_similar_pair, neuron_vector, swap_pair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MergeSettings:
    n_delta_steps: int = 200
    delta_floor_ratio: float = 1e-4
    inner: GDSettings = GDSettings()
    equalization_steps: int = 50
    start_grad_warn: float = 1e-6
    # Hold |theta_l| fixed during merge descent; None = only for relu layers.
    fix_base_norm: bool | None = None
    # Reuse the inverse-Hessian estimate of the previous delta. Off by
    # default: a stale estimate can steer the next run into a worse basin.
    warm_start: bool = False

    def __post_init__(self):
        if self.n_delta_steps < 2:
            raise ValueError("n_delta_steps must be at least 2")
        if not 0.0 < self.delta_floor_ratio < 1.0:
            raise ValueError("delta_floor_ratio must lie in (0, 1)")
        if self.equalization_steps < 1:
            raise ValueError("equalization_steps must be positive")

    def delta_schedule(self, d0: float) -> np.ndarray:
        """Positive deltas from d0 to d0 * delta_floor_ratio; 0 is appended separately."""
        return np.geomspace(d0, d0 * self.delta_floor_ratio, self.n_delta_steps)

    def with_(self, **kw) -> "MergeSettings":
        return replace(self, **kw)


@dataclass(frozen=True)
class ConstraintFrame:
    """``theta_m = base + delta * direction`` with a unit ``direction``."""

    base: np.ndarray
    direction: np.ndarray
    delta: float

    def offset_vector(self) -> np.ndarray:
        return self.base + self.delta * self.direction

    @classmethod
    def from_net(cls, net: NetworkParams, k: int, l: int, m: int) -> "ConstraintFrame":
        a = neuron_vector(net, k, l).values
        b = neuron_vector(net, k, m).values
        diff = b - a
        d = float(np.linalg.norm(diff))
        if d == 0.0:
            raise ValueError("direction is undefined for coinciding neurons")
        return cls(a, diff / d, d)


@dataclass(eq=False)
class PathSample:
    t: float
    delta: float
    params: NetworkParams
    loss: float
    grad_norm: float
    inner_iters: int = 0
    converged: bool = True
    stage: str = "merge"  # merge | tie | equalize | mirror


@dataclass(eq=False)
class PathTrace:
    samples: list
    layer: int
    l: int
    m: int
    flags: dict = field(default_factory=dict)

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.samples])

    @property
    def ts(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    @property
    def deltas(self) -> np.ndarray:
        return np.array([s.delta for s in self.samples])

    @property
    def all_converged(self) -> bool:
        return all(s.converged for s in self.samples)

    @property
    def start(self) -> NetworkParams:
        return self.samples[0].params

    @property
    def end(self) -> NetworkParams:
        return self.samples[-1].params

    def stage(self, name: str) -> list:
        return [s for s in self.samples if s.stage == name]

    def max_loss(self) -> float:
        return float(np.max(self.losses))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "delta", "loss", "grad_norm", "inner_iters"])
            for i, s in enumerate(self.samples):
                w.writerow([i, f"{s.t:.17g}", f"{s.delta:.17g}", f"{s.loss:.17g}", f"{s.grad_norm:.17g}", s.inner_iters])

    def write_checkpoints(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for i, s in enumerate(self.samples):
            meta = {"step": i, "t": s.t, "delta": s.delta, "loss": s.loss, "stage": s.stage}
            with open(os.path.join(directory, f"sample_{i:04d}.json"), "w") as fh:
                json.dump(network_to_dict(s.params, meta), fh)


class PathDivergenceError(DivergenceError):
    def __init__(self, message: str, trace: PathTrace):
        super().__init__(message)
        self.trace = trace


def _neuron_indices(net: NetworkParams, k: int, i: int) -> np.ndarray:
    n_in = net.widths[k - 1]
    idx = [net.index_of(k, "w", i, j) for j in range(n_in)]
    idx.append(net.index_of(k, "b", i))
    return np.array(idx)


def select_pair(net: NetworkParams, k: int, pair=None) -> tuple[int, int]:
    """Explicit ``pair`` if given, otherwise the two most cosine-similar neurons."""
    if pair is not None:
        l, m = pair
        return int(l), int(m)
    return most_similar_pair(net, k)


POSITIVELY_HOMOGENEOUS = ("relu",)


def merge_descent(net0: NetworkParams, data: Dataset, loss_kind: str, k: int, l: int, m: int,
                  settings: MergeSettings = MergeSettings()) -> PathTrace:
    """Shrink the distance between neurons l and m of layer k to zero.

    At each delta the loss is minimized over all parameters except delta
    itself, warm-started from the previous solution. After the smallest
    positive delta, neuron m is set equal to neuron l and a final
    minimization keeps both rows tied. Samples that did not reach the inner
    gradient tolerance are flagged, not fatal.

    For relu layers the base vector ``theta_l`` is kept at its starting norm
    (see ``MergeSettings.fix_base_norm``). Without it, shrinking both vectors
    and growing their output weights satisfies any delta at no loss.
    """
    d0 = distance(net0, k, l, m)
    if d0 == 0.0:
        raise ValueError("neurons already coincide; nothing to merge")
    obj = FlatObjective(net0, data, loss_kind)
    theta0 = net0.flatten()
    f0, g0 = obj.value_and_grad(theta0)
    if np.linalg.norm(g0) > settings.start_grad_warn:
        log.warning("start point is not a minimum: |grad L| = %.3e", np.linalg.norm(g0))

    idx_l = _neuron_indices(net0, k, l)
    idx_m = _neuron_indices(net0, k, m)
    gauge = settings.fix_base_norm
    if gauge is None:
        gauge = net0.activations[k - 1] in POSITIVELY_HOMOGENEOUS
    radius = float(np.linalg.norm(theta0[idx_l])) if gauge else None
    if gauge and radius <= d0 * settings.delta_floor_ratio:
        raise ValueError("base neuron vector is too short to fix its norm")
    trace = PathTrace([], k, l, m, {"delta0": d0, "base_norm": radius})

    def base_of(raw):
        return raw * (radius / np.linalg.norm(raw)) if gauge else raw

    def base_grad(raw, gb):
        if not gauge:
            return gb
        r = np.linalg.norm(raw)
        u = raw / r
        return (radius / r) * (gb - float(gb @ u) * u)

    def retract_base(zv):
        if gauge:
            zv[idx_l] *= radius / np.linalg.norm(zv[idx_l])
        return zv

    # z = theta with the m-block replaced by the offset (norm delta) from l.
    z = theta0.copy()
    z[idx_m] = theta0[idx_m] - theta0[idx_l]

    def theta_of(zv, delta):
        th = zv.copy()
        off = zv[idx_m]
        th[idx_l] = base_of(zv[idx_l])
        th[idx_m] = th[idx_l] + delta * (off / np.linalg.norm(off))
        return th

    hinv = None
    for delta in settings.delta_schedule(d0):
        delta = float(delta)

        def fun(zv, delta=delta):
            off = zv[idx_m]
            r = np.linalg.norm(off)
            e = off / r
            th = zv.copy()
            th[idx_l] = base_of(zv[idx_l])
            th[idx_m] = th[idx_l] + delta * e
            v, g = obj.value_and_grad(th)
            gz = g.copy()
            gm = g[idx_m]
            gz[idx_l] = base_grad(zv[idx_l], g[idx_l] + gm)
            gz[idx_m] = (delta / r) * (gm - float(gm @ e) * e)
            return v, gz

        def retract(zv, delta=delta):
            zv = zv.copy()
            zv[idx_m] *= delta / np.linalg.norm(zv[idx_m])
            return retract_base(zv)

        try:
            res = minimize(fun, z, settings.inner, retract=retract, inv_hessian=hinv)
        except DivergenceError as exc:
            trace.flags["diverged"] = True
            raise PathDivergenceError(f"loss diverged at delta={delta:.3e}: {exc}", trace) from exc
        z = res.x
        hinv = res.inv_hessian if settings.warm_start else None
        log.debug("delta=%.4e loss=%.6e |g|=%.2e iters=%d %s", delta, res.value, res.grad_norm,
                  res.n_iters, res.status)
        trace.samples.append(PathSample(
            t=0.25 * (1.0 - delta / d0), delta=delta, params=net0.with_flat(theta_of(z, delta)),
            loss=res.value, grad_norm=res.grad_norm, inner_iters=res.n_iters,
            converged=res.converged, stage="merge"))

    # delta = 0: tie the rows and minimize once more.
    theta = theta_of(z, trace.samples[-1].delta)
    theta[idx_m] = theta[idx_l]
    keep = np.setdiff1d(np.arange(theta.size), idx_m)
    pos_l = np.searchsorted(keep, idx_l)

    def tied_theta(zv):
        th = np.empty(theta.size)
        th[keep] = zv
        th[idx_l] = base_of(th[idx_l])
        th[idx_m] = th[idx_l]
        return th

    def tied(zv):
        v, g = obj.value_and_grad(tied_theta(zv))
        gz = g[keep]
        gz[pos_l] = base_grad(zv[pos_l], g[idx_l] + g[idx_m])
        return v, gz

    def tied_retract(zv):
        zv = zv.copy()
        if gauge:
            zv[pos_l] *= radius / np.linalg.norm(zv[pos_l])
        return zv

    res = minimize(tied, theta[keep], settings.inner, retract=tied_retract)
    trace.samples.append(PathSample(
        t=0.25, delta=0.0, params=net0.with_flat(tied_theta(res.x)), loss=res.value,
        grad_norm=res.grad_norm, inner_iters=res.n_iters, converged=res.converged, stage="tie"))
    trace.flags["all_converged"] = trace.all_converged
    return trace


def _split_sum(total: float, a: float) -> tuple[float, float]:
    """Return (a', b') close to (a, total - a) whose float sum is exactly ``total``."""
    b = total - a
    for _ in range(4):
        if a + b == total:
            return a, b
        a = total - b
        if a + b == total:
            return a, b
        b = total - a
    return a, b


def interpolate_pair_columns(w_next: np.ndarray, src: int, dst: int, target_src: np.ndarray, frac: float) -> np.ndarray:
    """Move column ``src`` of ``w_next`` a fraction towards ``target_src``; column ``dst`` absorbs the rest.

    Each row's ``w[n, src] + w[n, dst]`` keeps its float value exactly.
    """
    out = w_next.copy()
    for n in range(out.shape[0]):
        a0, b0 = w_next[n, src], w_next[n, dst]
        total = a0 + b0
        a = target_src[n] if frac == 1.0 else a0 + frac * (target_src[n] - a0)
        a, b = _split_sum(total, a)
        out[n, src], out[n, dst] = a, b
    return out


def equalize_outputs(net: NetworkParams, data: Dataset, loss_kind: str, k: int, l: int, m: int,
                     steps: int = 50, *, t0: float = 0.25, t1: float = 0.5,
                     tol: float = DEFAULT_GROUPING_TOL) -> PathTrace:
    """Shift the outgoing weights of l and m to their midpoint at constant loss.

    Samples are taken after each of ``steps`` equal interpolation steps, at t
    evenly spaced in (t0, t1]. The final sample has identical columns l and m.
    """
    if distance(net, k, l, m) > tol:
        raise ValueError("equalize_outputs needs coinciding parameter vectors for neurons l and m")
    w = net.weights[k]
    total = w[:, l] + w[:, m]
    mid = 0.5 * total
    obj = FlatObjective(net, data, loss_kind)
    start_loss = obj.value(net.flatten())
    trace = PathTrace([], k, l, m)
    max_dev = 0.0
    for s in range(1, steps + 1):
        frac = s / steps
        if frac == 1.0:
            wn = w.copy()
            wn[:, l] = mid
            wn[:, m] = mid
        else:
            wn = interpolate_pair_columns(w, l, m, mid, frac)
        p = net.replace_layer(k + 1, wn)
        v, g = obj.value_and_grad(p.flatten())
        dev = abs(v - start_loss) / max(abs(start_loss), 1e-300)
        max_dev = max(max_dev, dev)
        trace.samples.append(PathSample(t=t0 + (t1 - t0) * frac, delta=0.0, params=p, loss=v,
                                        grad_norm=float(np.linalg.norm(g)), stage="equalize"))
    trace.flags["start_loss"] = start_loss
    trace.flags["max_rel_loss_deviation"] = max_dev
    return trace


def assemble_full_path(first_half: PathTrace) -> PathTrace:
    """Extend a path ending at t = 1/2 by its mirror image with l and m swapped.

    Mirrored samples copy the loss values, so the loss sequence is an exact
    palindrome; network invariance under the swap makes this faithful.
    """
    k, l, m = first_half.layer, first_half.l, first_half.m
    samples = list(first_half.samples)
    if not math.isclose(samples[-1].t, 0.5):
        raise ValueError("first half must end at t = 1/2")
    mirrored = [
        PathSample(t=1.0 - s.t, delta=s.delta, params=swap_pair(s.params, k, l, m), loss=s.loss,
                   grad_norm=s.grad_norm, inner_iters=s.inner_iters, converged=s.converged, stage="mirror")
        for s in reversed(samples[:-1])
    ]
    flags = dict(first_half.flags)
    return PathTrace(samples + mirrored, k, l, m, flags)


def permutation_path(net0: NetworkParams, data: Dataset, loss_kind: str, k: int, l: int, m: int,
                     settings: MergeSettings = MergeSettings()) -> PathTrace:
    """Merge descent, output equalization and mirroring in one call."""
    merged = merge_descent(net0, data, loss_kind, k, l, m, settings)
    eq = equalize_outputs(merged.end, data, loss_kind, k, l, m, settings.equalization_steps)
    half = PathTrace(merged.samples + eq.samples, k, l, m, {**merged.flags, **eq.flags})
    return assemble_full_path(half)


def permutation_point(trace: PathTrace) -> PathSample:
    """Sample at t = 1/2."""
    return min(trace.samples, key=lambda s: abs(s.t - 0.5))


# --------------------------------------------------------------------------- #
# Verification
# --------------------------------------------------------------------------- #


@dataclass
class PathReport:
    violations: list
    max_orthogonal_grad: float
    n_checked: int
    n_hessians: int
    endpoint_grad_norms: tuple

    @property
    def ok(self) -> bool:
        return not self.violations


def orthogonal_gradient(net: NetworkParams, data: Dataset, loss_kind: str, k: int, l: int, m: int,
                        fixed_base_norm: bool = False, tol: float = DEFAULT_GROUPING_TOL) -> float:
    """Norm of the full gradient after removing its components along the constraint normals.

    The distance constraint's normal moves l and m apart along
    ``theta_m - theta_l``; with ``fixed_base_norm`` the radial direction of
    ``theta_l`` is a second normal. For coinciding neurons only the radial
    normal (if any) is removed.
    """
    g = FlatObjective(net, data, loss_kind).grad(net.flatten())
    ia, ib = _neuron_indices(net, k, l), _neuron_indices(net, k, m)
    va = neuron_vector(net, k, l).values
    diff = neuron_vector(net, k, m).values - va
    d = float(np.linalg.norm(diff))
    normals = []
    if d > tol:
        c = np.zeros_like(g)
        c[ia] = -diff / d
        c[ib] = diff / d
        normals.append(c)
    if fixed_base_norm:
        c = np.zeros_like(g)
        c[ia] = va / np.linalg.norm(va)
        if d <= tol:  # tied rows move together
            c[ib] = c[ia]
        normals.append(c)
    if normals:
        q, _ = np.linalg.qr(np.column_stack(normals))
        g = g - q @ (q.T @ g)
    return float(np.linalg.norm(g))


def verify_path_properties(trace: PathTrace, data: Dataset, loss_kind: str, grad_tol: float = 1e-6,
                           check_hessian: bool = False, zero_rel_tol: float = 1e-6,
                           hessian_stride: int = 1) -> PathReport:
    """Check gradient parallelism (and optionally the negative-curvature count) along a path.

    Only samples whose inner minimization converged are checked. Violations
    are reported as ``(t, kind, value)`` tuples.
    """
    from .network import hessian  # local import keeps the hot path light

    k, l, m = trace.layer, trace.l, trace.m
    violations, worst, n_checked, n_h = [], 0.0, 0, 0
    for i, s in enumerate(trace.samples):
        if not s.converged:
            continue
        n_checked += 1
        og = orthogonal_gradient(s.params, data, loss_kind, k, l, m,
                                 fixed_base_norm=trace.flags.get("base_norm") is not None)
        worst = max(worst, og)
        if og >= grad_tol:
            violations.append((s.t, "gradient-not-parallel", og))
        if check_hessian and i % hessian_stride == 0:
            lam, _ = jacobi_eigh(hessian(s.params, data, loss_kind))
            rep = classify_spectrum(lam, rel_tol=zero_rel_tol, floor=0.0)
            n_h += 1
            if rep.n_negative > 1:
                violations.append((s.t, "hessian-negative-count", rep.n_negative))
    ends = tuple(float(np.linalg.norm(FlatObjective(p, data, loss_kind).grad(p.flatten())))
                 for p in (trace.start, trace.end))
    return PathReport(violations, worst, n_checked, n_h, ends)
