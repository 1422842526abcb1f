"""Properties of permutation points: criticality, equal-loss exchanges, hyperplanes.

At a permutation point two neurons of layer k share their parameter vector
and outgoing weights. Their relative output weights can be shifted freely
without changing the network function, which gives zero curvature
directions and lets neurons be exchanged at fixed loss.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .network import HESSIAN_CAP, Dataset, FlatObjective, NetworkParams, forward, hessian
from .numerics import Rng, SpectrumReport, jacobi_eigh, symmetric_eigen
from .pathfinder import _split_sum, interpolate_pair_columns
from .symmetry import (DEFAULT_GROUPING_TOL, MergePlan, _check_hidden, _check_neuron, distance,
                       neuron_vector, set_neuron_vector)

CLASSIFICATIONS = ("local-min", "weak-first-order-saddle", "higher-order", "non-critical")
EXCHANGE_STAGES = (
    "shift-outputs-to-l",
    "move-m-to-i",
    "hand-outputs-i-to-m",
    "shrink-i",
    "grow-i-to-l",
    "share-outputs-l-i",
)


def _rel_dev(v: float, ref: float) -> float:
    return abs(v - ref) / abs(ref) if ref != 0.0 else abs(v - ref)


def critical_tolerance(loss_value: float) -> float:
    """Gradient norm at or above which a point counts as non-critical."""
    return 1e-5 * (1.0 + abs(loss_value))


def classify(grad_norm: float, loss_value: float, spectrum: SpectrumReport) -> str:
    if grad_norm >= critical_tolerance(loss_value):
        return "non-critical"
    if spectrum.n_negative >= 2:
        return "higher-order"
    if spectrum.n_negative == 1:
        return "weak-first-order-saddle"
    return "local-min"


@dataclass(frozen=True)
class CriticalityReport:
    grad_norm: float
    loss: float
    spectrum: SpectrumReport
    n_zero_required: int
    classification: str
    order: int = 1

    @property
    def has_required_zeros(self) -> bool:
        return self.spectrum.n_zero >= self.n_zero_required

    @property
    def properties_hold(self) -> bool:
        """Zero-curvature count met and, for order 1, at most one negative eigenvalue."""
        ok = self.has_required_zeros and self.classification != "non-critical"
        if self.order == 1:
            ok = ok and self.spectrum.n_negative <= 1
        return ok

    def to_dict(self) -> dict:
        return {
            "grad_norm": self.grad_norm,
            "loss": self.loss,
            "eigenvalues": [float(v) for v in self.spectrum.eigenvalues],
            "zero_tolerance": self.spectrum.zero_tolerance,
            "n_negative": self.spectrum.n_negative,
            "n_zero": self.spectrum.n_zero,
            "n_zero_required": self.n_zero_required,
            "classification": self.classification,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def analyze_point(net: NetworkParams, data: Dataset, loss_kind: str = "mse", k: int | None = None,
                  order_K: int = 1, *, rel_tol: float = 1e-6, floor: float = 1.0,
                  cap: int = HESSIAN_CAP, use_jacobi: bool = True) -> CriticalityReport:
    """Gradient norm, Hessian spectrum and classification at ``net``.

    Args:
        k: layer of the merged neurons; with ``order_K`` it sets the required
            zero-eigenvalue count K * n_{k+1}. ``k=None`` or ``order_K=0``
            requires none (generic point).
        rel_tol, floor: eigenvalues with |lam| < rel_tol * max(max|lam|, floor)
            count as zero.
        use_jacobi: use the package's Jacobi solver (else numpy's eigh).
    """
    if net.n_params > cap:
        raise ValueError(f"{net.n_params} parameters exceed the Hessian cap {cap}")
    obj = FlatObjective(net, data, loss_kind)
    value, g = obj.value_and_grad(net.flatten())
    h = hessian(net, data, loss_kind, cap=cap)
    if use_jacobi:
        spectrum, _ = symmetric_eigen(h, rel_tol=rel_tol, floor=floor)
    else:
        from .numerics import classify_spectrum
        spectrum = classify_spectrum(np.linalg.eigvalsh(h), rel_tol=rel_tol, floor=floor)
    required = 0
    if k is not None and order_K > 0:
        _check_hidden(net, k)
        required = order_K * net.widths[k + 1]
    gn = float(np.linalg.norm(g))
    return CriticalityReport(grad_norm=gn, loss=float(value), spectrum=spectrum, n_zero_required=required,
                             classification=classify(gn, value, spectrum), order=order_K)


# ---------------------------------------------------------------- exchanges

class ExchangeError(RuntimeError):
    """Loss moved beyond tolerance during an exchange."""

    def __init__(self, message: str, stage: int, t: float, deviation: float):
        super().__init__(message)
        self.stage = stage
        self.t = t
        self.deviation = deviation


@dataclass
class ExchangeSample:
    stage: int
    t: float
    params: NetworkParams
    loss: float


@dataclass
class ExchangePath:
    layer: int
    l: int
    m: int
    target_i: int
    start_loss: float
    stages: list = field(default_factory=list)  # six lists of ExchangeSample

    @property
    def samples(self) -> list:
        return [s for st in self.stages for s in st]

    @property
    def start(self) -> NetworkParams:
        return self.stages[0][0].params

    @property
    def end(self) -> NetworkParams:
        return self.stages[-1][-1].params

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.samples])

    def max_rel_deviation(self) -> float:
        return max(_rel_dev(s.loss, self.start_loss) for s in self.samples)


def is_permutation_point(net: NetworkParams, k: int, l: int, m: int, tol: float = DEFAULT_GROUPING_TOL) -> bool:
    w = net.weights[k]
    return distance(net, k, l, m) <= tol and float(np.max(np.abs(w[:, l] - w[:, m]))) <= tol


def equal_loss_exchange(net_at_pp: NetworkParams, data: Dataset, loss_kind: str, k: int, l: int, m: int,
                        target_i: int, steps_per_stage: int = 25, *, rel_tol: float = 1e-9,
                        tol: float = DEFAULT_GROUPING_TOL) -> ExchangePath:
    """Move neuron i into the slot of m through six fixed-loss stages.

    Starts at a permutation point for (l, m) and ends at the start with
    neurons m and i swapped, which is a permutation point for (l, i).
    Every stage is a linear interpolation sampled ``steps_per_stage`` times;
    sample 0 of the first stage is the start itself.

    Raises:
        ValueError: (l, m) is not a permutation point or indices are invalid.
        ExchangeError: a sample's loss deviates more than ``rel_tol``.
    """
    _check_hidden(net_at_pp, k)
    for j in (l, m, target_i):
        _check_neuron(net_at_pp, k, j)
    if l == m or target_i == l:
        raise ValueError("need l != m and target_i != l")
    if not is_permutation_point(net_at_pp, k, l, m, tol):
        raise ValueError(f"neurons {l} and {m} of layer {k} do not coincide")
    obj = FlatObjective(net_at_pp, data, loss_kind)
    start_loss = obj.value(net_at_pp.flatten())
    path = ExchangePath(k, l, m, target_i, start_loss)
    path.stages.append([ExchangeSample(0, 0.0, net_at_pp, start_loss)])
    if target_i == m:
        # nothing to move; the identity round trip
        return path
    i = target_i

    def record(stage: int, frac: float, p: NetworkParams) -> NetworkParams:
        v = obj.value(p.flatten())
        dev = _rel_dev(v, start_loss)
        if not dev <= rel_tol:
            raise ExchangeError(f"stage {stage} ({EXCHANGE_STAGES[stage - 1]}) at t={frac:.3f}: "
                                f"relative loss deviation {dev:.3e}", stage, frac, dev)
        path.stages[-1].append(ExchangeSample(stage, frac, p, v))
        return p

    def columns_stage(stage, p, src, dst, target):
        w0 = p.weights[k]
        path.stages.append([])
        for s in range(1, steps_per_stage + 1):
            frac = s / steps_per_stage
            cur = record(stage, frac, p.replace_layer(k + 1, interpolate_pair_columns(w0, src, dst, target, frac)))
        return cur

    def vector_stage(stage, p, j, target):
        v0 = neuron_vector(p, k, j).values
        path.stages.append([])
        for s in range(1, steps_per_stage + 1):
            frac = s / steps_per_stage
            v = target.copy() if s == steps_per_stage else v0 + frac * (target - v0)
            cur = record(stage, frac, set_neuron_vector(p, k, j, v))
        return cur

    theta_l = neuron_vector(net_at_pp, k, l).values
    theta_i = neuron_vector(net_at_pp, k, i).values
    w_i = net_at_pp.weights[k][:, i].copy()
    zeros = np.zeros_like(w_i)
    path.stages.pop()  # the start sample joins stage 1
    path.stages.append([ExchangeSample(1, 0.0, net_at_pp, start_loss)])
    w0 = net_at_pp.weights[k]
    p = net_at_pp
    for s in range(1, steps_per_stage + 1):
        frac = s / steps_per_stage
        p = record(1, frac, net_at_pp.replace_layer(k + 1, interpolate_pair_columns(w0, m, l, zeros, frac)))
    p = vector_stage(2, p, m, theta_i)
    p = columns_stage(3, p, i, m, zeros)
    p = vector_stage(4, p, i, np.zeros_like(theta_i))
    p = vector_stage(5, p, i, theta_l)
    w_share = 0.5 * p.weights[k][:, l]
    p = columns_stage(6, p, i, l, w_share)
    return path


def compose_exchanges(net_at_pp: NetworkParams, data: Dataset, loss_kind: str, k: int, l: int,
                      chain: list[int], steps_per_stage: int = 25, rel_tol: float = 1e-9) -> list[ExchangePath]:
    """Run exchanges (l, chain[0]) -> chain[1], (l, chain[1]) -> chain[2], ...

    With chain = [m, i, j] the result is the start permuted by a 3-cycle.
    """
    paths = []
    p = net_at_pp
    for a, b in zip(chain[:-1], chain[1:]):
        ex = equal_loss_exchange(p, data, loss_kind, k, l, a, b, steps_per_stage, rel_tol=rel_tol)
        paths.append(ex)
        p = ex.end
    return paths


# ---------------------------------------------------------------- hyperplanes

@dataclass(frozen=True)
class HyperplaneFrame:
    layer: int
    plan: MergePlan
    basis: np.ndarray  # (dim, n_{k+1} * n_k) over row-major W_{k+1}
    constraints: np.ndarray  # (n_groups * n_{k+1}, n_{k+1} * n_k)

    @property
    def dimension(self) -> int:
        return int(self.basis.shape[0])

    def embed(self, net: NetworkParams, coeffs: np.ndarray) -> np.ndarray:
        """Full parameter-space displacement for the given basis coefficients."""
        coeffs = np.asarray(coeffs, dtype=float)
        delta = np.zeros(net.n_params)
        start = net.layer_offsets()[self.layer]  # W_{k+1} block comes first in its layer
        n = self.constraints.shape[1]
        if self.dimension:
            delta[start:start + n] = coeffs @ self.basis
        return delta

    def embed_constraint_direction(self, net: NetworkParams, row: int = 0) -> np.ndarray:
        """Unit displacement that changes one group sum (off the hyperplane)."""
        c = self.constraints[row]
        delta = np.zeros(net.n_params)
        start = net.layer_offsets()[self.layer]
        delta[start:start + c.size] = c / np.linalg.norm(c)
        return delta


def constraint_matrix(n_out: int, n_k: int, groups) -> np.ndarray:
    """Rows sum W_{i,j} over j in a group for each output unit i."""
    rows = []
    for g in groups:
        for i in range(n_out):
            r = np.zeros((n_out, n_k))
            r[i, list(g)] = 1.0
            rows.append(r.ravel())
    return np.array(rows).reshape(-1, n_out * n_k)


def constraint_null_basis(big_net: NetworkParams, plan: MergePlan,
                          tol: float = DEFAULT_GROUPING_TOL) -> HyperplaneFrame:
    """Orthonormal basis of output-weight moves that keep every group sum fixed.

    The null space is read off the eigenvectors of C^T C with zero
    eigenvalue, so its dimension is (n_k - #groups) * n_{k+1}.
    """
    k = plan.layer
    _check_hidden(big_net, k)
    n_k, n_out = big_net.widths[k], big_net.widths[k + 1]
    if sum(len(g) for g in plan.groups) != n_k:
        raise ValueError(f"plan covers {sum(len(g) for g in plan.groups)} neurons, layer has {n_k}")
    for g in plan.groups:
        for j in g[1:]:
            if distance(big_net, k, g[0], j) > tol:
                raise ValueError(f"neurons {g[0]} and {j} are grouped but their vectors differ")
    c = constraint_matrix(n_out, n_k, plan.groups)
    evals, evecs = jacobi_eigh(c.T @ c)
    # C^T C has integer group sizes as nonzero eigenvalues, so 0.5 separates cleanly
    null = evecs[:, evals < 0.5].T
    expected = (n_k - len(plan.groups)) * n_out
    if null.shape[0] != expected:
        raise ArithmeticError(f"null space dimension {null.shape[0]} != {expected}")
    return HyperplaneFrame(k, plan, np.ascontiguousarray(null), c)


@dataclass
class ProbeReport:
    radius: float
    start_loss: float
    deviations: list
    grad_norms: list
    negative_control: float | None
    tolerance: float
    control_threshold: float
    prefer_wider: bool = False

    @property
    def max_deviation(self) -> float:
        return max(self.deviations) if self.deviations else 0.0

    @property
    def ok(self) -> bool:
        inside = self.max_deviation < self.tolerance
        if self.negative_control is None or self.prefer_wider:
            return inside
        return inside and self.negative_control > self.control_threshold

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "start_loss": self.start_loss,
            "deviations": self.deviations,
            "max_deviation": self.max_deviation,
            "grad_norms": self.grad_norms,
            "negative_control": self.negative_control,
            "tolerance": self.tolerance,
            "ok": self.ok,
        }


def probe_hyperplane(net: NetworkParams, data: Dataset, loss_kind: str, frame: HyperplaneFrame,
                     n_probes: int = 20, radius: float = 0.5, rng: Rng | None = None, *,
                     check_grad: bool = False, tolerance: float = 1e-9,
                     control_threshold: float = 1e-6, negative_control: bool = True) -> ProbeReport:
    """Evaluate the loss at random points of the hyperplane within ``radius``.

    Coefficients are uniform in the ball of the given radius. The negative
    control steps ``radius`` along a direction that changes a group sum.
    """
    rng = rng if rng is not None else Rng(0)
    obj = FlatObjective(net, data, loss_kind)
    theta = net.flatten()
    l0 = obj.value(theta)
    devs, gns = [], []
    for _ in range(n_probes):
        sub = rng.spawn()
        if frame.dimension == 0 or radius == 0.0:
            c = np.zeros(frame.dimension)
        else:
            c = sub.unit_sphere(frame.dimension) * radius * sub.uniform() ** (1.0 / frame.dimension)
        th = theta + frame.embed(net, c)
        if check_grad:
            v, g = obj.value_and_grad(th)
            gns.append(float(np.linalg.norm(g)))
        else:
            v = obj.value(th)
        devs.append(_rel_dev(v, l0))
    ctrl = None
    if negative_control and frame.constraints.shape[0]:
        ctrl = _rel_dev(obj.value(theta + radius * frame.embed_constraint_direction(net)), l0)
    return ProbeReport(radius, float(l0), devs, gns, ctrl, tolerance, control_threshold)
