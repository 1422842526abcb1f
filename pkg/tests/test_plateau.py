import numpy as np
import pytest

from permland.network import Dataset, forward, init_network, loss
from permland.numerics import Rng
from permland.optimize import GDSettings, gd_minimize
from permland.plateau import (EXCHANGE_STAGES, ExchangeError, analyze_point, classify, compose_exchanges,
                              constraint_matrix, constraint_null_basis, critical_tolerance,
                              equal_loss_exchange, is_permutation_point, probe_hyperplane)
from permland.numerics import classify_spectrum
from permland.symmetry import MergePlan, PermutationSpec, apply_permutation, build_kth_order_point, swap_pair


@pytest.fixture(scope="module")
def small_min():
    """A converged 2-3-1 softplus minimum with nonzero loss."""
    # noisy targets of a same-size teacher; training starts at the teacher,
    # since many other starts send a neuron off to infinity
    rng = Rng(24)
    teacher = init_network([2, 3, 1], "softplus", rng)
    x = rng.normal_array((80, 2))
    data = Dataset(x, forward(teacher, x) + 0.05 * rng.normal_array((80, 1)))
    net, res = gd_minimize(teacher, data, settings=GDSettings(max_iters=20000, grad_tolerance=1e-10))
    assert res.converged and res.grad_norm < 1e-8
    return net, data


@pytest.fixture(scope="module")
def first_order(small_min):
    small, data = small_min
    plan = MergePlan.from_groups(1, [[0, 3], [1], [2]])
    return build_kth_order_point(small, plan), plan, data


def test_classify_thresholds():
    spec = classify_spectrum([-1.0, 0.0, 1.0])
    assert classify(1e-3, 0.0, spec) == "non-critical"
    assert classify(0.0, 0.0, spec) == "weak-first-order-saddle"
    assert classify(0.0, 0.0, classify_spectrum([-1.0, -1.0, 1.0])) == "higher-order"
    assert classify(0.0, 0.0, classify_spectrum([0.0, 1.0])) == "local-min"
    assert critical_tolerance(1.0) == 2e-5


def test_generic_minimum_is_local_min(small_min):
    net, data = small_min
    rep = analyze_point(net, data, "mse")
    assert rep.classification == "local-min" and rep.n_zero_required == 0
    assert rep.properties_hold
    assert rep.to_dict()["classification"] == "local-min"


def test_spectrum_is_permutation_invariant(small_min):
    net, data = small_min
    p = apply_permutation(net, PermutationSpec.from_layer(net, 1, [2, 0, 1]))
    a = analyze_point(net, data, "mse").spectrum.eigenvalues
    b = analyze_point(p, data, "mse").spectrum.eigenvalues
    assert np.allclose(a, b, atol=1e-8 * np.max(np.abs(a)))


def test_first_order_point_has_flat_direction(first_order):
    big, _, data = first_order
    rep = analyze_point(big, data, "mse", k=1, order_K=1, floor=0.0)
    assert rep.grad_norm < 1e-8
    assert rep.n_zero_required == 1 and rep.has_required_zeros
    assert rep.spectrum.n_negative <= 1 and rep.properties_hold
    # the numpy path agrees
    alt = analyze_point(big, data, "mse", k=1, order_K=1, floor=0.0, use_jacobi=False)
    assert alt.spectrum.n_zero == rep.spectrum.n_zero


def test_exchange_identity_round_trip(first_order):
    big, _, data = first_order
    ex = equal_loss_exchange(big, data, "mse", 1, 0, 3, 3)
    assert ex.end.equals(big) and len(ex.samples) == 1


def test_six_stage_exchange(first_order):
    big, _, data = first_order
    l, m, i = 0, 3, 1
    ex = equal_loss_exchange(big, data, "mse", 1, l, m, i, steps_per_stage=8)
    assert len(ex.stages) == len(EXCHANGE_STAGES) == 6
    assert ex.max_rel_deviation() < 1e-9
    # the end is the start with m and i exchanged, a permutation point for (l, i)
    assert is_permutation_point(ex.end, 1, l, i)
    assert np.allclose(ex.end.flatten(), swap_pair(big, 1, m, i).flatten(), atol=1e-15)
    sums = {1: (m, l), 3: (i, m), 6: (i, l)}
    for stage, (a, b) in sums.items():
        ref = ex.stages[stage - 1][0].params.weights[1]
        for s in ex.stages[stage - 1]:
            w = s.params.weights[1]
            assert np.array_equal(w[:, a] + w[:, b], ref[:, a] + ref[:, b])
    x = data.inputs
    out0 = forward(big, x)
    for stage in (2, 4, 5):
        for s in ex.stages[stage - 1]:
            assert np.max(np.abs(forward(s.params, x) - out0)) < 1e-12


def test_three_cycle(first_order):
    big, _, data = first_order
    paths = compose_exchanges(big, data, "mse", 1, 0, [3, 1, 2], steps_per_stage=5)
    assert len(paths) == 2
    assert max(p.max_rel_deviation() for p in paths) < 1e-9
    end = paths[-1].end
    assert is_permutation_point(end, 1, 0, 2)
    x = data.inputs
    assert np.max(np.abs(forward(end, x) - forward(big, x))) < 1e-12


def test_exchange_rejects_non_permutation_points(small_min, first_order):
    net, data = small_min
    with pytest.raises(ValueError):
        equal_loss_exchange(net, data, "mse", 1, 0, 1, 2)
    big, _, _ = first_order
    with pytest.raises(ValueError):
        equal_loss_exchange(big, data, "mse", 1, 0, 3, 0)
    with pytest.raises(ExchangeError):
        equal_loss_exchange(big, data, "mse", 1, 0, 3, 1, rel_tol=-1.0)


def test_constraint_matrix():
    c = constraint_matrix(2, 3, [[0, 2], [1]])
    assert c.shape == (4, 6)
    w = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(c @ w.ravel(), [0 + 2, 3 + 5, 1, 4])


@pytest.mark.parametrize("groups,dim", [([[0, 3], [1], [2]], 1), ([[0, 3, 4], [1], [2]], 2),
                                        ([[0, 3], [1, 4], [2]], 2)])
def test_null_basis(small_min, groups, dim):
    small, data = small_min
    plan = MergePlan.from_groups(1, groups)
    big = build_kth_order_point(small, plan)
    frame = constraint_null_basis(big, plan)
    assert frame.dimension == dim == plan.order * big.widths[2]
    b = frame.basis
    assert np.allclose(b @ b.T, np.eye(dim), atol=1e-12)
    assert np.max(np.abs(frame.constraints @ b.T)) < 1e-12
    rep = probe_hyperplane(big, data, "mse", frame, n_probes=10, radius=0.5, rng=Rng(3))
    assert rep.max_deviation < 1e-9 and rep.negative_control > 1e-6 and rep.ok


def test_probe_radius_zero_and_empty_basis(small_min, first_order):
    big, plan, data = first_order
    frame = constraint_null_basis(big, plan)
    rep = probe_hyperplane(big, data, "mse", frame, n_probes=3, radius=0.0, check_grad=True)
    assert rep.deviations == [0.0, 0.0, 0.0] and len(rep.grad_norms) == 3
    small, _ = small_min
    flat = MergePlan.from_groups(1, [[0], [1], [2]])
    empty = constraint_null_basis(small, flat)
    assert empty.dimension == 0
    assert probe_hyperplane(small, data, "mse", empty, n_probes=2).max_deviation == 0.0


def test_null_basis_rejects_split_groups(small_min):
    small, _ = small_min
    with pytest.raises(ValueError):
        constraint_null_basis(small, MergePlan.from_groups(1, [[0, 1], [2]]))
