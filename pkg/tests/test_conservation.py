import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noether.conservation import (
    AngularMomentum,
    Balance,
    BalanceAccel,
    Hamiltonian,
    Kinetic,
    MonitorError,
    NeuronGaps,
    NormGap,
    NotApplicableError,
    RotationMomentum,
    angular_momentum,
    balancedness_residual,
    dynamic_balance_residual,
    hamiltonian,
    make_monitor,
    nd_balance_second_derivative,
    neuron_gaps,
    norm_gap,
    norm_gap_growth_bound_check,
    rotation_momentum,
    rotation_residual,
)
from noether.data import init, synth_regression
from noether.dynamics import DynamicsState, gf, nd, run
from noether.net import (
    Linear,
    LossSpec,
    Objective,
    ReLU,
    RePU,
    Swish,
    make_network,
    predict,
    quadratic_potential,
    radial_potential,
    zero_potential,
)


def point(w):
    return make_network([np.asarray(w, dtype=float).reshape(1, -1)], [Linear()])


# ---------------------------------------------------------------- norm gaps


def test_norm_gap_examples():
    W = np.array([[1.0, 2.0], [-0.5, 0.3]])
    assert norm_gap(make_network([W, W], [ReLU(), Linear()]), 1) == 0.0
    assert norm_gap(make_network([[[2.0]], [[1.0]]], [RePU(2), Linear()]), 1) == 2.0
    assert norm_gap(make_network([[[2.0]], [[1.0]]], [RePU(2), Linear()]), 1, p=1) == 3.0


def test_norm_gap_with_bias_and_swish_terms():
    net = make_network([[[1.0]], [[2.0]]], [Swish(), Linear()], biases=[[3.0], None], betas=[[0.5], None])
    assert norm_gap(net, 1) == 1.0 + 9.0 - 4.0 - 0.25
    assert norm_gap(net, 1, with_bias=False, with_swish=False) == 1.0 - 4.0
    with pytest.raises(MonitorError):
        norm_gap(make_network([[[1.0]], [[2.0]]], [ReLU(), Linear()]), 1, with_bias=True)
    with pytest.raises(MonitorError):
        norm_gap(net, 2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), act=st.sampled_from(["relu", "swish", "repu"]), bias=st.booleans())
def test_layer_gap_is_sum_of_neuron_gaps(seed, act, bias):
    a = {"relu": ReLU(), "swish": Swish(), "repu": RePU(2)}[act]
    net = init("lecun", [3, 6, 4, 2], [a, a, Linear()], seed % 2**31, bias=bias)
    for h in (1, 2):
        total = norm_gap(net, h)
        assert abs(neuron_gaps(net, h).sum() - total) <= 1e-12 * max(1.0, abs(total))


def test_per_neuron_gaps_drift_within_layer_tolerance_under_gf():
    data = synth_regression(40, 5, seed=1)
    net = init("lecun", [5, 8, 8, 1], [ReLU(), ReLU(), Linear()], 3)
    ls = LossSpec.quadratic(data.inputs, data.targets)
    drift = []
    for eta in (1e-3, 5e-4):
        traj = run(gf(eta, int(0.5 / eta)), net, ls, monitors=[NormGap(h=1), NeuronGaps(h=1)])
        layer = traj.series("norm_gap_h1")
        per = traj.series("neuron_gaps_h1")
        layer_drift = np.max(np.abs(layer - layer[0]))
        assert np.all(np.max(np.abs(per - per[0]), axis=0) <= 0.01 * (1 + np.abs(per[0])))
        assert layer_drift <= 0.01 * (1 + abs(layer[0]))
        drift.append(layer_drift)
    assert 0.3 <= drift[1] / drift[0] <= 0.7


# ---------------------------------------------------------------- balance


def test_balance_zero_for_matching_orthonormal_factors():
    th = 0.7
    Q = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    net = make_network([np.eye(2), Q], [Linear(), Linear()])
    np.testing.assert_allclose(balancedness_residual(net, 1), 0, atol=1e-15)


def test_balance_matches_naive_loops():
    for bias in (False, True):
        net = init("lecun", [3, 4, 5, 2], [Linear()] * 3, 9, bias=bias)
        for h in (1, 2):
            W, Wn, b = net.W(h), net.W(h + 1), net.b(h)
            d = W.shape[0]
            ref = np.zeros((d, d))
            for i in range(d):
                for j in range(d):
                    ref[i, j] = sum(W[i, k] * W[j, k] for k in range(W.shape[1]))
                    ref[i, j] -= sum(Wn[k, i] * Wn[k, j] for k in range(Wn.shape[0]))
                    if b is not None:
                        ref[i, j] += b[i] * b[j]
            np.testing.assert_allclose(balancedness_residual(net, h), ref, rtol=0, atol=1e-12)


def test_dynamic_balance_zero_on_stationary_trajectory():
    net = init("lecun", [3, 4, 2], [Linear(), Linear()], 1)
    X = np.random.default_rng(0).standard_normal((6, 3))
    ls = LossSpec.quadratic(X, predict(net, X))
    traj = run(nd(1e-3, 5), net, ls)
    for win in traj.windows():
        assert not np.any(dynamic_balance_residual(win, net, 1))
        assert not np.any(nd_balance_second_derivative(traj.velocity_params(1), 1))


def test_dynamic_balance_drift_is_first_order_under_gf():
    data = synth_regression(30, 3, seed=4, d_out=2)
    net = init("lecun", [3, 4, 4, 2], [Linear()] * 3, 5)
    ls = LossSpec.quadratic(data.inputs, data.targets)
    worst = []
    for eta in (1e-3, 5e-4):
        traj = run(gf(eta, int(0.2 / eta)), net, ls)
        worst.append(max(np.linalg.norm(dynamic_balance_residual(w, net, 1)) for w in traj.windows()))
    assert 0.3 <= worst[1] / worst[0] <= 0.7


def test_dynamic_balance_vanishes_under_nd():
    data = synth_regression(30, 3, seed=4, d_out=2)
    net = init("lecun", [3, 4, 4, 2], [Linear()] * 3, 5, bias=True)
    ls = LossSpec.quadratic(data.inputs, data.targets)
    traj = run(nd(1e-3, 30), net, ls)
    scale = np.linalg.norm(Objective(net, ls).grad(net.flatten())) * np.linalg.norm(net.flatten())
    for win in traj.windows():
        for h in (1, 2):
            assert np.linalg.norm(dynamic_balance_residual(win, net, h)) <= 1e-9 * scale


def test_nd_balance_acceleration_bounded_by_kinetic_energy():
    data = synth_regression(30, 3, seed=4, d_out=2)
    net = init("lecun", [3, 4, 4, 2], [Linear()] * 3, 5)
    ls = LossSpec.quadratic(data.inputs, data.targets)
    traj = run(nd(1e-4, 300), net, ls, monitors=[BalanceAccel(h=1), Kinetic()], sample_every=10)
    assert not traj.diverged
    assert not np.any(traj.series("balance_accel_h1")[0])
    for acc, ke in zip(traj.series("balance_accel_h1"), traj.series("kinetic")):
        assert np.trace(acc) <= 2 * ke + 1e-15
    with pytest.raises(NotApplicableError):
        nd_balance_second_derivative(None, 1)


# ---------------------------------------------------------------- rotations


def test_rotation_residual_reproduces_cross_product_for_a_single_row():
    traj = run(gf(1e-3, 4), point([0.3, -0.2, 0.9]), LossSpec.potential(
        lambda w: float(w[0] + 2 * w[1] ** 2), lambda w: np.array([1.0, 4 * w[1], 0.0])))
    for win in traj.windows():
        R = rotation_residual(win, traj.template)
        c = angular_momentum(win.w, win.velocity())
        np.testing.assert_allclose([R[1, 2], R[2, 0], R[0, 1]], c, rtol=1e-14, atol=1e-16)
        assert np.max(np.abs(R + R.T)) <= 1e-15


def test_rotation_momentum_conserved_under_nd_on_radial_potential():
    traj = run(nd(1e-4, 1000), point([0.5, 0.5, 0.5]), radial_potential(), monitors=[RotationMomentum()],
               v0=[-2.0, 1.0, 1.0], sample_every=20)
    M = traj.series("rotation_momentum")
    assert np.max(np.abs(M - M[0])) <= 1e-2 * np.max(np.abs(M[0]))
    with pytest.raises(NotApplicableError):
        rotation_momentum(point([1.0, 0.0, 0.0]), None)


def test_angular_momentum_examples():
    np.testing.assert_array_equal(angular_momentum([1, 2, 3], [2, 4, 6]), [0, 0, 0])
    np.testing.assert_allclose(angular_momentum([0.5, 0.5, 0.5], [-2, 1, 1]), [0, 1.5, -1.5], atol=1e-15)
    with pytest.raises(ValueError):
        angular_momentum([1, 2], [3, 4])


def test_angular_momentum_matches_determinant_expansion():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w, v = rng.standard_normal(3), rng.standard_normal(3)
        e = np.eye(3)
        ref = np.array([np.linalg.det(np.stack([e[i], v, w])) for i in range(3)])
        np.testing.assert_allclose(angular_momentum(w, v), ref, rtol=0, atol=1e-14)


# ---------------------------------------------------------------- energy


def test_hamiltonian_at_rest_and_under_nd():
    obj = Objective(point([0.5, 0.5, 0.5]), radial_potential())
    assert hamiltonian(DynamicsState(np.full(3, 0.5), np.zeros(3)), obj) == 0.0625
    with pytest.raises(NotApplicableError):
        hamiltonian(DynamicsState(np.zeros(3)), obj)
    drift = []
    for eta in (1e-2, 5e-3):
        traj = run(nd(eta, int(10 / np.sqrt(eta))), point([1.0]), quadratic_potential(), monitors=[Hamiltonian()])
        H = traj.series("hamiltonian")
        assert H[0] == 0.5
        drift.append(np.max(np.abs(H - 0.5)))
    assert drift[0] <= eta * 10
    assert 0.3 <= drift[1] / drift[0] <= 0.7


def test_first_order_monitors_reject_velocity_quantities():
    for mon in (Hamiltonian(), Kinetic(), AngularMomentum(), RotationMomentum()):
        with pytest.raises(NotApplicableError):
            run(gf(1e-3, 1), point([0.5, 0.5, 0.5]), radial_potential(), monitors=[mon])


def test_monitor_factory():
    assert make_monitor("norm_gap", h=2).name == "norm_gap_h2"
    assert make_monitor("angular_momentum", scaled=True).name == "scaled_angular_momentum"
    assert isinstance(make_monitor("balance", h=1), Balance)
    with pytest.raises(MonitorError):
        make_monitor("entropy")


# ---------------------------------------------------------------- growth bound


def relu_nd_trajectory(eta=1e-4, steps=300):
    data = synth_regression(30, 4, seed=2)
    net = init("lecun", [4, 8, 8, 1], [ReLU(), ReLU(), Linear()], 4)
    return run(nd(eta, steps), net, LossSpec.quadratic(data.inputs, data.targets), sample_every=10)


def test_bound_trivial_without_force():
    net = init("lecun", [3, 4, 4, 1], [ReLU(), ReLU(), Linear()], 0)
    traj = run(nd(1e-2, 20), net, zero_potential())
    rep = norm_gap_growth_bound_check(traj)
    assert rep.ok and not np.any(rep.lhs)
    assert rep.layers == (1, 2)


def test_bound_holds_on_relu_net_and_flags_corruption():
    traj = relu_nd_trajectory()
    rep = norm_gap_growth_bound_check(traj)
    assert rep.ok and rep.margin >= 0, rep.summary()
    bad = relu_nd_trajectory()
    j = 1  # early sample, where the bound is tight
    W1 = bad.template.slot(1, "W")
    bad.ws[j] = bad.ws[j].copy()
    bad.ws[j][W1] *= 1.5
    rep = norm_gap_growth_bound_check(bad)
    assert not rep.ok and rep.first_violation == j
    assert "violated" in rep.summary()


def test_bound_requires_second_order_from_rest():
    net = init("lecun", [3, 4, 1], [ReLU(), Linear()], 0)
    ls = zero_potential()
    with pytest.raises(NotApplicableError):
        norm_gap_growth_bound_check(run(gf(1e-2, 3), net, ls))
    with pytest.raises(NotApplicableError):
        norm_gap_growth_bound_check(run(nd(1e-2, 3), net, ls, v0=np.ones(net.size)))
    lin = init("lecun", [3, 4, 1], [Swish(), Linear()], 0)
    with pytest.raises(NotApplicableError):
        norm_gap_growth_bound_check(run(nd(1e-2, 3), lin, ls))
