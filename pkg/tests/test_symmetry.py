import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_net, regression_loss
from noether.conservation import dynamic_balance_residual, rotation_residual
from noether.data import init
from noether.dynamics import Window, gf, nd, run
from noether.net import (
    LeakyReLU,
    Linear,
    LossSpec,
    Objective,
    ReLU,
    RePU,
    Swish,
    loss,
    make_network,
    predict,
    radial_potential,
)
from noether.symmetry import (
    GeneratorError,
    TransformError,
    apply_generator,
    builtin_generators,
    cayley,
    conserved_expression,
    homogeneity,
    linear_layer,
    loss_invariance_defect,
    random_skew,
    rotation,
    rotation_basis,
    rund_trautmann_certified,
    rund_trautmann_residual,
    swish_neuron,
    transform_exact,
)

EPS = (1e-3, 0.1, 0.5)


def arch(kind, rng, bias=True):
    """A net whose hidden layers all admit a built-in generator of ``kind``."""
    acts = {
        "relu": [ReLU(), ReLU()],
        "leaky": [LeakyReLU(0.2), LeakyReLU(0.2)],
        "repu": [RePU(2), RePU(1.5)],
        "swish": [Swish(), Swish()],
        "linear": [Linear(), Linear(0.5)],
    }[kind]
    net = init("lecun", [4, 5, 3, 2], acts + [Linear()], int(rng.integers(2**31)), bias=bias)
    return net


def data_loss(net, rng, kind="quadratic"):
    X = rng.standard_normal((8, net.dims[0]))
    if kind == "nll":
        return LossSpec.nll(X, rng.integers(0, net.dims[-1], 8))
    return LossSpec.quadratic(X, rng.standard_normal((8, net.dims[-1])))


# ---------------------------------------------------------------- construction


def test_homogeneity_tangent_on_scalar_two_layer_net():
    net = make_network([[[1.7]], [[-0.4]]], [ReLU(), Linear()])
    np.testing.assert_array_equal(apply_generator(homogeneity(1), net), [1.7, 0.4])


def test_linear_generator_with_zero_matrix_is_zero():
    net = make_network([np.ones((2, 3)), np.ones((1, 2))], [Linear(), Linear()])
    assert not np.any(apply_generator(linear_layer(1, np.zeros((2, 2))), net))


def test_rotation_tangent_in_two_dimensions():
    theta, x1, x2 = 0.3, 1.2, -0.7
    net = make_network([[[x1, x2]]], [Linear()])
    P = np.array([[0.0, theta], [-theta, 0.0]])
    np.testing.assert_allclose(apply_generator(rotation(P), net), theta * np.array([-x2, x1]), rtol=1e-15)


def test_generator_validation():
    rng = np.random.default_rng(0)
    relu = arch("relu", rng)
    with pytest.raises(GeneratorError):
        apply_generator(homogeneity(1, with_bias=False), relu)  # bias present
    with pytest.raises(GeneratorError):
        apply_generator(homogeneity(3, with_bias=True), relu)  # no successor
    with pytest.raises(GeneratorError):
        apply_generator(homogeneity(1, p=2.0, with_bias=True), relu)
    with pytest.raises(GeneratorError):
        apply_generator(swish_neuron(1, with_bias=True), relu)
    with pytest.raises(GeneratorError):
        apply_generator(linear_layer(1, np.eye(5)), relu)
    with pytest.raises(GeneratorError):
        apply_generator(homogeneity(1, i=7, with_bias=True), relu)
    with pytest.raises(GeneratorError):
        apply_generator(rotation(random_skew(3, rng)), relu)
    with pytest.raises(GeneratorError):
        rotation(np.eye(3))
    with pytest.raises(GeneratorError):
        linear_layer(1, np.eye(2)).__class__("dilation")


def test_transform_errors():
    net = make_network([np.eye(2), np.eye(2)], [Linear(), Linear()])
    with pytest.raises(TransformError):
        transform_exact(linear_layer(1, -np.eye(2)), net, 1.0)
    relu = make_network([np.eye(2), np.eye(2)], [ReLU(), Linear()])
    with pytest.raises(TransformError):
        transform_exact(homogeneity(1), relu, -1.0)


# ---------------------------------------------------------------- exact transforms


def test_zero_parameter_is_identity():
    rng = np.random.default_rng(1)
    for kind in ("relu", "swish", "linear"):
        net = arch(kind, rng)
        for g in builtin_generators(net, rng):
            assert np.array_equal(transform_exact(g, net, 0.0).flatten(), net.flatten())


def test_doubling_rows_halving_columns_keeps_outputs():
    rng = np.random.default_rng(2)
    net = arch("relu", rng)
    out = transform_exact(homogeneity(1, with_bias=True), net, 1.0)
    np.testing.assert_allclose(out.W(1), 2 * net.W(1), rtol=0)
    np.testing.assert_allclose(out.W(2), 0.5 * net.W(2), rtol=0)
    X = rng.standard_normal((20, 4))
    np.testing.assert_allclose(predict(out, X), predict(net, X), rtol=0, atol=1e-12)


def test_cayley_is_a_rotation():
    rng = np.random.default_rng(3)
    for d in (2, 3, 5, 8):
        for eps in (1e-3, 0.5, 3.0):
            Q = cayley(random_skew(d, rng), eps)
            assert np.linalg.norm(Q.T @ Q - np.eye(d)) <= 1e-12
            assert abs(np.linalg.det(Q) - 1.0) <= 1e-10


@pytest.mark.parametrize("kind", ["relu", "leaky", "repu", "swish", "linear"])
def test_generator_is_derivative_of_exact_transform(kind):
    rng = np.random.default_rng(4)
    net = arch(kind, rng)
    gens = builtin_generators(net, rng, per_neuron=True) + [rotation(random_skew(4, rng))]
    w = net.flatten()
    for g in gens:
        xi = apply_generator(g, net)
        errs = []
        for eps in (1e-3, 5e-4):
            d1 = (transform_exact(g, net, eps).flatten() - w) / eps
            d2 = (transform_exact(g, net, eps / 2).flatten() - w) / (eps / 2)
            errs.append(np.max(np.abs(2 * d2 - d1 - xi)))  # Richardson: O(eps^2)
        scale = max(1.0, np.max(np.abs(xi)))
        assert errs[0] <= 1e-5 * scale
        assert errs[1] <= max(0.4 * errs[0], 1e-8 * scale)


# ---------------------------------------------------------------- invariance


@pytest.mark.parametrize("kind", ["relu", "leaky", "repu", "swish", "linear"])
@pytest.mark.parametrize("bias", [True, False])
def test_builtin_generators_leave_loss_invariant(kind, bias):
    rng = np.random.default_rng(5)
    net = arch(kind, rng, bias=bias)
    for lk in ("quadratic", "nll"):
        ls = data_loss(net, rng, lk)
        L = loss(net, ls)
        for g in builtin_generators(net, rng, per_neuron=True, n_linear=3):
            if g.family == "linear":
                g = linear_layer(g.h, 0.3 * g.A / np.linalg.norm(g.A, 2))
            for eps in EPS:
                assert loss_invariance_defect(g, net, ls, eps) <= 1e-10 * (1 + abs(L)), (g.label, eps)
            assert rund_trautmann_certified(g, net, ls, rtol=1e-8), g.label


def test_rotation_invariance_is_a_property_of_the_loss():
    rng = np.random.default_rng(6)
    point = make_network([[[0.5, 0.5, 0.5]]], [Linear()])
    for P in rotation_basis(3) + [random_skew(3, rng)]:
        g = rotation(P)
        for eps in EPS:
            assert loss_invariance_defect(g, point, radial_potential(), eps) <= 1e-10
    net = init("lecun", [3, 4, 1], [ReLU(), Linear()], 1)
    ls = LossSpec.quadratic(rng.standard_normal((10, 3)), rng.standard_normal((10, 1)))
    g = rotation(random_skew(3, rng))
    assert all(loss_invariance_defect(g, net, ls, eps) > 1e-6 for eps in rng.uniform(0.05, 0.5, 5))
    assert abs(rund_trautmann_residual(g, net, ls)) > 1e-6
    assert not rund_trautmann_certified(g, net, ls)


def test_residual_vanishes_at_a_stationary_point():
    net = make_network([np.eye(2), np.eye(2)], [ReLU(), Linear()])
    X = np.abs(np.random.default_rng(7).standard_normal((5, 2)))
    ls = LossSpec.quadratic(X, X)
    assert rund_trautmann_residual(homogeneity(1), net, ls) == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(["relu", "swish", "linear", "repu"]))
def test_generators_are_linear_in_the_parameters(seed, kind):
    rng = np.random.default_rng(seed)
    a, b = arch(kind, rng), arch(kind, rng)
    s = a.unflatten(a.flatten() + b.flatten())
    for g in builtin_generators(a, rng) + [rotation(random_skew(4, rng))]:
        lhs = apply_generator(g, s)
        rhs = apply_generator(g, a) + apply_generator(g, b)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-13, atol=1e-13)


# ---------------------------------------------------------------- conserved expression


def test_conserved_expression_under_gf_shrinks_with_step():
    rng = np.random.default_rng(8)
    net = arch("relu", rng)
    ls = data_loss(net, rng)
    g = homogeneity(1, with_bias=True)
    worst = []
    g0 = Objective(net, ls).grad(net.flatten())
    for eta in (1e-3, 5e-4):
        traj = run(gf(eta, int(0.2 / eta)), net, ls)
        obj = Objective(net, ls)
        vals = [abs(conserved_expression(g, traj.window(j), net)) for j in range(1, len(traj.ws) - 1)]
        ode = [abs(conserved_expression(g, traj.window(j, obj), net, method="ode")) for j in (1, 10)]
        worst.append(max(vals))
        assert max(ode) <= 1e-12 * max(1.0, np.linalg.norm(obj.grad(net.flatten())) ** 2)
    assert worst[0] <= 1e-3 * float(g0 @ g0)  # O(eta) relative to the force scale
    assert 0.3 <= worst[1] / worst[0] <= 0.7


def test_conserved_expression_needs_three_samples():
    net = make_network([np.eye(2)], [Linear()])
    win = Window(np.zeros((2, 4)), np.array([0.0, 1.0]), gf(1.0))
    with pytest.raises(ValueError):
        conserved_expression(rotation(np.zeros((2, 2))), win, net)


def test_rotation_basis_spans_rotation_residual():
    rng = np.random.default_rng(9)
    net = init("lecun", [4, 6, 1], [ReLU(), Linear()], 2)
    ls = data_loss(net, rng)
    traj = run(nd(1e-3, 6), net, ls)
    d = 4
    for win in traj.windows():
        R = rotation_residual(win, net)
        assert np.max(np.abs(R + R.T)) <= 1e-15
        k = 0
        for i in range(d):
            for j in range(i + 1, d):
                val = conserved_expression(rotation(rotation_basis(d)[k]), win, net)
                assert abs(val - R[j, i]) <= 1e-12 * max(1.0, np.max(np.abs(R)))
                k += 1


@pytest.mark.parametrize("bias", [False, True])
def test_linear_generator_trace_form(bias):
    rng = np.random.default_rng(10)
    net = init("lecun", [3, 4, 4, 2], [Linear(), Linear(), Linear()], 3, bias=bias)
    ls = data_loss(net, rng)
    traj = run(nd(1e-3, 4), net, ls)
    for win in traj.windows():
        for h in (1, 2):
            X = dynamic_balance_residual(win, net, h)
            for _ in range(10):
                A = rng.standard_normal((4, 4))
                val = conserved_expression(linear_layer(h, A), win, net)
                assert abs(val - np.trace(X @ A)) <= 1e-12 * max(1.0, np.abs(X).sum() * np.abs(A).max())


def test_builtin_catalogue_matches_architecture():
    rng = np.random.default_rng(11)
    net = init("lecun", [3, 4, 4, 4, 1], [ReLU(), Swish(), Linear(), Linear()], 0, bias=[True, False, False, False])
    labels = [g.label for g in builtin_generators(net, rng)]
    assert labels == ["homogeneity(h=1,i=*,p=1,bias)", "swish(h=2,i=*)", "homogeneity(h=3,i=*,p=1)", "linear(h=3)"]
    assert len(builtin_generators(net, rng, per_neuron=True)) == 13


def test_random_nets_from_helpers_are_covered():
    rng = np.random.default_rng(12)
    for fam in ("relu", "swish", "polynomial", "linear"):
        net = random_net(fam, rng, dims=(3, 4, 4, 2))
        ls = regression_loss(net, rng)
        for g in builtin_generators(net, rng):
            assert rund_trautmann_certified(g, net, ls)
