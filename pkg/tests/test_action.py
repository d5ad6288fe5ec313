import math

import numpy as np
import pytest

from toruslab.action import (
    AveragedForm,
    FlowDivergenceError,
    Generator,
    TorusAction,
    check_dS_identity,
    check_invariance,
    commutator,
    dS_identity_sides,
    flow,
    generator_value,
    group_action,
    haar_average_oneform,
    moment_function,
    moment_gradient,
    pushforward,
)
from toruslab.geometry import (
    AmbientSpace,
    LevelSetManifold,
    OneForm,
    omega_matrix,
    project_to_manifold,
    sample_manifold,
)

TWO_PI = 2 * math.pi
P_MAX = np.array([math.sqrt(2), 0, 0, 0, 1, 0])


@pytest.fixture(scope="module")
def perturbed_alpha(ex1):
    """λ + dF with F = x1*y2 + x3^3: same ω, not invariant under the action."""
    amb = ex1.ambient
    extra = ["y2", "0", "0", "x1", "3*x3^2", "0"]
    coeffs = [f"({c.to_text()}) + {e}" for c, e in zip(ex1.alpha.coeffs, extra)]
    return OneForm.from_strings(amb, coeffs)


def test_generator_values(ex1):
    A = ex1.action
    np.testing.assert_allclose(
        generator_value(A, 1, P_MAX), [0, TWO_PI * math.sqrt(2), 0, 0, 0, TWO_PI], atol=1e-14
    )
    np.testing.assert_allclose(generator_value(A, 2, P_MAX), [0, 0, 0, 0, 0, TWO_PI], atol=1e-14)
    for i in (1, 2):
        np.testing.assert_array_equal(np.abs(generator_value(A, i, np.zeros(6))), np.zeros(6))
    with pytest.raises(IndexError):
        generator_value(A, 3, P_MAX)


def test_flow_quarter_turn(ex1):
    out = flow(ex1.action, 2, 0.25, [0, 0, 1, 0, 0, 0])
    np.testing.assert_allclose(out, [0, 0, 0, 1, 0, 0], atol=1e-15)


def test_flow_identity_and_period(ex1, ex1_points):
    for i in (1, 2):
        for p in ex1_points[:10]:
            np.testing.assert_array_equal(flow(ex1.action, i, 0.0, p), p)
            assert np.linalg.norm(flow(ex1.action, i, 1.0, p) - p) < 1e-8


def test_group_action_examples(ex1):
    A = ex1.action
    np.testing.assert_array_equal(group_action(A, [0, 0], P_MAX), P_MAX)
    np.testing.assert_allclose(
        group_action(A, [0.5, 0.5], P_MAX), [-math.sqrt(2), 0, 0, 0, 1, 0], atol=1e-14
    )


def test_group_law_and_commutativity(ex1, ex1_points):
    A = ex1.action
    rng = np.random.default_rng(4)
    for p in ex1_points[:20]:
        s, t = rng.uniform(size=(2, 2))
        lhs = group_action(A, s, group_action(A, t, p))
        rhs = group_action(A, np.mod(s + t, 1.0), p)
        assert np.linalg.norm(lhs - rhs) < 1e-8
        f12 = flow(A, 1, s[0], flow(A, 2, s[1], p))
        f21 = flow(A, 2, s[1], flow(A, 1, s[0], p))
        assert np.linalg.norm(f12 - f21) < 1e-8
        assert np.linalg.norm(commutator(A, 1, 2, p)) < 1e-8


def test_action_preserves_manifold(ex1, ex1_points):
    rng = np.random.default_rng(9)
    for p in ex1_points[:20]:
        q = group_action(ex1.action, rng.uniform(size=2), p)
        assert np.max(np.abs(ex1.manifold.residual(q))) < 1e-10


def test_averaging_invariant_form(ex1, ex1_points):
    rng = np.random.default_rng(1)
    for N in (1, 2, 5, 32):
        for p in ex1_points[:10]:
            v = rng.normal(size=6)
            avg = haar_average_oneform(ex1.alpha, ex1.action, p, v, N)
            assert abs(avg - float(ex1.alpha(p, v))) < 1e-10


def test_averaging_dx_under_rotation_vanishes():
    amb = AmbientSpace(("x", "y"), ((0, 1),))
    A = TorusAction.rotations(amb, [(1,)])
    dx = OneForm.from_strings(amb, ["1", "0"])
    p, v = np.array([0.3, -1.1]), np.array([0.7, 0.2])
    # ∫ dx(R_θ v) dθ/2π = 0 for every v
    for N in (2, 3, 8, 32):
        assert abs(haar_average_oneform(dx, A, p, v, N)) < 1e-15
    assert haar_average_oneform(dx, A, p, v, 1) == pytest.approx(0.7)


def test_averaging_single_sample(perturbed_alpha, ex1):
    p = project_to_manifold([1.3, 0.4, 0.3, -0.2, 0.5, 0.6], ex1.manifold)
    v = np.array([0.1, 0.2, -0.3, 0.4, 0.5, -0.6])
    assert haar_average_oneform(perturbed_alpha, ex1.action, p, v, 1) == pytest.approx(
        float(perturbed_alpha(p, v)), abs=1e-14
    )


def test_moment_function_values(ex1, ex2, ex1_points, ex2_points):
    assert moment_function(ex1.alpha, ex1.action, 1, P_MAX) == pytest.approx(3 * math.pi, abs=1e-12)
    for p in ex1_points[:20]:
        assert moment_function(ex1.alpha, ex1.action, 2, p) == pytest.approx(math.pi, abs=1e-12)
    for p in ex2_points[:20]:
        assert moment_function(ex2.alpha, ex2.action, 1, p) == pytest.approx(math.pi, abs=1e-12)
        assert moment_function(ex2.alpha, ex2.action, 2, p) == pytest.approx(3 * math.pi, abs=1e-12)


def test_moment_closed_form(ex1, ex1_points):
    # S1 = -λ(Z1) = π Σ|z_j|² off and on M
    for p in ex1_points[:20]:
        assert moment_function(ex1.alpha, ex1.action, 1, p) == pytest.approx(
            math.pi * float(p @ p), abs=1e-12
        )


def test_moment_gradient_vs_differences(perturbed_alpha, ex1, ex1_points):
    A = ex1.action
    h = 1e-6
    for p in ex1_points[:5]:
        g = moment_gradient(perturbed_alpha, A, 1, p, N=8)
        fd = np.array(
            [
                (moment_function(perturbed_alpha, A, 1, p + h * e, 8) - moment_function(perturbed_alpha, A, 1, p - h * e, 8))
                / (2 * h)
                for e in np.eye(6)
            ]
        )
        np.testing.assert_allclose(g, fd, atol=1e-7)


def test_averaged_form_is_invariant(perturbed_alpha, ex1, ex1_points):
    A = ex1.action
    avg = AveragedForm(perturbed_alpha, A, 32)
    rng = np.random.default_rng(2)
    for p in ex1_points[:15]:
        s = rng.uniform(size=2)
        v = rng.normal(size=6)
        q = group_action(A, s, p)
        lhs = avg(q, pushforward(A, s, p) @ v)
        assert abs(lhs - avg(p, v)) < 1e-8


def test_averaged_form_exterior_derivative(perturbed_alpha, ex1, ex1_points):
    avg = AveragedForm(perturbed_alpha, ex1.action, 32, cache=False)
    h = 1e-5
    for p in ex1_points[:5]:
        jac = np.array([(avg.covector(p + h * e) - avg.covector(p - h * e)) / (2 * h) for e in np.eye(6)])
        d_alpha0 = jac - jac.T  # jac[i, j] = ∂_i α₀_j
        np.testing.assert_allclose(d_alpha0, omega_matrix(perturbed_alpha, p), atol=1e-5)


def test_moment_constant_along_orbit(perturbed_alpha, ex1, ex1_points):
    A = ex1.action
    avg = AveragedForm(perturbed_alpha, A, 32)
    rng = np.random.default_rng(3)
    p = ex1_points[0]
    vals = [avg.moment(1, group_action(A, s, p)) for s in rng.uniform(size=(100, 2))]
    assert np.std(vals) < 1e-8


def test_quadrature_consistency(ex1, ex2, ex1_points, ex2_points, perturbed_alpha):
    cases = [(ex1.alpha, ex1, ex1_points), (ex2.alpha, ex2, ex2_points), (perturbed_alpha, ex1, ex1_points)]
    for alpha, sc, pts in cases:
        for p in pts[:10]:
            for i in (1, 2):
                a = moment_function(alpha, sc.action, i, p, 16)
                b = moment_function(alpha, sc.action, i, p, 32)
                assert abs(a - b) < 1e-10


def test_check_invariance_example1(ex1, ex1_points):
    rep = check_invariance(ex1.alpha, ex1.action, ex1.manifold, ex1_points)
    assert rep.pullback_residual < 1e-8
    assert rep.alpha_z_std[1] < 1e-10
    assert rep.alpha_z_std[0] > 0.1
    assert rep.hypotheses_hold
    assert rep.alpha_z_mean[1] == pytest.approx(-math.pi)


def test_check_invariance_example2(ex2, ex2_points):
    rep = check_invariance(ex2.alpha, ex2.action, ex2.manifold, ex2_points)
    assert max(rep.alpha_z_std) < 1e-10
    assert rep.hypotheses_hold


def test_trivial_action_not_locally_free():
    amb = AmbientSpace(("x", "y"), ((0, 1),))
    M = LevelSetManifold(amb, ("x^2 + y^2",), (1.0,))
    A = TorusAction.rotations(amb, [(0,)])
    alpha = OneForm.from_strings(amb, ["y/2", "-x/2"])
    pts = sample_manifold(M, 5, np.random.default_rng(0))
    rep = check_invariance(alpha, A, M, pts)
    assert rep.freeness_min == 0.0
    assert not rep.locally_free
    assert "action is not locally free" in rep.failures()


def test_tampered_weights_break_condition_two():
    from toruslab.scenario import load_scenario

    sc = load_scenario("example1_tampered")
    pts = sample_manifold(sc.manifold, 50, np.random.default_rng(0))
    rep = check_invariance(sc.alpha, sc.action, sc.manifold, pts)
    # λ(Z2) = -π(c2 + |z3|²) varies with |z3|
    assert rep.alpha_z_std[1] > 0.1
    assert rep.locally_free and rep.commuting and rep.preserves_omega
    assert not rep.hypotheses_hold


def test_dS_identity(ex1, ex1_points):
    for p in ex1_points[:10]:
        assert check_dS_identity(ex1.alpha, ex1.action, ex1.manifold, 1, p) < 1e-5
        lhs, rhs = dS_identity_sides(ex1.alpha, ex1.action, ex1.manifold, 2, p)
        assert np.max(np.abs(lhs)) < 1e-8
        assert np.max(np.abs(rhs)) < 1e-8


def test_dS_identity_exact_form():
    amb = AmbientSpace.canonical(3)
    M = LevelSetManifold(amb, ("x1^2 + y1^2", "x2^2+y2^2+x3^2+y3^2"), (1.0, 3.0))
    A = TorusAction.rotations(amb, [(1, 0, 0), (1, 1, 1)], M)
    # α = d(x1*y1*x2): ω = 0
    alpha = OneForm.from_strings(amb, ["y1*x2", "x1*x2", "x1*y1", "0", "0", "0"])
    p = project_to_manifold([0.8, 0.6, 1.0, 0.5, 0.9, 0.7], M)
    lhs, rhs = dS_identity_sides(alpha, A, M, 1, p)
    assert np.max(np.abs(rhs)) == 0.0
    assert np.max(np.abs(lhs)) < 1e-9


def test_numeric_flow_matches_rotation(ex1):
    amb, M = ex1.ambient, ex1.manifold
    gens = [Generator(g.components, "numeric") for g in ex1.action.generators]
    numeric = TorusAction(amb, gens, M)
    p = project_to_manifold([1.3, 0.4, 0.3, -0.2, 0.5, 0.6], M)
    for s in ([0.3, 0.7], [0.9, 0.15]):
        assert np.linalg.norm(group_action(numeric, s, p) - group_action(ex1.action, s, p)) < 1e-8
    assert np.linalg.norm(flow(numeric, 1, 1.0, p) - p) < 1e-8
    a = moment_function(ex1.alpha, numeric, 1, p, N=4)
    b = moment_function(ex1.alpha, ex1.action, 1, p, N=4)
    # finite-difference pushforward: ~1e-6 accuracy
    assert abs(a - b) < 1e-6


def test_mixed_kind_action():
    amb = AmbientSpace.canonical(2)
    rot = Generator.rotation(amb, (1, 0))
    num = Generator.from_strings(amb, ["0", "0", "-2*pi*y2", "2*pi*x2"])
    A = TorusAction(amb, (rot, num))
    p = np.array([1.0, 0.0, 0.5, 0.5])
    expected = TorusAction.rotations(amb, [(1, 0), (0, 1)])
    got = group_action(A, [0.25, 0.125], p)
    np.testing.assert_allclose(got, group_action(expected, [0.25, 0.125], p), atol=1e-10)


def test_numeric_flow_divergence():
    amb = AmbientSpace(("x", "y"))
    A = TorusAction(amb, (Generator.from_strings(amb, ["x^2", "0"]),))
    with pytest.raises(FlowDivergenceError):
        flow(A, 1, 1.0, [2.0, 0.0])


def test_rotation_weights_must_be_integers():
    amb = AmbientSpace.canonical(1)
    with pytest.raises(ValueError):
        Generator.rotation(amb, (0.5,))
