import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toruslab.expr import (
    DomainError,
    Expression,
    ExpressionSyntaxError,
    Node,
    gradient,
    hessian,
    jacobian,
    parse,
)

COORDS = ["x1", "y1", "x2", "y2", "x3", "y3"]
G1_TEXT = "(x1^2+y1^2)^2 + x2^2 + y2^2"
G2_TEXT = "x2^2+y2^2+x3^2+y3^2"
P = np.array([math.sqrt(2), 0, 0, 0, 1, 0])


@pytest.fixture
def G1():
    return parse(G1_TEXT, COORDS)


@pytest.fixture
def G2():
    return parse(G2_TEXT, COORDS)


def central_diff(e, p, h=1e-5):
    p = np.asarray(p, float)
    out = np.empty(len(p))
    for i in range(len(p)):
        d = np.zeros(len(p))
        d[i] = h
        out[i] = (e.eval(p + d) - e.eval(p - d)) / (2 * h)
    return out


def test_parse_constraint(G1):
    assert G1.arity == 6
    assert G1.eval(P) == pytest.approx(4.0, abs=1e-14)


def test_constant_zero():
    e = parse("0", COORDS)
    assert e.is_constant
    assert e.eval(np.ones(6)) == 0.0
    np.testing.assert_array_equal(gradient(e, np.ones(6)), np.zeros(6))


def test_syntax_error_offset():
    with pytest.raises(ExpressionSyntaxError) as info:
        parse("x1 +* y1", COORDS)
    assert info.value.offset == 3


@pytest.mark.parametrize(
    "text, offset",
    [("x1 + (y1", 8), ("x1 ) ", 3), ("x1 $ y1", 3), ("", 0), ("sin x1", 4)],
)
def test_syntax_error_offsets(text, offset):
    with pytest.raises(ExpressionSyntaxError) as info:
        parse(text, COORDS)
    assert info.value.offset == offset


def test_unknown_identifier():
    with pytest.raises(ExpressionSyntaxError, match="unknown identifier 'z9'"):
        parse("x1 + z9", COORDS)


@pytest.mark.parametrize("text", ["x1^2.5", "x1^y1", "x1^(1/2)"])
def test_non_integer_exponent(text):
    with pytest.raises(ExpressionSyntaxError, match="non-integer exponent"):
        parse(text, COORDS)


def test_power_is_right_associative():
    e = parse("x^2^3", ["x"])
    assert e.eval([2.0]) == 2.0**8
    assert parse("-x^2", ["x"]).eval([3.0]) == -9.0
    assert parse("x^-1", ["x"]).eval([4.0]) == 0.25


def test_eval_values(G2):
    assert G2.eval(P) == pytest.approx(1.0)
    assert parse("pi", COORDS).eval(np.zeros(6)) == math.pi
    assert parse("2*sin(pi/6) + cos(0)", COORDS).eval(np.zeros(6)) == pytest.approx(2.0)


def test_domain_errors():
    with pytest.raises(DomainError):
        parse("sqrt(x1)", COORDS).eval([-1, 0, 0, 0, 0, 0])
    with pytest.raises(DomainError):
        parse("1/x1", COORDS).eval(np.zeros(6))
    with pytest.raises(DomainError):
        gradient(parse("1/x1", COORDS), np.zeros(6))


def test_batch_eval(G1):
    pts = np.random.default_rng(0).normal(size=(7, 6))
    np.testing.assert_allclose(G1.eval(pts), [G1.eval(p) for p in pts], rtol=1e-15)


def test_gradient_examples(G1, G2):
    np.testing.assert_allclose(gradient(G1, [1, 0, 0, 0, 0, 0]), [4, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(gradient(G2, [0, 0, 1, 0, 0, 0]), [0, 0, 2, 0, 0, 0])
    np.testing.assert_array_equal(gradient(parse("3.5", COORDS), P), np.zeros(6))


def test_gradient_matches_hand_formula(G1):
    # hand-derived ∇G1: (4x1(x1²+y1²), 4y1(x1²+y1²), 2x2, 2y2, 0, 0)
    p = np.array([0.3, -0.7, 1.1, 0.2, -0.5, 0.9])
    r = p[0] ** 2 + p[1] ** 2
    expected = [4 * p[0] * r, 4 * p[1] * r, 2 * p[2], 2 * p[3], 0, 0]
    np.testing.assert_allclose(gradient(G1, p), expected, rtol=1e-14)


def test_jacobian_examples(G1, G2):
    J = jacobian([G1, G2], [1, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(J, [[4, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0]])
    ident = [parse(c, COORDS) for c in COORDS]
    np.testing.assert_array_equal(jacobian(ident, P), np.eye(6))
    J = jacobian([G1, G2], P)
    np.testing.assert_allclose(J, [[8 * math.sqrt(2), 0, 0, 0, 0, 0], [0, 0, 0, 0, 2, 0]], atol=1e-14)


def test_hessian_forward_over_forward(G1):
    p = np.array([1.0, 0.5, 0.2, -0.3, 0.0, 0.0])
    H = hessian(G1, p)
    # (x²+y²)² : ∂xx = 4r + 8x², ∂xy = 8xy, ∂yy = 4r + 8y²
    r = 1.25
    expected = np.zeros((6, 6))
    expected[0, 0], expected[0, 1], expected[1, 1] = 4 * r + 8, 4.0, 4 * r + 2
    expected[1, 0] = 4.0
    expected[2, 2] = expected[3, 3] = 2.0
    np.testing.assert_allclose(H, expected, rtol=1e-14)


def test_hessian_transcendental_vs_differences():
    e = parse("sin(x1)*sqrt(y1)/x2 + x1^-2", COORDS)
    p = np.array([0.3, 0.7, 1.2, 0.1, 0.2, 0.3])
    H = hessian(e, p)
    h = 1e-5
    fd = np.array(
        [(gradient(e, p + h * u) - gradient(e, p - h * u)) / (2 * h) for u in np.eye(6)]
    )
    np.testing.assert_allclose(H, fd, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(H, H.T, rtol=1e-13)


CATALOG_EXPRESSIONS = [
    G1_TEXT,
    G2_TEXT,
    "x1^2 + y1^2",
    "x1^2+y1^2+x2^2+y2^2+x3^2+y3^2",
    "y1/2",
    "-x3/2",
    "-2*pi*1*y2",
]


@pytest.mark.parametrize("text", CATALOG_EXPRESSIONS)
def test_ad_vs_finite_differences(text):
    e = parse(text, COORDS)
    rng = np.random.default_rng(abs(hash(text)) % 2**32)
    worst = 0.0
    for p in rng.uniform(-1.5, 1.5, size=(100, 6)):
        g = gradient(e, p)
        fd = central_diff(e, p)
        scale = max(np.max(np.abs(g)), 1.0)
        worst = max(worst, np.max(np.abs(g - fd)) / scale)
    assert worst < 1e-6


@given(
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
    p=st.lists(st.floats(-2, 2), min_size=6, max_size=6),
)
@settings(max_examples=60, deadline=None)
def test_gradient_linearity(a, b, p):
    e1 = parse(G1_TEXT, COORDS)
    e2 = parse("sin(x1)*y2 + x3^3", COORDS)
    combo = Expression(
        Node("add", (Node("mul", (Node("const", (), a), e1.ast)), Node("mul", (Node("const", (), b), e2.ast)))),
        COORDS,
    )
    lhs = gradient(combo, p)
    rhs = a * gradient(e1, p) + b * gradient(e2, p)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def _random_ast(rng, depth, arity):
    if depth == 0 or rng.random() < 0.2:
        roll = rng.random()
        if roll < 0.5:
            return Node("var", (), int(rng.integers(arity)))
        if roll < 0.9:
            return Node("const", (), float(np.round(rng.normal() * 3, int(rng.integers(0, 17)))))
        return Node("pi")
    kind = rng.choice(["add", "sub", "mul", "div", "neg", "pow", "call"])
    if kind == "neg":
        return Node("neg", (_random_ast(rng, depth - 1, arity),))
    if kind == "pow":
        return Node("pow", (_random_ast(rng, depth - 1, arity),), int(rng.integers(-2, 4)))
    if kind == "call":
        return Node("call", (_random_ast(rng, depth - 1, arity),), str(rng.choice(["sin", "cos", "sqrt"])))
    return Node(str(kind), (_random_ast(rng, depth - 1, arity), _random_ast(rng, depth - 1, arity)))


def test_print_parse_roundtrip():
    rng = np.random.default_rng(2024)
    names = ["a", "b", "c"]
    checked = 0
    for _ in range(1000):
        e = Expression(_random_ast(rng, 4, 3), names)
        again = parse(e.to_text(), names)
        for p in rng.uniform(-2, 2, size=(10, 3)):
            try:
                v = e.eval(p)
            except (DomainError, OverflowError, FloatingPointError):
                with pytest.raises((DomainError, OverflowError, FloatingPointError)):
                    again.eval(p)
                continue
            w = again.eval(p)
            if np.isfinite(v):
                assert abs(v - w) <= 1e-12 * max(1.0, abs(v))
                checked += 1
    assert checked > 5000
