import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from varhor.errors import DomainError, ExprSyntaxError, MissingBinding, UnknownVariable
from varhor.expr import (BinOp, Call, Dims, Neg, Num, Var, directional, eval_expr, is_zero,
                         mixed_derivative, parse, to_text, variables)

D1 = Dims(1, 1, 1, 1)


def test_parse_sum():
    assert parse("x1+u1", D1) == BinOp("+", Var("x1"), Var("u1"))


def test_precedence_and_associativity():
    assert parse("1-2-3", D1) == BinOp("-", BinOp("-", Num(1), Num(2)), Num(3))
    assert parse("2^3^2", D1) == BinOp("^", Num(2), BinOp("^", Num(3), Num(2)))
    assert eval_expr(parse("2^3^2", D1), {}) == 512.0
    assert eval_expr(parse("-2^2", D1), {}) == -4.0
    assert eval_expr(parse("2*3+4/2", D1), {}) == 8.0
    assert eval_expr(parse("(1+2)*3", D1), {}) == 9.0


def test_exp_at_log2():
    assert eval_expr(parse("exp(t)-1", D1), {"t": math.log(2)}) == pytest.approx(1.0, abs=1e-15)


def test_unknown_variable():
    with pytest.raises(UnknownVariable) as info:
        parse("x1+q1", D1)
    assert info.value.name == "q1"


def test_variable_outside_dimensions():
    with pytest.raises(UnknownVariable):
        parse("x2", D1)
    assert variables(parse("x2*z21", Dims(2, 2, 1, 1))) == {"x2", "z21"}


def test_variable_groups_restrict_names():
    with pytest.raises(UnknownVariable):
        parse("y1", D1, groups=("x",))


@pytest.mark.parametrize("text,offset", [("x1+", 3), ("x1 * (u1", 8), ("2 $ 3", 2), ("é+", 0)])
def test_syntax_error_offsets(text, offset):
    with pytest.raises(ExprSyntaxError) as info:
        parse(text, D1)
    assert info.value.offset == offset


def test_syntax_error_offset_counts_bytes():
    with pytest.raises(ExprSyntaxError) as info:
        parse("x1 × u1 +", D1)
    assert info.value.offset == len("x1 × u1 +".encode("utf-8"))


def test_unicode_operators():
    e = parse("x1 × u1 − 1 ÷ 2", D1)
    assert eval_expr(e, {"x1": 3.0, "u1": 2.0}) == 5.5


def test_product():
    assert eval_expr(parse("x1*u1", D1), {"x1": 3.0, "u1": 2.0}) == 6.0


def test_log_domain():
    with pytest.raises(DomainError) as info:
        eval_expr(parse("log(x1)", D1), {"x1": 0.0})
    assert info.value.op == "log"


@pytest.mark.parametrize("text,binding", [("1/x1", 0.0), ("sqrt(x1)", -1.0), ("x1^0.5", -2.0),
                                          ("exp(x1)", 1000.0)])
def test_domain_faults_are_errors(text, binding):
    with pytest.raises(DomainError):
        eval_expr(parse(text, D1), {"x1": binding})


def test_missing_binding():
    with pytest.raises(MissingBinding):
        eval_expr(parse("x1+u1", D1), {"x1": 1.0})


def test_state_on_example_path():
    t = 0.3
    v = eval_expr(parse("x1+u1", D1), {"x1": math.exp(t) - 1, "u1": 1.0, "t": t})
    assert v == pytest.approx(1.349858807576003, rel=1e-15)


def test_linear_derivative_is_one():
    for x in (-3.0, 0.0, 2.5):
        assert directional(parse("x1+u1", D1), {"x1": x, "u1": 0.3}, {"u1": 1.0}).first == 1.0


def test_square_second_derivative():
    for x in (-3.0, 0.0, 2.5):
        assert directional(parse("x1^2", D1), {"x1": x}, {"x1": 1.0}, order=2).second == 2.0


def test_mixed_expression_against_finite_difference():
    e = parse("x1*y1 + sin(u1)", D1)
    b = {"x1": 0.7, "y1": -0.2, "u1": 0.4}
    d = directional(e, b, {"x1": 1.0}).first
    h = 1e-6
    fd = (eval_expr(e, dict(b, x1=0.7 + h)) - eval_expr(e, dict(b, x1=0.7 - h))) / (2 * h)
    assert d == pytest.approx(-0.2, abs=1e-15)
    assert abs(d - fd) <= 1e-6 * abs(fd)


def test_mixed_second_derivative():
    e = parse("x1^2*u1 + exp(x1*u1)", D1)
    b = {"x1": 0.3, "u1": 0.8}
    got = mixed_derivative(e, b, [{"x1": 1.0}, {"u1": 1.0}])
    want = 2 * 0.3 + math.exp(0.24) * (1 + 0.24)
    assert got == pytest.approx(want, rel=1e-14)


def test_vectorized_evaluation_matches_scalar():
    e = parse("sin(x1)*exp(u1) + x1^2", D1)
    xs = np.linspace(-1, 1, 7)
    vec = eval_expr(e, {"x1": xs, "u1": np.full(7, 0.2)})
    assert np.array_equal(vec, [eval_expr(e, {"x1": x, "u1": 0.2}) for x in xs])


def test_is_zero():
    assert is_zero(parse("0", D1))
    assert is_zero(parse("0*2", D1))
    assert not is_zero(parse("x1*0", D1))
    assert not is_zero(parse("1", D1))


# -- randomized corpus -------------------------------------------------------

VARS = ["x1", "u1", "t"]


def _safe(children):
    """Expressions whose values stay finite on [-1, 1]^3."""
    pair = st.tuples(children, children)
    return st.one_of(
        st.builds(lambda ab: BinOp("+", *ab), pair),
        st.builds(lambda ab: BinOp("-", *ab), pair),
        st.builds(lambda ab: BinOp("*", *ab), pair),
        st.builds(Neg, children),
        st.builds(lambda a: Call("sin", a), children),
        st.builds(lambda a: Call("cos", a), children),
        st.builds(lambda a: Call("exp", Call("sin", a)), children),
        st.builds(lambda a: Call("log", BinOp("+", Num(2.0), Call("sin", a))), children),
        st.builds(lambda a: Call("sqrt", BinOp("+", Num(2.0), Call("cos", a))), children),
        st.builds(lambda ab: BinOp("/", ab[0], BinOp("+", Num(2.0), Call("cos", ab[1]))), pair),
        st.builds(lambda a: BinOp("^", a, Num(2.0)), children),
        st.builds(lambda a: Call("abs", BinOp("+", Num(3.0), Call("sin", a))), children),
    )


leaves = st.one_of(st.sampled_from(VARS).map(Var),
                   st.floats(0.5, 2.0).map(lambda v: Num(round(v, 3))))
corpus = st.recursive(leaves, _safe, max_leaves=12).filter(lambda e: _depth(e) <= 6)
points = st.fixed_dictionaries({v: st.floats(-1.0, 1.0) for v in VARS})
directions = st.fixed_dictionaries({v: st.floats(-1.0, 1.0) for v in VARS})


def _depth(e) -> int:
    if isinstance(e, (Num, Var)):
        return 1
    if isinstance(e, (Neg, Call)):
        return 1 + _depth(e.arg)
    return 1 + max(_depth(e.left), _depth(e.right))


def _along(e, b, d, s):
    return eval_expr(e, {k: b[k] + s * d[k] for k in VARS})


@settings(max_examples=300, deadline=None)
@given(corpus, points, directions)
def test_first_derivative_matches_finite_difference(e, b, d):
    val = eval_expr(e, b)
    assume(abs(val) < 1e3)
    h = 1e-6
    fd = (_along(e, b, d, h) - _along(e, b, d, -h)) / (2 * h)
    ad = directional(e, b, d).first
    assert abs(ad - fd) <= 1e-6 * max(1.0, abs(fd))


@settings(max_examples=300, deadline=None)
@given(corpus, points, directions)
def test_second_derivative_matches_finite_difference(e, b, d):
    assume(abs(eval_expr(e, b)) < 1e3)
    h = 1e-6

    def first(s):
        return directional(e, {k: b[k] + s * d[k] for k in VARS}, d).first

    fd = (first(h) - first(-h)) / (2 * h)
    ad = directional(e, b, d, order=2).second
    assert abs(ad - fd) <= 1e-4 * max(1.0, abs(fd))


@settings(max_examples=300, deadline=None)
@given(corpus)
def test_print_parse_round_trip(e):
    assert parse(to_text(e), D1) == e


@settings(max_examples=100, deadline=None)
@given(corpus, points)
def test_evaluation_is_pure(e, b):
    a1 = eval_expr(e, b)
    a2 = eval_expr(parse(to_text(e), D1), b)
    assert a1 == a2 or (math.isnan(a1) and math.isnan(a2))
