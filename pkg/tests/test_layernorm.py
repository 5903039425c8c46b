import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

import oracles
from normguard.fxp import INT8_Q3, FxpFormat, InvalidInput, QuantTensor
from normguard.layernorm import (
    DegenerateRow,
    LayerNormConfig,
    LayerNormEngine,
    MomentAccumulator,
    ShapeError,
    accumulate_moments,
    layernorm_exact,
    layernorm_latency,
    layernorm_row,
    lod_initial_guess,
    lod_initial_guess_code,
    newton_rsqrt,
    newton_rsqrt_fixed,
    newton_rsqrt_float,
    range_reduce_fixed,
    range_reduce_float,
    variance_fixed,
    variance_float,
)

BIT = LayerNormConfig()
FLOAT = LayerNormConfig(mode="float")
W = BIT.working_fmt
code_rows = st.lists(st.integers(-128, 127), min_size=2, max_size=300)


def test_config_defaults():
    assert BIT.iterations == 2 and FLOAT.iterations is None
    assert W == FxpFormat(32, 24, False)
    assert LayerNormConfig.from_dict(BIT.to_dict()) == BIT
    with pytest.raises(ValueError):
        LayerNormConfig(newton_iters=0)
    with pytest.raises(ValueError):
        LayerNormConfig(C=1)
    with pytest.raises(ShapeError):
        LayerNormConfig(C=4, gamma=(1.0, 1.0))


@pytest.mark.parametrize("row,want", [([1, -1, 1, -1], (0, 4)), ([0, 0, 0], (0, 0)), ([3, 4], (7, 25))])
def test_accumulate_examples(row, want):
    acc = accumulate_moments(row)
    assert (acc.sum_x, acc.sum_x2) == want and acc.count == len(row)


def test_accumulate_push_matches_batch():
    acc = MomentAccumulator()
    for v in [3, -7, 12]:
        acc.push(v)
    assert (acc.sum_x, acc.sum_x2, acc.count) == (8, 202, 3)


def test_accumulate_shape_errors():
    with pytest.raises(ShapeError):
        accumulate_moments([1, 2, 3], C=4)
    with pytest.raises(ShapeError):
        accumulate_moments([[1, 2]])


def test_accumulator_widths():
    assert MomentAccumulator.widths() == (20, 28)


def test_variance_examples():
    m = 16
    assert variance_fixed(accumulate_moments([1, -1, 1, -1]), m) == (0, 1 << (2 * m))
    assert variance_fixed(accumulate_moments([5, 5, 5]), m)[1] == 0
    assert variance_float(accumulate_moments(np.array([0.0, 2.0]))) == (1.0, 1.0)
    assert variance_float(accumulate_moments(np.array([1.0, -1.0, 1.0, -1.0]))) == (0.0, 1.0)


@given(code_rows)
def test_variance_fixed_close_to_exact(row):
    m = 16
    mean_q, var_q = variance_fixed(accumulate_moments(row), m)
    c = len(row)
    mean = Fraction(sum(row), c)
    var = Fraction(sum(v * v for v in row), c) - mean**2
    ulp = Fraction(1, 2**m)
    assert abs(Fraction(mean_q) * ulp - mean) < ulp
    # mean truncation (< 1 ulp) enters squared: |2*mean*e| + e**2, plus one truncation of E[x^2]
    bound = 2 * abs(mean) * ulp + 2 * ulp**2
    assert abs(Fraction(var_q) * ulp**2 - var) <= bound
    if c & (c - 1) == 0:
        assert Fraction(var_q) * ulp**2 == var


@given(code_rows)
def test_shift_and_divider_routes_agree(row):
    # the same row padded to a non-power-of-two length goes through the restoring divider
    acc = accumulate_moments(row + [0])
    mean_q, var_q = variance_fixed(acc, 16)
    c = acc.count
    want_mean = abs(acc.sum_x << 16) // c * (1 if acc.sum_x >= 0 else -1)
    assert mean_q == want_mean
    assert var_q == max((acc.sum_x2 << 32) // c - want_mean**2, 0)


@pytest.mark.parametrize("n,x0", [(1.0, 1.0), (4.0, 0.5), (2.0, 0.5), (0.25, 2.0), (3.99, 0.5), (1e-3, 32.0)])
def test_lod_initial_guess_examples(n, x0):
    assert lod_initial_guess(n) == x0


@given(st.floats(1e-30, 1e30))
def test_lod_seed_quality(n):
    x0 = lod_initial_guess(n)
    assert float(oracles.rel_err_rsqrt(x0, n)) <= math.sqrt(2) - 1 + 1e-15


@given(st.integers(1, 2**31))
def test_lod_seed_code_matches_float(code):
    try:
        x0 = lod_initial_guess_code(code, W)
    except InvalidInput:
        assume(False)
    assert math.ldexp(x0, -24) == lod_initial_guess(math.ldexp(code, -24))


def test_lod_invalid():
    with pytest.raises(InvalidInput):
        lod_initial_guess(0.0)
    with pytest.raises(InvalidInput):
        lod_initial_guess_code(0, W)


def test_newton_examples():
    assert newton_rsqrt_float(4.0)[0] == 0.5
    assert newton_rsqrt_float(1.0)[0] == 1.0
    assert newton_rsqrt_float(2.0, iters=1)[0] == 0.75
    assert newton_rsqrt_float(2.0, iters=2)[0] == pytest.approx(17 / 24, abs=2e-16)
    assert newton_rsqrt_float(2.0)[0] == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert oracles.heron_rsqrt_exact(2, Fraction(1, 2), 2) == [Fraction(1, 2), Fraction(3, 4), Fraction(17, 24)]


def test_newton_dispatch():
    assert newton_rsqrt(4.0, FLOAT) == 0.5
    assert newton_rsqrt(4 << 24, BIT) == 1 << 23


def test_newton_fixed_exact_points():
    assert newton_rsqrt_fixed(1 << 24, W) == 1 << 24
    assert newton_rsqrt_fixed(4 << 24, W) == 1 << 23


def _fixed_oracle(n, steps, f=24):
    x = 1 << (f - (n.bit_length() - 1 - f + 1) // 2)
    for _ in range(steps):
        xn = x * n // 2**f
        x = (x + 2 ** (2 * f) // xn) // 2
    return x


@given(st.integers(1 << 24, (4 << 24) - 1), st.integers(1, 5))
def test_newton_fixed_matches_integer_oracle(n, steps):
    assert newton_rsqrt_fixed(n, W, steps) == _fixed_oracle(n, steps)


@given(st.integers(1 << 24, (4 << 24) - 1))
def test_newton_fixed_two_iterations_accuracy(n):
    # seed error <= sqrt(2)-1 -> 6.07e-2 -> 1.74e-3 after two exact steps; truncation adds < 2**-22 relative
    x = newton_rsqrt_fixed(n, W, 2)
    assert float(oracles.rel_err_rsqrt(Fraction(x, 2**24), Fraction(n, 2**24))) <= 1.74e-3 + 2**-22


@given(st.floats(1e-12, 1e12))
def test_range_reduce_float(var):
    n, k = range_reduce_float(var)
    assert 1.0 <= n < 4.0
    assert math.ldexp(n, 2 * k) == var


@given(st.integers(1, 2**60), st.integers(0, 40))
def test_range_reduce_fixed(var_code, var_frac):
    n, k = range_reduce_fixed(var_code, var_frac, W)
    assert (1 << 24) <= n < (4 << 24)
    real = Fraction(var_code, 2**var_frac)
    approx = Fraction(n, 2**24) * Fraction(4) ** k
    assert approx <= real < approx + Fraction(4) ** k / 2**24


def test_layernorm_examples():
    r = layernorm_row(np.array([1.0, -1.0, 1.0, -1.0]), FLOAT)
    np.testing.assert_array_equal(r.out, [1, -1, 1, -1])
    assert r.sigma_error == 0.0
    b = layernorm_row([8, -8, 8, -8], BIT)
    np.testing.assert_array_equal(b.values(), [1, -1, 1, -1])
    assert b.sigma_error == 0.0
    z = layernorm_row([3, 3, 3, 3], BIT)
    assert z.degenerate and not z.out.any()
    zf = layernorm_row(np.full(5, 0.1), FLOAT)
    assert zf.degenerate and not zf.out.any()


def test_layernorm_gaussian_row_float():
    x = np.random.default_rng(768).normal(0.3, 2.0, 768)
    r = layernorm_row(x, FLOAT)
    assert abs(r.out.mean()) <= 1e-6
    assert abs(1 - r.out.std()) <= 1e-6
    np.testing.assert_allclose(r.out, oracles.layernorm_mp(x), rtol=0, atol=1e-9)


def test_layernorm_degenerate_policies():
    beta = (0.5, -0.25, 1.0)
    r = layernorm_row([2, 2, 2], LayerNormConfig(beta=beta))
    np.testing.assert_array_equal(r.values(), beta)
    r = layernorm_row([2, 2, 2], LayerNormConfig(epsilon_policy="add-1ulp"))
    assert r.degenerate and not r.out.any() and math.isfinite(r.rsqrt_est)
    r = layernorm_row(np.full(3, 0.25), LayerNormConfig(mode="float", beta=beta))
    np.testing.assert_array_equal(r.out, beta)


def test_layernorm_affine_bit_vs_float():
    rng = np.random.default_rng(4)
    codes = rng.integers(-128, 128, 64)
    gamma = tuple(rng.uniform(0.5, 2, 64))
    beta = tuple(rng.uniform(-1, 1, 64))
    b = layernorm_row(codes, LayerNormConfig(gamma=gamma, beta=beta, newton_iters=4))
    f = layernorm_row(codes / 8.0, LayerNormConfig(mode="float", gamma=gamma, beta=beta))
    np.testing.assert_allclose(b.values(), f.out, atol=1e-5)
    np.testing.assert_allclose(f.out, np.asarray(layernorm_exact(codes / 8.0, gamma, beta)), atol=1e-12)


def test_layernorm_shape_errors():
    with pytest.raises(ShapeError):
        layernorm_row([1], BIT)
    with pytest.raises(ShapeError):
        layernorm_row([1, 2, 3], LayerNormConfig(C=4))
    with pytest.raises(ShapeError):
        layernorm_row([1, 2, 3], LayerNormConfig(gamma=(1.0, 1.0)))


@given(code_rows)
def test_float_unit_variance_guarantee(row):
    x = np.array(row) / 8.0
    assume(x.max() > x.min())
    r = layernorm_row(x, FLOAT)
    assert r.sigma_error <= 1e-6
    assert abs(r.out.mean()) <= 1e-6 * np.abs(x).max()


@given(code_rows)
def test_bit_two_iteration_error_bound(row):
    assume(max(row) > min(row))
    r = layernorm_row(row, BIT)
    assert r.sigma_error <= 1.74e-3 + 1e-5


@given(code_rows)
def test_bit_mode_deterministic(row):
    a = layernorm_row(np.array(row), BIT)
    b = layernorm_row(list(row), BIT)
    assert np.array_equal(a.out, b.out)


def test_engine_batch_and_quant_tensor():
    t = QuantTensor(np.random.default_rng(2).integers(-128, 128, (5, 16)), INT8_Q3)
    bit = LayerNormEngine(BIT).batch(t)
    assert [r.out.tolist() for r in bit] == [layernorm_row(row, BIT).out.tolist() for row in t.codes]
    flt = LayerNormEngine(FLOAT).batch(t)
    np.testing.assert_allclose(flt[0].out, layernorm_exact(t.values()[0]), atol=1e-12)


def test_layernorm_exact():
    np.testing.assert_allclose(layernorm_exact([0.0, 2.0]), [-1, 1])
    np.testing.assert_allclose(layernorm_exact([1.0, -1.0, 1.0, -1.0]), [1, -1, 1, -1])
    y = layernorm_exact(np.random.default_rng(0).normal(5, 3, 100))
    assert abs(y.std() - 1) <= 1e-12
    with pytest.raises(DegenerateRow):
        layernorm_exact([1.0, 1.0])


@pytest.mark.parametrize("n,cycles", [(768, 769), (2, 3), (4096, 4097)])
def test_layernorm_latency(n, cycles):
    assert layernorm_latency(n) == cycles
