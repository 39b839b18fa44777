import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from didsee.schedule import (
    ScheduleError, ScheduleStateError, Strategy, build_scaled_linear_schedule, build_schedule,
    rescale_zero_terminal_snr, schedule_from_betas, snr, timestep_grid, write_schedule_csv,
)


def product_oracle(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return np.array(out)


@pytest.fixture(scope="module")
def default():
    return build_scaled_linear_schedule(1000, 0.00085, 0.012)


def test_default_terminal_values(default):
    T = default.T
    assert abs(default.alpha_bar(T) - 0.00466) < 1e-5
    assert abs(default.sqrt_alpha_bar(T) - 0.068265) < 1e-6
    assert abs(default.sqrt_one_minus_alpha_bar(T) - 0.997667) < 1e-6
    assert abs(snr(default, T) - 0.004682) < 1e-6


def test_betas_linear_in_sqrt_space(default):
    root = np.sqrt(default.betas)
    assert np.allclose(np.diff(root), np.diff(root)[0], rtol=0, atol=1e-15)
    assert root[0] == pytest.approx(math.sqrt(0.00085))
    assert root[-1] == pytest.approx(math.sqrt(0.012))


def test_single_step_schedule():
    s = build_scaled_linear_schedule(1, 0.3, 0.3)
    assert s.alpha_bar(1) == pytest.approx(0.7, abs=1e-15)


def test_ten_step_matches_direct_product():
    s = build_scaled_linear_schedule(10, 0.00085, 0.012)
    assert s.alpha_bar(10) == pytest.approx(product_oracle(s.betas)[-1], abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 400), lo=st.floats(1e-5, 0.02), span=st.floats(1e-4, 0.5))
def test_product_consistency(T, lo, span):
    s = build_scaled_linear_schedule(T, lo, min(lo + span, 0.99))
    assert np.max(np.abs(s.alpha_bars - product_oracle(s.betas))) < 1e-12
    assert np.all(np.diff(s.sqrt_alpha_bars) < 0)
    assert np.all((s.alpha_bars >= 0) & (s.alpha_bars <= 1))


@pytest.mark.parametrize("args", [(1000, 0.012, 0.00085), (1000, 0.0, 0.01), (1000, 0.01, 1.0), (0, 0.1, 0.2)])
def test_invalid_schedule_arguments(args):
    with pytest.raises(ScheduleError):
        build_scaled_linear_schedule(*args)


def test_snr_values(default):
    assert snr(schedule_from_betas([0.5]), 1) == 1.0
    rescaled = rescale_zero_terminal_snr(default)
    assert snr(rescaled, 1000) == 0.0
    with pytest.raises(IndexError):
        snr(default, 0)
    with pytest.raises(IndexError):
        snr(default, 1001)


def test_snr_infinite_at_unit_alpha_bar():
    s = schedule_from_betas([1e-300, 0.5])
    assert snr(s, 1) == math.inf


def test_rescale_endpoints(default):
    r = rescale_zero_terminal_snr(default)
    assert r.rescaled
    assert r.sqrt_alpha_bars[-1] == 0.0
    assert r.alpha_bars[-1] == 0.0
    assert abs(r.sqrt_alpha_bars[0] - default.sqrt_alpha_bars[0]) < 1e-12
    assert np.all(np.diff(r.sqrt_alpha_bars) < 0)
    assert r.betas[-1] == 1.0


def test_rescale_midpoint_formula(default):
    r = rescale_zero_terminal_snr(default)
    prods = product_oracle(default.betas)
    s1, s500, sT = math.sqrt(prods[0]), math.sqrt(prods[499]), math.sqrt(prods[-1])
    expected = (s500 - sT) * s1 / (s1 - sT)
    assert r.sqrt_alpha_bar(500) == pytest.approx(expected, abs=1e-12)


def test_rescaled_betas_reproduce_alpha_bars(default):
    r = rescale_zero_terminal_snr(default)
    assert np.max(np.abs(product_oracle(r.betas[:-1]) - r.alpha_bars[:-1])) < 1e-12


def test_rescale_twice_fails(default):
    with pytest.raises(ScheduleStateError):
        rescale_zero_terminal_snr(rescale_zero_terminal_snr(default))


@settings(max_examples=30, deadline=None)
@given(T=st.integers(3, 300), lo=st.floats(1e-4, 0.01), span=st.floats(1e-3, 0.3))
def test_rescale_properties(T, lo, span):
    s = build_scaled_linear_schedule(T, lo, lo + span)
    r = rescale_zero_terminal_snr(s)
    assert r.sqrt_alpha_bars[-1] == 0.0
    assert abs(r.sqrt_alpha_bars[0] - s.sqrt_alpha_bars[0]) < 1e-12
    assert np.all(np.diff(r.sqrt_alpha_bars) < 0)


def test_schedule_is_immutable(default):
    with pytest.raises(ValueError):
        default.betas[0] = 0.5


@pytest.mark.parametrize("S,leading,trailing", [
    (1, [1], [1000]),
    (2, [501, 1], [1000, 500]),
    (5, [801, 601, 401, 201, 1], [1000, 800, 600, 400, 200]),
])
def test_timestep_grid_table(S, leading, trailing):
    assert list(timestep_grid(1000, S, "leading").steps) == leading
    assert list(timestep_grid(1000, S, "trailing").steps) == trailing


def test_grid_errors():
    with pytest.raises(ScheduleError):
        timestep_grid(10, 11, "trailing")
    with pytest.raises(ValueError):
        timestep_grid(10, 2, "middle")


@given(T=st.integers(1, 2000), data=st.data())
def test_grid_containment(T, data):
    S = data.draw(st.integers(1, T))
    tr = timestep_grid(T, S, Strategy.TRAILING).steps
    le = timestep_grid(T, S, Strategy.LEADING).steps
    for g in (tr, le):
        assert all(1 <= k <= T for k in g)
        assert all(a > b for a, b in zip(g, g[1:]))
    assert tr[0] == T
    assert le[-1] == 1
    if S < T:
        assert T not in le


def test_non_divisible_grid_rounds():
    assert list(timestep_grid(10, 3, "trailing").steps) == [10, 7, 3]
    assert list(timestep_grid(10, 3, "leading").steps) == [8, 4, 1]


def test_build_schedule_modes():
    assert not build_schedule("original").rescaled
    assert build_schedule("rescaled").rescaled
    with pytest.raises(ScheduleError):
        build_schedule("cosine")


def test_fingerprint_distinguishes_modes():
    assert build_schedule("original").fingerprint() != build_schedule("rescaled").fingerprint()
    assert build_schedule("original").fingerprint() == build_schedule("original").fingerprint()


def test_schedule_csv(tmp_path, default):
    path = write_schedule_csv(default, tmp_path / "s.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,beta,alpha_bar,sqrt_alpha_bar,snr"
    assert len(lines) == 1001
    t, beta, ab, sab, s = lines[-1].split(",")
    assert int(t) == 1000 and float(ab) == default.alpha_bar(1000)
