import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexarm.errors import ValidationError
from flexarm.trajectory import Schedule, cpt, reference_table, sample

D = math.radians


def test_constant_when_endpoints_match():
    seg = cpt(0.4, 0.4, 3.0)
    th, thd, thdd = seg.sample(np.linspace(0, 3, 31))
    assert np.all(th == 0.4) and np.all(thd == 0) and np.all(thdd == 0)


def test_midpoint_symmetry():
    seg = cpt(0.0, D(60), 10.0)
    assert sample(seg, 5.0)[0] == pytest.approx(D(30), rel=1e-14)


def test_peak_rate_at_midpoint():
    seg = cpt(D(10), D(70), 8.0)
    t = np.linspace(0, 8, 80001)
    _, thd, _ = seg.sample(t)
    assert np.max(thd) == pytest.approx(1.5 * D(60) / 8.0, rel=1e-9)
    assert t[np.argmax(thd)] == pytest.approx(4.0, abs=1e-3)


def test_boundary_conditions():
    seg = cpt(0.1, 0.9, 2.0, t0=1.0)
    assert seg.sample(1.0)[:2] == pytest.approx((0.1, 0.0))
    assert seg.sample(3.0)[:2] == pytest.approx((0.9, 0.0), abs=1e-15)


@pytest.mark.parametrize("duration", [0.0, -1.0, math.nan, math.inf])
def test_bad_duration(duration):
    with pytest.raises(ValidationError):
        cpt(0.0, 1.0, duration)


def test_clamped_outside():
    seg = cpt(0.2, 0.5, 1.0, t0=2.0)
    assert sample(seg, 0.0) == (0.2, 0.0, 0.0)
    assert sample(seg, 9.0) == pytest.approx((0.5, 0.0, 0.0))


@settings(max_examples=100, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(0.5, 20.0), st.floats(0.02, 0.98))
def test_rates_match_finite_differences(a, b, T, frac):
    seg = cpt(a, b, T)
    t = frac * T
    h = 1e-5 * T
    th_p, thd_p, _ = seg.sample(t + h)
    th_m, thd_m, _ = seg.sample(t - h)
    _, thd, thdd = seg.sample(t)
    assert thd == pytest.approx((th_p - th_m) / (2 * h), abs=1e-8)
    assert thdd == pytest.approx((thd_p - thd_m) / (2 * h), abs=1e-6)


def test_schedule_chains_with_dwell():
    sch = Schedule.from_waypoints(0.0, [(D(60), 10.0, 5.0), (D(20), 10.0, 5.0)])
    assert sch.t_end == 30.0 and sch.duration == 30.0
    th, thd, _ = sch.sample([0.0, 10.0, 12.0, 15.0, 20.0, 25.0, 40.0])
    np.testing.assert_allclose(th, [0, D(60), D(60), D(60), D(40), D(20), D(20)], atol=1e-14)
    assert thd[0] == 0 and thd[2] == 0 and thd[3] == 0 and thd[-1] == 0


def test_schedule_is_c1():
    sch = Schedule.from_waypoints(0.3, [(1.0, 2.0, 0.0), (0.2, 3.0, 1.0), (0.7, 1.0, 0.0)])
    t = np.linspace(-1, 8, 90001)
    th, thd, thdd = sch.sample(t)
    assert np.max(np.abs(np.diff(thd))) < 1e-3
    assert np.max(np.abs(np.diff(th))) < 1e-3
    assert np.all(np.isfinite(thdd)) and np.max(np.abs(thdd)) < 10


def test_empty_schedule_holds_start():
    sch = Schedule.from_waypoints(0.4, [])
    th, thd, _ = sch.sample([0.0, 5.0])
    assert np.all(th == 0.4) and np.all(thd == 0) and sch.duration == 0


def test_negative_dwell_rejected():
    with pytest.raises(ValidationError):
        Schedule.from_waypoints(0.0, [(1.0, 1.0, -1.0)])


def test_deterministic_tables():
    sch = Schedule.from_waypoints(0.0, [(1.0, 2.0, 0.5)])
    a = reference_table(sch, 3000, 1e-3)
    b = reference_table(sch, 3000, 1e-3)
    assert a.tobytes() == b.tobytes() and a.shape == (3000, 3) and a.flags.c_contiguous
