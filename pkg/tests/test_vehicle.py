import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacc_mbc.vehicle import (
    Mode,
    VehicleParams,
    VehicleState,
    check_hard,
    comfort_bounds,
    continuous_matrices,
    desired_gap,
    discrete_matrices,
    emergency_indicator,
    gap,
    step,
    stopping_distance,
)


@pytest.fixture
def params():
    return VehicleParams()


class TestParams:
    def test_defaults(self, params):
        assert (params.tau, params.d_s, params.l_v, params.f) == (0.6, 2.0, 5.0, 10.0)
        assert (params.a_min, params.a_max, params.u_min, params.u_max) == (-4.0, 3.0, -4.0, 3.0)
        assert params.d_lower == 0.5

    @pytest.mark.parametrize(
        "kwargs",
        [{"tau": 0.0}, {"f": -1.0}, {"a_min": 1.0}, {"u_min": 3.0, "u_max": 3.0}, {"d_lower": 0.0}],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            VehicleParams(**kwargs)


class TestSpacing:
    def test_desired_gap_at_cruise(self, params):
        assert desired_gap(27.0, params) == pytest.approx(18.2)

    def test_desired_gap_at_standstill(self, params):
        assert desired_gap(0.0, params) == 2.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 40), st.floats(0, 40))
    def test_desired_gap_affine_increasing(self, v1, v2):
        p = VehicleParams()
        d1, d2 = desired_gap(v1, p), desired_gap(v2, p)
        if v1 < v2:
            assert d1 <= d2
        assert d2 - d1 == pytest.approx(p.tau * (v2 - v1), abs=1e-9)

    def test_gap_is_bumper_to_bumper(self):
        assert gap(30.0, 10.0, 5.0) == 15.0


class TestMatrices:
    def test_continuous(self, params):
        A, B, D = continuous_matrices(params)
        np.testing.assert_array_equal(A, [[0, 1, -0.6], [0, 0, -1], [0, 0, -10]])
        np.testing.assert_array_equal(B.ravel(), [0, 0, 10])
        np.testing.assert_array_equal(D.ravel(), [0, 1, 0])

    def test_discrete_forward_euler(self, params):
        Ad, Bd, Dd = discrete_matrices(params, 0.1)
        np.testing.assert_allclose(Ad, [[1, 0.1, -0.06], [0, 1, -0.1], [0, 0, 0]], atol=1e-15)
        np.testing.assert_allclose(Bd.ravel(), [0, 0, 1.0])
        np.testing.assert_allclose(Dd.ravel(), [0, 0.1, 0])


class TestStep:
    def test_acceleration_follows_input_in_one_step(self, params):
        s = step(VehicleState(0, 0, 0, 0, 20), -2.0, 0.0, 0.1, params)
        assert s.a == pytest.approx(-2.0)

    def test_equilibrium_is_fixed_point(self, params):
        s0 = VehicleState(0.0, 0.0, 0.0, 10.0, 27.0)
        s1 = step(s0, 0.0, 0.0, 0.1, params)
        assert (s1.delta_d, s1.delta_v, s1.a, s1.v) == (0.0, 0.0, 0.0, 27.0)
        assert s1.x == pytest.approx(12.7)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(-5, 5), st.floats(-5, 5), st.floats(-4, 3), st.floats(-4, 3), st.floats(-4, 3), st.floats(1, 30)
    )
    def test_matches_matrix_form(self, dd, dv, a, u, a_pred, v):
        p = VehicleParams()
        Ad, Bd, Dd = discrete_matrices(p, 0.1)
        expected = Ad @ [dd, dv, a] + Bd.ravel() * u + Dd.ravel() * a_pred
        s = step(VehicleState(dd, dv, a, 0.0, v), u, a_pred, 0.1, p)
        np.testing.assert_allclose(s.error_vector, expected, atol=1e-12)

    def test_velocity_never_negative(self, params):
        s = step(VehicleState(0, 0, -4.0, 0, 0.2), -4.0, 0.0, 0.1, params)
        assert s.v == 0.0
        assert s.a == 0.0

    def test_rejects_nonpositive_step(self, params):
        with pytest.raises(ValueError):
            step(VehicleState(0, 0, 0), 0.0, 0.0, 0.0, params)

    def test_error_coordinates_track_absolute_kinematics(self, params):
        # predecessor brakes at -2; propagated dd matches recomputed dd to O(t_s^2) per step
        lead = VehicleState(0, 0, 0, 100.0, 20.0)
        ego = VehicleState(0.0, 0.0, 0.0, 100.0 - 5.0 - desired_gap(20.0, params), 20.0)
        for _ in range(20):
            lead_next = step(lead, -2.0, 0.0, 0.1, params)
            ego = step(ego, -1.0, lead.a, 0.1, params)
            lead = lead_next
            recomputed = gap(lead.x, ego.x, params.l_v) - desired_gap(ego.v, params)
            assert abs(ego.delta_d - recomputed) < 0.5
            assert ego.delta_v == pytest.approx(lead.v - ego.v, abs=1e-9)


class TestHardConstraints:
    def test_clean_state(self, params):
        assert check_hard(VehicleState(0, 0, 0, 0, 20), 0.0, params) == []

    @pytest.mark.parametrize(
        "state, u, d, expected",
        [
            (VehicleState(0, 0, -4.5, 0, 20), 0.0, None, ["acceleration"]),
            (VehicleState(0, 0, 0, 0, 20), 3.5, None, ["input"]),
            (VehicleState(0, 0, 0, 0, 36), 0.0, None, ["speed"]),
            (VehicleState(0, 0, 0, 0, 20), 0.0, 0.0, ["collision"]),
            (VehicleState(-20.0, 0, 0, 0, 10), 0.0, None, ["collision"]),
        ],
    )
    def test_violations(self, params, state, u, d, expected):
        assert check_hard(state, u, params, d) == expected

    def test_slack_tolerates_rounding(self, params):
        assert check_hard(VehicleState(0, 0, -4.0 - 1e-12, 0, 20), -4.0 - 1e-12, params) == []


class TestComfort:
    def test_from_rest(self, params):
        lo, hi = comfort_bounds(0.0, 0.1, params)
        assert (lo, hi) == pytest.approx((-0.4, 0.3))

    def test_clamped_to_input_limits(self, params):
        assert comfort_bounds(-3.9, 0.1, params)[0] == -4.0
        assert comfort_bounds(2.9, 0.1, params)[1] == 3.0


class TestEmergencyIndicator:
    @pytest.mark.parametrize(
        "dd, mode",
        [(-0.6, Mode.EMERGENCY_BRAKING), (-0.5, Mode.EMERGENCY_BRAKING), (-0.49, Mode.FREE_FOLLOWING), (0.0, Mode.FREE_FOLLOWING)],
    )
    def test_threshold(self, dd, mode):
        assert emergency_indicator(dd, 0.5) is mode


def _integrated_stop(v, a, params, dt=1e-4):
    """Brute-force time stepping of the jerk-limited stop."""
    b = -max(params.a_min, params.u_min)
    j = -params.u_min
    x = 0.0
    while v > 0.0:
        v_next = v + a * dt
        if v_next < 0.0:
            x += v * (v / -a) / 2.0
            break
        x += 0.5 * (v + v_next) * dt
        v = v_next
        a = max(-b, a - j * dt)
    return x


class TestStoppingDistance:
    def test_already_at_braking_limit(self, params):
        S, dv, da = stopping_distance(20.0, -4.0, params)
        assert S == pytest.approx(20.0**2 / 8.0)
        assert dv == pytest.approx(20.0 / 4.0)

    def test_standstill(self, params):
        assert stopping_distance(0.0, -1.0, params)[0] == 0.0

    @pytest.mark.parametrize("v, a", [(27.0, 0.0), (15.9, 3.0), (16.6, -1.7), (0.5, 3.0), (1.0, -3.5), (35.0, 3.0)])
    def test_matches_time_stepping(self, params, v, a):
        assert stopping_distance(v, a, params)[0] == pytest.approx(_integrated_stop(v, a, params), abs=5e-3)

    @given(st.floats(0.0, 35.0), st.floats(-4.0, 3.0))
    @settings(max_examples=60, deadline=None)
    def test_gradient_matches_finite_differences(self, v, a):
        params = VehicleParams()
        h = 1e-6
        _, dv, da = stopping_distance(v + 2 * h, a, params)
        num_v = (stopping_distance(v + 3 * h, a, params)[0] - stopping_distance(v + h, a, params)[0]) / (2 * h)
        assert dv == pytest.approx(num_v, rel=1e-4, abs=1e-4)
        if -4.0 + 2 * h < a < 3.0 - 2 * h:
            num_a = (stopping_distance(v + 2 * h, a + h, params)[0] - stopping_distance(v + 2 * h, a - h, params)[0]) / (2 * h)
            assert da == pytest.approx(num_a, rel=1e-4, abs=1e-4)

    def test_vectorised_and_monotone(self, params):
        v = np.linspace(0.0, 35.0, 8)
        S, _, _ = stopping_distance(v, np.zeros_like(v), params)
        assert S.shape == v.shape
        assert np.all(np.diff(S) > 0)
        S_a = stopping_distance(20.0, np.linspace(-4.0, 3.0, 8), params)[0]
        assert np.all(np.diff(S_a) > 0)
