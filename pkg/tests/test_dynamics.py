import math

import numpy as np
import pytest
import scipy.linalg

from prreach.dynamics import (
    DeficientRotor,
    LinearModel,
    LQRConvergenceError,
    ModelConfig,
    NoHazard,
    QuadrotorParams,
    SensorError,
    WindDisturbance,
    apply_hazard,
    build_nominal,
    closed_loop,
    dare_residual,
    discretize,
    expm,
    lqr,
    spectral_radius,
    wind_zonotope,
)

PARAMS = QuadrotorParams()


@pytest.fixture(scope="module")
def nominal():
    return build_nominal(PARAMS)


@pytest.fixture(scope="module")
def nominal_d(nominal):
    return discretize(nominal, PARAMS.dt)


def scalar_model(a, b, discrete=True):
    return LinearModel(
        [[a]], [[b]], [[0.0]], time_domain="discrete" if discrete else "continuous", dt=1.0 if discrete else None
    )


class TestNominal:
    def test_gravity_entries(self, nominal):
        assert nominal.A[6][1] == -9.81
        assert nominal.A[7][0] == 9.81

    def test_thrust_entry(self, nominal):
        assert nominal.B[8][0] == pytest.approx(1 / 1.5)

    def test_torque_entries(self, nominal):
        assert nominal.B[3][1] == pytest.approx(50.0)
        assert nominal.B[4][2] == pytest.approx(50.0)
        assert nominal.B[5][3] == pytest.approx(25.0)

    def test_structure(self, nominal):
        A = nominal.A
        np.testing.assert_array_equal(A[0:3, 3:6], np.eye(3))
        np.testing.assert_array_equal(A[9:12, 6:9], np.eye(3))
        assert np.all(A[3:6] == 0)
        assert np.count_nonzero(A) == 8

    def test_disturbance_matrix(self, nominal):
        Bw = nominal.Bw
        assert Bw.shape == (12, 6)
        assert Bw[6, 0] == Bw[7, 1] == Bw[8, 2] == pytest.approx(1 / 1.5)
        assert Bw[3, 3] == pytest.approx(50.0) and Bw[5, 5] == pytest.approx(25.0)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            QuadrotorParams(m=0)


class TestHazard:
    def test_deficient_rotor(self, nominal):
        out = apply_hazard(nominal, DeficientRotor(0.4))
        np.testing.assert_allclose(out.B, 0.4 * nominal.B)
        np.testing.assert_array_equal(out.A, nominal.A)

    def test_none_is_identity(self, nominal):
        out = apply_hazard(nominal, NoHazard())
        assert out is nominal

    def test_sensor_error(self, nominal):
        out = apply_hazard(nominal, SensorError(0.6, 0.6))
        assert out.A[0][0] == 0.6 and out.A[1][1] == 0.6 and out.A[2][2] == 0
        diff = out.A - nominal.A
        diff[0, 0] = diff[1, 1] = 0
        assert np.all(diff == 0)

    def test_wind(self, nominal):
        W = wind_zonotope([0.05, 0.31, 0, -0.005, -0.03, 0], 0.03)
        out = apply_hazard(nominal, WindDisturbance(W))
        assert out.W is W
        np.testing.assert_allclose(np.diag(W.generators), 0.09)
        assert out.disturbance_set().dim == 12

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            DeficientRotor(0.0)
        with pytest.raises(ValueError):
            SensorError(1.2, 0.5)

    def test_requires_continuous(self, nominal_d):
        with pytest.raises(ValueError):
            apply_hazard(nominal_d, DeficientRotor(0.5))


class TestDiscretize:
    def test_zero_drift(self):
        B = np.array([[1.0, 2.0], [3.0, 4.0]])
        m = LinearModel(np.zeros((2, 2)), B, np.zeros((2, 1)))
        d = discretize(m, 0.01)
        np.testing.assert_allclose(d.A, np.eye(2), atol=1e-15)
        np.testing.assert_allclose(d.B, 0.01 * B, rtol=1e-14)

    def test_scalar(self):
        d = discretize(scalar_model(1.0, 1.0, discrete=False), 0.01)
        assert d.A[0, 0] == pytest.approx(math.exp(0.01), rel=1e-14)
        assert d.A[0, 0] == pytest.approx(1.010050167, abs=1e-9)
        assert d.B[0, 0] == pytest.approx(math.exp(0.01) - 1, rel=1e-12)

    def test_double_integrator(self):
        m = LinearModel([[0, 1], [0, 0]], [[0], [1]], [[0], [0]])
        d = discretize(m, 0.01)
        np.testing.assert_allclose(d.A, [[1, 0.01], [0, 1]], atol=1e-16)
        np.testing.assert_allclose(d.B, [[0.5e-4], [0.01]], rtol=1e-13)

    def test_against_scipy(self, nominal):
        d = discretize(nominal, 0.01)
        np.testing.assert_allclose(d.A, scipy.linalg.expm(nominal.A * 0.01), atol=1e-14)

    def test_semigroup(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            A = rng.normal(size=(4, 4))
            A -= (np.max(np.linalg.eigvals(A).real) + 0.5) * np.eye(4)
            lhs = expm(A * 0.3) @ expm(A * 0.45)
            assert np.linalg.norm(lhs - expm(A * 0.75)) <= 1e-10

    def test_large_norm(self):
        A = np.array([[-20.0, 15.0], [3.0, -40.0]])
        np.testing.assert_allclose(expm(A), scipy.linalg.expm(A), rtol=1e-9, atol=1e-300)


class TestLQR:
    def test_scalar_golden_ratio(self):
        K = lqr(scalar_model(1.0, 1.0))
        assert K[0, 0] == pytest.approx(2 / (1 + math.sqrt(5)), abs=1e-9)
        assert K[0, 0] == pytest.approx(0.6180339887, abs=1e-9)

    def test_zero_cost(self):
        K = lqr(scalar_model(0.5, 1.0), Q=[[0.0]], R=[[1.0]])
        assert K[0, 0] == 0.0

    def test_uncontrollable_unstable(self):
        with pytest.raises(LQRConvergenceError):
            lqr(scalar_model(2.0, 0.0))

    def test_quadrotor_residual(self, nominal_d):
        from prreach.dynamics import solve_dare

        P = solve_dare(nominal_d.A, nominal_d.B, np.eye(12), np.eye(4))
        assert dare_residual(nominal_d.A, nominal_d.B, np.eye(12), np.eye(4), P) <= 1e-9
        ref = scipy.linalg.solve_discrete_are(nominal_d.A, nominal_d.B, np.eye(12), np.eye(4))
        np.testing.assert_allclose(P, ref, rtol=1e-8, atol=1e-8)

    def test_quadrotor_stable(self, nominal_d):
        assert spectral_radius(closed_loop(nominal_d, lqr(nominal_d))) < 1

    @pytest.mark.parametrize("cause", ["rotor", "sensor", "wind"])
    def test_hazard_variants_stable(self, nominal, cause):
        model = discretize(apply_hazard(nominal, ModelConfig().causes()[cause]), PARAMS.dt)
        assert spectral_radius(closed_loop(model, lqr(model))) < 1

    def test_requires_discrete(self, nominal):
        with pytest.raises(ValueError):
            lqr(nominal)


class TestClosedLoop:
    def test_zero_gain(self, nominal_d):
        np.testing.assert_array_equal(closed_loop(nominal_d, np.zeros((4, 12))), nominal_d.A)

    def test_deadbeat(self):
        A = np.array([[1.0, 2.0], [0.5, -1.0]])
        B = np.array([[2.0, 1.0], [0.0, 1.0]])
        m = LinearModel(A, B, np.zeros((2, 1)), time_domain="discrete", dt=0.1)
        np.testing.assert_allclose(closed_loop(m, np.linalg.solve(B, A)), 0, atol=1e-14)

    def test_shape_mismatch(self, nominal_d):
        with pytest.raises(ValueError):
            closed_loop(nominal_d, np.zeros((12, 4)))


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = ModelConfig()
        path = tmp_path / "c.json"
        import json

        path.write_text(json.dumps(cfg.to_dict()))
        back = ModelConfig.load(path)
        assert back == cfg
        assert back.params.Jz == 0.04 and back.T == 25

    def test_wind_mean_length(self):
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"wind_mean": [0.05, 0.31, 0, -0.005, -0.03]})
