import math

import numpy as np
import pytest
from conftest import constant_params, deterministic_params
from hypothesis import given, settings
from hypothesis import strategies as st

from cvahedge import (
    ConfigError,
    DefaultState,
    DomainError,
    ModelParams,
    SimConfig,
    feller_check,
    simulate_diffusion_only,
    simulate_market,
)
from cvahedge.model import POSITIVITY_FLOOR, compensator_increment, euler_step, time_grid
from cvahedge.rng import BLOCK_PATHS, block_generator, block_slices, stream_id

# 0.2 + (0.1 - 0.2) * exp(-1): flow of dx = (0.2 - x) dt from 0.1 over one unit of time.
ODE_VALUE_AT_ONE = 0.16321205588285577


class TestFellerCheck:
    def test_boundary_case_holds(self):
        p = ModelParams(kappa=0.5, nu=1.0, sigma=[[1.0]], weights=[[0.0]], chi=[0.2])
        assert feller_check(p) == [True]

    def test_no_diffusion(self):
        p = ModelParams(kappa=0.0, nu=0.0, sigma=np.zeros((1, 0)), weights=[[0.0]], chi=[0.2])
        assert feller_check(p) == [True]

    def test_two_factor_violation(self):
        p = ModelParams(kappa=0.1, nu=1.0, sigma=[[0.6, 0.6]], weights=[[0.0]], chi=[0.2])
        assert feller_check(p) == [False]


class TestParams:
    def test_shared_loading_broadcast(self):
        p = ModelParams.cir(kappa=[0.1, 0.2], nu=[1, 1], sigma=[0.3], weights=np.zeros((2, 2)), chi=[0.1, 0.2])
        assert p.sigma.shape == (2, 1) and np.all(p.sigma == 0.3)

    @pytest.mark.parametrize("field,value", [("chi", [0.0]), ("kappa", [-1.0]), ("weights", [[-0.1]]),
                                             ("chi", [np.nan])])
    def test_invalid_values(self, field, value):
        base = dict(kappa=[0.1], nu=[1.0], sigma=[[0.2]], weights=[[0.0]], chi=[0.2])
        base[field] = value
        with pytest.raises(ConfigError):
            ModelParams(**base)

    def test_weight_shape(self):
        with pytest.raises(ConfigError):
            ModelParams(kappa=0.1, nu=1.0, sigma=[0.2], weights=np.zeros((1, 2)), chi=[0.1, 0.2])

    def test_length_mismatch(self):
        with pytest.raises(ConfigError, match="kappa"):
            ModelParams(kappa=[0.1, 0.2, 0.3], nu=1.0, sigma=[0.2], weights=np.zeros((2, 2)), chi=[0.1, 0.2])

    def test_immutable_arrays(self, cir2):
        with pytest.raises(ValueError):
            cir2.chi[0] = 1.0

    def test_round_trip_dict(self, cir2):
        assert ModelParams(**cir2.to_dict()) == cir2


class TestSimConfig:
    @pytest.mark.parametrize("kw", [dict(horizon=0.0), dict(dt=0.0), dict(n_paths=0), dict(scheme="bogus"),
                                    dict(threads=0), dict(substep_cap=0)])
    def test_rejects(self, kw):
        base = dict(horizon=1.0, dt=0.1, n_paths=10)
        base.update(kw)
        with pytest.raises(ConfigError):
            SimConfig(**base)

    def test_grid_ends_at_horizon(self):
        g = time_grid(0.0, 1.0, 0.3)
        assert g[0] == 0.0 and g[-1] == 1.0 and np.all(np.diff(g) <= 0.3 + 1e-15)


class TestCompensatorIncrement:
    def test_constant(self):
        assert compensator_increment(0.4, 0.5) == pytest.approx(0.2, abs=1e-15)

    def test_zero_step(self):
        assert compensator_increment(0.4, 0.0) == 0.0

    def test_linear_ramp(self):
        assert compensator_increment(0.2, 1.0, 0.4) == pytest.approx(0.3, abs=1e-15)

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            compensator_increment(-0.1, 1.0)


class TestDiffusion:
    def test_constant_path(self):
        p = deterministic_params(0.0, 0.0, [0.3])
        paths = simulate_diffusion_only(p, 0.0, [0.3], 1.0, SimConfig(horizon=1.0, dt=0.1, n_paths=3))
        assert np.all(paths.values == 0.3)

    def test_ode_flow_exact_scheme(self):
        p = deterministic_params(0.2, 1.0, [0.1])
        cfg = SimConfig(horizon=1.0, dt=0.1, n_paths=1, scheme="exact_where_available")
        paths = simulate_diffusion_only(p, 0.0, [0.1], 1.0, cfg)
        assert paths.values[0, -1, 0] == pytest.approx(ODE_VALUE_AT_ONE, abs=1e-14)

    @pytest.mark.parametrize("dt", [0.1, 0.05, 0.025])
    def test_euler_first_order(self, dt):
        p = deterministic_params(0.2, 1.0, [0.1])
        paths = simulate_diffusion_only(p, 0.0, [0.1], 1.0, SimConfig(horizon=1.0, dt=dt, n_paths=1))
        err = abs(paths.values[0, -1, 0] - ODE_VALUE_AT_ONE)
        assert err <= 0.05 * dt

    def test_positive_under_feller(self, cir3):
        paths = simulate_diffusion_only(cir3, 0.0, cir3.chi, 2.0, SimConfig(horizon=2.0, dt=0.01, n_paths=2000))
        assert np.all(paths.values > 0)

    def test_floor_applied(self):
        p = ModelParams(kappa=0.0, nu=0.0, sigma=[[1.0]], weights=[[0.0]], chi=[0.01])
        out = euler_step(p, np.array([[0.01]]), 0.01, np.array([[-1.0]]))
        assert out[0, 0] == POSITIVITY_FLOOR

    def test_start_must_precede_horizon(self, cir2):
        with pytest.raises(DomainError):
            simulate_diffusion_only(cir2, 1.0, cir2.chi, 1.0, SimConfig(horizon=1.0, dt=0.1, n_paths=1))


class TestMarket:
    def test_vanishing_intensity_no_defaults(self):
        p = constant_params([1e-12])
        ens = simulate_market(p, SimConfig(horizon=1.0, dt=0.1, n_paths=20_000, seed=3), record=False)
        assert not np.any(np.isfinite(ens.default_times))

    def test_jump_bookkeeping(self):
        w = np.array([[0.0, 50.0], [0.0, 0.0]])
        p = constant_params([0.1, 2.0], weights=w)
        ens = simulate_market(p, SimConfig(horizon=1.0, dt=0.05, n_paths=200, seed=4))
        rows = np.flatnonzero(np.isfinite(ens.default_times[:, 1])
                              & ~(ens.default_times[:, 0] <= ens.default_times[:, 1]))
        assert rows.size > 0
        for r in rows[:20]:
            path = ens.path(r)
            tau = ens.default_times[r, 1]
            k = int(np.flatnonzero(path.grid == tau)[0])
            assert path.intensities[k, 0] == ens.pre_default[r, 1, 0] + 50.0

    def test_positive_stored_intensities(self, cir3):
        ens = simulate_market(cir3, SimConfig(horizon=1.0, dt=0.02, n_paths=3000, seed=8))
        alive = ~ens.defaults
        assert np.all(ens.intensities[alive] > 0)

    def test_martingale_means(self, cir2):
        ens = simulate_market(cir2, SimConfig(horizon=1.0, dt=0.02, n_paths=40_000, seed=21), record=False)
        m = ens.martingales()
        se = m.std(axis=0, ddof=1) / math.sqrt(m.shape[0])
        assert np.all(np.abs(m.mean(axis=0)) <= 3 * se)

    def test_thread_count_invariance(self, cir3):
        n = 2 * BLOCK_PATHS + 17
        outs = [simulate_market(cir3, SimConfig(horizon=0.5, dt=0.05, n_paths=n, seed=5, threads=k), record=False)
                for k in (1, 3)]
        for field in ("default_times", "compensators", "square_integral", "pre_default"):
            assert np.array_equal(getattr(outs[0], field), getattr(outs[1], field), equal_nan=True)

    def test_same_seed_same_path(self, cir2):
        cfg = SimConfig(horizon=1.0, dt=0.05, n_paths=50, seed=9)
        a, b = simulate_market(cir2, cfg), simulate_market(cir2, cfg)
        assert np.array_equal(a.intensities, b.intensities)

    def test_monotone_contagion(self):
        # Deterministic drifts keep the Euler map monotone, so only the clocks are random.
        base = np.array([[0.0, 0.2], [0.0, 0.0]])
        cfgs = SimConfig(horizon=1.0, dt=0.05, n_paths=5000, seed=13)
        comp = []
        for scale in (1.0, 3.0):
            p = ModelParams(kappa=[0.1, 0.3], nu=[0.5, 0.5], sigma=np.zeros((2, 1)), weights=base * scale,
                            chi=[0.1, 0.8])
            comp.append(simulate_market(p, cfgs, record=False))
        first = comp[0].default_times[:, 1] < comp[0].default_times[:, 0]
        assert np.all(comp[1].compensators[first, 0] >= comp[0].compensators[first, 0] - 1e-12)

    def test_stop_on_freezes(self, cir2):
        ens = simulate_market(cir2, SimConfig(horizon=1.0, dt=0.05, n_paths=2000, seed=2), stop_on=1, record=False)
        stopped = np.isfinite(ens.default_times[:, 1])
        later = ens.default_times[stopped, 0] > ens.default_times[stopped, 1]
        assert not np.any(later & np.isfinite(ens.default_times[stopped, 0]))

    def test_path_events_ordered(self, cir3):
        ens = simulate_market(cir3.replace(chi=[1.0, 1.5, 2.0]), SimConfig(horizon=1.0, dt=0.1, n_paths=50, seed=1))
        for p in range(10):
            path = ens.path(p)
            times = [t for t, _ in path.events()]
            assert times == sorted(times)
            assert np.all(np.diff(path.grid) >= 0)
            assert np.all(np.sum(np.diff(path.defaults.astype(int), axis=0), axis=1) <= 1)

    def test_square_integral_finite(self, cir3):
        ens = simulate_market(cir3, SimConfig(horizon=1.0, dt=0.05, n_paths=2000, seed=1), record=False)
        assert np.all(np.isfinite(ens.square_integral)) and np.all(ens.square_integral >= 0)

    def test_rejects_nonpositive_start(self, cir2):
        with pytest.raises(DomainError):
            simulate_market(cir2, SimConfig(horizon=1.0, dt=0.1, n_paths=2), x0=[0.0, 0.2])


class TestDefaultState:
    def test_index_round_trip(self):
        z = DefaultState((1, 0, 1))
        assert DefaultState.from_index(z.index, 3) == z and z.popcount == 2 and z.survivors() == [1]

    def test_bad_bits(self):
        with pytest.raises(DomainError):
            DefaultState((0, 2))


class TestRng:
    def test_block_partition_independent_of_workers(self):
        sl = block_slices(10_000)
        assert sl[0] == slice(0, BLOCK_PATHS) and sl[-1].stop == 10_000

    def test_streams_differ(self):
        a = block_generator(1, stream_id("a")).standard_normal(4)
        b = block_generator(1, stream_id("b")).standard_normal(4)
        c = block_generator(1, stream_id("a")).standard_normal(4)
        assert not np.array_equal(a, b) and np.array_equal(a, c)


@settings(max_examples=25, deadline=None)
@given(x=st.floats(1e-6, 5.0), h=st.floats(1e-4, 0.5), dw=st.floats(-3.0, 3.0))
def test_euler_step_never_below_floor(x, h, dw):
    p = ModelParams(kappa=0.1, nu=2.0, sigma=[[1.5]], weights=[[0.0]], chi=[0.2])
    out = euler_step(p, np.array([[x]]), h, np.array([[dw * math.sqrt(h)]]))
    assert out[0, 0] >= POSITIVITY_FLOOR


@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.0, 10.0), b=st.floats(0.0, 10.0), dt=st.floats(0.0, 2.0))
def test_compensator_increment_symmetric(a, b, dt):
    assert compensator_increment(a, dt, b) == pytest.approx(compensator_increment(b, dt, a))
