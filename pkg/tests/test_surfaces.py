import numpy as np
import pytest
from conftest import cds_portfolio, constant_params

from cvahedge import EstimatorConfig
from cvahedge import closed_forms as cf
from cvahedge.surfaces import ConstantSurface, GridSurface, PortfolioSurfaces, cds_family, default_x_max

TIMES = np.linspace(0.0, 1.0, 6)
AXES = [np.linspace(0.0, 1.0, 7), np.linspace(0.0, 2.0, 8)]
CFG = EstimatorConfig(inner_paths=500, dt=0.05, seed=3, table_dt=0.25, table_nodes=7, table_paths=100)


def cubic(s, x0, x1):
    return s**3 - 2 * s + x0**3 + x0 * x1 - 0.5 * x1**2


def synthetic_surface():
    s, a, b = np.meshgrid(TIMES, *AXES, indexing="ij")
    values = cubic(s, a, b)
    return GridSurface(TIMES, AXES, [0, 1], values, np.zeros_like(values), 2)


class TestGridSurface:
    def test_reproduces_nodes(self):
        surf = synthetic_surface()
        pts = np.array([[AXES[0][2], AXES[1][5]], [AXES[0][6], AXES[1][0]]])
        for q, t in enumerate(TIMES):
            assert np.allclose(surf.value(t, pts), surf.values[q, [2, 6], [5, 0]], atol=1e-12)

    def test_cubics_exact(self):
        # Cubic splines and four-point Lagrange weights reproduce cubics.
        surf = synthetic_surface()
        rng = np.random.default_rng(0)
        x = np.column_stack([rng.uniform(0, 1, 50), rng.uniform(0, 2, 50)])
        s = rng.uniform(0, 1, 50)
        assert np.allclose(surf.value(s, x), cubic(s, x[:, 0], x[:, 1]), atol=1e-10)
        grad = surf.gradient(s, x)
        assert np.allclose(grad[:, 0], 3 * x[:, 0] ** 2 + x[:, 1], atol=1e-9)
        assert np.allclose(grad[:, 1], x[:, 0] - x[:, 1], atol=1e-9)

    def test_continuous_across_time_nodes(self):
        surf = synthetic_surface()
        x = np.array([[0.3, 0.7]])
        for t in TIMES[1:-1]:
            assert surf.value(t - 1e-9, x)[0] == pytest.approx(surf.value(t + 1e-9, x)[0], abs=1e-7)

    def test_clamped_outside_grid(self):
        surf = synthetic_surface()
        inside = surf.value(0.5, np.array([[1.0, 2.0]]))
        assert surf.value(0.5, np.array([[5.0, 9.0]]))[0] == inside[0]

    def test_mixed_times_match_single_time(self):
        surf = synthetic_surface()
        x = np.array([[0.2, 0.4], [0.6, 1.1]])
        both = surf.value(np.array([0.15, 0.85]), x)
        assert both[0] == pytest.approx(surf.value(0.15, x[:1])[0], abs=1e-14)
        assert both[1] == pytest.approx(surf.value(0.85, x[1:])[0], abs=1e-14)

    def test_no_survivors(self):
        values = TIMES**2
        surf = GridSurface(TIMES, [], [], values, np.zeros_like(values), 2)
        x = np.zeros((3, 2))
        assert np.allclose(surf.value(0.45, x), 0.45**2, atol=1e-14)
        assert not surf.gradient(0.45, x).any()


def test_constant_surface():
    surf = ConstantSurface(lambda s: 1.0 - s, 2)
    assert np.allclose(surf.value(0.25, np.zeros((2, 2))), 0.75)
    assert not surf.gradient(0.25, np.zeros((2, 2))).any()


def test_axis_covers_start():
    params = constant_params([0.3, 0.25])
    assert np.all(default_x_max(params, 1.0) > params.chi)


class TestFamilies:
    def test_memoized(self):
        params = constant_params([0.3, 0.25])
        fam = cds_family(cds_portfolio().counterparty, params, CFG, 1.0)
        assert fam(0) is fam(0)

    def test_full_default_is_recovery(self):
        params = constant_params([0.3, 0.25])
        fam = cds_family(cds_portfolio().counterparty, params, CFG, 1.0)
        x = np.tile(params.chi, (4, 1))
        assert np.all(fam.value(3, np.linspace(0, 1, 4), x) == 0.6)

    def test_constant_intensity_cds(self):
        params = constant_params([0.3, 0.25])
        fam = cds_family(cds_portfolio(cp_spread=0.1).counterparty, params, CFG, 1.0)
        ref = cf.single_name_cds_value(0.25, 0.6, 0.1, 0.65)
        # Off the time nodes only the interpolation error remains.
        assert fam.value(0, 0.35, params.chi[None])[0] == pytest.approx(ref, rel=1e-4)
        assert fam.value(0, 0.5, params.chi[None])[0] == pytest.approx(
            cf.single_name_cds_value(0.25, 0.6, 0.1, 0.5), rel=1e-4)

    def test_scaled_portfolios_scale_exactly(self, cir2):
        one = PortfolioSurfaces(cds_portfolio(weight=1.0), cir2, CFG, 1.0)
        two = PortfolioSurfaces(cds_portfolio(weight=2.0), cir2, CFG, 1.0)
        x = np.tile(cir2.chi, (3, 1)) * np.array([[0.5], [1.0], [1.5]])
        np.testing.assert_allclose(two.exposure(0).value(0.3, x), 2 * one.exposure(0).value(0.3, x), rtol=1e-12)

    def test_claim_surface_matches_exposure(self, cir2):
        surf = PortfolioSurfaces(cds_portfolio(), cir2, CFG, 1.0)
        x = cir2.chi[None]
        assert surf.claim(0, 0).value(0.2, x)[0] == pytest.approx(surf.exposure(0).value(0.2, x)[0], rel=1e-12)

    def test_requires_maturity(self, cir2):
        with pytest.raises(ValueError):
            PortfolioSurfaces(cds_portfolio(), cir2, CFG, None)
