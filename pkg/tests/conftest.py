import numpy as np
import pytest

from cvahedge import EstimatorConfig, ModelParams, Portfolio, make_bond, make_cds, make_first_to_default
from cvahedge.cli import bundled_scenario, load_scenario

ACCEPTANCE = {}


def record_criterion(number, title, passed, detail=""):
    """Store one acceptance result for the end-of-run summary and print it."""
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def constant_params(lams, weights=None):
    """Constant intensities: no drift, no volatility."""
    n = len(lams)
    w = np.zeros((n, n)) if weights is None else weights
    return ModelParams(kappa=0.0, nu=0.0, sigma=np.zeros((n, 1)), weights=w, chi=lams)


def deterministic_params(kappa, nu, chi, weights=None):
    n = len(chi)
    w = np.zeros((n, n)) if weights is None else weights
    return ModelParams(kappa=kappa, nu=nu, sigma=np.zeros((n, 1)), weights=w, chi=chi)


def cds_portfolio(n=2, spread=0.1, loss=0.6, cp_spread=0.15, cp_loss=0.6, weight=1.0):
    return Portfolio([make_cds(0, spread, loss, n)], [weight], make_cds(n - 1, cp_spread, cp_loss, n))


def bond_portfolio(coupon=0.05, loss=0.6, cp_spread=0.15, cp_loss=0.6, weight=1.0):
    return Portfolio([make_bond(0, coupon, loss, 2)], [weight], make_cds(1, cp_spread, cp_loss, 2))


def ftd_portfolio(spread=0.2, losses=(0.6, 0.5), cp_spread=0.15, cp_loss=0.6, weight=1.0):
    return Portfolio([make_first_to_default(spread, list(losses), 3)], [weight], make_cds(2, cp_spread, cp_loss, 3))


@pytest.fixture(scope="session")
def scenario():
    return load_scenario(bundled_scenario())


@pytest.fixture(scope="session")
def cir2():
    """Two-name CIR model with contagion."""
    return ModelParams.cir(kappa=[0.1, 0.12], nu=[0.5, 0.5], sigma=[0.3], weights=[[0, 0.1], [0.15, 0]],
                           chi=[0.2, 0.25])


@pytest.fixture(scope="session")
def cir3():
    """Three-name CIR model with contagion."""
    return ModelParams.cir(kappa=[0.1, 0.12, 0.08], nu=[0.5, 0.6, 0.4], sigma=[0.2],
                           weights=[[0, 0.1, 0.2], [0.05, 0, 0.15], [0.1, 0.1, 0]], chi=[0.2, 0.15, 0.25])


@pytest.fixture
def fast_cfg():
    return EstimatorConfig(inner_paths=4000, dt=0.02, seed=123)


@pytest.fixture
def small_surface_cfg():
    """Coarse value-surface settings for quick structural tests."""
    return EstimatorConfig(inner_paths=2000, dt=0.05, seed=321, table_dt=0.25, table_nodes=5, table_paths=200)


@pytest.fixture(scope="session")
def cds_hedge(scenario):
    """Hedge replay of the bundled one-reference CDS scenario on 5e4 paths.

    Returns ``(instrument, ensemble, hedge)``.
    """
    import dataclasses

    from cvahedge import CdsHedgeInstrument, replay, simulate_market

    sim = dataclasses.replace(scenario.sim, n_paths=50_000)
    inst = CdsHedgeInstrument(scenario.portfolio.counterparty, scenario.model, scenario.estimator, scenario.maturity)
    ens = simulate_market(scenario.model, sim, stop_on=scenario.model.n_names - 1)
    return inst, ens, replay(ens, scenario.portfolio, inst)
