"""Exposure and CVA profile of the bundled CDS scenario, plus a contagion sweep.

Run with ``python demos/cva_profile.py``. Uses reduced Monte Carlo budgets so
it finishes in seconds.
"""

import dataclasses

import numpy as np

from cvahedge import cva_value, estimate_g, exposure
from cvahedge.cli import bundled_scenario, load_scenario
from cvahedge.surfaces import PortfolioSurfaces


def main():
    sc = load_scenario(bundled_scenario())
    est = dataclasses.replace(sc.estimator, inner_paths=4000, table_paths=1000)
    pf, params, T = sc.portfolio, sc.model, sc.maturity
    z0 = (0, 0)

    print("time  exposure  cva")
    surf = PortfolioSurfaces(pf, params, est, T)
    for t in np.linspace(0.0, T, 6)[:-1]:
        rec = exposure(pf, t, params.chi, z0, params, est, T)
        g = estimate_g(pf, t, params.chi, z0, est, params, surfaces=surf)
        print(f"{t:4.2f}  {rec.exposure.value:8.5f}  {g.value:.5f}")

    stream = cva_value(pf, 0.0, params.chi, z0, params, est, T, surfaces=surf, n_paths=20_000)
    print(f"CVA at 0 from simulated payments: {stream.value:.5f} +- {stream.std_error:.5f}")

    # Contagion from the counterparty onto the reference name raises wrong-way risk.
    print("\nw[0, cp]  cva")
    for w01 in (0.0, 0.1, 0.3):
        weights = np.array(params.weights)
        weights[0, 1] = w01
        p = params.replace(weights=weights)
        g = estimate_g(pf, 0.0, p.chi, z0, est, p, surfaces=PortfolioSurfaces(pf, p, est, T))
        print(f"{w01:8.2f}  {g.value:.5f}")


if __name__ == "__main__":
    main()
