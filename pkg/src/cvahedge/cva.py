"""Claim prices, exposure and the CVA payment stream along simulated paths."""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .fk_engine import CauchySpec, Estimate, _as_state_index, estimate_F_recursive
from .model import SimConfig, simulate_market
from .rng import stream_id


@dataclass(frozen=True)
class ExposureRecord:
    """Mark-to-market exposure to the counterparty at one time.

    Attributes:
        time: Valuation time.
        prices: Per-claim prices (estimates).
        exposure: ``sum_i b_i (1 - K_i) S_i``.
        positive_part: ``max(exposure, 0)`` of the point value.
    """

    time: float
    prices: tuple
    exposure: Estimate
    positive_part: float


def claim_price(claim, t, x, z, params, cfg, maturity, estimator=estimate_F_recursive):
    """Ex-dividend price ``S(t, T)`` of one claim at ``(t, x, z)``.

    Uses ``1{t != T} F_(1,0,0) + F_(0,1,1) - Z K``. The price is exactly zero
    once the claim has triggered and at maturity when it has not.
    """
    s = _as_state_index(z, params.n_names)
    if not 0 <= t <= maturity:
        raise DomainError(f"t={t} outside [0, {maturity}]")
    if claim.k[s] or t >= maturity:
        return Estimate.exact(0.0)
    promised = estimator(CauchySpec(claim, (1, 0, 0), maturity), t, x, z, cfg, params)
    flows = estimator(CauchySpec(claim, (0, 1, 1), maturity), t, x, z, cfg, params)
    return promised + flows


def exposure(portfolio, t, x, z, params, cfg, maturity, estimator=estimate_F_recursive):
    """Weighted price of the claims that have not triggered, as an :class:`ExposureRecord`."""
    s = _as_state_index(z, params.n_names)
    prices = []
    total = Estimate.exact(0.0)
    for b, claim in zip(portfolio.weights, portfolio.claims):
        price = claim_price(claim, t, x, z, params, cfg, maturity, estimator)
        prices.append(price)
        if b and not claim.k[s]:
            total = total + Estimate(b * price.value, abs(b) * price.std_error, price.n_paths)
    return ExposureRecord(float(t), tuple(prices), total, max(total.value, 0.0))


def _point_exposure(portfolio, params, cfg, maturity):
    """Pricer of the post-default exposure built from point estimates."""
    from .fk_engine import Cashflows

    def price(t, x, state):
        coefs = portfolio.exposure_weights(state)
        parts = [(c, claim, (1, 1, 1)) for c, claim in zip(coefs, portfolio.claims)]
        cash = Cashflows.from_claims(parts, maturity, params.n_names)
        if cash.is_zero:
            return 0.0
        bits = (state >> np.arange(params.n_names)) & 1
        total = 0.0
        for c, claim, alpha in cash.parts:
            total += c * estimate_F_recursive(CauchySpec(claim, alpha, maturity), t, x, bits, cfg, params).value
        return total

    return price


def theta_stream(portfolio, path, params, cfg, maturity, surfaces=None):
    """CVA payment ``Theta(T ^ tau_cp)`` realized along one path.

    Zero unless the counterparty defaults strictly before maturity. Otherwise
    the counterparty loss times the positive part of the post-default
    exposure, priced at ``(tau, X(tau-) + w_cp, H^cp(tau-))``.

    Args:
        portfolio: Claims, weights and counterparty CDS.
        path: A :class:`cvahedge.model.MarketPath`.
        params: Model parameters.
        cfg: Estimator settings for point prices.
        maturity: Final time.
        surfaces: Optional :class:`cvahedge.surfaces.PortfolioSurfaces`; when
            given the exposure is read from its surfaces.
    """
    cp = portfolio.counterparty_index
    tau = float(path.default_times[cp])
    if path.defaults[0][cp]:
        raise DomainError("counterparty already defaulted at the start of the path")
    if not tau < maturity:
        return 0.0
    return float(_stream_payment(portfolio, params, cfg, maturity, surfaces,
                                 np.array([tau]), path.pre_default[cp][None],
                                 _pre_states(path.default_times[None], path.defaults[0][None], cp))[0])


def _pre_states(default_times, initial, cp):
    """Integer state just before the counterparty default, per path."""
    n = default_times.shape[1]
    tau = default_times[:, cp][:, None]
    before = initial | (default_times < tau)
    before[:, cp] = False
    return before.astype(np.int64) @ (1 << np.arange(n))


def _stream_payment(portfolio, params, cfg, maturity, surfaces, taus, x_pre, pre_states):
    cp = portfolio.counterparty_index
    jump = params.weights[:, cp]
    out = np.zeros(taus.size)
    posts = pre_states | (1 << cp)
    pricer = None if surfaces is not None else _point_exposure(portfolio, params, cfg, maturity)
    for post in np.unique(posts):
        rows = np.flatnonzero(posts == post)
        loss = portfolio.counterparty_loss[post]
        if loss == 0 or not np.any(portfolio.exposure_weights(post)):
            continue
        x = x_pre[rows] + jump
        if surfaces is not None:
            value = surfaces.exposure(int(post)).value(taus[rows], x)
        else:
            value = np.array([pricer(t, xi, int(post)) for t, xi in zip(taus[rows], x)])
        out[rows] = loss * np.maximum(value, 0.0)
    return out


def theta_ensemble(portfolio, ensemble, params, cfg, maturity, surfaces=None):
    """:func:`theta_stream` for every path of a :class:`MarketEnsemble`."""
    cp = portfolio.counterparty_index
    taus = ensemble.default_times[:, cp]
    hit = np.flatnonzero(taus < maturity)
    out = np.zeros(taus.size)
    if hit.size:
        pre = _pre_states(ensemble.default_times[hit], ensemble.initial_defaults[hit], cp)
        out[hit] = _stream_payment(portfolio, params, cfg, maturity, surfaces, taus[hit],
                                   ensemble.pre_default[hit, cp], pre)
    return out


def cva_value(portfolio, t, x, z, params, cfg, maturity, surfaces=None, n_paths=None, sim_dt=None):
    """Remaining CVA ``E[Theta(T ^ tau_cp) | X(t) = x, H(t) = z]`` by Monte Carlo.

    Paths are restarted at ``(t, x, z)`` and stopped at the counterparty
    default. Exactly zero once the counterparty has defaulted.

    Args:
        portfolio, t, x, z, params, cfg, maturity: As for the estimators.
        surfaces: Exposure surfaces; built on demand.
        n_paths: Paths, default ``cfg.inner_paths``.
        sim_dt: Simulation step, default ``cfg.dt``.

    Returns:
        Estimate.
    """
    from .surfaces import PortfolioSurfaces

    n = params.n_names
    bits = np.asarray(getattr(z, "bits", z), dtype=bool)
    _as_state_index(bits.astype(int), n)
    if not 0 <= t <= maturity:
        raise DomainError(f"t={t} outside [0, {maturity}]")
    if bits[portfolio.counterparty_index] or t >= maturity or not np.any(portfolio.weights):
        return Estimate.exact(0.0)
    if surfaces is None:
        surfaces = PortfolioSurfaces(portfolio, params, cfg, maturity)
    sim = SimConfig(horizon=maturity, dt=sim_dt or cfg.dt, n_paths=n_paths or cfg.inner_paths,
                    seed=cfg.seed, scheme=cfg.scheme, threads=cfg.threads)
    ens = simulate_market(params, sim, stream_id("cva", t), start_time=t, x0=np.where(bits, 1.0, x), z0=bits,
                          stop_on=portfolio.counterparty_index, record=False)
    return Estimate.from_samples(theta_ensemble(portfolio, ens, params, cfg, maturity, surfaces))
