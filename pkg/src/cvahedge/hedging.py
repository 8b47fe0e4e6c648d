"""Risk-minimizing hedge of the CVA with the counterparty CDS.

The hedger holds ``theta`` units of the counterparty-CDS gain process ``Y``
and ``eta`` in the riskless asset (zero rates). With ``V`` the conditional
expectation of the CVA payment ``Theta`` and ``g`` the CVA function, ``V``
equals the realized payment plus ``g``; the holding is the ratio of the
predictable covariations ``d<V, Y> / d<Y, Y> = (U1 + U2 + U3) / Phi``.

All functions of ``(t, x, z)`` read value surfaces: the CDS pricing function
(its spline gradient and jump differences) and the CVA function.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateHedgeError, DomainError, EstimatorError
from .fk_engine import _as_state_index
from .surfaces import PortfolioSurfaces, cds_family, default_x_max

GUARD_RTOL = 1e-12
PROBES = (0.0, 0.5, 0.9, 1.1, 2.0)


class CdsHedgeInstrument:
    """The counterparty CDS as hedging instrument.

    Holds the CDS pricing surfaces (shared by every portfolio hedged with
    it) and builds CVA surfaces per portfolio on demand.

    Args:
        counterparty: CDS on the last name.
        params: Model parameters.
        cfg: Estimator settings of the surfaces.
        maturity: Final time.
    """

    def __init__(self, counterparty, params, cfg, maturity):
        self.claim = counterparty
        self.params = params
        self.cfg = cfg
        self.maturity = float(maturity)
        self.cp = params.n_names - 1
        self.x_max = default_x_max(params, self.maturity) if cfg.table_x_max is None else \
            np.broadcast_to(np.asarray(cfg.table_x_max, dtype=float), (params.n_names,))
        self.cds = cds_family(counterparty, params, cfg, self.maturity, self.x_max)
        self._surfaces = {}

    @property
    def spread(self):
        return self.claim.meta["spread"]

    @property
    def loss(self):
        return self.claim.zpay

    def surfaces(self, portfolio):
        """CVA surfaces of ``portfolio``, sharing this instrument's CDS surfaces."""
        if isinstance(portfolio, PortfolioSurfaces):
            return portfolio
        key = id(portfolio)
        entry = self._surfaces.get(key)
        if entry is None or entry[0] is not portfolio:
            surf = PortfolioSurfaces(portfolio, self.params, self.cfg, self.maturity, cds=self.cds)
            entry = (portfolio, surf)
            self._surfaces[key] = entry
        return entry[1]

    def value(self, s, x, state):
        return self.cds(state).value(s, x)

    def gradient(self, s, x, state):
        """``V^cds``: gradient of the CDS pricing function, ``(P, n)``."""
        return self.cds(state).gradient(s, x)

    def jumps(self, s, x, state):
        """``G^cds_j = F(s, x + w_j, z^j) - F(s, x, z)`` for surviving ``j``, ``(P, n)``."""
        n = self.params.n_names
        base = self.value(s, x, state)
        out = np.zeros((x.shape[0], n))
        for j in range(n):
            if not (state >> j) & 1:
                out[:, j] = self.value(s, x + self.params.weights[:, j], state | (1 << j)) - base
        return out


def _loss_terms(instrument, state):
    """``z_cp (L(z^j) - L(z))`` for every name, zero for defaulted ``j``."""
    n = instrument.params.n_names
    out = np.zeros(n)
    if (state >> instrument.cp) & 1:
        L = instrument.loss
        for j in range(n):
            if not (state >> j) & 1:
                out[j] = L[state | (1 << j)] - L[state]
    return out


def _phi_parts(s, x, state, instrument):
    params = instrument.params
    alive = (((state >> np.arange(params.n_names)) & 1) == 0).astype(float)
    vsig = np.einsum("pi,pik->pk", instrument.gradient(s, x, state), params.diffusion(x))
    G = instrument.jumps(s, x, state)
    jump_coef = G - _loss_terms(instrument, state)
    phi = np.sum(vsig**2, axis=1) + np.sum(jump_coef**2 * x * alive, axis=1)
    return phi, vsig, G, jump_coef


def phi_batch(s, x, state, instrument):
    """``Phi`` at many points sharing one default state."""
    return _phi_parts(s, np.atleast_2d(x), state, instrument)[0]


def phi(t, x, z, instrument):
    """Predictable quadratic-variation rate ``Phi(t, x, z)`` of the CDS gain process."""
    state = _as_state_index(z, instrument.params.n_names)
    return float(phi_batch(t, np.asarray(x, dtype=float)[None], state, instrument)[0])


@dataclass(frozen=True)
class HedgeCoefficients:
    """Vectorized hedge ingredients at points sharing one state."""

    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    degenerate: np.ndarray
    g: np.ndarray
    vsig: np.ndarray
    jump_coef: np.ndarray


def coefficients(s, x, state, surfaces, instrument, guard="zero"):
    """``U1, U2, U3, Phi`` and ``theta`` at points ``x`` ``(P, n)`` in ``state``.

    Args:
        s: Time (scalar or ``(P,)``).
        x: Intensities.
        state: Integer state with a surviving counterparty.
        surfaces: :class:`PortfolioSurfaces` of the hedged portfolio.
        instrument: :class:`CdsHedgeInstrument`.
        guard: ``"zero"`` sets ``theta = 0`` where ``Phi`` is negligible and
            flags the point; ``"raise"`` raises :class:`DegenerateHedgeError`.
    """
    params = instrument.params
    n, cp = params.n_names, instrument.cp
    if (state >> cp) & 1:
        raise DomainError("the hedge is not defined once the counterparty has defaulted")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    P = x.shape[0]
    w = params.weights
    phi_v, vsig, G, jump_coef = _phi_parts(s, x, state, instrument)
    g_surf = surfaces.g(state)
    g = g_surf.value(s, x)
    gsig = np.einsum("pi,pik->pk", g_surf.gradient(s, x), params.diffusion(x))
    U1 = np.sum(gsig * vsig, axis=1)
    post = state | (1 << cp)
    L = surfaces.portfolio.counterparty_loss[post]
    if L and np.any(surfaces.portfolio.exposure_weights(post)):
        ups = L * np.maximum(surfaces.exposure(post).value(s, x + w[:, cp]), 0.0)
    else:
        ups = np.zeros(P)
    U2 = ups * G[:, cp] * x[:, cp]
    U3 = np.zeros(P)
    for j in range(n):
        if (state >> j) & 1:
            continue
        g_next = 0.0 if j == cp else surfaces.g(state | (1 << j)).value(s, x + w[:, j])
        U3 += (g_next - g) * jump_coef[:, j] * x[:, j]
    total = U1 + U2 + U3
    degenerate = phi_v < GUARD_RTOL * np.maximum(1.0, np.abs(total))
    if guard == "raise" and np.any(degenerate):
        k = int(np.flatnonzero(degenerate)[0])
        raise DegenerateHedgeError(
            f"Phi={phi_v[k]!r} below the guard threshold",
            u_terms=(float(U1[k]), float(U2[k]), float(U3[k])), phi=float(phi_v[k]),
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(degenerate, 0.0, total / np.where(degenerate, 1.0, phi_v))
    return HedgeCoefficients(U1, U2, U3, phi_v, theta, degenerate, g, vsig, jump_coef)


def u_terms(t, x, z, portfolio, instrument):
    """Numerator terms ``(U1, U2, U3)`` of the hedge ratio at one point."""
    state = _as_state_index(z, instrument.params.n_names)
    c = coefficients(t, np.asarray(x, dtype=float)[None], state, instrument.surfaces(portfolio), instrument)
    return float(c.U1[0]), float(c.U2[0]), float(c.U3[0])


def theta_gkw(t, x, z, portfolio, instrument, guard="raise"):
    """Risk-minimizing holding ``(U1 + U2 + U3) / Phi`` in the counterparty CDS.

    Raises:
        DegenerateHedgeError: If ``Phi`` falls below the guard threshold and
            ``guard == "raise"``; the error carries the ``U`` values.
        DomainError: If the counterparty has defaulted or ``t >= T``.
    """
    if not 0 <= t < instrument.maturity:
        raise DomainError(f"t={t} outside [0, {instrument.maturity})")
    state = _as_state_index(z, instrument.params.n_names)
    if not np.any(instrument.surfaces(portfolio).portfolio.weights):
        return 0.0
    c = coefficients(t, np.asarray(x, dtype=float)[None], state, instrument.surfaces(portfolio), instrument,
                     guard=guard)
    return float(c.theta[0])


# --- replay along simulated paths ----------------------------------------------


@dataclass(frozen=True)
class HedgeReport:
    """Hedge of one path on the simulation grid, up to ``T ^ tau_cp``.

    Row ``m`` refers to grid time ``t_m``. Holdings (``theta``, ``U``, ``phi``)
    are those chosen at ``t_m`` for the step ``(t_m, t_{m+1}]`` and are zero
    on the last row; increments ``dC``, ``dA`` on row ``m`` cover
    ``(t_{m-1}, t_m]`` and are zero on row 0. The last row is the first grid
    point at or after the counterparty default, or maturity.
    """

    times: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    value: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray
    phi: np.ndarray
    dC: np.ndarray
    dA: np.ndarray
    V: np.ndarray
    Theta: np.ndarray
    Y: np.ndarray
    degenerate: np.ndarray
    stop_time: float

    columns = ("time", "theta", "eta", "value", "U1", "U2", "U3", "phi", "dC", "dA")

    def rows(self):
        cols = [self.times, self.theta, self.eta, self.value, self.U1, self.U2, self.U3, self.phi,
                self.dC, self.dA]
        return [tuple(float(c[m]) for c in cols) for m in range(self.times.size)]

    @property
    def total_cost(self):
        return float(np.sum(self.dC))


@dataclass(frozen=True)
class HedgeEnsemble:
    """Vectorized hedge replay over an ensemble, arrays ``(P, M+1)``.

    ``active[p, m]`` marks steps ``(t_m, t_{m+1}]`` at which path ``p`` is
    still hedged; ``last[p]`` is the index of the final row of each path.
    """

    grid: np.ndarray
    theta: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray
    phi: np.ndarray
    V: np.ndarray
    Theta: np.ndarray
    Y: np.ndarray
    dV: np.ndarray
    dY: np.ndarray
    active: np.ndarray
    last: np.ndarray
    degenerate: np.ndarray
    stop_times: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.V.shape[0]

    @property
    def dC(self):
        """Cost increments ``dV - theta dY`` per step, ``(P, M)``."""
        return self.dV - self.theta[:, :-1] * self.dY

    def cost(self, scale=1.0):
        """Total cost ``C(T ^ tau) - C(0)`` of the strategy ``scale * theta``."""
        return np.sum(self.dV - scale * self.theta[:, :-1] * self.dY, axis=1)

    def report(self, p):
        """:class:`HedgeReport` of path ``p``."""
        k = int(self.last[p])
        sl = slice(0, k + 1)
        dC = np.concatenate([[0.0], self.dC[p, :k]])
        theta = self.theta[p, sl]
        value = self.V[p, sl] - self.Theta[p, sl]
        eta = value - theta * self.Y[p, sl]
        return HedgeReport(
            times=self.grid[sl].copy(), theta=theta.copy(), eta=eta, value=value,
            U1=self.U1[p, sl].copy(), U2=self.U2[p, sl].copy(), U3=self.U3[p, sl].copy(),
            phi=self.phi[p, sl].copy(), dC=dC, dA=dC.copy(), V=self.V[p, sl].copy(),
            Theta=self.Theta[p, sl].copy(), Y=self.Y[p, sl].copy(), degenerate=self.degenerate[p, sl].copy(),
            stop_time=float(min(self.stop_times[p], self.grid[-1])),
        )


def replay(ensemble, portfolio, instrument, coefficient_time="mid"):
    """Replay the risk-minimizing hedge on every path of a recorded ensemble.

    ``V`` is the realized CVA payment plus the CVA function; the CDS gain
    increments follow the gain dynamics with coefficients frozen over each
    step (see ``coefficient_time``): ``V^cds' sigma(x) dW + sum_j G_j (dH_j - dLambda_j)``.

    Args:
        ensemble: :class:`MarketEnsemble` with path records, simulated from
            time 0 and stopped at the counterparty default.
        portfolio: Hedged portfolio (or its :class:`PortfolioSurfaces`).
        instrument: :class:`CdsHedgeInstrument`.
        coefficient_time: ``"mid"`` evaluates the step's coefficients at the
            mid time of the step with the state at its left end (still
            predictable, second order in the time decay of the exposure);
            ``"left"`` uses the left end for both.
    """
    from .cva import theta_ensemble

    if coefficient_time not in ("mid", "left"):
        raise DomainError("coefficient_time must be 'mid' or 'left'")

    if ensemble.intensities is None:
        raise DomainError("hedge replay needs an ensemble with path records")
    surfaces = instrument.surfaces(portfolio)
    pf = surfaces.portfolio
    params = instrument.params
    T = instrument.maturity
    grid = ensemble.grid
    if abs(grid[-1] - T) > 1e-12:
        raise DomainError("ensemble horizon must equal the hedge maturity")
    n, cp = params.n_names, instrument.cp
    P, M1 = ensemble.intensities.shape[:2]
    M = M1 - 1
    X, H = ensemble.intensities, ensemble.defaults
    if np.any(ensemble.initial_defaults[:, cp]):
        raise DomainError("the counterparty must be alive at the start of every path")
    tau = ensemble.default_times[:, cp]
    payment = theta_ensemble(pf, ensemble, params, instrument.cfg, T, surfaces)
    states = H.astype(np.int64) @ (1 << np.arange(n))
    # Step m is hedged when the counterparty is alive at t_m and t_m < T.
    alive_at = tau[:, None] > grid[None, :]
    active = alive_at[:, :-1]
    last = np.where(np.isfinite(tau) & (tau <= T), np.searchsorted(grid, tau, side="left"), M)
    last = np.minimum(last, M)
    shape = (P, M1)
    theta, U1, U2, U3, ph = (np.zeros(shape) for _ in range(5))
    degenerate = np.zeros(shape, dtype=bool)
    Theta = np.where(tau[:, None] <= grid[None, :], payment[:, None], 0.0)
    g = np.zeros(shape)
    dY = np.zeros((P, M))
    hedge_weights = np.any(pf.weights)
    for m in range(M + 1):
        rows_m = np.flatnonzero(alive_at[:, m]) if m < M else np.array([], dtype=np.int64)
        for st in np.unique(states[rows_m, m]):
            rows = rows_m[states[rows_m, m] == st]
            x = X[rows, m]
            tc = 0.5 * (grid[m] + grid[m + 1]) if coefficient_time == "mid" else grid[m]
            if hedge_weights:
                c = coefficients(tc, x, int(st), surfaces, instrument)
                theta[rows, m], U1[rows, m], U2[rows, m], U3[rows, m] = c.theta, c.U1, c.U2, c.U3
                ph[rows, m], degenerate[rows, m] = c.phi, c.degenerate
                g[rows, m] = c.g if tc == grid[m] else surfaces.g(int(st)).value(grid[m], x)
                vsig, jc = c.vsig, c.jump_coef
            else:
                phi_v, vsig, _, jc = _phi_parts(tc, x, int(st), instrument)
                ph[rows, m] = phi_v
            jumps = H[rows, m + 1].astype(float) - H[rows, m].astype(float)
            dY[rows, m] = (np.sum(vsig * ensemble.brownian[rows, m], axis=1)
                           + np.sum(jc * (jumps - ensemble.compensator_steps[rows, m]), axis=1))
    # V at t_m: CVA function while the counterparty is alive, payment afterwards.
    V = np.where(alive_at, g, Theta)
    V[:, -1] = np.where(alive_at[:, -1], 0.0, Theta[:, -1])
    dV = np.where(active, np.diff(V, axis=1), 0.0)
    dY = np.where(active, dY, 0.0)
    y0 = np.empty(P)
    for st in np.unique(states[:, 0]):
        rows = np.flatnonzero(states[:, 0] == st)
        y0[rows] = instrument.value(grid[0], X[rows, 0], int(st))
    Y = y0[:, None] + np.concatenate([np.zeros((P, 1)), np.cumsum(dY, axis=1)], axis=1)
    return HedgeEnsemble(
        grid=grid, theta=theta, U1=U1, U2=U2, U3=U3, phi=ph, V=V, Theta=Theta, Y=Y, dV=dV, dY=dY,
        active=active, last=last, degenerate=degenerate, stop_times=np.minimum(tau, T),
        meta={"seed": ensemble.meta.get("seed"), "stream": ensemble.meta.get("stream")},
    )


def full_strategy(ensemble, portfolio, instrument, path_index=0):
    """Risk-minimizing strategy ``(theta, eta)`` and its costs along one path.

    ``eta = V - Theta - theta Y``, so the strategy value ``theta Y + eta``
    equals ``V - Theta``, which vanishes at ``T ^ tau_cp``.
    """
    return replay(ensemble, portfolio, instrument).report(path_index)


# --- diagnostics -------------------------------------------------------------------


@dataclass(frozen=True)
class GkwDiagnostics:
    """Ensemble checks of the hedge.

    Attributes:
        n_paths: Paths in the ensemble.
        max_terminal_value: ``max |V - Theta|`` at ``T ^ tau_cp`` over paths.
        mean_cost: Mean total cost ``A(T ^ tau) = C(T ^ tau) - C(0)`` and its SE.
        step_means, step_se: Mean cost increment per grid step and its SE.
        bucket_cov, bucket_se: Covariance of cost and gain increments per
            time bucket and its SE.
        risk: ``R(0)`` of the hedge, i.e. mean squared total cost.
        probes: Per probe factor ``c``: ``(R(c theta), SE of R(theta) - R(c theta))``.
        theta_zero_var: Sample variance of the CVA payment.
        degenerate_points: Number of guarded (``theta = 0``) evaluations.
    """

    n_paths: int
    max_terminal_value: float
    mean_cost: tuple
    step_means: np.ndarray
    step_se: np.ndarray
    bucket_edges: np.ndarray
    bucket_cov: np.ndarray
    bucket_se: np.ndarray
    risk: float
    probes: dict
    theta_zero_var: float
    degenerate_points: int

    def checks(self, k=3.0):
        """Named pass/fail results of the mean-zero, orthogonality and optimality checks."""
        mean, se = self.mean_cost
        out = {
            "zero_achieving": self.max_terminal_value == 0.0,
            "mean_total_cost": abs(mean) <= k * se,
            "mean_step_cost": bool(np.all(np.abs(self.step_means) <= k * self.step_se)),
            "orthogonality": bool(np.all(np.abs(self.bucket_cov) <= k * self.bucket_se)),
        }
        for c, (r, dse) in self.probes.items():
            out[f"probe_{c:g}"] = self.risk <= r + k * dse
        return out


def _mean_se(a):
    a = np.asarray(a, dtype=float)
    return float(a.mean()), float(a.std(ddof=1) / np.sqrt(a.size))


def gkw_diagnostics(hedge, n_buckets=5, probes=PROBES, min_paths=10_000):
    """Summarize a :class:`HedgeEnsemble`.

    Raises:
        EstimatorError: With fewer than ``min_paths`` paths.
    """
    P = hedge.n_paths
    if P < min_paths:
        raise EstimatorError(f"diagnostics need at least {min_paths} paths, got {P}")
    rows = np.arange(P)
    end = hedge.V[rows, hedge.last] - hedge.Theta[rows, hedge.last]
    dC = np.where(hedge.active, hedge.dC, 0.0)
    cost = dC.sum(axis=1)
    step_means = dC.mean(axis=0)
    step_se = dC.std(axis=0, ddof=1) / np.sqrt(P)
    M = dC.shape[1]
    edges = np.linspace(0, M, n_buckets + 1).round().astype(int)
    cov, cov_se = np.zeros(n_buckets), np.zeros(n_buckets)
    for b in range(n_buckets):
        # Per-path sums of products are independent across paths.
        prod = np.sum((dC * hedge.dY)[:, edges[b]:edges[b + 1]], axis=1)
        cov[b], cov_se[b] = _mean_se(prod)
    risk = float(np.mean(cost**2))
    probe_out = {}
    for c in probes:
        alt = hedge.cost(c)
        diff = cost**2 - alt**2
        probe_out[float(c)] = (float(np.mean(alt**2)), float(diff.std(ddof=1) / np.sqrt(P)))
    payment = hedge.Theta[rows, hedge.last]
    return GkwDiagnostics(
        n_paths=P, max_terminal_value=float(np.max(np.abs(end))), mean_cost=_mean_se(cost),
        step_means=step_means, step_se=step_se, bucket_edges=hedge.grid[edges], bucket_cov=cov,
        bucket_se=cov_se, risk=risk, probes=probe_out, theta_zero_var=float(payment.var(ddof=1)),
        degenerate_points=int(np.sum(hedge.degenerate)),
    )


def moment_bound_terms(hedge):
    """Per-path ``sum_m theta_m^2 Phi_m dt``, the hedge's quadratic-variation budget."""
    dt = np.diff(hedge.grid)
    return np.sum(np.where(hedge.active, hedge.theta[:, :-1] ** 2 * hedge.phi[:, :-1], 0.0) * dt, axis=1)
