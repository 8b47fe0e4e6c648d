"""Monte Carlo estimators for the state-indexed pricing functions.

For a claim and weights ``alpha = (a1, a2, a3)`` the pricing function is

    F(t, x, z) = E[ a1 xi (1-K)(T) + a2 Z K (T)
                    + a3 int_t^T (1-K) a du
                    - a3 sum_j int_t^T K (Z(H^j) - Z(H)) (1-H_j) X_j du ]

started from intensities ``x`` and default state ``z`` at time ``t``. Two
estimators are provided:

* :func:`estimate_F_direct` simulates the full jump-diffusion and averages the
  integrand.
* :func:`estimate_F_recursive` works state by state on the jump-free
  intensities with exponential discounting. Each transition to a child state
  is sampled once per path in proportion to its discounted intensity, so the
  estimator is unbiased for the recursion without nested inner loops.

The CVA function ``g`` follows the same recursion with a nonlinear source term
fed by value surfaces of the portfolio (see :mod:`cvahedge.surfaces`).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, EstimatorError
from .model import SimConfig, euler_step, simulate_market, time_grid
from .rng import block_generator, stream_id


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with its standard error and sample size."""

    value: float
    std_error: float
    n_paths: int

    def __float__(self):
        return float(self.value)

    def __add__(self, other):
        return Estimate(self.value + other.value, float(np.hypot(self.std_error, other.std_error)),
                        min(self.n_paths, other.n_paths))

    def __sub__(self, other):
        return Estimate(self.value - other.value, float(np.hypot(self.std_error, other.std_error)),
                        min(self.n_paths, other.n_paths))

    def agrees_with(self, other, k=3.0, atol=1e-12):
        """``|self - other| <= k * combined SE + atol``; ``other`` may be a number.

        The default ``atol`` absorbs floating-point rounding of exact values.
        """
        if isinstance(other, Estimate):
            se = np.hypot(self.std_error, other.std_error)
            other = other.value
        else:
            se = self.std_error
        return bool(abs(self.value - other) <= k * se + atol)

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=float)
        if not np.all(np.isfinite(samples)):
            raise EstimatorError("non-finite Monte Carlo samples")
        n = samples.size
        se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(samples.mean()), se, n)

    @classmethod
    def exact(cls, value):
        return cls(float(value), 0.0, 0)


@dataclass(frozen=True)
class EstimatorConfig:
    """Monte Carlo settings for the pricing functions.

    Attributes:
        inner_paths: Paths per point estimate.
        dt: Time step of the simulation grid.
        h_rel: Relative bump for finite-difference gradients.
        depth_cap: Guard on the recursion depth over default states.
        crn: Reuse the same random streams for every evaluation point, so
            differences (gradients, jumps) use common random numbers.
        seed: Base seed.
        scheme: Discretization scheme of the intensities.
        table_dt: Time spacing of value-surface nodes.
        table_nodes: Nodes per surviving intensity in value surfaces.
        table_paths: Paths per value-surface node.
        table_x_max: Upper end of each intensity axis; ``None`` picks a
            default from the model.
        threads: Workers for full-model simulation.
    """

    inner_paths: int = 10_000
    dt: float = 0.01
    h_rel: float = 0.01
    depth_cap: int = 64
    crn: bool = True
    seed: int = 20240601
    scheme: str = "euler_full_truncation"
    table_dt: float = 0.1
    table_nodes: int = 11
    table_paths: int = 2000
    table_x_max: tuple = None
    threads: int = 1

    def __post_init__(self):
        if self.inner_paths < 1:
            raise ConfigError("inner_paths must be >= 1")
        if not 0 < self.h_rel < 0.5:
            raise ConfigError("h_rel must lie in (0, 0.5)")
        if not self.dt > 0 or not self.table_dt > 0:
            raise ConfigError("time steps must be > 0")
        if self.table_nodes < 4:
            raise ConfigError("value surfaces need at least 4 nodes per axis")
        if self.table_paths < 2 or self.table_paths % 2:
            raise ConfigError("table_paths must be an even number >= 2")
        if self.depth_cap < 1:
            raise ConfigError("depth_cap must be >= 1")


@dataclass(frozen=True, eq=False)
class Cashflows:
    """Linear cash-flow data driving one pricing function.

    Attributes:
        terminal: Payoff at maturity per state.
        running: Running rate per state.
        offsets: ``(S, n)`` amounts added per unit of each name's default
            intensity (the compensator terms of trigger payoffs).
        maturity: Final time.
        parts: ``(coef, claim, alpha)`` terms the data was assembled from.
    """

    terminal: np.ndarray
    running: np.ndarray
    offsets: np.ndarray
    maturity: float
    parts: tuple

    @classmethod
    def from_claims(cls, parts, maturity, n_names):
        size = 2**n_names
        terminal = np.zeros(size)
        running = np.zeros(size)
        offsets = np.zeros((size, n_names))
        kept = []
        for coef, claim, alpha in parts:
            if coef == 0:
                continue
            terminal += coef * claim.terminal(alpha)
            running += coef * claim.running(alpha)
            offsets += coef * claim.jump_offsets(alpha)
            kept.append((float(coef), claim, tuple(float(a) for a in alpha)))
        return cls(terminal, running, offsets, float(maturity), tuple(kept))

    @property
    def n_names(self):
        return self.offsets.shape[1]

    @property
    def is_zero(self):
        return not (self.terminal.any() or self.running.any() or self.offsets.any())

    def full_default_value(self, s):
        """Value in the all-defaulted state at time(s) ``s``."""
        last = 2**self.n_names - 1
        return self.terminal[last] + self.running[last] * (self.maturity - np.asarray(s, dtype=float))

    def triggered_value(self, state):
        """Exact value when every part is already triggered, else ``None``.

        If ``K(z) = 1`` and ``a2 = a3`` the compensator terms make the trigger
        payoff a martingale, so the value is ``a2 Z(z)``.
        """
        total = 0.0
        for coef, claim, alpha in self.parts:
            if not claim.k[state] or alpha[1] != alpha[2]:
                return None
            total += coef * alpha[1] * claim.zpay[state]
        return total


@dataclass(frozen=True, eq=False)
class CauchySpec:
    """A claim, the weights ``alpha`` and the maturity of one pricing function."""

    claim: object
    alpha: tuple = (1.0, 1.0, 1.0)
    maturity: float = 1.0

    def __post_init__(self):
        if len(self.alpha) != 3:
            raise ConfigError("alpha must have three entries")
        if not self.maturity > 0:
            raise ConfigError("maturity must be > 0")
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))

    @property
    def cashflows(self):
        return Cashflows.from_claims([(1.0, self.claim, self.alpha)], self.maturity, self.claim.n_names)

    def terminal(self):
        return self.claim.terminal(self.alpha)


def _as_state_index(z, n):
    bits = np.asarray(getattr(z, "bits", z), dtype=np.int64)
    if bits.shape != (n,) or np.any((bits != 0) & (bits != 1)):
        raise DomainError(f"default state must be {n} zeros/ones")
    return int(bits @ (1 << np.arange(n)))


def _check_point(params, t, x, z, maturity):
    n = params.n_names
    s = _as_state_index(z, n)
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DomainError(f"expected {n} intensities")
    alive = ((s >> np.arange(n)) & 1) == 0
    if np.any(~np.isfinite(x)) or np.any(x[alive] <= 0):
        raise DomainError("intensities of surviving names must be finite and > 0")
    if not 0 <= t <= maturity:
        raise DomainError(f"t={t} outside [0, {maturity}]")
    return s, x


def _stream(cfg, purpose, *key):
    if cfg.crn:
        return stream_id(purpose)
    return stream_id(purpose, *[repr(np.asarray(k).tolist()) for k in key])


class FRecursion:
    """Cash-flow recursion over default states for one pricing function."""

    def __init__(self, cash, params, use_identities=False):
        self.cash = cash
        self.params = params
        self.n = params.n_names
        self.maturity = cash.maturity
        self.use_identities = use_identities
        self.key = ("F", id(cash))

    def terminal(self, s):
        return self.cash.terminal[s]

    def running(self, s):
        return self.cash.running[s]

    def offsets(self, s):
        return self.cash.offsets[s]

    def closed(self, s):
        if s == 2**self.n - 1:
            return self.cash.full_default_value
        if self.cash.is_zero:
            return lambda u: np.zeros(np.shape(u))
        if self.use_identities:
            v = self.cash.triggered_value(s)
            if v is not None:
                return lambda u, v=v: np.full(np.shape(u), v)
        return None

    def extra(self, s):
        return None


class GRecursion:
    """Recursion for the CVA function over states with a surviving counterparty.

    The source term in state ``z`` is the counterparty default intensity times
    the loss on the positive part of the post-default portfolio value, read
    from ``exposure_surfaces(z_cp)`` where ``z_cp`` flips the counterparty.
    """

    def __init__(self, portfolio, params, maturity, exposure_surfaces):
        self.portfolio = portfolio
        self.params = params
        self.n = params.n_names
        self.cp = self.n - 1
        self.maturity = float(maturity)
        self.exposure_surfaces = exposure_surfaces
        self.key = ("g", id(portfolio))

    def terminal(self, s):
        return 0.0

    def running(self, s):
        return 0.0

    def offsets(self, s):
        return np.zeros(self.n)

    def closed(self, s):
        if (s >> self.cp) & 1 or not np.any(self.portfolio.weights):
            return lambda u: np.zeros(np.shape(u))
        return None

    def extra(self, s):
        post = s | (1 << self.cp)
        loss = self.portfolio.counterparty_loss[post]
        if loss == 0 or not np.any(self.portfolio.exposure_weights(post)):
            return None
        surface = self.exposure_surfaces(post)
        jump = self.params.weights[:, self.cp]
        cp = self.cp

        def source(u, xb):
            value = surface.value(u, xb + jump)
            return loss * np.maximum(value, 0.0) * xb[:, cp]

        return source


def _sweep(params, grid, x0, start, first_h, alive, gen, scheme, extra=None, store=False):
    """Integrate discount, annuity and source terms along jump-free paths.

    Items start at individual grid indices; an item starting at index ``m``
    covers only the last ``first_h`` of step ``m``. Within each step the total
    surviving intensity is taken at its trapezoid average, so the discount is
    exponential inside the step and constant intensities are integrated
    exactly.
    """
    P, n = x0.shape
    M = grid.size - 1
    K = params.n_factors
    live = alive.astype(float)
    x = x0.copy()
    D = np.ones(P)
    ann = np.zeros(P)
    ext = np.zeros(P)
    if store:
        I_steps = np.zeros((P, M))
        xbar = np.zeros((P, M, n))
        nodes = np.empty((P, M + 1, n))
        nodes[:, 0] = x
        lam_steps = np.zeros((P, M))
    for m in range(M):
        z = gen.standard_normal((P, K))
        act = start <= m
        h = np.where(start == m, first_h, grid[m + 1] - grid[m]) * act
        xn = euler_step(params, x, h, z * np.sqrt(h)[:, None], scheme)
        xn = np.where(alive & act[:, None], xn, x)
        xb = 0.5 * (x + xn)
        lam = xb @ live
        lh = lam * h
        small = lh < 1e-10
        with np.errstate(divide="ignore", invalid="ignore"):
            step_int = np.where(small, h * (1 - 0.5 * lh), -np.expm1(-lh) / np.where(small, 1.0, lam))
        I = D * step_int
        ann += I
        if extra is not None:
            rows = np.flatnonzero(act & (h > 0))
            if rows.size:
                tm = grid[m + 1] - 0.5 * h[rows]
                ext[rows] += I[rows] * extra(tm, xb[rows])
        if store:
            I_steps[:, m] = I
            xbar[:, m] = xb
            nodes[:, m + 1] = xn
            lam_steps[:, m] = lam
        D = D * np.exp(-lh)
        x = xn
    out = {"discount": D, "annuity": ann, "source": ext}
    if store:
        out.update(step_integrals=I_steps, xbar=xbar, nodes=nodes, lam=lam_steps)
    return out


def _branching_samples(rec, t, x, s0, n_paths, dt, gen, scheme, depth_cap):
    """Per-path unbiased samples of the state recursion started at ``(t, x, s0)``."""
    params = rec.params
    n = rec.n
    T = rec.maturity
    w = params.weights
    samples = np.zeros(n_paths)
    grid = time_grid(t, T, dt)
    M = grid.size - 1
    pending = {s0: [(np.broadcast_to(x, (n_paths, n)).copy(), np.zeros(n_paths, dtype=np.int64),
                     np.full(n_paths, grid[1] - grid[0]), np.arange(n_paths), np.ones(n_paths))]}
    depth = 0
    while pending:
        depth += 1
        if depth > depth_cap + 1:
            raise EstimatorError("recursion depth cap exceeded")
        level = min(bin(s).count("1") for s in pending)
        for s in sorted(k for k in pending if bin(k).count("1") == level):
            xs, start, fh, owner, mult = (np.concatenate(a) for a in zip(*pending.pop(s)))
            closed = rec.closed(s)
            if closed is not None:
                s_start = grid[start + 1] - fh
                np.add.at(samples, owner, mult * closed(s_start))
                continue
            alive = ((s >> np.arange(n)) & 1) == 0
            res = _sweep(params, grid, xs, start, fh, alive, gen, scheme, extra=rec.extra(s), store=True)
            offs = rec.offsets(s)
            contrib = rec.terminal(s) * res["discount"] + rec.running(s) * res["annuity"] + res["source"]
            step_int = res["step_integrals"]
            P = xs.shape[0]
            rows = np.arange(P)
            for j in np.flatnonzero(alive):
                weight = res["xbar"][:, :, j] * step_int
                cum = np.cumsum(weight, axis=1)
                W = cum[:, -1]
                contrib = contrib + offs[j] * W
                keep = W > 0
                if not keep.any():
                    continue
                u = gen.random(P) * W
                mstar = np.minimum((cum < u[:, None]).sum(axis=1), M - 1)
                mstar = np.maximum(mstar, start)
                left = np.where(mstar == start, grid[start + 1] - fh, grid[mstar])
                h = grid[mstar + 1] - left
                lam = res["lam"][rows, mstar]
                lh = lam * h
                u2 = gen.random(P)
                with np.errstate(divide="ignore", invalid="ignore"):
                    e = np.where(lh < 1e-10, u2 * h, -np.log1p(u2 * np.expm1(-lh)) / np.where(lh < 1e-10, 1.0, lam))
                e = np.clip(e, 0.0, h)
                frac = np.where(h > 0, e / np.where(h > 0, h, 1.0), 0.0)[:, None]
                xa = res["nodes"][rows, mstar]
                xb = res["nodes"][rows, mstar + 1]
                x_child = xa + frac * (xb - xa) + w[:, j]
                child = s | (1 << j)
                item = (x_child[keep], mstar[keep], (h - e)[keep], owner[keep], (mult * W)[keep])
                pending.setdefault(child, []).append(item)
            np.add.at(samples, owner, mult * contrib)
    return samples


def estimate_F_recursive(spec, t, x, z, cfg, params):
    """Estimate ``F_alpha(t, x, z)`` by the recursion over default states.

    Args:
        spec: Claim, ``alpha`` and maturity.
        t: Evaluation time in ``[0, T]``.
        x: Intensities; entries of defaulted names are ignored.
        z: Default state (``DefaultState`` or 0/1 sequence).
        cfg: Estimator settings.
        params: Model parameters.

    Returns:
        Estimate. Exact (zero error) at maturity and in the all-defaulted state.
    """
    s, x = _check_point(params, t, x, z, spec.maturity)
    cash = spec.cashflows
    rec = FRecursion(cash, params)
    if t >= spec.maturity:
        return Estimate.exact(cash.terminal[s])
    closed = rec.closed(s)
    if closed is not None:
        return Estimate.exact(float(closed(t)))
    gen = block_generator(cfg.seed, _stream(cfg, "F-recursive", t, x, s, spec.alpha))
    samples = _branching_samples(rec, t, x, s, cfg.inner_paths, cfg.dt, gen, cfg.scheme, cfg.depth_cap)
    return Estimate.from_samples(samples)


def estimate_F_direct(spec, t, x, z, cfg, params):
    """Estimate ``F_alpha(t, x, z)`` by simulating the full model from ``(t, x, z)``."""
    s, x = _check_point(params, t, x, z, spec.maturity)
    cash = spec.cashflows
    if t >= spec.maturity:
        return Estimate.exact(cash.terminal[s])
    if cash.is_zero:
        return Estimate.exact(0.0)
    n = params.n_names
    z0 = ((s >> np.arange(n)) & 1).astype(bool)
    sim = SimConfig(horizon=spec.maturity, dt=cfg.dt, n_paths=cfg.inner_paths, seed=cfg.seed,
                    scheme=cfg.scheme, threads=cfg.threads)
    x_start = np.where(z0, np.maximum(x, 1.0), x)
    ens = simulate_market(
        params, sim, _stream(cfg, "F-direct", t, x, s, spec.alpha), start_time=t, x0=x_start, z0=z0,
        functionals=(cash.running, cash.offsets), record=False,
    )
    final = z0 | np.isfinite(ens.default_times)
    idx = final.astype(np.int64) @ (1 << np.arange(n))
    samples = cash.terminal[idx] + ens.functionals[:, 0]
    return Estimate.from_samples(samples)


def estimate_g(portfolio, t, x, z, cfg, params, surfaces=None, maturity=None):
    """Estimate the CVA function ``g(t, x, z)``.

    The recursion over states with a surviving counterparty is sampled as in
    :func:`estimate_F_recursive`; the positive part of the post-default
    portfolio value is applied inside the path integral, using value surfaces
    of the portfolio in the counterparty-defaulted states.

    Args:
        portfolio: Claims, weights and counterparty CDS.
        t, x, z: Evaluation point.
        cfg: Estimator settings.
        params: Model parameters.
        surfaces: A :class:`cvahedge.surfaces.PortfolioSurfaces` to reuse;
            built on demand otherwise.
        maturity: Defaults to the surfaces' maturity.
    """
    from .surfaces import PortfolioSurfaces

    if surfaces is None:
        surfaces = PortfolioSurfaces(portfolio, params, cfg, maturity)
    T = surfaces.maturity
    s, x = _check_point(params, t, x, z, T)
    rec = surfaces.g_recursion
    closed = rec.closed(s)
    if t >= T:
        return Estimate.exact(0.0)
    if closed is not None:
        return Estimate.exact(float(closed(t)))
    gen = block_generator(cfg.seed, _stream(cfg, "g-recursive", t, x, s))
    samples = _branching_samples(rec, t, x, s, cfg.inner_paths, cfg.dt, gen, cfg.scheme, cfg.depth_cap)
    return Estimate.from_samples(samples)


def _value(result):
    return float(result.value) if isinstance(result, Estimate) else float(result)


def gradient_x(fn, t, x, z, cfg):
    """Central finite-difference gradient of ``fn(t, x, z)`` in the intensities.

    The bump is ``h_rel * x_i``; with ``cfg.crn`` the two evaluations share
    random numbers. A bump that would push ``x_i`` below zero is halved until
    it fits, with a warning.
    """
    x = np.asarray(x, dtype=float)
    grad = np.zeros(x.size)
    for i in range(x.size):
        h = cfg.h_rel * abs(x[i])
        if h == 0:
            continue
        while x[i] - h <= 0:
            h *= 0.5
            warnings.warn(f"gradient bump for coordinate {i} shrunk to {h}", RuntimeWarning, stacklevel=2)
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (_value(fn(t, up, z)) - _value(fn(t, dn, z))) / (2 * h)
    return grad


def jump_difference(fn, t, x, z, j, cfg, weights):
    """``fn(t, x + w_j, z^j) - fn(t, x, z)`` for a surviving name ``j``."""
    bits = list(getattr(z, "bits", z))
    if bits[j]:
        raise DomainError(f"name {j} has already defaulted")
    post = bits.copy()
    post[j] = 1
    shifted = np.asarray(x, dtype=float) + np.asarray(weights)[:, j]
    return _value(fn(t, shifted, tuple(post))) - _value(fn(t, x, tuple(bits)))
