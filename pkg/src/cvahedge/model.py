"""Interacting CIR default intensities with contagion jumps.

Name ``i`` has intensity

    dX_i = (kappa_i - nu_i X_i) dt + sum_k sigma_ik sqrt(X_i) dW_k + sum_j w_ij dH_j

and defaults when its integrated intensity crosses an independent unit
exponential clock. Names are indexed ``0 .. n-1``; the last index is the
counterparty. A defaulted name's intensity is frozen and never read again.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, SimulationError
from .rng import block_generator, block_slices

POSITIVITY_FLOOR = 1e-12
SCHEMES = ("euler_full_truncation", "exact_where_available")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _per_name(value, n, label):
    try:
        return np.broadcast_to(np.array(value, dtype=float), (n,))
    except ValueError as exc:
        raise ConfigError(f"{label} must be a scalar or have {n} entries, got shape {np.shape(value)}") from exc


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Drift, volatility, contagion and initial values of the intensities.

    Attributes:
        kappa: Mean-reversion level rates, shape ``(n,)``.
        nu: Mean-reversion speeds, shape ``(n,)``.
        sigma: Factor loadings, shape ``(n, K)``. Row ``i`` multiplies
            ``sqrt(X_i)``; a shared loading vector is broadcast over names.
        weights: Contagion matrix, ``weights[i, j]`` is added to ``X_i`` when
            name ``j`` defaults.
        chi: Initial intensities, strictly positive.
    """

    kappa: np.ndarray
    nu: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    chi: np.ndarray

    def __post_init__(self):
        chi = np.atleast_1d(np.array(self.chi, dtype=float))
        n = chi.size
        kappa = _per_name(self.kappa, n, "kappa")
        nu = _per_name(self.nu, n, "nu")
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim == 1:
            sigma = np.broadcast_to(sigma, (n, sigma.size))
        if sigma.ndim != 2 or sigma.shape[0] != n:
            raise ConfigError(f"sigma must have shape (K,) or ({n}, K), got {sigma.shape}")
        weights = np.array(self.weights, dtype=float)
        if weights.shape != (n, n):
            raise ConfigError(f"weights must have shape ({n}, {n}), got {weights.shape}")
        if np.any(~np.isfinite(chi)) or np.any(chi <= 0):
            raise ConfigError("initial intensities must be finite and > 0")
        for label, arr in (("kappa", kappa), ("nu", nu), ("sigma", sigma), ("weights", weights)):
            if np.any(~np.isfinite(arr)) or np.any(arr < 0):
                raise ConfigError(f"{label} entries must be finite and >= 0")
        object.__setattr__(self, "chi", _frozen(chi))
        object.__setattr__(self, "kappa", _frozen(kappa))
        object.__setattr__(self, "nu", _frozen(nu))
        object.__setattr__(self, "sigma", _frozen(sigma))
        object.__setattr__(self, "weights", _frozen(weights))

    @classmethod
    def cir(cls, kappa, nu, sigma, weights, chi):
        """Build the shared-loading CIR model, ``sigma_ik = sigma_k``."""
        return cls(kappa=kappa, nu=nu, sigma=np.atleast_1d(sigma), weights=weights, chi=chi)

    @property
    def n_names(self):
        return self.chi.size

    @property
    def n_factors(self):
        return self.sigma.shape[1]

    @property
    def counterparty(self):
        return self.n_names - 1

    @property
    def deterministic(self):
        return not np.any(self.sigma)

    def drift(self, x):
        return self.kappa - self.nu * np.maximum(x, 0.0)

    def diffusion(self, x):
        """Volatility matrix ``sigma(x)`` with shape ``x.shape + (K,)``."""
        return np.sqrt(np.maximum(x, 0.0))[..., None] * self.sigma

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in ("kappa", "nu", "sigma", "weights", "chi")}
        fields.update(changes)
        return ModelParams(**fields)

    def to_dict(self):
        return {
            "kappa": self.kappa.tolist(),
            "nu": self.nu.tolist(),
            "sigma": self.sigma.tolist(),
            "weights": self.weights.tolist(),
            "chi": self.chi.tolist(),
        }

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("kappa", "nu", "sigma", "weights", "chi")
        )

    __hash__ = None


def feller_check(params):
    """Per-name Feller condition ``2 kappa_i >= sum_k sigma_ik**2``."""
    return [bool(v) for v in 2.0 * params.kappa >= np.sum(params.sigma**2, axis=1)]


@dataclass(frozen=True)
class DefaultState:
    """Default indicators ``z``; ``bits[i] == 1`` iff name ``i`` has defaulted."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise DomainError(f"default indicators must be 0 or 1, got {self.bits}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_index(cls, index, n_names):
        return cls(tuple((index >> i) & 1 for i in range(n_names)))

    @classmethod
    def none(cls, n_names):
        return cls((0,) * n_names)

    @property
    def n_names(self):
        return len(self.bits)

    @property
    def index(self):
        return sum(b << i for i, b in enumerate(self.bits))

    @property
    def popcount(self):
        return sum(self.bits)

    @property
    def all_defaulted(self):
        return self.popcount == self.n_names

    def survivors(self):
        return [i for i, b in enumerate(self.bits) if not b]

    def flip(self, j):
        if not 0 <= j < self.n_names:
            raise DomainError(f"name index {j} out of range for {self.n_names} names")
        bits = list(self.bits)
        bits[j] = 1 - bits[j]
        return DefaultState(tuple(bits))

    def __getitem__(self, i):
        return self.bits[i]

    def __len__(self):
        return len(self.bits)


def state_index(defaulted):
    """Integer encoding of boolean default indicators along the last axis."""
    defaulted = np.asarray(defaulted)
    return defaulted.astype(np.int64) @ (np.int64(1) << np.arange(defaulted.shape[-1], dtype=np.int64))


def compensator_increment(x_start, dt, x_end=None):
    """Trapezoidal increment of the integrated intensity over one substep."""
    x_end = x_start if x_end is None else x_end
    if np.any(np.asarray(x_start) < 0) or np.any(np.asarray(x_end) < 0):
        raise DomainError("intensities must be nonnegative")
    if np.any(np.asarray(dt) < 0):
        raise DomainError("dt must be nonnegative")
    return 0.5 * (np.asarray(x_start) + np.asarray(x_end)) * dt


@dataclass(frozen=True)
class SimConfig:
    """Time grid and path budget for a simulation run."""

    horizon: float
    dt: float
    n_paths: int
    seed: int = 0
    substep_cap: int = 32
    scheme: str = "euler_full_truncation"
    threads: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigError(f"horizon must be > 0, got {self.horizon}")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ConfigError(f"dt must be > 0, got {self.dt}")
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ConfigError(f"n_paths must be a positive integer, got {self.n_paths}")
        if self.substep_cap < 1:
            raise ConfigError("substep_cap must be >= 1")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 bits")


def time_grid(start, horizon, dt):
    """Uniform grid from ``start`` to ``horizon`` with spacing at most ``dt``."""
    span = horizon - start
    if span <= 0:
        return np.array([float(horizon)])
    m = max(1, int(np.ceil(span / dt - 1e-9)))
    grid = np.linspace(start, horizon, m + 1)
    grid[-1] = horizon
    return grid


def euler_step(params, x, h, dw, scheme="euler_full_truncation"):
    """Advance intensities by one step of length ``h`` with Brownian increment ``dw``.

    ``x`` has shape ``(P, n)``, ``h`` is a scalar or ``(P,)`` and ``dw`` is
    ``(P, K)``. The full-truncation scheme clamps ``x`` at zero inside the
    coefficients and floors the result at ``POSITIVITY_FLOOR``. With
    ``exact_where_available`` a volatility-free model uses the exact flow of
    the linear drift ODE.
    """
    h = np.asarray(h, dtype=float)
    hcol = h[..., None] if h.ndim else h
    if scheme == "exact_where_available" and params.deterministic:
        nu = params.nu
        safe = np.where(nu > 0, nu, 1.0)
        decay = np.exp(-nu * hcol)
        relaxed = params.kappa / safe + (x - params.kappa / safe) * decay
        new = np.where(nu > 0, relaxed, x + params.kappa * hcol)
    else:
        xp = np.maximum(x, 0.0)
        new = x + (params.kappa - params.nu * xp) * hcol + np.sqrt(xp) * (dw @ params.sigma.T)
    return np.maximum(new, POSITIVITY_FLOOR)


@dataclass(frozen=True)
class DiffusionPaths:
    """Trajectories of the jump-free intensity process on a common grid."""

    grid: np.ndarray
    values: np.ndarray  # (P, M+1, n)


def simulate_diffusion_only(params, t, x, horizon, config, rng_stream=0):
    """Simulate the jump-free intensities started at ``x`` at time ``t``.

    Args:
        params: Model parameters.
        t: Start time.
        x: Start intensities, shape ``(n,)`` (copied to every path) or
            ``(P, n)``.
        horizon: Final time, must exceed ``t``.
        config: Supplies ``dt``, ``n_paths``, ``seed`` and ``scheme``.
        rng_stream: Stream identifier for the random numbers.

    Returns:
        DiffusionPaths with ``values[:, 0] == x``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("start intensities must be strictly positive")
    if not t < horizon:
        raise DomainError(f"start time {t} must be before horizon {horizon}")
    n = params.n_names
    x0 = np.broadcast_to(x, (config.n_paths, n)) if x.ndim == 1 else x
    if x0.shape[1] != n:
        raise DomainError(f"expected {n} intensities, got {x0.shape[1]}")
    grid = time_grid(t, horizon, config.dt)
    steps = np.diff(grid)
    out = np.empty((x0.shape[0], grid.size, n))
    for b, sl in enumerate(block_slices(x0.shape[0])):
        gen = block_generator(config.seed, rng_stream, b)
        cur = np.array(x0[sl], dtype=float)
        out[sl, 0] = cur
        for m, h in enumerate(steps):
            dw = gen.standard_normal((cur.shape[0], params.n_factors)) * np.sqrt(h)
            cur = euler_step(params, cur, h, dw, config.scheme)
            out[sl, m + 1] = cur
    return DiffusionPaths(grid=grid, values=out)


@dataclass(frozen=True)
class MarketPath:
    """One simulated trajectory of intensities and default indicators.

    Grid points include every default time, so at most one indicator flips
    between consecutive points. The value stored at a default time is the
    post-jump intensity; ``pre_default[j]`` holds ``X(tau_j-)``.
    """

    grid: np.ndarray
    intensities: np.ndarray  # (M+1, n)
    defaults: np.ndarray  # (M+1, n) bool
    default_times: np.ndarray  # (n,), inf if no default before the horizon
    compensators: np.ndarray  # (n,) integrated intensity up to horizon or default
    pre_default: np.ndarray  # (n, n) intensities just before each default, nan otherwise

    @property
    def horizon(self):
        return self.grid[-1]

    @property
    def start(self):
        return self.grid[0]

    def events(self):
        """Defaults in chronological order as ``(time, name)`` pairs."""
        names = np.flatnonzero(np.isfinite(self.default_times))
        order = np.argsort(self.default_times[names], kind="stable")
        return [(float(self.default_times[j]), int(j)) for j in names[order]]

    def state_at(self, t):
        """Default indicators ``H(t)`` (right-continuous)."""
        initial = self.defaults[0]
        return initial | (self.default_times <= t)

    def martingale(self):
        """``M_i = H_i - compensator_i`` at the horizon for names alive at the start."""
        jumped = np.isfinite(self.default_times) & ~self.defaults[0]
        return jumped.astype(float) - self.compensators


@dataclass(frozen=True)
class MarketEnsemble:
    """Vectorized output of :func:`simulate_market`.

    Attributes:
        grid: Common time grid, shape ``(M+1,)``.
        default_times: ``(P, n)``; ``inf`` if no default before the horizon
            (or before the path was stopped).
        pre_default: ``(P, n, n)``; row ``j`` is ``X(tau_j-)``.
        compensators: ``(P, n)`` integrated intensity up to horizon/default/stop.
        initial_defaults: ``(P, n)`` start state.
        square_integral: ``(P,)`` integral of the sum of squared live intensities.
        functionals: ``(P, F)`` requested path integrals.
        stop_times: ``(P,)`` time at which a stopped path froze, ``inf`` otherwise.
        intensities, defaults: Grid records ``(P, M+1, n)`` when requested.
        brownian: ``(P, M, K)`` Brownian increments applied within each step.
        compensator_steps: ``(P, M, n)`` compensator increments per step.
    """

    grid: np.ndarray
    default_times: np.ndarray
    pre_default: np.ndarray
    compensators: np.ndarray
    initial_defaults: np.ndarray
    square_integral: np.ndarray
    functionals: np.ndarray
    stop_times: np.ndarray
    intensities: np.ndarray = None
    defaults: np.ndarray = None
    brownian: np.ndarray = None
    compensator_steps: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.default_times.shape[0]

    def __len__(self):
        return self.n_paths

    def path(self, p):
        """Single-path view with default times inserted into the grid."""
        if self.intensities is None:
            raise ValueError("ensemble was simulated without path records")
        grid = self.grid
        xs = self.intensities[p]
        hs = self.defaults[p]
        taus = self.default_times[p]
        inserted = sorted(
            (float(taus[j]), j) for j in np.flatnonzero(np.isfinite(taus))
            if not np.any(np.isclose(grid, taus[j], rtol=0, atol=1e-14))
        )
        times, xrows, hrows = list(grid), list(xs), list(hs)
        for tau, j in inserted:
            k = int(np.searchsorted(times, tau))
            state = np.array(self.initial_defaults[p] | (taus <= tau))
            # Post-jump intensities at the event: pre-default values plus jumps of
            # every default at or before tau, frozen names excluded.
            x_post = self.pre_default[p, j].copy()
            alive = ~state
            x_post[alive] += self.params_weights[:, j][alive]
            times.insert(k, tau)
            xrows.insert(k, x_post)
            hrows.insert(k, state)
        return MarketPath(
            grid=np.array(times),
            intensities=np.array(xrows),
            defaults=np.array(hrows, dtype=bool),
            default_times=taus.copy(),
            compensators=self.compensators[p].copy(),
            pre_default=self.pre_default[p].copy(),
        )

    @property
    def params_weights(self):
        return self.meta["weights"]

    def martingales(self):
        """``M_i(T) = H_i(T) - compensator_i(T)`` per path, for names alive at start."""
        jumped = np.isfinite(self.default_times) & ~self.initial_defaults
        return jumped.astype(float) - self.compensators


def _market_block(params, grid, x0, dead0, gen, cap, scheme, stop_on, coef0, coef1, record):
    """Simulate one block of paths; see :func:`simulate_market`."""
    P, n = x0.shape
    K = params.n_factors
    M = grid.size - 1
    w = params.weights
    x = x0.copy()
    dead = dead0.copy()
    clock = gen.standard_exponential((P, n))
    clock[dead] = np.inf
    comp = np.zeros((P, n))
    tau = np.full((P, n), np.inf)
    pre = np.full((P, n, n), np.nan)
    sq = np.zeros(P)
    n_fun = 0 if coef0 is None else coef0.shape[0]
    acc = np.zeros((P, n_fun))
    stopped = np.zeros(P, dtype=bool) if stop_on is None else dead[:, stop_on].copy()
    stop_time = np.full(P, np.inf)
    if record:
        X = np.empty((P, M + 1, n))
        H = np.empty((P, M + 1, n), dtype=bool)
        DW = np.zeros((P, M, K))
        DC = np.zeros((P, M, n))
        X[:, 0] = x
        H[:, 0] = dead
    pow2 = np.int64(1) << np.arange(n, dtype=np.int64)
    for m in range(M):
        t0 = grid[m]
        h = grid[m + 1] - t0
        # Fixed draws per step keep the random stream aligned across paths.
        z_main = gen.standard_normal((P, K))
        z_bridge = gen.standard_normal((P, K))
        rem = np.where(stopped, 0.0, h)
        rows = np.flatnonzero(rem > 0)
        n_pass = 0
        while rows.size:
            n_pass += 1
            if n_pass > cap:
                raise SimulationError(
                    "substep cap exceeded while resolving defaults",
                    {"step": m, "time": float(t0), "paths": rows.tolist()[:20], "cap": cap},
                )
            r = rem[rows]
            if n_pass == 1:
                z = z_main[rows]
            elif n_pass == 2:
                z = z_bridge[rows]
            else:
                z = gen.standard_normal((rows.size, K))
            dw = z * np.sqrt(r)[:, None]
            xo = x[rows]
            alive = ~dead[rows]
            xn = np.where(alive, euler_step(params, xo, r, dw, scheme), xo)
            inc = 0.5 * (xo + xn) * r[:, None] * alive
            cl = clock[rows]
            hit = alive & (inc >= cl)
            frac = np.full(inc.shape, np.inf)
            np.divide(cl, inc, out=frac, where=hit & (inc > 0))
            frac[hit & (inc <= 0)] = 0.0
            j = np.argmin(frac, axis=1)
            f = frac[np.arange(rows.size), j]
            event = np.isfinite(f)
            f = np.where(event, np.minimum(f, 1.0), 1.0)
            fc = f[:, None]
            xe = xo + fc * (xn - xo)
            seg = f * r
            used = inc * fc
            comp[rows] += used
            clock[rows] -= used
            sq[rows] += 0.5 * np.sum((xo**2 + xe**2) * alive, axis=1) * seg
            if n_fun:
                s_idx = dead[rows].astype(np.int64) @ pow2
                xint = 0.5 * (xo + xe) * seg[:, None]
                acc[rows] += coef0[:, s_idx].T * seg[:, None] + np.einsum(
                    "fpn,pn->pf", coef1[:, s_idx], xint
                )
            if record:
                DW[rows, m] += dw * fc
                DC[rows, m] += used
            x[rows] = xe
            ev = rows[event]
            if ev.size:
                je = j[event]
                t_ev = t0 + (h - rem[ev]) + seg[event]
                tau[ev, je] = t_ev
                pre[ev, je, :] = x[ev]
                dead[ev, je] = True
                clock[ev, je] = np.inf
                x[ev] += w[:, je].T * ~dead[ev]
                if stop_on is not None:
                    hit_stop = je == stop_on
                    stopped[ev[hit_stop]] = True
                    stop_time[ev[hit_stop]] = t_ev[hit_stop]
            rem[rows] -= seg
            done = ~event | (rem[rows] <= h * 1e-12) | stopped[rows]
            rem[rows[done]] = 0.0
            rows = rows[~done]
        if record:
            X[:, m + 1] = x
            H[:, m + 1] = dead
    out = {
        "default_times": tau,
        "pre_default": pre,
        "compensators": comp,
        "square_integral": sq,
        "functionals": acc,
        "stop_times": stop_time,
    }
    if record:
        out.update(intensities=X, defaults=H, brownian=DW, compensator_steps=DC)
    return out


def simulate_market(
    params,
    config,
    rng_stream=0,
    *,
    start_time=0.0,
    x0=None,
    z0=None,
    stop_on=None,
    functionals=None,
    record=True,
):
    """Simulate intensities and defaults by the exponential-clock construction.

    Each surviving name carries a unit exponential clock; it defaults when its
    running integrated intensity (trapezoid rule within a step, linear
    interpolation for the crossing time) reaches the clock. At a default the
    surviving intensities jump by the defaulting name's column of the
    contagion matrix and the remainder of the step is re-simulated. Because
    exponential clocks are memoryless, carrying residual clocks is equivalent
    in law to drawing fresh ones after each default.

    Args:
        params: Model parameters.
        config: Grid, path count, seed, scheme and worker count.
        rng_stream: Stream identifier separating independent uses of a seed.
        start_time: Start of the simulation grid.
        x0: Start intensities ``(n,)`` or ``(P, n)``; defaults to ``params.chi``.
        z0: Start default indicators ``(n,)`` or ``(P, n)``; defaults to none.
        stop_on: Freeze each path once this name defaults.
        functionals: Optional pair ``(c0, c1)`` of arrays with shapes
            ``(F, 2**n)`` and ``(F, 2**n, n)``; accumulates
            ``int c0[H] + c1[H] . X du`` per path.
        record: Keep grid records of ``X``, ``H``, Brownian and compensator
            increments.

    Returns:
        MarketEnsemble.

    Raises:
        SimulationError: If resolving defaults within one step needs more
            than ``config.substep_cap`` passes.
    """
    n = params.n_names
    P = config.n_paths
    x0 = params.chi if x0 is None else np.asarray(x0, dtype=float)
    x0 = np.array(np.broadcast_to(x0, (P, n)), dtype=float)
    z0 = np.zeros(n, dtype=bool) if z0 is None else np.asarray(z0, dtype=bool)
    z0 = np.array(np.broadcast_to(z0, (P, n)), dtype=bool)
    if np.any(x0[~z0] <= 0):
        raise DomainError("intensities of surviving names must be strictly positive")
    grid = time_grid(start_time, config.horizon, config.dt)
    coef0 = coef1 = None
    if functionals is not None:
        coef0 = np.asarray(functionals[0], dtype=float)
        coef1 = np.asarray(functionals[1], dtype=float)
        if coef0.ndim == 1:
            coef0, coef1 = coef0[None], coef1[None]
    slices = block_slices(P)

    def run(b):
        sl = slices[b]
        gen = block_generator(config.seed, rng_stream, b)
        return _market_block(
            params, grid, x0[sl], z0[sl], gen, config.substep_cap, config.scheme,
            stop_on, coef0, coef1, record,
        )

    if config.threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(run, range(len(slices))))
    else:
        parts = [run(b) for b in range(len(slices))]
    merged = {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}
    return MarketEnsemble(
        grid=grid,
        initial_defaults=z0,
        meta={"weights": params.weights, "seed": config.seed, "stream": rng_stream},
        **merged,
    )
