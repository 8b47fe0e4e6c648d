"""Memoized value surfaces over (time, surviving intensities) per default state.

A surface for state ``z`` is estimated at every node of a tensor grid in time
and in the intensities of the surviving names, backwards from maturity: each
node is propagated over one time interval by jump-free paths, with the
continuation read from the next time slice and transitions to child states
integrated against the child surfaces, which are built first. All intensity
nodes share the same normals (with antithetic pairs), so the estimated
surface is smooth in ``x`` and its spline derivative is a usable gradient.

Between time nodes surfaces are cubic Lagrange interpolants in time (four
nearest nodes, so the quadratic decay of exposures near maturity is
captured); in the intensities they are
interpolating cubic tensor-product B-splines, evaluated with clamping at the
edges of the grid.
"""

import threading

import numpy as np
from scipy.interpolate import BSpline, NdBSpline, make_interp_spline

from .fk_engine import Cashflows, FRecursion, GRecursion
from .model import euler_step
from .rng import block_generator, stream_id


def default_x_max(params, maturity):
    """Upper end of the intensity axis per name."""
    level = np.where(params.nu > 0, params.kappa / np.where(params.nu > 0, params.nu, 1.0),
                     params.chi + params.kappa * maturity)
    base = np.maximum(params.chi, level) + params.weights.sum(axis=1)
    var = np.sum(params.sigma**2, axis=1)
    spread = np.sqrt(np.maximum(base, 1e-12) * var * maturity)
    return 1.5 * base + 3.0 * spread


class ConstantSurface:
    """Surface that depends on time only through a known function."""

    def __init__(self, fn, n_names):
        self.fn = fn
        self.n = n_names

    def value(self, s, x):
        s = np.broadcast_to(np.asarray(s, dtype=float), (np.shape(x)[0],))
        return np.asarray(self.fn(s), dtype=float) * np.ones(s.shape)

    def gradient(self, s, x):
        return np.zeros((np.shape(x)[0], self.n))


def _interp_coefficients(axes, values):
    """Tensor-product cubic interpolation coefficients; trailing axis kept."""
    c = values
    knots = []
    for a, ax in enumerate(axes):
        c = np.moveaxis(c, a, 0)
        spl = make_interp_spline(ax, c, k=3, axis=0)
        knots.append(spl.t)
        c = np.moveaxis(spl.c, 0, a)
    return tuple(knots), c


class GridSurface:
    """Spline surface estimated on a (time, intensity) grid.

    Attributes:
        times: Time nodes, shape ``(Q+1,)``.
        axes: Intensity nodes for each surviving name.
        survivors: Name indices of the axes.
        values: Node estimates, shape ``(Q+1, *grid)``.
        std_errors: Standard errors of the node estimates.
    """

    def __init__(self, times, axes, survivors, values, std_errors, n_names):
        self.times = np.asarray(times)
        self.axes = [np.asarray(a) for a in axes]
        self.survivors = list(survivors)
        self.values = values
        self.std_errors = std_errors
        self.n = n_names
        self.lo = np.array([a[0] for a in self.axes])
        self.hi = np.array([a[-1] for a in self.axes])
        if self.survivors:
            self.knots, self.coef = _interp_coefficients(self.axes, np.moveaxis(values, 0, -1))

    def _window(self, s):
        """Time-node window and cubic Lagrange weights for each time in ``s``."""
        Q = self.times.size - 1
        width = min(4, Q + 1)
        q = np.clip(np.searchsorted(self.times, s, side="right") - 1, 0, Q - 1)
        first = np.clip(q - 1, 0, Q + 1 - width)
        nodes = first[:, None] + np.arange(width)
        tn = self.times[nodes]
        weights = np.ones(nodes.shape)
        for a in range(width):
            for b in range(width):
                if a != b:
                    weights[:, a] *= (s - tn[:, b]) / (tn[:, a] - tn[:, b])
        return first, weights

    def _spline(self, c, pts, nu):
        if len(self.survivors) == 1:
            return BSpline(self.knots[0], c, 3)(pts[:, 0], nu=0 if nu is None else nu[0])
        return NdBSpline(self.knots, c, 3)(pts, nu=nu)

    def _evaluate(self, s, x, nu=None):
        x = np.asarray(x, dtype=float)
        s = np.broadcast_to(np.asarray(s, dtype=float), (x.shape[0],))
        if x.shape[0] == 0:
            return np.zeros(0)
        s = np.clip(s, self.times[0], self.times[-1])
        first, weights = self._window(s)
        width = weights.shape[1]
        if not self.survivors:
            if nu is not None:
                return np.zeros(x.shape[0])
            return np.sum(weights * self.values[first[:, None] + np.arange(width)], axis=1)
        pts = np.clip(x[:, self.survivors], self.lo, self.hi)
        if np.all(s == s[0]):
            f, wt = int(first[0]), weights[0]
            return self._spline(self.coef[..., f:f + width] @ wt, pts, nu)
        out = np.zeros(x.shape[0])
        for f in np.unique(first):
            rows = np.flatnonzero(first == f)
            for a in range(width):
                out[rows] += weights[rows, a] * self._spline(self.coef[..., f + a], pts[rows], nu)
        return out

    def value(self, s, x):
        return self._evaluate(s, x)

    def gradient(self, s, x):
        x = np.asarray(x, dtype=float)
        grad = np.zeros((x.shape[0], self.n))
        for a, i in enumerate(self.survivors):
            nu = tuple(int(b == a) for b in range(len(self.survivors)))
            grad[:, i] = self._evaluate(s, x, nu=nu)
        return grad


def _slice_spline(axes, values):
    """Evaluator of the cubic interpolant of one time slice."""
    knots, coef = _interp_coefficients(axes, values)
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    if len(axes) == 1:
        spl = BSpline(knots[0], coef, 3)
        return lambda pts: spl(np.clip(pts[:, 0], lo[0], hi[0]))
    spl = NdBSpline(knots, coef, 3)
    return lambda pts: spl(np.clip(pts, lo, hi))


def build_surface(rec, state, params, cfg, child, stream, x_max):
    """Estimate the surface of recursion ``rec`` in ``state`` by backward induction.

    Time nodes are processed from maturity backwards. At node ``tau_q`` every
    intensity node is propagated over ``[tau_q, tau_{q+1}]`` with jump-free
    paths; the discounted continuation is read from the slice already built at
    ``tau_{q+1}`` and the transitions to child states from the child surfaces.

    Args:
        rec: :class:`FRecursion` or :class:`GRecursion`.
        state: Integer-encoded default state.
        params: Model parameters.
        cfg: Estimator settings (``table_*`` fields, ``dt``, ``scheme``).
        child: Callable returning the surface of a child state.
        stream: Random stream identifier.
        x_max: Upper end of the intensity axis per name.
    """
    n = params.n_names
    closed = rec.closed(state)
    if closed is not None:
        return ConstantSurface(closed, n)
    T = rec.maturity
    alive = ((state >> np.arange(n)) & 1) == 0
    survivors = list(np.flatnonzero(alive))
    Q = max(1, int(np.ceil(T / cfg.table_dt - 1e-9)))
    k = max(1, int(np.ceil((T / Q) / cfg.dt - 1e-9)))
    times = np.linspace(0.0, T, Q + 1)
    # Nodes cluster near zero, where the positive part bends the CVA surface.
    axes = [x_max[i] * np.linspace(0.0, 1.0, cfg.table_nodes) ** 1.5 for i in survivors]
    shape = tuple(len(a) for a in axes)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(survivors))
    N = mesh.shape[0]
    P = cfg.table_paths
    x_start = np.ones((N * P, n))
    x_start[:, survivors] = np.repeat(mesh, P, axis=0)
    offsets = rec.offsets(state)
    jumps = params.weights
    children = [(j, child(state | (1 << j))) for j in survivors]
    g_source = rec.extra(state)
    terminal = rec.terminal(state)
    running = rec.running(state)
    live = alive.astype(float)
    K = params.n_factors

    def source(tm, xb):
        total = np.zeros(xb.shape[0])
        for j, surf in children:
            total += xb[:, j] * (surf.value(tm, xb + jumps[:, j]) + offsets[j])
        if g_source is not None:
            total += g_source(tm, xb)
        return total

    values = np.empty((Q + 1,) + shape)
    se = np.zeros((Q,) + shape)
    values[Q] = terminal
    for q in range(Q - 1, -1, -1):
        gen = block_generator(cfg.seed, stream, q)
        steps = np.linspace(times[q], times[q + 1], k + 1)
        x = x_start.copy()
        D = np.ones(N * P)
        acc = np.zeros(N * P)
        for m in range(k):
            half = gen.standard_normal((P // 2, K))
            z = np.tile(np.concatenate([half, -half]), (N, 1))
            h = steps[m + 1] - steps[m]
            xn = np.where(alive, euler_step(params, x, h, z * np.sqrt(h), cfg.scheme), x)
            xb = 0.5 * (x + xn)
            lam = xb @ live
            lh = lam * h
            small = lh < 1e-10
            with np.errstate(divide="ignore", invalid="ignore"):
                step_int = np.where(small, h * (1 - 0.5 * lh), -np.expm1(-lh) / np.where(small, 1.0, lam))
            I = D * step_int
            acc += I * (running + source(steps[m + 1] - 0.5 * h, xb))
            D *= np.exp(-lh)
            x = xn
        if q == Q - 1:
            cont = np.full(N * P, terminal)
        else:
            cont = _slice_spline(axes, values[q + 1])(x[:, survivors])
        samples = (acc + D * cont).reshape(shape + (P,))
        values[q] = samples.mean(axis=-1)
        # Antithetic pairs are the independent units.
        pairs = 0.5 * (samples[..., : P // 2] + samples[..., P // 2:])
        se[q] = pairs.std(axis=-1, ddof=1) / np.sqrt(P // 2)
    return GridSurface(times, axes, survivors, values, se, n)


class SurfaceFamily:
    """Lazily built surfaces of one recursion, memoized by default state."""

    def __init__(self, rec, params, cfg, label, x_max):
        self.rec = rec
        self.params = params
        self.cfg = cfg
        self.label = label
        self.x_max = x_max
        self._cache = {}
        self._lock = threading.RLock()

    def __call__(self, state):
        with self._lock:
            surf = self._cache.get(state)
            if surf is None:
                stream = stream_id("surface", self.label, state)
                surf = build_surface(self.rec, state, self.params, self.cfg, self, stream, self.x_max)
                self._cache[state] = surf
            return surf

    def value(self, state, s, x):
        return self(state).value(s, x)


def cds_family(claim, params, cfg, maturity, x_max=None):
    """Surfaces of a CDS pricing function at ``alpha = (1, 1, 1)``."""
    if x_max is None:
        x_max = default_x_max(params, maturity)
    cash = Cashflows.from_claims([(1.0, claim, (1, 1, 1))], maturity, params.n_names)
    return SurfaceFamily(FRecursion(cash, params, use_identities=True), params, cfg, "cds", x_max)


class PortfolioSurfaces:
    """All surfaces needed for exposures, CVA and hedging of one portfolio.

    Attributes:
        cds: Counterparty-CDS pricing function (``alpha = (1, 1, 1)``).
        g: CVA function.
        maturity: Final time.
    """

    def __init__(self, portfolio, params, cfg, maturity, cds=None):
        if maturity is None:
            raise ValueError("a maturity is required")
        self.portfolio = portfolio
        self.params = params
        self.cfg = cfg
        self.maturity = float(maturity)
        self.n = params.n_names
        if cfg.table_x_max is None:
            self.x_max = default_x_max(params, self.maturity)
        else:
            self.x_max = np.broadcast_to(np.asarray(cfg.table_x_max, dtype=float), (self.n,))
        if cds is None:
            cds = cds_family(portfolio.counterparty, params, cfg, self.maturity, self.x_max)
        self.cds = cds
        self._families = {}
        self.g_recursion = GRecursion(portfolio, params, self.maturity, self.exposure)
        self.g = SurfaceFamily(self.g_recursion, params, cfg, "g", self.x_max)

    def _family(self, coefs):
        key = tuple(coefs)
        fam = self._families.get(key)
        if fam is None:
            parts = [(c, claim, (1, 1, 1)) for c, claim in zip(coefs, self.portfolio.claims)]
            cash = Cashflows.from_claims(parts, self.maturity, self.n)
            # Streams depend on the direction of the weights only, so scaled
            # portfolios share random numbers and scale exactly.
            norm = max(abs(float(c)) for c in coefs) or 1.0
            label = "value-" + ",".join(repr(float(c) / norm) for c in coefs)
            fam = SurfaceFamily(FRecursion(cash, self.params, use_identities=True), self.params, self.cfg,
                                label, self.x_max)
            self._families[key] = fam
        return fam

    def exposure(self, state):
        """Surface of ``sum_i b_i (1 - K_i(z)) F_i`` in state ``z``."""
        return self._family(self.portfolio.exposure_weights(state))(state)

    def claim(self, i, state):
        """Surface of claim ``i``'s pricing function at ``alpha = (1, 1, 1)``."""
        coefs = np.zeros(len(self.portfolio.claims))
        coefs[i] = 1.0
        return self._family(coefs)(state)
