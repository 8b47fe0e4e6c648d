"""Closed-form and semi-closed-form oracles for small portfolios.

Each default state of a product has a hand-written :class:`StateFormula`: an
expectation over the jump-free intensities ``Xt`` started at ``(t, x)``,

    terminal * E[exp(-int_t^T L)]
      + E[ int_t^T (annuity + sum_src rate_src(s)) exp(-int_t^s L) ds ],

where ``L`` is the summed intensity of the names alive in that state and a
source rate is ``scale * Xt_j(s) * (inner(s, Xt(s) + w_j) + offset)``, the
inner term being another state's formula (optionally under a positive part).

Products covered, with names indexed from zero and the counterparty last:

* ``cds``: CDS on name 0 and the counterparty CDS, two names.
* ``bond``: defaultable bond on name 0 and the counterparty CDS, two names.
* ``ftd``: first-to-default swap on names 0 and 1, three names.

With zero volatility the intensities are deterministic and formulas are
evaluated by adaptive quadrature (nested for inner formulas). Otherwise they
are evaluated by Monte Carlo on the jump-free paths: nested terms are sampled
at one random time per path, with an inner average when a positive part is
involved.
"""

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import DomainError
from .fk_engine import Estimate
from .model import DefaultState, euler_step
from .rng import block_generator, block_slices, stream_id

MC_CHUNK = 512


@dataclass(frozen=True)
class OracleConfig:
    """Settings of the oracle evaluators.

    Attributes:
        method: ``"quad"``, ``"mc"`` or ``"auto"`` (quadrature when the model
            has no volatility).
        n_paths: Outer Monte Carlo paths.
        n_inner: Inner paths under a positive part.
        n_steps: Time steps per path (each path uses its own uniform grid).
        seed: Random seed.
        epsabs: Absolute tolerance of the quadrature.
        epsrel: Relative tolerance of the quadrature.
    """

    method: str = "auto"
    n_paths: int = 20_000
    n_inner: int = 64
    n_steps: int = 100
    seed: int = 97
    epsabs: float = 1e-13
    epsrel: float = 1e-12


@dataclass(frozen=True)
class Source:
    """Intensity-weighted source term of a state formula."""

    name: int
    inner: object = None
    offset: float = 0.0
    scale: float = 1.0
    inner_scale: float = 1.0
    positive_part: bool = False


@dataclass(frozen=True)
class StateFormula:
    """Expectation formula attached to one default state.

    Attributes:
        state: Default indicators.
        kind: ``constant``, ``survival-discount``, ``annuity`` or
            ``source-recursion``.
        discount_names: Names whose intensities discount the flows.
        terminal: Payoff at maturity.
        annuity: Running rate.
        sources: Source terms; inner formulas belong to states with one more
            default, so the lattice is acyclic.
        constant: Value of a ``constant`` formula.
    """

    state: tuple
    kind: str
    discount_names: tuple = ()
    terminal: float = 0.0
    annuity: float = 0.0
    sources: tuple = ()
    constant: float = 0.0

    def __post_init__(self):
        pop = sum(self.state)
        for src in self.sources:
            if src.inner is not None and sum(src.inner.state) != pop + 1:
                raise DomainError("inner formulas must belong to a state with one more default")


def _constant(state, value):
    return StateFormula(tuple(state), "constant", constant=float(value))


def _kind(terminal, annuity, sources):
    if any(s.inner is not None for s in sources):
        return "source-recursion"
    if annuity:
        return "annuity"
    return "survival-discount"


def _formula(state, discount, terminal=0.0, annuity=0.0, sources=()):
    sources = tuple(sources)
    return StateFormula(tuple(state), _kind(terminal, annuity, sources), tuple(discount),
                        float(terminal), float(annuity), sources)


# --- product data -----------------------------------------------------------------


def _loss(table, state):
    return float(table[DefaultState(state).index])


def _claim_terms(portfolio, kind, n):
    if portfolio.n_names != n:
        raise DomainError(f"{kind} oracle needs {n} names, got {portfolio.n_names}")
    if len(portfolio.claims) != 1 or portfolio.claims[0].meta.get("kind") != kind:
        raise DomainError(f"{kind} oracle needs a portfolio holding one {kind} claim")
    claim = portfolio.claims[0]
    cp = portfolio.counterparty.meta
    return claim.meta, float(portfolio.weights[0]), cp["spread"], cp["loss"]


# --- case lists -------------------------------------------------------------------


def cds_formula(quantity, z, portfolio):
    """Formula of ``F1`` (CDS on name 0), ``F2`` (counterparty CDS) or ``g`` in state ``z``."""
    meta, b, eps2, L2 = _claim_terms(portfolio, "cds", 2)
    if meta["names"] != (0,):
        raise DomainError("the CDS must reference name 0")
    eps1, L1 = meta["spread"], meta["loss"]
    return _two_name_formula(quantity, tuple(z), b, _cds_leg(0, eps1, L1), _cds_leg(1, eps2, L2), L2)


def bond_formula(quantity, z, portfolio):
    """Formula of ``F1`` (bond on name 0), ``F2`` (counterparty CDS) or ``g`` in state ``z``."""
    meta, b, eps2, L2 = _claim_terms(portfolio, "bond", 2)
    if meta["names"] != (0,):
        raise DomainError("the bond must reference name 0")
    return _two_name_formula(quantity, tuple(z), b, _bond_leg(meta["spread"], meta["loss"]),
                             _cds_leg(1, eps2, L2), L2)


def _cds_leg(i, eps, L):
    """Per-state formulas of a CDS on name ``i`` of a two-name model."""
    other = 1 - i

    def leg(z):
        if z == (1, 1):
            return _constant(z, _loss(L, z))
        if z[i]:
            # Protection already paid: the payoff persists until maturity.
            paid = _loss(L, z)
            return _formula(z, (other,), terminal=paid, sources=[Source(other, offset=paid)])
        if z[other]:
            return _formula(z, (i,), annuity=-eps, sources=[Source(i, offset=_loss(L, (1, 1)))])
        return _formula(z, (0, 1), annuity=-eps,
                        sources=[Source(0, leg((1, 0))), Source(1, leg((0, 1)))])

    return leg


def _bond_leg(coupon, L):
    """Per-state formulas of a bond on name 0 of a two-name model."""

    def leg(z):
        if z == (1, 1):
            return _constant(z, 1 - _loss(L, z))
        if z == (1, 0):
            rec = 1 - _loss(L, z)
            return _formula(z, (1,), terminal=rec, sources=[Source(1, offset=rec)])
        if z == (0, 1):
            return _formula(z, (0,), terminal=1.0, annuity=coupon,
                            sources=[Source(0, offset=1 - _loss(L, (1, 1)))])
        return _formula(z, (0, 1), terminal=1.0, annuity=coupon,
                        sources=[Source(0, leg((1, 0))), Source(1, leg((0, 1)))])

    return leg


def _two_name_formula(quantity, z, b, claim_leg, cp_leg, L2):
    if len(z) != 2:
        raise DomainError("two-name formulas need a two-entry state")
    if quantity == "F1":
        return claim_leg(z)
    if quantity == "F2":
        return cp_leg(z)
    if quantity != "g":
        raise DomainError(f"unknown quantity {quantity!r}")
    if z != (0, 0):
        # Counterparty defaulted, or only the counterparty left with nothing owed.
        return _constant(z, 0.0)
    exposure = claim_leg((0, 1))
    return _formula(z, (0, 1), sources=[
        Source(1, exposure, scale=_loss(L2, (0, 1)), inner_scale=b, positive_part=True),
        Source(0, _constant((1, 0), 0.0)),
    ])


def ftd_formula(quantity, z, portfolio):
    """Formula of ``F1`` (first-to-default swap on names 0, 1) or ``g`` in state ``z``."""
    meta, b, _, L3 = _claim_terms(portfolio, "ftd", 3)
    if tuple(meta["names"]) != (0, 1):
        raise DomainError("the first-to-default basket must hold names 0 and 1")
    z = tuple(int(v) for v in z)
    if len(z) != 3:
        raise DomainError("first-to-default formulas need a three-entry state")
    rate = -meta["spread"]
    L = meta["loss"]

    def pay(s):
        return sum(_loss(L[i], s) * s[i] for i in (0, 1))

    def F(s):
        alive = tuple(i for i in range(3) if not s[i])
        if not alive:
            return _constant(s, pay(s))
        if s[0] or s[1]:
            # Triggered: the recovery is locked in; later defaults only change
            # the loss table, and the compensator offsets undo that change.
            srcs = []
            for j in alive:
                nxt = _flip(s, j)
                inner = F(nxt)
                srcs.append(Source(j, inner, offset=-(pay(nxt) - pay(s))))
            return _formula(s, alive, terminal=pay(s), sources=srcs)
        return _formula(s, alive, annuity=rate, sources=[Source(j, F(_flip(s, j))) for j in alive])

    if quantity == "F1":
        return F(z)
    if quantity != "g":
        raise DomainError(f"unknown quantity {quantity!r}")
    if z != (0, 0, 0):
        # Counterparty defaulted, or basket already triggered: no exposure remains.
        return _constant(z, 0.0)
    return _formula(z, (0, 1, 2), sources=[
        Source(2, F((0, 0, 1)), scale=_loss(L3, (0, 0, 1)), inner_scale=b, positive_part=True),
        Source(0, _constant((1, 0, 0), 0.0)),
        Source(1, _constant((0, 1, 0), 0.0)),
    ])


def _flip(s, j):
    s = list(s)
    s[j] = 1 - s[j]
    return tuple(s)


# --- deterministic intensities -----------------------------------------------------


def deterministic_path(params, t, x, s):
    """Jump-free intensities at time ``s`` when the model has no volatility."""
    tau = np.asarray(s, dtype=float) - t
    kappa, nu, x = params.kappa, params.nu, np.asarray(x, dtype=float)
    safe = np.where(nu > 0, nu, 1.0)
    level = kappa / safe
    relaxed = level + (x - level) * np.exp(-nu * tau)
    return np.where(nu > 0, relaxed, x + kappa * tau)


def integrated_intensity(params, t, x, s):
    """``int_t^s`` of the deterministic jump-free intensities, per name."""
    tau = np.asarray(s, dtype=float) - t
    kappa, nu, x = params.kappa, params.nu, np.asarray(x, dtype=float)
    safe = np.where(nu > 0, nu, 1.0)
    level = kappa / safe
    relaxed = level * tau + (x - level) * (-np.expm1(-nu * tau)) / safe
    return np.where(nu > 0, relaxed, x * tau + 0.5 * kappa * tau**2)


def _quad(formula, t, x, params, T, cfg, errs):
    if formula.kind == "constant":
        return formula.constant
    names = list(formula.discount_names)
    w = params.weights

    def discount(s):
        return np.exp(-np.sum(integrated_intensity(params, t, x, s)[names]))

    def integrand(s):
        xs = deterministic_path(params, t, x, s)
        rate = formula.annuity
        for src in formula.sources:
            val = src.offset
            if src.inner is not None:
                inner = src.inner_scale * _quad(src.inner, s, xs + w[:, src.name], params, T, cfg, None)
                val += max(inner, 0.0) if src.positive_part else inner
            rate += src.scale * xs[src.name] * val
        return rate * discount(s)

    value = formula.terminal * discount(T)
    if T > t:
        part, err = integrate.quad(integrand, t, T, epsabs=cfg.epsabs, epsrel=cfg.epsrel, limit=200)
        value += part
        if errs is not None:
            errs.append(err)
    return value


# --- Monte Carlo on jump-free paths ------------------------------------------------


def _mc(formula, t, x, params, T, cfg, gen):
    """One unbiased sample per row for start points ``t`` (P,) and ``x`` (P, n).

    Within each step the intensities are replaced by their trapezoid average
    and the discount decays exponentially, so a flow ``xbar_j`` discounted by
    ``xbar_j`` alone integrates to ``D_m - D_{m+1}`` exactly. Nested terms are
    evaluated at one uniformly chosen step per path, at the step's mid time.
    """
    P = x.shape[0]
    if formula.kind == "constant":
        return np.full(P, formula.constant)
    M = cfg.n_steps
    h = (T - t) / M
    K = params.n_factors
    names = list(formula.discount_names)
    xbar = np.empty((P, M, x.shape[1]))
    cur = x
    for m in range(M):
        dw = gen.standard_normal((P, K)) * np.sqrt(h)[:, None]
        nxt = euler_step(params, cur, h, dw)
        xbar[:, m] = 0.5 * (cur + nxt)
        cur = nxt
    lam = xbar[:, :, names].sum(axis=2)
    lh = lam * h[:, None]
    D = np.exp(-np.concatenate([np.zeros((P, 1)), np.cumsum(lh, axis=1)], axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(lh < 1e-12, h[:, None], -np.expm1(-lh) / np.where(lh < 1e-12, 1.0, lam))
    weight = D[:, :-1] * step
    value = formula.terminal * D[:, -1]
    flat = formula.annuity * np.ones((P, M))
    rows = np.arange(P)
    w = params.weights
    for src in formula.sources:
        if src.inner is None:
            flat = flat + src.scale * xbar[:, :, src.name] * src.offset
            continue
        m = gen.integers(0, M, P)
        s_m = t + (m + 0.5) * h
        x_m = xbar[rows, m]
        start = x_m + w[:, src.name]
        if src.positive_part:
            reps = cfg.n_inner
            inner = _mc(src.inner, np.repeat(s_m, reps), np.repeat(start, reps, axis=0), params, T, cfg, gen)
            inner = np.maximum(src.inner_scale * inner.reshape(P, reps).mean(axis=1), 0.0)
        else:
            inner = src.inner_scale * _mc(src.inner, s_m, start, params, T, cfg, gen)
        rate = src.scale * x_m[:, src.name] * (inner + src.offset)
        value = value + M * rate * weight[rows, m]
    return value + np.sum(flat * weight, axis=1)


def evaluate(formula, t, x, params, maturity, cfg=OracleConfig()):
    """Evaluate a state formula at ``(t, x)``.

    Returns:
        Estimate. Quadrature results carry the outer quadrature error
        estimate as ``std_error`` and ``n_paths == 0``.
    """
    x = np.asarray(x, dtype=float)
    if not 0 <= t <= maturity:
        raise DomainError(f"t={t} outside [0, {maturity}]")
    method = cfg.method
    if method == "auto":
        method = "quad" if params.deterministic else "mc"
    if formula.kind == "constant":
        return Estimate.exact(formula.constant)
    if method == "quad":
        if not params.deterministic:
            raise DomainError("quadrature oracle needs a model without volatility")
        errs = []
        value = _quad(formula, t, x, params, maturity, cfg, errs)
        return Estimate(float(value), float(errs[0]) if errs else 0.0, 0)
    stream = stream_id("oracle", formula.state, formula.kind)
    parts = []
    # Chunks bound the memory of the nested inner paths.
    for b, sl in enumerate(block_slices(cfg.n_paths, MC_CHUNK)):
        P = sl.stop - sl.start
        gen = block_generator(cfg.seed, stream, b)
        parts.append(_mc(formula, np.full(P, float(t)), np.tile(x, (P, 1)), params, maturity, cfg, gen))
    return Estimate.from_samples(np.concatenate(parts))


def cds_oracle(z, t, x, params, portfolio, maturity, quantity="F1", cfg=OracleConfig()):
    """Oracle for the two-name CDS portfolio; ``quantity`` is ``F1``, ``F2`` or ``g``."""
    _check_model(params, 2)
    return evaluate(cds_formula(quantity, tuple(getattr(z, "bits", z)), portfolio), t, x, params, maturity, cfg)


def bond_oracle(z, t, x, params, portfolio, maturity, quantity="F1", cfg=OracleConfig()):
    """Oracle for the two-name bond portfolio; ``quantity`` is ``F1``, ``F2`` or ``g``."""
    _check_model(params, 2)
    return evaluate(bond_formula(quantity, tuple(getattr(z, "bits", z)), portfolio), t, x, params, maturity, cfg)


def ftd_oracle(z, t, x, params, portfolio, maturity, quantity="F1", cfg=OracleConfig()):
    """Oracle for the three-name first-to-default portfolio; ``quantity`` is ``F1`` or ``g``."""
    _check_model(params, 3)
    return evaluate(ftd_formula(quantity, tuple(getattr(z, "bits", z)), portfolio), t, x, params, maturity, cfg)


def _check_model(params, n):
    if params.n_names != n:
        raise DomainError(f"oracle needs a model with {n} names, got {params.n_names}")


def single_name_cds_value(lam, loss, spread, tau):
    """Value of a CDS under a constant intensity with ``tau`` years left."""
    return (loss - spread / lam) * (1 - np.exp(-lam * tau))


def single_name_cds_derivative(lam, loss, spread, tau):
    """Derivative of :func:`single_name_cds_value` in the intensity."""
    survival = np.exp(-lam * tau)
    return spread / lam**2 * (1 - survival) + (loss - spread / lam) * tau * survival
