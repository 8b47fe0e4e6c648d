"""Defaultable claims as state-indexed payoff tables.

A claim is the quadruple ``(xi, a, Z, K)``: promised payoff at maturity,
dividend rate, payoff at the trigger and trigger indicator. All four are
functions of the default indicators and are stored as dense arrays indexed by
the integer encoding of the state (bit ``i`` set when name ``i`` has
defaulted).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .model import DefaultState

MAX_NAMES = 20


def flip_state(z, j):
    """Return ``z`` with the ``j``-th indicator flipped."""
    if not isinstance(z, DefaultState):
        z = DefaultState(tuple(z))
    return z.flip(j)


def _states(n):
    return [DefaultState.from_index(s, n) for s in range(2**n)]


def _table(value, n, label):
    """Dense state table from a constant, a callable on states or an array."""
    size = 2**n
    if callable(value):
        arr = np.array([float(value(z)) for z in _states(n)])
    else:
        arr = np.array(value, dtype=float)
        if arr.ndim == 0:
            arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ConfigError(f"{label} table must have {size} entries, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{label} table must be finite")
    arr.setflags(write=False)
    return arr


def _check_monotone(k, n):
    for s in range(2**n):
        for j in range(n):
            if not (s >> j) & 1 and k[s] > k[s | (1 << j)]:
                raise ConfigError("trigger indicator must be monotone in the default state")


@dataclass(frozen=True, eq=False)
class ClaimSpec:
    """Payoff tables of one defaultable claim.

    Attributes:
        n_names: Number of names in the model (state width).
        xi: Promised payoff at maturity per state.
        a: Dividend rate per state.
        zpay: Payoff received at the trigger, evaluated at the post-trigger state.
        k: Trigger indicator per state (0 or 1), monotone in the state.
        meta: Descriptive data (kind, names, spread, loss table) used for
            serialization and by the closed-form oracles.
    """

    n_names: int
    xi: np.ndarray
    a: np.ndarray
    zpay: np.ndarray
    k: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = int(self.n_names)
        if not 1 <= n <= MAX_NAMES:
            raise ConfigError(f"number of names must be in 1..{MAX_NAMES}")
        object.__setattr__(self, "xi", _table(self.xi, n, "xi"))
        object.__setattr__(self, "a", _table(self.a, n, "a"))
        object.__setattr__(self, "zpay", _table(self.zpay, n, "Z"))
        k = _table(self.k, n, "K")
        if np.any((k != 0) & (k != 1)):
            raise ConfigError("trigger indicator must take values 0 or 1")
        _check_monotone(k, n)
        object.__setattr__(self, "k", k)

    @classmethod
    def from_maps(cls, n_names, xi, a, zpay, k, **meta):
        """Build the tables by evaluating maps on every :class:`DefaultState`."""
        return cls(n_names, xi, a, zpay, k, meta=dict(meta))

    @property
    def n_states(self):
        return 2**self.n_names

    def terminal(self, alpha=(1.0, 1.0, 1.0)):
        """Terminal values ``a1 xi (1-K) + a2 Z K`` per state."""
        a1, a2, _ = alpha
        return a1 * self.xi * (1 - self.k) + a2 * self.zpay * self.k

    def running(self, alpha=(1.0, 1.0, 1.0)):
        """Running rate ``a3 (1-K) a`` per state."""
        return alpha[2] * (1 - self.k) * self.a

    def jump_offsets(self, alpha=(1.0, 1.0, 1.0)):
        """Array ``(S, n)`` of ``-a3 K(z) (Z(z^j) - Z(z))`` for ``z_j = 0``, else 0."""
        n = self.n_names
        s = np.arange(self.n_states)
        out = np.zeros((self.n_states, n))
        for j in range(n):
            alive = ((s >> j) & 1) == 0
            flipped = s | (1 << j)
            out[:, j] = np.where(alive, -alpha[2] * self.k * (self.zpay[flipped] - self.zpay), 0.0)
        return out

    def trigger_time(self, default_times, initial=None):
        """First time the trigger indicator turns on along an event sequence."""
        state = _initial_index(initial, self.n_names)
        if self.k[state]:
            return -np.inf
        for t, j in _ordered_events(default_times):
            state |= 1 << j
            if self.k[state]:
                return t
        return np.inf


def _initial_index(initial, n):
    if initial is None:
        return 0
    return int(np.dot(np.asarray(initial, dtype=np.int64), 1 << np.arange(n)))


def _ordered_events(default_times):
    taus = np.asarray(default_times, dtype=float)
    names = np.flatnonzero(np.isfinite(taus))
    order = np.argsort(taus[names], kind="stable")
    return [(float(taus[j]), int(j)) for j in names[order]]


def _loss_table(loss, n, label):
    table = _table(loss, n, label)
    if np.any(table <= 0) or np.any(table > 1):
        raise ConfigError(f"{label} must take values in (0, 1]")
    return table


def _check_name(i, n):
    if not 0 <= i < n:
        raise ConfigError(f"name index {i} out of range for {n} names")


def make_cds(i, spread, loss, n_names):
    """Credit default swap on name ``i`` seen from the protection buyer.

    Pays the spread continuously until default or maturity and receives the
    loss rate ``L_i(z)`` at default.

    Args:
        i: Reference name.
        spread: Running premium, > 0.
        loss: Loss rate, a constant, a map on states or a table, in (0, 1].
        n_names: Number of names in the model.
    """
    _check_name(i, n_names)
    if not spread > 0:
        raise ConfigError("CDS spread must be > 0")
    lt = _loss_table(loss, n_names, "loss")
    own = (np.arange(2**n_names) >> i) & 1
    return ClaimSpec(
        n_names, 0.0, -float(spread), lt, own,
        meta={"kind": "cds", "names": (i,), "spread": float(spread), "loss": tuple(lt.tolist())},
    )


def make_bond(i, coupon, loss, n_names):
    """Defaultable bond on name ``i``: unit face, running coupon, recovery ``1 - L_i``."""
    _check_name(i, n_names)
    if not coupon > 0:
        raise ConfigError("bond coupon must be > 0")
    lt = _loss_table(loss, n_names, "loss")
    own = (np.arange(2**n_names) >> i) & 1
    return ClaimSpec(
        n_names, 1.0, float(coupon), 1.0 - lt, own,
        meta={"kind": "bond", "names": (i,), "spread": float(coupon), "loss": tuple(lt.tolist())},
    )


def make_first_to_default(spread, losses, n_names, names=None):
    """First-to-default swap on ``names`` (default: every name but the counterparty).

    The premium is paid until the first default among the basket; at that
    time the buyer receives the loss of the defaulted name.

    Args:
        spread: Running premium, > 0.
        losses: One loss specification per basket name.
        n_names: Number of names in the model.
        names: Basket members.
    """
    names = tuple(range(n_names - 1)) if names is None else tuple(names)
    if len(names) != len(losses):
        raise ConfigError("need one loss map per basket name")
    for i in names:
        _check_name(i, n_names)
    if not spread > 0:
        raise ConfigError("first-to-default spread must be > 0")
    tables = [_loss_table(lo, n_names, f"loss[{i}]") for i, lo in zip(names, losses)]
    s = np.arange(2**n_names)
    hit = [((s >> i) & 1) for i in names]
    k = 1 - np.prod([1 - h for h in hit], axis=0)
    zpay = sum(lt * h for lt, h in zip(tables, hit))
    return ClaimSpec(
        n_names, 0.0, -float(spread), zpay, k,
        meta={
            "kind": "ftd",
            "names": names,
            "spread": float(spread),
            "loss": tuple(tuple(t.tolist()) for t in tables),
        },
    )


def zero_claim(n_names):
    """Claim with no cash flows."""
    return ClaimSpec(n_names, 0.0, 0.0, 0.0, 0.0, meta={"kind": "zero", "names": ()})


def dividend_cumulative(claim, path, t):
    """Cumulative dividends ``D(t)`` of ``claim`` along a simulated path.

    The maturity payoff counts only at ``t == T``; the trigger payoff uses the
    state just after the trigger.
    """
    start, horizon = path.grid[0], path.grid[-1]
    if not start - 1e-12 <= t <= horizon + 1e-12:
        raise DomainError(f"t={t} outside [{start}, {horizon}]")
    n = claim.n_names
    state = _initial_index(path.defaults[0], n)
    total = 0.0
    now = start
    triggered = bool(claim.k[state])
    for tau, j in _ordered_events(path.default_times):
        if tau > t or triggered:
            break
        total += claim.a[state] * (tau - now)
        state |= 1 << j
        now = tau
        if claim.k[state]:
            triggered = True
            total += claim.zpay[state]
    if not triggered:
        total += claim.a[state] * (t - now)
        if t >= horizon:
            # Reached only when no trigger occurred before maturity.
            final = _initial_index(path.state_at(horizon), n)
            total += claim.xi[final] * (1 - claim.k[final])
    return float(total)


@dataclass(frozen=True, eq=False)
class Portfolio:
    """Claims held against the counterparty plus the counterparty CDS.

    Attributes:
        claims: Traded claims.
        weights: Number of contracts per claim.
        counterparty: CDS on the counterparty (the hedging instrument); its loss
            table is the counterparty loss rate applied to the exposure.
    """

    claims: tuple
    weights: np.ndarray
    counterparty: ClaimSpec

    def __post_init__(self):
        claims = tuple(self.claims)
        weights = np.atleast_1d(np.array(self.weights, dtype=float))
        if weights.shape != (len(claims),):
            raise ConfigError("need one weight per claim")
        if not np.all(np.isfinite(weights)):
            raise ConfigError("weights must be finite")
        n = self.counterparty.n_names
        if any(c.n_names != n for c in claims):
            raise ConfigError("all claims must share the model's number of names")
        if self.counterparty.meta.get("names") != (n - 1,):
            raise ConfigError("the counterparty leg must reference the last name")
        weights.setflags(write=False)
        object.__setattr__(self, "claims", claims)
        object.__setattr__(self, "weights", weights)

    @property
    def n_names(self):
        return self.counterparty.n_names

    @property
    def counterparty_index(self):
        return self.n_names - 1

    @property
    def counterparty_loss(self):
        return self.counterparty.zpay

    def scaled(self, c):
        return Portfolio(self.claims, self.weights * c, self.counterparty)

    def exposure_weights(self, state):
        """``b_i (1 - K_i(z))`` for every claim at state index ``state``."""
        return np.array([b * (1 - c.k[state]) for b, c in zip(self.weights, self.claims)])

    def check_distinct_triggers(self, default_times, initial=None):
        """Raise if one default event switches on more than one claim trigger."""
        state = _initial_index(initial, self.n_names)
        for t, j in _ordered_events(default_times):
            nxt = state | (1 << j)
            flips = sum(int(c.k[nxt] - c.k[state]) for c in self.claims)
            if flips > 1:
                raise DomainError(f"default of name {j} at t={t} triggers {flips} claims at once")
            state = nxt
