import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvahedge import (
    ConfigError,
    DefaultState,
    DomainError,
    MarketPath,
    Portfolio,
    dividend_cumulative,
    flip_state,
    make_bond,
    make_cds,
    make_first_to_default,
    zero_claim,
)
from cvahedge.claims import ClaimSpec


def event_path(taus, horizon):
    """Path with the given default times (``inf`` for survivors)."""
    taus = np.asarray(taus, dtype=float)
    n = taus.size
    grid = np.linspace(0.0, horizon, 5)
    defaults = np.array([taus <= t for t in grid])
    return MarketPath(grid=grid, intensities=np.full((grid.size, n), 0.1), defaults=defaults, default_times=taus,
                      compensators=np.zeros(n), pre_default=np.full((n, n), np.nan))


class TestCds:
    def test_no_default(self):
        c = make_cds(0, 0.02, 0.6, 1)
        assert dividend_cumulative(c, event_path([np.inf], 2.0), 2.0) == pytest.approx(-0.04)

    def test_default_mid_life(self):
        c = make_cds(0, 0.02, 0.6, 1)
        assert dividend_cumulative(c, event_path([1.0], 2.0), 2.0) == pytest.approx(-0.02 + 0.6)

    def test_trigger_stops_premium(self):
        c = make_cds(0, 0.02, 0.6, 2)
        assert c.k[DefaultState((1, 0)).index] == 1 and c.running()[DefaultState((1, 1)).index] == 0

    def test_invalid_spread(self):
        with pytest.raises(ConfigError):
            make_cds(0, 0.0, 0.6, 1)


class TestBond:
    def test_survival(self):
        b = make_bond(0, 0.05, 0.6, 1)
        assert dividend_cumulative(b, event_path([np.inf], 2.0), 2.0) == pytest.approx(1 + 0.1)

    def test_recovery(self):
        b = make_bond(0, 0.05, 0.6, 1)
        assert dividend_cumulative(b, event_path([1.0], 2.0), 2.0) == pytest.approx(0.05 + 0.4)

    def test_zero_recovery(self):
        b = make_bond(0, 0.05, 1.0, 1)
        assert dividend_cumulative(b, event_path([0.7], 2.0), 2.0) == pytest.approx(0.05 * 0.7)

    def test_face_only_at_maturity(self):
        b = make_bond(0, 0.05, 0.6, 1)
        assert dividend_cumulative(b, event_path([np.inf], 2.0), 1.0) == pytest.approx(0.05)


class TestFirstToDefault:
    def test_no_defaults(self):
        f = make_first_to_default(0.03, [0.6, 0.5], 3)
        assert dividend_cumulative(f, event_path([np.inf] * 3, 3.0), 3.0) == pytest.approx(-0.09)

    def test_second_name_first(self):
        f = make_first_to_default(0.03, [0.6, 0.5], 3)
        assert dividend_cumulative(f, event_path([np.inf, 1.0, np.inf], 3.0), 3.0) == pytest.approx(-0.03 + 0.5)

    def test_later_defaults_ignored(self):
        f = make_first_to_default(0.03, [0.6, 0.5], 3)
        one = dividend_cumulative(f, event_path([np.inf, 1.0, np.inf], 3.0), 3.0)
        two = dividend_cumulative(f, event_path([2.0, 1.0, np.inf], 3.0), 3.0)
        assert one == two

    def test_recovery_sum_when_both(self):
        f = make_first_to_default(0.03, [0.6, 0.5], 3)
        assert f.zpay[DefaultState((1, 1, 1)).index] == pytest.approx(1.1)

    def test_loss_count_mismatch(self):
        with pytest.raises(ConfigError):
            make_first_to_default(0.03, [0.6], 3)


class TestFlip:
    def test_examples(self):
        assert flip_state((0, 0), 0) == DefaultState((1, 0))
        assert flip_state((1, 0, 1), 1) == DefaultState((1, 1, 1))

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            flip_state((0, 0), 2)


class TestClaimSpec:
    def test_non_monotone_trigger(self):
        with pytest.raises(ConfigError):
            ClaimSpec(1, 0.0, 0.0, 0.0, [1, 0])

    def test_table_size(self):
        with pytest.raises(ConfigError):
            ClaimSpec(2, [1.0, 2.0], 0.0, 0.0, 0.0)

    def test_from_maps(self):
        c = ClaimSpec.from_maps(2, lambda z: z.popcount, 0.0, 0.0, 0.0, kind="custom")
        assert c.xi.tolist() == [0, 1, 1, 2] and c.meta["kind"] == "custom"

    def test_terminal_combines_alpha(self):
        c = make_cds(0, 0.1, 0.6, 1)
        assert c.terminal((1, 0, 0)).tolist() == [0.0, 0.0]
        assert c.terminal((0, 1, 1)).tolist() == [0.0, 0.6]

    def test_jump_offsets_only_after_trigger(self):
        f = make_first_to_default(0.1, [0.6, 0.5], 3)
        off = f.jump_offsets()
        # After name 0 triggered, a default of name 1 changes the recovery table by 0.5.
        assert off[DefaultState((1, 0, 0)).index, 1] == pytest.approx(-0.5)
        assert np.all(off[DefaultState((0, 0, 0)).index] == 0)

    def test_zero_claim(self):
        z = zero_claim(2)
        assert not z.terminal().any() and not z.running().any()


class TestPortfolio:
    def test_counterparty_must_be_last(self):
        with pytest.raises(ConfigError):
            Portfolio([make_cds(1, 0.1, 0.6, 2)], [1.0], make_cds(0, 0.1, 0.6, 2))

    def test_exposure_weights(self):
        pf = Portfolio([make_cds(0, 0.1, 0.6, 2)], [2.0], make_cds(1, 0.1, 0.6, 2))
        assert pf.exposure_weights(DefaultState((0, 1)).index).tolist() == [2.0]
        assert pf.exposure_weights(DefaultState((1, 1)).index).tolist() == [0.0]

    def test_distinct_triggers(self):
        pf = Portfolio([make_cds(0, 0.1, 0.6, 3), make_cds(0, 0.1, 0.6, 3)], [1.0, 1.0], make_cds(2, 0.1, 0.6, 3))
        with pytest.raises(DomainError):
            pf.check_distinct_triggers(np.array([0.5, np.inf, np.inf]))
        ok = Portfolio([make_cds(0, 0.1, 0.6, 3), make_cds(1, 0.1, 0.6, 3)], [1.0, 1.0], make_cds(2, 0.1, 0.6, 3))
        ok.check_distinct_triggers(np.array([0.5, 0.7, np.inf]))


@settings(max_examples=40, deadline=None)
@given(tau=st.floats(0.01, 3.0), eps=st.floats(0.001, 0.2), horizon=st.floats(0.5, 3.0))
def test_bond_cds_duality_when_loss_cancels(tau, eps, horizon):
    # Full loss and matching spread: bond and CDS dividends sum to one.
    bond, cds = make_bond(0, eps, 1.0, 1), make_cds(0, eps, 1.0, 1)
    path = event_path([tau if tau <= horizon else np.inf], horizon)
    total = dividend_cumulative(bond, path, horizon) + dividend_cumulative(cds, path, horizon)
    assert total == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(tau=st.floats(0.01, 3.0), times=st.lists(st.floats(0.0, 3.0), min_size=2, max_size=6))
def test_cds_dividend_monotone_between_events(tau, times):
    c = make_cds(0, 0.05, 0.6, 1)
    path = event_path([tau], 3.0)
    before = sorted(t for t in times if t < tau)
    values = [dividend_cumulative(c, path, t) for t in before]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
