"""Scenario-driven command line front end.

A scenario is one TOML (or JSON) file with sections ``[model]``,
``[portfolio]``, ``[sim]``, ``[estimator]`` and ``[output]``. Outputs are CSV
data files plus a ``summary.txt`` of ``key=value`` lines, all written by the
main thread.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (including
a failed verification).
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .claims import Portfolio, make_bond, make_cds, make_first_to_default
from .errors import ConfigError, DegenerateHedgeError, DomainError, EstimatorError, SimulationError
from .fk_engine import CauchySpec, EstimatorConfig, estimate_F_direct, estimate_F_recursive, estimate_g
from .model import ModelParams, SimConfig, simulate_market

MODES = ("simulate", "price", "cva", "hedge", "verify")
ENV_PREFIX = "CVAHEDGE_"
BUNDLED = Path(__file__).parent / "data"


# --- scenario ----------------------------------------------------------------


def _section(raw, name):
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _field(sec, key, where, default=None, required=False):
    if key in sec:
        return sec[key]
    if required:
        raise ConfigError(f"{where}.{key}: missing required field")
    return default


def _dataclass_section(cls, sec, where, fixed=None):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(sec) - names
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    kwargs = dict(sec)
    kwargs.update(fixed or {})
    if "table_x_max" in kwargs and isinstance(kwargs["table_x_max"], list):
        kwargs["table_x_max"] = tuple(kwargs["table_x_max"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _claim(entry, k, n):
    where = f"portfolio.claims[{k}]"
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: must be a table")
    kind = _field(entry, "kind", where, required=True)
    try:
        if kind == "cds":
            name = int(_field(entry, "name", where, required=True))
            _check_ref(name, n, where)
            return make_cds(name, _field(entry, "spread", where, required=True),
                            _field(entry, "loss", where, required=True), n)
        if kind == "bond":
            name = int(_field(entry, "name", where, required=True))
            _check_ref(name, n, where)
            return make_bond(name, _field(entry, "coupon", where, required=True),
                             _field(entry, "loss", where, required=True), n)
        if kind == "ftd":
            names = [int(i) for i in _field(entry, "names", where, required=True)]
            for i in names:
                _check_ref(i, n, where)
            return make_first_to_default(_field(entry, "spread", where, required=True),
                                         _field(entry, "losses", where, required=True), n, names)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}.kind: unknown claim kind {kind!r}")


def _check_ref(i, n, where):
    if not 0 <= i < n - 1:
        raise ConfigError(f"{where}: reference name {i} must be a non-counterparty name in 0..{n - 2}")


@dataclasses.dataclass(frozen=True, eq=False)
class Scenario:
    """Parsed scenario: model, portfolio, simulation and estimator settings.

    ``raw`` keeps the normalized nested dictionary; two scenarios are equal
    when their normalized dictionaries are.
    """

    raw: dict
    model: ModelParams
    portfolio: Portfolio
    sim: SimConfig
    estimator: EstimatorConfig
    out_dir: Path
    mode: str

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("scenario must be a table")
        unknown = set(raw) - {"model", "portfolio", "sim", "estimator", "output"}
        if unknown:
            raise ConfigError(f"unknown section(s) {sorted(unknown)}")
        model_sec = _section(raw, "model")
        try:
            model = ModelParams(**{k: _field(model_sec, k, "model", required=True)
                                   for k in ("kappa", "nu", "sigma", "weights", "chi")})
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc
        except ConfigError as exc:
            raise ConfigError(f"model: {exc}") from exc
        n = model.n_names
        pf_sec = _section(raw, "portfolio")
        cp_sec = _field(pf_sec, "counterparty", "portfolio", required=True)
        if not isinstance(cp_sec, dict):
            raise ConfigError("portfolio.counterparty: must be a table")
        try:
            counterparty = make_cds(n - 1, _field(cp_sec, "spread", "portfolio.counterparty", required=True),
                                    _field(cp_sec, "loss", "portfolio.counterparty", required=True), n)
        except ConfigError as exc:
            raise ConfigError(f"portfolio.counterparty: {exc}") from exc
        entries = _field(pf_sec, "claims", "portfolio", default=[])
        claims = [_claim(e, k, n) for k, e in enumerate(entries)]
        weights = [float(_field(e, "weight", f"portfolio.claims[{k}]", default=1.0)) for k, e in enumerate(entries)]
        portfolio = Portfolio(claims, weights, counterparty)
        sim = _dataclass_section(SimConfig, _section(raw, "sim"), "sim")
        est = _dataclass_section(EstimatorConfig, _section(raw, "estimator"), "estimator")
        out_sec = _section(raw, "output")
        mode = _field(out_sec, "mode", "output", default="verify")
        if mode not in MODES:
            raise ConfigError(f"output.mode: expected one of {MODES}, got {mode!r}")
        out_dir = Path(_field(out_sec, "dir", "output", default="cvahedge-out"))
        normalized = _normalize(raw, sim, est, mode, out_dir)
        return cls(normalized, model, portfolio, sim, est, out_dir, mode)

    def to_dict(self):
        return json.loads(json.dumps(self.raw))

    def replace(self, seed=None, threads=None, out_dir=None, mode=None):
        raw = self.to_dict()
        if seed is not None:
            raw["sim"]["seed"] = int(seed)
            raw["estimator"]["seed"] = int(seed)
        if threads is not None:
            raw["sim"]["threads"] = int(threads)
            raw["estimator"]["threads"] = int(threads)
        if out_dir is not None:
            raw["output"]["dir"] = str(out_dir)
        if mode is not None:
            raw["output"]["mode"] = mode
        return Scenario.from_dict(raw)

    @property
    def maturity(self):
        return self.sim.horizon

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.raw == other.raw


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _normalize(raw, sim, est, mode, out_dir):
    out = json.loads(json.dumps(raw))
    out["sim"] = {f.name: _plain(getattr(sim, f.name)) for f in dataclasses.fields(sim)}
    out["estimator"] = {f.name: _plain(getattr(est, f.name)) for f in dataclasses.fields(est)
                        if getattr(est, f.name) is not None}
    out.setdefault("portfolio", {}).setdefault("claims", [])
    out["output"] = {"mode": mode, "dir": str(out_dir)}
    return out


def load_scenario(path):
    """Parse a TOML or JSON scenario file.

    Raises:
        ConfigError: With the file name and the parser's line/column or the
            offending field.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read scenario ({exc.strerror})") from exc
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return Scenario.from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_scenario(scenario, path):
    """Write a scenario as TOML (or JSON for a ``.json`` path)."""
    path = Path(path)
    data = scenario.to_dict()
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        path.write_text(tomli_w.dumps(data), encoding="utf-8")


# --- outputs -----------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_summary(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in items:
            fh.write(f"{key}={_fmt(value)}\n")


# --- modes -------------------------------------------------------------------------


def _surfaces(sc):
    from .surfaces import PortfolioSurfaces

    return PortfolioSurfaces(sc.portfolio, sc.model, sc.estimator, sc.maturity)


def run_simulate(sc, out):
    ens = simulate_market(sc.model, sc.sim, record=False)
    mart = ens.martingales()
    rows = []
    for p in range(ens.n_paths):
        rows.append([p] + list(ens.default_times[p]) + list(mart[p]))
    n = sc.model.n_names
    header = ["path"] + [f"tau_{i}" for i in range(n)] + [f"M_{i}" for i in range(n)]
    write_csv(out / "defaults.csv", header, rows)
    se = mart.std(axis=0, ddof=1) / np.sqrt(ens.n_paths) if ens.n_paths > 1 else np.zeros(n)
    items = [("mode", "simulate"), ("n_paths", ens.n_paths), ("seed", sc.sim.seed)]
    for i in range(n):
        items += [(f"martingale_mean_{i}", mart[:, i].mean()), (f"martingale_se_{i}", se[i]),
                  (f"default_rate_{i}", np.mean(np.isfinite(ens.default_times[:, i])))]
    items.append(("square_integral_mean", ens.square_integral.mean()))
    return items, True


def _profile_times(sc):
    return np.linspace(0.0, sc.maturity, max(2, int(round(sc.maturity / sc.estimator.table_dt))) + 1)


def run_price(sc, out):
    from .cva import exposure

    n = sc.model.n_names
    z = np.zeros(n, dtype=int)
    rows = []
    for t in _profile_times(sc):
        rec = exposure(sc.portfolio, float(t), sc.model.chi, z, sc.model, sc.estimator, sc.maturity)
        rows.append([t] + [p.value for p in rec.prices] + [rec.exposure.value, rec.positive_part])
    k = len(sc.portfolio.claims)
    write_csv(out / "exposure.csv", ["time"] + [f"price_{i}" for i in range(k)] + ["exposure", "positive_part"],
              rows)
    return [("mode", "price"), ("exposure_0", rows[0][-2]), ("n_times", len(rows))], True


def run_cva(sc, out):
    from .cva import cva_value

    surfaces = _surfaces(sc)
    z = np.zeros(sc.model.n_names, dtype=int)
    rows = []
    for t in _profile_times(sc)[:-1]:
        g = estimate_g(sc.portfolio, float(t), sc.model.chi, z, sc.estimator, sc.model, surfaces=surfaces)
        rows.append([t, g.value, g.std_error])
    rows.append([sc.maturity, 0.0, 0.0])
    write_csv(out / "cva.csv", ["time", "cva", "std_error"], rows)
    mc = cva_value(sc.portfolio, 0.0, sc.model.chi, z, sc.model, sc.estimator, sc.maturity, surfaces=surfaces,
                   n_paths=sc.sim.n_paths, sim_dt=sc.sim.dt)
    items = [("mode", "cva"), ("cva_function", rows[0][1]), ("cva_function_se", rows[0][2]),
             ("cva_stream", mc.value), ("cva_stream_se", mc.std_error)]
    return items, True


def run_hedge(sc, out):
    from .hedging import CdsHedgeInstrument, HedgeReport, gkw_diagnostics, replay

    inst = CdsHedgeInstrument(sc.portfolio.counterparty, sc.model, sc.estimator, sc.maturity)
    ens = simulate_market(sc.model, sc.sim, stop_on=sc.model.n_names - 1)
    hedge = replay(ens, sc.portfolio, inst)
    report = hedge.report(0)
    write_csv(out / "hedge.csv", HedgeReport.columns, report.rows())
    items = [("mode", "hedge"), ("n_paths", hedge.n_paths), ("theta_0", hedge.theta[0, 0]),
             ("total_cost_mean", float(np.mean(hedge.cost())))]
    ok = True
    if hedge.n_paths >= 10_000:
        diag = gkw_diagnostics(hedge)
        write_csv(out / "buckets.csv", ["start", "end", "covariance", "std_error"],
                  [[diag.bucket_edges[b], diag.bucket_edges[b + 1], diag.bucket_cov[b], diag.bucket_se[b]]
                   for b in range(diag.bucket_cov.size)])
        write_csv(out / "probes.csv", ["factor", "risk", "diff_std_error"],
                  [[c, r, s] for c, (r, s) in diag.probes.items()])
        items += [("risk", diag.risk), ("cva_payment_var", diag.theta_zero_var),
                  ("degenerate_points", diag.degenerate_points)]
        for name, passed in diag.checks().items():
            items.append((f"check_{name}", "PASS" if passed else "FAIL"))
            ok = ok and passed
    return items, ok


def verification_checks(sc):
    """Oracle checks for the bundled one-reference-name or basket scenarios.

    Returns a list of ``(name, passed, detail)``.
    """
    from . import closed_forms as cf
    from .surfaces import PortfolioSurfaces

    pf, params, est, T = sc.portfolio, sc.model, sc.estimator, sc.maturity
    n = params.n_names
    if len(pf.claims) != 1:
        raise ConfigError("verify needs a portfolio with exactly one claim")
    kind = pf.claims[0].meta["kind"]
    oracle = {"cds": cf.cds_oracle, "bond": cf.bond_oracle, "ftd": cf.ftd_oracle}[kind]
    quantities = ("F1", "F2", "g") if n == 2 else ("F1", "g")
    specs = {"F1": CauchySpec(pf.claims[0], (1, 1, 1), T), "F2": CauchySpec(pf.counterparty, (1, 1, 1), T)}
    surfaces = PortfolioSurfaces(pf, params, est, T)
    ocfg = cf.OracleConfig(seed=est.seed)
    x = params.chi
    checks = []
    for s in range(2**n):
        z = tuple((s >> np.arange(n)) & 1)
        for q in quantities:
            form = (cf.cds_formula if kind == "cds" else cf.bond_formula if kind == "bond" else cf.ftd_formula)(
                q, z, pf)
            ref = oracle(z, 0.0, x, params, pf, T, q, ocfg)
            if q == "g":
                est_val = estimate_g(pf, 0.0, x, z, est, params, surfaces=surfaces)
            else:
                est_val = estimate_F_recursive(specs[q], 0.0, x, z, est, params)
            label = "".join(map(str, z))
            if form.kind == "constant":
                ok = ref.value == form.constant and ref.std_error == 0
                checks.append((f"{q}_{label}_exact", ok, f"{ref.value!r} vs {form.constant!r}"))
                checks.append((f"{q}_{label}_estimator", est_val.agrees_with(form.constant),
                               f"{est_val.value!r} vs {form.constant!r}"))
            else:
                ok = est_val.agrees_with(ref)
                checks.append((f"{q}_{label}_oracle", ok, f"{est_val.value!r}+-{est_val.std_error:.3g} vs "
                                                          f"{ref.value!r}+-{ref.std_error:.3g}"))
            if q != "g" and form.kind != "constant":
                direct = estimate_F_direct(specs[q], 0.0, x, z, est, params)
                checks.append((f"{q}_{label}_direct", direct.agrees_with(est_val),
                               f"{direct.value!r} vs {est_val.value!r}"))
    return checks


def run_verify(sc, out):
    checks = verification_checks(sc)
    with open(out / "verify.txt", "w", encoding="utf-8") as fh:
        for name, ok, detail in checks:
            fh.write(f"{name} {'PASS' if ok else 'FAIL'} {detail}\n")
    passed = sum(ok for _, ok, _ in checks)
    return [("mode", "verify"), ("checks", len(checks)), ("passed", passed)], passed == len(checks)


RUNNERS = {"simulate": run_simulate, "price": run_price, "cva": run_cva, "hedge": run_hedge, "verify": run_verify}


def run(scenario):
    """Run a scenario; returns the exit status (0 ok, 3 failed checks)."""
    out = Path(scenario.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output.dir: cannot create {out} ({exc.strerror})") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output.dir: {out} is not writable")
    items, ok = RUNNERS[scenario.mode](scenario, out)
    items.append(("status", "ok" if ok else "failed"))
    write_summary(out / "summary.txt", items)
    return 0 if ok else 3


def bundled_scenario(name="cds_n1"):
    """Path of a scenario shipped with the package."""
    return BUNDLED / f"{name}.toml"


def build_parser():
    parser = argparse.ArgumentParser(prog="cvahedge", description="CVA pricing and hedging scenarios.")
    parser.add_argument("--scenario", help="TOML or JSON scenario file (default: bundled N=1 CDS scenario)")
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out", help="output directory")
    return parser


def _env(name, convert=str):
    value = os.environ.get(ENV_PREFIX + name)
    if value is None or value == "":
        return None
    try:
        return convert(value)
    except ValueError as exc:
        raise ConfigError(f"{ENV_PREFIX}{name}: {exc}") from exc


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        path = args.scenario or _env("SCENARIO") or bundled_scenario()
        sc = load_scenario(path)
        mode = args.mode or _env("MODE")
        if mode is not None and mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        seed = args.seed if args.seed is not None else _env("SEED", int)
        threads = args.threads if args.threads is not None else _env("THREADS", int)
        out = args.out or _env("OUT")
        sc = sc.replace(seed=seed, threads=threads, out_dir=out, mode=mode)
        return run(sc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, EstimatorError, DegenerateHedgeError, DomainError, FloatingPointError) as exc:
        detail = getattr(exc, "diagnostics", None)
        seed = locals().get("sc").sim.seed if "sc" in locals() else None
        print(f"numerical failure: {exc} (seed={seed}, details={detail})", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
