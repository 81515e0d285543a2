"""Command line front end.

Subcommands:

* ``solve``         read prices and a config, write strategy.csv,
                    horizons.json, certificate.json and plot.svg to --out
* ``verify``        re-check a written strategy.csv against the instance
* ``oracle``        solve and compare against the grid DP at --delta
* ``horizon-test``  perturb prices beyond the first forecast horizon and
                    confirm the committed prefix is unchanged
* ``gen-prices``    synthesize a deterministic hourly price series

All randomness flows through ``numpy.random.default_rng(seed)``, and every
float is serialized with an explicit format, so identical inputs produce
byte-identical outputs. ``DUOSTORE_THREADS`` caps certification parallelism.

The prices file holds one price per line; blank lines and ``#`` comments are
skipped. The config is JSON with keys ``units`` (two ``{"E":..,"P":..}``
objects), ``lambda``, ``initial_levels``, ``final_levels`` and optional
``tolerances`` (any of eps_mu/eps_x/eps_S/eps_cost) and ``oracle_budget``.

strategy.csv carries one row per time step with columns
``t,x1,x2,S1,S2,mu1,mu2,kappa2`` at nine significant digits. The levels are
re-quantized partial sums of the printed increments, so the telescoping
identity holds exactly on the printed values, not just before rounding.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .core import (
    CostModel,
    InfeasibleProblemError,
    InvalidInstanceError,
    OracleBudgetError,
    OracleGapError,
    ProblemInstance,
    StorageUnit,
    Strategy,
    ToleranceSet,
    default_tolerances,
    total_cost,
    validate_instance,
)
from .duo import MultiplierPath, SolveResult, solve_two
from .verify import certify, compare, oracle_dp

__all__ = [
    "main",
    "parse_prices",
    "write_prices",
    "load_config",
    "build_instance",
    "emit_strategy",
    "parse_strategy",
    "emit_horizons",
    "emit_certificate",
    "emit_plot",
    "gen_prices",
]


def _fl9(v: float) -> float:
    """Round to nine significant digits, the file precision."""
    return float(f"{v:.9g}")


def _threads() -> int:
    raw = os.environ.get("DUOSTORE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# input files
# ---------------------------------------------------------------------------


def parse_prices(path: str) -> np.ndarray:
    vals = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            try:
                vals.append(float(body))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a number: {body!r}") from None
    if not vals:
        raise ValueError(f"{path}: no prices found")
    return np.array(vals)


def write_prices(path: str, prices: np.ndarray) -> None:
    with open(path, "w") as fh:
        for p in prices:
            fh.write(f"{float(p)!r}\n")


def load_config(path: str) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    for key in ("units", "lambda", "initial_levels", "final_levels"):
        if key not in cfg:
            raise ValueError(f"config missing key {key!r}")
    if len(cfg["units"]) != 2:
        raise ValueError("config must list exactly two units")
    return cfg


def build_instance(cfg: dict, prices: np.ndarray) -> ProblemInstance:
    units = [StorageUnit(capacity_E=float(u["E"]), rate_P=float(u["P"])) for u in cfg["units"]]
    costs = CostModel.quadratic(prices, float(cfg["lambda"]))
    inst = ProblemInstance(
        unit1=units[0],
        unit2=units[1],
        costs=costs,
        initial_levels=tuple(float(v) for v in cfg["initial_levels"]),
        final_levels=tuple(float(v) for v in cfg["final_levels"]),
    )
    overrides = cfg.get("tolerances")
    if overrides:
        base = default_tolerances(inst)
        tol = ToleranceSet(
            eps_mu=float(overrides.get("eps_mu", base.eps_mu)),
            eps_x=float(overrides.get("eps_x", base.eps_x)),
            eps_S=float(overrides.get("eps_S", base.eps_S)),
            eps_cost=float(overrides.get("eps_cost", base.eps_cost)),
        )
        inst = ProblemInstance(
            unit1=inst.unit1,
            unit2=inst.unit2,
            costs=inst.costs,
            initial_levels=inst.initial_levels,
            final_levels=inst.final_levels,
            tolerances=tol,
        )
    return inst


# ---------------------------------------------------------------------------
# strategy.csv
# ---------------------------------------------------------------------------

_CSV_HEADER = "t,x1,x2,S1,S2,mu1,mu2,kappa2"


def emit_strategy(path: str, result: SolveResult, instance: ProblemInstance) -> None:
    strat = result.strategy
    mp = result.multipliers
    T = instance.T
    s1 = _fl9(instance.initial_levels[0])
    s2 = _fl9(instance.initial_levels[1])
    lines = [_CSV_HEADER]
    for i in range(T):
        x1 = _fl9(float(strat.increments1[i]))
        x2 = _fl9(float(strat.increments2[i]))
        s1 = _fl9(s1 + x1)
        s2 = _fl9(s2 + x2)
        row = (
            f"{i + 1},{x1:.9g},{x2:.9g},{s1:.9g},{s2:.9g},"
            f"{float(mp.mu1[i]):.9g},{float(mp.mu2[i]):.9g},{float(mp.kappa2[i]):.9g}"
        )
        lines.append(row)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_strategy(path: str, instance: ProblemInstance) -> tuple[Strategy, MultiplierPath]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _CSV_HEADER:
        raise ValueError(f"{path}: expected header {_CSV_HEADER!r}")
    rows = lines[1:]
    T = instance.T
    if len(rows) != T:
        raise ValueError(f"{path}: expected {T} rows, found {len(rows)}")
    levels1 = [_fl9(instance.initial_levels[0])]
    levels2 = [_fl9(instance.initial_levels[1])]
    mu1, mu2, kappa2 = [], [], []
    for i, row in enumerate(rows):
        parts = row.split(",")
        if len(parts) != 8:
            raise ValueError(f"{path}: row {i + 1}: expected 8 fields, found {len(parts)}")
        t, x1, x2, s1, s2, m1, m2, k2 = (float(v) for v in parts)
        if int(t) != i + 1:
            raise ValueError(f"{path}: row {i + 1}: time column out of order")
        if s1 != _fl9(levels1[-1] + x1) or s2 != _fl9(levels2[-1] + x2):
            raise ValueError(f"{path}: row {i + 1}: levels do not telescope from increments")
        levels1.append(s1)
        levels2.append(s2)
        mu1.append(m1)
        mu2.append(m2)
        kappa2.append(k2)
    strat = Strategy(levels1=np.array(levels1), levels2=np.array(levels2))
    mp = MultiplierPath(mu1=np.array(mu1), mu2=np.array(mu2), kappa2=np.array(kappa2))
    return strat, mp


# ---------------------------------------------------------------------------
# horizons.json / certificate.json / plot.svg
# ---------------------------------------------------------------------------


def _stage_dict(stage, inner_stages=(), state_match=None) -> dict:
    theta = stage.theta_star
    out = {
        "start": stage.start_time,
        "decision": stage.decision_tau,
        "forecast": stage.forecast_tau,
        "boundary": stage.boundary.value,
        "mu1_star": float(theta[0]) if isinstance(theta, tuple) else float(theta),
    }
    if state_match is not None:
        out["state_match"] = bool(state_match)
    inner = []
    for st in inner_stages:
        th = st.theta_star
        inner.append(
            {
                "start": st.start_time,
                "decision": st.decision_tau,
                "forecast": st.forecast_tau,
                "boundary": st.boundary.value,
                "mu2_star": float(th[0]),
                "kappa2_star": float(th[1]),
            }
        )
    out["inner_stages"] = inner
    return out


def emit_horizons(path: str, result: SolveResult) -> None:
    hz = result.horizons
    payload = {
        "outer_unit": hz.outer_unit,
        "stages": [
            _stage_dict(os_.stage, os_.inner_stages, os_.state_match) for os_ in hz.stages
        ],
        "notes": list(result.notes),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_certificate(path: str, result: SolveResult, instance: ProblemInstance) -> None:
    payload = result.certificate.as_dict()
    tol = instance.tol()
    payload["tolerances"] = {
        "eps_mu": tol.eps_mu,
        "eps_x": tol.eps_x,
        "eps_S": tol.eps_S,
        "eps_cost": tol.eps_cost,
    }
    payload["cost"] = total_cost(result.strategy, instance)
    payload["diagnostics"] = [type(d).__name__ for d in result.diagnostics]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _polyline(xs, ys, x0, y0, w, h, xmin, xmax, ymin, ymax) -> str:
    if ymax - ymin < 1e-12:
        ymax = ymin + 1.0
    sx = w / max(xmax - xmin, 1e-12)
    sy = h / (ymax - ymin)
    pts = " ".join(
        f"{x0 + (x - xmin) * sx:.2f},{y0 + h - (y - ymin) * sy:.2f}" for x, y in zip(xs, ys)
    )
    return f'<polyline fill="none" stroke="#1f6fb2" stroke-width="1.5" points="{pts}"/>'


def _panel(title: str, xs, ys, x0, y0, w, h, extra_lines=()) -> list[str]:
    xmin, xmax = float(min(xs)), float(max(xs))
    ymin = min(float(min(ys)), *(v for v in extra_lines)) if extra_lines else float(min(ys))
    ymax = max(float(max(ys)), *(v for v in extra_lines)) if extra_lines else float(max(ys))
    pad = 0.05 * max(ymax - ymin, 1e-12)
    ymin, ymax = ymin - pad, ymax + pad
    parts = [
        f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="#fafafa" stroke="#999"/>',
        f'<text x="{x0 + 4}" y="{y0 + 14}" font-size="12" font-family="sans-serif">{title}</text>',
    ]
    for level in extra_lines:
        yy = y0 + h - (level - ymin) * h / (ymax - ymin)
        parts.append(
            f'<line x1="{x0}" y1="{yy:.2f}" x2="{x0 + w}" y2="{yy:.2f}" '
            f'stroke="#bbb" stroke-dasharray="4 3"/>'
        )
    parts.append(_polyline(xs, ys, x0, y0, w, h, xmin, xmax, ymin, ymax))
    parts.append(
        f'<text x="{x0 + 4}" y="{y0 + h - 4}" font-size="10" fill="#555" '
        f'font-family="sans-serif">min {ymin + pad:.6g}  max {ymax - pad:.6g}</text>'
    )
    return parts


def emit_plot(path: str, result: SolveResult, instance: ProblemInstance) -> None:
    """Four stacked panels: prices, both level paths, forecast horizon."""
    T = instance.T
    strat = result.strategy
    width, ph, gap, margin = 900, 150, 18, 12
    x0, pw = margin, width - 2 * margin
    height = 4 * ph + 3 * gap + 2 * margin
    t_prices = list(range(1, T + 1))
    t_levels = list(range(0, T + 1))
    if instance.costs.kind == "quadratic":
        prices = [float(p) for p in instance.costs.prices]
    else:
        prices = [instance.costs.slope_plus(t, 0.0) for t in t_prices]
    forecast = [result.horizons.forecast_of(t) for t in t_prices]
    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    y = margin
    body += _panel("prices", t_prices, prices, x0, y, pw, ph)
    y += ph + gap
    body += _panel(
        "unit 1 level", t_levels, [float(v) for v in strat.levels1], x0, y, pw, ph,
        extra_lines=(0.0, instance.unit1.capacity_E),
    )
    y += ph + gap
    body += _panel(
        "unit 2 level", t_levels, [float(v) for v in strat.levels2], x0, y, pw, ph,
        extra_lines=(0.0, instance.unit2.capacity_E),
    )
    y += ph + gap
    body += _panel("forecast horizon", t_prices, [float(v) for v in forecast], x0, y, pw, ph)
    body.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(body) + "\n")


# ---------------------------------------------------------------------------
# synthetic prices
# ---------------------------------------------------------------------------


def gen_prices(
    T: int,
    base: float = 40.0,
    amplitude: float = 10.0,
    weekend_dip: float = -8.0,
    noise_sd: float = 2.0,
    seed: int = 0,
) -> np.ndarray:
    """Hourly series: daily sine peaking mid-afternoon, weekend dip, noise.

    Hour t is 1-based; day (t-1)//24; days 5 and 6 of each week are the
    weekend. Clamped below at 1 so prices stay strictly positive.
    """
    t = np.arange(1, T + 1, dtype=np.float64)
    day = ((t - 1) // 24).astype(np.int64)
    weekend = (day % 7 >= 5).astype(np.float64)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_sd, T) if noise_sd > 0 else np.zeros(T)
    p = base + amplitude * np.sin(2.0 * np.pi * (t - 8.0) / 24.0) + weekend_dip * weekend + noise
    return np.maximum(p, 1.0)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load(args) -> ProblemInstance:
    prices = parse_prices(args.prices)
    cfg = load_config(args.config)
    inst = build_instance(cfg, prices)
    report = validate_instance(inst)
    if not report.ok:
        raise InvalidInstanceError("; ".join(report.violations))
    return inst


def cmd_solve(args) -> int:
    inst = _load(args)
    os.makedirs(args.out, exist_ok=True)
    result = solve_two(inst)
    emit_strategy(os.path.join(args.out, "strategy.csv"), result, inst)
    emit_horizons(os.path.join(args.out, "horizons.json"), result)
    emit_certificate(os.path.join(args.out, "certificate.json"), result, inst)
    emit_plot(os.path.join(args.out, "plot.svg"), result, inst)
    cost = total_cost(result.strategy, inst)
    print(f"cost {cost:.9g}")
    print(f"stages {len(result.horizons.stages)}")
    print(f"certificate {'PASS' if result.certificate.overall else 'FAIL'}")
    if not result.certificate.overall:
        print("warning: certificate failed; see certificate.json", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    inst = _load(args)
    strat, mp = parse_strategy(os.path.join(args.out, "strategy.csv"), inst)
    # The file carries nine significant digits, so multiplier steps can be
    # off by about 1e-9 of their magnitude; widen the equality band to suit.
    scale = max(1.0, float(np.max(np.abs(mp.mu1))), float(np.max(np.abs(mp.mu2))))
    cert = certify(strat, mp, inst, threads=_threads(), mu_slack=1e-8 * scale)
    for line in (
        f"feasible {cert.feasible} (max violation {cert.max_feasibility_violation:.3g})",
        f"minimization {cert.minimization_ok} (gap {cert.worst_objective_gap:.3g}, "
        f"kkt {cert.max_kkt_residual:.3g})",
        f"slackness {cert.slackness_ok} ({len(cert.slackness_violations)} violations)",
        f"certificate {'PASS' if cert.overall else 'FAIL'}",
    ):
        print(line)
    return 0 if cert.overall else 1


def cmd_oracle(args) -> int:
    inst = _load(args)
    if args.delta is None:
        raise ValueError("oracle requires --delta")
    cfg = load_config(args.config)
    budget = cfg.get("oracle_budget")
    result = solve_two(inst)
    oracle = oracle_dp(inst, args.delta, budget=int(budget) if budget else None)
    bundle_dir = os.path.join(args.out, "counterexamples") if args.out else None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    report = compare(result, oracle, inst, bundle_dir=bundle_dir)
    print(f"cost_alg {report.cost_alg:.9g}")
    print(f"cost_dp  {report.cost_dp:.9g}")
    print(f"gap {report.gap:.3g} (band {report.lip_bound:.3g})")
    print(f"oracle {'PASS' if report.ok else 'FAIL'}")
    return 0 if report.ok else 1


def cmd_horizon_test(args) -> int:
    inst = _load(args)
    if not (0.0 <= args.perturb < 1.0):
        raise ValueError("--perturb must lie in [0, 1)")
    base = solve_two(inst)
    first = base.horizons.stages[0].stage
    tau = first.decision_tau
    bar = base.horizons.forecast_of(1)
    prices = np.array(inst.costs.prices)
    rng = np.random.default_rng(args.seed)
    shocks = rng.uniform(-1.0, 1.0, inst.T)
    prices2 = prices.copy()
    if bar < inst.T:
        prices2[bar:] = prices[bar:] * (1.0 + args.perturb * shocks[bar:])
    inst2 = ProblemInstance(
        unit1=inst.unit1,
        unit2=inst.unit2,
        costs=CostModel.quadratic(prices2, inst.costs.impact_lambda),
        initial_levels=inst.initial_levels,
        final_levels=inst.final_levels,
        tolerances=inst.tolerances,
    )
    other = solve_two(inst2)
    eps = inst.tol().eps_S
    d1 = float(np.max(np.abs(base.strategy.levels1[: tau + 1] - other.strategy.levels1[: tau + 1])))
    d2 = float(np.max(np.abs(base.strategy.levels2[: tau + 1] - other.strategy.levels2[: tau + 1])))
    ok = d1 <= eps and d2 <= eps
    print(f"decision horizon {tau}, forecast horizon {bar}")
    print(f"prefix drift unit1 {d1:.3g}, unit2 {d2:.3g} (eps_S {eps:.3g})")
    print(f"horizon-test {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_gen_prices(args) -> int:
    prices = gen_prices(
        args.T,
        base=args.base,
        amplitude=args.amplitude,
        weekend_dip=args.weekend_dip,
        noise_sd=args.noise_sd,
        seed=args.seed,
    )
    path = args.prices
    if path is None:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "prices.txt")
    write_prices(path, prices)
    print(f"wrote {prices.size} prices to {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duostore",
        description="cooperative two-unit storage arbitrage under price impact",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, prices_required=True, config_required=True):
        p.add_argument("--prices", required=prices_required, help="price file, one value per line")
        p.add_argument("--config", required=config_required, help="instance config JSON")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--delta", type=float, default=None, help="oracle grid spacing (energy)")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--perturb", type=float, default=0.2, help="price perturbation fraction")

    p_solve = sub.add_parser("solve", help="solve and write all artifacts")
    common(p_solve)
    p_solve.set_defaults(fn=cmd_solve)

    p_verify = sub.add_parser("verify", help="re-certify strategy.csv in --out")
    common(p_verify)
    p_verify.set_defaults(fn=cmd_verify)

    p_oracle = sub.add_parser("oracle", help="compare against the grid DP")
    common(p_oracle)
    p_oracle.set_defaults(fn=cmd_oracle)

    p_hz = sub.add_parser("horizon-test", help="check committed-prefix invariance")
    common(p_hz)
    p_hz.set_defaults(fn=cmd_horizon_test)

    p_gen = sub.add_parser("gen-prices", help="write a synthetic price series")
    common(p_gen, prices_required=False, config_required=False)
    p_gen.add_argument("--T", type=int, default=744, help="number of hours")
    p_gen.add_argument("--base", type=float, default=40.0)
    p_gen.add_argument("--amplitude", type=float, default=10.0)
    p_gen.add_argument("--weekend-dip", type=float, default=-8.0, dest="weekend_dip")
    p_gen.add_argument("--noise-sd", type=float, default=2.0, dest="noise_sd")
    p_gen.set_defaults(fn=cmd_gen_prices)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidInstanceError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InfeasibleProblemError, OracleBudgetError, OracleGapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
