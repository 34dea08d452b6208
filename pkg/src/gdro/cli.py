"""Command-line harness: ``gdro generate|solve|verify|stream|plot``.

Exit codes: 0 success, 2 configuration or input error, 3 a requested
invariant or certificate check failed, 4 numerical failure.

Configs are JSON files; a bare name such as ``realizable-small`` resolves
to the bundled config of that name.  Every output except ``timing.json``
is a deterministic function of the config and seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from gdro import data as gdata
from gdro.activations import InvalidParameterError as ActivationError
from gdro.activations import parse_activation
from gdro.baselines import REWEIGHTERS, StreamConfig, simulate_seeds
from gdro.divergence import InvalidInputError
from gdro.oracles import (
    TheoryMonitor,
    compute_benchmarks,
    empirical_sharpness_check,
    moment_check,
    risk_vs_opt_certificate,
    sharpness_square_estimate,
)
from gdro.solver import NumericalError, SolverConfig, Trace, compute_iteration_budget, run

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_NUMERIC = 0, 2, 3, 4
CHECK_COLUMNS = {"gap_lb": "gap_lb_ok", "eq5": "eq5_ok", "linearization": "lin_ok", "containment": "contain_ok"}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- configs


def bundled_configs() -> list[str]:
    root = resources.files("gdro") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_config(ref: str) -> Path:
    path = Path(ref)
    if path.exists():
        return path
    candidate = resources.files("gdro") / "configs" / f"{ref}.json"
    if candidate.is_file():
        return Path(str(candidate))
    raise ConfigError(f"config {ref!r} not found (bundled: {', '.join(bundled_configs())})")


def load_config(ref: str) -> tuple[dict, Path]:
    path = resolve_config(ref)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg, path.parent


def _require(section: dict, where: str, names) -> None:
    for name in names:
        if name not in section:
            raise ConfigError(f"missing field {where}.{name}" if where else f"missing field {name}")


def _required_fields(cls) -> list[str]:
    return [
        f.name
        for f in dataclasses.fields(cls)
        if f.init and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
    ]


def _build(cls, section: dict, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    _require(section, where, _required_fields(cls))
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown field {where}.{unknown[0]}")
    try:
        return cls(**section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def planted_w_star(spec, d: int) -> np.ndarray:
    """``w_star`` from an explicit list or from ``{"norm": r, "seed": s}`` (a random direction)."""
    if isinstance(spec, list):
        w = np.asarray(spec, dtype=float)
        if w.shape != (d,):
            raise ConfigError(f"w_star must have length {d}")
        return w
    if isinstance(spec, dict):
        _require(spec, "w_star", ["norm"])
        u = np.random.default_rng(spec.get("seed", 0)).standard_normal(d)
        return float(spec["norm"]) * u / np.linalg.norm(u)
    raise ConfigError("w_star must be a list or an object with a norm")


def build_dataset(cfg: dict, base: Path, seed: int | None = None) -> gdata.GroupDataset:
    """Load the dataset named by ``cfg["dataset"]`` or generate it from ``cfg["generator"]``."""
    if "dataset" in cfg:
        path = (base / cfg["dataset"]) if not Path(cfg["dataset"]).is_absolute() else Path(cfg["dataset"])
        if not path.exists():
            raise ConfigError(f"dataset file {path} does not exist")
        try:
            return gdata.load(path)
        except gdata.DatasetError as exc:
            raise ConfigError(str(exc)) from exc
    _require(cfg, "", ["generator", "w_star", "n_per_group", "activation"])
    gen = dict(cfg["generator"])
    if seed is not None:
        gen["seed"] = seed
    gcfg = _build(gdata.GeneratorConfig, gen, "generator")
    act = activation_of(cfg)
    w_star = planted_w_star(cfg["w_star"], gcfg.d)
    trunc = cfg.get("truncate")
    if gcfg.noise == "adversarial" and gcfg.corruption_magnitude is None:
        raise ConfigError("missing field generator.corruption_magnitude")
    try:
        ds = gdata.generate(gcfg, w_star, act, int(cfg["n_per_group"]))
        if trunc:
            _require(trunc, "truncate", ["W", "B", "beta", "eps", "C_M"])
            ds = gdata.truncate_labels(ds, trunc["W"], trunc["B"], trunc["beta"], trunc["eps"], trunc["C_M"])
    except (gdata.InvalidParameterError, gdata.DatasetError) as exc:
        raise ConfigError(str(exc)) from exc
    return ds


def corruption_magnitude(cfg: dict) -> dict:
    """Fill ``"corruption_magnitude": "M"`` with the truncation level of the config."""
    gen = cfg.get("generator", {})
    if gen.get("corruption_magnitude") == "M":
        t = cfg.get("truncate") or cfg.get("solver")
        if not t:
            raise ConfigError("corruption_magnitude 'M' needs a truncate or solver section")
        gen = {**gen, "corruption_magnitude": gdata.label_bound(t["W"], t["B"], t["beta"], t["eps"], t["C_M"])}
        cfg = {**cfg, "generator": gen}
    return cfg


def activation_of(cfg: dict):
    try:
        return parse_activation(cfg.get("activation", "relu"))
    except ActivationError as exc:
        raise ConfigError(str(exc)) from exc


def solver_variants(cfg: dict) -> list[tuple[str, SolverConfig, int]]:
    _require(cfg, "", ["solver"])
    base = dict(cfg["solver"])
    variants = cfg.get("variants") or [{"label": "run"}]
    out = []
    for v in variants:
        v = dict(v)
        label = str(v.pop("label", "run"))
        n_iters = int(v.pop("n_iters", cfg.get("n_iters", base.get("max_iters", 10_000))))
        out.append((label, _build(SolverConfig, {**base, **v}, f"solver[{label}]"), n_iters))
    return out


# ---------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return repr(float(v))


def write_trace_csv(trace: Trace, K: int, path: Path) -> None:
    cols = ["t", "a_t", "A_t"] + [f"loss_{i + 1}" for i in range(K)] + [f"lambda_{i + 1}" for i in range(K)]
    cols += ["dist_sq_to_wstar", "gap_lb_ok", "eq5_ok"]
    diag = trace.diagnostics
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(trace)):
            row = [str(i + 1), repr(float(trace.a[i])), repr(float(trace.A[i]))]
            row += [repr(float(v)) for v in trace.losses[i]]
            row += [repr(float(v)) for v in trace.lambdas[i]]
            row.append("" if trace.dist_sq is None else repr(float(trace.dist_sq[i])))
            row.append(_fmt(diag["gap_lb_ok"][i]) if "gap_lb_ok" in diag else "")
            row.append(_fmt(diag["eq5_ok"][i]) if "eq5_ok" in diag else "")
            w.writerow(row)


def read_csv_columns(path: Path) -> dict[str, np.ndarray]:
    """Numeric columns of a trace CSV; empty cells become NaN."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise ConfigError(f"{path}: trace has no data rows")
    header = rows[0]
    try:
        body = np.array([[float(v) if v != "" else math.nan for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric cell ({exc})") from exc
    if body.ndim != 2 or body.shape[1] != len(header):
        raise ConfigError(f"{path}: rows do not match the header")
    return {name: body[:, j] for j, name in enumerate(header)}


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg, base = load_config(args.config)
    cfg = corruption_magnitude(cfg)
    ds = build_dataset(cfg, base, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gdata.save(ds, out / "dataset.csv")
    print(
        f"K={ds.K} d={ds.d} N={int(ds.counts.sum())} "
        f"corrupted_per_group={ds.metadata.get('n_corrupted_per_group', 0)} "
        f"truncation_M={ds.truncation_M}"
    )
    return EXIT_OK


def solve_variant(cfg_s: SolverConfig, n_iters: int, ds, activation, w_star, holdout=None):
    """Run one solver configuration with the theory monitor; returns (summary dict, trace)."""
    monitor = TheoryMonitor(cfg_s, ds, activation, w_star) if w_star is not None else None
    t0 = time.perf_counter()
    w_n, lam_n, trace = run(cfg_s, ds, activation, n_iters, w_star=w_star, monitor=monitor)
    elapsed = time.perf_counter() - t0
    budget = compute_iteration_budget(cfg_s)
    summary = {
        "config": cfg_s.to_dict(),
        "n_iters": n_iters,
        "iteration_budget": budget.to_dict(),
        "w_final": w_n,
        "lambda_final": lam_n,
        "final_losses": trace.losses[-1],
    }
    if w_star is not None:
        bench = monitor.bench
        dist = trace.dist_sq
        reached = np.flatnonzero(dist <= cfg_s.eps)
        cert = risk_vs_opt_certificate(w_n, ds, activation, cfg_s.penalty, cfg_s.nu, w_star, cfg_s, holdout)
        diag = trace.diagnostics
        checks = {name: int(np.sum(~diag[col])) for name, col in CHECK_COLUMNS.items()}
        checks["eq5_strict"] = int(np.sum(~diag["eq5_strict_ok"]))
        checks["gap_lb_printed_orientation"] = int(np.sum(~diag["gap_lb_printed_ok"]))
        summary.update(
            {
                "benchmarks": bench.to_dict(),
                "final_dist_sq": float(dist[-1]),
                "first_iter_dist_sq_le_eps": int(reached[0]) + 1 if reached.size else None,
                "within_budget": bool(
                    reached.size and (budget.n_schedule is None or reached[0] + 1 <= budget.n_schedule)
                ),
                "distance_sq_bound": cert.distance_bound**2,
                "distance_sq_ratio": cert.distance_sq_ratio,
                "risk_certificate": cert.to_dict(),
                "check_failures": checks,
                "max_norm_ratio": float(diag["norm_ratio"].max()),
                "min_linearization_slack": _finite_or_none(float(diag["lin_min_slack"].min())),
            }
        )
    return summary, trace, elapsed


def cmd_solve(args) -> int:
    cfg, base = load_config(args.config)
    cfg = corruption_magnitude(cfg)
    ds = build_dataset(cfg, base, args.seed)
    act = activation_of(cfg)
    variants = solver_variants(cfg)
    w_star = ds.w_star
    holdout = None
    factor = cfg.get("holdout_factor")
    if factor and "dataset" not in cfg:
        seed = cfg["generator"].get("seed", 0) if args.seed is None else args.seed
        hcfg = {**cfg, "n_per_group": int(cfg["n_per_group"]) * int(factor)}
        holdout = build_dataset(hcfg, base, seed + 1)

    enabled = set(cfg.get("checks", []))
    if args.check_eq5:
        enabled.add("eq5")
    if args.check_gap_lb:
        enabled.add("gap_lb")
    unknown = enabled - set(CHECK_COLUMNS)
    if unknown:
        raise ConfigError(f"unknown check {sorted(unknown)[0]!r}")
    if enabled and w_star is None:
        raise ConfigError("invariant checks need a known w_star in the dataset metadata")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from gdro.plotting import plot_solver_trace

    summary = {"experiment": cfg, "dataset": ds.metadata, "enabled_checks": sorted(enabled), "runs": {}}
    timing = {}
    failed = False
    for label, cfg_s, n_iters in variants:
        if cfg_s.K != ds.K:
            raise ConfigError(f"solver[{label}].K={cfg_s.K} but the dataset has {ds.K} groups")
        try:
            run_summary, trace, elapsed = solve_variant(cfg_s, n_iters, ds, act, w_star, holdout)
        except NumericalError as exc:
            print(f"numerical failure in run {label!r} at iteration {exc.iteration}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        timing[label] = elapsed
        for name in enabled:
            if run_summary["check_failures"][name]:
                failed = True
                print(f"[{label}] check {name} failed at {run_summary['check_failures'][name]} iterations")
        summary["runs"][label] = run_summary
        write_trace_csv(trace, ds.K, out / f"trace_{label}.csv")
        cols = {"t": trace.t.astype(float), "dist_sq_to_wstar": trace.dist_sq}
        cols.update({f"loss_{i + 1}": trace.losses[:, i] for i in range(ds.K)})
        cols.update({f"lambda_{i + 1}": trace.lambdas[:, i] for i in range(ds.K)})
        if trace.dist_sq is None:
            del cols["dist_sq_to_wstar"]
        plot_solver_trace(cols, out / f"trace_{label}.png", title=f"{cfg.get('name', '')} [{label}]")
        line = f"[{label}] iters={n_iters}"
        if w_star is not None:
            line += f" final_dist_sq={run_summary['final_dist_sq']:.3e} opt_hat={run_summary['benchmarks']['opt_hat']:.3e}"
        print(line)

    dump_json(summary, out / "summary.json")
    dump_json(timing, out / "timing.json")
    return EXIT_CHECK if failed else EXIT_OK


def verify_report(ds, cfg: dict) -> dict:
    """Margin, tail, moment and sharpness certificates for one dataset."""
    v = cfg.get("verify", {})
    gen = cfg.get("generator", {})
    n_dir = int(v.get("n_directions", 200))
    seed = int(v.get("seed", 0))
    B = float(v.get("B", gen.get("B", 1.0)))
    gamma = float(v.get("gamma", gen.get("gamma", 0.5)))
    zeta = float(v.get("zeta", gen.get("zeta", 0.3)))
    act = activation_of(cfg)
    eps = float(v.get("eps", cfg.get("solver", {}).get("eps", 1e-3)))

    margin = gdata.margin_certificate(ds, gamma, n_dir, seed)
    tail = gdata.tail_certificate(ds, n_dir, seed)
    moments = {f"tau{t}": moment_check(ds, t, 6 * B, n_dir, seed).to_dict() for t in (2, 4)}
    report = {
        "margin": margin.to_dict() | {"zeta": zeta, "passed": margin.zeta_hat >= zeta and not margin.empty_region},
        "tail": tail.to_dict() | {"B": B, "passed": tail.B_hat <= B},
        "moments": moments,
    }
    w_star = ds.w_star
    if w_star is None:
        report["sharpness"] = {"skipped": True, "reason": "no w_star in dataset metadata"}
    else:
        c0 = gdata.sharpness_c0(gamma, zeta, act.alpha, B)
        sharp = empirical_sharpness_check(ds, act, w_star, c0, int(v.get("n_probes", 200)), seed, eps)
        c1_est = sharpness_square_estimate(ds, act, w_star, int(v.get("n_probes", 200)), seed, eps)
        report["sharpness"] = sharp.to_dict() | {
            "c1_formula": gdata.sharpness_c1(c0, B),
            "c1_estimate": c1_est,
        }
        c1_cfg = cfg.get("solver", {}).get("c1")
        if c1_cfg is not None:
            report["sharpness"]["c1_config"] = c1_cfg
            report["sharpness"]["c1_config_supported"] = bool(c1_cfg <= c1_est)
    return report


def report_passed(report: dict) -> bool:
    ok = report["margin"]["passed"] and report["tail"]["passed"]
    ok = ok and all(m["passed"] for m in report["moments"].values())
    s = report["sharpness"]
    if not s.get("skipped"):
        ok = ok and s["passed"]
    return bool(ok)


def cmd_verify(args) -> int:
    cfg, base = load_config(args.config)
    cfg = corruption_magnitude(cfg)
    ds = build_dataset(cfg, base, args.seed)
    report = verify_report(ds, cfg)
    report["passed"] = report_passed(report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(report, out / "verify.json")
    print(f"certificates {'passed' if report['passed'] else 'FAILED'}; report in {out / 'verify.json'}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


def median_curves(traces) -> dict[str, np.ndarray]:
    return {
        "step": traces[0].step,
        "worst_domain_loss": np.median([t.worst_domain_loss for t in traces], axis=0),
        "mean_loss": np.median([t.mean_loss for t in traces], axis=0),
        "weights": np.median([t.weights for t in traces], axis=0),
    }


def write_curve_csv(curve: dict, path: Path) -> None:
    K = curve["weights"].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "worst_domain_loss", "mean_loss"] + [f"w_{i + 1}" for i in range(K)])
        for i, s in enumerate(curve["step"]):
            row = [int(s), repr(float(curve["worst_domain_loss"][i])), repr(float(curve["mean_loss"][i]))]
            w.writerow(row + [repr(float(v)) for v in curve["weights"][i]])


def run_stream_experiment(cfg: dict, seed: int | None = None, strict: bool = False):
    _require(cfg, "", ["stream"])
    scfg = _build(StreamConfig, cfg["stream"], "stream")
    methods = cfg.get("reweighters", list(REWEIGHTERS))
    for m in methods:
        if m not in REWEIGHTERS:
            raise ConfigError(f"unknown reweighter {m!r}")
    repeat = int(cfg.get("repeat", 1))
    if repeat < 1:
        raise ConfigError("repeat must be at least 1")
    first = int(cfg.get("seed", 0) if seed is None else seed)
    seeds = range(first, first + repeat)
    return scfg, {m: simulate_seeds(scfg, m, seeds, strict) for m in methods}


def cmd_stream(args) -> int:
    cfg, _ = load_config(args.config)
    scfg, traces = run_stream_experiment(cfg, args.seed, args.strict_listing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from gdro.plotting import plot_stream_comparison

    curves = {}
    finals = {}
    for m, trs in traces.items():
        curves[m] = median_curves(trs)
        write_curve_csv(curves[m], out / f"stream_{m}.csv")
        finals[m] = {
            "median_final_worst_domain_loss": float(np.median([t.worst_domain_loss[-1] for t in trs])),
            "final_worst_domain_loss_per_seed": [float(t.worst_domain_loss[-1]) for t in trs],
        }
    plot_stream_comparison(curves, out / "stream_comparison.png", title=cfg.get("name", ""))
    dump_json({"experiment": cfg, "stream_config": scfg.to_dict(), "strict_listing": args.strict_listing, "methods": finals}, out / "stream_summary.json")
    for m, f in finals.items():
        print(f"{m}: median final worst-domain loss {f['median_final_worst_domain_loss']:.4e}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from gdro.plotting import plot_solver_trace, plot_stream_comparison

    paths = [Path(p) for p in (args.trace or [])]
    if not paths:
        raise ConfigError("plot needs at least one --trace file")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    streams = {}
    for p in paths:
        cols = read_csv_columns(p)
        if "a_t" in cols:
            plot_solver_trace(cols, out / f"{p.stem}.png", title=p.stem)
        elif "worst_domain_loss" in cols:
            streams[p.stem] = cols
        else:
            raise ConfigError(f"{p}: not a solver or stream trace")
    if streams:
        plot_stream_comparison(streams, out / "stream_overlay.png")
    print(f"wrote figures to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdro", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [
        ("generate", cmd_generate),
        ("solve", cmd_solve),
        ("verify", cmd_verify),
        ("stream", cmd_stream),
        ("plot", cmd_plot),
    ]:
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
        p.add_argument("--config", required=name != "plot", help="config path or bundled config name")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--check-eq5", action="store_true", help="fail (exit 3) if the potential inequality breaks")
        p.add_argument("--check-gap-lb", action="store_true", help="fail (exit 3) if the gap lower bound breaks")
        p.add_argument("--strict-listing", action="store_true", help="pd-kl update without clamping")
        if name == "plot":
            p.add_argument("--trace", action="append", help="trace CSV (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, gdata.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
