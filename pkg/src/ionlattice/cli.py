"""Command-line interface: ``ionlattice {simulate,fit,reproduce,validate}``.

User-facing units are microseconds and kHz (frequency / 2 pi). Outputs go
to ``--out``, else ``$IONLATTICE_OUT``, else ``./ionlattice-out``.

Exit codes: 0 success, 2 configuration or input error, 3 blocking
validation findings, 4 estimation failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config, template_config
from .estimation import (
    EstimationError,
    SchemaError,
    TimeSeries,
    fit_exchange,
    fit_multisine,
    read_series_csv,
    total_excitation_residuals,
    write_series_csv,
)
from .protocol import CompileError, Cool, sweep, validate

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_ESTIMATION = 0, 2, 3, 4
OUT_ENV = "IONLATTICE_OUT"
MIN_FIT_POINTS = 8

FIGURES = {"fig2": "fig2", "fig3": "fig3", "fig4b": "fig4_single", "fig4c": "fig4_double"}


def _versions():
    return {"ionlattice": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _out_dir(arg, cfg: RunConfig | None = None) -> Path:
    path = arg or (cfg.out if cfg is not None else None) or os.environ.get(OUT_ENV) or "ionlattice-out"
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


# -- execution shared by simulate and reproduce -------------------------------

@dataclass
class PointResult:
    index: int
    sweep_value: float | None
    scan_values: list
    records: list  # per scan value: list of DetectionRecord
    series: list = field(default_factory=list)
    fit: object = None
    fit_note: str = ""
    residuals: TimeSeries | None = None


def _series(cfg: RunConfig, scan_values, records) -> list[TimeSeries]:
    label = cfg.final_label
    by_site: dict[int, list] = {}
    times: dict[int, list] = {}
    for v, recs in zip(scan_values, records):
        for r in recs:
            if r.label != label:
                continue
            by_site.setdefault(r.site, []).append((r.nbar, r.sem))
            times.setdefault(r.site, []).append(r.time if v is None else v * 1e-6)
    out = []
    for site in sorted(by_site):
        arr = np.array(by_site[site])
        out.append(TimeSeries(site, np.array(times[site]), arr[:, 0], arr[:, 1]))
    return out


def _baseline(seq, sites) -> float:
    cool = next((s for s in seq.segments if isinstance(s, Cool)), None)
    if cool is None:
        return 0.0
    target = np.broadcast_to(np.asarray(cool.target, float), (len(seq.lattice),))
    return float(sum(target[seq.lattice.index(s)] for s in sites))


def _fit(cfg: RunConfig, series, seq, multisine: int | None):
    model = "multisine" if multisine else cfg.fit_model
    if model == "none" or not series:
        return None, ""
    if len(series[0].times) < MIN_FIT_POINTS:
        return None, f"skipped: fewer than {MIN_FIT_POINTS} scan points"
    by_site = {s.site: s for s in series}
    sites = cfg.fit_sites or tuple(sorted(by_site))
    missing = [s for s in sites if s not in by_site]
    if missing:
        raise ConfigError(f"fit.sites: no detection records for site(s) {missing}")
    if model == "exchange":
        if len(sites) < 2:
            raise ConfigError("fit.sites: the exchange model needs two sites")
        pair = (by_site[sites[0]], by_site[sites[1]])
        return fit_exchange(pair, baseline=_baseline(seq, sites[:2])), ""
    k = multisine or cfg.fit.components or len(sites)
    chosen = [by_site[s] for s in sites[:k]]
    return fit_multisine(chosen, shared_decay=cfg.fit.shared_decay), ""


def execute(cfg: RunConfig, jobs: int = 1, multisine: int | None = None) -> list[PointResult]:
    """Run every sweep point; raise CompileError on blocking findings."""
    scan_values = list(cfg.scan.values) if cfg.scan is not None else [None]
    sweep_values = list(cfg.sweep.values) if cfg.sweep is not None else [None]
    points = []
    for si, sv in enumerate(sweep_values):
        first = cfg.build(scan_values[0], sv)
        blocking = [v for v in validate(first, **cfg.validate_options) if v.blocking]
        if blocking:
            raise CompileError(blocking)
        records = sweep(lambda v, sv=sv: cfg.build(v, sv), scan_values, engine=cfg.engine,
                        repetitions=cfg.repetitions, seed=(cfg.seed, si), jobs=jobs,
                        **cfg.validate_options)
        pr = PointResult(si, None if sv is None else float(sv), scan_values, records)
        pr.series = _series(cfg, scan_values, records)
        pr.fit, pr.fit_note = _fit(cfg, pr.series, first, multisine)
        if len(pr.series) > 1:
            pr.residuals = total_excitation_residuals(pr.series)
        points.append(pr)
    return points


def _write_outputs(cfg: RunConfig, points, out: Path, command: str) -> dict:
    files = []
    flat = []
    fits = []
    for p in points:
        name = "series.csv" if len(points) == 1 else f"series_{p.index:03d}.csv"
        write_series_csv(out / name, p.series)
        files.append(name)
        for scan_index, (v, recs) in enumerate(zip(p.scan_values, p.records)):
            for r in recs:
                d = r.to_dict()
                d.update(sweep_index=p.index, sweep_value=p.sweep_value, scan_index=scan_index,
                         scan_value=None if v is None else float(v))
                flat.append(d)
        fit_doc = None if p.fit is None else p.fit.to_dict()
        fits.append({"sweep_index": p.index, "sweep_value": p.sweep_value, "fit": fit_doc,
                     "note": p.fit_note,
                     "residual_mean": None if p.residuals is None else float(p.residuals.nbar.mean())})
    report = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "engine": cfg.engine,
        "repetitions": cfg.repetitions,
        "template": None if cfg.template is None else cfg.template.name,
        "scan": None if cfg.scan is None else cfg.scan.to_dict(),
        "sweep": None if cfg.sweep is None else cfg.sweep.to_dict(),
        "series_files": files,
        "records": flat,
        "fits": fits,
        "config": cfg.canonical(),
        "versions": _versions(),
    }
    _dump_json(out / "report.json", report)
    return report


def _apply_overrides(cfg: RunConfig, args):
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "engine", None) is not None:
        cfg.engine = args.engine
    if getattr(args, "reps", None) is not None:
        if args.reps < 1:
            raise ConfigError("--reps: must be at least 1")
        cfg.repetitions = args.reps
    return cfg


def _print_fits(points, stream):
    for p in points:
        head = "" if p.sweep_value is None else f"[sweep {p.index}: {p.sweep_value:g}] "
        if p.fit is None:
            print(f"{head}no fit {('(' + p.fit_note + ')') if p.fit_note else ''}".rstrip(), file=stream)
            continue
        print(head + _describe_fit(p.fit), file=stream)


def _fmt(v, e=None, digits=3):
    if v is None or not math.isfinite(v):
        return "n/a"
    if e is None or not math.isfinite(e):
        return f"{v:.{digits}f}"
    return f"{v:.{digits}f} +- {e:.{digits}f}"


def _describe_fit(fit) -> str:
    d = fit.to_dict()
    if d["model"] == "exchange":
        return (f"rate {_fmt(d['rate_khz'], d['rate_khz_err'])} kHz, efficiency "
                f"{_fmt(d['efficiency'], d['efficiency_err'])}, tau {_fmt(d['tau_us'], d['tau_us_err'], 1)} us, "
                f"reduced chi2 {_fmt(d['reduced_chi2'], digits=2)}")
    parts = []
    for c in d["components"]:
        if not c["identifiable"]:
            parts.append(f"site {c['site']}: flat")
        else:
            parts.append(f"site {c['site']}: {_fmt(c['frequency_khz'], c['frequency_khz_err'])} kHz, "
                         f"p-p {_fmt(c['amplitude_pp'], c['amplitude_pp_err'], 0)}")
    return "; ".join(parts)


# -- commands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    points = execute(cfg, jobs=args.jobs, multisine=args.multisine)
    out = _out_dir(args.out, cfg)
    _write_outputs(cfg, points, out, "simulate")
    _print_fits(points, sys.stdout)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    series = read_series_csv(args.data)
    sites = sorted(series) if args.sites is None else [int(s) for s in args.sites.split(",")]
    missing = [s for s in sites if s not in series]
    if missing:
        raise SchemaError(f"{args.data}: no rows for site(s) {missing}")
    out = _out_dir(args.out)
    chosen = [series[s] for s in sites]
    t = chosen[0].times
    grid = np.linspace(t[0], t[-1], 401)
    if args.multisine:
        if len(chosen) < args.multisine:
            raise SchemaError(f"{args.data}: --multisine {args.multisine} needs that many sites, "
                              f"found {len(chosen)}")
        chosen = chosen[:args.multisine]
        fit = fit_multisine(chosen, shared_decay=not args.independent_decay)
        curves = [TimeSeries(s.site, grid, fit.curve(k, grid), np.zeros_like(grid))
                  for k, s in enumerate(chosen)]
    else:
        if len(chosen) < 2:
            raise SchemaError(f"{args.data}: the exchange model needs two sites")
        fit = fit_exchange((chosen[0], chosen[1]), args.n_tot, baseline=args.baseline)
        n0, n1 = fit.curves(grid)
        curves = [TimeSeries(chosen[0].site, grid, n0, np.zeros_like(grid)),
                  TimeSeries(chosen[1].site, grid, n1, np.zeros_like(grid))]
    doc = {"data": str(args.data), "fit": fit.to_dict(), "versions": _versions()}
    if len(chosen) > 1:
        try:
            res = total_excitation_residuals(chosen)
            doc["residuals"] = {"mean": float(res.nbar.mean()), "rms": float(np.sqrt(np.mean(res.nbar**2)))}
        except ValueError:
            pass
    _dump_json(out / "fit.json", doc)
    write_series_csv(out / "fit_curve.csv", curves)
    print(_describe_fit(fit))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    if args.enforce_grid:
        cfg.validate_options = {**cfg.validate_options, "enforce_grid": True}
    scan = [None] if cfg.scan is None else sorted({cfg.scan.values[0], cfg.scan.values[-1]})
    sweep_vals = [None] if cfg.sweep is None else list(cfg.sweep.values)
    findings = []
    for sv in sweep_vals:
        for v in scan:
            for f in validate(cfg.build(v, sv), **cfg.validate_options):
                if f not in findings:
                    findings.append(f)
    for f in findings:
        print(f)
    blocking = any(f.blocking for f in findings)
    if not findings:
        print("clean: no findings")
    return EXIT_VALIDATION if blocking else EXIT_OK


def _reference_table(figure, cfg, points) -> list[tuple[str, str, str]]:
    p = points[0]
    ref = cfg.template.reference
    rows = []
    fit = p.fit
    if fit is None:
        return rows
    d = fit.to_dict()
    if d["model"] == "exchange":
        rows.append(("rate (kHz)", f"{ref['rate_khz']:.2f}", _fmt(d["rate_khz"], d["rate_khz_err"])))
        rows.append(("efficiency", f"{ref['efficiency']:.2f}", _fmt(d["efficiency"], d["efficiency_err"])))
        rows.append(("dephasing tau (us)", f"{ref['tau_us']:.0f}", _fmt(d["tau_us"], d["tau_us_err"], 0)))
    if figure == "fig3":
        stage = [r.nbar for recs in p.records for r in recs if r.label == "stage1" and r.site == 0]
        mean = float(np.mean(stage))
        sem = float(np.std(stage, ddof=1) / math.sqrt(len(stage))) if len(stage) > 1 else math.nan
        rows.insert(0, ("stage-1 n0 (quanta)", f"{ref['stage1_nbar']:.0f}", _fmt(mean, sem, 0)))
    if d["model"] == "multisine":
        comps = [c for c in d["components"] if c["identifiable"]]
        tau = d["tau_us"][0] if d["tau_us"] else None
        for c in d["components"]:
            label = f"T{c['site']} frequency (kHz)"
            if c["identifiable"]:
                rows.append((label, f"{ref['frequency_khz']:.2f}", _fmt(c["frequency_khz"], c["frequency_khz_err"])))
            else:
                rows.append((label, f"{ref['frequency_khz']:.2f}", "flat"))
        if figure == "fig4b":
            t2 = next((c for c in comps if c["site"] == 2), None)
            if t2 is not None:
                rows.append(("transferred (quanta)", f"{ref['transferred']:.0f}",
                             _fmt(t2["amplitude_pp"], t2["amplitude_pp_err"], 0)))
            rows.append(("dephasing tau (us)", f"{ref['tau_us']:.0f}", _fmt(tau, None, 0)))
        if p.residuals is not None:
            r = p.residuals
            rows.append(("mean residual (quanta)", "0",
                         _fmt(float(r.nbar.mean()), float(np.sqrt(np.sum(r.sem**2))) / len(r.nbar), 1)))
    return rows


def cmd_reproduce(args) -> int:
    cfg = _apply_overrides(template_config(FIGURES[args.figure]), args)
    points = execute(cfg, jobs=args.jobs, multisine=args.multisine)
    out = _out_dir(args.out)
    _write_outputs(cfg, points, out, f"reproduce {args.figure}")
    rows = _reference_table(args.figure, cfg, points)
    if points[0].fit is not None:
        print(_describe_fit(points[0].fit))
    if rows:
        w = max(len(r[0]) for r in rows)
        print(f"{'quantity':<{w}}  {'reference':>10}  simulated fit")
        for name, a, b in rows:
            print(f"{name:<{w}}  {a:>10}  {b}")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ionlattice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--engine", choices=("rwa", "full"), help="dynamics engine")
        p.add_argument("--reps", type=int, help="repetitions per sweep point")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./ionlattice-out)")
        p.add_argument("--jobs", type=int, default=1, help="sweep points run concurrently")
        p.add_argument("--multisine", type=int, metavar="K", help="fit K per-site sines instead")

    p = sub.add_parser("simulate", help="run a configured sweep and write CSV + JSON")
    run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a time_us,site,nbar,sem CSV")
    p.add_argument("data", help="CSV file")
    p.add_argument("--multisine", type=int, metavar="K", help="fit K per-site damped sines")
    p.add_argument("--sites", help="comma-separated site ids (source first for exchange)")
    p.add_argument("--n-tot", type=float, help="conserved total excitation (default: mean sum)")
    p.add_argument("--baseline", type=float, default=0.0,
                   help="summed thermal background excluded from the efficiency")
    p.add_argument("--independent-decay", action="store_true", help="one decay constant per site")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./ionlattice-out)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("reproduce", help="run a built-in figure protocol and compare with reference values")
    p.add_argument("figure", choices=sorted(FIGURES))
    run_flags(p, config=False)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("validate", help="check a configuration's sequence for timing violations")
    p.add_argument("--config", required=True)
    p.add_argument("--enforce-grid", action="store_true", help="report targets off the 0.2 kHz grid")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
