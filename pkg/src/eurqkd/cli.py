"""Command-line front end.

Examples
--------
Key rate against distance in reverse reconciliation with finite-size
channel estimation::

    eurqkd --out runs keyrate --axis distance --grid 0:8:0.5 --direction rr

Estimate a channel from a CSV of paired quadratures::

    eurqkd --out runs estimate --input data.csv

Monte-Carlo validation with the invariant checks::

    eurqkd --seed 42 --out runs simulate --trials 200 --samples 20000 --check

Rate-maximizing grid search in double mode::

    eurqkd --out runs optimize --mode double --free v_m2_fraction,v_m --distance 5 --n-total 1e6

Rerun any command from its manifest::

    eurqkd replay runs/keyrate_manifest.json --out rerun

Exit status: 0 success, 2 invalid input, 3 no positive key anywhere (or an
empty feasible set), 4 a ``--check`` invariant failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, keyrate, montecarlo
from .channel import read_batch_csv
from .estimation import run_estimation
from .params import DOUBLE, SINGLE, Config, ConfigError, load_config, validate

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NO_KEY = 3
EXIT_CHECK_FAILED = 4

OUT_ENV = "EURQKD_OUT"
DEFAULT_OUT = "eurqkd-out"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", metavar="PATH", default=d(None),
                   help="JSON configuration file or a run manifest")
    p.add_argument("--seed", type=int, metavar="U64", default=d(0),
                   help="master seed for random streams (default 0)")
    p.add_argument("--out", metavar="DIR", default=d(None),
                   help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--workers", type=int, metavar="N", default=d(1),
                   help="maximum worker processes; results do not depend on it")


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides")
    g.add_argument("--mode", choices=[SINGLE, DOUBLE])
    g.add_argument("--direction", choices=["dr", "rr"])
    g.add_argument("--n-total", type=float, metavar="N", help="block size (accepts 1e9)")
    g.add_argument("--m-fraction", type=float, metavar="F", help="estimation fraction m/N, single mode")
    g.add_argument("--v-m", type=float, metavar="SNU", help="total modulation variance")
    g.add_argument("--v-m2-fraction", type=float, metavar="F", help="revealed share V_M2/V_M, double mode")
    g.add_argument("--beta", type=float, help="reconciliation efficiency")
    g.add_argument("--alpha", type=float, help="detection half-range in SNU")
    g.add_argument("--bits", type=int, help="bits per sample, L")
    g.add_argument("--distance", type=float, metavar="KM", help="channel length in km")
    g.add_argument("--excess-noise", type=float, metavar="EPS")
    g.add_argument("--loss", type=float, metavar="DB_PER_KM", help="fiber loss coefficient")


def _add_bound_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--estimation", choices=[keyrate.IDEAL, keyrate.FINITE], default=keyrate.FINITE)
    p.add_argument("--margin", type=float, default=1.0, help="multiplier on the distance threshold d0")
    p.add_argument("--no-rescale", action="store_true",
                   help="compare Alice's data without the sqrt(tau) rescaling")
    p.add_argument("--literal-double", action="store_true",
                   help="double mode: N log2(d) in place of N log2(gamma(d))")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eurqkd",
        description="Finite-size key rates and Monte-Carlo validation for squeezed-state CV-QKD.",
        epilog=__doc__.split("Examples\n--------\n", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    kr = sub.add_parser("keyrate", help="sweep the key rate over distance or block size")
    _add_globals(kr, suppress=True)
    _add_overrides(kr)
    kr.add_argument("--axis", choices=["distance", "blocksize"], default="distance")
    kr.add_argument("--grid", metavar="GRID",
                    help="comma list or START:STOP:STEP (inclusive); "
                         "defaults 0:30:0.5 km or 1e5,1e6,1e7,1e8,1e9")
    _add_bound_options(kr)

    est = sub.add_parser("estimate", help="estimate the channel from a CSV batch")
    _add_globals(est, suppress=True)
    _add_overrides(est)
    est.add_argument("--input", required=True, metavar="CSV",
                     help="columns (m, b) for single mode or (m1, m2, b) for double mode")
    est.add_argument("--first-rows", type=int, metavar="K",
                     help="use only the first K rows (the revealed pairs of a full block)")
    est.add_argument("--z", type=float, help="confidence width (default from the security budget)")

    sim = sub.add_parser("simulate", help="Monte-Carlo protocol trials")
    _add_globals(sim, suppress=True)
    _add_overrides(sim)
    sim.add_argument("--trials", type=int, default=200)
    sim.add_argument("--samples", type=float, default=20_000, help="samples per trial (N)")
    sim.add_argument("--z", type=float, default=3.0, help="confidence width for coverage counts")
    sim.add_argument("--no-rescale", action="store_true")
    sim.add_argument("--dump", type=int, default=0, metavar="K",
                     help="also write the raw data of the first K trials as CSV")
    sim.add_argument("--check", action="store_true",
                     help="run the invariant checks and exit 4 if any fails")

    opt = sub.add_parser("optimize", help="grid search for the rate-maximizing parameters")
    _add_globals(opt, suppress=True)
    _add_overrides(opt)
    opt.add_argument("--free", default="m_fraction", metavar="LIST",
                     help=f"comma list from {', '.join(keyrate.FREE_PARAMETERS)}")
    opt.add_argument("--points", type=int, default=21, help="grid points per parameter and pass")
    opt.add_argument("--refinements", type=int, default=2)
    _add_bound_options(opt)

    rep = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    rep.add_argument("manifest", metavar="MANIFEST")
    _add_globals(rep, suppress=True)
    return parser


# ---------------------------------------------------------------------------
# configuration


def resolve_config(args) -> Config:
    """Configuration file (or defaults) with command-line overrides applied."""
    cfg = load_config(args.config) if args.config else Config()
    p = cfg.protocol
    changes = {}
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.direction is not None:
        changes["direction"] = args.direction
    if args.beta is not None:
        changes["beta"] = args.beta
    if args.v_m is not None:
        changes["v_m"] = args.v_m
    if args.n_total is not None:
        changes["n_total"] = int(args.n_total)
    if changes:
        p = p.replace(**changes)
    if args.v_m2_fraction is not None:
        if p.mode != DOUBLE:
            raise ConfigError(["--v-m2-fraction needs double mode"])
        v_m2 = p.v_m * args.v_m2_fraction
        p = dataclasses.replace(p, v_m2=v_m2, v_m1=p.v_m - v_m2)
    if args.m_fraction is not None:
        if p.mode != SINGLE:
            raise ConfigError(["--m-fraction needs single mode"])
        p = dataclasses.replace(p, m_pe=int(round(args.m_fraction * p.n_total)))
    disc = cfg.discretization
    if args.alpha is not None:
        disc = dataclasses.replace(disc, alpha=args.alpha)
    if args.bits is not None:
        disc = dataclasses.replace(disc, bits=args.bits)
    chan = {}
    if args.distance is not None:
        chan["distance_km"] = args.distance
    if args.excess_noise is not None:
        chan["excess_noise"] = args.excess_noise
    if args.loss is not None:
        chan["loss_db_per_km"] = args.loss
    cfg = dataclasses.replace(cfg, protocol=p, discretization=disc, **chan)
    return cfg.validated()


def parse_grid(text: str | None, default: list[float]) -> list[float]:
    if text is None:
        return default
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(x) for x in text.split(":")]
            if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
                raise UsageError(f"grid {text!r}: need START:STOP:STEP with STEP > 0")
            count = int(np.floor((parts[1] - parts[0]) / parts[2] + 1e-9)) + 1
            return [round(parts[0] + i * parts[2], 12) for i in range(count)]
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse grid {text!r}: {exc}") from None
    if not values:
        raise UsageError("grid is empty")
    return values


def output_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


# ---------------------------------------------------------------------------
# outputs


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _manifest(args, argv, cfg: Config | None, outputs: list[str], extra: dict | None = None) -> str:
    doc = {
        "command": args.command,
        "argv": _replay_argv(argv),
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": args.seed,
        "version": __version__,
        "outputs": outputs,
    }
    if extra:
        doc.update(extra)
    return json.dumps(montecarlo._json_safe(doc), indent=2, sort_keys=True) + "\n"


def _replay_argv(argv):
    # drop the flags a replay supplies itself
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--config", "--out"):
            skip = True
            continue
        if a.startswith(("--config=", "--out=")):
            continue
        out.append(a)
    return out


def _finish(args, argv, cfg, out: Path, files: dict[str, str], extra=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        _write(out / name, text)
    manifest = f"{args.command}_manifest.json"
    _write(out / manifest, _manifest(args, argv, cfg, sorted(files), extra))


# ---------------------------------------------------------------------------
# commands


def _bound_kwargs(args) -> dict:
    return dict(rescale=not args.no_rescale, margin=args.margin, literal_double=args.literal_double)


def cmd_keyrate(args, argv) -> int:
    cfg = resolve_config(args)
    if args.axis == "distance":
        grid = parse_grid(args.grid, [i * 0.5 for i in range(61)])
        axis = "distance_km"
    else:
        grid = parse_grid(args.grid, [1e5, 1e6, 1e7, 1e8, 1e9])
        axis = "block_size"
    reports = keyrate.sweep(
        cfg.protocol, cfg.discretization, cfg.security, axis, grid,
        estimation=args.estimation, excess_noise=cfg.excess_noise,
        loss_db_per_km=cfg.loss_db_per_km, distance_km=cfg.distance_km,
        workers=args.workers, **_bound_kwargs(args),
    )
    out = output_dir(args)
    _finish(args, argv, cfg, out, {"keyrate.csv": keyrate.reports_to_csv(reports)})
    best = max(reports, key=lambda r: r.rate)
    print(f"{len(reports)} points written to {out / 'keyrate.csv'}; "
          f"max rate {best.rate:.6g} bits/use")
    if best.rate <= 0:
        print("no positive key rate anywhere on the grid", file=sys.stderr)
        return EXIT_NO_KEY
    return EXIT_OK


def cmd_estimate(args, argv) -> int:
    cfg = resolve_config(args)
    batch = read_batch_csv(args.input, mode=args.mode)
    p = cfg.protocol
    if batch.mode != p.mode:
        p = p.replace(mode=batch.mode)
    if args.first_rows is not None:
        k = args.first_rows
        if not 2 <= k <= len(batch):
            raise UsageError(f"--first-rows must be in [2, {len(batch)}], got {k}")
        batch = dataclasses.replace(batch, **{c: v[:k] for c, v in batch.columns().items()})
    cfg = dataclasses.replace(cfg, protocol=p).validated()
    report = run_estimation(batch, p, cfg.security, z=args.z)
    out = output_dir(args)
    _finish(args, argv, cfg, out, {"estimate.json": report.to_json(), "estimate.csv": report.to_csv()},
            extra={"input": str(args.input)})
    print(f"tau_hat={report.tau_hat:.6g} tau_low={report.tau_low:.6g} "
          f"v_eps_hat={report.v_eps_hat:.6g} v_eps_up={report.v_eps_up:.6g} (m={report.m_used})")
    return EXIT_OK


def cmd_simulate(args, argv) -> int:
    cfg = resolve_config(args)
    tc = montecarlo.TrialConfig(
        params=cfg.protocol, ch=cfg.channel(), disc=cfg.discretization, sec=cfg.security,
        seed=args.seed, trials=args.trials, samples_per_trial=int(args.samples), z=args.z,
        rescale=not args.no_rescale,
    )
    validate(tc.trial_params, tc.disc, tc.sec, tc.ch)
    montecarlo.check_feasible(tc)
    summary = montecarlo.simulate(tc, workers=args.workers)
    files = {
        "simulate_summary.json": summary.to_json(),
        "simulate_aggregates.csv": summary.aggregates_csv(),
        "simulate_trials.csv": summary.records_csv(),
    }
    checks = montecarlo.check_invariants(summary) if args.check else []
    if args.check:
        lines = ["name,passed,skipped,detail"]
        lines += [f"{c.name},{int(c.passed)},{int(c.skipped)},\"{c.detail}\"" for c in checks]
        files["simulate_checks.csv"] = "\n".join(lines) + "\n"
    out = output_dir(args)
    extra = None
    if args.dump:
        paths = montecarlo.dump_batches(tc, out / "batches", limit=args.dump)
        extra = {"raw_batches": [f"batches/{p.name}" for p in paths]}
    _finish(args, argv, cfg, out, files, extra)
    a = summary.aggregates
    print(f"{a['trials']} trials: Var ratio tau {a['tau_var_ratio']:.4f}, "
          f"V_eps {a['v_eps_var_ratio']:.4f}; misses tau {a['tau_misses']}, V_eps {a['veps_misses']}")
    failed = [c for c in checks if not c.passed]
    for c in checks:
        status = "skip" if c.skipped else ("ok" if c.passed else "FAIL")
        print(f"  [{status}] {c.name}: {c.detail}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_optimize(args, argv) -> int:
    cfg = resolve_config(args)
    free = [f.strip() for f in args.free.split(",") if f.strip()]
    result = keyrate.optimize(
        cfg.protocol, cfg.channel(), cfg.discretization, cfg.security, free,
        estimation=args.estimation, n_points=args.points, refinements=args.refinements,
        **_bound_kwargs(args),
    )
    files = {
        "optimize_best.csv": keyrate.reports_to_csv([result.best]),
        "optimize_best.json": json.dumps(
            montecarlo._json_safe({"argmax": result.argmax, "report": result.best.to_dict()}),
            indent=2, sort_keys=True) + "\n",
        "optimize_trace.csv": result.trace_csv(),
    }
    out = output_dir(args)
    _finish(args, argv, cfg, out, files)
    print(f"best rate {result.best.rate:.6g} bits/use at {result.argmax} "
          f"({len(result.trace)} evaluations)")
    if not result.feasible:
        print("empty feasible set: no evaluated point gives a positive key", file=sys.stderr)
        return EXIT_NO_KEY
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    try:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        inner = list(doc["argv"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
    new = ["--config", str(args.manifest)]
    out = getattr(args, "out", None)
    if out:
        new += ["--out", out]
    # globals first, then the recorded command line (which starts with the subcommand
    # or with recorded global flags)
    return main(new + inner)


COMMANDS = {
    "keyrate": cmd_keyrate,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "replay": cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_INVALID
    try:
        return COMMANDS[args.command](args, argv)
    except ValueError as exc:
        # configuration, batch-format, usage and size errors all derive from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
