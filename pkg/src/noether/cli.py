"""Command line entry point: ``noether run|check|ntk --config <path> [--out <dir>] [--seed-override <u64>]``.

Exit codes: 0 success, 2 configuration error, 3 diverged run, 4 verification failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import Config, load_config
from .errors import ConfigError, FormatError
from .experiment import check_experiment, ntk_experiment, run_experiment
from .net import InputError
from .report import format_table, write_csv, write_json, write_jsonl, write_plots

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAIL = 0, 2, 3, 4


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noether", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("run", "train and log every monitor along the trajectory"),
        ("check", "verify symmetry generators: invariance, residuals, conserved-expression drift"),
        ("ntk", "width sweep: energy bounds, weight movement, network vs kernel dynamics"),
    ]:
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed-override", type=_u64, help="replace the config seed")
    return parser


def _resolve_paths(cfg: Config, base: Path) -> None:
    if cfg.data is not None and cfg.data.kind == "idx":
        for attr in ("images", "labels"):
            p = Path(getattr(cfg.data, attr))
            if not p.is_absolute():
                setattr(cfg.data, attr, str(base / p))


def _out_dir(cfg: Config, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(cfg: Config, out: Path, seed) -> int:
    res = run_experiment(cfg, seed)
    traj = res.trajectory
    header = write_csv(traj, out / "trajectory.csv")
    write_jsonl(traj, out / "trajectory.jsonl")
    try:
        write_plots(traj, out, cfg.output.plots)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), "output.plots") from None
    print(f"wrote {len(traj.records)} records with columns {', '.join(header)} to {out}")
    if traj.diverged:
        print(f"diverged: trajectory truncated at step {traj.truncated_at} ({traj.message})", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_check(cfg: Config, out: Path, seed) -> int:
    res = check_experiment(cfg, seed)
    rows = [r.as_dict() for r in res.reports]
    cols = ["generator", "invariance_defect", "rt_residual", "drift", "drift_ratio", "trace_error", "status"]
    print(format_table(rows, cols))
    for r in res.reports:
        if r.note:
            print(f"note [{r.label}]: {r.note}")
    write_json({"loss0": res.loss0, "ok": res.ok, "generators": rows,
                "truncated_at": res.trajectory.truncated_at}, out / "check_report.json")
    if res.trajectory.diverged:
        print(f"diverged: trajectory truncated at step {res.trajectory.truncated_at}", file=sys.stderr)
        return EXIT_DIVERGED
    print("verification " + ("PASS" if res.ok else "FAIL"))
    return EXIT_OK if res.ok else EXIT_FAIL


def cmd_ntk(cfg: Config, out: Path, seed) -> int:
    res = ntk_experiment(cfg, seed)
    rows = [r.row() for r in res.results]
    cols = ["width", "m", "loss0", "sup_v_sq", "two_loss0", "sup_avg_abs_v", "avg_bound",
            "max_weight_movement", "kernel_divergence"]
    print(format_table(rows, cols))
    for name, ok in res.checks.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    write_json({"rows": rows, "checks": res.checks, "ok": res.ok}, out / "ntk_report.json")
    if res.any_diverged:
        print("diverged: at least one width produced non-finite values", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK if res.ok else EXIT_FAIL


COMMANDS = {"run": cmd_run, "check": cmd_check, "ntk": cmd_ntk}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _resolve_paths(cfg, Path(args.config).resolve().parent)
        out = _out_dir(cfg, args)
        return COMMANDS[args.command](cfg, out, args.seed_override)
    except (ConfigError, InputError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
