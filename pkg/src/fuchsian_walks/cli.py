"""Command line: ``fuchsian-walks <subcommand> --config run.yaml [flags]``.

Exit codes: 0 when every consistency flag passes, 1 when some flag fails,
2 on configuration or runtime errors.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .pipeline import SUBCOMMANDS, MissingArtifacts, run

__all__ = ["main", "build_parser"]


def _l1(text: str):
    if text == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--L1 takes 'auto' or an integer") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out-dir", default="out", help="directory for reports and tables (default: out)")
    common.add_argument("--workers", type=int, default=1, help="simulation threads; results do not depend on it")
    p = argparse.ArgumentParser(prog="fuchsian-walks", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="subcommand", required=True)
    a = sub.add_parser("analyze", parents=[common], help="acceptor, cone types and strong connectivity")
    a.add_argument("--certify-radius", type=int)
    a.add_argument("--dot", action="store_true", help="also write acceptor.dot")
    sub.add_parser("simulate", parents=[common], help="Monte Carlo paths, drift and thickness rate")
    e = sub.add_parser("exact", parents=[common], help="exact law and entropy sequence")
    e.add_argument("--n-max", type=int)
    en = sub.add_parser("entropy", parents=[common], help="exact entropy sequence only")
    en.add_argument("--n-max", type=int)
    g = sub.add_parser("green", parents=[common], help="spectral radius, Green tables, Green rate")
    g.add_argument("--radius", type=int)
    g.add_argument("--tol", type=float)
    c = sub.add_parser("coverings", parents=[common], help="cone coverings and last-entry statistics")
    c.add_argument("--L1", type=_l1)
    c.add_argument("--depth", type=int)
    c.add_argument("--horizon", type=int)
    c.add_argument("--buffer", type=int)
    r = sub.add_parser("report", parents=[common], help="consistency report from earlier artifacts")
    r.add_argument("--out", help="copy the report to this path")
    sub.add_parser("all", parents=[common], help="every stage plus the consistency report")
    assert set(sub.choices) == set(SUBCOMMANDS)
    return p


def _overrides(args) -> dict:
    ov: dict = {}

    def put(section, key, value):
        if value is not None:
            ov.setdefault(section, {})[key] = value

    put("analyze", "certify_radius", getattr(args, "certify_radius", None))
    if getattr(args, "dot", False):
        put("analyze", "dot", True)
    n_max = getattr(args, "n_max", None)
    put("exact" if args.subcommand == "exact" else "entropy", "n_max", n_max)
    put("green", "radius", getattr(args, "radius", None))
    put("green", "tol", getattr(args, "tol", None))
    for key in ("L1", "depth", "horizon", "buffer"):
        put("coverings", key, getattr(args, key, None))
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        ov = _overrides(args)
        if args.seed is not None:
            ov["seed"] = args.seed
        if ov:
            cfg = cfg.override(**ov)
        if args.workers < 1:
            raise ConfigError("must be at least 1", "--workers")
        report = run(args.subcommand, cfg, args.out_dir, workers=args.workers)
        if args.subcommand == "report" and args.out:
            Path(args.out).write_text((Path(args.out_dir) / "report.json").read_text())
    except (ConfigError, MissingArtifacts) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module errors carry their own context
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    failed = [k for k, v in report.flags.items() if not v]
    for k in failed:
        print(f"FAILED {k}", file=sys.stderr)
    print(f"{args.subcommand}: {len(report.flags) - len(failed)}/{len(report.flags)} flags passed -> {args.out_dir}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
