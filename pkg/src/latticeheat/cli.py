"""Command line entry point: ``latticeheat <kind> [--config FILE] [overrides]``.

Exit codes: 0 success, 2 invalid configuration or usage, 3 computation
failure, 4 a run finished but one of its checks failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import KINDS, ConfigError, RunConfig
from .experiments import ComputeError, compare, load_manifest, run, run_many, worker_count

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_COMPUTE = 3
EXIT_ASSERTION = 4

log = logging.getLogger("latticeheat")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--name")
    p.add_argument("--d", type=int, help="lattice dimension")
    p.add_argument("--h", type=float, help="mesh size")
    p.add_argument("--half-width", type=float, help="half-width of the box")
    p.add_argument("--potential", help="potential name (zero, constant, sine, power)")
    p.add_argument("--T", type=float, help="time horizon")
    p.add_argument("--rho", type=float)
    p.add_argument("--eps0", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", type=str)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any field by dotted path, e.g. mask.gamma=0.25 (repeatable)")
    p.add_argument("--sweep", action="append", default=[], metavar="AXIS=V1,V2,...",
                   help="sweep values for an axis such as h, T or R (repeatable)")


def _overrides(args) -> dict:
    out = {}
    simple = {"name": "name", "d": "box.d", "h": "box.h", "half_width": "box.half_width", "T": "schedule.T",
              "rho": "schedule.rho", "eps0": "schedule.eps0", "seed": "seed", "output_dir": "output_dir"}
    for attr, path in simple.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[path] = v
    if getattr(args, "potential", None):
        out["potential"] = {"name": args.potential}
    for item in args.set:
        if "=" not in item:
            raise ConfigError({item: "expected KEY=VALUE"})
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    for item in args.sweep:
        if "=" not in item:
            raise ConfigError({item: "expected AXIS=V1,V2"})
        k, v = item.split("=", 1)
        out[f"sweep.{k.strip()}"] = [_parse_value(x) for x in v.split(",") if x.strip()]
    return out


def _config_for(kind: Optional[str], args) -> RunConfig:
    if args.config is not None:
        try:
            cfg = RunConfig.from_json(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError({"config": str(exc)}) from exc
        if kind is not None and cfg.kind != kind:
            raise ConfigError({"kind": f"config is {cfg.kind!r}, subcommand is {kind!r}"})
    else:
        if kind is None:
            raise ConfigError({"config": "required for the run subcommand"})
        cfg = RunConfig(kind=kind, name=kind)
    return cfg.with_overrides(_overrides(args)).validate()


def _report(manifest: dict, stream=None) -> None:
    stream = sys.stdout if stream is None else stream
    for name, ok in sorted(manifest["checks"].items()):
        stream.write(f"{'PASS' if ok else 'FAIL'} {manifest['name']}: {name}\n")
    stream.write(f"{manifest['name']}: {'passed' if manifest['passed'] else 'FAILED'} "
                 f"({manifest['elapsed_s']:.1f} s)\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latticeheat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        _add_run_options(p)
        p.add_argument("--json", action="store_true", help="print the manifest instead of the check summary")
    p = sub.add_parser("run", help="run the experiment described by a config file")
    _add_run_options(p)
    p.add_argument("--json", action="store_true")
    p = sub.add_parser("compare", help="field-wise diff of two manifests")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--rtol", type=float, default=1e-9)
    p.add_argument("--atol", type=float, default=0.0)
    p = sub.add_parser("reproduce-all", help="run every shipped config")
    p.add_argument("--configs-dir", type=Path, default=Path("configs"))
    p.add_argument("--output-dir", type=Path, default=None)
    p.add_argument("--workers", type=int, default=None,
                   help="parallel workers (default from LATTICEHEAT_WORKERS, else 1)")
    return parser


def _reproduce_all(args) -> int:
    files = sorted(Path(args.configs_dir).glob("*.json"))
    if not files:
        raise ConfigError({"configs_dir": f"no configs in {args.configs_dir}"})
    cfgs = []
    for f in files:
        cfg = RunConfig.from_json(f)
        if args.output_dir is not None:
            cfg = cfg.with_overrides({"output_dir": str(Path(args.output_dir) / cfg.name)})
        cfgs.append(cfg.validate())
    manifests = run_many(cfgs, args.workers if args.workers is not None else worker_count())
    for m in manifests:
        _report(m)
    return EXIT_OK if all(m["passed"] for m in manifests) else EXIT_ASSERTION


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            a, b = load_manifest(args.a), load_manifest(args.b)
            diff = compare(a, b, args.rtol, args.atol)
            print(json.dumps(diff, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "reproduce-all":
            return _reproduce_all(args)
        kind = None if args.command == "run" else args.command
        cfg = _config_for(kind, args)
        manifest = run(cfg)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except ValueError as exc:
        # kind mismatch in compare and similar caller errors
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except ComputeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_COMPUTE
    if args.json:
        print(json.dumps(manifest, indent=2, sort_keys=True))
    else:
        _report(manifest)
    return EXIT_OK if manifest["passed"] else EXIT_ASSERTION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
