"""Command-line front end: ``semicp {register,warp,eval,synth,bench}``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .bench import BenchProtocol, SynthSpec, rows_to_csv, run_protocol, synth_cases
from .deform import load_grid, save_grid, warp
from .errors import NonFiniteGradient, NonFiniteLoss, OutOfGrid, SemICPError
from .metrics import evaluate
from .pipeline import Registration, RunConfig, load_truth, register_pair, rigid_from_json, rigid_to_json
from .plyio import read_ply, write_ply

log = logging.getLogger("semicp")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def _load_json_model(model, path):
    try:
        return model.model_validate_json(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except ValidationError as exc:
        raise InputError(f"{path}: {exc}") from None


def _read_cloud(path):
    try:
        return read_ply(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def _effective_config(args) -> RunConfig:
    cfg = _load_json_model(RunConfig, args.config) if args.config else RunConfig()
    update = {}
    if args.no_semantic:
        update["semantic"] = False
    if args.seed is not None:
        update["seed"] = args.seed
    if args.threads is not None:
        update["threads"] = args.threads
    # re-validate so overrides obey the same constraints as the file
    return RunConfig.model_validate({**cfg.model_dump(), **update})


def _write_trace(path, trace):
    lines = ["iteration,loss"] + [f"{i},{v!r}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_outputs(out: Path, reg: Registration, source):
    cfg = reg.config
    if reg.rigid is not None:
        _write_trace(out / "trace_rigid.csv", reg.rigid.trace)
    if reg.nonrigid is not None:
        _write_trace(out / "trace_nonrigid.csv", reg.nonrigid.trace)
    (out / "rigid.json").write_text(rigid_to_json(reg.transform))
    if reg.before is not None:
        (out / "metrics_before.txt").write_text(reg.before.to_text())
    if reg.grid is not None:
        save_grid(out / "field.grid", reg.grid, cfg.grid_meta())
        deformed = reg.deformed if reg.deformed is not None else warp(reg.grid, reg.transform, source, clamp=True)
        write_ply(out / "deformed_source.ply", deformed)
    if reg.after is not None:
        (out / "metrics_after.txt").write_text(reg.after.to_text())
    if reg.runtimes:
        (out / "runtime.json").write_text(json.dumps(reg.runtimes, indent=2) + "\n")


def cmd_register(args) -> int:
    cfg = _effective_config(args)
    source, target = _read_cloud(args.source), _read_cloud(args.target)
    truth = load_truth(args.gt, source) if args.gt else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dump())
    reg = Registration(cfg)
    try:
        register_pair(source, target, cfg, truth, out=reg)
    except (NonFiniteGradient, NonFiniteLoss):
        _write_outputs(out, reg, source)
        raise
    _write_outputs(out, reg, source)
    sys.stdout.write(reg.after.to_text())
    return EXIT_OK


def cmd_warp(args) -> int:
    cloud = _read_cloud(args.cloud)
    try:
        rigid = rigid_from_json(Path(args.rigid).read_text(), args.rigid)
    except OSError as exc:
        raise InputError(f"{args.rigid}: {exc.strerror}") from None
    grid, _ = load_grid(args.grid)
    write_ply(args.out, warp(grid, rigid, cloud, clamp=args.clamp))
    return EXIT_OK


def cmd_eval(args) -> int:
    a, b = _read_cloud(args.a), _read_cloud(args.b)
    grid = load_grid(args.grid)[0] if args.grid else None
    truth = load_truth(args.gt, a) if args.gt else None
    sys.stdout.write(evaluate(a, b, grid, truth).to_text())
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = _load_json_model(SynthSpec, args.spec)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    try:
        dirs = synth_cases(spec, args.out_dir)
    except ValueError as exc:
        raise InputError(f"{args.spec}: {exc}") from None
    for d in dirs:
        print(d)
    return EXIT_OK


def cmd_bench(args) -> int:
    protocol = _load_json_model(BenchProtocol, args.protocol)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_protocol(protocol, processes=args.threads or 1)
    text = rows_to_csv(rows)
    (out / f"bench_{protocol.kind}.csv").write_text(text)
    (out / "protocol.json").write_text(protocol.model_dump_json(indent=2) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semicp", description="Semantic labeled point-cloud registration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (bench: processes)")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="rigid + non-rigid registration of source onto target")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("out_dir")
    p.add_argument("--config", help="RunConfig JSON; missing keys take defaults")
    p.add_argument("--no-semantic", action="store_true", help="ignore labels when matching")
    p.add_argument("--gt", help="gt.json sidecar; enables TRE")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="apply rigid.json + field.grid to a cloud")
    p.add_argument("cloud")
    p.add_argument("rigid")
    p.add_argument("grid")
    p.add_argument("out")
    p.add_argument("--clamp", action="store_true", help="clamp points outside the grid instead of failing")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("eval", help="per-label HD95/MSD (and TRE, SDLogJ) of a against b")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--grid")
    p.add_argument("--gt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="materialize synthetic cases from a spec")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run a sweep protocol, write an aggregate CSV")
    p.add_argument("protocol")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (NonFiniteGradient, NonFiniteLoss) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OutOfGrid as exc:
        print(f"error: {exc}; pass --clamp to clamp it", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, SemICPError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
