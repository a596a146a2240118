"""Command line entry point: ``fundoscope <command> [options]``.

Exit codes: 0 success, 1 a check failed, 2 configuration or usage error,
3 missing upstream artifact, 4 training diverged, 5 unusable input image.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import BUNDLED, ConfigError, bundled_config, dump_toml, load_config
from .networks import (GLOBAL_TABLE, LOCAL_TABLE, TrainingDiverged, build_global, build_local,
                       check_miniature, describe, format_table)
from .preprocess import NotAFundusError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_INPUT = 0, 1, 2, 3, 4, 5

STAGE_COMMANDS = {
    "synth": "synth",
    "prep": "prep",
    "train-local": "local",
    "build-maps": "maps",
    "train-global": "global",
    "evaluate": "evaluate",
}

log = logging.getLogger("fundoscope")


def _configure_logging(verbosity):
    level = os.environ.get("FUNDOSCOPE_LOG", "").upper()
    if not level:
        level = ("WARNING", "INFO", "DEBUG")[min(verbosity, 2)]
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _resolve_config(args):
    if args.config and args.bundled:
        raise ConfigError("give either --config or --bundled, not both")
    cfg = bundled_config(args.bundled) if args.bundled else load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "precision", None) is not None:
        cfg.train.precision = args.precision
    if getattr(args, "out", None):
        cfg.paths.out = args.out
    return cfg.validate()


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


# ---------------------------------------------------------------- commands

def cmd_stage(args):
    from .pipeline import run_stage

    cfg = _resolve_config(args)
    name = STAGE_COMMANDS[args.command]
    manifest = run_stage(cfg, cfg.paths.out, name, force=args.force)
    status = "up to date" if manifest["skipped"] else f"done in {manifest['wall_time_s']:.1f}s"
    _emit(args, manifest, f"{name}: {status} -> {Path(cfg.paths.out) / name}\n"
          + json.dumps(manifest["summary"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args):
    from .pipeline import run_all

    cfg = _resolve_config(args)
    manifests = run_all(cfg, cfg.paths.out, force=args.force, until=args.until)
    lines = []
    for n, m in manifests.items():
        lines.append(f"{n:<9} " + ("up to date" if m["skipped"] else f"{m['wall_time_s']:.1f}s"))
    report = Path(cfg.paths.out) / "evaluate" / "report.txt"
    if "evaluate" in manifests and report.is_file():
        lines.append("")
        lines.append(report.read_text().rstrip())
    payload = {n: {"key": m["key"], "summary": m["summary"]} for n, m in manifests.items()}
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_grade(args):
    from .pipeline import grade_image

    cfg = _resolve_config(args)
    dest = Path(args.dest) if args.dest else Path(cfg.paths.out) / "graded"
    results = []
    for image in args.images:
        if not Path(image).is_file():
            raise NotAFundusError(f"no such image: {image}")
        results.append(grade_image(cfg, cfg.paths.out, image, dest))
    text = "\n".join(f"{Path(r['image']).name}: grade {r['grade']} ({r['grade_name']}), "
                     f"referable score {r['referable_score']:.4f}, probabilities "
                     + " ".join(f"{p:.4f}" for p in r["probabilities"]) for r in results)
    _emit(args, results, text + f"\noutputs in {dest}")
    return EXIT_OK


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    results, lines, ok = {}, [], True
    for kind in args.nets:
        worst, limited = 0.0, 0
        for seed in range(args.seeds):
            rep = check_miniature(kind, seed, batch=args.batch, max_entries=args.entries,
                                  size=args.size, width_divisor=args.width_divisor,
                                  tolerance=args.tolerance)
            worst = max(worst, rep.max_error)
            limited += len(rep.kink_limited)
            results[f"{kind}/{seed}"] = rep.to_dict()
            if args.verbose > 1:
                lines += [f"  {kind} seed {seed}: {line}" for line in rep.lines()]
        passed = worst < args.tolerance
        ok &= passed
        lines.append(f"{kind:<7} {args.seeds} seeds  max relative error {worst:.3e}  "
                     f"{'PASS' if passed else 'FAIL'} (< {args.tolerance:g})"
                     + (f"  [{limited} probe(s) at an unresolvable ReLU/pool kink excluded]" if limited else ""))
    lines.append(f"elapsed {time.perf_counter() - t0:.1f}s")
    _emit(args, {"passed": ok, "runs": results}, "\n".join(lines))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_describe(args):
    nets = {}
    if args.net in ("local", "both"):
        nets["local"] = (build_local(args.patch, args.width_divisor), LOCAL_TABLE)
    if args.net in ("global", "both"):
        nets["global"] = (build_global(args.input_size, args.width_divisor), GLOBAL_TABLE)
    payload, text = {}, []
    for name, (net, _) in nets.items():
        rows = describe(net)
        payload[name] = {"rows": rows, "parameters": net.parameter_count()}
        text.append(format_table(rows, f"{name} network ({net.parameter_count():,} parameters)"))
    _emit(args, payload, "\n\n".join(text))
    return EXIT_OK


def cmd_config(args):
    cfg = _resolve_config(args)
    print(dump_toml(cfg), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p, run_options=True):
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--bundled", choices=BUNDLED, help="use a configuration shipped with the package")
    if run_options:
        p.add_argument("--seed", type=int, help="override [train].seed")
        p.add_argument("--out", help="run directory (overrides [paths].out)")
        p.add_argument("--precision", type=int, choices=(32, 64), help="floating-point width")
        p.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")


def build_parser():
    parser = argparse.ArgumentParser(prog="fundoscope",
                                     description="Two-stage lesion-weighted diabetic retinopathy grading.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, help="cap BLAS threads")
    parser.add_argument("--json", action="store_true", help="print a JSON summary instead of text")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run the '{stage}' stage")
        _common(p)
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("run", help="run every stage in order (skipping those up to date)")
    _common(p)
    p.add_argument("--until", default="evaluate", choices=("synth", "prep", "local", "maps", "global", "evaluate"))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grade", help="grade fundus images with a trained run")
    _common(p)
    p.add_argument("images", nargs="+")
    p.add_argument("--dest", help="directory for per-image JSON and overlay PNG")
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("gradcheck", help="finite-difference check of miniature networks")
    p.add_argument("--nets", nargs="+", default=["local", "global"], choices=("local", "global"))
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--entries", type=int, default=6, help="probed entries per tensor")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--width-divisor", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("describe", help="print the layer tables")
    p.add_argument("--net", choices=("local", "global", "both"), default="both")
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--width-divisor", type=int, default=1)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("config", help="print the resolved configuration as TOML")
    _common(p)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None):
    from .pipeline import MissingArtifact

    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (NotAFundusError, OSError) as exc:
        print(f"unusable input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
