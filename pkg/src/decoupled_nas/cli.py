"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or config failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import analytics
from .config import PRESETS, ConfigError, load_config
from .searchspace import (
    CONV_OPS,
    RECURRENT_ACTS,
    TemplateError,
    count_architectures,
    iter_architectures,
    make_conv_template,
    make_recurrent_template,
)
from .trainer import (
    CheckpointError,
    RunDir,
    SearchAbort,
    derive_architecture,
    load_checkpoint,
    read_derived,
    run_search,
)

log = logging.getLogger("decoupled_nas")


class UsageError(Exception):
    pass


def format_count(n: int) -> str:
    if n < 10_000:
        return str(n)
    exp = int(math.floor(math.log10(n)))
    mant = n / 10**exp
    if round(mant, 2) >= 10:
        mant, exp = mant / 10, exp + 1
    return f"{n} (≈{mant:.2f}e{exp})"


def _template(args):
    if args.num_ops is not None and args.ops is not None:
        raise UsageError("give either --ops or --num-ops, not both")
    defaults = RECURRENT_ACTS if args.kind == "recurrent" else CONV_OPS
    if args.ops is not None:
        ops = [o.strip() for o in args.ops.split(",") if o.strip()]
    elif args.num_ops is not None:
        if not 1 <= args.num_ops <= len(defaults):
            raise UsageError(f"--num-ops must lie in 1..{len(defaults)}")
        ops = list(defaults[: args.num_ops])
    else:
        ops = list(defaults)
    try:
        if args.kind == "recurrent":
            return make_recurrent_template(args.num_nodes, ops)
        return make_conv_template(args.num_nodes, ops)
    except TemplateError as e:
        raise UsageError(str(e)) from None


def _config(args):
    if not args.config:
        raise UsageError("--config is required")
    overrides = {"seed": args.seed} if args.seed is not None else None
    return load_config(args.config, overrides)


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out / ".lock"), timeout=0)


def _report(result, out: Path) -> None:
    arch = {k: s.encode() for k, s in result.derived.items()}
    print(json.dumps({"derived": arch, "measured_reward": result.derived_reward,
                      "true_reward": result.true_reward, "run_dir": str(out)}, indent=1))


def cmd_search(args, random_search: bool = False) -> int:
    config = _config(args)
    out = _out(args)
    with _locked(out):
        result = run_search(config, run_dir=out, random_search=random_search)
    _report(result, out)
    return 0


def cmd_resume(args) -> int:
    out = _out(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "latest.ckpt"
    if not ckpt.exists():
        raise UsageError(f"no checkpoint at {ckpt}")
    with _locked(out):
        state, task = load_checkpoint(ckpt)
        result = run_search(state.config, task, out, state=state)
    _report(result, out)
    return 0


def cmd_derive(args) -> int:
    out = _out(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "latest.ckpt"
    if not ckpt.exists():
        raise UsageError(f"no checkpoint at {ckpt}")
    state, task = load_checkpoint(ckpt)
    rng = np.random.default_rng(args.seed) if args.seed is not None else state.rng
    n = args.samples or state.config.derive_samples
    d = derive_architecture(state.policies, task, n, rng, state.config.derive_resample_batch, state,
                            state.config.workers)
    target = out / "derived"
    target.mkdir(parents=True, exist_ok=True)
    body = {
        "architecture": {k: s.to_dict() for k, s in d.best.items()},
        "measured_reward": d.best_reward,
        "candidate_index": d.best_index,
        "candidates": n,
    }
    true_r = task.true_reward(d.best)
    if true_r is not None:
        body["true_reward"] = true_r
    (target / "architecture.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    templates = {t.kind: t for t in task.templates}
    for kind, s in d.best.items():
        (target / f"{kind}.dot").write_text(analytics.export_dot(s, templates[kind]))
    print(json.dumps({k: s.encode() for k, s in d.best.items()}, indent=1))
    return 0


def cmd_count(args) -> int:
    if args.config:
        templates = _config(args).templates()
    else:
        templates = [_template(args)]
    for t in templates[:1]:
        print(format_count(count_architectures(t)))
    return 0


def cmd_enumerate(args) -> int:
    t = _config(args).templates()[0] if args.config else _template(args)
    for i, arch in enumerate(iter_architectures(t)):
        if args.limit is not None and i >= args.limit:
            break
        print(arch.encode())
    return 0


def cmd_stats(args) -> int:
    out = _out(args)
    ckpt = out / "checkpoints" / "latest.ckpt"
    if not ckpt.exists():
        raise UsageError(f"no checkpoint at {ckpt}")
    state, _ = load_checkpoint(ckpt)
    RunDir(out).write_ledger(state.ledger)
    for bucket in sorted(state.ledger.buckets):
        for kind in sorted(state.ledger.buckets[bucket]):
            print(f"bucket {bucket} {kind}: {state.ledger.samples(bucket, kind)} samples")
    return 0


def cmd_export_dot(args) -> int:
    out = _out(args)
    src = Path(args.input) if args.input else out / "derived" / "architecture.json"
    if not src.exists():
        raise UsageError(f"no derived architecture at {src}")
    model = read_derived(src)
    if args.config:
        templates = {t.kind: t for t in _config(args).templates()}
    else:
        cfg_path = src.parent.parent / "config.yaml"
        if not cfg_path.exists():
            raise UsageError("export-dot needs --config when the input is outside a run directory")
        templates = {t.kind: t for t in load_config(str(cfg_path)).templates()}
    out.mkdir(parents=True, exist_ok=True)
    for kind, s in model.items():
        path = out / f"{kind}.dot"
        path.write_text(analytics.export_dot(s, templates[kind]))
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"config file or preset ({', '.join(PRESETS)})")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    template = argparse.ArgumentParser(add_help=False)
    template.add_argument("kind", nargs="?", choices=["conv", "recurrent"], default="conv")
    template.add_argument("num_nodes", nargs="?", type=int, default=6,
                          help="total nodes (conv) or hidden nodes (recurrent)")
    template.add_argument("--ops", help="comma-separated operation list")
    template.add_argument("--num-ops", type=int, help="use the first K default operations")

    p = argparse.ArgumentParser(prog="decoupled-nas", description="Decoupled structure/operation cell search.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("search", parents=[common], help="run the policy search")
    sub.add_parser("random-baseline", parents=[common], help="same budget with uniform policies")
    r = sub.add_parser("resume", parents=[common], help="continue a run from a checkpoint")
    r.add_argument("--checkpoint")
    d = sub.add_parser("derive", parents=[common], help="re-derive the final architecture from a checkpoint")
    d.add_argument("--checkpoint")
    d.add_argument("--samples", type=int)
    sub.add_parser("count", parents=[common, template], help="exact number of cell architectures")
    e = sub.add_parser("enumerate", parents=[common, template], help="list every architecture of a small space")
    e.add_argument("--limit", type=int)
    sub.add_parser("stats", parents=[common], help="write sampling ledger CSVs for a run")
    x = sub.add_parser("export-dot", parents=[common], help="write DOT graphs of a derived architecture")
    x.add_argument("--input", help="derived architecture.json")
    return p


COMMANDS = {
    "search": cmd_search,
    "random-baseline": lambda a: cmd_search(a, random_search=True),
    "resume": cmd_resume,
    "derive": cmd_derive,
    "count": cmd_count,
    "enumerate": cmd_enumerate,
    "stats": cmd_stats,
    "export-dot": cmd_export_dot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Timeout:
        print(f"error: run directory {args.out} is locked by another process", file=sys.stderr)
        return 1
    except (SearchAbort, CheckpointError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
