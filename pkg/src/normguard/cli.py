"""Command-line front end.

Every command computes all of its outputs in memory first and only then
writes them (temp file + rename), finishing with ``manifest.json``.  The
manifest records the normalised arguments, so ``normguard replay`` can
reproduce a run byte-for-byte.  Exit codes: 0 ok, 2 usage, 3 I/O, 4 data.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .corpus import GENERATORS, CorpusFormatError, atomic_write, encode, generate, read_corpus
from .export import (
    compare_csv,
    compare_json,
    dumps,
    stats_csv,
    stats_json,
    sweep_csv,
    sweep_json,
)
from .fxp import FxpFormat
from .harness import (
    KNOBS,
    BaselineConfig,
    UsageError,
    compare_engines,
    run_distribution,
    run_sweep,
)
from .layernorm import LayerNormConfig
from .softmax import SoftmaxConfig, build_luts

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 2, 3, 4
MANIFEST = "manifest.json"
# Arguments that change how a run executes but never what it writes.
_EXECUTION_ONLY = ("jobs", "out_dir", "func")


def _softmax_cfg(a) -> SoftmaxConfig:
    f = a.lut_frac_bits
    return SoftmaxConfig(
        mode=a.mode,
        radix=a.radix,
        coarse_entries=a.coarse_entries,
        lut_fmt=FxpFormat(f + 1, f, False),
        out_bits=a.out_bits,
        div_precision=a.div_precision,
    )


def _layernorm_cfg(a) -> LayerNormConfig:
    return LayerNormConfig(
        mode=a.mode,
        newton_iters=a.newton_iters,
        working_fmt=FxpFormat(32, a.working_frac_bits, False),
        mean_frac_bits=a.mean_frac_bits,
        out_fmt=FxpFormat(32, a.out_frac_bits, True),
        epsilon_policy=a.epsilon_policy,
    )


def _load(a):
    path = Path(a.corpus)
    corpus = read_corpus(path)
    h = hashlib.sha256(path.read_bytes()).hexdigest()
    return corpus, {"path": a.corpus, "sha256": h, **{k: corpus.params[k] for k in ("rows", "cols", "fmt")}}


def _stats_outputs(prefix: str, stats, formats) -> dict[str, bytes]:
    out = {}
    if "json" in formats:
        out[f"{prefix}_stats.json"] = stats_json(stats)
    if "csv" in formats:
        out[f"{prefix}_hist.csv"] = stats_csv(stats)
    return out


# ---------------------------------------------------------------- commands

def cmd_gen(a):
    corpus = generate(a.generator, a.rows, a.cols, a.seed, std=a.std,
                      std_range=(a.std_min, a.std_max))
    data, side = encode(corpus.tensors[0])
    name = Path(a.output).name
    return {name: data, name + ".json": side}, {"corpus": corpus.descriptor()}


def cmd_softmax(a):
    corpus, desc = _load(a)
    cfg = _softmax_cfg(a)
    stats = run_distribution(corpus, cfg, a.jobs)
    return _stats_outputs("softmax", stats, a.format), {"corpus": desc, "config": cfg.to_dict()}


def cmd_layernorm(a):
    corpus, desc = _load(a)
    cfg = _layernorm_cfg(a)
    stats = run_distribution(corpus, cfg, a.jobs)
    return _stats_outputs("layernorm", stats, a.format), {"corpus": desc, "config": cfg.to_dict()}


def cmd_sweep(a):
    if len(a.levels) < 2:
        raise UsageError("sweep needs at least 2 levels")
    corpus, desc = _load(a)
    base = _layernorm_cfg(a) if a.knob == "newton_iters" else _softmax_cfg(a)
    points = run_sweep(corpus, a.knob, a.levels, base, a.jobs)
    out = {}
    if "csv" in a.format:
        out["sweep.csv"] = sweep_csv(points)
    if "json" in a.format:
        out["sweep.json"] = sweep_json(points)
    return out, {"corpus": desc, "config": base.to_dict()}


def cmd_luts(a):
    cfg = _softmax_cfg(a)
    coarse, residual = build_luts(cfg)
    out = {
        "softmax_coarse.hex": "".join(s + "\n" for s in coarse.hex_lines()).encode(),
        "softmax_residual.hex": "".join(s + "\n" for s in residual.hex_lines()).encode(),
    }
    return out, {"config": cfg.to_dict()}


def cmd_compare(a):
    corpus, desc = _load(a)
    if a.family == "softmax":
        sm = _softmax_cfg(a)
        cfgs = [
            sm,
            replace(sm, mode="float" if sm.mode == "bit" else "bit"),
            BaselineConfig("softmax-exact"),
            BaselineConfig("softmax-base2"),
        ]
    else:
        ln = _layernorm_cfg(a)
        cfgs = [
            ln,
            replace(ln, mode="float" if ln.mode == "bit" else "bit"),
            BaselineConfig("layernorm-exact"),
        ]
    table = compare_engines(corpus, cfgs, a.jobs)
    out = {}
    if "json" in a.format:
        out["compare.json"] = compare_json(table)
    if "csv" in a.format:
        out["compare.csv"] = compare_csv(table)
    return out, {"corpus": desc, "configs": [c.to_dict() for c in cfgs]}


COMMANDS = {
    "gen": cmd_gen,
    "softmax": cmd_softmax,
    "layernorm": cmd_layernorm,
    "sweep": cmd_sweep,
    "luts": cmd_luts,
    "compare": cmd_compare,
}


def _manifest(a, outputs, extra) -> bytes:
    args = {k: v for k, v in vars(a).items() if k not in _EXECUTION_ONLY}
    return dumps({
        "tool": "normguard",
        "version": __version__,
        "command": a.command,
        "seed": a.seed,
        "args": args,
        "outputs": sorted(outputs),
        **extra,
    })


def execute(a) -> int:
    outputs, extra = COMMANDS[a.command](a)
    out_dir = Path(a.out_dir)
    manifest = _manifest(a, outputs, extra)
    for name, data in outputs.items():
        atomic_write(out_dir / name, data)
    atomic_write(out_dir / MANIFEST, manifest)
    return EXIT_OK


def cmd_replay(a) -> int:
    try:
        m = json.loads(Path(a.manifest).read_bytes())
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"manifest JSON: {e.msg}", e.pos) from None
    if not isinstance(m, dict) or m.get("tool") != "normguard" or m.get("command") not in COMMANDS:
        raise CorpusFormatError(f"{a.manifest} is not a normguard manifest", 0)
    ns = argparse.Namespace(**m["args"], jobs=a.jobs, out_dir=a.out_dir)
    corpus = m.get("corpus", {})
    if "sha256" in corpus:
        h = hashlib.sha256(Path(corpus["path"]).read_bytes()).hexdigest()
        if h != corpus["sha256"]:
            raise CorpusFormatError(f"corpus {corpus['path']} changed since the manifest was written", 0)
    return execute(ns)


# ---------------------------------------------------------------- parser

def _add_softmax_flags(p):
    p.add_argument("--mode", choices=("float", "bit"), default="bit")
    p.add_argument("--radix", type=int, default=8)
    p.add_argument("--coarse-entries", type=int, default=7)
    p.add_argument("--lut-frac-bits", type=int, default=15)
    p.add_argument("--out-bits", type=int, default=15)
    p.add_argument("--div-precision", type=int, default=16)


def _add_layernorm_flags(p, mode=True):
    if mode:
        p.add_argument("--mode", choices=("float", "bit"), default="bit")
    p.add_argument("--newton-iters", type=int, default=None)
    p.add_argument("--working-frac-bits", type=int, default=24)
    p.add_argument("--mean-frac-bits", type=int, default=16)
    p.add_argument("--out-frac-bits", type=int, default=24)
    p.add_argument("--epsilon-policy", choices=("zero-output", "add-1ulp"), default="zero-output")


def _global_flags(p, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--jobs", type=int, default=d(1))
    p.add_argument("--out-dir", default=d("."))
    p.add_argument("--format", action="append", choices=("json", "csv"), default=d(None),
                   help="output format; repeat for both (default: both)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="normguard", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"normguard {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("gen", "write a seeded synthetic corpus")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--generator", choices=GENERATORS, default="gaussian-logits")
    p.add_argument("--std", type=float, default=2.0)
    p.add_argument("--std-min", type=float, default=1.0)
    p.add_argument("--std-max", type=float, default=8.0)
    p.add_argument("--output", default="corpus.bin", help="file name inside --out-dir")

    for name, flags in (("softmax", _add_softmax_flags), ("layernorm", _add_layernorm_flags)):
        p = add(name, f"{name} normalisation-error distribution")
        p.add_argument("--corpus", required=True)
        flags(p)

    p = add("sweep", "normalisation error vs approximation level")
    p.add_argument("--corpus", required=True)
    p.add_argument("--knob", choices=KNOBS, required=True)
    p.add_argument("--levels", type=int, nargs="+", required=True)
    _add_softmax_flags(p)
    _add_layernorm_flags(p, mode=False)

    p = add("luts", "export exponential LUTs as ROM hex files")
    _add_softmax_flags(p)

    p = add("compare", "proposed engines against exact and unnormalised baselines")
    p.add_argument("--corpus", required=True)
    p.add_argument("--family", choices=("softmax", "layernorm"), default="softmax")
    _add_softmax_flags(p)
    _add_layernorm_flags(p, mode=False)

    p = add("replay", "re-run the command recorded in a manifest")
    p.add_argument("manifest")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    if a.format is None:
        a.format = ["csv", "json"]
    else:
        a.format = sorted(set(a.format))
    try:
        if a.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if a.command == "replay":
            return cmd_replay(a)
        return execute(a)
    except UsageError as e:
        print(f"normguard: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CorpusFormatError as e:
        print(f"normguard: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"normguard: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # Invalid engine configuration from flags.
        print(f"normguard: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
