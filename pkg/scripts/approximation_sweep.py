"""Normalisation error against approximation level for every sweep knob.

One CSV per knob (columns knob, level, mean_error, max_error,
rows_evaluated), all on the same seeded corpus.

    python scripts/approximation_sweep.py --rows 4000 --out-dir runs/sweep
"""
import argparse
from pathlib import Path

from normguard.corpus import GENERATORS, atomic_write, generate
from normguard.export import sweep_csv
from normguard.harness import run_sweep
from normguard.layernorm import LayerNormConfig

SWEEPS = {
    "lut_frac_bits": list(range(8, 17)),
    "div_precision": [4, 8, 12, 16, 20, 24],
    "residual_entries": [2, 4, 8, 16, 32],
    "newton_iters": [1, 2, 3, 4, 5],
}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=4000)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--generator", choices=GENERATORS, default="gaussian-logits")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--out-dir", type=Path, default=Path("runs/sweep"))
    a = p.parse_args(argv)

    corpus = generate(a.generator, a.rows, a.cols, a.seed)
    runs = [(knob, None, knob) for knob in SWEEPS]
    # float mode shows the iteration count with no working-format floor
    runs.append(("newton_iters", LayerNormConfig(mode="float"), "newton_iters_float"))
    for knob, base, name in runs:
        points = run_sweep(corpus, knob, SWEEPS[knob], base, a.jobs)
        atomic_write(a.out_dir / f"{name}.csv", sweep_csv(points))
        print(name)
        for pt in points:
            print(f"  {pt.level:>4}  mean {pt.mean_error:.3e}  max {pt.max_error:.3e}")


if __name__ == "__main__":
    main()
