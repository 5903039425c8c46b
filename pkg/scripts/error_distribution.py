"""Normalisation-error histograms for softmax and LayerNorm on synthetic corpora.

Writes one histogram CSV and one stats JSON per engine into --out-dir and
prints the fraction of rows below each threshold.  Plot the CSVs with any
tool; nothing here draws.

    python scripts/error_distribution.py --rows 10000 --cols 64 --out-dir runs/dist
"""
import argparse
from pathlib import Path

from normguard.corpus import GENERATORS, atomic_write, generate
from normguard.export import stats_csv, stats_json
from normguard.harness import THRESHOLDS, BaselineConfig, engine_label, run_distribution
from normguard.layernorm import LayerNormConfig
from normguard.softmax import SoftmaxConfig

ENGINES = [
    SoftmaxConfig(mode="bit"),
    SoftmaxConfig(mode="float"),
    BaselineConfig("softmax-exact"),
    BaselineConfig("softmax-base2"),
    LayerNormConfig(mode="bit"),
    LayerNormConfig(mode="float"),
    BaselineConfig("layernorm-exact"),
]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=10_000)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--generator", choices=GENERATORS, default="attention-like")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--out-dir", type=Path, default=Path("runs/distribution"))
    a = p.parse_args(argv)

    corpus = generate(a.generator, a.rows, a.cols, a.seed)
    print(f"{a.generator} corpus, {a.rows}x{a.cols}, seed {a.seed}")
    print(f"{'engine':<18}{'mean':>11}{'max':>11}" + "".join(f"{'<' + repr(t):>10}" for t in THRESHOLDS))
    for cfg in ENGINES:
        st = run_distribution(corpus, cfg, a.jobs)
        label = engine_label(cfg)
        atomic_write(a.out_dir / f"{label}_hist.csv", stats_csv(st))
        atomic_write(a.out_dir / f"{label}_stats.json", stats_json(st))
        fb = "".join(f"{st.fraction_below[t]:>10.1%}" for t in THRESHOLDS)
        print(f"{label:<18}{st.mean:>11.3g}{st.max:>11.3g}{fb}")


if __name__ == "__main__":
    main()
