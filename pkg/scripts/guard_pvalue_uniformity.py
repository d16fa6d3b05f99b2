"""Check that GUARD chi-square p-values are uniform over random small instances.

A correct sampler gives p ~ U(0, 1), so about 0.1% of instances fall below
1e-3.  Prints the p-values, the fraction below 1e-3 and a KS test against U(0, 1).
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from scipy import stats

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from conftest import chi_square_pvalue  # noqa: E402
from test_acceptance import random_instance  # noqa: E402

from guardlab import samplers  # noqa: E402
from guardlab.gold_model import FilteredModel  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=200)
    ap.add_argument("--draws", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    ps = []
    while len(ps) < args.instances:
        a, _, b = random_instance(rng)
        fm = FilteredModel(a, b)
        if len(fm.gold) < 2 or len(fm.gold) > 200:
            continue
        seqs, lengths, _ = samplers.guard_sample_batch(a, b, args.draws, rng)
        ps.append(chi_square_pvalue(seqs, lengths, fm.gold))
    ps = np.array(ps)
    print(f"{len(ps)} instances, {args.draws} draws each")
    print(f"fraction p < 1e-3: {np.mean(ps < 1e-3):.4f}; fraction p < 0.05: {np.mean(ps < 0.05):.3f}")
    print(f"KS vs U(0,1): p = {stats.kstest(ps, 'uniform').pvalue:.3f}")


if __name__ == "__main__":
    main()
