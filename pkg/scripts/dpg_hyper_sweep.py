"""Sweep DPG step size and batch on a config and print final exact KL per seed.

Usage: python3 scripts/dpg_hyper_sweep.py configs/keyword_desk.ini --alpha 0.05 0.1 --batch 100 1000
"""

import argparse
import dataclasses
import time

from guardlab.harness import experiments
from guardlab.harness.config import load_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--alpha", type=float, nargs="+", default=[0.1])
    ap.add_argument("--batch", type=int, nargs="+", default=[100])
    ap.add_argument("--methods", nargs="+", default=["warm_dpg"])
    args = ap.parse_args(argv)
    cfg = load_config(args.config)
    print("method,alpha,batch,seed,final_kl,final_ar,reach_thr,seconds")
    for alpha in args.alpha:
        for batch in args.batch:
            tr = dataclasses.replace(cfg.trainer, alpha=alpha, batch=batch)
            s = experiments.setup(dataclasses.replace(cfg, trainer=tr))
            thr = -0.2 * s.fm.log_z
            for m in args.methods:
                for i in range(cfg.experiment.seeds):
                    t0 = time.perf_counter()
                    _, curve = experiments.train_method(s, m, i)
                    print(f"{m},{alpha},{batch},{i},{curve.final.kl:.4f},{curve.final.ar:.4f},"
                          f"{curve.samples_to_reach(thr)},{time.perf_counter() - t0:.0f}", flush=True)


if __name__ == "__main__":
    main()
