"""Fixed versus learned variance on normalized and x100-scaled fields.

For each data scale, trains both models for the same budget and tracks the
held-out noise-prediction MSE every tenth of the run. Writes
``normalization.csv`` (scale, learned_variance, step, heldout_mse).
"""

import argparse
import csv
from pathlib import Path

from pdmkit import dataio
from pdmkit.dataio import Dataset
from pdmkit.denoiser import DenoiserNet, NetConfig
from pdmkit.schedule import make_schedule
from pdmkit.trainer import TrainConfig, Trainer, evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/normalization")
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--scales", default="1,100")
    ap.add_argument("--lam", type=float, default=0.001)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    s = make_schedule("linear", 1000)
    data, _ = dataio.normalize(dataio.synth_grf(2000, 8, 1.0, 2.0, seed=1), "symmetric")
    with open(out / "normalization.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", "learned_variance", "step", "heldout_mse"])
        for scale in [float(v) for v in args.scales.split(",")]:
            train = Dataset(scale * data.images[:1600])
            held = Dataset(scale * data.images[1600:])
            best = {}
            for learned in (False, True):
                net = DenoiserNet(NetConfig((1, 8, 8), learned_variance=learned), seed=0)
                tr = Trainer(net, s, train, TrainConfig(steps=args.steps, lam=args.lam, seed=0))
                best[learned] = float("inf")
                for _ in range(10):
                    tr.run(args.steps // 10)
                    mse = evaluate(net, s, held, lam=args.lam, repeats=2)["mse"]
                    best[learned] = min(best[learned], mse)
                    w.writerow([scale, learned, tr.step, mse])
            print(f"scale {scale:g}: best fixed {best[False]:.4f}, learned {best[True]:.4f}, ratio {best[False] / best[True]:.3f}")


if __name__ == "__main__":
    main()
