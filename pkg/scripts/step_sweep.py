"""Train a learned-variance model on 8x8 Gaussian random fields, then score
samples drawn with different numbers of respaced steps.

Writes ``step_sweep.csv`` (steps, sampler, variogram_rmse, fid, precision,
recall) and the loss curve ``loss.csv`` into ``--out``.
"""

import argparse
import csv
import time
from pathlib import Path

from pdmkit import dataio
from pdmkit.dataio import Dataset
from pdmkit.denoiser import DenoiserNet, NetConfig
from pdmkit.metrics import feature_extract, fid, fit_pca, improved_pr, semivariogram, variogram_distance
from pdmkit.sampler import SamplerConfig, sample
from pdmkit.schedule import make_schedule
from pdmkit.trainer import TrainConfig, Trainer, write_loss_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/step_sweep")
    ap.add_argument("--train-steps", type=int, default=5000)
    ap.add_argument("--sample-steps", default="5,10,20,50,100,250,1000")
    ap.add_argument("--count", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    s = make_schedule("linear", 1000)
    data, _ = dataio.normalize(dataio.synth_grf(2000, 8, 1.0, 2.0, seed=args.seed + 1), "symmetric")
    train, held = Dataset(data.images[:1600]), Dataset(data.images[1600:])
    net = DenoiserNet(NetConfig((1, 8, 8), learned_variance=True), seed=args.seed)
    t0 = time.perf_counter()
    rows = Trainer(net, s, train, TrainConfig(steps=args.train_steps, seed=args.seed)).run(args.train_steps)
    write_loss_csv(out / "loss.csv", rows)
    print(f"trained {args.train_steps} steps in {time.perf_counter() - t0:.0f}s")

    real_vg = semivariogram(held.images)
    proj = fit_pca(held.images, 16)
    real_f = feature_extract(held.images, "flatten_pca", projection=proj)
    with open(out / "step_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["steps", "sampler", "variogram_rmse", "fid", "precision", "recall"])
        for k in [int(v) for v in args.sample_steps.split(",")]:
            for name, cfg in (("ancestral", SamplerConfig("ancestral", "learned", steps=k, seed=3)),
                              ("ddim", SamplerConfig("ddim", steps=k, clamp_x0=True, seed=3))):
                gen = sample(net, s, cfg, args.count, (1, 8, 8)).images
                gen_f = feature_extract(gen, "flatten_pca", projection=proj)
                p, r = improved_pr(real_f, gen_f, 3)
                row = [k, name, variogram_distance(real_vg, semivariogram(gen)), fid(real_f, gen_f), p, r]
                w.writerow(row)
                print(*(f"{v:.4g}" if isinstance(v, float) else v for v in row))


if __name__ == "__main__":
    main()
