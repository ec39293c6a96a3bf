"""Command line: ``pdmkit {train,sample,eval,synth,inspect}``.

Every command resolves its flags into a :class:`RunConfig`, writes it to
``<out>/config.txt`` and derives all outputs from it, so
``pdmkit <cmd> --config <out>/config.txt --out other`` repeats the run.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics
from .config import RunConfig, parse_kv, parse_list, parse_shape
from .dataio import Dataset
from .denoiser import NO_CONDITION, Condition, DenoiserNet, NetConfig, OracleDenoiser, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, PdmError
from .sampler import SamplerConfig, sample
from .schedule import make_schedule
from .trainer import TrainConfig, Trainer, write_loss_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class Console:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, *args) -> None:
        if not self.quiet:
            print(*args)


def build_schedule(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.kind, s.T, s.beta_start, s.beta_end, s.cosine_s)


def load_dataset(path: str, labels: str = "") -> Dataset:
    if not path:
        raise DataError("no dataset path given (data.train)")
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset not found: {path}")
    with open(p, "rb") as fh:
        head = fh.read(4)
    if head == dataio.TENSOR_MAGIC:
        return dataio.load_tensor(p)
    return dataio.load_idx(p, labels or None)


def prepare_training_data(cfg: RunConfig) -> Dataset:
    ds = load_dataset(cfg.data.train, cfg.data.labels)
    if cfg.data.normalize != "none":
        ds, _ = dataio.normalize(ds, cfg.data.normalize)
    if cfg.data.scale != 1.0:
        ds = Dataset(ds.images * cfg.data.scale, ds.labels, ds.ledger, ds.name, ds.source)
    return ds


def net_config(cfg: RunConfig, shape) -> NetConfig:
    m = cfg.model
    return NetConfig(
        image_shape=shape,
        hidden=tuple(parse_list(m.hidden, int)),
        time_dim=m.time_dim,
        learned_variance=m.learned_variance,
        cond_kind=m.cond,
        num_classes=m.num_classes,
        class_dim=m.class_dim,
        low_res_factor=m.low_res_factor,
    )


def schedule_record(cfg: RunConfig) -> dict:
    return {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("schedule.")}


def cmd_train(cfg: RunConfig, out: Path, say: Console) -> None:
    dataset = prepare_training_data(cfg)
    schedule = build_schedule(cfg)
    t = cfg.train
    tc = TrainConfig(t.steps, t.batch, t.lr, t.lam, t.importance_sampling, t.seed, t.checkpoint_every)
    if t.epochs > 0:
        tc.steps = math.ceil(t.epochs * len(dataset) / t.batch)
    if t.resume:
        trainer = Trainer.resume(t.resume, schedule, dataset, tc)
    else:
        net = DenoiserNet(net_config(cfg, dataset.shape), seed=cfg.model.init_seed)
        trainer = Trainer(net, schedule, dataset, tc)
    if dataset.ledger:
        dataio.save_ledger(dataset.ledger, out / "ledger.csv")

    loss_path = out / "loss.csv"
    rows: list = []
    if t.resume and loss_path.exists():
        kept = loss_path.read_text().splitlines()[1:]
        rows = [_parse_loss_row(line) for line in kept if int(line.split(",")[1]) <= trainer.step]

    def state_extra():
        extra = trainer.state()
        extra["schedule"] = schedule_record(cfg)
        extra["normalize"] = cfg.data.normalize
        return extra

    def save(path):
        save_checkpoint(path, trainer.net, trainer.adam, state_extra())

    say(f"training {trainer.net.num_parameters()} parameters for {tc.steps - trainer.step} steps")
    while trainer.step < tc.steps:
        row = trainer.run(1)[0]
        rows.append(row)
        if tc.checkpoint_every and trainer.step % tc.checkpoint_every == 0:
            save(out / f"ckpt_{trainer.step:07d}.pdmw")
        if trainer.step % max(1, tc.steps // 10) == 0:
            say(f"step {row[1]} total={row[2]:.5f} mse={row[3]:.5f} vlb={row[4]:.5f}")
    save(out / "model.pdmw")
    write_loss_csv(loss_path, rows)


def _parse_loss_row(line: str):
    e, s, a, b, c = line.split(",")
    return int(e), int(s), float(a), float(b), float(c)


def _clamp_setting(cfg: RunConfig, normalize_mode: str) -> bool:
    v = cfg.sample.clamp_x0.lower()
    if v == "auto":
        return normalize_mode == "symmetric"
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"sample.clamp_x0 must be auto/true/false, got {cfg.sample.clamp_x0!r}")


def cmd_sample(cfg: RunConfig, out: Path, say: Console) -> None:
    s = cfg.sample
    schedule = build_schedule(cfg)
    if s.oracle:
        params = parse_kv(s.oracle)
        unknown = set(params) - {"mu0", "sigma0", "sigma0_sq"}
        if unknown:
            raise ConfigError(f"unknown oracle parameters {sorted(unknown)}")
        var = params["sigma0"] ** 2 if "sigma0" in params else params.get("sigma0_sq", 1.0)
        denoiser = OracleDenoiser(schedule, params.get("mu0", 0.0), var)
        shape = parse_shape(s.shape)
        normalize_mode = "none"
        cond_kind = "none"
    elif s.checkpoint:
        if not Path(s.checkpoint).exists():
            raise DataError(f"checkpoint not found: {s.checkpoint}")
        denoiser, _, extra = load_checkpoint(s.checkpoint)
        if extra and "schedule" in extra and extra["schedule"] != schedule_record(cfg):
            raise ConfigError(f"checkpoint was trained with schedule {extra['schedule']}, config has {schedule_record(cfg)}")
        shape = denoiser.config.image_shape
        normalize_mode = (extra or {}).get("normalize", "none")
        cond_kind = denoiser.config.cond_kind
    else:
        raise ConfigError("sample needs sample.checkpoint or sample.oracle")

    cond = NO_CONDITION
    if cond_kind == "class_label":
        if s.class_id < 0:
            raise ConfigError("class-conditional model needs sample.class_id")
        cond = Condition("class_label", class_id=np.array([s.class_id]))
    elif cond_kind == "low_res":
        lr = load_dataset(s.low_res).images
        if lr.shape[0] < s.count:
            raise DataError(f"{lr.shape[0]} low-res images for {s.count} samples")
        cond = Condition("low_res", low_res=lr[: s.count])

    sc = SamplerConfig(
        method=s.method,
        variance_mode=s.variance_mode,
        steps=s.steps or None,
        spacing=s.spacing,
        clamp_x0=_clamp_setting(cfg, normalize_mode),
        eta=s.eta,
        seed=s.seed,
    )
    fractions = [p / 100.0 for p in parse_list(s.snapshot_at)] if s.snapshot_at else None
    res = sample(denoiser, schedule, sc, s.count, shape, cond, fractions)
    images = res.images
    if s.ledger:
        ledger = dataio.load_ledger(s.ledger)
        images, drawn = dataio.rescale_generated(images, ledger, np.random.default_rng(np.random.SeedSequence(s.seed, spawn_key=(1,))))
        with open(out / "rescale_assignments.csv", "w") as fh:
            fh.write("image,record\n")
            fh.writelines(f"{i},{k}\n" for i, k in enumerate(drawn))
    dataio.save_tensor(Dataset(images), out / "samples.pdmt")
    if shape[0] == 1 and s.count > 0:
        cols = max(1, min(s.grid_cols, s.count))
        dataio.export_pgm(images, out / "samples.pgm", math.ceil(s.count / cols), cols)
        if res.snapshots is not None:
            n_panels = res.snapshots.shape[1]
            strip = res.snapshots.reshape((-1,) + tuple(shape))
            dataio.export_pgm(strip, out / "trajectory.pgm", s.count, n_panels)
    say(f"wrote {s.count} samples ({len(res.steps)} steps, {sc.method}) to {out}")


def cmd_eval(cfg: RunConfig, out: Path, say: Console) -> None:
    e = cfg.eval
    real = load_dataset(e.real)
    gen = load_dataset(e.gen)
    if real.shape != gen.shape:
        raise DataError(f"real {real.shape} and generated {gen.shape} shapes differ")
    gen_images = gen.images
    if e.rescale != "none":
        if e.rescale not in ("per_sample", "per_batch"):
            raise ConfigError(f"eval.rescale must be none/per_sample/per_batch, got {e.rescale!r}")
        gen_images = dataio.rescale_to_range(gen_images, "symmetric", e.rescale == "per_sample")
    wanted = [m.strip() for m in e.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"fid", "pr", "variogram"}
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}")

    rows = []
    if "fid" in wanted or "pr" in wanted:
        if e.real_features or e.gen_features:
            if not (e.real_features and e.gen_features):
                raise ConfigError("give both eval.real_features and eval.gen_features")
            fr, fg = metrics.load_features(e.real_features), metrics.load_features(e.gen_features)
        elif e.features == "flatten_pca":
            proj = metrics.fit_pca(real.images, e.feature_dim)
            fr = metrics.feature_extract(real.images, "flatten_pca", projection=proj)
            fg = metrics.feature_extract(gen_images, "flatten_pca", projection=proj)
        else:
            fr = metrics.feature_extract(real.images, e.features)
            fg = metrics.feature_extract(gen_images, e.features)
        if "fid" in wanted:
            rows.append(("fid", metrics.fid(fr, fg)))
        if "pr" in wanted:
            p, r = metrics.improved_pr(fr, fg, e.k)
            rows += [("precision", p), ("recall", r)]
    if "variogram" in wanted:
        kw = dict(max_lag=e.variogram_max_lag or None, delta=e.variogram_delta, pair_budget=e.pair_budget)
        vr = metrics.semivariogram(real.images, **kw)
        vg = metrics.semivariogram(gen_images, **kw)
        vr.to_csv(out / "variogram_real.csv")
        vg.to_csv(out / "variogram_gen.csv")
        rows.append(("variogram_rmse", metrics.variogram_distance(vr, vg)))
    metrics.append_metrics(out / "metrics.csv", rows)
    for name, value in rows:
        say(f"{name}: {value:.6g}")


def cmd_synth(cfg: RunConfig, out: Path, say: Console) -> None:
    s = cfg.synth
    if s.kind == "grf":
        ds = dataio.synth_grf(s.n, s.side, s.sigma2, s.rho, s.seed)
    elif s.kind == "gaussian":
        ds = dataio.synth_gaussian(s.n, parse_shape(s.shape), s.mu0, s.sigma0_sq, s.seed)
    elif s.kind == "idx":
        if not s.idx_images:
            raise ConfigError("synth idx needs synth.idx_images")
        ds = dataio.load_idx(s.idx_images, s.idx_labels or None)
    else:
        raise ConfigError(f"unknown synth kind {s.kind!r}")
    dataio.save_tensor(ds, out / "dataset.pdmt")
    say(f"wrote {len(ds)} images of shape {ds.shape} to {out / 'dataset.pdmt'}")


def cmd_inspect(path: str, say: Console) -> None:
    p = Path(path)
    if not p.exists():
        raise DataError(f"file not found: {path}")
    head = p.read_bytes()[:4]
    if head == dataio.TENSOR_MAGIC:
        ds = dataio.load_tensor(p)
        x = ds.images
        say(f"PDMT tensor: count={len(ds)} shape={ds.shape} labels={'yes' if ds.labels is not None else 'no'}")
        if x.size:
            say(f"  min={x.min():.6g} max={x.max():.6g} mean={x.mean():.6g} std={x.std():.6g}")
    elif head == metrics.FEATURE_MAGIC:
        fs = metrics.load_features(p)
        say(f"PDMF features: n={fs.n} d={fs.d}")
        if fs.matrix.size:
            say(f"  mean |x|={np.abs(fs.matrix).mean():.6g}")
    elif head == b"PDMW":
        net, adam, extra = load_checkpoint(p)
        say(f"PDMW checkpoint: {net.num_parameters()} parameters, config={net.config.to_json()}")
        say(f"  adam={'step ' + str(adam.step) if adam else 'none'} trainer_step={(extra or {}).get('step', '-')}")
    else:
        raise DataError(f"unrecognised file magic {head!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", default="run", help="run directory (created if missing)")
    p.add_argument("--seed", type=int, help="overrides train.seed / sample.seed / synth.seed")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdmkit", description="Toy-scale diffusion models and sample-quality metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser")
    _add_common(p)
    p.add_argument("--data", dest="data.train")
    p.add_argument("--steps", dest="train.steps")
    p.add_argument("--resume", dest="train.resume")

    p = sub.add_parser("sample", help="generate images")
    _add_common(p)
    p.add_argument("--checkpoint", dest="sample.checkpoint")
    p.add_argument("--oracle", dest="sample.oracle", help="e.g. mu0=0,sigma0=1")
    p.add_argument("--method", dest="sample.method", choices=["ancestral", "ddim"])
    p.add_argument("--variance", dest="sample.variance_mode", choices=["fixed_beta", "fixed_beta_tilde", "learned"])
    p.add_argument("--steps", dest="sample.steps")
    p.add_argument("--eta", dest="sample.eta")
    p.add_argument("--count", dest="sample.count")
    p.add_argument("--shape", dest="sample.shape")
    p.add_argument("--snapshot-at", dest="sample.snapshot_at", help="percent of steps, e.g. 0,25,50,75,100")
    p.add_argument("--ledger", dest="sample.ledger")

    p = sub.add_parser("eval", help="compare real and generated datasets")
    _add_common(p)
    p.add_argument("--real", dest="eval.real")
    p.add_argument("--gen", dest="eval.gen")
    p.add_argument("--metrics", dest="eval.metrics")
    p.add_argument("--k", dest="eval.k")
    p.add_argument("--real-features", dest="eval.real_features")
    p.add_argument("--gen-features", dest="eval.gen_features")

    p = sub.add_parser("synth", help="write a synthetic or converted dataset")
    _add_common(p)
    p.add_argument("kind", nargs="?", choices=["grf", "gaussian", "idx"])
    p.add_argument("--n", dest="synth.n")
    p.add_argument("--side", dest="synth.side")
    p.add_argument("--sigma2", dest="synth.sigma2")
    p.add_argument("--rho", dest="synth.rho")
    p.add_argument("--mu0", dest="synth.mu0")
    p.add_argument("--sigma0-sq", dest="synth.sigma0_sq")
    p.add_argument("--shape", dest="synth.shape")
    p.add_argument("--idx-images", dest="synth.idx_images")
    p.add_argument("--idx-labels", dest="synth.idx_labels")

    p = sub.add_parser("inspect", help="print header and stats of a PDMT/PDMF/PDMW file")
    p.add_argument("path")
    p.add_argument("--quiet", action="store_true")
    return parser


SEED_KEYS = {"train": "train.seed", "sample": "sample.seed", "synth": "synth.seed"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key, value in vars(args).items():
        if "." in key and value is not None:
            cfg.set(key, str(value))
    if getattr(args, "kind", None):
        cfg.set("synth.kind", args.kind)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    if args.seed is not None and args.command in SEED_KEYS:
        cfg.set(SEED_KEYS[args.command], str(args.seed))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    say = Console(args.quiet)
    try:
        if args.command == "inspect":
            cmd_inspect(args.path, say)
            return EXIT_OK
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "synth": cmd_synth}[args.command](cfg, out, say)
    except PdmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
