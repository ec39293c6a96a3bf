import numpy as np
import pytest

from pdmkit.config import RunConfig, parse_kv, parse_list, parse_shape
from pdmkit.dataio import Dataset, synth_gaussian
from pdmkit.denoiser import DenoiserNet, NetConfig
from pdmkit.errors import ConfigError, NumericError
from pdmkit.schedule import make_schedule
from pdmkit.trainer import TrainConfig, Trainer, evaluate, write_loss_csv


def small_trainer(steps=50, importance=False, cond="none", seed=0):
    ds = synth_gaussian(256, (1, 4, 4), 0.5, 0.3, seed=1)
    if cond == "class_label":
        ds = Dataset(ds.images, labels=np.arange(256) % 3)
    cfg = NetConfig(image_shape=(1, 4, 4), hidden=(32, 32), time_dim=8, learned_variance=True,
                    cond_kind=cond, num_classes=3 if cond == "class_label" else 0, class_dim=4)
    tc = TrainConfig(steps=steps, batch=16, lr=1e-3, importance_sampling=importance, seed=seed)
    return Trainer(DenoiserNet(cfg, seed=2), make_schedule("linear", 20), ds, tc)


@pytest.mark.slow
def test_gaussian_training_improves_mse():
    ds = synth_gaussian(2000, (1, 8, 8), 0.0, 1.0, seed=0)
    net = DenoiserNet(NetConfig(image_shape=(1, 8, 8)), seed=0)
    tr = Trainer(net, make_schedule("linear", 1000), ds, TrainConfig(steps=2000, batch=64))
    rows = tr.run(2000)
    mse = np.array([r[3] for r in rows])
    assert mse[-100:].mean() < mse[:100].mean()


@pytest.mark.parametrize("importance", [False, True])
@pytest.mark.parametrize("cond", ["none", "class_label"])
def test_resume_is_bit_exact(tmp_path, importance, cond):
    full = small_trainer(importance=importance, cond=cond)
    full_rows = full.run(300)
    part = small_trainer(importance=importance, cond=cond)
    part.run(120)
    part.save(tmp_path / "c.pdmw")
    again = Trainer.resume(tmp_path / "c.pdmw", part.schedule, part.dataset, part.config)
    rest = again.run(180)
    assert rest == full_rows[120:]
    for a, b in zip(again.net.params, full.net.params):
        np.testing.assert_array_equal(a, b)


def test_importance_sampler_warms_up():
    tr = small_trainer(importance=True)
    tr.run(200)
    assert tr.t_sampler.warm.all()


def test_non_finite_loss_reports_step_and_t():
    tr = small_trainer()
    tr.net.params[0][:] = np.inf
    with pytest.raises(NumericError, match=r"step 1, t="):
        tr.train_step()


def test_trainer_rejects_shape_mismatch():
    ds = synth_gaussian(10, (1, 2, 2), seed=0)
    with pytest.raises(ConfigError):
        Trainer(DenoiserNet(NetConfig(image_shape=(1, 4, 4), hidden=(4,))), make_schedule("linear", 5), ds, TrainConfig())


def test_evaluate_is_deterministic():
    tr = small_trainer()
    a = evaluate(tr.net, tr.schedule, tr.dataset)
    b = evaluate(tr.net, tr.schedule, tr.dataset)
    assert a == b and set(a) == {"total", "mse", "vlb"}


def test_loss_csv(tmp_path):
    write_loss_csv(tmp_path / "l.csv", [(0, 1, 1.5, 1.0, 500.0)])
    write_loss_csv(tmp_path / "l.csv", [(0, 2, 1.25, 0.75, 500.0)], append=True)
    assert (tmp_path / "l.csv").read_text().splitlines() == ["epoch,step,total,mse,vlb", "0,1,1.5,1.0,500.0", "0,2,1.25,0.75,500.0"]


# -- config ---------------------------------------------------------------------


def test_config_roundtrip():
    cfg = RunConfig()
    cfg.set("train.lambda", "0.5")
    cfg.set("model.learned_variance", "true")
    cfg.set("sample.oracle", "mu0=1,sigma0=2")
    back = RunConfig.loads(cfg.dumps())
    assert back == cfg
    assert back.train.lam == 0.5
    assert "train.lambda = 0.5" in cfg.dumps()


@pytest.mark.parametrize("line", ["train.bogus = 1", "nosection = 1", "extra.key = 1", "train.lam = 0.1", "train.steps = many", "model.learned_variance = maybe", "just text"])
def test_config_rejects(line):
    with pytest.raises(ConfigError):
        RunConfig.loads(line)


def test_config_comments_and_blank_lines():
    cfg = RunConfig.loads("# header\n\nschedule.T = 50  # short\n")
    assert cfg.schedule.T == 50


def test_parse_helpers():
    assert parse_shape("1x8x8") == (1, 8, 8)
    assert parse_kv("mu0=0, sigma0=1") == {"mu0": 0.0, "sigma0": 1.0}
    assert parse_list("0,25,100") == [0.0, 25.0, 100.0]
    for bad in ("8x8", "1x0x8", "axbxc"):
        with pytest.raises(ConfigError):
            parse_shape(bad)
    with pytest.raises(ConfigError):
        parse_kv("mu0")
