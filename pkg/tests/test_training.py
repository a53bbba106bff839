import csv
import logging

import numpy as np
import pytest
import torch

from raingen.checkpoint import load_checkpoint, params_digest
from raingen.data import PairedDataset, ToyRainParams, make_toy_rain_dataset
from raingen.networks import ArchConfig
from raingen.training import (NonFiniteLossError, TrainConfig, Trainer, apply_variant, lr_at,
                              pretrain_bnet, train)

TINY = ArchConfig(patch_size=32, latent_dim=4, rnet_base=4, gen_base=4, disc_base=4, max_width=8,
                  bnet_width=4, bnet_stages=2, bnet_resblocks=1)


def tiny_config(**kw):
    base = dict(arch=TINY, batch_size=4, patches_per_epoch=4 * 3, total_epochs=2, seed=3)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def toy():
    return make_toy_rain_dataset(ToyRainParams(n_pairs=12, image_size=32, seed=5))


def read_log(path):
    with open(path) as fh:
        return [{k: v for k, v in row.items() if k != "wallclock_s"} for row in csv.DictReader(fh)]


def hashes(trainer):
    return {k: params_digest(trainer.nets.part(k).state_dict()) for k in trainer.nets.PARTS}


def test_defaults_echo_reference_settings():
    cfg = TrainConfig()
    assert cfg.base_lrs == {"W_B": 2e-4, "W_R": 1e-4, "theta": 1e-4, "W_D": 4e-4}
    assert (cfg.n_critic, cfg.lambda_gp, cfg.t, cfg.eps0_sq, cfg.batch_size) == (5, 10.0, 128, 1e-6, 18)
    assert cfg.patches_per_epoch == 18 * 3000 and cfg.steps_per_epoch == 3000
    assert cfg.decay_epochs == [400, 600, 650, 675, 690, 700] and cfg.gamma == 1.0


def test_lr_schedule():
    assert lr_at(0, 2e-4, [400, 600]) == 2e-4
    assert lr_at(400, 2e-4, TrainConfig().decay_epochs) == 1e-4
    assert lr_at(700, 2e-4, TrainConfig().decay_epochs) == 2e-4 / 64
    lrs = [lr_at(e, 1.0, TrainConfig().decay_epochs) for e in range(0, 720)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for e in TrainConfig().decay_epochs:
        assert lr_at(e, 1.0, TrainConfig().decay_epochs) == lr_at(e - 1, 1.0, TrainConfig().decay_epochs) / 2


@pytest.mark.parametrize("kw", [dict(n_critic=0), dict(decay_epochs=[5, 5]), dict(eps0_sq=0.0),
                                dict(variant="half"), dict(base_lrs={"W_B": 1.0}),
                                dict(base_lrs={"W_B": 1.0, "W_R": 0.0, "theta": 1.0, "W_D": 1.0})])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_round_trip_and_unknown_keys():
    cfg = tiny_config(gamma=0.01)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="lr_G"):
        TrainConfig.from_dict({**cfg.to_dict(), "lr_G": 1.0})


def test_variant_policy():
    cfg = tiny_config()
    cfg.variant = "bogus"
    with pytest.raises(ValueError):
        apply_variant(cfg)
    pol = apply_variant(tiny_config(variant="no_bnet"))
    x = torch.rand(2, 3, 8, 8)
    b, kl, post = pol.background(None, x + 1, x, torch.randn_like(x))
    assert b is x and float(kl) == 0.0 and post is None


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        Trainer(tiny_config(), PairedDataset([], [], []))


def test_smoke_run_finite_and_counts(toy, tmp_path):
    trainer, means = train(toy, tiny_config(), out_dir=tmp_path)
    assert len(means) == 2
    assert all(np.isfinite(m[k]) for m in means for k in ("adv", "kl_z", "kl_b", "total"))
    assert trainer.counts["critic"] == 5 * trainer.counts["rnet_g"] == 5 * trainer.counts["bnet"]
    rows = read_log(tmp_path / "loss_log.csv")
    assert len(rows) == 6
    assert list(rows[0])[:8] == ["epoch", "step", "adv", "kl_z", "kl_b", "total", "lr_D", "lr_G"]
    assert (tmp_path / "last.vrg").exists() and (tmp_path / "train_config.json").exists()


def test_update_isolation(toy):
    trainer = Trainer(tiny_config(), toy)
    gen = torch.Generator().manual_seed(0)
    o, x = (torch.as_tensor(a) for a in (np.stack([v.transpose(2, 0, 1) for v in toy.rainy[:4]]),
                                          np.stack([v.transpose(2, 0, 1) for v in toy.clean[:4]])))
    sn_buffers = lambda: {n: b.clone() for n, b in trainer.nets.disc.named_buffers()}

    before = hashes(trainer)
    trainer.critic_update(o, x, gen)
    after = hashes(trainer)
    assert [k for k in before if before[k] != after[k]] == ["W_D"]

    before, buf = after, sn_buffers()
    b, _ = trainer.bnet_update(o, x, gen)
    after = hashes(trainer)
    assert [k for k in before if before[k] != after[k]] == ["W_B"]
    assert all(torch.equal(buf[n], v) for n, v in sn_buffers().items())

    before = after
    trainer.rnet_g_update(o, b, gen)
    after = hashes(trainer)
    assert sorted(k for k in before if before[k] != after[k]) == ["W_R", "theta"]
    assert all(torch.equal(buf[n], v) for n, v in sn_buffers().items())
    assert all(p.requires_grad for p in trainer.nets.parameters())


def test_deterministic_logs(toy, tmp_path):
    train(toy, tiny_config(), out_dir=tmp_path / "a")
    train(toy, tiny_config(), out_dir=tmp_path / "b")
    assert read_log(tmp_path / "a" / "loss_log.csv") == read_log(tmp_path / "b" / "loss_log.csv")


def test_resume_equals_uninterrupted(toy, tmp_path):
    cfg = tiny_config(total_epochs=4)
    full, _ = train(toy, cfg, out_dir=tmp_path / "full")
    first, _ = train(toy, cfg, out_dir=tmp_path / "split", epochs=2)
    resumed = Trainer.resume(tmp_path / "split" / "last.vrg", toy, out_dir=tmp_path / "split")
    resumed.fit()
    assert read_log(tmp_path / "full" / "loss_log.csv") == read_log(tmp_path / "split" / "loss_log.csv")
    assert hashes(full) == hashes(resumed)


def test_no_bnet_variant(toy, tmp_path):
    trainer = Trainer(tiny_config(variant="no_bnet"), toy, out_dir=tmp_path)
    w_b = params_digest(trainer.nets.bnet.state_dict())
    trainer.fit()
    assert all(r["kl_b"] == 0.0 for r in trainer.history)
    assert params_digest(trainer.nets.bnet.state_dict()) == w_b
    assert trainer.counts["bnet"] == 0
    assert "W_B" not in load_checkpoint(tmp_path / "last.vrg").params


def test_full_checkpoint_into_no_bnet_warns(toy, tmp_path, caplog):
    src, _ = train(toy, tiny_config(), out_dir=tmp_path)
    target = Trainer(tiny_config(variant="no_bnet"), toy)
    w_b = params_digest(target.nets.bnet.state_dict())
    with caplog.at_level(logging.WARNING):
        target.load_state(load_checkpoint(tmp_path / "last.vrg"))
    assert "ignoring BNet" in caplog.text
    assert params_digest(target.nets.bnet.state_dict()) == w_b
    assert params_digest(target.nets.generator.state_dict()) == params_digest(src.nets.generator.state_dict())


def test_non_finite_abort_writes_snapshot(tmp_path):
    img = np.full((32, 32, 3), np.nan, dtype=np.float32)
    ds = PairedDataset([img], [np.zeros_like(img)], ["nan"])
    with pytest.raises(NonFiniteLossError):
        train(ds, tiny_config(), out_dir=tmp_path)
    assert (tmp_path / "abort_snapshot" / "diagnostic.json").exists()
    assert (tmp_path / "abort_snapshot" / "state.vrg").exists()


def test_gamma_scales_adversarial_term(toy):
    a = Trainer(tiny_config(gamma=1.0), toy)
    b = Trainer(tiny_config(gamma=0.01), toy)
    a.run_epoch()
    b.run_epoch()
    ha, hb = a.history[0], b.history[0]
    assert ha["total"] == pytest.approx(ha["adv"] + ha["kl_z"] + ha["kl_b"], rel=1e-6)
    assert hb["total"] == pytest.approx(0.01 * hb["adv"] + hb["kl_z"] + hb["kl_b"], rel=1e-6)


def test_pretrain_and_warm_start(toy):
    sd, losses = pretrain_bnet(toy, TINY, steps=5, batch_size=4, lr=1e-3)
    assert len(losses) == 5 and all(np.isfinite(losses))
    trainer = Trainer(tiny_config(), toy)
    trainer.warm_start_bnet(sd)
    assert params_digest(trainer.nets.bnet.state_dict()) == params_digest(sd)
    with pytest.raises(ValueError):
        Trainer(tiny_config(variant="no_bnet"), toy).warm_start_bnet(sd)


def test_pretrain_mse_loss(toy):
    _, losses = pretrain_bnet(toy, TINY, steps=3, batch_size=4, lr=1e-3, loss="mse")
    assert all(v >= 0 for v in losses)
    with pytest.raises(ValueError):
        pretrain_bnet(toy, TINY, steps=1, loss="l1")
