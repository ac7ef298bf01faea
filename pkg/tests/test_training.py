import math

import numpy as np
import pytest

from exprsynth.autodiff import Tensor
from exprsynth.autodiff.checkpoint import load_checkpoint
from exprsynth.networks import IdentityConfig, IdentityNet
from exprsynth.training import (
    TrainConfig,
    TrainingError,
    Trainer,
    alpha3_schedule,
    build_nets,
    cycle_loss,
    discriminator_adv_loss,
    generator_adv_loss,
    identity_loss,
    make_batch,
    batch_indices,
    parse_log_line,
    pixel_loss,
    total_generator_loss,
    train_loop,
)

LN_FLOOR = math.log(1e-12)


def small_config(**kw):
    base = dict(
        image_size=16, iterations=6, batch_size=2, gen_channels=(4, 6), disc_channels=(4,),
        disc_strides=(2, 1), checkpoint_every=3, seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


def frozen_identity(seed=0, size=16):
    net = IdentityNet(IdentityConfig(1, size, (2, 2, 2, 2, 2), 4, 3), np.random.default_rng(seed))
    return net.eval().requires_grad_(False)


@pytest.fixture(scope="module")
def samples(synthetic):
    return synthetic.subset("train")[:12]


def scalar_oracle(values, f):
    flat = np.asarray(values, dtype=float).ravel()
    return sum(f(float(v)) for v in flat) / len(flat)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# ------------------------------------------------------------------ losses


def test_generator_adv_closed_forms(rng):
    assert abs(generator_adv_loss(Tensor(np.zeros((2, 1, 3, 3)))).item() - math.log(2)) <= 1e-9
    assert abs(generator_adv_loss(Tensor(np.full((1, 1, 2, 2), 30.0))).item()) <= 1e-9
    logits = rng.normal(0, 3, (2, 1, 4, 5))
    ref = scalar_oracle(logits, lambda x: -math.log(sigmoid(x)))
    assert abs(generator_adv_loss(Tensor(logits)).item() - ref) <= 1e-12


def test_discriminator_adv_closed_forms(rng):
    zero = Tensor(np.zeros((1, 1, 3, 3)))
    assert abs(discriminator_adv_loss(zero, zero).item() - 2 * math.log(0.5)) <= 1e-12
    # sigma(-30) ~ 9.4e-14 falls under the 1e-12 floor, so each term clamps to ln(1e-12)
    perfect = discriminator_adv_loss(Tensor(np.full((1, 1, 2, 2), 30.0)), Tensor(np.full((1, 1, 2, 2), -30.0)))
    assert abs(perfect.item() - 2 * LN_FLOOR) <= 1e-9
    real, fake = rng.normal(0, 2, (2, 1, 3, 3)), rng.normal(0, 2, (2, 1, 3, 3))
    ref = scalar_oracle(real, lambda x: math.log(1 - sigmoid(x))) + scalar_oracle(fake, lambda x: math.log(sigmoid(x)))
    assert abs(discriminator_adv_loss(Tensor(real), Tensor(fake)).item() - ref) <= 1e-12


@pytest.mark.parametrize("loss", [pixel_loss, cycle_loss])
def test_l1_losses(loss, rng):
    a = rng.uniform(0, 1, (2, 1, 4, 4))
    assert loss(Tensor(a), Tensor(a)).item() == 0.0
    b = np.full((2, 1, 4, 4), 0.25)
    assert loss(Tensor(b + 0.125), Tensor(b)).item() == 0.125
    c = rng.uniform(0, 1, a.shape)
    assert abs(loss(Tensor(a), Tensor(c)).item() - scalar_oracle(a - c, abs)) <= 1e-12
    with pytest.raises(ValueError, match="shape"):
        loss(Tensor(a), Tensor(c[:1]))


def test_pixel_offset_case_exact():
    a = np.full((1, 1, 8, 8), 0.5)
    assert pixel_loss(Tensor(a + 0.25), Tensor(a)).item() == 0.25
    assert cycle_loss(Tensor(a), Tensor(a - 0.125)).item() == 0.125


def test_identity_loss_stub_and_real(rng):
    a = rng.uniform(0, 1, (2, 1, 16, 16))
    assert identity_loss(lambda t: t, Tensor(a), Tensor(a)).item() == 0.0
    off = identity_loss(lambda t: t, Tensor(a), Tensor(a + 0.25)).item()
    assert abs(off - 0.25) <= 1e-12
    net = frozen_identity()
    b = rng.uniform(0, 1, a.shape)
    fa, fb = net(Tensor(a)).data, net(Tensor(b)).data
    assert abs(identity_loss(net, Tensor(a), Tensor(b)).item() - np.abs(fa - fb).mean()) <= 1e-12
    with pytest.raises(ValueError, match="shape"):
        identity_loss(net, Tensor(a), Tensor(b[:1]))


def test_total_loss_arithmetic():
    assert abs(total_generator_loss(1, 1, 1, 1, 10, 5, 0.1) - 16.1) <= 1e-12
    assert total_generator_loss(0, 0, 0, 0, 10, 5, 0.1) == 0
    assert abs(total_generator_loss(0.7, 0.02, 0.03, 0.4, 10, 5, 0.5) - 1.25) <= 1e-12
    t = total_generator_loss(*(Tensor(np.asarray(v)) for v in (0.7, 0.02, 0.03, 0.4)), 10, 5, 0.5)
    assert abs(t.item() - 1.25) <= 1e-12
    with pytest.raises(ValueError):
        total_generator_loss(1, 1, 1, 1, 10, -5, 0.1)


def test_alpha3_schedule():
    assert alpha3_schedule(0, 1000) == 0.1
    assert abs(alpha3_schedule(800, 1000) - 0.5) <= 1e-12
    assert abs(alpha3_schedule(1000, 1000) - 0.5) <= 1e-12
    assert abs(alpha3_schedule(400, 1000) - 0.3) <= 1e-12
    vals = [alpha3_schedule(i, 100) for i in range(101)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        alpha3_schedule(1001, 1000)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha1=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig().sigma == 1.0
    assert TrainConfig(image_size=128).sigma == 2.0


# ------------------------------------------------------------------ batches


def test_batch_indices_cover_each_epoch():
    n, bs = 7, 3
    seen = np.concatenate([batch_indices(n, bs, 0, it) for it in range(7)])
    for epoch in range(3):
        assert sorted(seen[epoch * n : (epoch + 1) * n]) == list(range(n))
    assert np.array_equal(batch_indices(n, bs, 0, 4), batch_indices(n, bs, 0, 4))


def test_make_batch_shapes(samples):
    batch = make_batch(samples, small_config(), 0)
    assert batch["neutral"].shape == (2, 1, 16, 16)
    assert batch["heatmap"].shape == (2, 18, 16, 16)


# ------------------------------------------------------------------- steps


def test_zero_lr_step_is_noop(samples):
    cfg = small_config(learning_rate=0.0)
    nets = build_nets(cfg, frozen_identity())
    trainer = Trainer(nets, cfg)
    before = {k: v.copy() for k, v in nets.state_dict().items() if "running" not in k}
    trainer.train_step(make_batch(samples, cfg, 0), 0)
    after = nets.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_step_report_weighted_sum_and_freeze(samples):
    cfg = small_config()
    ident = frozen_identity()
    frozen = {k: v.copy() for k, v in ident.state_dict().items()}
    nets = build_nets(cfg, ident)
    trainer = Trainer(nets, cfg)
    for it in range(3):
        r = trainer.train_step(make_batch(samples, cfg, it), it)
        recomputed = total_generator_loss(r.g_adv, r.pixel, r.cyc, r.identity, cfg.alpha1, cfg.alpha2, r.alpha3)
        assert abs(r.g_total - recomputed) <= 1e-10
    assert all(np.array_equal(frozen[k], v) for k, v in ident.state_dict().items())
    assert all(not p.requires_grad for p in ident.parameters())
    # discriminators are re-enabled after the generator pass
    assert all(p.requires_grad for p in nets.d_expr.parameters())


def test_discriminator_step_does_not_touch_generators(samples, monkeypatch):
    cfg = small_config()
    nets = build_nets(cfg, frozen_identity())
    trainer = Trainer(nets, cfg)
    snapshots = {}
    original = trainer.opt_d.step

    def spy(grads):
        snapshots["g"] = {k: v.copy() for k, v in nets.g_expr.state_dict().items() if "running" not in k}
        original(grads)

    monkeypatch.setattr(trainer.opt_d, "step", spy)
    g_before = {k: v.copy() for k, v in nets.g_expr.state_dict().items() if "running" not in k}
    trainer.train_step(make_batch(samples, cfg, 0), 0)
    # at the time D steps, generator weights are still untouched
    assert all(np.array_equal(g_before[k], snapshots["g"][k]) for k in g_before)


def test_overfit_single_batch(samples):
    cfg = small_config(learning_rate=2e-3, iterations=200)
    nets = build_nets(cfg, frozen_identity())
    trainer = Trainer(nets, cfg)
    batch = make_batch(samples, cfg, 0)
    first = trainer.train_step(batch, 0).pixel
    for it in range(1, 200):
        last = trainer.train_step(batch, it).pixel
    assert last < first
    assert last < 0.5 * first


def test_non_finite_input_aborts(samples):
    cfg = small_config()
    trainer = Trainer(build_nets(cfg, frozen_identity()), cfg)
    batch = make_batch(samples, cfg, 0)
    batch["expr"] = np.full_like(batch["expr"], np.nan)
    with pytest.raises(TrainingError, match="non-finite value at iteration 0"):
        trainer.train_step(batch, 0)


def test_empty_dataset_rejected():
    with pytest.raises(TrainingError, match="empty"):
        train_loop(small_config(), [], frozen_identity())


# ------------------------------------------------------------------- loops


def read_log(path):
    return path.read_text()


def test_loop_writes_log_and_checkpoints(samples, tmp_path):
    cfg = small_config()
    res = train_loop(cfg, samples, frozen_identity(), tmp_path)
    lines = read_log(tmp_path / "loss_log.tsv").splitlines()
    assert len(lines) == 6
    assert [p.name for p in res.checkpoints] == ["ckpt_000003.g2ck", "ckpt_000006.g2ck"]
    for line in lines:
        row = parse_log_line(line)
        recomputed = total_generator_loss(row["g_adv"], row["pixel"], row["cyc"], row["identity"], 10.0, 5.0, row["alpha3"])
        assert abs(row["g_total"] - recomputed) <= 1e-10
    params, _ = load_checkpoint(res.checkpoints[-1])
    assert int(params["meta/iteration"]) == 6
    assert not res.trainer.nets.g_expr.training


def test_same_seed_bit_identical(samples, tmp_path):
    cfg = small_config()
    train_loop(cfg, samples, frozen_identity(), tmp_path / "a")
    train_loop(cfg, samples, frozen_identity(), tmp_path / "b")
    assert read_log(tmp_path / "a" / "loss_log.tsv") == read_log(tmp_path / "b" / "loss_log.tsv")
    assert (tmp_path / "a" / "ckpt_000006.g2ck").read_bytes() == (tmp_path / "b" / "ckpt_000006.g2ck").read_bytes()


def test_different_seed_differs(samples, tmp_path):
    train_loop(small_config(iterations=2), samples, frozen_identity(), tmp_path / "a")
    train_loop(small_config(iterations=2, seed=4), samples, frozen_identity(), tmp_path / "b")
    assert read_log(tmp_path / "a" / "loss_log.tsv") != read_log(tmp_path / "b" / "loss_log.tsv")


def test_resume_matches_uninterrupted(samples, tmp_path):
    cfg = small_config()
    train_loop(cfg, samples, frozen_identity(), tmp_path / "full")
    train_loop(cfg, samples, frozen_identity(), tmp_path / "part", stop_at=3)
    assert not (tmp_path / "part" / "ckpt_000006.g2ck").exists()
    train_loop(cfg, samples, frozen_identity(), tmp_path / "part", resume_from=tmp_path / "part" / "ckpt_000003.g2ck")
    assert read_log(tmp_path / "full" / "loss_log.tsv") == read_log(tmp_path / "part" / "loss_log.tsv")
    assert (tmp_path / "full" / "ckpt_000006.g2ck").read_bytes() == (tmp_path / "part" / "ckpt_000006.g2ck").read_bytes()


def test_ablation_skips_cycle_gradient(samples):
    cfg = small_config(alpha2=0.0)
    nets = build_nets(cfg, frozen_identity())
    r = Trainer(nets, cfg).train_step(make_batch(samples, cfg, 0), 0)
    # the cycle term is still measured and logged
    assert r.cyc > 0
    assert abs(r.g_total - (r.g_adv + 10 * r.pixel + r.alpha3 * r.identity)) <= 1e-10


def test_aggregated_heatmap_mode(samples):
    cfg = small_config(heatmap_mode="aggregated")
    nets = build_nets(cfg, frozen_identity())
    assert nets.g_expr.config.heatmap_channels == 1
    batch = make_batch(samples, cfg, 0)
    assert batch["heatmap"].shape[1] == 1
    Trainer(nets, cfg).train_step(batch, 0)
