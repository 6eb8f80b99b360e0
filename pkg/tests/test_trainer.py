import csv

import numpy as np
import pytest
import torch

from faceprotect.extractor import save_extractor
from faceprotect.interference import InterferenceSpec
from faceprotect.losses import NonFiniteLossError
from faceprotect.trainer import (LOG_COLUMNS, TrainConfig, disc_scheduled, epoch_order, init_state,
                                 load_checkpoint, lr_factor, protect_array, save_checkpoint, steps_per_epoch,
                                 train, train_step)

SMALL = dict(resolution=16, d_f=8, stem_channels=4, channels=(8, 16), disc_channels=(8, 16), batch_size=4)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


@pytest.fixture
def images(rng):
    return rng.uniform(-0.9, 0.9, (10, 3, 16, 16)).astype(np.float32)


def _params(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_config_validation():
    with pytest.raises(ValueError, match="multiple of 4"):
        TrainConfig(resolution=30)
    with pytest.raises(ValueError, match="alpha"):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="lr_decay_start"):
        TrainConfig(lr_decay_start=1.5)
    cfg = TrainConfig()
    assert cfg.fpm_lr == pytest.approx(1e-4) and cfg.disc_lr == pytest.approx(2e-4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"nope": 1})


def test_disc_schedule_parity():
    assert [disc_scheduled(s, 2) for s in range(4)] == [True, False, True, False]
    assert sum(disc_scheduled(s, 3) for s in range(10)) == 4  # ceil(10 / 3)


def test_lr_factor_schedule():
    assert lr_factor(0, 100, 0.5) == 1.0
    assert lr_factor(49, 100, 0.5) == 1.0
    assert lr_factor(50, 100, 0.5) == 1.0
    assert lr_factor(75, 100, 0.5) == pytest.approx(0.5)
    assert lr_factor(99, 100, 1.0) == 1.0


def test_epoch_order_is_a_seeded_permutation():
    o = epoch_order(3, 2, 10)
    assert sorted(o) == list(range(10))
    assert np.array_equal(o, epoch_order(3, 2, 10)) and not np.array_equal(o, epoch_order(3, 3, 10))
    assert steps_per_epoch(10, 4) == 3


def test_step_updates_generator_and_keeps_extractor(tiny_extractor, images):
    state = init_state(small_cfg())
    before_ex = save_extractor(tiny_extractor)
    before = _params(state.model)
    rec = train_step(state, torch.from_numpy(images[:4]), tiny_extractor, InterferenceSpec())
    assert set(LOG_COLUMNS) <= set(rec) and state.step == 1
    assert not torch.equal(before["frg.out.weight"], state.model.state_dict()["frg.out.weight"])
    # the zero-initialised output conv blocks the embedding path until it has moved once
    train_step(state, torch.from_numpy(images[4:8]), tiny_extractor, InterferenceSpec())
    assert not torch.equal(before["fpm.w1"], state.model.state_dict()["fpm.w1"])
    assert save_extractor(tiny_extractor) == before_ex


def test_discriminator_updates_only_on_scheduled_steps(tiny_extractor, images):
    state = init_state(small_cfg())
    x = torch.from_numpy(images[:4])
    d0 = _params(state.disc)
    train_step(state, x, tiny_extractor, InterferenceSpec())  # step 0: scheduled
    d1 = _params(state.disc)
    train_step(state, x, tiny_extractor, InterferenceSpec())  # step 1: not scheduled
    d2 = _params(state.disc)
    assert any(not torch.equal(d0[k], d1[k]) for k in d0)
    assert all(torch.equal(d1[k], d2[k]) for k in d1)


def test_zero_weights_leave_generator_unchanged(tiny_extractor, images):
    state = init_state(small_cfg(lambda_a=0, lambda_p=0, lambda_l=0, lambda_d=0))
    before = _params(state.model.frg), _params(state.model.fpm)
    train_step(state, torch.from_numpy(images[:4]), tiny_extractor, InterferenceSpec())
    for b, m in zip(before, (state.model.frg, state.model.fpm)):
        assert all(torch.equal(b[k], v) for k, v in m.state_dict().items())


def test_step_errors(tiny_extractor, images):
    state = init_state(small_cfg())
    with pytest.raises(ValueError, match="empty"):
        train_step(state, torch.zeros(0, 3, 16, 16), tiny_extractor, InterferenceSpec())
    from faceprotect.extractor import IdentityExtractor
    with pytest.raises(ValueError, match="frozen"):
        train_step(state, torch.from_numpy(images[:2]), IdentityExtractor(d_f=8, resolution=16),
                   InterferenceSpec())


def test_non_finite_loss_aborts_with_record(tiny_extractor, images):
    state = init_state(small_cfg())
    bad = torch.from_numpy(images[:4]).clone()
    train_step(state, bad, tiny_extractor, InterferenceSpec())
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as exc:
        train_step(state, bad, tiny_extractor, InterferenceSpec())
    assert exc.value.record["last"]["step"] == 0


def test_zero_epochs_returns_init(tiny_extractor, images, tmp_path):
    cfg = small_cfg(epochs=0)
    state = train(images, cfg, tiny_extractor, run_dir=tmp_path)
    assert state.step == 0
    assert save_checkpoint(state) == save_checkpoint(init_state(cfg))
    rows = list(csv.reader((tmp_path / "losses.csv").open()))
    assert rows == [list(LOG_COLUMNS)]


def test_log_rows_and_epoch_checkpoints(tiny_extractor, images, tmp_path):
    cfg = small_cfg(epochs=2)
    train(images, cfg, tiny_extractor, run_dir=tmp_path)
    rows = list(csv.reader((tmp_path / "losses.csv").open()))
    assert len(rows) - 1 == 2 * steps_per_epoch(10, 4)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == ["ckpt_epoch_1.bin", "ckpt_epoch_2.bin"]


def test_resolution_mismatch(tiny_extractor, images):
    with pytest.raises(ValueError, match="config says"):
        train(images, small_cfg(resolution=32), tiny_extractor)


def test_checkpoint_roundtrip_idempotent(tiny_extractor, images):
    state = train(images, small_cfg(epochs=1), tiny_extractor)
    blob = save_checkpoint(state)
    back = load_checkpoint(blob)
    assert back.step == state.step and save_checkpoint(back) == blob
    np.testing.assert_array_equal(protect_array(back, tiny_extractor, images),
                                  protect_array(state, tiny_extractor, images))


def test_protect_is_near_identity_at_init(tiny_extractor, images):
    out = protect_array(init_state(small_cfg()), tiny_extractor, images)
    np.testing.assert_allclose(out, images, atol=1e-5)
    assert protect_array(init_state(small_cfg()), tiny_extractor, images[:0]).shape == (0, 3, 16, 16)
