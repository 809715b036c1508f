import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from cardiotask import trainer as T
from cardiotask.model import ModelConfig
from cardiotask.preprocess import AugmentationConfig
from cardiotask.volume_io import phantom_cohort

TINY = ModelConfig(image_size=16, patch_size=4, embed_dim=16, num_heads=2, decoder_channels=8, dropout=0.0)


def tiny_cfg(**kw):
    base = dict(epochs=4, batch_size=4, base_lr=1e-3, warmup_epochs=1, model=TINY, augmentation=None,
                checkpoint_every=2, seed=0)
    base.update(kw)
    return T.TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return T.build_slices(phantom_cohort(3, seed=5, slices=2), 16)


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


# ---------------------------------------------------------------- config


def test_config_roundtrip_and_errors(tmp_path):
    cfg = tiny_cfg()
    assert T.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(T.ConfigError, match="unknown"):
        T.TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(T.ConfigError, match="loss_weights"):
        T.TrainConfig.from_dict({"loss_weights": {"lambda_lov": -1}})
    with pytest.raises(T.ConfigError, match="warmup_epochs"):
        T.TrainConfig(epochs=3, warmup_epochs=3)
    with pytest.raises(T.ConfigError, match="freeze_blocks"):
        T.TrainConfig(freeze_blocks=13)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(T.ConfigError):
        T.TrainConfig.load(tmp_path / "bad.json")


def test_default_config_values():
    cfg = T.TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.base_lr, cfg.warmup_epochs, cfg.weight_decay) == (
        300, 24, 1e-4, 5, 0.01)
    assert (cfg.beta1, cfg.beta2, cfg.checkpoint_every) == (0.9, 0.999, 5)


# ---------------------------------------------------------------- schedule


def test_lr_examples():
    cfg = T.TrainConfig()
    spe = 3
    assert T.lr_at(0, spe, cfg) == 0.0
    assert T.lr_at(15, spe, cfg) == pytest.approx(1e-4, abs=1e-15)
    assert T.lr_at(457, spe, cfg) == pytest.approx(0.5e-4, abs=1e-9)
    assert T.lr_at(899, spe, cfg) < 1e-8
    assert T.lr_at(5000, spe, cfg) < 1e-8


def test_lr_continuity_and_range():
    cfg = T.TrainConfig()
    spe = 3
    lrs = np.array([T.lr_at(s, spe, cfg) for s in range(900)])
    warm, span = 15, 900 - 1 - 15
    bound = cfg.base_lr * max(1 / warm, math.pi / (2 * span))
    assert np.all(np.abs(np.diff(lrs)) <= bound + 1e-18)
    assert lrs.max() <= cfg.base_lr and lrs.min() >= 0
    assert np.all(np.diff(lrs[15:]) <= 0)


def test_lr_rejects_negative_step():
    with pytest.raises(ValueError):
        T.lr_at(-1, 3, T.TrainConfig())


def test_zero_lr_step_leaves_parameters(data):
    # a single step per epoch at step 0 of the warm-up has lr == 0
    cfg = tiny_cfg(batch_size=len(data), epochs=3, warmup_epochs=2)
    state = T.init_state(cfg)
    before = [p.detach().clone() for p in state.model.parameters()]
    stats = T.train_epoch(state, data)
    assert stats.lr == 0.0
    assert all(torch.equal(a, b) for a, b in zip(before, state.model.parameters()))


# ---------------------------------------------------------------- training


def test_training_is_deterministic(data):
    cfg = tiny_cfg(epochs=2, augmentation=AugmentationConfig(), model=replace(TINY, dropout=0.1))
    a = T.fit(cfg, data).state
    b = T.fit(cfg, data).state
    assert params_equal(a.model, b.model)
    assert [h.total for h in a.history] == [h.total for h in b.history]


def test_training_reduces_loss(data):
    res = T.fit(tiny_cfg(epochs=8, base_lr=3e-3), data)
    totals = [h.total for h in res.state.history]
    assert totals[-1] < totals[0]


def test_epoch_order_is_seeded_permutation():
    a = T.epoch_order(10, 0, 1)
    assert sorted(a) == list(range(10))
    assert np.array_equal(a, T.epoch_order(10, 0, 1))
    assert not np.array_equal(a, T.epoch_order(10, 0, 2))


def test_non_finite_loss_dumps_batch(data, tmp_path):
    state = T.init_state(tiny_cfg())
    with torch.no_grad():
        state.model.seg_head.bias.fill_(float("inf"))
    with pytest.raises(T.NonFiniteLossError):
        T.train_epoch(state, data, dump_dir=tmp_path)
    dumps = list(tmp_path.glob("nonfinite_*.npz"))
    assert len(dumps) == 1 and set(np.load(dumps[0])) == {"x", "y", "idx"}


# ---------------------------------------------------------------- early stopping


def test_flat_validation_stops_patience_after_best():
    state = T.init_state(tiny_cfg())
    stopper = T.EarlyStopper(patience=10, min_delta=1e-4)
    stops = []
    for e in range(1, 40):
        state.epoch = e
        if stopper.update(state, 0.5).stop:
            stops.append(e)
            break
    assert state.best_epoch == 1 and stops == [11]


def test_improving_validation_never_stops():
    state = T.init_state(tiny_cfg())
    stopper = T.EarlyStopper(patience=3, min_delta=1e-4)
    for e in range(1, 50):
        state.epoch = e
        d = stopper.update(state, 0.01 * e)
        assert d.improved and not d.stop


def test_gain_below_min_delta_counts_as_bad():
    state = T.init_state(tiny_cfg())
    stopper = T.EarlyStopper(patience=2, min_delta=1e-2)
    state.epoch = 1
    stopper.update(state, 0.5)
    state.epoch = 2
    assert not stopper.update(state, 0.505).improved
    state.epoch = 3
    assert stopper.update(state, 0.509).stop


def test_checkpoint_cadence():
    state = T.init_state(tiny_cfg())
    stopper = T.EarlyStopper(checkpoint_every=5)
    flags = []
    for e in range(1, 11):
        state.epoch = e
        flags.append(stopper.update(state, 0.0).checkpoint)
    assert [e for e, f in zip(range(1, 11), flags) if f] == [5, 10]


def test_restored_best_reproduces_recorded_dice(data, tmp_path):
    cfg = tiny_cfg(epochs=6, base_lr=3e-3)
    res = T.fit(cfg, data, data, run_dir=tmp_path)
    assert res.best_dice is not None
    again = T.validate(res.state.model, data).mean_dice
    assert again == pytest.approx(res.best_dice, abs=1e-12)
    best = T.load_checkpoint(tmp_path / "checkpoints" / "best.ckpt")
    assert T.validate(best.model, data).mean_dice == pytest.approx(res.best_dice, abs=1e-12)
    rows = (tmp_path / "epochs.csv").read_text().splitlines()
    assert rows[0] == T.EPOCH_CSV_HEADER and len(rows) == 1 + len(res.state.history)


# ---------------------------------------------------------------- freezing


def _frozen(model):
    return {n for n, p in model.named_parameters() if not p.requires_grad}


def test_freeze_none_and_all():
    state = T.init_state(tiny_cfg())
    assert _frozen(state.model) == set()
    T.freeze_blocks(state.model, TINY.depth)
    frozen = _frozen(state.model)
    assert all(any(f"blocks.{i}." in n for n in frozen) for i in range(TINY.depth))
    assert not any(n.startswith(("seg_head", "fusion", "lateral")) for n in frozen)
    with pytest.raises(ValueError):
        T.freeze_blocks(state.model, TINY.depth + 1)


def test_freeze_two_blocks_keeps_them_fixed(data):
    state = T.init_state(tiny_cfg(freeze_blocks=2))
    frozen = _frozen(state.model)
    assert any("blocks.1." in n for n in frozen) and not any("blocks.2." in n for n in frozen)
    before = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    state.step = 10  # past the warm-up so the lr is non-zero
    T.train_epoch(state, data)
    for n, p in state.model.named_parameters():
        assert torch.equal(p, before[n]) == (n in frozen), n


# ---------------------------------------------------------------- checkpoints and resume


def test_checkpoint_bitwise_roundtrip(data, tmp_path):
    state = T.fit(tiny_cfg(epochs=2), data, data).state
    p = T.save_checkpoint(state, tmp_path / "a.ckpt")
    back = T.load_checkpoint(p)
    assert T.checkpoint_bytes(back) == p.read_bytes()
    assert params_equal(back.model, state.model)
    assert (back.epoch, back.step, back.best_dice) == (state.epoch, state.step, state.best_dice)


def test_resume_matches_uninterrupted_run(data, tmp_path):
    cfg = tiny_cfg(epochs=4)
    full = T.fit(cfg, data, data, run_dir=tmp_path / "full").state
    T.fit(cfg, data, data, run_dir=tmp_path / "part", stop_after=2)
    resumed_state = T.load_checkpoint(tmp_path / "part" / "checkpoints" / "last.ckpt")
    assert resumed_state.epoch == 2
    resumed = T.fit(cfg, data, data, run_dir=tmp_path / "part", state=resumed_state).state
    assert params_equal(full.model, resumed.model)
    assert [h.total for h in full.history] == [h.total for h in resumed.history]
    assert (tmp_path / "full" / "steps.csv").read_text() == (tmp_path / "part" / "steps.csv").read_text()


# ---------------------------------------------------------------- validation


def test_perfect_stub_predictor(data):
    onehot = np.moveaxis(np.eye(4)[data.y], -1, 1)
    dis = np.eye(5)[np.maximum(data.diagnosis, 0)]
    v = T.validate(None, data, predictor=lambda x: (onehot, dis))
    assert v.mean_dice == 1.0
    assert v.classification["overall"]["accuracy"] == 1.0
    for s in v.scores.structures.values():
        assert s.dice == 1.0 and s.hd95 == 0.0


def test_empty_validation_rejected(data):
    with pytest.raises(ValueError):
        T.validate(None, data.subset([]), predictor=lambda x: (None, None))


def test_predict_volume_native_resolution():
    rec = phantom_cohort(1, seed=0, slices=2)[0]
    state = T.init_state(tiny_cfg())
    probs, dis = T.predict_volume(state.model, rec.ed[0])
    h, w, d = rec.ed[0].shape
    assert probs.shape == (4, h, w, d)
    np.testing.assert_allclose(probs.sum(0), 1.0, atol=1e-5)
    assert dis.shape == (5,) and abs(dis.sum() - 1) < 1e-6


# ---------------------------------------------------------------- few-shot


def test_few_shot_schedule():
    fs = T.few_shot_config(T.TrainConfig())
    assert (fs.epochs, fs.base_lr, fs.warmup_epochs) == (50, 0.5e-4, 2)


def test_few_shot_from_checkpoint(data, tmp_path):
    src = T.fit(tiny_cfg(epochs=2), data).state
    path = T.save_checkpoint(src, tmp_path / "src.ckpt")
    recs = phantom_cohort(3, seed=9, slices=2)
    cfg = replace(src.cfg, few_shot_epochs=2)
    state, scores, row = T.few_shot_finetune(path, recs[:1], cfg, eval_records=recs[1:])
    assert row["N"] == 1
    assert set(row) == {"N"} | {f"{s}.{k}" for s in T.FEW_SHOT_STRUCTURES for k in ("dice", "iou", "hd95")}
    assert row["Mean.dice"] == scores.mean["dice"]
    assert not params_equal(state.model, src.model)
    # the source checkpoint is untouched and still loads
    assert params_equal(T.load_checkpoint(path).model, src.model)


def test_tta_applies_to_disease_head_only_when_enabled(data):
    model = T.init_state(tiny_cfg()).model.eval()
    x = data.x[:3]
    _, plain = T.predict_probs(model, x)
    _, seg_only = T.predict_probs(model, x, tta=True)
    _, both = T.predict_probs(model, x, tta=True, tta_classification=True)
    assert np.array_equal(plain, seg_only)
    flips = [T.predict_probs(model, np.ascontiguousarray(v))[1] for v in (x, x[..., ::-1], x[..., ::-1, :])]
    np.testing.assert_allclose(both, np.mean(flips, axis=0), atol=1e-7)
    assert T.TrainConfig().tta_classification is False
