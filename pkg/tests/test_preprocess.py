from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiotask import preprocess as pp
from cardiotask.volume_io import CineVolume, LabelVolume, PhantomConfig, generate_phantom


def _vol(arr):
    return CineVolume(np.asarray(arr, dtype=np.float64), 1.0, 1.0, 10.0)


# ---------------------------------------------------------------- normalization


def test_constant_volume_normalizes_to_zero():
    out = pp.normalize_volume(_vol(np.full((3, 3, 2), 5.0)))
    assert np.all(out.voxels == 0)


def test_two_voxel_volume():
    out = pp.normalize_volume(_vol(np.array([0.0, 2.0]).reshape(1, 2, 1)))
    np.testing.assert_allclose(out.voxels.ravel(), [-1, 1], atol=1e-5)


def test_random_volume_moments():
    v = _vol(np.random.default_rng(0).normal(7, 3, size=(32, 32, 6)))
    x = pp.normalize_volume(v).voxels.astype(np.float64)
    assert abs(x.mean()) < 1e-6
    assert 1 - 1e-3 <= x.std() <= 1


def test_normalization_is_volume_wise_not_per_slice():
    arr = np.zeros((4, 4, 2))
    arr[..., 1] = 10.0
    x = pp.normalize_volume(_vol(arr)).voxels
    # per-slice z-scoring would give zero everywhere
    assert x[..., 0].mean() < 0 < x[..., 1].mean()


def test_normalization_idempotent():
    v = _vol(np.random.default_rng(1).normal(size=(8, 8, 3)))
    once = pp.normalize_volume(v)
    twice = pp.normalize_volume(once)
    np.testing.assert_allclose(twice.voxels, once.voxels, rtol=1e-5, atol=1e-5)


# ---------------------------------------------------------------- stacks


def _indexed(depth):
    arr = np.broadcast_to(np.arange(depth, dtype=float), (2, 2, depth)).copy()
    return _vol(arr)


@pytest.mark.parametrize(
    "z,depth,expected",
    [(0, 5, (0, 0, 1)), (4, 5, (3, 4, 4)), (2, 5, (1, 2, 3)), (0, 1, (0, 0, 0))],
)
def test_clamped_stack(z, depth, expected):
    s = pp.build_stack(_indexed(depth), z)
    assert tuple(s.planes[:, 0, 0]) == expected
    assert s.center_index == z


def test_stack_index_out_of_range():
    with pytest.raises(IndexError):
        pp.build_stack(_indexed(3), 3)


# ---------------------------------------------------------------- resize


def test_identity_resize_exact():
    img = np.random.default_rng(2).normal(size=(3, 8, 8)).astype(np.float32)
    out, m = pp.resize_pair(img, np.eye(8, dtype=np.int64), 8)
    assert np.array_equal(out, img) and np.array_equal(m, np.eye(8))


def test_nearest_mask_keeps_label_set():
    mask = np.array([[0, 1], [2, 3]])
    _, m = pp.resize_pair(np.zeros((1, 2, 2), np.float32), mask, 4)
    assert set(np.unique(m)) == {0, 1, 2, 3}
    np.testing.assert_array_equal(m, np.kron(mask, np.ones((2, 2), int)))


def test_bilinear_ramp_monotone():
    ramp = np.tile(np.arange(7, dtype=np.float32), (7, 1))[None]
    out, _ = pp.resize_pair(ramp, None, 20)
    assert np.all(np.diff(out[0], axis=1) >= 0)
    assert np.all(np.diff(out[0], axis=1).sum(axis=1) > 0)


def test_bilinear_pixel_centre_alignment():
    # align_corners=False: a 2-pixel ramp [0, 1] upsampled x2 -> [0, .25, .75, 1]
    out, _ = pp.resize_pair(np.array([[[0.0, 1.0]]], np.float32).repeat(2, 1), None, 4)
    np.testing.assert_allclose(out[0, 0], [0, 0.25, 0.75, 1.0], atol=1e-7)


def test_resize_rejects_zero_size():
    with pytest.raises(ValueError):
        pp.resize_pair(np.zeros((1, 2, 2)), None, 0)


# ---------------------------------------------------------------- augmentation


def _stack(seed=0, size=32):
    rng = np.random.default_rng(seed)
    planes = rng.normal(size=(3, size, size)).astype(np.float32)
    mask = rng.integers(0, 4, size=(size, size))
    return pp.SliceStack(planes, 1, "s", "ED"), mask


def test_disabled_pipeline_is_identity():
    s, m = _stack()
    out, om = pp.augment(s, m, pp.AugmentationConfig.disabled(), np.random.default_rng(0))
    assert np.array_equal(out.planes, s.planes) and np.array_equal(om, m)


def test_hflip_involution():
    s, m = _stack()
    cfg = pp.AugmentationConfig.disabled(hflip_p=1.0)
    once, m1 = pp.augment(s, m, cfg, np.random.default_rng(0))
    twice, m2 = pp.augment(once, m1, cfg, np.random.default_rng(1))
    assert np.array_equal(twice.planes, s.planes) and np.array_equal(m2, m)
    assert np.array_equal(once.planes, s.planes[:, :, ::-1])


def test_firing_rates_match_probabilities():
    cfg = pp.AugmentationConfig()
    rng = np.random.default_rng(123)
    counts = dict.fromkeys(pp.TRANSFORMS, 0)
    n = 10_000
    for _ in range(n):
        plan = pp.sample_plan(cfg, rng)
        for k, v in plan.fired.items():
            counts[k] += v
    for k in pp.TRANSFORMS:
        assert abs(counts[k] / n - getattr(cfg, f"{k}_p")) < 0.02, k


def test_default_parameters():
    cfg = pp.AugmentationConfig()
    assert (cfg.rotate_limit, cfg.rotate_p) == (30.0, 0.5)
    assert (cfg.shift_limit, cfg.scale_limit, cfg.ssr_p) == (0.10, 0.20, 0.5)
    assert (cfg.elastic_alpha, cfg.elastic_sigma, cfg.elastic_alpha_affine, cfg.elastic_p) == (1, 50, 50, 0.3)
    assert (cfg.grid_p, cfg.hflip_p, cfg.vflip_p, cfg.noise_p) == (0.3, 0.5, 0.5, 0.2)


@pytest.mark.parametrize("name", ["rotate", "ssr", "elastic", "grid", "hflip", "vflip"])
def test_spatial_transforms_preserve_label_set_and_align(name):
    lab = generate_phantom(PhantomConfig(slices=1, noise_sigma=0.0)).ed[1].labels[..., 0].astype(np.int64)
    planes = np.stack([lab.astype(np.float32) * 10] * 3)
    s = pp.SliceStack(planes, 0, "p", "ED")
    cfg = pp.AugmentationConfig.disabled(**{f"{name}_p": 1.0})
    for seed in range(3):
        out, m = pp.augment(s, lab, cfg, np.random.default_rng(seed))
        assert set(np.unique(m)) <= {0, 1, 2, 3}
        # the same warp hits image and mask: nearest-sampled image equals 10 * mask
        # wherever the bilinear image is not mixing classes
        pure = np.isclose(out.planes[0] % 10, 0) & (np.abs(out.planes[0] - 10 * m) < 1e-4)
        assert pure.mean() > 0.9
        assert np.array_equal(out.planes[0], out.planes[1])


def test_noise_never_touches_mask():
    s, m = _stack()
    cfg = pp.AugmentationConfig.disabled(noise_p=1.0)
    out, om = pp.augment(s, m, cfg, np.random.default_rng(5))
    assert np.array_equal(om, m) and not np.array_equal(out.planes, s.planes)


def test_augment_deterministic_given_rng():
    s, m = _stack()
    cfg = pp.AugmentationConfig(elastic_p=1.0, grid_p=1.0)
    a, ma = pp.augment(s, m, cfg, np.random.default_rng(9))
    b, mb = pp.augment(s, m, cfg, np.random.default_rng(9))
    assert np.array_equal(a.planes, b.planes) and np.array_equal(ma, mb)


def test_misaligned_mask_rejected():
    s, _ = _stack()
    with pytest.raises(ValueError):
        pp.augment(s, np.zeros((3, 3), int), pp.AugmentationConfig(), np.random.default_rng(0))


def test_config_roundtrip_and_validation():
    cfg = pp.AugmentationConfig(rng_seed=4, noise_var=(1.0, 2.0))
    assert pp.AugmentationConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        pp.AugmentationConfig(rotate_p=1.5)
    with pytest.raises(ValueError):
        pp.AugmentationConfig(shift_limit=-0.1)


# ---------------------------------------------------------------- TTA


def test_tta_constant_predictor():
    x = np.random.default_rng(0).normal(size=(3, 8, 8))
    out = pp.tta_predict(lambda _: np.full((4, 8, 8), 0.25), x)
    np.testing.assert_allclose(out, 0.25, atol=0)


def test_tta_matches_hand_three_term_average():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 8, 8))
    w = rng.normal(size=(4, 3))

    def predict(inp):
        logits = np.einsum("kc,chw->khw", w, inp) + np.arange(8)[None, None, :] * 0.1
        e = np.exp(logits - logits.max(0))
        return e / e.sum(0)

    expected = (
        predict(x)
        + predict(x[:, :, ::-1])[:, :, ::-1]
        + predict(x[:, ::-1, :])[:, ::-1, :]
    ) / 3
    out = pp.tta_predict(predict, x)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out.sum(0), 1.0, atol=1e-6)
    assert out.min() >= 0 and out.max() <= 1


def test_tta_symmetric_input_equivariant_predictor():
    lab = generate_phantom(PhantomConfig(slices=1, rv_radius={"ED": 0.0, "ES": 0.0},
                                         center_offset=(0.0, 0.0), noise_sigma=0.0)).ed[0].voxels[..., 0]
    x = torch.from_numpy(np.stack([lab] * 3)[None].astype(np.float64))
    conv = torch.nn.Conv2d(3, 4, 3, padding=1, bias=False).double()
    with torch.no_grad():  # kernels symmetric under both flips -> flip-equivariant
        k = conv.weight
        k.copy_((k + k.flip(-1) + k.flip(-2) + k.flip(-1, -2)) / 4)
    predict = lambda t: torch.softmax(conv(t), dim=1)  # noqa: E731
    with torch.no_grad():
        diff = (pp.tta_predict(predict, x) - predict(x)).abs().max().item()
    assert diff < 1e-6


def test_tta_rejects_wrong_shape():
    with pytest.raises(ValueError):
        pp.tta_predict(lambda inp: np.zeros((4, 3, 3)), np.zeros((3, 8, 8)))


# ---------------------------------------------------------------- phase preparation


def test_prepare_phase_shapes():
    rec = generate_phantom(PhantomConfig(slices=3))
    x, y = pp.prepare_phase(rec.ed[0], rec.ed[1], 56)
    assert x.shape == (3, 3, 56, 56) and x.dtype == np.float32
    assert y.shape == (3, 56, 56) and set(np.unique(y)) <= {0, 1, 2, 3}


@settings(max_examples=20, deadline=None)
@given(depth=st.integers(1, 6), z=st.integers(0, 5))
def test_stack_never_reads_outside(depth, z):
    z = min(z, depth - 1)
    s = pp.build_stack(_indexed(depth), z)
    vals = s.planes[:, 0, 0]
    assert vals.min() >= 0 and vals.max() <= depth - 1
    assert vals[1] == z


def test_label_volume_shape_mismatch_in_prepare():
    v = _vol(np.zeros((4, 4, 2)))
    lab = LabelVolume(np.zeros((4, 4, 2)), 1.0, 1.0, 10.0)
    x, y = pp.prepare_phase(replace(v), lab, 4)
    assert x.shape == (2, 3, 4, 4) and y.shape == (2, 4, 4)
