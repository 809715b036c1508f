"""Volume normalization, 2.5D stacks, paired resizing, augmentation and TTA."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter, map_coordinates

from .volume_io import CineVolume, LabelVolume

EPS = 1e-6
# geometric augmentation parameters are quoted for 224x224 inputs
REFERENCE_SIZE = 224


@dataclass
class SliceStack:
    planes: np.ndarray  # (3, H, W): slices z-1, z, z+1
    center_index: int
    source_subject: str = ""
    phase: str = "ED"

    def __post_init__(self) -> None:
        if self.planes.ndim != 3 or self.planes.shape[0] != 3:
            raise ValueError(f"a stack holds exactly 3 planes, got {self.planes.shape}")
        if not np.all(np.isfinite(self.planes)):
            raise ValueError("stack contains non-finite values")

    @property
    def size(self) -> tuple[int, int]:
        return self.planes.shape[1], self.planes.shape[2]


def normalize_volume(v: CineVolume) -> CineVolume:
    """Z-score over every voxel of the volume (never per slice)."""
    x = v.voxels.astype(np.float64)
    mu = x.mean()
    sigma = x.std()  # population std
    out = ((x - mu) / (sigma + EPS)).astype(np.float32)
    return replace(v, voxels=out)


def clamp_index(z: int, depth: int) -> int:
    return max(0, min(depth - 1, z))


def build_stack(v: CineVolume, z: int) -> SliceStack:
    depth = v.shape[2]
    if not 0 <= z < depth:
        raise IndexError(f"slice {z} outside [0, {depth - 1}]")
    idx = [clamp_index(z + k, depth) for k in (-1, 0, 1)]
    planes = np.stack([v.voxels[:, :, i] for i in idx], axis=0)
    return SliceStack(planes=planes, center_index=z, source_subject=v.subject_id, phase=v.phase)


def resize_pair(
    image: np.ndarray, mask: np.ndarray | None, size: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """Bilinear resize of ``image`` (..., H, W) and nearest-neighbour of ``mask`` (H, W).

    Pixel-centre alignment (``align_corners=False``) throughout.
    """
    if size < 1:
        raise ValueError(f"target size must be >= 1, got {size}")
    h, w = image.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("empty image")
    if (h, w) == (size, size):
        return image.copy(), None if mask is None else mask.copy()
    lead = image.shape[:-2]
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).reshape(1, -1, h, w)
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    img = out.reshape(*lead, size, size).numpy().astype(image.dtype)
    if mask is None:
        return img, None
    m = torch.from_numpy(np.ascontiguousarray(mask).astype(np.float32))[None, None]
    m = F.interpolate(m, size=(size, size), mode="nearest-exact")
    return img, m[0, 0].numpy().astype(mask.dtype)


def prepare_phase(
    image: CineVolume, labels: LabelVolume | None, size: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalize a volume and return every 2.5D stack (D, 3, S, S) and mask (D, S, S)."""
    norm = normalize_volume(image)
    depth = image.shape[2]
    stacks, masks = [], []
    for z in range(depth):
        st = build_stack(norm, z)
        m = labels.labels[:, :, z] if labels is not None else None
        planes, m = resize_pair(st.planes, m, size)
        stacks.append(planes)
        masks.append(m)
    x = np.stack(stacks).astype(np.float32)
    y = np.stack(masks).astype(np.int64) if labels is not None else None
    return x, y


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationConfig:
    rotate_p: float = 0.5
    rotate_limit: float = 30.0  # degrees
    ssr_p: float = 0.5
    shift_limit: float = 0.10  # fraction of image size
    scale_limit: float = 0.20
    ssr_rotate_limit: float = 0.0
    elastic_p: float = 0.3
    elastic_alpha: float = 1.0
    elastic_sigma: float = 50.0
    elastic_alpha_affine: float = 50.0
    grid_p: float = 0.3
    grid_steps: int = 5
    grid_limit: float = 0.3
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    noise_p: float = 0.2
    noise_var: tuple[float, float] = (10.0, 50.0)  # in 0-255 units
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name.endswith("_p"):
                p = getattr(self, f.name)
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"{f.name}={p} is not a probability")
        for name in ("rotate_limit", "shift_limit", "scale_limit", "ssr_rotate_limit",
                     "elastic_alpha", "elastic_sigma", "elastic_alpha_affine", "grid_limit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        lo, hi = self.noise_var
        if lo < 0 or hi < lo:
            raise ValueError("noise_var must be a non-negative, ordered range")
        self.noise_var = (float(lo), float(hi))

    @classmethod
    def disabled(cls, **kw) -> "AugmentationConfig":
        probs = {f.name: 0.0 for f in fields(cls) if f.name.endswith("_p")}
        probs.update(kw)
        return cls(**probs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_var"] = list(self.noise_var)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augmentation fields: {sorted(unknown)}")
        d = dict(d)
        if "noise_var" in d:
            d["noise_var"] = tuple(d["noise_var"])
        return cls(**d)


TRANSFORMS = ("rotate", "ssr", "elastic", "grid", "hflip", "vflip", "noise")


@dataclass
class AugmentationPlan:
    """The random draws for one sample.  ``fired`` maps transform -> bool."""

    fired: dict = field(default_factory=dict)
    angle: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    ssr_angle: float = 0.0
    elastic_seed: int = 0
    grid_seed: int = 0
    noise_seed: int = 0
    noise_var: float = 0.0


def sample_plan(cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentationPlan:
    # every draw happens regardless of firing so rng consumption is fixed
    u = rng.random(len(TRANSFORMS))
    fired = {name: bool(u[i] < getattr(cfg, f"{name}_p")) for i, name in enumerate(TRANSFORMS)}
    return AugmentationPlan(
        fired=fired,
        angle=float(rng.uniform(-cfg.rotate_limit, cfg.rotate_limit)),
        shift=(float(rng.uniform(-cfg.shift_limit, cfg.shift_limit)),
               float(rng.uniform(-cfg.shift_limit, cfg.shift_limit))),
        scale=float(1.0 + rng.uniform(-cfg.scale_limit, cfg.scale_limit)),
        ssr_angle=float(rng.uniform(-cfg.ssr_rotate_limit, cfg.ssr_rotate_limit)),
        elastic_seed=int(rng.integers(2**31)),
        grid_seed=int(rng.integers(2**31)),
        noise_seed=int(rng.integers(2**31)),
        noise_var=float(rng.uniform(*cfg.noise_var)),
    )


def _affine_coords(shape, angle_deg: float, scale: float, shift_px=(0.0, 0.0)):
    """Source coordinates for a rotation/scale about the centre followed by a shift."""
    h, w = shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    oy = yy - cy - shift_px[0]
    ox = xx - cx - shift_px[1]
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    sy = (c * oy - s * ox) / scale + cy
    sx = (s * oy + c * ox) / scale + cx
    return sy, sx


def _elastic_coords(shape, cfg: AugmentationConfig, rng: np.random.Generator):
    h, w = shape
    k = h / REFERENCE_SIZE
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # random affine: perturb three anchor points by up to alpha_affine pixels
    center = np.array([h / 2, w / 2])
    sq = min(h, w) / 3
    src = np.array([center + sq, [center[0] + sq, center[1] - sq], center - sq])
    dst = src + rng.uniform(-cfg.elastic_alpha_affine * k, cfg.elastic_alpha_affine * k, size=src.shape)
    # solve dst -> src affine so we can pull pixels
    a_mat = np.hstack([dst, np.ones((3, 1))])
    coef = np.linalg.solve(a_mat, src)
    ay = coef[0, 0] * yy + coef[1, 0] * xx + coef[2, 0]
    ax = coef[0, 1] * yy + coef[1, 1] * xx + coef[2, 1]
    sigma = max(cfg.elastic_sigma * k, 1e-3)
    dy = gaussian_filter(rng.uniform(-1, 1, size=shape), sigma, mode="constant") * cfg.elastic_alpha * k
    dx = gaussian_filter(rng.uniform(-1, 1, size=shape), sigma, mode="constant") * cfg.elastic_alpha * k
    return ay + dy, ax + dx


def _grid_axis(n: int, steps: int, limit: float, rng: np.random.Generator) -> np.ndarray:
    knots_out = np.linspace(0, n - 1, steps + 1)
    widths = np.diff(knots_out) * (1.0 + rng.uniform(-limit, limit, size=steps))
    knots_src = np.concatenate([[0.0], np.cumsum(widths)])
    knots_src *= (n - 1) / knots_src[-1]
    return np.interp(np.arange(n, dtype=np.float64), knots_out, knots_src)


def _grid_coords(shape, cfg: AugmentationConfig, rng: np.random.Generator):
    h, w = shape
    ys = _grid_axis(h, cfg.grid_steps, cfg.grid_limit, rng)
    xs = _grid_axis(w, cfg.grid_steps, cfg.grid_limit, rng)
    sy, sx = np.meshgrid(ys, xs, indexing="ij")
    return sy, sx


def _warp(planes: np.ndarray, mask: np.ndarray | None, coords):
    sy, sx = coords
    out = np.stack([map_coordinates(p, [sy, sx], order=1, mode="nearest") for p in planes])
    m = None
    if mask is not None:
        m = map_coordinates(mask, [sy, sx], order=0, mode="nearest")
    return out.astype(planes.dtype), m


def apply_plan(
    planes: np.ndarray, mask: np.ndarray | None, plan: AugmentationPlan, cfg: AugmentationConfig
) -> tuple[np.ndarray, np.ndarray | None]:
    h, w = planes.shape[1:]
    x, m = planes, mask
    if plan.fired.get("rotate"):
        x, m = _warp(x, m, _affine_coords((h, w), plan.angle, 1.0))
    if plan.fired.get("ssr"):
        shift = (plan.shift[0] * h, plan.shift[1] * w)
        x, m = _warp(x, m, _affine_coords((h, w), plan.ssr_angle, plan.scale, shift))
    if plan.fired.get("elastic"):
        x, m = _warp(x, m, _elastic_coords((h, w), cfg, np.random.default_rng(plan.elastic_seed)))
    if plan.fired.get("grid"):
        x, m = _warp(x, m, _grid_coords((h, w), cfg, np.random.default_rng(plan.grid_seed)))
    if plan.fired.get("hflip"):
        x = x[:, :, ::-1]
        m = None if m is None else m[:, ::-1]
    if plan.fired.get("vflip"):
        x = x[:, ::-1, :]
        m = None if m is None else m[::-1, :]
    if plan.fired.get("noise"):
        # the variance is quoted on a 0-255 scale; map it onto the stack's range
        rng = np.random.default_rng(plan.noise_seed)
        span = float(x.max() - x.min()) or 1.0
        std = math.sqrt(plan.noise_var) / 255.0 * span
        x = x + rng.normal(0.0, std, size=x.shape).astype(x.dtype)
    x = np.ascontiguousarray(x)
    m = None if m is None else np.ascontiguousarray(m)
    return x, m


def augment(
    stack: SliceStack,
    mask: np.ndarray | None,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
) -> tuple[SliceStack, np.ndarray | None]:
    """One identical spatial transform for all three planes and the mask."""
    if mask is not None and mask.shape != stack.size:
        raise ValueError(f"mask {mask.shape} not aligned with stack {stack.size}")
    plan = sample_plan(cfg, rng)
    planes, m = apply_plan(stack.planes, mask, plan, cfg)
    return replace(stack, planes=planes), m


# --------------------------------------------------------------------------
# test-time augmentation


def _flip(x, axis: int):
    if isinstance(x, torch.Tensor):
        return torch.flip(x, dims=(axis,))
    return np.flip(x, axis=axis).copy()


def tta_predict(predict: Callable, stack):
    """Mean of identity, H-flip and V-flip predictions, each mapped back.

    ``stack`` is (..., 3, H, W) as an array/tensor or a :class:`SliceStack`;
    ``predict`` must return class probabilities shaped (..., K, H, W).
    """
    x = stack.planes if isinstance(stack, SliceStack) else stack
    h, w = x.shape[-2:]

    def run(inp):
        out = predict(inp)
        if out.ndim != x.ndim or tuple(out.shape[-2:]) != (h, w):
            raise ValueError(f"predictor returned shape {tuple(out.shape)} for input {tuple(x.shape)}")
        return out

    p = run(x)
    p_h = _flip(run(_flip(x, -1)), -1)
    p_v = _flip(run(_flip(x, -2)), -2)
    return (p + p_h + p_v) / 3.0
