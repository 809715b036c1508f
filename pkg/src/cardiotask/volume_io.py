"""On-disk volumes, subject records, manifests and the analytic cardiac phantom.

Volume container: ``<name>.vol`` holds raw little-endian scalars (float32 for
intensities, uint8 for labels) in x-fastest order, then y, then z.  A JSON
sidecar ``<name>.vol.json`` carries shape and physical metadata.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BACKGROUND, LV, MYO, RV = 0, 1, 2, 3
CLASS_NAMES = {BACKGROUND: "Background", LV: "LV", MYO: "Myo", RV: "RV"}
FOREGROUND = (LV, MYO, RV)

DIAGNOSES = ("NOR", "DCM", "HCM", "MINF", "RV")
DIAGNOSIS_NAMES = {
    "NOR": "Normal",
    "DCM": "Dilated cardiomyopathy",
    "HCM": "Hypertrophic cardiomyopathy",
    "MINF": "Myocardial infarction",
    "RV": "Abnormal right ventricle",
}
PHASES = ("ED", "ES")
SPLITS = ("train", "val", "test")


class VolumeFormatError(ValueError):
    """Raised when a volume container or its sidecar is malformed."""


class PhantomGeometryError(ValueError):
    pass


@dataclass
class CineVolume:
    voxels: np.ndarray  # (H, W, D)
    spacing_x: float
    spacing_y: float
    slice_thickness: float
    phase: str = "ED"
    subject_id: str = ""

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise VolumeFormatError(f"expected a non-empty (H, W, D) array, got {self.voxels.shape}")
        _check_spacing(self.spacing_x, self.spacing_y, self.slice_thickness)
        if self.phase not in PHASES:
            raise VolumeFormatError(f"unknown phase {self.phase!r}")
        if not np.all(np.isfinite(self.voxels)):
            raise VolumeFormatError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)  # type: ignore[return-value]

    @property
    def spacing(self) -> tuple[float, float]:
        return (self.spacing_x, self.spacing_y)


@dataclass
class LabelVolume:
    labels: np.ndarray  # (H, W, D) uint8 in {0,1,2,3}
    spacing_x: float
    spacing_y: float
    slice_thickness: float
    phase: str = "ED"
    subject_id: str = ""

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise VolumeFormatError(f"expected a non-empty (H, W, D) array, got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > RV):
            raise VolumeFormatError("label values must lie in {0, 1, 2, 3}")
        self.labels = labels.astype(np.uint8)
        _check_spacing(self.spacing_x, self.spacing_y, self.slice_thickness)
        if self.phase not in PHASES:
            raise VolumeFormatError(f"unknown phase {self.phase!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)  # type: ignore[return-value]

    @property
    def spacing(self) -> tuple[float, float]:
        return (self.spacing_x, self.spacing_y)


@dataclass
class SubjectRecord:
    subject_id: str
    ed: tuple[CineVolume, LabelVolume]
    es: tuple[CineVolume, LabelVolume]
    diagnosis: str | None = None
    split: str = "train"
    # analytic volumes (ml) and derived indices when the record is a phantom
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for img, lab in (self.ed, self.es):
            if img.shape != lab.shape:
                raise VolumeFormatError(
                    f"{self.subject_id}: image shape {img.shape} != label shape {lab.shape}"
                )
        a, b = self.ed[0], self.es[0]
        if a.shape[:2] != b.shape[:2] or a.spacing != b.spacing:
            raise VolumeFormatError(f"{self.subject_id}: ED and ES differ in spacing or in-plane size")
        if self.diagnosis is not None and self.diagnosis not in DIAGNOSES:
            raise ValueError(f"unknown diagnosis {self.diagnosis!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def phase(self, name: str) -> tuple[CineVolume, LabelVolume]:
        if name == "ED":
            return self.ed
        if name == "ES":
            return self.es
        raise KeyError(name)


@dataclass
class Manifest:
    records: list[SubjectRecord]
    split_counts: tuple[int, int, int]
    seed: int

    def split(self, name: str) -> list[SubjectRecord]:
        return [r for r in self.records if r.split == name]


def _check_spacing(sx: float, sy: float, t: float) -> None:
    for name, v in (("spacing_x", sx), ("spacing_y", sy), ("slice_thickness", t)):
        if not (math.isfinite(v) and v > 0):
            raise VolumeFormatError(f"{name} must be positive, got {v}")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _save(arr: np.ndarray, dtype: str, meta: dict, path: Path) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(dtype).tobytes()
    _write_atomic(path, payload)
    _write_atomic(_sidecar(path), json.dumps(meta, indent=2, sort_keys=True).encode())


def save_volume(v: CineVolume, path: str | os.PathLike) -> None:
    meta = {
        "shape": list(v.shape),
        "spacing": [float(v.spacing_x), float(v.spacing_y)],
        "thickness": float(v.slice_thickness),
        "phase": v.phase,
        "kind": "intensity",
        "subject": v.subject_id,
    }
    _save(v.voxels, "<f4", meta, Path(path))


def save_labels(v: LabelVolume, path: str | os.PathLike) -> None:
    meta = {
        "shape": list(v.shape),
        "spacing": [float(v.spacing_x), float(v.spacing_y)],
        "thickness": float(v.slice_thickness),
        "phase": v.phase,
        "kind": "label",
        "subject": v.subject_id,
    }
    _save(v.labels, "u1", meta, Path(path))


def _read(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise VolumeFormatError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
        h, w, d = (int(x) for x in meta["shape"])
        sx, sy = (float(x) for x in meta["spacing"])
        t = float(meta["thickness"])
        kind = meta["kind"]
    except (KeyError, ValueError, TypeError) as exc:
        raise VolumeFormatError(f"malformed sidecar {side}: {exc}") from exc
    if kind not in ("intensity", "label"):
        raise VolumeFormatError(f"unknown kind {kind!r}")
    _check_spacing(sx, sy, t)
    dtype = np.dtype("<f4") if kind == "intensity" else np.dtype("u1")
    raw = path.read_bytes()
    expected = h * w * d * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(raw)} bytes, sidecar shape {[h, w, d]} needs {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(d, h, w).transpose(1, 2, 0).copy()
    return arr, meta


def load_volume(path: str | os.PathLike) -> CineVolume:
    arr, meta = _read(Path(path))
    if meta["kind"] != "intensity":
        raise VolumeFormatError(f"{path} is a label volume; use load_labels")
    return CineVolume(
        voxels=arr.astype(np.float32),
        spacing_x=float(meta["spacing"][0]),
        spacing_y=float(meta["spacing"][1]),
        slice_thickness=float(meta["thickness"]),
        phase=meta.get("phase", "ED"),
        subject_id=meta.get("subject", ""),
    )


def load_labels(path: str | os.PathLike) -> LabelVolume:
    arr, meta = _read(Path(path))
    if meta["kind"] != "label":
        raise VolumeFormatError(f"{path} is an intensity volume; use load_volume")
    return LabelVolume(
        labels=arr,
        spacing_x=float(meta["spacing"][0]),
        spacing_y=float(meta["spacing"][1]),
        slice_thickness=float(meta["thickness"]),
        phase=meta.get("phase", "ED"),
        subject_id=meta.get("subject", ""),
    )


# --------------------------------------------------------------------------
# analytic phantom


@dataclass
class PhantomConfig:
    """Concentric LV/myocardium with a crescent RV, all radii in millimetres.

    The RV crescent is the disk of radius ``rv_radius`` whose centre sits
    ``rv_offset`` mm to the left of the LV centre, minus the disk of radius
    ``r_myo + rv_gap`` around the LV centre.  Setting ``rv_radius`` to 0
    drops the RV, which keeps the phantom symmetric under both flips.
    """

    height: int = 64
    width: int = 64
    slices: int = 10
    spacing: tuple[float, float] = (1.0, 1.0)
    thickness: float = 10.0
    r_lv: dict = field(default_factory=lambda: {"ED": 11.0, "ES": 7.0})
    r_myo: dict = field(default_factory=lambda: {"ED": 16.0, "ES": 13.0})
    rv_radius: dict = field(default_factory=lambda: {"ED": 13.0, "ES": 10.0})
    rv_offset: dict = field(default_factory=lambda: {"ED": 18.0, "ES": 15.0})
    rv_gap: float = 1.0
    # per-slice radius multipliers (base to apex), len == slices; None = cylinder
    slice_scale: Sequence[float] | None = None
    # offset of the LV centre from the image centre, mm (x, y)
    center_offset: tuple[float, float] = (6.0, 0.0)
    intensity: dict = field(
        default_factory=lambda: {"background": 40.0, "myo": 110.0, "blood": 200.0}
    )
    noise_sigma: float = 10.0
    # multiplicative speckle, std of a unit-mean gamma field; 0 disables
    speckle: float = 0.0
    seed: int = 0
    subject_id: str = "phantom"
    diagnosis: str | None = None


def _lens_area(r1: float, r2: float, d: float) -> float:
    """Intersection area of two disks with radii r1, r2 and centre distance d."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    a3 = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    return a1 + a2 - a3


def phantom_areas(cfg: PhantomConfig, phase: str, scale: float = 1.0) -> dict[int, float]:
    """Closed-form in-plane areas (mm^2) of each structure for one slice."""
    r_lv = cfg.r_lv[phase] * scale
    r_myo = cfg.r_myo[phase] * scale
    out = {LV: math.pi * r_lv**2, MYO: math.pi * (r_myo**2 - r_lv**2), RV: 0.0}
    r_rv = cfg.rv_radius[phase] * scale
    if r_rv > 0:
        r_ex = r_myo + cfg.rv_gap * scale
        d = cfg.rv_offset[phase] * scale
        out[RV] = math.pi * r_rv**2 - _lens_area(r_rv, r_ex, d)
    return out


def _validate_geometry(cfg: PhantomConfig) -> None:
    if cfg.slices < 1 or cfg.height < 1 or cfg.width < 1:
        raise PhantomGeometryError("image size and slice count must be positive")
    _check_spacing(cfg.spacing[0], cfg.spacing[1], cfg.thickness)
    if cfg.slice_scale is not None and len(cfg.slice_scale) != cfg.slices:
        raise PhantomGeometryError("slice_scale needs one factor per slice")
    sx, sy = cfg.spacing
    half_w = (cfg.width - 1) / 2 * sx
    half_h = (cfg.height - 1) / 2 * sy
    ox, oy = cfg.center_offset
    max_scale = max(cfg.slice_scale) if cfg.slice_scale is not None else 1.0
    for phase in PHASES:
        r_lv, r_myo = cfg.r_lv[phase], cfg.r_myo[phase]
        if r_lv <= 0:
            raise PhantomGeometryError(f"{phase}: LV radius must be positive")
        if r_myo <= r_lv:
            raise PhantomGeometryError(f"{phase}: r_myo ({r_myo}) must exceed r_lv ({r_lv})")
        r_rv, d = cfg.rv_radius[phase], cfg.rv_offset[phase]
        r_ex = r_myo + cfg.rv_gap
        extent_x = [ox - r_myo, ox + r_myo]
        if r_rv > 0:
            if d + r_ex <= r_rv:
                raise PhantomGeometryError(f"{phase}: RV disk swallows the LV; no crescent")
            if d + r_rv <= r_ex:
                raise PhantomGeometryError(f"{phase}: RV disk lies inside the excluded LV region")
            extent_x = [min(extent_x[0], ox - d - r_rv), extent_x[1]]
            extent_y = max(r_myo, r_rv)
        else:
            extent_y = r_myo
        ext = [abs(e) * max_scale for e in extent_x]
        if max(ext) >= half_w or (abs(oy) + extent_y) * max_scale >= half_h:
            raise PhantomGeometryError(f"{phase}: structures overlap the image boundary")


def rasterize_slice(cfg: PhantomConfig, phase: str, scale: float = 1.0) -> np.ndarray:
    """Label map (H, W) sampled at pixel centres."""
    sx, sy = cfg.spacing
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    cx = (cfg.width - 1) / 2 + cfg.center_offset[0] / sx
    cy = (cfg.height - 1) / 2 + cfg.center_offset[1] / sy
    dx = (xx - cx) * sx
    dy = (yy - cy) * sy
    dist = np.hypot(dx, dy)
    r_lv = cfg.r_lv[phase] * scale
    r_myo = cfg.r_myo[phase] * scale
    lab = np.zeros((cfg.height, cfg.width), np.uint8)
    r_rv = cfg.rv_radius[phase] * scale
    if r_rv > 0:
        d_rv = np.hypot(dx + cfg.rv_offset[phase] * scale, dy)
        lab[(d_rv < r_rv) & (dist >= r_myo + cfg.rv_gap * scale)] = RV
    lab[dist < r_myo] = MYO
    lab[dist < r_lv] = LV
    return lab


def _render(cfg: PhantomConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    it = cfg.intensity
    img = np.full(labels.shape, it["background"], np.float64)
    img[labels == MYO] = it["myo"]
    img[(labels == LV) | (labels == RV)] = it["blood"]
    if cfg.speckle > 0:
        k = 1.0 / cfg.speckle**2
        img = img * rng.gamma(k, 1.0 / k, size=img.shape)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return img.astype(np.float32)


def generate_phantom(cfg: PhantomConfig) -> SubjectRecord:
    """Rasterize an ED/ES pair with analytic volumes attached as metadata."""
    _validate_geometry(cfg)
    rng = np.random.default_rng(cfg.seed)
    scales = list(cfg.slice_scale) if cfg.slice_scale is not None else [1.0] * cfg.slices
    sx, sy = cfg.spacing
    pairs = {}
    analytic: dict[str, dict[str, float]] = {}
    for phase in PHASES:
        lab = np.stack([rasterize_slice(cfg, phase, s) for s in scales], axis=-1)
        img = _render(cfg, lab, rng)
        vols = {LV: 0.0, MYO: 0.0, RV: 0.0}
        for s in scales:
            for c, a in phantom_areas(cfg, phase, s).items():
                vols[c] += a * cfg.thickness / 1000.0
        analytic[phase] = {CLASS_NAMES[c]: v for c, v in vols.items()}
        kw = dict(spacing_x=sx, spacing_y=sy, slice_thickness=cfg.thickness, phase=phase,
                  subject_id=cfg.subject_id)
        pairs[phase] = (CineVolume(voxels=img, **kw), LabelVolume(labels=lab, **kw))
    lv_ed, lv_es = analytic["ED"]["LV"], analytic["ES"]["LV"]
    rv_ed, rv_es = analytic["ED"]["RV"], analytic["ES"]["RV"]
    meta = {
        "analytic_ml": analytic,
        "analytic_lvef": (lv_ed - lv_es) / lv_ed * 100.0,
        "analytic_rvef": (rv_ed - rv_es) / rv_ed * 100.0 if rv_ed > 0 else None,
        "analytic_lv_mass_g": analytic["ED"]["Myo"] * 1.05,
    }
    return SubjectRecord(
        subject_id=cfg.subject_id,
        ed=pairs["ED"],
        es=pairs["ES"],
        diagnosis=cfg.diagnosis,
        metadata=meta,
    )


# Class-typical geometry (mm), loosely following the cohort contrasts of the
# ACDC groups: dilated cavity for DCM, thick wall for HCM, large RV for RV.
CLASS_GEOMETRY = {
    "NOR": dict(r_lv=(17.0, 11.0), wall=(7.0, 9.5), rv=(14.0, 10.0)),
    "DCM": dict(r_lv=(24.0, 22.0), wall=(5.0, 5.5), rv=(12.0, 11.0)),
    "HCM": dict(r_lv=(12.0, 6.5), wall=(12.0, 14.0), rv=(11.0, 8.0)),
    "MINF": dict(r_lv=(20.0, 16.5), wall=(5.5, 6.5), rv=(11.0, 9.5)),
    "RV": dict(r_lv=(13.0, 9.5), wall=(6.0, 7.5), rv=(21.0, 18.0)),
}


def class_phantom_config(
    diagnosis: str,
    rng: np.random.Generator,
    subject_id: str,
    size: int = 64,
    slices: int = 6,
    spacing: float = 1.5,
    thickness: float = 10.0,
    jitter: float = 0.05,
    **overrides,
) -> PhantomConfig:
    """Draw a phantom config whose geometry is typical of ``diagnosis``."""
    g = CLASS_GEOMETRY[diagnosis]
    j = lambda: float(1.0 + rng.uniform(-jitter, jitter))  # noqa: E731
    r_lv, r_myo, rv_r, rv_off = {}, {}, {}, {}
    for i, phase in enumerate(PHASES):
        r_lv[phase] = g["r_lv"][i] * j()
        r_myo[phase] = r_lv[phase] + g["wall"][i] * j()
        rv_r[phase] = g["rv"][i] * j()
        # RV centre sits so the crescent overlaps the septum by ~60% of its radius
        rv_off[phase] = r_myo[phase] + 0.4 * rv_r[phase]
    taper = np.linspace(1.0, 0.75, slices) if slices > 1 else np.ones(1)
    cfg = PhantomConfig(
        height=size,
        width=size,
        slices=slices,
        spacing=(spacing, spacing),
        thickness=thickness,
        r_lv=r_lv,
        r_myo=r_myo,
        rv_radius=rv_r,
        rv_offset=rv_off,
        rv_gap=1.0,
        slice_scale=[float(s) for s in taper],
        center_offset=(float(rng.uniform(-2, 2)) + 8.0, float(rng.uniform(-2, 2))),
        seed=int(rng.integers(2**31)),
        subject_id=subject_id,
        diagnosis=diagnosis,
    )
    return replace(cfg, **overrides) if overrides else cfg


# Contrast inversion of myocardium vs background plus speckle: a second
# "scanner" for domain-shift / few-shot studies.
SHIFTED_APPEARANCE = dict(
    intensity={"background": 120.0, "myo": 60.0, "blood": 170.0}, speckle=0.25, noise_sigma=6.0
)


def phantom_cohort(
    n_subjects: int, seed: int, prefix: str = "phantom", **kwargs
) -> list[SubjectRecord]:
    """``n_subjects`` records cycling through the five diagnoses."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_subjects):
        dx = DIAGNOSES[i % len(DIAGNOSES)]
        cfg = class_phantom_config(dx, rng, subject_id=f"{prefix}_{i:03d}", **kwargs)
        out.append(generate_phantom(cfg))
    return out


# --------------------------------------------------------------------------
# manifests and splits


def default_split_counts(n: int, ratio: tuple[int, int, int] = (80, 20, 50)) -> tuple[int, int, int]:
    """Train/val/test sizes for ``n`` subjects in the 80:20:50 ratio (largest remainder)."""
    total = sum(ratio)
    ideal = [n * r / total for r in ratio]
    out = [int(math.floor(x)) for x in ideal]
    for k in sorted(range(3), key=lambda k: (-(ideal[k] - out[k]), k))[: n - sum(out)]:
        out[k] += 1
    return tuple(out)


def split_manifest(
    records: Sequence[SubjectRecord], counts: tuple[int, int, int], seed: int
) -> Manifest:
    """Stratified, seeded assignment of records to train/val/test.

    For split ``s`` and class ``k`` the ideal count is
    ``counts[s] * n_k / n``; each quota is its floor or ceiling (largest
    remainder), so every class is within one of perfect balance.  Records
    left over when ``sum(counts) < len(records)`` are dropped.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise ValueError("split counts must be three non-negative integers")
    if sum(counts) > len(records):
        raise ValueError(f"split counts {counts} exceed the {len(records)} available records")
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(str(r.diagnosis), []).append(i)
    classes = sorted(by_class)
    sizes = [len(by_class[c]) for c in classes]
    n = len(records)

    quota = np.zeros((len(classes), 3), int)
    for s in range(3):
        ideal = [counts[s] * nk / n for nk in sizes]
        alloc = [int(math.floor(x)) for x in ideal]
        free = [sizes[k] - quota[k].sum() for k in range(len(classes))]
        order = sorted(
            range(len(classes)), key=lambda k: (-(ideal[k] - alloc[k]), -(free[k] - alloc[k]), k)
        )
        short = counts[s] - sum(alloc)
        for k in order:
            if short == 0:
                break
            if alloc[k] < free[k]:
                alloc[k] += 1
                short -= 1
        if short or any(a > f for a, f in zip(alloc, free)):
            raise ValueError("cannot satisfy split counts with the available records")
        quota[:, s] = alloc

    rng = np.random.default_rng(seed)
    assigned: dict[int, str] = {}
    for k, c in enumerate(classes):
        idx = list(by_class[c])
        rng.shuffle(idx)
        pos = 0
        for s, name in enumerate(SPLITS):
            for i in idx[pos : pos + quota[k, s]]:
                assigned[i] = name
            pos += quota[k, s]
    out = [replace(records[i], split=assigned[i]) for i in sorted(assigned)]
    return Manifest(records=out, split_counts=counts, seed=seed)


def save_subject(rec: SubjectRecord, root: Path) -> dict:
    """Write the four volumes of ``rec`` under ``root`` and return a manifest entry."""
    root = Path(root)
    sub = root / rec.subject_id
    sub.mkdir(parents=True, exist_ok=True)
    entry: dict = {"subject": rec.subject_id, "diagnosis": rec.diagnosis, "split": rec.split}
    for phase in PHASES:
        img, lab = rec.phase(phase)
        ip = sub / f"{phase.lower()}_image.vol"
        lp = sub / f"{phase.lower()}_label.vol"
        save_volume(img, ip)
        save_labels(lab, lp)
        entry[phase] = {"image": str(ip.relative_to(root)), "label": str(lp.relative_to(root))}
    if rec.metadata:
        entry["metadata"] = rec.metadata
    return entry


def save_manifest(manifest: Manifest, root: str | os.PathLike, name: str = "manifest.json") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = [save_subject(r, root) for r in manifest.records]
    doc = {"seed": manifest.seed, "split_counts": list(manifest.split_counts), "records": entries}
    path = root / name
    _write_atomic(path, json.dumps(doc, indent=2, sort_keys=True).encode())
    return path


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    root = path.parent
    doc = json.loads(path.read_text())
    records = []
    for e in doc["records"]:
        pairs = {}
        for phase in PHASES:
            pairs[phase] = (load_volume(root / e[phase]["image"]), load_labels(root / e[phase]["label"]))
        records.append(
            SubjectRecord(
                subject_id=e["subject"],
                ed=pairs["ED"],
                es=pairs["ES"],
                diagnosis=e.get("diagnosis"),
                split=e.get("split", "train"),
                metadata=e.get("metadata", {}),
            )
        )
    return Manifest(records=records, split_counts=tuple(doc["split_counts"]), seed=int(doc["seed"]))


def iter_phases(records: Iterable[SubjectRecord]):
    for r in records:
        for phase in PHASES:
            img, lab = r.phase(phase)
            yield r, phase, img, lab
