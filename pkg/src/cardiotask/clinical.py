"""Ventricular volumes, ejection fraction, LV mass, tolerance grading and reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume_io import DIAGNOSES, DIAGNOSIS_NAMES, LV, MYO, RV, LabelVolume

MYOCARDIAL_DENSITY = 1.05  # g/ml


class UndefinedEjectionFraction(ValueError):
    pass


def structure_volume(labels, class_id: int, spacing=(1.0, 1.0), thickness: float = 1.0) -> float:
    """Sum over slices of (pixel count * pixel area) * slice thickness, in ml."""
    if isinstance(labels, LabelVolume):
        spacing, thickness = labels.spacing, labels.slice_thickness
        labels = labels.labels
    if class_id not in (0, LV, MYO, RV):
        raise ValueError(f"unknown class id {class_id}")
    arr = np.asarray(labels)
    if arr.ndim == 2:
        arr = arr[..., None]
    counts = np.count_nonzero(arr == class_id, axis=(0, 1))
    area = counts * float(spacing[0]) * float(spacing[1])
    return float(area.sum() * thickness / 1000.0)


def ejection_fraction(edv_ml: float, esv_ml: float) -> float:
    if not edv_ml > 0:
        raise UndefinedEjectionFraction(f"EF undefined for EDV={edv_ml}")
    return (edv_ml - esv_ml) / edv_ml * 100.0


def lv_mass(myo_volume_ml: float) -> float:
    if myo_volume_ml < 0:
        raise ValueError("negative myocardial volume")
    return myo_volume_ml * MYOCARDIAL_DENSITY


@dataclass
class ClinicalIndices:
    lv_edv_ml: float
    lv_esv_ml: float
    lvef_pct: float
    rv_edv_ml: float
    rv_esv_ml: float
    rvef_pct: float
    lv_mass_g: float
    provenance: str = "predicted"
    subject_id: str = ""
    flags: list[str] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {p: getattr(self, attr) for p, attr in PARAMETERS.items()}

    def to_dict(self) -> dict:
        return asdict(self)


# report/table name -> attribute
PARAMETERS = {
    "LVEF": "lvef_pct",
    "LVEDV": "lv_edv_ml",
    "LVESV": "lv_esv_ml",
    "RVEF": "rvef_pct",
    "RVEDV": "rv_edv_ml",
    "RVESV": "rv_esv_ml",
    "LV Mass": "lv_mass_g",
}
UNITS = {"LVEF": "%", "LVEDV": "ml", "LVESV": "ml", "RVEF": "%", "RVEDV": "ml", "RVESV": "ml", "LV Mass": "g"}


def _ef_with_flags(edv: float, esv: float, name: str, flags: list[str]) -> float:
    try:
        ef = ejection_fraction(edv, esv)
    except UndefinedEjectionFraction:
        flags.append(f"{name}: undefined ejection fraction (EDV = 0)")
        return float("nan")
    if esv > edv:
        flags.append(f"{name}: negative ejection fraction (ESV exceeds EDV)")
    if not 0.0 <= ef <= 100.0:
        flags.append(f"{name}: ejection fraction outside [0, 100]")
    return ef


def compute_indices(
    ed_labels: LabelVolume | np.ndarray,
    es_labels: LabelVolume | np.ndarray,
    spacing=(1.0, 1.0),
    thickness: float = 1.0,
    provenance: str = "predicted",
    subject_id: str = "",
    mass_phase: str = "ED",
) -> ClinicalIndices:
    """Indices from ED/ES label volumes; phases come from the caller, never inferred."""
    vol = lambda lab, c: structure_volume(lab, c, spacing, thickness)  # noqa: E731
    flags: list[str] = []
    lv_edv, lv_esv = vol(ed_labels, LV), vol(es_labels, LV)
    rv_edv, rv_esv = vol(ed_labels, RV), vol(es_labels, RV)
    mass_src = ed_labels if mass_phase == "ED" else es_labels
    return ClinicalIndices(
        lv_edv_ml=lv_edv,
        lv_esv_ml=lv_esv,
        lvef_pct=_ef_with_flags(lv_edv, lv_esv, "LV", flags),
        rv_edv_ml=rv_edv,
        rv_esv_ml=rv_esv,
        rvef_pct=_ef_with_flags(rv_edv, rv_esv, "RV", flags),
        lv_mass_g=lv_mass(vol(mass_src, MYO)),
        provenance=provenance,
        subject_id=subject_id,
        flags=flags,
    )


# --------------------------------------------------------------------------
# tolerance grading


@dataclass(frozen=True)
class Threshold:
    """Inter-observer band ``<lo-hi``; a single bound has lo == hi.

    Pass below the band midpoint, Borderline up to hi + (hi - lo) / 2,
    Fail beyond.  With lo == hi this is a plain Pass/Fail cut at hi.
    """

    lo: float
    hi: float

    @property
    def pass_below(self) -> float:
        return (self.lo + self.hi) / 2

    @property
    def fail_above(self) -> float:
        return self.hi + (self.hi - self.lo) / 2

    def status(self, mae: float) -> str:
        if self.lo == self.hi:
            return "Pass" if mae < self.hi else "Fail"
        if mae < self.pass_below:
            return "Pass"
        if mae <= self.fail_above:
            return "Borderline"
        return "Fail"

    def label(self) -> str:
        return f"<{self.hi:g}" if self.lo == self.hi else f"<{self.lo:g}-{self.hi:g}"


DEFAULT_THRESHOLDS = {
    "LVEF": Threshold(5.0, 5.0),
    "LVEDV": Threshold(10.0, 15.0),
    "LVESV": Threshold(10.0, 15.0),
    "RVEF": Threshold(8.0, 8.0),
    "RVEDV": Threshold(12.0, 15.0),
    "RVESV": Threshold(12.0, 15.0),
    "LV Mass": Threshold(10.0, 50.0),
}


@dataclass
class ParameterTolerance:
    mae: float
    std: float
    threshold: str
    status: str
    n: int


def mae_report(
    pred: Sequence[ClinicalIndices],
    ref: Sequence[ClinicalIndices],
    thresholds: dict[str, Threshold] | None = None,
) -> dict[str, ParameterTolerance]:
    """MAE and sample std of absolute errors per parameter, graded against thresholds."""
    thresholds = thresholds or DEFAULT_THRESHOLDS
    if len(pred) != len(ref):
        raise ValueError(f"{len(pred)} predictions vs {len(ref)} references")
    for p, r in zip(pred, ref):
        if p.subject_id != r.subject_id:
            raise ValueError(f"unpaired subjects: {p.subject_id!r} vs {r.subject_id!r}")
    out = {}
    for name, attr in PARAMETERS.items():
        err = np.array([abs(getattr(p, attr) - getattr(r, attr)) for p, r in zip(pred, ref)], float)
        err = err[~np.isnan(err)]
        mae = float(err.mean()) if len(err) else float("nan")
        std = float(err.std(ddof=1)) if len(err) > 1 else 0.0
        th = thresholds[name]
        out[name] = ParameterTolerance(
            mae=mae, std=std, threshold=th.label(),
            status=th.status(mae) if not math.isnan(mae) else "Undefined", n=len(err),
        )
    return out


# --------------------------------------------------------------------------
# structured report

# NOR cohort mean +- 2 SD of the ACDC reference contours (LV/RV at ED).
NORMAL_RANGES = {
    "LVEDV": (130.1 - 2 * 26.4, 130.1 + 2 * 26.4),
    "RVEDV": (153.2 - 2 * 36.6, 153.2 + 2 * 36.6),
    "LVEF": (60.3 - 2 * 5.1, 60.3 + 2 * 5.1),
    "LV Mass": (1.05 * (97.6 - 2 * 24.6), 1.05 * (97.6 + 2 * 24.6)),
}


def _range_note(name: str, value: float) -> str:
    if math.isnan(value):
        return "undefined"
    band = NORMAL_RANGES.get(name)
    if band is None:
        return "no reference range"
    lo, hi = band
    if value < lo:
        return f"below normal range ({lo:.1f}-{hi:.1f})"
    if value > hi:
        return f"above normal range ({lo:.1f}-{hi:.1f})"
    return f"within normal range ({lo:.1f}-{hi:.1f})"


def report_fields(indices: ClinicalIndices, disease_probs, subject_id: str) -> dict:
    probs = [float(p) for p in np.asarray(disease_probs, dtype=np.float64).ravel()]
    if len(probs) != len(DIAGNOSES):
        raise ValueError(f"expected {len(DIAGNOSES)} disease probabilities")
    top = int(np.argmax(probs))
    measurements = {}
    for name, attr in PARAMETERS.items():
        v = float(getattr(indices, attr))
        measurements[name] = {
            "value": None if math.isnan(v) else round(v, 1),
            "unit": UNITS[name],
            "note": _range_note(name, v),
        }
    return {
        "subject": subject_id,
        "measurements": measurements,
        "diagnosis": {
            "code": DIAGNOSES[top],
            "name": DIAGNOSIS_NAMES[DIAGNOSES[top]],
            "probability": round(probs[top], 4),
            "distribution": {d: round(p, 4) for d, p in zip(DIAGNOSES, probs)},
        },
        "flags": list(indices.flags),
    }


DISCLAIMER = (
    "Automated measurements from model segmentations; not a substitute for review by a "
    "qualified clinician."
)


def generate_report(indices: ClinicalIndices, disease_probs, subject_id: str) -> tuple[str, dict]:
    """Deterministic text report and its JSON twin (same field values)."""
    doc = report_fields(indices, disease_probs, subject_id)
    m = doc["measurements"]

    def line(name: str) -> str:
        v = m[name]["value"]
        shown = "n/a" if v is None else f"{v:.1f} {m[name]['unit']}"
        return f"  {name:<8} {shown:>12}   {m[name]['note']}"

    dx = doc["diagnosis"]
    lines = [
        "CARDIAC MRI FUNCTION REPORT",
        f"Subject: {subject_id}",
        "",
        "Left ventricle",
        line("LVEDV"),
        line("LVESV"),
        line("LVEF"),
        line("LV Mass"),
        "",
        "Right ventricle",
        line("RVEDV"),
        line("RVESV"),
        line("RVEF"),
        "",
        f"Most likely diagnosis: {dx['name']} ({dx['code']}), probability {dx['probability'] * 100:.0f}%",
    ]
    if doc["flags"]:
        lines += ["", "Flags:"] + [f"  - {f}" for f in doc["flags"]]
    lines += [
        "",
        "Reference ranges: normal-cohort mean +/- 2 SD (ACDC NOR group).",
        DISCLAIMER,
        "",
    ]
    return "\n".join(lines), doc


def write_report(indices: ClinicalIndices, disease_probs, subject_id: str, out_dir: Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text, doc = generate_report(indices, disease_probs, subject_id)
    tp = out_dir / f"{subject_id}_report.txt"
    jp = out_dir / f"{subject_id}_report.json"
    tp.write_bytes(text.encode("utf-8"))
    jp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return tp, jp


INDEX_CSV_FIELDS = ["subject_id", "provenance"] + list(PARAMETERS.values())


def write_indices_csv(rows: Sequence[ClinicalIndices], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=INDEX_CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: getattr(r, k) for k in INDEX_CSV_FIELDS})


def tolerance_to_dict(rep: dict[str, ParameterTolerance]) -> dict:
    return {k: asdict(v) for k, v in rep.items()}

