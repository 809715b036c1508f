"""Training loop: AdamW, warm-up + cosine LR, early stopping, checkpoints, few-shot.

Every random draw is derived from ``(seed, epoch[, sample])`` so an epoch's
data order, augmentation and dropout masks depend only on the seed and the
epoch number.  That makes resuming from a checkpoint reproduce the
uninterrupted trajectory without storing generator internals.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import metrics
from .losses import CSV_HEADER, LossWeights, composite_loss
from .model import CardiacViT, ModelConfig, build_model
from .preprocess import AugmentationConfig, apply_plan, prepare_phase, sample_plan, tta_predict
from .volume_io import DIAGNOSES, PHASES, CineVolume, SubjectRecord

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field path."""


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 24
    base_lr: float = 1e-4
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 5
    early_stop_patience: int = 30
    min_delta: float = 1e-4
    validate_every: int = 1
    seed: int = 0
    freeze_blocks: int = 0
    tta: bool = False
    tta_classification: bool = False  # also flip-average the disease head when tta is on
    mixed_precision: bool = False  # accepted for config compatibility; runs in full precision
    few_shot_epochs: int = 50
    few_shot_lr_scale: float = 0.5
    few_shot_warmup_epochs: int = 2
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    augmentation: AugmentationConfig | None = field(default_factory=AugmentationConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs: must be in [0, epochs)")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr: must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every: must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience: must be >= 1")
        if not 0 <= self.freeze_blocks <= self.model.depth:
            raise ConfigError(f"freeze_blocks: must be in [0, {self.model.depth}]")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["loss_weights"] = self.loss_weights.to_dict()
        d["model"] = self.model.to_dict()
        d["augmentation"] = self.augmentation.to_dict() if self.augmentation else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        nested = {
            "loss_weights": LossWeights.from_dict,
            "model": ModelConfig.from_dict,
            "augmentation": AugmentationConfig.from_dict,
        }
        for key, build in nested.items():
            if key in d and d[key] is not None and not hasattr(d[key], "to_dict"):
                try:
                    d[key] = build(d[key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<file>: {exc}") from exc
        return cls.from_dict(doc)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig, epochs: int | None = None) -> float:
    """Linear ramp to ``base_lr`` over the warm-up, then half-cosine to 0 at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    epochs = cfg.epochs if epochs is None else epochs
    total = epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    span = max(total - 1 - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# data


@dataclass
class SliceData:
    """All 2.5D samples of a set of subject-phases, at model resolution."""

    x: np.ndarray  # (M, 3, S, S) float32
    y: np.ndarray  # (M, S, S) int64
    diagnosis: np.ndarray  # (M,) int64, -1 when unknown
    subject: list[str]
    phase: list[str]
    z: np.ndarray
    spacing: dict[str, tuple[float, float, float]]  # subject -> (sx, sy, thickness) at S

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "SliceData":
        idx = np.asarray(idx, int)
        return SliceData(
            x=self.x[idx], y=self.y[idx], diagnosis=self.diagnosis[idx],
            subject=[self.subject[i] for i in idx], phase=[self.phase[i] for i in idx],
            z=self.z[idx], spacing=self.spacing,
        )

    def groups(self) -> dict[tuple[str, str], np.ndarray]:
        """(subject, phase) -> sample indices ordered by slice."""
        out: dict[tuple[str, str], list[int]] = {}
        for i, key in enumerate(zip(self.subject, self.phase)):
            out.setdefault(key, []).append(i)
        return {k: np.array(sorted(v, key=lambda i: self.z[i])) for k, v in out.items()}


def build_slices(records: Sequence[SubjectRecord], size: int) -> SliceData:
    xs, ys, dx, subj, ph, zs = [], [], [], [], [], []
    spacing = {}
    for rec in records:
        label = DIAGNOSES.index(rec.diagnosis) if rec.diagnosis in DIAGNOSES else -1
        for phase in PHASES:
            img, lab = rec.phase(phase)
            x, y = prepare_phase(img, lab, size)
            h, w, depth = img.shape
            spacing[rec.subject_id] = (img.spacing_x * w / size, img.spacing_y * h / size, img.slice_thickness)
            xs.append(x)
            ys.append(y)
            dx += [label] * depth
            subj += [rec.subject_id] * depth
            ph += [phase] * depth
            zs.append(np.arange(depth))
    if not xs:
        raise ValueError("no records to build slices from")
    return SliceData(
        x=np.concatenate(xs), y=np.concatenate(ys), diagnosis=np.array(dx, np.int64),
        subject=subj, phase=ph, z=np.concatenate(zs), spacing=spacing,
    )


def _augment_batch(data: SliceData, idx, cfg: TrainConfig, epoch: int):
    x = data.x[idx]
    y = data.y[idx]
    aug = cfg.augmentation
    if aug is None:
        return x, y
    xs, ys = [], []
    for i, k in enumerate(idx):
        rng = np.random.default_rng([cfg.seed, aug.rng_seed, epoch, int(k)])
        plan = sample_plan(aug, rng)
        xi, yi = apply_plan(x[i], y[i], plan, aug)
        xs.append(xi)
        ys.append(yi)
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.int64)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


# --------------------------------------------------------------------------
# state


@dataclass
class EpochStats:
    epoch: int
    lr: float
    total: float
    dice: float
    ce: float
    lovasz: float
    cls: float
    val_dice: float | None = None


@dataclass
class TrainState:
    model: CardiacViT
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    epoch: int = 0  # completed epochs
    step: int = 0
    best_dice: float = -math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    best_params: dict | None = None
    history: list[EpochStats] = field(default_factory=list)
    schedule_epochs: int | None = None  # overrides cfg.epochs for the LR schedule


def make_optimizer(model: CardiacViT, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        list(model.parameters()), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )


def init_state(cfg: TrainConfig, model: CardiacViT | None = None, dtype=torch.float32) -> TrainState:
    model = model if model is not None else build_model(cfg.model, seed=cfg.seed, dtype=dtype)
    freeze_blocks(model, cfg.freeze_blocks)
    return TrainState(model=model, optimizer=make_optimizer(model, cfg), cfg=cfg)


def freeze_blocks(model: CardiacViT, n: int) -> CardiacViT:
    """Exclude the patch embedding and the first ``n`` encoder blocks from updates."""
    if not 0 <= n <= model.cfg.depth:
        raise ValueError(f"cannot freeze {n} of {model.cfg.depth} blocks")
    for p in model.parameters():
        p.requires_grad_(True)
    if n > 0:
        for p in model.encoder_parameters(n):
            p.requires_grad_(False)
    return model


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.default_rng([seed, epoch, 0xD0]).integers(2**62))


def train_epoch(
    state: TrainState,
    data: SliceData,
    step_log: Callable[[str], None] | None = None,
    dump_dir: Path | None = None,
) -> EpochStats:
    """One seeded pass over ``data``; updates ``state`` in place."""
    cfg = state.cfg
    model = state.model
    epoch = state.epoch + 1
    model.train()
    torch.manual_seed(_epoch_seed(cfg.seed, epoch))
    n = len(data)
    bs = min(cfg.batch_size, n)
    spe = steps_per_epoch(n, bs)
    order = epoch_order(n, cfg.seed, epoch)
    dtype = next(model.parameters()).dtype
    sums = np.zeros(5)
    lr = 0.0
    for b in range(spe):
        idx = order[b * bs : (b + 1) * bs]
        x, y = _augment_batch(data, idx, cfg, epoch)
        lr = lr_at(state.step, spe, cfg, state.schedule_epochs)
        for g in state.optimizer.param_groups:
            g["lr"] = lr
        out = model(torch.from_numpy(x).to(dtype))
        br = composite_loss(
            out, torch.from_numpy(y), torch.from_numpy(data.diagnosis[idx]), cfg.loss_weights,
            subject_ids=[data.subject[i] for i in idx],
        )
        if not torch.isfinite(br.total):
            if dump_dir is not None:
                np.savez(Path(dump_dir) / f"nonfinite_e{epoch}_b{b}.npz", x=x, y=y, idx=idx)
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}")
        state.optimizer.zero_grad(set_to_none=True)
        br.total.backward()
        state.optimizer.step()
        state.step += 1
        vals = br.as_floats()
        sums += [vals[k] for k in ("total", "dice", "ce", "lovasz", "cls")]
        if step_log is not None:
            step_log(br.csv_row(state.step) + "\n")
    state.epoch = epoch
    mean = sums / spe
    stats = EpochStats(epoch, lr, *[float(v) for v in mean])
    state.history.append(stats)
    return stats


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Validation:
    mean_dice: float
    scores: metrics.SegScores
    classification: dict
    rows: list[dict]
    subject_probs: dict[str, np.ndarray]


@torch.no_grad()
def predict_probs(model: CardiacViT, x: np.ndarray, tta: bool = False, batch: int = 32,
                  tta_classification: bool = False):
    """Segmentation probabilities (M, K, S, S) and disease probabilities (M, K_dis).

    TTA averages the segmentation maps; the disease head uses the plain
    forward pass unless ``tta_classification`` is set.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    segs, dis = [], []
    for i in range(0, len(x), batch):
        xb = torch.from_numpy(np.ascontiguousarray(x[i : i + batch])).to(dtype)
        out = model(xb)
        seg = tta_predict(lambda t: model(t).seg_probs, xb) if tta else out.seg_probs
        d = out.disease_probs
        if tta and tta_classification:
            d = (d + model(xb.flip(-1)).disease_probs + model(xb.flip(-2)).disease_probs) / 3
        segs.append(seg.double().numpy())
        dis.append(d.double().numpy())
    return np.concatenate(segs), np.concatenate(dis)


def validate(
    model: CardiacViT,
    data: SliceData,
    tta: bool = False,
    predictor: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None,
    tta_classification: bool = False,
) -> Validation:
    """Per subject-phase 3D scores, then classification from subject-averaged probabilities.

    ``predictor`` replaces the model (x -> (seg_probs, disease_probs)) for
    tests; TTA then wraps its segmentation output.
    """
    if len(data) == 0:
        raise ValueError("empty validation set")
    if predictor is None:
        seg, dis = predict_probs(model, data.x, tta=tta, tta_classification=tta_classification)
    else:
        seg, dis = predictor(data.x)
        if tta:
            seg = tta_predict(lambda x: predictor(np.ascontiguousarray(x))[0], data.x)
    pred = metrics.probs_to_labels(seg, axis=1)
    rows, per_structure = [], []
    for (subject, phase), idx in data.groups().items():
        sx, sy, t = data.spacing[subject]
        p3 = np.moveaxis(pred[idx], 0, -1)
        g3 = np.moveaxis(data.y[idx], 0, -1)
        sc = metrics.seg_scores(p3, g3, (sx, sy), t)
        per_structure.append(sc.structures)
        for name, s in sc.structures.items():
            rows.append({"subject": subject, "phase": phase, "structure": name, **asdict(s)})
    summary = metrics.aggregate(per_structure)
    subject_probs: dict[str, list[np.ndarray]] = {}
    subject_label: dict[str, int] = {}
    for i, s in enumerate(data.subject):
        subject_probs.setdefault(s, []).append(dis[i])
        subject_label[s] = int(data.diagnosis[i])
    mean_probs = {s: np.mean(v, axis=0) for s, v in subject_probs.items()}
    labelled = [s for s in mean_probs if subject_label[s] >= 0]
    cls = {}
    if labelled:
        probs = np.stack([mean_probs[s] for s in labelled])
        cls = metrics.classification_metrics(
            metrics.probs_to_labels(probs, axis=1), [subject_label[s] for s in labelled], probs
        )
    return Validation(summary.mean["dice"], summary, cls, rows, mean_probs)


@torch.no_grad()
def predict_volume(model: CardiacViT, image: CineVolume, tta: bool = False, tta_classification: bool = False):
    """Native-resolution probabilities (K, H, W, D) and mean disease probabilities."""
    size = model.cfg.image_size
    x, _ = prepare_phase(image, None, size)
    seg, dis = predict_probs(model, x, tta=tta, tta_classification=tta_classification)
    h, w, depth = image.shape
    t = torch.from_numpy(seg)
    if (h, w) != (size, size):
        t = torch.nn.functional.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return np.moveaxis(t.numpy(), 0, -1), dis.mean(0)


# --------------------------------------------------------------------------
# early stopping and checkpoints


@dataclass
class StopDecision:
    improved: bool
    checkpoint: bool
    stop: bool


class EarlyStopper:
    """Tracks best validation Dice; stop after ``patience`` epochs without gain > min_delta."""

    def __init__(self, patience: int = 30, min_delta: float = 1e-4, checkpoint_every: int = 5):
        self.patience = patience
        self.min_delta = min_delta
        self.checkpoint_every = checkpoint_every

    def update(self, state: TrainState, val_dice: float) -> StopDecision:
        improved = val_dice > state.best_dice + self.min_delta
        if improved:
            state.best_dice = val_dice
            state.best_epoch = state.epoch
            state.bad_epochs = 0
            state.best_params = copy.deepcopy(state.model.state_dict())
        else:
            state.bad_epochs += 1
        return StopDecision(
            improved=improved,
            checkpoint=state.epoch % self.checkpoint_every == 0,
            stop=state.bad_epochs >= self.patience,
        )


def restore_best(state: TrainState) -> None:
    if state.best_params is not None:
        state.model.load_state_dict(state.best_params)


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _tensor_bytes(t: torch.Tensor) -> tuple[bytes, dict]:
    a = t.detach().cpu().contiguous().numpy()
    dt = a.dtype.newbyteorder("<")
    return a.astype(dt).tobytes(), {"shape": list(a.shape), "dtype": dt.str}


def _tensor_from(raw: bytes, meta: dict) -> torch.Tensor:
    a = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
    return torch.from_numpy(a.astype(a.dtype.newbyteorder("="), copy=True))


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _dump(obj) -> bytes:
    return json.dumps(metrics._jsonable(obj), indent=2, sort_keys=True).encode()


def checkpoint_bytes(state: TrainState) -> bytes:
    """Deterministic archive: config, named tensors, optimizer moments, training state."""
    entries: dict[str, bytes] = {}
    index = {}

    def add_tensors(prefix: str, tensors: dict[str, torch.Tensor]) -> None:
        for name, t in tensors.items():
            raw, meta = _tensor_bytes(t)
            key = f"{prefix}/{name}.bin"
            entries[key] = raw
            index[key] = meta

    add_tensors("params", state.model.state_dict())
    if state.best_params is not None:
        add_tensors("best", state.best_params)
    names = {id(p): n for n, p in state.model.named_parameters()}
    opt_steps = {}
    for p, st in state.optimizer.state.items():
        n = names[id(p)]
        add_tensors("optim", {f"{n}.exp_avg": st["exp_avg"], f"{n}.exp_avg_sq": st["exp_avg_sq"]})
        opt_steps[n] = float(st["step"])
    entries["config.json"] = _dump(state.cfg.to_dict())
    entries["tensors.json"] = _dump(index)
    entries["state.json"] = _dump({
        "epoch": state.epoch,
        "step": state.step,
        "best_dice": None if state.best_dice == -math.inf else state.best_dice,
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
        "seed": state.cfg.seed,
        "schedule_epochs": state.schedule_epochs,
        "optimizer_steps": opt_steps,
        "history": [asdict(h) for h in state.history],
    })
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name in sorted(entries):
            _put(zf, name, entries[name])
    return buf.getvalue()


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, cfg_override: TrainConfig | None = None) -> TrainState:
    with zipfile.ZipFile(Path(path)) as zf:
        cfg = cfg_override or TrainConfig.from_dict(json.loads(zf.read("config.json")))
        index = json.loads(zf.read("tensors.json"))
        st = json.loads(zf.read("state.json"))
        tensors = {k: _tensor_from(zf.read(k), meta) for k, meta in index.items()}
    params = {k[len("params/"):-4]: v for k, v in tensors.items() if k.startswith("params/")}
    dtype = next(iter(params.values())).dtype
    model = CardiacViT(cfg.model).to(dtype)
    model.load_state_dict(params)
    state = init_state(cfg, model=model)
    best = {k[len("best/"):-4]: v for k, v in tensors.items() if k.startswith("best/")}
    state.best_params = best or None
    opt_state = {}
    name_to_idx = {n: i for i, (n, _) in enumerate(model.named_parameters())}
    for n, step in st["optimizer_steps"].items():
        opt_state[name_to_idx[n]] = {
            "step": torch.tensor(step),
            "exp_avg": tensors[f"optim/{n}.exp_avg.bin"],
            "exp_avg_sq": tensors[f"optim/{n}.exp_avg_sq.bin"],
        }
    sd = state.optimizer.state_dict()
    sd["state"] = opt_state
    state.optimizer.load_state_dict(sd)
    state.epoch = st["epoch"]
    state.step = st["step"]
    state.best_dice = -math.inf if st["best_dice"] is None else st["best_dice"]
    state.best_epoch = st["best_epoch"]
    state.bad_epochs = st["bad_epochs"]
    state.schedule_epochs = st.get("schedule_epochs")
    state.history = [EpochStats(**h) for h in st["history"]]
    return state


# --------------------------------------------------------------------------
# full runs


EPOCH_CSV_HEADER = "epoch,lr,total,dice,ce,lovasz,cls,val_dice"


@dataclass
class FitResult:
    state: TrainState
    stopped_early: bool
    best_dice: float | None
    best_epoch: int | None


def fit(
    cfg: TrainConfig,
    train: SliceData,
    val: SliceData | None = None,
    run_dir: Path | None = None,
    state: TrainState | None = None,
    stop_after: int | None = None,
) -> FitResult:
    """Train until the epoch budget, early stop, or ``stop_after`` epochs (for resume tests)."""
    state = state or init_state(cfg)
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.min_delta, cfg.checkpoint_every)
    step_fh = epoch_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        step_path, epoch_path = run_dir / "steps.csv", run_dir / "epochs.csv"
        _truncate_log(step_path, CSV_HEADER, lambda row: int(row.split(",")[0]) <= state.step)
        _truncate_log(epoch_path, EPOCH_CSV_HEADER, lambda row: int(row.split(",")[0]) <= state.epoch)
        step_fh = open(step_path, "a")
        epoch_fh = open(epoch_path, "a")
    stopped = False
    try:
        while state.epoch < (state.schedule_epochs or cfg.epochs):
            stats = train_epoch(state, train, step_fh.write if step_fh else None, run_dir)
            if step_fh:
                step_fh.flush()
            decision = None
            if val is not None and state.epoch % cfg.validate_every == 0:
                v = validate(state.model, val, tta=cfg.tta, tta_classification=cfg.tta_classification)
                stats.val_dice = v.mean_dice
                decision = stopper.update(state, v.mean_dice)
                if decision.improved and run_dir is not None:
                    save_checkpoint(state, run_dir / "checkpoints" / "best.ckpt")
            if epoch_fh:
                epoch_fh.write(_epoch_row(stats))
                epoch_fh.flush()
            if run_dir is not None and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(state, run_dir / "checkpoints" / f"epoch_{state.epoch:04d}.ckpt")
                save_checkpoint(state, run_dir / "checkpoints" / "last.ckpt")
            log.info("epoch %d lr %.3g loss %.4f val %s", stats.epoch, stats.lr, stats.total, stats.val_dice)
            if decision is not None and decision.stop:
                stopped = True
                break
            if stop_after is not None and state.epoch >= stop_after:
                break
    finally:
        if step_fh:
            step_fh.close()
            epoch_fh.close()
    if val is not None and state.best_params is not None and (
        stopped or state.epoch >= (state.schedule_epochs or cfg.epochs)
    ):
        restore_best(state)
    if run_dir is not None:
        save_checkpoint(state, run_dir / "checkpoints" / "last.ckpt")
    best = None if state.best_dice == -math.inf else state.best_dice
    return FitResult(state, stopped, best, state.best_epoch if best is not None else None)


def _epoch_row(s: EpochStats) -> str:
    vd = "" if s.val_dice is None else f"{s.val_dice:.10g}"
    return f"{s.epoch},{s.lr:.10g},{s.total:.10g},{s.dice:.10g},{s.ce:.10g},{s.lovasz:.10g},{s.cls:.10g},{vd}\n"


def _truncate_log(path: Path, header: str, keep: Callable[[str], bool]) -> None:
    """Start a fresh log, or on resume drop rows written after the checkpoint."""
    rows = []
    if path.exists():
        rows = [r for r in path.read_text().splitlines()[1:] if r and keep(r)]
    path.write_text("\n".join([header] + rows) + "\n")


# --------------------------------------------------------------------------
# few-shot adaptation


def few_shot_config(cfg: TrainConfig) -> TrainConfig:
    return replace(
        cfg,
        epochs=cfg.few_shot_epochs,
        base_lr=cfg.base_lr * cfg.few_shot_lr_scale,
        warmup_epochs=min(cfg.few_shot_warmup_epochs, cfg.few_shot_epochs - 1),
    )


FEW_SHOT_STRUCTURES = ("Mean", "RV", "Myo", "LV")


def few_shot_row(n: int, scores: metrics.SegScores) -> dict:
    row: dict = {"N": n}
    for name in FEW_SHOT_STRUCTURES:
        src = scores.mean if name == "Mean" else asdict(scores.structures[name])
        for k in ("dice", "iou", "hd95"):
            row[f"{name}.{k}"] = src[k]
    return row


def few_shot_finetune(
    source: TrainState | str | Path,
    subset: Sequence[SubjectRecord],
    cfg: TrainConfig | None = None,
    eval_records: Sequence[SubjectRecord] | None = None,
) -> tuple[TrainState, metrics.SegScores | None, dict | None]:
    """Continue training a checkpoint on a small labelled subset with the reduced schedule."""
    base = load_checkpoint(source) if not isinstance(source, TrainState) else source
    cfg = few_shot_config(cfg or base.cfg)
    model = copy.deepcopy(base.model)
    state = init_state(cfg, model=model)
    train = build_slices(subset, cfg.model.image_size)
    # subsets smaller than a batch train as one batch
    state.cfg = replace(cfg, batch_size=min(cfg.batch_size, len(train)))
    fit(state.cfg, train, None, state=state)
    scores = row = None
    if eval_records:
        v = validate(state.model, build_slices(eval_records, cfg.model.image_size))
        scores = v.scores
        row = few_shot_row(len(subset), scores)
    return state, scores, row
