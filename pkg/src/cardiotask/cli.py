"""Command-line entry point: phantom, train, eval, infer, report, fewshot.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Outputs are staged in a sibling temporary directory and renamed into place,
so an interrupted command never leaves a half-written result at ``--out``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import clinical, metrics, trainer
from .losses import LossWeights
from .trainer import ConfigError, TrainConfig
from .volume_io import (
    DIAGNOSES,
    PHASES,
    SHIFTED_APPEARANCE,
    LabelVolume,
    PhantomGeometryError,
    VolumeFormatError,
    default_split_counts,
    load_manifest,
    load_volume,
    phantom_cohort,
    save_labels,
    save_manifest,
    split_manifest,
)

log = logging.getLogger("cardiotask")

DATA_ROOT_ENV = "CARDIOTASK_DATA"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# run-directory plumbing


@contextlib.contextmanager
def run_lock(out: Path):
    """Exclusive ``<out>.lock`` for the duration of a command."""
    lock = out.with_name(out.name + ".lock")
    lock.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{out} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextlib.contextmanager
def staged_output(out: Path, force: bool):
    """Yield a temp directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    if out.exists() and not force:
        raise DataError(f"{out} exists; pass --force to replace it")
    with run_lock(out):
        tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
        try:
            yield tmp
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        if out.exists():
            old = out.with_name(f".{out.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            out.rename(old)
            tmp.rename(out)
            shutil.rmtree(old, ignore_errors=True)
        else:
            tmp.rename(out)


def _data_path(p: str | None, what: str) -> Path:
    if p is None:
        raise DataError(f"missing {what}")
    path = Path(p)
    if not path.is_absolute() and not path.exists() and os.environ.get(DATA_ROOT_ENV):
        path = Path(os.environ[DATA_ROOT_ENV]) / path
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _manifest_path(args) -> Path:
    p = args.manifest
    if p is None and os.environ.get(DATA_ROOT_ENV):
        p = str(Path(os.environ[DATA_ROOT_ENV]) / "manifest.json")
    path = _data_path(p, "manifest")
    return path / "manifest.json" if path.is_dir() else path


def load_config(args, epochs_override: bool = True) -> TrainConfig:
    """Config file (or defaults), then command-line overrides."""
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"<file>: {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<file>: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if epochs_override and getattr(args, "epochs", None) is not None:
        doc["epochs"] = args.epochs
    if getattr(args, "tta", False):
        doc["tta"] = True
    cfg = TrainConfig.from_dict(doc)
    _check_weights(cfg.loss_weights)
    return cfg


def _check_weights(w: LossWeights) -> None:
    for name in ("lambda_seg", "lambda_lov", "lambda_cls"):
        if getattr(w, name) < 0:
            raise ConfigError(f"loss_weights.{name}: must be non-negative")


def _write_json(path: Path, obj) -> None:
    metrics.dump_json(obj, path)


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    n = args.subjects
    if n < 1:
        raise ConfigError("subjects: must be >= 1")
    counts = tuple(int(c) for c in args.split.split(",")) if args.split else default_split_counts(n)
    if len(counts) != 3:
        raise ConfigError("split: expected three comma-separated counts")
    kw = dict(size=args.size, slices=args.slices, spacing=args.spacing, thickness=args.thickness)
    if args.domain_shift:
        kw.update(SHIFTED_APPEARANCE)
    try:
        records = phantom_cohort(n, seed=args.seed or 0, prefix=args.prefix, **kw)
        manifest = split_manifest(records, counts, seed=args.seed or 0)
    except (PhantomGeometryError, ValueError) as exc:
        raise ConfigError(f"phantom: {exc}") from exc
    with staged_output(Path(args.out), args.force) as tmp:
        save_manifest(manifest, tmp)
    print(f"wrote {len(manifest.records)} subjects to {args.out} (split {counts})")
    return EXIT_OK


def _records(manifest_path: Path, split: str | None):
    m = load_manifest(manifest_path)
    recs = m.records if split in (None, "all") else m.split(split)
    if not recs:
        raise DataError(f"split {split!r} is empty in {manifest_path}")
    return recs


def cmd_train(args) -> int:
    cfg = load_config(args)
    mpath = _manifest_path(args)
    train_recs = _records(mpath, args.train_split)
    val_recs = None
    if args.val_split != "none":
        try:
            val_recs = _records(mpath, args.val_split)
        except DataError:
            log.warning("validation split %r empty; early stopping disabled", args.val_split)
    state = None
    if args.resume:
        state = trainer.load_checkpoint(_data_path(args.resume, "checkpoint"))
        cfg = state.cfg
    size = cfg.model.image_size
    train = trainer.build_slices(train_recs, size)
    val = trainer.build_slices(val_recs, size) if val_recs else None
    out = Path(args.out)
    with staged_output(out, args.force or bool(args.resume)) as tmp:
        if args.resume and out.exists():
            # continue the existing run: logs (truncated by fit) and earlier checkpoints
            shutil.copytree(out, tmp, dirs_exist_ok=True)
        _write_json(tmp / "config.json", cfg.to_dict())
        _write_json(tmp / "run.json", {
            "manifest": str(mpath.resolve()),
            "seed": cfg.seed,
            "train_split": args.train_split,
            "val_split": args.val_split,
            "resumed_from": str(args.resume) if args.resume else None,
        })
        result = trainer.fit(cfg, train, val, run_dir=tmp, state=state, stop_after=args.stop_after)
        last = result.state.history[-1]
        summary = {
            "best_val_dice": result.best_dice,
            "best_epoch": result.best_epoch,
            "epochs_run": result.state.epoch,
            "stopped_early": result.stopped_early,
            "final_losses": {k: getattr(last, k) for k in ("total", "dice", "ce", "lovasz", "cls")},
            "final_lr": last.lr,
        }
        _write_json(tmp / "summary.json", summary)
    print(json.dumps(metrics._jsonable(summary), sort_keys=True))
    return EXIT_OK


def _load_model(path: str):
    state = trainer.load_checkpoint(_data_path(path, "checkpoint"))
    return state, state.model


def _tta_kw(args, state) -> dict:
    return dict(tta=args.tta, tta_classification=args.tta and state.cfg.tta_classification)


def _predict_subject(model, rec, tta_kw: dict):
    labels, probs = {}, []
    for phase in PHASES:
        img, _ = rec.phase(phase)
        p, d = trainer.predict_volume(model, img, **tta_kw)
        labels[phase] = metrics.probs_to_labels(p, axis=0).astype(np.uint8)
        probs.append(d)
    return labels, np.mean(probs, axis=0)


def cmd_eval(args) -> int:
    state, model = _load_model(args.checkpoint)
    recs = _records(_manifest_path(args), args.split)
    rows, per, pred_idx, ref_idx = [], [], [], []
    probs, truth = [], []
    for rec in recs:
        labels, dprob = _predict_subject(model, rec, _tta_kw(args, state))
        for phase in PHASES:
            img, gt = rec.phase(phase)
            sc = metrics.seg_scores(labels[phase], gt.labels, img.spacing, img.slice_thickness)
            per.append(sc.structures)
            for name, s in sc.structures.items():
                rows.append({"subject": rec.subject_id, "phase": phase, "structure": name, **s.__dict__})
        ed = rec.ed[0]
        pred_idx.append(clinical.compute_indices(
            labels["ED"], labels["ES"], ed.spacing, ed.slice_thickness, "predicted", rec.subject_id))
        ref_idx.append(clinical.compute_indices(
            rec.ed[1], rec.es[1], ed.spacing, ed.slice_thickness, "reference", rec.subject_id))
        if rec.diagnosis in DIAGNOSES:
            probs.append(dprob)
            truth.append(DIAGNOSES.index(rec.diagnosis))
    summary = metrics.aggregate(per)
    with staged_output(Path(args.out), args.force) as tmp:
        metrics.write_seg_csv(rows, summary, tmp / "segmentation.csv")
        _write_json(tmp / "segmentation.json", summary.to_dict())
        if probs:
            p = np.stack(probs)
            cls = metrics.classification_metrics(p.argmax(1), truth, p)
            _write_json(tmp / "classification.json", cls)
        clinical.write_indices_csv(pred_idx + ref_idx, tmp / "clinical_indices.csv")
        _write_json(tmp / "tolerance.json", clinical.tolerance_to_dict(clinical.mae_report(pred_idx, ref_idx)))
    print(json.dumps(metrics._jsonable(summary.mean), sort_keys=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    state, model = _load_model(args.checkpoint)
    vols = [load_volume(_data_path(v, "volume")) for v in args.volumes]
    with staged_output(Path(args.out), args.force) as tmp:
        out = {}
        for path, v in zip(args.volumes, vols):
            p, d = trainer.predict_volume(model, v, **_tta_kw(args, state))
            lab = metrics.probs_to_labels(p, axis=0).astype(np.uint8)
            name = Path(path).name.removesuffix(".vol")
            if v.subject_id:
                name = f"{v.subject_id}_{name}"
            if name in out:  # same file name and subject twice
                name = f"{name}_{len(out)}"
            save_labels(LabelVolume(lab, v.spacing_x, v.spacing_y, v.slice_thickness, v.phase, v.subject_id),
                        tmp / f"{name}_pred.vol")
            out[name] = {DIAGNOSES[k]: float(d[k]) for k in range(len(DIAGNOSES))}
        _write_json(tmp / "disease_probs.json", out)
    return EXIT_OK


def cmd_report(args) -> int:
    state, model = _load_model(args.checkpoint)
    if not args.ed or not args.es:
        raise DataError("both --ed and --es volumes are required")
    ed = load_volume(_data_path(args.ed, "ED volume"))
    es = load_volume(_data_path(args.es, "ES volume"))
    labels, probs = {}, []
    for phase, v in (("ED", ed), ("ES", es)):
        p, d = trainer.predict_volume(model, v, **_tta_kw(args, state))
        labels[phase] = metrics.probs_to_labels(p, axis=0)
        probs.append(d)
    subject = args.subject or ed.subject_id or "subject"
    idx = clinical.compute_indices(
        labels["ED"], labels["ES"], ed.spacing, ed.slice_thickness, "predicted", subject)
    with staged_output(Path(args.out), args.force) as tmp:
        clinical.write_report(idx, np.mean(probs, axis=0), subject, tmp)
    return EXIT_OK


def cmd_fewshot(args) -> int:
    base = trainer.load_checkpoint(_data_path(args.checkpoint, "checkpoint"))
    cfg = base.cfg
    if args.config or args.seed is not None:
        cfg = load_config(args, epochs_override=False)
    if args.epochs is not None:
        cfg = replace(cfg, few_shot_epochs=args.epochs)
    mpath = _manifest_path(args)
    pool = _records(mpath, args.train_split)
    held = _records(mpath, args.eval_split)
    sizes = [int(s) for s in args.sizes.split(",")]
    if any(n < 1 for n in sizes):
        raise ConfigError("sizes: every N must be >= 1")
    order = np.random.default_rng(cfg.seed).permutation(len(pool))
    table = []
    with staged_output(Path(args.out), args.force) as tmp:
        for n in sizes:
            subset = [pool[i] for i in order[: min(n, len(pool))]]  # nested subsets
            state, scores, row = trainer.few_shot_finetune(base, subset, cfg, held)
            trainer.save_checkpoint(state, tmp / f"fewshot_N{n}.ckpt")
            table.append(row)
            log.info("N=%d mean dice %.4f", n, row["Mean.dice"])
        header = list(table[0])
        lines = [",".join(header)] + [",".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k])
                                               for k in header) for r in table]
        (tmp / "fewshot.csv").write_text("\n".join(lines) + "\n")
        _write_json(tmp / "fewshot.json", table)
    for r in table:
        print(f"N={r['N']:>3}  mean dice {r['Mean.dice']:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (TrainConfig)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="replace an existing --out")
    common.add_argument("--tta", action="store_true", help="average identity/H-flip/V-flip predictions")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cardiotask", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", parents=[common], help="generate a labelled phantom cohort")
    ph.add_argument("--subjects", type=int, default=25)
    ph.add_argument("--slices", type=int, default=6)
    ph.add_argument("--size", type=int, default=64)
    ph.add_argument("--spacing", type=float, default=1.5)
    ph.add_argument("--thickness", type=float, default=10.0)
    ph.add_argument("--split", help="train,val,test counts (default 80:20:50 ratio)")
    ph.add_argument("--prefix", default="phantom")
    ph.add_argument("--domain-shift", action="store_true", help="altered contrast + speckle")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--manifest", help=f"manifest JSON or dataset dir (default ${DATA_ROOT_ENV})")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--train-split", default="train")
    tr.add_argument("--val-split", default="val")
    tr.add_argument("--stop-after", type=int, help="stop after this many completed epochs")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest")
    ev.add_argument("--split", default="test")
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", parents=[common], help="segment volumes")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("volumes", nargs="+")
    inf.set_defaults(func=cmd_infer)

    rp = sub.add_parser("report", parents=[common], help="clinical report from an ED/ES pair")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--ed")
    rp.add_argument("--es")
    rp.add_argument("--subject")
    rp.set_defaults(func=cmd_report)

    fs = sub.add_parser("fewshot", parents=[common], help="fine-tune on nested subsets of size N")
    fs.add_argument("--checkpoint", required=True)
    fs.add_argument("--manifest")
    fs.add_argument("--sizes", default="5,10,20,50")
    fs.add_argument("--epochs", type=int, help="fine-tuning epochs")
    fs.add_argument("--train-split", default="train")
    fs.add_argument("--eval-split", default="test")
    fs.set_defaults(func=cmd_fewshot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VolumeFormatError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
