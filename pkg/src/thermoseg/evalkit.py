"""Leave-one-subject-out evaluation: fold planning, Tanimoto/IoU scoring,
aggregation and CSV reports.

The network's raw sigmoid output is scored directly against the ground-truth
mask with the continuous Tanimoto coefficient (no thresholding), and with
IoU at 0.5 for comparison.  Per-subject means average a subject's frames;
the overall mean per model averages subjects, not frames.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .irprep import PreprocessConfig, preprocess_pipeline
from .nets import LayerGraph, NetConfig, build_network, save_checkpoint
from .phantom import Subject
from .rng import derive_seed
from .tensor import ShapeMismatchError
from .trainer import TrainConfig, train


def tanimoto(a: np.ndarray, b: np.ndarray) -> float:
    """Continuous Tanimoto coefficient; equals Jaccard on binary inputs.

    Two all-zero images count as identical (1.0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"tanimoto: shapes {a.shape} and {b.shape} differ")
    inner = float(np.sum(a * b))
    denom = float(np.sum(a * a) + np.sum(b * b)) - inner
    if denom == 0.0:
        return 1.0
    return inner / denom


def iou(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union after binarizing at the threshold."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"iou: shapes {a.shape} and {b.shape} differ")
    abin = a >= threshold
    bbin = b >= threshold
    union = int(np.sum(abin | bbin))
    if union == 0:
        return 1.0
    return int(np.sum(abin & bbin)) / union


# ---------------------------------------------------------------------------
# fold planning


@dataclass
class Fold:
    test_subject_id: str
    train_subject_ids: List[str]


@dataclass
class FoldPlan:
    folds: List[Fold]


def loocv_plan(subject_ids: Sequence[str]) -> FoldPlan:
    """One fold per subject, deterministic sorted ordering."""
    ids = sorted(set(subject_ids))
    if len(ids) != len(list(subject_ids)):
        raise ValueError("duplicate subject ids")
    if len(ids) < 2:
        raise ValueError(f"leave-one-out needs at least 2 subjects, got {len(ids)}")
    return FoldPlan([Fold(test, [s for s in ids if s != test]) for test in ids])


# ---------------------------------------------------------------------------
# scoring


@dataclass
class ScoreRow:
    subject_id: str
    kind: str
    model: str
    frame: int
    tanimoto: float
    iou: float


@dataclass
class EvalReport:
    rows: List[ScoreRow]
    subject_means: Dict[str, Dict[str, float]] = field(default_factory=dict)
    # model -> {"tanimoto": ..., "iou": ...}, averaged over subjects
    overall: Dict[str, Dict[str, float]] = field(default_factory=dict)


def evaluate(graph: LayerGraph, frames: Sequence[np.ndarray], mask: np.ndarray,
             subject_id: str, kind: str, model: str) -> List[ScoreRow]:
    """Score raw sigmoid outputs of each frame against the ground-truth mask."""
    target = (np.asarray(mask) >= 128).astype(np.float64)
    rows = []
    for index, frame in enumerate(frames):
        image = np.asarray(frame)
        if image.dtype == np.uint8:
            image = image / 255.0
        pred = graph.predict(image[None, None, :, :])[0, 0]
        rows.append(ScoreRow(subject_id, kind, model, index,
                             tanimoto(pred, target), iou(pred, target)))
    return rows


def aggregate(rows: Sequence[ScoreRow]) -> EvalReport:
    report = EvalReport(rows=list(rows))
    by_model_subject: Dict[str, Dict[str, List[ScoreRow]]] = {}
    for row in rows:
        by_model_subject.setdefault(row.model, {}).setdefault(row.subject_id, []).append(row)
    for model, subjects in sorted(by_model_subject.items()):
        sub_t, sub_i = [], []
        for subject_id, srows in sorted(subjects.items()):
            mean_t = float(np.mean([r.tanimoto for r in srows]))
            mean_i = float(np.mean([r.iou for r in srows]))
            report.subject_means.setdefault(model, {})[subject_id] = mean_t
            sub_t.append(mean_t)
            sub_i.append(mean_i)
        report.overall[model] = {"tanimoto": float(np.mean(sub_t)),
                                 "iou": float(np.mean(sub_i))}
    return report


# ---------------------------------------------------------------------------
# CSV formats (fixed 6-decimal formatting for diff-stable outputs)


def write_frame_csv(rows: Sequence[ScoreRow], path):
    ordered = sorted(rows, key=lambda r: (r.model, r.subject_id, r.frame))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "kind", "model", "frame", "tanimoto", "iou"])
        for r in ordered:
            writer.writerow([r.subject_id, r.kind, r.model, r.frame,
                             f"{r.tanimoto:.6f}", f"{r.iou:.6f}"])


def read_frame_csv(path) -> List[ScoreRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ScoreRow(rec["subject_id"], rec["kind"], rec["model"],
                                 int(rec["frame"]), float(rec["tanimoto"]),
                                 float(rec["iou"])))
    return rows


def write_summary_csv(report: EvalReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "mean_tanimoto", "mean_iou"])
        for model, means in sorted(report.overall.items()):
            writer.writerow([model, f"{means['tanimoto']:.6f}", f"{means['iou']:.6f}"])


def write_subject_csv(report: EvalReport, path):
    """Per-subject bar data: one row per (model, subject)."""
    by_ms: Dict[str, Dict[str, List[ScoreRow]]] = {}
    for row in report.rows:
        by_ms.setdefault(row.model, {}).setdefault(row.subject_id, []).append(row)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "subject_id", "kind", "mean_tanimoto", "mean_iou"])
        for model, subjects in sorted(by_ms.items()):
            for subject_id, srows in sorted(subjects.items()):
                writer.writerow([model, subject_id, srows[0].kind,
                                 f"{np.mean([r.tanimoto for r in srows]):.6f}",
                                 f"{np.mean([r.iou for r in srows]):.6f}"])


# ---------------------------------------------------------------------------
# LOOCV harness


def _run_fold(args) -> List[ScoreRow]:
    (fold, arch, master_seed, net_cfg, train_cfg, prepped, masks, kinds,
     checkpoint_dir) = args
    fold_seed = derive_seed(master_seed, "fold", arch, fold.test_subject_id)
    cfg = NetConfig(**{**net_cfg.__dict__, "arch": arch, "seed": fold_seed})
    graph = build_network(cfg)
    pairs = [(frame, masks[sid])
             for sid in fold.train_subject_ids
             for frame in prepped[sid]]
    tcfg = TrainConfig(**{**train_cfg.__dict__, "seed": fold_seed})
    train(graph, pairs, tcfg)
    test_id = fold.test_subject_id
    rows = evaluate(graph, prepped[test_id], masks[test_id],
                    test_id, kinds[test_id], arch)
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir)
        path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(graph, path / f"{arch}_{test_id}.tseg")
    return rows


def run_loocv(subjects: List[Subject], arch: str, master_seed: int,
              net_cfg: NetConfig, train_cfg: TrainConfig,
              prep_cfg: PreprocessConfig | None = None,
              checkpoint_dir=None, jobs: int = 1) -> List[ScoreRow]:
    """Train one model per fold and score its held-out subject's frames.

    Folds are independent (per-fold derived seeds), so ``jobs > 1`` runs them
    in worker processes with identical results.
    """
    prep_cfg = prep_cfg or PreprocessConfig()
    prepped: Dict[str, List[np.ndarray]] = {}
    for sub in subjects:
        prepped[sub.subject_id] = [
            preprocess_pipeline(f.pixels, prep_cfg).frame.pixels for f in sub.frames]
    masks = {sub.subject_id: sub.mask.pixels for sub in subjects}
    kinds = {sub.subject_id: sub.kind for sub in subjects}
    plan = loocv_plan([sub.subject_id for sub in subjects])
    tasks = [(fold, arch, master_seed, net_cfg, train_cfg, prepped, masks, kinds,
              checkpoint_dir) for fold in plan.folds]
    if jobs > 1:
        import multiprocessing
        with multiprocessing.Pool(jobs) as pool:
            results = pool.map(_run_fold, tasks)
    else:
        results = [_run_fold(task) for task in tasks]
    return [row for rows in results for row in rows]
