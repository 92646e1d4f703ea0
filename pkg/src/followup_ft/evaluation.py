"""Detection and segmentation metrics, lesion-size strata and MC-dropout uncertainty."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ShapeError
from .inference import predict_volume
from .network import NetworkConfig, NetworkParams, head_forward, pathway_features
from .postprocess import LesionObjects, connected_components, postprocess_pipeline
from .volume import MultiSequenceExam

CROSS_3D = ndimage.generate_binary_structure(3, 1)


@dataclass
class DetectionReport:
    tpr: Optional[float]
    fpc: int
    f1: float
    precision: Optional[float]
    n_true: int
    n_pred: int
    detected: list = field(default_factory=list)  # per true object, in id order

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmentationReport:
    dice: float
    avd_percent: Optional[float]
    hd95_mm: Optional[float]


@dataclass
class UncertaintyReport:
    sd: np.ndarray
    summary: Optional[float]
    n_repeats: int
    task: str


def _overlap_pairs(pred: LesionObjects, true: LesionObjects) -> np.ndarray:
    if pred.shape != true.shape:
        raise ShapeError(f"object maps differ in shape: {pred.shape} vs {true.shape}")
    both = (pred.labels > 0) & (true.labels > 0)
    pairs = np.stack([pred.labels[both], true.labels[both]], axis=1)
    return np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)


def detection_metrics(pred_objects: LesionObjects, true_objects: LesionObjects) -> DetectionReport:
    """Object-level TPR, false-positive count and F1 (any overlap counts as a hit)."""
    pairs = _overlap_pairs(pred_objects, true_objects)
    n_true, n_pred = len(true_objects), len(pred_objects)
    hit_true = set(pairs[:, 1].tolist())
    hit_pred = set(pairs[:, 0].tolist())
    detected = [o.id in hit_true for o in true_objects.objects]
    tpr = sum(detected) / n_true if n_true else None
    precision = len(hit_pred) / n_pred if n_pred else None
    r = tpr or 0.0
    p = precision or 0.0
    f1 = 2 * r * p / (r + p) if r + p > 0 else 0.0
    return DetectionReport(tpr, n_pred - len(hit_pred), f1, precision, n_true, n_pred, detected)


def dice(pred, annot) -> float:
    x = np.asarray(pred) > 0
    y = np.asarray(annot) > 0
    if x.shape != y.shape:
        raise ShapeError(f"masks differ in shape: {x.shape} vs {y.shape}")
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / denom


def avd(pred, annot) -> Optional[float]:
    """Absolute volume difference in percent of the reference volume (voxel counts)."""
    vx = int((np.asarray(pred) > 0).sum())
    vy = int((np.asarray(annot) > 0).sum())
    if vy == 0:
        return None
    return abs(vx - vy) / vy * 100.0


def boundary(mask) -> np.ndarray:
    m = np.asarray(mask) > 0
    return m & ~ndimage.binary_erosion(m, CROSS_3D, border_value=0)


def nearest_rank(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    k = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[k - 1])


def _directed(src_b, dst_b, spacing) -> np.ndarray:
    dist = ndimage.distance_transform_edt(~dst_b, sampling=spacing)
    return dist[src_b]


def hd95(pred, annot, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """Symmetric 95th-percentile surface distance in mm (None if either mask is empty)."""
    x = np.asarray(pred) > 0
    y = np.asarray(annot) > 0
    if x.shape != y.shape:
        raise ShapeError(f"masks differ in shape: {x.shape} vs {y.shape}")
    if not x.any() or not y.any():
        return None
    bx, by = boundary(x), boundary(y)
    return max(nearest_rank(_directed(bx, by, spacing), 95), nearest_rank(_directed(by, bx, spacing), 95))


def segmentation_metrics(pred, annot, spacing=(1.0, 1.0, 1.0)) -> SegmentationReport:
    return SegmentationReport(dice(pred, annot), avd(pred, annot), hd95(pred, annot, spacing))


def lesion_size_split(pred_objects: LesionObjects, true_objects: LesionObjects, threshold_cm3: float = 1.0) -> dict:
    """TPR for true lesions below / at-or-above ``threshold_cm3``; None for empty strata."""
    report = detection_metrics(pred_objects, true_objects)
    vols = true_objects.volumes()
    out = {}
    for name, sel in (("small", vols < threshold_cm3), ("large", vols >= threshold_cm3)):
        flags = [d for d, s in zip(report.detected, sel) if s]
        out[name] = {
            "n_true": len(flags),
            "n_detected": int(sum(flags)),
            "tpr": sum(flags) / len(flags) if flags else None,
        }
    return out


def population_sd(samples) -> np.ndarray:
    """SD over the first axis with divisor N (the repeats are the whole sample)."""
    return np.asarray(samples, dtype=np.float64).std(axis=0, ddof=0)


@torch.no_grad()
def mc_dropout_uncertainty(params: NetworkParams, cfg: NetworkConfig, exam: MultiSequenceExam,
                           n_repeats: int = 25, task: str = "detection", seed: int = 0,
                           sub_seeds: Optional[Sequence[int]] = None,
                           probs: Optional[np.ndarray] = None) -> UncertaintyReport:
    """Per-voxel SD of the lesion probability over dropout-on repetitions.

    The head is 1x1, so pathway features are computed once per slice and only
    the head is re-sampled, restricted to organ voxels. The summary is the mean
    SD over detected-object voxels (detection) or the max SD over the organ
    (segmentation). ``probs`` may pass the deterministic prediction when it is
    already available.
    """
    if n_repeats < 2:
        raise ValueError("n_repeats must be >= 2")
    if sub_seeds is None:
        sub_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n_repeats)]
    if len(sub_seeds) != n_repeats:
        raise ValueError("need one sub-seed per repeat")
    gens = []
    for s in sub_seeds:
        g = torch.Generator()
        g.manual_seed(int(s))
        gens.append(g)

    organ = exam.mask
    sd = np.zeros(exam.shape, dtype=np.float32)
    a, b = exam.seq_a.array, exam.seq_b.array
    for z in range(exam.shape[0]):
        m = organ[z]
        if not m.any():
            continue
        feats = pathway_features(params, cfg, a[:, z][None], b[:, z][None])
        sel = feats[0][:, torch.from_numpy(m)]  # (C, M)
        sel = sel.unsqueeze(0).unsqueeze(-1)  # (1, C, M, 1)
        samples = torch.stack([head_forward(params, cfg, sel, dropout_on=True, rng=g)[0, 1, :, 0] for g in gens])
        sd[z][m] = population_sd(samples.double().numpy())

    if probs is None:
        probs = predict_volume(params, cfg, exam)
    if task == "detection":
        pred, _ = postprocess_pipeline(probs, organ, "detection", exam.spacing)
        summary = float(sd[pred > 0].mean()) if pred.any() else None
    else:
        summary = float(sd[organ].max()) if organ.any() else None
    return UncertaintyReport(sd, summary, n_repeats, task)


def evaluate_case(pred_mask, annot, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Flat metric row used by reports and cohort CSVs."""
    det = detection_metrics(connected_components(pred_mask, spacing), connected_components(annot, spacing))
    seg = segmentation_metrics(pred_mask, annot, spacing)
    return {
        "tpr": det.tpr,
        "fpc": det.fpc,
        "f1": det.f1,
        "dice": seg.dice,
        "avd": seg.avd_percent,
        "hd95": seg.hd95_mm,
    }
