"""Slice selection and outcome-based weight maps for patient-specific fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import DataError, ShapeError
from .postprocess import connected_components

POOLS = ("all_organ_slices", "lesion_slices")

# Pixel outcome codes.
TN, TP, FN_DETECTED, FN_MISSED, FP_ATTACHED, FP_OBJECT = range(6)
OUTCOME_NAMES = ("TN", "TP", "FN_detected", "FN_missed", "FP_attached", "FP_object")

DETECTION_WEIGHTS = {FN_MISSED: 5.0, TP: 2.0, FN_DETECTED: 0.0, FP_ATTACHED: 0.0, TN: 1.0, FP_OBJECT: 1.0}
SEGMENTATION_WEIGHTS = {FP_ATTACHED: 5.0, FP_OBJECT: 5.0, FN_DETECTED: 5.0, FN_MISSED: 5.0, TP: 2.0, TN: 1.0}


@dataclass(frozen=True)
class SliceScore:
    slice_idx: int
    mean_prob: float

    @property
    def distance(self) -> float:
        return abs(self.mean_prob - 0.5)


class SliceSelection(NamedTuple):
    slices: list
    truncated: bool  # requested more slices than the pool holds


def score_slices(probs, organ_mask, pool: str = "all_organ_slices", annotation=None) -> list:
    """Mean lesion probability over organ voxels, per eligible slice, best first.

    Ranking is by distance of the mean to 0.5; ties go to the lower slice index.
    """
    if pool not in POOLS:
        raise ValueError(f"pool must be one of {POOLS}, got {pool!r}")
    probs = np.asarray(probs, dtype=np.float64)
    organ = np.asarray(organ_mask) > 0
    if probs.shape != organ.shape:
        raise ShapeError(f"probabilities {probs.shape} vs organ mask {organ.shape}")
    if pool == "lesion_slices":
        if annotation is None:
            raise DataError("the lesion_slices pool needs an annotation")
        lesion = np.asarray(annotation).reshape(len(probs), -1).any(axis=1)
    scores = []
    for z in range(probs.shape[0]):
        if not organ[z].any() or (pool == "lesion_slices" and not lesion[z]):
            continue
        scores.append(SliceScore(z, float(probs[z][organ[z]].mean())))
    if not scores:
        raise DataError(f"no eligible slices in pool {pool!r}")
    return sorted(scores, key=lambda s: (s.distance, s.slice_idx))


def select_slices(scores, n) -> SliceSelection:
    """Top-``n`` slices by ranking, or every slice in index order for ``n='all'``."""
    if not scores:
        raise DataError("no slice scores to select from")
    ranked = sorted(scores, key=lambda s: (s.distance, s.slice_idx))
    if n == "all":
        return SliceSelection(sorted(s.slice_idx for s in ranked), False)
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1 or 'all'")
    return SliceSelection([s.slice_idx for s in ranked[:n]], n > len(ranked))


def classify_pixels(pred_binary, annotation) -> np.ndarray:
    """Per-voxel outcome codes from object-level overlap of prediction and annotation."""
    pred = np.asarray(pred_binary) > 0
    annot = np.asarray(annotation) > 0
    if pred.shape != annot.shape:
        raise ShapeError(f"prediction {pred.shape} vs annotation {annot.shape}")
    p_lab = connected_components(pred).labels
    t_lab = connected_components(annot).labels
    both = pred & annot
    detected_true = np.unique(t_lab[both])
    attached_pred = np.unique(p_lab[both])

    out = np.full(pred.shape, TN, dtype=np.uint8)
    out[both] = TP
    fn = annot & ~pred
    out[fn] = np.where(np.isin(t_lab[fn], detected_true), FN_DETECTED, FN_MISSED)
    fp = pred & ~annot
    out[fp] = np.where(np.isin(p_lab[fp], attached_pred), FP_ATTACHED, FP_OBJECT)
    return out


def _apply(outcomes, table) -> np.ndarray:
    lut = np.zeros(len(OUTCOME_NAMES), dtype=np.float32)
    for code, w in table.items():
        lut[code] = w
    return lut[np.asarray(outcomes)]


def detection_weight_map(outcomes) -> np.ndarray:
    return _apply(outcomes, DETECTION_WEIGHTS)


def segmentation_weight_map(outcomes) -> np.ndarray:
    return _apply(outcomes, SEGMENTATION_WEIGHTS)


def weight_map(outcomes, scheme: Optional[str]) -> Optional[np.ndarray]:
    if scheme in (None, "none"):
        return None
    if scheme == "detection":
        return detection_weight_map(outcomes)
    if scheme == "segmentation":
        return segmentation_weight_map(outcomes)
    raise ValueError(f"unknown weighting scheme {scheme!r}")
