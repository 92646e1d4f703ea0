"""Probability volume -> binary mask -> lesion objects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError

CUBE = np.ones((3, 3, 3), dtype=bool)
PLUS_2D = np.array([[[0, 1, 0], [1, 1, 1], [0, 1, 0]]], dtype=bool)  # (1, 3, 3): per-slice plus
TASKS = ("detection", "segmentation")


@dataclass
class LesionObject:
    id: int
    voxels: np.ndarray  # (K, 3) int indices, sorted by linear index
    volume_cm3: float

    @property
    def voxel_count(self) -> int:
        return int(len(self.voxels))

    @property
    def bbox(self) -> tuple:
        lo = self.voxels.min(axis=0)
        hi = self.voxels.max(axis=0)
        return tuple(int(v) for v in lo) + tuple(int(v) for v in hi)

    def to_dict(self) -> dict:
        return {"id": self.id, "voxel_count": self.voxel_count, "volume_cm3": self.volume_cm3, "bbox": list(self.bbox)}


@dataclass
class LesionObjects:
    objects: list
    labels: np.ndarray  # 0 background, k for object id k
    spacing: tuple = (1.0, 1.0, 1.0)
    connectivity: int = field(default=26)

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def volumes(self) -> np.ndarray:
        return np.array([o.volume_cm3 for o in self.objects], dtype=float)


def _congruent(a, b, what="arrays"):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def mask_probabilities(probs, organ_mask) -> np.ndarray:
    _congruent(probs, organ_mask, "probabilities and organ mask")
    return np.asarray(probs) * (np.asarray(organ_mask) > 0)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) > threshold).astype(np.uint8)


def _padded(mask, op, structure):
    # Outside the volume counts as background: operate on a one-voxel zero
    # border so that structure elements see that background, then crop.
    m = np.pad(np.asarray(mask) > 0, 1)
    out = op(m, structure)
    return out[(slice(1, -1),) * m.ndim]


def morph_close_3d(mask) -> np.ndarray:
    """Closing with the full 3x3x3 cube."""

    def op(m, s):
        return ndimage.binary_erosion(ndimage.binary_dilation(m, s), s, border_value=0)

    return _padded(mask, op, CUBE).astype(np.uint8)


def morph_open_plus_2d(mask) -> np.ndarray:
    """Slice-wise opening with the 3x3 plus element."""

    def op(m, s):
        return ndimage.binary_dilation(ndimage.binary_erosion(m, s, border_value=0), s)

    return _padded(mask, op, PLUS_2D).astype(np.uint8)


def connected_components(mask, spacing=(1.0, 1.0, 1.0)) -> LesionObjects:
    """26-connected components; ids ascend with each object's first voxel in C order."""
    m = np.asarray(mask) > 0
    raw, n = ndimage.label(m, structure=CUBE)
    labels = np.zeros(m.shape, dtype=np.int32)
    objects = []
    if n:
        flat = raw.ravel()
        idx = np.flatnonzero(flat)
        lab = flat[idx]
        order = np.argsort(lab, kind="stable")
        lab_sorted = lab[order]
        idx_sorted = idx[order]
        starts = np.flatnonzero(np.r_[True, lab_sorted[1:] != lab_sorted[:-1]])
        groups = np.split(idx_sorted, starts[1:])
        groups.sort(key=lambda g: g[0])
        vox_cm3 = float(np.prod(spacing)) / 1000.0
        for new_id, g in enumerate(groups, start=1):
            labels.flat[g] = new_id
            coords = np.stack(np.unravel_index(g, m.shape), axis=1)
            objects.append(LesionObject(new_id, coords, len(g) * vox_cm3))
    return LesionObjects(objects, labels, tuple(float(s) for s in spacing))


def postprocess_pipeline(probs, organ_mask, task: str = "detection", spacing=(1.0, 1.0, 1.0)):
    """Mask, threshold at 0.5, close; detection additionally opens. Returns (mask, objects)."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    m = morph_close_3d(binarize(mask_probabilities(probs, organ_mask)))
    if task == "detection":
        m = morph_open_plus_2d(m)
    # Closing may bridge into voxels outside the organ; keep the result inside it.
    m = (m & (np.asarray(organ_mask) > 0)).astype(np.uint8)
    return m, connected_components(m, spacing)
