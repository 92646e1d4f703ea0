"""Multi-sequence exam data model, NIfTI I/O, normalization and patching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import nibabel as nib
import numpy as np
from scipy import ndimage

from .errors import (
    DataError,
    DegenerateInputError,
    EmptyRegionError,
    FormatError,
    ShapeError,
    UnsupportedError,
)

PATCH_SIZE = 128
N_GRID = 5
SUPPORTED_DTYPES = (np.dtype(np.uint8), np.dtype(np.int16), np.dtype(np.float32))
TIMEPOINTS = ("baseline", "followup")


@dataclass
class Volume3D:
    """Scalar 3D image indexed (z, y, x) with voxel spacing (dz, dy, dx) in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"volume must be 3D and non-empty, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if self.data.dtype.kind == "f" and not np.isfinite(self.data).all():
            raise DataError("volume contains non-finite intensities")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))


@dataclass
class SequenceStack:
    channels: list
    sequence_id: str = ""

    def __post_init__(self):
        if not self.channels:
            raise DataError("a sequence needs at least one channel")
        ref = self.channels[0]
        for ch in self.channels[1:]:
            if ch.shape != ref.shape or not np.allclose(ch.spacing, ref.spacing):
                raise ShapeError(f"channels of sequence {self.sequence_id!r} are not congruent")

    @property
    def shape(self) -> tuple:
        return self.channels[0].shape

    @property
    def spacing(self) -> tuple:
        return self.channels[0].spacing

    @cached_property
    def array(self) -> np.ndarray:
        """Channels stacked as float32 (C, Z, Y, X)."""
        return np.stack([np.asarray(c.data, dtype=np.float32) for c in self.channels])


@dataclass
class MultiSequenceExam:
    seq_a: SequenceStack
    seq_b: SequenceStack
    organ_mask: Volume3D
    annotation: Optional[Volume3D] = None
    exam_id: str = ""
    timepoint: str = "baseline"
    patient_id: str = ""

    def __post_init__(self):
        if self.timepoint not in TIMEPOINTS:
            raise DataError(f"timepoint must be one of {TIMEPOINTS}, got {self.timepoint!r}")
        shape = self.seq_a.shape
        parts = [("seq_b", self.seq_b.shape), ("organ_mask", self.organ_mask.shape)]
        if self.annotation is not None:
            parts.append(("annotation", self.annotation.shape))
        for name, s in parts:
            if s != shape:
                raise ShapeError(f"{name} shape {s} does not match seq_a shape {shape}")
        _check_binary(self.organ_mask.data, "organ_mask")
        if self.annotation is not None:
            _check_binary(self.annotation.data, "annotation")

    @property
    def shape(self) -> tuple:
        return self.seq_a.shape

    @property
    def spacing(self) -> tuple:
        return self.seq_a.spacing

    @cached_property
    def mask(self) -> np.ndarray:
        return np.asarray(self.organ_mask.data) > 0

    @cached_property
    def label(self) -> np.ndarray:
        if self.annotation is None:
            raise DataError(f"exam {self.exam_id!r} has no annotation")
        return (np.asarray(self.annotation.data) > 0).astype(np.uint8)

    def lesion_slices(self) -> list:
        return [int(z) for z in np.flatnonzero(self.label.reshape(self.shape[0], -1).any(axis=1))]

    def organ_slices(self) -> list:
        return [int(z) for z in np.flatnonzero(self.mask.reshape(self.shape[0], -1).any(axis=1))]


@dataclass
class PatientStudy:
    patient_id: str
    baseline: MultiSequenceExam
    followup: MultiSequenceExam
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("seq_a", "seq_b"):
            b, f = getattr(self.baseline, attr), getattr(self.followup, attr)
            if b.sequence_id != f.sequence_id or len(b.channels) != len(f.channels):
                raise DataError(f"baseline and follow-up disagree on {attr} layout")


@dataclass
class Patch:
    input_a: np.ndarray  # (Ca, P, P)
    input_b: np.ndarray  # (Cb, P, P)
    label: np.ndarray  # (P, P) uint8
    weight: Optional[np.ndarray] = None  # (P, P) float32
    origin: tuple = (0, 0, 0)


def _check_binary(arr: np.ndarray, name: str) -> None:
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise DataError(f"{name} must be binary, found values {vals[:5]}")


# --------------------------------------------------------------------- I/O


def load_volume(path) -> Volume3D:
    """Read a 3D NIfTI-1 file (``.nii`` or ``.nii.gz``).

    Scaling from ``scl_slope``/``scl_inter`` is applied when set; otherwise the
    stored dtype is kept so masks come back as ``uint8``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        img = nib.Nifti1Image.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise FormatError(f"{path}: not a readable NIfTI-1 file ({exc})") from exc
    hdr = img.header
    dtype = hdr.get_data_dtype()
    if dtype.newbyteorder("=") not in SUPPORTED_DTYPES:
        raise UnsupportedError(f"{path}: unsupported datatype {dtype}")
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise UnsupportedError(f"{path}: expected a 3D volume, got dims {img.shape}")
    try:
        arr = np.asanyarray(img.dataobj)
    except Exception as exc:
        raise FormatError(f"{path}: truncated or corrupt payload ({exc})") from exc
    arr = np.asarray(arr).reshape(shape)
    if arr.dtype.byteorder not in ("=", "|"):
        arr = arr.astype(arr.dtype.newbyteorder("="))
    dx, dy, dz = (float(z) for z in hdr.get_zooms()[:3])
    return Volume3D(np.ascontiguousarray(arr.transpose(2, 1, 0)), (dz, dy, dx))


def write_volume(v: Volume3D, path) -> None:
    """Write ``v`` as a single-file NIfTI-1; masks (bool/uint8) as uint8, else float32."""
    path = Path(path)
    if v.data.dtype in (np.bool_, np.uint8):
        arr = v.data.astype(np.uint8)
    else:
        arr = v.data.astype(np.float32)
    dz, dy, dx = v.spacing
    img = nib.Nifti1Image(np.ascontiguousarray(arr.transpose(2, 1, 0)), np.diag([dx, dy, dz, 1.0]))
    img.header.set_data_dtype(arr.dtype)
    img.header.set_zooms((dx, dy, dz))
    img.header.set_xyzt_units("mm")
    try:
        nib.save(img, str(path))
    except OSError:
        raise
    except Exception as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def _rel(path: Path, root: Path) -> str:
    try:
        return str(path.relative_to(root))
    except ValueError:
        return str(path)


def save_exam(exam: MultiSequenceExam, directory) -> Path:
    """Write all volumes of ``exam`` plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "exam_id": exam.exam_id,
        "patient_id": exam.patient_id,
        "timepoint": exam.timepoint,
    }
    for key, stack in (("seq_a", exam.seq_a), ("seq_b", exam.seq_b)):
        files = []
        for i, ch in enumerate(stack.channels):
            p = directory / f"{key}_{i}.nii.gz"
            write_volume(ch, p)
            files.append(p.name)
        manifest[key] = {"sequence_id": stack.sequence_id, "channels": files}
    write_volume(Volume3D(exam.mask.astype(np.uint8), exam.organ_mask.spacing), directory / "organ_mask.nii.gz")
    manifest["organ_mask"] = "organ_mask.nii.gz"
    if exam.annotation is not None:
        write_volume(Volume3D(exam.label, exam.annotation.spacing), directory / "annotation.nii.gz")
        manifest["annotation"] = "annotation.nii.gz"
    else:
        manifest["annotation"] = None
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2))
    return out


def load_exam(manifest_path) -> MultiSequenceExam:
    """Load an exam from its JSON manifest; relative paths resolve against the manifest."""
    manifest_path = Path(manifest_path)
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    root = manifest_path.parent

    def vol(rel):
        return load_volume(root / rel)

    try:
        stacks = {
            key: SequenceStack([vol(p) for p in m[key]["channels"]], m[key].get("sequence_id", key))
            for key in ("seq_a", "seq_b")
        }
        annotation = vol(m["annotation"]) if m.get("annotation") else None
        return MultiSequenceExam(
            seq_a=stacks["seq_a"],
            seq_b=stacks["seq_b"],
            organ_mask=vol(m["organ_mask"]),
            annotation=annotation,
            exam_id=m.get("exam_id", manifest_path.parent.name),
            timepoint=m.get("timepoint", "baseline"),
            patient_id=m.get("patient_id", ""),
        )
    except KeyError as exc:
        raise FormatError(f"{manifest_path}: missing field {exc}") from exc


# ----------------------------------------------------------- preprocessing


def normalize_intensity(v: Volume3D, mask: Volume3D) -> Volume3D:
    """Z-score ``v`` with mean and population SD taken over the mask voxels."""
    m = np.asarray(mask.data) > 0
    if m.shape != v.shape:
        raise ShapeError(f"mask shape {m.shape} != volume shape {v.shape}")
    if m.sum() < 2:
        raise DegenerateInputError("normalization mask needs at least two voxels")
    vals = np.asarray(v.data, dtype=np.float64)[m]
    mu = vals.mean()
    sd = vals.std()
    if not sd > 0:
        raise DegenerateInputError("zero intensity spread inside mask")
    out = (np.asarray(v.data, dtype=np.float64) - mu) / sd
    return Volume3D(out.astype(np.float32), v.spacing)


def normalize_exam(exam: MultiSequenceExam) -> MultiSequenceExam:
    """Return a copy of ``exam`` with every channel normalized over the organ mask."""

    def norm(stack):
        return SequenceStack([normalize_intensity(c, exam.organ_mask) for c in stack.channels], stack.sequence_id)

    return MultiSequenceExam(
        seq_a=norm(exam.seq_a),
        seq_b=norm(exam.seq_b),
        organ_mask=exam.organ_mask,
        annotation=exam.annotation,
        exam_id=exam.exam_id,
        timepoint=exam.timepoint,
        patient_id=exam.patient_id,
    )


# ----------------------------------------------------------------- patches


def _organ_bbox(exam: MultiSequenceExam, slice_idx: int) -> tuple:
    sl = exam.mask[slice_idx]
    if not sl.any():
        raise EmptyRegionError(f"exam {exam.exam_id!r}: organ mask empty on slice {slice_idx}")
    ys = np.flatnonzero(sl.any(axis=1))
    xs = np.flatnonzero(sl.any(axis=0))
    return int(ys[0]), int(ys[-1]), int(xs[0]), int(xs[-1])


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad the trailing two axes up to ``size`` (only when smaller)."""
    ph = max(0, size - arr.shape[-2])
    pw = max(0, size - arr.shape[-1])
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad)


def _clamp_anchor(a: float, extent: int, size: int) -> int:
    return int(min(max(int(np.floor(a + 0.5)), 0), max(extent - size, 0)))


def _slice_arrays(exam: MultiSequenceExam, slice_idx: int, weights: Optional[np.ndarray], size: int):
    a = _pad_to(exam.seq_a.array[:, slice_idx], size)
    b = _pad_to(exam.seq_b.array[:, slice_idx], size)
    lab = _pad_to(exam.label[slice_idx], size)
    w = None if weights is None else _pad_to(np.asarray(weights[slice_idx], dtype=np.float32), size)
    return a, b, lab, w


def _cut(arrays, slice_idx: int, y: int, x: int, size: int) -> Patch:
    a, b, lab, w = arrays
    win = (slice(y, y + size), slice(x, x + size))
    return Patch(
        input_a=a[(slice(None),) + win].copy(),
        input_b=b[(slice(None),) + win].copy(),
        label=lab[win].copy(),
        weight=None if w is None else w[win].copy(),
        origin=(slice_idx, y, x),
    )


def extract_training_patches(
    exam: MultiSequenceExam,
    slice_idx: int,
    rng=None,
    patch_size: int = PATCH_SIZE,
    weights: Optional[np.ndarray] = None,
) -> list:
    """Cut 25 tiles on a 5x5 grid spanning the organ bounding box of one slice.

    Grid centres are spaced evenly between the first and last position at which
    a tile still fits inside the box; tiles are clamped to the image. ``rng`` is
    accepted for interface symmetry: placement is deterministic and randomness
    enters later through rotation.
    """
    y0, y1, x0, x1 = _organ_bbox(exam, slice_idx)
    arrays = _slice_arrays(exam, slice_idx, weights, patch_size)
    H, W = arrays[2].shape
    half = patch_size / 2

    def centres(lo, hi):
        first, last = lo + half, hi + 1 - half
        if last < first:
            first = last = (lo + hi + 1) / 2
        return np.linspace(first, last, N_GRID)

    out = []
    for cy in centres(y0, y1):
        for cx in centres(x0, x1):
            y = _clamp_anchor(cy - half, H, patch_size)
            x = _clamp_anchor(cx - half, W, patch_size)
            out.append(_cut(arrays, slice_idx, y, x, patch_size))
    return out


def extract_finetune_patches(
    exam: MultiSequenceExam,
    slice_idx: int,
    patch_size: int = PATCH_SIZE,
    weights: Optional[np.ndarray] = None,
) -> list:
    """Four tiles anchored at the organ bounding-box corners plus one centred tile."""
    y0, y1, x0, x1 = _organ_bbox(exam, slice_idx)
    arrays = _slice_arrays(exam, slice_idx, weights, patch_size)
    H, W = arrays[2].shape
    ys = (y0, y1 + 1 - patch_size)
    xs = (x0, x1 + 1 - patch_size)
    anchors = [(y, x) for y in ys for x in xs]
    anchors.append(((y0 + y1 + 1) / 2 - patch_size / 2, (x0 + x1 + 1) / 2 - patch_size / 2))
    return [
        _cut(arrays, slice_idx, _clamp_anchor(y, H, patch_size), _clamp_anchor(x, W, patch_size), patch_size)
        for y, x in anchors
    ]


def rotate_patch(p: Patch, angle_deg: float) -> Patch:
    """Rotate about the tile centre; bilinear for inputs, nearest for label and weight."""
    if angle_deg == 0:
        return Patch(
            p.input_a.copy(), p.input_b.copy(), p.label.copy(),
            None if p.weight is None else p.weight.copy(), p.origin,
        )

    def rot(arr, order):
        axes = (arr.ndim - 2, arr.ndim - 1)
        return ndimage.rotate(arr, angle_deg, axes=axes, reshape=False, order=order, mode="constant", cval=0.0)

    return Patch(
        input_a=rot(p.input_a, 1).astype(p.input_a.dtype),
        input_b=rot(p.input_b, 1).astype(p.input_b.dtype),
        label=rot(p.label, 0).astype(p.label.dtype),
        weight=None if p.weight is None else rot(p.weight, 0).astype(p.weight.dtype),
        origin=p.origin,
    )


def stack_patches(patches: Sequence[Patch]):
    """Batch patches into (N,Ca,P,P), (N,Cb,P,P), (N,P,P) labels and optional weights."""
    a = np.stack([p.input_a for p in patches]).astype(np.float32)
    b = np.stack([p.input_b for p in patches]).astype(np.float32)
    lab = np.stack([p.label for p in patches]).astype(np.int64)
    if all(p.weight is not None for p in patches):
        w = np.stack([p.weight for p in patches]).astype(np.float32)
    else:
        w = None
    return a, b, lab, w
