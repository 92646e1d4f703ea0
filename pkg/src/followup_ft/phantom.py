"""Synthetic longitudinal cohorts.

A patient is an organ ellipsoid inside a body ellipse, a smooth random
texture field and a handful of ellipsoidal lesions. The texture field and
the lesion contrasts form the patient's signature and are shared by the
baseline and follow-up exams. Test patients draw their signature from a
distribution displaced by ``domain_shift``: the seq_b lesion contrast is
offset so that, at the default shift of 1, lesions that are dark in seq_b
for training patients appear bright. The seq_a appearance is unchanged, so
the shift can be absorbed by re-weighting the two pathways.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError
from .volume import MultiSequenceExam, PatientStudy, SequenceStack, Volume3D

MAX_ATTEMPTS = 100


@dataclass
class PhantomConfig:
    shape: tuple = (32, 96, 96)
    spacing: tuple = (2.0, 1.5, 1.5)
    organ_semi_axes: tuple = (13.0, 38.0, 40.0)  # voxels (z, y, x)
    lesions_per_patient: tuple = (2, 8)
    lesion_radius_mm: tuple = (3.0, 15.0)
    contrast_a: tuple = (1.6, 2.6)  # lesion offset in seq_a, texture-SD units
    contrast_b: tuple = (-2.0, -1.2)  # lesion offset in seq_b
    base_intensity: tuple = (80.0, 120.0)
    texture_smoothness: tuple = (1.0, 1.5)  # Gaussian sigma, voxels
    texture_amplitude: tuple = (0.8, 1.0)
    followup_scale: tuple = (0.5, 1.5)
    p_new_lesion: float = 0.2
    p_disappear: float = 0.1
    max_shift: int = 2
    noise_sd: float = 3.0
    domain_shift: float = 1.0
    n_channels_a: int = 2
    n_channels_b: int = 1
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    def validate(self) -> "PhantomConfig":
        for name in ("lesions_per_patient", "lesion_radius_mm", "contrast_a", "contrast_b", "base_intensity",
                     "texture_smoothness", "texture_amplitude", "followup_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: range must be ordered, got {(lo, hi)}")
        for name in ("p_new_lesion", "p_disappear"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name}: probability must be in [0, 1]")
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ConfigError(f"shape: need three dims >= 8, got {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError("spacing: must be positive")
        for ax, (semi, n) in enumerate(zip(self.organ_semi_axes, self.shape)):
            margin = 0 if ax == 0 else 2 * self.max_shift
            if 2 * semi * 1.1 + margin >= n:
                raise ConfigError(f"organ_semi_axes: axis {ax} does not fit in the volume")
        if self.lesions_per_patient[0] < 1:
            raise ConfigError("lesions_per_patient: need at least one lesion")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd: must be >= 0")
        if self.domain_shift < 0:
            raise ConfigError("domain_shift: must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"phantom: unknown field(s) {sorted(unknown)}")
        return cls(**d).validate()


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    """Voxels whose centres satisfy sum(((p - c) / r)^2) <= 1."""
    zz, yy, xx = _grid(shape)
    d = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return d <= 1.0


def _texture(rng, shape, sigma) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(sigma * 0.75, sigma, sigma), mode="wrap")
    return (field - field.mean()) / field.std()


def _signature(cfg: PhantomConfig, rng, shifted: bool) -> dict:
    s = cfg.domain_shift if shifted else 0.0
    u = rng.uniform
    lo, hi = cfg.contrast_b
    return {
        "base_intensity": u(*cfg.base_intensity),
        "smoothness": u(*cfg.texture_smoothness),
        "amplitude": u(*cfg.texture_amplitude),
        "contrast_a": u(*cfg.contrast_a),
        # The shift offsets the seq_b lesion contrast; at shift 1 dark lesions turn bright.
        "contrast_b": u(lo, hi) - s * (lo + hi),
    }


def _lesion_radii(cfg: PhantomConfig, rng, r_mm: float) -> np.ndarray:
    return r_mm * rng.uniform(0.8, 1.2, size=3) / np.asarray(cfg.spacing)


def _fits(cand, organ, occupied) -> bool:
    if not cand.any() or (cand & ~organ).any():
        return False
    return not (ndimage.binary_dilation(cand, np.ones((3, 3, 3), bool)) & occupied).any()


def _place_lesion(cfg, rng, organ, occupied, organ_center, organ_axes):
    for _ in range(MAX_ATTEMPTS):
        radii = _lesion_radii(cfg, rng, rng.uniform(*cfg.lesion_radius_mm))
        # Draw the centre uniformly inside the organ ellipsoid shrunk by the lesion size.
        inner = np.asarray(organ_axes) - radii
        if (inner <= 0).any():
            continue
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        center = np.asarray(organ_center) + inner * direction * rng.uniform() ** (1 / 3)
        cand = ellipsoid_mask(organ.shape, center, radii)
        if _fits(cand, organ, occupied):
            return {"center": center.tolist(), "radii": radii.tolist()}
    raise GenerationError(f"could not place a lesion after {MAX_ATTEMPTS} attempts")


def _rasterize(shape, lesions) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for les in lesions:
        out |= ellipsoid_mask(shape, les["center"], les["radii"])
    return out


def _render(cfg, sig, texture, organ, body, annotation, noise_rng, noise_sd=None):
    """Two sequences as nonlinear renderings of the same anatomy plus additive noise."""
    noise_sd = cfg.noise_sd if noise_sd is None else noise_sd
    lesion = ndimage.gaussian_filter(annotation.astype(np.float64), sigma=(0.35, 0.6, 0.6))
    tissue = sig["amplitude"] * texture
    base = sig["base_intensity"]
    organ_f = ndimage.gaussian_filter(organ.astype(np.float64), 0.7)
    body_f = ndimage.gaussian_filter(body.astype(np.float64), 0.7)

    signal_a = tissue + sig["contrast_a"] * lesion
    signal_b = -0.6 * tissue + sig["contrast_b"] * lesion
    chans_a = []
    for k in range(cfg.n_channels_a):
        gain = 1.0 + 0.35 * k
        # Later "phases" saturate: a compressive curve on the same signal.
        curve = signal_a if k == 0 else 2.5 * np.tanh(gain * signal_a / 2.5)
        body_level = 0.45 * base + 6.0 * (0.5 * texture)
        img = body_f * body_level + organ_f * (base - body_level + 10.0 * curve)
        chans_a.append(img)
    chans_b = []
    for k in range(cfg.n_channels_b):
        body_level = 0.8 * base
        img = body_f * body_level + organ_f * (0.6 * base * np.exp(0.18 * (1.0 + 0.2 * k) * signal_b) - body_level)
        chans_b.append(img)
    out = []
    for img in chans_a + chans_b:
        if noise_sd > 0:
            img = img + noise_rng.normal(0.0, noise_sd, size=img.shape)
        out.append(img.astype(np.float32))
    return out[: cfg.n_channels_a], out[cfg.n_channels_a:]


def _exam(cfg, chans_a, chans_b, organ, annotation, exam_id, timepoint, patient_id) -> MultiSequenceExam:
    sp = cfg.spacing
    return MultiSequenceExam(
        seq_a=SequenceStack([Volume3D(c, sp) for c in chans_a], "A"),
        seq_b=SequenceStack([Volume3D(c, sp) for c in chans_b], "B"),
        organ_mask=Volume3D(organ.astype(np.uint8), sp),
        annotation=Volume3D(annotation.astype(np.uint8), sp),
        exam_id=exam_id,
        timepoint=timepoint,
        patient_id=patient_id,
    )


def _shift_lesion(les, dz, dy, dx, scale=1.0):
    c = les["center"]
    return {"center": [c[0] + dz, c[1] + dy, c[2] + dx], "radii": [r * scale for r in les["radii"]]}


def generate_patient(cfg: PhantomConfig, patient_seed: int, shifted: bool = False,
                     patient_id: Optional[str] = None, noise_sd: Optional[float] = None) -> PatientStudy:
    """Baseline/follow-up pair sharing texture and lesion contrast; pure in its arguments.

    ``study.meta`` records the lesion ellipsoids of both exams, the follow-up
    shift and the signature, so tests can rebuild the ground truth analytically.
    """
    cfg.validate()
    pid = patient_id or f"P{patient_seed}"
    ss = np.random.SeedSequence([int(cfg.seed), int(patient_seed)])
    r_anat, r_les, r_evo, r_nb, r_nf = (np.random.default_rng(s) for s in ss.spawn(5))
    shape = tuple(cfg.shape)

    sig = _signature(cfg, r_anat, shifted)
    texture = _texture(r_anat, shape, sig["smoothness"])
    mid = (np.asarray(shape) - 1) / 2.0
    organ_axes = np.asarray(cfg.organ_semi_axes) * r_anat.uniform(0.9, 1.1, size=3)
    limit = (np.asarray(shape) - np.array([0, 2, 2]) * cfg.max_shift) / 2.0 - 1.0
    organ_axes = np.minimum(organ_axes, limit)
    organ_center = mid + r_anat.uniform(-1.0, 1.0, size=3)
    organ_center[0] = mid[0]
    body_axes = np.array([shape[0], (shape[1] - 2) / 2.0 - cfg.max_shift, (shape[2] - 2) / 2.0 - cfg.max_shift])

    organ_b = ellipsoid_mask(shape, organ_center, organ_axes)
    body_b = ellipsoid_mask(shape, mid, body_axes)
    n_les = int(r_les.integers(cfg.lesions_per_patient[0], cfg.lesions_per_patient[1] + 1))
    lesions_b = []
    occupied = np.zeros(shape, dtype=bool)
    for _ in range(n_les):
        les = _place_lesion(cfg, r_les, organ_b, occupied, organ_center, organ_axes)
        lesions_b.append(les)
        occupied |= ellipsoid_mask(shape, les["center"], les["radii"])
    annot_b = _rasterize(shape, lesions_b)

    # Follow-up: rigid in-plane shift of the whole anatomy, then lesion evolution.
    dy, dx = (int(v) for v in r_evo.integers(-cfg.max_shift, cfg.max_shift + 1, size=2))
    texture_f = np.roll(texture, (dy, dx), axis=(1, 2))
    organ_center_f = organ_center + np.array([0.0, dy, dx])
    organ_f = ellipsoid_mask(shape, organ_center_f, organ_axes)
    body_f = ellipsoid_mask(shape, mid + np.array([0.0, dy, dx]), body_axes)

    keep = r_evo.uniform(size=n_les) >= cfg.p_disappear
    order = np.argsort(r_evo.uniform(size=n_les))
    while keep.sum() < cfg.lesions_per_patient[0]:
        keep[order[~keep[order]][0]] = True
    lesions_f = []
    occupied = np.zeros(shape, dtype=bool)
    for les, k in zip(lesions_b, keep):
        scale = r_evo.uniform(*cfg.followup_scale)
        if not k:
            continue
        for _ in range(MAX_ATTEMPTS):
            cand_les = _shift_lesion(les, 0, dy, dx, scale)
            cand = ellipsoid_mask(shape, cand_les["center"], cand_les["radii"])
            if _fits(cand, organ_f, occupied):
                break
            scale *= 0.9
        else:
            continue  # swallowed by a grown neighbour: counts as disappeared
        lesions_f.append(cand_les)
        occupied |= cand
    n_new = int(r_evo.binomial(n_les, cfg.p_new_lesion))
    n_new = min(n_new, cfg.lesions_per_patient[1] - len(lesions_f))
    n_new = max(n_new, cfg.lesions_per_patient[0] - len(lesions_f))
    for _ in range(n_new):
        les = _place_lesion(cfg, r_evo, organ_f, occupied, organ_center_f, organ_axes)
        lesions_f.append(les)
        occupied |= ellipsoid_mask(shape, les["center"], les["radii"])
    annot_f = _rasterize(shape, lesions_f)

    a_b, b_b = _render(cfg, sig, texture, organ_b, body_b, annot_b, r_nb, noise_sd)
    a_f, b_f = _render(cfg, sig, texture_f, organ_f, body_f, annot_f, r_nf, noise_sd)
    baseline = _exam(cfg, a_b, b_b, organ_b, annot_b, f"{pid}_baseline", "baseline", pid)
    followup = _exam(cfg, a_f, b_f, organ_f, annot_f, f"{pid}_followup", "followup", pid)
    meta = {
        "seed": int(patient_seed),
        "shifted": bool(shifted),
        "shift": [0, dy, dx],
        "signature": {k: float(v) for k, v in sig.items()},
        "baseline_lesions": lesions_b,
        "followup_lesions": lesions_f,
    }
    return PatientStudy(pid, baseline, followup, meta)


def patient_seeds(seed: int, n: int) -> list:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)]


def generate_cohort(cfg: PhantomConfig, n_train: int, n_test: int, seed: Optional[int] = None):
    """Single-timepoint training exams from the base distribution, shifted test studies.

    Returns ``(train_exams, test_studies)``.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    seeds = patient_seeds(cfg.seed if seed is None else seed, n_train + n_test)
    train = [
        generate_patient(cfg, s, shifted=False, patient_id=f"train{i:03d}").baseline
        for i, s in enumerate(seeds[:n_train])
    ]
    test = [
        generate_patient(cfg, s, shifted=True, patient_id=f"test{i:03d}")
        for i, s in enumerate(seeds[n_train:])
    ]
    return train, test
