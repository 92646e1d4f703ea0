"""Weighted cross-entropy, Adam, base training and patient-specific fine-tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError, ShapeError
from .network import HEAD_LAYERS, NetworkConfig, NetworkParams, build_network, forward, set_trainable
from .volume import (
    PATCH_SIZE,
    MultiSequenceExam,
    extract_finetune_patches,
    extract_training_patches,
    rotate_patch,
    stack_patches,
)

log = logging.getLogger(__name__)

PROB_CLIP = 1e-7
LEARNABLE = ("weight", "bias", "gamma", "beta")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    iterations: int = 10000
    finetune_iterations: int = 100
    class_weights: tuple = (1.0, 5.0)
    augment_range_deg: float = 45.0
    patch_size: int = PATCH_SIZE
    seed: int = 0

    def __post_init__(self):
        self.class_weights = tuple(float(c) for c in self.class_weights)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate: must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.iterations < 0 or self.finetune_iterations < 0:
            raise ConfigError("iterations: must be >= 0")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ConfigError("class_weights: need two positive values")
        if not 0 <= self.augment_range_deg <= 45:
            raise ConfigError("augment_range_deg: must lie in [0, 45]")
        if self.patch_size < 1:
            raise ConfigError("patch_size: must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"training: unknown field(s) {sorted(unknown)}")
        return cls(**d).validate()


def weighted_cross_entropy(probs, label, pixel_weights):
    """Mean over pixels of ``-w * log p(true class)`` with probabilities clipped.

    ``probs`` is (N, 2, H, W) or (2, H, W); ``label`` and ``pixel_weights``
    match it without the class axis. Returns a 0-d tensor.
    """
    probs = torch.as_tensor(probs)
    label = torch.as_tensor(label)
    w = torch.as_tensor(pixel_weights, dtype=probs.dtype)
    if probs.ndim == 3:
        probs = probs.unsqueeze(0)
        label = label.unsqueeze(0)
        w = w.unsqueeze(0)
    if probs.shape[1] != 2 or label.shape != probs.shape[:1] + probs.shape[2:] or w.shape != label.shape:
        raise ShapeError(
            f"shape mismatch: probs {tuple(probs.shape)}, label {tuple(label.shape)}, weights {tuple(w.shape)}"
        )
    p_true = probs.gather(1, label.long().unsqueeze(1)).squeeze(1)
    p_true = p_true.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    return -(w * torch.log(p_true)).sum() / label.numel()


def class_weight_map(label, class_weights=(1.0, 5.0)) -> np.ndarray:
    label = np.asarray(label)
    return np.where(label > 0, class_weights[1], class_weights[0]).astype(np.float32)


class Adam:
    """Adam with bias correction over a name -> tensor mapping."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    @torch.no_grad()
    def step(self, tensors: dict, grads: dict) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in tensors.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))


def trainable_tensors(params: NetworkParams) -> dict:
    return {
        f"{lname}.{tname}": t
        for lname, ts in params.layers.items()
        if params.trainable.get(lname, False)
        for tname, t in ts.items()
        if tname in LEARNABLE
    }


def _run(params, cfg, tcfg, pool, iterations, weights_given, trace, tag):
    """Shared optimisation loop; mutates ``params`` in place."""
    rng = np.random.default_rng(tcfg.seed)
    gen = torch.Generator()
    gen.manual_seed(int(tcfg.seed))
    opt = Adam(tcfg.learning_rate)
    tensors = trainable_tensors(params)
    for t in tensors.values():
        t.requires_grad_(True)
    names = list(tensors)
    r = float(tcfg.augment_range_deg)
    t0 = time.perf_counter()
    try:
        for step in range(1, iterations + 1):
            idx = rng.integers(len(pool), size=tcfg.batch_size)
            angles = rng.uniform(-r, r, size=tcfg.batch_size)
            batch = [rotate_patch(pool[i], a) for i, a in zip(idx, angles)]
            a, b, lab, w = stack_patches(batch)
            if not weights_given:
                w = class_weight_map(lab, tcfg.class_weights)
            probs = forward(params, cfg, a, b, mode="train", dropout_on=True, rng=gen)
            loss = weighted_cross_entropy(probs, torch.from_numpy(lab), torch.from_numpy(w))
            grads = torch.autograd.grad(loss, [tensors[n] for n in names], allow_unused=True)
            grads = {n: (g if g is not None else torch.zeros_like(tensors[n])) for n, g in zip(names, grads)}
            opt.step(tensors, grads)
            rec = {"step": step, "loss": float(loss.detach()), "wall_time": time.perf_counter() - t0}
            if trace is not None:
                trace.append(rec)
            if step % 100 == 0:
                log.info("%s step %d loss %.4f", tag, step, rec["loss"])
    finally:
        for t in tensors.values():
            t.requires_grad_(False)
    return params


def build_training_pool(exams: Sequence[MultiSequenceExam], patch_size: int = PATCH_SIZE) -> list:
    pool = []
    for exam in exams:
        for z in exam.lesion_slices():
            if exam.mask[z].any():
                pool.extend(extract_training_patches(exam, z, patch_size=patch_size))
    return pool


def train_base(cfg: NetworkConfig, tcfg: TrainConfig, exams: Sequence[MultiSequenceExam],
               trace: Optional[list] = None, params: Optional[NetworkParams] = None) -> NetworkParams:
    """Train every layer on patches from the lesion-containing slices of ``exams``.

    Exams are expected to be intensity-normalised already. Each step draws
    ``batch_size`` patches with replacement and rotates each by a fresh angle.
    Loss records ``{step, loss, wall_time}`` are appended to ``trace``.
    """
    tcfg.validate()
    for exam in exams:
        if exam.annotation is None:
            raise DataError(f"exam {exam.exam_id!r} has no annotation")
    pool = build_training_pool(exams, tcfg.patch_size)
    if not pool:
        raise DataError("no lesion-containing slices in the training exams")
    params = build_network(cfg, tcfg.seed) if params is None else params.clone()
    params = set_trainable(params, params.layers)
    return _run(params, cfg, tcfg, pool, tcfg.iterations, False, trace, "base")


def finetune(params: NetworkParams, cfg: NetworkConfig, tcfg: TrainConfig, baseline: MultiSequenceExam,
             slice_set: Sequence[int], weight_maps: Optional[np.ndarray] = None,
             trace: Optional[list] = None, iterations: Optional[int] = None) -> NetworkParams:
    """Retrain only the two head layers on corner/centre patches of the baseline scan.

    ``weight_maps`` is a (Z, Y, X) weight volume; when given it replaces the
    class weights. Returns new parameters; ``params`` is left untouched.
    """
    tcfg.validate()
    if baseline.annotation is None:
        raise DataError(f"baseline {baseline.exam_id!r} has no annotation")
    slice_set = list(slice_set)
    if not slice_set:
        raise DataError("fine-tuning needs at least one slice")
    if weight_maps is not None and np.shape(weight_maps) != baseline.shape:
        raise ShapeError(f"weight volume shape {np.shape(weight_maps)} != exam shape {baseline.shape}")
    pool = []
    for z in slice_set:
        pool.extend(extract_finetune_patches(baseline, int(z), tcfg.patch_size, weights=weight_maps))
    n_iter = tcfg.finetune_iterations if iterations is None else iterations
    out = set_trainable(params.clone(), HEAD_LAYERS)
    return _run(out, cfg, tcfg, pool, n_iter, weight_maps is not None, trace, "finetune")
