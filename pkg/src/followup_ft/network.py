"""Dual-pathway dilated fully convolutional network.

Each pathway is 13 stacked 3x3 conv + BN + ReLU layers grouped in five blocks;
the last activation of every block in both pathways is concatenated and fed to
a 1x1 head (conv-BN-ReLU with dropout on both sides, then a 2-way softmax).

Parameters live in plain tensors inside :class:`NetworkParams` so that
freezing, checkpointing and bit-level comparisons stay explicit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, FormatError, ShapeError

DEFAULT_DILATIONS = (1, 1, 2, 2, 4, 4, 8, 8, 16, 6, 4, 3, 2)
DEFAULT_BLOCKS = (2, 2, 2, 3, 4)
HEAD_LAYERS = ("head1", "head2")
CHECKPOINT_MAGIC = b"FUFTCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kernel_size: tuple
    n_kernels: int
    in_channels: int
    dilation: int = 1
    has_bn: bool = True
    activation: str = "relu"

    @property
    def fan_in(self) -> int:
        return self.kernel_size[0] * self.kernel_size[1] * self.in_channels


@dataclass
class NetworkConfig:
    in_channels_a: int = 16
    in_channels_b: int = 3
    n_kernels: int = 64
    head_kernels: int = 128
    dropout_rate: float = 0.2
    dilation_schedule: tuple = DEFAULT_DILATIONS
    block_sizes: tuple = DEFAULT_BLOCKS
    bn_momentum: float = 0.1
    bn_eps: float = 1e-3

    def __post_init__(self):
        self.dilation_schedule = tuple(int(d) for d in self.dilation_schedule)
        self.block_sizes = tuple(int(b) for b in self.block_sizes)

    def validate(self) -> "NetworkConfig":
        if len(self.dilation_schedule) != 13:
            raise ConfigError(f"dilation_schedule: need 13 entries, got {len(self.dilation_schedule)}")
        if any(d < 1 for d in self.dilation_schedule):
            raise ConfigError("dilation_schedule: dilations must be >= 1")
        if len(self.block_sizes) != 5 or sum(self.block_sizes) != 13 or min(self.block_sizes) < 1:
            raise ConfigError(f"block_sizes: need 5 positive sizes summing to 13, got {self.block_sizes}")
        for name in ("in_channels_a", "in_channels_b", "n_kernels", "head_kernels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate: must be in [0, 1), got {self.dropout_rate}")
        return self

    @property
    def feature_width(self) -> int:
        return 2 * len(self.block_sizes) * self.n_kernels

    @property
    def block_ends(self) -> tuple:
        return tuple(int(i) - 1 for i in np.cumsum(self.block_sizes))

    def pathway_layers(self, pathway: str) -> list:
        cin = self.in_channels_a if pathway == "a" else self.in_channels_b
        out = []
        for i, d in enumerate(self.dilation_schedule):
            out.append(LayerSpec(f"{pathway}{i + 1}", (3, 3), self.n_kernels, cin, d))
            cin = self.n_kernels
        return out

    def head_layers(self) -> list:
        return [
            LayerSpec("head1", (1, 1), self.head_kernels, self.feature_width),
            LayerSpec("head2", (1, 1), 2, self.head_kernels, has_bn=False, activation="softmax"),
        ]

    def layer_specs(self) -> list:
        return self.pathway_layers("a") + self.pathway_layers("b") + self.head_layers()

    def layer_names(self) -> list:
        return [s.name for s in self.layer_specs()]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_schedule"] = list(self.dilation_schedule)
        d["block_sizes"] = list(self.block_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"network: unknown field(s) {sorted(unknown)}")
        return cls(**d).validate()


def compute_receptive_field(schedule) -> int:
    """Receptive field width of stacked stride-1 3x3 convolutions with the given dilations."""
    schedule = list(schedule)
    if any(int(d) < 1 for d in schedule):
        raise ConfigError("dilations must be >= 1")
    return 1 + sum(2 * int(d) for d in schedule)


@dataclass
class NetworkParams:
    layers: dict  # name -> {"weight", "bias", ["gamma", "beta", "running_mean", "running_var"]}
    trainable: dict = field(default_factory=dict)

    def tensors(self):
        for lname, tensors in self.layers.items():
            for tname, t in tensors.items():
                yield f"{lname}.{tname}", t

    def clone(self) -> "NetworkParams":
        return NetworkParams(
            {n: {k: t.detach().clone() for k, t in ts.items()} for n, ts in self.layers.items()},
            dict(self.trainable),
        )

    def to(self, dtype) -> "NetworkParams":
        return NetworkParams(
            {n: {k: t.detach().to(dtype) for k, t in ts.items()} for n, ts in self.layers.items()},
            dict(self.trainable),
        )

    def n_parameters(self) -> int:
        """Learnable scalars (running statistics excluded)."""
        return sum(
            t.numel() for name, t in self.tensors() if not name.endswith(("running_mean", "running_var"))
        )

    def digest(self, names=None) -> str:
        """SHA-256 over the raw bytes of the selected layers (all when ``names`` is None)."""
        h = hashlib.sha256()
        for lname, tensors in self.layers.items():
            if names is not None and lname not in names:
                continue
            for tname, t in tensors.items():
                h.update(f"{lname}.{tname}".encode())
                h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_network(cfg: NetworkConfig, seed: int = 0) -> NetworkParams:
    """He-uniform conv weights, zero biases, identity batch norm; everything trainable."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    layers = {}
    for spec in cfg.layer_specs():
        bound = np.sqrt(6.0 / spec.fan_in)
        shape = (spec.n_kernels, spec.in_channels) + tuple(spec.kernel_size)
        w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        t = {"weight": torch.from_numpy(w), "bias": torch.zeros(spec.n_kernels)}
        if spec.has_bn:
            t["gamma"] = torch.ones(spec.n_kernels)
            t["beta"] = torch.zeros(spec.n_kernels)
            t["running_mean"] = torch.zeros(spec.n_kernels)
            t["running_var"] = torch.ones(spec.n_kernels)
        layers[spec.name] = t
    return NetworkParams(layers, {name: True for name in layers})


def set_trainable(params: NetworkParams, layer_names) -> NetworkParams:
    """Mark exactly ``layer_names`` trainable; tensor values are shared, not copied."""
    layer_names = set(layer_names)
    unknown = layer_names - set(params.layers)
    if unknown:
        raise KeyError(f"unknown layer(s): {sorted(unknown)}")
    return NetworkParams(params.layers, {n: n in layer_names for n in params.layers})


def _as_batch(x, dtype) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W) input, got {tuple(t.shape)}")
    return t.to(dtype)


def _conv_layer(x, tensors, spec: LayerSpec, batch_stats: bool, cfg: NetworkConfig):
    pad = spec.dilation * (spec.kernel_size[0] // 2)
    y = F.conv2d(x, tensors["weight"], tensors["bias"], padding=pad, dilation=spec.dilation)
    if spec.has_bn:
        y = F.batch_norm(
            y,
            tensors["running_mean"],
            tensors["running_var"],
            tensors["gamma"],
            tensors["beta"],
            training=batch_stats,
            momentum=cfg.bn_momentum,
            eps=cfg.bn_eps,
        )
    if spec.activation == "relu":
        y = F.relu(y)
    return y


def _dropout(x, rate: float, gen: Optional[torch.Generator]):
    if rate <= 0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def _generator(rng) -> Optional[torch.Generator]:
    if rng is None or isinstance(rng, torch.Generator):
        return rng
    g = torch.Generator()
    g.manual_seed(int(rng))
    return g


def pathway_features(params: NetworkParams, cfg: NetworkConfig, input_a, input_b, mode: str = "infer"):
    """Concatenated block-tail activations of both pathways, shape (N, feature_width, H, W)."""
    dtype = params.layers["head2"]["weight"].dtype
    xa = _as_batch(input_a, dtype)
    xb = _as_batch(input_b, dtype)
    if xa.shape[1] != cfg.in_channels_a or xb.shape[1] != cfg.in_channels_b:
        raise ShapeError(
            f"input channels ({xa.shape[1]}, {xb.shape[1]}) do not match config "
            f"({cfg.in_channels_a}, {cfg.in_channels_b})"
        )
    if xa.shape[0] != xb.shape[0] or xa.shape[2:] != xb.shape[2:]:
        raise ShapeError("pathway inputs must share batch and spatial size")
    ends = set(cfg.block_ends)
    taps = []
    for pathway, x in (("a", xa), ("b", xb)):
        for i, spec in enumerate(cfg.pathway_layers(pathway)):
            batch_stats = mode == "train" and params.trainable.get(spec.name, False)
            x = _conv_layer(x, params.layers[spec.name], spec, batch_stats, cfg)
            if i in ends:
                taps.append(x)
    return torch.cat(taps, dim=1)


def head_forward(params: NetworkParams, cfg: NetworkConfig, features, mode: str = "infer",
                 dropout_on: bool = False, rng=None):
    gen = _generator(rng)
    rate = cfg.dropout_rate if dropout_on else 0.0
    h1, h2 = cfg.head_layers()
    x = _dropout(features, rate, gen)
    x = _conv_layer(x, params.layers["head1"], h1, mode == "train" and params.trainable.get("head1", False), cfg)
    x = _dropout(x, rate, gen)
    x = _conv_layer(x, params.layers["head2"], h2, False, cfg)
    return torch.softmax(x, dim=1)


def forward(params: NetworkParams, cfg: NetworkConfig, input_a, input_b, mode: str = "infer",
            dropout_on: bool = False, rng=None):
    """Per-pixel class probabilities, shape (N, 2, H, W); channel 1 is the lesion class.

    In ``train`` mode, batch norm uses batch statistics (and updates running
    statistics) for trainable layers only; frozen layers always use running
    statistics. Dropout is inverted dropout, applied only when ``dropout_on``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    feats = pathway_features(params, cfg, input_a, input_b, mode)
    return head_forward(params, cfg, feats, mode, dropout_on, rng)


# -------------------------------------------------------------- checkpoints


def save_checkpoint(params: NetworkParams, cfg: NetworkConfig, path) -> None:
    """Magic, u32 header length, JSON header, then little-endian float32 tensors in header order."""
    entries = []
    payload = []
    for name, t in params.tensors():
        arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "layers": list(params.layers),
        "trainable": params.trainable,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, cfg)``."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off: off + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    off += hlen
    cfg = NetworkConfig.from_dict(header["config"])
    layers = {name: {} for name in header["layers"]}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if off + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(entry["shape"])
        off += 4 * n
        lname, tname = entry["name"].split(".", 1)
        layers[lname][tname] = torch.from_numpy(arr.astype(np.float32))
    return NetworkParams(layers, {k: bool(v) for k, v in header["trainable"].items()}), cfg
