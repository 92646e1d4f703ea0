import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from followup_ft.errors import ConfigError, FormatError, ShapeError
from followup_ft.network import (
    DEFAULT_DILATIONS,
    HEAD_LAYERS,
    NetworkConfig,
    build_network,
    compute_receptive_field,
    forward,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
)

TINY = NetworkConfig(in_channels_a=2, in_channels_b=1, n_kernels=8, head_kernels=16)


def rand_inputs(cfg, h, w, n=1, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return (torch.from_numpy(rng.normal(size=(n, cfg.in_channels_a, h, w)).astype(dtype)),
            torch.from_numpy(rng.normal(size=(n, cfg.in_channels_b, h, w)).astype(dtype)))


def randomize_bn(params, seed=0):
    g = torch.Generator().manual_seed(seed)
    for t in params.layers.values():
        if "gamma" in t:
            n = t["gamma"].numel()
            t["gamma"] = 0.5 + torch.rand(n, generator=g, dtype=t["gamma"].dtype)
            t["beta"] = 0.2 * torch.randn(n, generator=g, dtype=t["gamma"].dtype)
            t["running_mean"] = 0.1 * torch.randn(n, generator=g, dtype=t["gamma"].dtype)
            t["running_var"] = 0.5 + torch.rand(n, generator=g, dtype=t["gamma"].dtype)
    return params


def perturbation_radius(cfg, seed=0, radii=range(58, 65)):
    """Largest L-inf distance at which a single-pixel change moves the centre output."""
    params = randomize_bn(build_network(cfg, seed).to(torch.float64), seed)
    r_max = max(radii)
    size = 2 * r_max + 1
    c = r_max
    a, b = rand_inputs(cfg, size, size, dtype=np.float64, seed=seed)
    ref = forward(params, cfg, a, b)[0, 1, c, c]
    found = 0
    for r in radii:
        offsets = [(r, 0), (-r, 0), (0, r), (0, -r), (r, r), (-r, 5)]
        batch_a = a.repeat(len(offsets), 1, 1, 1)
        for k, (dy, dx) in enumerate(offsets):
            batch_a[k, 0, c + dy, c + dx] += 3.0
        out = forward(params, cfg, batch_a, b.repeat(len(offsets), 1, 1, 1))[:, 1, c, c]
        if (out != ref).any():
            found = r
    return found


def test_receptive_field_arithmetic():
    assert compute_receptive_field(DEFAULT_DILATIONS) == 123
    assert compute_receptive_field([1]) == 3
    assert compute_receptive_field([1, 1]) == 5


def test_default_schedule_shape():
    cfg = NetworkConfig()
    assert len(cfg.dilation_schedule) == 13
    assert sum(d == 1 for d in cfg.dilation_schedule) == 2
    assert len(cfg.block_sizes) == 5
    assert cfg.feature_width == 640


def test_empirical_receptive_radius():
    cfg = NetworkConfig(in_channels_a=2, in_channels_b=1, n_kernels=16, head_kernels=16)
    assert perturbation_radius(cfg) == (compute_receptive_field(cfg.dilation_schedule) - 1) // 2 == 61


def test_far_pixel_does_not_change_output():
    cfg = NetworkConfig(in_channels_a=1, in_channels_b=1, n_kernels=4, head_kernels=4)
    params = build_network(cfg, 1).to(torch.float64)
    a, b = rand_inputs(cfg, 140, 140, dtype=np.float64)
    ref = forward(params, cfg, a, b)[0, 1, 70, 70]
    b2 = b.clone()
    b2[0, 0, 70, 70 + 62] += 10
    assert forward(params, cfg, a, b2)[0, 1, 70, 70] == ref


def test_build_is_deterministic():
    p, q = build_network(TINY, 5), build_network(TINY, 5)
    for (n1, t1), (n2, t2) in zip(p.tensors(), q.tensors()):
        assert n1 == n2 and torch.equal(t1, t2)
    assert not torch.equal(build_network(TINY, 6).layers["a1"]["weight"], p.layers["a1"]["weight"])


def test_he_uniform_bound_and_zero_bias():
    cfg = NetworkConfig(in_channels_a=64, in_channels_b=1, n_kernels=64)
    p = build_network(cfg, 0)
    w = p.layers["a1"]["weight"]
    bound = np.sqrt(6 / 576)
    assert abs(bound - 0.102) < 1e-3
    assert w.abs().max() <= bound and w.abs().max() > 0.95 * bound
    assert all(float(ts["bias"].abs().max()) == 0 for ts in p.layers.values())
    bn = p.layers["a5"]
    assert torch.equal(bn["gamma"], torch.ones(64)) and torch.equal(bn["running_var"], torch.ones(64))
    assert all(p.trainable.values())


def test_invalid_config_raises():
    with pytest.raises(ConfigError):
        build_network(NetworkConfig(dilation_schedule=(1, 2, 3)), 0)
    with pytest.raises(ConfigError):
        build_network(NetworkConfig(block_sizes=(3, 3, 3, 3, 3)), 0)


def test_parameter_count_is_frozen():
    # Default config: pathway inputs of 16 (DCE phases) and 3 (b-values) channels.
    p = build_network(NetworkConfig(), 0)
    conv = lambda cin, cout, k: cin * cout * k * k + cout  # noqa: E731
    bn = 2 * 64
    pathway = lambda cin: conv(cin, 64, 3) + bn + 12 * (conv(64, 64, 3) + bn)  # noqa: E731
    expected = pathway(16) + pathway(3) + conv(640, 128, 1) + 2 * 128 + conv(128, 2, 1)
    assert p.n_parameters() == expected == 983_234


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 24), w=st.integers(1, 24), seed=st.integers(0, 100))
def test_output_shape_and_softmax(h, w, seed):
    p = build_network(TINY, seed)
    a, b = rand_inputs(TINY, h, w, n=2, seed=seed)
    out = forward(p, TINY, a, b)
    assert out.shape == (2, 2, h, w)
    assert torch.allclose(out.sum(1), torch.ones(2, h, w), atol=1e-5)


def test_train_mode_output_also_normalized():
    p = build_network(TINY, 0)
    a, b = rand_inputs(TINY, 16, 16, n=3)
    out = forward(p, TINY, a, b, mode="train", dropout_on=True, rng=1)
    assert torch.allclose(out.sum(1), torch.ones(3, 16, 16), atol=1e-5)


def test_zero_head_gives_half():
    p = build_network(TINY, 0)
    for name in HEAD_LAYERS:
        p.layers[name]["weight"].zero_()
        p.layers[name]["bias"].zero_()
    a, b = rand_inputs(TINY, 10, 12)
    out = forward(p, TINY, a, b)
    assert torch.allclose(out, torch.full_like(out, 0.5))


def test_infer_is_deterministic_and_dropout_is_not():
    p = build_network(TINY, 0)
    a, b = rand_inputs(TINY, 12, 12)
    assert torch.equal(forward(p, TINY, a, b), forward(p, TINY, a, b))
    d1 = forward(p, TINY, a, b, dropout_on=True, rng=1)
    d2 = forward(p, TINY, a, b, dropout_on=True, rng=2)
    assert not torch.equal(d1, d2)
    assert torch.equal(d1, forward(p, TINY, a, b, dropout_on=True, rng=1))


def test_infer_does_not_touch_running_stats():
    p = build_network(TINY, 0)
    before = p.digest()
    a, b = rand_inputs(TINY, 12, 12)
    forward(p, TINY, a, b)
    assert p.digest() == before


def test_channel_mismatch():
    p = build_network(TINY, 0)
    a, b = rand_inputs(TINY, 8, 8)
    with pytest.raises(ShapeError):
        forward(p, TINY, b, b)


def test_set_trainable():
    p = build_network(TINY, 0)
    q = set_trainable(p, HEAD_LAYERS)
    assert {n for n, f in q.trainable.items() if f} == set(HEAD_LAYERS)
    assert q.digest() == p.digest()
    r = set_trainable(q, HEAD_LAYERS)
    assert r.trainable == q.trainable
    with pytest.raises(KeyError):
        set_trainable(p, {"nope"})


def test_checkpoint_roundtrip(tmp_path):
    p = set_trainable(build_network(TINY, 3), HEAD_LAYERS)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, TINY, path)
    q, cfg = load_checkpoint(path)
    assert cfg == TINY
    assert q.digest() == p.digest()
    assert q.trainable == p.trainable
    data = path.read_bytes()
    (path.parent / "bad.ckpt").write_bytes(b"garbage" + data)
    with pytest.raises(FormatError):
        load_checkpoint(path.parent / "bad.ckpt")
    (path.parent / "short.ckpt").write_bytes(data[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(path.parent / "short.ckpt")
