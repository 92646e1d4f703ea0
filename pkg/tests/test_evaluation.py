import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from followup_ft.errors import ShapeError
from followup_ft.evaluation import (
    avd,
    detection_metrics,
    dice,
    evaluate_case,
    hd95,
    lesion_size_split,
    mc_dropout_uncertainty,
    nearest_rank,
    population_sd,
)
from followup_ft.inference import predict_volume
from followup_ft.network import NetworkConfig, build_network, forward
from followup_ft.postprocess import connected_components, postprocess_pipeline
from oracles import detection_oracle, hd95_oracle
from toys import disc_exam

small_masks = arrays(np.uint8, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
                     elements=st.integers(0, 1))


def cc(m, spacing=(1.0, 1.0, 1.0)):
    return connected_components(m, spacing)


def boxes(shape, specs):
    m = np.zeros(shape, np.uint8)
    for z, y, x, d, h, w in specs:
        m[z: z + d, y: y + h, x: x + w] = 1
    return m


@st.composite
def box_masks(draw, size=16, max_objects=6):
    specs = []
    for _ in range(draw(st.integers(0, max_objects))):
        d, h, w = (draw(st.integers(1, 4)) for _ in range(3))
        z, y, x = (draw(st.integers(0, size - e)) for e in (d, h, w))
        specs.append((z, y, x, d, h, w))
    return boxes((size,) * 3, specs)


# ------------------------------------------------------------------ detection


def test_identical_masks_detect_everything():
    m = boxes((6, 10, 10), [(0, 0, 0, 2, 2, 2), (3, 5, 5, 2, 3, 3)])
    r = detection_metrics(cc(m), cc(m))
    assert (r.tpr, r.fpc, r.f1, r.precision) == (1.0, 0, 1.0, 1.0)


def test_half_detected_with_one_stray():
    annot = boxes((6, 12, 12), [(0, 0, 0, 2, 2, 2), (3, 8, 8, 2, 2, 2)])
    pred = boxes((6, 12, 12), [(1, 1, 1, 2, 2, 2), (4, 0, 8, 1, 1, 1)])
    r = detection_metrics(cc(pred), cc(annot))
    assert (r.tpr, r.fpc, r.precision, r.f1) == (0.5, 1, 0.5, 0.5)
    assert r.detected == [True, False]


def test_undefined_and_zero_cases():
    empty = np.zeros((2, 4, 4), np.uint8)
    one = boxes((2, 4, 4), [(0, 0, 0, 1, 1, 1)])
    r = detection_metrics(cc(one), cc(empty))
    assert r.tpr is None and r.fpc == 1 and r.f1 == 0.0
    r = detection_metrics(cc(empty), cc(one))
    assert r.tpr == 0.0 and r.precision is None and r.f1 == 0.0
    with pytest.raises(ShapeError):
        detection_metrics(cc(one), cc(np.zeros((2, 4, 5))))


@settings(max_examples=40, deadline=None)
@given(pred=box_masks(), annot=box_masks())
def test_detection_matches_pairwise_oracle(pred, annot):
    r = detection_metrics(cc(pred), cc(annot))
    tpr, fpc, prec, f1 = detection_oracle(pred, annot)
    assert r.tpr == tpr and r.fpc == fpc and r.precision == prec
    assert r.f1 == pytest.approx(f1)
    p, q = r.precision or 0.0, r.tpr or 0.0
    assert r.f1 <= min(2 * p, 2 * q) + 1e-12
    if p + q:
        assert r.f1 == pytest.approx(2 * p * q / (p + q))


def test_seeded_16_cube_against_oracle():
    rng = np.random.default_rng(7)
    pred = (rng.random((16, 16, 16)) > 0.97).astype(np.uint8)
    annot = (rng.random((16, 16, 16)) > 0.97).astype(np.uint8)
    r = detection_metrics(cc(pred), cc(annot))
    assert (r.tpr, r.fpc, r.precision) == detection_oracle(pred, annot)[:3]


# ------------------------------------------------------------------ overlap metrics


def test_dice_examples():
    a = boxes((1, 4, 4), [(0, 0, 0, 1, 2, 2)])
    assert dice(a, a) == 1.0
    assert dice(a, 1 - a) == 0.0
    assert dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0
    x = np.zeros((1, 1, 10), np.uint8)
    y = np.zeros((1, 1, 10), np.uint8)
    x[0, 0, :6] = 1
    y[0, 0, 3:7] = 1
    assert dice(x, y) == pytest.approx(0.6)


@settings(max_examples=50)
@given(a=small_masks, data=st.data())
def test_dice_symmetry(a, data):
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_avd_examples():
    def vol(n):
        v = np.zeros(200, np.uint8)
        v[:n] = 1
        return v.reshape(1, 10, 20)

    assert avd(vol(110), vol(100)) == pytest.approx(10.0)
    assert avd(vol(0), vol(50)) == pytest.approx(100.0)
    shifted = np.roll(vol(30), 3, axis=2)
    assert avd(shifted, vol(30)) == 0.0
    assert avd(vol(3), vol(0)) is None


def test_hd95_examples():
    a = np.zeros((1, 1, 8), np.uint8)
    b = np.zeros((1, 1, 8), np.uint8)
    a[0, 0, 1] = b[0, 0, 4] = 1
    assert hd95(a, b, (1.0, 1.0, 1.0)) == pytest.approx(3.0)
    assert hd95(a, b, (1.0, 1.0, 2.5)) == pytest.approx(7.5)
    assert hd95(a, a) == 0.0
    assert hd95(a, np.zeros_like(a)) is None


def test_nearest_rank():
    assert nearest_rank(range(1, 21), 95) == 19
    assert nearest_rank([5.0], 95) == 5.0
    assert nearest_rank(range(1, 101), 95) == 95


@settings(max_examples=40, deadline=None)
@given(a=small_masks, data=st.data(), sp=st.tuples(*[st.sampled_from([0.5, 1.0, 2.0, 3.0])] * 3))
def test_hd95_matches_all_pairs_oracle(a, data, sp):
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    if not a.any() or not b.any():
        assert hd95(a, b, sp) is None
        return
    assert hd95(a, b, sp) == pytest.approx(hd95_oracle(a, b, sp), rel=1e-9)
    assert hd95(a, b, sp) == hd95(b, a, sp)


def test_evaluate_case_row():
    annot = boxes((4, 8, 8), [(0, 0, 0, 2, 2, 2)])
    row = evaluate_case(annot, annot, (1.0, 1.0, 1.0))
    assert row == {"tpr": 1.0, "fpc": 0, "f1": 1.0, "dice": 1.0, "avd": 0.0, "hd95": 0.0}


# ------------------------------------------------------------------ lesion size


def test_size_split():
    spacing = (1.0, 10.0, 10.0)  # 0.1 cm3 per voxel
    annot = boxes((4, 12, 12), [(0, 0, 0, 1, 1, 2), (2, 5, 5, 2, 3, 3)])  # 0.2 cm3 and 1.8 cm3
    pred = boxes((4, 12, 12), [(2, 5, 5, 1, 1, 1)])
    split = lesion_size_split(cc(pred, spacing), cc(annot, spacing), 1.0)
    assert split["small"] == {"n_true": 1, "n_detected": 0, "tpr": 0.0}
    assert split["large"] == {"n_true": 1, "n_detected": 1, "tpr": 1.0}
    split = lesion_size_split(cc(pred, spacing), cc(annot, spacing), 0.1)
    assert split["small"]["tpr"] is None and split["large"]["tpr"] == 0.5


# ------------------------------------------------------------------ uncertainty


def test_population_sd_two_repeats():
    assert population_sd([[0.4], [0.6]])[0] == pytest.approx(0.1)


TINY = NetworkConfig(in_channels_a=2, in_channels_b=1, n_kernels=8, head_kernels=16, dropout_rate=0.3)


@pytest.fixture(scope="module")
def mc_case():
    exam = disc_exam(shape=(3, 24, 24), centres=((12, 12),), radius=4)
    params = build_network(TINY, 2)
    # Push the head towards the lesion class so the detection summary is defined.
    params.layers["head2"]["bias"][:] = torch.tensor([-2.0, 2.0])
    return exam, params


def test_zero_dropout_gives_zero_sd(mc_case):
    exam, params = mc_case
    cfg = NetworkConfig(**{**TINY.to_dict(), "dropout_rate": 0.0})
    rep = mc_dropout_uncertainty(params, cfg, exam, n_repeats=4, task="segmentation")
    assert (rep.sd == 0).all() and rep.summary == 0.0


def test_identical_sub_seeds_give_zero_sd(mc_case):
    exam, params = mc_case
    rep = mc_dropout_uncertainty(params, TINY, exam, n_repeats=3, sub_seeds=[5, 5, 5])
    assert (rep.sd == 0).all()


def test_sd_bounds_and_summaries(mc_case):
    exam, params = mc_case
    probs = predict_volume(params, TINY, exam)
    det = mc_dropout_uncertainty(params, TINY, exam, n_repeats=6, task="detection", seed=1, probs=probs)
    seg = mc_dropout_uncertainty(params, TINY, exam, n_repeats=6, task="segmentation", seed=1, probs=probs)
    assert det.sd.min() >= 0 and det.sd.max() <= 0.5
    assert det.sd.max() > 0
    assert (det.sd[~exam.mask] == 0).all()
    np.testing.assert_array_equal(det.sd, seg.sd)
    pred, _ = postprocess_pipeline(probs, exam.mask, "detection", exam.spacing)
    assert pred.any()
    assert det.summary == pytest.approx(det.sd[pred > 0].mean())
    assert seg.summary == pytest.approx(seg.sd[exam.mask].max())
    again = mc_dropout_uncertainty(params, TINY, exam, n_repeats=6, task="detection", seed=1, probs=probs)
    np.testing.assert_array_equal(again.sd, det.sd)


def test_detection_summary_undefined_without_objects(mc_case):
    exam, params = mc_case
    rep = mc_dropout_uncertainty(params, TINY, exam, n_repeats=2, probs=np.zeros(exam.shape))
    assert rep.summary is None


def test_head_resampling_matches_full_dropout_forward(mc_case):
    # Re-sampling only the head must reproduce the SD of full dropout forwards in distribution.
    exam, params = mc_case
    rep = mc_dropout_uncertainty(params, TINY, exam, n_repeats=25, task="segmentation", seed=3)
    a, b = exam.seq_a.array[:, 1][None], exam.seq_b.array[:, 1][None]
    full = np.stack([forward(params, TINY, a, b, dropout_on=True, rng=100 + k)[0, 1].numpy() for k in range(25)])
    sd_full = population_sd(full)[exam.mask[1]]
    sd_head = rep.sd[1][exam.mask[1]]
    assert sd_head.mean() == pytest.approx(sd_full.mean(), rel=0.1)


def test_repeat_count_validation(mc_case):
    exam, params = mc_case
    with pytest.raises(ValueError):
        mc_dropout_uncertainty(params, TINY, exam, n_repeats=1)
    with pytest.raises(ValueError):
        mc_dropout_uncertainty(params, TINY, exam, n_repeats=3, sub_seeds=[1, 2])
