"""End-to-end phantom experiments shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adaptation import classify_pixels, score_slices, select_slices, weight_map
from .config import RunConfig
from .evaluation import evaluate_case, mc_dropout_uncertainty
from .inference import predict_volume
from .network import HEAD_LAYERS, NetworkParams
from .phantom import generate_cohort
from .postprocess import postprocess_pipeline
from .training import finetune, train_base
from .volume import MultiSequenceExam, PatientStudy, normalize_exam

log = logging.getLogger(__name__)

CSV_COLUMNS = ("patient_id", "model", "tpr", "fpc", "f1", "dice", "avd", "hd95", "uncertainty")


@dataclass(frozen=True)
class Variant:
    """One fine-tuning recipe; ``iterations == 0`` means the base model itself."""

    name: str
    iterations: int = 100
    n_slices: str = "all"
    pool: str = "lesion_slices"
    weighting: str = "none"


BASE = Variant("base", iterations=0)


@dataclass
class PatientResult:
    patient_id: str
    rows: list = field(default_factory=list)
    selections: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)


def prepare_study(study: PatientStudy) -> PatientStudy:
    return PatientStudy(study.patient_id, normalize_exam(study.baseline), normalize_exam(study.followup), study.meta)


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(rows: Sequence[dict], path, columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def choose_slices(base_probs: np.ndarray, baseline: MultiSequenceExam, variant: Variant) -> list:
    if variant.n_slices == "all":
        return baseline.lesion_slices() if variant.pool == "lesion_slices" else baseline.organ_slices()
    masked = base_probs * baseline.mask
    scores = score_slices(masked, baseline.mask, variant.pool, baseline.label)
    return select_slices(scores, variant.n_slices).slices


def baseline_weights(base_probs: np.ndarray, baseline: MultiSequenceExam, scheme: str, task: str):
    if scheme == "none":
        return None
    pred, _ = postprocess_pipeline(base_probs, baseline.mask, task, baseline.spacing)
    return weight_map(classify_pixels(pred, baseline.label), scheme)


def evaluate_model(params: NetworkParams, rc: RunConfig, exam: MultiSequenceExam, uncertainty: bool,
                   uncertainty_seed: int = 0) -> dict:
    """Metrics on one annotated exam: detection metrics from the detection pipeline,
    overlap metrics from the segmentation pipeline."""
    cfg = rc.network
    probs = predict_volume(params, cfg, exam, tile=rc.inference.tile)
    det_mask, _ = postprocess_pipeline(probs, exam.mask, "detection", exam.spacing)
    seg_mask, _ = postprocess_pipeline(probs, exam.mask, "segmentation", exam.spacing)
    det = evaluate_case(det_mask, exam.label, exam.spacing)
    seg = evaluate_case(seg_mask, exam.label, exam.spacing)
    row = {"tpr": det["tpr"], "fpc": det["fpc"], "f1": det["f1"],
           "dice": seg["dice"], "avd": seg["avd"], "hd95": seg["hd95"], "uncertainty": None}
    if uncertainty:
        rep = mc_dropout_uncertainty(params, cfg, exam, rc.uncertainty.n_repeats, rc.uncertainty.task,
                                     seed=uncertainty_seed, probs=probs)
        row["uncertainty"] = rep.summary
    return row


def run_patient(base: NetworkParams, rc: RunConfig, study: PatientStudy, variants: Sequence[Variant],
                uncertainty: bool = True, uncertainty_for: Optional[Sequence[str]] = None) -> PatientResult:
    """Fine-tune ``base`` on the baseline scan per variant and evaluate on the follow-up."""
    cfg, tcfg = rc.network, rc.training
    res = PatientResult(study.patient_id)
    base_probs = predict_volume(base, cfg, study.baseline, tile=rc.inference.tile)
    for v in variants:
        if v.iterations == 0:
            params = base
        else:
            slices = choose_slices(base_probs, study.baseline, v)
            weights = baseline_weights(base_probs, study.baseline, v.weighting, rc.postprocess.task)
            params = finetune(base, cfg, tcfg, study.baseline, slices, weights, iterations=v.iterations)
            res.selections[v.name] = slices
        res.digests[v.name] = params.digest()
        want_unc = uncertainty and (uncertainty_for is None or v.name in uncertainty_for)
        row = evaluate_model(params, rc, study.followup, want_unc, uncertainty_seed=tcfg.seed)
        row.update(patient_id=study.patient_id, model=v.name)
        res.rows.append(row)
        log.info("%s %s dice=%.3f tpr=%s", study.patient_id, v.name, row["dice"], row["tpr"])
    return res


@dataclass
class CohortRun:
    base: NetworkParams
    results: list
    trace: list

    @property
    def rows(self) -> list:
        return [r for res in self.results for r in res.rows]

    def metric(self, model: str, key: str) -> np.ndarray:
        vals = [r[key] for r in self.rows if r["model"] == model]
        return np.array([np.nan if v is None else v for v in vals], dtype=float)


def phantom_cohort(rc: RunConfig):
    train, test = generate_cohort(rc.phantom, rc.cohort.n_train, rc.cohort.n_test)
    return [normalize_exam(e) for e in train], [prepare_study(s) for s in test]


def run_cohort(rc: RunConfig, variants: Sequence[Variant], base: Optional[NetworkParams] = None,
               uncertainty: bool = True, uncertainty_for: Optional[Sequence[str]] = None,
               cohort=None) -> CohortRun:
    """Train (unless ``base`` is given) on the phantom training split and evaluate every test patient."""
    train, test = cohort if cohort is not None else phantom_cohort(rc)
    trace: list = []
    if base is None:
        base = train_base(rc.network, rc.training, train, trace=trace)
    results = [run_patient(base, rc, s, variants, uncertainty, uncertainty_for) for s in test]
    return CohortRun(base, results, trace)


def summarize(run: CohortRun, models: Sequence[str]) -> list:
    """Cohort-level mean/median per model, one dict per model."""
    out = []
    for m in models:
        row = {"model": m}
        for key in ("tpr", "fpc", "f1", "dice", "avd", "hd95", "uncertainty"):
            v = run.metric(m, key)
            v = v[~np.isnan(v)]
            row[f"{key}_mean"] = float(v.mean()) if len(v) else None
            row[f"{key}_median"] = float(np.median(v)) if len(v) else None
        out.append(row)
    return out


def frozen_digest(params: NetworkParams) -> str:
    return params.digest([n for n in params.layers if n not in HEAD_LAYERS])
