"""Command-line entry point: ``followup-ft <verb> [options]``.

Every verb reads a run configuration (``--config``, TOML or JSON; the desk
preset when omitted). Relative paths in the ``[paths]`` section resolve
against the configuration file. Checkpoints go to ``$FOLLOWUP_FT_CACHE``
when set, otherwise to ``paths.checkpoints``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import experiments as ex
from .adaptation import score_slices, select_slices
from .config import N_SLICES, TASKS, WEIGHTINGS, RunConfig, desk_config, load_config
from .errors import ConfigError, DataError, FollowupError
from .evaluation import evaluate_case, mc_dropout_uncertainty
from .inference import predict_volume
from .network import load_checkpoint, save_checkpoint
from .phantom import generate_patient, patient_seeds
from .postprocess import mask_probabilities, postprocess_pipeline
from .training import finetune, train_base
from .volume import MultiSequenceExam, Volume3D, load_exam, load_volume, normalize_exam, save_exam, write_volume

log = logging.getLogger("followup_ft")

CACHE_ENV = "FOLLOWUP_FT_CACHE"
MODELS = ("base", "finetuned")
EXPERIMENTS = ("iterations_sweep", "slices_sweep", "weighting", "uncertainty", "directional")


class UsageError(ConfigError):
    """Bad command-line usage."""


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- context


class Context:
    """Resolved configuration plus the on-disk layout derived from it."""

    def __init__(self, args):
        if args.config:
            cfg_path = Path(args.config)
            self.rc = load_config(cfg_path, base=RunConfig())
            self.root = cfg_path.resolve().parent
        else:
            self.rc = desk_config()
            self.root = Path.cwd()
        if getattr(args, "seed", None) is not None:
            self.rc.training.seed = int(args.seed)
            self.rc.phantom.seed = int(args.seed)
        self.args = args

    def path(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    @property
    def data(self) -> Path:
        return self.path(self.rc.paths.data)

    @property
    def output(self) -> Path:
        return self.path(self.rc.paths.output)

    @property
    def checkpoints(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        return Path(env) if env else self.path(self.rc.paths.checkpoints)

    def cohort(self) -> dict:
        f = self.data / "cohort.json"
        if not f.exists():
            raise DataError(f"no cohort manifest at {f}; run gen-phantom first")
        return json.loads(f.read_text())

    def study(self, patient: str) -> dict:
        for entry in self.cohort()["test"]:
            if entry["id"] == patient:
                return entry
        raise DataError(f"unknown test patient {patient!r}")

    def exam(self, rel: str) -> MultiSequenceExam:
        f = self.data / rel
        if not f.exists():
            raise DataError(f"missing exam manifest {f}")
        return normalize_exam(load_exam(f))

    def base_checkpoint(self) -> Path:
        return self.checkpoints / "base.ckpt"

    def patient_checkpoint(self, patient: str) -> Path:
        return self.checkpoints / f"{patient}.ckpt"

    def load(self, path: Path):
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        params, cfg = load_checkpoint(path)
        return params, cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _need(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required for this command")
    return value


# ----------------------------------------------------------------- verbs


def cmd_gen_phantom(ctx: Context) -> int:
    rc = ctx.rc
    data = ctx.data
    seeds = patient_seeds(rc.phantom.seed, rc.cohort.n_train + rc.cohort.n_test)
    manifest = {"phantom": rc.phantom.to_dict(), "train": [], "test": []}
    for i, s in enumerate(seeds[: rc.cohort.n_train]):
        pid = f"train{i:03d}"
        exam = generate_patient(rc.phantom, s, shifted=False, patient_id=pid).baseline
        path = save_exam(exam, data / "train" / pid)
        manifest["train"].append({"id": pid, "seed": s, "manifest": str(path.relative_to(data))})
    for i, s in enumerate(seeds[rc.cohort.n_train:]):
        pid = f"test{i:03d}"
        study = generate_patient(rc.phantom, s, shifted=True, patient_id=pid)
        b = save_exam(study.baseline, data / "test" / pid / "baseline")
        f = save_exam(study.followup, data / "test" / pid / "followup")
        _write_json(data / "test" / pid / "meta.json", study.meta)
        manifest["test"].append({"id": pid, "seed": s, "baseline": str(b.relative_to(data)),
                                 "followup": str(f.relative_to(data))})
    _write_json(data / "cohort.json", manifest)
    print(f"wrote {len(manifest['train'])} training exams and {len(manifest['test'])} test studies to {data}")
    return 0


def cmd_train_base(ctx: Context) -> int:
    rc = ctx.rc
    if ctx.args.iterations is not None:
        rc.training.iterations = int(ctx.args.iterations)
    exams = [ctx.exam(e["manifest"]) for e in ctx.cohort()["train"]]
    trace: list = []
    params = train_base(rc.network, rc.training, exams, trace=trace)
    out = ctx.base_checkpoint()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, rc.network, out)
    _write_jsonl(out.with_name("base_train.jsonl"), trace)
    print(f"{out} sha256={params.digest()}")
    return 0


def _base_probs(ctx: Context, exam: MultiSequenceExam):
    params, cfg = ctx.load(ctx.base_checkpoint())
    return params, cfg, predict_volume(params, cfg, exam, tile=ctx.rc.inference.tile)


def _selection(ctx: Context, baseline: MultiSequenceExam, probs, n_slices: str) -> dict:
    pool = ctx.rc.adaptation.pool
    scores = score_slices(mask_probabilities(probs, baseline.mask), baseline.mask, pool, baseline.label)
    sel = select_slices(scores, n_slices)
    return {
        "exam_id": baseline.exam_id,
        "pool": pool,
        "n_slices": n_slices,
        "ranking": [{"slice_idx": s.slice_idx, "mean_prob": round(s.mean_prob, 6)} for s in scores],
        "selected": sel.slices,
        "truncated": sel.truncated,
    }


def _n_slices(ctx: Context) -> str:
    return str(ctx.args.n_slices or ctx.rc.adaptation.n_slices)


def cmd_select_slices(ctx: Context) -> int:
    patient = _need(ctx.args.patient, "--patient")
    baseline = ctx.exam(ctx.study(patient)["baseline"])
    _, _, probs = _base_probs(ctx, baseline)
    sel = _selection(ctx, baseline, probs, _n_slices(ctx))
    _write_json(ctx.output / patient / "slices.json", sel)
    print(json.dumps({"selected": sel["selected"], "truncated": sel["truncated"]}))
    return 0


def cmd_finetune(ctx: Context) -> int:
    rc = ctx.rc
    patient = _need(ctx.args.patient, "--patient")
    weighting = ctx.args.weighting or rc.adaptation.weighting
    baseline = ctx.exam(ctx.study(patient)["baseline"])
    base, cfg, probs = _base_probs(ctx, baseline)
    sel = _selection(ctx, baseline, probs, _n_slices(ctx))
    weights = ex.baseline_weights(probs, baseline, weighting, rc.postprocess.task)
    out_dir = ctx.output / patient
    _write_json(out_dir / "slices.json", sel)
    if weights is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_volume(Volume3D(weights.astype(np.float32), baseline.spacing), out_dir / f"weights_{weighting}.nii.gz")
    trace: list = []
    iters = ctx.args.iterations if ctx.args.iterations is not None else rc.training.finetune_iterations
    params = finetune(base, cfg, rc.training, baseline, sel["selected"], weights, trace=trace, iterations=int(iters))
    ck = ctx.patient_checkpoint(patient)
    save_checkpoint(params, cfg, ck)
    _write_jsonl(ck.with_name(f"{patient}_finetune.jsonl"), trace)
    print(f"{ck} frozen_sha256={ex.frozen_digest(params)}")
    return 0


def _model_checkpoint(ctx: Context, patient: str) -> tuple:
    if ctx.args.checkpoint:
        path = Path(ctx.args.checkpoint)
        return path.stem, path
    model = ctx.args.model
    return model, ctx.base_checkpoint() if model == "base" else ctx.patient_checkpoint(patient)


def _target_exam(ctx: Context, patient: Optional[str]) -> tuple:
    if ctx.args.exam:
        exam = normalize_exam(load_exam(ctx.args.exam))
        return exam, patient or exam.patient_id or exam.exam_id
    patient = _need(patient, "--patient or --exam")
    return ctx.exam(ctx.study(patient)["followup"]), patient


def cmd_predict(ctx: Context) -> int:
    exam, patient = _target_exam(ctx, ctx.args.patient)
    model, ck = _model_checkpoint(ctx, patient)
    params, cfg = ctx.load(ck)
    task = ctx.args.task or ctx.rc.postprocess.task
    probs = predict_volume(params, cfg, exam, tile=ctx.rc.inference.tile)
    mask, objs = postprocess_pipeline(probs, exam.mask, task, exam.spacing)
    out = ctx.output / patient / model
    out.mkdir(parents=True, exist_ok=True)
    write_volume(Volume3D(mask_probabilities(probs, exam.mask).astype(np.float32), exam.spacing), out / "probs.nii.gz")
    write_volume(Volume3D(mask, exam.spacing), out / f"mask_{task}.nii.gz")
    _write_json(out / f"objects_{task}.json", {"exam_id": exam.exam_id, "task": task,
                                                "objects": [o.to_dict() for o in objs.objects]})
    print(f"{out}: {len(objs)} objects")
    return 0


def cmd_evaluate(ctx: Context) -> int:
    task = ctx.args.task or ctx.rc.postprocess.task
    entries = ctx.cohort()["test"]
    if ctx.args.patient:
        entries = [ctx.study(ctx.args.patient)]
    rows = []
    for entry in entries:
        pid = entry["id"]
        truth = load_exam(ctx.data / entry["followup"])
        pdir = ctx.output / pid
        found = sorted(p for p in pdir.glob(f"*/mask_{task}.nii.gz")) if pdir.exists() else []
        if not found:
            raise DataError(f"no {task} prediction for exam {truth.exam_id!r} under {pdir}")
        for f in found:
            pred = load_volume(f).data
            row = evaluate_case(pred, truth.label, truth.spacing)
            row.update(patient_id=pid, model=f.parent.name, uncertainty=None)
            unc = f.parent / "uncertainty.json"
            if unc.exists():
                row["uncertainty"] = json.loads(unc.read_text())["summary"]
            rows.append(row)
    ctx.output.mkdir(parents=True, exist_ok=True)
    ex.write_csv(rows, ctx.output / f"report_{task}.csv")
    _write_json(ctx.output / f"report_{task}.json", rows)
    for r in rows:
        print(",".join(ex.fmt(r.get(c)) for c in ex.CSV_COLUMNS))
    return 0


def cmd_uncertainty(ctx: Context) -> int:
    exam, patient = _target_exam(ctx, ctx.args.patient)
    model, ck = _model_checkpoint(ctx, patient)
    params, cfg = ctx.load(ck)
    unc = ctx.rc.uncertainty
    task = ctx.args.task or unc.task
    rep = mc_dropout_uncertainty(params, cfg, exam, unc.n_repeats, task, seed=ctx.rc.training.seed)
    out = ctx.output / patient / model
    out.mkdir(parents=True, exist_ok=True)
    write_volume(Volume3D(rep.sd, exam.spacing), out / "sd.nii.gz")
    _write_json(out / "uncertainty.json", {"exam_id": exam.exam_id, "task": task,
                                           "n_repeats": rep.n_repeats, "summary": rep.summary})
    print(f"{patient} {model} {task} summary={ex.fmt(rep.summary)}")
    return 0


# ----------------------------------------------------------------- reproduce


def experiment_variants(name: str) -> tuple:
    """(variants, models needing uncertainty, postprocess task) for a named experiment."""
    V = ex.Variant
    if name == "iterations_sweep":
        return [ex.BASE] + [V(f"iter_{n}", iterations=n) for n in (50, 100, 500, 1000)], [], None
    if name == "slices_sweep":
        return [ex.BASE] + [V(f"slices_{n}", n_slices=n) for n in ("1", "2", "all")], [], "segmentation"
    if name == "weighting":
        return [ex.BASE] + [V(f"weight_{w}", weighting=w) for w in WEIGHTINGS], [], None
    if name == "uncertainty":
        return [ex.BASE, V("ft_all")], ["base", "ft_all"], None
    if name == "directional":
        return ([ex.BASE, V("ft_all"), V("ft_1", n_slices="1"), V("ft_2", n_slices="2")],
                ["base", "ft_all"], None)
    raise UsageError(f"unknown experiment {name!r}; choose from {list(EXPERIMENTS)}")


def _base_key(rc: RunConfig) -> str:
    d = {k: rc.to_dict()[k] for k in ("network", "training", "phantom", "cohort")}
    d["training"] = {k: v for k, v in d["training"].items() if k != "finetune_iterations"}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def cached_base(rc: RunConfig, cache: Optional[Path], train, trace: Optional[list] = None):
    """Base network for ``rc``, re-used from ``cache`` when an identical run was stored there."""
    path = cache / f"base_{_base_key(rc)}.ckpt" if cache else None
    if path is not None and path.exists():
        params, _ = load_checkpoint(path)
        log.info("re-using base checkpoint %s", path)
        return params
    params = train_base(rc.network, rc.training, train, trace=trace)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, rc.network, path)
    return params


def _patient_job(job):
    import torch

    torch.set_num_threads(1)
    base, rc, study, variants, unc_for = job
    return ex.run_patient(base, rc, study, variants, True, unc_for)


def reproduce(rc: RunConfig, name: str, out_dir: Path, cache: Optional[Path] = None, jobs: int = 1):
    variants, unc_for, task = experiment_variants(name)
    if task is not None:
        rc.postprocess.task = task
    train, test = ex.phantom_cohort(rc)
    trace: list = []
    base = cached_base(rc, cache, train, trace)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_patient_job, [(base, rc, s, variants, unc_for) for s in test]))
    else:
        results = [ex.run_patient(base, rc, s, variants, True, unc_for) for s in test]
    run = ex.CohortRun(base, results, trace)
    out_dir.mkdir(parents=True, exist_ok=True)
    ex.write_csv(run.rows, out_dir / f"{name}.csv")
    summary = ex.summarize(run, [v.name for v in variants])
    cols = ["model"] + [f"{k}_{s}" for k in ("tpr", "fpc", "f1", "dice", "avd", "hd95", "uncertainty")
                        for s in ("mean", "median")]
    ex.write_csv(summary, out_dir / f"{name}_summary.csv", columns=cols)
    return run, summary


def cmd_reproduce(ctx: Context) -> int:
    name = _need(ctx.args.experiment, "--experiment")
    _, summary = reproduce(ctx.rc, name, ctx.output, ctx.checkpoints, ctx.args.jobs)
    for row in summary:
        print(row["model"], " ".join(f"{k}={ex.fmt(v)}" for k, v in row.items() if k.endswith("_mean")))
    return 0


# ----------------------------------------------------------------- parser

COMMANDS = {
    "gen-phantom": cmd_gen_phantom,
    "train-base": cmd_train_base,
    "select-slices": cmd_select_slices,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "uncertainty": cmd_uncertainty,
    "reproduce": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="followup-ft", description="Patient-specific fine-tuning of a dual-pathway dilated CNN.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML or JSON run configuration (desk preset when omitted)")
        s.add_argument("--seed", type=int, help="override training and phantom seeds")
        if name in ("select-slices", "finetune", "predict", "evaluate", "uncertainty"):
            s.add_argument("--patient", help="test patient id, e.g. test000")
        if name in ("train-base", "finetune"):
            s.add_argument("--iterations", type=int, help="number of optimiser steps")
        if name in ("select-slices", "finetune"):
            s.add_argument("--n-slices", choices=N_SLICES, help="slices offered for fine-tuning")
        if name == "finetune":
            s.add_argument("--weighting", choices=WEIGHTINGS, help="pixel weighting scheme")
        if name in ("predict", "evaluate", "uncertainty"):
            s.add_argument("--task", choices=TASKS)
        if name in ("predict", "uncertainty"):
            s.add_argument("--model", choices=MODELS, default="finetuned")
            s.add_argument("--checkpoint", help="explicit checkpoint path (overrides --model)")
            s.add_argument("--exam", help="explicit exam manifest (defaults to the patient's follow-up)")
        if name == "reproduce":
            s.add_argument("--experiment", choices=EXPERIMENTS, required=True)
            s.add_argument("--jobs", type=int, default=1, help="worker processes over patients")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](Context(args))
    except FollowupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return FollowupError.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
