"""HTTP service exposing the attack, defense, and experiment pipeline.

Run it with uvicorn (`advr serve`) or mount it in-process through httpx's
ASGITransport, which is what the CLI does by default.  Every domain error
maps to HTTP 400 with the error class and message in `detail`.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..attack import attack_batch, write_attack_results
from ..config import RunConfig, config_digest, parse_config_text
from ..defense import adversarial_train, train, write_metrics_log
from ..errors import AdvrError, HarnessError
from ..features import Spectrogram, save_spectrogram, save_wav, synth_clip_by_index
from ..harness import (build_manifest, build_report, emit_protocol, evaluate,
                       format_report_text, materialize, run_experiment,
                       save_manifest, verify_report_files, write_report_details,
                       write_report_kv)
from ..models import build_model, load_checkpoint, save_checkpoint
from . import schemas as s

app = FastAPI(title="advr", version=__version__,
              description="Targeted adversarial attacks and defenses for "
                          "audio anti-spoofing classifiers.")


@app.exception_handler(AdvrError)
async def advr_error_handler(_: Request, exc: AdvrError) -> JSONResponse:
    return JSONResponse(status_code=400,
                        content={"detail": f"{type(exc).__name__}: {exc}"})


def _config(text: str) -> RunConfig:
    return parse_config_text(text)


def _eval_examples(cfg: RunConfig, dataset_seed: int | None = None):
    manifest = build_manifest(cfg, dataset_seed)
    split = cfg.get("dataset", "eval_split")
    return materialize(manifest, split, cfg.feature_config())


def _load_model(cfg: RunConfig, checkpoint: str):
    return load_checkpoint(checkpoint, expected_spec=cfg.model_spec())


@app.get("/health", response_model=s.HealthResponse)
def health() -> s.HealthResponse:
    return s.HealthResponse(status="ok", version=__version__)


@app.post("/synth", response_model=s.SynthResponse)
def synth(req: s.SynthRequest) -> s.SynthResponse:
    """Write the synthetic corpus as WAV files plus protocol and manifest files."""
    cfg = _config(req.config_text)
    if cfg.get("dataset", "kind") != "synthetic":
        raise HarnessError("synth requires [dataset] kind = synthetic")
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = cfg.feature_config()
    manifest = build_manifest(cfg)
    wav_files = 0
    for e in manifest.entries:
        _, seed_s, idx = e.source.split(":")
        clip = synth_clip_by_index(int(seed_s), int(idx), e.label, feats)
        save_wav(out / f"{e.example_id}.wav", clip)
        wav_files += 1
    emit_protocol(out / "protocol_train.txt", manifest.split_entries("train"))
    emit_protocol(out / "protocol_dev.txt", manifest.split_entries("dev"))
    save_manifest(out / "manifest.tsv", manifest)
    return s.SynthResponse(out_dir=str(out), examples=len(manifest.entries),
                           wav_files=wav_files,
                           protocol_train=str(out / "protocol_train.txt"),
                           protocol_dev=str(out / "protocol_dev.txt"),
                           manifest=str(out / "manifest.tsv"))


@app.post("/train", response_model=s.TrainResponse)
def train_endpoint(req: s.TrainRequest) -> s.TrainResponse:
    """Train a fresh model for t1 clean epochs and checkpoint it."""
    cfg = _config(req.config_text)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(cfg)
    examples = materialize(manifest, "train", cfg.feature_config())
    model = build_model(cfg.model_spec())
    model.meta["config_digest"] = config_digest(cfg)
    metrics, _ = train(model, [(ex.values, ex.label) for ex in examples],
                       cfg.train_config())
    ckpt = out / "checkpoint_pretrained.ckpt"
    log = out / "train_log.txt"
    save_checkpoint(ckpt, model)
    write_metrics_log(log, metrics)
    return s.TrainResponse(checkpoint=str(ckpt), log=str(log),
                           epochs=len(metrics),
                           final_clean_accuracy=metrics[-1].clean_acc,
                           final_mean_loss=metrics[-1].mean_loss,
                           config_digest=config_digest(cfg))


@app.post("/attack", response_model=s.AttackResponse)
def attack_endpoint(req: s.AttackRequest) -> s.AttackResponse:
    """Attack the evaluation split and persist perturbed spectrograms."""
    cfg = _config(req.config_text)
    model = _load_model(cfg, req.checkpoint)
    examples = _eval_examples(cfg, req.seed)
    acfg = cfg.attack_config()
    if req.epsilon is not None:
        acfg = replace(acfg, epsilon=req.epsilon)
    if req.alpha is not None:
        acfg = replace(acfg, alpha=req.alpha)
    if req.iterations is not None:
        acfg = replace(acfg, iterations=req.iterations)
    out = Path(req.out_dir)
    (out / "adversarial").mkdir(parents=True, exist_ok=True)
    results = attack_batch(model, [(ex.example_id, ex.values, ex.label)
                                   for ex in examples], acfg)
    for ex, r in zip(examples, results):
        save_spectrogram(out / "adversarial" / f"{ex.example_id}.advs",
                         Spectrogram(r.perturbed))
    results_path = out / "attack_results.txt"
    write_attack_results(results_path, [ex.example_id for ex in examples], results)
    successes = sum(1 for r in results if r.success)
    return s.AttackResponse(results=str(results_path),
                            spectrogram_dir=str(out / "adversarial"),
                            examples=len(results), successes=successes,
                            success_rate=successes / len(results))


@app.post("/advtrain", response_model=s.AdvTrainResponse)
def advtrain_endpoint(req: s.AdvTrainRequest) -> s.AdvTrainResponse:
    """Continue a checkpoint: t1 clean epochs, then t2 adversarial epochs."""
    cfg = _config(req.config_text)
    model = _load_model(cfg, req.checkpoint_in)
    manifest = build_manifest(cfg)
    examples = materialize(manifest, "train", cfg.feature_config())
    pairs = [(ex.values, ex.label) for ex in examples]
    tcfg = cfg.train_config()
    acfg = tcfg.attack
    if req.epsilon is not None:
        acfg = replace(acfg, epsilon=req.epsilon)
    if req.alpha is not None:
        acfg = replace(acfg, alpha=req.alpha)
    if req.iterations is not None:
        acfg = replace(acfg, iterations=req.iterations)
    updates = {"attack": acfg}
    if req.t1 is not None:
        updates["t1"] = req.t1
    if req.t2 is not None:
        updates["t2"] = req.t2
    if req.batch_size is not None:
        updates["batch_size"] = req.batch_size
    if req.learning_rate is not None:
        updates["learning_rate"] = req.learning_rate
    if req.seed is not None:
        updates["seed"] = req.seed
    tcfg = replace(tcfg, **updates)
    clean_metrics, state = train(model, pairs, tcfg)
    adv_metrics, _ = adversarial_train(model, pairs, tcfg, state)
    save_checkpoint(req.checkpoint_out, model)
    if req.log is not None:
        all_metrics = clean_metrics + adv_metrics
        write_metrics_log(req.log, all_metrics,
                          append=Path(req.log).exists())
    last = (adv_metrics or clean_metrics)[-1] if (adv_metrics or clean_metrics) else None
    return s.AdvTrainResponse(
        checkpoint=req.checkpoint_out, log=req.log,
        clean_epochs=len(clean_metrics), adversarial_epochs=len(adv_metrics),
        final_clean_accuracy=last.clean_acc if last else float("nan"),
        final_adversarial_accuracy=last.adv_acc if last else None)


@app.post("/evaluate", response_model=s.EvaluateResponse)
def evaluate_endpoint(req: s.EvaluateRequest) -> s.EvaluateResponse:
    """Score one (condition, filter) cell on the evaluation split."""
    cfg = _config(req.config_text)
    model = _load_model(cfg, req.checkpoint)
    examples = _eval_examples(cfg)
    attack_cfg = cfg.attack_config() if req.attack else None
    spec = None if req.filter == "none" else cfg.filter_specs()[req.filter]
    cell = evaluate(model, examples, attack_cfg=attack_cfg, filter_spec=spec)
    return s.EvaluateResponse(condition=cell.condition, filter=req.filter,
                              accuracy=cell.accuracy, correct=cell.correct,
                              total=cell.total,
                              class0_accuracy=cell.class_accuracy(0),
                              class1_accuracy=cell.class_accuracy(1))


@app.post("/report", response_model=s.ReportResponse)
def report_endpoint(req: s.ReportRequest) -> s.ReportResponse:
    """Score the full grid and write the table, key-value, and details files."""
    cfg = _config(req.config_text)
    model = _load_model(cfg, req.checkpoint)
    examples = _eval_examples(cfg)
    report = build_report(model, examples, cfg.attack_config(),
                          cfg.filter_specs(), req.kind,
                          cfg.get("dataset", "eval_split"), config_digest(cfg))
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = "report_before" if req.kind == "pre_defense" else "report_after"
    text_path = out / f"{stem}.txt"
    kv_path = out / f"{stem}.kv"
    details_path = out / f"{stem}.details"
    text_path.write_text(format_report_text(report), encoding="ascii")
    write_report_kv(kv_path, report)
    write_report_details(details_path, report)
    verify_report_files(kv_path, details_path)
    accuracies = {f"{c}.{f}": report.accuracy(c, f) for c, f in report.cells}
    return s.ReportResponse(kind=req.kind, eval_split=report.eval_split,
                            examples=report.examples, accuracies=accuracies,
                            text_path=str(text_path), kv_path=str(kv_path),
                            details_path=str(details_path))


@app.post("/run", response_model=s.RunResponse)
def run_endpoint(req: s.RunRequest) -> s.RunResponse:
    """Full pipeline: train, evaluate, adversarially train, re-evaluate."""
    cfg = _config(req.config_text)
    result = run_experiment(cfg, req.out_dir)
    summary = {}
    for name, report in (("before", result.report_before),
                         ("after", result.report_after)):
        summary[name] = {f"{c}.{f}": report.accuracy(c, f)
                         for c, f in report.cells}
    artifacts = sorted(p.name for p in Path(req.out_dir).iterdir())
    return s.RunResponse(config_digest=result.config_digest,
                         out_dir=str(result.out_dir), artifacts=artifacts,
                         before=summary["before"], after=summary["after"])
