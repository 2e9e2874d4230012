"""Experiment harness: dataset manifests, evaluation grids, and full runs.

A manifest names every example once (id, label, split, provenance).  Examples
come either from WAV files listed in a protocol file or from the synthetic
generator, in which case the manifest stores the (seed, index) key needed to
regenerate the clip bit-for-bit.

An evaluation grid scores one model over {clean, adversarial} examples crossed
with {no filter, median, mean, gaussian}.  Adversarial inputs are computed once
per grid and shared across filter columns.  `run_experiment` chains the stages
of a full study: build data, train, evaluate, adversarially train, re-evaluate,
and write every artifact deterministically (no timestamps, no absolute paths).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, pgd_attack
from .config import RunConfig, config_digest, load_config
from .defense import (FilterSpec, adversarial_train, apply_filter, train,
                      write_metrics_log)
from .errors import AdvrError, HarnessError, ProtocolError
from .features import (FeatureConfig, load_wav, log_power_spectrogram,
                       synth_clip_by_index)
from .models import Model, build_model, predict, save_checkpoint
from .util import parallel_map

SPLITS = ("train", "dev")
LABEL_NAMES = {0: "bonafide", 1: "spoof"}
NAME_LABELS = {"bonafide": 0, "spoof": 1}

# Grid rows in presentation order: (condition, filter) -> table label.
GRID_ROWS: tuple[tuple[str, str, str], ...] = (
    ("clean", "none", "Normal examples"),
    ("adversarial", "none", "Adversarial examples"),
    ("adversarial", "median", "Adversarial examples + median filter"),
    ("adversarial", "mean", "Adversarial examples + mean filter"),
    ("adversarial", "gaussian", "Adversarial examples + Gaussian filter"),
    ("clean", "median", "Normal examples + median filter"),
    ("clean", "mean", "Normal examples + mean filter"),
    ("clean", "gaussian", "Normal examples + Gaussian filter"),
)


@dataclass(frozen=True)
class ManifestEntry:
    """One example: stable id, binary label, split, and how to obtain audio."""
    example_id: str
    label: int
    split: str
    speaker_id: str
    system_id: str
    source: str    # "wav:<path>" or "synth:<seed>:<index>"

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise HarnessError(f"label for '{self.example_id}' must be 0 or 1, "
                               f"got {self.label}")
        if self.split not in SPLITS:
            raise HarnessError(f"split for '{self.example_id}' must be one of "
                               f"{SPLITS}, got '{self.split}'")
        if not (self.source.startswith("wav:") or self.source.startswith("synth:")):
            raise HarnessError(f"source for '{self.example_id}' must start with "
                               f"'wav:' or 'synth:', got '{self.source}'")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if e.example_id in seen:
                raise HarnessError(f"duplicate example id '{e.example_id}'")
            seen.add(e.example_id)
        for split in sorted({e.split for e in self.entries}):
            labels = {e.label for e in self.entries if e.split == split}
            if labels != {0, 1}:
                raise HarnessError(f"split '{split}' must contain both classes, "
                                   f"found labels {sorted(labels)}")

    def split_entries(self, split: str) -> tuple[ManifestEntry, ...]:
        if split not in SPLITS:
            raise HarnessError(f"unknown split '{split}'")
        return tuple(e for e in self.entries if e.split == split)


def build_synthetic_manifest(seed: int, n_train: int, n_dev: int) -> DatasetManifest:
    """Balanced two-class manifest; index keys the per-clip rng stream."""
    if n_train < 1 or n_dev < 1:
        raise HarnessError(f"need at least one example per class per split, "
                           f"got n_train={n_train} n_dev={n_dev}")
    entries: list[ManifestEntry] = []
    index = 0
    for split, count in (("train", n_train), ("dev", n_dev)):
        for _ in range(count):
            for label in (0, 1):
                entries.append(ManifestEntry(
                    example_id=f"SYN_{split.upper()}_{index:04d}",
                    label=label, split=split,
                    speaker_id="SYNTH", system_id=f"synth{label}",
                    source=f"synth:{seed}:{index}"))
                index += 1
    return DatasetManifest(tuple(entries))


def parse_protocol(path: str | Path, split: str = "train",
                   audio_dir: str | Path | None = None) -> tuple[ManifestEntry, ...]:
    """Read a protocol file: one 'speaker utt_id - system_id key' line per example.

    key is 'bonafide' (label 0) or 'spoof' (label 1).  Audio is expected at
    <audio_dir>/<utt_id>.wav; audio_dir defaults to the protocol's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ProtocolError(f"protocol file not found: {path.name}")
    base = Path(audio_dir) if audio_dir is not None else path.parent
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ProtocolError(f"{path.name} line {lineno}: expected 5 fields "
                                    f"(speaker utt - system key), got {len(parts)}")
            speaker, utt, _, system, key = parts
            if key not in NAME_LABELS:
                raise ProtocolError(f"{path.name} line {lineno}: key must be "
                                    f"'bonafide' or 'spoof', got '{key}'")
            entries.append(ManifestEntry(
                example_id=utt, label=NAME_LABELS[key], split=split,
                speaker_id=speaker, system_id=system,
                source=f"wav:{base / (utt + '.wav')}"))
    if not entries:
        raise ProtocolError(f"{path.name}: no entries")
    return tuple(entries)


def emit_protocol(path: str | Path, entries: tuple[ManifestEntry, ...]) -> None:
    """Write entries back out in protocol format (audio paths are implied)."""
    lines = [f"{e.speaker_id} {e.example_id} - {e.system_id} {LABEL_NAMES[e.label]}"
             for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


_MANIFEST_HEADER = "# example_id\tlabel\tsplit\tspeaker_id\tsystem_id\tsource"


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    lines = [_MANIFEST_HEADER]
    for e in manifest.entries:
        lines.append(f"{e.example_id}\t{e.label}\t{e.split}\t"
                     f"{e.speaker_id}\t{e.system_id}\t{e.source}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise HarnessError(f"{path.name} line {lineno}: expected 6 "
                                   f"tab-separated fields, got {len(parts)}")
            try:
                label = int(parts[1])
            except ValueError:
                raise HarnessError(f"{path.name} line {lineno}: label must be an "
                                   f"integer, got '{parts[1]}'") from None
            entries.append(ManifestEntry(parts[0], label, parts[2],
                                         parts[3], parts[4], parts[5]))
    return DatasetManifest(tuple(entries))


@dataclass(frozen=True)
class Example:
    """A materialized example: features plus its manifest identity."""
    example_id: str
    values: np.ndarray   # (frames, bins) float64 log-power spectrogram
    label: int


def materialize(manifest: DatasetManifest, split: str,
                cfg: FeatureConfig) -> tuple[Example, ...]:
    """Load or regenerate every example in one split as spectrograms."""
    out: list[Example] = []
    for e in manifest.split_entries(split):
        try:
            if e.source.startswith("synth:"):
                _, seed_s, index_s = e.source.split(":")
                clip = synth_clip_by_index(int(seed_s), int(index_s), e.label, cfg)
            else:
                clip = load_wav(e.source[len("wav:"):])
                if clip.sample_rate != cfg.sample_rate:
                    raise HarnessError(
                        f"sample rate {clip.sample_rate} != configured "
                        f"{cfg.sample_rate}")
            values = log_power_spectrogram(clip, cfg).values
        except AdvrError as exc:
            raise HarnessError(f"example '{e.example_id}': {exc}") from exc
        out.append(Example(e.example_id, values, e.label))
    return tuple(out)


@dataclass(frozen=True)
class EvalCell:
    """Accuracy of one (condition, filter) grid cell with per-example records."""
    condition: str
    filter_name: str
    records: tuple[tuple[str, int, int], ...]   # (example_id, label, prediction)

    @property
    def total(self) -> int:
        return len(self.records)

    @property
    def correct(self) -> int:
        return sum(1 for _, y, p in self.records if p == y)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def class_accuracy(self, label: int) -> float:
        rows = [(y, p) for _, y, p in self.records if y == label]
        if not rows:
            return float("nan")
        return sum(1 for y, p in rows if p == y) / len(rows)


@dataclass(frozen=True)
class EvalReport:
    """All grid cells for one model, plus enough context to reproduce them."""
    kind: str                                 # "pre_defense" or "post_defense"
    eval_split: str
    examples: int
    config_digest: str
    cells: dict[tuple[str, str], EvalCell] = field(compare=False)

    def cell(self, condition: str, filter_name: str) -> EvalCell:
        try:
            return self.cells[(condition, filter_name)]
        except KeyError:
            raise HarnessError(f"no grid cell ({condition}, {filter_name})") from None

    def accuracy(self, condition: str, filter_name: str) -> float:
        return self.cell(condition, filter_name).accuracy


def _score_cell(model: Model, condition: str, filter_name: str,
                examples: tuple[Example, ...], inputs: list[np.ndarray],
                spec: FilterSpec | None) -> EvalCell:
    def one(pair: tuple[Example, np.ndarray]) -> tuple[str, int, int]:
        ex, values = pair
        try:
            if spec is not None:
                values = apply_filter(spec, values)
            return (ex.example_id, ex.label, predict(model, values)[0])
        except AdvrError as exc:
            raise HarnessError(f"example '{ex.example_id}' "
                               f"({condition}, {filter_name}): {exc}") from exc
    records = parallel_map(one, list(zip(examples, inputs)))
    return EvalCell(condition, filter_name, tuple(records))


def _attack_inputs(model: Model, examples: tuple[Example, ...],
                   attack_cfg: AttackConfig) -> list[np.ndarray]:
    def one(ex: Example) -> np.ndarray:
        try:
            return pgd_attack(model, ex.values, ex.label, attack_cfg).perturbed
        except AdvrError as exc:
            raise HarnessError(f"example '{ex.example_id}' (attack): {exc}") from exc
    return parallel_map(one, list(examples))


def evaluate(model: Model, examples: tuple[Example, ...],
             attack_cfg: AttackConfig | None = None,
             filter_spec: FilterSpec | None = None) -> EvalCell:
    """Score one cell: optionally attack, optionally filter, then predict."""
    if not examples:
        raise HarnessError("cannot evaluate an empty example list")
    condition = "clean" if attack_cfg is None else "adversarial"
    if attack_cfg is None:
        inputs = [ex.values for ex in examples]
    else:
        inputs = _attack_inputs(model, examples, attack_cfg)
    name = "none" if filter_spec is None else filter_spec.kind
    return _score_cell(model, condition, name, examples, inputs, filter_spec)


def build_report(model: Model, examples: tuple[Example, ...],
                 attack_cfg: AttackConfig, filters: dict[str, FilterSpec],
                 kind: str, eval_split: str, digest: str) -> EvalReport:
    """Score the full grid.  Adversarial inputs are generated once and shared."""
    if not examples:
        raise HarnessError("cannot evaluate an empty example list")
    missing = [n for n in ("median", "mean", "gaussian") if n not in filters]
    if missing:
        raise HarnessError(f"missing filter specs: {missing}")
    clean = [ex.values for ex in examples]
    attacked = _attack_inputs(model, examples, attack_cfg)
    cells: dict[tuple[str, str], EvalCell] = {}
    for condition, inputs in (("clean", clean), ("adversarial", attacked)):
        cells[(condition, "none")] = _score_cell(
            model, condition, "none", examples, inputs, None)
        for name in ("median", "mean", "gaussian"):
            cells[(condition, name)] = _score_cell(
                model, condition, name, examples, inputs, filters[name])
    return EvalReport(kind=kind, eval_split=eval_split, examples=len(examples),
                      config_digest=digest, cells=cells)


def _fmt_acc(value: float) -> str:
    return "     nan" if np.isnan(value) else f"{value:8.6f}"


def format_report_text(report: EvalReport) -> str:
    """Human-readable accuracy table, one grid row per line."""
    width = max(len(label) for _, _, label in GRID_ROWS)
    lines = [
        f"Testing accuracy ({report.kind.replace('_', '-')})",
        f"eval split: {report.eval_split}   examples: {report.examples}",
        f"config: {report.config_digest}",
        "",
        f"{'condition':<{width}}   overall  bonafide     spoof",
    ]
    for condition, filter_name, label in GRID_ROWS:
        cell = report.cell(condition, filter_name)
        lines.append(f"{label:<{width}}  {_fmt_acc(cell.accuracy)}  "
                     f"{_fmt_acc(cell.class_accuracy(0))}  "
                     f"{_fmt_acc(cell.class_accuracy(1))}")
    return "\n".join(lines) + "\n"


def write_report_kv(path: str | Path, report: EvalReport) -> None:
    """Machine-readable key=value dump of every cell statistic."""
    lines = [
        f"config_digest={report.config_digest}",
        f"eval_split={report.eval_split}",
        f"examples={report.examples}",
        f"kind={report.kind}",
    ]
    for condition, filter_name, _ in GRID_ROWS:
        cell = report.cell(condition, filter_name)
        key = f"{condition}.{filter_name}"
        lines.append(f"accuracy.{key}={cell.accuracy:.6f}")
        lines.append(f"class0.{key}={cell.class_accuracy(0):.6f}")
        lines.append(f"class1.{key}={cell.class_accuracy(1):.6f}")
        lines.append(f"correct.{key}={cell.correct}")
        lines.append(f"total.{key}={cell.total}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_report_kv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    path = Path(path)
    for lineno, raw in enumerate(path.read_text(encoding="ascii").splitlines(),
                                 start=1):
        if not raw.strip():
            continue
        if "=" not in raw:
            raise HarnessError(f"{path.name} line {lineno}: expected key=value")
        key, _, value = raw.partition("=")
        out[key] = value
    return out


_DETAILS_HEADER = "# example_id\tcondition\tfilter\tlabel\tprediction"


def write_report_details(path: str | Path, report: EvalReport) -> None:
    """Per-example predictions for every cell, enough to recount the report."""
    lines = [_DETAILS_HEADER]
    for condition, filter_name, _ in GRID_ROWS:
        for example_id, y, p in report.cell(condition, filter_name).records:
            lines.append(f"{example_id}\t{condition}\t{filter_name}\t{y}\t{p}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report_details(path: str | Path) -> list[tuple[str, str, str, int, int]]:
    path = Path(path)
    rows: list[tuple[str, str, str, int, int]] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                 start=1):
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 5:
            raise HarnessError(f"{path.name} line {lineno}: expected 5 fields")
        rows.append((parts[0], parts[1], parts[2], int(parts[3]), int(parts[4])))
    return rows


def verify_report_files(kv_path: str | Path, details_path: str | Path) -> None:
    """Recount details and check every aggregate in the kv file matches."""
    kv = read_report_kv(kv_path)
    rows = read_report_details(details_path)
    for condition, filter_name, _ in GRID_ROWS:
        key = f"{condition}.{filter_name}"
        cell_rows = [(y, p) for _, c, f, y, p in rows
                     if c == condition and f == filter_name]
        total = len(cell_rows)
        correct = sum(1 for y, p in cell_rows if p == y)
        if int(kv[f"total.{key}"]) != total or int(kv[f"correct.{key}"]) != correct:
            raise HarnessError(f"cell {key}: counts disagree with details "
                               f"(kv {kv[f'correct.{key}']}/{kv[f'total.{key}']}, "
                               f"recount {correct}/{total})")
        if kv[f"accuracy.{key}"] != f"{correct / total:.6f}":
            raise HarnessError(f"cell {key}: accuracy disagrees with recount")


@dataclass(frozen=True)
class RunResult:
    out_dir: Path
    report_before: EvalReport
    report_after: EvalReport
    config_digest: str


def _stage(name: str):
    class _Ctx:
        def __enter__(self) -> None:
            return None

        def __exit__(self, exc_type, exc, tb) -> bool:
            if exc is not None and isinstance(exc, AdvrError):
                raise HarnessError(f"stage '{name}' failed: {exc}") from exc
            return False
    return _Ctx()


def build_manifest(cfg: RunConfig,
                   dataset_seed: int | None = None) -> DatasetManifest:
    """Manifest described by [dataset]; dataset_seed overrides the synth seed."""
    d = cfg.get("dataset", "kind")
    if d == "synthetic":
        seed = (dataset_seed if dataset_seed is not None
                else int(cfg.get("dataset", "seed")))
        return build_synthetic_manifest(seed,
                                        int(cfg.get("dataset", "n_train")),
                                        int(cfg.get("dataset", "n_dev")))
    if d == "protocol":
        train_path = cfg.get("dataset", "protocol_train")
        dev_path = cfg.get("dataset", "protocol_dev")
        audio_dir = cfg.get("dataset", "audio_dir")
        if train_path == "-" or dev_path == "-":
            raise HarnessError("protocol datasets need protocol_train and "
                               "protocol_dev paths")
        base = None if audio_dir == "-" else audio_dir
        entries = (parse_protocol(train_path, "train", base)
                   + parse_protocol(dev_path, "dev", base))
        return DatasetManifest(entries)
    raise HarnessError(f"unknown dataset kind '{d}'")


def run_experiment(config: RunConfig | str | Path, out_dir: str | Path) -> RunResult:
    """Full study: train, evaluate, adversarially train, re-evaluate.

    Writes to out_dir: manifest.tsv, checkpoint_pretrained.ckpt,
    checkpoint_advtrained.ckpt, report_before/.txt/.kv/.details (same for
    report_after), train_log.txt, run.log.  Every artifact is deterministic:
    rerunning with the same config yields byte-identical files.
    """
    if not isinstance(config, RunConfig):
        config = load_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(config)
    feats = config.feature_config()
    spec = config.model_spec()
    attack_cfg = config.attack_config()
    filters = config.filter_specs()
    tcfg = config.train_config()
    log_lines: list[str] = []

    with _stage("dataset"):
        manifest = build_manifest(config)
        save_manifest(out / "manifest.tsv", manifest)
        train_examples = materialize(manifest, "train", feats)
        eval_split = config.get("dataset", "eval_split")
        eval_examples = (train_examples if eval_split == "train"
                         else materialize(manifest, "dev", feats))
        log_lines.append(f"stage dataset: ok train={len(train_examples)} "
                         f"eval={len(eval_examples)} split={eval_split}")

    train_pairs = [(ex.values, ex.label) for ex in train_examples]

    with _stage("train"):
        model = build_model(spec)
        model.meta["config_digest"] = digest
        metrics, state = train(model, train_pairs, tcfg)
        save_checkpoint(out / "checkpoint_pretrained.ckpt", model)
        write_metrics_log(out / "train_log.txt", metrics)
        final_acc = metrics[-1].clean_acc if metrics else float("nan")
        log_lines.append(f"stage train: ok epochs={len(metrics)} "
                         f"clean_acc={final_acc:.6f}")

    with _stage("evaluate_before"):
        before = build_report(model, eval_examples, attack_cfg, filters,
                              "pre_defense", eval_split, digest)
        (out / "report_before.txt").write_text(format_report_text(before),
                                               encoding="ascii")
        write_report_kv(out / "report_before.kv", before)
        write_report_details(out / "report_before.details", before)
        verify_report_files(out / "report_before.kv", out / "report_before.details")
        log_lines.append(f"stage evaluate_before: ok "
                         f"clean={before.accuracy('clean', 'none'):.6f} "
                         f"adversarial={before.accuracy('adversarial', 'none'):.6f}")

    with _stage("advtrain"):
        adv_metrics, state = adversarial_train(model, train_pairs, tcfg, state)
        save_checkpoint(out / "checkpoint_advtrained.ckpt", model)
        write_metrics_log(out / "train_log.txt", metrics + adv_metrics)
        log_lines.append(f"stage advtrain: ok epochs={len(adv_metrics)}")

    with _stage("evaluate_after"):
        after = build_report(model, eval_examples, attack_cfg, filters,
                             "post_defense", eval_split, digest)
        (out / "report_after.txt").write_text(format_report_text(after),
                                              encoding="ascii")
        write_report_kv(out / "report_after.kv", after)
        write_report_details(out / "report_after.details", after)
        verify_report_files(out / "report_after.kv", out / "report_after.details")
        log_lines.append(f"stage evaluate_after: ok "
                         f"clean={after.accuracy('clean', 'none'):.6f} "
                         f"adversarial={after.accuracy('adversarial', 'none'):.6f}")

    log_lines.append(f"run: ok config={digest}")
    (out / "run.log").write_text("\n".join(log_lines) + "\n", encoding="ascii")
    return RunResult(out, before, after, digest)
