"""Request and response bodies for the HTTP service.

Every request carries the run configuration as literal text (`config_text`)
so clients never depend on server-side config files.  Artifact paths in
requests and responses refer to the server's filesystem; with the default
in-process transport that is the caller's own filesystem.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict

FilterName = Literal["none", "median", "mean", "gaussian"]
ReportKind = Literal["pre_defense", "post_defense"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthResponse(_Strict):
    status: str
    version: str


class SynthRequest(_Strict):
    config_text: str
    out_dir: str


class SynthResponse(_Strict):
    out_dir: str
    examples: int
    wav_files: int
    protocol_train: str
    protocol_dev: str
    manifest: str


class TrainRequest(_Strict):
    config_text: str
    out_dir: str


class TrainResponse(_Strict):
    checkpoint: str
    log: str
    epochs: int
    final_clean_accuracy: float
    final_mean_loss: float
    config_digest: str


class AttackRequest(_Strict):
    config_text: str
    checkpoint: str
    out_dir: str
    epsilon: Optional[float] = None
    alpha: Optional[float] = None
    iterations: Optional[int] = None
    seed: Optional[int] = None          # overrides the dataset seed


class AttackResponse(_Strict):
    results: str
    spectrogram_dir: str
    examples: int
    successes: int
    success_rate: float


class AdvTrainRequest(_Strict):
    config_text: str
    checkpoint_in: str
    checkpoint_out: str
    log: Optional[str] = None
    t1: Optional[int] = None
    t2: Optional[int] = None
    batch_size: Optional[int] = None
    learning_rate: Optional[float] = None
    epsilon: Optional[float] = None
    alpha: Optional[float] = None
    iterations: Optional[int] = None
    seed: Optional[int] = None          # overrides the training seed


class AdvTrainResponse(_Strict):
    checkpoint: str
    log: Optional[str]
    clean_epochs: int
    adversarial_epochs: int
    final_clean_accuracy: float
    final_adversarial_accuracy: Optional[float]


class EvaluateRequest(_Strict):
    config_text: str
    checkpoint: str
    attack: bool = False
    filter: FilterName = "none"


class EvaluateResponse(_Strict):
    condition: str
    filter: FilterName
    accuracy: float
    correct: int
    total: int
    class0_accuracy: float
    class1_accuracy: float


class ReportRequest(_Strict):
    config_text: str
    checkpoint: str
    out_dir: str
    kind: ReportKind = "pre_defense"


class ReportResponse(_Strict):
    kind: ReportKind
    eval_split: str
    examples: int
    accuracies: dict[str, float]        # "<condition>.<filter>" -> accuracy
    text_path: str
    kv_path: str
    details_path: str


class RunRequest(_Strict):
    config_text: str
    out_dir: str


class RunResponse(_Strict):
    config_digest: str
    out_dir: str
    artifacts: list[str]
    before: dict[str, float]
    after: dict[str, float]
