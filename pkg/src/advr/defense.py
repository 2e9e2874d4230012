"""Defenses: spatial smoothing of spectrograms and adversarial training.

Smoothing replaces each spectrogram cell with a neighborhood statistic
(median, mean, or gaussian-weighted mean) over an odd window with reflect
padding. The mean and gaussian paths accumulate window offsets in a fixed
row-major order so results are bit-reproducible against a scalar-loop oracle.

Adversarial training follows a two-phase schedule: T1 clean epochs, then up to
T2 epochs where every batch is replaced by adversarial examples regenerated
against the current parameters before each update. Optimizer state (momentum
velocity, global epoch counter) threads through both phases, and epoch
shuffles are keyed by (seed, global epoch), so a clean run of T1+T2 epochs and
a T1+T2(eps=0) run consume identical randomness and produce identical bits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attack import AttackConfig, pgd_attack
from .autodiff import loss_and_backward
from .errors import GraphError, TrainingError
from .features import Spectrogram
from .models import Model, predict
from .util import parallel_map

FILTER_KINDS = ("median", "mean", "gaussian")
OPTIMIZERS = ("momentum", "sgd")


# ---------------------------------------------------------------------------
# spatial smoothing


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    window: int = 3
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise TrainingError(f"filter kind must be one of {FILTER_KINDS}, "
                                f"got '{self.kind}'")
        if self.window < 1 or self.window % 2 == 0:
            raise TrainingError(f"window must be an odd integer >= 1, got {self.window}")
        if not self.sigma > 0:
            raise TrainingError(f"sigma must be positive, got {self.sigma}")


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    """Truncated gaussian weights, renormalized to sum to 1."""
    ax = np.arange(window, dtype=np.float64) - window // 2
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def apply_filter(spec: FilterSpec, s):
    """Smooth a spectrogram; accepts Spectrogram or a 2-D array, returns the same."""
    wrap = isinstance(s, Spectrogram)
    values = s.values if wrap else np.asarray(s)
    if values.ndim != 2:
        raise TrainingError(f"filter expects a 2-D spectrogram, got shape {values.shape}")
    w = spec.window
    if w > values.shape[0] or w > values.shape[1]:
        raise TrainingError(f"window {w} exceeds spectrogram dims {values.shape}")
    values = np.asarray(values, dtype=np.float64)
    f, b = values.shape
    pad = w // 2
    xp = np.pad(values, pad, mode="symmetric") if pad else values
    if spec.kind == "median":
        win = sliding_window_view(xp, (w, w))
        out = np.median(win, axis=(2, 3))
    elif spec.kind == "mean":
        acc = np.zeros((f, b), dtype=np.float64)
        for di in range(w):          # fixed row-major accumulation order
            for dj in range(w):
                acc += xp[di:di + f, dj:dj + b]
        out = acc / (w * w)
    else:
        k = gaussian_kernel(w, spec.sigma)
        acc = np.zeros((f, b), dtype=np.float64)
        for di in range(w):
            for dj in range(w):
                acc += k[di, dj] * xp[di:di + f, dj:dj + b]
        out = acc
    return Spectrogram(values=out) if wrap else out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    t1: int = 10
    t2: int = 0
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "momentum"
    momentum: float = 0.9
    attack: AttackConfig = AttackConfig()
    seed: int = 0
    convergence_tol: float = 1e-3  # 0 disables the early stop
    mix_clean: float = 0.0         # phase-2 weight on the clean-batch gradient

    def __post_init__(self):
        if self.t1 < 0 or self.t2 < 0:
            raise TrainingError(f"epoch counts must be >= 0, got t1={self.t1} t2={self.t2}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise TrainingError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"optimizer must be one of {OPTIMIZERS}, "
                                f"got '{self.optimizer}'")
        if not 0 <= self.momentum < 1:
            raise TrainingError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.mix_clean <= 1:
            raise TrainingError(f"mix_clean must be in [0, 1], got {self.mix_clean}")
        if self.convergence_tol < 0:
            raise TrainingError(f"convergence_tol must be >= 0, got {self.convergence_tol}")


@dataclass
class TrainState:
    """Optimizer state threaded across the clean and adversarial phases."""

    velocity: dict[str, np.ndarray]
    epoch: int = 0

    @classmethod
    def fresh(cls, model: Model) -> "TrainState":
        return cls(velocity={k: np.zeros_like(p) for k, p in model.graph.params.items()})


@dataclass
class EpochMetrics:
    epoch: int
    phase: str  # "clean" or "adversarial"
    mean_loss: float
    clean_acc: float
    adv_acc: Optional[float] = None
    batch_param_digests: list[str] = field(default_factory=list)


def param_digest(model: Model) -> str:
    h = hashlib.sha256()
    for name, p in model.graph.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def _dataset_arrays(dataset) -> tuple[list[np.ndarray], list[int]]:
    if not dataset:
        raise TrainingError("dataset is empty")
    xs, ys = [], []
    for x, y in dataset:
        v = x.values if isinstance(x, Spectrogram) else np.asarray(x, dtype=np.float64)
        xs.append(v)
        ys.append(int(y))
    if any(y not in (0, 1) for y in ys):
        raise TrainingError("labels must be 0 or 1")
    return xs, ys


def _batch_gradient(model: Model, xs, ys, epoch: int, batch: int):
    """Mean loss and mean parameter gradient over one batch."""
    graph = model.graph
    total: dict[str, np.ndarray] = {}
    loss_sum = 0.0
    for x, y in zip(xs, ys):
        try:
            loss, gset = loss_and_backward(graph, x[None, :, :], y)
        except GraphError as exc:
            raise TrainingError(f"loss non-finite at epoch {epoch} batch {batch}: "
                                f"{exc}") from exc
        if not np.isfinite(loss):
            raise TrainingError(f"loss non-finite at epoch {epoch} batch {batch}")
        loss_sum += loss
        for name, g in gset.by_parameter.items():
            if name in total:
                total[name] += g
            else:
                total[name] = g.copy()
    inv = np.float32(1.0 / len(xs))
    for name in total:
        total[name] *= inv
    return loss_sum / len(xs), total


def _sgd_step(model: Model, grads, cfg: TrainConfig, state: TrainState) -> None:
    lr = np.float32(cfg.learning_rate)
    mu = np.float32(cfg.momentum)
    for name, p in model.graph.params.items():
        g = grads[name]
        if cfg.optimizer == "momentum":
            v = state.velocity[name]
            v *= mu
            v -= lr * g
            p += v
        else:
            p -= lr * g


def _run_epoch(model: Model, xs, ys, cfg: TrainConfig, state: TrainState,
               adversarial: bool) -> EpochMetrics:
    epoch = state.epoch
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(xs))
    batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    loss_sum = 0.0
    adv_total = 0
    adv_correct = 0
    digests: list[str] = []
    for bi, batch in enumerate(batches):
        bx = [xs[i] for i in batch]
        by = [ys[i] for i in batch]
        if adversarial:
            digests.append(param_digest(model))
            results = parallel_map(
                lambda item: pgd_attack(model, item[0], item[1], cfg.attack),
                list(zip(bx, by)))
            adv_total += len(results)
            adv_correct += sum(1 for r in results if not r.success)
            ax = [r.perturbed for r in results]
            loss, grads = _batch_gradient(model, ax, by, epoch, bi)
            if cfg.mix_clean > 0:
                _, clean_grads = _batch_gradient(model, bx, by, epoch, bi)
                lam = np.float32(cfg.mix_clean)
                for name in grads:
                    grads[name] = (1 - lam) * grads[name] + lam * clean_grads[name]
        else:
            loss, grads = _batch_gradient(model, bx, by, epoch, bi)
        loss_sum += loss
        _sgd_step(model, grads, cfg, state)
    state.epoch += 1
    try:
        clean_acc = sum(1 for x, y in zip(xs, ys) if predict(model, x)[0] == y) / len(xs)
    except GraphError as exc:
        raise TrainingError(f"model diverged by end of epoch {epoch}: {exc}") from exc
    return EpochMetrics(
        epoch=epoch,
        phase="adversarial" if adversarial else "clean",
        mean_loss=loss_sum / len(batches),
        clean_acc=clean_acc,
        adv_acc=(adv_correct / adv_total) if adversarial else None,
        batch_param_digests=digests,
    )


def train(model: Model, dataset, cfg: TrainConfig,
          state: TrainState | None = None) -> tuple[list[EpochMetrics], TrainState]:
    """Phase 1: cfg.t1 epochs of mini-batch SGD on clean examples."""
    xs, ys = _dataset_arrays(dataset)
    if state is None:
        state = TrainState.fresh(model)
    metrics = [_run_epoch(model, xs, ys, cfg, state, adversarial=False)
               for _ in range(cfg.t1)]
    model.meta["epochs_trained"] = model.meta.get("epochs_trained", 0) + cfg.t1
    model.meta["train_seed"] = cfg.seed
    return metrics, state


def adversarial_train(model: Model, dataset, cfg: TrainConfig,
                      state: TrainState | None = None) -> tuple[list[EpochMetrics], TrainState]:
    """Phase 2: up to cfg.t2 adversarial epochs with per-batch regeneration.

    Stops early when the relative change of the epoch-mean adversarial loss
    stays under cfg.convergence_tol for two consecutive epochs.
    """
    xs, ys = _dataset_arrays(dataset)
    if state is None:
        state = TrainState.fresh(model)
    metrics: list[EpochMetrics] = []
    calm = 0
    prev_loss: float | None = None
    for _ in range(cfg.t2):
        m = _run_epoch(model, xs, ys, cfg, state, adversarial=True)
        metrics.append(m)
        if prev_loss is not None and cfg.convergence_tol > 0:
            rel = abs(m.mean_loss - prev_loss) / max(abs(prev_loss), 1e-12)
            calm = calm + 1 if rel < cfg.convergence_tol else 0
            if calm >= 2:
                break
        prev_loss = m.mean_loss
    model.meta["epochs_trained"] = model.meta.get("epochs_trained", 0) + len(metrics)
    model.meta["train_seed"] = cfg.seed
    return metrics, state


def fit(model: Model, dataset, cfg: TrainConfig) -> list[EpochMetrics]:
    """Full schedule: t1 clean epochs then t2 adversarial epochs, shared optimizer state."""
    m1, state = train(model, dataset, cfg)
    m2, _ = adversarial_train(model, dataset, cfg, state)
    return m1 + m2


# ---------------------------------------------------------------------------
# metrics log: one line per epoch


def write_metrics_log(path, metrics: list[EpochMetrics], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        if not append:
            fh.write("# epoch phase clean_acc adv_acc mean_loss\n")
        for m in metrics:
            adv = f"{m.adv_acc:.6f}" if m.adv_acc is not None else "-"
            fh.write(f"{m.epoch} {m.phase} {m.clean_acc:.6f} {adv} {m.mean_loss:.6f}\n")


def read_metrics_log(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise TrainingError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
            out.append({"epoch": int(parts[0]), "phase": parts[1],
                        "clean_acc": float(parts[2]),
                        "adv_acc": None if parts[3] == "-" else float(parts[3]),
                        "mean_loss": float(parts[4])})
    return out
