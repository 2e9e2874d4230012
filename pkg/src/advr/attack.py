"""Targeted projected-gradient attacks on spectrogram classifiers.

The attack flips a binary label: starting from the clean spectrogram it takes
signed gradient steps on the target-label loss, clips every iterate back into
the l-infinity ball around the original, and keeps a proposal only when it
strictly lowers the target loss. `mode="descend"` (default) steps against the
gradient, which is what lowering a loss requires; `mode="ascend"` steps along
it, a variant kept for comparison because the accept check then rejects the
very first proposal on any locally smooth loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import forward, input_gradient
from .errors import AttackError, GraphError
from .features import Spectrogram
from .models import Model
from .util import parallel_map

MODES = ("descend", "ascend")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 5.0
    alpha: float = 0.5
    iterations: int = 10
    mode: str = "descend"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise AttackError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise AttackError(f"alpha must be positive, got {self.alpha}")
        if self.iterations < 1:
            raise AttackError(f"iterations must be >= 1, got {self.iterations}")
        if self.mode not in MODES:
            raise AttackError(f"mode must be one of {MODES}, got '{self.mode}'")


@dataclass
class AdversarialExample:
    original: np.ndarray
    perturbed: np.ndarray
    y: int
    target: int
    final_loss: float
    success: bool
    iterations: int
    accepted: int
    loss_trace: list[float] = field(default_factory=list)


def _ball_edge(origin: np.ndarray, epsilon: float, direction: float) -> np.ndarray:
    """Largest representable values whose measured |edge - origin| <= epsilon.

    origin +/- epsilon can round to a value an ulp outside the ball; nudging
    toward the origin keeps containment exact with zero tolerance.
    """
    edge = origin + direction * epsilon
    over = np.abs(edge - origin) > epsilon
    while np.any(over):
        edge = np.where(over, np.nextafter(edge, origin), edge)
        over = np.abs(edge - origin) > epsilon
    return edge


def clip_to_ball(candidate: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    """Element-wise projection onto {v : |v - origin| <= epsilon}.

    Elements already inside the ball pass through bit-unchanged, so the
    projection is exactly idempotent; elements outside map to the ball edge.
    """
    if not epsilon >= 0:
        raise AttackError(f"epsilon must be >= 0, got {epsilon}")
    candidate = np.asarray(candidate, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if candidate.shape != origin.shape:
        raise AttackError(f"candidate shape {candidate.shape} does not match "
                          f"origin shape {origin.shape}")
    if not (np.all(np.isfinite(candidate)) and np.all(np.isfinite(origin))):
        raise AttackError("clip_to_ball requires finite inputs")
    delta = candidate - origin
    inside = np.abs(delta) <= epsilon
    if np.all(inside):
        return candidate.copy()
    hi = _ball_edge(origin, epsilon, 1.0)
    lo = _ball_edge(origin, epsilon, -1.0)
    return np.where(inside, candidate, np.where(delta > 0, hi, lo))


def _values(x) -> np.ndarray:
    v = x.values if isinstance(x, Spectrogram) else np.asarray(x)
    if v.ndim != 2:
        raise AttackError(f"expected a (frames, bins) spectrogram, got shape {v.shape}")
    return np.asarray(v, dtype=np.float64)


def pgd_attack(model: Model, x, y: int, cfg: AttackConfig) -> AdversarialExample:
    """Targeted PGD toward the flipped label (binary task: target = 1 - y)."""
    if model.spec.class_count != 2:
        raise AttackError(f"attack flips a binary label; model has "
                          f"{model.spec.class_count} classes")
    if y not in (0, 1):
        raise AttackError(f"label must be 0 or 1, got {y}")
    origin = _values(x)
    if not np.all(np.isfinite(origin)):
        raise AttackError("attack input contains non-finite values")
    target = 1 - y
    graph = model.graph
    direction = -1.0 if cfg.mode == "descend" else 1.0

    def loss_grad(v: np.ndarray):
        try:
            loss, g = input_gradient(graph, v[None, :, :], target)
        except GraphError as exc:
            raise AttackError(f"attack forward/backward failed: {exc}") from exc
        if not np.isfinite(loss):
            raise AttackError(f"non-finite target loss {loss}")
        return loss, g[0]

    current = origin.copy()
    loss_cur, grad = loss_grad(current)
    trace = [loss_cur]
    iterations = 0
    accepted = 0
    for _ in range(cfg.iterations):
        iterations += 1
        step = cfg.alpha * np.sign(grad).astype(np.float64)
        proposal = clip_to_ball(current + direction * step, origin, cfg.epsilon)
        loss_new, grad_new = loss_grad(proposal)
        if loss_new < loss_cur:
            current, loss_cur, grad = proposal, loss_new, grad_new
            accepted += 1
            trace.append(loss_cur)
        else:
            # a rejected proposal leaves the state unchanged, so every further
            # iteration would re-propose and re-reject the same point
            break
    scores = forward(graph, current[None, :, :])
    success = int(np.argmax(scores)) == target
    return AdversarialExample(original=origin, perturbed=current, y=y, target=target,
                              final_loss=loss_cur, success=success,
                              iterations=iterations, accepted=accepted,
                              loss_trace=trace)


def attack_batch(model: Model, examples, cfg: AttackConfig) -> list[AdversarialExample]:
    """Attack (example_id, spectrogram, label) triples; order is preserved."""
    items = [(x, y) for _, x, y in examples]
    return parallel_map(lambda it: pgd_attack(model, it[0], it[1], cfg), items)


def success_rate(results: list[AdversarialExample]) -> float:
    return sum(1 for r in results if r.success) / len(results) if results else 0.0


# ---------------------------------------------------------------------------
# results file: one line per example


def write_attack_results(path, ids, results) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# example_id y target success final_loss\n")
        for eid, r in zip(ids, results):
            fh.write(f"{eid} {r.y} {r.target} {int(r.success)} {r.final_loss:.6f}\n")


def read_attack_results(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise AttackError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
            out.append({"example_id": parts[0], "y": int(parts[1]),
                        "target": int(parts[2]), "success": bool(int(parts[3])),
                        "final_loss": float(parts[4])})
    return out
