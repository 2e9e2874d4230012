"""Classifier definitions and checkpoint persistence.

Two named architectures plus a `custom` escape hatch for small test nets:

* vgg_like: 5 conv blocks (64/128/256/256/512... channels scaled by the width
  multiplier), 2x2 max-pool after each block, adaptive average pool to 7x7,
  two hidden FC layers, and a final FC scoring layer.
* se_resnet: 4 residual stages (16/32/64/128 channels scaled), one block per
  stage with two 3x3 convs and a squeeze-excitation gate, 2x2 max-pool between
  stages, global average pool, FC scoring layer.

Checkpoints are self-describing: a header (magic, version, sha256 of the model
spec text), the model spec and training metadata as key=value text, then one
shape-prefixed little-endian float32 block per parameter.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import INPUT, Graph, GraphBuilder, forward
from .errors import CheckpointError, GraphError
from .features import Spectrogram

CHECKPOINT_MAGIC = b"ADVR"
CHECKPOINT_VERSION = 1

_KINDS = ("vgg_like", "se_resnet", "custom")

_VGG_BLOCKS = ((1, 64), (1, 128), (2, 256), (2, 512), (2, 512))
_VGG_FC = 4096
_SE_STAGES = (16, 32, 64, 128)


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "vgg_like"
    input_shape: tuple[int, int, int] = (1, 600, 257)
    class_count: int = 2
    width_multiplier: float = 1.0
    seed: int = 0
    se_reduction: int = 16
    custom_conv: tuple[tuple[int, ...], ...] = ()
    custom_fc: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise GraphError(f"unknown model kind '{self.kind}'")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise GraphError(f"input_shape must be 3 positive dims, got {self.input_shape}")
        if self.class_count < 2:
            raise GraphError(f"class_count must be >= 2, got {self.class_count}")
        if not self.width_multiplier > 0:
            raise GraphError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if self.se_reduction < 1:
            raise GraphError(f"se_reduction must be >= 1, got {self.se_reduction}")


@dataclass
class Model:
    spec: ModelSpec
    graph: Graph
    meta: dict = field(default_factory=dict)


def _width(channels: int, multiplier: float) -> int:
    return max(1, int(round(channels * multiplier)))


def _build_vgg(spec: ModelSpec, b: GraphBuilder) -> None:
    t = INPUT
    for bi, (n_convs, channels) in enumerate(_VGG_BLOCKS, start=1):
        ch = _width(channels, spec.width_multiplier)
        for ci in range(1, n_convs + 1):
            t = b.conv2d(f"conv{bi}_{ci}", t, out_channels=ch)
            t = b.relu(f"relu{bi}_{ci}", t)
        t = b.maxpool2d(f"pool{bi}", t)
    t = b.adaptive_avgpool("avgpool", t, grid=(7, 7))
    fc = max(2, int(round(_VGG_FC * spec.width_multiplier)))
    t = b.dense("fc1", t, out_features=fc)
    t = b.relu("fc1_relu", t)
    t = b.dense("fc2", t, out_features=fc)
    t = b.relu("fc2_relu", t)
    b.dense("fc3", t, out_features=spec.class_count)


def _se_gate(b: GraphBuilder, name: str, src: str, channels: int, reduction: int) -> str:
    g = b.adaptive_avgpool(f"{name}_squeeze", src, grid=(1, 1))
    g = b.dense(f"{name}_reduce", g, out_features=max(1, channels // reduction))
    g = b.relu(f"{name}_relu", g)
    g = b.dense(f"{name}_expand", g, out_features=channels)
    g = b.sigmoid(f"{name}_gate", g)
    return b.scale(f"{name}_scale", src, g)


def _build_se_resnet(spec: ModelSpec, b: GraphBuilder) -> None:
    t = INPUT
    in_ch = spec.input_shape[0]
    for si, channels in enumerate(_SE_STAGES, start=1):
        ch = _width(channels, spec.width_multiplier)
        trunk = b.conv2d(f"s{si}_conv_a", t, out_channels=ch)
        trunk = b.relu(f"s{si}_relu_a", trunk)
        trunk = b.conv2d(f"s{si}_conv_b", trunk, out_channels=ch)
        trunk = _se_gate(b, f"s{si}_se", trunk, ch, spec.se_reduction)
        skip = t if in_ch == ch else b.conv2d(f"s{si}_skip", t, out_channels=ch)
        t = b.add(f"s{si}_add", trunk, skip)
        t = b.relu(f"s{si}_relu_out", t)
        t = b.maxpool2d(f"s{si}_pool", t)
        in_ch = ch
    t = b.adaptive_avgpool("gap", t, grid=(1, 1))
    b.dense("fc", t, out_features=spec.class_count)


def _build_custom(spec: ModelSpec, b: GraphBuilder) -> None:
    t = INPUT
    for bi, block in enumerate(spec.custom_conv, start=1):
        for ci, channels in enumerate(block, start=1):
            t = b.conv2d(f"conv{bi}_{ci}", t, out_channels=channels)
            t = b.relu(f"relu{bi}_{ci}", t)
        t = b.maxpool2d(f"pool{bi}", t)
    for fi, width in enumerate(spec.custom_fc, start=1):
        t = b.dense(f"fc{fi}", t, out_features=width)
        t = b.relu(f"fc{fi}_relu", t)
    b.dense("fc_out", t, out_features=spec.class_count)


def build_model(spec: ModelSpec) -> Model:
    b = GraphBuilder(spec.input_shape, seed=spec.seed, dtype=np.float32)
    if spec.kind == "vgg_like":
        _build_vgg(spec, b)
    elif spec.kind == "se_resnet":
        _build_se_resnet(spec, b)
    else:
        _build_custom(spec, b)
    return Model(spec=spec, graph=b.build(),
                 meta={"epochs_trained": 0, "train_seed": -1, "config_digest": "-"})


def _as_input(x) -> np.ndarray:
    if isinstance(x, Spectrogram):
        return x.values[None, :, :]
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None, :, :]
    return x


def predict(model: Model, x) -> tuple[int, np.ndarray]:
    """Label and pre-softmax scores for one spectrogram; ties pick the lower label."""
    scores = forward(model.graph, _as_input(x))
    return int(np.argmax(scores)), scores


def predict_batch(model: Model, xs) -> list[int]:
    return [predict(model, x)[0] for x in xs]


# ---------------------------------------------------------------------------
# spec <-> canonical key=value text


def _shape_str(shape) -> str:
    return "x".join(str(d) for d in shape)


def _conv_str(blocks) -> str:
    return ";".join(",".join(str(c) for c in blk) for blk in blocks) if blocks else "-"


def spec_to_text(spec: ModelSpec, meta: dict | None = None) -> str:
    pairs = {
        "spec.kind": spec.kind,
        "spec.input_shape": _shape_str(spec.input_shape),
        "spec.class_count": str(spec.class_count),
        "spec.width_multiplier": repr(float(spec.width_multiplier)),
        "spec.seed": str(spec.seed),
        "spec.se_reduction": str(spec.se_reduction),
        "spec.custom_conv": _conv_str(spec.custom_conv),
        "spec.custom_fc": ",".join(str(c) for c in spec.custom_fc) or "-",
    }
    meta = meta or {}
    pairs["meta.epochs_trained"] = str(meta.get("epochs_trained", 0))
    pairs["meta.train_seed"] = str(meta.get("train_seed", -1))
    pairs["meta.config_digest"] = str(meta.get("config_digest", "-"))
    return "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs))


def spec_from_text(text: str) -> tuple[ModelSpec, dict]:
    pairs: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        if "=" not in line:
            raise CheckpointError(f"spec text line {ln} is not key=value: {line!r}")
        k, v = line.split("=", 1)
        pairs[k] = v
    try:
        conv = pairs["spec.custom_conv"]
        fc = pairs["spec.custom_fc"]
        spec = ModelSpec(
            kind=pairs["spec.kind"],
            input_shape=tuple(int(d) for d in pairs["spec.input_shape"].split("x")),
            class_count=int(pairs["spec.class_count"]),
            width_multiplier=float(pairs["spec.width_multiplier"]),
            seed=int(pairs["spec.seed"]),
            se_reduction=int(pairs["spec.se_reduction"]),
            custom_conv=() if conv == "-" else tuple(
                tuple(int(c) for c in blk.split(",")) for blk in conv.split(";")),
            custom_fc=() if fc == "-" else tuple(int(c) for c in fc.split(",")),
        )
        meta = {
            "epochs_trained": int(pairs["meta.epochs_trained"]),
            "train_seed": int(pairs["meta.train_seed"]),
            "config_digest": pairs["meta.config_digest"],
        }
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"spec text is incomplete or malformed: {exc}") from exc
    return spec, meta


# ---------------------------------------------------------------------------
# checkpoint file format


def save_checkpoint(path, model: Model) -> None:
    text = spec_to_text(model.spec, model.meta).encode("utf-8")
    digest = hashlib.sha256(text).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(model.graph.params)))
        for name, p in model.graph.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint while reading {what}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> Model:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    r = _Reader(data, path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32, "spec digest")
    text = r.take(r.u32("spec length"), "spec text")
    if hashlib.sha256(text).digest() != digest:
        raise CheckpointError(f"{path}: spec digest mismatch (corrupted spec block)")
    spec, meta = spec_from_text(text.decode("utf-8"))
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"{path}: checkpoint spec {spec} does not match "
                              f"expected spec {expected_spec}")
    model = build_model(spec)
    model.meta = meta
    count = r.u32("parameter count")
    if count != len(model.graph.params):
        raise CheckpointError(f"{path}: {count} parameter blocks for a model "
                              f"with {len(model.graph.params)} parameters")
    for _ in range(count):
        name = r.take(r.u16("parameter name length"), "parameter name").decode("utf-8")
        if name not in model.graph.params:
            raise CheckpointError(f"{path}: unknown parameter '{name}'")
        ndim = r.u32("parameter rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "parameter shape"))
        expect = model.graph.params[name].shape
        if shape != expect:
            raise CheckpointError(f"{path}: parameter '{name}' has shape {shape}, "
                                  f"model expects {expect}")
        n = int(np.prod(shape)) if ndim else 1
        block = r.take(4 * n, f"parameter '{name}' data")
        model.graph.params[name] = np.frombuffer(block, dtype="<f4").reshape(shape).copy()
    if r.off != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.off} trailing bytes")
    return model
