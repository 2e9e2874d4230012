"""Static computation graphs with reverse-mode differentiation.

A Graph is an ordered list of primitive nodes over named parameter arrays.
Nodes reference earlier nodes (or the literal name "input") so the list order
is already topological. Shapes are fixed at build time; forward checks every
node output against its declared shape and for non-finite values, naming the
offending node in the error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import GraphError
from . import ops

INPUT = "input"

_SHAPE_ONLY_OPS = {"relu", "sigmoid"}


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    param_names: tuple[str, ...] = ()
    attrs: tuple[tuple[str, object], ...] = ()
    out_shape: tuple[int, ...] = ()

    def attr(self, key: str):
        for k, v in self.attrs:
            if k == key:
                return v
        raise KeyError(key)


@dataclass
class GradientSet:
    """Gradients of the scalar loss for every parameter and for the input."""

    by_parameter: dict[str, np.ndarray]
    by_input: np.ndarray


class Graph:
    def __init__(self, input_shape: tuple[int, ...], nodes: list[Node],
                 params: dict[str, np.ndarray]):
        if not nodes:
            raise GraphError("graph has no nodes")
        self.input_shape = tuple(input_shape)
        self.nodes = list(nodes)
        self.params = params
        self.output = nodes[-1].name
        self.shapes: dict[str, tuple[int, ...]] = {INPUT: self.input_shape}
        seen: set[str] = {INPUT}
        for node in self.nodes:
            if node.name in seen:
                raise GraphError(f"duplicate node name '{node.name}'")
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"node '{node.name}' reads '{src}' before it is defined")
            for pname in node.param_names:
                if pname not in params:
                    raise GraphError(f"node '{node.name}' references missing parameter '{pname}'")
            seen.add(node.name)
            self.shapes[node.name] = tuple(node.out_shape)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[self.output]


def _check(node_name: str, value: np.ndarray, expected: tuple[int, ...]) -> None:
    if value.shape != expected:
        raise GraphError(f"node '{node_name}' produced shape {value.shape}, "
                         f"declared {expected}")
    if not np.all(np.isfinite(value)):
        raise GraphError(f"node '{node_name}' produced non-finite values")


def _run_forward(graph: Graph, x: np.ndarray) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    if tuple(x.shape) != graph.input_shape:
        raise GraphError(f"input shape {x.shape} does not match declared {graph.input_shape}")
    x = np.asarray(x, dtype=graph.dtype)
    if not np.all(np.isfinite(x)):
        raise GraphError("node 'input' produced non-finite values")
    values: dict[str, np.ndarray] = {INPUT: x}
    ctxs: dict[str, object] = {}
    p = graph.params
    # fp warnings are silenced: overflow surfaces as a named-node error instead
    with np.errstate(over="ignore", invalid="ignore"):
        for node in graph.nodes:
            ins = [values[s] for s in node.inputs]
            if node.op == "conv2d":
                w, b = (p[n] for n in node.param_names)
                y, ctx = ops.conv2d_forward(ins[0], w, b)
            elif node.op == "maxpool2d":
                y, ctx = ops.maxpool2d_forward(ins[0])
            elif node.op == "adaptive_avgpool":
                y, ctx = ops.adaptive_avgpool_forward(ins[0], node.attr("grid"))
            elif node.op == "dense":
                w, b = (p[n] for n in node.param_names)
                y, ctx = ops.dense_forward(ins[0], w, b)
            elif node.op == "relu":
                y, ctx = ops.relu_forward(ins[0])
            elif node.op == "sigmoid":
                y, ctx = ops.sigmoid_forward(ins[0])
            elif node.op == "add":
                y, ctx = ops.add_forward(ins[0], ins[1])
            elif node.op == "scale":
                y, ctx = ops.scale_forward(ins[0], ins[1])
            else:
                raise GraphError(f"node '{node.name}' has unknown op '{node.op}'")
            _check(node.name, y, node.out_shape)
            values[node.name] = y
            ctxs[node.name] = ctx
    return values, ctxs


def forward(graph: Graph, x: np.ndarray) -> np.ndarray:
    """Evaluate the graph on one example and return the final node's output.

    For classifier graphs the output is the pre-softmax score vector.
    """
    values, _ = _run_forward(graph, x)
    return values[graph.output]


def loss_and_backward(graph: Graph, x: np.ndarray, label: int,
                      need_param_grads: bool = True) -> tuple[float, GradientSet]:
    """Softmax cross-entropy of the graph output against `label`, with gradients.

    Returns the scalar loss and a GradientSet holding d(loss)/d(parameter) for
    every parameter plus d(loss)/d(input). `need_param_grads=False` skips the
    parameter gradients (the attack loop only needs the input gradient).
    """
    values, ctxs = _run_forward(graph, x)
    loss, dscores = ops.softmax_cross_entropy(values[graph.output], label)
    grads: dict[str, np.ndarray] = {graph.output: dscores.astype(graph.dtype)}
    pgrads: dict[str, np.ndarray] = {}

    def feed(name: str, g: np.ndarray) -> None:
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    for node in reversed(graph.nodes):
        dy = grads.pop(node.name, None)
        if dy is None:
            continue  # dead branch: no consumer reached the loss
        if not np.all(np.isfinite(dy)):
            raise GraphError(f"node '{node.name}' received non-finite gradients")
        ctx = ctxs[node.name]
        if node.op == "conv2d":
            dx, dw, db = ops.conv2d_backward(dy, ctx, need_param_grads)
            if need_param_grads:
                pgrads[node.param_names[0]] = dw
                pgrads[node.param_names[1]] = db
            feed(node.inputs[0], dx)
        elif node.op == "maxpool2d":
            feed(node.inputs[0], ops.maxpool2d_backward(dy, ctx))
        elif node.op == "adaptive_avgpool":
            feed(node.inputs[0], ops.adaptive_avgpool_backward(dy, ctx))
        elif node.op == "dense":
            dx, dw, db = ops.dense_backward(dy, ctx, need_param_grads)
            if need_param_grads:
                pgrads[node.param_names[0]] = dw
                pgrads[node.param_names[1]] = db
            feed(node.inputs[0], dx)
        elif node.op == "relu":
            feed(node.inputs[0], ops.relu_backward(dy, ctx))
        elif node.op == "sigmoid":
            feed(node.inputs[0], ops.sigmoid_backward(dy, ctx))
        elif node.op == "add":
            da, db_ = ops.add_backward(dy, ctx)
            feed(node.inputs[0], da)
            feed(node.inputs[1], db_)
        elif node.op == "scale":
            dx, dgate = ops.scale_backward(dy, ctx)
            feed(node.inputs[0], dx)
            feed(node.inputs[1], dgate)
    dinput = grads.get(INPUT)
    if dinput is None:
        dinput = np.zeros(graph.input_shape, dtype=graph.dtype)
    if need_param_grads:
        for node in graph.nodes:
            for pname in node.param_names:
                if pname not in pgrads:  # parameter on a dead branch
                    pgrads[pname] = np.zeros_like(graph.params[pname])
    return loss, GradientSet(by_parameter=pgrads, by_input=dinput)


def input_gradient(graph: Graph, x: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(input) only; cheaper inner loop for attacks."""
    loss, gset = loss_and_backward(graph, x, label, need_param_grads=False)
    return loss, gset.by_input


class GraphBuilder:
    """Assembles a Graph with static shape checking and seeded initialization.

    Weights use He-style uniform init, bound sqrt(6 / fan_in); biases start at
    zero. Parameters are drawn in insertion order from one generator so a
    (builder calls, seed) pair is fully deterministic.
    """

    def __init__(self, input_shape: tuple[int, ...], seed: int = 0,
                 dtype: np.dtype = np.float32):
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self._nodes: list[Node] = []
        self._params: dict[str, np.ndarray] = {}
        self._shapes: dict[str, tuple[int, ...]] = {INPUT: self.input_shape}

    def _shape(self, name: str) -> tuple[int, ...]:
        if name not in self._shapes:
            raise GraphError(f"unknown node '{name}'")
        return self._shapes[name]

    def _add(self, node: Node) -> str:
        if node.name in self._shapes:
            raise GraphError(f"duplicate node name '{node.name}'")
        self._nodes.append(node)
        self._shapes[node.name] = node.out_shape
        return node.name

    def _init_weight(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = float(np.sqrt(6.0 / fan_in))
        self._params[name] = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def _init_bias(self, name: str, size: int) -> None:
        self._params[name] = np.zeros(size, dtype=self.dtype)

    def conv2d(self, name: str, src: str, out_channels: int) -> str:
        in_shape = self._shape(src)
        out_shape = ops.conv2d_shape(in_shape, out_channels)
        in_ch = in_shape[0]
        self._init_weight(f"{name}.w", (out_channels, in_ch, ops.KERNEL, ops.KERNEL),
                          fan_in=in_ch * ops.KERNEL * ops.KERNEL)
        self._init_bias(f"{name}.b", out_channels)
        return self._add(Node(name, "conv2d", (src,), (f"{name}.w", f"{name}.b"),
                              out_shape=out_shape))

    def maxpool2d(self, name: str, src: str) -> str:
        out_shape = ops.maxpool2d_shape(self._shape(src))
        return self._add(Node(name, "maxpool2d", (src,), out_shape=out_shape))

    def adaptive_avgpool(self, name: str, src: str, grid: tuple[int, int]) -> str:
        out_shape = ops.adaptive_avgpool_shape(self._shape(src), grid)
        return self._add(Node(name, "adaptive_avgpool", (src,),
                              attrs=(("grid", tuple(grid)),), out_shape=out_shape))

    def dense(self, name: str, src: str, out_features: int) -> str:
        in_features = int(np.prod(self._shape(src)))
        self._init_weight(f"{name}.w", (out_features, in_features), fan_in=in_features)
        self._init_bias(f"{name}.b", out_features)
        return self._add(Node(name, "dense", (src,), (f"{name}.w", f"{name}.b"),
                              out_shape=(out_features,)))

    def relu(self, name: str, src: str) -> str:
        return self._add(Node(name, "relu", (src,), out_shape=self._shape(src)))

    def sigmoid(self, name: str, src: str) -> str:
        return self._add(Node(name, "sigmoid", (src,), out_shape=self._shape(src)))

    def add(self, name: str, a: str, b: str) -> str:
        sa, sb = self._shape(a), self._shape(b)
        if sa != sb:
            raise GraphError(f"add '{name}' input shapes differ: {sa} vs {sb}")
        return self._add(Node(name, "add", (a, b), out_shape=sa))

    def scale(self, name: str, src: str, gate: str) -> str:
        ss, sg = self._shape(src), self._shape(gate)
        if len(ss) != 3 or sg != (ss[0],):
            raise GraphError(f"scale '{name}' needs a (C,H,W) tensor and a (C,) gate, "
                             f"got {ss} and {sg}")
        return self._add(Node(name, "scale", (src, gate), out_shape=ss))

    def build(self) -> Graph:
        return Graph(self.input_shape, self._nodes, self._params)
