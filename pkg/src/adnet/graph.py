"""Static computation graph, parameter store and reverse-mode sweep."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from . import ops
from .errors import ConstructionError, ShapeError, StateError

KINDS = {
    "input": (),
    "conv2d": ("weight", "bias"),
    "relu": (),
    "pool2d": (),
    "batchnorm": ("gamma", "beta", "moving_mean", "moving_var"),
    "flatten": (),
    "dropout": (),
    "concat": (),
    "dense": ("weight", "bias"),
    "softmax": (),
}


@dataclass
class Param:
    value: np.ndarray
    trainable: bool = True
    m: np.ndarray | None = None
    v: np.ndarray | None = None


class ParamStore:
    """Named parameter tensors with Adam moment slots for trainable entries.

    Iteration order is insertion order, which keeps serialization stable.
    """

    def __init__(self) -> None:
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self._entries:
            raise ConstructionError(f"duplicate parameter name {name!r}")
        value = np.array(value)
        slots = (np.zeros_like(value), np.zeros_like(value)) if trainable else (None, None)
        self._entries[name] = Param(value, trainable, *slots)

    def entry(self, name: str) -> Param:
        try:
            return self._entries[name]
        except KeyError:
            raise StateError(f"unknown parameter {name!r}") from None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entry(name).value

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        entry = self.entry(name)
        if value.shape != entry.value.shape:
            raise ShapeError(f"parameter {name}: shape {value.shape} vs {entry.value.shape}")
        entry.value = np.asarray(value, dtype=entry.value.dtype)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterable[tuple[str, Param]]:
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def trainable_names(self) -> list[str]:
        return [k for k, p in self._entries.items() if p.trainable]

    def update(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self[name] = value

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._entries.items():
            out._entries[name] = Param(
                p.value.copy(),
                p.trainable,
                None if p.m is None else p.m.copy(),
                None if p.v is None else p.v.copy(),
            )
        return out


@dataclass(frozen=True)
class OpNode:
    id: str
    kind: str
    attrs: Any = None
    inputs: tuple[str, ...] = ()
    param_names: tuple[str, ...] = ()


def toposort(nodes: Sequence[OpNode]) -> list[OpNode]:
    """Order nodes so each follows its inputs; independent nodes keep insertion order."""
    index = {}
    for i, node in enumerate(nodes):
        if node.id in index:
            raise ConstructionError(f"duplicate node id {node.id!r}")
        index[node.id] = i
    pending = {}
    users: dict[str, list[int]] = {n.id: [] for n in nodes}
    for i, node in enumerate(nodes):
        for src in node.inputs:
            if src not in index:
                raise ConstructionError(f"node {node.id!r} reads unknown node {src!r}")
            if src == node.id:
                raise ConstructionError(f"cycle: node {node.id!r} feeds itself")
            users[src].append(i)
        pending[i] = len(node.inputs)
    ready = [i for i, k in pending.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(nodes[i])
        for j in users[nodes[i].id]:
            pending[j] -= 1
            if pending[j] == 0:
                heapq.heappush(ready, j)
    if len(order) != len(nodes):
        stuck = sorted(nodes[i].id for i, k in pending.items() if k > 0)
        raise ConstructionError(f"cycle detected among nodes {stuck}")
    return order


class Graph:
    def __init__(
        self,
        nodes: Sequence[OpNode],
        output_id: str | None = None,
        logits_id: str | None = None,
    ) -> None:
        for node in nodes:
            if node.kind not in KINDS:
                raise ConstructionError(f"node {node.id!r}: unknown kind {node.kind!r}")
            if len(node.param_names) != len(KINDS[node.kind]):
                raise ConstructionError(
                    f"node {node.id!r}: {node.kind} owns {len(KINDS[node.kind])} parameters"
                )
        self.nodes = toposort(nodes)
        self.by_id = {n.id: n for n in self.nodes}
        inputs = [n.id for n in self.nodes if n.kind == "input"]
        if len(inputs) != 1:
            raise ConstructionError(f"graph needs exactly one input node, found {inputs}")
        self.input_id = inputs[0]
        self.output_id = output_id or self.nodes[-1].id
        if self.output_id not in self.by_id:
            raise ConstructionError(f"unknown output node {self.output_id!r}")
        self.logits_id = logits_id
        self.users: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                self.users[src].append(n.id)
        if self.users[self.output_id]:
            raise ConstructionError(f"output node {self.output_id!r} has successors")
        reached = {self.input_id}
        for n in self.nodes:
            if any(s in reached for s in n.inputs):
                reached.add(n.id)
        missing = [n.id for n in self.nodes if n.id not in reached]
        if missing:
            raise ConstructionError(f"nodes unreachable from input: {missing}")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.by_id[self.input_id].attrs)

    def param_names(self) -> list[str]:
        return [p for n in self.nodes for p in n.param_names]

    def check_params(self, params: ParamStore) -> None:
        for name in self.param_names():
            if name not in params:
                raise StateError(f"parameter {name!r} missing from store")


def _norm_state(node: OpNode, params: ParamStore) -> ops.NormState:
    g, b, mm, mv = (params[p] for p in node.param_names)
    return ops.NormState(g, b, mm, mv, epsilon=node.attrs["epsilon"], momentum=node.attrs["momentum"])


# -- static shape inference --------------------------------------------------


def infer_shapes(graph: Graph, params: ParamStore | None = None) -> dict[str, tuple[int, ...]]:
    """Per-sample output shape of every node (batch axis omitted)."""
    shapes: dict[str, tuple[int, ...]] = {}
    for node in graph.nodes:
        ins = [shapes[s] for s in node.inputs]
        try:
            shapes[node.id] = _node_shape(node, ins, params)
        except ShapeError as exc:
            raise ShapeError(f"node {node.id} ({node.kind}): {exc}") from None
    return shapes


def _node_shape(node: OpNode, ins: list[tuple[int, ...]], params: ParamStore | None) -> tuple[int, ...]:
    kind = node.kind
    if kind == "input":
        return tuple(node.attrs)
    if kind == "conv2d":
        c, h, w = ins[0]
        a: ops.ConvAttrs = node.attrs
        if a.kernel_h > h or a.kernel_w > w:
            raise ShapeError(f"kernel {a.kernel_h}x{a.kernel_w} larger than {h}x{w}")
        if params is not None:
            want = (a.out_channels, c, a.kernel_h, a.kernel_w)
            if params[node.param_names[0]].shape != want:
                raise ShapeError(f"weights {params[node.param_names[0]].shape}, expected {want}")
        return (a.out_channels, h - a.kernel_h + 1, w - a.kernel_w + 1)
    if kind == "pool2d":
        c, h, w = ins[0]
        return (c, *node.attrs.output_hw(h, w))
    if kind == "flatten":
        if len(ins[0]) != 3:
            raise ShapeError(f"flatten expects (c, h, w), got {ins[0]}")
        return (int(np.prod(ins[0])),)
    if kind == "concat":
        if any(len(s) != 1 for s in ins):
            raise ShapeError(f"concat expects flat inputs, got {ins}")
        return (sum(s[0] for s in ins),)
    if kind == "dense":
        if len(ins[0]) != 1:
            raise ShapeError(f"dense expects flat input, got {ins[0]}")
        if params is not None and params[node.param_names[0]].shape != (ins[0][0], node.attrs):
            raise ShapeError(f"weights {params[node.param_names[0]].shape} vs input width {ins[0][0]}")
        return (node.attrs,)
    if kind == "batchnorm" and params is not None:
        if params[node.param_names[0]].shape != (ins[0][0],):
            raise ShapeError(f"{ins[0][0]} channels vs gamma {params[node.param_names[0]].shape}")
    return ins[0]


# -- execution ---------------------------------------------------------------


@dataclass
class Tape:
    graph: Graph
    mode: str
    values: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray | None] = field(default_factory=dict)
    stat_updates: dict[str, np.ndarray] = field(default_factory=dict)


def forward(
    graph: Graph,
    params: ParamStore,
    x: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, Tape]:
    """Run every node in order.

    Train mode draws dropout masks from ``rng`` and uses batch statistics; the
    refreshed running statistics land in ``tape.stat_updates`` and are applied
    by the caller, so the store is never written here.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 1 + len(graph.input_shape) or tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(
            f"node {graph.input_id} (input): expected (n, {', '.join(map(str, graph.input_shape))}), "
            f"got {tuple(x.shape)}"
        )
    tape = Tape(graph, mode)
    vals = tape.values
    for node in graph.nodes:
        ins = [vals[s] for s in node.inputs]
        try:
            vals[node.id] = _run_node(node, ins, x, params, mode, rng, tape)
        except ShapeError as exc:
            raise ShapeError(f"node {node.id} ({node.kind}): {exc}") from None
    return vals[graph.output_id], tape


def _run_node(node, ins, x, params, mode, rng, tape):
    kind = node.kind
    if kind == "input":
        return x
    if kind == "conv2d":
        return ops.conv2d_forward(ins[0], params[node.param_names[0]], params[node.param_names[1]])
    if kind == "relu":
        return ops.relu(ins[0])
    if kind == "pool2d":
        return ops.pool2d_forward(ins[0], node.attrs)
    if kind == "batchnorm":
        y, new_state = ops.batchnorm_forward(ins[0], _norm_state(node, params), mode)
        if mode == "train":
            tape.stat_updates[node.param_names[2]] = new_state.moving_mean
            tape.stat_updates[node.param_names[3]] = new_state.moving_var
        return y
    if kind == "flatten":
        return ops.flatten(ins[0])
    if kind == "dropout":
        y, mask = ops.dropout(ins[0], node.attrs, mode, rng)
        tape.masks[node.id] = mask
        return y
    if kind == "concat":
        return ops.concat(ins)
    if kind == "dense":
        return ops.dense_forward(ins[0], params[node.param_names[0]], params[node.param_names[1]])
    if kind == "softmax":
        return ops.softmax(ins[0])
    raise ConstructionError(f"unknown node kind {kind!r}")


def backward(
    graph: Graph,
    params: ParamStore,
    tape: Tape,
    grad_output: np.ndarray,
    seed: str | None = None,
) -> dict[str, np.ndarray]:
    """Reverse sweep from ``seed`` (default: the output node).

    Returns one gradient per trainable parameter; fan-out gradients add up.
    """
    if tape.graph is not graph:
        raise StateError("tape was recorded on a different graph")
    if tape.mode != "train":
        raise StateError("backward needs a train-mode tape")
    seed = seed or graph.output_id
    if seed not in tape.values:
        raise StateError(f"seed node {seed!r} not on tape")
    if grad_output.shape != tape.values[seed].shape:
        raise ShapeError(f"grad_output {grad_output.shape} vs node {seed} output {tape.values[seed].shape}")

    node_grads: dict[str, np.ndarray] = {seed: grad_output}
    grads = {name: np.zeros_like(params[name]) for name in params.trainable_names()}

    def push(src: str, g: np.ndarray) -> None:
        if src in node_grads:
            node_grads[src] = node_grads[src] + g
        else:
            node_grads[src] = g

    for node in reversed(graph.nodes):
        g = node_grads.pop(node.id, None)
        if g is None or node.kind == "input":
            continue
        ins = [tape.values[s] for s in node.inputs]
        kind = node.kind
        if kind == "conv2d":
            need_x = graph.by_id[node.inputs[0]].kind != "input"
            gx, gw, gb = ops.conv2d_backward(g, ins[0], params[node.param_names[0]], need_x)
            grads[node.param_names[0]] += gw
            grads[node.param_names[1]] += gb
            if need_x:
                push(node.inputs[0], gx)
        elif kind == "relu":
            push(node.inputs[0], ops.relu_backward(g, ins[0]))
        elif kind == "pool2d":
            push(node.inputs[0], ops.pool2d_backward(g, ins[0], node.attrs))
        elif kind == "batchnorm":
            gx, gg, gb = ops.batchnorm_backward(g, ins[0], _norm_state(node, params))
            grads[node.param_names[0]] += gg
            grads[node.param_names[1]] += gb
            push(node.inputs[0], gx)
        elif kind == "flatten":
            push(node.inputs[0], g.reshape(ins[0].shape))
        elif kind == "dropout":
            push(node.inputs[0], ops.dropout_backward(g, tape.masks[node.id]))
        elif kind == "concat":
            for src, part in zip(node.inputs, ops.concat_backward(g, [a.shape[1] for a in ins])):
                push(src, part)
        elif kind == "dense":
            gx, gw, gb = ops.dense_backward(g, ins[0], params[node.param_names[0]])
            grads[node.param_names[0]] += gw
            grads[node.param_names[1]] += gb
            push(node.inputs[0], gx)
        elif kind == "softmax":
            push(node.inputs[0], ops.softmax_backward(g, tape.values[node.id]))
    return grads

