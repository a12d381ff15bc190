"""The three-branch classifier: configuration, construction and parameter audit."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .graph import Graph, OpNode, ParamStore, infer_shapes
from .ops import ConvAttrs, PoolAttrs

CLASS_NAMES = ("NonDemented", "VeryMildDemented", "MildDemented")

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


@dataclass(frozen=True)
class BranchSpec:
    kernel: int
    pool_window: int
    filters: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ConfigError(f"branch kernel must be odd and >= 3, got {self.kernel}")
        if self.pool_window < 2:
            raise ConfigError(f"pool window must be >= 2, got {self.pool_window}")
        if not self.filters:
            raise ConfigError("branch needs at least one block")
        if any(b < a for a, b in zip(self.filters, self.filters[1:])):
            raise ConfigError(f"filter counts must be nondecreasing, got {self.filters}")


DEFAULT_BRANCHES = (
    BranchSpec(3, 2, (32, 64, 128, 256, 512)),
    BranchSpec(5, 3, (128, 256, 512)),
    BranchSpec(7, 5, (128, 256)),
)


def parse_scale(value: str | float | Fraction) -> Fraction:
    try:
        scale = Fraction(str(value)) if not isinstance(value, Fraction) else value
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"filter scale must be a positive rational, got {value!r}") from None
    if scale <= 0:
        raise ConfigError(f"filter scale must be positive, got {value!r}")
    return scale


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (3, 100, 100)
    branches: tuple[BranchSpec, ...] = DEFAULT_BRANCHES
    head_widths: tuple[int, ...] = (256, 128)
    num_classes: int = 3
    dropout_rate: float = 0.5
    filter_scale: Fraction = field(default=Fraction(1))

    def __post_init__(self):
        object.__setattr__(self, "filter_scale", parse_scale(self.filter_scale))
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if not self.branches:
            raise ConfigError("need at least one branch")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    def scaled_filters(self, branch: int) -> tuple[int, ...]:
        out = []
        for i, f in enumerate(self.branches[branch].filters):
            scaled = int(f * self.filter_scale)  # floor for positive values
            if scaled < 1:
                raise ConfigError(
                    f"block b{branch + 1}.block{i + 1}: filter scale {self.filter_scale} "
                    f"leaves {f} filters at zero"
                )
            out.append(scaled)
        return tuple(out)

    def canonical(self) -> dict:
        return {
            "input": list(self.input_shape),
            "branches": [
                {"kernel": b.kernel, "pool": b.pool_window, "filters": list(self.scaled_filters(i))}
                for i, b in enumerate(self.branches)
            ],
            "head": list(self.head_widths),
            "classes": self.num_classes,
            "dropout": self.dropout_rate,
            "filter_scale": str(self.filter_scale),
            "norm": {"epsilon": BN_EPSILON, "momentum": BN_MOMENTUM},
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return "sha256:" + hashlib.sha256(blob.encode()).hexdigest()


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def build_adnet(
    cfg: ModelConfig | None = None,
    rng: np.random.Generator | int | None = 0,
    dtype=np.float32,
) -> tuple[Graph, ParamStore]:
    """Construct the graph and freshly initialized parameters.

    Each branch is a chain of conv -> relu -> average pool -> batchnorm blocks
    followed by flatten and dropout. Branch outputs are concatenated and fed
    through dense/relu/dropout layers to a softmax over ``num_classes``.
    """
    cfg = cfg or ModelConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    dtype = np.dtype(dtype)
    store = ParamStore()
    nodes = [OpNode("input", "input", tuple(cfg.input_shape))]

    def param(name, value, trainable=True):
        store.add(name, np.asarray(value, dtype=dtype), trainable)
        return name

    flat_ids = []
    for bi, branch in enumerate(cfg.branches):
        prefix = f"b{bi + 1}"
        c, h, w = cfg.input_shape
        prev = "input"
        k, p = branch.kernel, branch.pool_window
        for j, f in enumerate(cfg.scaled_filters(bi), start=1):
            block = f"{prefix}.block{j}"
            if k > h or k > w:
                raise ConfigError(f"block {block}: {k}x{k} kernel exceeds remaining {h}x{w} extent")
            h, w = h - k + 1, w - k + 1
            if p > h or p > w:
                raise ConfigError(f"block {block}: {p}x{p} pool exceeds remaining {h}x{w} extent")
            h, w = (h - p) // p + 1, (w - p) // p + 1
            conv = f"{prefix}.conv{j}"
            wname = param(f"{conv}.weight", _glorot(rng, (f, c, k, k), c * k * k, f * k * k))
            bname = param(f"{conv}.bias", np.zeros(f))
            nodes.append(OpNode(conv, "conv2d", ConvAttrs(f, k, k), (prev,), (wname, bname)))
            nodes.append(OpNode(f"{prefix}.relu{j}", "relu", None, (conv,)))
            nodes.append(OpNode(f"{prefix}.pool{j}", "pool2d", PoolAttrs(p, p), (f"{prefix}.relu{j}",)))
            norm = f"{prefix}.norm{j}"
            names = (
                param(f"{norm}.gamma", np.ones(f)),
                param(f"{norm}.beta", np.zeros(f)),
                param(f"{norm}.moving_mean", np.zeros(f), trainable=False),
                param(f"{norm}.moving_var", np.ones(f), trainable=False),
            )
            attrs = {"epsilon": BN_EPSILON, "momentum": BN_MOMENTUM}
            nodes.append(OpNode(norm, "batchnorm", attrs, (f"{prefix}.pool{j}",), names))
            prev, c = norm, f
        nodes.append(OpNode(f"{prefix}.flatten", "flatten", None, (prev,)))
        nodes.append(OpNode(f"{prefix}.dropout", "dropout", cfg.dropout_rate, (f"{prefix}.flatten",)))
        flat_ids.append(f"{prefix}.dropout")
    nodes.append(OpNode("concat", "concat", None, tuple(flat_ids)))

    graph_shapes = infer_shapes(Graph(nodes))
    width = graph_shapes["concat"][0]
    prev = "concat"
    widths = list(cfg.head_widths) + [cfg.num_classes]
    for j, d in enumerate(widths, start=1):
        dense = f"head.dense{j}"
        wname = param(f"{dense}.weight", _glorot(rng, (width, d), width, d))
        bname = param(f"{dense}.bias", np.zeros(d))
        nodes.append(OpNode(dense, "dense", d, (prev,), (wname, bname)))
        prev, width = dense, d
        if j < len(widths):
            nodes.append(OpNode(f"head.relu{j}", "relu", None, (dense,)))
            nodes.append(OpNode(f"head.dropout{j}", "dropout", cfg.dropout_rate, (f"head.relu{j}",)))
            prev = f"head.dropout{j}"
    nodes.append(OpNode("softmax", "softmax", None, (prev,)))
    graph = Graph(nodes, output_id="softmax", logits_id=prev)
    graph.check_params(store)
    infer_shapes(graph, store)
    return graph, store


def param_count(store: ParamStore) -> tuple[int, int, int]:
    """``(total, trainable, non_trainable)`` scalar counts."""
    trainable = sum(p.value.size for _, p in store.items() if p.trainable)
    frozen = sum(p.value.size for _, p in store.items() if not p.trainable)
    return trainable + frozen, trainable, frozen


@dataclass(frozen=True)
class SummaryRow:
    name: str
    kind: str
    output_shape: tuple[int | None, ...]
    params: int


def summarize(graph: Graph, store: ParamStore) -> list[SummaryRow]:
    """One row per node; batch extent shown as None."""
    shapes = infer_shapes(graph, store)
    return [
        SummaryRow(
            node.id,
            node.kind,
            (None, *shapes[node.id]),
            sum(store[p].size for p in node.param_names),
        )
        for node in graph.nodes
    ]


def render_summary(rows: Sequence[SummaryRow], counts: tuple[int, int, int]) -> str:
    def fmt_shape(shape):
        return "(" + ", ".join("n" if s is None else str(s) for s in shape) + ")"

    name_w = max(len("Layer"), *(len(r.name) for r in rows))
    kind_w = max(len("Kind"), *(len(r.kind) for r in rows))
    shape_w = max(len("Output shape"), *(len(fmt_shape(r.output_shape)) for r in rows))
    lines = [f"{'Layer':<{name_w}}  {'Kind':<{kind_w}}  {'Output shape':<{shape_w}}  {'Params':>12}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(
            f"{r.name:<{name_w}}  {r.kind:<{kind_w}}  {fmt_shape(r.output_shape):<{shape_w}}  {r.params:>12,}"
        )
    lines.append("-" * len(lines[0]))
    total, trainable, frozen = counts
    lines.append(f"Total params: {total:,}")
    lines.append(f"Trainable params: {trainable:,}")
    lines.append(f"Non-trainable params: {frozen:,}")
    return "\n".join(lines)
