"""Training and evaluation loops shared by the CLI and the test-suite."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import weights_io
from .data import Manifest, batches, carve_validation, load_image
from .errors import CompatibilityError, NumericError, ParameterError
from .graph import Graph, ParamStore, backward, forward, infer_shapes
from .metrics import MetricsLog, MetricsReport, evaluate
from .model import ModelConfig, build_adnet
from .optim import AdamConfig, adam_step, softmax_cross_entropy
from .tensor import deterministic, dtype_for

log = logging.getLogger(__name__)

# decoded images are kept in memory across epochs only for splits this small
CACHE_LIMIT = 2048


@dataclass
class RunConfig:
    manifest: Path
    out: Path = Path("weights.adnw")
    metrics: Path | None = Path("metrics.csv")
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0
    filter_scale: Fraction = Fraction(1)
    precision: int = 32
    deterministic: bool = False
    eval_each_epoch: bool = False
    val_fraction: Fraction | None = None
    checkpoint: bool = False
    resize: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if self.val_fraction is not None and not 0 < self.val_fraction < 1:
            raise ParameterError(f"validation fraction must lie in (0, 1), got {self.val_fraction}")
        dtype_for(self.precision)


@dataclass
class TrainResult:
    graph: Graph
    store: ParamStore
    history: list[tuple[int, str, MetricsReport]] = field(default_factory=list)
    adam: AdamConfig | None = None


def model_config_for(manifest: Manifest, filter_scale: Fraction | str | float = 1) -> ModelConfig:
    return ModelConfig(filter_scale=filter_scale, num_classes=len(manifest.class_names))


def evaluate_split(
    graph: Graph,
    store: ParamStore,
    manifest: Manifest,
    split: str,
    batch_size: int = 32,
    dtype=np.float32,
    resize: bool = False,
    cache: dict | None = None,
) -> MetricsReport | None:
    """Infer-mode metrics over one split; None when the split is empty."""
    probs, labels, loss_sum = [], [], 0.0
    for x, y in batches(manifest, split, batch_size, shuffle=False, dtype=dtype, resize=resize, cache=cache):
        _, tape = forward(graph, store, x, "infer")
        lv = softmax_cross_entropy(tape.values[graph.logits_id], y)
        probs.append(lv.probs)
        labels.extend(y)
        loss_sum += lv.mean_loss * len(y)
    if not labels:
        return None
    return evaluate(np.concatenate(probs), labels, loss_sum / len(labels), manifest.class_names)


def train(run: RunConfig, on_epoch: Callable[[int, MetricsReport], bool] | None = None) -> TrainResult:
    """Fit the model described by ``run``; writes weights and the metrics CSV.

    ``on_epoch(epoch, train_report)`` may return True to stop early.
    """
    manifest = Manifest.read(run.manifest)
    if run.val_fraction is not None:
        manifest = carve_validation(manifest, run.val_fraction, run.seed)
    cfg = model_config_for(manifest, run.filter_scale)
    dtype = dtype_for(run.precision)
    splits = ["train"]
    if run.val_fraction is not None:
        splits.append("val")
    if run.eval_each_epoch and manifest.subset("test"):
        splits.append("test")
    caches = {s: ({} if len(manifest.subset(s)) <= CACHE_LIMIT else None) for s in splits}
    metrics_log = MetricsLog(run.metrics, manifest.class_names) if run.metrics else None

    with deterministic(run.deterministic):
        graph, store = build_adnet(cfg, np.random.default_rng([run.seed, 0]), dtype=dtype)
        dropout_rng = np.random.default_rng([run.seed, 1])
        adam = AdamConfig(learning_rate=run.learning_rate)
        result = TrainResult(graph, store, adam=adam)
        for epoch in range(1, run.epochs + 1):
            for b, (x, y) in enumerate(
                batches(manifest, "train", run.batch_size, epoch, run.seed, dtype=dtype,
                        resize=run.resize, cache=caches["train"])
            ):
                _, tape = forward(graph, store, x, "train", dropout_rng)
                lv = softmax_cross_entropy(tape.values[graph.logits_id], y)
                if not math.isfinite(lv.mean_loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
                grads = backward(graph, store, tape, lv.grad_logits, seed=graph.logits_id)
                adam_step(store, grads, adam)
                store.update(tape.stat_updates)
            reports = {}
            for split in splits:
                rep = evaluate_split(graph, store, manifest, split, run.batch_size, dtype,
                                     run.resize, caches[split])
                if rep is None:
                    continue
                reports[split] = rep
                result.history.append((epoch, split, rep))
                if metrics_log:
                    metrics_log.append(epoch, split, rep)
            log.info("epoch %d: train loss %.4f acc %.4f", epoch, reports["train"].mean_loss,
                     reports["train"].accuracy)
            if on_epoch is not None and on_epoch(epoch, reports["train"]):
                break
    weights_io.save(store, cfg.fingerprint(), run.out, checkpoint=run.checkpoint, step=adam.t)
    return result


def load_model(weights: Path, cfg: ModelConfig) -> tuple[Graph, ParamStore]:
    """Graph for ``cfg`` with parameters read from ``weights`` (fingerprint checked)."""
    store, _, _ = weights_io.load(weights, expected_fingerprint=cfg.fingerprint())
    graph, fresh = build_adnet(cfg, 0, dtype=np.float64)
    if sorted(store.names()) != sorted(fresh.names()):
        raise CompatibilityError(f"{weights}: parameter names do not match the model")
    infer_shapes(graph, store)
    return graph, store


def store_dtype(store: ParamStore) -> np.dtype:
    return next(iter(store.items()))[1].value.dtype


def predict_image(graph: Graph, store: ParamStore, path: Path, resize: bool = False) -> np.ndarray:
    x = load_image(path, resize=resize, dtype=store_dtype(store))[None]
    probs, _ = forward(graph, store, x, "infer")
    return probs[0]
