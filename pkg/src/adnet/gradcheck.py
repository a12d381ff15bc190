"""Central finite-difference checks for every backward kernel and the full model.

Each check draws float64 inputs in [-1, 1], contracts the op output with a
random projection to get a scalar, and compares the analytic gradient to
``(f(x + h) - f(x - h)) / 2h`` coordinate by coordinate. The relative error of
one coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
exactly-zero gradients from turning round-off into huge ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from . import graph as graph_mod
from . import ops
from .model import ModelConfig, build_adnet
from .optim import softmax_cross_entropy

STEP = 1e-5
# bias shifts move thousands of relu inputs at once; a smaller step keeps them off the kink
MODEL_STEP = 1e-6
FLOOR = 1e-3
OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
MODEL_SCALE = Fraction(1, 16)
MODEL_COORDS = 15


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(
    f: Callable[[], float], x: np.ndarray, coords: Iterable[tuple[int, ...]] | None = None, h: float = STEP
) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (modified in place, then restored).

    With ``coords`` only those flat positions are probed and a 1-D array is returned.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else list(coords)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[k] = (up - down) / (2 * h)
    return out.reshape(x.shape) if coords is None else out


def _worst(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    return max(float(rel_error(a, n).max()) for a, n in pairs)


def _uniform(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    kh, kw = rng.integers(1, 4, size=2)
    x = _uniform(rng, n, c, kh + rng.integers(0, 4), kw + rng.integers(0, 4))
    w, b = _uniform(rng, f, c, kh, kw), _uniform(rng, f)
    proj = _uniform(rng, *ops.conv2d_forward(x, w, b).shape)
    loss = lambda: float((ops.conv2d_forward(x, w, b) * proj).sum())  # noqa: E731
    gx, gw, gb = ops.conv2d_backward(proj, x, w)
    return _worst([(gx, numeric_grad(loss, x)), (gw, numeric_grad(loss, w)), (gb, numeric_grad(loss, b))])


def _pool_case(seed: int, mode: str) -> float:
    rng = np.random.default_rng(seed)
    wh, ww = rng.integers(1, 4, size=2)
    sh, sw = rng.integers(1, 4, size=2)
    attrs = ops.PoolAttrs(int(wh), int(ww), int(sh), int(sw), mode)
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(wh + rng.integers(0, 5)), int(ww + rng.integers(0, 5)))
    if mode == "max":
        # distinct values spaced far beyond the probe step: no ties, no argmax flips
        size = int(np.prod(shape))
        x = (rng.permutation(size) / size * 2 - 1).reshape(shape)
    else:
        x = _uniform(rng, *shape)
    proj = _uniform(rng, *ops.pool2d_forward(x, attrs).shape)
    loss = lambda: float((ops.pool2d_forward(x, attrs) * proj).sum())  # noqa: E731
    return _worst([(ops.pool2d_backward(proj, x, attrs), numeric_grad(loss, x))])


def check_avgpool(seed: int) -> float:
    return _pool_case(seed, "average")


def check_maxpool(seed: int) -> float:
    return _pool_case(seed, "max")


def check_batchnorm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _uniform(rng, 2, 3, 4, 4)
    state = ops.NormState(_uniform(rng, 3), _uniform(rng, 3), np.zeros(3), np.ones(3))
    proj = _uniform(rng, *x.shape)

    def loss():
        y, _ = ops.batchnorm_forward(x, state, "train")
        return float((y * proj).sum())

    gx, gg, gb = ops.batchnorm_backward(proj, x, state)
    return _worst([
        (gx, numeric_grad(loss, x)),
        (gg, numeric_grad(loss, state.gamma)),
        (gb, numeric_grad(loss, state.beta)),
    ])


def check_dense(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, d_in, d_out = (int(v) for v in rng.integers(1, 6, size=3))
    x, w, b = _uniform(rng, n, d_in), _uniform(rng, d_in, d_out), _uniform(rng, d_out)
    proj = _uniform(rng, n, d_out)
    loss = lambda: float((ops.dense_forward(x, w, b) * proj).sum())  # noqa: E731
    gx, gw, gb = ops.dense_backward(proj, x, w)
    return _worst([(gx, numeric_grad(loss, x)), (gw, numeric_grad(loss, w)), (gb, numeric_grad(loss, b))])


def check_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _uniform(rng, 3, 7)
    x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.1, x)  # stay off the kink
    proj = _uniform(rng, *x.shape)
    loss = lambda: float((ops.relu(x) * proj).sum())  # noqa: E731
    return _worst([(ops.relu_backward(proj, x), numeric_grad(loss, x))])


def check_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = _uniform(rng, 3, 4) * 3
    proj = _uniform(rng, *z.shape)
    loss = lambda: float((ops.softmax(z) * proj).sum())  # noqa: E731
    return _worst([(ops.softmax_backward(proj, ops.softmax(z)), numeric_grad(loss, z))])


def check_dropout(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _uniform(rng, 4, 6)
    proj = _uniform(rng, *x.shape)
    _, mask = ops.dropout(x, 0.5, "train", np.random.default_rng(seed))
    loss = lambda: float((ops.dropout(x, 0.5, "train", np.random.default_rng(seed))[0] * proj).sum())  # noqa: E731
    return _worst([(ops.dropout_backward(proj, mask), numeric_grad(loss, x))])


def check_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    z = _uniform(rng, 4, 3) * 3
    labels = rng.integers(0, 3, size=4)
    loss = lambda: softmax_cross_entropy(z, labels).mean_loss  # noqa: E731
    return _worst([(softmax_cross_entropy(z, labels).grad_logits, numeric_grad(loss, z))])


def check_model(seed: int, scale: Fraction = MODEL_SCALE, coords: int = MODEL_COORDS) -> float:
    """End-to-end: cross-entropy of the reduced model vs. sampled parameter coordinates.

    Dropout masks are frozen by re-seeding the generator for every evaluation.
    """
    rng = np.random.default_rng(seed)
    graph, store = build_adnet(ModelConfig(filter_scale=scale), rng, dtype=np.float64)
    x = rng.uniform(-1.0, 1.0, size=(2, *graph.input_shape))
    labels = rng.integers(0, 3, size=2)

    def run():
        _, tape = graph_mod.forward(graph, store, x, "train", np.random.default_rng(seed + 1))
        return tape, softmax_cross_entropy(tape.values[graph.logits_id], labels)

    tape, lv = run()
    grads = graph_mod.backward(graph, store, tape, lv.grad_logits, seed=graph.logits_id)
    names = store.trainable_names()
    worst = 0.0
    for _ in range(coords):
        name = names[int(rng.integers(len(names)))]
        value = store[name]
        i = int(rng.integers(value.size))
        num = numeric_grad(lambda: run()[1].mean_loss, value, [i], h=MODEL_STEP)
        worst = max(worst, float(rel_error(grads[name].reshape(-1)[i], num[0])))
    return worst


CHECKS: dict[str, Callable[[int], float]] = {
    "conv2d": check_conv2d,
    "avgpool": check_avgpool,
    "maxpool": check_maxpool,
    "batchnorm": check_batchnorm,
    "dense": check_dense,
    "relu": check_relu,
    "softmax": check_softmax,
    "dropout": check_dropout,
    "cross_entropy": check_cross_entropy,
    "model": check_model,
}


def tolerance(name: str) -> float:
    return MODEL_TOLERANCE if name == "model" else OP_TOLERANCE


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float
    seeds: int

    @property
    def passed(self) -> bool:
        return bool(self.worst <= self.tolerance)


def run_suite(names: Iterable[str] | None = None, seed: int = 0, seeds: int = 20) -> list[CheckResult]:
    """Run the named checks over ``seeds`` consecutive seeds starting at ``seed``."""
    names = list(CHECKS) if names is None else list(names)
    results = []
    for name in names:
        check = CHECKS[name]
        worst = max(check(seed + s) for s in range(seeds))
        results.append(CheckResult(name, worst, tolerance(name), seeds))
    return results
