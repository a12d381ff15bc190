"""Acceptance gates 1 to 9, one test each, with their runtime budgets.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (visible with
``pytest -s``, and collected in the terminal summary by the hook in
``conftest.py``).
"""

from __future__ import annotations

import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from adnet import gradcheck
from adnet.cli import main
from adnet.data import _allocate, stratified_split
from adnet.errors import FormatError
from adnet.graph import ParamStore, forward, infer_shapes
from adnet.metrics import ConfusionMatrix, accuracy_precision_recall, macro_auc
from adnet.model import CLASS_NAMES, ModelConfig, build_adnet
from adnet.ops import conv2d_forward
from adnet.optim import AdamConfig, adam_step
from adnet.tensor import deterministic
from adnet.train import RunConfig, train
from adnet.weights_io import dumps, load, loads, save

from conftest import ACCEPTANCE_LINES, OVERFIT_BATCH, all_train_manifest, make_separable_set


class Gate:
    """Time a block, record and print its verdict."""

    def __init__(self, number: int, title: str, budget_s: float):
        self.number, self.title, self.budget = number, title, budget_s

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        over = elapsed > self.budget
        ok = exc_type is None and not over
        note = f"{elapsed:.2f}s / budget {self.budget:g}s"
        if exc_type is not None:
            note += f"; {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"ACCEPTANCE {self.number} {'PASS' if ok else 'FAIL'}  {self.title}  ({note})"
        ACCEPTANCE_LINES[self.number] = line
        print(line)
        if exc_type is None and over:
            pytest.fail(f"criterion {self.number} exceeded its runtime budget: {note}")
        return False


def test_criterion_1_parameter_count(capsys):
    with Gate(1, "summary reports 7,866,819 = 7,862,275 + 4,544", 1.0):
        code = main(["summary"])
        out = capsys.readouterr().out
        assert code == 0
        assert "Total params: 7,866,819" in out
        assert "Trainable params: 7,862,275" in out
        assert "Non-trainable params: 4,544" in out


def test_criterion_2_shape_trace():
    with Gate(2, "flatten widths 512/512/1024, concat 2048, static = runtime", 1.0):
        graph, store = build_adnet(ModelConfig(), 0)
        shapes = infer_shapes(graph, store)
        assert [shapes[f"b{i}.flatten"][0] for i in (1, 2, 3)] == [512, 512, 1024]
        assert shapes["concat"] == (2048,)
        _, tape = forward(graph, store, np.zeros((1, 3, 100, 100), np.float32))
        for node_id, value in tape.values.items():
            assert value.shape[1:] == shapes[node_id], node_id


def test_criterion_3_gradient_suite():
    with Gate(3, "finite differences: ops <= 1e-5, model <= 1e-4, 20 seeds", 120.0):
        results = gradcheck.run_suite(seeds=20)
        assert {r.name for r in results} == set(gradcheck.CHECKS)
        for r in results:
            assert r.seeds >= 20
            assert r.tolerance == (1e-4 if r.name == "model" else 1e-5)
        failed = [(r.name, r.worst) for r in results if not r.passed]
        assert not failed, failed


def _conv_loops(x, w, b):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    out = np.zeros((n, f, h - kh + 1, wd - kw + 1))
    for s in range(n):
        for o in range(f):
            for i in range(h - kh + 1):
                for j in range(wd - kw + 1):
                    acc = 0.0
                    for ch in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += x[s, ch, i + ki, j + kj] * w[o, ch, ki, kj]
                    out[s, o, i, j] = acc + b[o]
    return out


def test_criterion_4_convolution_oracle():
    with Gate(4, "deterministic conv2d == six-loop oracle on 100 cases", 10.0):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            h, wd = (int(v) for v in rng.integers(1, 9, size=2))
            kh, kw = int(rng.integers(1, h + 1)), int(rng.integers(1, wd + 1))
            n, c, f = (int(v) for v in rng.integers(1, 4, size=3))
            x = rng.normal(size=(n, c, h, wd))
            w, b = rng.normal(size=(f, c, kh, kw)), rng.normal(size=f)
            with deterministic():
                got = conv2d_forward(x, w, b)
            np.testing.assert_array_equal(got, _conv_loops(x, w, b))


def test_criterion_5_adam_trace():
    with Gate(5, "two Adam steps match the hand trace to 1e-12", 1.0):
        store = ParamStore()
        store.add("theta", np.zeros(1))
        cfg = AdamConfig(learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-7)
        # hand trace, g = 1 both steps:
        # t=1: m=0.1, v=0.001, m_hat=1, v_hat=1 -> theta = -0.001/(1+1e-7)
        # t=2: m=0.19, v=0.001999, m_hat=1, v_hat=1 -> another -0.001/(1+1e-7)
        step1 = -0.001 / (1 + 1e-7)
        adam_step(store, {"theta": np.ones(1)}, cfg)
        assert abs(store["theta"][0] - step1) <= 1e-12
        m_hat = 0.19 / (1 - 0.9**2)
        v_hat = 0.001999 / (1 - 0.999**2)
        step2 = step1 - 0.001 * m_hat / (math.sqrt(v_hat) + 1e-7)
        adam_step(store, {"theta": np.ones(1)}, cfg)
        assert abs(store["theta"][0] - step2) <= 1e-12
        assert cfg.t == 2


def _overfit(manifest: Path, out: Path):
    reached = []

    def stop_at_perfect(epoch, report):
        if report.accuracy == 1.0:
            reached.append(epoch)
            return True
        return False

    run = RunConfig(manifest=manifest, out=out / "w.adnw", metrics=out / "metrics.csv", epochs=200,
                    batch_size=OVERFIT_BATCH, filter_scale=Fraction(1, 8), seed=0)
    train(run, stop_at_perfect)
    return reached, (out / "w.adnw").read_bytes(), (out / "metrics.csv").read_bytes()


@pytest.mark.slow
def test_criterion_6_overfit(tmp_path):
    with Gate(6, "filter_scale 1/8 reaches 100% train accuracy on 30 images within 200 epochs", 600.0):
        manifest = all_train_manifest(make_separable_set(tmp_path / "images"), tmp_path / "all.csv")
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        reached_a, weights_a, metrics_a = _overfit(manifest, tmp_path / "a")
        assert reached_a and reached_a[0] <= 200, "training accuracy never reached 100%"
        reached_b, weights_b, metrics_b = _overfit(manifest, tmp_path / "b")
        assert reached_b == reached_a
        assert weights_b == weights_a
        assert metrics_b == metrics_a


def test_criterion_7_split_and_metrics():
    with Gate(7, "split ratios within 1, seed-deterministic; 631/637 = 0.9906 truncates to 99.05%", 1.0):
        rng = np.random.default_rng(7)
        for _ in range(50):
            sizes = [int(v) for v in rng.integers(1, 200, size=int(rng.integers(2, 5)))]
            frac = Fraction(int(rng.integers(1, 100)), 100)
            counts = _allocate(sizes, frac)
            assert all(abs(c - frac * n) <= 1 for c, n in zip(counts, sizes))
        items = [(f"c{lab}/{i}.png", lab) for lab, n in enumerate((3202, 2242, 892)) for i in range(n)]
        a = stratified_split(items, "0.9", 1234)
        assert a.to_csv() == stratified_split(items, "0.9", 1234).to_csv()
        assert a.counts()["train"] == [2882, 2018, 802]
        c = np.diag([322, 225, 90])
        c[0, 0], c[0, 1], c[1, 1], c[1, 0] = 322 - 4, 4, 225 - 2, 2
        cm = ConfusionMatrix(c, list(CLASS_NAMES))
        acc = accuracy_precision_recall(cm).accuracy
        assert cm.total == 637 and acc == Fraction(631, 637)
        assert round(float(acc), 4) == 0.9906
        assert math.floor(acc * 10000) / 100 == 99.05


def _pairwise_auc(scores, labels):
    vals = []
    for c in range(scores.shape[1]):
        pos = scores[labels == c, c]
        neg = scores[labels != c, c]
        if not len(pos) or not len(neg):
            continue
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        vals.append(wins / (len(pos) * len(neg)))
    return sum(vals) / len(vals)


def test_criterion_8_auc_oracle():
    with Gate(8, "macro AUC == all-pairs oracle within 1e-12 on 50 instances", 5.0):
        rng = np.random.default_rng(88)
        for _ in range(50):
            n = int(rng.integers(2, 31))
            labels = rng.integers(0, 3, size=n)
            scores = rng.random((n, 3))
            if rng.random() < 0.5:
                scores = np.round(scores, 1)
            assert abs(macro_auc(scores, labels).macro - _pairwise_auc(scores, labels)) <= 1e-12


def test_criterion_9_serialization(tmp_path, capsys):
    with Gate(9, "bit-exact round-trip, corruption caught, deterministic reruns byte-identical", 30.0):
        cfg = ModelConfig(filter_scale=Fraction(1, 16))
        _, store = build_adnet(cfg, 9, dtype=np.float64)
        save(store, cfg.fingerprint(), tmp_path / "w.adnw")
        back, _, _ = load(tmp_path / "w.adnw", cfg.fingerprint())
        assert all(back[n].tobytes() == store[n].tobytes() for n in store)
        blob = (tmp_path / "w.adnw").read_bytes()
        for pos in np.random.default_rng(9).choice(len(blob), size=64, replace=False):
            bad = bytearray(blob)
            bad[pos] ^= 0x5A
            with pytest.raises(FormatError):
                loads(bytes(bad))
        assert dumps(store, cfg.fingerprint()) == blob

        data = make_separable_set(tmp_path / "images", per_class=2)
        manifest = all_train_manifest(data, tmp_path / "m.csv")
        files = []
        for rerun in ("r1", "r2"):
            out = tmp_path / rerun
            out.mkdir()
            code = main(["train", "--manifest", str(manifest), "--epochs", "2", "--batch-size", "3",
                         "--filter-scale", "1/8", "--seed", "5", "--deterministic",
                         "--out", str(out / "w.adnw"), "--metrics", str(out / "metrics.csv")])
            assert code == 0
            files.append(((out / "w.adnw").read_bytes(), (out / "metrics.csv").read_bytes()))
        capsys.readouterr()
        assert files[0] == files[1]
