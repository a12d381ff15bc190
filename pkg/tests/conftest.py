"""Shared fixtures: a synthetic, linearly separable 3-class image tree."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from adnet.data import Manifest, ManifestEntry, discover_classes, list_images, stratified_split

TOY_CLASSES = ("dark", "mid", "bright")
TOY_MEANS = (60, 128, 196)
TOY_PER_CLASS = 10
OVERFIT_SCALE = "1/8"
OVERFIT_BATCH = 5

# verdict lines from test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


def make_separable_set(root: Path, per_class: int = TOY_PER_CLASS, seed: int = 7) -> Path:
    """Write ``per_class`` noisy 100x100 RGB PNGs per class, class means 60/128/196."""
    rng = np.random.default_rng(seed)
    for name, mean in zip(TOY_CLASSES, TOY_MEANS):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = np.clip(rng.normal(mean, 20, size=(100, 100, 3)), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(d / f"{name}{i:02d}.png")
    return root


def all_train_manifest(data: Path, out: Path) -> Path:
    """Manifest placing every image of ``data`` in the train split."""
    names = discover_classes(data, list(TOY_CLASSES))
    m = stratified_split(list_images(data, names), "0.5", 0, names)
    entries = [ManifestEntry(e.path, e.label, "train") for e in m.entries]
    Manifest(entries, m.seed, m.train_fraction, m.class_names, m.root).write(out)
    return out


@pytest.fixture(scope="session")
def toy_tree(tmp_path_factory) -> Path:
    return make_separable_set(tmp_path_factory.mktemp("toy") / "images")


@pytest.fixture(scope="session")
def toy_manifest(toy_tree, tmp_path_factory) -> Path:
    return all_train_manifest(toy_tree, tmp_path_factory.mktemp("manifest") / "all.csv")


@pytest.fixture(scope="session")
def overfit_weights(toy_manifest, tmp_path_factory) -> Path:
    """Reduced model trained 150 epochs on the whole toy set through the CLI.

    Train accuracy hits 100% near epoch 50; the extra epochs push every
    image's true-class probability well clear of 0.9.
    """
    from adnet.cli import main

    out = tmp_path_factory.mktemp("overfit")
    weights = out / "w.adnw"
    code = main([
        "train", "--manifest", str(toy_manifest), "--epochs", "150",
        "--batch-size", str(OVERFIT_BATCH), "--filter-scale", OVERFIT_SCALE,
        "--out", str(weights), "--metrics", str(out / "metrics.csv"),
    ])
    assert code == 0
    return weights
