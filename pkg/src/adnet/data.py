"""Image ingestion, stratified splitting, manifests and mini-batching."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, DimensionError, FormatError, IngestionError, ParameterError
from .model import CLASS_NAMES

IMAGE_SIZE = 100
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
SPLITS = ("train", "test", "val")
WORKERS_ENV = "ADNET_WORKERS"


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    source_path: str


def load_image(path: str | os.PathLike, resize: bool = False, dtype=np.float32) -> np.ndarray:
    """Decode an 8-bit RGB or grayscale raster into a (3, 100, 100) array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("I", "I;16", "I;16B", "I;16L", "F", "1"):
                raise IngestionError(f"{path}: unsupported pixel mode {img.mode!r}, need 8-bit")
            img = img.convert("L" if img.mode in ("L", "LA") else "RGB")
            if img.size != (IMAGE_SIZE, IMAGE_SIZE):
                if not resize:
                    raise DimensionError(
                        f"{path}: image is {img.size[0]}x{img.size[1]}, expected "
                        f"{IMAGE_SIZE}x{IMAGE_SIZE} (pass resize to rescale)"
                    )
                img = img.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
            raw = np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        if isinstance(exc, IngestionError):
            raise
        raise IngestionError(f"{path}: cannot decode image ({exc})") from None
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    dtype = np.dtype(dtype)
    return np.ascontiguousarray(raw.transpose(2, 0, 1)).astype(dtype) / dtype.type(255)


# -- class discovery ---------------------------------------------------------


def discover_classes(data_dir: str | os.PathLike, classes: Sequence[str] | None = None) -> list[str]:
    """Class table for a one-directory-per-class tree.

    Explicit ``classes`` win. Otherwise a tree holding all three dementia-stage
    directories uses the fixed clinical order (any other directory, such as the
    moderate class, is left out); any other tree uses alphabetical order.
    """
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    present = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if classes:
        missing = [c for c in classes if c not in present]
        if missing:
            raise DataError(f"{root}: class directories not found: {missing}")
        return list(classes)
    if set(CLASS_NAMES) <= set(present):
        return list(CLASS_NAMES)
    if not present:
        raise DataError(f"{root}: no class directories")
    return present


def list_images(data_dir: str | os.PathLike, class_names: Sequence[str]) -> list[tuple[Path, int]]:
    root = Path(data_dir)
    items = []
    for label, name in enumerate(class_names):
        files = sorted(
            p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise DataError(f"class {name!r} has no images under {root / name}")
        items.extend((p, label) for p in files)
    return items


# -- manifest ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    seed: int
    train_fraction: Fraction
    class_names: list[str]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths must be unique")

    def subset(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ParameterError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def counts(self) -> dict[str, list[int]]:
        out = {s: [0] * len(self.class_names) for s in SPLITS}
        for e in self.entries:
            out[e.split][e.label] += 1
        return out

    def to_csv(self, base: Path | None = None) -> str:
        base = base if base is not None else self.root
        buf = io.StringIO()
        buf.write(f"# seed={self.seed} fraction={_decimal(self.train_fraction)}\n")
        buf.write(f"# classes={','.join(self.class_names)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        rows = []
        for e in self.entries:
            rel = Path(os.path.relpath(self.resolve(e).resolve(), base.resolve())).as_posix()
            rows.append([rel, e.label, e.split])
        writer.writerows(sorted(rows))
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = self.to_csv(base=path.parent)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"{path}: cannot read manifest ({exc.strerror})") from None
        seed = fraction = None
        class_names: list[str] = []
        rows = []
        for lineno, line in enumerate(lines, 1):
            if line.startswith("#"):
                for token in line[1:].split():
                    key, _, value = token.partition("=")
                    if key == "seed":
                        seed = int(value)
                    elif key == "fraction":
                        fraction = Fraction(value)
                    elif key == "classes":
                        class_names = value.split(",")
            elif line.strip():
                rows.append((lineno, line))
        entries = []
        for (lineno, line), parts in zip(rows, csv.reader(line for _, line in rows)):
            if parts == ["path", "label", "split"]:
                continue
            if len(parts) != 3 or parts[2] not in SPLITS:
                raise FormatError(f"{path}:{lineno}: malformed manifest row {line!r}")
            try:
                label = int(parts[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad label {parts[1]!r}") from None
            entries.append(ManifestEntry(parts[0], label, parts[2]))
        if seed is None or fraction is None:
            raise FormatError(f"{path}: missing '# seed=... fraction=...' header")
        if not class_names:
            class_names = [str(i) for i in range(max(e.label for e in entries) + 1)] if entries else []
        if any(not 0 <= e.label < len(class_names) for e in entries):
            raise FormatError(f"{path}: label outside the class table")
        return cls(entries, seed, fraction, class_names, root=path.parent)


def _decimal(frac: Fraction) -> str:
    text = repr(float(frac))
    return text[:-2] if text.endswith(".0") else text


# -- stratified split --------------------------------------------------------


def _allocate(class_sizes: Sequence[int], fraction: Fraction) -> list[int]:
    """Per-class train counts: floors first, then one extra to the largest
    fractional remainders until the total reaches round-half-up(fraction * N)."""
    exact = [fraction * n for n in class_sizes]
    counts = [math.floor(e) for e in exact]
    target = math.floor(fraction * sum(class_sizes) + Fraction(1, 2))
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: max(0, target - sum(counts))]:
        counts[i] += 1
    return counts


def stratified_split(
    items: Sequence[tuple[str | os.PathLike, int]],
    train_fraction: Fraction | float | str,
    seed: int,
    class_names: Sequence[str] | None = None,
    root: Path | None = None,
) -> Manifest:
    """Shuffle each class with one seeded generator and cut it into train/test."""
    fraction = Fraction(str(train_fraction)) if not isinstance(train_fraction, Fraction) else train_fraction
    if not 0 < fraction < 1:
        raise ParameterError(f"train fraction must lie strictly between 0 and 1, got {train_fraction}")
    k = len(class_names) if class_names is not None else (max(l for _, l in items) + 1 if items else 0)
    by_class: list[list[str]] = [[] for _ in range(k)]
    for path, label in items:
        if not 0 <= label < k:
            raise DataError(f"{path}: label {label} outside [0, {k})")
        by_class[label].append(str(path))
    for label, members in enumerate(by_class):
        if not members:
            name = class_names[label] if class_names else str(label)
            raise DataError(f"class {name!r} is empty")
    counts = _allocate([len(m) for m in by_class], fraction)
    rng = np.random.default_rng(seed)
    entries = []
    for label, members in enumerate(by_class):
        members = sorted(members)
        perm = rng.permutation(len(members))
        for rank, idx in enumerate(perm):
            split = "train" if rank < counts[label] else "test"
            entries.append(ManifestEntry(members[idx], label, split))
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return Manifest(entries, int(seed), fraction, names, root=root or Path())


def carve_validation(manifest: Manifest, val_fraction: Fraction | float | str, seed: int) -> Manifest:
    """Move a stratified ``val_fraction`` of the train entries into a ``val`` split."""
    train = manifest.subset("train")
    inner = stratified_split(
        [(e.path, e.label) for e in train], 1 - Fraction(str(val_fraction)), seed, manifest.class_names
    )
    moved = {e.path for e in inner.entries if e.split == "test"}
    entries = [ManifestEntry(e.path, e.label, "val") if e.path in moved else e for e in manifest.entries]
    return Manifest(entries, manifest.seed, manifest.train_fraction, manifest.class_names, manifest.root)


# -- batching ----------------------------------------------------------------


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def epoch_order(n: int, epoch: int, base_seed: int) -> np.ndarray:
    return np.random.default_rng([int(base_seed), int(epoch)]).permutation(n)


def batches(
    manifest: Manifest,
    split: str,
    batch_size: int,
    epoch: int = 0,
    base_seed: int = 0,
    shuffle: bool = True,
    dtype=np.float32,
    resize: bool = False,
    cache: dict | None = None,
) -> Iterator[tuple[np.ndarray, list[int]]]:
    """Yield ``(images, labels)`` batches covering the split exactly once.

    The visiting order depends only on ``(base_seed, epoch)``. ``cache`` may be
    a dict reused across epochs to avoid decoding files repeatedly.
    """
    if batch_size < 1:
        raise ParameterError(f"batch size must be >= 1, got {batch_size}")
    entries = manifest.subset(split)
    order = epoch_order(len(entries), epoch, base_seed) if shuffle else np.arange(len(entries))

    def fetch(entry: ManifestEntry) -> np.ndarray:
        path = manifest.resolve(entry)
        if cache is not None and path in cache:
            return cache[path]
        img = load_image(path, resize=resize, dtype=dtype)
        if cache is not None:
            cache[path] = img
        return img

    workers = _workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            chunk = [entries[i] for i in order[start : start + batch_size]]
            imgs = list(pool.map(fetch, chunk)) if pool else [fetch(e) for e in chunk]
            yield np.stack(imgs), [e.label for e in chunk]
    finally:
        if pool:
            pool.shutdown()
