"""Labeled image datasets stored as ``root/<class_name>/<image>.png``."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .image_core import ImageTensor, load_image, save_image
from .rng import permutation, stable_hash

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")
MANIFEST = "manifest.json"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Item:
    path: str  # posix path relative to the dataset root
    image: ImageTensor
    label: int
    split: str


@dataclass
class LabeledDataset:
    class_names: list[str]
    items: list[Item]
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.items)

    def split(self, name: str) -> list[Item]:
        return [it for it in self.items if it.split == name]

    def arrays(self, split: str, dtype=np.float32):
        """Stack one split into (N, H, W, C) images and (N,) labels."""
        items = self.split(split)
        if not items:
            raise DatasetError(f"split {split!r} is empty")
        shapes = {it.image.shape for it in items}
        if len(shapes) != 1:
            raise DatasetError(f"split {split!r} mixes image shapes {sorted(shapes)}")
        x = np.stack([it.image.data for it in items]).astype(dtype)
        y = np.array([it.label for it in items], dtype=np.int64)
        return x, y

    def map_images(self, fn) -> "LabeledDataset":
        return LabeledDataset(
            list(self.class_names),
            [replace(it, image=fn(it)) for it in self.items],
            dict(self.meta),
        )


def assign_splits(labels, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> list[str]:
    """Stratified split assignment with exact per-class counts.

    Within each class the item order is permuted by a seeded Fisher-Yates
    shuffle; the first round(f_train * n) go to train, the next
    round(f_val * n) to val, the rest to test.
    """
    labels = list(labels)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise DatasetError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    out = [""] * len(labels)
    for cls in sorted(set(labels)):
        idx = [i for i, lab in enumerate(labels) if lab == cls]
        n = len(idx)
        order = permutation(n, seed ^ stable_hash(f"split/{cls}"))
        n_train = int(round(fractions[0] * n))
        n_val = min(int(round(fractions[1] * n)), n - n_train)
        for rank, k in enumerate(order):
            if rank < n_train:
                out[idx[k]] = "train"
            elif rank < n_train + n_val:
                out[idx[k]] = "val"
            else:
                out[idx[k]] = "test"
    return out


def load_dataset(root, split_seed: int = 0) -> LabeledDataset:
    """Read a dataset directory.

    Split assignment comes from ``manifest.json`` when present, otherwise a
    stratified 70/15/15 seeded draw.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {str(root)!r} is not a directory")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_names:
        raise DatasetError(f"no class directories under {str(root)!r}")
    manifest = {}
    if (root / MANIFEST).is_file():
        with open(root / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    paths, labels, images = [], [], []
    for label, name in enumerate(class_names):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            rel = f"{name}/{f.name}"
            try:
                images.append(load_image(f))
            except (OSError, ValueError) as exc:
                raise DatasetError(f"failed to load {rel}: {exc}") from exc
            paths.append(rel)
            labels.append(label)
    recorded = manifest.get("splits", {})
    if recorded and all(p in recorded for p in paths):
        splits = [recorded[p] for p in paths]
    else:
        splits = assign_splits(labels, seed=split_seed)
    items = [Item(p, im, lab, s) for p, im, lab, s in zip(paths, images, labels, splits)]
    meta = {"root": str(root)}
    if manifest:
        meta["manifest"] = manifest
    return LabeledDataset(class_names, items, meta)


def save_dataset(ds: LabeledDataset, root, manifest: dict | None = None) -> None:
    """Write images under ``root/<class>/`` plus a manifest carrying the splits."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name in ds.class_names:
        (root / name).mkdir(exist_ok=True)
    for it in ds.items:
        target = root / Path(it.path).with_suffix(".png")
        save_image(it.image, target)
    data = dict(manifest or {})
    data["class_names"] = list(ds.class_names)
    data["splits"] = {str(Path(it.path).with_suffix(".png").as_posix()): it.split for it in ds.items}
    tmp = root / (MANIFEST + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, root / MANIFEST)
