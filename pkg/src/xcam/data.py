"""Deterministic synthetic dataset: colored geometric shapes (circle,
triangle, square) on textured backgrounds, with tight bounding boxes and a
regenerable manifest. Images within a sample share one class; multi-instance
samples place 2-3 disjoint copies of it."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .metrics import BoundingBox
from .pnm import read_image, write_image

CLASS_NAMES = ("circle", "triangle", "square")

_MANIFEST_FIELDS = (
    "seed",
    "num_samples",
    "class_names",
    "image_size",
    "multi_instance_prob",
    "split_tags",
)


class ManifestError(ValueError):
    pass


class RegenerationError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int
    boxes: list
    instance_count: int


@dataclass
class DatasetManifest:
    seed: int
    num_samples: int
    class_names: list
    image_size: int
    multi_instance_prob: float
    split_tags: list


@dataclass
class Dataset:
    samples: list
    manifest: DatasetManifest

    def split(self, tag):
        return [s for s, t in zip(self.samples, self.manifest.split_tags) if t == tag]


def _shape_mask(kind, size, cx, cy, r, rng):
    """Boolean [size,size] mask of one shape instance; r is the half-extent."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == 1:  # upward triangle: three half-plane tests on pixel centers
        x0, y0 = cx, cy - r
        x1, y1 = cx - r, cy + r
        x2, y2 = cx + r, cy + r

        def half(ax, ay, bx, by):
            return (bx - ax) * (yy - ay) - (by - ay) * (xx - ax) <= 0

        return half(x0, y0, x1, y1) & half(x1, y1, x2, y2) & half(x2, y2, x0, y0)
    # square
    return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _background(size, rng):
    base = rng.uniform(0.25, 0.45, size=3)
    ramp_dir = rng.uniform(-1.0, 1.0, size=2)
    yy, xx = np.mgrid[0:size, 0:size] / size
    ramp = 0.08 * (ramp_dir[0] * xx + ramp_dir[1] * yy)
    noise = rng.normal(0.0, 0.04, size=(3, size, size))
    img = base[:, None, None] + ramp[None, :, :] + noise
    return np.clip(img, 0.0, 1.0)


def _mask_box(mask, class_index):
    ys, xs = np.nonzero(mask)
    return BoundingBox(
        x0=int(xs.min()), y0=int(ys.min()), x1=int(xs.max()) + 1, y1=int(ys.max()) + 1,
        class_index=class_index,
    )


def generate(seed, num_samples, size=32, multi_instance_prob=0.3, val_fraction=0.25):
    """Deterministic dataset of num_samples images [3,size,size] in [0,1]."""
    if size < 32:
        raise ValueError(f"size {size} too small to place shapes (min 32)")
    if not 0.0 <= multi_instance_prob <= 1.0:
        raise ValueError("multi_instance_prob must lie in [0,1]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.array([i % len(CLASS_NAMES) for i in range(num_samples)]))
    samples = []
    for label in labels:
        label = int(label)
        img = _background(size, rng)
        count = 1
        if rng.uniform() < multi_instance_prob:
            count = int(rng.integers(2, 4))
        occupied = np.zeros((size, size), dtype=bool)
        boxes = []
        placed = 0
        hue_base = label / len(CLASS_NAMES)
        while placed < count:
            # rejection-sample a placement whose mask touches nothing else
            for _ in range(200):
                r = int(rng.integers(4, max(5, size // 5) + 1))
                cx = int(rng.integers(r + 1, size - r - 1))
                cy = int(rng.integers(r + 1, size - r - 1))
                mask = _shape_mask(label, size, cx, cy, r, rng)
                if not (mask & occupied).any():
                    break
            else:
                break  # image too crowded; keep what fits
            hue = (hue_base + rng.uniform(-0.12, 0.12)) % 1.0
            color = _hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0))
            for ch in range(3):
                img[ch][mask] = color[ch]
            occupied |= mask
            boxes.append(_mask_box(mask, label))
            placed += 1
        samples.append(Sample(image=img, label=label, boxes=boxes, instance_count=len(boxes)))
    n_train = num_samples - int(round(num_samples * val_fraction))
    tags = ["train"] * n_train + ["val"] * (num_samples - n_train)
    manifest = DatasetManifest(
        seed=int(seed),
        num_samples=int(num_samples),
        class_names=list(CLASS_NAMES),
        image_size=int(size),
        multi_instance_prob=float(multi_instance_prob),
        split_tags=tags,
    )
    return Dataset(samples=samples, manifest=manifest)


def to_arrays(samples):
    X = np.stack([s.image for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------------------
# disk layout: manifest.json + labels.json + images/NNNNN.ppm


def manifest_to_dict(m):
    return {
        "seed": m.seed,
        "num_samples": m.num_samples,
        "class_names": list(m.class_names),
        "image_size": m.image_size,
        "multi_instance_prob": m.multi_instance_prob,
        "split_tags": list(m.split_tags),
    }


def manifest_from_dict(d):
    unknown = set(d) - set(_MANIFEST_FIELDS)
    if unknown:
        raise ManifestError(f"unknown manifest field(s): {', '.join(sorted(unknown))}")
    missing = set(_MANIFEST_FIELDS) - set(d)
    if missing:
        raise ManifestError(f"missing manifest field(s): {', '.join(sorted(missing))}")
    m = DatasetManifest(
        seed=int(d["seed"]),
        num_samples=int(d["num_samples"]),
        class_names=list(d["class_names"]),
        image_size=int(d["image_size"]),
        multi_instance_prob=float(d["multi_instance_prob"]),
        split_tags=list(d["split_tags"]),
    )
    if len(m.split_tags) != m.num_samples:
        raise ManifestError("split_tags length does not match num_samples")
    if any(t not in ("train", "val") for t in m.split_tags):
        raise ManifestError("split_tags must be 'train' or 'val'")
    return m


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest_to_dict(manifest), f, indent=2)
        f.write("\n")


def load_manifest(path):
    with open(path, encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as err:
            raise ManifestError(f"{path}: invalid JSON: {err}") from err
    return manifest_from_dict(d)


def save_dataset(ds, directory):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    save_manifest(ds.manifest, os.path.join(directory, "manifest.json"))
    labels = {
        "labels": [s.label for s in ds.samples],
        "boxes": [
            [
                {"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1, "class_index": b.class_index}
                for b in s.boxes
            ]
            for s in ds.samples
        ],
        "instance_counts": [s.instance_count for s in ds.samples],
    }
    with open(os.path.join(directory, "labels.json"), "w", encoding="utf-8") as f:
        json.dump(labels, f, indent=2)
        f.write("\n")
    for i, s in enumerate(ds.samples):
        write_image(os.path.join(directory, "images", f"{i:05d}.ppm"), s.image)


def load_dataset(directory):
    manifest = load_manifest(os.path.join(directory, "manifest.json"))
    with open(os.path.join(directory, "labels.json"), encoding="utf-8") as f:
        labels = json.load(f)
    samples = []
    for i in range(manifest.num_samples):
        image = read_image(os.path.join(directory, "images", f"{i:05d}.ppm"))
        boxes = [
            BoundingBox(b["x0"], b["y0"], b["x1"], b["y1"], b["class_index"])
            for b in labels["boxes"][i]
        ]
        samples.append(
            Sample(
                image=image,
                label=int(labels["labels"][i]),
                boxes=boxes,
                instance_count=int(labels["instance_counts"][i]),
            )
        )
    return Dataset(samples=samples, manifest=manifest)


def verify_regeneration(directory):
    """Regenerate from the manifest seed and compare against stored pixels.

    Catches a manifest whose seed does not match its images."""
    ds = load_dataset(directory)
    m = ds.manifest
    fresh = generate(m.seed, m.num_samples, m.image_size, m.multi_instance_prob)
    for i, (stored, new) in enumerate(zip(ds.samples, fresh.samples)):
        q_new = np.clip(np.round(new.image * 255.0), 0, 255) / 255.0
        q_stored = np.round(stored.image * 255.0) / 255.0
        if not np.array_equal(q_stored, q_new):
            raise RegenerationError(
                f"image {i} does not match regeneration from seed {m.seed}"
            )
    return True
