"""Faithfulness and localization metrics over explanation maps, plus the
occlusion study sweeping a quantile threshold over saliency values."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Pixel rectangle, inclusive-exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int
    class_index: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")


@dataclass(frozen=True)
class ConfidencePair:
    """Model confidence on the full image (Y) and on its explanation (O)."""

    full_image_confidence: float
    explanation_confidence: float
    class_index: int = 0
    image_id: int = 0

    def __post_init__(self):
        for name in ("full_image_confidence", "explanation_confidence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")


@dataclass
class MetricsReport:
    average_drop_pct: dict = field(default_factory=dict)
    pct_increase_confidence: dict = field(default_factory=dict)
    win_pct: dict = field(default_factory=dict)
    mean_loc: dict = field(default_factory=dict)
    roc_points: list = field(default_factory=list)

    def to_json(self):
        payload = {
            "average_drop_pct": self.average_drop_pct,
            "pct_increase_confidence": self.pct_increase_confidence,
            "win_pct": self.win_pct,
            "mean_loc": self.mean_loc,
            "roc_points": self.roc_points,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def average_drop(pairs):
    """Mean clamped relative confidence loss, in percent."""
    if not pairs:
        raise ValueError("average_drop needs at least one pair")
    total = 0.0
    for p in pairs:
        y, o = p.full_image_confidence, p.explanation_confidence
        if y == 0.0:
            raise ValueError(f"image {p.image_id}: full-image confidence is 0")
        total += max(0.0, y - o) / y
    return total * 100.0 / len(pairs)


def pct_increase_confidence(pairs):
    """Share of images whose confidence strictly rose on the explanation."""
    if not pairs:
        raise ValueError("pct_increase_confidence needs at least one pair")
    wins = sum(1 for p in pairs if p.explanation_confidence > p.full_image_confidence)
    return 100.0 * wins / len(pairs)


def win_pct(drops_a, drops_b):
    """Per-image contest on confidence drops: strictly smaller wins, exact
    ties split half-half. Returns percentages that sum to exactly 100."""
    if len(drops_a) != len(drops_b):
        raise ValueError(f"length mismatch: {len(drops_a)} vs {len(drops_b)}")
    if not drops_a:
        raise ValueError("win_pct needs at least one drop pair")
    score_a = 0.0
    for a, b in zip(drops_a, drops_b):
        if a < b:
            score_a += 1.0
        elif a == b:
            score_a += 0.5
    pct_a = 100.0 * score_a / len(drops_a)
    return pct_a, 100.0 - pct_a


def localization_iou(mask, boxes):
    """Non-zero mask pixels inside the box union, over the union's area plus
    the non-zero pixels outside it."""
    mask = np.asarray(mask)
    if not boxes:
        raise ValueError("localization_iou needs at least one box")
    h, w = mask.shape
    inside = np.zeros((h, w), dtype=bool)
    for b in boxes:
        if b.x0 < 0 or b.y0 < 0 or b.x1 > w or b.y1 > h:
            raise ValueError(f"box {(b.x0, b.y0, b.x1, b.y1)} outside {w}x{h} image")
        inside[b.y0 : b.y1, b.x0 : b.x1] = True
    nonzero = mask != 0
    internal = int(np.count_nonzero(nonzero & inside))
    external = int(np.count_nonzero(nonzero & ~inside))
    box_area = int(np.count_nonzero(inside))
    return internal / (box_area + external)


def occlusion_roc(model, images, saliency_maps, theta_grid):
    """Sweep θ: keep only pixels whose upsampled saliency reaches the
    θ-quantile of its own values, re-score the occluded image, and average
    relative confidence and surviving-area fraction over the dataset.

    The scored class is the model's prediction on the full image and stays
    fixed across θ. Returns [(θ, mean_rel_confidence, mean_area_fraction)].
    """
    from .zoo import predict

    thetas = list(theta_grid)
    if not thetas:
        raise ValueError("theta grid is empty")
    if any(not 0.0 <= t <= 1.0 for t in thetas):
        raise ValueError("theta values must lie in [0,1]")
    if len(images) != len(saliency_maps):
        raise ValueError("images and saliency maps differ in count")
    rel = np.zeros(len(thetas))
    area = np.zeros(len(thetas))
    for image, smap in zip(images, saliency_maps):
        image = np.asarray(image, dtype=np.float64)
        smap = np.asarray(smap, dtype=np.float64)
        cls, probs = predict(model, image)
        y = probs[cls]
        for t_i, theta in enumerate(thetas):
            gamma = np.quantile(smap, theta)
            keep = (smap >= gamma).astype(np.float64)
            occluded = image * keep[None, :, :]
            _, oprobs = predict(model, occluded)
            rel[t_i] += 100.0 * (oprobs[cls] / y)  # o/y first: exactly 100 when o == y
            area[t_i] += keep.mean()
    n = len(images)
    return [(thetas[i], rel[i] / n, area[i] / n) for i in range(len(thetas))]


def roc_csv(points):
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["theta", "relative_confidence", "area_fraction"])
    for theta, rc, af in points:
        writer.writerow([repr(float(theta)), repr(float(rc)), repr(float(af))])
    return buf.getvalue()
