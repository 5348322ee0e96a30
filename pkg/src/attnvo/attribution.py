"""Integrated-gradients saliency, overlays and top-salient-category analysis."""

import csv
from dataclasses import dataclass, field
import os

import numpy as np
from PIL import Image
import torch

from . import dataset as ds
from .errors import InvalidArgumentError, NumericError, ShapeError

DEFAULT_STEPS = 50
PEAK_ALPHA = 0.8
RED = np.array([255.0, 0.0, 0.0])


@dataclass
class AttributionMap:
    values: np.ndarray  # (6, H, W)

    @property
    def collapsed(self):
        return np.abs(self.values).sum(axis=0)


@dataclass
class CategoryRow:
    frame_index: int
    top_category: int  # None when the frame has no label map
    masses: dict = field(default_factory=dict)
    all_zero: bool = False
    missing_labels: bool = False


@dataclass
class CategoryReport:
    rows: list
    vocabulary: dict = field(default_factory=dict)


def integrated_gradients(fn, x, baseline=None, steps=DEFAULT_STEPS, batch_size=16):
    """Right-Riemann integrated gradients of a scalar function.

    ``fn`` maps a batch ``(B, *x.shape)`` to ``B`` scalars. Gradients are taken at
    ``baseline + (k/steps)(x - baseline)`` for k = 1..steps.
    Returns a tensor shaped like ``x``.
    """
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    x = x.detach()
    baseline = torch.zeros_like(x) if baseline is None else baseline.detach().to(x.dtype)
    if baseline.shape != x.shape:
        raise ShapeError(f"baseline shape {tuple(baseline.shape)} != input {tuple(x.shape)}")
    diff = x - baseline
    total = torch.zeros_like(x)
    alphas = torch.arange(1, steps + 1, dtype=x.dtype) / steps
    for i in range(0, steps, batch_size):
        a = alphas[i:i + batch_size].reshape(-1, *([1] * x.dim()))
        pts = (baseline.unsqueeze(0) + a * diff.unsqueeze(0)).requires_grad_(True)
        out = fn(pts)
        if not out.requires_grad:
            continue
        (grad,) = torch.autograd.grad(out.sum(), pts, allow_unused=True)
        if grad is None:
            continue
        total += grad.sum(0)
    if not torch.isfinite(total).all():
        raise NumericError("non-finite gradients in integrated gradients")
    return diff * total / steps


def pose_target(model, target="translation_norm"):
    """Scalar reduction of the model's twist for a single stacked pair batch.

    ``target`` is ``translation_norm`` or an axis index 0..5.
    """
    def fn(pairs):
        # pairs: (B, 6, H, W) -> frames (B, 2, 3, H, W)
        frames = pairs.reshape(pairs.shape[0], 2, 3, *pairs.shape[-2:])
        twists, _ = model(frames)
        twist = twists[:, 0]
        if target == "translation_norm":
            return twist[:, :3].norm(dim=-1)
        return twist[:, int(target)]
    return fn


def attribute_pair(model, frame_a, frame_b, steps=DEFAULT_STEPS, target="translation_norm",
                   baseline=None, batch_size=8):
    """IG map of one frame pair (each frame preprocessed, (3, H, W))."""
    if hasattr(model, "eval"):
        model.eval()
    pair = torch.cat([frame_a, frame_b], dim=0)
    ig = integrated_gradients(pose_target(model, target), pair, baseline, steps, batch_size)
    return AttributionMap(ig.detach().cpu().numpy().astype(np.float64))


def render_overlay(image, collapsed, peak_alpha=PEAK_ALPHA):
    """Alpha-blend red onto ``image`` (H, W, 3 uint8) with alpha ~ normalized map."""
    image = np.asarray(image)
    collapsed = np.asarray(collapsed, dtype=np.float64)
    if image.shape[:2] != collapsed.shape:
        raise ShapeError(f"image {image.shape[:2]} and map {collapsed.shape} differ")
    peak = collapsed.max() if collapsed.size else 0.0
    if not peak > 0:
        return image.copy()
    alpha = (peak_alpha * collapsed / peak)[..., None]
    out = (1.0 - alpha) * image.astype(np.float64) + alpha * RED
    blended = np.rint(out).astype(np.uint8)
    # untouched pixels stay bit-identical
    return np.where(alpha > 0, blended, image)


def save_png(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def top_salient_category(collapsed, labels, frame_index=0, vocabulary=None):
    """Sum attribution per label category; the largest sum wins (ties -> smallest id)."""
    collapsed = np.asarray(collapsed, dtype=np.float64)
    labels = np.asarray(labels)
    if collapsed.shape != labels.shape:
        raise InvalidArgumentError(f"labels {labels.shape} do not match map {collapsed.shape}")
    ids = labels.astype(np.int64).ravel()
    if ids.size and ids.min() < 0:
        raise InvalidArgumentError("negative category id in label map")
    sums = np.bincount(ids, weights=collapsed.ravel())
    present = np.unique(ids)
    candidates = sorted(set(present.tolist()) | set((vocabulary or {}).keys()))
    masses = {int(c): float(sums[c]) if c < len(sums) else 0.0 for c in candidates}
    top = max(masses, key=lambda c: (masses[c], -c))
    return CategoryRow(frame_index, top, masses, all_zero=not collapsed.any())


def read_vocabulary(path):
    vocab = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            k, name = line.rstrip("\n").split("\t", 1)
            vocab[int(k)] = name
    return vocab


def load_label_map(path, size=None):
    """Palette-indexed label PNG -> (H, W) ids, nearest-neighbour resized to ``size``."""
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise InvalidArgumentError(f"{path}: label maps must be palette or grayscale")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.NEAREST)
        return np.asarray(im).astype(np.int64)


def label_path(label_root, sequence_id, image_path):
    name = os.path.splitext(os.path.basename(image_path))[0] + ".png"
    return os.path.join(label_root, str(sequence_id), name)


def consistency_series(model, record, label_root, frame_count=50, start=0,
                       image_size=ds.IMAGE_SIZE, steps=DEFAULT_STEPS, target="translation_norm"):
    """Top salient category for each of ``frame_count`` consecutive frames.

    Frame k is attributed through the pair (k, k+1) and scored against the label
    map of frame k. Frames without a label map get a row with ``missing_labels``.
    """
    if start + frame_count + 1 > record.length:
        raise InvalidArgumentError(
            f"need {frame_count + 1} frames from {start}, sequence has {record.length}")
    vocab_path = os.path.join(label_root, "vocab.txt")
    vocab = read_vocabulary(vocab_path) if os.path.exists(vocab_path) else {}
    rows = []
    cache = {}
    for k in range(start, start + frame_count):
        lp = label_path(label_root, record.sequence_id, record.image_paths[k])
        if not os.path.exists(lp):
            rows.append(CategoryRow(k, None, {}, missing_labels=True))
            continue
        frames = ds.load_frames(record.image_paths[k:k + 2], image_size, cache)
        amap = attribute_pair(model, frames[0], frames[1], steps, target)
        labels = load_label_map(lp, image_size)
        rows.append(top_salient_category(amap.collapsed, labels, k, vocab))
    return CategoryReport(rows, vocab)


def write_category_report(path, report):
    cats = sorted(set(report.vocabulary) | {c for r in report.rows for c in r.masses})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "top_category", "top_name", "all_zero", "missing_labels"]
                        + [f"mass_{c}" for c in cats])
        for r in report.rows:
            name = report.vocabulary.get(r.top_category, "") if r.top_category is not None else ""
            top = "" if r.top_category is None else r.top_category
            writer.writerow([r.frame_index, top, name, int(r.all_zero), int(r.missing_labels)]
                            + [repr(r.masses[c]) if c in r.masses else "" for c in cats])


def read_category_report(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            masses = {int(k[5:]): float(v) for k, v in rec.items() if k.startswith("mass_") and v}
            top = int(rec["top_category"]) if rec["top_category"] else None
            rows.append(CategoryRow(int(rec["frame_index"]), top, masses,
                                    bool(int(rec["all_zero"])), bool(int(rec["missing_labels"]))))
    return rows
