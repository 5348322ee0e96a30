"""Synthetic KITTI-layout mini datasets with analytic poses.

Frames are rendered by projecting a random cloud of coloured 3-D points
through a pinhole camera that follows a gently curving forward path, so the
image motion really does encode the pose change. Matching palette label maps
are written under ``labels/`` for the saliency consistency tooling.
"""

import os

import numpy as np
from PIL import Image

from . import se3
from .dataset import write_pose_file

VOCAB = {0: "sky", 1: "road", 2: "building", 3: "car"}
_PALETTE = [135, 206, 235, 90, 90, 90, 200, 120, 60, 220, 20, 20]


def fixture_poses(n_frames, speed=6.0, yaw_amplitude=0.03, yaw_period=15.0, phase=0.0):
    """Camera-to-world poses moving along +z (camera forward) with smooth wobble.

    Each step is the exponential of a twist whose six components all vary
    sinusoidally, so every axis has nonzero variance.
    """
    poses = []
    T = np.eye(4)
    for k in range(n_frames):
        poses.append(T.copy())
        a = 2 * np.pi * k / yaw_period + phase
        xi = np.array([
            0.05 * speed * np.sin(1.3 * a),
            0.01 * speed * np.sin(2.1 * a + 0.4),
            speed * (1.0 + 0.15 * np.sin(0.7 * a)),
            0.004 * np.sin(1.7 * a + 1.0),
            yaw_amplitude * np.sin(a),
            0.003 * np.cos(2.3 * a),
        ])
        T = T @ se3.exp_map(xi)
    return poses


def _world(rng, extent, n_points):
    x = rng.uniform(-25.0, 25.0, n_points)
    y = rng.uniform(-5.0, 1.6, n_points)
    z = rng.uniform(-10.0, extent, n_points)
    pts = np.stack([x, y, z], axis=1)
    colors = rng.integers(30, 256, size=(n_points, 3))
    category = np.where(np.abs(x) > 8.0, 2, 3)
    return pts, colors, category


def render_frame(T_cw, pts, colors, category, size):
    """Paint the point cloud as seen from camera pose ``T_cw``."""
    h, w = size
    f = 0.9 * w
    img = np.empty((h, w, 3), dtype=np.uint8)
    labels = np.empty((h, w), dtype=np.uint8)
    horizon = h // 2
    rows = np.arange(h)[:, None]
    img[:] = np.where(rows < horizon, [[150, 190, 230]], [[80, 80, 80]]).reshape(h, 1, 3)
    labels[:] = np.where(rows < horizon, 0, 1)
    R, t = T_cw[:3, :3], T_cw[:3, 3]
    cam = (pts - t) @ R  # world -> camera: R^T (p - t)
    front = cam[:, 2] > 0.5
    cam, cols, cats = cam[front], colors[front], category[front]
    order = np.argsort(-cam[:, 2])
    for i in order:
        x, y, z = cam[i]
        u = int(round(f * x / z + w / 2))
        v = int(round(f * y / z + h / 2))
        r = max(1, int(round(6.0 / z * f / 20)))
        u0, u1 = max(u - r, 0), min(u + r + 1, w)
        v0, v1 = max(v - r, 0), min(v + r + 1, h)
        if u0 >= u1 or v0 >= v1:
            continue
        img[v0:v1, u0:u1] = cols[i]
        labels[v0:v1, u0:u1] = cats[i]
    return img, labels


def write_label_png(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    im = Image.frombytes("P", (labels.shape[1], labels.shape[0]), labels.tobytes())
    im.putpalette(_PALETTE + [0] * (768 - len(_PALETTE)))
    im.save(path)


def make_fixture(root, n_sequences=3, n_frames=20, size=(64, 192), seed=0, speed=6.0,
                 n_points=500, with_labels=True):
    """Write a mini dataset under ``root``; returns the sequence ids."""
    rng = np.random.default_rng(seed)
    ids = [f"{i:02d}" for i in range(n_sequences)]
    os.makedirs(os.path.join(root, "poses"), exist_ok=True)
    if with_labels:
        os.makedirs(os.path.join(root, "labels"), exist_ok=True)
        with open(os.path.join(root, "labels", "vocab.txt"), "w") as fh:
            for k, name in VOCAB.items():
                fh.write(f"{k}\t{name}\n")
    for i, seq in enumerate(ids):
        poses = fixture_poses(n_frames, speed=speed, yaw_amplitude=0.02 + 0.015 * i,
                              phase=0.7 * i)
        write_pose_file(os.path.join(root, "poses", f"{seq}.txt"), poses)
        pts, colors, cats = _world(rng, speed * n_frames + 60.0, n_points)
        image_dir = os.path.join(root, "sequences", seq, "image_2")
        os.makedirs(image_dir, exist_ok=True)
        if with_labels:
            os.makedirs(os.path.join(root, "labels", seq), exist_ok=True)
        for k, T in enumerate(poses):
            img, labels = render_frame(T, pts, colors, cats, size)
            Image.fromarray(img).save(os.path.join(image_dir, f"{k:06d}.png"))
            if with_labels:
                write_label_png(os.path.join(root, "labels", seq, f"{k:06d}.png"), labels)
    return ids
