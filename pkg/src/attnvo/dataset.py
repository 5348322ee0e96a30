"""KITTI odometry ingestion: pose files, images, windows and splits.

Expected layout under a dataset root::

    sequences/<id>/image_2/<frame>.png
    poses/<id>.txt
"""

from dataclasses import dataclass, field
import logging
import os

import numpy as np
from PIL import Image, UnidentifiedImageError
import torch
import torch.nn.functional as F

from . import se3
from .errors import InvalidArgumentError, ParseError

log = logging.getLogger(__name__)

IMAGE_SIZE = (218, 720)  # (height, width)
TRAIN_IDS = ("00", "01", "02", "08", "09")
TEST_IDS = ("03", "04", "05", "06", "07", "10")
REORTHO_TOL = 1e-3


@dataclass
class SequenceRecord:
    sequence_id: str
    image_paths: list
    global_poses: list

    def __post_init__(self):
        if len(self.image_paths) != len(self.global_poses):
            raise InvalidArgumentError(
                f"sequence {self.sequence_id}: {len(self.image_paths)} images but "
                f"{len(self.global_poses)} poses")

    @property
    def length(self):
        return len(self.global_poses)

    def relative_twists(self, start=0, stop=None):
        stop = self.length if stop is None else stop
        return [se3.log_map(se3.relative(self.global_poses[i], self.global_poses[i + 1]))
                for i in range(start, stop - 1)]


@dataclass
class FrameWindow:
    sequence_id: str
    start_index: int
    image_paths: list
    relative_twists: np.ndarray  # (N, 6)
    frames: torch.Tensor = None  # (N+1, 3, H, W) once loaded

    @property
    def n_pairs(self):
        return len(self.relative_twists)

    @property
    def key(self):
        return f"{self.sequence_id}:{self.start_index}+{len(self.image_paths)}"

    def load(self, image_size=IMAGE_SIZE, cache=None):
        if self.frames is None:
            self.frames = load_frames(self.image_paths, image_size, cache)
        return self.frames


@dataclass
class SplitConfig:
    train_ids: tuple = TRAIN_IDS
    test_ids: tuple = TEST_IDS
    validation_fraction: float = 0.05
    # number of frames per window, inclusive range
    window_length_range: tuple = (5, 10)
    seed: int = 0

    def validate(self):
        if set(self.train_ids) & set(self.test_ids):
            raise InvalidArgumentError("train and test sequences overlap")
        if not 0.0 < self.validation_fraction < 1.0:
            raise InvalidArgumentError("validation_fraction must be in (0, 1)")
        lo, hi = self.window_length_range
        if lo < 2 or hi < lo:
            raise InvalidArgumentError(f"bad window_length_range {self.window_length_range}")


def format_pose(T):
    T = np.asarray(T, dtype=np.float64)
    return " ".join(repr(float(x)) for x in T[:3].reshape(-1))


def write_pose_file(path, poses):
    with open(path, "w") as fh:
        for T in poses:
            fh.write(format_pose(T) + "\n")


def parse_pose_file(path):
    """Read a KITTI pose file (12 row-major 3x4 values per line)."""
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 12:
                raise ParseError(f"expected 12 values, got {len(tokens)}", path, lineno)
            try:
                vals = np.array([float(t) for t in tokens])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", path, lineno)
            T = np.eye(4)
            T[:3] = vals.reshape(3, 4)
            R = T[:3, :3]
            err = max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
            if err > REORTHO_TOL:
                log.warning("%s:%d: rotation off by %.2e, re-orthonormalizing", path, lineno, err)
                T = se3.project_to_pose(T)
            poses.append(T)
    return poses


def _to_array(image):
    if isinstance(image, (str, os.PathLike)):
        try:
            with Image.open(image) as im:
                return np.asarray(im.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            raise OSError(f"cannot decode image {image}: {exc}") from exc
    if isinstance(image, Image.Image):
        return np.asarray(image.convert("RGB"))
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgumentError(f"expected (H, W, 3) image, got {arr.shape}")
    return arr


def preprocess(image, size=IMAGE_SIZE):
    """Bilinear resize to ``size`` (height, width) and map pixels to x/255 - 0.5.

    Accepts a path, PIL image or (H, W, 3) uint8 array; returns (3, H, W) float32.
    """
    arr = _to_array(image).astype(np.float32)
    x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False,
                          antialias=True)
        x = x.clamp(0.0, 255.0)
    return (x[0] / 255.0 - 0.5).contiguous()


def to_uint8_image(frame):
    """Inverse of the preprocessing normalization: (3, H, W) -> (H, W, 3) uint8."""
    x = frame.detach().cpu().numpy() if isinstance(frame, torch.Tensor) else np.asarray(frame)
    x = np.clip((x + 0.5) * 255.0, 0, 255)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


def load_frames(paths, size=IMAGE_SIZE, cache=None):
    out = []
    for p in paths:
        if cache is not None and p in cache:
            out.append(cache[p])
            continue
        t = preprocess(p, size)
        if cache is not None:
            cache[p] = t
        out.append(t)
    return torch.stack(out)


def load_sequence(root, sequence_id):
    seq_id = str(sequence_id)
    pose_path = os.path.join(root, "poses", f"{seq_id}.txt")
    image_dir = os.path.join(root, "sequences", seq_id, "image_2")
    if not os.path.isfile(pose_path):
        raise FileNotFoundError(f"missing pose file {pose_path}")
    if not os.path.isdir(image_dir):
        raise FileNotFoundError(f"missing image directory {image_dir}")
    poses = parse_pose_file(pose_path)
    names = sorted(f for f in os.listdir(image_dir) if f.lower().endswith(".png"))
    paths = [os.path.join(image_dir, f) for f in names]
    return SequenceRecord(seq_id, paths, poses)


def make_window(record, start, n_frames):
    stop = start + n_frames
    if start < 0 or stop > record.length or n_frames < 2:
        raise InvalidArgumentError(
            f"window [{start}, {stop}) invalid for sequence of length {record.length}")
    twists = np.array(record.relative_twists(start, stop))
    return FrameWindow(record.sequence_id, start, list(record.image_paths[start:stop]), twists)


def sample_windows(record, cfg: SplitConfig, count, rng=None):
    """Draw ``count`` windows with uniform random lengths and start frames."""
    lo, hi = cfg.window_length_range
    if record.length <= hi:
        raise InvalidArgumentError(
            f"sequence {record.sequence_id} has {record.length} frames; need more than {hi}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    windows = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, record.length - n + 1))
        windows.append(make_window(record, start, n))
    return windows


def sample_training_windows(records, cfg: SplitConfig, count_per_sequence):
    rng = np.random.default_rng(cfg.seed)
    windows = []
    for rec in records:
        windows += sample_windows(rec, cfg, count_per_sequence, rng)
    return windows


def validation_size(n, fraction):
    # round half up
    return int(np.floor(n * fraction + 0.5))


def split_validation(windows, cfg: SplitConfig):
    """Seeded partition into (train, validation) lists."""
    if not windows:
        raise InvalidArgumentError("no windows to split")
    n_val = validation_size(len(windows), cfg.validation_fraction)
    perm = np.random.default_rng([cfg.seed, 1]).permutation(len(windows))
    val_idx = set(perm[:n_val].tolist())
    train = [w for i, w in enumerate(windows) if i not in val_idx]
    val = [w for i, w in enumerate(windows) if i in val_idx]
    return train, val


def epoch_order(n, seed, epoch):
    """Shuffled index order for one epoch; differs per epoch, fixed per seed."""
    return np.random.default_rng([seed, 2, epoch]).permutation(n)
