"""Trajectory integration, KITTI relative-error benchmark and per-frame losses."""

import csv
from dataclasses import dataclass, field
import math

import numpy as np
import torch

from . import dataset as ds
from . import se3
from .errors import InvalidArgumentError
from .objective import loss_torch

SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
START_STRIDE = 10
# relative slack when matching a segment length, so rounding in the cumulative
# distance cannot move a segment end that falls exactly on a frame
LENGTH_TOL = 1e-9


@dataclass
class Trajectory:
    poses: list

    def __post_init__(self):
        if len(self.poses) < 1:
            raise InvalidArgumentError("trajectory needs at least one pose")

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return np.array([T[:3, 3] for T in self.poses])

    def relative_twists(self):
        return [se3.log_map(se3.relative(a, b)) for a, b in zip(self.poses[:-1], self.poses[1:])]


@dataclass
class SequenceMetrics:
    t_rel: float  # percent
    r_rel: float  # deg / m
    n_segments: int
    # fewer than 100 m of ground-truth path: no segments were evaluated
    too_short: bool = False


@dataclass
class MetricReport:
    per_sequence: dict = field(default_factory=dict)  # seq -> SequenceMetrics
    # rows: (seq, start_frame, length_m, t_err, r_err), errors per meter
    detail: list = field(default_factory=list)

    @property
    def average(self):
        vals = [m for m in self.per_sequence.values() if not m.too_short]
        if not vals:
            return math.nan, math.nan
        return (float(np.mean([m.t_rel for m in vals])), float(np.mean([m.r_rel for m in vals])))

    def merge(self, other):
        self.per_sequence.update(other.per_sequence)
        self.detail += other.detail
        return self


def integrate(twists, origin=None):
    """Chain twists into global poses starting at ``origin`` (identity by default)."""
    T = np.eye(4) if origin is None else se3.check_pose(origin).copy()
    poses = [T]
    for xi in twists:
        T = T @ se3.exp_map(xi)
        poses.append(T)
    return Trajectory(poses)


def path_distances(poses):
    """Cumulative ground-truth path length at each frame."""
    pos = np.array([T[:3, 3] for T in poses])
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def rotation_error_angle(R):
    # atan2 form: acos of the trace loses ~1e-8 rad of precision near zero error
    return se3.rotation_angle(R)


def kitti_relative_errors(estimate, ground_truth, sequence_id="seq",
                          lengths=SEGMENT_LENGTHS, stride=START_STRIDE):
    """Relative translation (%) and rotation (deg/m) errors over path segments.

    For each start frame on the stride grid and each target length, the segment
    ends at the first frame whose cumulative ground-truth distance reaches the
    length (up to a relative ``LENGTH_TOL``). Segments that would run past the
    end are skipped.
    """
    est = estimate.poses if isinstance(estimate, Trajectory) else list(estimate)
    gt = ground_truth.poses if isinstance(ground_truth, Trajectory) else list(ground_truth)
    if len(est) != len(gt):
        raise InvalidArgumentError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(gt) < 2:
        raise InvalidArgumentError("trajectories need at least 2 poses")
    dist = path_distances(gt)
    rows = []
    for first in range(0, len(gt), stride):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L * (1 - LENGTH_TOL), side="left"))
            if last >= len(gt):
                continue
            rel_gt = se3.relative(gt[first], gt[last])
            rel_est = se3.relative(est[first], est[last])
            E = se3.relative(rel_gt, rel_est)
            t_err = float(np.linalg.norm(E[:3, 3])) / L
            r_err = math.degrees(rotation_error_angle(E[:3, :3])) / L
            rows.append((sequence_id, first, L, t_err, r_err))
    report = MetricReport()
    if rows:
        t_rel = 100.0 * float(np.mean([r[3] for r in rows]))
        r_rel = float(np.mean([r[4] for r in rows]))
        report.per_sequence[sequence_id] = SequenceMetrics(t_rel, r_rel, len(rows))
    else:
        report.per_sequence[sequence_id] = SequenceMetrics(math.nan, math.nan, 0, too_short=True)
    report.detail = rows
    return report


# ---------------------------------------------------------------------------
# running a model over whole sequences


class GroundTruthModel:
    """Stand-in model that replays known twists in order.

    Follows the ``model(frames, state) -> (twists, state)`` calling convention;
    the state is the index of the next twist to emit.
    """

    def __init__(self, twists):
        self.twists = torch.as_tensor(np.asarray(twists), dtype=torch.float64)

    def __call__(self, frames, state=None):
        start = 0 if state is None else state
        n = frames.shape[-4] - 1
        return self.twists[start:start + n], start + n


@torch.no_grad()
def predict_sequence(model, record, image_size=ds.IMAGE_SIZE, chunk=16):
    """Stream a sequence through the model in overlapping chunks.

    Recurrent state is carried from one chunk to the next and starts at zero.
    Returns an (N-1, 6) float64 array of twists.
    """
    if record.length < 2:
        raise InvalidArgumentError("sequence needs at least 2 frames")
    if hasattr(model, "eval"):
        model.eval()
    state = None
    out = []
    start = 0
    while start < record.length - 1:
        stop = min(start + chunk, record.length - 1)
        frames = ds.load_frames(record.image_paths[start:stop + 1], image_size)
        twists, state = model(frames, state)
        out.append(np.asarray(twists.detach().cpu(), dtype=np.float64))
        start = stop
    return np.concatenate(out, axis=0)


def per_frame_loss(model, record, cov, image_size=ds.IMAGE_SIZE, chunk=16, predictions=None):
    """Loss of each consecutive frame pair; returns [(frame_index, loss), ...]."""
    if predictions is None:
        predictions = predict_sequence(model, record, image_size, chunk)
    target = np.array(record.relative_twists())
    losses = loss_torch(torch.as_tensor(predictions), torch.as_tensor(target), cov.sigma_inv)
    return [(i, float(l)) for i, l in enumerate(losses)]


def write_frame_losses(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "loss"])
        for i, l in rows:
            writer.writerow([i, repr(l)])


def read_frame_losses(path):
    with open(path, newline="") as fh:
        return [(int(r["frame_index"]), float(r["loss"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# report I/O

REPORT_COLUMNS = ["seq", "t_rel", "r_rel"]
AVERAGE_ROW = "avg"


def write_report(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for seq, m in report.per_sequence.items():
            writer.writerow([seq, repr(m.t_rel), repr(m.r_rel)])
        t, r = report.average
        writer.writerow([AVERAGE_ROW, repr(t), repr(r)])


def read_report(path):
    """Parse a report CSV back to ``({seq: (t_rel, r_rel)}, (avg_t, avg_r))``."""
    per_seq, avg = {}, None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_COLUMNS:
            raise InvalidArgumentError(f"unexpected report columns {reader.fieldnames}")
        for row in reader:
            vals = (float(row["t_rel"]), float(row["r_rel"]))
            if row["seq"] == AVERAGE_ROW:
                avg = vals
            else:
                per_seq[row["seq"]] = vals
    return per_seq, avg


def write_detail(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seq", "start_frame", "length_m", "t_err", "r_err"])
        for row in report.detail:
            writer.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4])])


def format_table(report):
    lines = [f"{'seq':>6}  {'t_rel(%)':>10}  {'r_rel(deg/m)':>12}"]
    for seq, m in report.per_sequence.items():
        note = "  (shorter than 100 m)" if m.too_short else ""
        lines.append(f"{seq:>6}  {m.t_rel:>10.4f}  {m.r_rel:>12.5f}{note}")
    t, r = report.average
    lines.append(f"{'avg':>6}  {t:>10.4f}  {r:>12.5f}")
    return "\n".join(lines)
