"""Command-line entry point: ``attnvo {train,evaluate,plot,attribute,consistency}``.

Exit codes: 0 success, 2 usage/config error, 3 data or I/O error, 4 numeric failure.
All artifacts go under ``--out``; each run writes one ``manifest.json`` there.
"""

import argparse
import datetime
import json
import logging
import os
import subprocess
import sys

import numpy as np

from . import attribution, evaluation, plotting, training
from . import dataset as ds
from .config import ConfigError, ExperimentConfig, parse_overrides
from .errors import DegenerateRotationError, InvalidArgumentError, NumericError, ParseError
from .network import build_model, load_encoder_weights, parameter_count
from .objective import CovarianceMatrix, fit_covariance

log = logging.getLogger("attnvo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ROOT_ENV = "ATTNVO_DATA_ROOT"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def git_describe():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_manifest(out_dir, command, config, seed, data_root, started, **extra):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
        "data_root": data_root,
        "out_dir": os.path.abspath(out_dir),
        "started": started,
        "finished": _now(),
    }
    manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return manifest


def resolve_data_root(root):
    root = root or os.environ.get(DATA_ROOT_ENV, "")
    if not root:
        raise UsageError(f"no dataset root given (--data-root or ${DATA_ROOT_ENV})")
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root} does not exist")
    return root


def load_records(root, ids):
    try:
        return [ds.load_sequence(root, s) for s in ids]
    except (OSError, ParseError) as exc:
        raise DataError(str(exc)) from exc


def load_checkpoint(path):
    if not path or not os.path.isfile(path):
        raise DataError(f"checkpoint {path} not found")
    return training.Checkpoint.load(path)


# ---------------------------------------------------------------------------


def cmd_train(args, overrides):
    started = _now()
    cfg = ExperimentConfig.from_file(args.config, parse_overrides(overrides))
    if args.data_root:
        cfg.data.root = args.data_root
    root = resolve_data_root(cfg.data.root)
    cfg.data.root = root
    split = cfg.data.split_config(cfg.train.seed)
    try:
        split.validate()
        cfg.train.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    records = load_records(root, split.train_ids)

    gt_twists = [xi for rec in records for xi in rec.relative_twists()]
    cov = fit_covariance(gt_twists)
    windows = ds.sample_training_windows(records, split, cfg.data.windows_per_sequence)
    train_w, val_w = ds.split_validation(windows, split)

    net_cfg = cfg.model.network_config(cfg.train.attention_enabled)
    model = build_model(net_cfg, seed=cfg.train.seed)
    if cfg.model.pretrained:
        load_encoder_weights(model, cfg.model.pretrained)
    os.makedirs(args.out, exist_ok=True)
    try:
        best = training.train(cfg.train, train_w, val_w, model, cov, out_dir=args.out,
                              image_size=cfg.data.image_size,
                              extra_config={"experiment": cfg.to_dict()})
    except OSError as exc:
        raise DataError(str(exc)) from exc
    curve = best.config["curve"]
    plotting.plot_training_curve(curve, os.path.join(args.out, "training_curve.png"))
    write_manifest(args.out, "train", cfg.to_dict(), cfg.train.seed, root, started,
                   attention_enabled=cfg.train.attention_enabled,
                   parameter_count=parameter_count(model), best_epoch=best.epoch,
                   best_val_loss=best.val_loss, n_train_windows=len(train_w),
                   n_val_windows=len(val_w))
    print(f"best epoch {best.epoch}: validation loss {best.val_loss:.6g}")
    return EXIT_OK


def cmd_evaluate(args, overrides):
    started = _now()
    root = resolve_data_root(args.data_root)
    if args.oracle:
        ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
        cov = ckpt.covariance if ckpt else CovarianceMatrix.identity()
        image_size = (64, 64)
    else:
        ckpt = load_checkpoint(args.checkpoint)
        cov = ckpt.covariance
        image_size = tuple(ckpt.config["image_size"])
        model = ckpt.build_model()
    records = load_records(root, args.sequences)
    os.makedirs(args.out, exist_ok=True)
    traj_dir = os.path.join(args.out, "trajectories")
    loss_dir = os.path.join(args.out, "losses")
    os.makedirs(traj_dir, exist_ok=True)
    os.makedirs(loss_dir, exist_ok=True)
    report = evaluation.MetricReport()
    for rec in records:
        if args.oracle:
            model = evaluation.GroundTruthModel(rec.relative_twists())
        try:
            pred = evaluation.predict_sequence(model, rec, image_size, args.chunk)
        except OSError as exc:
            raise DataError(str(exc)) from exc
        est = evaluation.integrate(pred)
        gt = evaluation.Trajectory(rec.global_poses)
        report.merge(evaluation.kitti_relative_errors(est, gt, rec.sequence_id))
        ds.write_pose_file(os.path.join(traj_dir, f"{rec.sequence_id}_est.txt"), est.poses)
        ds.write_pose_file(os.path.join(traj_dir, f"{rec.sequence_id}_gt.txt"), gt.poses)
        losses = evaluation.per_frame_loss(model, rec, cov, predictions=pred)
        evaluation.write_frame_losses(os.path.join(loss_dir, f"{rec.sequence_id}.csv"), losses)
        plotting.plot_frame_losses([("estimate", losses)],
                                   os.path.join(loss_dir, f"{rec.sequence_id}.png"),
                                   title=f"sequence {rec.sequence_id}")
    evaluation.write_report(os.path.join(args.out, "metrics.csv"), report)
    evaluation.write_detail(os.path.join(args.out, "metrics_detail.csv"), report)
    print(evaluation.format_table(report))
    write_manifest(args.out, "evaluate", {"checkpoint": args.checkpoint, "oracle": args.oracle,
                                          "sequences": list(args.sequences)},
                   ckpt.config["train"]["seed"] if ckpt else None, root, started)
    return EXIT_OK


def _read_trajectory(path):
    try:
        return ds.parse_pose_file(path)
    except ParseError as exc:
        raise UsageError(str(exc)) from exc
    except OSError as exc:
        raise DataError(str(exc)) from exc


def cmd_plot(args, overrides):
    started = _now()
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    if args.from_eval:
        traj_dir = os.path.join(args.from_eval, "trajectories")
        if not os.path.isdir(traj_dir):
            raise DataError(f"{traj_dir} not found")
        seqs = sorted(f[:-8] for f in os.listdir(traj_dir) if f.endswith("_est.txt"))
        for seq in seqs:
            est = _read_trajectory(os.path.join(traj_dir, f"{seq}_est.txt"))
            gt = _read_trajectory(os.path.join(traj_dir, f"{seq}_gt.txt"))
            path = os.path.join(args.out, f"trajectory_{seq}.png")
            plotting.plot_trajectories([("ground truth", gt), ("estimate", est)], path,
                                       title=f"sequence {seq}")
            outputs.append(path)
    if args.files:
        labels = args.labels or [os.path.splitext(os.path.basename(f))[0] for f in args.files]
        if len(labels) != len(args.files):
            raise UsageError("--labels must match the number of trajectory files")
        trajs = [(lab, _read_trajectory(f)) for lab, f in zip(labels, args.files)]
        stem = os.path.splitext(os.path.basename(args.files[0]))[0]
        path = os.path.join(args.out, f"trajectory_{stem}.png")
        plotting.plot_trajectories(trajs, path)
        outputs.append(path)
    if not outputs:
        raise UsageError("nothing to plot: give trajectory files or --from-eval DIR")
    for p in outputs:
        print(p)
    write_manifest(args.out, "plot", {"files": args.files, "from_eval": args.from_eval}, None,
                   None, started, outputs=outputs)
    return EXIT_OK


def cmd_attribute(args, overrides):
    started = _now()
    root = resolve_data_root(args.data_root)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    image_size = tuple(ckpt.config["image_size"])
    (rec,) = load_records(root, [args.sequence])
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for k in args.frames:
        if not 0 <= k < rec.length - 1:
            raise UsageError(f"frame {k} has no successor in sequence {rec.sequence_id}")
        frames = ds.load_frames(rec.image_paths[k:k + 2], image_size)
        amap = attribution.attribute_pair(model, frames[0], frames[1], args.steps, args.target)
        overlay = attribution.render_overlay(ds.to_uint8_image(frames[0]), amap.collapsed,
                                             args.peak_alpha)
        stem = os.path.join(args.out, f"{rec.sequence_id}_{k:06d}")
        attribution.save_png(stem + "_overlay.png", overlay)
        np.save(stem + "_saliency.npy", amap.collapsed)
        outputs.append(stem + "_overlay.png")
    write_manifest(args.out, "attribute", {"checkpoint": args.checkpoint, "sequence": args.sequence,
                                           "frames": list(args.frames), "steps": args.steps,
                                           "target": args.target},
                   ckpt.config["train"]["seed"], root, started, outputs=outputs)
    return EXIT_OK


def cmd_consistency(args, overrides):
    started = _now()
    root = resolve_data_root(args.data_root)
    label_root = args.labels or os.path.join(root, "labels")
    if not os.path.isdir(label_root):
        raise UsageError(f"label directory {label_root} not found")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    image_size = tuple(ckpt.config["image_size"])
    (rec,) = load_records(root, [args.sequence])
    os.makedirs(args.out, exist_ok=True)
    try:
        report = attribution.consistency_series(model, rec, label_root, args.frame_count,
                                                args.start, image_size, args.steps, args.target)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    csv_path = os.path.join(args.out, f"consistency_{rec.sequence_id}.csv")
    attribution.write_category_report(csv_path, report)
    plotting.plot_category_timeline(report.rows, report.vocabulary,
                                    os.path.join(args.out, f"consistency_{rec.sequence_id}.png"),
                                    title=f"top salient category, sequence {rec.sequence_id}")
    write_manifest(args.out, "consistency", {"checkpoint": args.checkpoint,
                                             "sequence": args.sequence,
                                             "frame_count": args.frame_count,
                                             "start": args.start, "steps": args.steps},
                   ckpt.config["train"]["seed"], root, started)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="attnvo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model",
                       description="Train. Extra --key=value flags override config entries "
                                   "(e.g. --attention=false, --train.max_epochs=2).")
    t.add_argument("--config", help="INI config file")
    t.add_argument("--data-root", help=f"dataset root (falls back to ${DATA_ROOT_ENV})")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="KITTI relative errors and per-frame losses")
    e.add_argument("--checkpoint")
    e.add_argument("--data-root")
    e.add_argument("--sequences", nargs="+", default=list(ds.TEST_IDS))
    e.add_argument("--out", required=True)
    e.add_argument("--chunk", type=int, default=16, help="frames per streamed chunk")
    e.add_argument("--oracle", action="store_true",
                   help="replay ground-truth twists instead of a model (pipeline check)")
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plot", help="top-down trajectory plots")
    pl.add_argument("files", nargs="*", help="KITTI pose files overlaid in one figure")
    pl.add_argument("--labels", nargs="+")
    pl.add_argument("--from-eval", help="evaluate output dir; one figure per sequence")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    a = sub.add_parser("attribute", help="integrated-gradients overlays")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data-root")
    a.add_argument("--sequence", required=True)
    a.add_argument("--frames", type=int, nargs="+", required=True)
    a.add_argument("--steps", type=int, default=attribution.DEFAULT_STEPS)
    a.add_argument("--target", default="translation_norm",
                   help="translation_norm or twist axis 0-5")
    a.add_argument("--peak-alpha", type=float, default=attribution.PEAK_ALPHA)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attribute)

    c = sub.add_parser("consistency", help="top salient category per frame")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data-root")
    c.add_argument("--sequence", required=True)
    c.add_argument("--labels", help="label root (default <data-root>/labels)")
    c.add_argument("--frame-count", type=int, default=50)
    c.add_argument("--start", type=int, default=0)
    c.add_argument("--steps", type=int, default=attribution.DEFAULT_STEPS)
    c.add_argument("--target", default="translation_norm")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_consistency)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and args.command != "train":
        print(f"error: unrecognized arguments: {' '.join(extra)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ParseError, InvalidArgumentError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DegenerateRotationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
