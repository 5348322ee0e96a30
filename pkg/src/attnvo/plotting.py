"""Figure rendering to files (top-down trajectories, loss traces, category timelines)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.5,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return fig


def trajectory_xz(poses):
    pos = np.array([np.asarray(T)[:3, 3] for T in poses])
    return pos[:, 0], pos[:, 2]


def plot_trajectories(trajectories, path, title=None):
    """Top-down x-z view of one or more trajectories.

    ``trajectories`` is a list of ``(label, poses)``; a single pose lands as a
    marker at its position.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 6))
        for label, poses in trajectories:
            x, z = trajectory_xz(poses)
            ax.plot(x, z, label=label, marker="o" if len(x) == 1 else None)
        ax.plot([0.0], [0.0], "ks", markersize=4, label="start")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("z [m]")
        ax.set_aspect("equal", adjustable="datalim")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        return _save(fig, path)


def plot_frame_losses(series, path, title=None):
    """``series``: list of ``(label, [(frame_index, loss), ...])``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 3))
        for label, rows in series:
            idx = [r[0] for r in rows]
            val = [r[1] for r in rows]
            ax.plot(idx, val, label=label)
        ax.set_xlabel("frame index")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        return _save(fig, path)


def plot_training_curve(curve, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        epochs = [c[0] for c in curve]
        ax.semilogy(epochs, [c[1] for c in curve], label="train")
        ax.semilogy(epochs, [c[2] for c in curve], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(loc="best")
        return _save(fig, path)


def plot_category_timeline(rows, vocabulary, path, title=None):
    """Top salient category per frame; frames without labels are left blank."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 2.5))
        cats = sorted(set(vocabulary) | {r.top_category for r in rows
                                         if r.top_category is not None})
        pos = {c: i for i, c in enumerate(cats)}
        x = [r.frame_index for r in rows if r.top_category is not None]
        y = [pos[r.top_category] for r in rows if r.top_category is not None]
        ax.scatter(x, y, s=18, c=y, cmap="tab10", vmin=0, vmax=9)
        ax.set_yticks(range(len(cats)))
        ax.set_yticklabels([vocabulary.get(c, str(c)) for c in cats])
        ax.set_xlabel("frame index")
        if title:
            ax.set_title(title)
        return _save(fig, path)
