"""Static figures: training curves and top-down trajectories."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata without a software/version tag keeps files byte-stable
_PNG_META = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
}

TRAIN_COLOR = "tab:blue"
TEST_COLOR = "tab:green"


def figsize(width=6.4, ratio=0.618):
    return (width, width * ratio)


def rolling(values, window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` values (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_training_curves(rows, path, train_window: int = 200, test_window: int = 100) -> None:
    """Success rate and average reward against episode, split into train/test."""
    groups = {}
    for flag, window in ((0, train_window), (1, test_window)):
        sel = [r for r in rows if int(r["is_test"]) == flag]
        if not sel:
            continue
        ep = np.array([int(r["episode"]) for r in sel])
        arrivals = np.array([r["terminal"] == "arrival" for r in sel], dtype=float)
        rewards = np.array([float(r["total_reward"]) for r in sel])
        groups[flag] = (ep, rolling(arrivals, window), rolling(rewards, window))

    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=figsize(6.4, 0.8))
        for flag, (ep, sr, ar) in groups.items():
            label, color = ("held-out targets", TEST_COLOR) if flag else ("training targets", TRAIN_COLOR)
            ax1.plot(ep, sr, color=color, label=label)
            ax2.plot(ep, ar, color=color, label=label)
        ax1.set_ylabel("success rate")
        ax1.set_ylim(-0.02, 1.02)
        ax2.set_ylabel("average reward")
        ax2.set_xlabel("episode")
        if groups:
            ax1.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_META)
        plt.close(fig)


def plot_trajectory(env_map, trajectory, target, path, title: str | None = None) -> None:
    """Top-down view: walls, the driven path, start and target markers."""
    xy = np.array([(row[1], row[2]) for row in trajectory]) if trajectory else np.zeros((0, 2))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for w in env_map.walls:
            ax.plot([w.p1[0], w.p2[0]], [w.p1[1], w.p2[1]], color=np.array(w.color) / 255.0, lw=3,
                    solid_capstyle="butt")
        for t in env_map.train_targets:
            ax.plot(*t, "s", color="tab:blue", ms=7, alpha=0.5)
        for t in env_map.test_targets:
            ax.plot(*t, "s", color="tab:green", ms=7, alpha=0.5)
        if len(xy):
            ax.plot(xy[:, 0], xy[:, 1], color="black", lw=1.0)
        sx, sy, sh = env_map.start_pose
        ax.plot(sx, sy, "o", color="tab:red", ms=6)
        ax.arrow(sx, sy, 0.3 * np.cos(sh), 0.3 * np.sin(sh), head_width=0.08, color="tab:red")
        ax.plot(*target, "*", color="gold", mec="black", ms=12)
        xmin, ymin, xmax, ymax = env_map.bounds
        ax.set_xlim(xmin - 0.1, xmax + 0.1)
        ax.set_ylim(ymin - 0.1, ymax + 0.1)
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_META)
        plt.close(fig)
