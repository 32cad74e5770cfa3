"""Matplotlib rendering for replay, training, evaluation and sweep output.

Every CLI report path writes a vector figure (SVG) next to its delimited
output; trajectory plots color each agent's path by time, matching the
blue-to-green convention of the trajectory figures this tool reproduces.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402
from matplotlib.patches import Circle, Rectangle  # noqa: E402

CMAP = "winter"


def _draw_layout(ax, layout):
    for obstacle in layout.present():
        if obstacle.shape == "circle":
            ax.add_patch(Circle((obstacle.x, obstacle.y), obstacle.radius,
                                facecolor="0.2", edgecolor="black", zorder=2))
        else:
            ax.add_patch(Rectangle(
                (obstacle.x - obstacle.w / 2.0, obstacle.y - obstacle.h / 2.0),
                obstacle.w, obstacle.h,
                facecolor="0.2", edgecolor="black", zorder=2))


def render_episode(log, path, arena=None, title=None):
    """Layout plus per-agent trajectories colored by time."""
    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    _draw_layout(ax, log.layout)
    t_total = log.pos.shape[0]
    for i in range(log.n_agents):
        pts = log.pos[:, i, :]
        if t_total > 1:
            segs = np.stack([pts[:-1], pts[1:]], axis=1)
            lc = LineCollection(segs, cmap=CMAP, zorder=3,
                                array=np.arange(t_total - 1) * log.dt)
            ax.add_collection(lc)
        ax.plot(*log.starts[i], marker="o", color="tab:blue", ms=6, zorder=4)
        ax.add_patch(Circle(log.goals[i], log.goal_tolerance, fill=False,
                            edgecolor="tab:green", lw=1.5, zorder=4))
    if t_total > 1:
        cbar = fig.colorbar(lc, ax=ax, shrink=0.8)
        cbar.set_label("time [s]")
    if arena is not None:
        ax.set_xlim(*arena[0])
        ax.set_ylim(*arena[1])
    else:
        ax.autoscale()
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_training_curve(record, path, smooth=10):
    """Objective estimate per outer iteration with a running mean."""
    curve = record.objective_curve()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if curve.size:
        ax.plot(curve, color="0.7", lw=0.8, label="per-iteration")
        if curve.size >= smooth:
            kernel = np.ones(smooth) / smooth
            ax.plot(np.arange(smooth - 1, curve.size),
                    np.convolve(curve, kernel, mode="valid"),
                    color="tab:blue", lw=1.8, label=f"{smooth}-iter mean")
        ax.legend()
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("objective estimate")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_metric_bars(reports, path):
    """Grouped bars over evaluation modes for the four metrics."""
    metrics = ("spl", "pctspeed", "numcoll", "diffacc")
    modes = list(reports)
    fig, axes = plt.subplots(1, 4, figsize=(12.0, 3.2))
    for ax, metric in zip(axes, metrics):
        vals = [getattr(reports[m], metric) for m in modes]
        errs = [reports[m].std.get(metric, 0.0) for m in modes]
        ax.bar(range(len(modes)), vals, yerr=errs, capsize=3,
               color=["tab:blue", "tab:orange", "tab:green"][:len(modes)])
        ax.set_xticks(range(len(modes)))
        ax.set_xticklabels(modes, rotation=20, ha="right", fontsize=8)
        ax.set_title(metric)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_sweep(rows, path):
    """Tracking error and bound against the step size, per problem."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    problems = sorted({r["problem"] for r in rows})
    for name in problems:
        sub = sorted((r for r in rows if r["problem"] == name),
                     key=lambda r: r["delta_alpha"])
        xs = [r["delta_alpha"] for r in sub]
        ax.plot(xs, [r["max_error"] for r in sub], "o-", label=f"{name} error")
        ax.plot(xs, [r["bound"] for r in sub], "s--", label=f"{name} bound")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("step size")
    ax.set_ylabel("max tracking error")
    if problems:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
