"""Figures for a sweep: mean valid lower bound and empirical error rate against n.

Optional output only; the CSV written by the sweep is the data contract.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _series(result, name):
    rows = sorted((r for r in result.rows if r.estimator == name), key=lambda r: r.n)
    return rows


def plot_bounds(result, path, title=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(dict.fromkeys(r.estimator for r in result.rows))
    for name in names:
        rows = _series(result, name)
        n = np.array([r.n for r in rows])
        mean = np.array([r.mean_bound for r in rows])
        err = np.array([[r.mean_bound - r.ci_low for r in rows], [r.ci_high - r.mean_bound for r in rows]])
        ax.errorbar(n, mean, yerr=np.nan_to_num(err), marker="o", ms=3, capsize=2, label=name)
    ax.axhline(result.v_true, color="k", ls="--", lw=1, label="V(pi_e)")
    ax.set_xscale("log")
    ax.set_xlabel("trajectories n")
    ax.set_ylabel("mean valid lower bound")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_rates(result, path, delta=None, title=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(dict.fromkeys(r.estimator for r in result.rows))
    for name in names:
        rows = _series(result, name)
        ax.plot([r.n for r in rows], [r.error_rate for r in rows], marker="o", ms=3, label=name)
    if delta is not None:
        ax.axhline(delta, color="k", ls="--", lw=1, label="delta")
    ax.set_xscale("log")
    ax.set_ylim(bottom=0)
    ax.set_xlabel("trajectories n")
    ax.set_ylabel("empirical error rate")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(result, directory, stem="sweep") -> list:
    """Write ``<stem>_bounds.png`` and ``<stem>_error_rate.png``; return their paths."""
    os.makedirs(directory, exist_ok=True)
    cfg = result.config
    title = cfg.env if cfg else ""
    paths = [os.path.join(directory, f"{stem}_bounds.png"), os.path.join(directory, f"{stem}_error_rate.png")]
    plot_bounds(result, paths[0], title)
    plot_error_rates(result, paths[1], cfg.delta if cfg else None, title)
    return paths
