"""Delimited result files and the figures rendered alongside them.

Every report path writes machine-readable CSV/JSON records stamped with
the config hash and tool version, and renders a matplotlib figure next to
each delimited file.  Wall-clock timestamps never enter the records; they
go to a sidecar file so the records stay byte-reproducible.
"""

import json
import os
import time

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import __version__

_PNG_META = {"Software": "kpsr"}


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def write_sidecar(out_dir, name: str = "run_meta.json"):
    """Timestamp- and host-dependent metadata lives only here."""
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        json.dump({"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                   "tool_version": __version__}, fh, indent=2)
        fh.write("\n")


def write_csv(path, header_cols, rows, config_hash: str):
    lines = [f"# config_hash={config_hash}", f"# tool_version={__version__}",
             ",".join(header_cols)]
    for row in rows:
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x) for x in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_json(path, payload: dict, config_hash: str):
    payload = dict(payload)
    payload["config_hash"] = config_hash
    payload["tool_version"] = __version__
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def training_figure(log_rows, n_risks: int, cbar, path):
    """J/V trace, risk traces against their thresholds, and multipliers."""
    if not log_rows:
        return
    rows = np.asarray([[float(x) for x in r] for r in log_rows])
    k = rows[:, 0]
    n_panels = 2 if n_risks else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(5.5 * n_panels, 3.6))
    axes = np.atleast_1d(axes)
    axes[0].plot(k, rows[:, 1], label="J")
    axes[0].plot(k, rows[:, 2], label="V", ls="--")
    axes[0].set_xlabel("iteration")
    axes[0].set_title("objective and value")
    axes[0].legend(frameon=False)
    if n_risks:
        for i in range(n_risks):
            axes[1].plot(k, rows[:, 3 + i], label=f"C_{i + 1}")
            axes[1].axhline(cbar[i], color="k", lw=0.8, ls=":")
            axes[1].plot(k, rows[:, 3 + n_risks + i], label=f"eta_{i + 1}", ls="--")
        axes[1].set_xlabel("iteration")
        axes[1].set_title("risks and multipliers")
        axes[1].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def convergence_figure(ks, per_seed, mean_errors, slope, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    for seed, errs in sorted(per_seed.items()):
        ax.plot(ks, errs, "o-", alpha=0.35, lw=0.8, ms=3)
    ax.plot(ks, mean_errors, "ks-", label=f"mean (slope {slope:.2f})")
    ref = mean_errors[0] * (np.asarray(ks, dtype=float) / ks[0]) ** -0.5
    ax.plot(ks, ref, "r:", label="K^{-1/2} reference")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("sample count K")
    ax.set_ylabel("forward operator TV error")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def evaluation_figure(rows, path):
    """Estimated vs exact value/risk per policy."""
    if not rows:
        return
    names = [r["policy"] for r in rows]
    x = np.arange(len(names))
    width = 0.35
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.bar(x - width / 2, [r["V_est"] for r in rows], width, label="V estimated")
    ax.bar(x + width / 2, [r["V_exact"] for r in rows], width, label="V exact")
    ax.set_xticks(x, names)
    ax.set_ylabel("(W+1)-step value")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def bellman_figure(trace, path):
    if not trace:
        return
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(range(1, len(trace) + 1), np.abs(trace), "o-")
    ax.axhline(0.05, color="k", lw=0.8, ls=":")
    ax.set_yscale("log")
    ax.set_xlabel("link refit")
    ax.set_ylabel("|Bellman loss|")
    fig.tight_layout()
    _save(fig, path)
