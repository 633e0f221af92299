"""Figures written next to the CSV outputs of the command-line tool."""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def plot_trace(trace_csv, out_path):
    """Per-iteration objective and marginal log-likelihood."""
    rows = _read_rows(trace_csv)
    fig, (ax_obj, ax_ll) = plt.subplots(1, 2, figsize=(9, 3.5))
    em = [r for r in rows if r["phase"] == "em"]
    ax_obj.plot([int(r["iteration"]) for r in em], [float(r["objective"]) for r in em], marker="o")
    ax_obj.set_xlabel("EM iteration")
    ax_obj.set_ylabel("expected log-likelihood")
    ax_ll.plot([int(r["iteration"]) for r in rows], [float(r["marginal_ll"]) for r in rows],
               marker="o", label="EM")
    tuned = [r for r in rows if r["phase"] == "fine_tune"]
    if tuned:
        ax_ll.scatter([int(r["iteration"]) for r in tuned],
                      [float(r["marginal_ll"]) for r in tuned], color="C3", zorder=3,
                      label="fine-tune")
        ax_ll.legend()
    ax_ll.set_xlabel("step")
    ax_ll.set_ylabel("marginal log-likelihood")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_sweep(sweep_csv, out_path):
    """Mean accuracy with standard-error bars against redundancy, one line
    per method."""
    rows = _read_rows(sweep_csv)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in dict.fromkeys(r["method"] for r in rows):
        cell = sorted((int(r["redundancy"]), float(r["mean_acc"]), float(r["std_err"]))
                      for r in rows if r["method"] == method)
        ax.errorbar([c[0] for c in cell], [c[1] for c in cell], yerr=[c[2] for c in cell],
                    marker="o", capsize=3, label=method)
    ax.set_xlabel("redundancy")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
