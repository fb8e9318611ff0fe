"""Result emission: delimited files, manifests, and report figures.

Every run directory gets results.csv (one row per checkpoint/probe/sigma
cell), probe_records.csv (per-image records so any AUROC2 in results.csv
can be recomputed externally), decomposition.csv, noop.json where the
condition produces one, manifest.json, and checkpoint files. Margins are
printed with enough digits to round-trip float32 exactly. The summarize
report renders matplotlib figures next to its CSV output; runs with more
than one checkpoint or noise level get a figure alongside results.csv too.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import __version__  # noqa: E402
from .metrics import auroc2_from_arrays  # noqa: E402

RESULTS_HEADER = ["condition", "epoch", "probe", "sigma", "n_eval",
                  "accuracy", "auroc2", "seed"]
RECORDS_HEADER = ["condition", "epoch", "probe", "sigma", "image_index",
                  "predicted", "margin", "correct"]
DECOMP_HEADER = ["condition", "epoch", "image_index", "energy_margin",
                 "logsoftmax_margin", "residual_diff", "structural_correct",
                 "softmax_correct"]
TRAIN_LOG_HEADER = ["condition", "epoch", "phase", "readout_loss",
                    "generative_loss", "alignment_loss", "recon_loss"]
GAP_HEADER = ["condition", "epoch", "sigma", "probe_auroc2", "softmax_auroc2", "delta"]


def _fmt_sigma(sigma) -> str:
    return "" if sigma is None else f"{sigma:g}"


def _fmt_metric(value) -> str:
    return "" if value is None else f"{value:.6f}"


def write_results_csv(path, rows) -> None:
    """rows: dicts with keys condition, epoch, probe, sigma (None for the
    softmax probe), n_eval, accuracy, auroc2 (None when undefined), seed."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([r["condition"], r["epoch"], r["probe"],
                        _fmt_sigma(r["sigma"]), r["n_eval"],
                        _fmt_metric(r["accuracy"]), _fmt_metric(r["auroc2"]),
                        r["seed"]])


def write_probe_records_csv(path, entries) -> None:
    """entries: (condition, epoch, sigma, [ProbeRecord...]) groups."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORDS_HEADER)
        for condition, epoch, sigma, records in entries:
            for r in records:
                w.writerow([condition, epoch, r.probe, _fmt_sigma(sigma),
                            r.image_index, r.predicted, f"{r.margin:.9g}",
                            int(r.correct)])


def write_decomposition_csv(path, entries) -> None:
    """entries: (condition, epoch, [DecompositionRecord...]) groups."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECOMP_HEADER)
        for condition, epoch, records in entries:
            for r in records:
                w.writerow([condition, epoch, r.image_index,
                            f"{r.energy_margin:.12g}",
                            f"{r.logsoftmax_margin:.12g}",
                            f"{r.residual_diff:.12g}",
                            int(r.structural_correct), int(r.softmax_correct)])


def write_train_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAIN_LOG_HEADER)
        for r in rows:
            w.writerow([r["condition"], r["epoch"], r["phase"],
                        *(_fmt_metric(r.get(k)) for k in
                          ("readout_loss", "generative_loss",
                           "alignment_loss", "recon_loss"))])


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(out_dir, config_flat: dict, phases: dict, status: str,
                   error: str | None = None) -> str:
    """Inventory of the run: resolved config, timings, output digests."""
    inventory = {}
    for name in sorted(os.listdir(out_dir)):
        fpath = os.path.join(out_dir, name)
        if os.path.isfile(fpath) and name != "manifest.json":
            inventory[name] = file_digest(fpath)
    payload = {
        "code_version": f"pcnlab-{__version__}",
        "numpy_version": np.__version__,
        "config": config_flat,
        "phases_seconds": {k: round(v, 3) for k, v in phases.items()},
        "outputs": inventory,
        "status": status,
    }
    if error is not None:
        payload["error"] = error
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, payload)
    return path


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def render_run_figures(out_dir, rows) -> list:
    """AUROC2-vs-epoch and AUROC2-vs-sigma charts when a run has them."""
    made = []
    struct = [r for r in rows if r["probe"] == "structural" and r["auroc2"] is not None]
    soft = [r for r in rows if r["probe"] == "softmax" and r["auroc2"] is not None]
    epochs = sorted({r["epoch"] for r in struct + soft})
    if len(epochs) > 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        s0 = [r for r in struct if r["sigma"] in (0.0, None)]
        if s0:
            ax.plot([r["epoch"] for r in s0], [r["auroc2"] for r in s0],
                    "o-", label="structural (K-way energy)")
        if soft:
            ax.plot([r["epoch"] for r in soft], [r["auroc2"] for r in soft],
                    "s--", label="softmax margin")
        ax.set_xlabel("epoch")
        ax.set_ylabel("AUROC$_2$")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "auroc_by_epoch.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)
    sigmas = sorted({r["sigma"] for r in struct if r["sigma"] is not None})
    if len(sigmas) > 1:
        last_epoch = max(r["epoch"] for r in struct)
        pts = sorted((r["sigma"], r["auroc2"]) for r in struct
                     if r["epoch"] == last_epoch)
        fig, ax = plt.subplots(figsize=(6, 4))
        xs = [max(s, 1e-4) for s, _ in pts]  # show sigma=0 at the left edge
        ax.semilogx(xs, [a for _, a in pts], "o-", label="structural")
        sm = [r for r in soft if r["epoch"] == last_epoch]
        if sm:
            ax.axhline(sm[-1]["auroc2"], color="tab:blue", ls="--",
                       label="softmax (noise-invariant)")
        ax.set_xlabel(r"eval $\sigma$ (0 shown at left edge)")
        ax.set_ylabel("AUROC$_2$")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "auroc_by_sigma.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)
    return made


def render_gap_figure(out_dir, gap_rows) -> str | None:
    if not gap_rows:
        return None
    labeled = [r for r in gap_rows if r["delta"] is not None]
    if not labeled:
        return None
    names = [f"{r['condition']}" + (f" σ={r['sigma']:g}" if r["sigma"] not in (None, 0.0) else "")
             for r in labeled]
    deltas = [r["delta"] for r in labeled]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(deltas)), deltas, color="tab:red")
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(range(len(deltas)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(r"probe AUROC$_2$ $-$ softmax AUROC$_2$")
    fig.tight_layout()
    path = os.path.join(out_dir, "gap_summary.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------

def _parse_results_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append({
                "condition": raw["condition"],
                "epoch": int(raw["epoch"]),
                "probe": raw["probe"],
                "sigma": float(raw["sigma"]) if raw["sigma"] != "" else None,
                "n_eval": int(raw["n_eval"]),
                "accuracy": float(raw["accuracy"]) if raw["accuracy"] != "" else None,
                "auroc2": float(raw["auroc2"]) if raw["auroc2"] != "" else None,
                "seed": int(raw["seed"]),
            })
    return rows


def recompute_auroc_from_records(path):
    """Group probe_records.csv by (condition, epoch, probe, sigma) and
    recompute AUROC2 for each cell; the end-to-end audit trail check."""
    groups: dict = {}
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            key = (raw["condition"], int(raw["epoch"]), raw["probe"],
                   float(raw["sigma"]) if raw["sigma"] != "" else None)
            margins, correct = groups.setdefault(key, ([], []))
            margins.append(float(raw["margin"]))
            correct.append(raw["correct"] == "1")
    return {key: auroc2_from_arrays(np.array(m), np.array(c))
            for key, (m, c) in groups.items()}


def summarize(run_dirs, out_dir) -> tuple:
    """Condition-vs-gap table across runs; returns (gap_rows, errors).

    Each run contributes one row per evaluation sigma at its final
    checkpoint: structural AUROC2, softmax AUROC2, and the gap between
    them. Runs without a readable results.csv are reported as errors and
    the rest still summarise.
    """
    os.makedirs(out_dir, exist_ok=True)
    gap_rows, errors = [], []
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "results.csv")
        try:
            rows = _parse_results_csv(path)
        except (OSError, ValueError, KeyError) as exc:
            errors.append(f"{run_dir}: {exc}")
            continue
        if not rows:
            errors.append(f"{run_dir}: results.csv has no data rows")
            continue
        condition = rows[0]["condition"]
        seed_epochs = [r["epoch"] for r in rows]
        final = max(seed_epochs)
        soft = [r for r in rows if r["probe"] == "softmax" and r["epoch"] == final]
        soft_auroc = soft[-1]["auroc2"] if soft else None
        struct = [r for r in rows if r["probe"] == "structural" and r["epoch"] == final]
        if not struct:
            gap_rows.append({"condition": condition, "epoch": final, "sigma": None,
                             "probe_auroc2": None, "softmax_auroc2": soft_auroc,
                             "delta": None})
            continue
        for r in sorted(struct, key=lambda r: (r["sigma"] is None, r["sigma"])):
            delta = None
            if r["auroc2"] is not None and soft_auroc is not None:
                delta = r["auroc2"] - soft_auroc
            gap_rows.append({"condition": condition, "epoch": final,
                             "sigma": r["sigma"], "probe_auroc2": r["auroc2"],
                             "softmax_auroc2": soft_auroc, "delta": delta})

    csv_path = os.path.join(out_dir, "gap_summary.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GAP_HEADER)
        for r in gap_rows:
            w.writerow([r["condition"], r["epoch"], _fmt_sigma(r["sigma"]),
                        _fmt_metric(r["probe_auroc2"]),
                        _fmt_metric(r["softmax_auroc2"]),
                        "" if r["delta"] is None else f"{r['delta']:+.4f}"])

    lines = [f"{'condition':<16}{'epoch':>6}{'sigma':>8}{'probe':>10}"
             f"{'softmax':>10}{'delta':>9}"]
    for r in gap_rows:
        lines.append(
            f"{r['condition']:<16}{r['epoch']:>6}"
            f"{_fmt_sigma(r['sigma']) or '-':>8}"
            f"{_fmt_metric(r['probe_auroc2']) or '-':>10}"
            f"{_fmt_metric(r['softmax_auroc2']) or '-':>10}"
            f"{'' if r['delta'] is None else format(r['delta'], '+.4f'):>9}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "gap_summary.txt"), "w") as fh:
        fh.write(text)
    render_gap_figure(out_dir, gap_rows)
    return gap_rows, errors
