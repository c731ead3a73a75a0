"""Model evaluation, ``report.json`` emission, delimited summaries and figures.

``report.json`` (schema version 1)::

    {
      "schema_version": 1,
      "config": {...},                      # resolved run configuration
      "conventions": {...},                 # metric conventions in force
      "per_sample": [{"seed", "id", "label", "probability",
                      "iou", "precision", "recall", "f1"}, ...],
      "per_seed": [{"seed", "iou", ..., "accuracy", "roc_auc", "pr_auc"}, ...],
      "aggregates": {metric: {"mean", "std", "n"}},   # across seeds
      "sweep": {"thresholds": [...], "iou": [...], "f1": [...]}
    }

Explanation metrics are only defined for positive samples; negatives
appear in ``per_sample`` with ``null`` overlap fields.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import MetricUndefinedError, ReportingError
from .explain import gradcam3d, predict
from .metrics import (DEFAULT_THRESHOLDS, accuracy, explanation_scores, mean_std, pr_auc,
                      roc_auc, threshold_sweep)

SCHEMA_VERSION = 1
OVERLAP_METRICS = ("iou", "precision", "recall", "f1")
PREDICTION_METRICS = ("accuracy", "roc_auc", "pr_auc")
CONVENTIONS = {
    "binarize": "value >= threshold",
    "empty_masks": "IoU, precision, recall and F1 equal 1 when prediction and ground truth are both empty",
    "pr_auc": "step integration over a descending-score sweep with tied scores grouped",
    "std": "population standard deviation across seeds",
}


def evaluate_model(model, volumes, labels, masks, ids, threshold=0.5, thresholds=DEFAULT_THRESHOLDS):
    """Prediction and explanation metrics of one trained classifier.

    ``masks`` are ground-truth dense masks; only positives are explained.
    Returns ``(result, saliencies)`` where ``saliencies`` maps sample id
    to its full-resolution saliency.
    """
    volumes = np.asarray(volumes, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.concatenate([predict(model, volumes[s:s + 8])[:, 1] for s in range(0, len(volumes), 8)])
    per_sample, saliencies, sal_list, mask_list = [], {}, [], []
    for i, sid in enumerate(ids):
        row = {"id": sid, "label": int(labels[i]), "probability": float(probs[i])}
        if labels[i] == 1:
            sal = gradcam3d(model, volumes[i], 1).values
            row.update(explanation_scores(sal, masks[i], threshold))
            saliencies[sid] = sal
            sal_list.append(sal)
            mask_list.append(masks[i])
        else:
            row.update({k: None for k in OVERLAP_METRICS})
        per_sample.append(row)
    summary = {}
    pos_rows = [r for r in per_sample if r["label"] == 1]
    for k in OVERLAP_METRICS:
        summary[k] = float(np.mean([r[k] for r in pos_rows])) if pos_rows else float("nan")
    summary["accuracy"] = accuracy(probs, labels)
    for name, fn in (("roc_auc", roc_auc), ("pr_auc", pr_auc)):
        try:
            summary[name] = fn(probs, labels)
        except MetricUndefinedError:
            summary[name] = float("nan")
    sweep = threshold_sweep(sal_list, mask_list, thresholds) if sal_list else None
    return {"per_sample": per_sample, "summary": summary, "sweep": sweep}, saliencies


def build_report(config, seed_results):
    """Combine per-seed evaluation results into the report structure.

    ``seed_results`` is a list of ``(seed, result)`` pairs from
    :func:`evaluate_model`.
    """
    if not seed_results:
        raise ReportingError("no evaluation results to report")
    per_sample, per_seed = [], []
    for seed, res in seed_results:
        per_sample.extend({"seed": seed, **row} for row in res["per_sample"])
        per_seed.append({"seed": seed, **res["summary"]})
    aggregates = {}
    for k in OVERLAP_METRICS + PREDICTION_METRICS:
        aggregates[k] = mean_std([r[k] for r in per_seed if not _isnan(r[k])])
    sweeps = [res["sweep"] for _, res in seed_results if res["sweep"] is not None]
    sweep = None
    if sweeps:
        sweep = {
            "thresholds": sweeps[0]["thresholds"],
            "iou": np.mean([s["iou"] for s in sweeps], axis=0).tolist(),
            "f1": np.mean([s["f1"] for s in sweeps], axis=0).tolist(),
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "conventions": CONVENTIONS,
        "per_sample": per_sample,
        "per_seed": per_seed,
        "aggregates": aggregates,
        "sweep": sweep,
    }


def _isnan(x):
    return x is None or (isinstance(x, float) and math.isnan(x))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def save_report(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(report), fh, indent=2, sort_keys=True)


def load_report(path):
    path = Path(path)
    if not path.exists():
        raise ReportingError(f"report {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_table(path, rows, columns):
    """Tab-separated table with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def aggregate_rows(reports):
    """One row per labelled report: ``name``, then ``<metric>_mean`` / ``<metric>_std``."""
    rows = []
    for name, rep in reports.items():
        row = {"name": name}
        for k, v in rep["aggregates"].items():
            row[f"{k}_mean"] = v["mean"]
            row[f"{k}_std"] = v["std"]
        rows.append(row)
    return rows


def aggregate_columns():
    cols = ["name"]
    for k in OVERLAP_METRICS + PREDICTION_METRICS:
        cols += [f"{k}_mean", f"{k}_std"]
    return cols


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_overlay(path, volume, saliency, mask=None, title=None):
    """Middle-slice (by lesion mass when a mask is given) saliency over grayscale."""
    plt = _pyplot()
    volume = np.asarray(volume)
    saliency = np.asarray(saliency)
    if mask is not None and np.asarray(mask).any():
        z = int(np.argmax(np.asarray(mask).reshape(len(mask), -1).sum(axis=1)))
    else:
        z = volume.shape[0] // 2
    fig, ax = plt.subplots(figsize=(3.2, 3.2), dpi=100)
    ax.imshow(volume[z], cmap="gray", vmin=0, vmax=1)
    ax.imshow(saliency[z], cmap="hot", alpha=0.5, vmin=0, vmax=1)
    if mask is not None:
        ax.contour(np.asarray(mask)[z], levels=[0.5], colors="cyan", linewidths=0.8)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_sweep(path, sweeps):
    """IoU and F1 against binarisation threshold, one line per labelled sweep."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(7, 3), dpi=100)
    for name, sw in sweeps.items():
        axes[0].plot(sw["thresholds"], sw["iou"], marker="o", label=name)
        axes[1].plot(sw["thresholds"], sw["f1"], marker="o", label=name)
    for ax, label in zip(axes, ("IoU", "F1")):
        ax.set_xlabel("threshold")
        ax.set_ylabel(label)
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_parameter_sweep(path, parameter, values, reports, metrics=("iou", "f1", "roc_auc")):
    """Metric mean +- std against a swept parameter."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3), dpi=100)
    for m in metrics:
        means = [reports[i]["aggregates"][m]["mean"] for i in range(len(values))]
        stds = [reports[i]["aggregates"][m]["std"] for i in range(len(values))]
        means = [np.nan if v is None else v for v in means]
        stds = [0.0 if v is None else v for v in stds]
        ax.errorbar(values, means, yerr=stds, marker="o", capsize=3, label=m)
    if parameter == "lambda":
        ax.set_xscale("log")
    ax.set_xlabel(parameter)
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def emit_report(out_dir, report, overlays=None):
    """Write ``report.json``, ``per_sample.tsv``, the sweep figure and overlays.

    ``overlays`` is a list of ``(name, volume, saliency, mask)`` tuples.
    """
    out_dir = Path(out_dir)
    missing = [k for k in ("config", "per_sample", "aggregates") if k not in report]
    if missing:
        raise ReportingError(f"report is missing: {', '.join(missing)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_report(out_dir / "report.json", report)
    cols = ["seed", "id", "label", "probability", *OVERLAP_METRICS]
    write_table(out_dir / "per_sample.tsv", report["per_sample"], cols)
    written = [out_dir / "report.json", out_dir / "per_sample.tsv"]
    if report.get("sweep"):
        plot_sweep(out_dir / "threshold_sweep.png", {"saliency": report["sweep"]})
        written.append(out_dir / "threshold_sweep.png")
    for name, volume, sal, mask in overlays or []:
        p = out_dir / f"overlay_{name}.png"
        plot_overlay(p, volume, sal, mask, title=name)
        written.append(p)
    return written
