"""Evaluation report emission: JSON (canonical), CSV (delimited per-image
rows), and matplotlib figure renderings written beside them.

JSON keys are emitted in a fixed construction order so reports are diffable.
delta1 is reported x100 (percent), matching the convention of depth papers;
silog already carries its x100 factor from the metric definition.
"""

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

SCALAR_FIELDS = ("delta1", "rel", "rmse", "silog", "log10", "see",
                 "precision", "recall", "f1", "dbe_acc", "dbe_comp")


def report_row(report, extras=None, index=None):
    """Ordered dict of one image's (or the aggregate's) metric values."""
    row = {}
    if index is not None:
        row["index"] = index
    get = (lambda k: report[k]) if isinstance(report, dict) else \
        (lambda k: getattr(report, k))
    for name in SCALAR_FIELDS:
        value = get(name)
        if name == "delta1":
            value = value * 100.0
        row[name] = round(float(value), 6)
    row["n_valid_pixels"] = int(get("n_valid_pixels"))
    if extras is not None:
        row["n_gt_edge_pixels"] = extras["n_gt_edge_pixels"]
        row["n_pred_edge_pixels"] = extras["n_pred_edge_pixels"]
        row["dbe_defined"] = extras["dbe_defined"]
        nb = extras.get("scale_nonboundary")
        if nb is not None:
            row["delta1_nonboundary"] = round(nb["delta1"] * 100.0, 6)
            row["rmse_nonboundary"] = round(nb["rmse"], 6)
    return row


def write_report(out_dir, per_image, aggregate, config_echo):
    """report.json + report.csv under out_dir; returns the json path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [report_row(rep, ext, idx) for idx, (rep, ext) in enumerate(per_image)]
    payload = {
        "per_image": rows,
        "aggregate": report_row(aggregate),
        "config_echo": config_echo,
    }
    json_path = out_dir / "report.json"
    with open(json_path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")

    csv_path = out_dir / "report.csv"
    fieldnames = list(rows[0].keys()) if rows else ["index"]
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        agg_row = {k: v for k, v in report_row(aggregate).items() if k in fieldnames}
        agg_row["index"] = "aggregate"
        writer.writerow(agg_row)
    return json_path


def _depth_panel(ax, values, title, vmin, vmax):
    im = ax.imshow(values, cmap="turbo", vmin=vmin, vmax=vmax)
    ax.set_title(title, fontsize=8)
    ax.set_axis_off()
    return im


def render_image_figure(path, image, gt, pred, m_hat, pred_edges):
    """Five-panel qualitative figure: input, GT depth, prediction, abs error,
    and edge overlay (reference green / predicted red / overlap yellow)."""
    gt_vals = np.where(gt.valid, gt.values, np.nan)
    vmin = float(np.nanmin(gt_vals))
    vmax = float(np.nanmax(gt_vals))
    err = np.where(gt.valid, np.abs(pred.values - gt.values), 0.0)
    overlay = np.zeros(gt.values.shape + (3,))
    overlay[..., 0] = pred_edges.mask
    overlay[..., 1] = m_hat.mask

    fig, axes = plt.subplots(1, 5, figsize=(15, 2.6))
    axes[0].imshow(np.transpose(image, (1, 2, 0)))
    axes[0].set_title("image", fontsize=8)
    axes[0].set_axis_off()
    _depth_panel(axes[1], gt_vals, "gt depth", vmin, vmax)
    _depth_panel(axes[2], pred.values, "prediction", vmin, vmax)
    im = axes[3].imshow(err, cmap="magma")
    axes[3].set_title("|error|", fontsize=8)
    axes[3].set_axis_off()
    fig.colorbar(im, ax=axes[3], fraction=0.03)
    axes[4].imshow(overlay)
    axes[4].set_title("edges (gt=green, pred=red)", fontsize=8)
    axes[4].set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "prkit"})
    plt.close(fig)


def render_aggregate_figure(path, per_image, aggregate):
    """Per-image scale and boundary score bars with the aggregate line."""
    idx = np.arange(len(per_image))
    d1 = [r.delta1 * 100 for r, _ in per_image]
    rec = [r.recall * 100 for r, _ in per_image]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3))
    axes[0].bar(idx, d1, color="#4878a8")
    axes[0].axhline(aggregate["delta1"] * 100, color="k", lw=1, ls="--")
    axes[0].set_xlabel("image")
    axes[0].set_ylabel(r"$\delta_1$ (%)")
    axes[0].set_ylim(0, 105)
    axes[1].bar(idx, rec, color="#a85448")
    axes[1].axhline(aggregate["recall"] * 100, color="k", lw=1, ls="--")
    axes[1].set_xlabel("image")
    axes[1].set_ylabel("boundary recall (%)")
    axes[1].set_ylim(0, 105)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "prkit"})
    plt.close(fig)


def render_figures(out_dir, records, preds, per_image, aggregate, n_figures=4):
    """Per-image panels for the first n_figures scenes plus the summary."""
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec, pred, (rep, extras) in list(zip(records, preds, per_image))[:n_figures]:
        gt = rec.sparse_depth if rec.sparse_depth is not None else rec.depth
        path = fig_dir / f"{rec.index:05d}_panel.png"
        render_image_figure(path, rec.image, gt, pred,
                            extras["m_hat"], extras["pred_edges"])
        written.append(path)
    summary = fig_dir / "summary.png"
    render_aggregate_figure(summary, per_image, aggregate)
    written.append(summary)
    return written


def render_loss_curves(path, runlog_entries):
    """Per-epoch loss curves from run-log entries, one line per phase."""
    phases = {}
    for e in runlog_entries:
        if e.get("kind") == "epoch":
            phases.setdefault(e["phase"], []).append(e["loss"])
    if not phases:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for phase, losses in phases.items():
        ax.plot(losses, label=phase)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "prkit"})
    plt.close(fig)
    return path
