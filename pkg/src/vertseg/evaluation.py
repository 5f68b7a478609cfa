"""Confusion-count metrics, per-plane/per-phase reports, qualitative mask
grids, and the augmentation ablation runner.

Metrics pool pixel counts over all slices of a selection (micro-averaging)
by default; a macro mode averaging per-slice scores is available. The final
mask (network 2) is always the one scored.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import normalize_intensity
from .training import train

PHASES_REPORTED = ("valid", "test")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(pred, gt, threshold=0.5):
    """Binarise `pred` at `threshold` (>= counts as foreground) and count
    the four pixel categories against the binary ground truth."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground truth must be binary")
    p = pred >= threshold
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(p & g)), fp=int(np.sum(p & ~g)),
        tn=int(np.sum(~p & ~g)), fn=int(np.sum(~p & g)))


def metrics_from_counts(c):
    """(precision, recall, f1) as fractions; a zero denominator yields 0."""
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) > 0 else 0.0
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else 0.0
    denom = 2 * c.tp + c.fp + c.fn
    f1 = 2 * c.tp / denom if denom > 0 else 0.0
    return precision, recall, f1


def metric_flags(c):
    """Names of metrics whose denominator was zero (reported, not hidden)."""
    flags = []
    if c.tp + c.fp == 0:
        flags.append("precision_zero_denominator")
    if c.tp + c.fn == 0:
        flags.append("recall_zero_denominator")
    if 2 * c.tp + c.fp + c.fn == 0:
        flags.append("f1_zero_denominator")
    return tuple(flags)


def _predict_masks(model, samples, threshold, batch_size=8):
    """Yields (mask2 probabilities, gt) pairs, eval-normalised."""
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x = np.stack([normalize_intensity(s.image)[None] for s in chunk])
        _, m2 = model.predict_batch(x)
        for s, pred in zip(chunk, m2):
            yield pred[0], s.mask


def evaluate(model, samples, plane, phase, threshold=0.5, average="micro",
             model_name=None, batch_size=8):
    """One report row: metrics of the final mask over every slice of the
    requested plane and phase."""
    if average not in ("micro", "macro"):
        raise ValueError("average must be 'micro' or 'macro'")
    selection = [s for s in samples if s.plane == plane and s.phase == phase]
    if not selection:
        raise ValueError(f"no slices for plane={plane!r}, phase={phase!r}")

    pooled = ConfusionCounts()
    per_slice = []
    for pred, gt in _predict_masks(model, selection, threshold, batch_size):
        c = confusion_counts(pred, gt, threshold)
        pooled = pooled + c
        if average == "macro":
            per_slice.append(metrics_from_counts(c))
    if average == "micro":
        precision, recall, f1 = metrics_from_counts(pooled)
    else:
        precision, recall, f1 = (float(np.mean([m[i] for m in per_slice]))
                                 for i in range(3))
    return {
        "model": model_name or model.architecture,
        "plane": plane,
        "phase": phase,
        "precision": 100.0 * precision,
        "recall": 100.0 * recall,
        "f1": 100.0 * f1,
        "tp": pooled.tp, "fp": pooled.fp, "tn": pooled.tn, "fn": pooled.fn,
        "flags": "|".join(metric_flags(pooled)),
    }


# -- report ---------------------------------------------------------------------

CSV_COLUMNS = ("model", "plane", "phase", "precision", "recall", "f1",
               "tp", "fp", "tn", "fn", "flags")
MARKDOWN_COLUMNS = ("Plane", "Model", "Phase", "Precision (%)", "Recall (%)",
                    "F1-score (%)")


def config_hash(obj):
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, row):
        self.rows.append(row)

    def to_csv(self, path):
        """Data-only CSV (byte-identical for identical config and seed);
        provenance lives in a JSON sidecar written by `save`."""
        with open(path, "w") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(_format_cell(row[c]) for c in CSV_COLUMNS) + "\n")
        return path

    def save(self, path):
        self.to_csv(path)
        sidecar = str(path) + ".provenance.json"
        with open(sidecar, "w") as fh:
            json.dump(self.provenance, fh, indent=2, sort_keys=True)
        return path

    def to_markdown(self):
        lines = ["| " + " | ".join(MARKDOWN_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in MARKDOWN_COLUMNS) + "|"]
        for row in self.rows:
            lines.append("| {plane} | {model} | {phase} | {p:.2f} | {r:.2f} | "
                         "{f:.2f} |".format(plane=row["plane"].capitalize(),
                                            model=row["model"],
                                            phase=row["phase"].capitalize(),
                                            p=row["precision"], r=row["recall"],
                                            f=row["f1"]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path):
        report = cls()
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                cells = line.rstrip("\n").split(",")
                row = dict(zip(header, cells))
                for key in ("precision", "recall", "f1"):
                    row[key] = float(row[key])
                for key in ("tp", "fp", "tn", "fn"):
                    row[key] = int(row[key])
                report.rows.append(row)
        return report


def _format_cell(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# -- qualitative export -----------------------------------------------------------


def export_qualitative(baseline_model, plusplus_model, samples, out_dir,
                       threshold=0.5):
    """One grayscale grid image: a row per sample with five columns
    (baseline mask1, baseline mask2, improved mask1, improved mask2,
    ground truth), masks binarised at `threshold`.

    Output bytes are deterministic for fixed models and samples.
    """
    from PIL import Image

    if not samples:
        raise ValueError("need at least one sample to export")
    os.makedirs(out_dir, exist_ok=True)
    gap = 2
    rows = []
    for s in samples:
        img = normalize_intensity(s.image)
        outs = []
        for model in (baseline_model, plusplus_model):
            out = model.predict(img[None])
            outs.extend([out.mask1[0], out.mask2[0]])
        tiles = [(m >= threshold).astype(np.uint8) * 255 for m in outs]
        tiles.append(s.mask.astype(np.uint8) * 255)
        h, w = tiles[0].shape
        strip = np.full((h, 5 * w + 4 * gap), 255, dtype=np.uint8)
        for j, tile in enumerate(tiles):
            strip[:, j * (w + gap):j * (w + gap) + w] = tile
        rows.append(strip)
    h, w = rows[0].shape
    grid = np.full((len(rows) * h + (len(rows) - 1) * gap, w), 255, dtype=np.uint8)
    for i, strip in enumerate(rows):
        grid[i * (h + gap):i * (h + gap) + h, :] = strip
    path = os.path.join(out_dir, "qualitative_grid.png")
    Image.fromarray(grid, mode="L").save(path)
    return path


# -- ablation -----------------------------------------------------------------------


@dataclass
class AblationResult:
    """Rows keyed by (model, augmentation on/off, plane, phase)."""

    rows: list = field(default_factory=list)

    def to_csv(self, path):
        cols = ("model", "augmentation", "plane", "phase",
                "precision", "recall", "f1", "seed")
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.rows:
                fh.write(",".join(_format_cell(row[c]) for c in cols) + "\n")
        return path

    def mean_f1(self, model, augmentation, phase="valid"):
        vals = [r["f1"] for r in self.rows
                if r["model"] == model and r["augmentation"] == augmentation
                and r["phase"] == phase]
        return float(np.mean(vals))


def run_ablation(model_cfg, data, train_cfg, augment_cfg, seeds=(0,),
                 builders=None, threshold=0.5, out_dir=None):
    """Train {baseline, plusplus} x {augmentation on, off} with identical
    seeds and splits; returns per-plane/per-phase metrics for each run.

    With `out_dir` the result CSV, a bar-plot data CSV and a rendered bar
    chart are written there.
    """
    from dataclasses import replace as dc_replace

    from .network import build_doubleunet_baseline, build_doubleunet_pp

    builders = builders or {"doubleunet": build_doubleunet_baseline,
                            "doubleunet_pp": build_doubleunet_pp}
    planes = sorted({s.plane for s in data["valid"] + data.get("test", [])})
    result = AblationResult()
    for seed in seeds:
        for name, builder in builders.items():
            for aug_on in (False, True):
                cfg = dc_replace(train_cfg, seed=seed)
                model = builder(dc_replace(model_cfg, seed=seed))
                model, history = train(model, data, cfg,
                                       augment_cfg=augment_cfg if aug_on else None)
                if history.best_state is not None:
                    # score the best-valid-F1 weights (the training
                    # contract's model selection), not the last step
                    model.load_state_dict(history.best_state)
                for phase in PHASES_REPORTED:
                    pool = data.get(phase) or []
                    for plane in planes:
                        if not any(s.plane == plane and s.phase == phase
                                   for s in pool):
                            continue
                        row = evaluate(model, pool, plane, phase, threshold,
                                       model_name=name)
                        row = {**row, "augmentation": "on" if aug_on else "off",
                               "seed": seed}
                        result.rows.append(row)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.to_csv(os.path.join(out_dir, "ablation.csv"))
        _write_ablation_plot(result, out_dir)
    return result


def _write_ablation_plot(result, out_dir):
    """Bar-plot data CSV plus a rendered chart of mean F1 per condition."""
    conditions = sorted({(r["model"], r["augmentation"]) for r in result.rows})
    data_path = os.path.join(out_dir, "ablation_bars.csv")
    with open(data_path, "w") as fh:
        fh.write("model,augmentation,phase,mean_f1\n")
        means = {}
        for model, aug in conditions:
            for phase in PHASES_REPORTED:
                vals = [r["f1"] for r in result.rows
                        if r["model"] == model and r["augmentation"] == aug
                        and r["phase"] == phase]
                if vals:
                    means[(model, aug, phase)] = float(np.mean(vals))
                    fh.write(f"{model},{aug},{phase},{means[(model, aug, phase)]:.4f}\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"{m}\naug {a}" for m, a in conditions]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, phase in zip(axes, PHASES_REPORTED):
        vals = [means.get((m, a, phase), 0.0) for m, a in conditions]
        ax.bar(range(len(conditions)), vals, color=["#7799bb", "#225588"] * 2)
        ax.set_xticks(range(len(conditions)))
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_title(f"{phase} F1 (%)")
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "ablation_plot.png"), dpi=120)
    plt.close(fig)
    return data_path
