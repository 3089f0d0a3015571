"""Metrics, patient-level bootstrap uncertainty, overlays and report tables.

Aggregation order: pixels are pooled per patient, per-patient metrics are
averaged across patients, and the tabulated "mean +/- std" is the mean and
standard deviation of the patient-resampling bootstrap distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.stats import rankdata

from .core import LongitudinalSlicePair

FOREGROUND_CLASSES = (1, 2, 3)
CLASS_NAMES = {1: "healthy", 2: "ggo", 3: "cons"}

# paper-figure color key: healthy=blue, GGO=orange, CONS=green
OVERLAY_COLORS = {1: (50, 90, 220), 2: (240, 150, 40), 3: (60, 180, 60)}

VARIANTS = ("static", "longitudinal")
PRETEXTS = ("none", "black", "disorder")
PRETEXT_LABELS = {"none": "No pretraining", "black": "Black patches", "disorder": "Context disordering"}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def dice_score(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when the class is absent from both."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = pred == cls
    g = truth == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def overall_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """Micro Dice pooled over the foreground classes (the headline 'Overall')."""
    inter = 0
    denom = 0
    for c in FOREGROUND_CLASSES:
        p = pred == c
        g = truth == c
        inter += int(np.logical_and(p, g).sum())
        denom += int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * inter / denom


def macro_dice(pred: np.ndarray, truth: np.ndarray, present_only: bool = False) -> float:
    """Mean of per-class foreground Dice; optionally only over classes present on either side."""
    values = []
    for c in FOREGROUND_CLASSES:
        present = bool((pred == c).any() or (truth == c).any())
        if present_only and not present:
            continue
        values.append(dice_score(pred, truth, c))
    return float(np.mean(values)) if values else 1.0


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Trapezoidal/midrank AUC (the Mann-Whitney statistic)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc undefined: needs at least one positive and one negative label")
    ranks = rankdata(scores)  # midranks for ties
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5, which: str = "overall") -> float:
    """Per-class accuracy at threshold (ties classified positive); overall is their mean."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] != 2:
        raise ValueError(f"scores must have shape (N, 2), got {scores.shape}")
    pred = scores >= threshold
    truth = labels >= 0.5
    per_class = (pred == truth).mean(axis=0)
    if which == "GGO":
        return float(per_class[0])
    if which == "CONS":
        return float(per_class[1])
    if which == "overall":
        return float(per_class.mean())
    raise ValueError(f"which must be 'GGO', 'CONS' or 'overall', got {which!r}")


def bootstrap_ci(
    metric: Callable[[list], float],
    groups: Sequence,
    n_resamples: int = 1000,
    rng: Optional[np.random.Generator] = None,
) -> tuple[float, float]:
    """Resample groups (patients) with replacement; mean and std of the metric distribution.

    Resamples on which the metric is undefined (raises ValueError) are skipped.
    """
    if len(groups) < 2:
        raise ValueError(f"bootstrap needs >= 2 groups, got {len(groups)}")
    rng = rng or np.random.default_rng(0)
    values = []
    for _ in range(n_resamples):
        idx = rng.integers(0, len(groups), size=len(groups))
        try:
            values.append(metric([groups[k] for k in idx]))
        except ValueError:
            continue
    if not values:
        raise ValueError("metric undefined on every bootstrap resample")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# ---------------------------------------------------------------------------
# Network evaluation (pooled per patient, averaged across patients)
# ---------------------------------------------------------------------------


def _predict_seg(net, slices, longitudinal: bool, batch_size: int = 8) -> list[np.ndarray]:
    net.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            batch = slices[start : start + batch_size]
            rows = []
            for p in batch:
                chans = [p.reference, p.target] if longitudinal else [p.target]
                rows.append(np.stack(chans))
            x = torch.from_numpy(np.stack(rows).astype(np.float32))
            preds.extend(net(x).argmax(dim=1).numpy().astype(np.uint8))
    return preds


def _predict_cls(net, slices, longitudinal: bool, batch_size: int = 8) -> np.ndarray:
    net.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            batch = slices[start : start + batch_size]
            rows = []
            for p in batch:
                chans = [p.reference, p.target] if longitudinal else [p.target]
                rows.append(np.stack(chans))
            x = torch.from_numpy(np.stack(rows).astype(np.float32))
            scores.append(torch.sigmoid(net(x)).numpy())
    return np.concatenate(scores, axis=0)


def _group_by_patient(slices, payloads):
    by_patient: dict[str, list] = {}
    for s, payload in zip(slices, payloads):
        by_patient.setdefault(s.patient_id, []).append(payload)
    return by_patient


def _patient_seg_counts(items) -> dict:
    inter = np.zeros(4, dtype=np.int64)
    pred_n = np.zeros(4, dtype=np.int64)
    truth_n = np.zeros(4, dtype=np.int64)
    for pred, truth in items:
        for c in FOREGROUND_CLASSES:
            p = pred == c
            g = truth == c
            inter[c] += int((p & g).sum())
            pred_n[c] += int(p.sum())
            truth_n[c] += int(g.sum())
    return {"inter": inter, "pred": pred_n, "truth": truth_n}


def _counts_dice(counts: dict, cls: int) -> float:
    denom = counts["pred"][cls] + counts["truth"][cls]
    return 1.0 if denom == 0 else 2.0 * counts["inter"][cls] / denom


def _counts_micro(counts: dict) -> float:
    inter = sum(counts["inter"][c] for c in FOREGROUND_CLASSES)
    denom = sum(counts["pred"][c] + counts["truth"][c] for c in FOREGROUND_CLASSES)
    return 1.0 if denom == 0 else 2.0 * inter / denom


def evaluate_segmentation(
    net,
    slices: Sequence[LongitudinalSlicePair],
    longitudinal: bool,
    n_resamples: int = 1000,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Per-class and overall Dice with patient-bootstrap mean/std."""
    if any(p.target_seg is None for p in slices):
        raise ValueError("segmentation evaluation needs target segmentation masks")
    preds = _predict_seg(net, slices, longitudinal)
    pairs = [(pred, s.target_seg) for pred, s in zip(preds, slices)]
    per_patient_items = _group_by_patient(slices, pairs)
    patient_counts = {pid: _patient_seg_counts(items) for pid, items in per_patient_items.items()}
    groups = sorted(patient_counts)
    payloads = [patient_counts[pid] for pid in groups]
    rng = rng or np.random.default_rng(0)

    metrics = {}
    per_patient = {}

    def add(name, per_patient_fn):
        values = {pid: per_patient_fn(patient_counts[pid]) for pid in groups}
        point = float(np.mean(list(values.values())))
        mean, std = bootstrap_ci(
            lambda sel: float(np.mean([per_patient_fn(c) for c in sel])),
            payloads,
            n_resamples,
            rng,
        )
        metrics[name] = {"mean": mean, "std": std, "point": point}
        per_patient[name] = values

    add("healthy", lambda c: _counts_dice(c, 1))
    add("ggo", lambda c: _counts_dice(c, 2))
    add("cons", lambda c: _counts_dice(c, 3))
    add("overall_micro", _counts_micro)
    add("overall_macro", lambda c: float(np.mean([_counts_dice(c, k) for k in FOREGROUND_CLASSES])))
    return {
        "metrics": metrics,
        "per_patient": per_patient,
        "n_patients": len(groups),
        "n_slices": len(slices),
    }


def evaluate_classification(
    net,
    slices: Sequence[LongitudinalSlicePair],
    longitudinal: bool,
    n_resamples: int = 1000,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """AUC (macro over the two labels) and per-class accuracies, patient-bootstrapped."""
    if any(p.target_labels is None for p in slices):
        raise ValueError("classification evaluation needs presence labels")
    scores = _predict_cls(net, slices, longitudinal)
    labels = np.array(
        [[float(p.target_labels.ggo_present), float(p.target_labels.cons_present)] for p in slices]
    )
    rows = [(scores[k], labels[k]) for k in range(len(slices))]
    by_patient = _group_by_patient(slices, rows)
    groups = sorted(by_patient)
    payloads = [by_patient[pid] for pid in groups]
    rng = rng or np.random.default_rng(0)
    warnings = []

    def stack(sel):
        s = np.concatenate([[r[0] for r in items] for items in sel])
        l = np.concatenate([[r[1] for r in items] for items in sel])
        return np.asarray(s), np.asarray(l)

    def macro_auc(sel):
        s, l = stack(sel)
        return 0.5 * (roc_auc(s[:, 0], l[:, 0]) + roc_auc(s[:, 1], l[:, 1]))

    def acc_metric(which):
        def fn(sel):
            s, l = stack(sel)
            return accuracy(s, l, which=which)
        return fn

    metrics = {}

    def add(name, fn):
        try:
            point = fn(payloads)
        except ValueError as e:
            metrics[name] = None
            warnings.append(f"{name}: {e}")
            return
        mean, std = bootstrap_ci(fn, payloads, n_resamples, rng)
        metrics[name] = {"mean": mean, "std": std, "point": point}

    add("auc", macro_auc)
    add("acc_overall", acc_metric("overall"))
    add("acc_ggo", acc_metric("GGO"))
    add("acc_cons", acc_metric("CONS"))
    return {
        "metrics": metrics,
        "n_patients": len(groups),
        "n_slices": len(slices),
        "warnings": warnings,
    }


# ---------------------------------------------------------------------------
# Qualitative overlays
# ---------------------------------------------------------------------------


def _gray_to_rgb(img: np.ndarray) -> np.ndarray:
    g = np.clip(img, 0.0, 1.0)
    g8 = (g * 255.0 + 0.5).astype(np.uint8)
    return np.stack([g8, g8, g8], axis=-1)


def _overlay(img: np.ndarray, seg: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    rgb = _gray_to_rgb(img).astype(np.float64)
    for cls, color in OVERLAY_COLORS.items():
        sel = seg == cls
        if not sel.any():
            continue
        rgb[sel] = (1.0 - alpha) * rgb[sel] + alpha * np.array(color, dtype=np.float64)
    return rgb.astype(np.uint8)


def render_qualitative(
    pair: LongitudinalSlicePair, pred_seg: np.ndarray, truth_seg: np.ndarray, out_path
) -> None:
    """PNG panel: reference, target, truth overlay, prediction overlay."""
    if pred_seg.shape != pair.target.shape or truth_seg.shape != pair.target.shape:
        raise ValueError("prediction/truth shapes must match the slice shape")
    panels = [
        _gray_to_rgb(pair.reference),
        _gray_to_rgb(pair.target),
        _overlay(pair.target, truth_seg),
        _overlay(pair.target, pred_seg),
    ]
    gap = np.full((pair.target.shape[0], 2, 3), 255, dtype=np.uint8)
    strip = []
    for k, panel in enumerate(panels):
        if k:
            strip.append(gap)
        strip.append(panel)
    img = np.concatenate(strip, axis=1)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(out_path, format="PNG")


# ---------------------------------------------------------------------------
# Reports mirroring the two result tables
# ---------------------------------------------------------------------------

SEG_COLUMNS = [("Healthy", "healthy"), ("GGO", "ggo"), ("CONS", "cons"), ("Overall", "overall_micro")]
CLS_COLUMNS = [
    ("AUC", "auc"),
    ("Accuracy (Overall)", "acc_overall"),
    ("Accuracy (GGO)", "acc_ggo"),
    ("Accuracy (CONS)", "acc_cons"),
]


@dataclass
class SegReport:
    rows: dict = field(default_factory=dict)  # (variant, pretext) -> metrics dict or None


@dataclass
class ClsReport:
    rows: dict = field(default_factory=dict)  # pretext -> metrics dict or None


def _fmt(cell, bold: bool) -> str:
    if cell is None:
        return "--"
    text = f"{cell['mean']:.3f} +/- {cell['std']:.3f}"
    return f"**{text}**" if bold else text


def _best_keys(rows: dict, keys: list, metric: str):
    best, best_val = None, -np.inf
    for key in keys:
        cell = rows.get(key)
        if not cell or not cell.get(metric):
            continue
        if cell[metric]["mean"] > best_val:
            best, best_val = key, cell[metric]["mean"]
    # no bolding when there is nothing to compare against
    n_present = sum(1 for key in keys if rows.get(key) and rows[key].get(metric))
    return best if n_present >= 2 else None


def build_reports(run_dir, out_dir=None) -> tuple[SegReport, ClsReport, list[Path]]:
    """Aggregate eval outputs found under ``run_dir`` into the two comparison tables."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    seg = SegReport(rows={(v, p): None for v in VARIANTS for p in PRETEXTS})
    cls = ClsReport(rows={p: None for p in ("none", "disorder")})
    for path in sorted(run_dir.rglob("eval_seg.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        seg.rows[(doc["variant"], doc["pretext"])] = doc["metrics"]
    for path in sorted(run_dir.rglob("eval_cls.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        cls.rows[doc["pretext"]] = doc["metrics"]

    written = []
    written.append(_write_seg_report(seg, out_dir))
    written.append(_write_seg_csv(seg, out_dir))
    written.append(_write_cls_report(cls, out_dir))
    written.append(_write_cls_csv(cls, out_dir))
    manifest = out_dir / "report_manifest.json"
    manifest.write_text(
        json.dumps({"files": [p.name for p in written]}, indent=1) + "\n", encoding="utf-8"
    )
    written.append(manifest)
    return seg, cls, written


def _write_seg_report(seg: SegReport, run_dir: Path) -> Path:
    lines = ["# Segmentation Dice by regime", ""]
    lines.append("| Segmentation | " + " | ".join(name for name, _ in SEG_COLUMNS) + " |")
    lines.append("|---" * (len(SEG_COLUMNS) + 1) + "|")
    for variant in VARIANTS:
        section_keys = [(variant, p) for p in PRETEXTS]
        best = {metric: _best_keys(seg.rows, section_keys, metric) for _, metric in SEG_COLUMNS}
        for pretext in PRETEXTS:
            key = (variant, pretext)
            metrics = seg.rows.get(key)
            cells = []
            for _, metric in SEG_COLUMNS:
                cell = None if metrics is None else metrics.get(metric)
                cells.append(_fmt(cell, bold=best[metric] == key))
            label = f"{variant.capitalize()}: {PRETEXT_LABELS[pretext]}"
            lines.append("| " + label + " | " + " | ".join(cells) + " |")
    lines += [
        "",
        "Notes:",
        "- 'Overall' is micro Dice pooled over the three foreground classes;"
        " the macro mean is reported in the CSV alongside.",
        "- Values are mean +/- std of the patient-level bootstrap; pixels are pooled per patient,"
        " then averaged across patients.",
        "- '--' marks regimes without evaluation outputs (absent, not fabricated).",
    ]
    out = run_dir / "seg_report.md"
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def _write_seg_csv(seg: SegReport, run_dir: Path) -> Path:
    rows = ["variant,pretext,healthy_mean,healthy_std,ggo_mean,ggo_std,cons_mean,cons_std,"
            "overall_micro_mean,overall_micro_std,overall_macro_mean,overall_macro_std"]
    for (variant, pretext), metrics in seg.rows.items():
        cells = [variant, pretext]
        for metric in ("healthy", "ggo", "cons", "overall_micro", "overall_macro"):
            cell = None if metrics is None else metrics.get(metric)
            cells += ["", ""] if cell is None else [f"{cell['mean']:.6f}", f"{cell['std']:.6f}"]
        rows.append(",".join(cells))
    out = run_dir / "seg_report.csv"
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def _write_cls_report(cls: ClsReport, run_dir: Path) -> Path:
    keys = list(cls.rows)
    lines = ["# Classification by regime (longitudinal network)", ""]
    lines.append("| Classification | " + " | ".join(name for name, _ in CLS_COLUMNS) + " |")
    lines.append("|---" * (len(CLS_COLUMNS) + 1) + "|")
    best = {metric: _best_keys(cls.rows, keys, metric) for _, metric in CLS_COLUMNS}
    for pretext in keys:
        metrics = cls.rows.get(pretext)
        cells = []
        for _, metric in CLS_COLUMNS:
            cell = None if metrics is None else metrics.get(metric)
            cells.append(_fmt(cell, bold=best[metric] == pretext))
        lines.append("| " + PRETEXT_LABELS[pretext] + " | " + " | ".join(cells) + " |")
    lines += [
        "",
        "Notes:",
        "- AUC is the macro average over the GGO and CONS labels (midrank tie handling);"
        " overall accuracy is the mean of the two per-class accuracies.",
        "- Values are mean +/- std of the patient-level bootstrap.",
    ]
    out = run_dir / "cls_report.md"
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def _write_cls_csv(cls: ClsReport, run_dir: Path) -> Path:
    rows = ["pretext,auc_mean,auc_std,acc_overall_mean,acc_overall_std,acc_ggo_mean,acc_ggo_std,"
            "acc_cons_mean,acc_cons_std"]
    for pretext, metrics in cls.rows.items():
        cells = [pretext]
        for metric in ("auc", "acc_overall", "acc_ggo", "acc_cons"):
            cell = None if metrics is None else metrics.get(metric)
            cells += ["", ""] if cell is None else [f"{cell['mean']:.6f}", f"{cell['std']:.6f}"]
        rows.append(",".join(cells))
    out = run_dir / "cls_report.csv"
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out
