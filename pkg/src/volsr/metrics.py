"""Evaluation metrics and deterministic report assembly.

All metrics are computed in float64 over whole volumes. Report dicts are
built with sorted case lists and serialized through canonical JSON, so two
runs over the same inputs produce byte-identical report files.
"""

import numpy as np

from .errors import ValidationError
from .volume import CLASS_NAMES, FOREGROUND_CLASSES, GreyVolume, LabelVolume

PSNR_CAP_DB = 99.0

# SSIM stabilizers for intensities normalized to dynamic range L = 1.
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(pred, ref, kind):
    if not isinstance(pred, kind) or not isinstance(ref, kind):
        raise ValidationError(f"expected a pair of {kind.__name__}")
    if pred.dims != ref.dims:
        raise ValidationError(f"dims mismatch: pred {pred.dims} vs ref {ref.dims}")


def dice(pred: LabelVolume, ref: LabelVolume, class_id: int) -> float:
    """Overlap 2|A∩B| / (|A|+|B|) for one class; 1.0 when both sides are empty."""
    _check_pair(pred, ref, LabelVolume)
    a = pred.voxels == class_id
    b = ref.voxels == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def dice_all(pred: LabelVolume, ref: LabelVolume) -> dict:
    """Dice per foreground class, keyed by class name."""
    return {CLASS_NAMES[c]: dice(pred, ref, c) for c in FOREGROUND_CLASSES}


def psnr(pred: GreyVolume, ref: GreyVolume) -> float:
    """10·log10(1 / MSE) for unit dynamic range, capped at 99 dB."""
    _check_pair(pred, ref, GreyVolume)
    diff = pred.voxels.astype(np.float64) - ref.voxels.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def ssim(pred: GreyVolume, ref: GreyVolume) -> float:
    """Structural similarity over the whole volume as a single window.

    Sample (ddof=1) variances and covariance; constant inputs compare by
    mean alone and two identical constants score exactly 1.
    """
    _check_pair(pred, ref, GreyVolume)
    x = pred.voxels.astype(np.float64).ravel()
    y = ref.voxels.astype(np.float64).ravel()
    if x.size < 2:
        raise ValidationError("ssim needs at least two voxels")
    mx, my = x.mean(), y.mean()
    vx = x.var(ddof=1)
    vy = y.var(ddof=1)
    cov = float(np.mean((x - mx) * (y - my)) * x.size / (x.size - 1))
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(num / den)


def aggregate(values) -> dict:
    """Mean and population standard deviation of a non-empty value list."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("cannot aggregate an empty list")
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0))}


def case_row(case_id, split, phase, method, pred_grey, ref_grey, pred_seg, ref_seg):
    """One evaluation row: grey metrics plus per-class Dice for a single case."""
    return {
        "case_id": case_id,
        "split": split,
        "phase": phase,
        "method": method,
        "psnr": psnr(pred_grey, ref_grey),
        "ssim": ssim(pred_grey, ref_grey),
        "dice": dice_all(pred_seg, ref_seg),
    }


def build_report(rows, config=None) -> dict:
    """Assemble rows into a report dict with per-method summaries.

    Rows are sorted by (method, case_id); the summary aggregates each metric
    over every case of a method. Passing the same rows in any order yields
    the same report.
    """
    rows = sorted(rows, key=lambda r: (r["method"], r["case_id"]))
    if not rows:
        raise ValidationError("report needs at least one case row")
    methods = {}
    for row in rows:
        methods.setdefault(row["method"], []).append(row)
    summary = {}
    for method, group in methods.items():
        entry = {
            "n_cases": len(group),
            "psnr": aggregate(r["psnr"] for r in group),
            "ssim": aggregate(r["ssim"] for r in group),
            "dice": {},
        }
        for class_id in FOREGROUND_CLASSES:
            name = CLASS_NAMES[class_id]
            entry["dice"][name] = aggregate(r["dice"][name] for r in group)
        # Dice split by cardiac phase, matching how results are usually quoted
        for phase in ("ED", "ES"):
            sub = [r for r in group if r["phase"] == phase]
            if sub:
                entry[f"dice_{phase.lower()}"] = {
                    CLASS_NAMES[c]: aggregate(r["dice"][CLASS_NAMES[c]] for r in sub)
                    for c in FOREGROUND_CLASSES
                }
        summary[method] = entry
    return {
        "version": 1,
        "config": config or {},
        "cases": rows,
        "summary": summary,
    }


def report_csv(report) -> str:
    """Flatten a report's case rows to CSV text (stable column order)."""
    class_names = [CLASS_NAMES[c] for c in FOREGROUND_CLASSES]
    header = ["case_id", "split", "phase", "method", "psnr", "ssim"]
    header += [f"dice_{n}" for n in class_names]
    lines = [",".join(header)]
    for row in report["cases"]:
        cells = [row["case_id"], row["split"], row["phase"], row["method"],
                 repr(row["psnr"]), repr(row["ssim"])]
        cells += [repr(row["dice"][n]) for n in class_names]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
