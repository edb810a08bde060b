"""Corpus-level evaluation: inference, metrics report, montages.

One call runs the generator (optionally behind the domain-adaptation
front end) over every case of a corpus split, scores it against ground
truth, optionally scores the classic interpolation baselines on exactly
the same case list, and writes a canonical JSON report, a CSV flattening,
and one annotated montage PNG per (case, method).

The report embeds both the run-config hash from the checkpoint and the
corpus hash; a checkpoint evaluated against a corpus it was not trained
on is refused unless explicitly overridden — evaluating on a shifted
corpus (the domain-adaptation scenario) is exactly where the override is
meant to be used.
"""

import os

import numpy as np

from .baselines import BASELINE_METHODS, baseline_upsample
from .errors import CheckpointMismatchError, ValidationError
from .ioutil import atomic_write_text, canonical_json
from .metrics import build_report, case_row, report_csv
from .montage import export_montage
from .nets import gemini_forward, logits_to_labels
from .phantom import load_case, load_corpus
from .training import load_gemini_model, load_vama_model
from .vama import adapt
from .volume import LabelVolume


def _check_corpus_hash(recorded, actual, what, allow_mismatch):
    if recorded is None or recorded == actual:
        return
    if allow_mismatch:
        return
    raise CheckpointMismatchError(
        f"{what} was trained on corpus {recorded[:12]}..., this corpus is "
        f"{actual[:12]}...; pass allow_hash_mismatch to evaluate anyway "
        "(expected when scoring a domain-shifted corpus)"
    )


def _predict(gen, lr_volume):
    sr, logits = gemini_forward(gen, lr_volume)
    pred_seg = LabelVolume(
        logits_to_labels(logits),
        spacing=sr.spacing,
        phase=sr.phase,
        domain=sr.domain,
        num_classes=gen.spec.num_classes,
    )
    return sr, pred_seg


def _montage(montage_dir, case_id, method, grey, labels, row):
    if montage_dir is None:
        return
    meta = {
        "case_id": case_id,
        "method": method,
        "psnr": f"{row['psnr']:.4f}",
        "ssim": f"{row['ssim']:.4f}",
        **{f"dice_{k}": f"{v:.4f}" for k, v in row["dice"].items()},
    }
    path = os.path.join(montage_dir, f"{case_id}_{method}.png")
    export_montage(grey, labels, path, meta=meta)


def evaluate(
    gemini_path,
    corpus_dir,
    report_path,
    montage_dir=None,
    vama_path=None,
    baselines=(),
    split="test",
    with_reference=False,
    allow_hash_mismatch=False,
) -> dict:
    """Score checkpoint(s) on one corpus split and write the artifacts."""
    for method in baselines:
        if method not in BASELINE_METHODS:
            raise ValidationError(
                f"unknown baseline {method!r}; choose from {BASELINE_METHODS}"
            )
    doc = load_corpus(corpus_dir)
    corpus_hash = doc["config_hash"]
    gen, gemini_ckpt = load_gemini_model(gemini_path)
    _check_corpus_hash(
        gemini_ckpt.extra.get("corpus_hash"), corpus_hash,
        "generator checkpoint", allow_hash_mismatch,
    )
    if gen.spec.inplane_scale != 1 and baselines:
        raise ValidationError(
            "interpolation baselines only cover through-plane upsampling; "
            "drop them when the generator also upsamples in-plane"
        )

    vama_model = None
    if vama_path is not None:
        vama_model, vama_ckpt = load_vama_model(vama_path)
        _check_corpus_hash(
            vama_ckpt.extra.get("corpus_hashes", {}).get("source"), corpus_hash,
            "adaptation checkpoint", allow_hash_mismatch,
        )

    case_ids = doc["cases"].get(split, [])
    if not case_ids:
        raise ValidationError(f"corpus {corpus_dir} has no {split!r} cases")
    if montage_dir is not None:
        os.makedirs(montage_dir, exist_ok=True)

    rows = []
    for case_id in case_ids:
        case = load_case(corpus_dir, split, case_id)
        lr, hr, hr_seg = case["lr"], case["hr"], case["hr_seg"]
        phase = hr.phase
        factor = hr.dims[2] // lr.dims[2]

        sr, pred_seg = _predict(gen, lr)
        row = case_row(case_id, split, phase, "gemini", sr, hr, pred_seg, hr_seg)
        rows.append(row)
        _montage(montage_dir, case_id, "gemini", sr, pred_seg, row)

        if vama_model is not None:
            adapted = adapt(vama_model, lr)
            sr_a, pred_a = _predict(gen, adapted)
            row = case_row(case_id, split, phase, "gemini+vama", sr_a, hr, pred_a, hr_seg)
            rows.append(row)
            _montage(montage_dir, case_id, "gemini+vama", sr_a, pred_a, row)

        for method in baselines:
            up_grey, up_labels = baseline_upsample(lr, case["lr_seg"], method, factor)
            row = case_row(case_id, split, phase, method, up_grey, hr, up_labels, hr_seg)
            rows.append(row)
            _montage(montage_dir, case_id, method, up_grey, up_labels, row)

        if with_reference:
            row = case_row(case_id, split, phase, "reference", hr, hr, hr_seg, hr_seg)
            rows.append(row)

    report = build_report(
        rows,
        config={
            "config_hash": gemini_ckpt.config_hash,
            "corpus_hash": corpus_hash,
            "split": split,
            "baselines": sorted(baselines),
            "adapted": vama_model is not None,
        },
    )
    atomic_write_text(report_path, canonical_json(report))
    csv_path = os.path.splitext(str(report_path))[0] + ".csv"
    atomic_write_text(csv_path, report_csv(report))
    return report
