"""Command-line interface.

Subcommands mirror the library's workflow: generate a phantom corpus,
train the SR/segmentation model or the domain-adaptation blocks, apply
them to single volumes, and evaluate checkpoints over a corpus.

Exit codes: 0 on success, 2 for validation problems (bad arguments,
malformed files, mismatched hashes), 3 for numeric failures during
training. The GV_SEED environment variable overrides the config seed.
"""

import argparse
import sys

from .config import load_run_config
from .errors import NumericError, ValidationError
from .evaluation import evaluate
from .nets import gemini_forward, logits_to_labels
from .phantom import DOMAIN_SHIFT_PRESETS, PHASES, generate_corpus
from .training import load_gemini_model, load_vama_model, train_gemini, train_vama
from .vama import adapt
from .volume import LabelVolume, read_volume, write_volume


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volsr",
        description="3D cardiac super-resolution, segmentation, and domain adaptation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic corpus tools")
    phantom_sub = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = phantom_sub.add_parser("generate", help="write a phantom corpus")
    gen.add_argument("--count", type=int, required=True,
                     help="training anatomies (each yields one case per phase)")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--domain-shift", choices=sorted(DOMAIN_SHIFT_PRESETS),
                     help="apply a scanner-shift preset to every LR volume")
    gen.add_argument("--phase", choices=["ED", "ES", "both"], default="both")
    gen.add_argument("--val-count", type=int, default=0,
                     help="anatomies for a validation split")
    gen.add_argument("--test-count", type=int, default=0,
                     help="anatomies for a held-out test split")

    train = sub.add_parser("train", help="train a model")
    train_sub = train.add_subparsers(dest="train_command", required=True)
    tg = train_sub.add_parser("gemini", help="train the SR+segmentation generator")
    tg.add_argument("--config", required=True)
    tg.add_argument("--corpus", required=True)
    tg.add_argument("--out", required=True)
    tv = train_sub.add_parser("vama", help="train the domain-adaptation blocks")
    tv.add_argument("--config", required=True)
    tv.add_argument("--source", required=True)
    tv.add_argument("--target", required=True)
    tv.add_argument("--out", required=True)

    ad = sub.add_parser("adapt", help="map one volume into the target domain")
    ad.add_argument("--vama", required=True)
    ad.add_argument("--in", dest="input", required=True, metavar="VOL")
    ad.add_argument("--out", required=True, metavar="VOL")

    inf = sub.add_parser("infer", help="super-resolve and segment one volume")
    inf.add_argument("--gemini", required=True)
    inf.add_argument("--in", dest="input", required=True, metavar="VOL")
    inf.add_argument("--out-grey", required=True, metavar="VOL")
    inf.add_argument("--out-seg", required=True, metavar="VOL")

    ev = sub.add_parser("evaluate", help="score checkpoint(s) over a corpus")
    ev.add_argument("--gemini", required=True)
    ev.add_argument("--vama")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--baselines", default="",
                    help="comma-separated: nearest,trilinear,bspline")
    ev.add_argument("--report", required=True)
    ev.add_argument("--montage")
    ev.add_argument("--split", default="test")
    ev.add_argument("--allow-hash-mismatch", action="store_true",
                    help="evaluate even if the corpus differs from the training one")
    return parser


def _cmd_phantom_generate(args) -> int:
    counts = {"train": args.count}
    if args.val_count:
        counts["val"] = args.val_count
    if args.test_count:
        counts["test"] = args.test_count
    for name, value in counts.items():
        if value < 1:
            raise ValidationError(f"{name} count must be positive, got {value}")
    phases = PHASES if args.phase == "both" else (args.phase,)
    shift = DOMAIN_SHIFT_PRESETS[args.domain_shift] if args.domain_shift else None
    identity = generate_corpus(args.out, counts, args.seed, phases=phases, shift=shift)
    n_cases = sum(len(v) for v in identity["cases"].values())
    print(f"wrote {n_cases} cases to {args.out} (hash {identity['config_hash'][:12]})")
    return 0


def _cmd_train_gemini(args) -> int:
    cfg = load_run_config(args.config)
    result = train_gemini(cfg, args.corpus, args.out)
    best = result["rows"][result["best_epoch"]]
    print(
        f"best epoch {result['best_epoch']}: "
        f"val PSNR {best['val_psnr']:.2f} dB, val Dice {best['val_dice']:.4f}"
    )
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def _cmd_train_vama(args) -> int:
    cfg = load_run_config(args.config)
    result = train_vama(cfg, args.source, args.target, args.out)
    last = result["rows"][-1]
    print(
        f"finished phase {last['phase']}: MSE {last['mse']:.4f}, "
        f"KL {last['kl']:.4f}, L1 {last['l1']:.4f}"
    )
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def _cmd_adapt(args) -> int:
    model, _ = load_vama_model(args.vama)
    volume = read_volume(args.input)
    adapted = adapt(model, volume)
    write_volume(args.out, adapted)
    print(f"adapted {args.input} -> {args.out} (domain {adapted.domain})")
    return 0


def _cmd_infer(args) -> int:
    gen, _ = load_gemini_model(args.gemini)
    volume = read_volume(args.input)
    sr, logits = gemini_forward(gen, volume)
    labels = LabelVolume(
        logits_to_labels(logits), spacing=sr.spacing, phase=sr.phase,
        domain=sr.domain, num_classes=gen.spec.num_classes,
    )
    write_volume(args.out_grey, sr)
    write_volume(args.out_seg, labels)
    print(f"super-resolved {volume.dims} -> {sr.dims}")
    print(f"grey: {args.out_grey}")
    print(f"labels: {args.out_seg}")
    return 0


def _cmd_evaluate(args) -> int:
    baselines = tuple(b for b in args.baselines.split(",") if b)
    report = evaluate(
        args.gemini,
        args.corpus,
        args.report,
        montage_dir=args.montage,
        vama_path=args.vama,
        baselines=baselines,
        split=args.split,
        allow_hash_mismatch=args.allow_hash_mismatch,
    )
    for method in sorted(report["summary"]):
        s = report["summary"][method]
        dice_lv = s["dice"]["lv_cavity"]["mean"]
        print(
            f"{method}: PSNR {s['psnr']['mean']:.2f} dB, "
            f"SSIM {s['ssim']['mean']:.4f}, LV-cavity Dice {dice_lv:.4f} "
            f"({s['n_cases']} cases)"
        )
    print(f"report: {args.report}")
    return 0


_COMMANDS = {
    ("phantom", "generate"): _cmd_phantom_generate,
    ("train", "gemini"): _cmd_train_gemini,
    ("train", "vama"): _cmd_train_vama,
    ("adapt", None): _cmd_adapt,
    ("infer", None): _cmd_infer,
    ("evaluate", None): _cmd_evaluate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    subcommand = getattr(args, f"{args.command}_command", None)
    handler = _COMMANDS[(args.command, subcommand)]
    try:
        return handler(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
