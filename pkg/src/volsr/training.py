"""Training loops: the SR/segmentation GAN and the two-phase adaptation blocks.

Both trainers are deterministic given (config, seed): model init comes
from one ``torch.manual_seed`` call, and every other random choice (epoch
shuffling, augmentation, latent noise) is drawn from a SeedSequence keyed
by purpose tag, epoch, and sample index — nothing depends on iteration
timing or hidden global state. Numeric determinism is pinned by running
torch single-threaded.

Each trainer writes a JSONL log next to the checkpoint, keeps a rolling
"last finished epoch" checkpoint for crash/NaN recovery, and embeds the
run-config hash plus the corpus hash in everything it saves.
"""

import hashlib
import json

import numpy as np
import torch
import torch.nn.functional as F

from .align import extract_landmarks, fit_rigid, resample_rigid
from .augment import PlaneTransform, apply_to_array, sample_transform
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    optimizer_arrays,
    save_checkpoint,
    torch_rng_array,
)
from .config import RunConfig
from .errors import NumericError, ValidationError
from .ioutil import atomic_write_text
from .losses import discriminator_loss, gemini_generator_loss
from .metrics import dice_all, psnr
from .nets import (
    Discriminator,
    DiscriminatorSpec,
    GeminiGenerator,
    GeminiGeneratorSpec,
    discriminator_input,
    gemini_forward,
    logits_to_labels,
)
from .phantom import load_case, load_corpus
from .vama import VamaConfig, VamaModel, source_block_loss, target_block_loss
from .volume import LabelVolume

# Seed-stream tags for the trainers (phantom generation uses 1-4).
_TAG_ORDER = 11
_TAG_AUGMENT = 12
_TAG_NOISE = 13


def _derived_seed(*parts) -> int:
    """Collapse a tuple of non-negative ints into one well-mixed seed."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> 1)  # keep it in signed-64 range for torch


def _epoch_order(seed: int, epoch: int, n: int, salt: int = 0) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_ORDER, epoch, salt]))
    return rng.permutation(n)


def _load_split(corpus_dir, doc, split):
    case_ids = doc["cases"].get(split, [])
    return [load_case(corpus_dir, split, cid) for cid in case_ids]


def _stack_to_tensor(arr: np.ndarray, dtype=np.float32) -> torch.Tensor:
    """(nx, ny, nz) -> (nz, nx, ny) tensor, z slices as channels."""
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(dtype, copy=False))


def _scale_plane_transform(t: PlaneTransform, u: int) -> PlaneTransform:
    """The HR-grid version of an LR-plane transform (inplane factor u)."""
    if u == 1 or t.crop is None:
        return t
    ox, oy, cx, cy = t.crop
    return PlaneTransform(crop=(u * ox, u * oy, u * cx, u * cy), hflip=t.hflip, vflip=t.vflip)


def module_hash(module: torch.nn.Module) -> str:
    """sha256 over all parameters and buffers; the freeze-contract witness."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()


def _check_finite(value: torch.Tensor, what: str, last_path):
    if not torch.isfinite(value):
        raise NumericError(
            f"{what} became non-finite ({value.item()!r}); "
            f"last good checkpoint: {last_path if last_path else 'none saved yet'}",
            last_checkpoint=last_path,
        )


def _check_outputs_finite(tensors, what: str, last_path):
    # divergence shows up in activations first; report it as a numeric
    # failure rather than letting the loss validators reject the tensors
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(
                f"{what} produced non-finite outputs; "
                f"last good checkpoint: {last_path if last_path else 'none saved yet'}",
                last_checkpoint=last_path,
            )


def _write_log(path, rows) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


# ---------------------------------------------------------------------------
# Gemini (joint SR + segmentation)


def _gemini_case_arrays(case, cfg: RunConfig, epoch: int, case_index: int):
    """One training sample as aligned (lr, hr, hr_seg) arrays, augmented."""
    lr_g = case["lr"].voxels
    hr_g = case["hr"].voxels
    hr_s = case["hr_seg"].voxels
    if cfg.augmentation is not None:
        seed = _derived_seed(cfg.seed, _TAG_AUGMENT, epoch, case_index)
        t = sample_transform(cfg.augmentation, lr_g.shape[:2], seed)
        t_hr = _scale_plane_transform(t, cfg.gemini_spec.inplane_scale)
        lr_g = apply_to_array(lr_g, t)
        hr_g = apply_to_array(hr_g, t_hr)
        hr_s = apply_to_array(hr_s, t_hr)
    return lr_g, hr_g, hr_s


def _gemini_batch(cases, indices, cfg: RunConfig, epoch: int):
    lr_list, hr_list, seg_list = [], [], []
    for idx in indices:
        lr_g, hr_g, hr_s = _gemini_case_arrays(cases[idx], cfg, epoch, int(idx))
        lr_list.append(_stack_to_tensor(lr_g))
        hr_list.append(_stack_to_tensor(hr_g))
        seg_list.append(_stack_to_tensor(hr_s, dtype=np.int64))
    return torch.stack(lr_list), torch.stack(hr_list), torch.stack(seg_list)


def _check_gemini_geometry(cfg: RunConfig, cases):
    spec = cfg.gemini_spec
    lr = cases[0]["lr"]
    hr = cases[0]["hr"]
    nx, ny, nz = lr.dims
    if nz != spec.in_slices:
        raise ValidationError(
            f"corpus LR volumes have {nz} slices, generator expects {spec.in_slices}"
        )
    u, s = spec.inplane_scale, spec.scale
    if hr.dims != (u * nx, u * ny, s * nz):
        raise ValidationError(
            f"corpus HR dims {hr.dims} do not match generator output "
            f"{(u * nx, u * ny, s * nz)}"
        )
    step = 2 ** spec.levels
    plane = cfg.augmentation.crop_size if (
        cfg.augmentation is not None and cfg.augmentation.crop_size is not None
    ) else (nx, ny)
    if plane[0] % step or plane[1] % step:
        raise ValidationError(
            f"training plane {tuple(plane)} must be divisible by 2^levels = {step}"
        )


def _validate_gemini(gen: GeminiGenerator, cases):
    """Mean PSNR and mean foreground Dice of full-volume inference."""
    psnrs, dices = [], []
    for case in cases:
        sr, logits = gemini_forward(gen, case["lr"])
        psnrs.append(psnr(sr, case["hr"]))
        pred = LabelVolume(
            logits_to_labels(logits), spacing=sr.spacing, phase=sr.phase,
            num_classes=gen.spec.num_classes,
        )
        per_class = dice_all(pred, case["hr_seg"])
        dices.append(float(np.mean(list(per_class.values()))))
    return float(np.mean(psnrs)), float(np.mean(dices))


def _gemini_checkpoint(cfg, gen, disc, disc_spec, opt_g, opt_d, epoch, corpus_hash, val):
    arrays = {}
    arrays.update(module_arrays("generator", gen))
    arrays.update(module_arrays("discriminator", disc))
    ag, mg = optimizer_arrays("opt_g", opt_g)
    ad, md = optimizer_arrays("opt_d", opt_d)
    arrays.update(ag)
    arrays.update(ad)
    arrays["rng/torch"] = torch_rng_array()
    return Checkpoint(
        kind="gemini",
        config_hash=cfg.hash,
        spec={
            "generator": cfg.gemini_spec.echo(),
            "discriminator": disc_spec.echo(),
            "run": cfg.canonical(),
        },
        epoch=epoch,
        arrays=arrays,
        extra={
            "optimizers": {"opt_g": mg, "opt_d": md},
            "corpus_hash": corpus_hash,
            "val": val,
        },
    )


def train_gemini(cfg: RunConfig, corpus_dir, out_path) -> dict:
    """Alternating GAN training of the twin-decoder generator.

    The discriminator sees HR grey stacked with one-hot ground-truth
    labels as "real" and the generator's grey stacked with its softmax
    probabilities as "fake". The best-validation checkpoint lands at
    ``out_path``; every finished epoch also refreshes ``out_path + ".last"``.
    """
    torch.set_num_threads(1)
    doc = load_corpus(corpus_dir)
    train_cases = _load_split(corpus_dir, doc, "train")
    if not train_cases:
        raise ValidationError(f"corpus {corpus_dir} has no training cases")
    val_cases = _load_split(corpus_dir, doc, "val") or train_cases
    _check_gemini_geometry(cfg, train_cases)

    torch.manual_seed(cfg.seed)
    gen = GeminiGenerator(cfg.gemini_spec)
    disc_spec = DiscriminatorSpec.for_gemini(cfg.gemini_spec, cfg.discriminator_base_channels)
    disc = Discriminator(disc_spec)
    opt = cfg.gemini_optimizer
    opt_g = torch.optim.Adam(
        gen.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay
    )
    opt_d = torch.optim.Adam(
        disc.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay
    )

    out_path = str(out_path)
    last_path = out_path + ".last"
    log_path = out_path + ".log.jsonl"
    corpus_hash = doc["config_hash"]
    num_classes = cfg.gemini_spec.num_classes
    rows, best_score, best_epoch = [], None, None
    saved_last = None

    for epoch in range(cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, len(train_cases))
        sums = {"d_loss": 0.0, "g_loss": 0.0, "ce": 0.0, "mse": 0.0, "gan": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            indices = order[start : start + cfg.batch_size]
            lr_t, hr_t, seg_t = _gemini_batch(train_cases, indices, cfg, epoch)

            grey_pred, seg_logits = gen(lr_t)
            _check_outputs_finite(
                (grey_pred, seg_logits), f"epoch {epoch} generator", saved_last
            )
            probs = torch.softmax(seg_logits, dim=1)
            one_hot = F.one_hot(seg_t, num_classes).permute(0, 4, 1, 2, 3).to(hr_t.dtype)

            d_real = disc(discriminator_input(hr_t, one_hot))
            d_fake = disc(discriminator_input(grey_pred.detach(), probs.detach()))
            d_loss = discriminator_loss(d_real, d_fake)
            _check_finite(d_loss, f"epoch {epoch} discriminator loss", saved_last)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            d_fake_g = disc(discriminator_input(grey_pred, probs))
            total, parts = gemini_generator_loss(
                seg_logits, seg_t, grey_pred, hr_t, d_fake_g, cfg.gemini_loss
            )
            _check_finite(total, f"epoch {epoch} generator loss", saved_last)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()

            sums["d_loss"] += float(d_loss.detach())
            sums["g_loss"] += float(total.detach())
            for key in ("ce", "mse", "gan"):
                sums[key] += float(parts[key].detach())
            n_batches += 1

        val_psnr, val_dice = _validate_gemini(gen, val_cases)
        row = {
            "epoch": epoch,
            **{k: v / n_batches for k, v in sums.items()},
            "val_psnr": val_psnr,
            "val_dice": val_dice,
        }
        score = (val_dice, val_psnr)
        ckpt = _gemini_checkpoint(
            cfg, gen, disc, disc_spec, opt_g, opt_d, epoch, corpus_hash,
            {"psnr": val_psnr, "dice": val_dice},
        )
        save_checkpoint(last_path, ckpt)
        saved_last = last_path
        if best_score is None or score > best_score:
            best_score, best_epoch = score, epoch
            save_checkpoint(out_path, ckpt)
            row["best"] = True
        rows.append(row)
        _write_log(log_path, rows)

    return {
        "checkpoint": out_path,
        "last_checkpoint": last_path,
        "log": log_path,
        "best_epoch": best_epoch,
        "epochs": cfg.epochs,
        "rows": rows,
    }


def load_gemini_model(path, expect_config_hash=None):
    """Rebuild the generator from a checkpoint; returns (model, checkpoint)."""
    ckpt = load_checkpoint(path, expect_kind="gemini", expect_config_hash=expect_config_hash)
    gen = GeminiGenerator(GeminiGeneratorSpec(**ckpt.spec["generator"]))
    load_module_arrays("generator", ckpt.arrays, gen)
    gen.eval()
    return gen, ckpt


def load_gemini_discriminator(ckpt: Checkpoint) -> Discriminator:
    disc = Discriminator(DiscriminatorSpec(**ckpt.spec["discriminator"]))
    load_module_arrays("discriminator", ckpt.arrays, disc)
    disc.eval()
    return disc


def discriminator_equilibrium(gen: GeminiGenerator, disc: Discriminator, cases) -> dict:
    """Mean discriminator output on held-out real and generated batches."""
    if not cases:
        raise ValidationError("no cases to probe the discriminator with")
    num_classes = gen.spec.num_classes
    real_vals, fake_vals = [], []
    gen_was, disc_was = gen.training, disc.training
    gen.eval()
    disc.eval()
    with torch.no_grad():
        for case in cases:
            lr_t = _stack_to_tensor(case["lr"].voxels).unsqueeze(0)
            hr_t = _stack_to_tensor(case["hr"].voxels).unsqueeze(0)
            seg_t = _stack_to_tensor(case["hr_seg"].voxels, dtype=np.int64).unsqueeze(0)
            one_hot = F.one_hot(seg_t, num_classes).permute(0, 4, 1, 2, 3).to(hr_t.dtype)
            grey_pred, seg_logits = gen(lr_t)
            probs = torch.softmax(seg_logits, dim=1)
            real_vals.append(float(disc(discriminator_input(hr_t, one_hot))))
            fake_vals.append(float(disc(discriminator_input(grey_pred, probs))))
    if gen_was:
        gen.train()
    if disc_was:
        disc.train()
    return {"real_mean": float(np.mean(real_vals)), "fake_mean": float(np.mean(fake_vals))}


# ---------------------------------------------------------------------------
# V-AMA (two-phase domain adaptation)


def _align_pair(source_case, target_case):
    """Source LR grey resampled onto the target grid via landmark fit.

    Falls back to the unaligned source when either case lacks usable
    landmarks (a cavity that vanished in the LR label decimation).
    """
    try:
        lm_s = extract_landmarks(source_case["lr_seg"])
        lm_t = extract_landmarks(target_case["lr_seg"])
    except ValidationError:
        return source_case["lr"], False
    transform = fit_rigid(lm_s, lm_t)
    return resample_rigid(source_case["lr"], transform, target_case["lr"]), True


def _vama_batch(source_cases, target_cases, s_idx, t_idx, cfg: RunConfig, phase, epoch):
    """Aligned, jointly augmented (i_t, i_s) tensors for one batch."""
    t_list, s_list, aligned = [], [], 0
    for j, (si, ti) in enumerate(zip(s_idx, t_idx)):
        source, target = source_cases[si], target_cases[ti]
        aligned_lr, ok = _align_pair(source, target)
        aligned += int(ok)
        i_t = target["lr"].voxels
        i_s = aligned_lr.voxels
        if cfg.augmentation is not None:
            seed = _derived_seed(cfg.seed, _TAG_AUGMENT, phase, epoch, int(si), int(ti))
            t = sample_transform(cfg.augmentation, i_t.shape[:2], seed)
            i_t = apply_to_array(i_t, t)
            i_s = apply_to_array(i_s, t)
        t_list.append(_stack_to_tensor(i_t))
        s_list.append(_stack_to_tensor(i_s))
    return torch.stack(t_list), torch.stack(s_list), aligned


def _check_vama_geometry(cfg: RunConfig, cases, what):
    nx, ny, nz = cases[0]["lr"].dims
    plane = cfg.augmentation.crop_size if (
        cfg.augmentation is not None and cfg.augmentation.crop_size is not None
    ) else (nx, ny)
    # two downsampling stages in the encoder; the discriminator halves 4x
    if plane[0] % 16 or plane[1] % 16:
        raise ValidationError(
            f"{what} training plane {tuple(plane)} must be divisible by 16"
        )


def _vama_checkpoint(cfg, model, discs, opts, phase, epoch, hashes, extra_meta):
    arrays = {}
    arrays.update(module_arrays("model", model))
    for name, disc in discs.items():
        arrays.update(module_arrays(name, disc))
    opt_meta = {}
    for name, opt in opts.items():
        a, m = optimizer_arrays(name, opt)
        arrays.update(a)
        opt_meta[name] = m
    arrays["rng/torch"] = torch_rng_array()
    return Checkpoint(
        kind="vama",
        config_hash=cfg.hash,
        spec={
            "slices": model.slices,
            "vama": cfg.vama.echo(),
            "run": cfg.canonical(),
        },
        epoch=epoch,
        arrays=arrays,
        extra={
            "phase": phase,
            "optimizers": opt_meta,
            "corpus_hashes": hashes,
            **extra_meta,
        },
    )


def train_vama(cfg: RunConfig, source_dir, target_dir, out_path) -> dict:
    """Two-phase adaptation training.

    Phase 1 fits the target block (encoder+decoder+its discriminator) to
    reconstruct target volumes. Phase 2 freezes the whole target block and
    fits the source block, whose encoder features are conditioned on the
    frozen target encoder, against the target-domain references. Source
    volumes are rigidly aligned onto their paired target grid before every
    batch — training-time only.
    """
    torch.set_num_threads(1)
    source_doc = load_corpus(source_dir)
    target_doc = load_corpus(target_dir)
    source_cases = _load_split(source_dir, source_doc, "train")
    target_cases = _load_split(target_dir, target_doc, "train")
    if not source_cases or not target_cases:
        raise ValidationError("both corpora need a non-empty train split")
    if source_cases[0]["lr"].dims != target_cases[0]["lr"].dims:
        raise ValidationError(
            f"source LR dims {source_cases[0]['lr'].dims} differ from "
            f"target {target_cases[0]['lr'].dims}"
        )
    _check_vama_geometry(cfg, target_cases, "vama")
    slices = target_cases[0]["lr"].dims[2]

    torch.manual_seed(cfg.seed)
    model = VamaModel(slices, cfg.vama)
    disc_spec = DiscriminatorSpec(in_channels=slices, base_channels=cfg.discriminator_base_channels)
    disc_t = Discriminator(disc_spec)
    disc_s = Discriminator(disc_spec)

    vc = cfg.vama
    betas = (vc.beta1, 0.999)
    target_params = list(model.target_encoder.parameters()) + list(
        model.target_decoder.parameters()
    )
    source_params = list(model.source_encoder.parameters()) + list(
        model.source_decoder.parameters()
    )
    opt_t = torch.optim.Adam(target_params, lr=vc.lr, betas=betas)
    opt_dt = torch.optim.Adam(disc_t.parameters(), lr=vc.lr, betas=betas)
    opt_s = torch.optim.Adam(source_params, lr=vc.lr, betas=betas)
    opt_ds = torch.optim.Adam(disc_s.parameters(), lr=vc.lr, betas=betas)
    discs = {"disc_target": disc_t, "disc_source": disc_s}
    opts = {"opt_t": opt_t, "opt_dt": opt_dt, "opt_s": opt_s, "opt_ds": opt_ds}
    hashes = {"source": source_doc["config_hash"], "target": target_doc["config_hash"]}

    out_path = str(out_path)
    last_path = out_path + ".last"
    log_path = out_path + ".log.jsonl"
    n_pairs = min(len(source_cases), len(target_cases))
    rows = []
    saved_last = None

    phase_plan = ((1, cfg.phase1_epochs), (2, cfg.phase2_epochs))
    for phase, n_epochs in phase_plan:
        if phase == 2:
            # the whole target block (and its BN statistics) must not move
            for p in target_params:
                p.requires_grad_(False)
            model.target_encoder.eval()
            model.target_decoder.eval()
        for epoch in range(n_epochs):
            s_order = _epoch_order(cfg.seed, epoch, len(source_cases), salt=100 + phase)[:n_pairs]
            t_order = _epoch_order(cfg.seed, epoch, len(target_cases), salt=200 + phase)[:n_pairs]
            sums = {"mse": 0.0, "kl": 0.0, "l1": 0.0, "gan": 0.0, "d_loss": 0.0}
            n_batches, aligned_pairs = 0, 0
            for start in range(0, n_pairs, cfg.batch_size):
                s_idx = s_order[start : start + cfg.batch_size]
                t_idx = t_order[start : start + cfg.batch_size]
                i_t, i_s, aligned = _vama_batch(
                    source_cases, target_cases, s_idx, t_idx, cfg, phase, epoch
                )
                aligned_pairs += aligned
                noise = torch.Generator().manual_seed(
                    _derived_seed(cfg.seed, _TAG_NOISE, phase, epoch, start)
                )

                # a diverged encoder yields non-finite latent stats, which the
                # latent types refuse; surface that as a numeric failure
                try:
                    if phase == 1:
                        disc, opt_block, opt_disc = disc_t, opt_t, opt_dt
                        out, lat = model.target_forward(i_t, i_s, generator=noise)
                        loss_fn = lambda d_fake: target_block_loss(i_t, out, lat, d_fake, vc)
                    else:
                        disc, opt_block, opt_disc = disc_s, opt_s, opt_ds
                        out, mix, _ = model.source_forward(i_t, i_s, generator=noise)
                        loss_fn = lambda d_fake: source_block_loss(i_t, out, mix, d_fake, vc)
                except ValidationError as exc:
                    raise NumericError(
                        f"phase {phase} epoch {epoch}: {exc}; last good checkpoint: "
                        f"{saved_last if saved_last else 'none saved yet'}",
                        last_checkpoint=saved_last,
                    ) from exc
                _check_outputs_finite(
                    (out,), f"phase {phase} epoch {epoch} block", saved_last
                )

                d_loss = discriminator_loss(disc(i_t), disc(out.detach()))
                _check_finite(d_loss, f"phase {phase} epoch {epoch} discriminator loss", saved_last)
                opt_disc.zero_grad()
                d_loss.backward()
                opt_disc.step()

                total, parts = loss_fn(disc(out))
                _check_finite(total, f"phase {phase} epoch {epoch} block loss", saved_last)
                opt_block.zero_grad()
                total.backward()
                opt_block.step()

                for key in sums:
                    if key != "d_loss":
                        sums[key] += float(parts[key].detach())
                sums["d_loss"] += float(d_loss.detach())
                n_batches += 1

            row = {
                "phase": phase,
                "epoch": epoch,
                **{k: v / n_batches for k, v in sums.items()},
                "aligned_pairs": aligned_pairs,
                "total_pairs": n_pairs,
            }
            rows.append(row)
            _write_log(log_path, rows)
            ckpt = _vama_checkpoint(
                cfg, model, discs, opts, phase, epoch, hashes,
                {"target_block_hash": module_hash(model.target_encoder)},
            )
            save_checkpoint(last_path, ckpt)
            saved_last = last_path

    final = _vama_checkpoint(
        cfg, model, discs, opts, 2, cfg.phase2_epochs - 1, hashes,
        {"target_block_hash": module_hash(model.target_encoder)},
    )
    save_checkpoint(out_path, final)
    return {
        "checkpoint": out_path,
        "last_checkpoint": last_path,
        "log": log_path,
        "rows": rows,
    }


def load_vama_model(path, expect_config_hash=None):
    """Rebuild the adaptation model from a checkpoint; returns (model, ckpt)."""
    ckpt = load_checkpoint(path, expect_kind="vama", expect_config_hash=expect_config_hash)
    model = VamaModel(int(ckpt.spec["slices"]), VamaConfig(**ckpt.spec["vama"]))
    load_module_arrays("model", ckpt.arrays, model)
    model.eval()
    return model, ckpt
