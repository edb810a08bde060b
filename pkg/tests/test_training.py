import os

import numpy as np
import pytest
import torch

from volsr.config import parse_run_config
from volsr.errors import NumericError, ParseError, ValidationError
from volsr.losses import weighted_cross_entropy
from volsr.metrics import psnr
from volsr.nets import GeminiGenerator
from volsr.phantom import (
    DOMAIN_SHIFT_PRESETS,
    PhantomParams,
    generate_corpus,
    load_case,
    load_corpus,
)
from volsr.training import (
    _epoch_order,
    _gemini_batch,
    _load_split,
    _validate_gemini,
    discriminator_equilibrium,
    load_gemini_model,
    load_vama_model,
    module_hash,
    train_gemini,
    train_vama,
)
from volsr.vama import adapt

TINY = PhantomParams(hr_dims=(32, 32, 8), lr_factor=4)


def _tiny_doc(**overrides):
    doc = {
        "seed": 5,
        "epochs": 2,
        "batch_size": 2,
        "gemini": {
            "spec": {"in_slices": 2, "levels": 3, "base_channels": 8},
            "discriminator_base_channels": 8,
        },
        "vama": {"base_channels": 8, "latent_channels": 4,
                 "phase1_epochs": 1, "phase2_epochs": 1},
        "augmentation": None,
    }
    doc.update(overrides)
    return doc


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    target = str(root / "target")
    source = str(root / "source")
    generate_corpus(target, {"train": 4, "val": 1}, seed=7, base_params=TINY)
    generate_corpus(source, {"train": 4}, seed=107, base_params=TINY,
                    shift=DOMAIN_SHIFT_PRESETS["default"])
    return {"target": target, "source": source}


def test_corpus_loader_round_trip(corpora):
    doc = load_corpus(corpora["target"])
    assert doc["config_hash"]
    assert len(doc["cases"]["train"]) == 8  # 4 anatomies x 2 phases
    case = load_case(corpora["target"], "train", doc["cases"]["train"][0])
    assert case["lr"].dims == (32, 32, 2)
    assert case["hr"].dims == (32, 32, 8)
    assert case["hr_seg"].dims == (32, 32, 8)
    with pytest.raises(ValidationError):
        load_corpus(corpora["target"] + "_nowhere")


def test_corpus_loader_rejects_bad_index(tmp_path):
    (tmp_path / "corpus.json").write_text("{nope")
    with pytest.raises(ParseError):
        load_corpus(tmp_path)
    (tmp_path / "corpus.json").write_text("{\"cases\": {}}")
    with pytest.raises(ParseError, match="config_hash"):
        load_corpus(tmp_path)


def test_single_volume_overfit_smoke(tmp_path):
    # one case, 200 optimizer steps: training MSE must fall below 0.1x its
    # starting value (measured at 0.022x, so plenty of slack)
    corpus = str(tmp_path / "one")
    generate_corpus(corpus, {"train": 1}, seed=3, base_params=TINY, phases=("ED",))
    doc = _tiny_doc(epochs=200, batch_size=1)
    doc["gemini"]["optimizer"] = {"lr": 1e-3, "weight_decay": 1e-6}
    cfg = parse_run_config(doc, env={})
    res = train_gemini(cfg, corpus, str(tmp_path / "g.ckpt"))
    rows = res["rows"]
    assert rows[-1]["mse"] < 0.1 * rows[0]["mse"]
    # and the segmentation branch learned the case too
    assert rows[-1]["val_dice"] > 0.5


def test_gemini_two_runs_bitwise_identical(corpora, tmp_path):
    cfg = parse_run_config(_tiny_doc(), env={})
    res_a = train_gemini(cfg, corpora["target"], str(tmp_path / "a.ckpt"))
    res_b = train_gemini(cfg, corpora["target"], str(tmp_path / "b.ckpt"))
    assert res_a["rows"] == res_b["rows"]
    with open(res_a["checkpoint"], "rb") as fa, open(res_b["checkpoint"], "rb") as fb:
        assert fa.read() == fb.read()
    with open(res_a["log"]) as fa, open(res_b["log"]) as fb:
        assert fa.read() == fb.read()


def test_gemini_checkpoint_restores_logged_model(corpora, tmp_path):
    cfg = parse_run_config(_tiny_doc(), env={})
    out = str(tmp_path / "g.ckpt")
    res = train_gemini(cfg, corpora["target"], out)
    gen, ckpt = load_gemini_model(out, expect_config_hash=cfg.hash)
    assert ckpt.epoch == res["best_epoch"]
    # recomputing validation from the restored weights reproduces the log
    val_cases = _load_split(corpora["target"], load_corpus(corpora["target"]), "val")
    val_psnr, val_dice = _validate_gemini(gen, val_cases)
    assert val_psnr == pytest.approx(ckpt.extra["val"]["psnr"], abs=1e-5)
    assert val_dice == pytest.approx(ckpt.extra["val"]["dice"], abs=1e-8)
    assert ckpt.extra["corpus_hash"] == load_corpus(corpora["target"])["config_hash"]


def test_zero_weight_run_equals_pure_ce_loop(corpora, tmp_path):
    doc = _tiny_doc()
    doc["gemini"]["loss"] = {"lambda_mse": 0.0, "omega_gan": 0.0}
    doc["gemini"]["optimizer"] = {"lr": 1e-4, "weight_decay": 0.0}
    cfg = parse_run_config(doc, env={})
    res = train_gemini(cfg, corpora["target"], str(tmp_path / "zero.ckpt"))

    # independent loop optimizing the cross-entropy alone, same seed
    cases = _load_split(corpora["target"], load_corpus(corpora["target"]), "train")
    torch.manual_seed(cfg.seed)
    gen = GeminiGenerator(cfg.gemini_spec)
    opt = torch.optim.Adam(gen.parameters(), lr=1e-4, betas=(0.9, 0.999), weight_decay=0.0)
    weights = torch.ones(cfg.gemini_spec.num_classes)
    ce_trace = []
    for epoch in range(cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, len(cases))
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            lr_t, _, seg_t = _gemini_batch(cases, order[start:start + cfg.batch_size], cfg, epoch)
            _, seg_logits = gen(lr_t)
            ce = weighted_cross_entropy(seg_logits, seg_t, weights)
            opt.zero_grad()
            ce.backward()
            opt.step()
            total += float(ce.detach())
            n += 1
        ce_trace.append(total / n)

    got = [row["ce"] for row in res["rows"]]
    assert got == ce_trace
    # and the total in that run is the CE alone
    assert [row["g_loss"] for row in res["rows"]] == ce_trace


def test_vama_phase2_never_touches_target_block(corpora, tmp_path):
    base = _tiny_doc()
    cfg_short = parse_run_config(base, env={})
    doc_long = _tiny_doc()
    doc_long["vama"] = dict(doc_long["vama"], phase2_epochs=3)
    cfg_long = parse_run_config(doc_long, env={})

    res_short = train_vama(cfg_short, corpora["source"], corpora["target"],
                           str(tmp_path / "short.ckpt"))
    res_long = train_vama(cfg_long, corpora["source"], corpora["target"],
                          str(tmp_path / "long.ckpt"))
    model_short, ckpt_short = load_vama_model(res_short["checkpoint"])
    model_long, ckpt_long = load_vama_model(res_long["checkpoint"])

    # two more phase-2 epochs changed nothing in the frozen target block...
    assert module_hash(model_short.target_encoder) == module_hash(model_long.target_encoder)
    assert module_hash(model_short.target_decoder) == module_hash(model_long.target_decoder)
    assert ckpt_short.extra["target_block_hash"] == ckpt_long.extra["target_block_hash"]
    # ...while the source block kept training
    assert module_hash(model_short.source_decoder) != module_hash(model_long.source_decoder)


def test_vama_two_runs_bitwise_identical(corpora, tmp_path):
    cfg = parse_run_config(_tiny_doc(), env={})
    res_a = train_vama(cfg, corpora["source"], corpora["target"], str(tmp_path / "a.ckpt"))
    res_b = train_vama(cfg, corpora["source"], corpora["target"], str(tmp_path / "b.ckpt"))
    assert res_a["rows"] == res_b["rows"]
    with open(res_a["checkpoint"], "rb") as fa, open(res_b["checkpoint"], "rb") as fb:
        assert fa.read() == fb.read()


def test_vama_checkpoint_drives_adaptation(corpora, tmp_path):
    cfg = parse_run_config(_tiny_doc(), env={})
    res = train_vama(cfg, corpora["source"], corpora["target"], str(tmp_path / "v.ckpt"))
    model, ckpt = load_vama_model(res["checkpoint"], expect_config_hash=cfg.hash)
    assert ckpt.extra["phase"] == 2
    case = load_case(corpora["source"], "train", load_corpus(corpora["source"])["cases"]["train"][0])
    adapted = adapt(model, case["lr"])
    assert adapted.domain == "target"
    assert adapted.dims == case["lr"].dims
    assert np.isfinite(psnr(adapted, case["lr"]))


def test_diverged_gemini_run_aborts_with_numeric_error(corpora, tmp_path):
    doc = _tiny_doc(epochs=3, batch_size=1)
    doc["gemini"]["optimizer"] = {"lr": 1e12, "weight_decay": 0.0}
    cfg = parse_run_config(doc, env={})
    with pytest.raises(NumericError) as err:
        train_gemini(cfg, corpora["target"], str(tmp_path / "boom.ckpt"))
    # whatever epoch it blew up in, the error names the recovery point
    assert err.value.last_checkpoint is None or os.path.exists(err.value.last_checkpoint)


def test_diverged_vama_run_aborts_with_numeric_error(corpora, tmp_path):
    doc = _tiny_doc()
    doc["vama"] = dict(doc["vama"], lr=1e12)
    cfg = parse_run_config(doc, env={})
    with pytest.raises(NumericError):
        train_vama(cfg, corpora["source"], corpora["target"], str(tmp_path / "boom.ckpt"))


def test_equilibrium_probe_reports_means(corpora, tmp_path):
    cfg = parse_run_config(_tiny_doc(), env={})
    out = str(tmp_path / "g.ckpt")
    train_gemini(cfg, corpora["target"], out)
    gen, ckpt = load_gemini_model(out)
    from volsr.training import load_gemini_discriminator

    disc = load_gemini_discriminator(ckpt)
    cases = _load_split(corpora["target"], load_corpus(corpora["target"]), "val")
    probe = discriminator_equilibrium(gen, disc, cases)
    assert 0.0 <= probe["real_mean"] <= 1.0
    assert 0.0 <= probe["fake_mean"] <= 1.0
    with pytest.raises(ValidationError):
        discriminator_equilibrium(gen, disc, [])


def test_geometry_mismatches_rejected(corpora, tmp_path):
    # generator expecting the wrong slice count must be refused up front
    doc = _tiny_doc()
    doc["gemini"]["spec"]["in_slices"] = 4
    cfg = parse_run_config(doc, env={})
    with pytest.raises(ValidationError, match="slices"):
        train_gemini(cfg, corpora["target"], str(tmp_path / "x.ckpt"))
    # crop that the encoder cannot halve cleanly
    doc = _tiny_doc()
    doc["augmentation"] = {"crop_size": [20, 20]}
    cfg = parse_run_config(doc, env={})
    with pytest.raises(ValidationError, match="divisible"):
        train_gemini(cfg, corpora["target"], str(tmp_path / "y.ckpt"))
    # empty corpus
    empty = str(tmp_path / "empty")
    generate_corpus(empty, {"test": 1}, seed=1, base_params=TINY, phases=("ED",))
    cfg = parse_run_config(_tiny_doc(), env={})
    with pytest.raises(ValidationError, match="train"):
        train_gemini(cfg, empty, str(tmp_path / "z.ckpt"))
