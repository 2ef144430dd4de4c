import json

import numpy as np
import pytest
import torch
from conftest import tiny_model_config

from dccomix.backbone import Synthesizer
from dccomix.backbone.checkpoint import load_checkpoint, save_checkpoint
from dccomix.config import (
    ModelConfig,
    deep_merge,
    parse_override,
    preset_model_config,
    resolve_run_config,
    variant_model_config,
)
from dccomix.errors import ConfigurationError, InvalidInputError, NumericError
from dccomix.train import (
    TrainConfig,
    ablation_run,
    collate,
    epoch_batches,
    load_dataset,
    load_model,
    lr_at,
    make_checkpoint,
    read_metrics,
    train_run,
)


@pytest.fixture(scope="module")
def tiny_dataset(tiny_corpus, fast_codec):
    return load_dataset(tiny_corpus / "manifest.tsv", tiny_model_config(), fast_codec, split="train", limit=6)


def _fresh(seed=0, **kw):
    torch.manual_seed(seed)
    return Synthesizer(tiny_model_config(**kw))


def _cfg(**kw):
    base = dict(max_steps=10, batch_size=2, segment_frames=16, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule -------------------------------------------------------------------


def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 2e-4
    assert lr_at(1, cfg) == pytest.approx(1.99975e-4, rel=1e-12)
    flat = TrainConfig(lr_decay_per_epoch=1.0)
    assert all(lr_at(e, flat) == 2e-4 for e in range(0, 500, 37))


def test_lr_strictly_decreasing():
    cfg = TrainConfig()
    lrs = [lr_at(e, cfg) for e in range(200)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))


def test_lr_negative_epoch():
    with pytest.raises(InvalidInputError):
        lr_at(-1, TrainConfig())


@pytest.mark.parametrize("kw", [{"lr_decay_per_epoch": 0.0}, {"lr_decay_per_epoch": 1.5}, {"batch_size": 0},
                                {"segment_frames": 0}, {"mixed_precision": True}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw).validate()


def test_epoch_batches_cover_and_repeat():
    b = epoch_batches(10, 3, seed=4, epoch=2)
    assert sorted(sum(b, [])) == list(range(10)) and [len(x) for x in b] == [3, 3, 3, 1]
    assert b == epoch_batches(10, 3, seed=4, epoch=2)
    assert b != epoch_batches(10, 3, seed=4, epoch=3)


# -- training runs ---------------------------------------------------------------


def test_max_steps_zero(tiny_dataset, tmp_path):
    model = _fresh()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    res = train_run(model, tiny_dataset, _cfg(max_steps=0), tmp_path)
    assert res.steps == 0 and read_metrics(res.log_path) == []
    ckpt = load_checkpoint(res.checkpoint_path)
    assert ckpt.step == 0
    for k, v in before.items():
        assert torch.equal(ckpt.model_state[k], v), k


def test_ten_step_determinism(tiny_dataset, tmp_path):
    logs = []
    for run in ("a", "b"):
        res = train_run(_fresh(), tiny_dataset, _cfg(), tmp_path / run)
        logs.append(read_metrics(res.log_path))
    assert len(logs[0]) == 10
    for x, y in zip(*logs):
        for key in ("mel", "kl", "dur", "total"):
            assert abs(x[key] - y[key]) <= 1e-7, (x["step"], key)


def test_metrics_log_and_schedule(tiny_dataset, tmp_path):
    res = train_run(_fresh(), tiny_dataset, _cfg(max_steps=7, checkpoint_interval=3), tmp_path)
    rows = read_metrics(res.log_path)
    assert [r["step"] for r in rows] == list(range(7))
    for r in rows:
        assert set(r) >= {"step", "epoch", "lr", "mel", "kl", "dur", "total"}
        # 6 items, batch 2 -> 3 steps per epoch
        assert r["epoch"] == r["step"] // 3
        assert r["lr"] == pytest.approx(lr_at(r["epoch"], TrainConfig()), rel=1e-12)
    assert (tmp_path / "checkpoint_0000003.dcck").exists() and (tmp_path / "checkpoint_0000006.dcck").exists()
    ckpt = load_checkpoint(res.checkpoint_path)
    assert ckpt.step == 7 and ckpt.config["model"] == tiny_model_config().to_dict()
    assert set(ckpt.optimizers) == {"g"} and set(ckpt.schedulers) == {"g"}


def test_non_finite_loss_names_term(tiny_dataset, tmp_path, monkeypatch):
    model = _fresh()
    real = model.train_forward

    def poisoned(batch, segment_frames, generator=None):
        out = real(batch, segment_frames, generator)
        out["dur"] = out["dur"] * float("nan")
        return out

    monkeypatch.setattr(model, "train_forward", poisoned)
    with pytest.raises(NumericError, match="non-finite dur loss at step 0"):
        train_run(model, tiny_dataset, _cfg(), tmp_path)


def test_discriminator_path(tiny_dataset, tmp_path):
    model = _fresh(use_discriminator=True)
    res = train_run(model, tiny_dataset, _cfg(max_steps=2), tmp_path)
    row = read_metrics(res.log_path)[-1]
    assert {"adv", "fm", "disc"} <= set(row)
    assert set(load_checkpoint(res.checkpoint_path).optimizers) == {"d", "g"}


# -- optimizer and checkpoint invariants -------------------------------------------


def test_zero_grad_step_without_decay_is_noop():
    model = _fresh()
    cfg = TrainConfig(weight_decay=0.0)
    opt = torch.optim.AdamW(model.parameters(), cfg.lr_init, betas=cfg.betas, eps=cfg.eps, weight_decay=0.0)
    before = [p.detach().clone() for p in model.parameters()]
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_zero_grad_step_with_decay_only_shrinks():
    model = _fresh()
    cfg = TrainConfig()
    opt = torch.optim.AdamW(model.parameters(), cfg.lr_init, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    before = [p.detach().clone() for p in model.parameters()]
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    for a, b in zip(before, model.parameters()):
        torch.testing.assert_close(b.detach(), a * (1 - cfg.lr_init * cfg.weight_decay), rtol=0, atol=1e-12)


def test_checkpoint_round_trip_bitwise_float64(tiny_dataset, tmp_path, fast_codec):
    model = _fresh().double().eval()
    path = tmp_path / "m.dcck"
    save_checkpoint(path, make_checkpoint(model, {"model": model.cfg.to_dict()}, 0, 0, codec=fast_codec))
    loaded, codec, _ = load_model(path)
    assert next(loaded.parameters()).dtype == torch.float64
    np.testing.assert_array_equal(codec.codebooks, fast_codec.codebooks)
    batch = collate(tiny_dataset[:2], model)
    spec = batch["spec"].double()
    g = model.condition(batch["speakers"], model.style(batch["ref"], batch["ref_lengths"]))
    g2 = loaded.condition(batch["speakers"], loaded.style(batch["ref"], batch["ref_lengths"]))
    assert torch.equal(g, g2)
    with torch.no_grad():
        a = model.reconstruct(spec, batch["spec_lengths"], g)
        b = loaded.reconstruct(spec, batch["spec_lengths"], g2)
    assert torch.equal(a, b)


# -- variants and configuration -----------------------------------------------------


def test_variant_configs():
    base = ModelConfig()
    assert variant_model_config(base, "full") == base
    assert variant_model_config(base, "no_mixer").refenc_kind == "gst"
    no_dc = Synthesizer(variant_model_config(base, "no_dc"))
    assert no_dc.refenc.input_kind == "spectrogram" and no_dc.refenc.encoder.in_channels == 513
    with pytest.raises(ConfigurationError):
        variant_model_config(base, "no_flow")


def test_preset_errors():
    with pytest.raises(ConfigurationError):
        preset_model_config("huge")
    with pytest.raises(ConfigurationError):
        ModelConfig(upsample_rates=[8, 8, 2]).validate()


def test_config_resolution_order(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("train:\n  max_steps: 5\n  batch_size: 3\n")
    cfg = resolve_run_config("desk", f, [parse_override("train.max_steps=7")])
    assert cfg["train"]["max_steps"] == 7 and cfg["train"]["batch_size"] == 3
    with pytest.raises(ConfigurationError):
        deep_merge(cfg, {"train": {"bogus": 1}})
    with pytest.raises(ConfigurationError):
        parse_override("novalue")


def test_ablation_run_harness(tiny_corpus, fast_codec, tmp_path):
    cfg = tiny_model_config()
    reports = {}
    for variant in ("full", "no_mixer", "no_dc"):
        res, rep = ablation_run(variant, tiny_corpus / "manifest.tsv", cfg, _cfg(max_steps=1),
                                tmp_path / variant, fast_codec, {"model": {}}, eval_seed=0, max_pairs=2)
        assert rep.n_pairs == 2 and (tmp_path / variant / "report.txt").exists()
        assert rep.prosody_probe_acc is not None
        reports[variant] = rep
    # identical evaluation protocol: same pairs for every variant
    pairs = {v: [(p.utt_id, p.reference_id) for p in r.pairs] for v, r in reports.items()}
    assert pairs["full"] == pairs["no_mixer"] == pairs["no_dc"]
    saved = json.loads(json.dumps(load_checkpoint(tmp_path / "no_dc" / "checkpoint.dcck").config))
    assert saved["variant"] == "no_dc" and saved["model"]["ref_input"] == "spectrogram"
