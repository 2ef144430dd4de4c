"""Command-line entry point: ``dccomix <subcommand> [options]``.

Every subcommand resolves its configuration as preset defaults <- ``--config``
file <- ``--set section.key=value`` overrides (and the dedicated flags), writes
the resolved snapshot to ``config.json`` and keeps all outputs under
``<out-dir>/<subcommand>-<timestamp>-<config hash>/``.

Exit codes: 0 success, 1 runtime failure (stderr line ``error: <category>: <message>``),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from dccomix.config import PRESETS, VARIANTS, config_hash, parse_override, resolve_run_config, snapshot_bytes
from dccomix.errors import DCComixError

logger = logging.getLogger("dccomix")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="global seed (overrides config)")
    p.add_argument("--out-dir", default="runs", help="parent directory of run directories")
    p.add_argument("--preset", choices=PRESETS, help="configuration preset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. train.max_steps=100")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dccomix", description="Discrete-code prosody transfer TTS pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="resample, filter and split a recording directory")
    _common(p)
    p.add_argument("--source", required=True, help="directory of <speaker>/<utt>.wav (+ .txt transcripts)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("generate-synthetic", help="write the factorized synthetic corpus")
    _common(p)

    p = sub.add_parser("train-codec", help="fit the mini residual quantizer")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")

    p = sub.add_parser("train", help="train the synthesizer")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--codec", help="mini-codec checkpoint (required for code references)")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--limit", type=int, help="use only the first N training utterances")

    p = sub.add_parser("synthesize", help="synthesize one utterance")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--reference", required=True, help="reference .wav or .dcmx code matrix")
    p.add_argument("--noise-scale", type=float, default=0.667)
    p.add_argument("--noise-scale-w", type=float, default=0.8)
    p.add_argument("--length-scale", type=float, default=1.0)

    p = sub.add_parser("evaluate", help="objective evaluation over a manifest split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--probe", action="store_true", help="also run the leakage probe (needs labels.tsv)")

    p = sub.add_parser("ablate", help="train + evaluate one ablation variant")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--codec")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--max-pairs", type=int)

    p = sub.add_parser("count-params", help="parameter counts per variant")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    return parser


class Run:
    """Resolved configuration plus the run directory that holds every output."""

    def __init__(self, args: argparse.Namespace, extra: dict | None = None):
        overrides = [parse_override(s) for s in args.set]
        if args.preset:
            overrides.insert(0, {"preset": args.preset})
        if args.seed is not None:
            overrides.append({"seed": args.seed})
        if extra:
            overrides.append(extra)
        self.cfg = resolve_run_config(config_file=args.config, overrides=overrides)
        self.cfg["train"]["seed"] = self.cfg["seed"]
        self.seed = int(self.cfg["seed"])
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.dir: Path | None = None

    def open(self) -> Path:
        stamp = time.strftime("%Y%m%dT%H%M%S")
        base = self.out_dir / f"{self.args.command}-{stamp}-{config_hash(self.cfg)}"
        d, i = base, 1
        while d.exists():
            d = Path(f"{base}_{i}")
            i += 1
        d.mkdir(parents=True)
        self.dir = d
        (d / "config.json").write_bytes(snapshot_bytes(self.cfg))
        return d


def _seed_everything(seed: int, threads: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


# -- subcommands ---------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    from dccomix.data.corpus import PrepareConfig, prepare_corpus

    run = Run(args)
    d = run.open()
    cfg = PrepareConfig(min_duration_s=run.cfg["data"]["min_duration_s"], seed=run.seed, workers=args.workers)
    _, stats = prepare_corpus(args.source, d / "manifest.tsv", cfg)
    (d / "stats.json").write_text(json.dumps(stats.as_dict(), sort_keys=True, indent=2) + "\n")
    print(d / "manifest.tsv")
    return 0


def cmd_generate_synthetic(args) -> int:
    from dccomix.data.synthetic import generate_synthetic_corpus

    run = Run(args)
    d = run.open()
    c = run.cfg["data"]
    records, _ = generate_synthetic_corpus(d, c["num_content"], c["num_prosody"], c["num_speakers"], c["n_per_cell"], seed=run.seed)
    print(d / "manifest.tsv")
    logger.info("wrote %d items", len(records))
    return 0


def cmd_train_codec(args) -> int:
    from dccomix.codec.formats import save_rvq
    from dccomix.codec.rvq import RvqConfig, train_mini_rvq
    from dccomix.data.audio import read_wav
    from dccomix.data.corpus import read_manifest, resolve_audio

    run = Run(args, {"codec": {"seed": args.seed}} if args.seed is not None else None)
    d = run.open()
    records = [r for r in read_manifest(args.manifest) if r.split == args.split]
    q = train_mini_rvq((read_wav(resolve_audio(args.manifest, r)) for r in records), RvqConfig(**run.cfg["codec"]))
    save_rvq(d / "codec.mrvq", q)
    print(d / "codec.mrvq")
    return 0


def _model_config(run: Run, manifest: str, variant: str):
    from dccomix.config import ModelConfig, variant_model_config
    from dccomix.data.corpus import read_manifest

    speakers = sorted({r.speaker_id for r in read_manifest(manifest)})
    run.cfg["model"]["speakers"] = speakers
    return variant_model_config(ModelConfig.from_dict(run.cfg["model"]), variant)


def cmd_train(args) -> int:
    from dccomix.backbone.synthesizer import Synthesizer
    from dccomix.codec.formats import load_rvq
    from dccomix.train import TrainConfig, load_dataset, train_run

    run = Run(args, {"train": {"max_steps": args.max_steps}} if args.max_steps is not None else None)
    mcfg = _model_config(run, args.manifest, args.variant)
    run.cfg["model"] = mcfg.to_dict()
    d = run.open()
    codec = load_rvq(args.codec) if args.codec else None
    _seed_everything(run.seed, args.threads)
    tcfg = TrainConfig.from_dict(run.cfg["train"])
    dataset = load_dataset(args.manifest, mcfg, codec, split="train", limit=args.limit)
    model = Synthesizer(mcfg)
    res = train_run(model, dataset, tcfg, d, run.cfg, codec)
    print(res.checkpoint_path)
    return 0


def _load_reference(path: str):
    from dccomix.codec.formats import read_code_matrix
    from dccomix.data.audio import read_wav

    return read_code_matrix(path) if path.endswith(".dcmx") else read_wav(path)


def cmd_synthesize(args) -> int:
    from dccomix.backbone.synthesizer import synthesize
    from dccomix.data.audio import write_wav
    from dccomix.evaluation import text_tokens
    from dccomix.train import load_model

    run = Run(args)
    d = run.open()
    _seed_everything(run.seed, args.threads)
    model, codec, _ = load_model(args.checkpoint)
    y = synthesize(text_tokens(args.text), args.speaker, _load_reference(args.reference), model, codec,
                   args.noise_scale, args.noise_scale_w, args.length_scale, seed=run.seed)
    write_wav(d / "output.wav", y)
    meta = {
        "text": args.text,
        "speaker": args.speaker,
        "reference": str(args.reference),
        "checkpoint": str(args.checkpoint),
        "sample_rate": y.sample_rate,
        "num_samples": len(y),
        "frames": len(y) // model.hop_length,
        "seed": run.seed,
        "noise_scale": args.noise_scale,
        "noise_scale_w": args.noise_scale_w,
        "length_scale": args.length_scale,
    }
    (d / "output.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(d / "output.wav")
    return 0


def cmd_evaluate(args) -> int:
    from dccomix.evaluation import batch_evaluate, probe_corpus
    from dccomix.train import load_model

    extra = {"eval": {"max_pairs": args.max_pairs}} if args.max_pairs is not None else None
    run = Run(args, extra)
    d = run.open()
    _seed_everything(run.seed, args.threads)
    model, codec, _ = load_model(args.checkpoint)
    e = run.cfg["eval"]
    report = batch_evaluate(args.manifest, model, codec, seed=run.seed, split=args.split,
                            noise_scale=e["noise_scale"], noise_scale_w=e["noise_scale_w"], max_pairs=e["max_pairs"])
    if args.probe:
        probe = probe_corpus(model, Path(args.manifest).parent, codec, seed=run.seed)
        report.prosody_probe_acc = probe["prosody_probe_acc"]
        report.content_probe_acc = probe["content_probe_acc"]
    report.write(d / "report.txt")
    print(f"n_pairs {report.n_pairs} mean_cos_s {report.mean_cos_s:.6f} mean_cos_d {report.mean_cos_d:.6f}")
    print(d / "report.txt")
    return 0


def cmd_ablate(args) -> int:
    from dccomix.codec.formats import load_rvq
    from dccomix.train import TrainConfig, ablation_run

    extra: dict = {}
    if args.max_steps is not None:
        extra["train"] = {"max_steps": args.max_steps}
    if args.max_pairs is not None:
        extra["eval"] = {"max_pairs": args.max_pairs}
    run = Run(args, extra or None)
    mcfg = _model_config(run, args.manifest, "full")
    run.cfg["model"] = mcfg.to_dict()
    d = run.open()
    _seed_everything(run.seed, args.threads)
    codec = load_rvq(args.codec) if args.codec else None
    _, report = ablation_run(args.variant, args.manifest, mcfg, TrainConfig.from_dict(run.cfg["train"]), d, codec,
                             run.cfg, eval_seed=run.seed, max_pairs=run.cfg["eval"]["max_pairs"])
    print(f"{args.variant}: mean_cos_s {report.mean_cos_s:.6f} mean_cos_d {report.mean_cos_d:.6f}")
    print(d / "report.txt")
    return 0


def cmd_count_params(args) -> int:
    from dccomix.backbone.synthesizer import Synthesizer, count_parameters
    from dccomix.config import ModelConfig, variant_model_config

    run = Run(args)
    d = run.open()
    _seed_everything(run.seed, args.threads)
    base = ModelConfig.from_dict(run.cfg["model"])
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    out = {}
    for v in variants:
        model = Synthesizer(variant_model_config(base, v))
        out[v] = {"total": count_parameters(model), "by_submodule": count_parameters(model, "by_submodule")}
        parts = " ".join(f"{k}={n}" for k, n in out[v]["by_submodule"].items())
        print(f"{v}\ttotal={out[v]['total']}\t{parts}")
        del model
    if "full" in out:
        for v in ("no_mixer", "no_dc"):
            if v in out:
                delta = out[v]["total"] - out["full"]["total"]
                out[f"delta_{v}"] = delta
                print(f"delta({v} - full)\t{delta}")
    (d / "counts.json").write_text(json.dumps(out, sort_keys=True, indent=2) + "\n")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "generate-synthetic": cmd_generate_synthetic,
    "train-codec": cmd_train_codec,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "count-params": cmd_count_params,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except DCComixError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover - last-resort categorisation
        print(f"error: internal: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
