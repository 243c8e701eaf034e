"""Command-line entry point.

Subcommands cover the full pipeline: prepare-data, train-wavegan,
extract-stats, train-acoustic, synthesize, reconstruct, eval-recon, and
pitch-ablation. Each takes --config plus targeted overrides; exit code is
0 on success, 1 on any handled error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import torch

from . import pipeline
from .config import apply_override, load_config
from .errors import AlignmentError, FormatError, VersionError


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="YAML pipeline config")
    sub.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config field by dotted path, e.g. wavegan_trainer.steps=500",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ztts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="resample, pitch-track, and tokenize a manifest")
    _add_common(p)
    p.add_argument("--manifest", help="override the manifest path from the config")

    p = sub.add_parser("train-wavegan", help="train the waveform autoencoder stage")
    _add_common(p)
    p.add_argument("--steps", type=int, help="override total training steps")
    p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")

    p = sub.add_parser("extract-stats", help="cache per-utterance latent statistics")
    _add_common(p)
    p.add_argument("--checkpoint", help="waveform-model checkpoint path")

    p = sub.add_parser("train-acoustic", help="train the text-to-latent stage")
    _add_common(p)
    p.add_argument("--steps", type=int, help="override total training steps")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("synthesize", help="text to waveform through both stages")
    _add_common(p)
    p.add_argument("--text", required=True)
    p.add_argument("--output", help="output wav path")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--acoustic-checkpoint")
    p.add_argument("--wavegan-checkpoint")

    p = sub.add_parser("reconstruct", help="copy-synthesize each dataset utterance")
    _add_common(p)
    p.add_argument("--checkpoint", help="waveform-model checkpoint path")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval-recon", help="objective reconstruction metrics")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("pitch-ablation", help="twin-run pitch supervision experiment")
    _add_common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--output")
    return parser


def _load_config(args: argparse.Namespace):
    cfg = load_config(args.config)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = apply_override(cfg, key.strip(), value.strip())
    torch.set_num_threads(max(1, cfg.num_threads))
    torch.manual_seed(cfg.seed)
    return cfg


def run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.command == "prepare-data":
        summary = pipeline.prepare_data(cfg, manifest=args.manifest)
        print(f"processed {summary['processed']} utterances, skipped {summary['skipped']},"
              f" total {summary['total_duration_sec']:.1f} s")
    elif args.command == "train-wavegan":
        if args.steps is not None:
            cfg = apply_override(cfg, "wavegan_trainer.steps", str(args.steps))
        last = pipeline.train_wavegan_command(cfg, resume=args.resume)
        print("final losses: " + ", ".join(f"{k}={v:.4f}" for k, v in last.items()))
    elif args.command == "extract-stats":
        index = pipeline.extract_latent_stats(cfg, checkpoint=args.checkpoint)
        print(f"cached {len(index['entries'])} utterances"
              f" (latent dim {index['latent_dim']})")
    elif args.command == "train-acoustic":
        if args.steps is not None:
            cfg = apply_override(cfg, "acoustic_trainer.steps", str(args.steps))
        result = pipeline.train_acoustic_command(cfg, resume=args.resume)
        print(f"final step {result['final_step']},"
              f" nll/dim {result['final_nll_per_dim']}")
    elif args.command == "synthesize":
        out = pipeline.synthesize_command(
            cfg, args.text, out_path=args.output, temperature=args.temperature,
            seed=args.seed, acoustic_checkpoint=args.acoustic_checkpoint,
            wavegan_checkpoint=args.wavegan_checkpoint,
        )
        print(f"wrote {out}")
    elif args.command == "reconstruct":
        paths = pipeline.reconstruct_command(
            cfg, wavegan_checkpoint=args.checkpoint, out_dir=args.output_dir, seed=args.seed)
        print(f"wrote {len(paths)} reconstructions")
    elif args.command == "eval-recon":
        report = pipeline.evaluate_reconstruction(
            cfg, wavegan_checkpoint=args.checkpoint, out_dir=args.output_dir, seed=args.seed)
        agg = report.aggregates
        print(f"mel_l1={agg['mel_l1']:.4f} mcd={agg['mcd']:.3f}"
              f" pitch_rmse={agg['pitch_rmse']:.4f} over {agg['count']} utterances")
    elif args.command == "pitch-ablation":
        curves = pipeline.pitch_ablation_command(cfg, steps=args.steps, out_path=args.output)
        for name, curve in curves.items():
            print(f"{name}: final pitch loss {curve[-1][1]:.4f}")
    else:  # pragma: no cover - argparse enforces the choices
        raise ValueError(f"unknown command {args.command!r}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (ValueError, OSError, FormatError, VersionError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
