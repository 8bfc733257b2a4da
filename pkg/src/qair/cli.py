"""Command line entry point: ``qair <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import PRESETS, dump_config, load_config
from .errors import QairError

log = logging.getLogger("qair")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS), help="base preset (default: desk)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. stage2.iters=500 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qair", description="Quality-aware all-in-one image restoration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic paired dataset as PNGs")
    _common(p)

    p = sub.add_parser("gen-medium", help="two-fold cross restoration to produce medium-quality images")
    _common(p)

    p = sub.add_parser("train-prompts", help="learn the three quality prompts")
    _common(p)

    p = sub.add_parser("train-restorer", help="train the guided restorer with the quality-aware losses")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from the restorer checkpoint")

    p = sub.add_parser("eval", help="per-degradation PSNR/SSIM report")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="restorer checkpoint (default: workdir checkpoint)")
    p.add_argument("--out", type=Path, help="report directory (default: <workdir>/eval)")

    p = sub.add_parser("classify", help="predict quality tier of PNG images")
    _common(p)
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--prompts", type=Path, help="prompt checkpoint (default: workdir checkpoint)")

    p = sub.add_parser("show-config", help="print the resolved config")
    _common(p)
    return parser


def _cmd_synth(cfg, args):
    from .train import synth

    rows = synth(cfg)
    print(f"wrote {len(rows)} pairs to {cfg.paths.data}")


def _cmd_gen_medium(cfg, args):
    from .train import gen_medium

    stats = gen_medium(cfg)
    print(f"medium images: PSNR {stats['psnr_medium']:.2f} dB (degraded {stats['psnr_degraded']:.2f} dB) -> {cfg.paths.medium}")


def _cmd_train_prompts(cfg, args):
    from .train import load_backends, load_triplets, train_prompt_stage

    triplets = load_triplets(cfg)
    vl = load_backends(cfg)["vision_language"]
    prompts = train_prompt_stage(cfg, triplets, vl)
    print(f"train accuracy {triplets.accuracy(prompts, vl):.3f}; prompts -> {cfg.paths.prompts}")


def _cmd_train_restorer(cfg, args):
    from .train import train_restorer

    trainer = train_restorer(cfg, resume=args.resume)
    print(f"step {trainer.step}; checkpoint -> {cfg.paths.restorer}; log -> {cfg.paths.logs / 'restorer.csv'}")


def _cmd_eval(cfg, args):
    from .train import evaluate, load_backends, load_restorer

    ckpt = args.checkpoint or cfg.paths.restorer
    if not ckpt.exists():
        raise QairError(f"restorer checkpoint {ckpt} not found; run train-restorer first")
    model = load_restorer(ckpt, cfg)
    out = args.out or cfg.paths.root / "eval"
    rows = evaluate(model, cfg.eval_dataset, load_backends(cfg)["semantic"], out)
    w = csv.writer(sys.stdout)
    w.writerow(list(rows[0]))
    for r in rows:
        w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in r.values()])
    print(f"report -> {out}")


def _cmd_classify(cfg, args):
    from .degrade import load_png
    from .perceiver import QualityPromptSet, classify_quality
    from .train import load_backends

    path = args.prompts or cfg.paths.prompts
    if not path.exists():
        raise QairError(f"prompt checkpoint {path} not found; run train-prompts first")
    prompts = QualityPromptSet.load(path)
    vl = load_backends(cfg)["vision_language"]
    for img_path in args.images:
        pred = classify_quality(load_png(img_path), prompts, vl)
        probs = " ".join(f"{k}={v:.3f}" for k, v in pred.probabilities.items())
        print(f"{img_path}\t{pred.tier}\t{probs}")


def _cmd_show_config(cfg, args):
    print(dump_config(cfg), end="")


COMMANDS = {
    "synth": _cmd_synth,
    "gen-medium": _cmd_gen_medium,
    "train-prompts": _cmd_train_prompts,
    "train-restorer": _cmd_train_restorer,
    "eval": _cmd_eval,
    "classify": _cmd_classify,
    "show-config": _cmd_show_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset, args.overrides)
        COMMANDS[args.command](cfg, args)
    except QairError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
