"""``apebehaviour`` command line: validate, stats, gen, sample, flow, train, eval, crossval, render.

Settings resolve as: values from ``--config FILE`` (JSON or YAML, keys named like
the long flags with dashes or underscores), then explicit flags, then defaults.
A key present in the config file wins over the same flag on the command line.

Every command writes ``<runs-dir>/<timestamp>/manifest.json``. Exit codes: 0 ok,
1 runtime failure, 2 usage error; failures also print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from collections import Counter
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__

log = logging.getLogger("apebehaviour")

PAPER = "paper default"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _error_line("usage", message)
        raise SystemExit(2)


def _error_line(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


# ------------------------------------------------------------------------- parsers


def _sampler_flags(p):
    g = p.add_argument_group("sampling")
    g.add_argument("--seq-len", type=int, default=20, help=f"frames per sequence ({PAPER}: 20)")
    g.add_argument("--stride", type=int, default=20, help=f"sampling rate in frames ({PAPER}: 20)")
    g.add_argument("--threshold", type=int, default=72,
                   help=f"behaviour duration threshold in frames ({PAPER}: 72 = 3 s at 24 fps)")
    g.add_argument("--crop-size", type=int, default=224, help="square crop side in pixels (224)")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--model", choices=["optimised", "baseline"], default="optimised",
                   help=f"architecture variant ({PAPER}: optimised)")
    g.add_argument("--fusion", choices=["late", "conv"], default="late", help=f"stream fusion ({PAPER}: late)")
    g.add_argument("--loss", choices=["focal", "ce"], default="focal", help=f"loss ({PAPER}: focal)")
    g.add_argument("--alpha", type=float, default=1.0, help=f"focal alpha ({PAPER}: 1.0)")
    g.add_argument("--gamma", type=float, default=1.0, help=f"focal gamma ({PAPER}: 1.0)")
    g.add_argument("--lr", type=float, default=1e-4, help=f"SGD learning rate ({PAPER}: 1e-4)")
    g.add_argument("--momentum", type=float, default=0.9, help=f"SGD momentum ({PAPER}: 0.9)")
    g.add_argument("--wd", type=float, default=0.01, help=f"L2 weight decay ({PAPER}: 0.01)")
    g.add_argument("--batch", type=int, default=9, help=f"batch size ({PAPER}: 9)")
    g.add_argument("--balanced", action=argparse.BooleanOptionalAction, default=True,
                   help=f"class-balanced batches ({PAPER}: on)")
    g.add_argument("--pretrained", action=argparse.BooleanOptionalAction, default=True,
                   help=f"initialise backbones from pretrained weights ({PAPER}: on)")
    g.add_argument("--epochs", type=int, default=30, help="training epochs (not stated in the paper; 30)")
    g.add_argument("--seed", type=int, default=0, help="random seed (0)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="apebehaviour", description="Two-stream ape behaviour recognition pipeline.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON/YAML file of settings; its keys override flags")
    parser.add_argument("--runs-dir", default="runs", help="where run manifests are written")
    parser.add_argument("--flow-cache", help="flow cache root (else $APEBEHAVIOUR_FLOW_CACHE or <corpus>/.flowcache)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="check a corpus for annotation violations", formatter_class=fmt)
    p.add_argument("corpus")
    p.add_argument("--out", help="write <out>.txt and <out>.json")

    p = sub.add_parser("stats", help="frame, instance, behaviour and sample counts", formatter_class=fmt)
    p.add_argument("corpus")
    _sampler_flags(p)

    p = sub.add_parser("gen", help="generate a synthetic corpus", formatter_class=fmt)
    p.add_argument("gen_config", help="JSON/YAML generator config (may contain out_dir)")
    p.add_argument("--out", help="output corpus directory (overrides out_dir in the config)")

    p = sub.add_parser("sample", help="write the sequence-sampling manifest", formatter_class=fmt)
    p.add_argument("corpus")
    _sampler_flags(p)
    p.add_argument("--out", required=True, help="manifest path (JSON lines)")

    p = sub.add_parser("flow", help="precompute the optical-flow cache", formatter_class=fmt)
    p.add_argument("corpus")
    p.add_argument("--cache", help="cache root")
    p.add_argument("--clip", type=float, default=20.0, help="flow magnitude clip in pixels")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("corpus")
    _sampler_flags(p)
    _train_flags(p)
    p.add_argument("--out", default="checkpoints", help="checkpoint directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--out", help="write <out>.json and <out>.txt")

    p = sub.add_parser("crossval", help="k-fold cross-validation", formatter_class=fmt)
    p.add_argument("corpus")
    p.add_argument("--folds", type=int, default=4, help=f"number of folds ({PAPER}: 4)")
    _sampler_flags(p)
    _train_flags(p)
    p.add_argument("--plan-only", action="store_true", help="print the fold plan without training")
    p.add_argument("--out", default="crossval", help="output directory")

    p = sub.add_parser("render", help="draw predictions over a video", formatter_class=fmt)
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("video_id")
    p.add_argument("--out", default="skim", help="output directory")
    p.add_argument("--video", action="store_true", help="also write an .avi container")
    return parser


def _apply_config(args: argparse.Namespace) -> argparse.Namespace:
    if not args.config:
        return args
    path = Path(args.config)
    data = yaml.safe_load(path.read_text()) if path.suffix in (".yaml", ".yml") else json.loads(path.read_text())
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    section = data.get(args.command, data)
    for key, value in section.items():
        if isinstance(value, dict):
            continue
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"unknown setting {key!r} for command {args.command!r}")
        setattr(args, dest, value)
    return args


# --------------------------------------------------------------------- components


def _sampler_cfg(args):
    from .sampling import SamplerConfig

    return SamplerConfig(args.seq_len, args.stride, args.threshold, args.crop_size)


def _model_cfg(args):
    from .model import ModelConfig

    return ModelConfig(variant=args.model, fusion="convolutional" if args.fusion == "conv" else "late",
                       sequence_length=args.seq_len, pretrained_backbone=args.pretrained)


def _train_cfg(args):
    from .training import TrainConfig

    return TrainConfig(learning_rate=args.lr, momentum=args.momentum, weight_decay=args.wd,
                       batch_size=args.batch, loss="focal" if args.loss == "focal" else "cross_entropy",
                       focal_alpha=args.alpha, focal_gamma=args.gamma, balanced=args.balanced,
                       epochs=args.epochs, seed=args.seed)


def _corpus(args, path=None):
    from .data import Corpus

    return Corpus(path or args.corpus, flow_cache=getattr(args, "flow_cache", None))


def input_digest(paths) -> str:
    """Content hash over files (or directory trees, skipping rendered frames and caches)."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = [root] if root.is_file() else sorted(
            p for p in root.rglob("*") if p.is_file() and ".flowcache" not in p.parts and "frames" not in p.parts)
        for p in files:
            h.update(str(p.name if root.is_file() else p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------------------ commands


def cmd_validate(args):
    from .annotations import validate_corpus

    report = validate_corpus(args.corpus)
    sys.stdout.write(report.to_text())
    if args.out:
        report.write(args.out)
    if not report.ok:
        _error_line("validation", f"{len(report.violations)} violation(s)")
        return 1, {"violations": len(report.violations)}
    return 0, {"violations": 0}


def cmd_stats(args):
    from .annotations import validate_corpus

    report = validate_corpus(args.corpus)
    corpus = _corpus(args)
    samples = corpus.samples(_sampler_cfg(args))
    counts = Counter(s.label.value for s in samples)
    print(f"videos\t{len(report.videos)}")
    print(f"frames\t{sum(v.num_frames for v in report.videos)}")
    print(f"instances\t{sum(v.num_instances for v in report.videos)}")
    for name, n in report.behaviour_histogram.items():
        print(f"frames[{name}]\t{n}\tsamples\t{counts.get(name, 0)}")
    print(f"samples\t{len(samples)}")
    return 0, {"samples": len(samples), "histogram": report.behaviour_histogram}


def cmd_gen(args):
    from .annotations import validate_corpus
    from .synthetic import GenConfig, generate

    path = Path(args.gen_config)
    data = yaml.safe_load(path.read_text()) if path.suffix in (".yaml", ".yml") else json.loads(path.read_text())
    out = args.out or data.pop("out_dir", None)
    data.pop("out_dir", None)
    if not out:
        raise UsageError("no output directory: pass --out or set out_dir in the generator config")
    cfg = GenConfig.from_dict(data)
    ids = generate(cfg, out)
    report = validate_corpus(out)
    print(f"generated {len(ids)} videos in {out}; violations={len(report.violations)}")
    return (0 if report.ok else 1), {"videos": len(ids), "out": str(out), "gen_config": cfg.to_dict()}


def cmd_sample(args):
    from .sampling import save_manifest

    cfg = _sampler_cfg(args)
    samples = _corpus(args).samples(cfg)
    save_manifest(args.out, samples, cfg)
    print(f"{len(samples)} samples -> {args.out}")
    return 0, {"samples": len(samples)}


def cmd_flow(args):
    from .data import Corpus
    from .flow import FlowEncodingConfig

    corpus = Corpus(args.corpus, flow_cache=args.cache or args.flow_cache,
                    flow_cfg=FlowEncodingConfig(clip_magnitude=args.clip))
    total = 0
    for vid in corpus.video_ids:
        total += corpus.flow.warm(vid)
        corpus.flow.clear_memory()
    print(f"flow frames: {total} (computed {corpus.flow.misses}, cached {corpus.flow.hits})")
    return 0, {"frames": total, "computed": corpus.flow.misses, "algorithm": corpus.flow_cfg.to_dict()}


def cmd_train(args):
    from .training import fit

    corpus = _corpus(args)
    result = fit(corpus, _sampler_cfg(args), _model_cfg(args), _train_cfg(args), out_dir=args.out)
    best = result.best
    print(f"trained {len(result.history)} epochs; best epoch {best.epoch}; checkpoint {Path(args.out) / 'best.pt'}")
    return 0, {"history": result.history, "best_epoch": best.epoch}


def cmd_eval(args):
    from .evaluation import evaluate, format_table
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    corpus = _corpus(args)
    ids = corpus.video_ids if args.split == "all" else getattr(ckpt.split, args.split)
    report = evaluate(ckpt, corpus, ids)
    sys.stdout.write(format_table({f"{ckpt.model_config.variant} ({args.split})": report}))
    if args.out:
        report.write(args.out, f"{ckpt.model_config.variant} ({args.split})")
    return 0, {"top1": report.top1, "top3": report.top3, "count": report.count}


def cmd_crossval(args):
    from .evaluation import cross_validate, kfold_splits

    corpus = _corpus(args)
    folds = kfold_splits(corpus.video_ids, args.folds, args.seed)
    for f in folds:
        print(f"fold {f.index}\ttrain {len(f.train)}\ttest {len(f.test)}")
    if args.plan_only:
        return 0, {"folds": [[len(f.train), len(f.test)] for f in folds]}
    result = cross_validate(corpus, _sampler_cfg(args), _model_cfg(args), _train_cfg(args),
                            k=args.folds, seed=args.seed, out_dir=args.out)
    sys.stdout.write(result.table())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "crossval.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    (out / "crossval.txt").write_text(result.table())
    return 0, {"mean_top1": result.mean_top1, "mean_top3": result.mean_top3}


def cmd_render(args):
    from .evaluation import evaluate, predictions_by_frame, render_skim
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    corpus = _corpus(args)
    report = evaluate(ckpt, corpus, [args.video_id])
    preds = predictions_by_frame(report.records, args.video_id)
    skim = render_skim(corpus.video(args.video_id), preds, corpus.frames, args.out, video_file=args.video)
    for w in skim.warnings:
        print(f"warning\t{w}", file=sys.stderr)
    print(f"{len(skim.frames_written)} frames -> {Path(args.out) / args.video_id}")
    return 0, {"frames": len(skim.frames_written), "warnings": skim.warnings}


COMMANDS = {"validate": cmd_validate, "stats": cmd_stats, "gen": cmd_gen, "sample": cmd_sample,
            "flow": cmd_flow, "train": cmd_train, "eval": cmd_eval, "crossval": cmd_crossval,
            "render": cmd_render}

_INPUT_ARGS = ("corpus", "checkpoint", "gen_config")


def write_manifest(args, started: str, status: int, outputs: dict) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run_dir = Path(args.runs_dir) / stamp
    run_dir.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    inputs = [getattr(args, k) for k in _INPUT_ARGS if getattr(args, k, None)]
    manifest = {
        "command": args.command,
        "config": config,
        "seeds": {"seed": getattr(args, "seed", None)},
        "inputs_sha256": input_digest(inputs) if inputs else None,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "exit_status": status,
        "outputs": outputs,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return run_dir


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    started = datetime.now(timezone.utc).isoformat()
    try:
        args = _apply_config(args)
        status, outputs = COMMANDS[args.command](args)
    except UsageError as exc:
        _error_line("usage", str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("command failed", exc_info=True)
        _error_line(type(exc).__name__, str(exc))
        status, outputs = 1, {"error": str(exc)}
    try:
        write_manifest(args, started, status, outputs)
    except OSError as exc:
        _error_line("manifest", str(exc))
        return 1
    return status


if __name__ == "__main__":
    sys.exit(main())
