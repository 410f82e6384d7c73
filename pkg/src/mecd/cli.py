"""Command-line entry point: ``mecd <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .annotations import (
    Vocabulary,
    feature_path,
    frame_owners,
    load_diagrams,
    load_features,
    load_split,
    save_features,
    vocabulary_texts,
    write_dataset,
)
from .config import RunConfig
from .errors import ConfigError, MECDError

log = logging.getLogger("mecd")

COMMANDS = ("synth", "train", "eval", "diagram", "baseline", "perturb", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workdir", default=".", help="root for every relative path")
    p.add_argument("-c", "--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mecd", description="Multi-event causal discovery on video event sequences.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model; writes checkpoint and metrics log")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--holdout", default="test", help="split for per-epoch accuracy ('' to skip)")

    p = sub.add_parser("eval", help="accuracy and SHD report for a checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--split", default="test")

    p = sub.add_parser("diagram", help="complete causal diagrams as DOT and JSON")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="test")

    p = sub.add_parser("baseline", help="guess-all and random baselines")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--split", default="test")
    p.add_argument("--p", type=float, default=0.5, help="Bernoulli rate of the random baseline")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("perturb", help="write a perturbed copy of a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", required=True, choices=("flip_labels", "mask_words", "mask_frames"))
    p.add_argument("--param", required=True, type=float, help="flip ratio or count per event")
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="defaults to a freshly initialized model")
    p.add_argument("--split", default="train")
    p.add_argument("--video", type=int, default=0, help="index within the split")
    p.add_argument("--k", type=int, default=1, help="premise index (1-based)")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=256)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _path(args, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(args.workdir) / p


def _config(args) -> RunConfig:
    cfg = RunConfig.build(_path(args, args.config) if args.config else None, args.set)
    for key in ("data", "checkpoint", "out"):
        if getattr(args, key, None):
            cfg.paths[key] = str(getattr(args, key))
    cfg.validate()
    return cfg


def _echo(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg.dump(path)
    log.info("effective config written to %s", path)


def _sidecar(report: Path, suffix: str) -> Path:
    return report.with_name(report.stem + suffix)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def _vocab(root: Path, train) -> Vocabulary:
    path = root / "vocab.txt"
    return Vocabulary.load(path) if path.is_file() else Vocabulary.build(vocabulary_texts(train))


def _diagrams(root: Path):
    path = root / "diagrams.json"
    return load_diagrams(path) if path.is_file() else None


def _load_model(path: Path):
    from .model import load_checkpoint

    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model, extra = load_checkpoint(path)
    return model, Vocabulary(extra.get("vocab", []))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> None:
    from .synth import generate_dataset, write_dataset_dir

    out = _path(args, args.out)
    write_dataset_dir(generate_dataset(cfg.synth), out)
    _echo(cfg, out / "effective.cfg")
    print(f"wrote {cfg.synth.num_videos} videos to {out}")


def cmd_train(args, cfg: RunConfig) -> None:
    import torch

    from .model import save_checkpoint, tensorize
    from .plotting import training_curves
    from .training import train_model

    data, out = _path(args, args.data), _path(args, args.out)
    train = load_split(data, "train")
    holdout = load_split(data, args.holdout) if args.holdout and (data / f"{args.holdout}.json").is_file() else []
    vocab = _vocab(data, train)
    feature_dim = train[0].frames[0].shape[1] if train and train[0].frames else cfg.model.feature_dim
    cfg.model.vocab_size = len(vocab)
    cfg.model.feature_dim = int(feature_dim)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out / "effective.cfg")

    tens = [tensorize(s, vocab, cfg.model.feature_dim, cfg.model.max_caption_len) for s in train]
    hold = [tensorize(s, vocab, cfg.model.feature_dim, cfg.model.max_caption_len) for s in holdout]
    torch.set_num_threads(1)
    log_path = out / "metrics.tsv"
    with log_path.open("w", encoding="utf-8") as fh:
        fh.write("epoch\ttotal\tL_C\tL_R\tL_V\tL_S\tholdout_accuracy\n")

        def on_epoch(m):
            fh.write(m.log_line() + "\n")
            fh.flush()
            log.info(m.log_line())

        model, history = train_model(tens, cfg.model, cfg.train, hold, on_epoch=on_epoch)
    save_checkpoint(model, out / "model.safetensors", extra={"vocab": vocab.itos[5:]})
    training_curves(history, out / "curves.png")
    print(f"final holdout accuracy {history[-1].holdout_accuracy:.4f}; checkpoint {out / 'model.safetensors'}")


def cmd_eval(args, cfg: RunConfig) -> None:
    from .evaluation import evaluate
    from .plotting import position_accuracy

    data, out = _path(args, args.data), _path(args, args.out)
    model, vocab = _load_model(_path(args, args.checkpoint))
    samples = load_split(data, args.split)
    report, _ = evaluate(model, samples, vocab, _diagrams(data))
    _write_json(out, report)
    position_accuracy(report, _sidecar(out, ".png"))
    _echo(cfg, _sidecar(out, ".cfg"))
    print(json.dumps({"accuracy": report["accuracy"], "ave_shd": report["ave_shd"]}))


def cmd_diagram(args, cfg: RunConfig) -> None:
    from .evaluation import build_diagram
    from .plotting import diagram_heatmap

    data, out = _path(args, args.data), _path(args, args.out)
    model, vocab = _load_model(_path(args, args.checkpoint))
    samples = load_split(data, args.split)
    out.mkdir(parents=True, exist_ok=True)
    every = {}
    for s in samples:
        d = build_diagram(model, s, vocab)
        every[s.video_id] = d.to_json()
        (out / f"{s.video_id}.dot").write_text(d.to_dot(s.video_id), encoding="utf-8")
        _write_json(out / f"{s.video_id}.json", d.to_json())
    _write_json(out / "diagrams.json", every)
    sizes = {len(m) for m in every.values()}
    if len(sizes) == 1:
        mean = np.mean([np.asarray(m) for m in every.values()], axis=0)
        diagram_heatmap(mean, out / "edge_frequency.png", "predicted edge frequency")
    _echo(cfg, out / "effective.cfg")
    print(f"wrote {len(every)} diagrams to {out}")


def cmd_baseline(args, cfg: RunConfig) -> None:
    from .evaluation import BASELINES, baseline_report
    from .plotting import baseline_bars

    data, out = _path(args, args.data), _path(args, args.out)
    samples = load_split(data, args.split)
    gt = _diagrams(data)
    reports = {m: baseline_report(m, samples, gt, args.p, args.seed) for m in BASELINES}
    _write_json(out, reports)
    baseline_bars(reports, _sidecar(out, ".png"))
    _echo(cfg, _sidecar(out, ".cfg"))
    print(json.dumps({m: {"accuracy": r["accuracy"], "ave_shd": r["ave_shd"]} for m, r in reports.items()}))


def cmd_perturb(args, cfg: RunConfig) -> None:
    from .annotations import words
    from .evaluation import perturb_dataset
    from .plotting import perturbation_counts

    data, out = _path(args, args.data), _path(args, args.out)
    if out.resolve() == data.resolve():
        raise UsageError("--out must differ from --data; inputs are never modified")
    samples = load_split(data, args.split)
    param = args.param if args.mode == "flip_labels" else int(args.param)
    changed = perturb_dataset(samples, args.mode, param, args.seed)
    if out.exists():
        shutil.rmtree(out)
    shutil.copytree(data, out)
    write_dataset(changed, out / f"{args.split}.json")
    if args.mode == "flip_labels":
        counts = [int(np.sum(np.asarray(a.relation) != np.asarray(b.relation))) for a, b in zip(samples, changed)]
        what = "relations"
    elif args.mode == "mask_words":
        counts = [sum(w == "<mask>" for t in s.sentences for w in words(t)) for s in changed]
        what = "caption tokens"
    else:
        counts = []
        for s in changed:
            feats = load_features(feature_path(data, s.video_id)).copy()
            owner = frame_owners(feats.shape[0], s.timestamps, s.duration)
            for idx, block in enumerate(s.frames):
                feats[owner == idx] = block
            save_features(feature_path(out, s.video_id), feats)
            counts.append(sum(int(np.sum(~block.any(axis=1))) for block in s.frames))
        what = "zero frames"
    report = {"mode": args.mode, "param": param, "seed": args.seed, "split": args.split, "changed": counts}
    _write_json(out / "perturbation.json", report)
    perturbation_counts(counts, what, out / "perturbation.png")
    _echo(cfg, out / "effective.cfg")
    print(f"wrote perturbed copy to {out}")


def cmd_gradcheck(args, cfg: RunConfig) -> None:
    import torch

    from .model import VGCM, tensorize
    from .training import gradient_check

    data = _path(args, args.data)
    samples = load_split(data, args.split)
    if not 0 <= args.video < len(samples):
        raise UsageError(f"--video {args.video} outside [0, {len(samples) - 1}]")
    if args.checkpoint:
        model, vocab = _load_model(_path(args, args.checkpoint))
    else:
        vocab = _vocab(data, samples)
        cfg.model.vocab_size = len(vocab)
        cfg.model.feature_dim = int(samples[0].frames[0].shape[1])
        torch.manual_seed(cfg.train.seed)
        model = VGCM(cfg.model)
    video = tensorize(samples[args.video], vocab, model.config.feature_dim, model.config.max_caption_len)
    err = gradient_check(model, video, args.k, args.epsilon, args.coords, seed=cfg.train.seed,
                         weights=cfg.train.weights, gate=cfg.train.similarity_gate)
    print(f"max relative error {err:.3e}")


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "diagram": cmd_diagram,
    "baseline": cmd_baseline, "perturb": cmd_perturb, "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = _config(args)
        HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (MECDError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
