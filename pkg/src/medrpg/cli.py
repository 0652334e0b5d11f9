"""Command-line entry point: ``medrpg {gen-synthetic,train,eval,predict,seeds}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import GroundingSample, intensity_stats, load_annotations, make_box, prepare, preprocess, \
    read_image, split_by_patient
from .engine import Metrics, Trainer, aggregate_seeds, evaluate, export_attention, metrics_from_records, predict, \
    read_jsonl, write_jsonl
from .errors import ConfigError, DataError, MedRPGError
from .geometry import Convention, Frame, NORMALIZED, BoundingBox, convert
from .model import load_checkpoint
from .synthetic import write_dataset
from .tokenizer import WordTokenizer

log = logging.getLogger("medrpg")

SPLITS = ("train", "val", "test")


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def annotations_path(rc: RunConfig) -> Path:
    path = Path(rc.data_dir) / "annotations.jsonl"
    if not path.exists():
        raise DataError(f"no annotations at {path}; run `medrpg gen-synthetic` or point data_dir at a dataset")
    return path


def load_splits(rc: RunConfig) -> dict[str, list[GroundingSample]]:
    samples = load_annotations(annotations_path(rc))
    return dict(zip(SPLITS, split_by_patient(samples, rc.split)))


# ---------------------------------------------------------------------------
# library-level runners (also used by the acceptance suite)
# ---------------------------------------------------------------------------

def run_training(rc: RunConfig, splits: dict[str, list[GroundingSample]]) -> dict:
    """Train on ``splits['train']``, select on ``val``, then score the best checkpoint on ``test``."""
    out_dir = Path(rc.out_dir)
    tok = WordTokenizer.from_corpus(s.phrase for s in splits["train"])
    stats = intensity_stats(splits["train"])
    rc = rc.override(text_vocab_size=tok.vocab_size, checkpoint_dir=str(out_dir))
    rc.dump(out_dir / "config.yaml")
    mc = rc.model
    prepared = {k: prepare(v, tok, mc.image_size, mc.max_text_len, stats, mc.in_channels)
                for k, v in splits.items() if v}
    if "train" not in prepared or "val" not in prepared:
        raise DataError("train and val splits must be non-empty")
    trainer = Trainer(mc, rc.train, tok.to_list(), stats)
    result = trainer.fit(prepared["train"], prepared["val"])
    summary = {"best_epoch": result.best_epoch, "best_val": result.best_val.to_dict(),
               "best_checkpoint": str(result.best_checkpoint), "metrics_log": str(result.log_path)}
    if "test" in prepared:
        best, _ = load_checkpoint(result.best_checkpoint, expected=mc)
        test_m, records = evaluate(best, prepared["test"])
        write_jsonl(out_dir / "predictions_test.jsonl", records)
        summary["test"] = test_m.to_dict()
    _write_json(out_dir / "summary.json", summary)
    return summary


def checkpoint_split(blob: dict, model, samples: Sequence[GroundingSample]):
    tok = WordTokenizer(blob["vocab"])
    cfg = model.cfg
    return prepare(samples, tok, cfg.image_size, cfg.max_text_len, tuple(blob["norm_stats"]), cfg.in_channels)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(rc: RunConfig, args) -> int:
    out = Path(args.out) if args.out else Path(rc.data_dir)
    ann = write_dataset(rc.synthetic, out)
    rc.override(data_dir=str(out)).dump(out / "config.yaml")
    print(f"wrote {rc.synthetic.n_samples} samples to {ann.parent} (seed {rc.synthetic.seed})")
    return 0


def cmd_train(rc: RunConfig, args) -> int:
    splits = load_splits(rc)
    summary = run_training(rc, splits)
    val = Metrics(**summary["best_val"])
    print(f"best epoch {summary['best_epoch']}: val {val.summary()}")
    if "test" in summary:
        print(f"test {Metrics(**summary['test']).summary()}")
    print(f"checkpoint {summary['best_checkpoint']}")
    return 0


def cmd_eval(rc: RunConfig, args) -> int:
    out_dir = Path(args.out) if args.out else Path(rc.out_dir)
    if args.predictions:
        m = metrics_from_records(read_jsonl(args.predictions))
        source = args.predictions
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --predictions FILE)")
        model, blob = load_checkpoint(args.checkpoint)
        split = checkpoint_split(blob, model, load_splits(rc)[args.split])
        if len(split) == 0:
            raise DataError(f"split {args.split!r} is empty")
        m, records = evaluate(model, split)
        write_jsonl(out_dir / f"predictions_{args.split}.jsonl", records)
        source = args.split
    _write_json(out_dir / f"metrics_{Path(str(source)).stem}.json", m.to_dict())
    print(f"Acc {100 * m.acc:.2f} mIoU {100 * m.miou:.2f} (n={m.n}, {source})")
    return 0


def cmd_predict(rc: RunConfig, args) -> int:
    if not args.checkpoint or not args.image or not args.phrase:
        raise ConfigError("predict needs --checkpoint, --image and --phrase")
    model, blob = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    pixels = read_image(Path(args.image))
    h, w = pixels.shape[:2]
    dummy = make_box((0, 0, w, h), w, h, "input")
    sample = GroundingSample("input", pixels, w, h, args.phrase, dummy, "input")
    image, _, lb = preprocess(sample, cfg.image_size, tuple(blob["norm_stats"]), cfg.in_channels)
    tokens = torch.tensor([WordTokenizer(blob["vocab"]).encode(args.phrase, cfg.max_text_len)])
    pred = predict(model, image[None], tokens)[0].double()
    canvas = BoundingBox(tuple(pred.tolist()), Convention.CXCYWH, NORMALIZED)
    x0, y0, x1, y1 = np.clip(lb.inverse_xyxy(canvas.xyxy()), 0, [w, h, w, h])
    if x1 <= x0 or y1 <= y0:
        raise DataError("predicted box falls entirely in the letterbox padding")
    px = BoundingBox.from_xyxy(x0, y0, x1, y1, Convention.XYWH_TOPLEFT, Frame.pixel(w, h))
    norm = convert(px, Convention.CXCYWH, NORMALIZED)
    print("xywh_px " + " ".join(f"{v:.2f}" for v in px.coords))
    print("cxcywh_norm " + " ".join(f"{v:.6f}" for v in norm.coords))
    if args.heatmap:
        png, txt = export_attention(model, image, tokens[0], args.heatmap)
        print(f"heatmap {png} (raw grid {txt})")
    return 0


def cmd_seeds(rc: RunConfig, args) -> int:
    seeds = args.seeds or [0, 1, 2]
    splits = load_splits(rc)
    runs = []
    root = Path(args.out) if args.out else Path(rc.out_dir)
    for seed in seeds:
        summary = run_training(rc.override(seed=seed, out_dir=str(root / f"seed_{seed}")), splits)
        if "test" not in summary:
            raise DataError("seeds needs a non-empty test split")
        m = Metrics(**summary["test"])
        runs.append(m)
        print(f"seed {seed}: test {m.summary()}")
    agg = aggregate_seeds(runs)
    _write_json(root / "seeds.json", {"seeds": list(seeds), **agg.to_dict()})
    print(f"mean over {len(seeds)} seeds: Acc {100 * agg.acc:.2f} mIoU {100 * agg.miou:.2f}")
    return 0


COMMANDS = {"gen-synthetic": cmd_gen_synthetic, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "seeds": cmd_seeds}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medrpg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML run config (defaults to the toy preset)")
    common.add_argument("--seed", type=int, help="training seed override")
    common.add_argument("--out", help="output directory override")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic dataset to data_dir (or --out)")
    sub.add_parser("train", parents=[common], help="train, select on val, score on test")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split, or a predictions file")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--predictions", help="JSONL with pred_xyxy and gt_xyxy per record")
    p = sub.add_parser("predict", parents=[common], help="ground one phrase in one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--phrase")
    p.add_argument("--heatmap", help="write the [REG] attention overlay PNG here")
    p = sub.add_parser("seeds", parents=[common], help="train once per seed and aggregate test metrics")
    p.add_argument("--seeds", type=int, nargs="+")
    return parser


def resolve_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out and args.command in ("train",):
        overrides["out_dir"] = args.out
    return rc.override(**overrides) if overrides else rc


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = resolve_config(args)
        return COMMANDS[args.command](rc, args)
    except MedRPGError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - surface anything else as a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
