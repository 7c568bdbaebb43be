"""Command-line entry point.

Subcommands: synth | train | eval | predict | stats | verify.

Options resolve as flag > config file > HMMEN_SEED env (seed only) > default.
The config file is JSON with flat dotted keys ("train.epochs": 40); plain
keys apply to every subcommand.  Every command echoes its effective config
and writes it beside its outputs.

Exit codes: 0 success, 1 usage error, 2 data/contract error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_mod
from . import metrics as metrics_mod
from .errors import ContractViolation, DataError, NumericError
from .metrics import (MetricReport, aggregate_report, binarize,
                      one_sided_t_test, pixel_metrics)
from .network import VARIANTS, Model
from .train import TrainConfig, train
from .verify import run_verification

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {path}")
    with open(p) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a flat JSON object")
    return cfg


def _resolve(args, cfg: dict, sub: str, name: str, default):
    val = getattr(args, name, None)
    if val is not None:
        return val
    if f"{sub}.{name}" in cfg:
        return cfg[f"{sub}.{name}"]
    if name in cfg:
        return cfg[name]
    if name == "seed" and os.environ.get("HMMEN_SEED"):
        return int(os.environ["HMMEN_SEED"])
    return default


def _echo_config(effective: dict, out_dir: Path | None) -> None:
    blob = json.dumps(effective, indent=1, sort_keys=True)
    print(blob)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective_config.json").write_text(blob + "\n")


def _load_split(root: str, which: str, seed: int):
    pairs = data_mod.load_dataset(root)
    if which == "all":
        return pairs
    train_s, val_s, test_s = data_mod.split(pairs, seed=seed)
    return {"train": train_s, "val": val_s, "test": test_s}[which]


# -- subcommands ------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    out_val = _resolve(args, cfg, "synth", "out", None)
    if not out_val:
        raise UsageError("synth requires --out")
    out = Path(out_val)
    eff = {
        "num_images": int(_resolve(args, cfg, "synth", "num_images", 16)),
        "image_size": int(_resolve(args, cfg, "synth", "image_size", 256)),
        "seed": int(_resolve(args, cfg, "synth", "seed", 0)),
        "misalign_max": float(_resolve(args, cfg, "synth", "misalign_max", 4.0)),
        "weather": _resolve(args, cfg, "synth", "weather", ",".join(data_mod.WEATHER_KINDS)),
        "out": str(out),
    }
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: target {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_DATA
    config = data_mod.SynthConfig(
        num_images=eff["num_images"], image_size=eff["image_size"],
        ir_misalignment_px=(0.0, eff["misalign_max"]),
        weather=tuple(eff["weather"].split(",")), seed=eff["seed"])
    pairs, manifest = data_mod.generate_synthetic(config)
    data_mod.save_dataset(pairs, out, manifest)
    _echo_config(eff, out)
    print(f"wrote {3 * len(pairs)} files + manifest to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    dataset = _resolve(args, cfg, "train", "dataset", None)
    if not dataset:
        raise UsageError("train requires --dataset")
    if not Path(dataset).is_dir():
        raise DataError(f"dataset path not found: {dataset}")
    config = TrainConfig(
        epochs=int(_resolve(args, cfg, "train", "epochs", 250)),
        batch_size=int(_resolve(args, cfg, "train", "batch_size", 5)),
        base_lr=float(_resolve(args, cfg, "train", "base_lr", 1e-4)),
        decay_every=int(_resolve(args, cfg, "train", "decay_every", 25)),
        decay_start=int(_resolve(args, cfg, "train", "decay_start", 150)),
        lam=float(_resolve(args, cfg, "train", "lam", 1.0)),
        seed=int(_resolve(args, cfg, "train", "seed", 0)),
        variant=_resolve(args, cfg, "train", "variant", "hmmen"),
        checkpoint_dir=_resolve(args, cfg, "train", "checkpoint_dir", "checkpoints"),
    )
    if config.variant not in VARIANTS:
        raise UsageError(f"unknown variant {config.variant!r}")
    eff = {**config.__dict__, "dataset": dataset}
    _echo_config(eff, Path(config.checkpoint_dir))
    pairs = data_mod.load_dataset(dataset)
    train_s, val_s, _ = data_mod.split(pairs, seed=config.seed)
    model = Model(config.variant, seed=config.seed)
    best, history = train(model, train_s, val_s, config)
    print(f"best_checkpoint={best} epochs_run={len(history)}")
    return EXIT_OK


def _predict_pair(model: Model, pair) -> np.ndarray:
    import torch

    rgb = torch.from_numpy(pair.rgb[None])
    ir = torch.from_numpy(pair.ir[None])
    return model.predict_probs(rgb, ir)[0, 0].numpy()


def cmd_eval(args, cfg) -> int:
    ckpt = _resolve(args, cfg, "eval", "checkpoint", None)
    dataset = _resolve(args, cfg, "eval", "dataset", None)
    out_dir = Path(_resolve(args, cfg, "eval", "out", "eval_out"))
    which = _resolve(args, cfg, "eval", "split", "test")
    seed = int(_resolve(args, cfg, "eval", "seed", 0))
    if not ckpt or not dataset:
        raise UsageError("eval requires --checkpoint and --dataset")
    if not Path(ckpt).is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    model, meta = Model.load_checkpoint(ckpt)
    pairs = _load_split(dataset, which, seed)
    if not pairs:
        raise DataError(f"split {which!r} of {dataset} is empty")
    _echo_config({"checkpoint": str(ckpt), "dataset": dataset, "split": which,
                  "seed": seed, "variant": model.variant}, out_dir)
    (out_dir / "pred").mkdir(parents=True, exist_ok=True)

    per_image = []
    pooled_p, pooled_g = [], []
    detected = total = 0
    for pair in pairs:
        t0 = time.perf_counter()
        probs = _predict_pair(model, pair)
        dt = time.perf_counter() - t0
        pred = binarize(probs)
        rec = {"id": pair.id, **pixel_metrics(pred, pair.gt[0]),
               "runtime_seconds": dt}
        per_image.append(rec)
        pooled_p.append(probs.ravel())
        pooled_g.append(pair.gt[0].ravel())
        from scipy import ndimage

        labels, count = ndimage.label(pair.gt[0], structure=np.ones((3, 3), int))
        total += count
        for lab in range(1, count + 1):
            comp = labels == lab
            if (comp & pred.astype(bool)).sum() / comp.sum() > 0.5:
                detected += 1
        Image.fromarray((pred * 255).astype(np.uint8)).save(
            out_dir / "pred" / f"{pair.id}.png")

    spi = metrics_mod.time_inference(lambda p: _predict_pair(model, p),
                                     pairs[:min(len(pairs), 8)])
    report = aggregate_report(per_image, np.concatenate(pooled_p),
                              np.concatenate(pooled_g), (detected, total), spi)
    report.write_csv(out_dir / "per_image.csv")
    report.write_json(out_dir / "aggregate.json")
    print(json.dumps(report.aggregate, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    ckpt = _resolve(args, cfg, "predict", "checkpoint", None)
    rgb_path = _resolve(args, cfg, "predict", "rgb", None)
    ir_path = _resolve(args, cfg, "predict", "ir", None)
    out_dir = Path(_resolve(args, cfg, "predict", "out", "predict_out"))
    if not (ckpt and rgb_path and ir_path):
        raise UsageError("predict requires --checkpoint, --rgb and --ir")
    if not Path(ckpt).is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    for p in (rgb_path, ir_path):
        if not Path(p).is_file():
            raise DataError(f"input image not found: {p}")
    model, _ = Model.load_checkpoint(ckpt)
    rgb = np.asarray(Image.open(rgb_path).convert("RGB")).astype(np.float32)
    rgb = rgb.transpose(2, 0, 1) / 255.0
    ir_img = Image.open(ir_path).convert("L")
    ir = np.asarray(ir_img).astype(np.float32)[None] / 255.0
    pair = data_mod.SamplePair(Path(rgb_path).stem, rgb, ir,
                               np.zeros_like(ir, dtype=np.uint8))
    _echo_config({"checkpoint": str(ckpt), "rgb": str(rgb_path),
                  "ir": str(ir_path)}, out_dir)
    probs = _predict_pair(model, pair)
    mask = binarize(probs)
    Image.fromarray((mask * 255).astype(np.uint8)).save(out_dir / "mask.png")
    if args.dump_heatmap:
        import torch

        heat = model.dump_heatmap(torch.from_numpy(rgb[None]),
                                  torch.from_numpy(ir[None]))
        Image.fromarray(np.round(heat * 255).astype(np.uint8)).save(
            out_dir / "heatmap.png")
    print(f"wrote {out_dir / 'mask.png'}")
    return EXIT_OK


def cmd_stats(args, cfg) -> int:
    a = MetricReport.read_csv(args.report_a)
    b = MetricReport.read_csv(args.report_b)
    iou_a = np.array([r["iou"] for r in a.per_image])
    iou_b = np.array([r["iou"] for r in b.per_image])
    if len(iou_a) != len(iou_b):
        raise DataError("reports cover different numbers of images")
    result = one_sided_t_test(iou_a, iou_b, alpha=float(args.alpha))
    out = {
        "t_statistic": result.statistic,
        "significant": result.significant,
        "direction": result.direction,
        "A": {"mean_iou": float(iou_a.mean()),
              "variance": float(iou_a.var(ddof=0)),
              "stddev": float(iou_a.std(ddof=0))},
        "B": {"mean_iou": float(iou_b.mean()),
              "variance": float(iou_b.var(ddof=0)),
              "stddev": float(iou_b.std(ddof=0))},
    }
    print(json.dumps(out, indent=1, sort_keys=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_verify(args, cfg) -> int:
    results = run_verification()
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"{name:<{width}}  {status}  {detail}")
        failures += 0 if ok else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


# -- argument wiring --------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="hmmen", description=__doc__)
    parser.add_argument("--config", help="JSON config file with flat dotted keys")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out")
    p.add_argument("--num-images", dest="num_images", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--misalign-max", dest="misalign_max", type=float)
    p.add_argument("--weather")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--dataset")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    p.add_argument("--decay-start", dest="decay_start", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=("train", "val", "test", "all"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("predict", help="predict a mask for one RGB/IR pair")
    p.add_argument("--checkpoint")
    p.add_argument("--rgb")
    p.add_argument("--ir")
    p.add_argument("--out")
    p.add_argument("--dump-heatmap", dest="dump_heatmap", action="store_true")

    p = sub.add_parser("stats", help="compare two per-image metric reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--alpha", default=0.05)
    p.add_argument("--out")

    sub.add_parser("verify", help="run the fast invariant battery")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "stats": cmd_stats,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config_file(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolation, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
