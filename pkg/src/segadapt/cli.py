"""Command-line interface: dataset generation, pretraining, source-free
adaptation, evaluation, diagnostics, and hyper-parameter sweeps.

Every command is one process with no daemon state.  Commands taking --seed
are end-to-end reproducible: rerunning them produces byte-identical
artifacts.  Run directories default to $SEGADAPT_OUT (or ./runs) and are
named <command>-<timestamp>-<confighash> unless --out is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import torch

from . import __version__
from .data_synth import (
    SHIFT_PRESETS,
    generate_scene_dataset,
    load_dataset,
    read_meta,
    save_dataset,
)
from .edik import ImportanceMode, importance_map
from .errors import ParameterError, SegAdaptError
from .evalkit import evaluate_model, margin_diagnostics
from .ldsk import PrototypeMode
from .segmodel import (
    ArchSpec,
    export_features,
    load_checkpoint,
    params_sha256,
    save_checkpoint,
)
from .trainer import AdaptationConfig, PretrainConfig, TrainLog, adapt, pretrain_source
from . import report

SWEEPABLE = ("lambda_ia", "lambda_pe", "lambda_ps", "lambda_im")


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_fingerprint(root: str, images_only: bool = False) -> str:
    """Order-independent hash of a dataset directory's contents."""
    entries = []
    subdirs = ["images"] if images_only else ["images", "labels"]
    for sub in subdirs:
        d = os.path.join(root, sub)
        if os.path.isdir(d):
            for name in sorted(os.listdir(d)):
                entries.append(f"{sub}/{name}:{sha256_file(os.path.join(d, name))}")
    meta = os.path.join(root, "meta.json")
    if not images_only and os.path.isfile(meta):
        entries.append(f"meta.json:{sha256_file(meta)}")
    return hashlib.sha256("\n".join(entries).encode()).hexdigest()


def default_out_root() -> str:
    return os.environ.get("SEGADAPT_OUT", "runs")


def make_run_dir(command: str, config_hash: str, out: str | None) -> str:
    if out:
        os.makedirs(out, exist_ok=True)
        return out
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(default_out_root(), f"{command}-{stamp}-{config_hash[:8]}")
    run_dir, k = base, 1
    while os.path.exists(run_dir):
        run_dir = f"{base}-{k}"
        k += 1
    os.makedirs(run_dir)
    return run_dir


def write_manifest(run_dir: str, command: str, config: dict,
                   datasets: dict[str, str], checkpoints: dict[str, str],
                   outputs: list[str]) -> str:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": config,
        "dataset_fingerprints": datasets,
        "checkpoints": checkpoints,
        "outputs": outputs,
    }
    path = os.path.join(run_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _dataset_meta(shift, num_classes, height, width, n, seed) -> dict:
    return {
        "num_classes": num_classes,
        "height": height,
        "width": width,
        "n": n,
        "seed": seed,
        "shift": shift.to_dict(),
    }


def cmd_gen_data(args) -> int:
    if args.shift not in SHIFT_PRESETS:
        raise ParameterError(
            f"unknown shift preset '{args.shift}'; valid: {sorted(SHIFT_PRESETS)}")
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ParameterError(f"output dir '{out}' is not empty; pass --force to overwrite")
    os.makedirs(out, exist_ok=True)
    h = w = args.size
    src_shift = SHIFT_PRESETS["identity"]
    tgt_shift = SHIFT_PRESETS[args.shift]
    splits = [("source", src_shift, args.n_train, 0),
              ("target", tgt_shift, args.n_train, 0)]
    if args.n_val > 0:
        splits += [("source_val", src_shift, args.n_val, args.n_train),
                   ("target_val", tgt_shift, args.n_val, args.n_train)]
    fingerprints = {}
    for name, shift, n, start in splits:
        samples = generate_scene_dataset(n, args.classes, h, w, shift=shift,
                                         seed=args.seed, start_index=start)
        root = os.path.join(out, name)
        save_dataset(samples, root, _dataset_meta(shift, args.classes, h, w, n, args.seed))
        fingerprints[name] = dataset_fingerprint(root)
    write_manifest(out, "gen-data",
                   {"classes": args.classes, "size": args.size, "n_train": args.n_train,
                    "n_val": args.n_val, "shift": args.shift, "seed": args.seed},
                   fingerprints, {}, [s[0] for s in splits])
    print(json.dumps({"out": out, "splits": {k: v for k, v in fingerprints.items()}},
                     indent=2, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    ds = load_dataset(args.data)
    config = PretrainConfig(lr=args.lr, iterations=args.iterations,
                            batch_size=args.batch_size, crop=args.crop, seed=args.seed)
    config.validate()
    run_dir = make_run_dir("pretrain", config.config_hash(), args.out)
    arch = ArchSpec(num_classes=ds.num_classes, feature_dim=args.feature_dim)
    write_manifest(run_dir, "pretrain",
                   {**config.to_dict(), "arch": arch.to_dict()},
                   {"train": dataset_fingerprint(args.data)}, {},
                   ["source.ckpt", "pretrain_log.csv", "pretrain_loss.png"])
    log = TrainLog()
    model = pretrain_source(ds.samples, arch, config, log=log)
    ckpt = os.path.join(run_dir, "source.ckpt")
    save_checkpoint(ckpt, model, step=config.iterations, config_hash=config.config_hash())
    log.to_csv(os.path.join(run_dir, "pretrain_log.csv"))
    report.save_loss_curves(log, os.path.join(run_dir, "pretrain_loss.png"),
                            title="source pretraining loss")
    result = {"checkpoint": ckpt, "params_sha256": params_sha256(model)}
    if args.val_data:
        val = load_dataset(args.val_data)
        rep = evaluate_model(model, val.samples, val.num_classes)
        with open(os.path.join(run_dir, "val_report.json"), "w") as f:
            json.dump(rep.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        result["val_miou"] = rep.miou
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _adaptation_config(args) -> AdaptationConfig:
    base = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
    overrides = {
        "lambda_ia": args.lambda_ia, "lambda_pe": args.lambda_pe,
        "lambda_ps": args.lambda_ps, "lambda_im": args.lambda_im,
        "alpha_ema": args.alpha_ema, "lr": args.lr,
        "iterations": args.iterations, "batch_size": args.batch_size,
        "crop": args.crop, "seed": args.seed,
        "importance_mode": args.importance_mode,
        "prototype_mode": args.prototype_mode,
        "augment_strength": args.augment_strength,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_ema:
        base["ema_enabled"] = False
    return AdaptationConfig.from_dict(base)


def _adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with AdaptationConfig fields")
    p.add_argument("--lambda-ia", dest="lambda_ia", type=float)
    p.add_argument("--lambda-pe", dest="lambda_pe", type=float)
    p.add_argument("--lambda-ps", dest="lambda_ps", type=float)
    p.add_argument("--lambda-im", dest="lambda_im", type=float)
    p.add_argument("--alpha-ema", dest="alpha_ema", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--importance-mode", dest="importance_mode",
                   choices=[m.value for m in ImportanceMode])
    p.add_argument("--prototype-mode", dest="prototype_mode",
                   choices=[m.value for m in PrototypeMode])
    p.add_argument("--augment-strength", dest="augment_strength", type=float)
    p.add_argument("--no-ema", dest="no_ema", action="store_true")


def _run_adaptation(source_ckpt: str, data: str, config: AdaptationConfig,
                    run_dir: str, prefix: str = "adapt") -> tuple[str, dict]:
    source, info = load_checkpoint(source_ckpt)
    # the source-free contract: the target dataset is opened without labels
    ds = load_dataset(data, images_only=True)
    meta_classes = int(ds.meta["num_classes"])
    if meta_classes != source.arch.num_classes:
        raise ParameterError(
            f"checkpoint has {source.arch.num_classes} classes but dataset "
            f"meta declares {meta_classes}")
    log = TrainLog()
    model = adapt(source, ds.samples, config, log=log)
    ckpt = os.path.join(run_dir, f"{prefix}.ckpt")
    save_checkpoint(ckpt, model, step=config.iterations, config_hash=config.config_hash())
    log.to_csv(os.path.join(run_dir, f"{prefix}_log.csv"))
    report.save_loss_curves(log, os.path.join(run_dir, f"{prefix}_loss.png"),
                            title="adaptation loss")
    return ckpt, {"source_ckpt": sha256_file(source_ckpt),
                  "source_params": params_sha256(source),
                  "source_step": info.get("step", 0)}


def cmd_adapt(args) -> int:
    config = _adaptation_config(args)
    run_dir = make_run_dir("adapt", config.config_hash(), args.out)
    write_manifest(run_dir, "adapt", config.to_dict(),
                   {"target_images_only": dataset_fingerprint(args.data, images_only=True)},
                   {"source": sha256_file(args.source)},
                   ["adapt.ckpt", "adapt_log.csv", "adapt_loss.png"])
    ckpt, src_info = _run_adaptation(args.source, args.data, config, run_dir)
    print(json.dumps({"checkpoint": ckpt, "config_hash": config.config_hash(),
                      **src_info}, indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    rep = evaluate_model(model, ds.samples, ds.num_classes)
    result = rep.to_dict()
    result["checkpoint"] = args.ckpt
    if args.baseline:
        base_model, _ = load_checkpoint(args.baseline)
        base_rep = evaluate_model(base_model, ds.samples, ds.num_classes)
        result["baseline_miou"] = base_rep.miou
        result["gain_points"] = 100.0 * (rep.miou - base_rep.miou)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as f:
            json.dump(result, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(rep.to_text_table() + "\n")
        report.save_iou_bars(rep, os.path.join(args.out, "iou_bars.png"))
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.min_miou is not None and rep.miou < args.min_miou:
        print(f"gate failed: mIoU {rep.miou:.4f} < --min-miou {args.min_miou}",
              file=sys.stderr)
        return 1
    if args.min_gain is not None:
        if "gain_points" not in result:
            raise ParameterError("--min-gain requires --baseline")
        if result["gain_points"] < args.min_gain:
            print(f"gate failed: gain {result['gain_points']:.2f} points "
                  f"< --min-gain {args.min_gain}", file=sys.stderr)
            return 1
    return 0


def cmd_diagnose(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    stats = margin_diagnostics(model, ds.samples,
                               sample_n=args.sample_n, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "margin_stats.csv"), "w") as f:
        f.write(stats.to_csv())
    with open(os.path.join(args.out, "margin_stats.json"), "w") as f:
        json.dump(stats.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    report.save_margin_bars(stats, os.path.join(args.out, "margin_bars.png"))
    if args.export_maps > 0:
        from .segmodel import predict_probs
        maps_dir = os.path.join(args.out, "maps")
        os.makedirs(maps_dir, exist_ok=True)
        for s in ds.samples[:args.export_maps]:
            probs = predict_probs(model, s.image)
            omega = importance_map(torch.from_numpy(probs.transpose(2, 0, 1))).numpy()
            report.save_importance_png(
                omega, os.path.join(maps_dir, f"{s.id}_importance.png"))
    print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    if args.param not in SWEEPABLE:
        raise ParameterError(
            f"cannot sweep '{args.param}'; valid parameters: {', '.join(SWEEPABLE)}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as e:
        raise ParameterError(f"bad --values list '{args.values}': {e}") from e
    if not values:
        raise ParameterError("--values is empty")
    base_config = _adaptation_config(args)
    run_dir = make_run_dir("sweep", base_config.config_hash(), args.out)
    write_manifest(run_dir, "sweep",
                   {**base_config.to_dict(), "sweep_param": args.param,
                    "sweep_values": values},
                   {"target_images_only": dataset_fingerprint(args.data, images_only=True),
                    "eval": dataset_fingerprint(args.eval_data)},
                   {"source": sha256_file(args.source)},
                   ["sweep.csv", "sweep.png"])
    eval_ds = load_dataset(args.eval_data)
    rows = []
    for value in values:
        cfg = AdaptationConfig.from_dict({**base_config.to_dict(), args.param: value})
        sub = os.path.join(run_dir, f"{args.param}={value:g}")
        os.makedirs(sub, exist_ok=True)
        ckpt, _ = _run_adaptation(args.source, args.data, cfg, sub)
        model, _ = load_checkpoint(ckpt)
        rep = evaluate_model(model, eval_ds.samples, eval_ds.num_classes)
        rows.append({"param": args.param, "value": value, "miou": rep.miou,
                     "miou_points": 100.0 * rep.miou})
    csv_path = os.path.join(run_dir, "sweep.csv")
    with open(csv_path, "w") as f:
        f.write("param,value,miou,miou_points\n")
        for r in rows:
            f.write(f"{r['param']},{r['value']:g},{r['miou']:.6f},{r['miou_points']:.4f}\n")
    report.save_sweep_curve(rows, args.param, os.path.join(run_dir, "sweep.png"))
    print(json.dumps({"csv": csv_path, "rows": rows}, indent=2, sort_keys=True))
    return 0


def cmd_export_features(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data, images_only=True)
    written = export_features(model, ds.samples, args.out, limit=args.limit)
    print(json.dumps({"out": args.out, "n_files": len(written)},
                     indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segadapt",
        description="Source-free domain adaptation for semantic segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an aligned source/target dataset pair")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-train", dest="n_train", type=int, required=True)
    p.add_argument("--n-val", dest="n_val", type=int, default=0)
    p.add_argument("--shift", default="sim2real", help="target shift preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the source model on labelled data")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=6)
    p.add_argument("--lr", type=float, default=2.5e-4)
    p.add_argument("--crop", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="source-free adaptation to unlabelled target data")
    p.add_argument("--source", required=True, help="source checkpoint")
    p.add_argument("--data", required=True, help="target dataset (labels ignored)")
    _adapt_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="mIoU report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="labelled dataset")
    p.add_argument("--baseline", help="baseline checkpoint for gain computation")
    p.add_argument("--min-miou", dest="min_miou", type=float)
    p.add_argument("--min-gain", dest="min_gain", type=float,
                   help="minimum gain in mIoU points over --baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="confidence-margin diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="labelled dataset")
    p.add_argument("--sample-n", dest="sample_n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--export-maps", dest="export_maps", type=int, default=0,
                   help="write importance maps for the first N images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="grid over one loss weight, mIoU per value")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--source", required=True)
    p.add_argument("--data", required=True, help="target dataset (labels ignored)")
    p.add_argument("--eval-data", dest="eval_data", required=True)
    _adapt_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-features", help="dump per-image feature maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SegAdaptError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
