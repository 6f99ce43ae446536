#!/usr/bin/env python3
"""
Command-line interface for HighFM
Dataset preparation, pretraining, fine-tuning, evaluation, sweeps and gradient checks
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from highfm import config
from highfm.datapipe.container import Manifest
from highfm.datapipe.pipeline import assign_manifest_splits, collocate_dir, write_synthetic, write_tiles
from highfm.datapipe.splits import SplitRules
from highfm.datapipe.synth import SynthConfig
from highfm.errors import ConfigError, ContractError, GradCheckError, HighFMError
from highfm.harness.gradchecks import model_grad_checks
from highfm.harness.runs import RunTask, compare_loss_regimes, load_splits, sweep
from highfm.harness.trainer import RunConfig, evaluate, fit, pretrain
from highfm.mae.checkpoint import encoder_state, load_checkpoint, save_checkpoint
from highfm.mae.mae_model import ModelConfig, create_mae_model
from highfm.metrics import dataset_stats, render_table, split_stats_table, write_jsonl
from highfm.numerics.tensor import set_debug
from highfm.segmentation.export import export_predictions
from highfm.segmentation.seg_head import SegConfig, create_segmentation_model

logger = logging.getLogger(__name__)

LOSS_NAMES = {"wce": "weighted_ce", "dice": "dice"}


def _banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)


def _int_list(text: str) -> List[int]:
    """'0..4' (inclusive range) or '0,1,2'."""
    if ".." in text:
        first, last = text.split("..", 1)
        return list(range(int(first), int(last) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def _year_range(text: str) -> Tuple[int, int]:
    first, _, last = text.partition("-")
    return int(first), int(last or first)


def _weight_grid(text: str) -> List[Tuple[float, float]]:
    """'1:1,1:500' as (w_neg, w_pos) pairs."""
    pairs = []
    for item in text.split(","):
        neg, _, pos = item.partition(":")
        pairs.append((float(neg), float(pos)))
    return pairs


def _heads_for(dim: int) -> int:
    return next(h for h in (12, 8, 4, 2, 1) if dim % h == 0 and dim // h >= 4)


def _model_config(args: argparse.Namespace, sample_shape: Sequence[int]) -> ModelConfig:
    """Geometry from the command line; image size and bands come from the data."""
    _, bands, height, _ = sample_shape
    decoder_dim = args.decoder_dim or args.dim
    return ModelConfig(
        image_size=height,
        bands=bands,
        token_size=args.token_size,
        embed_dim=args.dim,
        depth=args.depth,
        heads=args.heads or _heads_for(args.dim),
        decoder_dim=decoder_dim,
        decoder_depth=args.decoder_depth,
        decoder_heads=_heads_for(decoder_dim),
        mask_ratio=args.mask_ratio,
        timesteps=args.timesteps,
        spectral_groups=args.spectral_groups,
        mask_mode=args.mask_mode,
    )


def _first_shape(manifest: Manifest) -> Tuple[int, ...]:
    if not manifest.entries:
        raise ContractError(f"manifest under {manifest.root} has no entries")
    return manifest.load_entry(manifest.entries[0]).data.shape


def _read_checkpoint(path: str, kind: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != kind:
        raise ContractError(f"{path} is a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    return state, meta


def _run_config(args: argparse.Namespace, loss_kind: str, weights: Tuple[float, float]) -> RunConfig:
    return RunConfig(
        seed=args.seed,
        loss_kind=loss_kind,
        class_weights=weights,
        augment=getattr(args, "augment", "off") == "on",
        batch_size=args.batch,
        lr=args.lr,
        max_epochs=args.epochs,
        max_steps=args.max_steps,
    )


def _finetune_source(args: argparse.Namespace) -> Tuple[ModelConfig, Optional[str], Optional[Dict[str, np.ndarray]]]:
    """Pretrained geometry and encoder weights, or command-line geometry for a scratch encoder."""
    if args.ckpt and args.ckpt != "none":
        state, meta = _read_checkpoint(args.ckpt, "mae")
        return ModelConfig(**meta["model"]), args.ckpt, encoder_state(state)
    return _model_config(args, _first_shape(Manifest.read(args.data))), None, None


def _print_report(name: str, metrics: Dict[str, float]) -> None:
    rows = [{"split": name, "metric": k, "value": v} for k, v in metrics.items()]
    print(render_table(rows))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> None:
    _banner("🛰️  Generating synthetic scenes")
    cfg = SynthConfig(
        seed=args.seed,
        n_scenes=args.scenes,
        height=args.height,
        width=args.width,
        regions=args.regions,
        fire_density=args.fire_density,
        cloud_density=args.cloud_density,
        years=tuple(_int_list(args.years)),
    )
    written = write_synthetic(cfg, args.out)
    print(f"✅ {len(written)} scenes written to {args.out}")


def cmd_tile(args: argparse.Namespace) -> None:
    _banner("🧩 Tiling scenes")
    manifest = write_tiles(args.scenes, args.out, args.min_land, args.drop_full_cloud)
    print(f"✅ {len(manifest.entries)} tiles kept, manifest at {Path(args.out) / 'manifest.tsv'}")


def cmd_collocate(args: argparse.Namespace) -> None:
    _banner(f"🏷️  Collocating {args.task} labels")
    manifest = collocate_dir(args.images, args.labels, args.out, args.task, args.tolerance_s)
    print(f"✅ {len(manifest.entries)} labeled tiles within {args.tolerance_s}s, manifest at {args.out}")


def cmd_split(args: argparse.Namespace) -> None:
    _banner("📅 Assigning temporal splits")
    if args.rules:
        rules = SplitRules.from_file(args.rules)
    elif args.pretrain_years:
        rules = SplitRules.pretrain(*_year_range(args.pretrain_years))
    else:
        rules = SplitRules.finetune()
    manifest = assign_manifest_splits(args.manifest, rules, args.out, season_only=args.season_only)
    for name, count in sorted(manifest.splits.items()):
        print(f"  {name}: {count}")
    print("✅ Splits written")


def cmd_stats(args: argparse.Namespace) -> None:
    _banner("📊 Dataset statistics")
    manifest = Manifest.read(args.data)
    stats = {name: dataset_stats(manifest.load(name)) for name in sorted(manifest.splits)}
    print(render_table(split_stats_table(stats)))


def cmd_pretrain(args: argparse.Namespace) -> None:
    _banner(f"🧠 Masked pretraining (T={args.timesteps})")
    manifest = Manifest.read(args.data)
    cfg = _model_config(args, _first_shape(manifest))
    splits = load_splits(args.data, cfg.timesteps, task="pretrain", build_seed=args.seed)
    if "train" not in splits:
        raise ContractError(f"{args.data} has no train split; run `highfm split` first")
    run = RunConfig(seed=args.seed, batch_size=args.batch, lr=args.lr, max_epochs=args.epochs, max_steps=args.max_steps)
    model = create_mae_model(cfg, seed=args.seed)
    result = pretrain(model, splits["train"], run, splits.get("validation", []))

    meta = {"kind": "mae", "model": cfg.model_dump(), "seed": args.seed, "steps": len(result.step_losses)}
    save_checkpoint(args.out, model.state_dict(), meta)
    write_jsonl(args.history or f"{args.out}.history.jsonl", result.history)
    print(f"✅ Final epoch loss {result.history[-1]['train_loss']:.5f}; checkpoint saved to {args.out}")


def cmd_finetune(args: argparse.Namespace) -> None:
    loss_kind = LOSS_NAMES[args.loss]
    _banner(f"🔥 Fine-tuning for {args.task} ({loss_kind})")
    cfg, _, state = _finetune_source(args)
    run = _run_config(args, loss_kind, (args.w_neg, args.w_pos))
    channels = tuple(_int_list(args.decoder_channels))
    seg = SegConfig(decoder_channels=channels, loss_kind=loss_kind, class_weights=run.class_weights)
    splits = load_splits(args.data, cfg.timesteps, args.task)
    for name in ("train", "validation"):
        if name not in splits:
            raise ContractError(f"{args.data} has no {name} split; run `highfm split` first")

    model = create_segmentation_model(cfg, seg, state, seed=args.seed)
    result = fit(run, model, splits["train"], splits["validation"])
    model.load_state_dict(result.best_state)
    meta = {
        "kind": "segmentation",
        "task": args.task,
        "model": cfg.model_dump(),
        "seg": seg.model_dump(),
        "run": run.model_dump(),
        "best_epoch": result.best_epoch,
        "best_value": result.best_value,
    }
    save_checkpoint(args.out, model.state_dict(), meta)
    write_jsonl(args.history or f"{args.out}.history.jsonl", result.history)
    print(f"✅ Best {result.monitor} {result.best_value:.4f} at epoch {result.best_epoch}; saved to {args.out}")


def cmd_eval(args: argparse.Namespace) -> None:
    _banner(f"🔎 Evaluating on {args.split}")
    state, meta = _read_checkpoint(args.ckpt, "segmentation")
    cfg = ModelConfig(**meta["model"])
    model = create_segmentation_model(cfg, SegConfig(**meta["seg"]), seed=0)
    model.load_state_dict(state)
    splits = load_splits(args.data, cfg.timesteps, meta.get("task", "fire"))
    if args.split not in splits:
        raise ContractError(f"{args.data} has no {args.split} split")
    samples = splits[args.split]
    report = evaluate(model, samples, args.batch, per_image=args.per_image)
    _print_report(args.split, report.metrics)
    if args.report:
        write_jsonl(args.report, [{"split": args.split, "ckpt": args.ckpt, **report.model_dump()}], append=args.append)
        print(f"✅ Report written to {args.report}")
    if args.export:
        written = export_predictions(model, samples, args.export, args.batch)
        print(f"✅ {len(written)} predicted masks exported to {args.export}")


def cmd_sweep(args: argparse.Namespace) -> None:
    _banner("🧪 Class-weight sweep" if not args.compare else "🧪 Loss-regime comparison")
    cfg, ckpt, _ = _finetune_source(args)
    run = _run_config(args, "weighted_ce", (1.0, 1.0))
    base = RunTask(
        run=run,
        model=cfg,
        seg=SegConfig(decoder_channels=tuple(_int_list(args.decoder_channels))),
        ckpt=ckpt,
        manifest=str(args.data),
        task=args.task,
    )
    seeds = _int_list(args.seeds)
    splits = load_splits(args.data, cfg.timesteps, args.task) if args.workers <= 1 else None

    records: List[Dict[str, Any]] = []
    tables = []
    if args.compare:
        w_pos = args.w_pos if args.w_pos is not None else 1000.0
        regimes = compare_loss_regimes(base, seeds, (1.0, w_pos), splits, args.workers, args.split)
        tables = list(regimes.values())
    else:
        grid = _weight_grid(args.grid) if args.grid else config.CLASS_WEIGHT_GRID
        result = sweep(base, grid, seeds, splits, args.workers)
        for outcome in result.outcomes:
            records.append({"record": "run", **outcome.model_dump(exclude={"val", "test"}), "val": outcome.val.metrics})
        tables = list(result.by_weight.values()) + ([result.test] if result.test else [])
        print(f"✅ Selected class weights {result.selected}")

    if args.aggregate:
        for table in tables:
            print(render_table(table.table_rows()))
            print()
    for table in tables:
        records.extend({"record": "aggregate", **r} for r in table.records())
    if args.report:
        write_jsonl(args.report, records)
        print(f"✅ {len(records)} records written to {args.report}")


def cmd_gradcheck(args: argparse.Namespace) -> None:
    _banner("🧮 Gradient check")
    if args.config != "toy":
        raise ConfigError(f"unknown gradcheck config {args.config!r}")
    cfg = ModelConfig.toy(timesteps=args.timesteps, spectral_groups=args.spectral_groups)
    reports = model_grad_checks(cfg, tol=args.tol, h=args.h, seed=args.seed)
    failed = []
    for name, report in reports.items():
        marker = "✅" if report.passed else "❌"
        print(f"{marker} {name}: max rel error {report.max_rel_error:.2e} ({report.checked} coordinates)")
        if not report.passed:
            failed.append(f"{name} at {report.worst.param}{report.worst.index}")
    if failed:
        raise GradCheckError(f"gradient mismatch above {args.tol}: {', '.join(failed)}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_geometry(p: argparse.ArgumentParser) -> None:
    p.add_argument("--timesteps", type=int, choices=(1, 3), default=1)
    p.add_argument("--dim", type=int, default=config.EMBED_DIM)
    p.add_argument("--depth", type=int, default=config.DEPTH)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--decoder-dim", type=int, default=None)
    p.add_argument("--decoder-depth", type=int, default=config.DECODER_DEPTH)
    p.add_argument("--token-size", type=int, default=config.TOKEN_SIZE)
    p.add_argument("--spectral-groups", type=int, default=1)
    p.add_argument("--mask-mode", choices=("independent", "consistent"), default="independent")
    p.add_argument("--mask-ratio", type=float, default=config.MASK_RATIO)


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch", type=int, default=config.BATCH_SIZE)
    p.add_argument("--lr", type=float, default=config.LEARNING_RATE)
    p.add_argument("--epochs", type=int, default=config.MAX_EPOCHS)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)


def _add_finetune_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="split-assigned labeled manifest")
    p.add_argument("--ckpt", default="none", help="pretrained MAE checkpoint, or 'none' for a scratch encoder")
    p.add_argument("--task", choices=("fire", "cloud"), default="fire")
    p.add_argument("--decoder-channels", default=",".join(str(c) for c in config.DECODER_CHANNELS))


def build_parser() -> argparse.ArgumentParser:
    description = "Masked-autoencoder toolkit for geostationary imagery"
    parser = argparse.ArgumentParser(prog=config.APP_NAME, description=description)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes and label products")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--regions", type=int, default=1)
    p.add_argument("--years", default="2020")
    p.add_argument("--fire-density", type=float, default=0.003)
    p.add_argument("--cloud-density", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("tile", help="cut scenes into filtered 32x32 tiles")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-land", type=int, default=1)
    p.add_argument("--drop-full-cloud", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(handler=cmd_tile)

    p = sub.add_parser("collocate", help="attach the nearest label product to every tile")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--task", choices=("fire", "cloud"), default="fire")
    p.add_argument("--tolerance-s", type=int, default=config.COLLOCATION_TOLERANCE_S)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_collocate)

    p = sub.add_parser("split", help="assign temporal splits to a manifest")
    p.add_argument("--manifest", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--pretrain-years", help="e.g. 2014-2018; evaluation uses the following year")
    group.add_argument("--rules", help="JSON rules file")
    p.add_argument("--out", default=None)
    p.add_argument("--season-only", action="store_true", help="drop tiles acquired outside May-September")
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("stats", help="per-split image and pixel statistics")
    p.add_argument("--data", required=True)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    p.add_argument("--data", required=True)
    _add_geometry(p)
    _add_training(p)
    p.add_argument("--history", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a segmentation model")
    _add_finetune_source(p)
    _add_geometry(p)
    _add_training(p)
    p.add_argument("--loss", choices=tuple(LOSS_NAMES), default="wce")
    p.add_argument("--w-pos", type=float, default=1.0)
    p.add_argument("--w-neg", type=float, default=1.0)
    p.add_argument("--augment", choices=("on", "off"), default="off")
    p.add_argument("--history", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch", type=int, default=config.BATCH_SIZE)
    p.add_argument("--report", default=None)
    p.add_argument("--append", action="store_true")
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--export", default=None, help="directory for predicted mask containers")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", help="class-weight grid or loss-regime comparison over seeds")
    _add_finetune_source(p)
    _add_geometry(p)
    _add_training(p)
    p.add_argument("--grid", default=None, help="w_neg:w_pos pairs, e.g. 1:1,1:500")
    p.add_argument("--seeds", default=",".join(str(s) for s in config.SEEDS))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--compare", action="store_true", help="weighted CE vs Dice instead of the weight grid")
    p.add_argument("--w-pos", type=float, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--aggregate", action="store_true")
    p.add_argument("--report", default=None)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training losses")
    p.add_argument("--config", default="toy")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--timesteps", type=int, choices=(1, 3), default=1)
    p.add_argument("--spectral-groups", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def _error_line(error: BaseException, kind: Optional[str] = None) -> None:
    payload = {"type": kind or type(error).__name__, "message": str(error)}
    print(f"error: {json.dumps(payload)}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
    set_debug(config.DEBUG)
    try:
        args.handler(args)
    except HighFMError as e:
        print(f"❌ {e}")
        _error_line(e)
        return 2
    except ValidationError as e:
        print("❌ invalid configuration")
        _error_line(e, "ConfigError")
        return 2
    except Exception as e:
        logger.exception("unexpected failure")
        _error_line(e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
