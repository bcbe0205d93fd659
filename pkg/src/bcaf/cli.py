"""Command-line entry point: ``bcaf <command> [options]``.

Commands write their outputs atomically and log line-delimited JSON events to
stdout. Invalid input exits with status 2 and one ``field: message`` line per
problem on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import ConfigError, RunConfig, parse_config


class CLIError(Exception):
    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


def _load_json(path, what: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise CLIError(f"{what}: file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CLIError(f"{what}: invalid JSON in {path}: {e}") from None


def _emit(event: dict) -> None:
    print(json.dumps(event, sort_keys=True), flush=True)


def _jsonl_logger(path: Optional[Path]):
    fh = open(path, "w") if path else None

    def log(rec: dict) -> None:
        _emit({"event": "epoch", **rec})
        if fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

    return log, fh


def _parse_stages(text: str) -> list[int]:
    try:
        if "-" in text:
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s]
    except ValueError:
        raise CLIError(f"fusion.stages: cannot parse {text!r}; use e.g. '1,2,3,4' or '1-4'") from None


def _parse_shifts(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            dx, dy = (int(v) for v in part.split(","))
        except ValueError:
            raise CLIError(f"shifts: cannot parse {part!r}; use 'dx,dy;dx,dy'") from None
        out.append((dx, dy))
    return out


def build_run_config(args) -> RunConfig:
    """Config file plus command-line overrides."""
    raw = _load_json(args.config, "config") if getattr(args, "config", None) else {}
    if getattr(args, "modality", None):
        raw["modality"] = args.modality
    if getattr(args, "k_slices", None) is not None:
        raw["k_slices"] = args.k_slices
    if getattr(args, "rgb_res", None) is not None:
        raw["rgb_res"] = args.rgb_res
    fusion = dict(raw.get("fusion", {}))
    if getattr(args, "fusion_stages", None):
        fusion["stages"] = _parse_stages(args.fusion_stages)
    if getattr(args, "direction", None):
        fusion["direction"] = args.direction
    if fusion:
        raw["fusion"] = fusion
    train = dict(raw.get("train", {}))
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
        raw["seeds"] = [args.seed]
    if train:
        raw["train"] = train
    if getattr(args, "data_root", None):
        raw["data_root"] = args.data_root
    if getattr(args, "out", None):
        raw["out"] = str(args.out)
    if getattr(args, "device", None):
        raw["device"] = args.device
    if "modality" not in raw:
        raise CLIError("modality: required (in the config file or via --modality)")
    return parse_config(raw)


def _data_root(args, cfg: Optional[RunConfig] = None) -> Path:
    from .data.dataset import default_data_root

    try:
        return default_data_root(getattr(args, "data_root", None) or (cfg.get("data_root") if cfg else None))
    except ValueError as e:
        raise CLIError(f"data_root: {e}") from None


def _splits(root: Path, names=("train", "val", "test")) -> dict:
    from .data.dataset import load_splits

    splits = load_splits(root, names)
    if not splits:
        raise CLIError(f"data_root: no splits found under {root}")
    return splits


def _check_data(cfg: RunConfig, splits: dict) -> None:
    s = next(iter(splits.values()))[0]
    problems = []
    if cfg["num_classes"] is not None and cfg["num_classes"] != s.num_classes:
        problems.append(f"num_classes: config says {cfg['num_classes']}, data has {s.num_classes}")
    if cfg["bands"] is not None and cfg["bands"] != s.bands:
        problems.append(f"bands: config says {cfg['bands']}, data has {s.bands}")
    if cfg["k_slices"] > s.bands and cfg.modality != "rgb":
        problems.append(f"k_slices: {cfg['k_slices']} exceeds the data's {s.bands} bands")
    if cfg.modality in ("fusion", "logit_fusion") and cfg["ratio"] != s.r:
        problems.append(f"ratio: config says {cfg['ratio']}, data has {s.r}")
    grids = []
    if cfg.modality != "hsi":
        grids.append(("rgb_res", s.rgb.shape[:2], cfg.rgb_backbone.reduction))
    if cfg.modality != "rgb":
        grids.append(("hsi_res", s.hsi.shape[:2], cfg.hsi_backbone.reduction))
    for key, (h, w), red in grids:
        if h % red or w % red:
            problems.append(f"{key}: data grid {h}x{w} is not divisible by the encoder reduction {red}")
    if problems:
        raise CLIError(problems)


def _out_dir(args, cfg: Optional[RunConfig] = None) -> Path:
    out = getattr(args, "out", None) or (cfg.get("out") if cfg else None)
    if not out:
        raise CLIError("out: an output path is required (--out)")
    return Path(out)


# ----------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .data.synth import SynthSpec, write_dataset

    raw = _load_json(args.spec, "spec") if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_json(raw)
    except (TypeError, ValueError) as e:
        raise CLIError(f"spec: {e}") from None
    out = Path(args.out) if args.out else _data_root(args)
    data = write_dataset(out, spec)
    _emit({"event": "synth", "out": str(out), **{k: len(v) for k, v in data.items()}})
    return 0


def cmd_train(args) -> int:
    from .training.protocols import run_training

    cfg = build_run_config(args)
    splits = _splits(_data_root(args, cfg), ("train", "val"))
    _check_data(cfg, splits)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    log, fh = _jsonl_logger(out / "log.jsonl")
    try:
        _, result, _ = run_training(cfg, splits, out, device=cfg["device"], log=log)
    finally:
        if fh:
            fh.close()
    _emit({"event": "done", "best_epoch": result.best_epoch, "best_miou": result.best_miou,
           "config_hash": cfg.config_hash(), "out": str(out)})
    return 0


def _restore(path):
    from .training.checkpoint import CheckpointError
    from .training.protocols import restore_model

    try:
        return restore_model(path)
    except FileNotFoundError:
        raise CLIError(f"checkpoint: file not found: {path}") from None
    except (CheckpointError, KeyError, ConfigError) as e:
        raise CLIError(f"checkpoint: {e}") from None


def _split_dataset(args, ck, split: str):
    from .data.dataset import PairDataset
    from .data.transforms import NormStats

    splits = _splits(_data_root(args), (split,))
    if split not in splits:
        raise CLIError(f"split: {split!r} not found")
    stats = NormStats.from_json(ck.meta["norm_stats"])
    return splits[split], PairDataset(splits[split], stats)


def cmd_eval(args) -> int:
    from .metrics import iou_report
    from .training.protocols import write_json
    from .training.trainer import evaluate

    model, ck = _restore(args.checkpoint)
    _, ds = _split_dataset(args, ck, args.split)
    report = iou_report(evaluate(model, ds, device=args.device or "cpu"))
    report.update({"split": args.split, "config_hash": ck.meta.get("config_hash"), "epoch": ck.meta.get("epoch")})
    if args.out:
        write_json(args.out, report)
    _emit({"event": "eval", **{k: report[k] for k in ("split", "miou", "config_hash")}})
    return 0


def _input_spec(cfg: RunConfig, args):
    from .bench import InputSpec

    n = cfg["num_classes"] or 6
    bands = cfg["bands"] or 224
    if cfg.modality == "rgb":
        res = cfg["rgb_res"] or 512
        return InputSpec(res, res, res, res, bands, 1, 1, n)
    r = cfg["ratio"] if cfg.modality in ("fusion", "logit_fusion") else 1
    hres = cfg["hsi_res"] or ((cfg["rgb_res"] // r) if cfg["rgb_res"] else 256)
    fres = cfg["rgb_res"] or hres * r
    return InputSpec(fres, fres, hres, hres, bands, cfg["k_slices"], r, n)


def cmd_bench(args) -> int:
    from .bench import BenchProtocol, count_flops, model_throughput
    from .config import build_model
    from .training.protocols import write_json

    cfg = build_run_config(args)
    spec = _input_spec(cfg, args)
    flops = count_flops(cfg, spec)
    report = {"config_hash": cfg.config_hash(), "flops": flops.to_json(), "gflops": flops.gflops}
    if not args.flops_only:
        proto = BenchProtocol(warmup_iters=args.warmup, timed_iters=args.iters, runs=args.runs)
        torch.manual_seed(0)
        model = build_model(cfg, spec.num_classes, spec.S)
        report["throughput"] = model_throughput(model, spec, proto, cfg["device"]).to_json()
    out = _out_dir(args, cfg)
    write_json(out if out.suffix == ".json" else out / "bench.json", report)
    _emit({"event": "bench", "gflops": flops.gflops,
           "images_per_s": report.get("throughput", {}).get("images_per_s")})
    return 0


def cmd_shift(args) -> int:
    from .bench import DEFAULT_SHIFTS, shift_sweep, write_table
    from .data.transforms import NormStats

    model, ck = _restore(args.checkpoint)
    samples, _ = _split_dataset(args, ck, args.split)
    shifts = _parse_shifts(args.shifts) if args.shifts else list(DEFAULT_SHIFTS)
    rows = shift_sweep(model, samples, NormStats.from_json(ck.meta["norm_stats"]), shifts,
                       device=args.device or "cpu")
    for row in rows:
        row["config_hash"] = ck.meta.get("config_hash")
    out = Path(args.out) if args.out else Path(".")
    write_table(out, "shift", rows, ("config_hash", "dx", "dy", "miou", "note"))
    _emit({"event": "shift", "rows": len(rows), "out": str(out)})
    return 0


def cmd_ablate(args) -> int:
    from .bench import InputSpec, ablation_sweep, count_flops
    from .metrics import miou
    from .training.protocols import run_training
    from .training.trainer import evaluate

    cfg = build_run_config(args)
    axes = _load_json(args.axes, "axes") if args.axes else {}
    if not isinstance(axes, dict):
        raise CLIError("axes: expected an object mapping axis name to a list of values")
    splits = _splits(_data_root(args, cfg), ("train", "val"))
    _check_data(cfg, splits)
    out = _out_dir(args, cfg)
    s0 = splits["train"][0]

    def runner(raw: dict, seed: int) -> dict:
        rc = parse_config(raw)
        model, _, stats = run_training(rc, splits, device=rc["device"], seed=seed)
        from .data.dataset import PairDataset

        score = miou(evaluate(model, PairDataset(splits["val"], stats), device=rc["device"]))
        hc, wc = s0.coarse_shape
        hf, wf = s0.fine_shape
        spec = InputSpec(hf, wf, hc, wc, s0.bands, rc["k_slices"], s0.r, s0.num_classes)
        _emit({"event": "ablation_run", "config_hash": rc.config_hash(), "seed": seed, "miou": score})
        return {"miou": score, "gflops": count_flops(rc, spec).gflops, "images_per_s": float("nan")}

    try:
        table = ablation_sweep(cfg.to_json(), axes, runner, seeds=cfg["seeds"], out_dir=out)
    except ValueError as e:
        raise CLIError(f"axes: {e}") from None
    _emit({"event": "ablate", "rows": len(table), "out": str(out)})
    return 0


def cmd_heatmap(args) -> int:
    from .bench import export_heatmaps

    model, ck = _restore(args.checkpoint)
    _, ds = _split_dataset(args, ck, args.split)
    if not 0 <= args.index < len(ds):
        raise CLIError(f"index: {args.index} outside split of size {len(ds)}")
    item = ds[args.index]
    paths = export_heatmaps(model, item["rgb"][None], item["hsi"][None], _out_dir(args))
    _emit({"event": "heatmap", "files": [str(p) for p in paths]})
    return 0


# ----------------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--modality", choices=["rgb", "hsi", "fusion", "logit_fusion"])
        p.add_argument("--k-slices", type=int)
        p.add_argument("--rgb-res", type=int)
        p.add_argument("--fusion-stages", help="e.g. '1,2,3,4' or '1-4'")
        p.add_argument("--direction", choices=["bidirectional", "f2c", "c2f"])
        p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--data-root")
    p.add_argument("--device")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bcaf", description="RGB-HSI fusion segmentation workflows")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON synthetic-data spec")
    _common(p, config=False)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    _common(p, config=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="analytic FLOPs and throughput")
    _common(p)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--flops-only", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("shift", help="mIoU under HSI-only shifts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--shifts", help="'dx,dy;dx,dy;...'")
    _common(p, config=False)
    p.set_defaults(fn=cmd_shift)

    p = sub.add_parser("ablate", help="ablation sweep")
    _common(p)
    p.add_argument("--axes", help="JSON object: axis name -> list of values")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("heatmap", help="per-stage activation heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--index", type=int, default=0)
    _common(p, config=False)
    p.set_defaults(fn=cmd_heatmap)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        for msg in e.errors:
            print(f"error: {msg}", file=sys.stderr)
    except CLIError as e:
        for msg in e.errors:
            print(f"error: {msg}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
