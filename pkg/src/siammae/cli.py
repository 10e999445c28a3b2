"""Command-line entry point: ``siammae <verb> [options]``.

Verbs: gen-data, train, eval, ablate, attn-viz, verify.  Every verb accepts
``--config FILE.json``, ``--seed``, ``--out`` and repeated ``--override
dotted.key=value``, and writes ``config.json`` (the resolved configuration)
into its output directory.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (DataError, SyntheticSceneSpec, generate_dataset, load_dataset, read_image,
                   resize_bilinear, write_image)
from .labelprop import PRESETS, PropagationConfig, evaluate_dataset, oracle_feature_fn
from .model import ArchVariant, MaskSpec, ModelConfig, SiamMAEModel, cls_attention_maps
from .train import CheckpointError, NumericError, TrainConfig, Trainer, load_checkpoint
from .verify import run_verify

log = logging.getLogger("siammae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


DEFAULTS = {
    "seed": 0,
    "scene": SyntheticSceneSpec().to_dict(),
    "data": {"n_clips": 72, "n_heldout": 8, "train_split": "train", "eval_split": "heldout"},
    "model": ModelConfig().to_dict(),
    "mask": "0.95a",
    "train": {**TrainConfig().to_dict(), "total_steps": 2000, "warmup_steps": 100},
    "eval": {"preset": "davis", "task": "seg"},
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as JSON if possible."""
    if "=" not in item:
        raise UsageError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"override key {key!r}: {p!r} is not a section")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"override key {key!r} is unknown")
    node[parts[-1]] = _parse_value(value)


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in args.override or []:
        apply_override(cfg, item)
    # shorthand flags win over file and overrides
    if getattr(args, "arch", None):
        variant = ArchVariant.parse(args.arch)
        cfg["model"]["encoder"], cfg["model"]["decoder"] = variant.encoder, variant.decoder
    if getattr(args, "mask", None):
        cfg["mask"] = args.mask
    if getattr(args, "gap", None):
        lo, hi = (int(v) for v in args.gap.split(","))
        cfg["train"]["gap_range"] = [lo, hi]
    if getattr(args, "steps", None) is not None:
        cfg["train"]["total_steps"] = args.steps
        cfg["train"]["warmup_steps"] = max(1, args.steps // 20)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["train"]["seed"] = cfg["seed"]
    return cfg


def write_snapshot(out: Path, cfg: dict, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, **cfg}
    (out / "config.json").write_text(json.dumps(snap, indent=1, sort_keys=True))


def _model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except TypeError as exc:
        raise UsageError(f"bad model config: {exc}") from exc


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except TypeError as exc:
        raise UsageError(f"bad train config: {exc}") from exc


def _mask(cfg: dict) -> MaskSpec:
    try:
        return MaskSpec.parse(cfg["mask"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _prop_config(cfg: dict) -> PropagationConfig:
    ev = dict(cfg["eval"])
    preset = ev.pop("preset", "davis")
    ev.pop("task", None)
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset].to_dict()
    base.update({k: v for k, v in ev.items() if k in base})
    return PropagationConfig(**base)


def _load_split(data_dir, split):
    if data_dir is None:
        raise UsageError("--data is required")
    root = Path(data_dir)
    if not (root / "index.json").is_file():
        raise DataError(f"{root} has no index.json; run gen-data first")
    clips = load_dataset(root, split)
    if not clips:
        raise DataError(f"split {split!r} of {root} is empty")
    return clips


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    if args.spec:
        path = Path(args.spec)
        if not path.is_file():
            raise UsageError(f"scene spec {path} does not exist")
        cfg["scene"] = _merge(cfg["scene"], json.loads(path.read_text()))
    if args.n_clips is not None:
        cfg["data"]["n_clips"] = args.n_clips
    if args.n_heldout is not None:
        cfg["data"]["n_heldout"] = args.n_heldout
    data = cfg["data"]
    if not 0 <= data["n_heldout"] <= data["n_clips"]:
        raise UsageError("need 0 <= n_heldout <= n_clips")
    spec = SyntheticSceneSpec.from_dict(cfg["scene"])
    out = Path(args.out)
    generate_dataset(spec, out, data["n_clips"], cfg["seed"], data["n_heldout"])
    write_snapshot(out, cfg, "gen-data")
    print(f"wrote {data['n_clips']} clips to {out}")
    return EXIT_OK


def _train(cfg: dict, data_dir, out: Path):
    clips = [lc.clip for lc in _load_split(data_dir, cfg["data"]["train_split"])]
    mcfg = _model_config(cfg)
    model = SiamMAEModel(mcfg, np.random.default_rng([cfg["seed"], 0]))
    trainer = Trainer(model, clips, _train_config(cfg), _mask(cfg))
    total = trainer.total_steps
    every = max(1, total // 20)

    def progress(step, value):
        if step % every == 0 or step == total:
            log.info("step %d/%d loss %.4f", step, total, value)

    trainer.run(out_dir=out, callback=progress)
    return model


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    write_snapshot(out, cfg, "train")
    _train(cfg, args.data, out)
    print(f"checkpoint: {out / 'final'}")
    return EXIT_OK


def _evaluate(cfg: dict, model, data_dir, oracle=False):
    clips = _load_split(data_dir, cfg["data"]["eval_split"])
    task = cfg["eval"].get("task", "seg")
    if task not in ("seg", "parts", "keypoints"):
        raise UsageError(f"unknown task {task!r}")
    if task in ("seg", "parts") and any(lc.segmentation is None for lc in clips):
        raise DataError(f"task {task!r} needs label maps for every clip")
    if task == "keypoints" and any(lc.keypoints is None for lc in clips):
        raise DataError("task 'keypoints' needs keypoints.json for every clip")
    prop = _prop_config(cfg)
    feature_fn = oracle_feature_fn(cfg["model"]["patch_size"]) if oracle else None
    return evaluate_dataset(model, clips, prop, task, feature_fn)


def write_metrics(out: Path, mean: dict, rows: list[dict], extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {**extra, "mean": mean, "clips": rows}
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    if rows:
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def cmd_eval(args, cfg) -> int:
    if args.task:
        cfg["eval"]["task"] = args.task
    if args.preset:
        cfg["eval"]["preset"] = args.preset
    sources = sum(bool(x) for x in (args.checkpoint, args.random_init, args.oracle))
    if sources != 1:
        raise UsageError("give exactly one of --checkpoint, --random-init, --oracle")
    model = None
    source = "oracle"
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt.build_model()
        cfg["model"] = ckpt.model_config().to_dict()
        source = str(args.checkpoint)
    elif args.random_init:
        model = SiamMAEModel(_model_config(cfg), np.random.default_rng([cfg["seed"], 0]))
        source = "random-init"
    out = Path(args.out)
    write_snapshot(out, cfg, "eval")
    mean, rows = _evaluate(cfg, model, args.data, oracle=args.oracle)
    write_metrics(out, mean, rows, {"source": source, "task": cfg["eval"]["task"]})
    print(json.dumps(mean, sort_keys=True))
    return EXIT_OK


def _grid_rows(grid) -> tuple[dict, list[dict]]:
    if isinstance(grid, list):
        return {}, grid
    rows = grid.get("rows")
    if rows is None:
        # cartesian product of {"arch": [...], "mask": [...], "gap": [...]}
        axes = grid.get("axes", {})
        rows = [{}]
        for key, values in axes.items():
            rows = [{**r, key: v} for r in rows for v in values]
    return grid.get("base", {}), rows


def _row_config(cfg: dict, base: dict, row: dict) -> dict:
    c = copy.deepcopy(cfg)
    for k, v in {**base, **row}.items():
        if k == "arch":
            variant = ArchVariant.parse(v)
            c["model"]["encoder"], c["model"]["decoder"] = variant.encoder, variant.decoder
        elif k == "mask":
            c["mask"] = v
        elif k == "gap":
            c["train"]["gap_range"] = [int(x) for x in (v.split(",") if isinstance(v, str) else v)]
        else:
            apply_override(c, f"{k}={json.dumps(v)}")
    return c


def cmd_ablate(args, cfg) -> int:
    path = Path(args.grid)
    if not path.is_file():
        raise UsageError(f"grid file {path} does not exist")
    base, rows = _grid_rows(json.loads(path.read_text()))
    if not rows:
        raise UsageError(f"grid file {path} lists no configurations")
    out = Path(args.out)
    write_snapshot(out, cfg, "ablate")
    table = []
    for i, row in enumerate(rows):
        label = {"row": i, **{k: (",".join(map(str, v)) if isinstance(v, list) else v)
                              for k, v in row.items()}}
        try:
            rcfg = _row_config(cfg, base, row)
            run_dir = out / f"run_{i:03d}"
            write_snapshot(run_dir, rcfg, "ablate-row")
            model = _train(rcfg, args.data, run_dir)
            mean, per_clip = _evaluate(rcfg, model, args.data)
            write_metrics(run_dir, mean, per_clip, {"row": label})
            table.append({**label, "arch": ArchVariant(rcfg["model"]["encoder"],
                                                       rcfg["model"]["decoder"]).label(),
                          "mask": MaskSpec.parse(rcfg["mask"]).label(),
                          "gap": "{},{}".format(*rcfg["train"]["gap_range"]),
                          "JF": mean.get("JF_mean"), "J": mean.get("J_mean"),
                          "F": mean.get("F_mean"), "status": "ok"})
        except (NumericError, DataError, ValueError, UsageError) as exc:
            log.error("row %d failed: %s", i, exc)
            table.append({**label, "JF": None, "J": None, "F": None,
                          "status": f"failed: {type(exc).__name__}: {exc}"})
        log.info("row %d: %s", i, table[-1]["status"])
    keys = ["row", "arch", "mask", "gap"]
    keys += [k for r in table for k in r if k not in keys and k not in ("JF", "J", "F", "status")]
    keys = list(dict.fromkeys(keys)) + ["JF", "J", "F", "status"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in table:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})
    print(f"wrote {out / 'ablation.csv'} ({len(table)} rows)")
    return EXIT_OK


def _colormap(v: np.ndarray) -> np.ndarray:
    # a compact blue -> yellow ramp for the overlay
    return np.stack([v, v ** 0.5 * 0.9, 1.0 - v], axis=0)


def cmd_attn_viz(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    size = model.cfg.image_size
    img = read_image(args.image)
    if img.shape[-2:] != (size, size):
        img = resize_bilinear(img, size, size)
    maps = cls_attention_maps(img, model)
    out = Path(args.out)
    cfg["model"] = ckpt.model_config().to_dict()
    write_snapshot(out, {**cfg, "checkpoint": str(args.checkpoint), "image": str(args.image)},
                   "attn-viz")
    for h, m in enumerate(maps):
        up = resize_bilinear(m[None], size, size)[0]
        write_image(out / f"head_{h:02d}.png", np.repeat(up[None], 3, axis=0))
    mean = resize_bilinear(maps.mean(axis=0)[None], size, size)[0]
    span = mean.max() - mean.min()
    mean = (mean - mean.min()) / span if span > 0 else np.zeros_like(mean)
    write_image(out / "overlay.png", 0.5 * img + 0.5 * _colormap(mean))
    np.save(out / "attention.npy", maps.astype(np.float32))
    print(f"wrote {len(maps)} head maps + overlay to {out}")
    return EXIT_OK


def cmd_verify(args, cfg) -> int:
    report = run_verify(seeds=args.seeds)
    for line in report.lines():
        print(line)
    if args.out:
        out = Path(args.out)
        write_snapshot(out, cfg, "verify")
        doc = {"passed": bool(report.passed),
               "checks": [{"name": c.name, "passed": bool(c.passed),
                           "max_error": None if c.max_error is None else float(c.max_error),
                           "detail": c.detail} for c in report.checks]}
        (out / "verify.json").write_text(json.dumps(doc, indent=1))
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dotted-key override, e.g. train.base_lr=1e-3")
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="siammae", description="Frame-pair masked autoencoding and label propagation on synthetic video.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic sprite dataset")
    g.add_argument("--spec", help="scene spec JSON (fields of SyntheticSceneSpec)")
    g.add_argument("--n-clips", type=int)
    g.add_argument("--n-heldout", type=int)

    def model_flags(q):
        q.add_argument("--arch", help="encoder,decoder e.g. siamese,cross_self")
        q.add_argument("--mask", help="0.95a, 0.75s, grid, grida")
        q.add_argument("--gap", help="lo,hi frame gap range")
        q.add_argument("--steps", type=int)
        q.add_argument("--data", help="dataset directory from gen-data")

    t = sub.add_parser("train", parents=[common], help="pretrain a model")
    model_flags(t)

    e = sub.add_parser("eval", parents=[common], help="label propagation metrics")
    model_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--random-init", action="store_true")
    e.add_argument("--oracle", action="store_true",
                   help="use ground-truth correspondence features")
    e.add_argument("--task", choices=["seg", "parts", "keypoints"])
    e.add_argument("--preset", choices=sorted(PRESETS))

    a = sub.add_parser("ablate", parents=[common], help="train + eval a grid of configs")
    model_flags(a)
    a.add_argument("--grid", required=True, help="grid JSON file")

    v = sub.add_parser("attn-viz", parents=[common], help="CLS attention maps per head")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)

    r = sub.add_parser("verify", parents=[common], help="gradient and oracle checks")
    r.add_argument("--seeds", type=int, default=20)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "attn-viz": cmd_attn_viz, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, parse errors exit with EXIT_USAGE
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.out is None and args.command != "verify":
        print(f"siammae {args.command}: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
