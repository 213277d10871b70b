"""Command-line entry point: ``mvir <command> [--config PATH] [flags]``.

Every command reads an optional flat config file, then applies flag
overrides. Failures print one JSON line ``{"error", "command", "message"}``
to stderr and exit with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import archive as A
from . import checkpoint as C
from . import geometry as G
from . import metrics as M
from . import relight as R
from . import train as TR
from .config import Config, load_config, parse_range
from .errors import ConfigError
from .model import IntrinsicSet, ModelConfig

COMMANDS = ("gen-data", "train", "finetune", "eval-consistency", "eval-normals", "eval-temporal", "relight", "edit")
MODEL_KEYS = ("patch_size", "embed_dim", "num_blocks", "num_heads", "mlp_ratio", "feature_dim", "head_hidden")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvir", description="Multi-view inverse rendering toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="flat key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--views", help="views per batch, INT or INT..INT")
        s.add_argument("--steps", type=int, help="total optimizer steps")
        s.add_argument("--lr", type=float)
        s.add_argument("--deterministic", action="store_true", help="disable batch prefetching")
    return p


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    for key in ("seed", "lr", "steps", "views"):
        val = getattr(args, key)
        if val is not None:
            cfg.set(key, val)
    if args.deterministic:
        cfg.set("deterministic", "true")
    return cfg


def _out(args, cfg: Config) -> Path:
    out = args.out or (Path(cfg.get_str("out")) if cfg.get_str("out") else None)
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg: Config, key: str) -> str:
    v = cfg.get_str(key)
    if v is None:
        raise ConfigError(f"config key {key!r} is required")
    return v


def train_config(cfg: Config, stage: str) -> TR.TrainConfig:
    d = TR.TrainConfig()
    kw = dict(stage=stage, lr=cfg.get_float("lr", d.lr), seed=cfg.get_int("seed", d.seed),
              epochs=cfg.get_int("epochs", d.epochs), steps_per_epoch=cfg.get_int("steps_per_epoch", d.steps_per_epoch),
              views=cfg.get_range("views", d.views), warmup=cfg.get_float("warmup", d.warmup),
              anchor=cfg.get_float("anchor", d.anchor), freeze_encoder=cfg.get_bool("freeze_encoder", d.freeze_encoder),
              replicate_single_view=cfg.get_bool("replicate_single_view", d.replicate_single_view),
              deterministic=cfg.get_bool("deterministic", d.deterministic))
    for k in ("albedo", "metallic", "roughness", "normal", "shading"):
        kw[f"w_{k}"] = cfg.get_float(f"w_{k}", 1.0)
    for k in ("beta1", "beta2", "eps"):
        kw[k] = cfg.get_float(k, getattr(d, k))
    steps = cfg.get_int("steps")
    if steps is not None:
        kw["epochs"], kw["steps_per_epoch"] = 1, steps
    return TR.TrainConfig(**kw)


def model_config(cfg: Config, image_size, seed: int) -> ModelConfig:
    d = ModelConfig()
    kw = {k: cfg.get_int(f"model.{k}", getattr(d, k)) for k in MODEL_KEYS}
    return ModelConfig(image_size=tuple(image_size), seed=seed, **kw)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: Config, out: Path) -> dict:
    seed = cfg.get_int("seed", 0)
    n = cfg.get_int("scenes", 4)
    if n < 1:
        raise ConfigError(f"scenes must be positive, got {n}")
    A.write_archive(out, range(seed, seed + n), cfg.get_str("difficulty", "easy"), cfg.get_int("height"),
                    cfg.get_int("width"))
    return {"archive": str(out), "scenes": n}


def cmd_train(cfg: Config, out: Path) -> dict:
    tcfg = train_config(cfg, "pretrain")
    scenes = TR.load_archive(_require(cfg, "archive"))
    mcfg = model_config(cfg, scenes[0].images.shape[-2:], tcfg.seed)
    ck, curve = TR.train_pretrain(tcfg, scenes, mcfg, log_path=out / "loss_curve.jsonl",
                                  time_log_path=out / "timing.jsonl")
    C.save(out / "checkpoint.ckpt", ck)
    return {"checkpoint": str(out / "checkpoint.ckpt"), "steps": len(curve), "final_loss": curve[-1]["loss"]}


def cmd_finetune(cfg: Config, out: Path) -> dict:
    tcfg = train_config(cfg, "finetune")
    pre = C.load(_require(cfg, "pretrained"))
    ck, curve = TR.train_finetune(tcfg, pre, TR.load_archive(_require(cfg, "archive")),
                                  log_path=out / "loss_curve.jsonl", time_log_path=out / "timing.jsonl")
    C.save(out / "checkpoint.ckpt", ck)
    return {"checkpoint": str(out / "checkpoint.ckpt"), "steps": len(curve), "final_loss": curve[-1]["loss"]}


def _predictions(cfg: Config, scenes):
    """Per-scene intrinsic sets: from ``checkpoint`` when given, else ground truth.

    The source tag names a checkpoint by content hash, so reports do not
    depend on where the checkpoint was stored.
    """
    path = cfg.get_str("checkpoint")
    if path is None:
        return "ground_truth", [sc.targets for sc in scenes]
    net = C.load(path).build_model()
    return f"sha256:{C.file_hash(path)[:16]}", [TR.predict(net, sc.images) for sc in scenes]


def cmd_eval_consistency(cfg: Config, out: Path) -> dict:
    scenes = TR.load_archive(_require(cfg, "archive"))
    source, preds = _predictions(cfg, scenes)
    records = []
    for sc, pred in zip(scenes, preds):
        rep = M.mv_consistency_rmse(sc.cameras, pred, max_views=cfg.get_int("max_views", 10),
                                    min_overlap=cfg.get_float("min_overlap", 0.05))
        records.append({"scene": sc.name, "source": source, **rep.record()})
    M.write_report(out, "mv_consistency", records)
    return {"worst_rmse": max(v for r in records for k, v in r.items() if k.startswith("rmse_"))}


def cmd_eval_normals(cfg: Config, out: Path) -> dict:
    scenes = TR.load_archive(_require(cfg, "archive"))
    source, preds = _predictions(cfg, scenes)
    records = []
    for sc, pred in zip(scenes, preds):
        rep = M.normal_metrics(np.asarray(pred.normal), sc.targets.normal, sc.hit)
        records.append({"scene": sc.name, "source": source, **rep.record()})
    M.write_report(out, "normals", records)
    return {"mean_mae_deg": float(np.mean([r["mae_deg"] for r in records]))}


def cmd_eval_temporal(cfg: Config, out: Path) -> dict:
    scenes = TR.load_archive(_require(cfg, "archive"))
    source, preds = _predictions(cfg, scenes)
    records = []
    for sc, pred in zip(scenes, preds):
        if any(f is None for f in sc.flows):
            raise ConfigError(f"scene {sc.name} has no flow fields")
        rep = M.temporal_warp_rmse(pred, sc.flows, sc.valid)
        records.append({"scene": sc.name, "source": source, "metric": "temporal_warp",
                        **{f"rmse_{k}": v for k, v in rep.items()}})
    M.write_report(out, "temporal", records)
    return {"worst_rmse": max(v for r in records for k, v in r.items() if k.startswith("rmse_"))}


def _scene_for_job(cfg: Config):
    path = Path(_require(cfg, "scene"))
    _, bundles = A.load_scene_dir(path)
    sc = TR.scene_data(path.name, bundles)
    source, (pred,) = _predictions(cfg, [sc])
    return sc, source, pred


def _write_image(out: Path, stem: str, img: np.ndarray) -> None:
    A.write_pfm(out / f"{stem}.pfm", img)
    A.write_png(out / f"{stem}.png", img)


def cmd_relight(cfg: Config, out: Path) -> dict:
    sc, source, pred = _scene_for_job(cfg)
    rig = R.parse_rig(cfg)
    if not rig.lights:
        raise ConfigError("relight needs at least one 'light = x y z r g b' entry")
    voxel = cfg.get_float("voxel")
    cloud = G.fuse_pointcloud(sc.cameras, pred, voxel=voxel)
    radius = cfg.get_float("splat_radius", R.SPLAT_RADIUS)
    spec = cfg.get_bool("specular", True)
    bg = cfg.get_float("background", 0.0)
    records = []
    for i, cam in enumerate(sc.cameras):
        img = R.render_relit(cloud, cam.intrinsics, cam.pose, rig, radius=radius, background=bg, specular=spec)
        _write_image(out, f"relit_{i:03d}", img)
        records.append({"metric": "relight", "view": i, "source": source, "points": len(cloud),
                        "mean_radiance": float(img.mean())})
    M.write_report(out, "relight", records)
    return {"views": len(records), "points": len(cloud)}


def cmd_edit(cfg: Config, out: Path) -> dict:
    sc, source, pred = _scene_for_job(cfg)
    region, albedo = R.parse_region(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", R.EmptyRegionWarning)
        edited = R.edit_material(sc.cameras, pred, list(sc.images), region, albedo)
    empty = any(issubclass(w.category, R.EmptyRegionWarning) for w in caught)
    records = []
    for i, (img, orig) in enumerate(zip(edited, sc.images)):
        _write_image(out, f"edited_{i:03d}", np.clip(img, 0.0, 1.0))
        records.append({"metric": "edit", "view": i, "source": source,
                        "changed_pixels": int(np.any(img != orig, axis=0).sum())})
    M.write_report(out, "edit", records)
    return {"views": len(records), "empty_region": empty}


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_finetune,
    "eval-consistency": cmd_eval_consistency, "eval-normals": cmd_eval_normals,
    "eval-temporal": cmd_eval_temporal, "relight": cmd_relight, "edit": cmd_edit,
}


def main(argv=None) -> int:
    parser = _parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.views is not None:
            parse_range(args.views, "--views")
        cfg = _config(args)
        out = _out(args, cfg)
        summary = HANDLERS[args.command](cfg, out)
    except Exception as exc:  # one structured line per failure
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "status": "ok", **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
