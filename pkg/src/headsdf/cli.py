"""Command-line pipeline: synthesize scenes, train the shape prior, fit and
interpolate latents, reconstruct from images, extract meshes, and evaluate.

Options come from an optional TOML config file plus flags; flags win.
Progress goes to standard error; results only to files. Exit codes: 0
success, 1 validation error, 2 numerical failure (divergence/non-finite).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import tomli
import torch

from .autodiff import NonFiniteError, deterministic_mode
from .mesh import (
    TriangleMesh,
    evaluate_prediction,
    load_obj,
    load_points,
    marching_cubes,
    save_obj,
    save_ply,
)
from .networks import (
    GeometryNetworkConfig,
    PositionalEncodingConfig,
    RenderNetworkConfig,
)
from .prior import (
    DivergenceError,
    PriorCheckpoint,
    PriorTrainConfig,
    ScanScene,
    fit_latent,
    geometry_config_from_dict,
    interpolate_latent,
    load_scan_dataset,
    train_prior,
)
from .prior import save_history_csv as save_prior_history
from .recon import ReconConfig, ReconResult, reconstruct
from .recon import save_history_csv as save_recon_history
from .synth import (
    VIEW_RING_SIZES,
    load_scene_dir,
    make_head_sdf,
    make_view_ring,
    render_scene,
    sample_head_params,
    sample_surface,
    value_noise_albedo,
    write_scene_dir,
)

OUTPUT_ROOT_ENV = "HEADSDF_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


class ValidationError(ValueError):
    pass


def _load_toml(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    with open(p, "rb") as f:
        return tomli.load(f)


def _merge(defaults: dict, file_cfg: dict, cli: dict) -> dict:
    """defaults <- file <- CLI flags (None flags are 'unset')."""
    out = dict(defaults)
    for k, v in file_cfg.items():
        out[k] = v
    for k, v in cli.items():
        if v is not None:
            out[k] = v
    return out


def _out_dir(args, default_name: str) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, ".")
        out = Path(root) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_config(out: Path, command: str, cfg: dict) -> None:
    with open(out / "config.json", "w") as f:
        json.dump({"command": command, "config": cfg}, f, indent=1, sort_keys=True)


def _geometry_config(cfg: dict) -> GeometryNetworkConfig:
    g = dict(cfg.get("geometry", {}))
    enc = PositionalEncodingConfig(**g.pop("encoding", {}))
    return GeometryNetworkConfig(encoding=enc, **g)


def _render_config(cfg: dict) -> RenderNetworkConfig:
    r = dict(cfg.get("render", {}))
    fe = PositionalEncodingConfig(**r.pop("feature_encoding", {}))
    re = PositionalEncodingConfig(**r.pop("radiance_encoding", {}))
    return RenderNetworkConfig(feature_encoding=fe, radiance_encoding=re, **r)


def _setup_threads(threads: int, seed: int) -> None:
    if threads == 0:
        deterministic_mode(seed)
    else:
        torch.set_num_threads(threads)
        torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    cfg = _merge(
        {
            "subjects": 1, "views": 3, "width": 128, "height": 128,
            "scans": 0, "scan_points": 20000, "seed": 0,
            "gt_resolution": 96, "crop_below_y": None,
        },
        _load_toml(args.config),
        {
            "subjects": args.subjects, "views": args.views,
            "width": args.width, "height": args.height,
            "scans": args.scans, "seed": args.seed,
        },
    )
    if cfg["views"] not in VIEW_RING_SIZES:
        raise ValidationError(
            f"unsupported view count {cfg['views']}; supported view sets: "
            f"{VIEW_RING_SIZES}"
        )
    _setup_threads(args.threads, cfg["seed"])
    out = _out_dir(args, "synth")
    _dump_config(out, "synth", cfg)

    for i in range(cfg["subjects"]):
        rng = np.random.default_rng(cfg["seed"] * 10007 + i)
        params = sample_head_params(rng)
        field = make_head_sdf(params)
        cams = make_view_ring(cfg["views"], width=cfg["width"], height=cfg["height"])
        scene = render_scene(field, value_noise_albedo(params.albedo_seed), cams)
        sub = out / f"subject_{i:02d}"
        write_scene_dir(
            sub, scene, field=field, params=params,
            gt_resolution=cfg["gt_resolution"], rng=rng,
        )
        log(f"wrote scene {sub}")

    if cfg["scans"] > 0:
        scan_dir = out / "scans"
        scan_dir.mkdir(exist_ok=True)
        manifest = {"scenes": []}
        for i in range(cfg["scans"]):
            rng = np.random.default_rng(cfg["seed"] * 20011 + i)
            params = sample_head_params(rng)
            field = make_head_sdf(params)
            pts = sample_surface(
                field, cfg["scan_points"], rng, crop_below_y=cfg["crop_below_y"]
            )
            name = f"scan_{i:02d}.ply"
            save_ply(scan_dir / name, pts)
            manifest["scenes"].append({"id": f"scan_{i:02d}", "file": name})
            log(f"wrote scan {scan_dir / name}")
        with open(scan_dir / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-prior

def cmd_train_prior(args) -> int:
    file_cfg = _load_toml(args.config)
    cfg = _merge(
        {k: v for k, v in asdict(PriorTrainConfig()).items()},
        {k: v for k, v in file_cfg.items() if k not in ("geometry",)},
        {"epochs": args.epochs, "lr": args.lr, "seed": args.seed,
         "scenes_per_step": args.scenes_per_step},
    )
    train_cfg = PriorTrainConfig(**cfg)
    geo_cfg = _geometry_config(file_cfg)
    if args.data is None:
        raise ValidationError("--data manifest is required")
    scenes = load_scan_dataset(args.data)
    _setup_threads(args.threads, train_cfg.seed)
    out = _out_dir(args, "prior")
    _dump_config(out, "train-prior", {**cfg, "geometry": asdict(geo_cfg)})

    resume = PriorCheckpoint.load(args.resume) if args.resume else None
    if resume is not None:
        log(f"resuming from epoch {resume.epoch}")
    try:
        ckpt = train_prior(scenes, train_cfg, geo_cfg, progress=log, resume=resume)
    except DivergenceError as e:
        e.checkpoint.save(out / "prior")
        save_prior_history(out / "history.csv", e.checkpoint.history)
        log(f"numerical failure: {e}")
        return EXIT_NUMERICAL
    ckpt.save(out / "prior")
    save_prior_history(out / "history.csv", ckpt.history)
    log(f"wrote checkpoint {out / 'prior'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-latent

def cmd_fit_latent(args) -> int:
    ckpt = PriorCheckpoint.load(args.prior)
    pts = load_points(args.scan)
    scan = ScanScene(scene_id=Path(args.scan).stem, points=pts, latent_index=0)
    _setup_threads(args.threads, args.seed or 0)
    out = _out_dir(args, "fit")
    _dump_config(out, "fit-latent", {
        "prior": str(args.prior), "scan": str(args.scan),
        "steps": args.steps, "lr": args.lr or 1e-3, "seed": args.seed or 0,
    })
    try:
        z = fit_latent(ckpt, scan, args.steps, lr=args.lr or 1e-3,
                       seed=args.seed or 0)
    except NonFiniteError as e:
        log(f"numerical failure: {e}")
        return EXIT_NUMERICAL
    np.save(out / "latent.npy", z.astype(np.float32))
    mesh = marching_cubes(
        ckpt.geometry.field(torch.from_numpy(z.astype(np.float32))),
        resolution=args.resolution,
    )
    save_obj(out / "mesh.obj", mesh)
    log(f"wrote {out / 'latent.npy'} and {out / 'mesh.obj'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# interpolate

def cmd_interpolate(args) -> int:
    ckpt = PriorCheckpoint.load(args.prior)
    alphas = [float(a) for a in args.alphas.split(",")]
    if any(a < 0 or a > 1 for a in alphas):
        raise ValidationError("alphas must lie in [0, 1]")
    _setup_threads(args.threads, args.seed or 0)
    out = _out_dir(args, "interp")

    def endpoint(spec: str) -> np.ndarray:
        if args.use_registry:
            if spec not in ckpt.scene_ids:
                raise ValidationError(
                    f"'{spec}' not in the latent registry {ckpt.scene_ids}"
                )
            return ckpt.latent_for(spec)
        pts = load_points(spec)
        scan = ScanScene(scene_id=Path(spec).stem, points=pts, latent_index=0)
        return fit_latent(ckpt, scan, args.steps, seed=args.seed or 0)

    z_a = endpoint(args.a)
    z_b = endpoint(args.b)
    _dump_config(out, "interpolate", {
        "prior": str(args.prior), "a": args.a, "b": args.b,
        "alphas": alphas, "use_registry": bool(args.use_registry),
    })
    for i, alpha in enumerate(alphas):
        z = interpolate_latent(z_a, z_b, alpha).astype(np.float32)
        mesh = marching_cubes(
            ckpt.geometry.field(torch.from_numpy(z)), resolution=args.resolution
        )
        if mesh.is_empty:
            log(f"warning: empty level set at alpha={alpha}")
        save_obj(out / f"mesh_{i:02d}_alpha_{alpha:.2f}.obj", mesh)
    log(f"wrote {len(alphas)} meshes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reconstruct

def cmd_reconstruct(args) -> int:
    file_cfg = _load_toml(args.config)
    cfg = _merge(
        {k: v for k, v in asdict(ReconConfig()).items()},
        {k: v for k, v in file_cfg.items()
         if k not in ("geometry", "render", "resolution")},
        {"epochs": args.epochs, "lr": args.lr, "seed": args.seed,
         "mode": args.mode, "rays_per_step": args.rays_per_step},
    )
    recon_cfg = ReconConfig(**cfg)
    scene = load_scene_dir(args.scene)
    prior = PriorCheckpoint.load(args.prior) if args.prior else None
    if recon_cfg.mode != "no-prior" and prior is None:
        raise ValidationError(f"mode '{recon_cfg.mode}' requires --prior")
    _setup_threads(args.threads, recon_cfg.seed)
    out = _out_dir(args, "recon")
    geo_cfg = _geometry_config(file_cfg) if "geometry" in file_cfg else None
    render_cfg = (
        _render_config(file_cfg) if "render" in file_cfg else RenderNetworkConfig()
    )
    resolution = args.resolution or file_cfg.get("resolution", 128)
    _dump_config(out, "reconstruct", {
        **cfg, "scene": str(args.scene),
        "prior": str(args.prior) if args.prior else None,
        "resolution": resolution,
    })
    try:
        result = reconstruct(
            scene, prior, recon_cfg,
            geometry_config=geo_cfg, render_config=render_cfg, progress=log,
        )
    except DivergenceError as e:
        e.checkpoint.save(out / "recon")
        save_recon_history(out / "history.csv", e.checkpoint.history)
        log(f"numerical failure: {e}")
        return EXIT_NUMERICAL
    except NonFiniteError as e:
        log(f"numerical failure: {e}")
        return EXIT_NUMERICAL
    result.save(out / "recon")
    save_recon_history(out / "history.csv", result.history)
    mesh = marching_cubes(
        result.geometry.field(torch.from_numpy(result.z.astype(np.float32))),
        resolution=resolution,
    )
    save_obj(out / "mesh.obj", mesh)
    log(f"wrote checkpoint, history.csv, and mesh.obj to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract-mesh

def cmd_extract_mesh(args) -> int:
    manifest = Path(str(args.checkpoint) + ".json")
    if not manifest.exists():
        raise ValidationError(f"checkpoint not found: {manifest}")
    with open(manifest) as f:
        kind = json.load(f)["config"].get("kind")
    _setup_threads(args.threads, 0)
    if kind == "prior":
        ckpt = PriorCheckpoint.load(args.checkpoint)
        if args.scene_id is not None:
            z = ckpt.latent_for(args.scene_id)
        elif args.latent is not None:
            z = np.load(args.latent)
        else:
            raise ValidationError("--scene-id or --latent required for a prior checkpoint")
        geo = ckpt.geometry
    elif kind == "recon":
        res = ReconResult.load(args.checkpoint)
        geo, z = res.geometry, res.z
    else:
        raise ValidationError(f"unrecognized checkpoint kind: {kind}")
    mesh = marching_cubes(
        geo.field(torch.from_numpy(np.asarray(z, dtype=np.float32))),
        resolution=args.resolution,
    )
    out = Path(args.out) if args.out else Path("mesh.obj")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_obj(out, mesh)
    log(f"wrote {out} ({len(mesh.vertices)} vertices)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(args) -> int:
    if len(args.pred) != len(args.scene):
        raise ValidationError("--pred and --scene must pair up one-to-one")
    out = _out_dir(args, "eval")
    rows = []
    for pred_path, scene_path in zip(args.pred, args.scene):
        scene_dir = Path(scene_path)
        lm_file = scene_dir / "landmarks.json"
        if not lm_file.exists():
            raise ValidationError(f"missing landmarks file: {lm_file}")
        gt_mesh_file = scene_dir / "gt_mesh.obj"
        if not gt_mesh_file.exists():
            raise ValidationError(f"missing ground-truth mesh: {gt_mesh_file}")
        with open(lm_file) as f:
            landmarks = json.load(f)
        gt_mesh = load_obj(gt_mesh_file)
        pred = load_obj(pred_path)
        report = evaluate_prediction(pred, gt_mesh, landmarks)
        rows.append({
            "subject": scene_dir.name,
            "face_mm": round(report["face_mm"], 2),
            "head_mm": round(report["head_mm"], 2),
        })
        log(f"{scene_dir.name}: face {rows[-1]['face_mm']:.2f} mm, "
            f"head {rows[-1]['head_mm']:.2f} mm")
    summary = {
        "subjects": rows,
        "mean_face_mm": round(float(np.mean([r["face_mm"] for r in rows])), 2),
        "mean_head_mm": round(float(np.mean([r["head_mm"] for r in rows])), 2),
        "note": (
            "head region is an analytic axis-threshold mask on synthetic "
            "scenes, substituting for an annotated face/ears/neck region"
        ),
    }
    _dump_config(out, "evaluate", {"pred": list(args.pred), "scene": list(args.scene)})
    with open(out / "report.json", "w") as f:
        json.dump(summary, f, indent=1)
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["subject", "face_mm", "head_mm"])
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow({
            "subject": "mean",
            "face_mm": summary["mean_face_mm"],
            "head_mm": summary["mean_head_mm"],
        })
    log(f"wrote report.json and report.csv to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="headsdf",
        description="Prior-guided implicit head reconstruction pipeline",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file; flags override it")
        sp.add_argument("--out", help=f"output directory (default from ${OUTPUT_ROOT_ENV})")
        sp.add_argument("--threads", type=int, default=0,
                        help="0 = deterministic single-threaded mode")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate synthetic scenes and scans")
    common(sp)
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--views", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("--scans", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train-prior", help="train the shape prior on scans")
    common(sp)
    sp.add_argument("--data", help="scan dataset manifest JSON")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--scenes-per-step", type=int)
    sp.add_argument("--resume", help="checkpoint path to continue from")
    sp.set_defaults(func=cmd_train_prior)

    sp = sub.add_parser("fit-latent", help="fit a latent code to a scan")
    common(sp)
    sp.add_argument("--prior", required=True)
    sp.add_argument("--scan", required=True)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--resolution", type=int, default=96)
    sp.set_defaults(func=cmd_fit_latent)

    sp = sub.add_parser("interpolate", help="mesh sequence between two latents")
    common(sp)
    sp.add_argument("--prior", required=True)
    sp.add_argument("--a", required=True, help="scan file, or scene id with --use-registry")
    sp.add_argument("--b", required=True)
    sp.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    sp.add_argument("--use-registry", action="store_true",
                    help="endpoints are registry scene ids; no re-fitting")
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--resolution", type=int, default=96)
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("reconstruct", help="multi-view reconstruction")
    common(sp)
    sp.add_argument("--scene", required=True, help="scene directory")
    sp.add_argument("--prior", help="prior checkpoint path")
    sp.add_argument("--mode", choices=["no-prior", "prior-no-schedule", "prior-schedule"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--rays-per-step", type=int)
    sp.add_argument("--resolution", type=int)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("extract-mesh", help="marching cubes from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene-id", help="registry scene id (prior checkpoints)")
    sp.add_argument("--latent", help="latent .npy file (prior checkpoints)")
    sp.add_argument("--resolution", type=int, default=128)
    sp.set_defaults(func=cmd_extract_mesh)

    sp = sub.add_parser("evaluate", help="face/head Chamfer report")
    common(sp)
    sp.add_argument("--pred", nargs="+", required=True, help="predicted mesh OBJ(s)")
    sp.add_argument("--scene", nargs="+", required=True, help="scene directory(ies)")
    sp.set_defaults(func=cmd_evaluate)

    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, ValueError, TypeError) as e:
        log(f"error: {e}")
        return EXIT_VALIDATION
    except (DivergenceError, NonFiniteError) as e:
        log(f"numerical failure: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
