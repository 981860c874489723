"""Shape-prior training over raw surface point clouds.

An auto-decoder: one latent code per training scan, optimized jointly with
the shared geometry decoder under a surface-anchoring term, a Gaussian
latent penalty, and an Eikonal regularizer over a fixed training volume.
New scans are fitted by optimizing a fresh latent with the decoder frozen.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .autodiff import NonFiniteError, spatial_gradient
from .checkpoint import load_arrays, save_arrays
from .networks import GeometryNetwork, GeometryNetworkConfig, PositionalEncodingConfig

TRAIN_VOLUME_HALF_EXTENT = 1.1   # Eikonal samples are uniform in [-1.1, 1.1]^3
DIVERGENCE_FACTOR = 1e3
DIVERGENCE_PATIENCE = 5


class DivergenceError(RuntimeError):
    """Raised when training loss exceeds 1e3x its initial value for 5 epochs.

    Carries the checkpoint of the best epoch seen before the abort.
    """

    def __init__(self, message: str, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class ScanScene:
    """One training scan: id, surface points, index into the code registry."""

    scene_id: str
    points: np.ndarray          # (N, 3) normalized coordinates
    latent_index: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise ValueError(f"scene '{self.scene_id}': points must be non-empty (N, 3)")
        if not np.isfinite(self.points).all():
            raise ValueError(f"scene '{self.scene_id}': non-finite points")
        if np.abs(self.points).max() > TRAIN_VOLUME_HALF_EXTENT:
            raise ValueError(
                f"scene '{self.scene_id}': points outside the "
                f"[-{TRAIN_VOLUME_HALF_EXTENT}, {TRAIN_VOLUME_HALF_EXTENT}]^3 "
                "training volume"
            )


@dataclass(frozen=True)
class PriorTrainConfig:
    lambda_embed: float = 1e-3       # weight of the latent Gaussian penalty
    lambda_eik: float = 0.1          # weight of the Eikonal term
    sigma_sq: float = 1.0            # latent prior variance
    epochs: int = 100
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 15
    scenes_per_step: int = 8
    n_surface: int = 512             # surface samples per scene per step
    n_volume: int = 512              # volume samples per scene per step
    steps_per_epoch: Optional[int] = None  # None = one pass over all scenes
    latent_init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lambda_embed <= 0 or self.lambda_eik <= 0 or self.sigma_sq <= 0:
            raise ValueError("lambda_embed, lambda_eik, sigma_sq must be > 0")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class PriorCheckpoint:
    """Trained decoder weights plus the fitted per-scene latent registry."""

    geometry: GeometryNetwork
    latents: np.ndarray              # (num_scenes, latent_size)
    scene_ids: List[str]
    config: PriorTrainConfig
    epoch: int
    history: List[Dict[str, float]] = field(default_factory=list)

    def latent_for(self, scene_id: str) -> np.ndarray:
        return self.latents[self.scene_ids.index(scene_id)]

    def registry_norms(self) -> np.ndarray:
        return np.linalg.norm(self.latents, axis=1)

    def save(self, path: str | Path) -> None:
        arrays = {
            f"theta/{name}": t.detach().cpu().numpy().astype(np.float32)
            for name, t in self.geometry.state_dict().items()
        }
        arrays["latents"] = self.latents.astype(np.float32)
        meta = {
            "kind": "prior",
            "epoch": self.epoch,
            "scene_ids": self.scene_ids,
            "train_config": asdict(self.config),
            "geometry_config": asdict(self.geometry.config),
            "history": self.history,
        }
        save_arrays(path, meta, arrays)

    @staticmethod
    def load(path: str | Path) -> "PriorCheckpoint":
        meta, arrays = load_arrays(path)
        if meta.get("kind") != "prior":
            raise ValueError(f"'{path}' is not a prior checkpoint")
        geo = GeometryNetwork(geometry_config_from_dict(meta["geometry_config"]))
        state = {
            name[len("theta/"):]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items() if name.startswith("theta/")
        }
        geo.load_state_dict(state)
        return PriorCheckpoint(
            geometry=geo,
            latents=arrays["latents"].copy(),
            scene_ids=list(meta["scene_ids"]),
            config=PriorTrainConfig(**meta["train_config"]),
            epoch=int(meta["epoch"]),
            history=list(meta.get("history", [])),
        )


def geometry_config_from_dict(d: dict) -> GeometryNetworkConfig:
    d = dict(d)
    d["encoding"] = PositionalEncodingConfig(**d["encoding"])
    return GeometryNetworkConfig(**d)


def sample_minibatch(
    scene: ScanScene,
    n_s: int,
    n_v: int,
    rng: np.random.Generator,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Surface points without replacement; volume points uniform in the box."""
    n_pts = len(scene.points)
    if n_s > n_pts:
        raise ValueError(f"n_s={n_s} exceeds scan size {n_pts}")
    idx = rng.choice(n_pts, size=n_s, replace=False)
    p_s = torch.from_numpy(scene.points[idx])
    h = TRAIN_VOLUME_HALF_EXTENT
    p_v = torch.from_numpy(
        rng.uniform(-h, h, size=(n_v, 3)).astype(np.float32)
    )
    return p_s, p_v


def prior_loss(
    geo: GeometryNetwork,
    z: torch.Tensor,
    p_s: torch.Tensor,
    p_v: torch.Tensor,
    config: PriorTrainConfig,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Per-scene objective: surface |F| sum + latent penalty + Eikonal sum.

    Differentiable w.r.t. decoder parameters and z; non-finite components
    abort with the offending term named.
    """
    if len(p_s) == 0 or len(p_v) == 0:
        raise ValueError("surface and volume batches must be non-empty")
    field_fn = geo.field(z)
    l_surf = field_fn(p_s).abs().sum()
    l_emb = (z * z).sum() / config.sigma_sq
    grad = spatial_gradient(field_fn, p_v, create_graph=True)
    l_eik = ((torch.linalg.norm(grad, dim=-1) - 1.0) ** 2).sum()
    for name, val in (("L_Surf", l_surf), ("L_Emb", l_emb), ("L_Eik", l_eik)):
        if not torch.isfinite(val):
            raise NonFiniteError(name)
    total = l_surf + config.lambda_embed * l_emb + config.lambda_eik * l_eik
    return total, {"L_Surf": l_surf, "L_Emb": l_emb, "L_Eik": l_eik}


def train_prior(
    dataset: Sequence[ScanScene],
    config: PriorTrainConfig,
    geometry_config: GeometryNetworkConfig = GeometryNetworkConfig(),
    progress: Optional[Callable[[str], None]] = None,
    resume: Optional["PriorCheckpoint"] = None,
) -> PriorCheckpoint:
    """Jointly optimize decoder weights and one latent code per scene.

    With `resume`, decoder weights and latents continue from the checkpoint
    at its recorded epoch (optimizer moments restart).
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 scenes to learn a prior")
    ids = [s.scene_id for s in dataset]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate scene ids")
    if sorted(s.latent_index for s in dataset) != list(range(len(dataset))):
        raise ValueError("latent indices must be a permutation of 0..S-1")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    start_epoch = 0
    history: List[Dict[str, float]] = []
    if resume is not None:
        if resume.scene_ids != ids:
            raise ValueError("resume checkpoint was trained on different scenes")
        geo = resume.geometry
        latents = torch.nn.Parameter(torch.from_numpy(resume.latents.copy()))
        start_epoch = resume.epoch + 1
        history = list(resume.history)
    else:
        geo = GeometryNetwork(geometry_config)
        latents = torch.nn.Parameter(
            torch.randn(len(dataset), geometry_config.latent_size)
            * config.latent_init_std
        )
    opt = torch.optim.Adam(
        list(geo.parameters()) + [latents], lr=config.lr, betas=(0.9, 0.999)
    )
    best_loss = float("inf")
    best_state = None
    initial_loss = None
    diverged_streak = 0

    scenes_by_index = sorted(dataset, key=lambda s: s.latent_index)
    for epoch in range(start_epoch, config.epochs):
        lr = config.lr_at_epoch(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(dataset))
        if config.steps_per_epoch is None:
            chunks = [
                order[i:i + config.scenes_per_step]
                for i in range(0, len(order), config.scenes_per_step)
            ]
        else:
            chunks = [
                rng.choice(len(dataset), size=min(config.scenes_per_step, len(dataset)),
                           replace=False)
                for _ in range(config.steps_per_epoch)
            ]
        sums = {"L_Surf": 0.0, "L_Emb": 0.0, "L_Eik": 0.0, "loss": 0.0}
        n_terms = 0
        for chunk in chunks:
            opt.zero_grad()
            batch_loss = 0.0
            for i in chunk:
                scene = scenes_by_index[i]
                p_s, p_v = sample_minibatch(
                    scene, min(config.n_surface, len(scene.points)),
                    config.n_volume, rng,
                )
                loss, parts = prior_loss(geo, latents[i], p_s, p_v, config)
                batch_loss = batch_loss + loss
                for k in ("L_Surf", "L_Emb", "L_Eik"):
                    sums[k] += float(parts[k].detach())
                sums["loss"] += float(loss.detach())
                n_terms += 1
            (batch_loss / len(chunk)).backward()
            opt.step()
        row = {k: v / max(n_terms, 1) for k, v in sums.items()}
        row.update(epoch=epoch, lr=lr)
        history.append(row)
        if progress is not None:
            progress(
                f"epoch {epoch}: loss {row['loss']:.4f} "
                f"(surf {row['L_Surf']:.4f} emb {row['L_Emb']:.4f} "
                f"eik {row['L_Eik']:.4f}) lr {lr:.2e}"
            )

        if initial_loss is None:
            initial_loss = row["loss"]
        if row["loss"] < best_loss:
            best_loss = row["loss"]
            best_state = (
                copy.deepcopy(geo.state_dict()),
                latents.detach().clone(),
                epoch,
            )
        diverged_streak = (
            diverged_streak + 1
            if row["loss"] > DIVERGENCE_FACTOR * initial_loss
            else 0
        )
        if diverged_streak >= DIVERGENCE_PATIENCE:
            geo.load_state_dict(best_state[0])
            ckpt = PriorCheckpoint(
                geometry=geo,
                latents=best_state[1].numpy().copy(),
                scene_ids=ids,
                config=config,
                epoch=best_state[2],
                history=history,
            )
            raise DivergenceError(
                f"prior training diverged at epoch {epoch} "
                f"(loss {row['loss']:.3e} vs initial {initial_loss:.3e})",
                ckpt,
            )

    return PriorCheckpoint(
        geometry=geo,
        latents=latents.detach().numpy().copy(),
        scene_ids=ids,
        config=config,
        epoch=config.epochs - 1,
        history=history,
    )


def fit_latent(
    checkpoint: PriorCheckpoint,
    scan: ScanScene,
    steps: int,
    lr: float = 1e-3,
    config: Optional[PriorTrainConfig] = None,
    seed: int = 0,
) -> np.ndarray:
    """Optimize a fresh latent for a scan with the decoder frozen; z starts at 0."""
    cfg = config if config is not None else checkpoint.config
    geo = checkpoint.geometry
    for p in geo.parameters():
        p.requires_grad_(False)
    try:
        z = torch.zeros(geo.config.latent_size, requires_grad=True)
        opt = torch.optim.Adam([z], lr=lr, betas=(0.9, 0.999))
        rng = np.random.default_rng(seed)
        for _ in range(steps):
            p_s, p_v = sample_minibatch(
                scan, min(cfg.n_surface, len(scan.points)), cfg.n_volume, rng
            )
            opt.zero_grad()
            loss, _ = prior_loss(geo, z, p_s, p_v, cfg)
            loss.backward()
            opt.step()
        return z.detach().numpy().copy()
    finally:
        for p in geo.parameters():
            p.requires_grad_(True)


def interpolate_latent(z_a: np.ndarray, z_b: np.ndarray, alpha: float) -> np.ndarray:
    """Linear interpolation in code space: (1 - alpha) z_a + alpha z_b."""
    z_a = np.asarray(z_a)
    z_b = np.asarray(z_b)
    if z_a.shape != z_b.shape:
        raise ValueError("latent codes must have equal length")
    return (1.0 - alpha) * z_a + alpha * z_b


def surface_residual(geo: GeometryNetwork, z, points: np.ndarray) -> float:
    """Mean |F| over the given surface points."""
    z_t = torch.as_tensor(np.asarray(z, dtype=np.float32))
    with torch.no_grad():
        f = geo(torch.from_numpy(np.asarray(points, dtype=np.float32)), z_t)
    return float(f.abs().mean())


def eikonal_residual(geo: GeometryNetwork, z, n_samples: int, seed: int = 0) -> float:
    """Mean |norm(grad F) - 1| over uniform samples of the training volume."""
    rng = np.random.default_rng(seed)
    h = TRAIN_VOLUME_HALF_EXTENT
    x = torch.from_numpy(rng.uniform(-h, h, size=(n_samples, 3)).astype(np.float32))
    z_t = torch.as_tensor(np.asarray(z, dtype=np.float32))
    grad = spatial_gradient(geo.field(z_t), x, create_graph=False)
    return float((torch.linalg.norm(grad, dim=-1) - 1.0).abs().mean())


def save_history_csv(path: str | Path, history: Sequence[Dict[str, float]]) -> None:
    """Per-epoch loss table with columns (epoch, L_Surf, L_Emb, L_Eik, loss, lr)."""
    cols = ["epoch", "L_Surf", "L_Emb", "L_Eik", "loss", "lr"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def load_scan_dataset(manifest_path: str | Path) -> List[ScanScene]:
    """Scenes from a manifest JSON: {"scenes": [{"id", "file", "normalization"?}]}.

    Files are PLY/XYZ point clouds; the optional normalization is a row-major
    4x4 applied to the points before validation.
    """
    from .mesh import load_points

    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    scenes = []
    for i, entry in enumerate(manifest["scenes"]):
        pts = load_points(manifest_path.parent / entry["file"])
        if "normalization" in entry:
            m = np.asarray(entry["normalization"], dtype=np.float64).reshape(4, 4)
            pts = pts @ m[:3, :3].T + m[:3, 3]
        scenes.append(ScanScene(scene_id=entry["id"], points=pts, latent_index=i))
    return scenes
