"""Few-shot multi-view reconstruction with a frozen-then-finetuned shape prior.

Per-step pipeline: sample pixels from one view, sphere-trace the current
surface, split the batch into photometric pixels (ray hits and mask is on)
and silhouette pixels (everything else), and minimize

    L = L_RGB + beta_mask * L_Mask + beta_eik * L_Eik.

Three modes support the ablation: a geometric-init baseline with no prior,
prior initialization with every parameter free from the start, and the
two-stage schedule that freezes the decoder until the loss plateaus.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .autodiff import NonFiniteError, spatial_gradient
from .cameras import Camera
from .checkpoint import load_arrays, save_arrays
from .networks import (
    GeometryNetwork,
    GeometryNetworkConfig,
    PositionalEncodingConfig,
    RenderNetworkConfig,
    RenderNetworks,
)
from .prior import (
    TRAIN_VOLUME_HALF_EXTENT,
    DIVERGENCE_FACTOR,
    DIVERGENCE_PATIENCE,
    DivergenceError,
    PriorCheckpoint,
)
from .synth import ViewScene
from .tracer import (
    SCENE_BOUND_RADIUS,
    differentiable_intersection,
    min_sdf_batch,
    ray_sphere_bounds,
    sphere_trace_batch,
)

MODES = ("no-prior", "prior-no-schedule", "prior-schedule")


@dataclass
class PixelBatch:
    """Pixels of one view, partitioned against the current surface."""

    view_index: int
    pixels: np.ndarray        # (B, 2) integer (px, py)
    rgb_mask: np.ndarray      # (B,) bool: ray hits the surface AND mask is on

    def __post_init__(self):
        if self.pixels.shape[0] != self.rgb_mask.shape[0]:
            raise ValueError("partition length mismatch")


@dataclass(frozen=True)
class ReconConfig:
    beta_mask: float = 100.0
    beta_eik: float = 0.1
    alpha_start: float = 50.0           # silhouette sharpness, doubled on a schedule
    alpha_double_every: int = 250
    alpha_cap: float = 1600.0
    epochs: int = 2000
    lr: float = 1e-4
    lr_decay: float = 0.5               # applied at 0.5 and 0.75 of the run
    rays_per_step: int = 2048
    n_eik: int = 256                    # fresh volume samples per step
    n_ray_samples: int = 100            # along-ray samples for silhouette pixels
    eps_z: Optional[float] = None       # None = 0.1 x median registry norm
    plateau_window: int = 100
    plateau_tol: float = 0.01           # <1% improvement counts as a plateau
    plateau_patience: int = 3
    stage_cap_frac: float = 0.3         # hard stage-switch cap as run fraction
    mode: str = "prior-schedule"
    seed: int = 0

    def __post_init__(self):
        if self.alpha_start <= 0:
            raise ValueError("alpha_start must be > 0")
        if self.eps_z is not None and self.eps_z <= 0:
            raise ValueError("eps_z must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def alpha_at_epoch(self, epoch: int) -> float:
        return min(
            self.alpha_start * 2.0 ** (epoch // self.alpha_double_every),
            self.alpha_cap,
        )

    def lr_at_epoch(self, epoch: int) -> float:
        lr = self.lr
        if epoch >= math.floor(0.5 * self.epochs):
            lr *= self.lr_decay
        if epoch >= math.floor(0.75 * self.epochs):
            lr *= self.lr_decay
        return lr

    def stage_cap_epoch(self) -> int:
        return math.floor(self.stage_cap_frac * self.epochs)


@dataclass
class ReconResult:
    geometry: GeometryNetwork
    render: RenderNetworks
    z: np.ndarray
    config: ReconConfig
    history: List[Dict[str, float]]
    stage_switch_epoch: Optional[int]   # None = single-stage mode

    def save(self, path: str | Path) -> None:
        arrays = {
            f"theta/{k}": t.detach().cpu().numpy().astype(np.float32)
            for k, t in self.geometry.state_dict().items()
        }
        arrays.update(
            (f"phi/{k}", t.detach().cpu().numpy().astype(np.float32))
            for k, t in self.render.state_dict().items()
        )
        arrays["z"] = self.z.astype(np.float32)
        meta = {
            "kind": "recon",
            "config": asdict(self.config),
            "geometry_config": asdict(self.geometry.config),
            "render_config": _render_config_dict(self.render.config),
            "stage_switch_epoch": self.stage_switch_epoch,
            "history": self.history,
        }
        save_arrays(path, meta, arrays)

    @staticmethod
    def load(path: str | Path) -> "ReconResult":
        from .prior import geometry_config_from_dict

        meta, arrays = load_arrays(path)
        if meta.get("kind") != "recon":
            raise ValueError(f"'{path}' is not a reconstruction checkpoint")
        geo = GeometryNetwork(geometry_config_from_dict(meta["geometry_config"]))
        geo.load_state_dict({
            k[len("theta/"):]: torch.from_numpy(a.copy())
            for k, a in arrays.items() if k.startswith("theta/")
        })
        render = RenderNetworks(_render_config_from_dict(meta["render_config"]))
        render.load_state_dict({
            k[len("phi/"):]: torch.from_numpy(a.copy())
            for k, a in arrays.items() if k.startswith("phi/")
        })
        return ReconResult(
            geometry=geo,
            render=render,
            z=arrays["z"].copy(),
            config=ReconConfig(**meta["config"]),
            history=list(meta.get("history", [])),
            stage_switch_epoch=meta.get("stage_switch_epoch"),
        )


def _render_config_dict(cfg: RenderNetworkConfig) -> dict:
    return asdict(cfg)


def _render_config_from_dict(d: dict) -> RenderNetworkConfig:
    d = dict(d)
    d["feature_encoding"] = PositionalEncodingConfig(**d["feature_encoding"])
    d["radiance_encoding"] = PositionalEncodingConfig(**d["radiance_encoding"])
    return RenderNetworkConfig(**d)


def render_pixel(
    geo: GeometryNetwork,
    z: torch.Tensor,
    render: RenderNetworks,
    camera: Camera,
    pixel: Tuple[float, float],
) -> dict:
    """Trace one pixel ray; {'hit': True, 'color': (3,)} or {'hit': False}."""
    ray = camera.pixel_ray(pixel)
    field_fn = geo.field(z)
    o = torch.as_tensor(ray.origin, dtype=torch.float32)[None]
    d = torch.as_tensor(ray.direction, dtype=torch.float32)[None]
    t0, t1, inside = ray_sphere_bounds(o, d)
    res = sphere_trace_batch(field_fn, o, d, t0, t1, inside)
    if not bool(res["hit"][0]):
        return {"hit": False}
    x_s, valid = differentiable_intersection(field_fn, res["x"], d)
    if not bool(valid[0]):
        return {"hit": False}
    n = spatial_gradient(field_fn, x_s, create_graph=True)
    with torch.no_grad():
        color = render(x_s, n, d)[0].clamp(0.0, 1.0)
    return {"hit": True, "color": color.numpy().copy()}


def make_pixel_batch(
    scene: ViewScene,
    view_index: int,
    field_fn,
    rays_per_step: int,
    rng: np.random.Generator,
) -> Tuple[PixelBatch, Dict[str, torch.Tensor], torch.Tensor, torch.Tensor]:
    """Sample pixels of one view and partition them against the surface.

    Returns (batch, trace result, origins, dirs); the partition is recomputed
    from the current surface every call.
    """
    view = scene.views[view_index]
    cam = view.camera
    n_pix = cam.width * cam.height
    flat = rng.choice(n_pix, size=min(rays_per_step, n_pix), replace=False)
    pixels = np.stack([flat % cam.width, flat // cam.width], axis=-1)
    origins_all, dirs_all = cam.pixel_grid_rays()
    o = torch.from_numpy(origins_all[flat].astype(np.float32))
    d = torch.from_numpy(dirs_all[flat].astype(np.float32))
    t0, t1, inside = ray_sphere_bounds(o, d)
    trace = sphere_trace_batch(field_fn, o, d, t0, t1, inside)
    mask_on = view.mask.reshape(-1)[flat] > 0.5
    rgb_mask = trace["hit"].numpy() & mask_on
    batch = PixelBatch(view_index=view_index, pixels=pixels, rgb_mask=rgb_mask)
    return batch, trace, o, d


def recon_loss(
    batch: PixelBatch,
    trace: Dict[str, torch.Tensor],
    origins: torch.Tensor,
    dirs: torch.Tensor,
    scene: ViewScene,
    geo: GeometryNetwork,
    z: torch.Tensor,
    render: RenderNetworks,
    config: ReconConfig,
    alpha: float,
    rng: np.random.Generator,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Photometric + silhouette + Eikonal loss over one pixel batch.

    L_RGB averages |image - color| over the full batch size; L_Mask is the
    cross-entropy between the mask and a sigmoid of the sharpness-scaled,
    negated minimum field value along each non-photometric ray, divided by
    alpha and the batch size; L_Eik sums squared unit-norm deviations over
    fresh uniform volume samples.
    """
    view = scene.views[batch.view_index]
    field_fn = geo.field(z)
    n_total = len(batch.pixels)
    device = origins.device

    rgb_idx = np.flatnonzero(batch.rgb_mask)
    l_rgb = torch.zeros((), device=device)
    if len(rgb_idx) > 0:
        idx = torch.from_numpy(rgb_idx)
        x_i = origins[idx] + trace["t"][idx, None] * dirs[idx]
        x_s, valid = differentiable_intersection(field_fn, x_i, dirs[idx])
        if valid.any():
            x_s = x_s[valid]
            v = dirs[idx][valid]
            n = spatial_gradient(field_fn, x_s, create_graph=True)
            color = render(x_s, n, v)
            px = batch.pixels[rgb_idx][valid.numpy()]
            target = torch.from_numpy(
                view.image[px[:, 1], px[:, 0]].astype(np.float32)
            )
            l_rgb = (target - color).abs().mean(dim=-1).sum() / n_total

    mask_idx = np.flatnonzero(~batch.rgb_mask)
    l_mask = torch.zeros((), device=device)
    if len(mask_idx) > 0:
        idx = torch.from_numpy(mask_idx)
        t0, t1, inside = ray_sphere_bounds(origins[idx], dirs[idx])
        fmin, _ = min_sdf_batch(
            field_fn, origins[idx], dirs[idx], t0, torch.clamp(t1, min=t0),
            config.n_ray_samples,
        )
        px = batch.pixels[mask_idx]
        m = torch.from_numpy(
            (view.mask[px[:, 1], px[:, 0]] > 0.5).astype(np.float32)
        )
        ce = torch.nn.functional.binary_cross_entropy_with_logits(
            -alpha * fmin, m, reduction="sum"
        )
        l_mask = ce / (alpha * n_total)

    h = TRAIN_VOLUME_HALF_EXTENT
    x_vol = torch.from_numpy(
        rng.uniform(-h, h, size=(config.n_eik, 3)).astype(np.float32)
    )
    grad = spatial_gradient(field_fn, x_vol, create_graph=True)
    l_eik = ((torch.linalg.norm(grad, dim=-1) - 1.0) ** 2).sum()

    for name, val in (("L_RGB", l_rgb), ("L_Mask", l_mask), ("L_Eik", l_eik)):
        if not torch.isfinite(val):
            raise NonFiniteError(name)
    total = l_rgb + config.beta_mask * l_mask + config.beta_eik * l_eik
    return total, {"L_RGB": l_rgb, "L_Mask": l_mask, "L_Eik": l_eik}


def sample_initial_latent(
    eps_z: float, latent_size: int, generator: torch.Generator
) -> torch.Tensor:
    """Random latent with norm strictly below eps_z (uniform in radius)."""
    g = torch.randn(latent_size, generator=generator)
    u = torch.rand((), generator=generator)
    return g / torch.linalg.norm(g).clamp(min=1e-12) * (eps_z * u)


def reconstruct(
    scene: ViewScene,
    prior: Optional[PriorCheckpoint],
    config: ReconConfig,
    geometry_config: Optional[GeometryNetworkConfig] = None,
    render_config: RenderNetworkConfig = RenderNetworkConfig(),
    snapshot: Optional[Callable[[int, GeometryNetwork, np.ndarray], None]] = None,
    snapshot_every: int = 0,
    progress: Optional[Callable[[str], None]] = None,
) -> ReconResult:
    """Optimize shape latent, decoder, and radiance networks against a scene.

    Modes: 'no-prior' starts from geometric initialization with all
    parameters free; 'prior-no-schedule' starts from the prior decoder with
    all parameters free; 'prior-schedule' freezes the decoder until the
    smoothed loss plateaus (or the hard cap epoch), then fine-tunes jointly.
    """
    if config.mode != "no-prior" and prior is None:
        raise ValueError(f"mode '{config.mode}' requires a prior checkpoint")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    if config.mode == "no-prior":
        geo = GeometryNetwork(
            geometry_config if geometry_config is not None
            else (prior.geometry.config if prior is not None
                  else GeometryNetworkConfig())
        )
        z = torch.zeros(geo.config.latent_size, requires_grad=True)
    else:
        geo = GeometryNetwork(prior.geometry.config)
        geo.load_state_dict(copy.deepcopy(prior.geometry.state_dict()))
        eps_z = (
            config.eps_z if config.eps_z is not None
            else 0.1 * float(np.median(prior.registry_norms()))
        )
        z = sample_initial_latent(
            eps_z, geo.config.latent_size, gen
        ).requires_grad_(True)
    render = RenderNetworks(render_config)

    two_stage = config.mode == "prior-schedule"
    theta_params = list(geo.parameters())
    if two_stage:
        for p in theta_params:
            p.requires_grad_(False)
        theta_frozen = {
            k: t.detach().clone() for k, t in geo.state_dict().items()
        }
    opt_params = [z] + list(render.parameters())
    if not two_stage:
        opt_params += theta_params
    opt = torch.optim.Adam(opt_params, lr=config.lr, betas=(0.9, 0.999))

    history: List[Dict[str, float]] = []
    stage = 1 if two_stage else 2
    stage_switch_epoch: Optional[int] = None
    plateau_hits = 0
    prev_window_loss = None
    initial_loss = None
    diverged_streak = 0
    best = (float("inf"), None)

    for epoch in range(config.epochs):
        lr = config.lr_at_epoch(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        alpha = config.alpha_at_epoch(epoch)
        view_index = epoch % len(scene.views)

        batch, trace, o, d = make_pixel_batch(
            scene, view_index, geo.field(z), config.rays_per_step, rng
        )
        opt.zero_grad()
        loss, parts = recon_loss(
            batch, trace, o, d, scene, geo, z, render, config, alpha, rng
        )
        loss.backward()
        opt.step()

        row = {
            "epoch": epoch,
            "L_RGB": float(parts["L_RGB"].detach()),
            "L_Mask": float(parts["L_Mask"].detach()),
            "L_Eik": float(parts["L_Eik"].detach()),
            "loss": float(loss.detach()),
            "lr": lr,
            "stage": stage,
            "alpha": alpha,
        }
        history.append(row)
        if progress is not None and (epoch % 50 == 0 or epoch == config.epochs - 1):
            progress(
                f"epoch {epoch} stage {stage}: loss {row['loss']:.4f} "
                f"(rgb {row['L_RGB']:.4f} mask {row['L_Mask']:.4f} "
                f"eik {row['L_Eik']:.4f}) lr {lr:.2e} alpha {alpha:g}"
            )

        if initial_loss is None:
            initial_loss = row["loss"]
        if row["loss"] < best[0]:
            best = (
                row["loss"],
                (
                    copy.deepcopy(geo.state_dict()),
                    copy.deepcopy(render.state_dict()),
                    z.detach().clone(),
                    epoch,
                ),
            )
        diverged_streak = (
            diverged_streak + 1
            if row["loss"] > DIVERGENCE_FACTOR * max(initial_loss, 1e-12)
            else 0
        )
        if diverged_streak >= DIVERGENCE_PATIENCE * config.plateau_window:
            geo.load_state_dict(best[1][0])
            render.load_state_dict(best[1][1])
            raise DivergenceError(
                f"reconstruction diverged at epoch {epoch}",
                ReconResult(
                    geometry=geo, render=render,
                    z=best[1][2].numpy().copy(), config=config,
                    history=history, stage_switch_epoch=stage_switch_epoch,
                ),
            )

        if snapshot is not None and snapshot_every > 0 and (
            (epoch + 1) % snapshot_every == 0 or epoch == config.epochs - 1
        ):
            snapshot(epoch, geo, z.detach().numpy().copy())

        if two_stage and stage == 1:
            switch = epoch + 1 >= config.stage_cap_epoch()
            w = config.plateau_window
            if not switch and (epoch + 1) % w == 0:
                window_loss = float(
                    np.mean([r["loss"] for r in history[-w:]])
                )
                if prev_window_loss is not None:
                    improvement = (prev_window_loss - window_loss) / max(
                        abs(prev_window_loss), 1e-12
                    )
                    plateau_hits = (
                        plateau_hits + 1
                        if improvement < config.plateau_tol
                        else 0
                    )
                    switch = plateau_hits >= config.plateau_patience
                prev_window_loss = window_loss
            if switch:
                stage = 2
                stage_switch_epoch = epoch + 1
                for p in theta_params:
                    p.requires_grad_(True)
                opt.add_param_group({"params": theta_params, "lr": lr})
                if progress is not None:
                    progress(f"stage switch at epoch {epoch + 1}")

    return ReconResult(
        geometry=geo,
        render=render,
        z=z.detach().numpy().copy(),
        config=config,
        history=history,
        stage_switch_epoch=stage_switch_epoch,
    )


def save_history_csv(path: str | Path, history: List[Dict[str, float]]) -> None:
    """Per-epoch table with columns (epoch, L_RGB, L_Mask, L_Eik, lr, stage)."""
    cols = ["epoch", "L_RGB", "L_Mask", "L_Eik", "loss", "lr", "stage", "alpha"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)
