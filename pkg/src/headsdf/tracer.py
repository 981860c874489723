"""Ray-surface intersection by sphere tracing.

Marching advances by the (safety-scaled) field value; hits are made
differentiable with the detached-denominator reparameterization, exact in
value and first derivatives at the current iterate. Misses report the
minimum field value along the ray for the silhouette loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np
import torch

from .autodiff import spatial_gradient

Field = Callable[[torch.Tensor], torch.Tensor]

SCENE_BOUND_RADIUS = 1.3
EPS_HIT = 5e-5
MAX_STEPS = 128
OMEGA_NETWORK = 0.8   # safety factor for approximately-Eikonal network fields
OMEGA_EXACT = 1.0
DELTA_GRAZE = 1e-4
FALLBACK_SAMPLES = 100


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = float("inf")


@dataclass
class RayHit:
    hit: bool
    x: np.ndarray
    t: float
    steps: int
    min_sdf: float
    t_at_min: float


def ray_sphere_bounds(
    origins: torch.Tensor,
    dirs: torch.Tensor,
    radius: float = SCENE_BOUND_RADIUS,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """March interval [t0, t1] of each ray inside the bounding sphere.

    Returns (t0, t1, inside) where inside=False marks rays whose forward
    half-line never enters the sphere; for those, t0 is the parameter of
    the closest approach to the sphere center (clamped to t >= 0).
    """
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius ** 2
    disc = b * b - c
    sqrt_disc = torch.sqrt(torch.clamp(disc, min=0.0))
    t0 = torch.clamp(-b - sqrt_disc, min=0.0)
    t1 = -b + sqrt_disc
    inside = (disc > 0) & (t1 > 0)
    t_closest = torch.clamp(-b, min=0.0)
    t0 = torch.where(inside, t0, t_closest)
    t1 = torch.where(inside, t1, t_closest)
    return t0, t1, inside


def sphere_trace_batch(
    field: Field,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    t_min: torch.Tensor,
    t_max: torch.Tensor,
    valid: torch.Tensor | None = None,
    eps_hit: float = EPS_HIT,
    max_steps: int = MAX_STEPS,
    omega: float = OMEGA_NETWORK,
    fallback_samples: int = FALLBACK_SAMPLES,
) -> Dict[str, torch.Tensor]:
    """Trace R rays; returns hit mask, t, x, step counts, min_sdf, t_at_min.

    `valid=False` rays (bounding-sphere misses) are immediate misses whose
    min_sdf is the field at the closest-approach point t_min.
    """
    R = origins.shape[0]
    device = origins.device
    if valid is None:
        valid = torch.ones(R, dtype=torch.bool, device=device)

    t = t_min.clone()
    hit = torch.zeros(R, dtype=torch.bool, device=device)
    steps = torch.zeros(R, dtype=torch.long, device=device)
    min_sdf = torch.full((R,), float("inf"), dtype=origins.dtype,
                         device=device)
    t_at_min = t_min.clone()
    active = valid.clone()

    with torch.no_grad():
        for _ in range(max_steps):
            if not active.any():
                break
            idx = active.nonzero(as_tuple=True)[0]
            x = origins[idx] + t[idx, None] * dirs[idx]
            f = field(x)
            steps[idx] += 1
            better = f < min_sdf[idx]
            upd = idx[better]
            min_sdf[upd] = f[better]
            t_at_min[upd] = t[upd]
            got = f.abs() < eps_hit
            hit[idx[got]] = True
            adv = ~got
            t[idx[adv]] = t[idx[adv]] + omega * f[adv]
            out = t[idx] > t_max[idx]
            active[idx] = active[idx] & ~got & ~out

        # fallback minimum over a fixed uniform sampling for silhouettes
        miss = valid & ~hit
        if miss.any() and fallback_samples >= 2:
            idx = miss.nonzero(as_tuple=True)[0]
            frac = torch.linspace(0.0, 1.0, fallback_samples, device=device)
            ts = t_min[idx, None] + frac[None, :] * (t_max - t_min)[idx, None]
            x = origins[idx, None, :] + ts[..., None] * dirs[idx, None, :]
            f = field(x.reshape(-1, 3)).reshape(len(idx), fallback_samples)
            k = torch.argmin(f, dim=1)  # first minimum = smallest t on ties
            fmin = f[torch.arange(len(idx)), k]
            better = fmin < min_sdf[idx]
            upd = idx[better]
            min_sdf[upd] = fmin[better]
            t_at_min[upd] = ts[torch.arange(len(idx)), k][better]

        # bounding-sphere misses: closest approach point
        invalid = ~valid
        if invalid.any():
            idx = invalid.nonzero(as_tuple=True)[0]
            x = origins[idx] + t_min[idx, None] * dirs[idx]
            min_sdf[idx] = field(x)
            t_at_min[idx] = t_min[idx]

    x_hit = origins + t[:, None] * dirs
    return {
        "hit": hit,
        "t": t,
        "x": x_hit,
        "steps": steps,
        "min_sdf": min_sdf,
        "t_at_min": t_at_min,
    }


def sphere_trace(
    field: Field,
    ray: Ray,
    eps_hit: float = EPS_HIT,
    max_steps: int = MAX_STEPS,
    omega: float = OMEGA_NETWORK,
    fallback_samples: int = FALLBACK_SAMPLES,
    bound_radius: float = SCENE_BOUND_RADIUS,
) -> RayHit:
    """Single-ray convenience wrapper; bounds clipped to the scene sphere."""
    o = torch.as_tensor(np.asarray(ray.origin, dtype=np.float32))[None]
    d = torch.as_tensor(np.asarray(ray.direction, dtype=np.float32))[None]
    t0, t1, inside = ray_sphere_bounds(o, d, bound_radius)
    t0 = torch.clamp(t0, min=ray.t_min)
    if np.isfinite(ray.t_max):
        t1 = torch.clamp(t1, max=ray.t_max)
    res = sphere_trace_batch(
        field, o, d, t0, t1, inside,
        eps_hit=eps_hit, max_steps=max_steps, omega=omega,
        fallback_samples=fallback_samples,
    )
    return RayHit(
        hit=bool(res["hit"][0]),
        x=res["x"][0].numpy(),
        t=float(res["t"][0]),
        steps=int(res["steps"][0]),
        min_sdf=float(res["min_sdf"][0]),
        t_at_min=float(res["t_at_min"][0]),
    )


def differentiable_intersection(
    field: Field,
    x_i: torch.Tensor,
    v: torch.Tensor,
    delta_graze: float = DELTA_GRAZE,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Reparameterized hit points, exact in value and first derivatives.

    x_s = x_i - v / (grad F(x_i) . v) * F(x_i), with x_i and the denominator
    detached at the current iterate and the trailing field value carrying
    gradients w.r.t. latent/network parameters.

    Returns (x_s, valid); valid=False marks grazing rays with
    |grad F . v| <= delta_graze, to be excluded from the step.
    """
    x_i = x_i.detach()
    grad = spatial_gradient(field, x_i, create_graph=False).detach()
    denom = (grad * v.detach()).sum(-1)
    valid = denom.abs() > delta_graze
    safe = torch.where(valid, denom, torch.ones_like(denom))
    f_val = field(x_i)
    x_s = x_i - (v.detach() / safe[:, None]) * f_val[:, None]
    return x_s, valid


def min_sdf_along_ray(
    field: Field,
    origin,
    direction,
    t_min: float,
    t_max: float,
    n_samples: int,
) -> Tuple[torch.Tensor, float]:
    """Differentiable minimum of F over uniform samples of one ray.

    Gradients flow through the argmin sample point only; ties resolve to
    the smallest ray parameter.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    o = torch.as_tensor(np.asarray(origin, dtype=np.float32))
    d = torch.as_tensor(np.asarray(direction, dtype=np.float32))
    vals, t_at = min_sdf_batch(
        field, o[None], d[None],
        torch.tensor([t_min]), torch.tensor([t_max]), n_samples,
    )
    return vals[0], float(t_at[0])


def min_sdf_batch(
    field: Field,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    t_min: torch.Tensor,
    t_max: torch.Tensor,
    n_samples: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batched differentiable per-ray minimum of F over uniform t samples."""
    R = origins.shape[0]
    frac = torch.linspace(0.0, 1.0, n_samples, device=origins.device)
    ts = t_min[:, None] + frac[None, :] * (t_max - t_min)[:, None]
    x = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    with torch.no_grad():
        f = field(x.reshape(-1, 3)).reshape(R, n_samples)
        k = torch.argmin(f, dim=1)  # first occurrence = smallest t
    rows = torch.arange(R, device=origins.device)
    x_min = (origins + ts[rows, k][:, None] * dirs).detach()
    return field(x_min), ts[rows, k].detach()
