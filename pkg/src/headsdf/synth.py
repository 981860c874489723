"""Desk-scale synthetic ground truth.

A parametric family of head-like analytic SDFs (smooth-min union of an
ellipsoid cranium with nose/chin/ear bumps and a neck capsule), surface
point sampling by Newton projection, a Lambertian sphere-traced renderer
producing posed images and masks, and the yaw-ring camera configurations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from . import mesh as mesh_ops
from .autodiff import spatial_gradient
from .cameras import Camera, look_at, save_cameras
from .mesh import MM_PER_UNIT, TriangleMesh
from .tracer import ray_sphere_bounds, sphere_trace_batch

VIEW_RING_SIZES = (3, 4, 8, 16, 32)


# ---------------------------------------------------------------------------
# Analytic SDF primitives and smooth-min blending.

def sdf_sphere(x: torch.Tensor, center, radius: float) -> torch.Tensor:
    c = torch.as_tensor(center, dtype=x.dtype)
    return torch.linalg.norm(x - c, dim=-1) - radius


def sdf_ellipsoid(x: torch.Tensor, axes) -> torch.Tensor:
    """Conservative ellipsoid distance bound: min(axes) * (|x/axes| - 1).

    Underestimates the true distance outside (safe for sphere tracing) and
    keeps the gradient norm within [min(axes)/max(axes), 1].
    """
    r = torch.as_tensor(axes, dtype=x.dtype)
    k0 = torch.linalg.norm(x / r, dim=-1)
    return float(r.min()) * (k0 - 1.0)


def sdf_capsule(x: torch.Tensor, a, b, radius: float) -> torch.Tensor:
    a = torch.as_tensor(a, dtype=x.dtype)
    b = torch.as_tensor(b, dtype=x.dtype)
    pa = x - a
    ba = b - a
    h = ((pa * ba).sum(-1) / (ba * ba).sum()).clamp(0.0, 1.0)
    return torch.linalg.norm(pa - h[..., None] * ba, dim=-1) - radius


def sdf_box(x: torch.Tensor, half_extent) -> torch.Tensor:
    he = torch.as_tensor(half_extent, dtype=x.dtype)
    q = x.abs() - he
    outside = torch.linalg.norm(q.clamp_min(0.0), dim=-1)
    inside = q.max(dim=-1).values.clamp_max(0.0)
    return outside + inside


def sdf_torus(x: torch.Tensor, major: float, minor: float) -> torch.Tensor:
    q = torch.stack(
        [torch.linalg.norm(x[..., [0, 2]], dim=-1) - major, x[..., 1]], dim=-1
    )
    return torch.linalg.norm(q, dim=-1) - minor


def smooth_union(d1: torch.Tensor, d2: torch.Tensor, k: float) -> torch.Tensor:
    h = (0.5 + 0.5 * (d2 - d1) / k).clamp(0.0, 1.0)
    return d2 * (1 - h) + d1 * h - k * h * (1 - h)


def smooth_union_bounded(d1: torch.Tensor, d2: torch.Tensor, k: float) -> torch.Tensor:
    """Smooth union with the blend clamped to stay within k/48 of hard min.

    The plain polynomial blend averages anti-aligned gradients to near zero
    on the interior medial sheet under each crease; clamping routes those
    regions through a hard-min branch (unit-ish subgradients) while keeping
    a fillet near the visible crease, so the sampled gradient norm stays
    within [0.5, 2] over the whole scene volume.
    """
    s = smooth_union(d1, d2, k)
    m = torch.minimum(d1, d2)
    return torch.maximum(s, m - k / 48.0)


# ---------------------------------------------------------------------------
# Head family.

@dataclass(frozen=True)
class BumpParams:
    """Spherical bump blended onto the cranium.

    `center` is a radial anchor direction: the sphere is centered on the
    cranium surface along that direction, pushed outward by `amplitude`
    (so it always crosses the surface transversally). amplitude <= 0 omits
    the primitive entirely (degenerate family member).
    """
    center: Tuple[float, float, float]
    radius: float
    amplitude: float


@dataclass(frozen=True)
class HeadFamilyParams:
    cranium_axes: Tuple[float, float, float] = (0.66, 0.80, 0.68)
    nose: BumpParams = BumpParams((0.0, -0.08, 0.62), 0.13, 0.05)
    chin: BumpParams = BumpParams((0.0, -0.62, 0.30), 0.16, 0.05)
    ear_left: BumpParams = BumpParams((-0.60, 0.02, 0.02), 0.11, 0.04)
    ear_right: BumpParams = BumpParams((0.60, 0.02, 0.02), 0.11, 0.04)
    neck: BumpParams = BumpParams((0.0, -0.72, -0.04), 0.26, 0.30)  # amplitude = capsule length
    blend_k: float = 0.1
    albedo_seed: int = 0

    def bumps(self) -> Tuple[BumpParams, ...]:
        return (self.nose, self.chin, self.ear_left, self.ear_right)


def sample_head_params(rng: np.random.Generator) -> HeadFamilyParams:
    """Random family member; all draws keep the head inside the unit ball."""
    axes = np.array([0.66, 0.80, 0.68]) * rng.uniform(0.92, 1.08, 3)

    def jitter(b: BumpParams) -> BumpParams:
        c = np.asarray(b.center) * rng.uniform(0.92, 1.08, 3)
        radius = b.radius * rng.uniform(0.8, 1.2)
        # keep the sphere center near the surface for a transversal crossing
        return BumpParams(tuple(c), radius, radius * rng.uniform(0.3, 0.6))

    base = HeadFamilyParams(cranium_axes=tuple(axes))
    return HeadFamilyParams(
        cranium_axes=tuple(axes),
        nose=jitter(base.nose),
        chin=jitter(base.chin),
        ear_left=jitter(base.ear_left),
        ear_right=jitter(base.ear_right),
        neck=BumpParams(base.neck.center, base.neck.radius * rng.uniform(0.9, 1.1),
                        base.neck.amplitude),
        albedo_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def make_head_sdf(params: HeadFamilyParams) -> Callable[[torch.Tensor], torch.Tensor]:
    """Analytic head field: negative inside, Lipschitz bound ~< 2 after blending."""
    axes = np.asarray(params.cranium_axes, dtype=np.float64)
    k = params.blend_k

    def f(x: torch.Tensor) -> torch.Tensor:
        d = sdf_ellipsoid(x, tuple(axes))
        for b in params.bumps():
            if b.amplitude <= 0:
                continue
            direction = np.asarray(b.center, dtype=np.float64)
            direction /= max(np.linalg.norm(direction), 1e-9)
            anchor = direction / np.linalg.norm(direction / axes)  # on the ellipsoid
            c_out = anchor + b.amplitude * direction
            d = smooth_union_bounded(d, sdf_sphere(x, tuple(c_out), b.radius), k)
        n = params.neck
        if n.amplitude > 0:
            top = np.asarray(n.center)
            bot = top + np.array([0.0, -n.amplitude, 0.0])
            d = smooth_union_bounded(d, sdf_capsule(x, tuple(top), tuple(bot), n.radius), k)
        return d

    return f


def numpy_field(field: Callable[[torch.Tensor], torch.Tensor]):
    def f(x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return field(torch.as_tensor(np.atleast_2d(x), dtype=torch.float32)).numpy()
    return f


# ---------------------------------------------------------------------------
# Surface sampling.

def sample_surface(
    field: Callable[[torch.Tensor], torch.Tensor],
    n: int,
    rng: np.random.Generator,
    crop_below_y: Optional[float] = None,
    tol: float = 1e-5,
    newton_iters: int = 30,
) -> np.ndarray:
    """Newton-project random seeds onto the zero level set; |F| < tol.

    crop_below_y removes points with y below the plane, emulating
    incomplete scans.
    """
    points: List[np.ndarray] = []
    collected = 0
    seeded = 0
    projected = 0
    for _ in range(50):
        if collected >= n:
            break
        m = max(2 * (n - collected), 256)
        dirs = rng.normal(size=(m, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        seeds = dirs * rng.uniform(0.3, 1.05, (m, 1))
        x = torch.as_tensor(seeds, dtype=torch.float64)
        for _ in range(newton_iters):
            xg = x.clone().requires_grad_(True)
            fval = field(xg)
            (g,) = torch.autograd.grad(fval.sum(), xg)
            with torch.no_grad():
                x = x - fval[:, None] * g / (g * g).sum(-1, keepdim=True).clamp_min(1e-12)
            if fval.detach().abs().max() < tol * 0.1:
                break
        with torch.no_grad():
            fv = field(x).numpy()
        ok = (np.abs(fv) < tol) & (np.linalg.norm(x.numpy(), axis=1) < 1.1)
        seeded += m
        projected += int(ok.sum())
        if seeded >= 4 * n and projected < 0.5 * seeded:
            raise RuntimeError(
                f"surface projection failure rate too high: {projected}/{seeded}"
            )
        got = x.numpy()[ok]
        if crop_below_y is not None:
            got = got[got[:, 1] >= crop_below_y]
        points.append(got)
        collected += len(got)
    if collected < n:
        raise RuntimeError("could not collect enough surface samples")
    return np.concatenate(points)[:n]


# ---------------------------------------------------------------------------
# Albedo and lighting.

@dataclass(frozen=True)
class LightingModel:
    direction: Tuple[float, float, float] = (0.3, 0.5, 0.81)  # toward the light
    intensity: float = 0.7
    ambient: float = 0.3


def value_noise_albedo(seed: int, octaves: int = 3, base: float = 0.35,
                       span: float = 0.55) -> Callable[[np.ndarray], np.ndarray]:
    """Low-frequency procedural RGB albedo in [base, base+span]."""
    rng = np.random.default_rng(seed)
    grids = []
    for o in range(octaves):
        res = 4 * 2 ** o
        grids.append((res, rng.uniform(0.0, 1.0, (res + 1, res + 1, res + 1, 3))))

    def trilinear(grid: np.ndarray, res: int, x: np.ndarray) -> np.ndarray:
        u = (np.clip(x, -1.3, 1.3) + 1.3) / 2.6 * res
        i = np.clip(u.astype(int), 0, res - 1)
        f = u - i
        out = np.zeros((len(x), 3))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (f[:, 0] if dx else 1 - f[:, 0])
                        * (f[:, 1] if dy else 1 - f[:, 1])
                        * (f[:, 2] if dz else 1 - f[:, 2])
                    )
                    out += w[:, None] * grid[i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz]
        return out

    def albedo(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        acc = np.zeros((len(x), 3))
        wsum = 0.0
        for o, (res, grid) in enumerate(grids):
            w = 0.5 ** o
            acc += w * trilinear(grid, res, x)
            wsum += w
        return base + span * acc / wsum

    return albedo


# ---------------------------------------------------------------------------
# Rendering.

@dataclass
class View:
    image: np.ndarray   # (H, W, 3) float in [0, 1]
    mask: np.ndarray    # (H, W) bool
    camera: Camera


@dataclass
class ViewScene:
    views: List[View]

    def __post_init__(self):
        if len(self.views) < 3:
            raise ValueError("a scene needs N >= 3 views")
        for v in self.views:
            h, w = v.mask.shape
            if v.image.shape != (h, w, 3) or (v.camera.height, v.camera.width) != (h, w):
                raise ValueError("image/mask/camera dimensions disagree")


def render_view(
    field: Callable[[torch.Tensor], torch.Tensor],
    albedo: Callable[[np.ndarray], np.ndarray],
    camera: Camera,
    lighting: LightingModel = LightingModel(),
    omega: float = 0.9,
    background: float = 0.0,
) -> View:
    o_np, d_np = camera.pixel_grid_rays()
    o = torch.as_tensor(o_np, dtype=torch.float32)
    d = torch.as_tensor(d_np, dtype=torch.float32)
    t0, t1, inside = ray_sphere_bounds(o, d)
    res = sphere_trace_batch(field, o, d, t0, t1, inside, omega=omega, eps_hit=1e-4,
                             fallback_samples=0)
    hit = res["hit"].numpy()
    h, w = camera.height, camera.width
    img = np.full((h * w, 3), background, dtype=np.float64)
    if hit.any():
        x = res["x"][res["hit"]]
        n = spatial_gradient(field, x, create_graph=False).detach()
        n = n / torch.linalg.norm(n, dim=-1, keepdim=True).clamp_min(1e-12)
        light = torch.as_tensor(lighting.direction, dtype=torch.float32)
        light = light / torch.linalg.norm(light)
        lambert = (n @ light).clamp_min(0.0).numpy()
        shade = np.clip(lighting.ambient + lighting.intensity * lambert, 0.0, 1.0)
        img[hit] = np.clip(albedo(x.numpy()) * shade[:, None], 0.0, 1.0)
    return View(
        image=img.reshape(h, w, 3),
        mask=hit.reshape(h, w),
        camera=camera,
    )


def render_scene(
    field: Callable[[torch.Tensor], torch.Tensor],
    albedo: Callable[[np.ndarray], np.ndarray],
    cameras: Sequence[Camera],
    lighting: LightingModel = LightingModel(),
) -> ViewScene:
    return ViewScene([render_view(field, albedo, c, lighting) for c in cameras])


def view_ring_yaws(n: int) -> List[float]:
    if n == 3:
        return [-45.0, 0.0, 45.0]
    if n == 4:
        return [-90.0, -45.0, 45.0, 90.0]
    if n in (8, 16, 32):
        return [360.0 / n * i for i in range(1, n + 1)]
    raise ValueError(f"unsupported view count {n}; supported: {VIEW_RING_SIZES}")


def make_view_ring(
    n: int,
    radius: float = 2.5,
    elevation_deg: float = 10.0,
    width: int = 128,
    height: int = 128,
    fov_deg: float = 40.0,
) -> List[Camera]:
    """Cameras on a yaw ring aimed at the origin; yaw 0 faces +z."""
    cams = []
    phi = np.deg2rad(elevation_deg)
    for yaw in view_ring_yaws(n):
        th = np.deg2rad(yaw)
        pos = radius * np.array(
            [np.cos(phi) * np.sin(th), np.sin(phi), np.cos(phi) * np.cos(th)]
        )
        cams.append(look_at(pos, np.zeros(3), fov_deg=fov_deg, width=width, height=height))
    return cams


# ---------------------------------------------------------------------------
# Landmarks and scene directories.

def find_nose_tip(field: Callable[[torch.Tensor], torch.Tensor],
                  params: HeadFamilyParams) -> np.ndarray:
    """Surface point hit by a ray aimed at the nose from outside."""
    c = np.asarray(params.nose.center, dtype=np.float64)
    direction = -c / np.linalg.norm(c)
    origin = -2.0 * direction
    o = torch.as_tensor(origin[None], dtype=torch.float32)
    d = torch.as_tensor(direction[None], dtype=torch.float32)
    t0, t1, inside = ray_sphere_bounds(o, d)
    res = sphere_trace_batch(field, o, d, t0, t1, inside, omega=0.9, eps_hit=1e-6,
                             max_steps=256, fallback_samples=0)
    if not bool(res["hit"][0]):
        raise RuntimeError("nose-tip ray missed the surface")
    return res["x"][0].double().numpy()


def default_landmarks(field, params: HeadFamilyParams) -> dict:
    """Analytic landmark set: nose tip plus stable cranium points."""
    nose = find_nose_tip(field, params)

    def surface_along(direction: np.ndarray) -> np.ndarray:
        d = -direction / np.linalg.norm(direction)
        o = torch.as_tensor((-2.0 * d)[None], dtype=torch.float32)
        dt = torch.as_tensor(d[None], dtype=torch.float32)
        t0, t1, inside = ray_sphere_bounds(o, dt)
        res = sphere_trace_batch(field, o, dt, t0, t1, inside, omega=0.9,
                                 eps_hit=1e-6, max_steps=256, fallback_samples=0)
        return res["x"][0].double().numpy()

    return {
        "nose_tip": nose.tolist(),
        "points": {
            "nose_tip": nose.tolist(),
            "crown": surface_along(np.array([0.0, 1.0, 0.0])).tolist(),
            "left": surface_along(np.array([-1.0, 0.1, 0.1])).tolist(),
            "right": surface_along(np.array([1.0, 0.1, 0.1])).tolist(),
            "back": surface_along(np.array([0.0, 0.1, -1.0])).tolist(),
        },
        "head_region": {"axis": "y", "min": -0.85},
        "mm_per_unit": MM_PER_UNIT,
    }


def save_png(path: str | Path, array: np.ndarray) -> None:
    arr = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_scene_dir(
    out_dir: str | Path,
    scene: ViewScene,
    field=None,
    params: Optional[HeadFamilyParams] = None,
    gt_resolution: int = 96,
    gt_points: int = 20000,
    rng: Optional[np.random.Generator] = None,
) -> None:
    """Scene directory: images/NNN.png, masks/NNN.png, cameras.json, gt assets."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(scene.views):
        save_png(out / "images" / f"{i:03d}.png", v.image)
        save_png(out / "masks" / f"{i:03d}.png", v.mask.astype(np.float64))
    save_cameras(out / "cameras.json", [v.camera for v in scene.views])
    if field is not None:
        gt_mesh = mesh_ops.marching_cubes(field, resolution=gt_resolution)
        mesh_ops.save_obj(out / "gt_mesh.obj", gt_mesh)
        rng = rng if rng is not None else np.random.default_rng(0)
        pts = sample_surface(field, gt_points, rng)
        mesh_ops.save_ply(out / "gt_points.ply", pts)
        if params is not None:
            with open(out / "landmarks.json", "w") as f:
                json.dump(default_landmarks(field, params), f, indent=1)
            with open(out / "head_params.json", "w") as f:
                json.dump(asdict(params), f, indent=1)


def load_scene_dir(path: str | Path) -> ViewScene:
    from .cameras import load_cameras

    path = Path(path)
    cam_file = path / "cameras.json"
    if not cam_file.exists():
        raise FileNotFoundError(f"missing camera file: {cam_file}")
    cams, _, _ = load_cameras(cam_file)
    views = []
    for i, cam in enumerate(cams):
        img = load_png(path / "images" / f"{i:03d}.png")
        msk = load_png(path / "masks" / f"{i:03d}.png")
        if msk.ndim == 3:
            msk = msk[..., 0]
        views.append(View(image=img, mask=msk > 0.5, camera=cam))
    return ViewScene(views)
