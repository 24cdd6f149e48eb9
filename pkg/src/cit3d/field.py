"""Dense voxel radiance field with differentiable volume rendering.

The field stores pre-activation grids; densities go through softplus and
albedo through sigmoid, so the physical constraints (density >= 0, albedo
in [0,1]) hold by construction. Rendering composites either albedo colors
or encoded density-gradient normals along stratified ray samples.

Rendering and its backward pass are pure per-ray computations. A VoxelField
may be read concurrently, but never written while a render is in flight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from .util import generator

_NORMAL_GRAD_EPS = 1e-8


class ShadingMode(str, Enum):
    ALBEDO = "albedo"
    NORMAL = "normal"


@dataclass
class VoxelField:
    """Optimizable density + albedo grids over an axis-aligned box.

    density_raw: (nx, ny, nz) pre-activation densities (softplus applied).
    albedo_raw:  (nx, ny, nz, 3) pre-activation colors (sigmoid applied).
    bbox_min / bbox_max: world-space box corners; grid nodes span the box
    inclusively, node (i, j, k) at bbox_min + (i, j, k) * voxel_size.
    """

    density_raw: torch.Tensor
    albedo_raw: torch.Tensor
    bbox_min: torch.Tensor
    bbox_max: torch.Tensor

    def __post_init__(self):
        self.bbox_min = torch.as_tensor(self.bbox_min, dtype=self.density_raw.dtype)
        self.bbox_max = torch.as_tensor(self.bbox_max, dtype=self.density_raw.dtype)
        if self.density_raw.ndim != 3:
            raise ValueError("density_raw must be a 3D grid")
        if self.albedo_raw.shape != self.density_raw.shape + (3,):
            raise ValueError("albedo_raw must be density grid shape + (3,)")
        if any(n < 2 for n in self.density_raw.shape):
            raise ValueError("grid needs at least 2 nodes per axis")
        if not torch.all(self.bbox_max > self.bbox_min):
            raise ValueError("bbox must have strictly positive extent on all axes")

    @classmethod
    def empty(cls, resolution, bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0),
              density_raw_init: float = -120.0, dtype=torch.float32) -> "VoxelField":
        # softplus(-120) underflows to exactly zero density
        if isinstance(resolution, int):
            resolution = (resolution,) * 3
        nx, ny, nz = resolution
        return cls(
            density_raw=torch.full((nx, ny, nz), density_raw_init, dtype=dtype),
            albedo_raw=torch.zeros((nx, ny, nz, 3), dtype=dtype),
            bbox_min=torch.tensor(bbox_min, dtype=dtype),
            bbox_max=torch.tensor(bbox_max, dtype=dtype),
        )

    @classmethod
    def from_activated(cls, density: torch.Tensor, albedo: torch.Tensor,
                       bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0)) -> "VoxelField":
        """Build a field whose activated grids equal the given values."""
        density = torch.as_tensor(density)
        albedo = torch.as_tensor(albedo)
        d = density.clamp_min(1e-12).double()
        density_raw = torch.where(
            d > 30.0, d, torch.log(torch.expm1(d.clamp(max=30.0)))
        ).to(density.dtype)
        a = albedo.double().clamp(1e-7, 1.0 - 1e-7)
        albedo_raw = torch.log(a / (1.0 - a)).to(density.dtype)
        return cls(density_raw, albedo_raw, torch.as_tensor(bbox_min, dtype=density.dtype),
                   torch.as_tensor(bbox_max, dtype=density.dtype))

    @property
    def resolution(self):
        return tuple(self.density_raw.shape)

    @property
    def dtype(self):
        return self.density_raw.dtype

    def voxel_size(self) -> torch.Tensor:
        res = torch.tensor([n - 1 for n in self.resolution], dtype=self.dtype)
        return (self.bbox_max - self.bbox_min) / res

    def density(self) -> torch.Tensor:
        return F.softplus(self.density_raw)

    def albedo(self) -> torch.Tensor:
        return torch.sigmoid(self.albedo_raw)

    def parameters(self):
        return [self.density_raw, self.albedo_raw]

    def clone(self) -> "VoxelField":
        return VoxelField(self.density_raw.detach().clone(), self.albedo_raw.detach().clone(),
                          self.bbox_min.clone(), self.bbox_max.clone())


@dataclass
class CameraPose:
    """Orbit camera: right-handed, y-up, looking at a fixed target point.

    Azimuth 0 puts the camera on the +z axis; positive azimuth rotates
    toward +x. Pixel (i, j) rays pass through the pixel center.
    """

    azimuth: float
    elevation: float
    radius: float
    fov_y: float
    width: int
    height: int
    target: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if not (0.0 < self.fov_y < math.pi):
            raise ValueError("fov_y must be in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")

    def position(self) -> torch.Tensor:
        ca, sa = math.cos(self.azimuth), math.sin(self.azimuth)
        ce, se = math.cos(self.elevation), math.sin(self.elevation)
        offs = torch.tensor([sa * ce, se, ca * ce], dtype=torch.float64)
        return torch.as_tensor(self.target, dtype=torch.float64) + self.radius * offs

    def basis(self):
        """(right, up, forward) unit vectors; forward points at the target."""
        pos = self.position()
        fwd = torch.as_tensor(self.target, dtype=torch.float64) - pos
        fwd = fwd / torch.linalg.norm(fwd)
        world_up = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        right = torch.linalg.cross(fwd, world_up)
        nr = torch.linalg.norm(right)
        if nr < 1e-9:
            raise ValueError("camera axis parallel to world up (elevation at pole)")
        right = right / nr
        up = torch.linalg.cross(right, fwd)
        return right, up, fwd

    def extrinsics(self):
        """World-to-camera rotation R (3x3) and translation T (camera looks down -z)."""
        right, up, fwd = self.basis()
        R = torch.stack([right, up, -fwd], dim=0)
        T = -R @ self.position()
        return R, T

    def focal_px(self) -> float:
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    def rays(self, dtype=torch.float32):
        """Per-pixel ray origins (3,) and unit directions (H, W, 3)."""
        right, up, fwd = self.basis()
        f = self.focal_px()
        i = torch.arange(self.width, dtype=torch.float64) + 0.5 - 0.5 * self.width
        j = torch.arange(self.height, dtype=torch.float64) + 0.5 - 0.5 * self.height
        jj, ii = torch.meshgrid(j, i, indexing="ij")
        d = (ii / f)[..., None] * right + (-jj / f)[..., None] * up + fwd
        d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
        return self.position().to(dtype), d.to(dtype)

    def project(self, points: torch.Tensor):
        """Project world points to continuous pixel coords and camera depth.

        Returns (u, v, depth): u along width, v along height, both pixel-center
        indexed (integer coordinates hit pixel centers); depth is the distance
        along the optical axis (positive in front of the camera).
        """
        right, up, fwd = self.basis()
        q = points.double() - self.position()
        x = q @ right
        y = q @ up
        z = q @ fwd
        f = self.focal_px()
        safe_z = torch.where(z.abs() < 1e-12, torch.full_like(z, 1e-12), z)
        u = f * (x / safe_z) + 0.5 * self.width - 0.5
        v = -f * (y / safe_z) + 0.5 * self.height - 0.5
        return u, v, z


@dataclass
class RenderedView:
    """One render: rgb/depth/mask/normal buffers plus the request that made it."""

    rgb: torch.Tensor      # (H, W, 3) in [0, 1]
    depth: torch.Tensor    # (H, W) expected ray distance, 0 on empty rays
    mask: torch.Tensor     # (H, W) accumulated opacity in [0, 1]
    normal: torch.Tensor   # (H, W, 3) unit vectors, zero where mask ~ 0
    camera: CameraPose = None
    mode: ShadingMode = ShadingMode.ALBEDO
    seed: int = 0
    n_samples: int = 64
    aux: dict = dc_field(default_factory=dict)


def sample_field(field: VoxelField, point) -> tuple:
    """Trilinear interpolation of activated grid values at a world point.

    Outside the bbox the field is defined as zero density and zero albedo.
    Returns (density scalar tensor, albedo (3,) tensor).
    """
    p = torch.as_tensor(point, dtype=field.dtype).reshape(1, 3)
    density, albedo, inside = _interp(field, p, want_albedo=True)
    return density[0], albedo[0]


def field_normal(field: VoxelField, point) -> torch.Tensor:
    """Surface normal at a point: -grad(density) via central differences.

    Step is one voxel per axis. Returns the zero vector when the gradient
    magnitude is below 1e-8 (no surface to speak of).
    """
    p = torch.as_tensor(point, dtype=field.dtype).reshape(1, 3)
    n = _normals(field, p)
    return n[0]


# ---------------------------------------------------------------------------
# interpolation internals

def _grid_coords(field: VoxelField, points: torch.Tensor):
    nx, ny, nz = field.resolution
    res = torch.tensor([nx - 1, ny - 1, nz - 1], dtype=points.dtype)
    span = (field.bbox_max - field.bbox_min).to(points.dtype)
    u = (points - field.bbox_min.to(points.dtype)) / span * res
    inside = ((points >= field.bbox_min.to(points.dtype)) &
              (points <= field.bbox_max.to(points.dtype))).all(dim=-1)
    return u, inside


def _interp(field: VoxelField, points: torch.Tensor, want_albedo: bool,
            density_grid: torch.Tensor = None, albedo_grid: torch.Tensor = None):
    """Trilinear interpolation at (S, 3) world points -> density (S,), albedo (S, 3)."""
    nx, ny, nz = field.resolution
    if density_grid is None:
        density_grid = field.density()
    u, inside = _grid_coords(field, points)
    u = u.clamp(min=torch.zeros(3, dtype=u.dtype),
                max=torch.tensor([nx - 1, ny - 1, nz - 1], dtype=u.dtype))
    i0 = u.floor().long()
    i0 = torch.minimum(i0, torch.tensor([nx - 2, ny - 2, nz - 2]))
    f = u - i0.to(u.dtype)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    stride_x, stride_y, stride_z = ny * nz, nz, 1
    w000 = (1 - fx) * (1 - fy) * (1 - fz)
    w001 = (1 - fx) * (1 - fy) * fz
    w010 = (1 - fx) * fy * (1 - fz)
    w011 = (1 - fx) * fy * fz
    w100 = fx * (1 - fy) * (1 - fz)
    w101 = fx * (1 - fy) * fz
    w110 = fx * fy * (1 - fz)
    w111 = fx * fy * fz
    corners = (
        (base, w000), (base + stride_z, w001),
        (base + stride_y, w010), (base + stride_y + stride_z, w011),
        (base + stride_x, w100), (base + stride_x + stride_z, w101),
        (base + stride_x + stride_y, w110), (base + stride_x + stride_y + stride_z, w111),
    )

    dflat = density_grid.reshape(-1)
    density = torch.zeros_like(fx)
    for idx, w in corners:
        density = density + w * dflat[idx]
    density = density * inside.to(density.dtype)

    albedo = None
    if want_albedo:
        if albedo_grid is None:
            albedo_grid = field.albedo()
        aflat = albedo_grid.reshape(-1, 3)
        albedo = torch.zeros(points.shape[0], 3, dtype=density.dtype)
        for idx, w in corners:
            albedo = albedo + w[:, None] * aflat[idx]
        albedo = albedo * inside.to(albedo.dtype)[:, None]
    return density, albedo, inside


def _normals(field: VoxelField, points: torch.Tensor,
             density_grid: torch.Tensor = None) -> torch.Tensor:
    """-grad(density)/|grad| at (S, 3) points, zero where the gradient vanishes."""
    if density_grid is None:
        density_grid = field.density()
    h = field.voxel_size().to(points.dtype)
    grads = []
    for ax in range(3):
        step = torch.zeros(3, dtype=points.dtype)
        step[ax] = h[ax]
        dp, _, _ = _interp(field, points + step, want_albedo=False, density_grid=density_grid)
        dm, _, _ = _interp(field, points - step, want_albedo=False, density_grid=density_grid)
        grads.append((dp - dm) / (2.0 * h[ax]))
    g = torch.stack(grads, dim=-1)
    mag = torch.linalg.norm(g, dim=-1, keepdim=True)
    n = -g / mag.clamp_min(_NORMAL_GRAD_EPS)
    return n * (mag >= _NORMAL_GRAD_EPS).to(n.dtype)


def _ray_box(origin: torch.Tensor, dirs: torch.Tensor, bmin: torch.Tensor, bmax: torch.Tensor):
    """Slab intersection. Returns (t_near, t_far, hit) for rays from a shared origin."""
    inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t0 = (bmin - origin) * inv
    t1 = (bmax - origin) * inv
    tmin = torch.minimum(t0, t1).amax(dim=-1)
    tmax = torch.maximum(t0, t1).amin(dim=-1)
    tmin = tmin.clamp_min(0.0)
    hit = tmax > tmin
    return tmin, tmax, hit


try:
    from . import fastpath as _fast
except ImportError:  # numba unavailable: torch path covers everything
    _fast = None


def _resolve_engine(engine: str, track_grad: bool) -> str:
    if engine == "auto":
        return "torch" if (track_grad or _fast is None) else "numba"
    if engine == "numba":
        if _fast is None:
            raise RuntimeError("numba engine requested but numba is not importable")
        if track_grad:
            raise ValueError("track_grad requires the torch engine")
    return engine


def _ray_setup(field: VoxelField, camera: CameraPose, n_samples: int, seed: int):
    """Shared ray/jitter setup so both engines see identical sample positions."""
    dtype = field.dtype
    origin, dirs = camera.rays(dtype=dtype)
    dirs_flat = dirs.reshape(-1, 3)
    bmin = field.bbox_min.to(dtype)
    bmax = field.bbox_max.to(dtype)
    tmin, tmax, hit = _ray_box(origin, dirs_flat, bmin, bmax)
    span = (tmax - tmin).clamp_min(0.0) * hit.to(dtype)
    delta = span / n_samples
    g = generator(seed)
    jitter = torch.rand(dirs_flat.shape[0], n_samples, generator=g, dtype=dtype)
    return origin, dirs_flat, tmin, delta, jitter, hit, bmin, bmax


def render_view(field: VoxelField, camera: CameraPose, mode: ShadingMode, *,
                n_samples: int = 64, seed: int = 0, background: float = 1.0,
                track_grad: bool = False, return_weights: bool = False,
                compute_normals: bool = True, engine: str = "auto") -> RenderedView:
    """Volume-render the field from a camera in the given shading mode.

    Per ray: n_samples stratified samples between bbox entry and exit;
    alpha_i = 1 - exp(-sigma_i * delta_i) with delta_i the bin width;
    weights w_i = alpha_i * prod_{j<i}(1 - alpha_j). The composited color is
    albedo (ALBEDO mode) or (normal + 1)/2 (NORMAL mode), over a constant
    background. Rays that miss the bbox produce background pixels.

    The stratified jitter is a pure function of `seed`, so a forward/backward
    pair rendered with the same seed sees identical sample positions. The
    numba engine runs the same compositing expression as the torch engine;
    track_grad (an autograd graph over the render) implies torch.
    """
    mode = ShadingMode(mode)
    eng = _resolve_engine(engine, track_grad)
    if eng == "numba":
        return _render_numba(field, camera, mode, n_samples, seed, background,
                             return_weights, compute_normals)
    ctx = torch.enable_grad() if track_grad else torch.no_grad()
    with ctx:
        out = _render_impl(field, camera, mode, n_samples, seed, background,
                           return_weights, compute_normals)
    return out


def _np_dtype(dtype):
    return torch.empty(0, dtype=dtype).numpy().dtype


def _render_numba(field, camera, mode, n_samples, seed, background,
                  return_weights, compute_normals):
    dtype = field.dtype
    H, W = camera.height, camera.width
    origin, dirs_flat, tmin, delta, jitter, hit, bmin, bmax = _ray_setup(
        field, camera, n_samples, seed)
    n_rays = dirs_flat.shape[0]
    nd = _np_dtype(dtype)

    with torch.no_grad():
        D = field.density().numpy()
        A = (field.albedo().numpy() if mode is ShadingMode.ALBEDO
             else np.zeros((1, 1, 1, 3), dtype=nd))
    res = torch.tensor([n - 1 for n in field.resolution], dtype=dtype)
    inv_vox = (res / (bmax - bmin)).numpy()
    h = ((bmax - bmin) / res).numpy()
    bg = np.broadcast_to(np.asarray(background, dtype=nd), (3,)).astype(nd)

    rgb = np.empty((n_rays, 3), dtype=nd)
    dep = np.empty(n_rays, dtype=nd)
    msk = np.empty(n_rays, dtype=nd)
    want_w = bool(return_weights or compute_normals)
    weights = np.zeros((n_rays, n_samples), dtype=nd) if want_w else np.zeros((1, 1), dtype=nd)
    _fast.forward_kernel(D, A, mode is ShadingMode.ALBEDO,
                         origin.numpy(), dirs_flat.numpy(), tmin.numpy(), delta.numpy(),
                         jitter.numpy(), bg, bmin.numpy(), bmax.numpy(), inv_vox, h,
                         want_w, rgb, dep, msk, weights)

    rgb_t = torch.from_numpy(rgb)
    mask_t = torch.from_numpy(msk)
    if compute_normals:
        with torch.no_grad():
            scale = 2.0 / (bmax - bmin)
            o_n = ((origin - bmin) * scale - 1.0).flip(0)
            d_n = dirs_flat.flip(1) * scale.flip(0)
            steps = torch.arange(n_samples, dtype=dtype)[None, :] + jitter
            t = tmin[:, None] + steps * delta[:, None]
            grid = (o_n + d_n[:, None, :] * t[..., None]).reshape(-1, 3)
            voxel = field.voxel_size().to(dtype)
            normals = _normals_grid(field.density(), grid, voxel, scale
                                    ).reshape(n_rays, n_samples, 3)
            w_t = torch.from_numpy(weights)
            nacc = torch.einsum("rn,rnc->rc", w_t, normals)
            nmag = torch.linalg.norm(nacc, dim=-1, keepdim=True)
            good = (nmag[:, 0] > 1e-6) & (mask_t > 1e-4)
            normal_buf = (nacc / nmag.clamp_min(1e-6)) * good.to(dtype)[:, None]
    else:
        normal_buf = torch.zeros(n_rays, 3, dtype=dtype)

    aux = {}
    if return_weights:
        aux["weights"] = torch.from_numpy(weights).reshape(H, W, n_samples)
    return RenderedView(
        rgb=rgb_t.reshape(H, W, 3),
        depth=torch.from_numpy(dep).reshape(H, W),
        mask=mask_t.reshape(H, W),
        normal=normal_buf.reshape(H, W, 3),
        camera=camera, mode=mode, seed=seed, n_samples=n_samples, aux=aux,
    )


def _render_impl(field, camera, mode, n_samples, seed, background, return_weights,
                 compute_normals):
    dtype = field.dtype
    H, W = camera.height, camera.width
    origin, dirs = camera.rays(dtype=dtype)
    dirs_flat = dirs.reshape(-1, 3)
    n_rays = dirs_flat.shape[0]

    bmin = field.bbox_min.to(dtype)
    bmax = field.bbox_max.to(dtype)
    tmin, tmax, hit = _ray_box(origin, dirs_flat, bmin, bmax)
    hit_f = hit.to(dtype)
    span = (tmax - tmin).clamp_min(0.0) * hit_f
    delta = span / n_samples

    g = generator(seed)
    jitter = torch.rand(n_rays, n_samples, generator=g, dtype=dtype)
    steps = torch.arange(n_samples, dtype=dtype)[None, :] + jitter
    t = tmin[:, None] + steps * delta[:, None]

    # grid_sample coordinates directly: normalized [-1, 1] per axis with the
    # component order reversed (the last grid coord indexes the first volume
    # dim); samples lie inside the box by construction, miss rays are masked.
    scale = 2.0 / (bmax - bmin)
    o_n = ((origin - bmin) * scale - 1.0).flip(0)
    d_n = dirs_flat.flip(1) * scale.flip(0)
    grid = (o_n + d_n[:, None, :] * t[..., None]).view(1, -1, 1, 1, 3)

    density_grid = field.density()
    if mode is ShadingMode.ALBEDO:
        vol = torch.cat([density_grid.unsqueeze(0),
                         field.albedo().permute(3, 0, 1, 2)], dim=0)
    else:
        vol = density_grid.unsqueeze(0)
    samples = F.grid_sample(vol.unsqueeze(0), grid, mode="bilinear",
                            padding_mode="border", align_corners=True)
    samples = samples.view(vol.shape[0], n_rays, n_samples)
    sigma = samples[0] * hit_f[:, None]

    alpha = 1.0 - torch.exp(-sigma * delta[:, None])
    trans = torch.cumprod(
        torch.cat([torch.ones(n_rays, 1, dtype=dtype), 1.0 - alpha[:, :-1]], dim=1), dim=1)
    weights = alpha * trans

    mask = weights.sum(dim=1)
    depth = (weights * t).sum(dim=1) / mask.clamp_min(1e-6)

    bg = torch.as_tensor(background, dtype=dtype)
    voxel = field.voxel_size().to(dtype)
    if mode is ShadingMode.ALBEDO:
        color = samples[1:4].permute(1, 2, 0)
        normals = None
    else:
        normals = _normals_grid(density_grid, grid.view(-1, 3), voxel, scale
                                ).reshape(n_rays, n_samples, 3)
        color = 0.5 * (normals + 1.0)
    rgb = torch.einsum("rn,rnc->rc", weights, color) + (1.0 - mask)[:, None] * bg

    if normals is None and compute_normals:
        with torch.no_grad():
            normals = _normals_grid(density_grid.detach(), grid.view(-1, 3), voxel,
                                    scale).reshape(n_rays, n_samples, 3)
    if compute_normals:
        with torch.no_grad():
            nacc = torch.einsum("rn,rnc->rc", weights.detach(), normals.detach())
            nmag = torch.linalg.norm(nacc, dim=-1, keepdim=True)
            good = (nmag[:, 0] > 1e-6) & (mask.detach() > 1e-4)
            normal_buf = (nacc / nmag.clamp_min(1e-6)) * good.to(dtype)[:, None]
    else:
        normal_buf = torch.zeros(n_rays, 3, dtype=dtype)

    aux = {}
    if return_weights:
        aux["weights"] = weights.detach().reshape(H, W, n_samples)
    return RenderedView(
        rgb=rgb.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        mask=mask.reshape(H, W),
        normal=normal_buf.reshape(H, W, 3),
        camera=camera, mode=mode, seed=seed, n_samples=n_samples, aux=aux,
    )


def _normals_grid(density_grid: torch.Tensor, grid_coords: torch.Tensor,
                  voxel: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Central-difference normals at sample points given in reversed normalized
    coordinates; one batched grid_sample over all 6 probe sets."""
    dtype = density_grid.dtype
    s = grid_coords.shape[0]
    # one-voxel world step per axis = 2/(n-1) in normalized units; the grid
    # coord order is reversed, so world axis k maps to component 2-k.
    offsets = torch.zeros(6, 3, dtype=dtype)
    norm_step = voxel * scale
    for ax in range(3):
        offsets[2 * ax, 2 - ax] = norm_step[ax]
        offsets[2 * ax + 1, 2 - ax] = -norm_step[ax]
    probes = grid_coords.unsqueeze(0) + offsets.view(6, 1, 3)
    # out-of-box probes (including all samples of miss rays) read as zero
    inside = (probes.abs() <= 1.0).all(dim=-1)
    d = F.grid_sample(density_grid[None, None], probes.view(1, -1, 1, 1, 3),
                      mode="bilinear", padding_mode="border", align_corners=True)
    d = d.view(6, s) * inside.to(dtype)
    g = torch.stack([(d[0] - d[1]) / (2.0 * voxel[0]),
                     (d[2] - d[3]) / (2.0 * voxel[1]),
                     (d[4] - d[5]) / (2.0 * voxel[2])], dim=-1)
    mag = torch.linalg.norm(g, dim=-1, keepdim=True)
    n = -g / mag.clamp_min(_NORMAL_GRAD_EPS)
    return n * (mag >= _NORMAL_GRAD_EPS).to(n.dtype)


def render_backward(field: VoxelField, camera: CameraPose, mode: ShadingMode,
                    upstream: torch.Tensor, *, n_samples: int = 64, seed: int = 0,
                    background: float = 1.0) -> dict:
    """Exact reverse-mode gradient of render_view's rgb against the field grids.

    `upstream` is d(loss)/d(rgb) with shape (H, W, 3); the render is replayed
    with the same seed so sample positions match the paired forward call.
    Returns {"density_raw": grad, "albedo_raw": grad}; in NORMAL mode the
    albedo gradient is identically zero (albedo never enters the image).
    """
    mode = ShadingMode(mode)
    upstream = torch.as_tensor(upstream, dtype=field.dtype)
    if upstream.shape != (camera.height, camera.width, 3):
        raise ValueError(
            f"upstream shape {tuple(upstream.shape)} does not match render "
            f"{(camera.height, camera.width, 3)}")
    density_leaf = field.density_raw.detach().requires_grad_(True)
    albedo_leaf = field.albedo_raw.detach().requires_grad_(True)
    shadow = VoxelField(density_leaf, albedo_leaf, field.bbox_min, field.bbox_max)
    view = render_view(shadow, camera, mode, n_samples=n_samples, seed=seed,
                       background=background, track_grad=True)
    loss = (view.rgb * upstream).sum()
    gd, ga = torch.autograd.grad(loss, [density_leaf, albedo_leaf], allow_unused=True)
    if gd is None:
        gd = torch.zeros_like(density_leaf)
    if ga is None:
        ga = torch.zeros_like(albedo_leaf)
    return {"density_raw": gd.detach(), "albedo_raw": ga.detach()}
