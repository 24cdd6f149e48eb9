"""Binary and image file formats for pipeline artifacts.

All multi-byte values are little-endian. Formats:

* Field checkpoint, magic "CIT3D01\\0": u32 (nx, ny, nz), f32 pre-activation
  density (x-fastest), f32 pre-activation albedo (rgb interleaved, x-fastest),
  6 f32 bbox bounds (min xyz, max xyz). Optional tagged sections follow:
  8-byte ASCII tag, u64 payload length, payload bytes.
* Depth raster, magic "CITD": u32 width, u32 height, 4 pad bytes, then
  f32 row-major data.
* Point clouds: binary_little_endian PLY; meshes: ASCII OBJ (v/f only).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .field import VoxelField

CHECKPOINT_MAGIC = b"CIT3D01\x00"
DEPTH_MAGIC = b"CITD"
RENDERER_TAG = b"DEFREND\x00"


# ---------------------------------------------------------------------------
# checkpoint container

def _grid_to_xfastest(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy().astype("<f4")
    if a.ndim == 3:
        return np.ascontiguousarray(a.transpose(2, 1, 0))
    return np.ascontiguousarray(a.transpose(2, 1, 0, 3))


def _grid_from_xfastest(a: np.ndarray) -> torch.Tensor:
    if a.ndim == 3:
        return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 1, 0)))
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 1, 0, 3)))


def save_field(path, field: VoxelField, sections: dict | None = None) -> None:
    nx, ny, nz = field.resolution
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<3I", nx, ny, nz))
        fh.write(_grid_to_xfastest(field.density_raw).tobytes())
        fh.write(_grid_to_xfastest(field.albedo_raw).tobytes())
        bounds = [*field.bbox_min.tolist(), *field.bbox_max.tolist()]
        fh.write(struct.pack("<6f", *bounds))
        for tag, payload in (sections or {}).items():
            tag_bytes = tag if isinstance(tag, bytes) else tag.encode()
            if len(tag_bytes) != 8:
                raise ValueError("section tag must be exactly 8 bytes")
            fh.write(tag_bytes)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_field(path):
    """Read a checkpoint. Returns (VoxelField, {tag: payload bytes})."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        nx, ny, nz = struct.unpack("<3I", fh.read(12))
        n = nx * ny * nz
        dens = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(nz, ny, nx)
        alb = np.frombuffer(fh.read(12 * n), dtype="<f4").reshape(nz, ny, nx, 3)
        bounds = struct.unpack("<6f", fh.read(24))
        sections = {}
        while True:
            tag = fh.read(8)
            if not tag:
                break
            if len(tag) != 8:
                raise ValueError(f"truncated section tag in {path}")
            (length,) = struct.unpack("<Q", fh.read(8))
            sections[tag] = fh.read(length)
    fld = VoxelField(
        density_raw=_grid_from_xfastest(dens.copy()),
        albedo_raw=_grid_from_xfastest(alb.copy()),
        bbox_min=torch.tensor(bounds[:3], dtype=torch.float32),
        bbox_max=torch.tensor(bounds[3:], dtype=torch.float32),
    )
    return fld, sections


def pack_tensors(tensors) -> bytes:
    """Serialize a list of float tensors: u32 count, then per tensor u32 rank,
    u32 dims, f32 data."""
    out = [struct.pack("<I", len(tensors))]
    for t in tensors:
        a = t.detach().cpu().numpy().astype("<f4")
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def unpack_tensors(payload: bytes):
    off = 0
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    tensors = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", payload, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", payload, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors.append(torch.from_numpy(arr.copy()))
    return tensors


# ---------------------------------------------------------------------------
# meshes and point clouds

def save_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for f in np.asarray(faces, dtype=np.int64):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def _ply_header(count: int, props) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    lines += [f"property {t} {n}" for t, n in props]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


_PLY_DTYPES = {"float": "<f4", "uchar": "u1", "int": "<i4"}


def save_ply(path, columns) -> None:
    """Write a binary PLY. `columns` is a list of (ply_type, name, array)."""
    count = len(columns[0][2])
    rec = np.dtype([(name, _PLY_DTYPES[t]) for t, name, _ in columns])
    data = np.empty(count, dtype=rec)
    for t, name, arr in columns:
        data[name] = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(_ply_header(count, [(t, n) for t, n, _ in columns]))
        fh.write(data.tobytes())


def load_ply(path):
    """Read a binary PLY written by save_ply. Returns {name: array}."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    count = None
    props = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            props.append((parts[1], parts[2]))
    rec = np.dtype([(name, _PLY_DTYPES[t]) for t, name in props])
    data = np.frombuffer(raw, dtype=rec, count=count, offset=end)
    return {name: data[name].copy() for _, name in props}


def save_cloud_xyz(path, positions: np.ndarray) -> None:
    p = np.asarray(positions, dtype=np.float32)
    save_ply(path, [("float", "x", p[:, 0]), ("float", "y", p[:, 1]), ("float", "z", p[:, 2])])


# ---------------------------------------------------------------------------
# images

def save_png(path, image) -> None:
    """8-bit PNG; accepts (H, W) or (H, W, 3) float in [0,1] or uint8."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path, as_float: bool = True) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if as_float:
        return arr.astype(np.float32) / 255.0
    return arr


def save_depth_raw(path, depth) -> None:
    arr = depth.detach().cpu().numpy() if isinstance(depth, torch.Tensor) else np.asarray(depth)
    arr = arr.astype("<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<2I", w, h))
        fh.write(b"\x00" * 4)
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_depth_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DEPTH_MAGIC:
            raise ValueError(f"bad depth magic in {path}")
        w, h = struct.unpack("<2I", fh.read(8))
        fh.read(4)
        data = np.frombuffer(fh.read(4 * w * h), dtype="<f4").reshape(h, w)
    return data.copy()


def require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing {what}: {p}")
    return p
