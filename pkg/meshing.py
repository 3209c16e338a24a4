"""Density grids, marching cubes, vertex colors, tiled stitching and mesh files."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import mcubes
import numpy as np
import trimesh
from tqdm import tqdm

import field as fld
from errors import MeshError
from renderer import sample_source, source_bounds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeshConfig:
    tau: float = 2.0
    res: int = 128
    chunk_size: int = 65536
    overlap: float = 0.5
    code_index: int = 0

    def validate(self) -> None:
        if not self.tau > 0:
            raise MeshError(f"Isovalue must be positive, got {self.tau}")
        if self.res < 2:
            raise MeshError(f"Grid resolution must be at least 2, got {self.res}")
        if not 0.0 <= self.overlap < 1.0:
            raise MeshError(f"Tile overlap must lie in [0, 1), got {self.overlap}")


# ============= Density grids =============
@dataclass
class DensityGrid:
    """sigma sampled at voxel centers: values[i, j, k] sits at lower + ((i, j, k) + 0.5) * spacing."""
    values: np.ndarray
    lower: np.ndarray
    spacing: float

    @property
    def shape(self):
        return self.values.shape

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.array(self.values.shape) * self.spacing

    def centers(self, axis: int) -> np.ndarray:
        return self.lower[axis] + (np.arange(self.values.shape[axis]) + 0.5) * self.spacing


def voxel_centers(lower: np.ndarray, spacing: float, res) -> np.ndarray:
    res = np.broadcast_to(np.asarray(res), (3,))
    axes = [lower[a] + (np.arange(res[a]) + 0.5) * spacing for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)


def eval_density_grid(source, w: np.ndarray, res: int, lower: Optional[np.ndarray] = None,
                      upper: Optional[np.ndarray] = None, chunk_size: int = 65536,
                      progress: bool = False) -> DensityGrid:
    """sigma at res^3 voxel centers spanning the field cube (or an explicit box)."""
    if res < 2:
        raise MeshError(f"Grid resolution must be at least 2, got {res}")
    b_lo, b_hi = source_bounds(source)
    lower = np.asarray(b_lo if lower is None else lower, np.float64)
    upper = np.asarray(b_hi if upper is None else upper, np.float64)
    sides = upper - lower
    if not np.allclose(sides, sides[0]):
        raise MeshError(f"Density grids need a cubic box, got sides {sides}")
    spacing = float(sides[0]) / res
    points = voxel_centers(lower, spacing, res)
    sigma = np.empty(points.shape[0])
    starts = range(0, points.shape[0], chunk_size)
    for start in tqdm(starts, desc="density grid", disable=not progress):
        stop = start + chunk_size
        sigma[start:stop] = sample_source(source, points[start:stop], w)[0]
    return DensityGrid(sigma.reshape(res, res, res), lower, spacing)


def save_density_grid(grid: DensityGrid, path: Union[str, Path]) -> None:
    """float32 .npy array plus a JSON sidecar with origin and spacing."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), grid.values.astype(np.float32))
    sidecar = {"lower": grid.lower.tolist(), "spacing": grid.spacing, "shape": list(grid.shape),
               "sample": "voxel-center"}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_density_grid(path: Union[str, Path]) -> DensityGrid:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = np.load(path.with_suffix(".npy")).astype(np.float64)
    return DensityGrid(values, np.asarray(meta["lower"], np.float64), float(meta["spacing"]))


# ============= Meshes =============
@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3)))

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    def to_trimesh(self) -> trimesh.Trimesh:
        colors = None
        if self.colors is not None and len(self.colors):
            colors = np.round(np.clip(self.colors, 0.0, 1.0) * 255).astype(np.uint8)
        return trimesh.Trimesh(self.vertices, self.faces, vertex_colors=colors, process=False)


def _signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def marching_cubes(grid: DensityGrid, tau: float = 2.0) -> Mesh:
    """Isosurface sigma = tau with outward (density-descending) orientation.

    The grid is padded by one voxel of zero density so surfaces touching the
    box close up.
    """
    if not tau > 0:
        raise MeshError(f"Isovalue must be positive, got {tau}")
    values = np.asarray(grid.values, np.float64)
    if values.max() < tau or values.min() >= tau:
        return Mesh.empty()
    padded = np.pad(values, 1, mode="constant", constant_values=0.0)
    verts, faces = mcubes.marching_cubes(padded, tau)
    if len(faces) == 0:
        return Mesh.empty()
    verts = grid.lower + (np.asarray(verts, np.float64) - 1.0 + 0.5) * grid.spacing
    faces = np.asarray(faces, np.int64)

    # weld coincident vertices
    key = np.round(verts / (grid.spacing * 1e-6)).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    verts = verts[first]
    faces = inverse.reshape(-1)[faces]

    v0, v1, v2 = (verts[faces[:, i]] for i in range(3))
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    faces = faces[area > 1e-12]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, np.int64)
    remap[used] = np.arange(len(used))
    verts, faces = verts[used], remap[faces]

    if _signed_volume(verts, faces) < 0:
        faces = faces[:, ::-1].copy()
    logger.debug("Marching cubes at tau=%.3f: %d vertices, %d faces", tau, len(verts), len(faces))
    return Mesh(verts, faces)


def colorize(mesh: Mesh, source, w: np.ndarray) -> Mesh:
    if mesh.is_empty:
        return Mesh(mesh.vertices, mesh.faces, np.zeros((len(mesh.vertices), 3)))
    _, rgb = sample_source(source, mesh.vertices, w)
    return Mesh(mesh.vertices, mesh.faces, np.clip(rgb, 0.0, 1.0))


def mesh_summary(mesh: Mesh) -> dict:
    """Topology report: watertightness, Euler characteristic, enclosed volume."""
    if mesh.is_empty:
        return {"vertices": 0, "faces": 0, "watertight": False, "euler": 0, "volume": 0.0}
    tm = mesh.to_trimesh()
    return {
        "vertices": int(len(mesh.vertices)),
        "faces": int(len(mesh.faces)),
        "watertight": bool(tm.is_watertight),
        "euler": int(tm.euler_number),
        "volume": float(_signed_volume(mesh.vertices, mesh.faces)),
    }


# ============= Tiled stitching =============
def stitch_grids(grids: Sequence[DensityGrid]) -> DensityGrid:
    """Average overlapping tile grids on their shared voxel lattice."""
    if not grids:
        raise MeshError("No tile grids to stitch")
    spacing = grids[0].spacing
    origin = np.min([g.lower for g in grids], axis=0)
    offsets = []
    for g in grids:
        if abs(g.spacing - spacing) > 1e-9 * spacing:
            raise MeshError(f"Tile spacings differ: {g.spacing} vs {spacing}")
        off = (g.lower - origin) / spacing
        if np.any(np.abs(off - np.round(off)) > 1e-6):
            raise MeshError(f"Tile at {g.lower} is off the shared lattice (spacing {spacing})")
        offsets.append(np.round(off).astype(np.int64))
    shape = np.max([o + np.array(g.shape) for o, g in zip(offsets, grids)], axis=0)
    total = np.zeros(shape)
    count = np.zeros(shape)
    for o, g in zip(offsets, grids):
        sl = tuple(slice(o[a], o[a] + g.shape[a]) for a in range(3))
        total[sl] += g.values
        count[sl] += 1.0
    values = np.where(count > 0, total / np.maximum(count, 1.0), 0.0)
    return DensityGrid(values, origin, spacing)


def stitch_tiles(tiles: Sequence[Sequence[fld.TriPlaneField]], res: int, code_index: int = 0,
                 overlap: float = 0.5, chunk_size: int = 65536, progress: bool = False) -> DensityGrid:
    """Merge a row-major lattice of fitted tiles; neighbours step by (1 - overlap) of the cube side."""
    if not tiles or not tiles[0]:
        raise MeshError("No tiles to stitch")
    first = tiles[0][0]
    ext0 = first.extent
    step = ext0.L_eff * (1.0 - overlap)
    grids = []
    for i, row in enumerate(tiles):
        if len(row) != len(tiles[0]):
            raise MeshError("Tile rows must have equal lengths")
        for j, tile in enumerate(row):
            ext = tile.extent
            if (ext.L, ext.H_t, ext.N, ext.z_floor) != (ext0.L, ext0.H_t, ext0.N, ext0.z_floor):
                raise MeshError(f"Tile ({i}, {j}) has an extent inconsistent with tile (0, 0)")
            expected = np.array(ext0.center) + np.array([j * step, i * step])
            if not np.allclose(ext.center, expected, atol=1e-6 * ext0.L_eff):
                raise MeshError(f"Tile ({i}, {j}) is centered at {ext.center}, expected {tuple(expected)}")
            grids.append(eval_density_grid(tile, tile.code(code_index), res, chunk_size=chunk_size,
                                           progress=progress))
    return stitch_grids(grids)


# ============= Files =============
_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
_PLY_FACE = np.dtype([("n", "u1"), ("v", "<i4", (3,))])


def _color_bytes(mesh: Mesh) -> np.ndarray:
    if mesh.colors is None or len(mesh.colors) != len(mesh.vertices):
        return np.full((len(mesh.vertices), 3), 255, np.uint8)
    return np.round(np.clip(mesh.colors, 0.0, 1.0) * 255).astype(np.uint8)


def export_mesh(mesh: Mesh, path: Union[str, Path], fmt: Optional[str] = None) -> None:
    """OBJ with ``v x y z r g b`` lines or binary little-endian PLY with uchar rgb."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    try:
        if fmt == "obj":
            colors = mesh.colors if mesh.colors is not None and len(mesh.colors) == len(mesh.vertices) \
                else np.ones((len(mesh.vertices), 3))
            with open(path, "w") as f:
                f.write("# scenekit mesh\n")
                for v, c in zip(mesh.vertices, colors):
                    f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n")
                for tri in mesh.faces + 1:
                    f.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")
        elif fmt == "ply":
            vertices = np.zeros(len(mesh.vertices), _PLY_VERTEX)
            for a, name in enumerate("xyz"):
                vertices[name] = mesh.vertices[:, a]
            rgb = _color_bytes(mesh)
            vertices["red"], vertices["green"], vertices["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
            faces = np.zeros(len(mesh.faces), _PLY_FACE)
            faces["n"] = 3
            faces["v"] = mesh.faces
            header = (
                "ply\nformat binary_little_endian 1.0\n"
                f"element vertex {len(vertices)}\n"
                "property float x\nproperty float y\nproperty float z\n"
                "property uchar red\nproperty uchar green\nproperty uchar blue\n"
                f"element face {len(faces)}\n"
                "property list uchar int vertex_indices\n"
                "end_header\n"
            )
            with open(path, "wb") as f:
                f.write(header.encode("ascii"))
                f.write(vertices.tobytes())
                f.write(faces.tobytes())
        else:
            raise MeshError(f"Unsupported mesh format '{fmt}' (use obj or ply)")
    except OSError as e:
        raise MeshError(f"Failed to write mesh {path}: {e}") from e
    logger.info("Wrote %s mesh %s (%d vertices, %d faces)", fmt.upper(), path, len(mesh.vertices), len(mesh.faces))


def read_mesh(path: Union[str, Path]) -> Mesh:
    """Re-parse a file written by export_mesh."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".obj":
            verts, colors, faces = [], [], []
            for line in path.read_text().splitlines():
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    values = [float(p) for p in parts[1:]]
                    verts.append(values[:3])
                    colors.append(values[3:6] if len(values) >= 6 else [1.0, 1.0, 1.0])
                elif parts[0] == "f":
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
            return Mesh(np.array(verts, np.float64).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3),
                        np.array(colors, np.float64).reshape(-1, 3))
        data = path.read_bytes()
        end = data.index(b"end_header\n") + len(b"end_header\n")
        header = data[:end].decode("ascii").splitlines()
        if "format binary_little_endian 1.0" not in header:
            raise MeshError(f"{path}: only binary little-endian PLY is supported")
        counts = {line.split()[1]: int(line.split()[2]) for line in header if line.startswith("element")}
        n_v, n_f = counts.get("vertex", 0), counts.get("face", 0)
        vertices = np.frombuffer(data, _PLY_VERTEX, count=n_v, offset=end)
        faces = np.frombuffer(data, _PLY_FACE, count=n_f, offset=end + n_v * _PLY_VERTEX.itemsize)
        xyz = np.stack([vertices[a] for a in "xyz"], axis=-1).astype(np.float64)
        rgb = np.stack([vertices[c] for c in ("red", "green", "blue")], axis=-1).astype(np.float64) / 255.0
        return Mesh(xyz.reshape(-1, 3), faces["v"].astype(np.int64).reshape(-1, 3), rgb.reshape(-1, 3))
    except (OSError, ValueError) as e:
        raise MeshError(f"Failed to read mesh {path}: {e}") from e
