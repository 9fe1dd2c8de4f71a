"""Density grids and marching-cubes isosurfaces.

Corner and edge numbering follow the usual marching-cubes tables: corners
0..7 are (0,0,0) (1,0,0) (1,1,0) (0,1,0) (0,0,1) (1,0,1) (1,1,1) (0,1,1),
and a case index has bit ``c`` set when corner ``c`` lies *below* the level.
Triangles are wound so their normals point toward the lower values, which
for a density field means out of the dense region.

The triangle table is derived rather than transcribed: on every cube face
the level-set crossings are joined into segments (on faces with two
diagonal corners below the level, each below corner is cut off on its own),
the segments are chained into closed loops, and each loop is fanned into
triangles. Because a face's segments depend only on that face's corners,
neighbouring cells always agree and the mesh has no cracks.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, InputDomainError

CORNERS = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)])
EDGES = ((0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
         (0, 4), (1, 5), (2, 6), (3, 7))
FACES = ((0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (3, 2, 6, 7), (0, 3, 7, 4), (1, 2, 6, 5))
_EDGE_ID = {frozenset(e): i for i, e in enumerate(EDGES)}


def _case_loops(case: int):
    below = [(case >> c) & 1 for c in range(8)]
    links = {}
    for face in FACES:
        ring = [(face[k], face[(k + 1) % 4]) for k in range(4)]
        crossed = [k for k, (a, b) in enumerate(ring) if below[a] != below[b]]
        if len(crossed) == 2:
            segs = [tuple(crossed)]
        elif len(crossed) == 4:
            # ring edge k joins corners face[k] and face[k+1]; cut off each below corner
            start = 1 if below[face[1]] else 0
            segs = [((start - 1) % 4, start), (start + 1, (start + 2) % 4)]
        else:
            segs = []
        for ka, kb in segs:
            ea, eb = _EDGE_ID[frozenset(ring[ka])], _EDGE_ID[frozenset(ring[kb])]
            links.setdefault(ea, []).append(eb)
            links.setdefault(eb, []).append(ea)
    loops, seen = [], set()
    for e0 in sorted(links):
        if e0 in seen:
            continue
        loop, prev, cur = [e0], None, e0
        seen.add(e0)
        while True:
            nxt = [e for e in links[cur] if e != prev]
            nxt = nxt[0] if nxt else links[cur][0]
            if nxt == e0:
                break
            loop.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        loops.append(loop)
    return loops, below


def _orient(loop, below):
    """Reverse ``loop`` if needed so its normal points toward the below-level corners."""
    mids = np.array([(CORNERS[EDGES[e][0]] + CORNERS[EDGES[e][1]]) / 2.0 for e in loop])
    normal = np.zeros(3)
    for i in range(len(mids)):
        normal += np.cross(mids[i], mids[(i + 1) % len(mids)])
    toward = np.zeros(3)
    for e in loop:
        a, b = EDGES[e]
        lo, hi = (a, b) if below[a] else (b, a)
        toward += CORNERS[lo] - CORNERS[hi]
    return loop if normal @ toward > 0 else loop[::-1]


_EDGE_FACES = [frozenset(i for i, f in enumerate(FACES) if a in f and b in f) for a, b in EDGES]


def _fan_apex(loop) -> int:
    """First loop position whose fan diagonals never join two crossings on one cube face.

    Such a diagonal would lie in the shared face and could coincide with the
    neighbouring cube's diagonal, giving an edge used by four triangles.
    """
    n = len(loop)
    for r in range(n):
        if not any(_EDGE_FACES[loop[r]] & _EDGE_FACES[loop[(r + i) % n]] for i in range(2, n - 1)):
            return r
    raise RuntimeError(f"no admissible fan apex for loop {loop}")


def build_triangle_table() -> np.ndarray:
    """``(256, 5, 3)`` edge indices per case, padded with -1."""
    table = -np.ones((256, 5, 3), dtype=np.int64)
    for case in range(256):
        loops, below = _case_loops(case)
        tris = []
        for loop in loops:
            loop = _orient(loop, below)
            r = _fan_apex(loop)
            loop = loop[r:] + loop[:r]
            tris += [(loop[0], loop[i], loop[i + 1]) for i in range(1, len(loop) - 1)]
        if len(tris) > 5:
            raise RuntimeError(f"case {case} produced {len(tris)} triangles")
        for i, t in enumerate(tris):
            table[case, i] = t
    return table


TRIANGLE_TABLE = build_triangle_table()

# each cube edge as (offset of its start node, axis it runs along)
_EDGE_START = np.array([CORNERS[min(a, b, key=lambda c: tuple(CORNERS[c]))] for a, b in EDGES])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(CORNERS[b] - CORNERS[a]))) for a, b in EDGES])


@dataclass
class DensityGrid:
    """``R^3`` density samples at the nodes of a regular grid over the cube."""

    values: np.ndarray
    side: float = 2.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 2:
            raise ContractError(f"density grid must be (R, R, R) with R >= 2, got {v.shape}")
        self.values = v

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return self.side / (self.resolution - 1)

    def node_positions(self) -> np.ndarray:
        ax = np.linspace(-0.5 * self.side, 0.5 * self.side, self.resolution)
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __len__(self):
        return len(self.faces)

    def volume(self) -> float:
        if len(self.faces) == 0:
            return 0.0
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edge_use_counts(self) -> dict:
        counts = {}
        for tri in self.faces:
            for k in range(3):
                key = tuple(sorted((int(tri[k]), int(tri[(k + 1) % 3]))))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        return bool(len(self.faces)) and all(n == 2 for n in self.edge_use_counts().values())


def sample_density_grid(fld, resolution: int = 128, chunk: int = 262144) -> DensityGrid:
    if resolution < 2:
        raise ContractError("grid resolution must be at least 2")
    grid = DensityGrid(np.zeros((resolution,) * 3), fld.side)
    pts = grid.node_positions().reshape(-1, 3)
    dtype = fld.decoder.dtype if hasattr(fld, "decoder") else np.float64
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = fld.density(pts[s:s + chunk].astype(dtype, copy=False))
    grid.values = out.reshape((resolution,) * 3)
    return grid


def marching_cubes(grid: DensityGrid, level: float = 5.0) -> TriangleMesh:
    v = np.asarray(grid.values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InputDomainError("density grid contains non-finite values")
    r = v.shape[0]
    below = v < level
    case = np.zeros((r - 1,) * 3, dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:r - 1 + dx, dy:r - 1 + dy, dz:r - 1 + dz].astype(np.int64) << c
    cells = np.nonzero((case != 0) & (case != 255))
    if len(cells[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cell_xyz = np.stack(cells, axis=1)
    tris = TRIANGLE_TABLE[case[cells]]                      # (n_cells, 5, 3)
    used = tris[:, :, 0] >= 0
    cell_of_tri = np.repeat(np.arange(len(cell_xyz)), used.sum(1))
    tri_edges = tris[used]                                  # (n_tris, 3)
    start = cell_xyz[cell_of_tri][:, None, :] + _EDGE_START[tri_edges]
    axis = _EDGE_AXIS[tri_edges]
    key = ((axis * r + start[..., 0]) * r + start[..., 1]) * r + start[..., 2]
    uniq, inverse = np.unique(key.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    u_axis = uniq // r ** 3
    rem = uniq % r ** 3
    p0 = np.stack([rem // (r * r), (rem // r) % r, rem % r], axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), u_axis] += 1
    v0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = np.clip((level - v0) / (v1 - v0), 0.0, 1.0)
    pos = p0.astype(np.float64)
    pos[np.arange(len(pos)), u_axis] += t
    verts = pos * grid.spacing - 0.5 * grid.side

    a, b, c = (verts[faces[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = faces[area > 1e-12]
    return TriangleMesh(verts, faces)


def export_mesh(mesh: TriangleMesh, path, fmt: str = "obj") -> None:
    if fmt.lower() != "obj":
        raise ContractError(f"unsupported mesh format {fmt!r}")
    lines = [f"# trifield mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces"]
    lines += ["v %.9g %.9g %.9g" % tuple(p) for p in mesh.vertices]
    lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
