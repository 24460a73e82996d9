"""Triangulation of the periodic unit cell with a circular inclusion.

The cell ``Y = (0, 1)^2`` contains the intracellular disc of radius ``r``
centred at ``(0.5, 0.5)``.  Only one eighth of the cell (the triangle with
corners ``(0, 0)``, ``(0, 0.5)``, ``(0.5, 0.5)``) is actually meshed; the
rest is obtained by the eight reflections of the square's symmetry group.
The resulting mesh is therefore exactly symmetric under ``y1 -> 1 - y1``,
``y2 -> 1 - y2`` and ``y1 <-> y2``, and opposite boundary edges carry
identical node positions, so periodic pairing needs no interpolation.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

CENTER = (0.5, 0.5)
MIN_ANGLE_DEG = 15.0


class MeshError(RuntimeError):
    """Mesh generation failed a structural or quality check."""


@dataclass(frozen=True, eq=False)
class UnitCellMesh:
    vertices: np.ndarray        # (n, 2)
    triangles: np.ndarray       # (nt, 3), counter-clockwise
    intra: np.ndarray           # (nt,) bool, True inside the disc
    interface_nodes: np.ndarray  # (ng,) vertex ids ordered by angle
    interface_edges: np.ndarray  # (ng, 2) consecutive pairs, closed polyline
    edge_normals: np.ndarray    # (ng, 2) unit normals pointing out of the disc
    periodic_pairs: np.ndarray  # (np, 2) (image, source) on right/top edges
    h: float                    # achieved maximum edge length
    radius: float
    h_target: float = float("nan")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_interface(self) -> int:
        return len(self.interface_nodes)

    @property
    def theta(self) -> np.ndarray:
        """Polar angle of each interface node in ``[0, 2 pi)``."""
        d = self.vertices[self.interface_nodes] - np.asarray(CENTER)
        return np.mod(np.arctan2(d[:, 1], d[:, 0]), 2 * np.pi)

    @property
    def node_normals(self) -> np.ndarray:
        """Exact radial normals at interface nodes (nodes lie on the circle)."""
        d = self.vertices[self.interface_nodes] - np.asarray(CENTER)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    @property
    def edge_lengths(self) -> np.ndarray:
        a, b = self.interface_edges.T
        return np.linalg.norm(self.vertices[b] - self.vertices[a], axis=1)

    @property
    def lumped_weights(self) -> np.ndarray:
        """Half the length of the two interface edges touching each node."""
        lengths = self.edge_lengths
        return 0.5 * (lengths + np.roll(lengths, 1))

    def triangle_areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.triangles)


def signed_areas(vertices, triangles):
    p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def triangle_angles(vertices, triangles):
    """Interior angles in degrees, shape ``(nt, 3)``."""
    p = vertices[triangles]
    out = np.empty(triangles.shape)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cosang = np.einsum("ij,ij->i", a, b) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        out[:, k] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def _segment(p, q, n):
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return (1 - t) * np.asarray(p, float) + t * np.asarray(q, float)


def _snap(points):
    # keep nodes that sit on mirror lines exactly on them
    pts = np.array(points, dtype=float)
    pts[np.abs(pts[:, 0]) < 1e-13, 0] = 0.0
    pts[np.abs(pts[:, 1] - 0.5) < 1e-13, 1] = 0.5
    on_diag = np.abs(pts[:, 0] - pts[:, 1]) < 1e-13
    pts[on_diag, 1] = pts[on_diag, 0]
    return pts


def _hex_lattice(h, lo, hi, phase):
    dy = h * math.sqrt(3) / 2
    rows = np.arange(lo - h, hi + h, dy)
    pts = []
    for i, y in enumerate(rows):
        x0 = lo - h + (0.5 * h if i % 2 else 0.0) + phase * h
        xs = np.arange(x0, hi + h, h)
        pts.append(np.column_stack([xs, np.full_like(xs, y)]))
    return np.vstack(pts)


def _region_mesh(points, n_fixed, inside, sweeps):
    """Delaunay triangulation of ``points`` restricted by ``inside``
    (evaluated at centroids), with Laplacian smoothing of the free points
    (indices ``>= n_fixed``)."""
    pts = points.copy()
    for sweep in range(sweeps + 1):
        tri = Delaunay(pts, qhull_options="Qbb Qc Qz Q12 Qt").simplices
        cen = pts[tri].mean(axis=1)
        keep = inside(cen) & (np.abs(signed_areas(pts, tri)) > 1e-14)
        tri = tri[keep]
        if sweep == sweeps or len(pts) == n_fixed:
            break
        acc = np.zeros_like(pts)
        cnt = np.zeros(len(pts))
        for a, b in ((0, 1), (1, 2), (2, 0)):
            np.add.at(acc, tri[:, a], pts[tri[:, b]])
            np.add.at(acc, tri[:, b], pts[tri[:, a]])
            np.add.at(cnt, tri[:, a], 1)
            np.add.at(cnt, tri[:, b], 1)
        free = np.arange(n_fixed, len(pts))
        free = free[cnt[free] > 0]
        pts[free] = 0.5 * pts[free] + 0.5 * acc[free] / cnt[free, None]
    # orient counter-clockwise
    area = signed_areas(pts, tri)
    tri = tri.copy()
    tri[area < 0] = tri[area < 0][:, [0, 2, 1]]
    return pts, tri


def _fundamental(h, r, phase, sweeps):
    """Mesh the triangle (0,0)-(0,0.5)-(0.5,0.5) split by the arc."""
    cx, cy = CENTER
    m = max(2, math.ceil(r * (math.pi / 4) / h))
    ang = math.pi + (math.pi / 4) * np.arange(m + 1) / m
    arc = np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)])
    arc[0] = (cx - r, cy)
    d = cx - r / math.sqrt(2)
    arc[-1] = (d, d)

    O, P, C, Q, D = (0.0, 0.0), (0.0, 0.5), CENTER, (cx - r, cy), (d, d)
    n_left = math.ceil(0.5 / h)
    n_top = max(1, math.ceil((cx - r) / h))
    n_diag = max(1, math.ceil(d * math.sqrt(2) / h))
    n_in = max(1, math.ceil(r / h))

    mid = math.pi + (math.pi / 4) * (np.arange(m) + 0.5) / m
    layer = h * math.sqrt(3) / 2

    def ring(rho):
        return np.column_stack([cx + rho * np.cos(mid), cy + rho * np.sin(mid)])

    def dist_edges(p):
        x, y = p[:, 0], p[:, 1]
        return np.minimum.reduce([x, 0.5 - y, (y - x) / math.sqrt(2)])

    rho_of = lambda p: np.hypot(p[:, 0] - cx, p[:, 1] - cy)
    lattice = _hex_lattice(h, 0.0, 0.5, phase)
    lat_rho = rho_of(lattice)
    ok = dist_edges(lattice) > 0.55 * h

    # extracellular part
    ext_fixed = np.vstack([
        _segment(O, P, n_left),
        _segment(P, Q, n_top)[1:],
        arc[1:],
        _segment(D, O, n_diag)[1:-1],
    ])
    ext_layer = ring(r + layer)
    ext_layer = ext_layer[dist_edges(ext_layer) > 0.45 * h]
    ext_fill = lattice[ok & (lat_rho > r + layer + 0.75 * h)]
    ext_free = np.vstack([ext_layer, ext_fill])
    ext_pts = _snap(np.vstack([ext_fixed, ext_free]))

    def in_ext(c):
        return (rho_of(c) > r) & (dist_edges(c) > 0)

    ext_pts, ext_tri = _region_mesh(ext_pts, len(ext_fixed) + len(ext_layer),
                                    in_ext, sweeps)

    # intracellular part
    int_fixed = np.vstack([arc, _segment(Q, C, n_in)[1:], _segment(D, C, n_in)[1:-1]])
    parts = [int_fixed]
    if r - layer > 0.75 * h:
        int_layer = ring(r - layer)
        int_layer = int_layer[dist_edges(int_layer) > 0.45 * h]
        parts.append(int_layer)
        int_fill = lattice[ok & (lat_rho < r - layer - 0.75 * h)
                           & (lat_rho > 0.55 * h)]
    else:
        int_layer = np.empty((0, 2))
        int_fill = np.empty((0, 2))
    parts.append(int_fill)
    int_pts = _snap(np.vstack(parts))

    def in_int(c):
        return (rho_of(c) < r) & (dist_edges(c) > 0)

    int_pts, int_tri = _region_mesh(int_pts, len(int_fixed) + len(int_layer),
                                    in_int, sweeps)
    return ext_pts, ext_tri, int_pts, int_tri


_SYMMETRIES = [
    lambda p: p,
    lambda p: p[:, ::-1],
    lambda p: np.column_stack([1.0 - p[:, 0], p[:, 1]]),
    lambda p: np.column_stack([1.0 - p[:, 1], p[:, 0]]),
    lambda p: np.column_stack([p[:, 0], 1.0 - p[:, 1]]),
    lambda p: np.column_stack([p[:, 1], 1.0 - p[:, 0]]),
    lambda p: 1.0 - p,
    lambda p: 1.0 - p[:, ::-1],
]


def _assemble_cell(pieces):
    coords, tris, tags = [], [], []
    offset = 0
    for pts, tri, tag in pieces:
        for sym in _SYMMETRIES:
            coords.append(sym(pts))
            tris.append(tri + offset)
            tags.append(np.full(len(tri), tag))
            offset += len(pts)
    coords = np.vstack(coords)
    tris = np.vstack(tris)
    tags = np.concatenate(tags)
    keys = np.round(coords, 12)
    _, first, inverse = np.unique(keys, axis=0, return_index=True,
                                  return_inverse=True)
    # deterministic ordering: sort merged vertices lexicographically (y, x)
    verts = coords[first]
    order = np.lexsort((verts[:, 0], verts[:, 1]))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    verts = verts[order]
    tris = rank[inverse.reshape(-1)[tris]]
    area = signed_areas(verts, tris)
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return verts, tris, tags


def _interface(verts, tris, intra, r):
    cx, cy = CENTER
    rho = np.hypot(verts[:, 0] - cx, verts[:, 1] - cy)
    in_c = np.zeros(len(verts), bool)
    in_e = np.zeros(len(verts), bool)
    in_c[tris[intra].ravel()] = True
    in_e[tris[~intra].ravel()] = True
    nodes = np.flatnonzero(in_c & in_e)
    if not np.allclose(rho[nodes], r, rtol=0, atol=1e-12):
        raise MeshError("interface node off the circle")
    theta = np.mod(np.arctan2(verts[nodes, 1] - cy, verts[nodes, 0] - cx),
                   2 * np.pi)
    nodes = nodes[np.argsort(theta, kind="stable")]
    edges = np.column_stack([nodes, np.roll(nodes, -1)])
    tangent = verts[edges[:, 1]] - verts[edges[:, 0]]
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    midpoint = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
    if np.any(np.einsum("ij,ij->i", normals, midpoint - CENTER) <= 0):
        raise MeshError("interface polyline is not counter-clockwise")
    return nodes, edges, normals


def _periodic_pairs(verts):
    def match(src_mask, img_mask, axis):
        other = 1 - axis
        src = np.flatnonzero(src_mask)
        img = np.flatnonzero(img_mask)
        src = src[np.argsort(verts[src, other])]
        img = img[np.argsort(verts[img, other])]
        if len(src) != len(img) or np.max(
                np.abs(verts[src, other] - verts[img, other]), initial=0) > 1e-10:
            raise MeshError("opposite boundary edges do not match")
        return np.column_stack([img, src])

    x, y = verts[:, 0], verts[:, 1]
    lr = match(x == 0.0, x == 1.0, 0)
    bt = match(y == 0.0, y == 1.0, 1)
    return np.vstack([lr, bt])


def _edge_counts(tris):
    e = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]),
                axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def build_unit_cell(h: float, r: float = 0.25, *, sweeps: int = 8,
                    retries: int = 3) -> UnitCellMesh:
    """Generate a conforming, symmetric triangulation of the unit cell.

    Parameters
    ----------
    h : float
        Target edge length, ``0 < h < r``.
    r : float
        Inclusion radius, ``0 < r < 0.5``.

    Raises
    ------
    MeshError
        If no attempt passes the structural checks and the minimum-angle gate.
    """
    if not 0.0 < r < 0.5:
        raise ValueError("radius must lie in (0, 0.5)")
    if not 0.0 < h < r:
        raise ValueError("mesh size must satisfy 0 < h < r")
    failures = []
    for attempt in range(retries):
        phase = (0.0, 0.5, 0.25, 0.75)[attempt % 4]
        try:
            mesh = _try_build(h, r, phase, sweeps + 4 * attempt)
        except MeshError as exc:
            failures.append(f"attempt {attempt}: {exc}")
            continue
        min_angle = triangle_angles(mesh.vertices, mesh.triangles).min()
        if min_angle >= MIN_ANGLE_DEG:
            return mesh
        failures.append(f"attempt {attempt}: min angle {min_angle:.2f} deg")
    raise MeshError(f"mesh generation failed for h={h}, r={r}: "
                    + "; ".join(failures))


def _try_build(h, r, phase, sweeps):
    ext_pts, ext_tri, int_pts, int_tri = _fundamental(h, r, phase, sweeps)
    verts, tris, tags = _assemble_cell([(ext_pts, ext_tri, False),
                                        (int_pts, int_tri, True)])
    intra = tags.astype(bool)
    area = signed_areas(verts, tris)
    if area.min() <= 0:
        raise MeshError("degenerate triangle")
    if abs(area.sum() - 1.0) > 1e-10:
        raise MeshError(f"triangles do not tile the cell (area {area.sum()!r})")
    nodes, edges, normals = _interface(verts, tris, intra, r)

    # each interface edge must border one intracellular and one extracellular
    # triangle; every other interior edge two triangles of the same region
    for tag in (True, False):
        uniq, counts = _edge_counts(tris[intra == tag])
        boundary = {tuple(e) for e in uniq[counts == 1]}
        for a, b in edges:
            if (min(a, b), max(a, b)) not in boundary:
                raise MeshError("interface edge not shared by both regions")
        if np.any(counts > 2):
            raise MeshError("non-manifold edge")
    pairs = _periodic_pairs(verts)
    uniq, _ = _edge_counts(tris)
    h_max = float(np.max(np.linalg.norm(verts[uniq[:, 1]] - verts[uniq[:, 0]],
                                        axis=1)))
    return UnitCellMesh(verts, tris, intra, nodes, edges, normals, pairs,
                        h_max, r, h)


def reflection_map(m: UnitCellMesh, axis: int) -> np.ndarray:
    """Vertex permutation for the mirror ``y_axis -> 1 - y_axis``.

    ``perm[v]`` is the vertex at the mirrored position of ``v``; the mesh is
    exactly symmetric, so every vertex has a partner.
    """
    img = m.vertices.copy()
    img[:, axis] = 1.0 - img[:, axis]
    lookup = {tuple(k): v for v, k in enumerate(np.round(m.vertices, 10))}
    perm = np.empty(len(img), dtype=np.int64)
    for v, k in enumerate(np.round(img, 10)):
        try:
            perm[v] = lookup[tuple(k)]
        except KeyError:
            raise MeshError("mesh is not mirror symmetric") from None
    return perm


def mesh_diagnostics(m: UnitCellMesh) -> dict:
    """Summary statistics, each recomputed from the raw arrays."""
    area = m.triangle_areas()
    pairs = m.periodic_pairs
    shift = m.vertices[pairs[:, 0]] - m.vertices[pairs[:, 1]]
    mismatch = np.minimum(np.abs(shift - [1.0, 0.0]).max(axis=1),
                          np.abs(shift - [0.0, 1.0]).max(axis=1))
    mid = 0.5 * (m.vertices[m.interface_edges[:, 0]]
                 + m.vertices[m.interface_edges[:, 1]])
    radial = np.abs(np.hypot(*(mid - CENTER).T) - m.radius)
    return {
        "triangles": int(len(m.triangles)),
        "nodes": int(m.n_vertices),
        "interface_nodes": int(m.n_interface),
        "min_angle": float(triangle_angles(m.vertices, m.triangles).min()),
        "intra_area": float(area[m.intra].sum()),
        "extra_area": float(area[~m.intra].sum()),
        "max_periodic_mismatch": float(mismatch.max(initial=0.0)),
        "max_radial_error": float(radial.max()),
        "h": m.h,
    }


def dump_mesh(m: UnitCellMesh) -> str:
    """Serialize to the plain-text ``unitcell v1`` format."""
    out = io.StringIO()
    out.write(f"unitcell v1 {float(m.h_target)!r} {float(m.radius)!r}\n")
    out.write(f"vertices {m.n_vertices}\n")
    for x, y in m.vertices:
        out.write(f"{float(x)!r} {float(y)!r}\n")
    out.write(f"triangles {len(m.triangles)}\n")
    for (a, b, c), tag in zip(m.triangles, m.intra):
        out.write(f"{a} {b} {c} {'intra' if tag else 'extra'}\n")
    out.write(f"interface {m.n_interface}\n")
    for node in m.interface_nodes:
        out.write(f"{node}\n")
    out.write(f"pairs {len(m.periodic_pairs)}\n")
    for a, b in m.periodic_pairs:
        out.write(f"{a} {b}\n")
    return out.getvalue()


def load_mesh(text: str) -> UnitCellMesh:
    lines = iter(text.splitlines())
    header = next(lines).split()
    if header[:2] != ["unitcell", "v1"]:
        raise MeshError("not a 'unitcell v1' file")
    h_target, r = float(header[2]), float(header[3])

    def block(name):
        tag, count = next(lines).split()
        if tag != name:
            raise MeshError(f"expected block {name!r}, found {tag!r}")
        return [next(lines).split() for _ in range(int(count))]

    verts = np.array([[float(x), float(y)] for x, y in block("vertices")])
    rows = block("triangles")
    tris = np.array([[int(a), int(b), int(c)] for a, b, c, _ in rows], dtype=np.int64)
    intra = np.array([t == "intra" for *_, t in rows])
    block("interface")
    pairs = np.array([[int(a), int(b)] for a, b in block("pairs")], dtype=np.int64)
    nodes, edges, normals = _interface(verts, tris, intra, r)
    uniq, _ = _edge_counts(tris)
    h_max = float(np.max(np.linalg.norm(verts[uniq[:, 1]] - verts[uniq[:, 0]],
                                        axis=1)))
    return UnitCellMesh(verts, tris, intra, nodes, edges, normals,
                        pairs.reshape(-1, 2), h_max, r, h_target)
