"""P1 finite elements for the three-field transmission problem.

Unknowns are the intracellular potential ``u^c`` on the disc vertices, the
periodic extracellular potential ``u^e`` and the membrane current ``I_m``
(a P1 multiplier on the interface nodes).  The block system is

    [ K_c    0     -P_c' M    w_c ] [u^c]   [F_c     ]
    [ 0      K_e    P_e' M    w_e ] [u^e] = [F_e     ]
    [-M P_c  M P_e  0         0   ] [I_m]   [-M J    ]
    [ w_c'   w_e'   0         0   ] [mu ]   [0       ]

where ``M`` is the interface mass matrix and the last row fixes the mean of
the potential over the cell.  The matrix does not depend on the data, so one
LU factorization serves every solve.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import UnitCellMesh


class AssemblyError(RuntimeError):
    """The assembled operator is singular or inconsistent with the mesh."""


def p1_gradients(vertices, triangles):
    """Constant gradients of the three hat functions on each triangle.

    Returns ``(grads, areas)`` with ``grads`` of shape ``(nt, 3, 2)``.
    """
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    inv = np.empty((len(triangles), 2, 2))
    inv[:, 0, 0] = d2[:, 1]
    inv[:, 0, 1] = -d2[:, 0]
    inv[:, 1, 0] = -d1[:, 1]
    inv[:, 1, 1] = d1[:, 0]
    inv /= det[:, None, None]
    # rows of inv(J) are grad(lambda_1), grad(lambda_2)
    g12 = inv
    g0 = -g12.sum(axis=1)
    grads = np.concatenate([g0[:, None, :], g12], axis=1)
    return grads, 0.5 * det


def _periodic_roots(n, pairs):
    root = np.arange(n)

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    for img, src in pairs:
        ra, rb = find(img), find(src)
        if ra != rb:
            root[max(ra, rb)] = min(ra, rb)
    return np.array([find(a) for a in range(n)])


def interface_mass(mesh: UnitCellMesh) -> sp.csr_matrix:
    """P1 mass matrix on the interface polyline (exact edge quadrature)."""
    ng = mesh.n_interface
    lengths = mesh.edge_lengths
    i = np.arange(ng)
    j = (i + 1) % ng
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([lengths / 3, lengths / 3, lengths / 6, lengths / 6])
    return sp.csr_matrix((vals, (rows, cols)), shape=(ng, ng))


@dataclass(eq=False)
class TransmissionSystem:
    mesh: UnitCellMesh
    sigma_c: float
    sigma_e: float
    matrix: sp.csc_matrix
    c_vertices: np.ndarray      # vertex id of each intracellular DOF
    e_vertices: np.ndarray      # extracellular vertex ids (all, incl. images)
    e_dof: np.ndarray           # DOF of each entry of e_vertices
    n_c: int
    n_e: int
    n_g: int
    tri_local: np.ndarray       # per triangle: index into values_c / values_e
    grads: np.ndarray
    areas: np.ndarray
    sigma_tri: np.ndarray
    loads: np.ndarray           # (2, n) corrector loads for e_1, e_2
    iface_mass: sp.csr_matrix
    iface_c: np.ndarray         # c-DOF of each interface node
    iface_e: np.ndarray         # e-DOF of each interface node
    edge_triangle: np.ndarray   # intracellular triangle of each interface edge
    stiffness: sp.csr_matrix = field(repr=False)
    mean_weights: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def split(self, x):
        """Split solution vector(s) into ``(u_c, u_e_dofs, I_m, mu)``."""
        nc, ne, ng = self.n_c, self.n_e, self.n_g
        return x[:nc], x[nc:nc + ne], x[nc + ne:nc + ne + ng], x[-1]

    def flux_functional(self, i: int) -> np.ndarray:
        """Vector ``d`` with ``d @ x = int_Y sigma d_i u dy``."""
        # the corrector load is -int sigma e_i . grad(v)
        return -self.loads[i]


def assemble(mesh: UnitCellMesh, sigma_c: float, sigma_e: float) -> TransmissionSystem:
    """Assemble the block transmission operator on ``mesh``."""
    if not (sigma_c > 0 and sigma_e > 0):
        raise AssemblyError("conductivities must be positive")
    tris = mesh.triangles
    nv = mesh.n_vertices
    grads, areas = p1_gradients(mesh.vertices, tris)
    if areas.min() <= 0:
        raise AssemblyError("mesh contains non-positive triangle areas")
    intra = mesh.intra

    c_vertices = np.unique(tris[intra])
    c_index = np.full(nv, -1)
    c_index[c_vertices] = np.arange(len(c_vertices))

    root = _periodic_roots(nv, mesh.periodic_pairs)
    e_vertices = np.unique(tris[~intra])
    e_roots = np.unique(root[e_vertices])
    e_index_of_root = np.full(nv, -1)
    e_index_of_root[e_roots] = np.arange(len(e_roots))
    e_dof = e_index_of_root[root[e_vertices]]
    e_local = np.full(nv, -1)
    e_local[e_vertices] = np.arange(len(e_vertices))

    n_c, n_e, n_g = len(c_vertices), len(e_roots), mesh.n_interface
    n = n_c + n_e + n_g + 1

    # global DOF of each triangle corner
    dof = np.where(intra[:, None], c_index[tris],
                   n_c + e_index_of_root[root[tris]])
    tri_local = np.where(intra[:, None], c_index[tris], e_local[tris])
    sigma_tri = np.where(intra, sigma_c, sigma_e)

    local_k = np.einsum("t,tai,tbi->tab", sigma_tri * areas, grads, grads)
    rows = np.repeat(dof, 3, axis=1).ravel()
    cols = np.tile(dof, (1, 3)).ravel()
    stiff = sp.coo_matrix((local_k.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    loads = np.zeros((2, n))
    for j in range(2):
        np.add.at(loads[j], dof.ravel(),
                  (-(sigma_tri * areas)[:, None] * grads[:, :, j]).ravel())
    mean_w = np.zeros(n)
    np.add.at(mean_w, dof.ravel(), np.repeat(areas / 3, 3))

    mass = interface_mass(mesh)
    iface_c = c_index[mesh.interface_nodes]
    iface_e = n_c + e_index_of_root[root[mesh.interface_nodes]]
    if np.any(iface_c < 0) or np.any(iface_e < n_c):
        raise AssemblyError("interface node missing from a region")
    lam = n_c + n_e + np.arange(n_g)
    mc = mass.tocoo()
    coupling = sp.coo_matrix(
        (np.concatenate([-mc.data, mc.data]),
         (np.concatenate([iface_c[mc.row], iface_e[mc.row]]),
          np.concatenate([lam[mc.col], lam[mc.col]]))), shape=(n, n))
    mu = n - 1
    mean_part = sp.coo_matrix(
        (mean_w[:-1], (np.arange(n - 1), np.full(n - 1, mu))), shape=(n, n))
    matrix = (stiff + coupling + coupling.T + mean_part + mean_part.T).tocsc()
    matrix.eliminate_zeros()

    # intracellular triangle adjacent to each interface edge
    edge_tri = _edge_triangles(mesh)

    return TransmissionSystem(
        mesh=mesh, sigma_c=float(sigma_c), sigma_e=float(sigma_e),
        matrix=matrix, c_vertices=c_vertices, e_vertices=e_vertices,
        e_dof=e_dof, n_c=n_c, n_e=n_e, n_g=n_g, tri_local=tri_local,
        grads=grads, areas=areas, sigma_tri=sigma_tri, loads=loads,
        iface_mass=mass, iface_c=iface_c, iface_e=iface_e,
        edge_triangle=edge_tri, stiffness=stiff, mean_weights=mean_w)


def _edge_triangles(mesh):
    tris = mesh.triangles
    idx = np.flatnonzero(mesh.intra)
    lookup = {}
    for t in idx:
        a, b, c = tris[t]
        for e in ((a, b), (b, c), (c, a)):
            lookup[(min(e), max(e))] = t
    return np.array([lookup[(min(a, b), max(a, b))]
                     for a, b in mesh.interface_edges])


def dump_operator(s: TransmissionSystem) -> str:
    """Block operator as ``i j value`` lines (0-based), for debugging."""
    coo = s.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    out = io.StringIO()
    for k in order:
        out.write(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n")
    return out.getvalue()


class Factorization:
    """Sparse LU factors of a :class:`TransmissionSystem`, reused for every
    right-hand side.  Solves only read the factors."""

    def __init__(self, system: TransmissionSystem):
        self.system = system
        try:
            self._lu = spla.splu(system.matrix, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise AssemblyError(f"factorization failed: {exc}") from exc
        diag = np.abs(self._lu.U.diagonal())
        if not np.all(np.isfinite(diag)) or diag.min() <= 1e-14 * diag.max():
            raise AssemblyError("operator is numerically singular")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=float))


def factorize(s: TransmissionSystem) -> Factorization:
    return Factorization(s)


@dataclass(eq=False)
class CellField:
    """Potential on both regions plus the membrane current on the interface.

    ``values_c`` follows ``system.c_vertices`` and ``values_e`` follows
    ``system.e_vertices`` (periodic images carry their source value).
    """

    system: TransmissionSystem
    values_c: np.ndarray
    values_e: np.ndarray
    flux: np.ndarray

    @classmethod
    def from_solution(cls, system, x):
        uc, ue, lam, _ = system.split(x)
        return cls(system, np.array(uc), np.array(ue[system.e_dof]), np.array(lam))

    @classmethod
    def from_vertex_values(cls, system, values, flux=None):
        """Field with the given per-vertex values in both regions."""
        values = np.asarray(values, dtype=float)
        flux = np.zeros(system.n_g) if flux is None else np.asarray(flux, float)
        return cls(system, values[system.c_vertices], values[system.e_vertices], flux)

    def jump(self) -> np.ndarray:
        """Trace jump ``u^c - u^e`` at the interface nodes."""
        s = self.system
        nodes = s.mesh.interface_nodes
        c_pos = np.searchsorted(s.c_vertices, nodes)
        e_pos = np.searchsorted(s.e_vertices, nodes)
        return self.values_c[c_pos] - self.values_e[e_pos]

    def triangle_gradients(self) -> np.ndarray:
        s = self.system
        vals = np.where(s.mesh.intra[:, None], self.values_c[np.where(
            s.mesh.intra[:, None], s.tri_local, 0)], self.values_e[np.where(
                s.mesh.intra[:, None], 0, s.tri_local)])
        return np.einsum("ta,tai->ti", vals, s.grads)


def _jump_rhs(s: TransmissionSystem, J: np.ndarray) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if J.shape[0] != s.n_g:
        raise ValueError(f"jump has {J.shape[0]} entries, expected {s.n_g}")
    shape = (s.size,) + J.shape[1:]
    rhs = np.zeros(shape)
    rhs[s.n_c + s.n_e:s.n_c + s.n_e + s.n_g] = -(s.iface_mass @ J)
    return rhs


def solve_with_jump(f: Factorization, J) -> CellField:
    """Field with zero volume load and prescribed interface jump ``J``."""
    s = f.system
    return CellField.from_solution(s, f.solve(_jump_rhs(s, J)))


def solve_jumps(f: Factorization, J: np.ndarray):
    """Batched jump solves for the columns of ``J`` (shape ``(n_g, k)``).

    Returns ``(I_m, B)`` where ``I_m`` has the shape of ``J`` and ``B`` has
    shape ``(2, k)`` holding ``int sigma d_i chi dy`` for each column.
    """
    s = f.system
    J = np.asarray(J, dtype=float)
    x = f.solve(_jump_rhs(s, J))
    lam = x[s.n_c + s.n_e:s.n_c + s.n_e + s.n_g]
    B = np.stack([s.flux_functional(i) @ x for i in range(2)])
    return lam, B


def assemble_load(s: TransmissionSystem, f_c=None, f_e=None, jump=None,
                  flux_source=None) -> np.ndarray:
    """Right-hand side for general data.

    ``f_c`` and ``f_e`` are callables ``f(y) -> values`` for the volume
    sources (edge-midpoint quadrature, exact for quadratics); ``jump``
    holds the prescribed ``u^c - u^e`` at the interface nodes and
    ``flux_source`` a nodal P1 density ``g`` entering the extracellular
    equation as ``int_Gamma g v^e``.
    """
    rhs = np.zeros(s.size)
    mesh = s.mesh
    for func, mask in ((f_c, mesh.intra), (f_e, ~mesh.intra)):
        if func is None:
            continue
        tris = mesh.triangles[mask]
        p = mesh.vertices[tris]
        mids = 0.5 * (p[:, [0, 1, 2]] + p[:, [1, 2, 0]])      # edges 01, 12, 20
        fm = np.asarray(func(mids.reshape(-1, 2)), float).reshape(-1, 3)
        # hat function a is 1/2 at the midpoints of its two edges
        local = np.stack([fm[:, 0] + fm[:, 2], fm[:, 0] + fm[:, 1],
                          fm[:, 1] + fm[:, 2]], axis=1) * (s.areas[mask] / 6)[:, None]
        dof = _triangle_dofs(s)[mask]
        np.add.at(rhs, dof.ravel(), local.ravel())
    if jump is not None:
        rhs += _jump_rhs(s, jump)
    if flux_source is not None:
        np.add.at(rhs, s.iface_e, s.iface_mass @ np.asarray(flux_source, float))
    return rhs


def _triangle_dofs(s: TransmissionSystem) -> np.ndarray:
    intra = s.mesh.intra[:, None]
    c_dof = s.tri_local
    e_dof = s.n_c + s.e_dof[np.where(intra, 0, s.tri_local)]
    return np.where(intra, c_dof, e_dof)


def solve_load(f: Factorization, rhs) -> CellField:
    return CellField.from_solution(f.system, f.solve(rhs))


def solve_corrector_rhs(f: Factorization, j: int) -> CellField:
    """Cell corrector for direction ``j`` (0 or 1): zero jump, load
    ``-int sigma e_j . grad(v)``."""
    if j not in (0, 1):
        raise ValueError("direction index must be 0 or 1")
    s = f.system
    return CellField.from_solution(s, f.solve(s.loads[j]))


def volume_flux_integral(fld: CellField, i: int) -> float:
    """``int_Y sigma d_{y_i} u dy`` using the constant gradient per triangle."""
    s = fld.system
    grad = fld.triangle_gradients()
    return float(np.sum(s.sigma_tri * s.areas * grad[:, i]))


def energy(fld: CellField) -> float:
    """``int_Y sigma |grad u|^2 dy``."""
    s = fld.system
    grad = fld.triangle_gradients()
    return float(np.sum(s.sigma_tri * s.areas * np.einsum("ti,ti->t", grad, grad)))


def interface_product(s: TransmissionSystem, a, b) -> float:
    """``int_Gamma a b dS`` for P1 interface data."""
    return float(np.asarray(a) @ (s.iface_mass @ np.asarray(b)))


@dataclass(eq=False)
class JumpResponse:
    """Dense representation of the jump -> (flux, volume flux) maps.

    ``flux_matrix[:, s]`` is the membrane current produced by a unit jump at
    interface node ``s``; ``volume_flux[i, s]`` the corresponding
    ``int sigma d_i chi dy``.  Built from ``n_g`` solves with the shared
    factorization, it replaces those solves exactly (up to round-off).
    """

    flux_matrix: np.ndarray
    volume_flux: np.ndarray

    def apply(self, J):
        J = np.asarray(J, dtype=float)
        return self.flux_matrix @ J, self.volume_flux @ J

    def max_rate(self) -> float:
        """Largest eigenvalue of the jump -> flux map."""
        return float(np.max(np.linalg.eigvals(self.flux_matrix).real))


def jump_response(f: Factorization, block: int = 64) -> JumpResponse:
    s = f.system
    K = np.empty((s.n_g, s.n_g))
    V = np.empty((2, s.n_g))
    eye = np.eye(s.n_g)
    for start in range(0, s.n_g, block):
        cols = slice(start, min(start + block, s.n_g))
        K[:, cols], V[:, cols] = solve_jumps(f, eye[:, cols])
    return JumpResponse(K, V)


def solve_exterior_neumann(mesh: UnitCellMesh, sigma_e: float):
    """Periodic correctors of the perforated cell (insulating inclusion).

    Solves ``div(sigma_e (grad N_j + e_j)) = 0`` in the extracellular region
    with zero normal flux on the interface.  Returns ``(N, areas, grads,
    local)`` where ``N[j]`` holds vertex values following
    ``np.unique(triangles[~intra])``.
    """
    tris = mesh.triangles[~mesh.intra]
    grads, areas = p1_gradients(mesh.vertices, tris)
    nv = mesh.n_vertices
    root = _periodic_roots(nv, mesh.periodic_pairs)
    verts = np.unique(tris)
    roots = np.unique(root[verts])
    index_of_root = np.full(nv, -1)
    index_of_root[roots] = np.arange(len(roots))
    dof = index_of_root[root[tris]]
    n = len(roots) + 1
    local_k = np.einsum("t,tai,tbi->tab", sigma_e * areas, grads, grads)
    K = sp.coo_matrix((local_k.ravel(), (np.repeat(dof, 3, axis=1).ravel(),
                                         np.tile(dof, (1, 3)).ravel())),
                      shape=(n, n))
    w = np.zeros(n)
    np.add.at(w, dof.ravel(), np.repeat(areas / 3, 3))
    W = sp.coo_matrix((w[:-1], (np.arange(n - 1), np.full(n - 1, n - 1))),
                      shape=(n, n))
    lu = spla.splu((K + W + W.T).tocsc())
    local = np.searchsorted(verts, tris)
    out = []
    for j in range(2):
        rhs = np.zeros(n)
        np.add.at(rhs, dof.ravel(), (-sigma_e * areas[:, None] * grads[:, :, j]).ravel())
        x = lu.solve(rhs)
        out.append(x[index_of_root[root[verts]]])
    return np.array(out), areas, grads, local
