"""Memory-kernel time marching for the parallel-plate configuration.

With a constant macroscopic gradient ``(g/L) e_1`` the homogenized model
reduces to cell quantities only: a family of kernel jumps
``chi(t, tau)`` on the interface, the membrane jump

    [u0](t) = (g/L) int_0^t chi_1(t, tau) dtau + [z](t),

the poration degree ``X0`` and the effective conductivity
``sigma_eff(t) = A + int_0^t B(t, tau) dtau``.  Every kernel column obeys
the same nodewise semi-implicit update, driven by the jump -> flux map of the
transmission problem.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cell_static, fem
from .mesh import UnitCellMesh, build_unit_cell
from .model import (InvariantViolation, ModelParams, beta, initial_jump,
                    membrane_conductivity, poration_rate, truncation_active)


class NumericalFailure(RuntimeError):
    """Non-finite values or an unstable step configuration."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


POLE = (0.75, 0.5)


@dataclass(eq=False)
class KernelTriangle:
    """Kernel jumps of the current time row and the B history.

    ``chi[j, m]`` is the interface jump of ``chi_{j+1}(t_k, tau_m)`` for
    ``m <= k``.  ``B[i, j, k, m]`` holds ``B_{i+1, j+1}(t_k, tau_m)`` on the
    lower triangle when the history is kept (only ``B11`` by default);
    ``B_tau0[i, j, k]`` is ``B_{i+1, j+1}(t_k, 0)``.
    """

    dt: float
    chi0: np.ndarray
    B00: np.ndarray
    chi: np.ndarray
    B: np.ndarray | None
    B_tau0: np.ndarray
    k: int = 0

    @property
    def row(self) -> np.ndarray:
        return self.chi[:, :self.k + 1]

    def B11(self) -> np.ndarray:
        if self.B is None:
            raise ValueError("kernel history was not stored")
        return self.B[0, 0]

    def component(self, i: int, j: int) -> np.ndarray:
        if self.B is None or self.B.shape[0] <= max(i, j):
            raise ValueError(f"B{i + 1}{j + 1} history was not stored")
        return self.B[i, j]


@dataclass(eq=False)
class MembraneState:
    """Interface-node time series (rows are time steps)."""

    u0_jump: np.ndarray
    X0: np.ndarray
    z_jump: np.ndarray


@dataclass(eq=False)
class EffectiveHistory:
    t: np.ndarray
    sigma_eff: np.ndarray          # (n+1, 2, 2)
    A: np.ndarray
    B_integral: np.ndarray         # (n+1, 2, 2)
    Sm_avg: np.ndarray
    C: np.ndarray                  # (n+1, 2)
    pole_u0: np.ndarray
    pole_node: int


@dataclass(eq=False)
class RunResult:
    params: ModelParams
    mesh: UnitCellMesh
    history: EffectiveHistory
    membrane: MembraneState
    kernel: KernelTriangle
    A_insulating: np.ndarray
    metadata: dict = field(default_factory=dict)


# -- building blocks -------------------------------------------------------

def chi_initial(c: cell_static.CorrectorSet, p: ModelParams, j: int = 0) -> np.ndarray:
    """Diagonal kernel data ``-(1/c_m) sigma_c (grad M_j + e_j) . n`` at the
    interface nodes.

    In ``flux_average`` mode the intracellular flux of each interface edge's
    triangle is averaged to the nodes with triangle-area weights; in
    ``multiplier`` mode the membrane current of the corrector solve is used.
    """
    M = c.corrector(j)
    if p.chi_init == "multiplier":
        return -np.asarray(M.flux) / p.c_m
    s = M.system
    mesh = s.mesh
    grad = M.triangle_gradients()[s.edge_triangle] + np.eye(2)[j]
    area = s.areas[s.edge_triangle]
    normals = mesh.node_normals
    prev = np.roll(np.arange(mesh.n_interface), 1)
    # node s touches edges s-1 and s
    g_node = (area[:, None] * grad + area[prev, None] * grad[prev]) / \
        (area + area[prev])[:, None]
    flux = s.sigma_c * np.einsum("si,si->s", g_node, normals)
    return -flux / p.c_m


def step_chi(row, I_m, Sm, dt: float, c_m: float = 1.0) -> np.ndarray:
    """Nodewise semi-implicit kernel update for every column of ``row``.

    ``row`` and ``I_m`` have shape ``(n_nodes, ...)``; ``Sm`` is the membrane
    conductivity per node.
    """
    row = np.asarray(row, dtype=float)
    Sm = np.asarray(Sm, dtype=float).reshape((-1,) + (1,) * (row.ndim - 1))
    return (row - (dt / c_m) * np.asarray(I_m)) / (1.0 + (dt / c_m) * Sm)


def step_X(X, u0, dt: float, p: ModelParams) -> np.ndarray:
    """Semi-implicit poration update, rate ``1/tau_ep`` while poration
    dominates and ``1/tau_res`` otherwise."""
    X = np.asarray(X, dtype=float)
    b = beta(u0, p)
    r = poration_rate(b, X, p)
    new = (X + dt * r * b) / (1.0 + dt * r)
    if np.any(new < -1e-14) or np.any(new > 1.0 + 1e-14) or not np.all(np.isfinite(new)):
        raise InvariantViolation("poration degree left [0, 1]")
    if np.any(new[b >= X] < X[b >= X] - 1e-14):
        raise InvariantViolation("poration degree decreased while beta >= X")
    return np.clip(new, 0.0, 1.0)


def quadrature_weights(k: int, dt: float, rule: str = "trapezoid") -> np.ndarray:
    """Weights over ``tau_0..tau_k`` for ``int_0^{t_k} . dtau``."""
    w = np.full(k + 1, dt)
    if rule == "trapezoid":
        w[0] *= 0.5
        w[-1] *= 0.5
        if k == 0:
            w[0] = 0.0
    elif rule == "rectangle":
        w[-1] = 0.0
    else:
        raise ValueError(f"unknown quadrature {rule!r}")
    return w


def kernel_B(fld: fem.CellField) -> np.ndarray:
    """``(int sigma d_1 chi, int sigma d_2 chi)`` for one kernel field."""
    return np.array([fem.volume_flux_integral(fld, i) for i in range(2)])


def memory_u0(row, g: float, L: float, dt: float, z=None,
              rule: str = "trapezoid") -> np.ndarray:
    """Membrane jump from the current kernel row ``(n_nodes, k+1)``."""
    row = np.asarray(row, dtype=float)
    u0 = (g / L) * (row @ quadrature_weights(row.shape[1] - 1, dt, rule))
    if z is not None:
        u0 = u0 + z
    return u0


def sigma_eff(A, B_row, dt: float, rule: str = "trapezoid") -> np.ndarray:
    """``A + sum_m w_m B(t_k, tau_m)``; ``B_row`` has tau as its last axis."""
    B_row = np.asarray(B_row, dtype=float)
    k = B_row.shape[-1] - 1
    if k == 0:
        return np.array(A, dtype=float, copy=True)
    return np.asarray(A) + B_row @ quadrature_weights(k, dt, rule)


def avg_membrane_conductivity(X, weights, p: ModelParams) -> float:
    """Interface mean of ``S_m(X)`` with lumped node weights."""
    weights = np.asarray(weights, dtype=float)
    return float(weights @ membrane_conductivity(X, p) / weights.sum())


class _JumpMap:
    """Jump -> (membrane current, volume flux) map, either from the dense
    response matrices or from direct batched solves."""

    def __init__(self, fact: fem.Factorization, mode: str, threads: int = 1):
        self.fact = fact
        self.mode = mode
        self.threads = max(1, int(threads))
        self.response = fem.jump_response(fact)

    def __call__(self, J):
        if self.mode == "response":
            return self.response.apply(J)
        return self._solve(J)

    def rows(self, slab):
        """Map applied to the rows of ``slab`` (shape ``(k, n_nodes)``);
        returns ``(I_m, volume flux)`` with shapes ``(k, n_nodes)`` and
        ``(k, 2)``."""
        if self.mode == "response":
            r = self.response
            return slab @ r.flux_matrix.T, slab @ r.volume_flux.T
        I, V = self._solve(slab.T)
        return I.T, V.T

    def _solve(self, J):
        J = np.asarray(J, dtype=float)
        if J.ndim == 1 or self.threads == 1 or J.shape[1] < 2 * self.threads:
            return fem.solve_jumps(self.fact, J)
        I = np.empty_like(J)
        V = np.empty((2,) + J.shape[1:])
        chunks = np.array_split(np.arange(J.shape[1]), self.threads)

        def work(cols):
            I[:, cols], V[:, cols] = fem.solve_jumps(self.fact, J[:, cols])

        with ThreadPoolExecutor(self.threads) as pool:
            list(pool.map(work, chunks))
        return I, V


def stability_number(mu_max: float, p: ModelParams) -> float:
    """Ratio ``dt mu_max / (c_m (2 + dt S_L / c_m))``; the explicit flux
    term is stable when this is at most 1."""
    return p.dt * mu_max / (p.c_m * (2.0 + p.dt * p.S_L / p.c_m))


def z_evolution(V_in, X_path, jump_map, dt: float, n_steps: int,
                p: ModelParams):
    """Evolve the initial-data jump ``z`` for a given poration path.

    ``jump_map`` maps a jump to ``(I_m, volume flux)`` (for example
    :func:`fem.jump_response(...).apply`).  Returns ``(z, C)`` with
    ``z[k]`` the jump and ``C[k] = int sigma grad z`` at ``t_k``.
    """
    z = np.empty((n_steps + 1, len(V_in)))
    C = np.empty((n_steps + 1, 2))
    z[0] = V_in
    for k in range(n_steps + 1):
        I, C[k] = jump_map(z[k])
        if k < n_steps:
            Sm = membrane_conductivity(X_path[k], p)
            z[k + 1] = step_chi(z[k], I, Sm, dt, p.c_m)
    return z, C


# -- driver ----------------------------------------------------------------

def prepare_cell(p: ModelParams, mesh: UnitCellMesh | None = None):
    """Mesh, factorization, correctors, ``A`` and ``A_ins`` for ``p``."""
    mesh = mesh if mesh is not None else build_unit_cell(p.mesh_h, p.radius)
    system = fem.assemble(mesh, p.sigma_c, p.sigma_e)
    fact = fem.factorize(system)
    corr = cell_static.compute_correctors(fact)
    A = cell_static.effective_A(corr, system)
    A_ins = cell_static.insulating_A(mesh, p.sigma_e)
    corr.A_insulating = A_ins
    return mesh, system, fact, corr


def pole_node(mesh: UnitCellMesh) -> int:
    """Interface position closest to the pole ``(0.75, 0.5)``."""
    pts = mesh.vertices[mesh.interface_nodes]
    return int(np.argmin(np.hypot(pts[:, 0] - POLE[0], pts[:, 1] - POLE[1])))


def run_two_plates(p: ModelParams, mesh: UnitCellMesh | None = None,
                   threads: int = 1, prepared=None,
                   kernel_history: str = "B11") -> RunResult:
    """Time-march the parallel-plate problem and return all histories.

    Parameters
    ----------
    p : ModelParams
    mesh : UnitCellMesh, optional
        Built from ``p.mesh_h`` when absent.
    threads : int
        Worker threads for the per-column solves of the direct solver.
    prepared : tuple, optional
        Output of :func:`prepare_cell`, to share one factorization between
        runs on the same cell.
    kernel_history : {"B11", "full", "none"}
        How much of the ``B(t_k, tau_m)`` triangle to keep (it grows as
        the square of the step count).  ``B(t_k, 0)`` is always kept.
    """
    if prepared is None:
        prepared = prepare_cell(p, mesh)
    mesh, system, fact, corr = prepared
    A = corr.A if corr.A is not None else cell_static.effective_A(corr, system)
    A_ins = corr.A_insulating
    if A_ins is None:
        A_ins = corr.A_insulating = cell_static.insulating_A(mesh, p.sigma_e)

    jm = _JumpMap(fact, p.kernel_solver, threads)
    mu_max = jm.response.max_rate()
    stab = stability_number(mu_max, p)
    if stab > 1.0:
        raise NumericalFailure(
            f"dt = {p.dt:g} exceeds the stability limit of the membrane "
            f"current term (dt * mu_max / (2 c_m) = {stab:.3g} > 1); "
            f"reduce dt below {2 * p.c_m / mu_max:.4g}")

    modes = 2 if p.full_tensor else 1
    n = p.n_steps
    dt = p.dt
    ng = mesh.n_interface
    weights = mesh.lumped_weights
    chi0 = np.stack([chi_initial(corr, p, j) for j in range(modes)])
    _, B00 = jm(chi0.T)                          # (2, modes)

    # chi[j, m] holds the jump of column tau_m; rows beyond k are unused
    chi = np.zeros((modes, n + 1, ng))
    chi[:, 0] = chi0
    if kernel_history not in ("full", "B11", "none"):
        raise ValueError(f"unknown kernel_history {kernel_history!r}")
    nb = {"full": 2, "B11": 1}.get(kernel_history, 0)
    B = np.zeros((nb, nb, n + 1, n + 1)) if nb else None
    B_tau0 = np.zeros((2, 2, n + 1))
    kernel = KernelTriangle(dt, chi0, B00, chi, B, B_tau0)

    X = np.empty((n + 1, ng))
    u0 = np.empty((n + 1, ng))
    zj = np.zeros((n + 1, ng))
    X[0] = p.x_init
    zj[0] = initial_jump(p, mesh.theta)
    has_z = bool(np.any(zj[0] != 0.0))
    C = np.zeros((n + 1, 2))
    sig = np.empty((n + 1, 2, 2))
    Bint = np.zeros((n + 1, 2, 2))
    Sm_avg = np.empty(n + 1)
    gL = p.g / p.L

    for k in range(n + 1):
        w = quadrature_weights(k, dt, p.quadrature)
        # one map evaluation per column gives I_m(t_k, tau_m) and B(t_k, tau_m)
        currents = []
        for j in range(modes):
            I, V = jm.rows(chi[j, :k + 1])
            V[k] = B00[:, j]
            currents.append(I)
            B_tau0[:, j, k] = V[0]
            if j < nb:
                B[:, j, k, :k + 1] = V[:, :nb].T
            Bint[k, :, j] = w @ V
        if has_z:
            Iz, C[k] = jm(zj[k])
        u0[k] = memory_u0(chi[0, :k + 1].T, gL, 1.0, dt, zj[k], p.quadrature)
        sig[k] = A if k == 0 else A + Bint[k]
        Sm_avg[k] = avg_membrane_conductivity(X[k], weights, p)
        if not (np.all(np.isfinite(u0[k])) and np.all(np.isfinite(sig[k]))):
            raise NumericalFailure("non-finite membrane jump or conductivity",
                                   step=k)
        if k == n:
            break
        Sm = membrane_conductivity(X[k], p)
        shrink = 1.0 / (1.0 + (dt / p.c_m) * Sm)
        for j in range(modes):
            slab = chi[j, :k + 1]
            slab -= (dt / p.c_m) * currents[j]
            slab *= shrink
            chi[j, k + 1] = chi0[j]
        if has_z:
            zj[k + 1] = step_chi(zj[k], Iz, Sm, dt, p.c_m)
        X[k + 1] = step_X(X[k], u0[k], dt, p)
    kernel.k = n

    pn = pole_node(mesh)
    history = EffectiveHistory(
        t=dt * np.arange(n + 1), sigma_eff=sig, A=A, B_integral=Bint,
        Sm_avg=Sm_avg, C=C, pole_u0=u0[:, pn].copy(), pole_node=pn)
    meta = {
        "mu_max": mu_max,
        "stability_number": stab,
        "membrane_current": "truncated" if truncation_active(p) else "untruncated",
        "n_interface": ng,
    }
    return RunResult(p, mesh, history, MembraneState(u0, X, zj), kernel,
                     A_ins, meta)


# -- output ----------------------------------------------------------------

def _fmt(x) -> str:
    return f"{x:.12g}"


def sigma_eff_csv(res: RunResult) -> str:
    h = res.history
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "sigma11", "sigma12", "sigma21", "sigma22",
                "B_integral11", "Sm_avg"])
    for k, t in enumerate(h.t):
        s = h.sigma_eff[k]
        w.writerow([_fmt(v) for v in (t, s[0, 0], s[0, 1], s[1, 0], s[1, 1],
                                       h.B_integral[k, 0, 0], h.Sm_avg[k])])
    return out.getvalue()


def membrane_csv(res: RunResult, stride: int = 1) -> str:
    m = res.membrane
    theta = res.mesh.theta
    ids = res.mesh.interface_nodes
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "node_id", "theta", "u0_jump", "X0"])
    steps = list(range(0, len(res.history.t), max(1, stride)))
    if steps[-1] != len(res.history.t) - 1:
        steps.append(len(res.history.t) - 1)
    for k in steps:
        t = _fmt(res.history.t[k])
        for s in range(len(ids)):
            w.writerow([t, int(ids[s]), _fmt(theta[s]), _fmt(m.u0_jump[k, s]),
                        _fmt(m.X0[k, s])])
    return out.getvalue()


def kernel_csv(res: RunResult, stride: int = 1) -> str:
    B11 = res.kernel.B11()
    t = res.history.t
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "tau", "B11"])
    idx = range(0, len(t), max(1, stride))
    for k in idx:
        for m in idx:
            if m > k:
                break
            w.writerow([_fmt(t[k]), _fmt(t[m]), _fmt(B11[k, m])])
    return out.getvalue()


def write_outputs(res: RunResult, out_dir: str | Path, kernel: bool = False,
                  membrane_stride: int = 1) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"sigma_eff.csv": sigma_eff_csv(res),
             "membrane.csv": membrane_csv(res, membrane_stride)}
    if kernel:
        files["kernel.csv"] = kernel_csv(res)
    paths = []
    for name, text in files.items():
        path = out_dir / name
        path.write_text(text)
        paths.append(path)
    return paths


def first_decay_time(B11_col: np.ndarray, t: np.ndarray, fraction: float) -> float:
    """First time at which ``|B11(t, 0)| < fraction |B11(0, 0)|`` (inf if
    never reached)."""
    ref = abs(B11_col[0])
    hit = np.flatnonzero(np.abs(B11_col) < fraction * ref)
    return float(t[hit[0]]) if hit.size else math.inf
