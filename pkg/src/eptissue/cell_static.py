"""Static correctors, the instantaneous effective tensor and reference values."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import comb, gamma

from . import fem
from .mesh import UnitCellMesh


@dataclass(eq=False)
class CorrectorSet:
    """Cell correctors for the two unit directions and the derived tensors."""

    M1: fem.CellField
    M2: fem.CellField
    A: np.ndarray | None = None
    A_insulating: np.ndarray | None = None

    def corrector(self, j: int) -> fem.CellField:
        return (self.M1, self.M2)[j]


def compute_correctors(f: fem.Factorization) -> CorrectorSet:
    """Solve both corrector problems (zero jump, mean-zero normalization)."""
    return CorrectorSet(fem.solve_corrector_rhs(f, 0), fem.solve_corrector_rhs(f, 1))


def _mean_conductivity(s: fem.TransmissionSystem) -> float:
    return float(np.sum(s.sigma_tri * s.areas))


def effective_A(c: CorrectorSet, s: fem.TransmissionSystem) -> np.ndarray:
    """``A_ij = int sigma (d_i M_j + delta_ij) dy``."""
    A = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            A[i, j] = fem.volume_flux_integral(c.corrector(j), i)
    A += _mean_conductivity(s) * np.eye(2)
    c.A = A
    return A


def energy_A(c: CorrectorSet) -> np.ndarray:
    """Variational form ``int sigma (grad M_i + e_i).(grad M_j + e_j)``."""
    s = c.M1.system
    g = [c.corrector(j).triangle_gradients() + np.eye(2)[j] for j in range(2)]
    w = s.sigma_tri * s.areas
    return np.array([[np.sum(w * np.einsum("ti,ti->t", g[i], g[j]))
                      for j in range(2)] for i in range(2)])


def insulating_A(m: UnitCellMesh, sigma_e: float) -> np.ndarray:
    """Effective tensor of the cell with a non-conducting inclusion."""
    N, areas, grads, local = fem.solve_exterior_neumann(m, sigma_e)
    A = np.empty((2, 2))
    for j in range(2):
        grad = np.einsum("ta,tai->ti", N[j][local], grads)
        for i in range(2):
            A[i, j] = sigma_e * np.sum(areas * grad[:, i])
    A += sigma_e * areas.sum() * np.eye(2)
    return A


# -- Rayleigh multipole reference for a square array of discs -------------

@lru_cache(maxsize=None)
def square_lattice_sums(kmax: int) -> tuple[float, ...]:
    """``S_{2k}``, k = 1..kmax, for the unit square lattice.

    ``S_2`` takes the value pi (the shape-dependent conditionally convergent
    sum fixed by the slab limit); higher sums come from the Weierstrass
    coefficient recurrence with ``g3 = 0``.
    """
    G4 = gamma(0.25) ** 8 / (960.0 * math.pi ** 2)
    c = {2: 3.0 * G4, 3: 0.0}
    for k in range(4, kmax + 1):
        c[k] = 3.0 / ((2 * k + 1) * (k - 3)) * sum(
            c[m] * c[k - m] for m in range(2, k - 1))
    out = [math.pi]
    for k in range(2, kmax + 1):
        out.append(c[k] / (2 * k - 1))
    return tuple(out)


def perrins_oracle(f: float, contrast: float, order: int = 3) -> float:
    """Effective conductivity / sigma_e of a square array of cylinders.

    Parameters
    ----------
    f : float
        Area fraction of the discs, ``0 < f < pi/4``.
    contrast : float
        ``sigma_c / sigma_e`` (0 for insulating discs).
    order : int
        Number of odd multipoles kept (orders 1, 3, ..., ``2*order - 1``).

    Returns
    -------
    float
        ``sigma_eff / sigma_e`` along a lattice axis.
    """
    if not 0.0 < f < math.pi / 4:
        raise ValueError("area fraction must lie in (0, pi/4)")
    if contrast < 0 or not math.isfinite(contrast):
        raise ValueError("contrast must be finite and >= 0")
    if contrast == 1.0:
        return 1.0
    value = _rayleigh(f, contrast, order)
    if f > 0.6:
        finer = _rayleigh(f, contrast, order + 2)
        if abs(finer - value) > 1e-4 * abs(finer):
            warnings.warn(f"multipole truncation at order {order} is not "
                          f"converged for f = {f}", RuntimeWarning, stacklevel=2)
    return value


def _rayleigh(f, contrast, order):
    a2 = f / math.pi
    T = (1.0 + contrast) / (1.0 - contrast)
    ls = [2 * n + 1 for n in range(order)]
    S = square_lattice_sums(ls[-1])
    M = np.zeros((order, order))
    for r, l in enumerate(ls):
        M[r, r] += T * a2 ** (-l)
        for q, m in enumerate(ls):
            M[r, q] += comb(l + m - 1, l, exact=True) * S[(l + m) // 2 - 1]
    rhs = np.zeros(order)
    rhs[0] = 1.0
    B1 = np.linalg.solve(M, rhs)[0]
    return 1.0 - 2.0 * math.pi * B1


def write_static_csv(rows, path: str | Path | None = None) -> str:
    """Write ``quantity,i,j,value`` rows; returns the text."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["quantity", "i", "j", "value"])
    for name, value in rows:
        value = np.atleast_2d(value)
        for i in range(value.shape[0]):
            for j in range(value.shape[1]):
                w.writerow([name, i + 1, j + 1, f"{value[i, j]:.12g}"])
    text = out.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
