"""Homogenized electrical response of periodic cell tissue under
electroporation pulses."""

from .model import ConfigError, InvariantViolation, ModelParams, preset
from .mesh import MeshError, UnitCellMesh, build_unit_cell, mesh_diagnostics
from .fem import (AssemblyError, CellField, TransmissionSystem, assemble,
                  factorize, solve_corrector_rhs, solve_with_jump,
                  volume_flux_integral)
from .cell_static import (CorrectorSet, compute_correctors, effective_A,
                          insulating_A, perrins_oracle)
from .evolution import (EffectiveHistory, KernelTriangle, MembraneState,
                        NumericalFailure, RunResult, run_two_plates)

__all__ = [
    "AssemblyError", "CellField", "ConfigError", "CorrectorSet",
    "EffectiveHistory", "InvariantViolation", "KernelTriangle",
    "MembraneState", "MeshError", "ModelParams", "NumericalFailure",
    "RunResult", "TransmissionSystem", "UnitCellMesh", "assemble",
    "build_unit_cell", "compute_correctors", "effective_A", "factorize",
    "insulating_A", "mesh_diagnostics", "perrins_oracle", "preset",
    "run_two_plates", "solve_corrector_rhs", "solve_with_jump",
    "volume_flux_integral",
]
__version__ = "0.1.0"
