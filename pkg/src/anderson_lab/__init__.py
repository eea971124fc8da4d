"""Numerical lab for lattice Anderson Hamiltonians -eps^-2 Laplacian + xi with Dirichlet exterior."""

__version__ = "0.1.0"

from .eigensolve import ContinuumReference, SpectrumResult, continuum_reference, lowest_k
from .fluctuations import EnsembleConfig, EnsembleResult, run_ensemble
from .hamiltonian import SparseHamiltonian, assemble
from .lattice import ContinuumDomain, LatticeDomain, discretize
from .potential import PotentialModel, PotentialSample, sample_potential, truncate

__all__ = [
    "ContinuumDomain", "ContinuumReference", "EnsembleConfig", "EnsembleResult", "LatticeDomain",
    "PotentialModel", "PotentialSample", "SparseHamiltonian", "SpectrumResult", "assemble",
    "continuum_reference", "discretize", "lowest_k", "run_ensemble", "sample_potential", "truncate",
]
