"""Basis-set-free electronic structure with adaptive multiwavelet orbitals.

Orbitals live in an adaptive multiwavelet representation and are refined
against reduced density matrices produced by a statevector VQE or FCI
solver, alternating until the total energy converges.
"""

__version__ = "0.1.0"

from . import mra

__all__ = ["mra", "__version__"]
