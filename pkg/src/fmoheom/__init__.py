"""HEOM dynamics of excitonic networks with entanglement and coherence measures."""

from .model import (
    UNITS,
    BathSpec,
    ExcitonHamiltonian,
    MatsubaraExpansion,
    UnitSystem,
    average_energy_gap,
    bath_correlation,
    efficiency_parameter,
    fmo_hamiltonian,
    load_hamiltonian,
    matsubara_expansion,
    spectral_density,
)

__version__ = "0.1.0"
