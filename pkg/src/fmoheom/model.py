"""Excitonic system, Drude-Lorentz bath and the closed-form scalar quantities.

Energies are in cm^-1, times in fs and hbar = 1.  A single :class:`UnitSystem`
instance (``UNITS``) owns the conversion between the two.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate


class DegenerateParametersError(ValueError):
    """beta*gamma sits on a Matsubara pole, so the expansion is singular."""


class QuadratureError(RuntimeError):
    """Numerical quadrature of the bath correlation function did not converge."""


@dataclass(frozen=True)
class UnitSystem:
    """Physical constants in spectroscopic units.

    Attributes
    ----------
    k_B : float
        Boltzmann constant in cm^-1 / K.
    cm1_to_rad_per_fs : float
        Angular frequency (rad/fs) generated by an energy of 1 cm^-1,
        i.e. ``2 pi c`` with ``c`` in cm/fs.
    """

    k_B: float = 0.695034800
    cm1_to_rad_per_fs: float = 2.0 * math.pi * 2.99792458e10 * 1e-15

    def beta(self, temperature: float) -> float:
        """Inverse temperature in (cm^-1)^-1."""
        return 1.0 / (self.k_B * temperature)

    def to_rad_per_fs(self, energy_cm1):
        return energy_cm1 * self.cm1_to_rad_per_fs


UNITS = UnitSystem()


@dataclass(frozen=True)
class ExcitonHamiltonian:
    """Site-basis excitonic Hamiltonian in cm^-1.

    ``matrix`` holds site energies on the diagonal and couplings off it, without
    the global ``diagonal_offset``.
    """

    matrix: np.ndarray
    diagonal_offset: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"Hamiltonian must be square, got shape {m.shape}")
        if m.shape[0] < 1:
            raise ValueError("Hamiltonian must have at least one site")
        if not np.array_equal(m, m.T):
            raise ValueError("Hamiltonian must be exactly symmetric")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n_sites(self) -> int:
        return self.matrix.shape[0]

    def with_offset(self) -> np.ndarray:
        """The full matrix including the diagonal offset."""
        return self.matrix + self.diagonal_offset * np.eye(self.n_sites)

    def checksum(self) -> str:
        """Short, stable digest of the matrix and offset."""
        text = " ".join(f"{x:.17g}" for x in self.matrix.ravel())
        text += f" offset {self.diagonal_offset:.17g}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def without_couplings(self) -> "ExcitonHamiltonian":
        return ExcitonHamiltonian(np.diag(np.diag(self.matrix)), self.diagonal_offset,
                                  name=f"{self.name}-diagonal")


@dataclass(frozen=True)
class BathSpec:
    """Identical overdamped Drude-Lorentz bath attached to every site.

    Parameters
    ----------
    lam : float
        Reorganization energy, cm^-1.  Zero decouples the bath.
    gamma : float
        Cut-off frequency, cm^-1.
    temperature : float
        Kelvin.
    n_matsubara : int
        Number K of Matsubara terms kept beyond the Drude term.
    """

    lam: float
    gamma: float
    temperature: float
    n_matsubara: int = 0
    units: UnitSystem = field(default=UNITS, repr=False, compare=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"reorganization energy must be >= 0, got {self.lam}")
        if self.gamma <= 0:
            raise ValueError(f"cut-off frequency must be > 0, got {self.gamma}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.n_matsubara < 0 or int(self.n_matsubara) != self.n_matsubara:
            raise ValueError(f"n_matsubara must be a non-negative integer, got {self.n_matsubara}")

    @property
    def beta(self) -> float:
        return self.units.beta(self.temperature)

    def replace(self, **changes) -> "BathSpec":
        params = dict(lam=self.lam, gamma=self.gamma, temperature=self.temperature,
                      n_matsubara=self.n_matsubara, units=self.units)
        params.update(changes)
        return BathSpec(**params)


@dataclass(frozen=True)
class MatsubaraExpansion:
    """C(tau) = sum_k coefficients[k] * exp(-rates[k] * tau), tau in 1/cm^-1.

    ``terminator_rate`` is the summed tail ``sum_{k>K} c_k / nu_k`` (cm^-1)
    that is folded into an instantaneous dissipator.
    """

    coefficients: np.ndarray
    rates: np.ndarray
    terminator_rate: float

    @property
    def n_terms(self) -> int:
        return len(self.rates)

    def correlation(self, tau_fs, units: UnitSystem = UNITS):
        """Reconstructed correlation function (cm^-2) at times in fs."""
        tau = np.asarray(tau_fs, dtype=float) * units.cm1_to_rad_per_fs
        return np.sum(self.coefficients[:, None] * np.exp(-np.outer(self.rates, tau.ravel())),
                      axis=0).reshape(tau.shape)


FMO8_MATRIX = np.array([
    [310.0, -80.3, 3.5, -4.0, 4.5, -10.2, -4.9, 21.0],
    [-80.3, 230.0, 23.5, 6.7, 0.5, 7.5, 1.5, 3.3],
    [3.5, 23.5, 0.0, -49.8, -1.5, -6.5, 1.2, 0.7],
    [-4.0, 6.7, -49.8, 180.0, 63.4, -13.3, -42.2, -1.2],
    [4.5, 0.5, -1.5, 63.4, 450.0, 55.8, 4.7, 2.8],
    [-10.2, 7.5, -6.5, -13.3, 55.8, 320.0, 33.0, -7.3],
    [-4.9, 1.5, 1.2, -42.2, 4.7, 33.0, 270.0, -8.7],
    [21.0, 3.3, 0.7, -1.2, 2.8, -7.3, -8.7, 505.0],
])
FMO8_OFFSET = 12195.0


def fmo_hamiltonian() -> ExcitonHamiltonian:
    """The 8-site FMO monomer Hamiltonian (cm^-1), offset 12195 cm^-1."""
    return ExcitonHamiltonian(FMO8_MATRIX.copy(), FMO8_OFFSET, name="fmo8")


BUILTIN_MODELS = {"fmo8": fmo_hamiltonian}


def load_hamiltonian(source) -> ExcitonHamiltonian:
    """Load a built-in model by name or a plain-text matrix file.

    The file format is a first line ``N offset`` followed by N rows of N
    whitespace-separated values in cm^-1.
    """
    if isinstance(source, str) and source in BUILTIN_MODELS:
        return BUILTIN_MODELS[source]()
    path = Path(source)
    if not path.exists():
        raise ValueError(f"unknown model {source!r}: not a built-in name "
                         f"({', '.join(BUILTIN_MODELS)}) and no such file")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty Hamiltonian file")
    head = lines[0].split()
    if len(head) != 2:
        raise ValueError(f"{path}:1: expected 'N offset', got {lines[0]!r}")
    n = int(head[0])
    offset = float(head[1])
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: expected {n} matrix rows, found {len(lines) - 1}")
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        vals = [float(x) for x in ln.split()]
        if len(vals) != n:
            raise ValueError(f"{path}:{i}: expected {n} values, got {len(vals)}")
        rows.append(vals)
    return ExcitonHamiltonian(np.array(rows), offset, name=path.stem)


def save_hamiltonian(h: ExcitonHamiltonian, path) -> None:
    lines = [f"{h.n_sites} {h.diagonal_offset:.17g}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in h.matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def spectral_density(omega, bath: BathSpec):
    """Drude-Lorentz spectral density 2 lam gamma omega / (gamma^2 + omega^2)."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise ValueError("spectral density is defined for omega >= 0")
    return 2.0 * bath.lam * bath.gamma * omega / (bath.gamma**2 + omega**2)


def _x_coth_x(x):
    return 1.0 if x == 0.0 else x / math.tanh(x)


def bath_correlation(tau_fs: float, bath: BathSpec, epsabs: float | None = None,
                     limlst: int = 200) -> complex:
    """Bath correlation function C(tau) in cm^-2 by direct quadrature.

    Both parts are evaluated as Fourier integrals over [0, inf) with QUADPACK's
    QAWF routine, so no finite cut-off is imposed on the slowly decaying
    integrand.  This is the reference the Matsubara expansion is checked
    against.  The real part diverges logarithmically at tau = 0.
    """
    if tau_fs < 0:
        raise ValueError("tau must be >= 0")
    if bath.lam == 0.0:
        return 0j
    if tau_fs == 0.0:
        raise QuadratureError("Re C(tau) diverges logarithmically at tau = 0 for a Drude-Lorentz bath")
    lam, gam, beta = bath.lam, bath.gamma, bath.beta
    wvar = tau_fs * bath.units.cm1_to_rad_per_fs
    scale = lam * gam
    if epsabs is None:
        epsabs = 1e-12 * scale

    def re_integrand(w):
        # J(w) coth(beta w / 2) / pi, written to stay finite at w = 0
        return (2.0 * lam * gam / (gam**2 + w**2)) * (2.0 / beta) * _x_coth_x(0.5 * beta * w) / math.pi

    def im_integrand(w):
        return 2.0 * lam * gam * w / (gam**2 + w**2) / math.pi

    re, re_err, *info_re = integrate.quad(re_integrand, 0.0, np.inf, weight="cos", wvar=wvar,
                                          epsabs=epsabs, limlst=limlst, full_output=1)
    im, im_err, *info_im = integrate.quad(im_integrand, 0.0, np.inf, weight="sin", wvar=wvar,
                                          epsabs=epsabs, limlst=limlst, full_output=1)
    tol = 1e-6 * scale
    if not (np.isfinite(re) and np.isfinite(im)) or re_err > tol or im_err > tol:
        raise QuadratureError(f"quadrature did not converge at tau={tau_fs} fs "
                              f"(error estimates {re_err:.3g}, {im_err:.3g})")
    return complex(re, -im)


def _check_poles(beta_gamma: float, rtol: float = 1e-8) -> None:
    k = round(beta_gamma / (2.0 * math.pi))
    if k >= 1 and abs(beta_gamma - 2.0 * math.pi * k) <= rtol * beta_gamma:
        raise DegenerateParametersError(
            f"beta*gamma = {beta_gamma:.12g} coincides with the Matsubara pole 2*pi*{k}; "
            "perturb the temperature (beta) slightly")


def matsubara_expansion(bath: BathSpec) -> MatsubaraExpansion:
    """Drude term plus K Matsubara terms, with the tail summed into a terminator."""
    lam, gam, beta = bath.lam, bath.gamma, bath.beta
    bg = beta * gam
    _check_poles(bg)
    K = bath.n_matsubara
    rates = np.empty(K + 1)
    coeffs = np.empty(K + 1, dtype=complex)
    rates[0] = gam
    coeffs[0] = lam * gam * (1.0 / math.tan(0.5 * bg) - 1j)
    for k in range(1, K + 1):
        nu = 2.0 * math.pi * k / beta
        rates[k] = nu
        coeffs[k] = 4.0 * lam * gam / beta * nu / (nu**2 - gam**2)
    # sum over all k of Re c_k / nu_k equals 2 lam / (beta gamma)
    kept = lam / math.tan(0.5 * bg) + sum(coeffs[k].real / rates[k] for k in range(1, K + 1))
    terminator = 2.0 * lam / bg - kept
    return MatsubaraExpansion(coeffs, rates, float(terminator))


def average_energy_gap(h: ExcitonHamiltonian) -> float:
    """Trace-norm average gap ||H - Tr(H) I / N||_* / (N - 1), cm^-1."""
    n = h.n_sites
    if n < 2:
        raise ValueError("average energy gap needs at least two sites")
    m = h.matrix
    traceless = m - np.trace(m) / n * np.eye(n)
    return float(np.linalg.svd(traceless, compute_uv=False).sum() / (n - 1))


@dataclass(frozen=True)
class EfficiencyParameter:
    value: float
    ln_value: float
    ln_gamma_over_lambda: float
    ln_gamma_beta: float


def efficiency_parameter(bath: BathSpec, g: float) -> EfficiencyParameter:
    """Lambda = lam / (beta gamma g) along with the usual log diagnostics."""
    if g <= 0:
        raise ValueError("energy gap g must be positive")
    gb = bath.gamma * bath.beta
    value = bath.lam / (gb * g)
    with np.errstate(divide="ignore"):
        ln_value = float(np.log(value)) if value > 0 else -math.inf
        ln_ratio = math.log(bath.gamma / bath.lam) if bath.lam > 0 else math.inf
    return EfficiencyParameter(value, ln_value, ln_ratio, math.log(gb))
