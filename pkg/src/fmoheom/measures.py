"""Entropy, global entanglement, concurrence and coherence length.

Sites are numbered from 1 in every public signature, matching the usual FMO
labelling (C_12 is the concurrence of sites 1 and 2).  Logarithms are natural.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EIGENVALUE_CLAMP = 1e-9
DEFAULT_PAIRS = ((1, 2), (1, 3), (3, 4))
SNAPSHOT_THRESHOLD = 0.005


class InvalidStateError(ValueError):
    """A density matrix has an eigenvalue (or population) below -1e-9."""

    def __init__(self, message, time_index=None):
        self.time_index = time_index
        if time_index is not None:
            message = f"{message} (time index {time_index})"
        super().__init__(message)


class UndefinedMeasureError(ValueError):
    pass


def _entropy_terms(p, what):
    p = np.asarray(p, dtype=float)
    bad = p < -EIGENVALUE_CLAMP
    if np.any(bad):
        raise InvalidStateError(f"{what} {p[bad].min():.3g} below -{EIGENVALUE_CLAMP:g}")
    p = np.where(p > 0, p, 0.0)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


def von_neumann_entropy(rho) -> float:
    """-Tr rho ln rho, with eigenvalues in [-1e-9, 0) treated as zero."""
    return float(_entropy_terms(np.linalg.eigvalsh(np.asarray(rho)), "eigenvalue"))


def diagonal_entropy(rho) -> float:
    return float(_entropy_terms(np.real(np.diagonal(rho)), "population"))


def global_entanglement(rho) -> float:
    """Entropy of the site populations minus the von Neumann entropy."""
    return diagonal_entropy(rho) - von_neumann_entropy(rho)


def concurrence(rho, n: int, k: int) -> float:
    """2 |rho_nk| for sites n != k (1-based)."""
    rho = np.asarray(rho)
    size = rho.shape[0]
    if n == k:
        raise ValueError(f"concurrence needs two distinct sites, got ({n}, {k})")
    for s in (n, k):
        if not 1 <= s <= size:
            raise ValueError(f"site {s} outside 1..{size}")
    return float(2.0 * abs(rho[n - 1, k - 1]))


def coherence_length(rho) -> float:
    """(sum |rho_nk|)^2 / (N sum |rho_nk|^2), summed over all n, k in the site basis."""
    a = np.abs(np.asarray(rho))
    denom = a.shape[0] * np.sum(a * a)
    if denom == 0:
        raise UndefinedMeasureError("coherence length is undefined for the zero matrix")
    return float(np.sum(a) ** 2 / denom)


@dataclass
class MeasureSeries:
    times: np.ndarray
    global_entanglement: np.ndarray
    entropy: np.ndarray
    coherence_length: np.ndarray
    concurrences: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def index_at(self, t: float) -> int:
        return int(np.argmin(np.abs(self.times - t)))

    def columns(self) -> dict:
        cols = {
            "t_fs": self.times,
            "E": self.global_entanglement,
            "S": self.entropy,
            "L_rho": self.coherence_length,
        }
        for (n, k), series in self.concurrences.items():
            cols[f"C_{n}_{k}"] = series
        return cols


def normalize_pairs(pairs, n_sites):
    out = []
    for n, k in pairs:
        n, k = int(n), int(k)
        if n == k:
            raise ValueError(f"invalid concurrence pair ({n}, {k})")
        for s in (n, k):
            if not 1 <= s <= n_sites:
                raise ValueError(f"site {s} outside 1..{n_sites}")
        pair = (min(n, k), max(n, k))
        if pair not in out:
            out.append(pair)
    return out


def trajectory_measures(traj, pairs=DEFAULT_PAIRS) -> MeasureSeries:
    """Apply every measure along a trajectory."""
    states = np.asarray(traj.states)
    n = states.shape[1]
    pairs = normalize_pairs(pairs, n)
    evals = np.linalg.eigvalsh(states)
    pops = np.real(np.einsum("tii->ti", states))
    for values, what in ((evals, "eigenvalue"), (pops, "population")):
        bad = np.flatnonzero((values < -EIGENVALUE_CLAMP).any(axis=1))
        if bad.size:
            i = int(bad[0])
            raise InvalidStateError(f"{what} {values[i].min():.3g} below -{EIGENVALUE_CLAMP:g} "
                                    f"at t = {traj.times[i]:g} fs", time_index=i)
    entropy = _entropy_terms(evals, "eigenvalue")
    ent = _entropy_terms(pops, "population") - entropy
    mags = np.abs(states)
    sq = (mags * mags).sum(axis=(1, 2))
    zero = np.flatnonzero(sq == 0)
    if zero.size:
        raise UndefinedMeasureError(f"zero density matrix at time index {int(zero[0])}")
    length = mags.sum(axis=(1, 2)) ** 2 / (n * sq)
    conc = {(a, b): 2.0 * mags[:, a - 1, b - 1] for a, b in pairs}
    return MeasureSeries(np.asarray(traj.times, dtype=float), ent, entropy, length, conc,
                         dict(getattr(traj, "metadata", {})))


@dataclass
class DensitySnapshot:
    time: float
    requested_time: float
    on_grid: bool
    values: np.ndarray
    magnitudes: np.ndarray
    below_threshold: np.ndarray
    threshold: float

    def format_table(self) -> str:
        n = self.magnitudes.shape[0]
        lines = [f"# |rho_nk| at t = {self.time:g} fs; '.' marks entries below {self.threshold:g}"]
        if not self.on_grid:
            lines.append(f"# warning: requested t = {self.requested_time:g} fs is off the output grid; "
                         "nearest sample shown")
        lines.append("     " + " ".join(f"{k:>8d}" for k in range(1, n + 1)))
        for i in range(n):
            cells = ["       ." if self.below_threshold[i, j] else f"{self.magnitudes[i, j]:8.4f}"
                     for j in range(n)]
            lines.append(f"{i + 1:>4d} " + " ".join(cells))
        return "\n".join(lines)


def density_snapshot(traj, t: float, threshold: float = SNAPSHOT_THRESHOLD) -> DensitySnapshot:
    """|rho_nk| at time t with entries below ``threshold`` flagged.

    Off-grid times use the nearest stored sample and set ``on_grid=False``.
    """
    i = int(np.argmin(np.abs(traj.times - t)))
    on_grid = bool(np.isclose(traj.times[i], t, rtol=0.0, atol=1e-9 * max(1.0, abs(t))))
    values = np.array(traj.states[i])
    mags = np.abs(values)
    return DensitySnapshot(float(traj.times[i]), float(t), on_grid, values, mags, mags < threshold,
                           threshold)
