"""ADO index enumeration and neighbour tables."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np

DEFAULT_MAX_ADOS = 400_000


class CapacityError(MemoryError):
    """The requested hierarchy has more ADOs than the configured budget."""

    def __init__(self, count, budget):
        self.count = count
        self.budget = budget
        super().__init__(f"hierarchy would hold {count} ADOs, above the budget of {budget}; "
                         "lower the truncation level or the Matsubara count")


def hierarchy_size(n_modes: int, depth: int) -> int:
    """Number of non-negative integer vectors of length n_modes with sum <= depth."""
    return comb(n_modes + depth, depth)


@dataclass(frozen=True)
class Hierarchy:
    """Index set and neighbour tables for a truncated hierarchy.

    Modes are ordered site-major: mode ``m`` couples through site
    ``m // (K + 1)`` and carries exponential term ``m % (K + 1)``.

    Attributes
    ----------
    labels : ndarray of int, shape (n_ados, n_modes)
        Exponent vectors, grouped by depth and lexicographic within a depth.
        Row 0 is the zero vector (the physical density matrix).
    up, down : ndarray of intp, shape (n_ados, n_modes)
        Index of the label with exponent ``m`` raised / lowered by one, or -1
        when that neighbour lies outside the hierarchy.
    """

    n_sites: int
    n_matsubara: int
    depth: int
    labels: np.ndarray
    up: np.ndarray
    down: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.labels.shape[1]

    @property
    def n_ados(self) -> int:
        return self.labels.shape[0]

    @property
    def mode_site(self) -> np.ndarray:
        return np.arange(self.n_modes, dtype=np.intp) // (self.n_matsubara + 1)

    @property
    def mode_term(self) -> np.ndarray:
        return np.arange(self.n_modes, dtype=np.intp) % (self.n_matsubara + 1)

    @property
    def levels(self) -> np.ndarray:
        return self.labels.sum(axis=1)

    def index_of(self, label) -> int:
        """Position of an exponent vector (linear search; for tests and tooling)."""
        label = np.asarray(label)
        hits = np.flatnonzero((self.labels == label).all(axis=1))
        if hits.size == 0:
            raise KeyError(tuple(label))
        return int(hits[0])


def build_hierarchy(n_sites: int, n_matsubara: int, depth: int,
                    max_ados: int = DEFAULT_MAX_ADOS) -> Hierarchy:
    if depth < 1:
        raise ValueError(f"truncation level must be >= 1, got {depth}")
    if n_matsubara < 0:
        raise ValueError(f"Matsubara count must be >= 0, got {n_matsubara}")
    if n_sites < 1:
        raise ValueError("need at least one site")
    n_modes = n_sites * (n_matsubara + 1)
    count = hierarchy_size(n_modes, depth)
    if count > max_ados:
        raise CapacityError(count, max_ados)

    labels = np.zeros((count, n_modes), dtype=np.int32)
    row = 1
    for level in range(1, depth + 1):
        start = row
        # multisets of modes, emitted in the lexicographic order of their
        # sorted mode tuples; re-sort on exponent vectors below
        for combo in combinations_with_replacement(range(n_modes), level):
            for m in combo:
                labels[row, m] += 1
            row += 1
        block = labels[start:row]
        order = np.lexsort(block.T[::-1])
        labels[start:row] = block[order]

    lookup = {lab.tobytes(): i for i, lab in enumerate(labels)}
    up = np.full((count, n_modes), -1, dtype=np.intp)
    down = np.full((count, n_modes), -1, dtype=np.intp)
    levels = labels.sum(axis=1)
    for i in range(count):
        lab = labels[i]
        for m in range(n_modes):
            if levels[i] < depth:
                lab[m] += 1
                up[i, m] = lookup[lab.tobytes()]
                lab[m] -= 1
            if lab[m] > 0:
                lab[m] -= 1
                down[i, m] = lookup[lab.tobytes()]
                lab[m] += 1
    return Hierarchy(n_sites, n_matsubara, depth, labels, up, down)
