import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmoheom.heom import PropagationConfig, SystemBathModel, Trajectory, propagate_from_site
from fmoheom.measures import (
    InvalidStateError,
    UndefinedMeasureError,
    coherence_length,
    concurrence,
    density_snapshot,
    diagonal_entropy,
    global_entanglement,
    trajectory_measures,
    von_neumann_entropy,
)
from fmoheom.model import UNITS, BathSpec, ExcitonHamiltonian, fmo_hamiltonian
from fmoheom.validation import random_density_matrices

N = 8


def site(n, k=1):
    rho = np.zeros((n, n), dtype=complex)
    rho[k - 1, k - 1] = 1.0
    return rho


def uniform(n):
    return np.ones((n, n), dtype=complex) / n


seeds = st.integers(0, 2**32 - 1)


def random_state(seed, n=N, max_rank=None):
    return random_density_matrices(1, n, np.random.default_rng(seed), max_rank)[0]


# ---------------------------------------------------------------- pointwise examples

def test_entropy_examples():
    assert von_neumann_entropy(site(N)) == 0.0
    assert von_neumann_entropy(np.eye(N) / N) == pytest.approx(math.log(8), abs=1e-12)
    assert von_neumann_entropy(np.diag([0.5, 0.5] + [0.0] * 6)) == pytest.approx(math.log(2), abs=1e-15)


def test_entropy_clamp_window():
    rho = np.diag([1.0 + 5e-10, -5e-10, 0, 0])
    assert von_neumann_entropy(rho) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(InvalidStateError):
        von_neumann_entropy(np.diag([1.0 + 2e-9, -2e-9, 0, 0]))


def test_global_entanglement_examples():
    assert global_entanglement(site(N)) == 0.0
    assert abs(global_entanglement(np.eye(N) / N)) < 1e-12
    assert global_entanglement(uniform(N)) == pytest.approx(math.log(8), abs=1e-12)
    # oracle: J/N is rank one
    w = np.linalg.eigvalsh(uniform(N))
    assert np.sum(w > 1e-12) == 1


def test_concurrence_examples():
    for a in range(1, N + 1):
        for b in range(a + 1, N + 1):
            assert concurrence(np.diag(np.arange(1.0, N + 1) / 36), a, b) == 0.0
            assert concurrence(uniform(N), a, b) == pytest.approx(0.25, abs=1e-15)
    psi = np.zeros(N)
    psi[:2] = 1 / math.sqrt(2)
    rho = np.outer(psi, psi)
    assert concurrence(rho, 1, 2) == pytest.approx(1.0, abs=1e-15)
    assert concurrence(rho, 1, 3) == 0.0
    with pytest.raises(ValueError):
        concurrence(rho, 2, 2)
    with pytest.raises(ValueError):
        concurrence(rho, 0, 2)


def test_coherence_length_limits():
    assert coherence_length(np.eye(N) / N) == pytest.approx(1.0, abs=1e-15)
    assert coherence_length(uniform(N)) == pytest.approx(N, abs=1e-12)
    assert coherence_length(site(N)) == pytest.approx(1 / N, abs=1e-15)
    with pytest.raises(UndefinedMeasureError):
        coherence_length(np.zeros((N, N)))


# ---------------------------------------------------------------- properties

def test_bounds_over_random_states():
    states = random_density_matrices(100_000, N, np.random.default_rng(7))
    s = trajectory_measures(Trajectory(np.arange(len(states), dtype=float), states))
    assert s.coherence_length.min() >= 1 / N - 1e-12
    assert s.coherence_length.max() <= N + 1e-12
    assert s.global_entanglement.min() >= 0.0
    assert s.entropy.min() >= -1e-9 and s.entropy.max() <= math.log(N) + 1e-9
    for series in s.concurrences.values():
        assert series.min() >= 0.0 and series.max() <= 1.0 + 1e-12


@settings(max_examples=100)
@given(seeds)
def test_diagonal_states_carry_no_entanglement(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(N))
    assert global_entanglement(np.diag(p)) == pytest.approx(0.0, abs=1e-12)
    assert von_neumann_entropy(np.diag(p)) == pytest.approx(diagonal_entropy(np.diag(p)), abs=1e-12)


@settings(max_examples=100)
@given(seeds, st.permutations(range(N)))
def test_permutation_invariance(seed, perm):
    rho = random_state(seed)
    perm = np.array(perm)
    swapped = rho[np.ix_(perm, perm)]
    assert global_entanglement(swapped) == pytest.approx(global_entanglement(rho), abs=1e-10)
    assert von_neumann_entropy(swapped) == pytest.approx(von_neumann_entropy(rho), abs=1e-10)
    assert coherence_length(swapped) == pytest.approx(coherence_length(rho), rel=1e-12)
    inverse = np.argsort(perm)
    for n, k in [(1, 2), (3, 7), (2, 8)]:
        assert concurrence(swapped, inverse[n - 1] + 1, inverse[k - 1] + 1) == concurrence(rho, n, k)


@settings(max_examples=100)
@given(seeds, st.integers(1, N), st.floats(1e-12, 1e-8))
def test_continuity(seed, rank, eps):
    rho = random_state(seed, max_rank=rank)
    sigma = random_density_matrices(1, N, np.random.default_rng([seed, 1]))[0]
    # mixing keeps the perturbed matrix a valid state
    d = sigma - rho
    t = eps / np.linalg.norm(d)
    other = rho + t * d
    assert np.linalg.norm(other - rho) <= 1e-8 * (1 + 1e-6)
    for f in (global_entanglement, von_neumann_entropy, coherence_length):
        assert abs(f(other) - f(rho)) < 1e-6
    assert abs(concurrence(other, 1, 2) - concurrence(rho, 1, 2)) < 1e-6


def test_invalid_state_reports_time_index():
    states = np.array([site(3), site(3), np.diag([1.1, -0.1, 0.0])])
    with pytest.raises(InvalidStateError) as info:
        trajectory_measures(Trajectory(np.array([0.0, 1.0, 2.0]), states), [(1, 2)])
    assert info.value.time_index == 2


# ---------------------------------------------------------------- trajectories

def test_resonant_dimer_concurrence():
    J = 40.0
    h = ExcitonHamiltonian(np.array([[0.0, J], [J, 0.0]]))
    model = SystemBathModel(h, BathSpec(0.0, 100.0, 300.0))
    w = J * UNITS.cm1_to_rad_per_fs
    rabi = math.pi / w
    n_half = 100
    dt = rabi / (2 * n_half)
    traj = propagate_from_site(1, model, PropagationConfig(dt=dt, t_max=4 * n_half * dt, depth=1))
    c = trajectory_measures(traj, [(1, 2)]).concurrences[(1, 2)]
    # closed form: rho_12 = i cos(wt) sin(wt), so C_12 = |sin(2 w t)|
    assert np.abs(c - np.abs(np.sin(2 * w * traj.times))).max() < 1e-6
    assert c.max() == pytest.approx(1.0, abs=1e-6)
    assert c[2 * n_half] == pytest.approx(0.0, abs=1e-6)  # one Rabi period
    assert c[n_half // 2] == pytest.approx(1.0, abs=1e-6)


def test_fmo_entanglement_rises_early():
    model = SystemBathModel(fmo_hamiltonian(), BathSpec(40.0, 100.0, 310.0, 0))
    assert -1.4 < math.log(model.bath.gamma * model.bath.beta) < 0
    traj = propagate_from_site(1, model, PropagationConfig(t_max=2000.0, output_stride=5.0, depth=5))
    s = trajectory_measures(traj)
    assert s.global_entanglement[0] == 0.0
    assert s.times[np.argmax(s.global_entanglement)] <= 150.0


def test_default_pairs_and_columns():
    traj = Trajectory(np.array([0.0]), site(N)[None])
    s = trajectory_measures(traj)
    assert list(s.columns()) == ["t_fs", "E", "S", "L_rho", "C_1_2", "C_1_3", "C_3_4"]
    s = trajectory_measures(traj, [(4, 3), (3, 7), (2, 3)])
    assert list(s.concurrences) == [(3, 4), (3, 7), (2, 3)]


# ---------------------------------------------------------------- snapshots

def snapshot_traj():
    times = np.arange(5) * 10.0
    states = np.array([site(N)] + [uniform(N)] * 4)
    return Trajectory(times, states)


def test_snapshot_at_start():
    snap = density_snapshot(snapshot_traj(), 0.0)
    assert snap.on_grid
    assert snap.magnitudes[0, 0] == 1.0
    assert (~snap.below_threshold).sum() == 1


def test_snapshot_threshold_zero():
    snap = density_snapshot(snapshot_traj(), 0.0, threshold=0.0)
    assert not snap.below_threshold.any()


def test_snapshot_off_grid_uses_nearest():
    snap = density_snapshot(snapshot_traj(), 12.0)
    assert snap.time == 10.0 and not snap.on_grid
    assert "off the output grid" in snap.format_table()


def test_snapshot_hot_strong_bath_loses_coherence():
    # hottest and most strongly coupled corner of the sweep grid
    model = SystemBathModel(fmo_hamiltonian(), BathSpec(520.0, 100.0, 510.0, 0))
    traj = propagate_from_site(1, model, PropagationConfig(t_max=2000.0, output_stride=100.0, depth=6))
    snap = density_snapshot(traj, 2000.0)
    off = ~np.eye(N, dtype=bool)
    assert snap.below_threshold[off].all(), snap.format_table()
    assert snap.values[~off].real.sum() == pytest.approx(1.0, abs=1e-8)
