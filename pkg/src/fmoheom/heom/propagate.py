"""HEOM generator, RK4 propagation and the population-convergence ladder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..model import UNITS, BathSpec, ExcitonHamiltonian, UnitSystem, matsubara_expansion
from ._backend import DEFAULT_BACKEND, get_kernel
from .hierarchy import DEFAULT_MAX_ADOS, Hierarchy, build_hierarchy

log = logging.getLogger(__name__)

TRACE_TOL = 1e-8
HERMITICITY_TOL = 1e-10
NEGATIVE_POPULATION_TOL = 1e-8


class DivergenceError(FloatingPointError):
    """NaN or Inf appeared in the hierarchy during propagation."""

    def __init__(self, time_fs):
        self.time_fs = time_fs
        super().__init__(f"HEOM propagation diverged (non-finite ADO) at t = {time_fs:g} fs; "
                         "try a smaller time step or a larger truncation level")


class ConvergenceError(RuntimeError):
    """The (L, K) ladder ran out of budget before the populations converged."""

    def __init__(self, ladder, tol):
        self.ladder = ladder
        self.last_delta = ladder[-1].delta if ladder else math.nan
        super().__init__(f"populations not converged to {tol:g}: last delta {self.last_delta:.4g} "
                         f"after {len(ladder)} ladder steps")


@dataclass(frozen=True)
class SystemBathModel:
    hamiltonian: ExcitonHamiltonian
    bath: BathSpec
    units: UnitSystem = UNITS

    @property
    def n_sites(self):
        return self.hamiltonian.n_sites


@dataclass(frozen=True)
class PropagationConfig:
    """Integrator settings.

    ``output_stride`` defaults to ``dt``.  A stride finer than ``dt`` is
    coarsened to ``dt``; otherwise it must be an integer multiple of ``dt``.
    """

    dt: float = 1.0
    t_max: float = 2000.0
    output_stride: float | None = None
    depth: int = 3
    integrator: str = "rk4"
    max_ados: int = DEFAULT_MAX_ADOS
    backend: str | None = None

    def __post_init__(self):
        if self.dt <= 0 or self.t_max < 0:
            raise ValueError("dt must be > 0 and t_max >= 0")
        if self.depth < 1:
            raise ValueError("truncation level must be >= 1")
        if self.integrator != "rk4":
            raise ValueError(f"unsupported integrator {self.integrator!r}")
        self.stride_steps  # validate

    @property
    def stride_steps(self) -> int:
        stride = self.dt if self.output_stride is None else self.output_stride
        if stride <= self.dt:
            return 1
        ratio = stride / self.dt
        steps = round(ratio)
        if abs(ratio - steps) > 1e-9 * ratio:
            raise ValueError(f"output stride {stride} fs is not an integer multiple of dt = {self.dt} fs")
        return steps

    @property
    def effective_stride(self) -> float:
        return self.stride_steps * self.dt

    @property
    def n_steps(self) -> int:
        ratio = self.t_max / self.dt
        steps = round(ratio)
        if abs(ratio - steps) > 1e-9 * max(ratio, 1.0):
            raise ValueError(f"t_max {self.t_max} fs is not an integer multiple of dt = {self.dt} fs")
        if steps % self.stride_steps:
            raise ValueError("t_max must be a multiple of the output stride")
        return steps

    def replace(self, **changes) -> "PropagationConfig":
        params = {f: getattr(self, f) for f in self.__dataclass_fields__}
        params.update(changes)
        return PropagationConfig(**params)


@dataclass
class Trajectory:
    """Reduced density matrices on an output time grid (fs)."""

    times: np.ndarray
    states: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_sites(self) -> int:
        return self.states.shape[1]

    def __len__(self):
        return len(self.times)

    def populations(self) -> np.ndarray:
        return np.real(np.einsum("tii->ti", self.states))

    def trace_defect(self) -> np.ndarray:
        return np.abs(np.einsum("tii->t", self.states) - 1.0)

    def hermiticity_defect(self) -> np.ndarray:
        return np.abs(self.states - self.states.conj().transpose(0, 2, 1)).max(axis=(1, 2))

    def invariant_violations(self, trace_tol=TRACE_TOL, hermiticity_tol=HERMITICITY_TOL,
                             negative_tol=NEGATIVE_POPULATION_TOL) -> list[str]:
        problems = []
        td = self.trace_defect()
        if td.max(initial=0.0) >= trace_tol:
            i = int(np.argmax(td))
            problems.append(f"trace defect {td[i]:.3g} at t = {self.times[i]:g} fs")
        hd = self.hermiticity_defect()
        if hd.max(initial=0.0) >= hermiticity_tol:
            i = int(np.argmax(hd))
            problems.append(f"Hermiticity defect {hd[i]:.3g} at t = {self.times[i]:g} fs")
        pops = self.populations()
        if pops.size and pops.min() < -negative_tol:
            i = int(np.argmin(pops.min(axis=1)))
            problems.append(f"negative population {pops[i].min():.3g} at t = {self.times[i]:g} fs "
                            "(hierarchy likely not converged)")
        return problems

    def state_at(self, t: float):
        """Nearest stored state; returns (index, exact) where exact flags an on-grid hit."""
        i = int(np.argmin(np.abs(self.times - t)))
        return i, bool(np.isclose(self.times[i], t, rtol=0, atol=1e-9 * max(1.0, abs(t))))


class HeomGenerator:
    """Right-hand side of the Drude-Lorentz hierarchy in rad/fs.

    Each site couples through its projector R_n = |n><n| to an identical bath
    with correlation function sum_k c_k exp(-nu_k t).  ADOs are stored with the
    usual rescaling by sqrt(prod_k n_k! |c_k|^n_k), which makes the coupling
    coefficients sqrt((n+1)|c|) upward and sqrt(n/|c|) c downward.  Every ADO
    stays Hermitian under this hierarchy and the kernels keep it so to the bit.
    """

    def __init__(self, model: SystemBathModel, depth: int, max_ados: int = DEFAULT_MAX_ADOS,
                 backend: str | None = None):
        self.model = model
        self.backend = backend or DEFAULT_BACKEND
        self._kernel = get_kernel(self.backend)
        bath = model.bath
        u = model.units.cm1_to_rad_per_fs
        n = model.n_sites
        K = bath.n_matsubara
        self.hierarchy: Hierarchy = build_hierarchy(n, K, depth, max_ados=max_ados)
        self.expansion = matsubara_expansion(bath) if bath.lam > 0 else None

        labels = self.hierarchy.labels.astype(float)
        term = self.hierarchy.mode_term
        n_modes = self.hierarchy.n_modes
        if self.expansion is None:
            rates = np.full(K + 1, bath.gamma)
            rates[1:] = 2.0 * math.pi * np.arange(1, K + 1) / bath.beta
            coeffs = np.zeros(K + 1, dtype=complex)
            terminator = 0.0
        else:
            rates = self.expansion.rates
            coeffs = self.expansion.coefficients
            terminator = self.expansion.terminator_rate

        mode_rate = rates[term] * u
        mode_c = coeffs[term] * u * u
        mode_abs = np.abs(mode_c)
        safe_abs = np.where(mode_abs > 0, mode_abs, 1.0)

        self.H = np.ascontiguousarray(model.hamiltonian.matrix * u, dtype=float)
        self.damping = np.ascontiguousarray(labels @ mode_rate)
        # sum over sites of -delta [R_n, [R_n, .]] damps each coherence at 2 delta
        self.dephasing = float(2.0 * terminator * u)
        self.up_coef = np.ascontiguousarray(
            np.where(mode_abs > 0, np.sqrt((labels + 1.0) * mode_abs), 0.0))
        down = np.where(mode_abs > 0, np.sqrt(labels / safe_abs), 0.0) * mode_c
        self.down_coef = np.ascontiguousarray(down.astype(complex)).view(np.float64)
        self.mode_site = np.ascontiguousarray(self.hierarchy.mode_site)
        self.up = np.ascontiguousarray(self.hierarchy.up)
        self.down = np.ascontiguousarray(self.hierarchy.down)
        self.shape = (self.hierarchy.n_ados, n, n)
        assert self.down_coef.shape == (self.hierarchy.n_ados, 2 * n_modes)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape, dtype=complex)

    def initial_state(self, rho0) -> np.ndarray:
        state = self.zeros()
        state[0] = rho0
        return state

    def rhs(self, state: np.ndarray, out: np.ndarray) -> np.ndarray:
        n = self.shape[1]
        self._kernel(self.H, state.view(np.float64).reshape(-1, n, 2 * n),
                     out.view(np.float64).reshape(-1, n, 2 * n),
                     self.damping, self.dephasing, self.up, self.down,
                     self.up_coef, self.down_coef, self.mode_site)
        return out

    def __call__(self, state: np.ndarray) -> np.ndarray:
        return self.rhs(state, np.empty_like(state))


def site_state(n_sites: int, site: int) -> np.ndarray:
    """|site><site| with 1-based site numbering."""
    if not 1 <= site <= n_sites:
        raise ValueError(f"initial site {site} outside 1..{n_sites}")
    rho = np.zeros((n_sites, n_sites), dtype=complex)
    rho[site - 1, site - 1] = 1.0
    return rho


def _validate_rho0(rho0, n):
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != (n, n):
        raise ValueError(f"initial state has shape {rho0.shape}, expected {(n, n)}")
    if np.abs(rho0 - rho0.conj().T).max() > 1e-12:
        raise ValueError("initial state is not Hermitian")
    if abs(np.trace(rho0) - 1.0) > 1e-10:
        raise ValueError("initial state does not have unit trace")
    # make it Hermitian to the bit so the kernels preserve it exactly
    return 0.5 * (rho0 + rho0.conj().T)


def propagate(rho0, model: SystemBathModel, config: PropagationConfig = PropagationConfig(),
              initial_site: int | None = None, progress=None) -> Trajectory:
    """Propagate the hierarchy with fixed-step RK4 and return the reduced trajectory.

    All auxiliary ADOs start at zero (factorized initial condition).
    """
    n = model.n_sites
    rho0 = _validate_rho0(rho0, n)
    gen = HeomGenerator(model, config.depth, max_ados=config.max_ados, backend=config.backend)
    n_steps = config.n_steps
    stride = config.stride_steps
    dt = config.dt
    n_out = n_steps // stride + 1

    times = np.arange(n_out) * (stride * dt)
    states = np.empty((n_out, n, n), dtype=complex)
    x = gen.initial_state(rho0)
    states[0] = x[0]
    tmp = np.empty_like(x)
    k = np.empty_like(x)
    acc = np.empty_like(x)
    half = 0.5 * dt
    check_every = max(1, 200 // stride) * stride

    # overflow is reported through DivergenceError, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, n_steps + 1):
            gen.rhs(x, k)
            np.copyto(acc, k)
            np.multiply(k, half, out=tmp)
            tmp += x
            gen.rhs(tmp, k)
            acc += 2.0 * k
            np.multiply(k, half, out=tmp)
            tmp += x
            gen.rhs(tmp, k)
            acc += 2.0 * k
            np.multiply(k, dt, out=tmp)
            tmp += x
            gen.rhs(tmp, k)
            acc += k
            acc *= dt / 6.0
            x += acc
            if step % stride == 0:
                j = step // stride
                states[j] = x[0]
                if not np.isfinite(states[j]).all() or (step % check_every == 0 and not np.isfinite(x).all()):
                    raise DivergenceError(step * dt)
                if progress is not None:
                    progress(j, n_out)
    if not np.isfinite(x).all():
        raise DivergenceError(n_steps * dt)

    bath = model.bath
    metadata = {
        "lambda": bath.lam,
        "gamma": bath.gamma,
        "temperature": bath.temperature,
        "n_matsubara": bath.n_matsubara,
        "depth": config.depth,
        "dt": dt,
        "output_stride": config.effective_stride,
        "t_max": n_steps * dt,
        "initial_site": initial_site,
        "n_sites": n,
        "n_ados": gen.hierarchy.n_ados,
        "model": model.hamiltonian.name,
        "hamiltonian_checksum": model.hamiltonian.checksum(),
        "backend": gen.backend,
    }
    return Trajectory(times, states, metadata)


def propagate_from_site(site: int, model: SystemBathModel, config: PropagationConfig = PropagationConfig(),
                        progress=None) -> Trajectory:
    return propagate(site_state(model.n_sites, site), model, config, initial_site=site,
                     progress=progress)


@dataclass(frozen=True)
class LadderStep:
    depth: int
    n_matsubara: int
    delta: float
    previous: tuple[int, int]


@dataclass
class ConvergenceResult:
    depth: int
    n_matsubara: int
    trajectory: Trajectory
    ladder: list[LadderStep]


def max_population_delta(a: Trajectory, b: Trajectory) -> float:
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times):
        raise ValueError("trajectories are on different time grids")
    return float(np.abs(a.populations() - b.populations()).max())


def converge(model: SystemBathModel, base_config: PropagationConfig, rho0=None, initial_site: int = 1,
             tol_pop: float = 0.01, max_depth: int = 10, max_matsubara: int = 6,
             vary_matsubara: bool = True) -> ConvergenceResult:
    """Raise L, then K, until successive trajectories agree in populations.

    Starting from ``(base_config.depth, model.bath.n_matsubara)``, the truncation
    level is raised until the maximum population difference over the whole
    trajectory drops below ``tol_pop``.  The Matsubara count is then raised at
    that level; if that moves the populations by ``tol_pop`` or more, the level
    check is repeated at the new K.  With a decoupled bath (lam = 0) or
    ``vary_matsubara=False`` only the level is checked.  The finest trajectory
    computed is returned.
    """
    if rho0 is None:
        rho0 = site_state(model.n_sites, initial_site)
        site = initial_site
    else:
        site = None
    vary_k = vary_matsubara and model.bath.lam > 0

    def run(L, K):
        m = SystemBathModel(model.hamiltonian, model.bath.replace(n_matsubara=K), model.units)
        return propagate(rho0, m, base_config.replace(depth=L), initial_site=site)

    L, K = base_config.depth, model.bath.n_matsubara
    ladder: list[LadderStep] = []
    current = run(L, K)
    level_ok = False
    while True:
        if not level_ok:
            if L + 1 > max_depth:
                raise ConvergenceError(ladder, tol_pop)
            try:
                trial = run(L + 1, K)
            except MemoryError as exc:
                log.warning("ladder stopped: %s", exc)
                raise ConvergenceError(ladder, tol_pop) from exc
            delta = max_population_delta(current, trial)
            ladder.append(LadderStep(L + 1, K, delta, (L, K)))
            log.info("L %d -> %d at K=%d: delta %.3g", L, L + 1, K, delta)
            L, current = L + 1, trial
            level_ok = delta < tol_pop
            if level_ok and not vary_k:
                return ConvergenceResult(L, K, current, ladder)
            continue
        if K + 1 > max_matsubara:
            raise ConvergenceError(ladder, tol_pop)
        try:
            trial = run(L, K + 1)
        except MemoryError as exc:
            raise ConvergenceError(ladder, tol_pop) from exc
        delta = max_population_delta(current, trial)
        ladder.append(LadderStep(L, K + 1, delta, (L, K)))
        log.info("K %d -> %d at L=%d: delta %.3g", K, K + 1, L, delta)
        K, current = K + 1, trial
        if delta < tol_pop:
            return ConvergenceResult(L, K, current, ladder)
        level_ok = False
