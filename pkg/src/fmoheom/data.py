"""Plain-text trajectory and measure tables, external import and sweep manifests.

All numeric values are written with 17 significant digits, which is enough for
``float(text)`` to restore every double exactly.
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .heom.propagate import Trajectory
from .measures import MeasureSeries

FORMAT_VERSION = 1
TRAJECTORY_MAGIC = "fmoheom-trajectory"
MEASURES_MAGIC = "fmoheom-measures"
MANIFEST_MAGIC = "fmoheom-manifest"
EXTERNAL_TOL = 1e-6

PAPER_LAMBDA_GRID = tuple(float(x) for x in range(10, 521, 30))
PAPER_GAMMA_GRID = tuple(float(x) for x in range(25, 501, 25))
PAPER_TEMPERATURE_GRID = tuple(float(x) for x in range(30, 511, 20))


class FormatError(ValueError):
    """Malformed or inconsistent file; ``line`` is 1-based when known."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")


class ExternalImportError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def _fmt(x) -> str:
    return f"{x:.17g}"


def _fmt_meta(value) -> str:
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _fmt(float(value))
    return str(value)


_FLOAT_KEYS = {"lambda", "gamma", "temperature", "dt", "output_stride", "t_max"}


def _parse_meta(text: str, key: str = ""):
    if key in _FLOAT_KEYS:
        try:
            return float(text)
        except ValueError:
            pass
    if text == "None":
        return None
    if text in ("True", "False"):
        return text == "True"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_columns(n: int) -> list[str]:
    cols = ["t_fs"] + [f"rho_{i}_{i}" for i in range(1, n + 1)]
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            cols += [f"re_{i}_{j}", f"im_{i}_{j}"]
    return cols


_HEADER_ORDER = ("lambda", "gamma", "temperature", "n_matsubara", "depth", "dt", "output_stride",
                 "t_max", "initial_site", "model", "hamiltonian_checksum")


def write_trajectory(traj: Trajectory, path) -> None:
    n = traj.n_sites
    meta = dict(traj.metadata)
    meta.pop("n_sites", None)
    lines = [f"# {TRAJECTORY_MAGIC}", f"# format_version {FORMAT_VERSION}", f"# n_sites {n}",
             f"# n_rows {len(traj.times)}"]
    keys = [k for k in _HEADER_ORDER if k in meta] + sorted(k for k in meta if k not in _HEADER_ORDER)
    for key in keys:
        if re.search(r"\s", str(key)):
            raise ValueError(f"metadata key {key!r} contains whitespace")
        lines.append(f"# {key} {_fmt_meta(meta[key])}")
    lines.append(" ".join(trajectory_columns(n)))
    iu = np.triu_indices(n, 1)
    for t, rho in zip(traj.times, traj.states):
        diag = np.real(np.diagonal(rho))
        upper = rho[iu]
        vals = [t, *diag]
        for z in upper:
            vals += [z.real, z.imag]
        lines.append(" ".join(_fmt(float(v)) for v in vals))
    _atomic_write(path, "\n".join(lines) + "\n")


def _read_header(path, lines, magic):
    meta = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        if i == 0:
            if body != magic:
                raise FormatError(path, f"not a {magic} file (first line {lines[0]!r})", 1)
        elif body:
            key, _, value = body.partition(" ")
            meta[key] = _parse_meta(value.strip(), key)
        i += 1
    if not lines or i == 0:
        raise FormatError(path, f"missing '# {magic}' header", 1)
    version = meta.pop("format_version", None)
    if version is None:
        raise FormatError(path, "header lacks format_version")
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported format version {version} (expected {FORMAT_VERSION})")
    return meta, i


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    lines = path.read_text().splitlines()
    meta, i = _read_header(path, lines, TRAJECTORY_MAGIC)
    n = meta.get("n_sites")
    if not isinstance(n, int) or n < 1:
        raise FormatError(path, f"invalid n_sites {n!r}")
    cols = trajectory_columns(n)
    if i >= len(lines) or lines[i].split() != cols:
        raise FormatError(path, "column header does not match n_sites", i + 1)
    body = [(k + 1, ln) for k, ln in enumerate(lines[i + 1:], start=i + 1) if ln.strip()]
    width = len(cols)
    data = np.empty((len(body), width))
    for r, (lineno, ln) in enumerate(body):
        fields = ln.split()
        if len(fields) != width:
            raise FormatError(path, f"row {r + 1} has {len(fields)} fields, expected {width} "
                                    "(truncated file?)", lineno)
        try:
            data[r] = [float(x) for x in fields]
        except ValueError as exc:
            raise FormatError(path, f"row {r + 1}: {exc}", lineno) from None

    expected = meta.pop("n_rows", None)
    stride, t_max = meta.get("output_stride"), meta.get("t_max")
    if expected is None and isinstance(stride, (int, float)) and isinstance(t_max, (int, float)) and stride > 0:
        expected = int(round(t_max / stride)) + 1
    if expected is not None and expected != len(body):
        raise FormatError(path, f"consistency error: header implies {expected} rows, found {len(body)}")
    if isinstance(stride, (int, float)) and isinstance(t_max, (int, float)) and stride > 0:
        implied = int(round(t_max / stride)) + 1
        if implied != len(body):
            raise FormatError(path, f"consistency error: t_max {t_max} fs at stride {stride} fs "
                                    f"implies {implied} rows, found {len(body)}")

    states = _states_from_columns(data[:, 1:], n)
    meta["n_sites"] = n
    return Trajectory(data[:, 0].copy(), states, meta)


def _states_from_columns(values, n):
    states = np.zeros((values.shape[0], n, n), dtype=complex)
    idx = np.arange(n)
    states[:, idx, idx] = values[:, :n]
    iu = np.triu_indices(n, 1)
    z = np.empty((values.shape[0], len(iu[0])), dtype=complex)
    z.real = values[:, n::2]
    z.imag = values[:, n + 1::2]
    states[:, iu[0], iu[1]] = z
    states[:, iu[1], iu[0]] = z.conj()
    return states


# --- measure tables -------------------------------------------------------

def write_measures(series: MeasureSeries, path) -> None:
    lines = [f"# {MEASURES_MAGIC}", f"# format_version {FORMAT_VERSION}"]
    meta = series.metadata
    keys = [k for k in _HEADER_ORDER if k in meta] + sorted(k for k in meta if k not in _HEADER_ORDER)
    for key in keys:
        lines.append(f"# {key} {_fmt_meta(meta[key])}")
    cols = series.columns()
    lines.append(",".join(cols))
    arr = np.column_stack(list(cols.values()))
    lines += [",".join(_fmt(float(v)) for v in row) for row in arr]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_measures(path) -> MeasureSeries:
    path = Path(path)
    lines = path.read_text().splitlines()
    meta, i = _read_header(path, lines, MEASURES_MAGIC)
    if i >= len(lines):
        raise FormatError(path, "missing column header", i + 1)
    names = lines[i].split(",")
    for required in ("t_fs", "E", "S", "L_rho"):
        if required not in names:
            raise FormatError(path, f"missing column {required}", i + 1)
    rows = []
    for lineno, ln in enumerate(lines[i + 1:], start=i + 2):
        if not ln.strip():
            continue
        fields = ln.split(",")
        if len(fields) != len(names):
            raise FormatError(path, f"expected {len(names)} fields, got {len(fields)}", lineno)
        rows.append([float(x) for x in fields])
    arr = np.array(rows).reshape(-1, len(names))
    col = {name: arr[:, k] for k, name in enumerate(names)}
    conc = {}
    for name in names:
        m = re.fullmatch(r"C_(\d+)_(\d+)", name)
        if m:
            conc[(int(m.group(1)), int(m.group(2)))] = col[name]
    return MeasureSeries(col["t_fs"], col["E"], col["S"], col["L_rho"], conc, meta)


# --- external trajectories ------------------------------------------------

_COLUMN_RE = re.compile(r"(rho|re|im)_(\d+)_(\d+)")


@dataclass
class ExternalLayout:
    """Maps columns of a foreign text table to time and density-matrix parts.

    ``columns`` names every column in file order: ``t`` / ``t_fs`` for time,
    ``re_n_k`` / ``rho_n_k`` for Re rho_nk, ``im_n_k`` for Im rho_nk and
    ``skip`` for anything else.  Missing lower- or upper-triangle entries are
    filled by conjugate symmetry; missing diagonal imaginary parts are zero.
    """

    n_sites: int
    columns: list
    delimiter: str | None = None
    comment: str = "#"
    header_lines: int = 0
    time_scale: float = 1.0
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping) -> "ExternalLayout":
        known = {"n_sites", "columns", "delimiter", "comment", "header_lines", "time_scale", "metadata"}
        extra = set(mapping) - known
        if extra:
            raise ExternalImportError(f"unknown layout keys: {sorted(extra)}")
        return cls(**mapping)

    @classmethod
    def load(cls, path) -> "ExternalLayout":
        return cls.from_mapping(json.loads(Path(path).read_text()))


def identity_layout(n_sites: int) -> ExternalLayout:
    """Layout that reads this package's own trajectory files."""
    return ExternalLayout(n_sites, trajectory_columns(n_sites), header_lines=1)


def _parse_layout(layout: ExternalLayout):
    n = layout.n_sites
    time_col = None
    slots = {}
    for c, name in enumerate(layout.columns):
        if name in ("t", "t_fs"):
            if time_col is not None:
                raise ExternalImportError("layout names the time column twice")
            time_col = c
            continue
        if name in ("skip", None):
            continue
        m = _COLUMN_RE.fullmatch(str(name))
        if not m:
            raise ExternalImportError(f"layout column {c}: cannot interpret {name!r}")
        part = "im" if m.group(1) == "im" else "re"
        i, j = int(m.group(2)), int(m.group(3))
        if not (1 <= i <= n and 1 <= j <= n):
            raise ExternalImportError(f"layout column {c}: element ({i}, {j}) outside {n} sites")
        key = (i - 1, j - 1, part)
        if key in slots:
            raise ExternalImportError(f"layout maps element {name!r} twice")
        slots[key] = c
    if time_col is None:
        raise ExternalImportError("layout has no time column")
    for i in range(n):
        for j in range(n):
            if i == j:
                if (i, i, "re") not in slots:
                    raise ExternalImportError(f"layout lacks population rho_{i + 1}_{i + 1}")
            elif (i, j, "re") not in slots and (j, i, "re") not in slots:
                raise ExternalImportError(f"layout lacks coherence ({i + 1}, {j + 1})")
            elif (i, j, "im") not in slots and (j, i, "im") not in slots:
                raise ExternalImportError(f"layout lacks imaginary part of ({i + 1}, {j + 1})")
    return time_col, slots


def import_external(path, layout, tol: float = EXTERNAL_TOL) -> Trajectory:
    """Read a foreign trajectory table described by ``layout``.

    Rows whose trace differs from one, or whose Hermiticity defect exceeds,
    ``tol`` are rejected; the error names the first offending record.
    """
    if isinstance(layout, dict):
        layout = ExternalLayout.from_mapping(layout)
    elif isinstance(layout, (str, Path)):
        layout = ExternalLayout.load(layout)
    n = layout.n_sites
    time_col, slots = _parse_layout(layout)
    path = Path(path)
    lines = path.read_text().splitlines()
    records = []
    skipped = 0
    for lineno, ln in enumerate(lines, start=1):
        if not ln.strip() or (layout.comment and ln.lstrip().startswith(layout.comment)):
            continue
        if skipped < layout.header_lines:
            skipped += 1
            continue
        fields = ln.split(layout.delimiter)
        if len(fields) != len(layout.columns):
            raise ExternalImportError(f"{path}:{lineno}: layout mismatch, {len(fields)} fields "
                                      f"but layout has {len(layout.columns)} columns")
        try:
            records.append((lineno, [float(x) for x in fields]))
        except ValueError as exc:
            raise ExternalImportError(f"{path}:{lineno}: {exc}") from None
    if not records:
        raise ExternalImportError(f"{path}: no data rows")
    data = np.array([r for _, r in records])
    linenos = [ln for ln, _ in records]

    states = np.zeros((len(data), n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            re_col = slots.get((i, j, "re"))
            im_col = slots.get((i, j, "im"))
            if re_col is not None:
                states[:, i, j] += data[:, re_col]
            elif i != j:
                states[:, i, j] += data[:, slots[(j, i, "re")]]
            if im_col is not None:
                states[:, i, j] += 1j * data[:, im_col]
            elif i != j:
                states[:, i, j] -= 1j * data[:, slots[(j, i, "im")]]
    times = data[:, time_col] * layout.time_scale

    trace_err = np.abs(np.einsum("tii->t", states) - 1.0)
    herm_err = np.abs(states - states.conj().transpose(0, 2, 1)).max(axis=(1, 2))
    bad = np.flatnonzero((trace_err > tol) | (herm_err > tol))
    if bad.size:
        r = int(bad[0])
        raise ExternalImportError(
            f"{path}:{linenos[r]}: record {r + 1} (t = {times[r]:g} fs) violates state invariants "
            f"(trace error {trace_err[r]:.3g}, Hermiticity defect {herm_err[r]:.3g}, tolerance {tol:g})")
    meta = dict(layout.metadata)
    meta.update({"n_sites": n, "source": str(path)})
    return Trajectory(times, states, meta)


# --- sweep manifests --------------------------------------------------------

def _num_id(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def run_id(lam: float, gamma: float, temperature: float) -> str:
    return f"lam{_num_id(lam)}_gam{_num_id(gamma)}_T{_num_id(temperature)}"


@dataclass(frozen=True)
class SweepRun:
    run_id: str
    lam: float
    gamma: float
    temperature: float


@dataclass
class SweepManifest:
    lambda_grid: tuple
    gamma_grid: tuple
    temperature_grid: tuple
    initial_site: int
    runs: list

    def __len__(self):
        return len(self.runs)


def _check_grid(name, grid):
    grid = tuple(float(x) for x in grid)
    if not grid:
        raise ManifestError(f"{name} grid is empty")
    if len(set(grid)) != len(grid):
        raise ManifestError(f"{name} grid has duplicate values")
    if any(not math.isfinite(x) or x < 0 for x in grid):
        raise ManifestError(f"{name} grid has invalid values")
    return grid


def sweep_manifest(lambda_grid=PAPER_LAMBDA_GRID, gamma_grid=PAPER_GAMMA_GRID,
                   temperature_grid=PAPER_TEMPERATURE_GRID, subset=None,
                   initial_site: int = 1) -> SweepManifest:
    """Cartesian product of the grids (lambda-major), or an explicit subset of it.

    ``subset`` is an iterable of (lambda, gamma, T) triples, kept in the given
    order; each must lie on the grids and appear once.
    """
    lg = _check_grid("lambda", lambda_grid)
    gg = _check_grid("gamma", gamma_grid)
    tg = _check_grid("temperature", temperature_grid)
    if subset is None:
        triples = list(product(lg, gg, tg))
    else:
        triples = [tuple(float(v) for v in t) for t in subset]
        seen = set()
        for t in triples:
            if len(t) != 3:
                raise ManifestError(f"subset entry {t} is not a (lambda, gamma, T) triple")
            if t in seen:
                raise ManifestError(f"duplicate parameter triple {t}")
            seen.add(t)
            if t[0] not in lg or t[1] not in gg or t[2] not in tg:
                raise ManifestError(f"subset entry {t} is not on the grids")
    runs = [SweepRun(run_id(*t), *t) for t in triples]
    return SweepManifest(lg, gg, tg, int(initial_site), runs)


def write_manifest(manifest: SweepManifest, path) -> None:
    lines = [f"# {MANIFEST_MAGIC}", f"# format_version {FORMAT_VERSION}",
             f"# initial_site {manifest.initial_site}",
             "# lambda_grid " + ",".join(_fmt(x) for x in manifest.lambda_grid),
             "# gamma_grid " + ",".join(_fmt(x) for x in manifest.gamma_grid),
             "# temperature_grid " + ",".join(_fmt(x) for x in manifest.temperature_grid),
             "run_id lambda gamma T"]
    lines += [f"{r.run_id} {_fmt(r.lam)} {_fmt(r.gamma)} {_fmt(r.temperature)}" for r in manifest.runs]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_manifest(path) -> SweepManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    raw = {}
    i = 0
    if not lines or lines[0] != f"# {MANIFEST_MAGIC}":
        raise FormatError(path, "not a manifest file", 1)
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition(" ")
        raw[key] = value.strip()
        i += 1
    if raw.get("format_version") != str(FORMAT_VERSION):
        raise FormatError(path, f"unsupported format version {raw.get('format_version')!r}")
    if i >= len(lines) or lines[i].split() != ["run_id", "lambda", "gamma", "T"]:
        raise FormatError(path, "bad column header", i + 1)
    triples = []
    for lineno, ln in enumerate(lines[i + 1:], start=i + 2):
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 4:
            raise FormatError(path, "expected 4 fields", lineno)
        rid, *vals = parts
        t = tuple(float(v) for v in vals)
        if rid != run_id(*t):
            raise FormatError(path, f"run id {rid!r} does not match its parameters", lineno)
        triples.append(t)

    def grid(key):
        if key in raw and raw[key]:
            return tuple(float(x) for x in raw[key].split(","))
        return None

    lg, gg, tg = grid("lambda_grid"), grid("gamma_grid"), grid("temperature_grid")
    if lg is None or gg is None or tg is None:
        lg = tuple(sorted({t[0] for t in triples}))
        gg = tuple(sorted({t[1] for t in triples}))
        tg = tuple(sorted({t[2] for t in triples}))
    return sweep_manifest(lg, gg, tg, subset=triples, initial_site=int(raw.get("initial_site", 1)))


class ChecksumMismatchError(ValueError):
    pass


def verify_hamiltonian(traj: Trajectory, hamiltonian) -> None:
    """Raise if the trajectory header records a different Hamiltonian."""
    recorded = traj.metadata.get("hamiltonian_checksum")
    if recorded is None:
        raise ChecksumMismatchError("trajectory carries no Hamiltonian checksum")
    if str(recorded) != hamiltonian.checksum():
        raise ChecksumMismatchError(f"trajectory was produced with Hamiltonian {recorded}, "
                                    f"not {hamiltonian.checksum()} ({hamiltonian.name})")
