"""Unitary time evolution by Strang-split spectral stepping.

One step applies, in order,

    exp(-i V dt/2) . exp(-i C tau/2) . exp(-i K dt) . exp(-i C tau/2) . exp(-i V dt/2)

where K is the kinetic operator (diagonal in momentum space), V the position
potential (diagonal in position space), and C the optional measurement
coupling g * x_source * p_target, applied as a spectral phase along the target
axis; tau is the overlap of [t, t+dt) with the coupling gate, so gate edges
need not align with step boundaries.  Every factor is exactly unitary, making
the composition second-order accurate and norm-preserving to rounding.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .fields import FieldError, Grid, PhysicalParams, WaveFunction, save_wavefunction, load_wavefunction


class PropagationError(RuntimeError):
    """Numerical failure (NaN/Inf) or invalid propagation setup."""


@dataclass(frozen=True)
class MeasurementCoupling:
    """Time-gated coupling g * x_source * p_target (pointer displacement)."""

    source_axis: int
    target_axis: int
    strength: float
    t_on: float
    t_off: float

    def __post_init__(self):
        if self.source_axis == self.target_axis:
            raise FieldError("coupling source and target axes must differ")
        if not self.t_off > self.t_on:
            raise FieldError("coupling gate needs t_off > t_on")
        if not math.isfinite(self.strength):
            raise FieldError("coupling strength must be finite")


@dataclass(frozen=True)
class PotentialTerm:
    """One additive potential term.

    kind: harmonic | gaussian_barrier | linear_coupling | custom_grid
    axes: the axes the term binds
    params: kind-specific parameters
    window: optional (t_on, t_off) rectangular activation window
    """

    kind: str
    axes: tuple
    params: tuple  # sorted (key, value) pairs; kept hashable for spec hashing
    window: tuple = None

    @staticmethod
    def make(kind, axes, window=None, **params):
        return PotentialTerm(kind, tuple(axes), tuple(sorted(params.items())), window)

    @property
    def pdict(self):
        return dict(self.params)


@dataclass(frozen=True)
class HamiltonianSpec:
    """Kinetic term (from PhysicalParams) plus potential terms and coupling."""

    terms: tuple = ()
    coupling: MeasurementCoupling = None

    def validate(self, grid):
        for t in self.terms:
            for a in t.axes:
                if not 0 <= a < grid.dims:
                    raise FieldError(f"potential term binds missing axis {a}")
            if t.kind == "custom_grid":
                v = np.asarray(t.pdict["values"])
                if v.shape != grid.shape:
                    raise FieldError("custom_grid term shape does not match grid")
        if self.coupling is not None:
            for a in (self.coupling.source_axis, self.coupling.target_axis):
                if not 0 <= a < grid.dims:
                    raise FieldError(f"coupling binds missing axis {a}")


@dataclass(frozen=True)
class Schedule:
    t_start: float
    t_end: float
    dt: float
    stride: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise FieldError("schedule.dt must be positive")
        if self.stride < 1:
            raise FieldError("schedule.stride must be >= 1")
        steps = (self.t_end - self.t_start) / self.dt
        if steps < 0.5 or abs(steps - round(steps)) > 1e-6:
            raise FieldError(
                "(t_end - t_start)/dt must be a positive integer within rounding"
            )

    @property
    def n_steps(self):
        return int(round((self.t_end - self.t_start) / self.dt))

    def time_at(self, step):
        return self.t_start + step * self.dt


def potential_grid(grid, term):
    """Evaluate one potential term on the grid (its static spatial profile)."""
    p = term.pdict
    if term.kind == "harmonic":
        (axis,) = term.axes
        x = grid.mesh(axis)
        c = p.get("center", 0.0)
        m = p.get("mass", 1.0)
        return 0.5 * m * p["omega"] ** 2 * (x - c) ** 2
    if term.kind == "gaussian_barrier":
        (axis,) = term.axes
        x = grid.mesh(axis)
        return p["height"] * np.exp(-((x - p.get("center", 0.0)) ** 2) / (2.0 * p["width"] ** 2))
    if term.kind == "linear_coupling":
        a, b = term.axes
        return p["strength"] * grid.mesh(a) * grid.mesh(b)
    if term.kind == "custom_grid":
        return np.asarray(p["values"], dtype=float)
    raise FieldError(f"unknown potential kind {term.kind!r}")


def _overlap(lo, hi, t0, t1):
    """Length of [t0, t1) inside [lo, hi)."""
    return max(0.0, min(hi, t1) - max(lo, t0))


class SplitOperator:
    """Precomputed split-step engine for one (grid, params, H, dt)."""

    def __init__(self, grid, params, hamiltonian, dt):
        hamiltonian.validate(grid)
        if len(params.masses) != grid.dims:
            raise FieldError("need one mass per grid axis")
        self.grid = grid
        self.params = params
        self.H = hamiltonian
        self.dt = float(dt)

        # kinetic phase: exp(-i dt hbar k^2 / 2m) summed over axes
        ksq = np.zeros(grid.shape)
        for i in range(grid.dims):
            k = grid.k_coords(i)
            shp = [1] * grid.dims
            shp[i] = grid.shape[i]
            ksq = ksq + (params.hbar * k.reshape(shp) ** 2) / (2.0 * params.masses[i])
        self._kin_phase = np.exp(-1j * self.dt * ksq)
        self._ksq_over = ksq  # hbar k^2 / 2m, reused for <H>

        self.v_static = np.zeros(grid.shape)
        self._windowed = []
        for t in hamiltonian.terms:
            v = potential_grid(grid, t)
            if t.window is None:
                self.v_static = self.v_static + v
            else:
                self._windowed.append((t.window, v))
        self._exp_v_half_static = np.exp(-1j * self.v_static * self.dt / (2.0 * params.hbar))

        c = hamiltonian.coupling
        if c is not None:
            self._src = grid.mesh(c.source_axis)
            kt = grid.k_coords(c.target_axis)
            shp = [1] * grid.dims
            shp[c.target_axis] = grid.shape[c.target_axis]
            self._ktarget = kt.reshape(shp)

    def _v_half_phase(self, t):
        """exp(-i V dt_eff / 2) including windowed terms active in [t, t+dt)."""
        active = [(w, v) for (w, v) in self._windowed
                  if _overlap(w[0], w[1], t, t + self.dt) > 0.0]
        if not active:
            return self._exp_v_half_static
        v_eff = self.v_static * self.dt
        for (t_on, t_off), v in active:
            v_eff = v_eff + v * _overlap(t_on, t_off, t, t + self.dt)
        return np.exp(-1j * v_eff / (2.0 * self.params.hbar))

    def _apply_coupling_half(self, amp, tau_half):
        c = self.H.coupling
        ft = sfft.fft(amp, axis=c.target_axis)
        ft *= np.exp(-1j * c.strength * tau_half * self._src * self._ktarget)
        return sfft.ifft(ft, axis=c.target_axis)

    def step_array(self, amp, t):
        """One Strang step of the raw amplitude array from time t."""
        expv = self._v_half_phase(t)
        tau = 0.0
        c = self.H.coupling
        if c is not None and c.strength != 0.0:
            tau = _overlap(c.t_on, c.t_off, t, t + self.dt)

        amp = expv * amp
        if tau > 0.0:
            amp = self._apply_coupling_half(amp, tau / 2.0)
        amp = sfft.ifftn(self._kin_phase * sfft.fftn(amp))
        if tau > 0.0:
            amp = self._apply_coupling_half(amp, tau / 2.0)
        amp = expv * amp
        return amp

    def energy(self, amp, t=None):
        """<H> (kinetic + static potential); None while a window is active."""
        if t is not None:
            for (t_on, t_off), _ in self._windowed:
                if _overlap(t_on, t_off, t, t + self.dt) > 0.0:
                    return None
            c = self.H.coupling
            if c is not None and c.strength != 0.0 and _overlap(c.t_on, c.t_off, t, t + self.dt) > 0.0:
                return None
        ft = sfft.fftn(amp) / np.sqrt(amp.size)
        kin = np.sum(np.abs(ft) ** 2 * self._ksq_over) * self.params.hbar
        # ft normalized so that sum |ft|^2 = sum |amp|^2; convert to integrals
        kin *= self.grid.dV
        pot = np.sum(self.v_static * np.abs(amp) ** 2) * self.grid.dV
        return float(kin + pot)


def step(psi, hamiltonian, dt, params=None):
    """Single Strang split step from psi.time; returns the advanced state."""
    if dt <= 0:
        raise FieldError("dt must be positive")
    if params is None:
        params = PhysicalParams(masses=(1.0,) * psi.grid.dims)
    op = SplitOperator(psi.grid, params, hamiltonian, dt)
    amp = op.step_array(psi.amplitudes, psi.time)
    if not np.all(np.isfinite(amp.view(float))):
        raise PropagationError(
            f"non-finite amplitudes after step from t={psi.time:g} (dt={dt:g})"
        )
    return WaveFunction(psi.grid, amp, psi.time + dt)


def apply_conditional_displacement(psi, coupling, tau):
    """Apply exp(-i g tau x_source p_target / hbar) as a spectral phase.

    Translates the target-axis profile by g * x_source * tau at each fixed
    source coordinate.  Errors if the largest displacement exceeds half the
    target-axis extent (wrap-around would corrupt pointer regions).
    """
    grid = psi.grid
    c = coupling
    for a in (c.source_axis, c.target_axis):
        if not 0 <= a < grid.dims:
            raise FieldError(f"coupling axis {a} not on grid")
    src = grid.mesh(c.source_axis)
    max_shift = abs(c.strength) * tau * float(np.max(np.abs(src)))
    if max_shift > 0.5 * grid.lengths[c.target_axis]:
        raise PropagationError(
            f"conditional displacement {max_shift:g} exceeds half the target "
            f"axis extent {grid.lengths[c.target_axis]:g}"
        )
    if c.strength * tau == 0.0:
        return psi.copy()
    kt = grid.k_coords(c.target_axis)
    shp = [1] * grid.dims
    shp[c.target_axis] = grid.shape[c.target_axis]
    ft = sfft.fft(psi.amplitudes, axis=c.target_axis)
    ft *= np.exp(-1j * c.strength * tau * src * kt.reshape(shp))
    return WaveFunction(grid, sfft.ifft(ft, axis=c.target_axis), psi.time)


@dataclass
class EvolutionRecord:
    """Snapshots at a fixed stride plus conserved-quantity time series."""

    grid: Grid
    params: PhysicalParams
    hamiltonian: HamiltonianSpec
    schedule: Schedule
    times: np.ndarray = None
    snapshots: list = field(default_factory=list)
    norms: np.ndarray = None
    energies: np.ndarray = None  # NaN where a gate/window made <H> time-dependent

    @property
    def snapshot_dt(self):
        return self.schedule.dt * self.schedule.stride

    def wave_at(self, index):
        return WaveFunction(self.grid, self.snapshots[index], self.times[index])


def evolve(psi, hamiltonian, schedule, params=None):
    """Integrate the Schroedinger equation over a schedule.

    Returns an EvolutionRecord with snapshots every `stride` steps (always
    including the initial and final states).
    """
    if params is None:
        params = PhysicalParams(masses=(1.0,) * psi.grid.dims)
    op = SplitOperator(psi.grid, params, hamiltonian, schedule.dt)
    amp = psi.amplitudes.copy()

    times, snaps, norms, energies = [], [], [], []

    def record(i, a):
        t = schedule.time_at(i)
        times.append(t)
        snaps.append(a.copy())
        norms.append(float(np.sqrt(np.sum(np.abs(a) ** 2) * psi.grid.dV)))
        e = op.energy(a, t if i < schedule.n_steps else None)
        energies.append(np.nan if e is None else e)

    record(0, amp)
    for i in range(schedule.n_steps):
        amp = op.step_array(amp, schedule.time_at(i))
        if (i + 1) % 64 == 0 or i + 1 == schedule.n_steps:
            if not np.all(np.isfinite(amp.view(float))):
                raise PropagationError(
                    f"non-finite amplitudes at step {i + 1} "
                    f"(t={schedule.time_at(i + 1):g})"
                )
        if (i + 1) % schedule.stride == 0 or i + 1 == schedule.n_steps:
            record(i + 1, amp)

    return EvolutionRecord(
        grid=psi.grid,
        params=params,
        hamiltonian=hamiltonian,
        schedule=schedule,
        times=np.asarray(times),
        snapshots=snaps,
        norms=np.asarray(norms),
        energies=np.asarray(energies),
    )


# ---------------------------------------------------------------------------
# persistence

def hamiltonian_to_dict(h):
    d = {"terms": [], "coupling": None}
    for t in h.terms:
        p = {k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else v)
             for k, v in t.pdict.items()}
        d["terms"].append({"kind": t.kind, "axes": list(t.axes),
                           "params": p, "window": list(t.window) if t.window else None})
    if h.coupling is not None:
        c = h.coupling
        d["coupling"] = {"source_axis": c.source_axis, "target_axis": c.target_axis,
                         "strength": c.strength, "t_on": c.t_on, "t_off": c.t_off}
    return d


def hamiltonian_hash(h):
    blob = json.dumps(hamiltonian_to_dict(h), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_record(dirpath, record):
    """Persist an EvolutionRecord: JSON manifest plus per-snapshot BPWF files."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "hamiltonian": hamiltonian_to_dict(record.hamiltonian),
        "hamiltonian_hash": hamiltonian_hash(record.hamiltonian),
        "schedule": {"t_start": record.schedule.t_start, "t_end": record.schedule.t_end,
                     "dt": record.schedule.dt, "stride": record.schedule.stride},
        "params": {"hbar": record.params.hbar, "masses": list(record.params.masses)},
        "times": record.times.tolist(),
        "norms": record.norms.tolist(),
        "energies": [None if np.isnan(e) else e for e in record.energies],
        "snapshot_files": [],
    }
    for i in range(len(record.snapshots)):
        step_idx = int(round((record.times[i] - record.schedule.t_start) / record.schedule.dt))
        name = f"snapshot_{step_idx:08d}.bpwf"
        save_wavefunction(os.path.join(dirpath, name), record.wave_at(i))
        manifest["snapshot_files"].append(name)
    with open(os.path.join(dirpath, "evolution.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_record(dirpath):
    with open(os.path.join(dirpath, "evolution.json")) as fh:
        m = json.load(fh)
    terms = []
    for t in m["hamiltonian"]["terms"]:
        params = {k: (np.asarray(v) if isinstance(v, list) else v)
                  for k, v in t["params"].items()}
        terms.append(PotentialTerm.make(t["kind"], t["axes"],
                                        window=tuple(t["window"]) if t["window"] else None,
                                        **params))
    cdict = m["hamiltonian"]["coupling"]
    coupling = MeasurementCoupling(**cdict) if cdict else None
    h = HamiltonianSpec(tuple(terms), coupling)
    sched = Schedule(**m["schedule"])
    params = PhysicalParams(m["params"]["hbar"], tuple(m["params"]["masses"]))
    snaps, grid = [], None
    for name in m["snapshot_files"]:
        psi = load_wavefunction(os.path.join(dirpath, name))
        grid = psi.grid
        snaps.append(psi.amplitudes)
    return EvolutionRecord(
        grid=grid, params=params, hamiltonian=h, schedule=sched,
        times=np.asarray(m["times"]), snapshots=snaps,
        norms=np.asarray(m["norms"]),
        energies=np.asarray([np.nan if e is None else e for e in m["energies"]]),
    )
