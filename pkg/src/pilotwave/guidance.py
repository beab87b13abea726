"""Bohmian layer: velocity fields, interpolation, trajectory integration.

The guidance law is the standard de Broglie-Bohm form

    v_i = (hbar / m_i) * Im( d_i Psi / Psi )

with the gradient evaluated spectrally.  Cells where |Psi| drops below
EPS_NODE * max|Psi| are flagged nodal; their velocity is filled from the
nearest non-nodal cell and, when a query stencil touches a nodal cell during
stepping, the speed is capped at dx/dt for that step.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.ndimage import distance_transform_edt

from .fields import FieldError, PhysicalParams, WaveFunction

EPS_NODE = 1e-8


@dataclass
class ParticleConfig:
    """Actual configuration: one position per grid axis, at a time."""

    coords: tuple
    time: float = 0.0


@dataclass
class VelocityField:
    """Per-axis velocity arrays plus the nodal-cell mask."""

    grid: object
    components: list
    nodal: np.ndarray
    time: float = 0.0
    any_nodal: bool = False
    all_nodal: bool = False


@dataclass
class Trajectory:
    """Uniform-stride time series of one particle's configuration."""

    times: np.ndarray
    positions: np.ndarray  # shape (T, D)
    degenerate: bool = False
    metadata: dict = field(default_factory=dict)


def velocity_field(psi, params=None, eps_node=EPS_NODE):
    """Spectral guidance velocity with nodal regularization."""
    if params is None:
        params = PhysicalParams(masses=(1.0,) * psi.grid.dims)
    grid = psi.grid
    amp = psi.amplitudes
    absamp = np.abs(amp)
    nodal = absamp < eps_node * np.max(absamp)
    all_nodal = bool(np.all(nodal))

    comps = []
    safe = np.where(nodal, 1.0, amp)  # avoid divide-by-zero; overwritten below
    for i in range(grid.dims):
        k = grid.k_coords(i)
        shp = [1] * grid.dims
        shp[i] = grid.shape[i]
        grad = sfft.ifft(1j * k.reshape(shp) * sfft.fft(amp, axis=i), axis=i)
        v = (params.hbar / params.masses[i]) * np.imag(grad / safe)
        comps.append(v)

    if np.any(nodal) and not all_nodal:
        # fill nodal cells from the nearest non-nodal cell
        idx = distance_transform_edt(nodal, return_distances=False, return_indices=True)
        src = tuple(idx[d] for d in range(grid.dims))
        for i in range(grid.dims):
            comps[i] = np.where(nodal, comps[i][src], comps[i])

    return VelocityField(grid, comps, nodal, psi.time,
                         any_nodal=bool(np.any(nodal)), all_nodal=all_nodal)


def _interp_weights(grid, pts):
    """Multilinear interpolation stencil for points of shape (M, D).

    Returns (corner index arrays, weights, nodal-touch template inputs):
    lists of per-corner tuples usable to index the grid arrays, plus weights
    of shape (M,) per corner.
    """
    pts = np.asarray(pts, dtype=float)
    M, D = pts.shape
    base = np.empty((M, D), dtype=np.int64)
    frac = np.empty((M, D))
    for i in range(D):
        u = (pts[:, i] - grid.los[i]) / grid.dxs[i]
        f = np.floor(u)
        base[:, i] = np.mod(f.astype(np.int64), grid.shape[i])
        frac[:, i] = u - f
    corners = []
    for mask in range(1 << D):
        idx = []
        w = np.ones(M)
        for i in range(D):
            hi = (mask >> i) & 1
            ii = base[:, i] + hi
            if hi:
                ii = np.mod(ii, grid.shape[i])
            idx.append(ii)
            w = w * (frac[:, i] if hi else (1.0 - frac[:, i]))
        corners.append((tuple(idx), w))
    return corners


def velocity_at_many(vfield, pts, return_inside=False):
    """Interpolated velocities at points (M, D); also flags nodal stencils.

    Returns (velocities, touched) where `touched` marks points whose stencil
    includes at least one nodal cell; with return_inside, additionally returns
    the mask of points whose entire stencil is nodal.
    """
    pts = vfield.grid.wrap(np.atleast_2d(pts))
    M, D = pts.shape
    corners = _interp_weights(vfield.grid, pts)
    out = np.zeros((M, D))
    touched = np.zeros(M, dtype=bool)
    inside = np.ones(M, dtype=bool)
    for idx, w in corners:
        is_nodal = vfield.nodal[idx]
        touched |= is_nodal
        inside &= is_nodal
        for i in range(D):
            out[:, i] += w * vfield.components[i][idx]
    if return_inside:
        return out, touched, inside
    return out, touched


def velocity_at(vfield, X):
    """Velocity at one configuration (per-axis tuple or ParticleConfig)."""
    coords = X.coords if isinstance(X, ParticleConfig) else X
    v, _ = velocity_at_many(vfield, np.asarray(coords, dtype=float)[None, :])
    return tuple(v[0])


def _rk4_many(vf0, vf1, pts, dt, f0=0.0, f1=1.0):
    """Vectorized RK4 for dX/dt = v(X, t), v linearly interpolated in time.

    The step covers the fraction [f0, f1] of the interval between the two
    velocity-field snapshots.  Returns (new positions, degenerate mask).
    """
    grid = vf0.grid

    def eval_v(p, frac):
        a, na, ia = velocity_at_many(vf0, p, return_inside=True)
        b, nb, ib = velocity_at_many(vf1, p, return_inside=True)
        v = (1.0 - frac) * a + frac * b
        touched = na | nb
        if np.any(touched):
            cap = min(grid.dxs) / dt
            speed = np.sqrt(np.sum(v * v, axis=1))
            over = touched & (speed > cap)
            if np.any(over):
                v[over] *= (cap / speed[over])[:, None]
        return v, ia & ib

    fm = 0.5 * (f0 + f1)
    k1, deep = eval_v(pts, f0)
    k2, _ = eval_v(pts + 0.5 * dt * k1, fm)
    k3, _ = eval_v(pts + 0.5 * dt * k2, fm)
    k4, _ = eval_v(pts + dt * k3, f1)
    new = pts + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    # a particle whose entire stencil is nodal at both time levels sits in a
    # region the regularization cannot resolve: freeze and flag it
    degen = deep.copy()
    if vf0.all_nodal or vf1.all_nodal:
        degen[:] = True
    if np.any(degen):
        new[degen] = pts[degen]
    return grid.wrap(new), degen


SUBSTEP_CFL = 0.2       # max fraction of a cell traversed per substep
MAX_SUBSTEPS = 256


def gate_kick(grid, pts, coupling, t0, t1, fraction=1.0):
    """Advective displacement from a momentum coupling g * x_src * p_tgt.

    That Hamiltonian term adds g * x_src to the target-axis probability
    current, on top of the phase-gradient velocity; over [t0, t1] it
    translates the target coordinate by g * tau * x_src (tau = overlap with
    the gate window).  Callers apply half before and half after the
    field-guided step to keep the splitting symmetric.
    """
    if coupling is None or coupling.strength == 0.0:
        return pts
    tau = max(0.0, min(coupling.t_off, t1) - max(coupling.t_on, t0))
    if tau <= 0.0:
        return pts
    pts = pts.copy()
    pts[:, coupling.target_axis] += (fraction * coupling.strength * tau
                                     * pts[:, coupling.source_axis])
    return grid.wrap(pts)


def advance_interval(vf0, vf1, pts, dt):
    """Advance particles over one snapshot interval with adaptive substeps.

    Near wave nodes the guidance velocity is stiff (v ~ 1/|Psi|); a single
    RK4 step can overshoot through a node into the neighboring flow basin,
    which the exact dynamics forbids.  The substep count is chosen so no
    particle traverses more than SUBSTEP_CFL of a cell per substep at the
    currently observed speeds.
    """
    va, _ = velocity_at_many(vf0, pts)
    vb, _ = velocity_at_many(vf1, pts)
    vmax = max(float(np.max(np.abs(va))), float(np.max(np.abs(vb))), 0.0)
    n = int(np.ceil(vmax * dt / (SUBSTEP_CFL * min(vf0.grid.dxs))))
    n = min(max(n, 1), MAX_SUBSTEPS)
    degen_any = np.zeros(len(pts), dtype=bool)
    for k in range(n):
        pts, degen = _rk4_many(vf0, vf1, pts, dt / n, f0=k / n, f1=(k + 1) / n)
        degen_any |= degen
    return pts, degen_any


def advance_particle(psi_t, psi_next, X, dt, params=None):
    """One guidance step between two wave snapshots dt apart."""
    if psi_t.grid != psi_next.grid:
        raise FieldError("wave snapshots must share one grid")
    vf0 = velocity_field(psi_t, params)
    vf1 = velocity_field(psi_next, params)
    coords = X.coords if isinstance(X, ParticleConfig) else X
    new, degen = _rk4_many(vf0, vf1, np.asarray(coords, float)[None, :], dt)
    t_new = (X.time if isinstance(X, ParticleConfig) else psi_t.time) + dt
    return ParticleConfig(tuple(new[0]), t_new), bool(degen[0])


def simulate_trajectory(record, x0, stride=1, params=None):
    """Integrate one particle through an EvolutionRecord's snapshots.

    The guidance step equals the snapshot spacing times `stride`.
    """
    trajs = simulate_trajectories(record, np.asarray(x0, float)[None, :],
                                  stride=stride, params=params)
    return trajs[0]


def simulate_trajectories(record, x0s, stride=1, params=None, metadata=None):
    """Integrate many particles at once (shared velocity fields).

    x0s: array (N, D) of initial configurations at record.times[0].
    Returns a list of Trajectory, one per particle, on the strided time axis.
    """
    if params is None:
        params = record.params
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    n_snap = len(record.snapshots)
    idxs = list(range(0, n_snap, stride))
    if idxs[-1] != n_snap - 1:
        idxs.append(n_snap - 1)

    pts = record.grid.wrap(x0s)
    frozen = np.zeros(len(pts), dtype=bool)
    times = [record.times[idxs[0]]]
    path = [pts.copy()]

    coupling = getattr(record.hamiltonian, "coupling", None)
    vf0 = velocity_field(record.wave_at(idxs[0]), params)
    for a, b in zip(idxs[:-1], idxs[1:]):
        vf1 = velocity_field(record.wave_at(b), params)
        dt = record.times[b] - record.times[a]
        t0, t1 = record.times[a], record.times[b]
        pts = gate_kick(record.grid, pts, coupling, t0, t1, 0.5)
        new, degen = advance_interval(vf0, vf1, pts, dt)
        new = gate_kick(record.grid, new, coupling, t0, t1, 0.5)
        newly = degen & ~frozen
        if np.any(newly):
            new[newly] = pts[newly]  # freeze, keep recording
            frozen |= newly
        new[frozen] = pts[frozen]
        pts = new
        times.append(record.times[b])
        path.append(pts.copy())
        vf0 = vf1

    times = np.asarray(times)
    path = np.asarray(path)  # (T, N, D)
    if not np.all(np.isfinite(path)):
        raise RuntimeError("NaN in trajectory output; regularization failed")
    out = []
    for j in range(path.shape[1]):
        out.append(Trajectory(times, path[:, j, :], bool(frozen[j]),
                              dict(metadata or {})))
    return out


# ---------------------------------------------------------------------------
# CSV output

def save_trajectories_csv(path, trajectories):
    """Combined CSV: trajectory_id, time, x_1..x_D, degenerate_flag."""
    D = trajectories[0].positions.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "time"] + [f"x_{i + 1}" for i in range(D)]
                   + ["degenerate_flag"])
        for j, tr in enumerate(trajectories):
            for t, x in zip(tr.times, tr.positions):
                w.writerow([j, repr(float(t))] + [repr(float(c)) for c in x]
                           + [int(tr.degenerate)])


def save_trajectory_csv(path, trajectory):
    """Single-trajectory CSV: time, x_1..x_D, degenerate_flag."""
    D = trajectory.positions.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"x_{i + 1}" for i in range(D)] + ["degenerate_flag"])
        for t, x in zip(trajectory.times, trajectory.positions):
            w.writerow([repr(float(t))] + [repr(float(c)) for c in x]
                       + [int(trajectory.degenerate)])
