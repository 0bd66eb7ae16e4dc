"""Monotone wide-stencil solver for det D2u = f with zero Dirichlet data.

The determinant is discretized as the minimum over orthogonal direction
frames of the product of positive parts of directional second differences,
plus the negative parts (which vanish on discretely convex solutions and
enforce convexity during the iteration).  The resulting nonlinear system is
solved by a damped semismooth Newton method started from a convex paraboloid
subsolution.
"""

import time
from dataclasses import dataclass, field as dc_field
from math import gcd

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegenerateRhs, NonConvergence
from .grids import ConvexField, Grid

# direction generations for n=2, by increasing angular resolution;
# each primitive vector is paired with its integer perpendicular
_GEN2 = [(1, 0), (1, 1), (2, 1), (1, 2), (3, 1), (1, 3), (3, 2), (2, 3)]


def direction_frames(dimension, n_directions=8):
    """Orthogonal integer frames covering `n_directions` stencil directions."""
    if dimension == 2:
        frames = []
        count = 0
        for p, q in _GEN2:
            if gcd(p, q) != 1:
                continue
            v = np.array([p, q])
            w = np.array([-q, p])
            frames.append((v, w))
            count += 4
            if count >= n_directions:
                break
        return frames
    if dimension == 3:
        catalog = [
            [(1, 0, 0), (0, 1, 0), (0, 0, 1)],
            [(1, 1, 0), (1, -1, 0), (0, 0, 1)],
            [(1, 0, 1), (1, 0, -1), (0, 1, 0)],
            [(0, 1, 1), (0, 1, -1), (1, 0, 0)],
            [(1, 1, 1), (1, -1, 0), (1, 1, -2)],
            [(1, 1, -1), (1, -1, 0), (1, 1, 2)],
        ]
        frames = [tuple(np.array(v) for v in fr) for fr in catalog]
        directions = {tuple(v) for fr in frames for v in fr}
        n_frames = max(1, min(len(frames), (n_directions + 5) // 6))
        del directions
        return frames[:n_frames] if n_directions < 26 else frames
    raise ValueError(f"unsupported dimension {dimension}")


@dataclass
class RhsSpec:
    """Right hand side: a density pinched in [lam, Lam], or a measure density.

    `density` maps an (N, n) array of points to values.  Degenerate (lam = 0)
    densities are only admitted when `measure_valued` is set, which is how the
    polynomial-measure pipeline feeds the solver.
    """

    density: object
    lam: float
    Lam: float
    measure_valued: bool = False
    label: str = "density"

    @classmethod
    def constant(cls, value):
        v = float(value)
        return cls(lambda pts: np.full(pts.shape[0], v), v, v, label=f"f={v:g}")

    def __post_init__(self):
        if not self.measure_valued and self.lam <= 0:
            raise DegenerateRhs(f"density lower bound {self.lam} must be positive")
        if self.Lam < self.lam:
            raise DegenerateRhs("upper pinch constant below lower pinch constant")

    def __call__(self, pts):
        return np.asarray(self.density(pts), dtype=float)


def checkerboard_rhs(amplitude=0.9, frequency=3):
    """Oscillatory density 1 + amplitude * sign(sin sin), pinched away from 0."""
    if not 0 < amplitude < 1:
        raise DegenerateRhs("amplitude must lie in (0, 1)")
    w = np.pi * frequency

    def density(pts):
        s = np.sin(w * pts[:, 0]) * np.sin(w * pts[:, 1])
        return 1.0 + amplitude * np.sign(s)

    return RhsSpec(density, 1.0 - amplitude, 1.0 + amplitude,
                   label=f"checkerboard(a={amplitude:g}, k={frequency:g})")


@dataclass
class SolveReport:
    iterations: int
    residual_max: float
    residual_l1: float
    stencil_directions: int
    wall_time: float
    converged: bool
    nodes: int
    damping_events: int = 0

    def to_json(self):
        return {
            "iterations": self.iterations,
            "residual_max": self.residual_max,
            "residual_l1": self.residual_l1,
            "stencil_directions": self.stencil_directions,
            "wall_time": self.wall_time,
            "converged": self.converged,
            "nodes": self.nodes,
            "damping_events": self.damping_events,
        }


class _Stencil:
    """Precomputed neighbor indices, arms and coefficients per direction."""

    def __init__(self, grid, domain, core):
        self.grid = grid
        self.domain = domain
        self.core = core
        self.core_flat = np.flatnonzero(core.ravel())
        self.n_unknowns = self.core_flat.size
        unknown_of = np.full(core.size, -1, dtype=np.int64)
        unknown_of[self.core_flat] = np.arange(self.n_unknowns)
        self.unknown_of = unknown_of
        self.pts = grid.flat_coords()[self.core_flat]
        self.dirs = []          # integer vectors
        self.nb_p, self.nb_m = [], []
        self.cp, self.cm, self.c0 = [], [], []

    def add_direction(self, vec):
        grid, dom = self.grid, self.domain
        s = grid.spacing
        vec = np.asarray(vec, dtype=int)
        step = s * float(np.linalg.norm(vec))
        shape = grid.shape
        strides = np.array([int(np.prod(shape[k + 1:])) for k in range(len(shape))])
        off = int(vec @ strides)

        idx = np.unravel_index(self.core_flat, shape)
        coords = np.stack(idx, axis=1)
        nb_p = np.full(self.n_unknowns, -1, dtype=np.int64)
        nb_m = np.full(self.n_unknowns, -1, dtype=np.int64)
        in_p = np.all((coords + vec >= 0) & (coords + vec < np.array(shape)), axis=1)
        in_m = np.all((coords - vec >= 0) & (coords - vec < np.array(shape)), axis=1)
        nb_p[in_p] = self.unknown_of[self.core_flat[in_p] + off]
        nb_m[in_m] = self.unknown_of[self.core_flat[in_m] - off]

        a = np.full(self.n_unknowns, step)
        b = np.full(self.n_unknowns, step)
        d = vec * s
        clip_p = nb_p < 0
        clip_m = nb_m < 0
        if np.any(clip_p):
            a[clip_p] = self.domain.ray_exit(self.pts[clip_p], d)
        if np.any(clip_m):
            b[clip_m] = self.domain.ray_exit(self.pts[clip_m], -d)

        self.dirs.append(vec)
        self.nb_p.append(nb_p)
        self.nb_m.append(nb_m)
        self.cp.append(2.0 / (a * (a + b)))
        self.cm.append(2.0 / (b * (a + b)))
        self.c0.append(-2.0 / (a * b))

    def second_differences(self, u):
        """All directional second differences for an unknown vector u."""
        out = np.empty((len(self.dirs), self.n_unknowns))
        for k in range(len(self.dirs)):
            up = np.where(self.nb_p[k] >= 0, u[np.maximum(self.nb_p[k], 0)], 0.0)
            um = np.where(self.nb_m[k] >= 0, u[np.maximum(self.nb_m[k], 0)], 0.0)
            out[k] = self.cp[k] * up + self.cm[k] * um + self.c0[k] * u
        return out


def build_stencil(grid, domain, core, n_directions=8):
    """Stencil with all directions of the requested frame family."""
    frames = direction_frames(grid.dimension, n_directions)
    st = _Stencil(grid, domain, core)
    dir_index = {}
    frame_dirs = []
    for fr in frames:
        ids = []
        for v in fr:
            key = tuple(int(c) for c in v)
            if key not in dir_index:
                dir_index[key] = len(st.dirs)
                st.add_direction(v)
            ids.append(dir_index[key])
        frame_dirs.append(tuple(ids))
    st.frames = frame_dirs
    st.n_directions = 2 * len(st.dirs)
    return st


def ma_operator(st, u):
    """Monotone determinant value per unknown plus per-frame data.

    Returns (value, delta, frame_vals, active) where delta has shape
    (n_dirs, N) and active is the index of the minimizing frame.
    """
    delta = st.second_differences(u)
    frame_vals = np.empty((len(st.frames), st.n_unknowns))
    for fi, ids in enumerate(st.frames):
        pos = np.ones(st.n_unknowns)
        neg = np.zeros(st.n_unknowns)
        for d in ids:
            pos *= np.maximum(delta[d], 0.0)
            neg += np.minimum(delta[d], 0.0)
        frame_vals[fi] = pos + neg
    active = np.argmin(frame_vals, axis=0)
    value = frame_vals[active, np.arange(st.n_unknowns)]
    return value, delta, frame_vals, active


def _jacobian(st, delta, active):
    rows, cols, vals = [], [], []
    arange = np.arange(st.n_unknowns)
    for fi, ids in enumerate(st.frames):
        sel = active == fi
        if not np.any(sel):
            continue
        pos_parts = [np.maximum(delta[d][sel], 0.0) for d in ids]
        for local, d in enumerate(ids):
            others = np.ones(sel.sum())
            for lo, p in enumerate(pos_parts):
                if lo != local:
                    others *= p
            w = np.where(delta[d][sel] > 0.0, others, 1.0)
            for nb, coef in ((st.nb_p[d], st.cp[d]), (st.nb_m[d], st.cm[d])):
                nb_s = nb[sel]
                ok = nb_s >= 0
                rows.append(arange[sel][ok])
                cols.append(nb_s[ok])
                vals.append((w * coef[sel])[ok])
            rows.append(arange[sel])
            cols.append(arange[sel])
            vals.append(w * st.c0[d][sel])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(st.n_unknowns, st.n_unknowns))


@dataclass
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 80
    n_directions: int = 8
    damping_min: float = 1.0 / 1024
    armijo: float = 0.1
    ridge: float = 0.0

    def to_json(self):
        return {"tol": self.tol, "max_iter": self.max_iter,
                "n_directions": self.n_directions,
                "damping_min": self.damping_min, "armijo": self.armijo,
                "ridge": self.ridge}


def solve_dirichlet(domain, rhs, nodes_per_side, config=None):
    """Solve det D2u = f on the domain with u = 0 on the boundary.

    Returns the solved ConvexField and a SolveReport.  Deterministic for a
    fixed configuration; raises NonConvergence when the Newton loop stalls
    above the residual tolerance.
    """
    config = config or SolverConfig()
    grid = Grid(domain.outer_radius, nodes_per_side, domain.dimension)
    probe = ConvexField(grid, domain, np.zeros(grid.shape), dirichlet=True)
    st = build_stencil(grid, domain, probe.core, config.n_directions)

    f_vals = rhs(st.pts)
    if not rhs.measure_valued and np.any(f_vals < rhs.lam - 1e-12):
        raise DegenerateRhs("density values fall below the declared lower bound")

    # Perron-style initialization: convex paraboloid subsolution
    r_out = domain.outer_radius * (1 + 1e-9)
    scale = max(rhs.Lam, 1e-8) ** (1.0 / grid.dimension)
    u = scale * 0.5 * (np.einsum("ij,ij->i", st.pts, st.pts) - r_out ** 2)

    t0 = time.perf_counter()
    damping_events = 0
    g_val, delta, _, active = ma_operator(st, u)
    res = g_val - f_vals
    res_norm = float(np.max(np.abs(res)))
    it = 0
    while res_norm > config.tol:
        if it >= config.max_iter:
            raise NonConvergence(it, res_norm)
        J = _jacobian(st, delta, active)
        if config.ridge > 0:
            J = J + config.ridge * sp.eye(st.n_unknowns, format="csr")
        try:
            step = spla.spsolve(J.tocsc(), -res)
        except RuntimeError:
            J = J + 1e-10 * sp.eye(st.n_unknowns, format="csr")
            step = spla.spsolve(J.tocsc(), -res)
        theta = 1.0
        while True:
            u_try = u + theta * step
            g_val, delta, _, active = ma_operator(st, u_try)
            new_res = g_val - f_vals
            new_norm = float(np.max(np.abs(new_res)))
            if new_norm <= (1 - config.armijo * theta) * res_norm or theta <= config.damping_min:
                break
            theta *= 0.5
            damping_events += 1
        u, res, res_norm = u_try, new_res, new_norm
        it += 1

    wall = time.perf_counter() - t0
    values = np.zeros(grid.shape)
    values.ravel()[st.core_flat] = u
    fld = ConvexField(grid, domain, values, dirichlet=True)
    report = SolveReport(
        iterations=it,
        residual_max=res_norm,
        residual_l1=float(np.sum(np.abs(res))) * grid.cell_volume,
        stencil_directions=st.n_directions,
        wall_time=wall,
        converged=True,
        nodes=st.n_unknowns,
        damping_events=damping_events,
    )
    return fld, report


def radial_reference(radius=1.0, constant=1.0, nodes_per_side=65, dimension=2):
    """Exact radial solution u = c^(1/n) (|x|^2 - R^2) / 2 on the ball."""
    if constant <= 0:
        raise DegenerateRhs("radial reference needs a positive constant")
    from .grids import DomainSpec

    dom = DomainSpec.ball(radius, dimension)
    grid = Grid(radius, nodes_per_side, dimension)
    c = constant ** (1.0 / dimension)

    def func(*xs):
        r2 = sum(x * x for x in xs)
        return 0.5 * c * (r2 - radius * radius)

    return ConvexField.from_function(dom, grid, func, dirichlet=True)


def residual(fld, rhs, n_directions=8):
    """Max and L1 residual of the monotone determinant against the density.

    Uses the same discretization as the solver on the field's own grid.
    """
    st = build_stencil(fld.grid, fld.domain, fld.core, n_directions)
    u = fld.values.ravel()[st.core_flat]
    g_val, _, _, _ = ma_operator(st, u)
    res = g_val - rhs(st.pts)
    return {
        "max": float(np.max(np.abs(res))),
        "l1": float(np.sum(np.abs(res))) * fld.grid.cell_volume,
        "nodes": int(st.n_unknowns),
    }
