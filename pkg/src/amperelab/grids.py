"""Uniform Cartesian grids over normalized convex domains.

A domain is a convex body with B_1 contained in it and itself contained in
B_n (n the dimension).  Scalar fields live on the nodes of a uniform grid
covering the domain's bounding box; nodes outside the domain carry the
Dirichlet boundary value 0.  Second derivatives are discretized with central
differences, falling back to boundary-clipped three-point formulas (exact on
quadratics) where the regular stencil would leave the domain.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InsufficientStencil,
    NonConvexDomain,
    NormalizationImpossible,
    PositiveInteriorValue,
)

GEOM_TOL = 1e-12

_MAGIC = b"CVGRID01"


class DomainSpec:
    """Convex domain: ball, axis box, axis ellipse, or convex polygon (2D)."""

    def __init__(self, kind, params, dimension, pre_map=None):
        self.kind = kind
        self.params = params
        self.dimension = dimension
        # unit-determinant linear map applied during build_domain, if any
        self.pre_map = pre_map
        if kind == "polygon":
            verts = np.asarray(params["vertices"], dtype=float)
            self._verts = _ccw(verts)
            self._normals, self._offsets = _edges_to_halfspaces(self._verts)

    # -- constructors ----------------------------------------------------

    @classmethod
    def ball(cls, radius, dimension=2):
        return cls("ball", {"radius": float(radius)}, dimension)

    @classmethod
    def box(cls, halfwidths):
        hw = tuple(float(w) for w in np.atleast_1d(halfwidths))
        return cls("box", {"halfwidths": hw}, len(hw))

    @classmethod
    def ellipse(cls, axes):
        ax = tuple(float(a) for a in np.atleast_1d(axes))
        return cls("ellipse", {"axes": ax}, len(ax))

    @classmethod
    def polygon(cls, vertices):
        verts = np.asarray(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise NonConvexDomain("polygon domains are 2D only")
        return cls("polygon", {"vertices": verts.tolist()}, 2)

    # -- geometry ----------------------------------------------------------

    def contains(self, pts, tol=GEOM_TOL):
        """Closed membership test for an (..., n) array of points."""
        pts = np.asarray(pts, dtype=float)
        if self.kind == "ball":
            r = self.params["radius"]
            return np.einsum("...i,...i->...", pts, pts) <= r * r * (1 + 1e-14) + tol
        if self.kind == "box":
            hw = np.asarray(self.params["halfwidths"])
            return np.all(np.abs(pts) <= hw + tol, axis=-1)
        if self.kind == "ellipse":
            ax = np.asarray(self.params["axes"])
            q = pts / ax
            return np.einsum("...i,...i->...", q, q) <= 1 + 1e-14 + tol
        # polygon
        vals = pts @ self._normals.T - self._offsets
        return np.all(vals <= tol, axis=-1)

    def ray_exit(self, pts, direction):
        """Distance along `direction` (euclidean) from points inside to the boundary."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        d = np.asarray(direction, dtype=float)
        dn = np.linalg.norm(d)
        if self.kind == "ball":
            r = self.params["radius"]
            return _ray_exit_ball(pts, d, dn, r)
        if self.kind == "ellipse":
            ax = np.asarray(self.params["axes"])
            # map to the unit ball; arc length is not preserved, so rescale
            # the parametric exit time back to euclidean length along d
            t = _ray_exit_ball_param(pts / ax, d / ax, 1.0)
            return t * dn
        if self.kind == "box":
            hw = np.asarray(self.params["halfwidths"])
            normals = np.vstack([np.eye(self.dimension), -np.eye(self.dimension)])
            offsets = np.concatenate([hw, hw])
        else:
            normals, offsets = self._normals, self._offsets
        num = offsets[None, :] - pts @ normals.T
        den = normals @ d
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(den > GEOM_TOL, num / den[None, :], np.inf)
        return np.min(t, axis=-1) * dn

    def boundary_margin(self, pts):
        """Lower bound on the distance from points to the domain boundary."""
        pts = np.asarray(pts, dtype=float)
        if self.kind == "ball":
            r = self.params["radius"]
            return r - np.sqrt(np.einsum("...i,...i->...", pts, pts))
        if self.kind == "box":
            hw = np.asarray(self.params["halfwidths"])
            return np.min(hw - np.abs(pts), axis=-1)
        if self.kind == "ellipse":
            ax = np.asarray(self.params["axes"])
            q = pts / ax
            rho = np.sqrt(np.einsum("...i,...i->...", q, q))
            return (1.0 - rho) * np.min(ax)
        return np.min(self._offsets - pts @ self._normals.T, axis=-1)

    @property
    def inner_radius(self):
        if self.kind == "ball":
            return self.params["radius"]
        if self.kind == "box":
            return min(self.params["halfwidths"])
        if self.kind == "ellipse":
            return min(self.params["axes"])
        return float(np.min(self._offsets))

    @property
    def outer_radius(self):
        if self.kind == "ball":
            return self.params["radius"]
        if self.kind == "box":
            return float(np.linalg.norm(self.params["halfwidths"]))
        if self.kind == "ellipse":
            return max(self.params["axes"])
        return float(np.max(np.linalg.norm(self._verts, axis=1)))

    def to_json(self):
        doc = {"kind": self.kind, "dimension": self.dimension, "params": self.params}
        if self.pre_map is not None:
            doc["pre_map"] = np.asarray(self.pre_map).tolist()
        return doc

    @classmethod
    def from_json(cls, doc):
        pre = np.asarray(doc["pre_map"]) if "pre_map" in doc else None
        return cls(doc["kind"], doc["params"], doc["dimension"], pre_map=pre)


def _ccw(verts):
    area2 = 0.0
    m = len(verts)
    for i in range(m):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % m]
        area2 += x1 * y2 - x2 * y1
    return verts if area2 > 0 else verts[::-1]


def _edges_to_halfspaces(verts):
    m = len(verts)
    normals, offsets = [], []
    for i in range(m):
        p, q = verts[i], verts[(i + 1) % m]
        e = q - p
        nrm = np.array([e[1], -e[0]])
        ln = np.linalg.norm(nrm)
        if ln < GEOM_TOL:
            continue
        nrm = nrm / ln
        normals.append(nrm)
        offsets.append(nrm @ p)
    normals = np.asarray(normals)
    offsets = np.asarray(offsets)
    # convexity: every vertex must satisfy every edge inequality
    if np.any(verts @ normals.T - offsets > 1e-9):
        raise NonConvexDomain("polygon vertices are not in convex position")
    return normals, offsets


def _ray_exit_ball(pts, d, dn, radius):
    return _ray_exit_ball_param(pts, d, radius) * dn


def _ray_exit_ball_param(pts, d, radius):
    # solve |x + t d| = radius for the positive root, in parameter t
    dd = d @ d
    xd = pts @ d
    xx = np.einsum("ij,ij->i", pts, pts)
    disc = np.maximum(xd * xd + dd * (radius * radius - xx), 0.0)
    return (-xd + np.sqrt(disc)) / dd


def build_domain(kind, dimension=2, **params):
    """Validate a convex shape and normalize it into the slab B_1 < domain < B_n.

    A unit-determinant diagonal rescaling is applied when the raw shape
    violates the inclusions but a rescaled version satisfies them; the map is
    recorded on the returned spec.  Raises NonConvexDomain for non-convex
    input and NormalizationImpossible when no unit-determinant map works.
    """
    n = dimension
    tol = 1e-9
    if kind == "ball":
        r = float(params["radius"])
        if not (1 - tol <= r <= n + tol):
            raise NormalizationImpossible(
                f"ball of radius {r} cannot satisfy B_1 < domain < B_{n} under unit-determinant maps"
            )
        return DomainSpec.ball(r, n)
    if kind == "ellipse":
        ax = np.asarray(params["axes"], dtype=float)
        n = len(ax)
        if np.min(ax) >= 1 - tol and np.max(ax) <= n + tol:
            return DomainSpec.ellipse(ax)
        g = float(np.prod(ax)) ** (1.0 / n)
        if not (1 - tol <= g <= n + tol):
            raise NormalizationImpossible(
                f"ellipse axes {tuple(ax)} have geometric mean {g:.4g} outside [1, {n}]"
            )
        scale = g / ax
        spec = DomainSpec.ellipse(np.full(n, g))
        spec.pre_map = np.diag(scale)
        return spec
    if kind == "box":
        hw = np.asarray(params["halfwidths"], dtype=float)
        n = len(hw)
        if np.min(hw) >= 1 - tol and np.linalg.norm(hw) <= n + tol:
            return DomainSpec.box(hw)
        g = float(np.prod(hw)) ** (1.0 / n)
        if not (1 - tol <= g and g * np.sqrt(n) <= n + tol):
            raise NormalizationImpossible(
                f"box halfwidths {tuple(hw)} cannot be rescaled into [B_1, B_{n}]"
            )
        spec = DomainSpec.box(np.full(n, g))
        spec.pre_map = np.diag(g / hw)
        return spec
    if kind == "polygon":
        spec = DomainSpec.polygon(params["vertices"])  # raises NonConvexDomain
        if spec.inner_radius >= 1 - tol and spec.outer_radius <= 2 + tol:
            return spec
        raise NormalizationImpossible(
            "polygon violates B_1 < domain < B_2; supply pre-normalized vertices"
        )
    raise NonConvexDomain(f"unknown domain kind {kind!r}")


@dataclass(frozen=True)
class Grid:
    """Uniform node lattice over a centered box [-extent, extent]^n."""

    extent: float
    nodes_per_side: int
    dimension: int = 2

    @property
    def spacing(self):
        return 2 * self.extent / (self.nodes_per_side - 1)

    @property
    def shape(self):
        return (self.nodes_per_side,) * self.dimension

    @property
    def cell_volume(self):
        return self.spacing ** self.dimension

    def axis(self):
        return np.linspace(-self.extent, self.extent, self.nodes_per_side)

    def coords(self):
        """Node coordinates, shape (*grid shape, n)."""
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.dimension), indexing="ij")
        return np.stack(mesh, axis=-1)

    def flat_coords(self):
        return self.coords().reshape(-1, self.dimension)


# nodes closer than this fraction of the spacing to the boundary are treated
# as boundary nodes; keeps clipped stencil arms well conditioned
CORE_MARGIN = 0.3


@dataclass
class ConvexField:
    """Scalar field on a grid over a convex domain.

    `values` holds node values with 0 outside the domain for Dirichlet
    solutions; `inside` marks nodes in the closed domain and `core` the nodes
    far enough from the boundary to carry stencils.  `dirichlet` says whether
    off-core neighbors may be treated as boundary value 0.
    """

    grid: Grid
    domain: DomainSpec
    values: np.ndarray
    inside: np.ndarray = field(default=None)
    dirichlet: bool = True
    core: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = self.grid.coords()
        if self.inside is None:
            self.inside = self.domain.contains(pts)
        if self.core is None:
            margin = self.domain.boundary_margin(pts)
            self.core = self.inside & (margin > CORE_MARGIN * self.grid.spacing)

    @classmethod
    def from_function(cls, domain, grid, func, dirichlet=False):
        pts = grid.coords()
        vals = np.asarray(func(pts[..., 0], pts[..., 1]) if grid.dimension == 2
                          else func(pts[..., 0], pts[..., 1], pts[..., 2]), dtype=float)
        fld = cls(grid, domain, vals, dirichlet=dirichlet)
        if dirichlet:
            fld.values = np.where(fld.core, vals, 0.0)
        return fld

    @property
    def sup_norm(self):
        vals = self.values[self.inside]
        return float(np.max(np.abs(vals))) if vals.size else 0.0


# -- shifted views ---------------------------------------------------------------


def shifted(arr, offset, fill=np.nan):
    """Array shifted by an integer offset vector, padded with `fill`."""
    out = np.full(arr.shape, fill, dtype=arr.dtype if arr.dtype != bool else bool)
    src = []
    dst = []
    for k, o in enumerate(offset):
        m = arr.shape[k]
        o = int(o)
        if o >= 0:
            src.append(slice(o, m))
            dst.append(slice(0, m - o))
        else:
            src.append(slice(0, m + o))
            dst.append(slice(-o, m))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _second_difference(fld, vec):
    """Directional second derivative along an integer vector, boundary-clipped.

    Stencil arms reach to the true boundary crossing (value 0) whenever the
    neighbor node is not a core node, which keeps the formula exact on
    quadratics and the arm lengths bounded below by the core margin.

    Returns (values, clipped, ok): `clipped` marks nodes using a boundary arm,
    `ok` marks nodes where the formula could be evaluated at all.
    """
    grid, dom = fld.grid, fld.domain
    s = grid.spacing
    vec = np.asarray(vec, dtype=int)
    step = s * np.linalg.norm(vec)
    u = fld.values
    core = fld.core

    up, um = shifted(u, vec), shifted(u, -vec)
    inp, inm = shifted(core, vec, fill=False), shifted(core, -vec, fill=False)

    a = np.full(u.shape, step)
    b = np.full(u.shape, step)
    vp = np.where(inp, up, 0.0)
    vm = np.where(inm, um, 0.0)
    ok = core.copy()
    clipped = np.zeros(u.shape, dtype=bool)

    need_p = core & ~inp
    need_m = core & ~inm
    if fld.dirichlet:
        pts = grid.coords()
        d = vec * s
        if np.any(need_p):
            a[need_p] = dom.ray_exit(pts[need_p], d)
            clipped |= need_p
        if np.any(need_m):
            b[need_m] = dom.ray_exit(pts[need_m], -d)
            clipped |= need_m
    else:
        ok &= inp & inm

    with np.errstate(invalid="ignore"):
        d2 = 2.0 * (b * vp + a * vm - (a + b) * u) / (a * b * (a + b))
    d2 = np.where(ok, d2, np.nan)
    return d2, clipped & ok, ok


@dataclass
class HessianField:
    """Per-node symmetric Hessian matrices and their operator norms."""

    grid: Grid
    matrices: np.ndarray      # (*shape, n, n)
    norms: np.ndarray         # (*shape,) largest |eigenvalue|
    eig_min: np.ndarray       # (*shape,) smallest eigenvalue
    eig_max: np.ndarray       # (*shape,) largest eigenvalue
    valid: np.ndarray         # nodes with a usable (possibly clipped) stencil
    one_sided: np.ndarray     # nodes where a boundary-clipped arm was used

    @property
    def interior_ok(self):
        """Nodes safe for interior integrals: full uncplipped stencil."""
        return self.valid & ~self.one_sided


def discrete_hessian(fld):
    """Assemble the discrete Hessian of a field.

    Diagonal entries come from axis second differences and off-diagonal
    entries from the two plane-diagonal second differences, all exact on
    quadratic polynomials including at boundary-clipped nodes.
    """
    n = fld.grid.dimension
    shape = fld.values.shape
    H = np.zeros(shape + (n, n))
    valid = fld.core.copy()
    clipped = np.zeros(shape, dtype=bool)

    for i in range(n):
        e = np.zeros(n, dtype=int)
        e[i] = 1
        d2, cl, ok = _second_difference(fld, e)
        H[..., i, i] = d2
        valid &= ok
        clipped |= cl

    for i in range(n):
        for j in range(i + 1, n):
            ep = np.zeros(n, dtype=int)
            em = np.zeros(n, dtype=int)
            ep[i], ep[j] = 1, 1
            em[i], em[j] = 1, -1
            d2p, clp, okp = _second_difference(fld, ep)
            d2m, clm, okm = _second_difference(fld, em)
            hij = 0.5 * (d2p - d2m)
            H[..., i, j] = hij
            H[..., j, i] = hij
            valid &= okp & okm
            clipped |= clp | clm

    if not np.any(valid):
        raise InsufficientStencil("no interior node has a usable Hessian stencil")

    norms, eig_min, eig_max = _sym_extreme_eigs(H, n)
    norms = np.where(valid, norms, 0.0)
    eig_min = np.where(valid, eig_min, 0.0)
    eig_max = np.where(valid, eig_max, 0.0)
    H = np.where(valid[..., None, None], H, 0.0)
    return HessianField(fld.grid, H, norms, eig_min, eig_max, valid, clipped & valid)


def _sym_extreme_eigs(H, n):
    if n == 2:
        a, b, c = H[..., 0, 0], H[..., 0, 1], H[..., 1, 1]
        mean = 0.5 * (a + c)
        rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        lo, hi = mean - rad, mean + rad
    else:
        Hs = np.nan_to_num(H, nan=0.0)
        w = np.linalg.eigvalsh(Hs.reshape(-1, n, n)).reshape(H.shape[:-2] + (n,))
        lo, hi = w[..., 0], w[..., -1]
    return np.maximum(np.abs(lo), np.abs(hi)), lo, hi


def convexity_directions(n):
    """Grid axes plus all plane diagonals, one representative per +/- pair."""
    dirs = []
    for i in range(n):
        e = np.zeros(n, dtype=int)
        e[i] = 1
        dirs.append(e.copy())
    for i in range(n):
        for j in range(i + 1, n):
            for sgn in (1, -1):
                e = np.zeros(n, dtype=int)
                e[i], e[j] = 1, sgn
                dirs.append(e.copy())
    return dirs


@dataclass
class ConvexityReport:
    violations: list          # (flat node index, direction tuple) pairs, capped
    n_violations: int
    n_checked: int
    worst: float              # most negative second difference seen

    @property
    def is_convex(self):
        return self.n_violations == 0


def check_convexity(fld, tol=None, max_listed=50):
    """Check discrete convexity of a field along axes and diagonals."""
    if tol is None:
        tol = 1e-8 * max(fld.sup_norm, 1e-300)
    violations = []
    n_viol = 0
    n_checked = 0
    worst = 0.0
    for vec in convexity_directions(fld.grid.dimension):
        d2, _, ok = _second_difference(fld, vec)
        bad = ok & (d2 < -tol)
        n_checked += int(np.count_nonzero(ok))
        n_viol += int(np.count_nonzero(bad))
        if np.any(bad):
            worst = min(worst, float(np.nanmin(d2[bad])))
            idx = np.flatnonzero(bad.ravel())
            for k in idx[: max(0, max_listed - len(violations))]:
                violations.append((int(k), tuple(int(v) for v in vec)))
    return ConvexityReport(violations, n_viol, n_checked, worst)


def sup_norm_and_interior(fld, tol_pos=None):
    """Sup norm of a nonpositive field and the mask {u < -sup/2}.

    Raises PositiveInteriorValue when the field is positive somewhere inside
    (beyond round-off); the identically-zero field returns an empty mask.
    """
    vals = fld.values[fld.inside]
    if vals.size == 0:
        return 0.0, np.zeros_like(fld.inside)
    sup = float(np.max(np.abs(vals)))
    if tol_pos is None:
        tol_pos = 1e-12 * max(sup, 1.0)
    if float(np.max(vals)) > tol_pos:
        raise PositiveInteriorValue(f"field reaches {np.max(vals):.3e} > 0 inside the domain")
    mask = fld.inside & (fld.values < -0.5 * sup)
    return sup, mask


def measure(mask, grid):
    """Node-count quadrature of a set's Lebesgue measure."""
    return float(np.count_nonzero(mask)) * grid.cell_volume


def integrate(vals, mask, grid):
    """Node-count quadrature of a field over a node mask."""
    return float(np.sum(vals[mask])) * grid.cell_volume


# -- serialization ------------------------------------------------------------------


def save_field(fld, path):
    """Write binary node values plus a JSON metadata sidecar."""
    path = str(path)
    g = fld.grid
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<i", g.dimension))
        fh.write(struct.pack(f"<{g.dimension}i", *fld.values.shape))
        fh.write(struct.pack("<d", g.spacing))
        np.ascontiguousarray(fld.values, dtype="<f8").tofile(fh)
    meta = {
        "domain": fld.domain.to_json(),
        "grid": {"extent": g.extent, "nodes_per_side": g.nodes_per_side,
                 "dimension": g.dimension},
        "dirichlet": fld.dirichlet,
    }
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_field(path):
    path = str(path)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    g = Grid(**meta["grid"])
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a grid field file")
        (n,) = struct.unpack("<i", fh.read(4))
        dims = struct.unpack(f"<{n}i", fh.read(4 * n))
        (_spacing,) = struct.unpack("<d", fh.read(8))
        vals = np.fromfile(fh, dtype="<f8", count=int(np.prod(dims))).reshape(dims)
    dom = DomainSpec.from_json(meta["domain"])
    return ConvexField(g, dom, vals, dirichlet=meta["dirichlet"])
