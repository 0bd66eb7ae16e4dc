"""Sections of convex fields, their affine normalizations, and covering tools.

A section S_h(x0) is the sublevel set of u below its supporting affine
function at x0 raised by h.  Sections play the role of balls: a
unit-determinant map A rounds each compactly included section to a ball of
radius sqrt(h) up to a factor sigma, the squared norm of A is the section's
normalized size, and sections satisfy ball-like engulfing properties that
make greedy Vitali covers work.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import ConvexHull, QhullError

from .ellipsoid import mvee, rounding_map
from .errors import (
    CoverageGap,
    DegenerateSection,
    EmptySection,
    NoPassingDelta,
    ResamplingOutOfDomain,
    SectionSearchFailure,
)
from .grids import ConvexField, Grid, HessianField, measure, shifted

DET_TOL = 1e-10


@dataclass
class Section:
    """Sublevel set of u minus its supporting affine function at the center."""

    center_idx: tuple
    center: np.ndarray
    slope: np.ndarray
    h: float
    mask: np.ndarray
    measure: float
    hull_points: np.ndarray
    compact: bool
    touches_boundary: bool

    @property
    def n_nodes(self):
        return int(np.count_nonzero(self.mask))


def gradient_at(fld, idx):
    """Centered-difference gradient at a core node."""
    n = fld.grid.dimension
    s = fld.grid.spacing
    g = np.zeros(n)
    for i in range(n):
        lo = list(idx)
        hi = list(idx)
        lo[i] -= 1
        hi[i] += 1
        g[i] = (fld.values[tuple(hi)] - fld.values[tuple(lo)]) / (2 * s)
    return g


def support_deviation(fld, idx):
    """w = u - u(x0) - grad u(x0) . (x - x0), the section profile at x0."""
    pts = fld.grid.coords()
    x0 = pts[idx]
    p = gradient_at(fld, idx)
    return fld.values - fld.values[idx] - (pts - x0) @ p, x0, p


def compute_section(fld, center_idx, h):
    """Section S_h(x0) as an exact node mask plus its boundary polytope."""
    if h <= 0:
        raise EmptySection(f"section height must be positive, got {h}")
    center_idx = tuple(int(i) for i in center_idx)
    w, x0, p = support_deviation(fld, center_idx)
    mask = fld.inside & (w < h)
    n_nodes = int(np.count_nonzero(mask))
    if n_nodes < 2:
        raise EmptySection(f"height {h:.3e} is below the grid resolution at {center_idx}")

    crossings = _threshold_crossings(fld, w, mask, h)
    pts = fld.grid.coords()
    hull_input = np.vstack([pts[mask].reshape(-1, fld.grid.dimension), crossings]) \
        if crossings.size else pts[mask].reshape(-1, fld.grid.dimension)

    margins = fld.domain.boundary_margin(pts[mask])
    compact = bool(np.min(margins) >= 2 * fld.grid.spacing)
    return Section(
        center_idx=center_idx,
        center=np.asarray(x0, dtype=float),
        slope=p,
        h=float(h),
        mask=mask,
        measure=measure(mask, fld.grid),
        hull_points=hull_input,
        compact=compact,
        touches_boundary=not compact,
    )


def _threshold_crossings(fld, w, mask, h):
    """Linear interpolation of the w = h crossings along grid axes."""
    n = fld.grid.dimension
    s = fld.grid.spacing
    pts = fld.grid.coords()
    out = []
    g = w - h
    for i in range(n):
        e = np.zeros(n, dtype=int)
        e[i] = 1
        for sign in (1, -1):
            gn = shifted(g, sign * e)
            usable = mask & np.isfinite(gn) & (gn >= 0)
            if not np.any(usable):
                continue
            t = g[usable] / (g[usable] - gn[usable])
            out.append(pts[usable] + (sign * s) * t[:, None] * e[None, :])
    return np.vstack(out) if out else np.empty((0, n))


@dataclass
class Normalization:
    """Unit-determinant rounding map of a section and its inclusion radii."""

    A: np.ndarray
    h: float
    r_in: float
    r_out: float
    sigma: float
    alpha: float
    det_error: float

    def to_json(self):
        return {"A": self.A.tolist(), "h": self.h, "r_in": self.r_in,
                "r_out": self.r_out, "sigma": self.sigma, "alpha": self.alpha,
                "det_error": self.det_error}


def john_normalize(sec, mvee_tol=1e-6):
    """Rounding map from the enclosing ellipsoid of the section's hull.

    A is the unit-determinant symmetric positive map sending the ellipsoid to
    a ball; the inclusion radii of A(S - x0) are then measured exactly on the
    transformed hull and sigma = min(r_in/sqrt(h), sqrt(h)/r_out).
    """
    try:
        hull = ConvexHull(sec.hull_points)
    except QhullError as exc:
        raise DegenerateSection(f"section hull is degenerate: {exc}") from exc
    verts = sec.hull_points[hull.vertices]
    E, _ = mvee(verts, tol=mvee_tol)
    A = rounding_map(E)

    tv = (verts - sec.center) @ A.T
    r_out = float(np.max(np.linalg.norm(tv, axis=1)))
    try:
        thull = ConvexHull(tv)
    except QhullError as exc:
        raise DegenerateSection(f"transformed hull is degenerate: {exc}") from exc
    # qhull equations: normal . x + offset <= 0, |normal| = 1
    r_in = float(np.min(-thull.equations[:, -1]))
    if r_in <= 0:
        raise DegenerateSection("section center lies outside its boundary polytope")
    rh = np.sqrt(sec.h)
    sigma = min(r_in / rh, rh / r_out)
    alpha = float(np.linalg.norm(A, 2) ** 2)
    return Normalization(
        A=A, h=sec.h, r_in=r_in, r_out=r_out, sigma=sigma, alpha=alpha,
        det_error=abs(float(np.linalg.det(A)) - 1.0),
    )


def normalized_size_curve(fld, center_idx, heights, hess=None, mvee_tol=1e-6):
    """Normalized size alpha(h) for decreasing h, with ratios to ||D2u(x0)||."""
    if hess is None:
        from .grids import discrete_hessian

        hess = discrete_hessian(fld)
    h_norm = float(hess.norms[tuple(center_idx)])
    rows = []
    for h in sorted(heights, reverse=True):
        sec = compute_section(fld, center_idx, h)
        norm = john_normalize(sec, mvee_tol)
        rows.append({
            "h": float(h),
            "alpha": norm.alpha,
            "sigma": norm.sigma,
            "ratio": norm.alpha / h_norm if h_norm > 0 else np.inf,
            "compact": sec.compact,
        })
    return {"center": [int(i) for i in center_idx], "hessian_norm": h_norm, "curve": rows}


@dataclass
class RescaledField:
    """Field and Hessian data pushed through T = map_scale * A (x - x0)."""

    field: ConvexField
    hessian: HessianField
    A: np.ndarray
    center: np.ndarray
    h: float
    src_inside: np.ndarray
    map_scale: float = None

    def __post_init__(self):
        if self.map_scale is None:
            self.map_scale = 1.0 / np.sqrt(self.h)

    def to_original(self, pts_tilde):
        Ainv = np.linalg.inv(self.A)
        return self.center + (pts_tilde @ Ainv.T) / self.map_scale


def rescale_solution(fld, sec, norm, nodes_per_side=129, margin=1.05, hess=None,
                     u_fn=None, hessian_fn=None, map_scale=None, value_scale=None):
    """Resample u (support plane subtracted, height normalized) on T's image.

    The rescaled values are w~(x~) = (u(x) - u(x0) - p.(x - x0)) / h so the
    unit section of the result is exactly T(S_h(x0)); Hessians are transported
    as A^-T D2u A^-1 with componentwise interpolation, which keeps the two
    evaluation routes of the scaled covering inequality comparable.

    For analytic fields, `u_fn(x, y)` and `hessian_fn(pts) -> (..., n, n)`
    evaluate exactly at the resampled points instead of interpolating, so the
    rescaled frame is not capped by the source grid resolution.  `map_scale`
    overrides the default h^(-1/2) factor of T (the measure-relative frames
    use h^-1 mu^(1/n)); `value_scale` overrides the default 1/h.
    """
    if hess is None and hessian_fn is None:
        from .grids import discrete_hessian

        hess = discrete_hessian(fld)
    n = fld.grid.dimension
    if map_scale is None:
        map_scale = 1.0 / np.sqrt(norm.h)
    if value_scale is None:
        value_scale = 1.0 / norm.h
    extent = margin * norm.r_out * map_scale
    new_grid = Grid(float(extent), nodes_per_side, n)
    tpts = new_grid.coords()
    Ainv = np.linalg.inv(norm.A)
    src = sec.center + (tpts @ Ainv.T) / map_scale

    lim = fld.grid.extent
    if np.max(np.abs(src)) > lim + 1e-9:
        clip = np.max(np.abs(src))
        if clip > lim * (1 + 0.5):
            raise ResamplingOutOfDomain(
                f"rescaled grid reaches {clip:.3f}, source grid extent {lim:.3f}")
        src = np.clip(src, -lim, lim)

    axis = fld.grid.axis()
    flat_src = src.reshape(-1, n)
    if u_fn is not None:
        u0 = float(u_fn(*[np.atleast_1d(c) for c in sec.center])[0])
        u_src = u_fn(*(src[..., i] for i in range(n)))
        w_vals = u_src - u0 - (src - sec.center) @ sec.slope
        vals = w_vals * value_scale
    else:
        w, _, _ = support_deviation(fld, sec.center_idx)
        interp_w = RegularGridInterpolator((axis,) * n, w, method="cubic",
                                           bounds_error=False, fill_value=np.nan)
        vals = interp_w(flat_src).reshape(tpts.shape[:-1]) * value_scale

    src_inside = fld.domain.contains(src)
    interp_core = RegularGridInterpolator((axis,) * n, fld.core.astype(float),
                                          method="linear", bounds_error=False,
                                          fill_value=0.0)
    src_core = interp_core(flat_src).reshape(tpts.shape[:-1]) >= 1.0

    from .grids import DomainSpec

    box = DomainSpec.box((extent,) * n)
    new_field = ConvexField(new_grid, box, np.nan_to_num(vals, nan=0.0),
                            inside=src_inside & box.contains(tpts),
                            dirichlet=False)

    # transported Hessian: value_scale/map_scale^2 * A^-T D2u A^-1
    hess_factor = value_scale / map_scale ** 2
    if hessian_fn is not None:
        mats = hessian_fn(flat_src).reshape(tpts.shape[:-1] + (n, n))
        hvalid = new_field.inside & src_inside
    else:
        mats = np.empty(tpts.shape[:-1] + (n, n))
        for i in range(n):
            for j in range(i, n):
                itp = RegularGridInterpolator((axis,) * n, hess.matrices[..., i, j],
                                              method="linear", bounds_error=False,
                                              fill_value=0.0)
                mij = itp(flat_src).reshape(tpts.shape[:-1])
                mats[..., i, j] = mij
                mats[..., j, i] = mij
        itp_valid = RegularGridInterpolator((axis,) * n,
                                            hess.interior_ok.astype(float),
                                            method="linear", bounds_error=False,
                                            fill_value=0.0)
        hvalid = itp_valid(flat_src).reshape(tpts.shape[:-1]) >= 1.0
        hvalid &= new_field.inside & src_core
    mats = hess_factor * np.einsum("ki,...kl,lj->...ij", Ainv, mats, Ainv)
    from .grids import _sym_extreme_eigs

    norms, eig_min, eig_max = _sym_extreme_eigs(mats, n)
    new_hess = HessianField(new_grid, np.where(hvalid[..., None, None], mats, 0.0),
                            np.where(hvalid, norms, 0.0),
                            np.where(hvalid, eig_min, 0.0),
                            np.where(hvalid, eig_max, 0.0),
                            hvalid, np.zeros_like(hvalid))
    return RescaledField(new_field, new_hess, norm.A, sec.center, norm.h,
                         src_inside, map_scale)


# -- engulfing ------------------------------------------------------------------


@dataclass
class EngulfingReport:
    delta: float
    tested: int
    passed: dict
    failures: list = dc_field(default_factory=list)

    @property
    def all_pass(self):
        return all(self.passed[k] == self.tested for k in self.passed)


class SectionCache:
    """Memoized section masks for one field."""

    def __init__(self, fld):
        self.fld = fld
        self._cache = {}

    def mask(self, idx, h):
        key = (idx, float(h))
        if key not in self._cache:
            self._cache[key] = compute_section(self.fld, idx, h).mask
        return self._cache[key]

    def deviation(self, idx):
        key = ("w", idx)
        if key not in self._cache:
            self._cache[key] = support_deviation(self.fld, idx)[0]
        return self._cache[key]


def engulfing_check(fld, delta, pairs, cache=None):
    """Test the three ball-like engulfing properties on sampled section pairs.

    Each pair is ((idx1, h1), (idx2, h2)) with h1 <= h2.  Failures are data,
    not errors: the report carries per-property counts and failing pairs.
    """
    cache = cache or SectionCache(fld)
    passed = {"p1": 0, "p2": 0, "p3": 0}
    failures = []
    tested = 0
    for (i1, h1), (i2, h2) in pairs:
        if h1 > h2:
            (i1, h1), (i2, h2) = (i2, h2), (i1, h1)
        tested += 1
        m1d = cache.mask(i1, delta * h1)
        m2d = cache.mask(i2, delta * h2)
        m2 = cache.mask(i2, h2)

        # property 1: delta-shrunk sections that meet are engulfed
        if np.any(m1d & m2d) and np.any(m1d & ~m2):
            failures.append(("p1", i1, h1, i2, h2))
        else:
            passed["p1"] += 1

        w2 = cache.deviation(i2)
        x1_in_closure = bool(w2[i1] <= h2)

        # property 2: a delta h1 section fits inside the intersection
        if x1_in_closure:
            m1 = cache.mask(i1, h1)
            inter = m1 & m2
            ok = _exists_inner_section(fld, cache, inter, delta * h1)
            if ok:
                passed["p2"] += 1
            else:
                failures.append(("p2", i1, h1, i2, h2))
        else:
            passed["p2"] += 1

        # property 3: S_{delta h2}(x1) sits inside S_{2 h2}(x2)
        if x1_in_closure:
            m1d2 = cache.mask(i1, delta * h2)
            m2big = cache.mask(i2, 2 * h2)
            if np.any(m1d2 & ~m2big):
                failures.append(("p3", i1, h1, i2, h2))
            else:
                passed["p3"] += 1
        else:
            passed["p3"] += 1
    return EngulfingReport(delta, tested, passed, failures)


def _exists_inner_section(fld, cache, inter_mask, h_small):
    """Search intersection nodes for a witness z with S_h(z) inside the mask."""
    idxs = np.argwhere(inter_mask)
    if idxs.size == 0:
        return False
    # try nodes nearest the deepest interior of the intersection first
    pts = fld.grid.coords()[inter_mask]
    centroid = pts.mean(axis=0)
    order = np.argsort(np.linalg.norm(pts - centroid, axis=1))
    core = fld.core
    for k in order[:64]:
        z = tuple(int(v) for v in idxs[k])
        if not core[z]:
            continue
        try:
            mz = cache.mask(z, h_small)
        except EmptySection:
            continue
        if not np.any(mz & ~inter_mask):
            return True
    return False


def sample_section_pairs(fld, n_pairs, seed=0, h_bounds=(1e-3, 0.1), cache=None,
                         max_attempts=4000):
    """Seeded sample of compactly included section pairs for engulfing tests."""
    rng = np.random.default_rng(seed)
    cache = cache or SectionCache(fld)
    core_idx = np.argwhere(fld.core)
    pairs = []
    attempts = 0
    lo, hi = h_bounds
    while len(pairs) < n_pairs and attempts < max_attempts:
        attempts += 1
        picks = []
        ok = True
        for _ in range(2):
            idx = tuple(int(v) for v in core_idx[rng.integers(len(core_idx))])
            h = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            try:
                sec = compute_section(fld, idx, 2 * h)
            except EmptySection:
                ok = False
                break
            if not sec.compact:
                ok = False
                break
            picks.append((idx, h))
        if ok:
            picks.sort(key=lambda t: t[1])
            pairs.append(tuple(picks))
    return pairs


def estimate_delta(fld, n_pairs=40, seed=0, h_bounds=(1e-3, 0.1),
                   deltas=tuple(0.5 ** k for k in range(1, 9))):
    """Largest dyadic engulfing constant passing all properties on a sample."""
    cache = SectionCache(fld)
    pairs = sample_section_pairs(fld, n_pairs, seed, h_bounds, cache)
    if not pairs:
        raise NoPassingDelta("no compactly included section pairs could be sampled")
    reports = []
    for d in sorted(deltas, reverse=True):
        rep = engulfing_check(fld, d, pairs, cache)
        reports.append(rep)
        if rep.all_pass:
            return d, rep
    raise NoPassingDelta(
        f"no delta in {sorted(deltas, reverse=True)} passes engulfing on {len(pairs)} pairs")


# -- Vitali covering ---------------------------------------------------------------


@dataclass
class VitaliCover:
    centers: list
    heights: list
    delta: float
    masks: list
    shrunk_masks: list
    coverage_residual: np.ndarray

    @property
    def union_mask(self):
        out = np.zeros_like(self.masks[0]) if self.masks else None
        for m in self.masks:
            out |= m
        return out

    def disjointness_violations(self):
        """Pairwise intersections of shrunk masks; empty list on success."""
        bad = []
        for i in range(len(self.shrunk_masks)):
            for j in range(i + 1, len(self.shrunk_masks)):
                if np.any(self.shrunk_masks[i] & self.shrunk_masks[j]):
                    bad.append((i, j))
        return bad


def dyadic_quantize(h):
    return float(2.0 ** np.floor(np.log2(h)))


def vitali_cover(fld, targets_mask, centers, heights, delta, cache=None):
    """Greedy maximal-height cover of the target nodes by assigned sections.

    Heights are quantized to dyadic values (ties then broken by row-major
    center order), selection keeps the delta-shrunk sections exactly disjoint,
    and the union of the selected full sections must contain every target;
    a CoverageGap carries the uncovered nodes and the engulfing pair that
    failed for each.
    """
    cache = cache or SectionCache(fld)
    centers = [tuple(int(v) for v in c) for c in centers]
    hq = [dyadic_quantize(h) for h in heights]
    flat = [int(np.ravel_multi_index(c, fld.grid.shape)) for c in centers]
    order = sorted(range(len(centers)), key=lambda k: (-hq[k], flat[k]))

    sel_centers, sel_heights, sel_masks, sel_shrunk = [], [], [], []
    union_shrunk = np.zeros(fld.grid.shape, dtype=bool)
    for k in order:
        if union_shrunk[centers[k]]:
            # the candidate's shrunk mask contains its center, so it overlaps
            continue
        shrunk = cache.mask(centers[k], delta * hq[k])
        if np.any(shrunk & union_shrunk):
            continue
        union_shrunk |= shrunk
        sel_centers.append(centers[k])
        sel_heights.append(hq[k])
        sel_shrunk.append(shrunk)
        sel_masks.append(cache.mask(centers[k], hq[k]))

    covered = np.zeros(fld.grid.shape, dtype=bool)
    for m in sel_masks:
        covered |= m
    residual = targets_mask & ~covered
    if np.any(residual):
        failing = _diagnose_gaps(fld, cache, residual, centers, heights, hq,
                                 sel_centers, sel_heights, sel_shrunk, delta)
        raise CoverageGap(np.argwhere(residual), failing)
    return VitaliCover(sel_centers, sel_heights, delta, sel_masks, sel_shrunk,
                       residual)


def find_section_of_size(fld, center_idx, alpha_target, h_max, n_levels=20,
                         log_tol=None, cache=None, mvee_tol=1e-4):
    """Dyadic-height bisection for a section of prescribed normalized size.

    Normalized size increases towards ||D2u(x0)|| as h decreases and drops to
    an order-one value at large heights, so a bracket over dyadic heights
    h_max 2^-j, j < n_levels, is searched by bisection; the returned height is
    the bracket endpoint whose size is nearest the target in log scale.
    Raises SectionSearchFailure when no dyadic bracket exists.
    """
    center_idx = tuple(int(v) for v in center_idx)
    if log_tol is None:
        log_tol = np.log(2.0)

    def size_at(j):
        h = h_max * 0.5 ** j
        sec = compute_section(fld, center_idx, h)
        return john_normalize(sec, mvee_tol).alpha, sec

    try:
        a_lo, sec_lo = size_at(0)
    except (EmptySection, DegenerateSection) as exc:
        raise SectionSearchFailure(f"no usable section at {center_idx}: {exc}") from exc
    if a_lo >= alpha_target:
        if abs(np.log(a_lo / alpha_target)) <= log_tol:
            return sec_lo, a_lo
        raise SectionSearchFailure(
            f"size {a_lo:.3g} at the largest height already exceeds target {alpha_target:.3g}")
    lo, hi = 0, None
    a_hi = None
    sec_hi = None
    j = 1
    step = 1
    while j < n_levels:
        try:
            a_j, sec_j = size_at(j)
        except (EmptySection, DegenerateSection):
            break
        if a_j >= alpha_target:
            hi, a_hi, sec_hi = j, a_j, sec_j
            break
        lo, a_lo, sec_lo = j, a_j, sec_j
        step = min(2 * step, 4)
        j += step
    if hi is None:
        if abs(np.log(a_lo / alpha_target)) <= log_tol:
            return sec_lo, a_lo
        raise SectionSearchFailure(
            f"no dyadic height reaches size {alpha_target:.3g} at {center_idx} "
            f"(best {a_lo:.3g})")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        try:
            a_m, sec_m = size_at(mid)
        except (EmptySection, DegenerateSection):
            hi, a_hi, sec_hi = mid, np.inf, None
            break
        if a_m >= alpha_target:
            hi, a_hi, sec_hi = mid, a_m, sec_m
        else:
            lo, a_lo, sec_lo = mid, a_m, sec_m
    cands = [(abs(np.log(a_lo / alpha_target)), a_lo, sec_lo)]
    if sec_hi is not None and np.isfinite(a_hi):
        cands.append((abs(np.log(a_hi / alpha_target)), a_hi, sec_hi))
    cands.sort(key=lambda t: t[0])
    gap, a_best, sec_best = cands[0]
    if gap > log_tol:
        raise SectionSearchFailure(
            f"bracket endpoints miss target size {alpha_target:.3g} at {center_idx} "
            f"(nearest {a_best:.3g})")
    return sec_best, a_best


def _diagnose_gaps(fld, cache, residual, centers, heights, hq,
                   sel_centers, sel_heights, sel_shrunk, delta, max_report=10):
    out = []
    lookup = {c: k for k, c in enumerate(centers)}
    for node in np.argwhere(residual)[:max_report]:
        c = tuple(int(v) for v in node)
        if c not in lookup:
            out.append((c, None, "target node has no assigned section"))
            continue
        k = lookup[c]
        shrunk = cache.mask(c, delta * hq[k])
        for m, (sc, sh) in enumerate(zip(sel_centers, sel_heights)):
            if np.any(shrunk & sel_shrunk[m]):
                out.append((c, (sc, sh),
                            "property-1 containment failed for this conflict pair"))
                break
        else:
            out.append((c, None, "no conflicting selected section found"))
    return out
