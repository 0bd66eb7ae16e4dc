"""Level-set decompositions of the Hessian norm and the decay machinery.

Everything here runs on a normalized analysis frame: the solution restricted
to a base section, affinely rounded and height-normalized so the base section
becomes the unit section at the center.  The super-level sets
D_k = { ||D2u|| >= M^k } of the normalized Hessian, their truncated energies,
the covering-based contraction of those energies, the 1/(K log K) tail of
|{ ||D2u|| >= K }|, and the stability of the (1+eps)-power integral are each
measured and fitted; the power integral is cross-checked against its
layer-cake (distribution function) representation.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    CoverageGap,
    DegenerateSection,
    EmptySection,
    InsufficientLevels,
    LayerCakeMismatch,
    NoPassingConstant,
    RescaleMismatch,
    SectionSearchFailure,
)
from .grids import discrete_hessian, integrate, measure, sup_norm_and_interior
from .sections import (
    SectionCache,
    compute_section,
    estimate_delta,
    find_section_of_size,
    john_normalize,
    rescale_solution,
    vitali_cover,
)

RESOLUTION_FLOOR_CELLS = 4


# -- level decomposition ------------------------------------------------------------


@dataclass
class LevelDecomposition:
    M: float
    region: np.ndarray
    masks: list                  # D_k node masks, k = 0..K
    measures: np.ndarray         # |D_k|, resolution floor applied
    raw_measures: np.ndarray
    energies: np.ndarray         # integral of ||D2u|| over D_k
    fk_thresholds: np.ndarray
    fk_measures: np.ndarray
    cell_volume: float
    min_cells: int

    @property
    def n_levels(self):
        return len(self.masks)

    def nonempty_levels(self):
        return int(np.count_nonzero(self.measures > 0))

    def to_json(self):
        return {
            "M": self.M,
            "measures": self.measures.tolist(),
            "raw_measures": self.raw_measures.tolist(),
            "energies": self.energies.tolist(),
            "fk_thresholds": self.fk_thresholds.tolist(),
            "fk_measures": self.fk_measures.tolist(),
            "min_cells": self.min_cells,
        }


def level_decompose(hess, region, M, K=None, min_cells=RESOLUTION_FLOOR_CELLS,
                    fk_max=None):
    """Super-level sets D_k = {||D2u|| >= M^k} inside a region, with energies.

    K defaults to the largest level the field's Hessian range reaches; sets
    holding fewer than `min_cells` nodes are treated as empty (resolution
    floor).  F_K tail measures are collected on a dyadic K-grid from 2 up to
    the largest resolved threshold.
    """
    if M <= 1:
        raise ValueError(f"threshold base must exceed 1, got {M}")
    base = region & hess.valid
    norms = hess.norms
    top = float(np.max(norms[base])) if np.any(base) else 0.0
    if K is None:
        K = max(1, int(np.floor(np.log(max(top, 1.0)) / np.log(M))) + 1)
    cell = hess.grid.cell_volume

    masks, meas, raw, ener = [], [], [], []
    for k in range(K + 1):
        mk = base & (norms >= M ** k)
        n = int(np.count_nonzero(mk))
        raw.append(n * cell)
        if k > 0 and n < min_cells:
            mk = np.zeros_like(mk)
            n = 0
        masks.append(mk)
        meas.append(n * cell)
        ener.append(float(np.sum(norms[mk])) * cell)

    if fk_max is None:
        fk_max = max(2.0, top)
    ks = [2.0]
    while ks[-1] * 2 <= fk_max:
        ks.append(ks[-1] * 2)
    fk_meas = []
    fk_used = []
    for kv in ks:
        n = int(np.count_nonzero(base & (norms >= kv)))
        if n < min_cells:
            break
        fk_used.append(kv)
        fk_meas.append(n * cell)
    if not fk_used:
        fk_used, fk_meas = [2.0], [0.0]
    return LevelDecomposition(
        M=float(M), region=region, masks=masks,
        measures=np.array(meas), raw_measures=np.array(raw),
        energies=np.array(ener),
        fk_thresholds=np.array(fk_used), fk_measures=np.array(fk_meas),
        cell_volume=cell, min_cells=min_cells,
    )


# -- covering inequalities ------------------------------------------------------------


@dataclass
class BasicCheckReport:
    lhs: float
    trace_integral: float        # empirical C1
    c1: float                    # |S_delta(0) & S_t(y)|
    C0: float                    # smallest passing dyadic constant
    rhs_at_C0: float
    lipschitz_set_measure: float  # |{||D2u|| <= 2 C1/c1} & S_delta & S_t|
    candidates: list             # (C0, rhs) pairs examined

    def to_json(self):
        return {"lhs": self.lhs, "trace_integral": self.trace_integral,
                "c1": self.c1, "C0": self.C0, "rhs_at_C0": self.rhs_at_C0,
                "lipschitz_set_measure": self.lipschitz_set_measure,
                "candidates": self.candidates}


def _good_set_interval(hess, lo, hi):
    """Nodes with the full eigenvalue interval inside [lo, hi]."""
    return hess.valid & (hess.eig_min >= lo) & (hess.eig_max <= hi)


def lemma_basic_check(hess, base_mask, delta_mask, outer_mask,
                      c0_grid=tuple(2.0 ** k for k in range(0, 13))):
    """Base-scale covering inequality on the unit section.

    Tests whether the Hessian mass of the base section is controlled by
    C0 times the measure of the set where C0^-1 I <= D2u <= C0 I inside the
    delta-section intersected with the outer section, over dyadic C0;
    also reports the proof's intermediate quantities (trace integral, the
    intersection measure, and the bounded-Hessian set measure).
    """
    grid = hess.grid
    region = base_mask & hess.valid
    lhs = integrate(hess.norms, region, grid)
    trace = float(np.sum(np.trace(hess.matrices[region], axis1=-2, axis2=-1))) * grid.cell_volume
    inter = delta_mask & outer_mask & hess.valid
    c1 = measure(inter, grid)
    lip_bound = 2.0 * trace / c1 if c1 > 0 else np.inf
    lip_meas = measure(inter & (hess.norms <= lip_bound), grid)

    candidates = []
    passing = None
    for c0 in c0_grid:
        good = _good_set_interval(hess, 1.0 / c0, c0) & inter
        rhs = c0 * measure(good, grid)
        candidates.append((float(c0), float(rhs)))
        if passing is None and lhs <= rhs:
            passing = (float(c0), float(rhs))
    if passing is None:
        raise NoPassingConstant(
            f"no dyadic constant up to {c0_grid[-1]:g} passes (lhs={lhs:.4g})")
    return BasicCheckReport(lhs=float(lhs), trace_integral=trace, c1=float(c1),
                            C0=passing[0], rhs_at_C0=passing[1],
                            lipschitz_set_measure=float(lip_meas),
                            candidates=candidates)


@dataclass
class ScaledCheckReport:
    alpha: float
    C0: float
    lhs_direct: float
    rhs_direct: float
    pass_direct: bool
    lhs_rescaled: float
    rhs_rescaled: float
    pass_rescaled: bool
    measure_rel_diff: float      # transported good-set measure agreement
    section_rel_diff: float      # transported section measure agreement

    def to_json(self):
        return self.__dict__.copy()


def lemma_basic_sc_check(fld, hess, sec, norm, outer_mask, delta, C0,
                         rescale_nodes=129, tol=0.1, raise_on_mismatch=True):
    """Scaled covering inequality with a two-route consistency check.

    Route one evaluates the inequality directly on the original grid using
    the section's normalized size; route two rescales the solution by
    T = h^(-1/2) A (x - x0) and evaluates the base-scale inequality there.
    The affinely transported set measures must agree within `tol` (resampling
    tolerance), otherwise RescaleMismatch.
    """
    grid = fld.grid
    alpha = norm.alpha
    region = sec.mask & hess.valid
    lhs_d = integrate(hess.norms, region, grid)
    delta_mask = compute_section(fld, sec.center_idx, delta * sec.h).mask
    inter = delta_mask & outer_mask & hess.valid
    good_d = inter & (hess.norms >= alpha / C0) & (hess.norms <= alpha * C0)
    rhs_d = C0 * alpha * measure(good_d, grid)

    # transported matrix-interval set on the original grid
    Ainv = np.linalg.inv(norm.A)
    mats_t = np.einsum("ki,...kl,lj->...ij", Ainv, hess.matrices, Ainv)
    from .grids import _sym_extreme_eigs

    _, lo_t, hi_t = _sym_extreme_eigs(mats_t, grid.dimension)
    good_mat = inter & (lo_t >= 1.0 / C0) & (hi_t <= C0)
    meas_src = measure(good_mat, grid)
    sec_src = measure(sec.mask & fld.inside, grid)

    # rescaled route
    rs = rescale_solution(fld, sec, norm, nodes_per_side=rescale_nodes, hess=hess)
    rfld, rhess = rs.field, rs.hessian
    c0_idx = tuple(np.argmin(np.abs(rfld.grid.axis())) for _ in range(grid.dimension))
    base_r = compute_section(rfld, c0_idx, 1.0).mask
    delta_r = compute_section(rfld, c0_idx, delta).mask
    outer_r = _transport_mask(fld, outer_mask, rs, rfld)
    lhs_r = integrate(rhess.norms, base_r & rhess.valid, rfld.grid)
    good_r = _good_set_interval(rhess, 1.0 / C0, C0) & delta_r & outer_r
    rhs_r = C0 * measure(good_r, rfld.grid)

    det_T = norm.h ** (-grid.dimension / 2.0)
    meas_tgt = measure(good_r, rfld.grid)
    sec_tgt = measure(base_r & rfld.inside, rfld.grid)
    rel = _rel_diff(meas_tgt, det_T * meas_src)
    rel_sec = _rel_diff(sec_tgt, det_T * sec_src)
    if raise_on_mismatch and max(rel, rel_sec) > tol:
        raise RescaleMismatch(
            f"transported measures disagree: good-set {rel:.3f}, section {rel_sec:.3f} > {tol}")
    return ScaledCheckReport(
        alpha=float(alpha), C0=float(C0),
        lhs_direct=float(lhs_d), rhs_direct=float(rhs_d),
        pass_direct=bool(lhs_d <= rhs_d),
        lhs_rescaled=float(lhs_r), rhs_rescaled=float(rhs_r),
        pass_rescaled=bool(lhs_r <= rhs_r),
        measure_rel_diff=float(rel), section_rel_diff=float(rel_sec),
    )


def _transport_mask(fld, mask, rs, rfld):
    """Original-grid node mask pulled onto the rescaled grid."""
    from scipy.interpolate import RegularGridInterpolator

    axis = fld.grid.axis()
    n = fld.grid.dimension
    itp = RegularGridInterpolator((axis,) * n, mask.astype(float), method="linear",
                                  bounds_error=False, fill_value=0.0)
    tpts = rfld.grid.coords()
    src = rs.to_original(tpts.reshape(-1, n))
    return itp(src).reshape(tpts.shape[:-1]) >= 0.5


def _rel_diff(a, b):
    denom = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / denom


# -- decay iteration ------------------------------------------------------------------


@dataclass
class DecayStep:
    k: int
    energy_k: float
    energy_k1: float
    contraction: float           # E_{k+1} / E_k
    ratio: float                 # E_{k+1} / (E_k - E_{k+1}), the empirical C
    n_targets: int
    n_excluded: int
    n_cover: int
    rhs_cover_sum: float
    cover_ok: bool
    notes: str = ""


@dataclass
class DecayReport:
    M: float
    tau: float
    eps_fit: float               # from measure_decay_check, nan if unavailable
    eps_ls: float                # least-squares tail exponent version
    C0: float
    C1: float
    C2: float
    c1: float
    c2: float                    # only set by the degenerate-measure pipeline
    steps: list
    fit_residual: float
    exclusion_fraction: float
    valid: bool

    def to_json(self):
        doc = {k: v for k, v in self.__dict__.items() if k != "steps"}
        doc["steps"] = [s.__dict__.copy() for s in self.steps]
        return doc


def decay_iterate(fld, hess, decomp, delta, C0, outer_mask, h_max,
                  cover=True, target_cap=400, max_rounds=6, seed=0,
                  c2=float("nan")):
    """Per-level energy contraction with the covering chain.

    For each level k with D_{k+1} nonempty: cover D_{k+1} by sections of
    normalized size C0 M^k found by dyadic height search (nodes where the
    search fails are excluded and counted; the run is flagged invalid if they
    exceed 1 percent), sum the scaled covering inequality right-hand sides
    over the disjoint shrunk sections, and compare the truncated energies.
    The fitted contraction is tau = 1/(1+C) with C the worst energy ratio.
    """
    M = decomp.M
    cache = SectionCache(fld)
    steps = []
    ratios = []
    total_excluded = 0
    total_targets = 0
    for k in range(decomp.n_levels - 1):
        e_k, e_k1 = decomp.energies[k], decomp.energies[k + 1]
        if decomp.measures[k + 1] <= 0:
            break
        targets = decomp.masks[k + 1]
        n_targets = int(np.count_nonzero(targets))
        total_targets += n_targets
        ratio = e_k1 / max(e_k - e_k1, 1e-300)
        ratios.append(ratio)
        n_exc = 0
        n_cov = 0
        rhs_sum = np.nan
        cover_ok = True
        notes = ""
        if cover:
            alpha_target = C0 * M ** k
            try:
                cov, n_exc = _cover_level(fld, hess, targets, alpha_target,
                                          delta, h_max, cache, target_cap,
                                          max_rounds)
                n_cov = len(cov.centers)
                rhs_sum = _cover_rhs_sum(fld, hess, cov, outer_mask, C0, cache)
            except (CoverageGap, SectionSearchFailure) as exc:
                cover_ok = False
                notes = f"{type(exc).__name__}: {exc}"
                n_exc = n_targets
        total_excluded += n_exc
        steps.append(DecayStep(
            k=k, energy_k=float(e_k), energy_k1=float(e_k1),
            contraction=float(e_k1 / max(e_k, 1e-300)), ratio=float(ratio),
            n_targets=n_targets, n_excluded=int(n_exc), n_cover=int(n_cov),
            rhs_cover_sum=float(rhs_sum), cover_ok=cover_ok, notes=notes,
        ))
    if ratios:
        C = max(ratios)
        tau = 1.0 / (1.0 + C)
    else:
        tau = np.nan
    try:
        eps_fit = measure_decay_check(decomp)
    except InsufficientLevels:
        eps_fit = np.nan
    eps_ls, resid = _ls_decay_exponent(decomp)
    frac = total_excluded / total_targets if total_targets else 0.0
    trace_c1 = np.nan
    return DecayReport(
        M=M, tau=float(tau), eps_fit=float(eps_fit), eps_ls=float(eps_ls),
        C0=float(C0), C1=trace_c1, C2=float(M), c1=np.nan, c2=float(c2),
        steps=steps, fit_residual=float(resid),
        exclusion_fraction=float(frac), valid=bool(frac < 0.01),
    )


def _cover_level(fld, hess, targets, alpha_target, delta, h_max, cache,
                 target_cap, max_rounds):
    """Lazy-assignment Vitali cover of one level set.

    Heights are searched only for a deterministic subsample plus whatever the
    coverage check later demands, which keeps the cost proportional to the
    number of selected sections rather than the level-set size.
    """
    idxs = np.argwhere(targets)
    n = len(idxs)
    stride = max(1, n // target_cap)
    candidates = {}
    excluded = set()

    def add_candidate(node):
        node = tuple(int(v) for v in node)
        if node in candidates or node in excluded:
            return
        try:
            sec, a = find_section_of_size(fld, node, alpha_target, h_max, cache=cache)
            candidates[node] = sec.h
        except (SectionSearchFailure, EmptySection, DegenerateSection):
            excluded.add(node)

    for node in idxs[::stride]:
        add_candidate(node)

    effective_targets = targets.copy()
    last_uncovered = None
    for _ in range(max_rounds):
        for node in excluded:
            effective_targets[node] = False
        if not candidates:
            raise SectionSearchFailure(
                f"no section of size {alpha_target:.3g} found for any target")
        try:
            cov = vitali_cover(fld, effective_targets, list(candidates.keys()),
                               list(candidates.values()), delta, cache)
            return cov, len(excluded)
        except CoverageGap as gap:
            uncovered = [tuple(int(v) for v in node) for node in gap.uncovered]
            if last_uncovered == uncovered:
                raise
            last_uncovered = uncovered
            for node in uncovered:
                add_candidate(node)
    raise CoverageGap(np.argwhere(effective_targets), [])


def _cover_rhs_sum(fld, hess, cov, outer_mask, C0, cache):
    total = 0.0
    for c, h in zip(cov.centers, cov.heights):
        sec = compute_section(fld, c, h)
        try:
            nrm = john_normalize(sec, mvee_tol=1e-4)
        except DegenerateSection:
            continue
        a = nrm.alpha
        dmask = cache.mask(c, cov.delta * h)
        good = dmask & outer_mask & hess.valid & \
            (hess.norms >= a / C0) & (hess.norms <= a * C0)
        total += C0 * a * measure(good, fld.grid)
    return total


def _ls_decay_exponent(decomp):
    meas = decomp.measures
    ks = np.arange(len(meas))
    keep = meas > 0
    if np.count_nonzero(keep) < 3:
        return np.nan, np.nan
    coef, res = np.polyfit(ks[keep], np.log(meas[keep]), 1, full=True)[:2]
    slope = coef[0] / np.log(decomp.M)      # log|D_k| ~ slope * k log M
    resid = float(np.sqrt(res[0] / np.count_nonzero(keep))) if len(res) else 0.0
    return (-slope - 1.0) / 2.0, resid


# -- tails and integrability -----------------------------------------------------------


@dataclass
class TailReport:
    thresholds: np.ndarray
    measures: np.ndarray
    c_uniform: float             # max |F_K| K log K over the K-grid
    slope: float                 # log-log slope of |F_K| vs K
    fit_residual: float

    def to_json(self):
        return {"thresholds": self.thresholds.tolist(),
                "measures": self.measures.tolist(),
                "c_uniform": self.c_uniform, "slope": self.slope,
                "fit_residual": self.fit_residual}


def tail_bound_check(decomp):
    """Smallest uniform c with |F_K| <= c / (K log K) on the achievable K-grid."""
    ks, ms = decomp.fk_thresholds, decomp.fk_measures
    cs = ms * ks * np.log(ks)
    c_uniform = float(np.max(cs)) if len(cs) else 0.0
    pos = ms > 0
    if np.count_nonzero(pos) >= 3:
        coef, res = np.polyfit(np.log(ks[pos]), np.log(ms[pos]), 1, full=True)[:2]
        slope = float(coef[0])
        resid = float(np.sqrt(res[0] / np.count_nonzero(pos))) if len(res) else 0.0
    else:
        slope, resid = np.nan, np.nan
    return TailReport(ks, ms, c_uniform, slope, resid)


def measure_decay_check(decomp):
    """Worst-level decay exponent: eps = min_k (log(|D_k|/|D_k+1|)/log M - 1)/2.

    Requires at least three consecutive nonempty levels, else
    InsufficientLevels; positive eps certifies the geometric measure decay.
    """
    meas = decomp.measures
    n_nonempty = 0
    for m in meas:
        if m > 0:
            n_nonempty += 1
        else:
            break
    if n_nonempty < 3:
        raise InsufficientLevels(
            f"need >= 3 nonempty consecutive levels, found {n_nonempty}")
    eps_vals = []
    for k in range(n_nonempty - 1):
        r = np.log(meas[k] / meas[k + 1]) / np.log(decomp.M)
        eps_vals.append((r - 1.0) / 2.0)
    return float(np.min(eps_vals))


def w21eps_norm(hess, region, eps, t_grid_size=4096, tol=0.01,
                raise_on_mismatch=True):
    """Power integral of the Hessian norm, direct and via the layer cake.

    Direct route: node quadrature of ||D2u||^(1+eps).  Layer-cake route:
    eps * integral over t of t^(eps-1) E(t), E(t) the truncated energy
    integral of ||D2u|| over {||D2u|| >= t}, evaluated by log-spaced midpoint
    quadrature of the empirical distribution function.  The two must agree
    within `tol` relative, else LayerCakeMismatch.
    """
    if eps < 0:
        raise ValueError("exponent increment must be nonnegative")
    grid = hess.grid
    sel = region & hess.valid
    g = hess.norms[sel]
    cell = grid.cell_volume
    direct = float(np.sum(g ** (1.0 + eps))) * cell
    if g.size == 0 or np.max(g) <= 0:
        return {"direct": direct, "layercake": direct, "rel_diff": 0.0, "eps": eps}

    gs = np.sort(g[g > 0])[::-1]
    csum = np.cumsum(gs) * cell              # E(t) for t just below gs[i]
    t_min, t_max = float(gs[-1]), float(gs[0])

    def energy_at(t):
        # E(t) = sum of g >= t; gs is descending
        i = np.searchsorted(-gs, -t, side="right")
        return csum[i - 1] if i > 0 else 0.0

    total_energy = float(csum[-1])
    layer = total_energy * t_min ** eps       # exact contribution of (0, t_min]
    if t_max > t_min:
        edges = np.geomspace(t_min, t_max, t_grid_size + 1)
        mids = np.sqrt(edges[:-1] * edges[1:])
        widths = np.diff(edges)
        e_vals = np.array([energy_at(t) for t in mids])
        layer += eps * float(np.sum(mids ** (eps - 1.0) * e_vals * widths))
    rel = _rel_diff(direct, layer)
    if raise_on_mismatch and rel > tol:
        raise LayerCakeMismatch(
            f"direct {direct:.6g} vs layer-cake {layer:.6g}: rel diff {rel:.3%} > {tol:.1%}")
    return {"direct": direct, "layercake": layer, "rel_diff": rel, "eps": eps}


def epsilon_estimate(frames, eps_grid=None, growth_tol=0.10):
    """Largest dyadic eps with a refinement-stable power integral.

    `frames` is a refinement family (coarse to fine) of (hessian, region)
    pairs on the normalized grid; stability means the direct integral grows
    at most `growth_tol` relative between consecutive refinements.
    """
    if len(frames) < 3:
        raise ValueError("refinement family needs at least 3 grids")
    if eps_grid is None:
        eps_grid = [2.0, 1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]
    table = {}
    stable_eps = None
    for eps in sorted(eps_grid, reverse=True):
        vals = [w21eps_norm(h, r, eps, raise_on_mismatch=False)["direct"]
                for (h, r) in frames]
        growth = [vals[i + 1] / vals[i] - 1.0 if vals[i] > 0 else np.inf
                  for i in range(len(vals) - 1)]
        table[eps] = {"values": vals, "growth": growth}
        if stable_eps is None and max(growth) <= growth_tol:
            stable_eps = eps
    return stable_eps, table


# -- normalized analysis frame -----------------------------------------------------------


@dataclass
class AnalysisFrame:
    """Solution rescaled so the base section is the unit section at the center."""

    field: object
    hessian: object
    center_idx: tuple
    base_mask: np.ndarray
    outer_mask: np.ndarray
    outer_height: float
    delta: float = np.nan
    delta_mask: np.ndarray = None
    base_height_src: float = np.nan
    normalization: object = None

    def masks_with_delta(self, delta):
        self.delta = delta
        self.delta_mask = compute_section(self.field, self.center_idx, delta).mask
        return self.delta_mask


def source_frame(fld, hessian_fn=None, hess=None, outer_ratio=1.5):
    """Analysis frame on the field's own grid, without affine resampling.

    Suited to homogeneous singular fields: their base sections are strongly
    anisotropic, and conjugating by the rounding map smears the Hessian-norm
    distribution by ||A||^4, pushing the power-law window past any resolvable
    threshold.  The super-level exponents are affine invariants, so they are
    measured in source coordinates; `hessian_fn` supplies exact second
    derivatives where available.
    """
    import numpy as _np

    if hess is None and hessian_fn is None:
        hess = discrete_hessian(fld)
    if hessian_fn is not None:
        pts = fld.grid.coords()
        mats = hessian_fn(pts.reshape(-1, fld.grid.dimension)).reshape(
            pts.shape[:-1] + (fld.grid.dimension,) * 2)
        from .grids import HessianField, _sym_extreme_eigs

        valid = fld.core.copy()
        norms, lo, hi = _sym_extreme_eigs(mats, fld.grid.dimension)
        hess = HessianField(fld.grid, _np.where(valid[..., None, None], mats, 0.0),
                            _np.where(valid, norms, 0.0), _np.where(valid, lo, 0.0),
                            _np.where(valid, hi, 0.0), valid,
                            _np.zeros_like(valid))
    flat = _np.where(fld.core.ravel(), fld.values.ravel(), _np.inf)
    center = tuple(int(v) for v in _np.unravel_index(int(_np.argmin(flat)),
                                                     fld.grid.shape))
    from .sections import support_deviation

    w, _, _ = support_deviation(fld, center)
    ring = fld.inside & ~fld.core
    w_edge = float(_np.min(w[ring])) if _np.any(ring) else float(_np.max(w[fld.inside]))
    h_cap = max_compact_height(fld, center, 0.75 * w_edge)
    h_base = h_cap / outer_ratio
    base_mask = compute_section(fld, center, h_base).mask
    outer_mask = compute_section(fld, center, outer_ratio * h_base).mask
    frame = AnalysisFrame(
        field=fld, hessian=hess, center_idx=center,
        base_mask=base_mask, outer_mask=outer_mask,
        outer_height=outer_ratio * h_base, base_height_src=h_base,
        normalization=None,
    )
    return frame


def thickness_floor_cells(region_mask, grid, rows=2, min_cells=RESOLUTION_FLOOR_CELLS):
    """Level floor in cells so that sets thinner than `rows` grid rows across
    the region's widest extent are treated as unresolved."""
    import numpy as _np

    if not _np.any(region_mask):
        return min_cells
    idx = _np.argwhere(region_mask)
    extent_nodes = int(_np.max(idx.max(axis=0) - idx.min(axis=0)) + 1)
    return max(min_cells, rows * extent_nodes)


def max_compact_height(fld, center_idx, h_init):
    """Largest height (by halving) whose section is compactly included."""
    h = h_init
    for _ in range(40):
        try:
            if compute_section(fld, center_idx, h).compact:
                return h
        except EmptySection:
            raise DegenerateSection("grid cannot resolve any compact section")
        h *= 0.5
    raise DegenerateSection("no compactly included section found")


def normalize_base(fld, hess=None, nodes_per_side=129, outer_ratio=1.5,
                   margin=1.05, u_fn=None, hessian_fn=None):
    """Build the normalized analysis frame of a convex field.

    The base section sits at the minimum node with height derived from the
    largest compactly included height, mirroring the target region
    {u < -sup/2} for Dirichlet solutions; it is rounded by its John map and
    the solution is resampled so the base section becomes the unit section at
    the center.  Analytic fields may pass exact evaluators `u_fn` and
    `hessian_fn` to avoid interpolation caps.
    """
    if hess is None and hessian_fn is None:
        hess = discrete_hessian(fld)
    flat = np.where(fld.core.ravel(), fld.values.ravel(), np.inf)
    center = np.unravel_index(int(np.argmin(flat)), fld.grid.shape)

    if fld.dirichlet:
        sup, _ = sup_norm_and_interior(fld)
        h_cap = max_compact_height(fld, center, 0.75 * sup)
        h_base = h_cap / outer_ratio
    else:
        from .sections import support_deviation

        w, _, _ = support_deviation(fld, center)
        ring = fld.inside & ~fld.core
        w_edge = float(np.min(w[ring])) if np.any(ring) else float(np.max(w[fld.inside]))
        h_cap = max_compact_height(fld, center, 0.75 * w_edge)
        h_base = h_cap / outer_ratio

    sec = compute_section(fld, center, h_base)
    norm = john_normalize(sec)
    outer_src = compute_section(fld, center, outer_ratio * h_base)
    r_out_outer = float(np.max(np.linalg.norm(
        (outer_src.hull_points - sec.center) @ norm.A.T, axis=1)))
    rs = rescale_solution(fld, sec, norm, nodes_per_side=nodes_per_side,
                          hess=hess, margin=margin * r_out_outer / norm.r_out,
                          u_fn=u_fn, hessian_fn=hessian_fn)

    rfld, rhess = rs.field, rs.hessian
    c0 = tuple(int(np.argmin(np.abs(rfld.grid.axis())))
               for _ in range(fld.grid.dimension))
    base_mask = compute_section(rfld, c0, 1.0).mask
    outer_mask = compute_section(rfld, c0, outer_ratio).mask
    return AnalysisFrame(
        field=rfld, hessian=rhess, center_idx=c0,
        base_mask=base_mask, outer_mask=outer_mask, outer_height=outer_ratio,
        base_height_src=h_base, normalization=norm,
    )
