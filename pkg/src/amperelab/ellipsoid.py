"""Minimum-volume enclosing ellipsoid of a point cloud (Khachiyan iteration).

The rounding maps used for section normalization come from the MVEE of the
section's boundary polytope.  The iteration maintains a weight vector over
the points; the duality gap max_i M_i / (n+1) - 1 drives the stopping rule,
so `tol` is a relative tolerance on the ellipsoid shape.
"""

import numpy as np

from .errors import DegenerateSection


def mvee(points, tol=1e-6, max_iter=20000):
    """Shape matrix E and center c with (x-c)^T E (x-c) <= 1 covering `points`.

    Khachiyan-type ascent on the lifted design problem.  Multiplicative
    weight updates (u_i <- u_i M_i / (n+1)) do the bulk of the work in a few
    vectorized passes; Frank-Wolfe steps with away steps polish until the
    duality gap max_i M_i/(n+1) - 1 drops below `tol`.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2:
        raise ValueError("points must be a k x n array")
    k, n = P.shape
    if k < n + 1:
        raise DegenerateSection(f"need at least {n + 1} points for an MVEE, got {k}")
    d = n + 1
    Q = np.hstack([P, np.ones((k, 1))])

    def weighted_M(u):
        V = Q.T @ (Q * u[:, None])
        try:
            Vi = np.linalg.inv(V)
        except np.linalg.LinAlgError as exc:
            raise DegenerateSection("point cloud is affinely degenerate") from exc
        return np.einsum("ij,jl,il->i", Q, Vi, Q)

    u = np.full(k, 1.0 / k)
    M = weighted_M(u)
    for _ in range(max_iter):
        gap = float(np.max(M)) / d - 1.0
        if gap <= tol:
            break
        if gap > 0.05:
            u = u * M / d
            u /= u.sum()
        else:
            j_add = int(np.argmax(M))
            gap_add = M[j_add] / d - 1.0
            M_support = np.where(u > 1e-14, M, np.inf)
            j_away = int(np.argmin(M_support))
            gap_away = 1.0 - M[j_away] / d
            if max(gap_add, gap_away) <= tol:
                break
            if gap_add >= gap_away:
                kappa = M[j_add]
                beta = (kappa - d) / (d * (kappa - 1.0))
                u *= 1.0 - beta
                u[j_add] += beta
            else:
                kappa = M[j_away]
                beta_max = u[j_away] / (1.0 - u[j_away])
                beta_opt = (d - kappa) / (d * (kappa - 1.0)) if kappa > 1.0 + 1e-12 else beta_max
                beta = min(beta_opt, beta_max)
                u *= 1.0 + beta
                u[j_away] -= beta
                u = np.maximum(u, 0.0)
                u /= u.sum()
        M = weighted_M(u)
    c = P.T @ u
    cov = P.T @ (P * u[:, None]) - np.outer(c, c)
    try:
        E = np.linalg.inv(cov) / n
    except np.linalg.LinAlgError as exc:
        raise DegenerateSection("enclosing ellipsoid is degenerate") from exc
    E = 0.5 * (E + E.T)
    return E, c


def rounding_map(E):
    """Unit-determinant symmetric positive map sending the ellipsoid to a ball.

    For E = R diag(w) R^T this is R diag(sqrt(w)) R^T rescaled to determinant
    one; symmetry is the rotation-closest-to-identity tie-break.
    """
    w, R = np.linalg.eigh(E)
    if np.min(w) <= 0:
        raise DegenerateSection("ellipsoid shape matrix is not positive definite")
    A = (R * np.sqrt(w)) @ R.T
    A /= np.linalg.det(A) ** (1.0 / E.shape[0])
    return 0.5 * (A + A.T)
