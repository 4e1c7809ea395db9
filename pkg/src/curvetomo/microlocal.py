"""Numerical checkers for the visibility, local and semi-global Bolker
conditions, the canonical relation, and the principal symbol of the
microlocally restricted normal operator.

The central objects: the local Bolker determinant
``h(t, x) = det[grad_x phi, dt grad_x phi]`` (columns), the time solver
``t(x, xi)`` that matches curve normals against covector directions, and the
order-(-1) symbol ``p = (2 pi)^-1 chi (W_+ + W_-) / h~``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSymbolError
from .geometry import TWO_PI, fd_derivatives, trace_level_curve


@dataclass(frozen=True)
class CovectorSample:
    """A base point with a nonzero covector."""

    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if np.hypot(self.xi[0], self.xi[1]) == 0.0:
            raise ValueError("covector must be nonzero")

    @property
    def unit_dir(self):
        return self.xi / np.hypot(self.xi[0], self.xi[1])


@dataclass(frozen=True)
class CanonicalPoint:
    """One point of the canonical relation C = {(phi, t, sigma, -sigma dt phi;
    x, sigma grad phi)}."""

    s: float
    t: float
    sigma: float
    tau: float
    x: np.ndarray
    xi: np.ndarray


@dataclass
class VisibilityMap:
    """Per-direction solvability of nu(t, x) || +-direction at a fixed x."""

    x: np.ndarray
    directions: np.ndarray          # (n, 2) unit vectors
    count: np.ndarray               # (n,) number of witness times
    t_witness: list                 # per-direction list of (t, orientation)

    @property
    def visible(self):
        return self.count > 0


@dataclass
class SymbolValue:
    """Principal symbol evaluation at (x, xi)."""

    x: np.ndarray
    xi: np.ndarray
    t_used: float | None
    W_plus: float
    W_minus: float
    h_tilde: float
    p: float
    visible: bool = True


def bolker_determinant(pf, t, x):
    """Local Bolker determinant h(t, x) = det[grad_x phi, dt grad_x phi]."""
    frame = fd_derivatives(pf, t, x)
    return frame.h


# ---------------------------------------------------------------------------
# homogeneous-extension equivalence
# ---------------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    n_samples: int
    agreement_fraction: float
    worst_discrepancy: float        # largest |normalized-det| gap among disagreements
    disagreements: list = field(default_factory=list)


def _normalized_det_status(col1, col2, threshold=1e-8):
    """Zero/nonzero classification of det[col1, col2] after normalizing each
    column to unit scale; vectorized over leading axes.

    A column whose norm is below ``threshold`` times the larger column is
    treated as zero (the matrix is singular); without this floor,
    normalizing a pure-noise column would amplify round-off to unit scale.
    """
    col1 = np.asarray(col1, dtype=float)
    col2 = np.asarray(col2, dtype=float)
    n1 = np.hypot(col1[..., 0], col1[..., 1])
    n2 = np.hypot(col2[..., 0], col2[..., 1])
    ref = np.maximum(n1, n2)
    degenerate = (ref == 0.0) | (np.minimum(n1, n2) < threshold * ref)
    denom = np.where(degenerate, 1.0, n1 * n2)
    det = np.abs(col1[..., 0] * col2[..., 1] - col1[..., 1] * col2[..., 0]) / denom
    det = np.where(degenerate, 0.0, det)
    return (det > threshold) & ~degenerate, det


def homogeneous_equivalence_check(pf, t_samples, x_samples=None, threshold=1e-8):
    """Compare zero/nonzero status of h(t, x) against the determinant of the
    mixed theta-x Hessian of the order-one homogeneous extension.

    Accepts either an iterable of (t, x) pairs or parallel arrays ``t
    (n,)`` and ``x (n, 2)`` in the branch-safe region.  Agreement of the two
    classifications on every sample is the numerical shadow of the
    if-and-only-if statement; the Hessian route assembles the mixed-derivative
    matrix from the product-rule expansion and classifies its columns
    independently of the direct [grad, dt grad] route.
    """
    if x_samples is None:
        pairs = list(t_samples)
        t = np.array([p[0] for p in pairs], dtype=float)
        x = np.array([np.asarray(p[1], dtype=float) for p in pairs])
    else:
        t = np.asarray(t_samples, dtype=float)
        x = np.asarray(x_samples, dtype=float)
    frame = fd_derivatives(pf, t, x)
    g, m = frame.g, frame.m
    status_h, mag_h = _normalized_det_status(
        np.stack([g[..., 0], g[..., 1]], axis=-1),
        np.stack([m[..., 0], m[..., 1]], axis=-1),
        threshold,
    )
    c = np.cos(t)
    s_ = np.sin(t)
    # columns of (d^2/d theta d x) |theta| phi(arg theta, x) at theta = omega(t)
    col1 = np.stack([c * g[..., 0] - s_ * m[..., 0], s_ * g[..., 0] + c * m[..., 0]], axis=-1)
    col2 = np.stack([c * g[..., 1] - s_ * m[..., 1], s_ * g[..., 1] + c * m[..., 1]], axis=-1)
    status_hess, mag_hess = _normalized_det_status(col1, col2, threshold)
    agree = status_h == status_hess
    bad_idx = np.nonzero(~agree)[0]
    worst = float(np.max(np.abs(mag_h - mag_hess)[bad_idx])) if len(bad_idx) else 0.0
    bad = [(float(t[i]), x[i].copy(), float(mag_h[i]), float(mag_hess[i])) for i in bad_idx[:32]]
    return EquivalenceReport(
        n_samples=len(t),
        agreement_fraction=float(np.mean(agree)) if len(t) else 1.0,
        worst_discrepancy=worst,
        disagreements=bad,
    )


# ---------------------------------------------------------------------------
# the time solver t(x, xi) and visibility
# ---------------------------------------------------------------------------


def _angular_residual(pf, t, x_rep, dir_perp):
    """nu(t, x) . (unit_dir rotated by pi/2); zero iff nu || +-unit_dir."""
    g = pf._grad_x_raw(t, x_rep)
    norm = np.maximum(np.hypot(g[..., 0], g[..., 1]), 1e-300)
    return (g[..., 0] * dir_perp[0] + g[..., 1] * dir_perp[1]) / norm


def solve_time_for_direction(pf, x, xi, t_range=None, n_scan=720, residual_tol=1e-10):
    """All t in t_range with nu(t, x) parallel to +-xi/|xi|.

    Scans a uniform grid for sign changes of the angular residual, then
    refines each bracket by bisection with Newton polish.  Returns a list of
    ``(t, orientation)`` with orientation = sign(nu . unit_dir); an empty
    list marks an invisible direction.

    A residual that vanishes on a whole subinterval (the synchronized limit
    when xi is the surviving normal) is collapsed to the subinterval
    midpoints, one root per maximal flat stretch.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    nrm = np.hypot(xi[0], xi[1])
    if nrm == 0.0:
        raise ValueError("xi must be nonzero")
    u = xi / nrm
    u_perp = np.array([-u[1], u[0]])
    lo, hi = t_range if t_range is not None else pf.t_range
    full_circle = abs((hi - lo) - TWO_PI) < 1e-9

    tt = np.linspace(lo, hi, n_scan + 1)
    x_rep = np.broadcast_to(x, (n_scan + 1, 2))
    r = _angular_residual(pf, tt, x_rep, u_perp)

    flat_tol = 1e-9
    roots = []

    if np.all(np.abs(r) < flat_tol):
        # identically degenerate: one representative root
        roots.append(0.5 * (lo + hi))
    else:
        # exact zeros on grid nodes
        zero_nodes = np.abs(r) < residual_tol
        i = 0
        while i <= n_scan:
            if zero_nodes[i]:
                j = i
                while j + 1 <= n_scan and zero_nodes[j + 1]:
                    j += 1
                roots.append(0.5 * (tt[i] + tt[j]))
                i = j + 1
            else:
                i += 1
        # sign changes between non-zero nodes
        for i in range(n_scan):
            if zero_nodes[i] or zero_nodes[i + 1]:
                continue
            if r[i] * r[i + 1] < 0.0:
                a, b = tt[i], tt[i + 1]
                fa = r[i]
                for _ in range(80):
                    m_ = 0.5 * (a + b)
                    fm = float(_angular_residual(pf, m_, x, u_perp))
                    if abs(fm) < residual_tol:
                        a = b = m_
                        break
                    if fa * fm < 0.0:
                        b = m_
                    else:
                        a, fa = m_, fm
                t_root = 0.5 * (a + b)
                # Newton polish on the residual
                for _ in range(4):
                    f0 = float(_angular_residual(pf, t_root, x, u_perp))
                    if abs(f0) < residual_tol:
                        break
                    dh = 1e-7 * max(1.0, hi - lo)
                    d = (
                        float(_angular_residual(pf, t_root + dh, x, u_perp))
                        - float(_angular_residual(pf, t_root - dh, x, u_perp))
                    ) / (2 * dh)
                    if d == 0.0:
                        break
                    step_n = f0 / d
                    if abs(step_n) > (tt[1] - tt[0]):
                        break
                    t_root -= step_n
                roots.append(t_root)

    # deduplicate (2 pi wrap for full-range scans)
    dedup = []
    tol_t = 1e-7 * max(1.0, hi - lo)
    for t_root in sorted(roots):
        if any(abs(t_root - q) < tol_t for q in dedup):
            continue
        if full_circle and any(abs(abs(t_root - q) - TWO_PI) < tol_t for q in dedup):
            continue
        dedup.append(t_root)

    out = []
    for t_root in dedup:
        g = pf._grad_x_raw(t_root, x)
        norm = math.hypot(g[0], g[1])
        orient = 1.0 if (g[0] * u[0] + g[1] * u[1]) / norm >= 0 else -1.0
        out.append((float(t_root), orient))
    return out


def visibility_map(pf, x, n_dirs, t_range=None):
    """Solve the time-for-direction problem on a uniform angular grid."""
    if n_dirs < 8:
        raise ValueError("need at least 8 directions")
    angles = np.linspace(0.0, TWO_PI, n_dirs, endpoint=False)
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    counts = np.zeros(n_dirs, dtype=int)
    witnesses = []
    for i in range(n_dirs):
        roots = solve_time_for_direction(pf, x, directions[i], t_range=t_range)
        counts[i] = len(roots)
        witnesses.append(roots)
    return VisibilityMap(x=np.asarray(x, dtype=float), directions=directions,
                         count=counts, t_witness=witnesses)


# ---------------------------------------------------------------------------
# semi-global Bolker (no conjugate points)
# ---------------------------------------------------------------------------


def semiglobal_bolker_check(pf, t, x, n_curve_samples=512, step=None, exclusion_steps=4):
    """Witnesses against injectivity of y -> (phi(t, y), dt phi(t, y)) along
    the level curve through x.

    The curve through x is traced and resampled to ``n_curve_samples`` points;
    any sample y with |dt phi(t, x) - dt phi(t, y)| below the tolerance is a
    conjugate-point witness.  A small arc around x itself is excluded: near x
    the local Bolker condition already forces strict monotonicity, and every
    continuous function ties with itself in the limit y -> x.

    The tolerance is 1e-6 times a scale for dt phi; since the degenerate
    cases of interest have dt phi identically zero, the scale is floored by
    |grad phi| times the curve length (same physical units).  Sampling is
    doubled (at most twice) when consecutive samples are closer than 10x the
    tolerance in dt phi, unless witnesses were already found.
    """
    x = np.asarray(x, dtype=float)
    s = float(pf.eval(t, x))
    if step is None:
        step = pf.domain.diameter / 1024.0

    for attempt in range(3):
        curve = trace_level_curve(pf, s, t, seed=x, step=step)
        pts = curve.points
        arc = curve.arc_lengths
        total = arc[-1]
        if total <= 0:
            return np.zeros((0, 2))
        targets = np.linspace(0.0, total, n_curve_samples)
        ys = np.stack(
            [np.interp(targets, arc, pts[:, 0]), np.interp(targets, arc, pts[:, 1])], axis=-1
        )
        dt_y = pf.dt(np.full(len(ys), float(t)), ys)
        dt_x = float(pf.dt(t, x))
        g = pf.grad_x(t, x)
        scale = max(float(np.max(np.abs(dt_y))), float(np.hypot(g[0], g[1])) * total)
        sg_tol = 1e-6 * scale

        arc_x = targets[np.argmin(np.hypot(ys[:, 0] - x[0], ys[:, 1] - x[1]))]
        near_x = np.abs(targets - arc_x) <= exclusion_steps * step
        hits = (np.abs(dt_y - dt_x) <= sg_tol) & ~near_x
        if hits.any():
            return ys[hits]
        gaps = np.abs(np.diff(dt_y))
        if attempt < 2 and np.min(gaps) < 10.0 * sg_tol and n_curve_samples < 4096:
            n_curve_samples *= 2
            continue
        return np.zeros((0, 2))
    return np.zeros((0, 2))


# ---------------------------------------------------------------------------
# canonical relation
# ---------------------------------------------------------------------------


def canonical_point(pf, t, x, sigma):
    """Assemble the canonical-relation point over (t, x, sigma)."""
    if sigma == 0.0:
        raise ValueError("sigma must be nonzero")
    x = np.asarray(x, dtype=float)
    frame = fd_derivatives(pf, t, x)
    return CanonicalPoint(
        s=float(frame.s),
        t=float(t),
        sigma=float(sigma),
        tau=float(-sigma * frame.dt_phi),
        x=x,
        xi=sigma * frame.g,
    )


def data_projection_differential(pf, t, x, sigma):
    """The 4x4 differential of the data-side projection in (t, x^1, x^2,
    sigma) coordinates, rows (d phi, d t, d sigma, d(-sigma dt phi))."""
    x = np.asarray(x, dtype=float)
    frame = fd_derivatives(pf, t, x)
    h_fd = pf.fd_step
    dtt = (float(pf.dt(t + h_fd, x)) - float(pf.dt(t - h_fd, x))) / (2 * h_fd)
    M = np.zeros((4, 4))
    M[0, 0] = frame.dt_phi
    M[0, 1] = frame.g[0]
    M[0, 2] = frame.g[1]
    M[1, 0] = 1.0
    M[2, 3] = 1.0
    M[3, 0] = -sigma * dtt
    M[3, 1] = -sigma * frame.m[0]
    M[3, 2] = -sigma * frame.m[1]
    M[3, 3] = frame.dt_phi
    return M


def data_projection_rank(pf, t, x, sigma, svd_rtol=1e-10):
    """Numerical rank (SVD) and determinant of the dPi_Y matrix.

    By cofactor expansion the determinant equals -sigma * h(t, x); full rank
    is therefore equivalent to the local Bolker condition.
    """
    if sigma == 0.0:
        raise ValueError("sigma must be nonzero")
    M = data_projection_differential(pf, t, x, sigma)
    sv = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(sv > svd_rtol * sv[0]))
    det = float(np.linalg.det(M))
    return rank, det


# ---------------------------------------------------------------------------
# principal symbol of the normal operator
# ---------------------------------------------------------------------------


def principal_symbol(pf, mu, atlas, x, xi, t_range=None):
    """Principal symbol of chi_X A* chi_Y A at the covector (x, xi).

    Witness times come from the direction solver; roots with nu . xi > 0
    accumulate W_plus, antipodal roots W_minus, each weighted by the chart
    cutoffs (summed over the atlas, so for the trivial atlas this is exactly
    the single-chart formula):

        W = sum_i chi_iX(x) chi_iY(phi(t,x), t) |mu(t,x)|^2 J(t,x)^2

    with J = |grad phi|.  The denominator uses the first positive-orientation
    root:  h~ = (|xi| / |grad phi|) h(t, x), and

        p = (2 pi)^{-1} (W_+ + W_-) / h~ .

    Invisible covectors (no roots) return p = 0 with ``visible=False``.
    Raises DegenerateSymbolError when |h~| < 1e-12 |xi| at the witness time
    (local Bolker failure at this covector).
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    xi_norm = float(np.hypot(xi[0], xi[1]))
    roots = solve_time_for_direction(pf, x, xi, t_range=t_range)
    if not roots:
        return SymbolValue(x=x, xi=xi, t_used=None, W_plus=0.0, W_minus=0.0,
                           h_tilde=0.0, p=0.0, visible=False)
    t_used = next((t for t, o in roots if o > 0), roots[0][0])

    W_plus = 0.0
    W_minus = 0.0
    for t_root, orient in roots:
        frame = fd_derivatives(pf, t_root, x)
        w = float(atlas.chi_pair(x, float(frame.s), t_root))
        w *= float(mu(t_root, x)) ** 2 * float(frame.J) ** 2
        if orient > 0:
            W_plus += w
        else:
            W_minus += w

    frame = fd_derivatives(pf, t_used, x)
    h_tilde = xi_norm / float(frame.J) * float(frame.h)
    if abs(h_tilde) < 1e-12 * xi_norm:
        raise DegenerateSymbolError(
            f"local Bolker failure at x={x.tolist()}, xi={xi.tolist()}: h~ = {h_tilde:.3e}"
        )
    p = (W_plus + W_minus) / (TWO_PI * h_tilde)
    return SymbolValue(x=x, xi=xi, t_used=float(t_used), W_plus=W_plus, W_minus=W_minus,
                       h_tilde=h_tilde, p=p, visible=True)
