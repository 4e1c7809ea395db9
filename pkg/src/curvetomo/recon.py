"""Iterative inversion through the normal equations and empirical probes of
the stability and perturbation estimates.

The solver works on the symmetrized normal operator.  Because the discrete
forward and adjoint are independent quadratures (not exact transposes, they
agree to the duality tolerance), the Krylov update uses the residual-minimal
step length (conjugate-residual form): the recorded residual history is then
non-increasing by construction, which classic conjugate-gradient steps only
guarantee under exact symmetry.  Landweber iteration is provided as a
fallback that tolerates indefiniteness outright.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DivergenceError
from .geometry import BreathingMotion, make_dynamic_phase, smoothstep_c2
from .operators import (
    CutoffAtlas,
    LevelSetTransform,
    NormalOperator,
    SinoSpec,
    make_image_grid,
)

ENSEMBLE_SEED = 0xC0FFEE


@dataclass
class SolveReport:
    iterations: int
    residual_history: list
    rel_error_vs_truth: float | None
    runtime: float
    converged: bool = False


@dataclass
class StabilityReport:
    amplitudes: list
    ratios: dict                 # amplitude -> list of ratios
    max_ratio: dict
    min_ratio: dict
    median_ratio: dict
    degenerate_flags: dict       # amplitude -> bool (>= 1e3 x static median)
    seed: int = ENSEMBLE_SEED


@dataclass
class PerturbationTable:
    deltas: list
    ratios: list                 # ||(N - N~) f||_H1 / ||f||_L2 per delta
    slope: float | None          # log-log fit over the positive deltas
    monotone: bool


def h1_norm(img):
    """Discrete H^1 norm: sqrt(||f||^2 + ||grad f||^2) with forward
    differences, zero-padded past the boundary, grid-spacing weights."""
    v = np.asarray(img.values, dtype=float)
    h = img.spacing
    gx = np.diff(np.concatenate([v, np.zeros((1, v.shape[1]))], axis=0), axis=0) / h
    gy = np.diff(np.concatenate([v, np.zeros((v.shape[0], 1))], axis=1), axis=1) / h
    return math.sqrt((np.sum(v**2) + np.sum(gx**2) + np.sum(gy**2)) * h * h)


def _support_mask(img):
    X = img.pixel_centers()
    return np.hypot(X[..., 0], X[..., 1]) <= img.support_radius


def cg_normal_solve(normal_op, g, max_iter=50, tol=1e-6, tikhonov=0.0, truth=None,
                    divergence_patience=5):
    """Solve N_sym f = B g for the symmetrized, support-restricted normal
    equations by a conjugate-direction iteration with residual-minimal steps.

    Returns (ImageGrid, SolveReport).  Residual history is relative to the
    right-hand side and non-increasing; DivergenceError is raised after
    ``divergence_patience`` consecutive increases (only reachable through
    severe operator asymmetry or indefiniteness, e.g. a Bolker failure).
    """
    t_start = time.time()
    tr = normal_op.transform
    b_img = normal_op.back_data(g)
    mask = _support_mask(b_img)
    b = b_img.values * mask
    b_norm = math.sqrt(np.sum(b * b))
    shape = b.shape

    def apply_N(vec):
        out = normal_op.apply(b_img.like(vec)).values * mask
        if tikhonov:
            out = out + tikhonov * vec
        return out

    f = np.zeros(shape)
    history = []
    if b_norm == 0.0:
        report = SolveReport(iterations=0, residual_history=[], rel_error_vs_truth=None,
                             runtime=time.time() - t_start, converged=True)
        if truth is not None:
            report.rel_error_vs_truth = 1.0 if truth.norm() > 0 else 0.0
        return b_img.like(f), report

    r = b.copy()
    Nr = apply_N(r)
    p = r.copy()
    Np = Nr.copy()
    rho = float(np.sum(r * Nr))
    rises = 0
    prev = math.sqrt(np.sum(r * r)) / b_norm
    history.append(prev)
    converged = prev < tol
    it = 0
    while it < max_iter and not converged:
        denom = float(np.sum(Np * Np))
        if denom <= 0.0:
            break
        # residual-minimal step along N p: keeps ||r|| non-increasing even
        # under the small forward/adjoint quadrature asymmetry
        alpha = float(np.sum(r * Np)) / denom
        f = f + alpha * p
        r = r - alpha * Np
        res = math.sqrt(np.sum(r * r)) / b_norm
        if res > prev + 1e-10:
            rises += 1
            if rises >= divergence_patience:
                raise DivergenceError(
                    f"residual increased {rises} consecutive iterations (res={res:.3e})"
                )
        else:
            rises = 0
        history.append(res)
        prev = min(prev, res)
        it += 1
        if res < tol:
            converged = True
            break
        Nr = apply_N(r)
        rho_new = float(np.sum(r * Nr))
        beta = rho_new / rho if abs(rho) > 0 else 0.0
        p = r + beta * p
        Np = Nr + beta * Np
        rho = rho_new

    rel_err = None
    if truth is not None and truth.norm() > 0:
        rel_err = float(
            math.sqrt(np.sum((f - truth.values) ** 2)) / math.sqrt(np.sum(truth.values**2))
        )
    report = SolveReport(iterations=it, residual_history=history,
                         rel_error_vs_truth=rel_err, runtime=time.time() - t_start,
                         converged=converged)
    return b_img.like(f), report


def landweber_solve(normal_op, g, max_iter=50, relaxation=None, truth=None, seed=0):
    """Landweber iteration f <- f + w (B g - N f); tolerates the mild
    asymmetry and semi-definiteness that break conjugate directions."""
    t_start = time.time()
    b_img = normal_op.back_data(g)
    mask = _support_mask(b_img)
    b = b_img.values * mask

    def apply_N(vec):
        return normal_op.apply(b_img.like(vec)).values * mask

    if relaxation is None:
        # power iteration for ||N|| on the support subspace
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(b.shape) * mask
        lam = 1.0
        for _ in range(8):
            w = apply_N(v)
            lam = math.sqrt(np.sum(w * w)) / max(math.sqrt(np.sum(v * v)), 1e-300)
            v = w / max(math.sqrt(np.sum(w * w)), 1e-300)
        relaxation = 1.0 / max(lam, 1e-300)
    f = np.zeros_like(b)
    history = []
    b_norm = math.sqrt(np.sum(b * b))
    for _ in range(max_iter):
        r = b - apply_N(f)
        history.append(math.sqrt(np.sum(r * r)) / max(b_norm, 1e-300))
        f = f + relaxation * r
    rel_err = None
    if truth is not None and truth.norm() > 0:
        rel_err = float(math.sqrt(np.sum((f - truth.values) ** 2))
                        / math.sqrt(np.sum(truth.values**2)))
    return b_img.like(f), SolveReport(iterations=max_iter, residual_history=history,
                                      rel_error_vs_truth=rel_err,
                                      runtime=time.time() - t_start)


# ---------------------------------------------------------------------------
# random ensembles and probes
# ---------------------------------------------------------------------------


def band_limited_ensemble(nx, n_samples, support_radius=1.0, band=None, seed=ENSEMBLE_SEED):
    """Random band-limited images supported in the target disk.

    Frequency content is white on the annulus band (default [1, nx/8] cycles
    per domain), tapered to zero outside 0.85x the support by a C^2 profile.
    """
    if band is None:
        band = (1.0, nx / 8.0)
    rng = np.random.default_rng(seed)
    grid = make_image_grid(nx, support_radius=support_radius)
    kx = np.fft.fftfreq(nx) * nx
    KX, KY = np.meshgrid(kx, kx, indexing="ij")
    KR = np.hypot(KX, KY)
    sel = (KR >= band[0]) & (KR <= band[1])
    X = grid.pixel_centers()
    rad = np.hypot(X[..., 0], X[..., 1])
    taper = 1.0 - smoothstep_c2((rad - 0.70 * support_radius) / (0.20 * support_radius))
    out = []
    for _ in range(n_samples):
        spec = (rng.standard_normal((nx, nx)) + 1j * rng.standard_normal((nx, nx))) * sel
        v = np.fft.ifft2(spec).real
        v *= taper
        nv = math.sqrt(np.sum(v * v)) * grid.spacing
        out.append(grid.like(v / max(nv, 1e-300)))
    return out


def stability_probe(motion_family, amplitudes, n_samples, nx=64, nt=180,
                    seed=ENSEMBLE_SEED, blowup_factor=1e3):
    """Empirical two-sided stability ratios ||f||_L2 / ||N f||_H1 across
    motion amplitudes, over a fixed random band-limited ensemble.

    ``motion_family`` maps an amplitude to a MotionModel; amplitudes must
    include 0 (the static reference).  A flag is raised per amplitude when
    any ratio exceeds ``blowup_factor`` times the static median.
    """
    if 0 not in [a for a in amplitudes] and 0.0 not in amplitudes:
        raise ValueError("amplitudes must include 0 (static reference)")
    fields = band_limited_ensemble(nx, n_samples, seed=seed)
    spec = SinoSpec(ns=int(nx * 1.05) + 1, nt=nt)
    ratios = {}
    for a in amplitudes:
        pf = make_dynamic_phase(motion_family(a))
        tr = LevelSetTransform(pf, _unit_weight(), fields[0], spec)
        op = NormalOperator(tr, CutoffAtlas.trivial())
        vals = []
        for f in fields:
            Nf = op.apply(f)
            denom = h1_norm(Nf)
            vals.append(f.norm() / denom if denom > 0 else math.inf)
        ratios[a] = vals
    static_key = [a for a in amplitudes if a == 0 or a == 0.0][0]
    static_median = float(np.median(ratios[static_key]))
    report = StabilityReport(
        amplitudes=list(amplitudes),
        ratios=ratios,
        max_ratio={a: float(np.max(r)) for a, r in ratios.items()},
        min_ratio={a: float(np.min(r)) for a, r in ratios.items()},
        median_ratio={a: float(np.median(r)) for a, r in ratios.items()},
        degenerate_flags={
            a: bool(np.max(ratios[a]) >= blowup_factor * static_median) for a in ratios
        },
        seed=seed,
    )
    return report


def _unit_weight():
    from .geometry import UnitWeight

    return UnitWeight()


def perturbation_sweep(deltas, probe_f=None, nx=64, nt=180, base_amplitude=0.0,
                       weight_bump=True, seed=ENSEMBLE_SEED):
    """Operator sensitivity under delta-scaled smooth perturbations.

    The perturbed pair adds delta to the breathing amplitude (a compactly
    supported smooth bump of the motion) and, when ``weight_bump``, scales
    the weight by (1 + delta * gaussian bump).  Reports the ratio
    ||(N - N~) f||_H1 / ||f||_L2 per delta and the log-log slope over the
    positive deltas.
    """
    from .geometry import BumpWeight, UnitWeight

    if probe_f is None:
        probe_f = band_limited_ensemble(nx, 1, seed=seed)[0]
    spec = SinoSpec(ns=int(nx * 1.05) + 1, nt=nt,
                    s_range=(-1.05 * probe_f.support_radius, 1.05 * probe_f.support_radius))

    def build(delta):
        motion = BreathingMotion(base_amplitude + delta)
        mu = BumpWeight(amplitude=delta) if (weight_bump and delta != 0.0) else UnitWeight()
        pf = make_dynamic_phase(motion)
        tr = LevelSetTransform(pf, mu, probe_f, spec)
        return NormalOperator(tr, CutoffAtlas.trivial())

    base = build(base_amplitude * 0.0)
    Nf = base.apply(probe_f)
    ratios = []
    for d in deltas:
        Nf_d = build(d).apply(probe_f)
        diff = probe_f.like(Nf_d.values - Nf.values)
        ratios.append(h1_norm(diff) / probe_f.norm())
    pos = [(d, r) for d, r in zip(deltas, ratios) if d > 0 and r > 0]
    slope = None
    if len(pos) >= 2:
        ld = np.log([d for d, _ in pos])
        lr = np.log([r for _, r in pos])
        slope = float(np.polyfit(ld, lr, 1)[0])
    monotone = all(ratios[i] <= ratios[i + 1] + 1e-12 for i in range(len(ratios) - 1))
    return PerturbationTable(deltas=list(deltas), ratios=ratios, slope=slope,
                             monotone=monotone)


def edge_response(recon, truth, cov, window=5, step_px=1.0):
    """Directional-gradient recovery at a phantom edge.

    Samples the gradient along the edge normal ``cov.xi`` at ``window``
    points through ``cov.x`` and returns mean|grad recon| / mean|grad truth|.
    """
    u = cov.unit_dir
    h = step_px * truth.spacing

    def directional(img, pts):
        def interp(q):
            coords = np.stack(
                [(q[:, 0] - img.origin[0]) / img.spacing,
                 (q[:, 1] - img.origin[1]) / img.spacing], axis=0
            )
            return ndimage.map_coordinates(np.asarray(img.values, float), coords,
                                           order=3, mode="nearest")
        return (interp(pts + 0.5 * h * u) - interp(pts - 0.5 * h * u)) / h

    offs = (np.arange(window) - (window - 1) / 2) * h
    pts = np.asarray(cov.x)[None, :] + offs[:, None] * u[None, :]
    lo = np.array([truth.origin[0], truth.origin[1]])
    hi = lo + truth.spacing * (np.array([truth.nx, truth.ny]) - 1)
    if np.any(pts - h < lo) or np.any(pts + h > hi):
        from .errors import DomainError

        raise DomainError("edge-response window exits the grid")
    g_rec = np.abs(directional(recon, pts)).mean()
    g_tru = np.abs(directional(truth, pts)).mean()
    return float(g_rec / g_tru) if g_tru > 0 else math.inf
