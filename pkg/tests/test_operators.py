import math

import numpy as np
import pytest
from scipy import ndimage

from curvetomo import (
    BreathingMotion,
    BumpWeight,
    CoverageError,
    CutoffAtlas,
    IdentityMotion,
    NormalOperator,
    SinoSpec,
    Sinogram,
    UnitWeight,
    build_default_atlas,
    forward_lagrangian,
    forward_levelset,
    lagrangian_to_levelset_weight,
    make_dynamic_phase,
    make_image_grid,
)
from curvetomo.operators import LevelSetTransform
from curvetomo.phantom import EllipseSpec, render_phantom


def smooth_field(img, seed, sigma=3.0, support_frac=0.9):
    r = np.random.default_rng(seed)
    v = ndimage.gaussian_filter(r.standard_normal((img.nx, img.ny)), sigma)
    X = img.pixel_centers()
    v = v * (np.hypot(X[..., 0], X[..., 1]) <= support_frac * img.support_radius)
    return img.like(v)


def smooth_sino(tr, seed, sigma=3.0):
    r = np.random.default_rng(seed)
    v = ndimage.gaussian_filter(r.standard_normal((len(tr.s_grid), len(tr.t_grid))),
                                sigma, mode="wrap")
    return Sinogram(tr.s_grid.copy(), tr.t_grid.copy(), v)


# ---------------------------------------------------------------------------
# forward: oracles and algebraic identities
# ---------------------------------------------------------------------------


def test_disk_chord_oracle(small_transform):
    """Radon transform of a disk indicator is the chord length 2 sqrt(r^2-s^2)."""
    tr = small_transform
    img = make_image_grid(48)
    disk = render_phantom([EllipseSpec(center=(0, 0), semi_axes=(0.6, 0.6), density=1.0)],
                          img.nx)
    g = tr.forward(disk)
    S = g.s_grid
    exact = np.where(np.abs(S) < 0.6, 2 * np.sqrt(np.maximum(0.36 - S**2, 0.0)), 0.0)
    m = np.abs(S) < 0.6
    err = g.values[m] - exact[m, None]
    rel = math.sqrt(np.sum(err**2) / (np.sum(exact[m] ** 2) * g.values.shape[1]))
    assert rel < 0.01


def test_disk_chord_oracle_256(static_pf):
    """The chord-length oracle at the reference 256^2 resolution."""
    img = make_image_grid(256)
    disk = render_phantom([EllipseSpec(center=(0, 0), semi_axes=(0.6, 0.6), density=1.0)],
                          256)
    tr = LevelSetTransform(static_pf, UnitWeight(), img, SinoSpec(ns=269, nt=60))
    g = tr.forward(disk)
    S = g.s_grid
    exact = np.where(np.abs(S) < 0.6, 2 * np.sqrt(np.maximum(0.36 - S**2, 0.0)), 0.0)
    m = np.abs(S) < 0.6
    err = g.values[m] - exact[m, None]
    rel = math.sqrt(np.sum(err**2) / (np.sum(exact[m] ** 2) * g.values.shape[1]))
    assert rel < 0.01


def test_forward_zero_and_linearity(small_transform):
    tr = small_transform
    img = make_image_grid(48)
    assert np.all(tr.forward(img.like(np.zeros((48, 48)))).values == 0.0)
    f1 = smooth_field(img, 1)
    f2 = smooth_field(img, 2)
    a, b = 1.7, -0.4
    lhs = tr.forward(img.like(a * f1.values + b * f2.values)).values
    rhs = a * tr.forward(f1).values + b * tr.forward(f2).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


def test_forward_weight_scaling(static_pf):
    img = make_image_grid(48)
    f = smooth_field(img, 3)
    spec = SinoSpec(ns=53, nt=60)

    class DoubleWeight(UnitWeight):
        def eval(self, t, x):
            return 2.0 * super().eval(t, x)

    g1 = forward_levelset(static_pf, UnitWeight(), f, spec)
    g2 = forward_levelset(static_pf, DoubleWeight(), f, spec)
    np.testing.assert_allclose(g2.values, 2.0 * g1.values, atol=1e-12)


def test_lagrangian_identity_matches_levelset(static_pf):
    img = make_image_grid(64)
    f = render_phantom([EllipseSpec(center=(0.1, -0.05), semi_axes=(0.5, 0.35),
                                    angle=0.4, density=1.0)], 64)
    spec = SinoSpec(ns=69, nt=120)
    g_lvl = forward_levelset(static_pf, UnitWeight(), f, spec)
    g_lag = forward_lagrangian(
        IdentityMotion(), UnitWeight(), f,
        SinoSpec(ns=69, nt=120, s_range=(float(g_lvl.s_grid[0]), float(g_lvl.s_grid[-1]))),
    )
    rel = np.linalg.norm(g_lvl.values - g_lag.values) / np.linalg.norm(g_lag.values)
    assert rel < 0.005


def test_change_of_variables_equivalence():
    """Material-coordinate forward equals the level-set forward with the
    pushforward weight |det D psi^-1| mu(psi^-1) / |grad phi|."""
    motion = BreathingMotion(0.05)
    mu = BumpWeight(amplitude=0.2)
    img = make_image_grid(64)
    f = render_phantom([EllipseSpec(center=(-0.1, 0.1), semi_axes=(0.45, 0.45), density=1.0),
                        EllipseSpec(center=(0.25, -0.2), semi_axes=(0.25, 0.12),
                                    angle=0.5, density=0.6)], 64)
    g_lag = forward_lagrangian(motion, mu, f, SinoSpec(ns=69, nt=120))
    pf = make_dynamic_phase(motion)
    mu_hat = lagrangian_to_levelset_weight(motion, mu, pf)
    spec = SinoSpec(ns=69, nt=120,
                    s_range=(float(g_lag.s_grid[0]), float(g_lag.s_grid[-1])))
    g_lvl = forward_levelset(pf, mu_hat, f, spec)
    rel = np.linalg.norm(g_lag.values - g_lvl.values) / np.linalg.norm(g_lag.values)
    assert rel < 0.02


def test_radon_shift_theorem():
    img = make_image_grid(64)
    spec_e = [EllipseSpec(center=(0.0, 0.05), semi_axes=(0.4, 0.3), angle=0.3, density=1.0)]
    f0 = render_phantom(spec_e, 64)
    v = np.array([0.1, -0.07])
    shifted = [EllipseSpec(center=(0.1, 0.05 - 0.07), semi_axes=(0.4, 0.3),
                           angle=0.3, density=1.0)]
    f1 = render_phantom(shifted, 64)
    spec = SinoSpec(ns=95, nt=90, s_range=(-1.05, 1.05))
    g0 = forward_lagrangian(IdentityMotion(), UnitWeight(), f0, spec)
    g1 = forward_lagrangian(IdentityMotion(), UnitWeight(), f1, spec)
    pred = np.empty_like(g0.values)
    ds = g0.s_grid[1] - g0.s_grid[0]
    for j, t in enumerate(g0.t_grid):
        shift = v[0] * math.cos(t) + v[1] * math.sin(t)
        pred[:, j] = np.interp(g0.s_grid - shift, g0.s_grid, g0.values[:, j],
                               left=0.0, right=0.0)
    rel = np.linalg.norm(g1.values - pred) / np.linalg.norm(g1.values)
    assert rel < 0.01


# ---------------------------------------------------------------------------
# adjoint
# ---------------------------------------------------------------------------


def test_adjoint_zero(small_transform):
    g = small_transform.forward(make_image_grid(48))
    out = small_transform.adjoint(g.like(np.zeros_like(g.values)))
    assert np.all(out.values == 0.0)


def test_adjoint_constant_data(small_transform):
    """A* applied to g = 1 integrates J = 1 over the full circle: 2 pi."""
    tr = small_transform
    g = Sinogram(tr.s_grid.copy(), tr.t_grid.copy(),
                 np.ones((len(tr.s_grid), len(tr.t_grid))))
    out = tr.adjoint(g)
    X = make_image_grid(48).pixel_centers()
    inside = np.hypot(X[..., 0], X[..., 1]) < 0.9  # away from the s-range edge
    assert np.max(np.abs(out.values[inside] - 2 * math.pi)) < 0.01 * 2 * math.pi


def test_adjoint_duality(small_transform):
    tr = small_transform
    img = make_image_grid(48)
    worst = 0.0
    for k in range(5):
        f = smooth_field(img, 100 + k)
        g = smooth_sino(tr, 200 + k)
        Af = tr.forward(f)
        bp = tr.adjoint(g)
        rel = abs(Af.inner(g) - f.inner(bp)) / (Af.norm() * g.norm())
        worst = max(worst, rel)
    assert worst < 1e-3


@pytest.mark.parametrize("case", ["bump_weight", "affine", "limited_range"])
def test_adjoint_duality_variants(case, static_pf):
    """Duality holds with a varying weight, the affine family, and a
    windowed (non-periodic) acquisition range."""
    from curvetomo.geometry import AffineMotion

    img = make_image_grid(48)
    if case == "bump_weight":
        pf, mu = make_dynamic_phase(BreathingMotion(0.06)), BumpWeight(amplitude=0.4)
        spec = SinoSpec(ns=53, nt=90)
    elif case == "affine":
        pf, mu = make_dynamic_phase(AffineMotion(0.06)), UnitWeight()
        spec = SinoSpec(ns=53, nt=90)
    else:
        pf, mu = static_pf, UnitWeight()
        spec = SinoSpec(ns=53, nt=90, t_range=(0.5, 2.8))
    tr = LevelSetTransform(pf, mu, img, spec)
    f = smooth_field(img, 61)
    g = smooth_sino(tr, 62)
    Af = tr.forward(f)
    bp = tr.adjoint(g)
    assert abs(Af.inner(g) - f.inner(bp)) / (Af.norm() * g.norm()) < 1e-3


def test_adjoint_duality_linear_interp(static_pf):
    """The bilinear/linear option preserves the duality contract."""
    img = make_image_grid(48)
    tr = LevelSetTransform(static_pf, UnitWeight(), img, SinoSpec(ns=53, nt=90),
                           interp="linear")
    f = smooth_field(img, 7)
    g = smooth_sino(tr, 8)
    Af = tr.forward(f)
    bp = tr.adjoint(g)
    assert abs(Af.inner(g) - f.inner(bp)) / (Af.norm() * g.norm()) < 1e-3


# ---------------------------------------------------------------------------
# normal operator and atlas
# ---------------------------------------------------------------------------


def test_normal_trivial_atlas_is_adjoint_of_forward(small_transform):
    tr = small_transform
    img = make_image_grid(48)
    f = smooth_field(img, 11)
    direct = tr.adjoint(tr.forward(f))
    N = NormalOperator(tr, CutoffAtlas.trivial())
    np.testing.assert_allclose(N.apply(f).values, direct.values, atol=1e-14)


def test_normal_symmetric_variant(small_transform):
    tr = small_transform
    img = make_image_grid(48)
    atlas = build_default_atlas(tr.pf, 1.0, 2)
    N = NormalOperator(tr, atlas, symmetric=True)
    f1 = smooth_field(img, 21)
    f2 = smooth_field(img, 22)
    lhs = N.apply(f1).inner(f2)
    rhs = f1.inner(N.apply(f2))
    assert abs(lhs - rhs) / max(abs(lhs), abs(rhs)) < 1e-3
    # positive semidefiniteness up to discretization
    q = N.apply(f1).inner(f1)
    assert q >= -1e-6 * f1.norm() ** 2


def test_atlas_trivial_partition(static_pf):
    atlas = build_default_atlas(static_pf, 1.0, 1)
    pts = np.random.default_rng(0).uniform(-0.9, 0.9, (50, 2))
    np.testing.assert_allclose(atlas.chi_x(pts), 1.0)


def test_atlas_grid_partition_bounds(static_pf):
    atlas = build_default_atlas(static_pf, 1.0, 4)
    assert len(atlas.charts) == 16
    rng = np.random.default_rng(1)
    r = np.sqrt(rng.uniform(0, 1, 400))
    a = rng.uniform(0, 2 * math.pi, 400)
    pts = np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)
    sums = atlas.chi_x(pts)
    assert np.min(sums) >= 0.5
    assert np.max(sums) <= 4.0


def test_atlas_limited_angle_coverage_error(static_pf):
    import copy

    pf = copy.copy(static_pf)
    pf.t_range = (0.0, math.pi / 3)
    with pytest.raises(CoverageError) as exc:
        build_default_atlas(pf, 1.0, 2)
    assert len(exc.value.uncovered) > 0


def test_chart_taper_profile():
    atlas = CutoffAtlas(charts=[])
    from curvetomo.operators import _taper

    d = np.linspace(0.0, 1.2, 200)
    chi = _taper(d, 1.0)
    assert np.all((chi >= 0.0) & (chi <= 1.0))
    assert np.all(chi[d <= 0.5] == 1.0)
    assert np.all(chi[d >= 1.0] == 0.0)
    # C^2: second differences stay bounded through the joins
    dd = np.diff(chi, 2)
    assert np.max(np.abs(dd)) < 10 * (d[1] - d[0]) ** 2 * 60


def test_one_shot_wrappers_match_transform(small_transform, static_pf):
    """forward_levelset / adjoint / apply_normal free functions agree with
    the planned-transform methods."""
    from curvetomo import adjoint, apply_normal

    tr = small_transform
    img = make_image_grid(48)
    f = smooth_field(img, 41)
    spec = SinoSpec(ns=53, nt=90)
    g1 = forward_levelset(static_pf, UnitWeight(), f, spec)
    g2 = tr.forward(f)
    np.testing.assert_allclose(g1.values, g2.values, atol=1e-12)
    bp1 = adjoint(static_pf, UnitWeight(), g2, img)
    bp2 = tr.adjoint(g2)
    np.testing.assert_allclose(bp1.values, bp2.values, atol=1e-12)
    Nf1 = apply_normal(static_pf, UnitWeight(), CutoffAtlas.trivial(), f, sino_spec=spec)
    Nf2 = tr.adjoint(tr.forward(f))
    np.testing.assert_allclose(Nf1.values, Nf2.values, atol=1e-12)


# ---------------------------------------------------------------------------
# failure accounting
# ---------------------------------------------------------------------------


def test_forward_marks_unreachable_samples_zero(static_pf):
    """(s, t) samples whose curve misses the support are exact zeros."""
    img = make_image_grid(48)
    tr = LevelSetTransform(static_pf, UnitWeight(), img,
                           SinoSpec(ns=61, nt=30, s_range=(-1.6, 1.6)))
    f = smooth_field(img, 31)
    g = tr.forward(f)
    far = np.abs(g.s_grid) > 1.35
    assert np.all(g.values[far] == 0.0)
    assert np.all(np.isfinite(g.values))
