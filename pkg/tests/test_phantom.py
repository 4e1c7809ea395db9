import math

import numpy as np
import pytest

from curvetomo import (
    EllipseSpec,
    boundary_wavefront,
    default_phantom,
    render_phantom,
    visibility_audit,
    visibility_map,
)
from curvetomo.geometry import TWO_PI


def test_unit_disk_mass():
    img = render_phantom([EllipseSpec(center=(0, 0), semi_axes=(0.8, 0.8), density=1.0)], 128)
    mass = np.sum(img.values) * img.spacing**2
    assert mass == pytest.approx(math.pi * 0.8**2, rel=5e-3)


def test_empty_phantom_and_additivity():
    assert np.all(render_phantom([], 32).values == 0.0)
    e1 = EllipseSpec(center=(-0.4, 0.0), semi_axes=(0.2, 0.2), density=1.0)
    e2 = EllipseSpec(center=(0.4, 0.0), semi_axes=(0.2, 0.3), density=0.7)
    img = render_phantom([e1, e2], 96)
    i1 = render_phantom([e1], 96)
    i2 = render_phantom([e2], 96)
    np.testing.assert_allclose(img.values, i1.values + i2.values, atol=1e-12)
    assert img.values.max() == pytest.approx(1.0)


def test_phantom_mass_first_order_convergence():
    spec = [EllipseSpec(center=(0.1, -0.05), semi_axes=(0.5, 0.3), angle=0.4, density=1.0)]
    exact = math.pi * 0.5 * 0.3
    errs = []
    for nx in (32, 64, 128):
        img = render_phantom(spec, nx)
        errs.append(abs(np.sum(img.values) * img.spacing**2 - exact))
    assert errs[2] < errs[0]
    assert errs[2] < 2e-3 * exact


def test_circle_normals():
    spec = [EllipseSpec(center=(0.2, -0.1), semi_axes=(0.4, 0.4), density=1.0)]
    wfs = boundary_wavefront(spec, 16)
    for cov in wfs.samples:
        radial = (cov.x - np.array([0.2, -0.1])) / 0.4
        np.testing.assert_allclose(cov.xi, radial, atol=1e-12)


def test_axis_aligned_ellipse_normal():
    spec = [EllipseSpec(center=(0.0, 0.0), semi_axes=(0.5, 0.25), density=1.0)]
    wfs = boundary_wavefront(spec, 8)
    at_a = wfs.samples[0]  # theta = 0 is the point (a, 0)
    np.testing.assert_allclose(at_a.x, [0.5, 0.0], atol=1e-14)
    np.testing.assert_allclose(at_a.xi, [1.0, 0.0], atol=1e-14)


def test_rotated_ellipse_normals_match_fd():
    """Normals against finite differences of the implicit ellipse function."""
    spec = EllipseSpec(center=(0.1, 0.2), semi_axes=(0.4, 0.15), angle=0.7, density=1.0)
    wfs = boundary_wavefront([spec], 24)
    c, s_ = math.cos(spec.angle), math.sin(spec.angle)

    def implicit(p):
        dx, dy = p[0] - spec.center[0], p[1] - spec.center[1]
        xr = dx * c + dy * s_
        yr = -dx * s_ + dy * c
        return (xr / spec.semi_axes[0]) ** 2 + (yr / spec.semi_axes[1]) ** 2 - 1.0

    h = 1e-6
    for cov in wfs.samples:
        assert abs(implicit(cov.x)) < 1e-10
        g = np.array([
            (implicit(cov.x + [h, 0]) - implicit(cov.x - [h, 0])) / (2 * h),
            (implicit(cov.x + [0, h]) - implicit(cov.x - [0, h])) / (2 * h),
        ])
        g /= np.linalg.norm(g)
        np.testing.assert_allclose(cov.xi, g, atol=1e-5)


def test_wavefront_on_boundary_invariant():
    wfs = boundary_wavefront(default_phantom(), 32)
    # each sample satisfies its own ellipse equation to 1e-10 (checked above
    # per-ellipse; here: all normals unit length)
    for cov in wfs.samples:
        assert np.hypot(cov.xi[0], cov.xi[1]) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# visibility audits
# ---------------------------------------------------------------------------


def test_audit_static_full_range(static_pf):
    wfs = boundary_wavefront(default_phantom(), 16)
    audit = visibility_audit(static_pf, wfs)
    assert audit.fraction_visible == 1.0


def test_audit_static_limited_matches_geometry(static_pf):
    spec = [EllipseSpec(center=(0.0, 0.0), semi_axes=(0.5, 0.5), density=1.0)]
    wfs = boundary_wavefront(spec, 256)
    audit = visibility_audit(static_pf, wfs, t_range=(0.0, math.pi / 2))
    # geometric oracle: a normal at angle a is visible iff a or a - pi falls
    # in [0, pi/2] (mod 2 pi)
    angles = np.array([math.atan2(c.xi[1], c.xi[0]) % TWO_PI for c in wfs.samples])
    vis_exact = ((angles <= math.pi / 2) |
                 ((angles >= math.pi) & (angles <= 1.5 * math.pi)))
    frac_exact = np.mean(vis_exact)
    assert audit.fraction_visible == pytest.approx(frac_exact, abs=0.02)


def test_audit_sync_rotation(sync_pf):
    spec = [EllipseSpec(center=(0.0, 0.0), semi_axes=(0.4, 0.4), density=1.0)]
    wfs = boundary_wavefront(spec, 64)
    audit = visibility_audit(sync_pf, wfs)
    vis = [c for c, fl in zip(wfs.samples, audit.flags) if fl]
    assert 0 < len(vis) <= 4
    for cov in vis:
        assert abs(abs(cov.xi[0]) - 1.0) < 0.01


def test_audit_agrees_with_visibility_map(static_pf):
    wfs = boundary_wavefront([EllipseSpec(center=(0, 0), semi_axes=(0.3, 0.3),
                                          density=1.0)], 8)
    audit = visibility_audit(static_pf, wfs, t_range=(0.0, math.pi / 3))
    for cov, flag in zip(wfs.samples, audit.flags):
        vm = visibility_map(static_pf, cov.x, 8, t_range=(0.0, math.pi / 3))
        ang = math.atan2(cov.xi[1], cov.xi[0]) % TWO_PI
        idx = int(round(ang / (TWO_PI / 8))) % 8
        grid_ang = idx * TWO_PI / 8
        if abs(((ang - grid_ang) + math.pi) % TWO_PI - math.pi) < 1e-9:
            assert bool(vm.count[idx] > 0) == bool(flag)
