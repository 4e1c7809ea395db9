import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvetomo import (
    AffineMotion,
    BranchError,
    BreathingMotion,
    DomainError,
    IdentityMotion,
    RotationMotion,
    SeedProjectionError,
    fan_to_parallel,
    fd_derivatives,
    homogeneous_extension,
    make_dynamic_phase,
    make_fanbeam_phase,
    make_static_phase,
    trace_level_curve,
)
from curvetomo.geometry import PhaseFunction, Rect, TWO_PI

from conftest import support_samples


# ---------------------------------------------------------------------------
# static phase
# ---------------------------------------------------------------------------


def test_static_phase_examples(static_pf):
    assert static_pf.eval(0.0, np.array([1.0, 0.0])) == pytest.approx(1.0)
    np.testing.assert_allclose(static_pf.grad_x(0.0, np.array([1.0, 0.0])), [1.0, 0.0])
    assert static_pf.eval(math.pi / 2, np.array([3.0, 2.0])) == pytest.approx(2.0)
    assert static_pf.eval(math.pi / 4, np.array([1.0, 1.0])) == pytest.approx(math.sqrt(2.0))


def test_static_phase_derivatives(static_pf, rng):
    t, x = support_samples(rng, 50)
    np.testing.assert_allclose(static_pf.dt(t, x), -x[:, 0] * np.sin(t) + x[:, 1] * np.cos(t))
    g = static_pf.grad_x(t, x)
    np.testing.assert_allclose(np.hypot(g[:, 0], g[:, 1]), 1.0)


def _fd_reference(pf, t, x):
    """Pure finite-difference derivatives straight from the phase values."""
    return (
        PhaseFunction._grad_x_raw(pf, t, x),
        PhaseFunction._dt_raw(pf, t, x),
        PhaseFunction._dt_grad_x_raw(pf, t, x),
    )


@pytest.mark.parametrize("builder", [
    lambda: make_static_phase(),
    lambda: make_dynamic_phase(BreathingMotion(0.08)),
    lambda: make_dynamic_phase(AffineMotion(0.06)),
    lambda: make_dynamic_phase(RotationMotion(0.7)),
    lambda: make_fanbeam_phase(3.0),
])
def test_analytic_derivatives_match_fd(builder, rng):
    pf = builder()
    assert pf.analytic_derivatives
    lo, hi = pf.t_range
    t, x = support_samples(rng, 100, radius=0.9, t_range=(lo, hi))
    g_a, d_a, m_a = pf.grad_x(t, x), pf.dt(t, x), pf.dt_grad_x(t, x)
    g_f, d_f, m_f = _fd_reference(pf, t, x)
    for a, f in ((g_a, g_f), (d_a, d_f), (m_a, m_f)):
        scale = np.max(np.abs(a))
        assert np.max(np.abs(a - f)) / scale < 1e-6


def test_grad_never_vanishes(rng):
    for pf in (make_static_phase(), make_dynamic_phase(BreathingMotion(0.1)),
               make_fanbeam_phase(3.0)):
        lo, hi = pf.t_range
        t, x = support_samples(rng, 200, t_range=(lo, hi))
        g = pf.grad_x(t, x)
        assert np.min(np.hypot(g[:, 0], g[:, 1])) > 0.0


# ---------------------------------------------------------------------------
# dynamic phases
# ---------------------------------------------------------------------------


def test_dynamic_identity_matches_static(static_pf, rng):
    pf = make_dynamic_phase(IdentityMotion())
    t, x = support_samples(rng, 100)
    np.testing.assert_allclose(pf.eval(t, x), static_pf.eval(t, x), atol=1e-14)


def test_dynamic_sync_rotation_is_x1(sync_pf, rng):
    t, x = support_samples(rng, 100)
    np.testing.assert_allclose(sync_pf.eval(t, x), x[:, 0], atol=1e-13)


def test_dynamic_counter_rotation_doubles_angle(rng):
    pf = make_dynamic_phase(RotationMotion(1.0))
    t, x = support_samples(rng, 100)
    ref = x[:, 0] * np.cos(2 * t) + x[:, 1] * np.sin(2 * t)
    np.testing.assert_allclose(pf.eval(t, x), ref, atol=1e-13)


def test_dynamic_phase_domain_error(breathing_pf):
    with pytest.raises(DomainError):
        breathing_pf.eval(0.3, np.array([5.0, 0.0]))


@settings(max_examples=25, deadline=None)
@given(
    t=st.floats(0.0, TWO_PI),
    zx=st.floats(-1.3, 1.3),
    zy=st.floats(-1.3, 1.3),
    amp=st.floats(0.0, 0.15),
)
def test_breathing_roundtrip_property(t, zx, zy, amp):
    motion = BreathingMotion(amp)
    z = np.array([zx, zy])
    x = motion.forward(t, z)
    np.testing.assert_allclose(motion.inverse(t, x), z, atol=1e-10)


def test_motion_roundtrip_bulk(rng):
    for motion in (IdentityMotion(), RotationMotion(-1.0), AffineMotion(0.07),
                   BreathingMotion(0.1)):
        t = rng.uniform(0, TWO_PI, 1000)
        z = rng.uniform(-1.2, 1.2, (1000, 2))
        x = motion.forward(t, z)
        assert np.max(np.abs(motion.inverse(t, x) - z)) < 1e-8
        assert np.max(np.abs(motion.forward(t, motion.inverse(t, z)) - z)) < 1e-8
        assert np.min(motion.jac_det(t, z)) > 0.0


def test_breathing_identity_outside_support(rng):
    motion = BreathingMotion(0.12, r_support=1.15)
    assert motion.compactly_supported
    a = rng.uniform(0, TWO_PI, 200)
    r = rng.uniform(motion.identity_radius, 1.6, 200)
    z = np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)
    t = rng.uniform(0, TWO_PI, 200)
    np.testing.assert_allclose(motion.forward(t, z), z, atol=1e-14)


def test_breathing_amplitude_guard():
    with pytest.raises(ValueError):
        BreathingMotion(0.5)


# ---------------------------------------------------------------------------
# fan beam
# ---------------------------------------------------------------------------


def test_fanbeam_center_example():
    pf = make_fanbeam_phase(2.0, support_radius=0.2, domain=Rect(-0.5, 0.5, -0.5, 0.5))
    assert pf.eval(math.pi / 2, np.zeros(2)) == pytest.approx(0.0, abs=1e-12)


def test_fanbeam_constant_on_rays(rng):
    pf = make_fanbeam_phase(3.0)
    for t in np.linspace(*pf.t_range, 7):
        target = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)])
        S = 3.0 * np.array([math.cos(t), math.sin(t)])
        u = (target - S) / np.linalg.norm(target - S)
        pts = S + np.linspace(2.2, 3.8, 9)[:, None] * u
        vals = pf.eval(t, pts)
        assert np.ptp(vals) < 1e-12


def test_fanbeam_branch_error():
    pf = make_fanbeam_phase(3.0)
    t = pf.t_range[0]
    # x^1 well below R cos t violates the branch sign
    bad = np.array([3.0 * math.cos(t) - 0.5, 0.0])
    with pytest.raises(BranchError):
        pf.eval(t, bad)


def test_fanbeam_needs_enclosing_circle():
    with pytest.raises(ValueError):
        make_fanbeam_phase(1.0)


def test_fan_to_parallel_examples():
    s, beta, jac = fan_to_parallel(math.pi / 2, 0.0, 1.0)
    assert (s, beta, jac) == pytest.approx((0.0, 0.0, 1.0))
    s, beta, jac = fan_to_parallel(0.0, math.pi / 6, 2.0)
    assert s == pytest.approx(1.0)
    assert beta == pytest.approx(math.pi / 6 - math.pi / 2)
    assert jac == pytest.approx(2.0 * math.cos(math.pi / 6))
    _, _, jac = fan_to_parallel(0.3, np.array([math.pi / 2 - 1e-9, -math.pi / 2 + 1e-9]), 1.0)
    assert np.all(np.abs(jac) < 1e-8)


# ---------------------------------------------------------------------------
# homogeneous extension
# ---------------------------------------------------------------------------


def test_homogeneous_extension_static_hessian(static_pf, rng):
    for _ in range(20):
        t = rng.uniform(0, TWO_PI)
        x = rng.uniform(-1, 1, 2)
        lam = rng.uniform(0.3, 3.0)
        theta = lam * np.array([math.cos(t), math.sin(t)])
        val, hess = homogeneous_extension(static_pf, x, theta)
        assert hess == pytest.approx(1.0, abs=1e-12)
        assert val == pytest.approx(lam * static_pf.eval(t, x), rel=1e-12)


@pytest.mark.parametrize("lam", [2.0, 10.0])
def test_homogeneous_extension_order_one(static_pf, breathing_pf, lam):
    x = np.array([0.3, -0.2])
    theta = np.array([0.8, 0.6])
    for pf in (static_pf, breathing_pf):
        v1, _ = homogeneous_extension(pf, x, theta)
        v2, _ = homogeneous_extension(pf, x, lam * theta)
        assert v2 == pytest.approx(lam * v1, rel=1e-12)


def test_homogeneous_extension_fd_hessian_oracle(breathing_pf, rng):
    """Mixed theta-x Hessian determinant against a pure finite-difference
    Hessian of |theta| phi(arg theta, x)."""
    pf = breathing_pf

    def phi_ext(x, theta):
        nrm = math.hypot(theta[0], theta[1])
        return nrm * float(pf.eval(math.atan2(theta[1], theta[0]) % TWO_PI, x))

    for _ in range(5):
        t = rng.uniform(0.5, TWO_PI - 0.5)
        x = rng.uniform(-0.7, 0.7, 2)
        theta = np.array([math.cos(t), math.sin(t)])
        _, hess = homogeneous_extension(pf, x, theta)
        h = 2e-5
        M = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                dth = np.zeros(2); dth[i] = h
                dx = np.zeros(2); dx[j] = h
                M[i, j] = (
                    phi_ext(x + dx, theta + dth) - phi_ext(x - dx, theta + dth)
                    - phi_ext(x + dx, theta - dth) + phi_ext(x - dx, theta - dth)
                ) / (4 * h * h)
        assert np.linalg.det(M) == pytest.approx(hess, rel=1e-4, abs=1e-6)


def test_homogeneous_extension_branch_error():
    pf = make_fanbeam_phase(3.0)  # t_range is a window around pi
    with pytest.raises(BranchError):
        homogeneous_extension(pf, np.array([0.1, 0.0]), np.array([1.0, 0.0]))  # arg = 0


# ---------------------------------------------------------------------------
# level-curve tracing
# ---------------------------------------------------------------------------


def test_trace_static_vertical_line(static_pf):
    curve = trace_level_curve(static_pf, 0.0, 0.0, seed=np.array([0.03, 0.2]), step=0.01)
    assert np.max(np.abs(curve.points[:, 0])) < 1e-8
    assert np.all(np.diff(curve.arc_lengths) > 0)
    steps = np.diff(curve.arc_lengths)
    assert np.all(steps >= 0.25 * 0.01) and np.all(steps <= 1.0 * 0.01 + 1e-12)
    # spans the domain (terminates within a couple of steps of the boundary)
    assert curve.points[:, 1].max() > 1.5 and curve.points[:, 1].min() < -1.5


def test_trace_residual_invariant(breathing_pf):
    s = float(breathing_pf.eval(1.2, np.array([0.3, -0.1])))
    curve = trace_level_curve(breathing_pf, s, 1.2, seed=np.array([0.3, -0.1]), step=0.008)
    resid = breathing_pf.eval(1.2, curve.points) - s
    assert np.max(np.abs(resid)) < 1e-8 * breathing_pf.domain.diameter


def test_trace_fan_ray_collinear():
    pf = make_fanbeam_phase(3.0)
    t = math.pi
    x0 = np.array([0.25, 0.15])
    s = float(pf.eval(t, x0))
    curve = trace_level_curve(pf, s, t, seed=x0, step=0.01)
    S = 3.0 * np.array([math.cos(t), math.sin(t)])
    d = curve.points - S
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    cross = np.abs(d[:, 0] * d[0, 1] - d[:, 1] * d[0, 0])
    assert np.max(cross) < 1e-6


def test_trace_seed_projection_error(static_pf):
    # static phase: level s = 10 exists but lies far outside the domain
    with pytest.raises(SeedProjectionError):
        trace_level_curve(static_pf, 10.0, 0.0, seed=np.array([0.1, 0.1]), step=0.01)
    # fan phase: the angle 10 is outside the range of atan2 entirely
    fan = make_fanbeam_phase(3.0)
    with pytest.raises(SeedProjectionError):
        trace_level_curve(fan, 10.0, math.pi, seed=np.array([0.1, 0.1]), step=0.01)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def test_frame_static_values(static_pf, rng):
    t, x = support_samples(rng, 40)
    frame = fd_derivatives(static_pf, t, x)
    np.testing.assert_allclose(frame.J, 1.0, atol=1e-12)
    np.testing.assert_allclose(frame.h, 1.0, atol=1e-12)
    np.testing.assert_allclose(np.hypot(frame.nu[:, 0], frame.nu[:, 1]), 1.0, atol=1e-12)


def test_weights_strictly_positive(rng):
    from curvetomo import BumpWeight, UnitWeight

    t, x = support_samples(rng, 200)
    for mu in (UnitWeight(), BumpWeight(amplitude=0.3), BumpWeight(amplitude=-0.5)):
        assert np.min(mu(t, x)) > 0.0
    with pytest.raises(ValueError):
        BumpWeight(amplitude=-0.9)


def test_frame_normal_orthogonal_to_tangent_static(static_pf):
    """On a straight level line the normal is exactly orthogonal to every
    polyline tangent."""
    curve = trace_level_curve(static_pf, 0.2, 0.9, seed=np.array([0.2, 0.1]), step=0.01)
    tangents = np.diff(curve.points, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    frame = fd_derivatives(static_pf, 0.9, curve.points[:-1])
    assert np.max(np.abs(np.sum(frame.nu * tangents, axis=1))) < 1e-6


def test_frame_normal_orthogonal_to_tangent(breathing_pf):
    x0 = np.array([0.2, 0.3])
    t = 0.7
    s = float(breathing_pf.eval(t, x0))
    curve = trace_level_curve(breathing_pf, s, t, seed=x0, step=0.01)
    mids = 0.5 * (curve.points[1:] + curve.points[:-1])
    tangents = np.diff(curve.points, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    frame = fd_derivatives(breathing_pf, t, mids)
    dots = np.abs(np.sum(frame.nu * tangents, axis=1))
    assert np.max(dots) < 1e-4  # tangent is a chord, first-order in step


def test_frame_sync_rotation_degenerate(sync_pf, rng):
    t, x = support_samples(rng, 30)
    frame = fd_derivatives(sync_pf, t, x)
    assert np.max(np.abs(frame.m)) < 1e-10
    assert np.max(np.abs(frame.h)) < 1e-12


def test_frame_h_equals_column_det(breathing_pf, rng):
    t, x = support_samples(rng, 30)
    frame = fd_derivatives(breathing_pf, t, x)
    det = frame.g[:, 0] * frame.m[:, 1] - frame.g[:, 1] * frame.m[:, 0]
    np.testing.assert_array_equal(frame.h, det)


def test_fd_derivatives_domain_error(breathing_pf):
    with pytest.raises(DomainError):
        fd_derivatives(breathing_pf, 0.1, np.array([1.6, 0.0]))
