"""Phase functions, motion models and level-curve machinery.

Conventions
-----------
A *phase function* ``phi(t, x)`` is a real scalar field on time x plane whose
level sets ``H(s, t) = {x : phi(t, x) = s}`` are the integration curves of the
transform.  All evaluators are vectorized: ``x`` has shape ``(..., 2)`` and
``t`` is a scalar or an array broadcastable against ``x[..., 0]``; values come
back with the broadcast shape.  ``omega(t) = (cos t, sin t)`` and the
perpendicular is the quarter turn ``(-sin t, cos t)``.

Derivative access is uniform: phases either carry analytic derivatives
(``analytic_derivatives`` is True) or fall back to central finite differences
with step ``1e-4 * domain diameter``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BranchError, DomainError, SeedProjectionError, StallError

TWO_PI = 2.0 * math.pi


def omega(t):
    """Unit direction (cos t, sin t), stacked on the last axis."""
    t = np.asarray(t, dtype=float)
    return np.stack([np.cos(t), np.sin(t)], axis=-1)


def omega_perp(t):
    """d/dt omega(t) = (-sin t, cos t)."""
    t = np.asarray(t, dtype=float)
    return np.stack([-np.sin(t), np.cos(t)], axis=-1)


def rot90(v):
    """Counterclockwise quarter turn of vectors stacked on the last axis."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def smoothstep_c2(u):
    """Quintic smoothstep: 0 -> 0, 1 -> 1 with vanishing first and second
    derivatives at both ends (C^2 join against constants)."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10.0 + u * (-15.0 + 6.0 * u))


def smoothstep_c2_deriv(u):
    uc = np.clip(u, 0.0, 1.0)
    d = 30.0 * uc * uc * (1.0 - uc) ** 2
    return np.where((u > 0.0) & (u < 1.0), d, 0.0)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle used as the extended domain."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return (
            (x[..., 0] >= self.xmin)
            & (x[..., 0] <= self.xmax)
            & (x[..., 1] >= self.ymin)
            & (x[..., 1] <= self.ymax)
        )

    @property
    def diameter(self):
        return math.hypot(self.xmax - self.xmin, self.ymax - self.ymin)

    def shrunk(self, margin):
        return Rect(
            self.xmin + margin, self.xmax - margin, self.ymin + margin, self.ymax - margin
        )


DEFAULT_DOMAIN = Rect(-1.6, 1.6, -1.6, 1.6)


# ---------------------------------------------------------------------------
# motion models
# ---------------------------------------------------------------------------


class MotionModel:
    """Time-dependent diffeomorphism of the plane.

    Subclasses provide ``forward``/``inverse`` (mutually inverse maps),
    ``jac_det`` (spatial Jacobian determinant of the forward map) and
    ``dt_inverse`` (time derivative of the inverse map).  ``inv_jacobian``
    returns the 2x2 spatial Jacobian of the inverse map when an analytic
    expression exists, else None and callers fall back to differences.

    ``compactly_supported`` marks motions that are the identity outside the
    disk of radius ``identity_radius``; rigid rotations are deliberately not
    (they are the textbook degenerate case, a global isometry).
    """

    amplitude: float = 0.0
    compactly_supported: bool = False
    identity_radius: float = math.inf
    analytic: bool = True

    def forward(self, t, z):
        raise NotImplementedError

    def inverse(self, t, x):
        raise NotImplementedError

    def jac_det(self, t, z):
        raise NotImplementedError

    def dt_inverse(self, t, x):
        raise NotImplementedError

    def inv_jacobian(self, t, x):
        return None


class IdentityMotion(MotionModel):
    name = "identity"
    compactly_supported = True

    @staticmethod
    def _shape(t, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_shapes(z[..., 0].shape, np.shape(t))

    def forward(self, t, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(z, self._shape(t, z) + (2,)).copy()

    def inverse(self, t, x):
        return self.forward(t, x)

    def jac_det(self, t, z):
        return np.ones(self._shape(t, z))

    def dt_inverse(self, t, x):
        return np.zeros(self._shape(t, x) + (2,))

    def inv_jacobian(self, t, x):
        return np.broadcast_to(np.eye(2), self._shape(t, x) + (2, 2)).copy()


def _rot_apply(theta, v):
    """Apply the rotation by angle theta (broadcastable) to vectors v."""
    c = np.cos(theta)
    s = np.sin(theta)
    return np.stack(
        [c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1
    )


class RotationMotion(MotionModel):
    """Rigid rotation psi_t = R_{rate * t}.  rate = -1 is the
    scanner-synchronized case (phi collapses to x^1)."""

    name = "rotation"

    def __init__(self, rate):
        self.rate = float(rate)
        self.amplitude = abs(self.rate)

    def forward(self, t, z):
        return _rot_apply(self.rate * np.asarray(t, dtype=float), np.asarray(z, dtype=float))

    def inverse(self, t, x):
        return _rot_apply(-self.rate * np.asarray(t, dtype=float), np.asarray(x, dtype=float))

    def jac_det(self, t, z):
        z = np.asarray(z, dtype=float)
        return np.ones(np.broadcast_shapes(z[..., 0].shape, np.shape(t)))

    def dt_inverse(self, t, x):
        theta = -self.rate * np.asarray(t, dtype=float)
        # d/dt R_theta(x) with theta = -rate*t equals -rate * R_{theta + pi/2}(x)
        return -self.rate * _rot_apply(theta + 0.5 * math.pi, np.asarray(x, dtype=float))

    def inv_jacobian(self, t, x):
        theta = -self.rate * np.asarray(t, dtype=float)
        c = np.cos(theta)
        s = np.sin(theta)
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(x[..., 0].shape, np.shape(theta))
        jac = np.empty(shape + (2, 2))
        jac[..., 0, 0] = c
        jac[..., 0, 1] = -s
        jac[..., 1, 0] = s
        jac[..., 1, 1] = c
        return jac


_AFFINE_M0 = np.array([[0.40, -0.15], [0.25, 0.30]])
_AFFINE_V0 = np.array([0.12, -0.08])


class AffineMotion(MotionModel):
    """Time-affine motion psi_t(z) = A(t) z + b(t) with A(t) near identity:
    A(t) = I + amplitude*sin(t)*M0, b(t) = amplitude*(1 - cos t)*v0."""

    name = "affine"

    def __init__(self, amplitude, matrix=None, shift=None):
        self.amplitude = float(amplitude)
        self.M0 = np.array(_AFFINE_M0 if matrix is None else matrix, dtype=float)
        self.v0 = np.array(_AFFINE_V0 if shift is None else shift, dtype=float)
        # diffeomorphism guard: det A(t) must stay positive over a full period
        tt = np.linspace(0.0, TWO_PI, 257)
        if np.min(np.linalg.det(self._A(tt))) <= 0.05:
            raise ValueError("affine amplitude too large: A(t) close to singular")

    def _A(self, t):
        t = np.asarray(t, dtype=float)
        return np.eye(2) + (self.amplitude * np.sin(t))[..., None, None] * self.M0

    def _A_inv(self, t):
        A = self._A(t)
        det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
        inv = np.empty_like(A)
        inv[..., 0, 0] = A[..., 1, 1]
        inv[..., 0, 1] = -A[..., 0, 1]
        inv[..., 1, 0] = -A[..., 1, 0]
        inv[..., 1, 1] = A[..., 0, 0]
        return inv / det[..., None, None]

    def _b(self, t):
        t = np.asarray(t, dtype=float)
        return (self.amplitude * (1.0 - np.cos(t)))[..., None] * self.v0

    def forward(self, t, z):
        z = np.asarray(z, dtype=float)
        A = self._A(t)
        return np.einsum("...ij,...j->...i", A, z) + self._b(t)

    def inverse(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.einsum("...ij,...j->...i", self._A_inv(t), x - self._b(t))

    def jac_det(self, t, z):
        A = self._A(t)
        det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(det, np.broadcast_shapes(det.shape, z[..., 0].shape)).copy()

    def dt_inverse(self, t, x):
        t = np.asarray(t, dtype=float)
        z = self.inverse(t, x)
        Aprime = (self.amplitude * np.cos(t))[..., None, None] * self.M0
        bprime = (self.amplitude * np.sin(t))[..., None] * self.v0
        rhs = np.einsum("...ij,...j->...i", Aprime, z) + bprime
        return -np.einsum("...ij,...j->...i", self._A_inv(t), rhs)

    def inv_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        inv = self._A_inv(t)
        shape = np.broadcast_shapes(inv.shape[:-2], x[..., 0].shape)
        return np.broadcast_to(inv, shape + (2, 2))


class BreathingMotion(MotionModel):
    """Radial breathing psi_t(z) = (1 + a sin t * eta(|z|)) z.

    eta is a C^2 taper equal to 1 on [0, r_flat] and 0 beyond r_support, so
    the motion is the identity outside the scanned region.  The inverse is a
    scalar Newton solve on the radius (the radial map r -> (1 + a sin t
    eta(r)) r is strictly monotone for admissible amplitudes).
    """

    name = "breathing"
    compactly_supported = True

    def __init__(self, amplitude, r_flat=0.5, r_support=1.15):
        self.amplitude = float(amplitude)
        self.r_flat = float(r_flat)
        self.r_support = float(r_support)
        self.identity_radius = self.r_support
        if not 0.0 < self.r_flat < self.r_support:
            raise ValueError("need 0 < r_flat < r_support")
        # monotonicity of the radial map: |a| * max|eta + r eta'| < 1
        rr = np.linspace(0.0, self.r_support, 2001)
        bound = np.max(np.abs(self._eta(rr) + rr * self._eta_prime(rr)))
        if abs(self.amplitude) * bound >= 0.95:
            raise ValueError(
                f"breathing amplitude {amplitude} too large for taper (bound {bound:.2f})"
            )

    def _eta(self, r):
        u = (self.r_support - np.asarray(r, dtype=float)) / (self.r_support - self.r_flat)
        return smoothstep_c2(u)

    def _eta_prime(self, r):
        u = (self.r_support - np.asarray(r, dtype=float)) / (self.r_support - self.r_flat)
        return -smoothstep_c2_deriv(u) / (self.r_support - self.r_flat)

    def _scale(self, t, r):
        return 1.0 + self.amplitude * np.sin(t) * self._eta(r)

    def _scale_dr(self, t, r):
        return self.amplitude * np.sin(t) * self._eta_prime(r)

    def forward(self, t, z):
        z = np.asarray(z, dtype=float)
        r = np.hypot(z[..., 0], z[..., 1])
        return self._scale(np.asarray(t, dtype=float), r)[..., None] * z

    def _solve_radius(self, t, rho):
        """Invert r * scale(t, r) = rho by vectorized Newton iteration."""
        t = np.asarray(t, dtype=float)
        rho = np.asarray(rho, dtype=float)
        r = rho / self._scale(t, rho)  # good starting guess for small amplitude
        for _ in range(40):
            c = self._scale(t, r)
            f = r * c - rho
            if np.max(np.abs(f)) < 1e-14 * max(1.0, self.r_support):
                break
            fp = c + r * self._scale_dr(t, r)
            r = np.maximum(r - f / fp, 0.0)
        return r

    def inverse(self, t, x):
        x = np.asarray(x, dtype=float)
        rho = np.hypot(x[..., 0], x[..., 1])
        r = self._solve_radius(t, rho)
        ratio = np.where(rho > 0.0, r / np.where(rho > 0.0, rho, 1.0), 1.0)
        return ratio[..., None] * x

    def jac_det(self, t, z):
        z = np.asarray(z, dtype=float)
        t = np.asarray(t, dtype=float)
        r = np.hypot(z[..., 0], z[..., 1])
        c = self._scale(t, r)
        cp = self._scale_dr(t, r)
        # polar factorization: radius map derivative times (rho / r)
        return (c + r * cp) * c

    def dt_inverse(self, t, x):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        rho = np.hypot(x[..., 0], x[..., 1])
        r = self._solve_radius(t, rho)
        eta = self._eta(r)
        denom = self._scale(t, r) + r * self._scale_dr(t, r)
        drdt = -(self.amplitude * np.cos(t) * eta * r) / denom
        ratio = np.where(rho > 0.0, drdt / np.where(rho > 0.0, rho, 1.0), 0.0)
        return ratio[..., None] * x

    def inv_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        rho = np.hypot(x[..., 0], x[..., 1])
        r = self._solve_radius(t, rho)
        c = self._scale(t, r)
        cp = self._scale_dr(t, r)
        # Sherman-Morrison inverse of D psi = c I + (c'/r) z z^T at z = psi^-1(x)
        safe_r = np.where(r > 1e-12, r, 1.0)
        z = np.where(rho[..., None] > 1e-12, (r / np.where(rho > 0, rho, 1.0))[..., None] * x, 0.0)
        alpha = np.where(r > 1e-12, cp / safe_r, 0.0)
        denom = c + alpha * r * r
        shape = np.broadcast_shapes(c.shape, x[..., 0].shape)
        jac = np.zeros(shape + (2, 2))
        coeff = np.where(np.abs(denom) > 0, alpha / denom, 0.0) / c
        jac[..., 0, 0] = 1.0 / c - coeff * z[..., 0] * z[..., 0]
        jac[..., 0, 1] = -coeff * z[..., 0] * z[..., 1]
        jac[..., 1, 0] = -coeff * z[..., 1] * z[..., 0]
        jac[..., 1, 1] = 1.0 / c - coeff * z[..., 1] * z[..., 1]
        return jac


_MOTION_REGISTRY = {
    "identity": lambda **kw: IdentityMotion(),
    "rotation": lambda **kw: RotationMotion(kw.get("rate", 0.3)),
    "affine": lambda **kw: AffineMotion(kw.get("amplitude", 0.05)),
    "breathing": lambda **kw: BreathingMotion(
        kw.get("amplitude", 0.05),
        r_flat=kw.get("r_flat", 0.5),
        r_support=kw.get("r_support", 1.15),
    ),
}


def make_motion(name, **params):
    """Instantiate a builtin motion by name ('identity', 'rotation',
    'affine', 'breathing')."""
    try:
        factory = _MOTION_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown motion family {name!r}") from None
    return factory(**params)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


class Weight:
    """Positive smooth weight mu(t, x); callable with the evaluator contract."""

    def eval(self, t, x):
        raise NotImplementedError

    def __call__(self, t, x):
        return self.eval(t, x)


class UnitWeight(Weight):
    name = "unit"

    def eval(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.ones(np.broadcast_shapes(x[..., 0].shape, np.shape(t)))


class BumpWeight(Weight):
    """mu = 1 + amplitude * exp(-|x - c|^2 / w^2) * (1 + 0.5 sin t): a strictly
    positive smooth perturbation of the unit weight."""

    name = "bump"

    def __init__(self, amplitude=0.1, center=(0.2, -0.1), width=0.6):
        if amplitude <= -0.66:
            raise ValueError("weight must stay positive")
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)
        self.width = float(width)

    def eval(self, t, x):
        x = np.asarray(x, dtype=float)
        d2 = np.sum((x - self.center) ** 2, axis=-1)
        bump = np.exp(-d2 / self.width**2)
        return 1.0 + self.amplitude * bump * (1.0 + 0.5 * np.sin(np.asarray(t, dtype=float)))


# ---------------------------------------------------------------------------
# phase functions
# ---------------------------------------------------------------------------


class PhaseFunction:
    """Base class; provides finite-difference derivative fallbacks.

    ``eval`` validates preconditions and raises; the ``_eval_raw`` family is
    the non-raising path used by batch internals together with
    ``branch_mask`` / ``domain`` termination logic.
    """

    analytic_derivatives = False
    domain: Rect = DEFAULT_DOMAIN
    t_range = (0.0, TWO_PI)

    @property
    def fd_step(self):
        # central differences: balances truncation and round-off at float64
        return 1e-4 * self.domain.diameter

    # -- raw evaluators ----------------------------------------------------
    def _eval_raw(self, t, x):
        raise NotImplementedError

    def _grad_x_raw(self, t, x):
        h = self.fd_step
        x = np.asarray(x, dtype=float)
        e0 = np.array([h, 0.0])
        e1 = np.array([0.0, h])
        g0 = (self._eval_raw(t, x + e0) - self._eval_raw(t, x - e0)) / (2 * h)
        g1 = (self._eval_raw(t, x + e1) - self._eval_raw(t, x - e1)) / (2 * h)
        return np.stack([g0, g1], axis=-1)

    def _dt_raw(self, t, x):
        h = self.fd_step
        t = np.asarray(t, dtype=float)
        return (self._eval_raw(t + h, x) - self._eval_raw(t - h, x)) / (2 * h)

    def _dt_grad_x_raw(self, t, x):
        h = self.fd_step
        t = np.asarray(t, dtype=float)
        return (self._grad_x_raw(t + h, x) - self._grad_x_raw(t - h, x)) / (2 * h)

    def branch_mask(self, t, x):
        """True where the phase value is on its smooth branch."""
        x = np.asarray(x, dtype=float)
        return np.ones(np.broadcast_shapes(x[..., 0].shape, np.shape(t)), dtype=bool)

    def _check(self, t, x):
        return None

    # -- public, validating evaluators --------------------------------------
    def eval(self, t, x):
        self._check(t, x)
        return self._eval_raw(t, x)

    def grad_x(self, t, x):
        self._check(t, x)
        return self._grad_x_raw(t, x)

    def dt(self, t, x):
        self._check(t, x)
        return self._dt_raw(t, x)

    def dt_grad_x(self, t, x):
        self._check(t, x)
        return self._dt_grad_x_raw(t, x)


class StaticPhase(PhaseFunction):
    """phi(t, x) = x . omega(t): the classical parallel-beam Radon family."""

    analytic_derivatives = True
    name = "static"

    def __init__(self, domain=DEFAULT_DOMAIN, t_range=(0.0, TWO_PI)):
        self.domain = domain
        self.t_range = tuple(t_range)

    def _eval_raw(self, t, x):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        return x[..., 0] * np.cos(t) + x[..., 1] * np.sin(t)

    def _grad_x_raw(self, t, x):
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(x[..., 0].shape, np.shape(t))
        return np.broadcast_to(omega(t), shape + (2,)).copy()

    def _dt_raw(self, t, x):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        return -x[..., 0] * np.sin(t) + x[..., 1] * np.cos(t)

    def _dt_grad_x_raw(self, t, x):
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(x[..., 0].shape, np.shape(t))
        return np.broadcast_to(omega_perp(t), shape + (2,)).copy()


class DynamicPhase(PhaseFunction):
    """phi(t, x) = psi_t^{-1}(x) . omega(t) for a motion model psi_t.

    Spatial and time derivatives use the motion's analytic inverse Jacobian
    and time derivative when available; the mixed derivative is a central
    difference in t of the spatial gradient.  With ``use_analytic=False``
    every derivative is a central difference of the phase itself.
    """

    name = "dynamic"

    def __init__(self, motion, domain=DEFAULT_DOMAIN, t_range=(0.0, TWO_PI), use_analytic=True):
        self.motion = motion
        self.domain = domain
        self.t_range = tuple(t_range)
        self._analytic = bool(
            use_analytic
            and motion.inv_jacobian(0.0, np.zeros(2)) is not None
        )

    @property
    def analytic_derivatives(self):
        return self._analytic

    def _check(self, t, x):
        if not np.all(self.domain.contains(x)):
            raise DomainError("point outside extended domain of dynamic phase")

    def _eval_raw(self, t, x):
        t = np.asarray(t, dtype=float)
        z = self.motion.inverse(t, x)
        w = omega(t)
        return z[..., 0] * w[..., 0] + z[..., 1] * w[..., 1]

    def _grad_x_raw(self, t, x):
        if not self._analytic:
            return super()._grad_x_raw(t, x)
        t = np.asarray(t, dtype=float)
        jac = self.motion.inv_jacobian(t, x)
        w = omega(t)
        # (D psi^-1)^T omega
        return np.einsum("...ji,...j->...i", jac, np.broadcast_to(w, jac.shape[:-2] + (2,)))

    def _dt_raw(self, t, x):
        if not self._analytic:
            return super()._dt_raw(t, x)
        t = np.asarray(t, dtype=float)
        z = self.motion.inverse(t, x)
        dz = self.motion.dt_inverse(t, x)
        w = omega(t)
        wp = omega_perp(t)
        return (
            dz[..., 0] * w[..., 0]
            + dz[..., 1] * w[..., 1]
            + z[..., 0] * wp[..., 0]
            + z[..., 1] * wp[..., 1]
        )


class FanBeamPhase(PhaseFunction):
    """Fan-beam level function for a source on the circle of radius R.

    With u = R sin t - x^2 and v = x^1 - R cos t the phase is the polar angle
    of the normalized ray perpendicular, atan2(v, u), on the branch v > 0.
    Level sets are the rays from the source S(t) = R (cos t, sin t); the
    boundary case v = 0, u > 0 evaluates smoothly to 0 and is allowed, any
    other violation of the sign condition raises BranchError.

    ``t_range`` is cut down so the branch condition holds over the whole
    object disk of radius ``support_radius``: a window centered at t = pi.
    """

    analytic_derivatives = True
    name = "fanbeam"

    def __init__(self, R, support_radius=1.05, t_margin=0.05, domain=DEFAULT_DOMAIN):
        corner = math.hypot(
            max(abs(domain.xmin), abs(domain.xmax)), max(abs(domain.ymin), abs(domain.ymax))
        )
        if R <= corner:
            raise ValueError(f"source radius {R} must exceed the domain corner radius {corner:.3f}")
        if support_radius >= R:
            raise ValueError("support must be inside the source circle")
        self.R = float(R)
        self.support_radius = float(support_radius)
        self.domain = domain
        half = math.asin(self.support_radius / self.R) + t_margin
        self.t_range = (0.5 * math.pi + half, 1.5 * math.pi - half)

    def _uv(self, t, x):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        u = self.R * np.sin(t) - x[..., 1]
        v = x[..., 0] - self.R * np.cos(t)
        return u, v

    def branch_mask(self, t, x):
        u, v = self._uv(t, x)
        tol = 1e-12 * self.R  # the v = 0, u > 0 boundary is smooth and allowed
        return (v > tol) | ((np.abs(v) <= tol) & (u > 0.0))

    def _check(self, t, x):
        if not np.all(self.branch_mask(t, x)):
            raise BranchError("fan-beam phase evaluated off the sgn(x^1 - R cos t) > 0 branch")

    def _eval_raw(self, t, x):
        u, v = self._uv(t, x)
        return np.arctan2(v, u)

    def _grad_x_raw(self, t, x):
        u, v = self._uv(t, x)
        q = u * u + v * v
        return np.stack([u / q, v / q], axis=-1)

    def _dt_raw(self, t, x):
        u, v = self._uv(t, x)
        t = np.asarray(t, dtype=float)
        q = u * u + v * v
        return self.R * (u * np.sin(t) - v * np.cos(t)) / q

    def _dt_grad_x_raw(self, t, x):
        u, v = self._uv(t, x)
        t = np.asarray(t, dtype=float)
        du = self.R * np.cos(t)
        dv = self.R * np.sin(t)
        q = u * u + v * v
        dq = 2.0 * (u * du + v * dv)
        gx = (du * q - u * dq) / (q * q)
        gy = (dv * q - v * dq) / (q * q)
        return np.stack([gx, gy], axis=-1)


def make_static_phase(domain=DEFAULT_DOMAIN, t_range=(0.0, TWO_PI)):
    """Classical Radon phase x . omega(t) with analytic derivatives."""
    return StaticPhase(domain=domain, t_range=t_range)


def make_dynamic_phase(motion, domain=DEFAULT_DOMAIN, t_range=(0.0, TWO_PI), use_analytic=True):
    """Level-curve phase psi_t^{-1}(x) . omega(t) of a motion model."""
    return DynamicPhase(motion, domain=domain, t_range=t_range, use_analytic=use_analytic)


def make_fanbeam_phase(R, support_radius=1.05, t_margin=0.05, domain=DEFAULT_DOMAIN):
    """Fan-beam phase arg(alpha_perp); see FanBeamPhase for the branch."""
    return FanBeamPhase(R, support_radius=support_radius, t_margin=t_margin, domain=domain)


def fan_to_parallel(t, gamma, R):
    """Fan coordinates (source angle t, fan angle gamma) to parallel (s, beta).

    Returns (s, beta, jacobian) with s = R sin(gamma), beta = t + gamma - pi/2
    and jacobian R cos(gamma) of the map (t, gamma) -> (s, beta).
    """
    t = np.asarray(t, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    s = R * np.sin(gamma)
    beta = t + gamma - 0.5 * math.pi
    return s, beta, R * np.cos(gamma)


# ---------------------------------------------------------------------------
# frames and the homogeneous extension
# ---------------------------------------------------------------------------


@dataclass
class LevelCurveFrame:
    """All first/mixed derivatives of phi at one (t, x), plus derived fields:
    unit normal nu, J = |grad phi|, and the local Bolker determinant
    h = det[grad_x phi, dt grad_x phi] (columns)."""

    t: float
    x: np.ndarray
    s: float
    g: np.ndarray
    dt_phi: float
    m: np.ndarray
    nu: np.ndarray
    J: float
    h: float


def fd_derivatives(pf, t, x):
    """Assemble a LevelCurveFrame at (t, x); analytic where the phase has it.

    Raises DomainError when (t, x) is not interior to domain x t_range by at
    least the finite-difference step.
    """
    x = np.asarray(x, dtype=float)
    h_fd = pf.fd_step
    inner = pf.domain.shrunk(h_fd)
    if not np.all(inner.contains(x)):
        raise DomainError("fd_derivatives needs interior points (one FD step of margin)")
    s = pf.eval(t, x)
    g = np.asarray(pf.grad_x(t, x), dtype=float)
    dt_phi = pf.dt(t, x)
    m = np.asarray(pf.dt_grad_x(t, x), dtype=float)
    J = np.hypot(g[..., 0], g[..., 1])
    nu = g / J[..., None]
    h_det = g[..., 0] * m[..., 1] - g[..., 1] * m[..., 0]
    return LevelCurveFrame(t=t, x=x, s=s, g=g, dt_phi=dt_phi, m=m, nu=nu, J=J, h=h_det)


def _wrap_into_range(t, t_range, slack):
    lo, hi = t_range
    k = 0.0
    while t + k * TWO_PI < lo - slack:
        k += 1.0
    while t + k * TWO_PI > hi + slack:
        k -= 1.0
    tw = t + k * TWO_PI
    if tw < lo - slack or tw > hi + slack:
        return None
    return tw


def homogeneous_extension(pf, x, theta):
    """Order-one homogeneous extension |theta| * phi(arg theta, x).

    Returns ``(value, hessian_det)`` where hessian_det is the determinant of
    the mixed second derivatives in (theta, x), assembled from the phase
    derivatives at t = arg theta via the product-rule expansion; it collapses
    algebraically to the local Bolker determinant h(t, x).

    Raises BranchError when arg theta cannot be placed near ``pf.t_range``.
    """
    theta = np.asarray(theta, dtype=float)
    norm = math.hypot(theta[0], theta[1])
    if norm == 0.0:
        raise ValueError("theta must be nonzero")
    t = math.atan2(theta[1], theta[0])
    lo, hi = pf.t_range
    slack = 0.26 * (hi - lo)
    tw = _wrap_into_range(t, pf.t_range, slack)
    if tw is None:
        raise BranchError("arg theta falls outside a branch-safe neighborhood of t_range")
    x = np.asarray(x, dtype=float)
    value = norm * pf.eval(tw, x)
    c = theta[0] / norm
    s = theta[1] / norm
    g = pf.grad_x(tw, x)
    m = pf.dt_grad_x(tw, x)
    row1 = c * g - s * m
    row2 = s * g + c * m
    hessian_det = row1[..., 0] * row2[..., 1] - row1[..., 1] * row2[..., 0]
    return value, hessian_det


# ---------------------------------------------------------------------------
# level-curve tracing
# ---------------------------------------------------------------------------


@dataclass
class LevelCurve:
    """Polyline realization of one connected component of H(s, t)."""

    s: float
    t: float
    points: np.ndarray
    arc_lengths: np.ndarray = field(default=None)
    closed: bool = False

    def __post_init__(self):
        if self.arc_lengths is None:
            seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
            self.arc_lengths = np.concatenate([[0.0], np.cumsum(seg)])


def curve_tolerance(pf):
    """Residual tolerance |phi - s| for traced vertices."""
    return 1e-8 * pf.domain.diameter


def project_to_level(pf, t, s, x0, tol, max_iter=20):
    """Newton projection of points onto {phi(t, .) = s} along grad phi.

    Vectorized; returns (points, ok_mask).  Scalar callers wrap the result.
    """
    x = np.array(x0, dtype=float, copy=True)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    for _ in range(max_iter):
        r = pf._eval_raw(t, x) - s
        if np.max(np.abs(r)) < tol:
            break
        g = pf._grad_x_raw(t, x)
        g2 = np.maximum(np.sum(g * g, axis=-1), 1e-300)
        x = x - (r / g2)[..., None] * g
    ok = np.abs(pf._eval_raw(t, x) - s) < tol
    ok &= pf.branch_mask(t, x)
    return x, ok


def _trace_batch(pf, t, s, p0, step, *, stop_rect, support_stop=None, max_steps=None,
                 emit=None, collect=False, corrector_iters=8):
    """March all curves simultaneously: RK2 predictor along the rotated
    gradient, Newton corrector back onto the level set.

    Parameters
    ----------
    t, s : (n,) arrays; p0 : (n, 2) on-level starting points.
    step : marching step (scalar).
    stop_rect : Rect; curves terminate upon exiting (keeps evaluations inside
        the phase domain).
    support_stop : optional radius; curves additionally terminate once
        outside it (used by the operator plan where the integrand vanishes).
    emit : optional callback(points, curve_idx, weights) streamed per step
        with trapezoid arc weights; used by the plan builder.
    collect : if True, return per-curve point lists (scalar-op path).

    Returns (status, points_per_curve | None, closed_mask).
    status: 0 ok, 1 stalled.
    """
    n = len(s)
    tol = curve_tolerance(pf)
    if max_steps is None:
        max_steps = int(stop_rect.diameter / step * 1.6) + 64

    collected = [[p0[i].copy()] for i in range(n)] if collect else None
    closed = np.zeros(n, dtype=bool)
    stalled = np.zeros(n, dtype=bool)

    def unit_tangent(tt, x):
        g = pf._grad_x_raw(tt, x)
        norm = np.maximum(np.hypot(g[..., 0], g[..., 1]), 1e-300)
        return rot90(g) / norm[..., None]

    for direction in (+1.0, -1.0):
        p = p0.copy()
        alive = np.ones(n, dtype=bool)
        # weights streaming state: previous point and previous segment length
        prev_pt = p0.copy()
        prev_len = np.zeros(n)
        idx_all = np.arange(n)
        for k in range(max_steps):
            if not alive.any():
                break
            ia = idx_all[alive]
            ta = t[ia]
            sa = s[ia]
            pa = p[ia]
            tau = unit_tangent(ta, pa)
            mid = pa + (0.5 * step * direction) * tau
            nxt = pa + (step * direction) * unit_tangent(ta, mid)
            # corrector: pull back onto the level set
            ok = np.zeros(len(ia), dtype=bool)
            for _ in range(corrector_iters):
                r = pf._eval_raw(ta, nxt) - sa
                ok = np.abs(r) < tol
                if ok.all():
                    break
                g = pf._grad_x_raw(ta, nxt)
                g2 = np.maximum(np.sum(g * g, axis=-1), 1e-300)
                nxt = nxt - (r / g2)[..., None] * g
            bad = ~ok
            inside = stop_rect.contains(nxt) & pf.branch_mask(ta, nxt)
            if support_stop is not None:
                inside &= np.hypot(nxt[..., 0], nxt[..., 1]) <= support_stop
            just_closed = np.zeros(len(ia), dtype=bool)
            if k >= 5:
                just_closed = np.hypot(*(nxt - p0[ia]).T) < 0.5 * step
            keep = inside & ~bad & ~just_closed
            stalled[ia[bad]] = True
            closed[ia[just_closed]] = True

            kept_idx = ia[keep]
            seg = np.linalg.norm(nxt[keep] - pa[keep], axis=-1)
            if emit is not None and len(kept_idx):
                # trapezoid: each interior vertex carries half of both
                # adjacent segments; emit the previous vertex once its
                # following segment is known
                w_prev = 0.5 * (prev_len[kept_idx] + seg)
                emit(prev_pt[kept_idx], kept_idx, w_prev, t[kept_idx])
            if collect:
                for j, gi in enumerate(kept_idx):
                    collected[gi].append(nxt[keep][j].copy())
            # close out curves that terminated this step: flush their last point
            ended_idx = ia[~keep]
            if emit is not None and len(ended_idx):
                emit(prev_pt[ended_idx], ended_idx, 0.5 * prev_len[ended_idx], t[ended_idx])
            p[kept_idx] = nxt[keep]
            prev_pt[kept_idx] = nxt[keep]
            prev_len[kept_idx] = seg
            alive[ia[~keep]] = False
        else:
            # cap reached: flush and flag whatever is still alive
            rest = idx_all[alive]
            if emit is not None and len(rest):
                emit(prev_pt[rest], rest, 0.5 * prev_len[rest], t[rest])
            stalled[rest] = True
        if collect and direction == +1.0:
            for i in range(n):
                collected[i].reverse()
    status = 1 if stalled.any() else 0
    return status, collected, closed, stalled


def trace_level_curve(pf, s, t, seed, step, max_steps=None):
    """Trace the connected component of H(s, t) through ``seed``.

    The seed is first Newton-projected onto the level set along grad phi;
    the march then follows the rotated gradient with an RK2 predictor and a
    Newton corrector, terminating at the domain boundary or on closure
    (return to within step/2 of the start).

    Raises SeedProjectionError / StallError per the tracing contract.
    """
    seed = np.asarray(seed, dtype=float)
    tol = curve_tolerance(pf)
    p0, ok = project_to_level(pf, np.array([t]), np.array([s]), seed[None, :], tol)
    if not ok[0]:
        raise SeedProjectionError(f"seed projection failed at (s={s}, t={t})")
    if not pf.domain.contains(p0[0]):
        raise SeedProjectionError(
            f"seed projected outside the domain at (s={s}, t={t}): no component to trace"
        )
    stop_rect = pf.domain.shrunk(1.5 * step)
    status, collected, closed, stalled = _trace_batch(
        pf, np.array([t], dtype=float), np.array([s], dtype=float), p0, step,
        stop_rect=stop_rect, collect=True, max_steps=max_steps,
    )
    if stalled[0]:
        raise StallError(f"corrector diverged while tracing (s={s}, t={t})")
    pts = np.array(collected[0])
    # honor the vertex-spacing invariant: drop a terminal runt segment
    if len(pts) >= 2 and np.linalg.norm(pts[-1] - pts[-2]) < 0.25 * step:
        pts = pts[:-1]
    if len(pts) >= 2 and np.linalg.norm(pts[1] - pts[0]) < 0.25 * step:
        pts = pts[1:]
    return LevelCurve(s=float(s), t=float(t), points=pts, closed=bool(closed[0]))
