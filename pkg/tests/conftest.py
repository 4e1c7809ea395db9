import numpy as np
import pytest

from curvetomo import (
    BreathingMotion,
    RotationMotion,
    SinoSpec,
    UnitWeight,
    make_dynamic_phase,
    make_image_grid,
    make_static_phase,
)
from curvetomo.operators import LevelSetTransform


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0xC0FFEE)


@pytest.fixture(scope="session")
def static_pf():
    return make_static_phase()


@pytest.fixture(scope="session")
def sync_pf():
    """Scanner-synchronized rotation: phi(t, x) = x^1 for all t."""
    return make_dynamic_phase(RotationMotion(-1.0))


@pytest.fixture(scope="session")
def sync_pf_fd():
    """Same geometry forced onto the finite-difference derivative path."""
    return make_dynamic_phase(RotationMotion(-1.0), use_analytic=False)


@pytest.fixture(scope="session")
def breathing_pf():
    return make_dynamic_phase(BreathingMotion(0.05))


@pytest.fixture(scope="session")
def small_transform(static_pf):
    """Static 48^2 / 90-angle operator shared across fast tests."""
    img = make_image_grid(48)
    spec = SinoSpec(ns=53, nt=90)
    return LevelSetTransform(static_pf, UnitWeight(), img, spec)


def support_samples(rng, n, radius=0.95, t_range=(0.0, 2 * np.pi)):
    """Random (t, x) samples inside the disk of the given radius."""
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    a = rng.uniform(0.0, 2 * np.pi, n)
    x = np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)
    t = rng.uniform(t_range[0], t_range[1], n)
    return t, x
