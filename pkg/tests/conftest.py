"""Shared fixtures: small random scenes and cameras sized for fast unit tests."""

import numpy as np
import pytest

from splatseg.scene import Camera, GaussianScene


def make_random_scene(seed: int, n: int = 40, d_instance: int = 4,
                      d_language: int = 8, spread: float = 0.8,
                      with_language: bool = False) -> GaussianScene:
    """A blob of anisotropic gaussians around the origin."""
    rng = np.random.default_rng(seed)
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    lang = None
    if with_language:
        lang = rng.standard_normal((n, d_language))
        lang /= np.linalg.norm(lang, axis=1, keepdims=True)
    return GaussianScene(
        positions=rng.uniform(-spread, spread, (n, 3)),
        scales=rng.uniform(0.02, 0.25, (n, 3)),
        rotations=quats,
        opacities=rng.uniform(0.2, 1.0, n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        instance_features=rng.standard_normal((n, d_instance)),
        d_instance=d_instance,
        d_language=d_language,
        language_features=lang,
    )


def make_camera(seed: int = 0, size: int = 32, distance: float = 3.0) -> Camera:
    """Orbit camera looking at the origin from a seeded random direction."""
    rng = np.random.default_rng(seed + 1000)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return Camera.look_at(distance * direction, (0.0, 0.0, 0.0),
                          size, size, fx=1.2 * size)


@pytest.fixture
def random_scene():
    return make_random_scene


@pytest.fixture
def camera():
    return make_camera
