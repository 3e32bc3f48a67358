import numpy as np
import pytest

from splat4d import scene as sc


def random_cloud(rng: np.random.Generator, n: int, spread: float = 0.3,
                 dtype=np.float64) -> sc.GaussianCloud:
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    positions = dirs * (spread * rng.uniform(0.2, 1.0, n)[:, None])
    log_scales = np.log(rng.uniform(0.02, 0.09, n))
    opacities_raw = rng.uniform(-2.0, 1.5, n)
    sh = np.zeros((n, 3, sc.SH_COEFFS))
    sh[:, :, 0] = rng.normal(0.0, 0.7, (n, 3))
    sh[:, :, 1:] = rng.normal(0.0, 0.12, (n, 3, sc.SH_COEFFS - 1))
    return sc.GaussianCloud(positions.astype(dtype), log_scales.astype(dtype),
                            opacities_raw.astype(dtype), sh.astype(dtype))


def orbit_camera(rng: np.random.Generator, width: int = 32, height: int = 32,
                 distance: float = 2.2, background=None) -> sc.Camera:
    azim = rng.uniform(0.0, 2.0 * np.pi)
    elev = rng.uniform(-0.6, 0.6)
    eye = distance * np.array([
        np.cos(elev) * np.sin(azim), np.sin(elev), np.cos(elev) * np.cos(azim)])
    bg = rng.uniform(0.0, 1.0, 3) if background is None else np.asarray(background)
    return sc.Camera(eye=eye, look_at=np.zeros(3), up=np.array([0.0, 1.0, 0.0]),
                     fov_y=45.0, width=width, height=height, background=bg)


@pytest.fixture
def rng():
    return np.random.default_rng(20260822)
