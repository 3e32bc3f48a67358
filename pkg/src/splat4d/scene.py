"""Scene state for dynamic Gaussian clouds.

World space is right-handed with +y up. Cameras look down their forward
axis; depth is the camera-space z coordinate, positive in front of the
eye. A cloud stores isotropic Gaussians: positions, log-scales,
pre-squash opacities and degree-2 spherical-harmonic color coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._num import sigmoid

# Degree <= 2 real SH basis constants, coefficient order
# [Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22].
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)

SH_COEFFS = 9
DEFAULT_OPACITY = 0.1
COV2D_LOWPASS = 0.3  # px^2 floor added to the projected covariance diagonal


@dataclass
class GaussianCloud:
    """Isotropic Gaussian cloud with per-point SH color.

    positions (N,3), log_scales (N,), opacities_raw (N,) pre-squash,
    sh (N,3,9). Arrays are float32 in persistent state; float64 inputs
    are accepted for gradient checking.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    opacities_raw: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise ValueError("positions must have shape (N, 3)")
        if self.log_scales.shape != (n,):
            raise ValueError("log_scales must have shape (N,)")
        if self.opacities_raw.shape != (n,):
            raise ValueError("opacities_raw must have shape (N,)")
        if self.sh.shape != (n, 3, SH_COEFFS):
            raise ValueError("sh must have shape (N, 3, 9)")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def scales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scales, dtype=np.float64))

    def opacities(self) -> np.ndarray:
        """Squashed opacities in (0, 1)."""
        return sigmoid(self.opacities_raw)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.positions.copy(), self.log_scales.copy(),
                             self.opacities_raw.copy(), self.sh.copy())

    def with_positions(self, positions: np.ndarray) -> "GaussianCloud":
        return replace(self, positions=positions)


@dataclass
class Camera:
    """Pinhole camera. fov_y in degrees, square pixels, image center at
    ((width-1)/2, (height-1)/2). Rows of rotation() are right, up,
    forward in world coordinates."""

    eye: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float
    width: int
    height: int
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        if np.allclose(self.eye, self.look_at):
            raise ValueError("camera eye and look_at coincide")

    @property
    def focal(self) -> float:
        """Focal length in pixels (shared by both axes)."""
        return 0.5 * self.height / np.tan(0.5 * np.deg2rad(self.fov_y))

    def rotation(self) -> np.ndarray:
        fwd = self.look_at - self.eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            raise ValueError("camera up axis is parallel to the view axis")
        right = right / nr
        up = np.cross(right, fwd)
        return np.stack([right, up, fwd])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.eye) @ self.rotation().T


@dataclass
class Splat2D:
    """One projected Gaussian: pixel-space mean, 2x2 covariance, depth
    along the view axis, view-dependent RGB and base opacity."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 9 basis functions at unit directions (..., 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (SH_COEFFS,), dtype=np.float64)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2.0 * z * z - x * x - y * y)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (x * x - y * y)
    return out


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """d(basis_k)/d(dir_j) at unit directions, shape (..., 9, 3).

    Derivatives are of the polynomial forms above; callers chain through
    direction normalization themselves.
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.empty(d.shape[:-1] + (SH_COEFFS, 3), dtype=np.float64)
    g[..., 0, :] = 0.0
    g[..., 1, 0], g[..., 1, 1], g[..., 1, 2] = zero, -SH_C1 + zero, zero
    g[..., 2, 0], g[..., 2, 1], g[..., 2, 2] = zero, zero, SH_C1 + zero
    g[..., 3, 0], g[..., 3, 1], g[..., 3, 2] = -SH_C1 + zero, zero, zero
    g[..., 4, 0], g[..., 4, 1], g[..., 4, 2] = SH_C2[0] * y, SH_C2[0] * x, zero
    g[..., 5, 0], g[..., 5, 1], g[..., 5, 2] = zero, SH_C2[1] * z, SH_C2[1] * y
    g[..., 6, 0] = -2.0 * SH_C2[2] * x
    g[..., 6, 1] = -2.0 * SH_C2[2] * y
    g[..., 6, 2] = 4.0 * SH_C2[2] * z
    g[..., 7, 0], g[..., 7, 1], g[..., 7, 2] = SH_C2[3] * z, zero, SH_C2[3] * x
    g[..., 8, 0], g[..., 8, 1], g[..., 8, 2] = 2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, zero
    return g


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """View-dependent RGB: clamp(0.5 + sum_k c_k Y_k(dir), 0, 1).

    sh is (..., 3, 9), dirs (..., 3) unit length; returns (..., 3).
    """
    basis = sh_basis(dirs)
    raw = 0.5 + np.einsum("...ck,...k->...c", np.asarray(sh, dtype=np.float64), basis)
    return np.clip(raw, 0.0, 1.0)


def _knn_mean_distance(positions: np.ndarray, k: int) -> np.ndarray:
    from scipy.spatial import cKDTree

    tree = cKDTree(positions)
    # query includes the point itself at distance 0; drop that column
    dists, _ = tree.query(positions, k=k + 1)
    return dists[:, 1:].mean(axis=1)


def init_cloud(n: int, radius: float, seed: int) -> GaussianCloud:
    """Seeded cloud: positions uniform in the ball of given radius,
    uniform-random RGB stored in the DC coefficient, opacity 0.1
    pre-squash, log-scales from the mean distance to 3 nearest
    neighbors. Same seed gives bitwise-identical output."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    radii = radius * rng.uniform(0.0, 1.0, size=n) ** (1.0 / 3.0)
    positions = dirs * radii[:, None]

    rgb = rng.uniform(0.0, 1.0, size=(n, 3))
    sh = np.zeros((n, 3, SH_COEFFS), dtype=np.float64)
    sh[:, :, 0] = (rgb - 0.5) / SH_C0

    if n > 1:
        mean_d = _knn_mean_distance(positions, min(3, n - 1))
        mean_d = np.maximum(mean_d, 1e-7)
    else:
        mean_d = np.full(1, radius)
    log_scales = np.log(mean_d)

    opacity_raw = float(np.log(DEFAULT_OPACITY / (1.0 - DEFAULT_OPACITY)))
    return GaussianCloud(
        positions=positions.astype(np.float32),
        log_scales=log_scales.astype(np.float32),
        opacities_raw=np.full(n, opacity_raw, dtype=np.float32),
        sh=sh.astype(np.float32),
    )


def project_points(camera: Camera, positions: np.ndarray):
    """Project world points; returns (mean2d, cam_xyz, valid mask).

    Points at or behind the near plane are flagged invalid; their
    projected coordinates are unspecified.
    """
    cam = camera.to_camera(positions)
    z = cam[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    f = camera.focal
    cx = 0.5 * (camera.width - 1)
    cy = 0.5 * (camera.height - 1)
    mean2d = np.stack([cx + f * cam[:, 0] / zs, cy - f * cam[:, 1] / zs], axis=1)
    return mean2d, cam, valid


NEAR_PLANE = 0.01


def project_cloud(camera: Camera, cloud: GaussianCloud):
    """Vectorized projection of every Gaussian.

    Returns dict with mean2d (N,2), cov2d packed (N,3) as (c00,c01,c11),
    depth (N,), cam coordinates (N,3) and valid mask. The projected
    covariance is sigma^2 J J^T from the local affine pinhole
    approximation plus the low-pass diagonal floor.
    """
    mean2d, cam, valid = project_points(camera, cloud.positions)
    z = np.where(valid, cam[:, 2], 1.0)
    f = camera.focal
    a = f / z
    tx = cam[:, 0] / z
    ty = cam[:, 1] / z
    s2 = np.exp(2.0 * np.asarray(cloud.log_scales, dtype=np.float64))
    base = s2 * a * a
    cov = np.stack([
        base * (1.0 + tx * tx) + COV2D_LOWPASS,
        -base * tx * ty,
        base * (1.0 + ty * ty) + COV2D_LOWPASS,
    ], axis=1)
    return {"mean2d": mean2d, "cov2d": cov, "depth": cam[:, 2].copy(),
            "cam": cam, "valid": valid}


def project_gaussian(camera: Camera, position: np.ndarray, scale: float,
                     color: Optional[np.ndarray] = None,
                     alpha: float = 1.0) -> Optional[Splat2D]:
    """Project a single Gaussian; None when culled by the near plane."""
    cloud_like = np.asarray(position, dtype=np.float64)[None, :]
    mean2d, cam, valid = project_points(camera, cloud_like)
    if not valid[0]:
        return None
    z = cam[0, 2]
    f = camera.focal
    a = f / z
    tx, ty = cam[0, 0] / z, cam[0, 1] / z
    base = scale * scale * a * a
    cov = np.array([
        [base * (1.0 + tx * tx) + COV2D_LOWPASS, -base * tx * ty],
        [-base * tx * ty, base * (1.0 + ty * ty) + COV2D_LOWPASS],
    ])
    col = np.zeros(3) if color is None else np.asarray(color, dtype=np.float64)
    return Splat2D(mean2d=mean2d[0], cov2d=cov, depth=float(z), color=col,
                   alpha=float(alpha))


# ---------------------------------------------------------------------------
# Scene composition


@dataclass
class Pose:
    """Rigid pose plus uniform scale: p -> scale * R p + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_euler(cls, yaw: float, pitch: float, roll: float,
                   translation=(0.0, 0.0, 0.0), scale: float = 1.0) -> "Pose":
        from scipy.spatial.transform import Rotation

        rot = Rotation.from_euler("yxz", [yaw, pitch, roll], degrees=True)
        return cls(rot.as_matrix(), np.asarray(translation, dtype=np.float64),
                   float(scale))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be a 3x3 matrix")
        if self.scale <= 0:
            raise ValueError("pose scale must be positive")


@dataclass
class SceneAsset:
    """One asset in a composition: a cloud, an optional deformation
    field driving it, a pose and a local time offset."""

    cloud: GaussianCloud
    field: object = None
    pose: Pose = None
    time_offset: float = 0.0

    def __post_init__(self):
        if self.pose is None:
            self.pose = Pose.identity()


_SH1_IDX = slice(1, 4)
_SH2_IDX = slice(4, 9)

# Generic unit directions used to solve for per-degree rotation blocks.
_SH_SOLVE_DIRS = np.array([
    [1.0, 2.0, 3.0], [-2.0, 1.0, 1.0], [3.0, -1.0, 2.0],
    [1.0, 1.0, -1.0], [2.0, 3.0, -1.0],
])
_SH_SOLVE_DIRS = _SH_SOLVE_DIRS / np.linalg.norm(_SH_SOLVE_DIRS, axis=1, keepdims=True)


def sh_rotation_matrix(rotation: np.ndarray) -> np.ndarray:
    """9x9 block-diagonal matrix M with coeffs' = coeffs @ M, so that the
    rotated cloud's color field satisfies f'(d) = f(R^T d).

    Blocks are recovered by evaluating the basis at fixed generic
    directions and solving the change-of-basis system per degree.
    """
    rot = np.asarray(rotation, dtype=np.float64)
    out = np.zeros((SH_COEFFS, SH_COEFFS))
    out[0, 0] = 1.0
    for idx, ndirs in ((_SH1_IDX, 3), (_SH2_IDX, 5)):
        dirs = _SH_SOLVE_DIRS[:ndirs]
        a = sh_basis(dirs)[:, idx].T           # (block, dirs)
        b = sh_basis(dirs @ rot)[:, idx].T     # Y_k(R^T d_i)
        out[idx, idx] = b @ np.linalg.inv(a)
    return out


def _apply_pose(cloud: GaussianCloud, pose: Pose) -> GaussianCloud:
    pos = np.asarray(cloud.positions, dtype=np.float64)
    new_pos = pose.scale * (pos @ pose.rotation.T) + pose.translation
    new_ls = np.asarray(cloud.log_scales, dtype=np.float64) + np.log(pose.scale)
    m = sh_rotation_matrix(pose.rotation)
    new_sh = np.asarray(cloud.sh, dtype=np.float64) @ m
    return GaussianCloud(new_pos, new_ls, np.asarray(cloud.opacities_raw, np.float64).copy(),
                         new_sh)


def compose_scene(assets: Sequence[SceneAsset], tau: float):
    """Merge posed assets at shared time tau into one renderable cloud.

    Each asset is deformed at its own clamped local time, then posed.
    Returns (cloud, provenance) where provenance[i] is the index of the
    asset that contributed Gaussian i.
    """
    if not assets:
        raise ValueError("compose_scene needs at least one asset")
    parts = []
    provenance = []
    for ai, asset in enumerate(assets):
        cloud = asset.cloud
        if asset.field is not None:
            from . import deform

            local_t = min(max(tau - asset.time_offset, 0.0), 1.0)
            disp = deform.field_forward(asset.field,
                                        np.asarray(cloud.positions, np.float64),
                                        local_t)[0]
            cloud = cloud.with_positions(np.asarray(cloud.positions, np.float64) + disp)
        parts.append(_apply_pose(cloud, asset.pose))
        provenance.append(np.full(cloud.n, ai, dtype=np.int32))
    merged = GaussianCloud(
        positions=np.concatenate([p.positions for p in parts]),
        log_scales=np.concatenate([p.log_scales for p in parts]),
        opacities_raw=np.concatenate([p.opacities_raw for p in parts]),
        sh=np.concatenate([p.sh for p in parts]),
    )
    return merged, np.concatenate(provenance)
