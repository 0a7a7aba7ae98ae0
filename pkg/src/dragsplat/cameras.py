"""Camera poses, the 3D->2D projection module, and 2D mask rasterization.

Conventions: OpenCV-style pinhole — camera x right, y down, z forward;
u = fx*X/Z + cx, v = fy*Y/Z + cy with (u, v) in pixel units and pixel
centers on integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianCloud, covariances

NEAR_PLANE = 1e-4
COV2D_LOWPASS = 0.3  # px^2 added to the projected covariance diagonal
FOOTPRINT_SIGMA = 3.0


class ProjectionError(ValueError):
    def __init__(self, bad_indices):
        self.bad_indices = list(map(int, bad_indices))
        super().__init__(f"points {self.bad_indices} behind camera (depth <= {NEAR_PLANE})")


@dataclass
class CameraPose:
    world_to_camera: np.ndarray  # 4x4 rigid transform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        r = self.world_to_camera[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation block is not orthonormal (tolerance 1e-6)")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block has negative determinant (reflection)")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def to_json(self) -> dict:
        return {
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraPose":
        return cls(
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class PointPick:
    """Drag endpoints: starts snap to Gaussian centers, ends are free 3D points."""

    starts: np.ndarray  # (n, 3)
    ends: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.float64).reshape(-1, 3)
        self.ends = np.asarray(self.ends, dtype=np.float64).reshape(-1, 3)
        if len(self.starts) != len(self.ends) or len(self.starts) < 1:
            raise ValueError(
                f"need equally many starts and ends (>= 1), got {len(self.starts)} and {len(self.ends)}"
            )

    def __len__(self):
        return len(self.starts)

    def snapped_to(self, cloud: GaussianCloud, tol: float = 1e-6) -> "PointPick":
        """Snap each start to the nearest Gaussian center; error if none is close."""
        snapped = np.empty_like(self.starts)
        for i, s in enumerate(self.starts):
            j = cloud.centers_near(s, 1)[0]
            if np.linalg.norm(cloud.mu[j] - s) > max(tol, 1e-6):
                raise ValueError(f"start point {i} does not coincide with any Gaussian center")
            snapped[i] = cloud.mu[j]
        return PointPick(snapped, self.ends.copy())


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at eye looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    down = -np.asarray(up, dtype=np.float64)
    x = np.cross(down, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up: fall back to a fixed right vector
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    w = np.eye(4)
    w[:3, :3] = np.stack([x, y, z])
    w[:3, 3] = -w[:3, :3] @ eye
    return w


def camera_space(points: np.ndarray, cam: CameraPose) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ cam.rotation.T + cam.translation


def project(points, cam: CameraPose) -> np.ndarray:
    """Project 3D world points to (u, v) pixels; order preserved."""
    t = camera_space(points, cam)
    behind = np.nonzero(t[:, 2] <= NEAR_PLANE)[0]
    if len(behind):
        raise ProjectionError(behind)
    u = cam.fx * t[:, 0] / t[:, 2] + cam.cx
    v = cam.fy * t[:, 1] / t[:, 2] + cam.cy
    return np.stack([u, v], axis=1)


def default_rig(
    center,
    extent: float,
    width: int = 64,
    height: int = 64,
    n: int = 4,
    elevation_deg: float = 15.0,
    seed=None,
    focal_scale: float = 1.1,
) -> list[CameraPose]:
    """Ring of n cameras around the scene.

    Azimuths are 0/90/180/270 degrees by default; pass a seed for the random
    mode. The radius is fit so a bounding sphere of the given extent stays
    well inside the frame.
    """
    center = np.asarray(center, dtype=np.float64)
    fx = fy = focal_scale * min(width, height)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    extent = max(float(extent), 1e-3)
    radius = max(fx * extent / (0.35 * min(width, height)), 1.5 * extent)
    if seed is None:
        azimuths = np.arange(n) * (2.0 * np.pi / n)
    else:
        azimuths = np.sort(np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, size=n))
    el = np.deg2rad(elevation_deg)
    cams = []
    for az in azimuths:
        eye = center + radius * np.array(
            [np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)]
        )
        cams.append(
            CameraPose(look_at(eye, center), fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
        )
    return cams


def cloud_extent(cloud: GaussianCloud) -> tuple[np.ndarray, float]:
    if cloud.count == 0:
        return np.zeros(3), 1.0
    center = cloud.mu.mean(axis=0)
    extent = float(np.linalg.norm(cloud.mu - center, axis=1).max() + cloud.scale.max() * 3.0)
    return center, extent


@dataclass
class SplatPrimitives:
    """Depth-culled screen-space footprints of a cloud's Gaussians."""

    indices: np.ndarray  # (M,) source Gaussian index per primitive
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2), low-pass already added
    depth: np.ndarray  # (M,)
    cam_xyz: np.ndarray  # (M, 3) camera-space centers


def project_gaussians(
    mu: np.ndarray, scale: np.ndarray, rot: np.ndarray, cam: CameraPose
) -> SplatPrimitives:
    """EWA-style projection of 3D Gaussians to 2D screen footprints.

    Behind-camera Gaussians are culled, not an error. cov2d gets the
    low-pass diagonal term so footprints never collapse below a pixel.
    """
    t = camera_space(mu, cam)
    keep = np.nonzero(t[:, 2] > NEAR_PLANE)[0]
    t = t[keep]
    tz = t[:, 2]
    u = cam.fx * t[:, 0] / tz + cam.cx
    v = cam.fy * t[:, 1] / tz + cam.cy
    m = len(keep)
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * t[:, 0] / tz**2
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * t[:, 1] / tz**2
    cov3 = covariances(scale[keep], rot[keep])
    jw = jac @ cam.rotation[None, :, :]
    cov2 = jw @ cov3 @ np.swapaxes(jw, 1, 2)
    cov2[:, 0, 0] += COV2D_LOWPASS
    cov2[:, 1, 1] += COV2D_LOWPASS
    return SplatPrimitives(
        indices=keep,
        mean2d=np.stack([u, v], axis=1),
        cov2d=cov2,
        depth=tz.copy(),
        cam_xyz=t,
    )


def footprint_radii(cov2d: np.ndarray, nsigma: float = FOOTPRINT_SIGMA) -> np.ndarray:
    """Per-primitive pixel radius covering nsigma of the 2D Gaussian."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_max = mid + disc
    return nsigma * np.sqrt(np.maximum(lam_max, 0.0))


def rasterize_mask(cloud: GaussianCloud, cam: CameraPose) -> np.ndarray:
    """Binary (H, W) image: 1 where any masked Gaussian's 3-sigma footprint lands.

    An empty mask yields an all-zero image (a signal, not a failure).
    """
    out = np.zeros((cam.height, cam.width), dtype=np.uint8)
    if cloud.mask is None or len(cloud.mask) == 0:
        return out
    sel = np.asarray(cloud.mask, dtype=np.int64)
    prim = project_gaussians(cloud.mu[sel], cloud.scale[sel], cloud.rot[sel], cam)
    radii = footprint_radii(prim.cov2d)
    nsig2 = FOOTPRINT_SIGMA**2
    for k in range(len(prim.indices)):
        ux, vy = prim.mean2d[k]
        r = radii[k]
        x0 = max(int(np.floor(ux - r)), 0)
        x1 = min(int(np.ceil(ux + r)), cam.width - 1)
        y0 = max(int(np.floor(vy - r)), 0)
        y1 = min(int(np.ceil(vy + r)), cam.height - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) - ux
        ys = np.arange(y0, y1 + 1) - vy
        gx, gy = np.meshgrid(xs, ys)
        cov = prim.cov2d[k]
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[0, 1], cov[0, 0]]]) / det
        maha = inv[0, 0] * gx * gx + 2.0 * inv[0, 1] * gx * gy + inv[1, 1] * gy * gy
        region = out[y0 : y1 + 1, x0 : x1 + 1]
        region[maha <= nsig2] = 1
    return out
