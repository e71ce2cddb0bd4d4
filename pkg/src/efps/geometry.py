"""Closed-form calibration geometry.

Lens distortion, RGB-to-event image-plane transfer over the table plane,
and chrome-ball light-direction recovery.

Conventions
-----------
Camera frame is right-handed computer vision standard: +x right, +y down,
+z into the scene. Pixels are (x, y) = (column, row), sub-pixel positions
allowed. The table plane is z = 0 in the world frame used by the
projection matrices. Millimetres throughout for metric quantities.

The skew coefficient ``alpha`` is dimensionless (Bouguet convention): the
pixel mapping is ``x = fx * (x_n + alpha * y_n) + cx``, ``y = fy * y_n + cy``,
so normalization and re-projection are exact inverses when the distortion
coefficients are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Degenerate or out-of-domain calibration input."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    alpha: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not all(math.isfinite(v) for v in (self.fx, self.fy, self.cx, self.cy, self.alpha)):
            raise GeometryError("degenerate intrinsics")


@dataclass(frozen=True)
class DistortionCoeffs:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.k1, self.k2, self.k3, self.p1, self.p2)):
            raise GeometryError("distortion coefficients must be finite")


@dataclass(frozen=True)
class HighlightGeometry:
    """Distances along and around the camera-to-highlight ray (mm)."""

    d_s: float   # camera to ball centre
    d_1: float   # perpendicular offset of the centre from the ray
    d_2: float   # along-ray distance to the foot of that perpendicular
    d_3: float   # half-chord of the ray through the sphere
    d_h: float   # camera to the near ray-sphere intersection


@dataclass(frozen=True)
class ChromeBallObservation:
    """One chrome-ball sighting, camera frame."""

    center: np.ndarray          # ball centre s, (3,) mm
    radius: float               # r_s, mm
    highlight_px: np.ndarray    # saturated-spot centroid, (2,) px
    camera_origin: np.ndarray   # (3,) mm
    beta: float                 # half-angle subtended by the ball, rad
    gamma: float                # angle between highlight ray and centre ray, rad

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError("ball radius must be positive")
        if not (0 < self.beta <= math.pi / 2):
            raise GeometryError("beta outside (0, pi/2]")
        if not (0 <= self.gamma < math.pi / 2):
            raise GeometryError("gamma outside [0, pi/2)")


def _normalize_pixel(pixel, intr: CameraIntrinsics):
    x1, y1 = float(pixel[0]), float(pixel[1])
    y_n = (y1 - intr.cy) / intr.fy
    x_n = (x1 - intr.cx) / intr.fx - intr.alpha * y_n
    return x_n, y_n


def _distort_normalized(x_n, y_n, dist: DistortionCoeffs):
    r2 = x_n * x_n + y_n * y_n
    r_d = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2
    x_un = r_d * x_n + 2.0 * dist.p1 * x_n * y_n + dist.p2 * (r2 + 2.0 * x_n * x_n)
    y_un = r_d * y_n + 2.0 * dist.p2 * x_n * y_n + dist.p1 * (r2 + 2.0 * y_n * y_n)
    return x_un, y_un


def _project_normalized(x_un, y_un, intr: CameraIntrinsics):
    x_u = intr.fx * (x_un + intr.alpha * y_un) + intr.cx
    y_u = intr.fy * y_un + intr.cy
    return np.array([x_u, y_u], dtype=np.float64)


def undistort_point(pixel, intr: CameraIntrinsics, dist: DistortionCoeffs) -> np.ndarray:
    """Push one ideal pixel through the radial/tangential polynomial chain.

    This is the forward model (ideal -> observed): normalize, apply the
    radial factor and tangential terms, re-project. The polynomial is only
    exact in this direction; use :func:`invert_distortion` to rectify
    observed pixels.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    if not np.all(np.isfinite(pixel)):
        raise GeometryError("pixel must be finite")
    x_n, y_n = _normalize_pixel(pixel, intr)
    x_un, y_un = _distort_normalized(x_n, y_n, dist)
    out = _project_normalized(x_un, y_un, intr)
    if not np.all(np.isfinite(out)):
        raise GeometryError("degenerate intrinsics")
    return out


def invert_distortion(pixel, intr: CameraIntrinsics, dist: DistortionCoeffs,
                      max_iter: int = 50, tol: float = 1e-3) -> np.ndarray:
    """Find q with undistort_point(q) == pixel, by fixed-point iteration.

    Contracts for mild distortion (|k1| small); raises after ``max_iter``
    iterations if the pixel-space residual is still above ``tol``.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    tx, ty = _normalize_pixel(pixel, intr)
    x, y = tx, ty
    inner_tol = tol * 1e-3  # leave margin below the promised bound
    for _ in range(max_iter):
        x_un, y_un = _distort_normalized(x, y, dist)
        err = _project_normalized(x_un, y_un, intr) - pixel
        if float(np.hypot(err[0], err[1])) < inner_tol:
            break
        r2 = x * x + y * y
        r_d = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2
        dx = 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x)
        dy = 2.0 * dist.p2 * x * y + dist.p1 * (r2 + 2.0 * y * y)
        x = (tx - dx) / r_d
        y = (ty - dy) / r_d
        if not (math.isfinite(x) and math.isfinite(y)):
            raise GeometryError("distortion inversion diverged")
    x_un, y_un = _distort_normalized(x, y, dist)
    err = _project_normalized(x_un, y_un, intr) - pixel
    if float(np.hypot(err[0], err[1])) > tol:
        raise GeometryError("distortion inversion diverged")
    return _project_normalized(x, y, intr)


def transfer_rgb_to_event(pixel_rgb, p_rgb: np.ndarray, p_e: np.ndarray) -> np.ndarray:
    """Map an RGB-camera pixel to the event-camera image plane via z = 0.

    Solves the 3x3 system for the table-plane point seen at ``pixel_rgb``,
    then projects that point with ``p_e`` and dehomogenizes.
    """
    p_rgb = np.asarray(p_rgb, dtype=np.float64)
    p_e = np.asarray(p_e, dtype=np.float64)
    if p_rgb.shape != (3, 4) or p_e.shape != (3, 4):
        raise GeometryError("projection matrices must be 3x4")
    x, y = float(pixel_rgb[0]), float(pixel_rgb[1])
    m = np.column_stack([p_rgb[:, 0], p_rgb[:, 1], [-x, -y, -1.0]])
    try:
        sol = np.linalg.solve(m, -p_rgb[:, 3])
    except np.linalg.LinAlgError:
        raise GeometryError("pixel ray parallel to plane") from None
    if not np.all(np.isfinite(sol)):
        raise GeometryError("pixel ray parallel to plane")
    x_hat, y_hat, _psi = sol
    q = p_e @ np.array([x_hat, y_hat, 0.0, 1.0])
    phi = q[2]
    if abs(phi) < 1e-12:
        raise GeometryError("point at infinity")
    return q[:2] / phi


def highlight_depth(beta: float, gamma: float, r_s: float) -> HighlightGeometry:
    """Distance bookkeeping for the ray through the chrome-ball highlight.

    ``beta`` is the half-angle the ball subtends at the camera, ``gamma``
    the angle between the highlight ray and the ray to the ball centre.
    """
    if r_s <= 0:
        raise GeometryError("ball radius must be positive")
    if not (0 < beta <= math.pi / 2):
        raise GeometryError("degenerate bearing")
    if not (0 <= gamma < math.pi / 2):
        raise GeometryError("gamma outside [0, pi/2)")
    d_s = r_s / math.sin(beta)
    d_1 = d_s * math.sin(gamma)
    d_2 = d_s * math.cos(gamma)
    if d_1 > r_s:
        raise GeometryError("ray misses sphere")
    d_3 = math.sqrt(r_s * r_s - d_1 * d_1)
    d_h = d_2 - d_3
    return HighlightGeometry(d_s=d_s, d_1=d_1, d_2=d_2, d_3=d_3, d_h=d_h)


def light_direction(h, s, o_camera, d_h: float) -> np.ndarray:
    """Reflect the viewing ray about the ball normal at the highlight.

    ``h`` highlight point, ``s`` ball centre, both camera frame (mm);
    ``d_h`` the camera-to-highlight distance. The ball normal bisects the
    returned direction and the viewing ray.
    """
    h = np.asarray(h, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    o_camera = np.asarray(o_camera, dtype=np.float64)
    if d_h <= 0:
        raise GeometryError("d_h must be positive")
    hs = h - s
    norm_hs = float(np.linalg.norm(hs))
    if norm_hs == 0.0:
        raise GeometryError("highlight at ball center")
    r = (h - o_camera) / d_h
    n = hs / norm_hs
    return 2.0 * float(np.dot(n, r)) * n - r


def detect_highlight(frame: np.ndarray, ball_mask: np.ndarray,
                     threshold: float = 0.98) -> np.ndarray:
    """Centroid (x, y) of saturated pixels inside the ball mask.

    ``frame`` is grayscale; uint8 input is scaled so that ``threshold``
    is always a fraction of full scale. Saturation defaults to 0.98.
    """
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        frame = frame.astype(np.float64) / 255.0
    mask = np.asarray(ball_mask).astype(bool)
    if frame.shape != mask.shape:
        raise GeometryError("frame and mask shapes differ")
    sat = (frame >= threshold) & mask
    ys, xs = np.nonzero(sat)
    if xs.size == 0:
        raise GeometryError("no highlight found")
    return np.array([xs.mean(), ys.mean()], dtype=np.float64)


def back_project(pixel, intr: CameraIntrinsics) -> np.ndarray:
    """Unit ray through a pixel, camera frame."""
    x_n, y_n = _normalize_pixel(pixel, intr)
    ray = np.array([x_n, y_n, 1.0])
    return ray / np.linalg.norm(ray)


def project_point(point, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of a camera-frame point to (x, y) pixels."""
    point = np.asarray(point, dtype=np.float64)
    if point[2] <= 0:
        raise GeometryError("point behind camera")
    return _project_normalized(point[0] / point[2], point[1] / point[2], intr)


def ball_bearing_angles(highlight_px, intr: CameraIntrinsics, ball_center,
                        r_s: float, o_camera=(0.0, 0.0, 0.0)) -> tuple[float, float]:
    """(beta, gamma) for a ball sighting, from the highlight pixel.

    beta from the ball centre distance and radius, gamma between the
    back-projected highlight ray and the camera-to-centre direction.
    """
    ball_center = np.asarray(ball_center, dtype=np.float64)
    o_camera = np.asarray(o_camera, dtype=np.float64)
    to_center = ball_center - o_camera
    d_s = float(np.linalg.norm(to_center))
    if d_s <= r_s:
        raise GeometryError("camera inside ball")
    beta = math.asin(r_s / d_s)
    ray = back_project(highlight_px, intr)
    cos_g = float(np.clip(np.dot(ray, to_center / d_s), -1.0, 1.0))
    gamma = math.acos(cos_g)
    return beta, gamma


def recover_light_direction(highlight_px, intr: CameraIntrinsics, ball_center,
                            r_s: float, o_camera=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Full chrome-ball recovery: pixel -> ray -> depth -> reflected light."""
    ball_center = np.asarray(ball_center, dtype=np.float64)
    o_camera = np.asarray(o_camera, dtype=np.float64)
    beta, gamma = ball_bearing_angles(highlight_px, intr, ball_center, r_s, o_camera)
    geo = highlight_depth(beta, gamma, r_s)
    ray = back_project(highlight_px, intr)
    h = o_camera + geo.d_h * ray
    return light_direction(h, ball_center, o_camera, geo.d_h)
