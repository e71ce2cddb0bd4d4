"""Observation maps: per-pixel intensity grids indexed by light direction.

A map is an m x m array whose first axis follows the light's x component and
whose second follows y: a frame lit from direction l deposits the pixel's
intensity at (floor(m (l_x + 1) / 2), floor(m (l_y + 1) / 2)), clamped to the
grid.  Repeated directions keep the maximum intensity.  The normalized map
O_n rescales the summed RGB maps so their brightest cell is exactly 1.

Rotational augmentation spins every map about its center and the ground-truth
normal's xy components by the same angle.  Right angles permute cells
exactly; other angles re-scatter cell centers with nearest-cell assignment,
which preserves the sparse character of the maps, so no interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np


class ObsMapError(ValueError):
    """Raised for out-of-range intensities or degenerate maps."""


def obsmap_index(component: float, m: int) -> int:
    """Map a direction component in [-1, 1] to a grid index in [0, m-1]."""
    idx = int(math.floor(m * (float(component) + 1.0) / 2.0))
    return min(max(idx, 0), m - 1)


@dataclass(frozen=True)
class LightSample:
    """A calibrated light direction for one frame and its time window."""

    direction: np.ndarray  # unit 3-vector, z > 0
    frame_index: int
    window: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "direction", d)
        if d.shape != (3,) or abs(float(np.linalg.norm(d)) - 1.0) > 1e-6:
            raise ObsMapError("light not normalized")
        if d[2] <= 0:
            raise ObsMapError("light behind camera plane")


def project_intensity(l, i: float, m: int, out: np.ndarray) -> np.ndarray:
    """Deposit intensity i at the map cell addressed by light direction l.

    Mutates and returns `out`; an existing value at the cell survives if
    larger.
    """
    i = float(i)
    if not 0.0 <= i <= 1.0:
        raise ObsMapError("intensity out of range")
    l = np.asarray(l, dtype=np.float64)
    if abs(float(np.linalg.norm(l)) - 1.0) > 1e-6:
        raise ObsMapError("light not normalized")
    ix = obsmap_index(l[0], m)
    iy = obsmap_index(l[1], m)
    out[ix, iy] = max(out[ix, iy], i)
    return out


def build_rgb_obsmaps(
    frames: Sequence[np.ndarray],
    lights: Sequence[LightSample],
    pixel,
    m: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project one pixel's intensity across all frames into three channel maps.

    Frames are (H, W, 3); 8-bit input is rescaled to [0, 1] by /255.
    """
    if len(frames) != len(lights):
        raise ObsMapError("one light required per frame")
    maps = [np.zeros((m, m), dtype=np.float64) for _ in range(3)]
    x, y = int(pixel[0]), int(pixel[1])
    for frame, light in zip(frames, lights):
        rgb = np.asarray(frame)[y, x].astype(np.float64)
        if np.issubdtype(np.asarray(frame).dtype, np.integer):
            rgb = rgb / 255.0
        for c in range(3):
            project_intensity(light.direction, rgb[c], m, maps[c])
    return maps[0], maps[1], maps[2]


def normalize_obsmap(o_r: np.ndarray, o_g: np.ndarray, o_b: np.ndarray) -> np.ndarray:
    """Rescale the channel sum so its brightest cell equals exactly 1."""
    total = o_r + o_g + o_b
    peak = float(total.max(initial=0.0))
    if peak <= 0.0:
        raise ObsMapError("empty observation map")
    return total / peak


@dataclass(frozen=True)
class ObservationMapSet:
    """All per-pixel maps plus optional ground truth for one training sample.

    `o_e` is the single-channel event map, the two polarity channels averaged;
    `o_e2` keeps them separate for the event-branch network input.
    """

    o_r: np.ndarray
    o_g: np.ndarray
    o_b: np.ndarray
    o_n: np.ndarray
    o_e: np.ndarray
    o_e2: np.ndarray  # (m, m, 2)
    pixel: tuple[int, int] = (0, 0)
    normal: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.o_n.shape[0]


def _rot90_map(arr: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Exact cell permutation for a counterclockwise multiple of 90 degrees."""
    out = arr
    for _ in range(quarter_turns % 4):
        out = out[:, ::-1].T if out.ndim == 2 else out[:, ::-1].transpose(1, 0, 2)
    return np.ascontiguousarray(out)


def _rotate_map_nearest(arr: np.ndarray, angle: float) -> np.ndarray:
    """Re-scatter cell centers rotated by `angle`, resolving collisions by max."""
    m = arr.shape[0]
    out = np.zeros_like(arr)
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    ix, iy = np.nonzero(arr if arr.ndim == 2 else arr.any(axis=2))
    centers_x = 2.0 * (ix + 0.5) / m - 1.0
    centers_y = 2.0 * (iy + 0.5) / m - 1.0
    new_x = cos_a * centers_x - sin_a * centers_y
    new_y = sin_a * centers_x + cos_a * centers_y
    for k in range(ix.size):
        jx = obsmap_index(new_x[k], m)
        jy = obsmap_index(new_y[k], m)
        out[jx, jy] = np.maximum(out[jx, jy], arr[ix[k], iy[k]])
    return out


def rotate_map(arr: np.ndarray, angle: float) -> np.ndarray:
    """Rotate one map about its center; right angles permute cells exactly."""
    turns = angle / (math.pi / 2.0)
    nearest = round(turns)
    if abs(turns - nearest) < 1e-9:
        return _rot90_map(arr, int(nearest))
    return _rotate_map_nearest(arr, angle)


def rotate_normal(n: np.ndarray, angle: float) -> np.ndarray:
    """Rotate the xy components of a normal, leaving z untouched."""
    n = np.asarray(n, dtype=np.float64)
    turns = angle / (math.pi / 2.0)
    nearest = round(turns)
    if abs(turns - nearest) < 1e-9:
        out = n.copy()
        for _ in range(int(nearest) % 4):
            out = np.array([-out[1], out[0], out[2]])
        return out
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    return np.array(
        [cos_a * n[0] - sin_a * n[1], sin_a * n[0] + cos_a * n[1], n[2]]
    )


def rotate_sample(sample: ObservationMapSet, angle: float) -> ObservationMapSet:
    """Rotate every map in the set and the ground-truth normal by `angle`."""
    if angle == 0.0:
        return sample
    return replace(
        sample,
        o_r=rotate_map(sample.o_r, angle),
        o_g=rotate_map(sample.o_g, angle),
        o_b=rotate_map(sample.o_b, angle),
        o_n=rotate_map(sample.o_n, angle),
        o_e=rotate_map(sample.o_e, angle),
        o_e2=rotate_map(sample.o_e2, angle),
        normal=None if sample.normal is None else rotate_normal(sample.normal, angle),
    )


def augment_rotations(sample: ObservationMapSet, k: int) -> list[ObservationMapSet]:
    """Return the K rotations of a sample at angles 2*pi*j/K, j = 0..K-1."""
    if k < 1:
        raise ObsMapError("augmentation factor must be at least 1")
    return [rotate_sample(sample, 2.0 * math.pi * j / k) for j in range(k)]
