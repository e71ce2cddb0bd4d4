"""Event-stream representations.

An event is (x, y, t, p): integer pixel coordinates in the sensor frame,
timestamp in seconds, polarity +1 or -1.  A stream over a time window of
length `period` is binned into a voxel grid of shape (height, width, bins, 2)
where channel 0 counts positive events and channel 1 negative ones, each
count divided by a spread factor lambda.  Passing the grid through tanh
yields the normalized form with entries in [0, 1).

Per-pixel event observation maps are built by merging each window's bins
(summing pre-tanh counts, then one tanh) and scattering the two polarity
values onto an m x m grid indexed by the window's light direction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .obsmap import obsmap_index

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<f8"), ("p", "<i1")])

DEFAULT_BINS = 5
DEFAULT_LAMBDA = 5.0


class EventError(ValueError):
    """Raised for malformed events or inconsistent grid operations."""


def as_event_array(events) -> np.ndarray:
    """Coerce a structured array or iterable of (x, y, t, p) rows to EVENT_DTYPE."""
    if isinstance(events, np.ndarray) and events.dtype.names == EVENT_DTYPE.names:
        return events.astype(EVENT_DTYPE, copy=False)
    rows = [(int(x), int(y), float(t), int(p)) for x, y, t, p in events]
    return np.array(rows, dtype=EVENT_DTYPE)


@dataclass(frozen=True)
class VoxelGrid:
    """Polarity-separated event grid; `normalized` marks post-tanh values."""

    values: np.ndarray  # (height, width, bins, 2)
    period: float
    lam: float
    normalized: bool = False

    @property
    def bins(self) -> int:
        return self.values.shape[2]

    @property
    def bin_width(self) -> float:
        return self.period / self.bins


def accumulate_voxel_grid(
    events,
    width: int,
    height: int,
    period: float,
    bins: int = DEFAULT_BINS,
    lam: float = DEFAULT_LAMBDA,
) -> VoxelGrid:
    """Bin an event stream into a pre-tanh voxel grid of counts / lam.

    Timestamps must lie in [0, period); the bin index is floor(t / bin_width),
    clamped so a timestamp rounding onto the upper edge stays in the last bin.
    """
    if lam <= 0:
        raise EventError("lambda must be positive")
    if bins < 1:
        raise EventError("bins must be at least 1")
    if period <= 0:
        raise EventError("period must be positive")
    counts = np.zeros((height, width, bins, 2), dtype=np.float64)
    ev = as_event_array(events)
    if ev.size:
        t = ev["t"]
        if np.any(t < 0) or np.any(t >= period):
            raise EventError("event outside period")
        x = ev["x"].astype(np.int64)
        y = ev["y"].astype(np.int64)
        if np.any(x >= width) or np.any(y >= height):
            raise EventError("event outside sensor bounds")
        p = ev["p"].astype(np.int64)
        if not np.all(np.abs(p) == 1):
            raise EventError("invalid polarity")
        delta = np.minimum((t * bins / period).astype(np.int64), bins - 1)
        np.add.at(counts, (y, x, delta, (p < 0).astype(np.int64)), 1.0)
    return VoxelGrid(values=counts / lam, period=float(period), lam=float(lam))


def normalize_voxel_grid(grid: VoxelGrid) -> VoxelGrid:
    """Apply tanh elementwise, mapping non-negative counts into [0, 1)."""
    if grid.normalized:
        raise EventError("grid already normalized")
    return replace(grid, values=np.tanh(grid.values), normalized=True)


def merge_bins(grid: VoxelGrid, pixel) -> np.ndarray:
    """Collapse a pre-tanh grid's time bins at one pixel to two polarity values.

    Counts are summed over bins first and tanh applied once, so the merged
    value stays in [0, 1) no matter how many bins contributed.
    """
    if grid.normalized:
        raise EventError("expected pre-tanh grid")
    x, y = int(pixel[0]), int(pixel[1])
    return np.tanh(grid.values[y, x].sum(axis=0))


def event_obsmap(
    grids: Sequence[VoxelGrid],
    pixel,
    light_windows: Sequence,
    m: int,
) -> np.ndarray:
    """Scatter per-window merged polarity values onto an (m, m, 2) map.

    `light_windows` holds one unit light direction per grid (either a plain
    3-vector or an object with a `direction` attribute).  Collisions at a map
    cell keep the maximum per channel, so window order never matters.
    """
    if len(grids) != len(light_windows):
        raise EventError("one light window required per grid")
    out = np.zeros((m, m, 2), dtype=np.float64)
    for grid, light in zip(grids, light_windows):
        direction = np.asarray(getattr(light, "direction", light), dtype=np.float64)
        if abs(float(np.linalg.norm(direction)) - 1.0) > 1e-6:
            raise EventError("light not normalized")
        merged = merge_bins(grid, pixel)
        ix = obsmap_index(direction[0], m)
        iy = obsmap_index(direction[1], m)
        out[ix, iy] = np.maximum(out[ix, iy], merged)
    return out


def collapse_polarities(event_map: np.ndarray) -> np.ndarray:
    """Average the two polarity channels of an (m, m, 2) map down to (m, m)."""
    return 0.5 * (event_map[..., 0] + event_map[..., 1])
