"""Trajectory rasterization, exact offroad counting and the smooth penalty field."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .scenario import MapGrid, write_pgm


class RasterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrajectoryRaster:
    grid: np.ndarray
    resolution: float
    origin: tuple[float, float]
    out_of_bounds: int = 0

    def dump_pgm(self, path) -> None:
        write_pgm(path, self.grid, self.resolution, self.origin)


def pixel_index(points, grid: MapGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(row, col, inside) for each point using the floor rule.

    A point on a pixel boundary belongs to the pixel whose lower edge it
    touches, i.e. the higher index.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    cols = np.floor((pts[:, 0] - grid.origin[0]) / grid.resolution).astype(int)
    rows = np.floor((pts[:, 1] - grid.origin[1]) / grid.resolution).astype(int)
    inside = (cols >= 0) & (cols < grid.width) & (rows >= 0) & (rows < grid.height)
    return rows, cols, inside


def rasterize(trajectory, grid: MapGrid) -> TrajectoryRaster:
    """Binary image of the trajectory points (no interpolation between them).

    Points off the grid are tallied in ``out_of_bounds`` and drawn on the
    nearest border pixel.
    """
    rows, cols, inside = pixel_index(trajectory, grid)
    image = np.zeros((grid.height, grid.width), np.uint8)
    image[np.clip(rows, 0, grid.height - 1), np.clip(cols, 0, grid.width - 1)] = 1
    return TrajectoryRaster(image, grid.resolution, grid.origin, int((~inside).sum()))


def offroad_count(traj_raster: TrajectoryRaster, grid: MapGrid) -> int:
    """Sum over pixels of max(0, trajectory - drivable)."""
    if traj_raster.grid.shape != grid.driveable.shape:
        raise RasterError(f"raster {traj_raster.grid.shape} does not match map "
                          f"{grid.driveable.shape}")
    diff = traj_raster.grid.astype(np.int64) - grid.driveable.astype(np.int64)
    return int(np.maximum(diff, 0).sum())


@dataclass(frozen=True, eq=False)
class PenaltyField:
    """Distance in meters to the nearest drivable pixel, 0 on drivable pixels.

    Values live at pixel centres; :func:`sample_penalty` interpolates
    bilinearly between them.
    """
    values: np.ndarray
    resolution: float
    origin: tuple[float, float]

    def dump(self, stem) -> None:
        """Write ``<stem>.f32`` (little-endian float32, row-major) and ``<stem>.json``."""
        stem = Path(stem)
        stem.with_suffix(".f32").write_bytes(self.values.astype("<f4").tobytes())
        stem.with_suffix(".json").write_text(json.dumps({
            "height": self.values.shape[0], "width": self.values.shape[1],
            "resolution": self.resolution, "origin": list(self.origin),
            "dtype": "float32", "byte_order": "little", "layout": "row-major"}))

    @classmethod
    def load(cls, stem) -> "PenaltyField":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        values = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4")
        return cls(values.reshape(meta["height"], meta["width"]).astype(float),
                   float(meta["resolution"]), tuple(meta["origin"]))


def build_penalty_field(grid: MapGrid) -> PenaltyField:
    if grid.driveable.size == 0:
        raise RasterError("empty map")
    if not grid.driveable.any():
        raise RasterError("map has no drivable pixel; penalty field undefined")
    dist = ndimage.distance_transform_edt(grid.driveable == 0, sampling=grid.resolution)
    return PenaltyField(dist, grid.resolution, grid.origin)


def sample_penalty(values: torch.Tensor, points: torch.Tensor, resolution: float,
                   origin) -> torch.Tensor:
    """Bilinear lookup of a penalty grid at ``points`` (..., 2).

    ``values`` is (H, W) or (B, H, W) with ``points`` (B, ..., 2); ``origin``
    is a pair or a (B, 2) tensor. Coordinates are clamped to the band of
    pixel centres, so the gradient vanishes off the grid.
    """
    if isinstance(values, PenaltyField):
        values = torch.as_tensor(values.values)
    values = values.to(points.dtype)
    batched = values.ndim == 3
    origin = torch.as_tensor(origin, dtype=points.dtype)
    if batched:
        origin = origin.reshape(origin.shape[0], *([1] * (points.ndim - 2)), 2)
    height, width = values.shape[-2:]
    # continuous pixel-centre coordinates
    u = (points[..., 0] - origin[..., 0]) / resolution - 0.5
    v = (points[..., 1] - origin[..., 1]) / resolution - 0.5
    u = u.clamp(0, width - 1)
    v = v.clamp(0, height - 1)
    c0 = u.detach().floor().clamp(max=width - 2).long() if width > 1 else torch.zeros_like(u, dtype=torch.long)
    r0 = v.detach().floor().clamp(max=height - 2).long() if height > 1 else torch.zeros_like(v, dtype=torch.long)
    c1 = (c0 + 1).clamp(max=width - 1)
    r1 = (r0 + 1).clamp(max=height - 1)
    fu = u - c0
    fv = v - r0
    if batched:
        b = torch.arange(values.shape[0]).reshape(-1, *([1] * (points.ndim - 2)))
        b = b.expand_as(c0)

        def at(r, c):
            return values[b, r, c]
    else:
        def at(r, c):
            return values[r, c]
    top = at(r0, c0) * (1 - fu) + at(r0, c1) * fu
    bottom = at(r1, c0) * (1 - fu) + at(r1, c1) * fu
    return top * (1 - fv) + bottom * fv


def penalty_at(field: PenaltyField, point) -> torch.Tensor:
    """Convenience single-field lookup; ``point`` may require grad."""
    pts = torch.as_tensor(point, dtype=torch.float64)
    return sample_penalty(torch.as_tensor(field.values), pts, field.resolution, field.origin)
