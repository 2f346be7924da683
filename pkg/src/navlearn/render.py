"""Column raycaster producing the robot's RGB camera image."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .world import EnvironmentMap


@dataclass(frozen=True)
class RenderConfig:
    width: int = 64
    height: int = 48
    fov: float = math.pi / 2
    height_scale: float = 40.0  # px * m
    shade_k: float = 0.15  # per m
    ceiling: tuple = (60, 60, 70)
    floor: tuple = (90, 90, 90)


class DepthColumns(NamedTuple):
    """Per-column hits; ``distance`` is fisheye-corrected and NaN on a miss."""

    distance: np.ndarray
    color: np.ndarray
    hit: np.ndarray

    def __len__(self):
        return len(self.distance)


def column_offsets(fov: float, n_columns: int) -> np.ndarray:
    """Ray angle relative to the heading for each column, left to right."""
    i = np.arange(n_columns, dtype=np.float64)
    offsets = fov * (0.5 - (i + 0.5) / n_columns)
    # exact antisymmetry, so mirrored scenes render as bit-exact mirror images
    half = n_columns // 2
    offsets[n_columns - half:] = -offsets[:half][::-1]
    if n_columns % 2:
        offsets[half] = 0.0
    return offsets


def raycast(env_map: EnvironmentMap, pose, fov: float = math.pi / 2, n_columns: int = 64) -> DepthColumns:
    if not 0.0 < fov < math.pi:
        raise ValueError(f"fov must lie in (0, pi), got {fov}")
    px, py, heading = pose
    offsets = column_offsets(fov, n_columns)
    angles = heading + offsets
    dx = np.cos(angles)[:, None]
    dy = np.sin(angles)[:, None]

    segs = env_map.segments
    distance = np.full(n_columns, np.nan)
    color = np.zeros((n_columns, 3))
    hit = np.zeros(n_columns, dtype=bool)
    if len(segs) == 0:
        return DepthColumns(distance, color, hit)

    ax, ay = segs[:, 0] - px, segs[:, 1] - py
    ex, ey = segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1]
    denom = dx * ey - dy * ex
    parallel = denom == 0
    safe = np.where(parallel, 1.0, denom)
    t = (ax * ey - ay * ex) / safe
    s = (ax * dy - ay * dx) / safe
    valid = ~parallel & (t > 0) & (s >= 0) & (s <= 1)
    t = np.where(valid, t, np.inf)
    nearest = np.argmin(t, axis=1)
    t_min = t[np.arange(n_columns), nearest]

    hit = t_min <= env_map.max_range
    distance[hit] = t_min[hit] * np.cos(offsets[hit])
    color[hit] = env_map.colors[nearest[hit]]
    return DepthColumns(distance, color, hit)


def shade(color, distance, k: float) -> np.ndarray:
    """Flat distance shading, rounded to bytes."""
    scaled = np.asarray(color, dtype=np.float64) / (1.0 + k * np.asarray(distance, dtype=np.float64))[..., None]
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def slice_heights(distance: np.ndarray, height_scale: float, height: int) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.clip(height_scale / distance, 0, height)
    px = np.where(np.isnan(px), 0, px)
    return np.floor(px + 0.5).astype(np.int64)


def render_rgb(env_map: EnvironmentMap, pose, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render the ``[height, width, 3]`` uint8 camera image at ``pose``."""
    cols = raycast(env_map, pose, cfg.fov, cfg.width)
    H, W = cfg.height, cfg.width
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[: H // 2] = cfg.ceiling
    img[H // 2:] = cfg.floor

    heights = slice_heights(cols.distance, cfg.height_scale, H)
    tops = (H - heights) // 2
    rows = np.arange(H)[:, None]
    wall = cols.hit[None, :] & (rows >= tops[None, :]) & (rows < (tops + heights)[None, :])
    if wall.any():
        shaded = shade(cols.color, np.where(cols.hit, cols.distance, 0.0), cfg.shade_k)
        img[wall] = np.broadcast_to(shaded[None, :, :], (H, W, 3))[wall]
    return img


def save_png(image: np.ndarray, path, scale: int = 8) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.image as mpimg

    big = np.repeat(np.repeat(image, scale, axis=0), scale, axis=1)
    mpimg.imsave(path, big, format="png", metadata={"Software": None})


def dump_raw(image: np.ndarray, path) -> None:
    """Write ``width, height`` as two little-endian uint32 followed by the pixel bytes."""
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated observation header")
    w, h = struct.unpack("<II", blob[:8])
    if len(blob) - 8 != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(blob) - 8}")
    return np.frombuffer(blob[8:], dtype=np.uint8).reshape(h, w, 3).copy()
