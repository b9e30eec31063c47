"""Oriented 3D boxes and RoI-grid generation, single level and pyramid.

Grid points are laid out on a regular lattice inside the (optionally
enlarged) box in its canonical axis-aligned frame, then rotated about the
box center by the heading angle.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(yaw: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((yaw + math.pi) % TWO_PI - math.pi)


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Box3D:
    """Oriented box: bottom-left corner of the canonical frame, extents, yaw.

    The canonical frame is the axis-aligned box [corner, corner + extents];
    yaw rotates it about its own center around the vertical axis.
    """

    corner: np.ndarray
    extents: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.corner = np.asarray(self.corner, dtype=np.float64).reshape(3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if not np.all(self.extents > 0):
            raise ValueError(f"box extents must be positive, got {self.extents}")
        self.yaw = wrap_angle(float(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return self.corner + 0.5 * self.extents

    @classmethod
    def from_center(cls, center, extents, yaw: float = 0.0) -> "Box3D":
        center = np.asarray(center, dtype=np.float64)
        extents = np.asarray(extents, dtype=np.float64)
        return cls(center - 0.5 * extents, extents, yaw)

    def to_dict(self) -> dict:
        return {"corner": self.corner.tolist(),
                "extents": self.extents.tolist(),
                "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["corner"], d["extents"], d["yaw"])

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the oriented box (closed faces)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        local = (pts - self.center) @ rot_z(self.yaw)  # inverse rotation
        half = 0.5 * self.extents
        return np.all(np.abs(local) <= half + 1e-12, axis=1)


@dataclass(frozen=True)
class GridSpec:
    """Number of grid points along width, length and height."""

    sizes: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if any(s < 1 for s in self.sizes):
            raise ValueError(f"grid sizes must be >= 1, got {self.sizes}")

    @property
    def count(self) -> int:
        a, b, c = self.sizes
        return a * b * c


@dataclass
class PyramidLevelConfig:
    """One pyramid level: grid, enlarging ratios, neighbor cap, base radius."""

    grid: GridSpec
    ratios: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_neighbors: int = 16
    r_pre: float = 1.6
    anchor_mode: str = "center"

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if any(r < 1.0 for r in self.ratios):
            raise ValueError(f"enlarging ratios must be >= 1, got {self.ratios}")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")
        if self.r_pre <= 0:
            raise ValueError("r_pre must be positive")
        if self.anchor_mode not in ("corner", "center"):
            raise ValueError(f"unknown anchor_mode {self.anchor_mode!r}")


@dataclass
class PyramidConfig:
    """Ordered pyramid levels, bottom (ratio-1) level first."""

    levels: list[PyramidLevelConfig] = field(default_factory=list)

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a pyramid needs at least one level")
        if self.levels[0].ratios != (1.0, 1.0, 1.0):
            raise ValueError("bottom pyramid level must have ratios (1,1,1)")
        for lo, hi in zip(self.levels, self.levels[1:]):
            if hi.ratios[0] < lo.ratios[0] or hi.ratios[1] < lo.ratios[1]:
                raise ValueError("width/length ratios must not decrease with level")

    def __len__(self) -> int:
        return len(self.levels)

    def to_json(self) -> str:
        doc = {
            "anchor_mode": self.levels[0].anchor_mode,
            "levels": [
                {
                    "grid": list(lv.grid.sizes),
                    "ratios": list(lv.ratios),
                    "max_neighbors": lv.max_neighbors,
                    "r_pre": lv.r_pre,
                }
                for lv in self.levels
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PyramidConfig":
        doc = json.loads(text)
        anchor = doc.get("anchor_mode", "center")
        levels = [
            PyramidLevelConfig(
                grid=GridSpec(tuple(lv["grid"])),
                ratios=tuple(lv["ratios"]),
                max_neighbors=int(lv["max_neighbors"]),
                r_pre=float(lv["r_pre"]),
                anchor_mode=anchor,
            )
            for lv in doc["levels"]
        ]
        return cls(levels)


def default_pyramid_config(anchor_mode: str = "center") -> PyramidConfig:
    """Five levels: grids 6^3,4^3,4^3,4^3,1 with growing width/length ratios."""
    grids = [(6, 6, 6), (4, 4, 4), (4, 4, 4), (4, 4, 4), (1, 1, 1)]
    ratios_wl = [1.0, 1.0, 1.5, 2.0, 4.0]
    caps = [8, 16, 16, 16, 32]
    r_pre = [0.8, 1.6, 2.4, 3.2, 6.4]
    levels = [
        PyramidLevelConfig(
            grid=GridSpec(g),
            ratios=(rho, rho, 1.0),
            max_neighbors=cap,
            r_pre=r,
            anchor_mode=anchor_mode,
        )
        for g, rho, cap, r in zip(grids, ratios_wl, caps, r_pre)
    ]
    return PyramidConfig(levels)


def _lattice(sizes: tuple[int, int, int]) -> np.ndarray:
    """Integer (i,j,k) triples in lexicographic order, shape [N,3]."""
    nw, nl, nh = sizes
    idx = np.stack(
        np.meshgrid(np.arange(nw), np.arange(nl), np.arange(nh), indexing="ij"),
        axis=-1,
    )
    return idx.reshape(-1, 3).astype(np.float64)


def _rotate_about(points: np.ndarray, pivot: np.ndarray, yaw: float) -> np.ndarray:
    if yaw == 0.0:
        return points
    return (points - pivot) @ rot_z(yaw).T + pivot


def grid_points(box: Box3D, grid: GridSpec) -> np.ndarray:
    """Standard RoI-grid: cell centers of an N_w x N_l x N_h lattice in the box."""
    step = box.extents / np.array(grid.sizes, dtype=np.float64)
    pts = step * (_lattice(grid.sizes) + 0.5) + box.corner
    return _rotate_about(pts, box.center, box.yaw)


def pyramid_grid_points(box: Box3D, level: PyramidLevelConfig) -> np.ndarray:
    """Grid of one pyramid level, the box enlarged by the level's ratios.

    anchor_mode "corner" keeps the original bottom-left corner so the grid
    grows away from it; "center" recenters the enlarged grid on the box.
    """
    rho = np.array(level.ratios, dtype=np.float64)
    step = rho * box.extents / np.array(level.grid.sizes, dtype=np.float64)
    if level.anchor_mode == "corner" or level.ratios == (1.0, 1.0, 1.0):
        # a unit-ratio centered grid coincides with the corner-anchored one;
        # using the corner keeps the degenerate case bitwise identical
        anchor = box.corner
    else:
        anchor = box.center - 0.5 * rho * box.extents
    pts = step * (_lattice(level.grid.sizes) + 0.5) + anchor
    return _rotate_about(pts, box.center, box.yaw)


def pyramid_point_count(cfg: PyramidConfig) -> int:
    return sum(lv.grid.count for lv in cfg.levels)
