"""
Grid transfer and compositing for the nested levels.

All functions act on the three trailing spatial axes, so they accept single
fields ``(x, y, z)``, time series ``(T, x, y, z)`` and channel stacks alike.

- ``window_box`` / ``extract_window``: level-1 window around a well on the
  level-0 grid, shifted inward at the domain boundary.
- ``block_average``: restriction to a coarser aligned grid.
- ``inject``: piecewise-constant transfer to a finer aligned grid.
- ``prolong_linear``: slope-limited linear transfer to a finer grid that
  preserves every parent cell average.
- ``CompositeField``: per-level predictions of one sample combined so that
  each cell carries the value of the finest level covering it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.errors import ContractError, ShapeError
from src.models import Box, NestedGeometry, Triple, WellSpec

logger = logging.getLogger(__name__)

# keeps the summed three-axis correction inside the neighbor range
_SLOPE_SCALE = 2.0 / 3.0


def window_box(geometry: NestedGeometry, well: WellSpec) -> Box:
    """
    Level-1 window of ``geometry.window`` level-0 cells centered on ``well``.

    Raises:
        ContractError: If the well lies outside the level-0 grid.
    """
    gx, gy, gz = geometry.global_grid
    x, y = well.location
    if not (0 <= x < gx and 0 <= y < gy):
        raise ContractError(f"well at {well.location} lies outside the level-0 grid {geometry.global_grid}")
    wx, wy = geometry.window
    lo_x = min(max(x - wx // 2, 0), gx - wx)
    lo_y = min(max(y - wy // 2, 0), gy - wy)
    if (lo_x, lo_y) != (x - wx // 2, y - wy // 2):
        logger.debug(f"Window for well at {well.location} clamped to origin ({lo_x}, {lo_y})")
    return Box(lo=(lo_x, lo_y, 0), hi=(lo_x + wx, lo_y + wy, gz))


def scale_box(box: Box, ratio: Triple) -> Box:
    """``box`` expressed in the cells of a grid refined by ``ratio``."""
    return Box(lo=tuple(l * r for l, r in zip(box.lo, ratio)), hi=tuple(h * r for h, r in zip(box.hi, ratio)))


def well_columns(geometry: NestedGeometry, window: Box, location: tuple[int, int],
                 depth: int = 4) -> list[tuple[int, int]]:
    """
    Lateral cell of a well's column on levels ``1..depth``, in each level's own indices.

    Inside a refined cell the column takes child ``(r - 1) // 2``, which keeps
    it inside the centered child boxes of an unclamped window. On a clamped
    window a deeper column may fall outside its grid.
    """
    r = geometry.refinement[0]
    column = tuple((location[a] - window.lo[a]) * r[a] + (r[a] - 1) // 2 for a in (0, 1))
    columns = [column]
    for level in range(2, depth + 1):
        r = geometry.refinement[level - 1]
        box = geometry.child_box(level)
        column = tuple((column[a] - box.lo[a]) * r[a] + (r[a] - 1) // 2 for a in (0, 1))
        columns.append(column)
    return columns  # type: ignore[return-value]


def crop_box(x: np.ndarray, box: Box) -> np.ndarray:
    return np.ascontiguousarray(x[(Ellipsis,) + box.slices()])


def extract_window(field0: np.ndarray, well: WellSpec, geometry: NestedGeometry) -> np.ndarray:
    """The level-0 field restricted to the level-1 window around ``well``."""
    if tuple(field0.shape[-3:]) != tuple(geometry.global_grid):
        raise ShapeError(f"level-0 field {field0.shape} does not end in grid {geometry.global_grid}")
    return crop_box(field0, window_box(geometry, well))


def _check_ratio(shape: tuple[int, ...], ratio: Triple, op: str) -> None:
    if len(shape) < 3:
        raise ShapeError(f"{op} needs 3 trailing spatial axes, got {shape}")
    if any(r < 1 for r in ratio):
        raise ContractError(f"{op}: refinement ratio {ratio} must be >= 1")


def block_average(x: np.ndarray, ratio: Triple) -> np.ndarray:
    """
    Restrict by averaging ``ratio`` blocks of cells.

    Raises:
        ContractError: If an extent is not a multiple of its ratio.
    """
    _check_ratio(x.shape, ratio, "block_average")
    lead = x.shape[:-3]
    nx, ny, nz = x.shape[-3:]
    rx, ry, rz = ratio
    if nx % rx or ny % ry or nz % rz:
        raise ContractError(f"grid {(nx, ny, nz)} is not an integer refinement by {ratio}")
    blocks = x.reshape(lead + (nx // rx, rx, ny // ry, ry, nz // rz, rz))
    n = len(lead)
    return blocks.mean(axis=(n + 1, n + 3, n + 5))


def inject(x: np.ndarray, ratio: Triple) -> np.ndarray:
    """Piecewise-constant transfer: every cell becomes a ``ratio`` block."""
    _check_ratio(x.shape, ratio, "inject")
    out = x
    for axis, r in zip((-3, -2, -1), ratio):
        out = np.repeat(out, r, axis=axis)
    return out


def _minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def _limited_slope(x: np.ndarray, axis: int) -> np.ndarray:
    if x.shape[axis] < 3:
        return np.zeros_like(x)
    d = np.diff(x, axis=axis)
    zero = np.zeros_like(np.take(x, [0], axis=axis))
    forward = np.concatenate([d, zero], axis=axis)
    backward = np.concatenate([zero, d], axis=axis)
    return _SLOPE_SCALE * _minmod(forward, backward)


def prolong_linear(x: np.ndarray, ratio: Triple) -> np.ndarray:
    """
    Slope-limited piecewise-linear transfer to a grid refined by ``ratio``.

    Slopes are minmod-limited between neighboring parent cells and vanish at
    the grid edges and at extrema, so child values stay inside the range of
    the parent neighborhood. Child offsets are symmetric within each parent
    cell, so block-averaging the result recovers ``x`` exactly.
    """
    _check_ratio(x.shape, ratio, "prolong_linear")
    out = inject(x, ratio)
    for axis, r in zip((-3, -2, -1), ratio):
        if r == 1:
            continue
        slope = inject(_limited_slope(x, axis), ratio)
        # offset of each child center from its parent center, in parent cells
        xi = (np.arange(r) + 0.5) / r - 0.5
        shape = [1] * 3
        shape[axis] = x.shape[axis] * r
        offsets = np.tile(xi, x.shape[axis]).reshape(shape)
        out = out + slope * offsets
    return out


def resample_nearest(x: np.ndarray, grid: Triple) -> np.ndarray:
    """Nearest-cell resampling of the trailing axes onto ``grid`` (identity when shapes match)."""
    src = x.shape[-3:]
    if tuple(src) == tuple(grid):
        return x.copy()
    index = [np.minimum(((np.arange(n) + 0.5) * s / n).astype(int), s - 1) for n, s in zip(grid, src)]
    return x[..., index[0][:, None, None], index[1][None, :, None], index[2][None, None, :]]


@dataclass
class WellLevels:
    """Local-level arrays of one well, index 0 holding level 1."""

    window: Box
    levels: list[np.ndarray] = field(default_factory=list)
    location: Optional[tuple[int, int]] = None


@dataclass
class CompositeField:
    """
    One field of one sample across all levels.

    ``level0`` is ``(T, *global_grid)``; each well carries its local-level
    arrays ``(T, *local_grid)``. After ``composite()`` every coarser array
    agrees with the block average of the finer level inside its box.
    """

    geometry: NestedGeometry
    level0: np.ndarray
    wells: list[WellLevels] = field(default_factory=list)

    def _check_disjoint(self) -> None:
        for i, a in enumerate(self.wells):
            for b in self.wells[i + 1:]:
                if a.window.intersects(b.window):
                    raise ContractError(f"well windows {a.window.lo} and {b.window.lo} overlap")

    @property
    def depth(self) -> int:
        return max((len(w.levels) for w in self.wells), default=0)

    def composite(self) -> "CompositeField":
        """
        Replace every covered region of a coarser level with the restriction
        of the next finer level, working from the finest level down.

        Raises:
            ContractError: If two wells' windows overlap.
        """
        self._check_disjoint()
        level0 = self.level0.copy()
        wells = []
        for well in self.wells:
            levels = [a.copy() for a in well.levels]
            for k in range(len(levels) - 1, 0, -1):
                box = self.geometry.child_box(k + 1)
                ratio = self.geometry.refinement[k]
                levels[k - 1][(Ellipsis,) + box.slices()] = block_average(levels[k], ratio)
            if levels:
                level0[(Ellipsis,) + well.window.slices()] = block_average(levels[0], self.geometry.refinement[0])
            wells.append(WellLevels(window=well.window, levels=levels, location=well.location))
        return CompositeField(geometry=self.geometry, level0=level0, wells=wells)

    def level_arrays(self, level: int) -> list[np.ndarray]:
        """Arrays of ``level`` (one per well for local levels)."""
        if level == 0:
            return [self.level0]
        return [w.levels[level - 1] for w in self.wells if len(w.levels) >= level]

    def flatten(self) -> np.ndarray:
        """
        Every cell of the composite domain once, at its finest covering level.

        Returns:
            ``(T, n_cells)`` with level-0 cells outside all windows first, then
            per well the cells of each level outside its child box.
        """
        n_t = self.level0.shape[0]
        covered = np.zeros(self.level0.shape[1:], dtype=bool)
        for w in self.wells:
            if w.levels:
                covered[w.window.slices()] = True
        parts = [self.level0[:, ~covered]]
        for w in self.wells:
            for k, arr in enumerate(w.levels):
                mask = np.ones(arr.shape[1:], dtype=bool)
                if k + 1 < len(w.levels):
                    mask[self.geometry.child_box(k + 2).slices()] = False
                parts.append(arr[:, mask])
        return np.concatenate([p.reshape(n_t, -1) for p in parts], axis=1)

