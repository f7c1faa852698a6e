"""
Toy forward solver producing ground truth for the synthetic dataset.

This is a cheap proxy for a multiphase reservoir simulator, not a
replacement for one:

- Pressure buildup: single-phase, slightly compressible diffusion with
  harmonic-mean transmissibilities, closed boundaries and well sources spread
  over the perforated cells. Integrated with explicit Euler sub-steps sized
  below the stability bound, so buildup stays non-negative under injection.
- Gas saturation: volume-tracking invasion. Each well ranks cells once by
  hydraulic distance minus a buoyancy term and fills them in that order up to
  ``max_saturation``, the last cell partially. The plume volume equals the
  cumulative injected volume at every snapshot.

Well locations are given on the level-0 grid; ``well_scale`` maps them onto
the (finer) solver grid.

Refined levels around a well are solved locally: ``solve_local`` integrates
the same pressure equation implicitly on the refined window with the parent
buildup fixed on its lateral ring, and ``fill_local`` redistributes the
parent plume volume inside the window by the same invasion ranking.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from src.errors import ContractError, SolverError
from src.models import HORIZON_YEARS, SimConfig, Triple, WellSpec
from src.services.tracing_service import tracing_service

logger = logging.getLogger(__name__)

STABILITY_MARGIN = 0.9


@dataclass
class SimResult:
    """Ground truth on the solver grid."""

    pressure_buildup: np.ndarray  # (T, nx, ny, nz), bar
    saturation: np.ndarray  # (T, nx, ny, nz)
    injected_volume: np.ndarray  # (T,), km^3 of CO2 in the reservoir
    substeps: int


def rate_at(well: WellSpec, t: float) -> float:
    """Injection rate (MT/yr) at time ``t`` years: equal-length periods over the horizon."""
    n = len(well.rate_schedule)
    period = min(int(t / HORIZON_YEARS * n), n - 1)
    return well.rate_schedule[max(period, 0)]


def cumulative_injection(well: WellSpec, t: float) -> float:
    """Mass injected (MT) up to time ``t``."""
    n = len(well.rate_schedule)
    length = HORIZON_YEARS / n
    total = 0.0
    for i, rate in enumerate(well.rate_schedule):
        start = i * length
        end = math.inf if i == n - 1 else start + length
        if t <= start:
            break
        total += rate * (min(t, end) - start)
    return total


def well_cell(location: tuple[int, int], scale: Triple) -> tuple[int, int]:
    """Solver-grid column of a level-0 location: child ``(s - 1) // 2`` of its refined cell."""
    return tuple(loc * s + (s - 1) // 2 for loc, s in zip(location, scale[:2]))  # type: ignore[return-value]


def _invade(used: np.ndarray, order: np.ndarray, volume: float, capacity: float) -> float:
    """Fill ``used`` cell by cell in ``order`` up to ``capacity``; returns the volume that did not fit."""
    room = capacity - used[order]
    filled_before = np.concatenate([[0.0], np.cumsum(room)[:-1]])
    take = np.clip(volume - filled_before, 0.0, room)
    used[order] += take
    return volume - float(take.sum())


class ReservoirSolver:
    """
    Explicit finite-difference pressure solver plus invasion-fill plume model.

    Example:
        ```python
        result = reservoir_solver.simulate(config, permeability, well_scale=(2, 2, 1))
        result.pressure_buildup.shape   # (24, 40, 40, 5)
        ```
    """

    def _well_cells(self, config: SimConfig, well: WellSpec, grid: Triple, scale: Triple) -> tuple[int, int, list[int]]:
        nx, ny, nz = grid
        sz = scale[2]
        cx, cy = well_cell(well.location, scale)
        if not (0 <= cx < nx and 0 <= cy < ny):
            raise ContractError(f"well at {well.location} lies outside the solver grid {grid}")
        top, bottom = well.perforation[0] * sz, well.perforation[1] * sz
        if not (0 <= top < bottom <= nz):
            raise ContractError(f"perforation {well.perforation} does not fit {nz // sz} layers")
        return cx, cy, list(range(top, bottom))

    def _transmissibilities(self, config: SimConfig, k: np.ndarray, spacing: Optional[tuple[float, float, float]] = None
                            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dx, dy, dz = spacing or config.spacing
        kv = config.kv_kh * k
        mobility = config.diffusivity_scale / config.viscosity

        def harmonic(a: np.ndarray, axis: int) -> np.ndarray:
            lo = np.take(a, np.arange(a.shape[axis] - 1), axis=axis)
            hi = np.take(a, np.arange(1, a.shape[axis]), axis=axis)
            return 2.0 * lo * hi / (lo + hi)

        tx = mobility * harmonic(k, 0) * dy * dz / dx
        ty = mobility * harmonic(k, 1) * dx * dz / dy
        tz = mobility * harmonic(kv, 2) * dx * dy / dz
        return tx, ty, tz

    def stable_step(self, config: SimConfig, permeability: np.ndarray) -> float:
        """Largest explicit step (years) that keeps the update monotone."""
        tx, ty, tz = self._transmissibilities(config, permeability)
        storage = config.porosity * config.compressibility * float(np.prod(config.spacing))
        row = np.zeros_like(permeability)
        for t, axis in ((tx, 0), (ty, 1), (tz, 2)):
            row += _pad_faces(t, axis, low=True) + _pad_faces(t, axis, low=False)
        peak = float(row.max()) / storage
        return math.inf if peak == 0 else STABILITY_MARGIN / peak

    def _pressure(self, config: SimConfig, k: np.ndarray, sources: list[tuple[WellSpec, tuple]]) -> tuple[np.ndarray, int]:
        times = config.times.snapshots
        storage = config.porosity * config.compressibility * float(np.prod(config.spacing))
        tx, ty, tz = (t / storage for t in self._transmissibilities(config, k))
        dt_max = self.stable_step(config, k)

        counts = []
        previous = 0.0
        for t in times:
            counts.append(max(1, math.ceil((t - previous) / dt_max)))
            previous = t
        total = sum(counts)
        if total > config.max_substeps:
            raise SolverError(
                f"explicit step must stay below {dt_max:.3e} yr (inverse of the largest coefficient sum); "
                f"{total} substeps exceed max_substeps={config.max_substeps}"
            )

        p = np.zeros_like(k)
        out = np.empty((len(times),) + k.shape)
        previous = 0.0
        for i, (t, n) in enumerate(zip(times, counts)):
            dt = (t - previous) / n
            for s in range(n):
                mid = previous + (s + 0.5) * dt
                flux = np.zeros_like(p)
                fx = tx * np.diff(p, axis=0)
                fy = ty * np.diff(p, axis=1)
                fz = tz * np.diff(p, axis=2)
                flux[:-1] += fx
                flux[1:] -= fx
                flux[:, :-1] += fy
                flux[:, 1:] -= fy
                flux[:, :, :-1] += fz
                flux[:, :, 1:] -= fz
                for well, cells in sources:
                    q = rate_at(well, mid) * config.volume_per_mt
                    flux[cells] += config.pressure_per_volume * q / (storage * len(cells[2]))
                p = p + dt * flux
            out[i] = p
            previous = t
        return out, total

    def _invasion_order(self, config: SimConfig, k: np.ndarray, cx: int, cy: int, layers: list[int],
                        spacing: Optional[tuple[float, float, float]] = None) -> np.ndarray:
        nx, ny, nz = k.shape
        dx, dy, dz = spacing or config.spacing
        i, j, l = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        zc = 0.5 * (layers[0] + layers[-1])
        x = (i - cx) * dx
        y = (j - cy) * dy
        z = (l - zc) * dz / math.sqrt(config.kv_kh)
        k_ref = float(np.exp(np.mean(np.log(k))))
        distance = np.sqrt(x * x + y * y + z * z) / np.sqrt(k / k_ref)
        # up-dip is toward decreasing x
        elevation = (zc - l) * dz + (cx - i) * dx * math.tan(math.radians(config.dip_deg))
        cost = distance - config.buoyancy * elevation
        return np.argsort(cost.ravel(), kind="stable")

    def _saturation(self, config: SimConfig, k: np.ndarray, orders: list[tuple[WellSpec, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
        times = config.times.snapshots
        pore = config.porosity * float(np.prod(config.spacing))
        capacity = config.max_saturation * pore
        out = np.empty((len(times),) + k.shape)
        injected = np.zeros(len(times))
        for ti, t in enumerate(times):
            used = np.zeros(k.size)
            for well, order in orders:
                volume = cumulative_injection(well, t) * config.volume_per_mt
                injected[ti] += volume
                left = _invade(used, order, volume, capacity)
                if left > 1e-12 * max(volume, 1.0):
                    logger.warning(f"⚠️ Reservoir full: {left:.3e} km^3 could not be placed")
            out[ti] = (used / pore).reshape(k.shape)
        return out, injected

    @tracing_service.trace_function("reservoir_solver.simulate")
    def simulate(self, config: SimConfig, permeability: np.ndarray, well_scale: Triple = (1, 1, 1)) -> SimResult:
        """
        Run the toy solver for every snapshot of ``config.times``.

        Args:
            config: Reservoir description; wells in level-0 coordinates.
            permeability: ``(nx, ny, nz)`` field in mD on the solver grid.
            well_scale: Solver cells per level-0 cell along each axis.

        Returns:
            Pressure buildup, saturation and injected volume per snapshot.

        Raises:
            ContractError: If a well or perforation lies outside the grid.
            SolverError: If the stable step would need more than
                ``config.max_substeps`` sub-steps.
        """
        k = np.asarray(permeability, dtype=np.float64)
        if k.ndim != 3 or not np.all(np.isfinite(k)) or np.any(k <= 0):
            raise ContractError("permeability must be a finite positive 3D field")
        sources = []
        orders = []
        for well in config.wells:
            cx, cy, layers = self._well_cells(config, well, k.shape, well_scale)
            cells = (np.full(len(layers), cx), np.full(len(layers), cy), np.asarray(layers))
            sources.append((well, cells))
            orders.append((well, self._invasion_order(config, k, cx, cy, layers)))

        pressure, substeps = self._pressure(config, k, sources)
        saturation, injected = self._saturation(config, k, orders)
        logger.debug(f"Simulated {len(config.wells)} wells on {k.shape} with {substeps} substeps")
        return SimResult(pressure_buildup=pressure, saturation=saturation, injected_volume=injected, substeps=substeps)

    @tracing_service.trace_function("reservoir_solver.solve_local")
    def solve_local(self, config: SimConfig, permeability: np.ndarray, spacing: tuple[float, float, float],
                    boundary: np.ndarray, source: Optional[tuple[WellSpec, int, int, list[int]]] = None) -> np.ndarray:
        """
        Pressure buildup on a refined window with the parent buildup held on its lateral ring.

        Backward Euler with ``config.implicit_steps`` steps per snapshot
        interval. Ring values are linear in time between snapshots and start
        from zero; top and bottom stay closed. The operator is an M-matrix, so
        buildup stays non-negative for non-negative ring values and rates.

        Args:
            config: Reservoir description (times, porosity, rates).
            permeability: ``(nx, ny, nz)`` field in mD on the window.
            spacing: Cell size (km) on the window.
            boundary: ``(T, nx + 2, ny + 2, nz)`` buildup one cell around the
                window; only the lateral ring is read.
            source: ``(well, cx, cy, layers)`` when the well column lies inside.

        Returns:
            Buildup ``(T, nx, ny, nz)`` in bar.

        Raises:
            ContractError: On a bad field, boundary shape or source cell.
        """
        k = np.asarray(permeability, dtype=np.float64)
        if k.ndim != 3 or not np.all(np.isfinite(k)) or np.any(k <= 0):
            raise ContractError("permeability must be a finite positive 3D field")
        nx, ny, nz = k.shape
        times = config.times.snapshots
        if boundary.shape != (len(times), nx + 2, ny + 2, nz):
            raise ContractError(f"boundary {boundary.shape} must be {(len(times), nx + 2, ny + 2, nz)}")
        dx, dy, dz = spacing
        storage = config.porosity * config.compressibility * dx * dy * dz
        mobility = config.diffusivity_scale / config.viscosity

        index = np.arange(k.size).reshape(k.shape)
        rows, cols, vals = [], [], []
        diag = np.zeros(k.size)
        for t, axis in zip(self._transmissibilities(config, k, spacing), (0, 1, 2)):
            a = np.take(index, np.arange(k.shape[axis] - 1), axis=axis).ravel()
            b = np.take(index, np.arange(1, k.shape[axis]), axis=axis).ravel()
            w = t.ravel()
            rows += [a, b]
            cols += [b, a]
            vals += [-w, -w]
            np.add.at(diag, a, w)
            np.add.at(diag, b, w)

        face_x = mobility * k * dy * dz / dx
        face_y = mobility * k * dx * dz / dy
        faces = (
            (index[0], face_x[0], (0, slice(1, ny + 1))),
            (index[-1], face_x[-1], (nx + 1, slice(1, ny + 1))),
            (index[:, 0], face_y[:, 0], (slice(1, nx + 1), 0)),
            (index[:, -1], face_y[:, -1], (slice(1, nx + 1), ny + 1)),
        )
        ring = np.zeros((len(times), k.size))
        for cells, w, ghost in faces:
            np.add.at(diag, cells.ravel(), w.ravel())
            for ti in range(len(times)):
                np.add.at(ring[ti], cells.ravel(), (w * boundary[ti][ghost]).ravel())
        rows.append(index.ravel())
        cols.append(index.ravel())
        vals.append(diag)
        operator = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(k.size, k.size)).tocsc()

        injection = np.zeros(k.size)
        well = None
        if source is not None:
            well, cx, cy, layers = source
            if not (0 <= cx < nx and 0 <= cy < ny) or not layers or not (0 <= min(layers) and max(layers) < nz):
                raise ContractError(f"source column ({cx}, {cy}) layers {layers} outside window {k.shape}")
            injection[index[cx, cy, layers]] = config.pressure_per_volume * config.volume_per_mt / len(layers)

        out = np.empty((len(times),) + k.shape)
        p = np.zeros(k.size)
        previous, ring_before = 0.0, np.zeros(k.size)
        n = config.implicit_steps
        for ti, t in enumerate(times):
            dt = (t - previous) / n
            lu = splu((sp.identity(k.size, format="csc") * (storage / dt) + operator).tocsc())
            for s in range(1, n + 1):
                rhs = storage / dt * p + ring_before + (s / n) * (ring[ti] - ring_before)
                if well is not None:
                    rhs = rhs + injection * rate_at(well, previous + (s - 0.5) * dt)
                p = lu.solve(rhs)
            out[ti] = p.reshape(k.shape)
            previous, ring_before = t, ring[ti]
        return out

    def fill_local(self, config: SimConfig, permeability: np.ndarray, spacing: tuple[float, float, float],
                   volumes: np.ndarray, column: tuple[int, int], layers: list[int]) -> np.ndarray:
        """
        Saturation on a refined window holding plume ``volumes`` (km^3 per snapshot).

        Cells are ranked like the global plume, from the well column (which
        may lie outside the window), and filled up to ``max_saturation``.

        Raises:
            ContractError: If a volume exceeds the window's pore capacity.
        """
        k = np.asarray(permeability, dtype=np.float64)
        pore = config.porosity * float(np.prod(spacing))
        capacity = config.max_saturation * pore
        order = self._invasion_order(config, k, column[0], column[1], layers, spacing)
        out = np.empty((len(volumes),) + k.shape)
        for ti, volume in enumerate(volumes):
            used = np.zeros(k.size)
            left = _invade(used, order, float(volume), capacity)
            if left > 1e-9 * max(float(volume), 1.0):
                raise ContractError(f"plume volume {volume:.3e} km^3 exceeds the window capacity by {left:.3e}")
            out[ti] = (used / pore).reshape(k.shape)
        return out


def _pad_faces(t: np.ndarray, axis: int, low: bool) -> np.ndarray:
    """Face coefficients scattered onto the cells on one side of each face."""
    width = [(0, 0)] * 3
    width[axis] = (0, 1) if low else (1, 0)
    return np.pad(t, width)


reservoir_solver = ReservoirSolver()


def simulate(config: SimConfig, permeability: np.ndarray, well_scale: Triple = (1, 1, 1)) -> SimResult:
    return reservoir_solver.simulate(config, permeability, well_scale)
