"""Trajectory data model, grid discretization, and robustness transforms.

A trajectory is an ordered sequence of (lon, lat) points. The study area is
partitioned into a uniform grid of square cells; cells are indexed row-major
from the bbox min corner. Geodetic grids size their cells in meters at the
bbox center latitude; planar grids treat coordinates as abstract units
(used by toy fixtures and synthetic data in unit tests).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

EARTH_RADIUS_M = 6371000.0
M_PER_DEG = EARTH_RADIUS_M * math.pi / 180.0


@dataclass(frozen=True)
class GpsPoint:
    """A single (lon, lat) location in WGS-84 degrees."""

    lon: float
    lat: float

    def __post_init__(self) -> None:
        if not (-180.0 <= self.lon <= 180.0):
            raise DataError(f"longitude {self.lon} outside [-180, 180]")
        if not (-90.0 <= self.lat <= 90.0):
            raise DataError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class Trajectory:
    """An identified, ordered sequence of points, stored as an (n, 2) lon/lat array."""

    id: str
    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise DataError(f"trajectory {self.id!r}: expected (n>=1, 2) points, got {pts.shape}")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid over a bounding box.

    ``cell_size_m`` is meters for geodetic grids and bbox units for planar
    ones. Column/row counts are derived so cells are at most the requested
    size; every point of the closed bbox maps to exactly one cell.
    """

    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float
    cell_size_m: float
    planar: bool = False
    n_cols: int = field(init=False)
    n_rows: int = field(init=False)

    def __post_init__(self) -> None:
        if not (self.max_lon > self.min_lon and self.max_lat > self.min_lat):
            raise DataError("grid bbox must have positive extent")
        if self.cell_size_m <= 0:
            raise DataError("cell_size_m must be positive")
        if self.planar:
            width_m = self.max_lon - self.min_lon
            height_m = self.max_lat - self.min_lat
        else:
            lat0 = math.radians(0.5 * (self.min_lat + self.max_lat))
            width_m = (self.max_lon - self.min_lon) * M_PER_DEG * math.cos(lat0)
            height_m = (self.max_lat - self.min_lat) * M_PER_DEG
        object.__setattr__(self, "n_cols", max(1, math.ceil(width_m / self.cell_size_m - 1e-9)))
        object.__setattr__(self, "n_rows", max(1, math.ceil(height_m / self.cell_size_m - 1e-9)))

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def cell_w_deg(self) -> float:
        return (self.max_lon - self.min_lon) / self.n_cols

    @property
    def cell_h_deg(self) -> float:
        return (self.max_lat - self.min_lat) / self.n_rows

    def contains(self, lon: float, lat: float) -> bool:
        return self.min_lon <= lon <= self.max_lon and self.min_lat <= lat <= self.max_lat

    def hash(self) -> str:
        """Stable digest binding cell embeddings and checkpoints to one grid."""
        import hashlib

        canon = json.dumps(
            {
                "bbox": [self.min_lon, self.min_lat, self.max_lon, self.max_lat],
                "cell_size_m": self.cell_size_m,
                "planar": self.planar,
                "n_cols": self.n_cols,
                "n_rows": self.n_rows,
            },
            sort_keys=True,
        )
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class CellTrajectory:
    """Grid-cell index sequence of a trajectory (one cell id per point, no dedup)."""

    source_id: str
    cells: np.ndarray

    def __post_init__(self) -> None:
        cells = np.ascontiguousarray(np.asarray(self.cells, dtype=np.int64))
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    def __len__(self) -> int:
        return self.cells.shape[0]


def point_to_cell(lon: float, lat: float, grid: GridSpec) -> int:
    """Map a point to its row-major cell index; the closed max edge belongs to the last cell."""
    if not grid.contains(lon, lat):
        raise DataError(
            f"point ({lon}, {lat}) outside grid bbox "
            f"({grid.min_lon}, {grid.min_lat}, {grid.max_lon}, {grid.max_lat})"
        )
    col = min(int((lon - grid.min_lon) / grid.cell_w_deg), grid.n_cols - 1)
    row = min(int((lat - grid.min_lat) / grid.cell_h_deg), grid.n_rows - 1)
    return row * grid.n_cols + col


def cell_center(cell: int, grid: GridSpec) -> tuple[float, float]:
    """(lon, lat) of a cell's center; maps back to the same cell."""
    if not 0 <= cell < grid.n_cells:
        raise DataError(f"cell index {cell} outside [0, {grid.n_cells})")
    row, col = divmod(cell, grid.n_cols)
    return (
        grid.min_lon + (col + 0.5) * grid.cell_w_deg,
        grid.min_lat + (row + 0.5) * grid.cell_h_deg,
    )


def trajectory_to_cells(t: Trajectory, grid: GridSpec) -> CellTrajectory:
    """Element-wise cell assignment; length preserved, consecutive duplicates kept."""
    cells = np.empty(t.n, dtype=np.int64)
    for i, (lon, lat) in enumerate(t.points):
        try:
            cells[i] = point_to_cell(float(lon), float(lat), grid)
        except DataError as exc:
            raise DataError(f"trajectory {t.id!r}, point {i}: {exc}") from None
    return CellTrajectory(source_id=t.id, cells=cells)


def load_trajectories(path: str, format: str = "csv") -> list[Trajectory]:
    """Load trajectories from a CSV (``id,seq,lon,lat``) or JSONL file.

    CSV rows for one id must be contiguous with ascending ``seq``; JSONL
    carries one ``{"id": ..., "points": [[lon, lat], ...]}`` object per line.
    Malformed records raise :class:`DataError` naming the offending line.
    """
    if format == "csv":
        return _load_csv(path)
    if format == "jsonl":
        return _load_jsonl(path)
    raise DataError(f"unknown trajectory format {format!r} (expected 'csv' or 'jsonl')")


def _check_ranges(lon: float, lat: float, where: str) -> None:
    if not (-180.0 <= lon <= 180.0):
        raise DataError(f"{where}: longitude {lon} outside [-180, 180]")
    if not (-90.0 <= lat <= 90.0):
        raise DataError(f"{where}: latitude {lat} outside [-90, 90]")


def _load_csv(path: str) -> list[Trajectory]:
    out: list[Trajectory] = []
    seen: set[str] = set()
    cur_id: str | None = None
    cur_pts: list[tuple[float, float]] = []
    prev_seq: int | None = None

    def flush() -> None:
        if cur_id is not None:
            out.append(Trajectory(id=cur_id, points=np.asarray(cur_pts)))

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != ["id", "seq", "lon", "lat"]:
            raise DataError(f"{path}: line 1: expected header 'id,seq,lon,lat', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}: line {lineno}"
            if len(row) != 4:
                raise DataError(f"{where}: expected 4 fields, got {len(row)}")
            tid = row[0]
            try:
                seq = int(row[1])
                lon = float(row[2])
                lat = float(row[3])
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from None
            _check_ranges(lon, lat, where)
            if tid != cur_id:
                if tid in seen:
                    raise DataError(f"{where}: rows for id {tid!r} are not contiguous")
                flush()
                cur_id = tid
                seen.add(tid)
                cur_pts = []
                prev_seq = None
            if prev_seq is not None and seq <= prev_seq:
                raise DataError(f"{where}: seq {seq} not ascending for id {tid!r}")
            prev_seq = seq
            cur_pts.append((lon, lat))
    flush()
    return out


def _load_jsonl(path: str) -> list[Trajectory]:
    out: list[Trajectory] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict) or "id" not in obj or "points" not in obj:
                raise DataError(f"{where}: expected object with 'id' and 'points'")
            pts = obj["points"]
            if not isinstance(pts, list) or not pts:
                raise DataError(f"{where}: 'points' must be a nonempty list")
            for p in pts:
                if not (isinstance(p, (list, tuple)) and len(p) == 2):
                    raise DataError(f"{where}: each point must be [lon, lat]")
                _check_ranges(float(p[0]), float(p[1]), where)
            out.append(Trajectory(id=str(obj["id"]), points=np.asarray(pts, dtype=np.float64)))
    return out


def save_trajectories(trajs: list[Trajectory], path: str, format: str = "jsonl") -> None:
    """Inverse of :func:`load_trajectories` for the same two formats."""
    if format == "jsonl":
        with open(path, "w") as fh:
            for t in trajs:
                fh.write(json.dumps({"id": t.id, "points": t.points.tolist()}) + "\n")
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "seq", "lon", "lat"])
            for t in trajs:
                for i, (lon, lat) in enumerate(t.points):
                    writer.writerow([t.id, i, repr(float(lon)), repr(float(lat))])
    else:
        raise DataError(f"unknown trajectory format {format!r}")


def preprocess(
    data: list[Trajectory], grid: GridSpec, min_len: int = 20, max_len: int = 200
) -> list[Trajectory]:
    """Keep trajectories with min_len <= n <= max_len and every point inside the grid bbox."""
    if min_len > max_len:
        raise DataError(f"min_len {min_len} > max_len {max_len}")
    kept = []
    for t in data:
        if not (min_len <= t.n <= max_len):
            continue
        lon, lat = t.points[:, 0], t.points[:, 1]
        if (
            lon.min() >= grid.min_lon
            and lon.max() <= grid.max_lon
            and lat.min() >= grid.min_lat
            and lat.max() <= grid.max_lat
        ):
            kept.append(t)
    return kept


def odd_even_split(t: Trajectory) -> tuple[Trajectory, Trajectory]:
    """Split into the odd-indexed and even-indexed point subsequences (1-based).

    The first, third, fifth, ... points form the ``a`` half and the rest the
    ``b`` half, so interleaving a and b reconstructs the original.
    """
    if t.n < 2:
        raise DataError(f"trajectory {t.id!r}: need n >= 2 to split, got {t.n}")
    return (
        Trajectory(id=f"{t.id}#a", points=t.points[0::2]),
        Trajectory(id=f"{t.id}#b", points=t.points[1::2]),
    )


def downsample(t: Trajectory, rho_s: float, rng: np.random.Generator) -> Trajectory:
    """Drop each interior point with probability rho_s; endpoints are always kept."""
    if not 0.0 <= rho_s < 1.0:
        raise DataError(f"rho_s must be in [0, 1), got {rho_s}")
    if t.n < 2:
        raise DataError(f"trajectory {t.id!r}: need n >= 2 to downsample")
    if rho_s == 0.0 or t.n == 2:
        return t
    keep_interior = rng.random(t.n - 2) >= rho_s
    mask = np.concatenate(([True], keep_interior, [True]))
    return Trajectory(id=t.id, points=t.points[mask])


def distort(
    t: Trajectory,
    rho_d: float,
    magnitude_m: float,
    rng: np.random.Generator,
    planar: bool = False,
    clamp_bbox: tuple[float, float, float, float] | None = None,
) -> Trajectory:
    """Shift each point, with probability rho_d, by a uniform offset in a disc.

    The disc radius is ``magnitude_m`` (meters for geodetic data, coordinate
    units when ``planar``); meters are converted to degrees by equirectangular
    scaling at the trajectory's mean latitude. With ``clamp_bbox`` the result
    is projected back into the box, which never increases the displacement.
    """
    if not 0.0 <= rho_d <= 1.0:
        raise DataError(f"rho_d must be in [0, 1], got {rho_d}")
    if magnitude_m <= 0:
        raise DataError(f"magnitude_m must be positive, got {magnitude_m}")
    if rho_d == 0.0:
        return t
    n = t.n
    selected = rng.random(n) < rho_d
    radius = magnitude_m * np.sqrt(rng.random(n))
    theta = rng.random(n) * 2.0 * math.pi
    dx_m = radius * np.cos(theta)
    dy_m = radius * np.sin(theta)
    if not selected.any():
        return t
    if planar:
        dlon, dlat = dx_m, dy_m
    else:
        mean_lat = math.radians(float(t.points[:, 1].mean()))
        dlon = dx_m / (M_PER_DEG * math.cos(mean_lat))
        dlat = dy_m / M_PER_DEG
    pts = t.points.copy()
    pts[selected, 0] += dlon[selected]
    pts[selected, 1] += dlat[selected]
    if clamp_bbox is not None:
        lo_lon, lo_lat, hi_lon, hi_lat = clamp_bbox
        np.clip(pts[:, 0], lo_lon, hi_lon, out=pts[:, 0])
        np.clip(pts[:, 1], lo_lat, hi_lat, out=pts[:, 1])
    return Trajectory(id=t.id, points=pts)


# Moves of the synthetic walker: 8-neighborhood plus staying put.
_MOVES = np.array(
    [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)],
    dtype=np.int64,
)
_STAY_INDEX = 4  # (0, 0)


def synth_generate(
    count: int,
    grid: GridSpec,
    len_range: tuple[int, int],
    seed: int,
    persistence: float = 0.8,
    spread: float = 0.2,
) -> list[Trajectory]:
    """Generate direction-persistent random walks over grid cell centers.

    Starts are drawn from a truncated normal around the grid center with
    standard deviation ``spread`` times the grid span, so trajectories share
    the busy core of the study area instead of tiling it uniformly. Each step
    moves to one of the 8 neighboring cells (repeating the previous direction
    with probability ``persistence``) or stays in place.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    lo, hi = len_range
    if not (2 <= lo <= hi):
        raise DataError(f"invalid len_range {len_range}")
    rng = np.random.default_rng(seed)
    out: list[Trajectory] = []
    for k in range(count):
        n = int(rng.integers(lo, hi + 1))
        row = int(np.clip(round(rng.normal(grid.n_rows / 2, spread * grid.n_rows)), 0, grid.n_rows - 1))
        col = int(np.clip(round(rng.normal(grid.n_cols / 2, spread * grid.n_cols)), 0, grid.n_cols - 1))
        cells = np.empty(n, dtype=np.int64)
        cells[0] = row * grid.n_cols + col
        move = _MOVES[int(rng.integers(len(_MOVES)))]
        for i in range(1, n):
            if rng.random() >= persistence:
                move = _MOVES[int(rng.integers(len(_MOVES)))]
            r2, c2 = row + int(move[0]), col + int(move[1])
            if not (0 <= r2 < grid.n_rows and 0 <= c2 < grid.n_cols):
                # bounce: pick any in-grid move (staying put is always legal)
                legal = [
                    m
                    for m in _MOVES
                    if 0 <= row + m[0] < grid.n_rows and 0 <= col + m[1] < grid.n_cols
                ]
                move = legal[int(rng.integers(len(legal)))]
                r2, c2 = row + int(move[0]), col + int(move[1])
            row, col = r2, c2
            cells[i] = row * grid.n_cols + col
        pts = np.array([cell_center(int(c), grid) for c in cells], dtype=np.float64)
        out.append(Trajectory(id=f"synth-{k:06d}", points=pts))
    return out


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters; accepts scalars or numpy arrays."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lon1, lat1, lon2, lat2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))
