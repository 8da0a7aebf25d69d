"""Exact heuristic trajectory distances: EDR, LCSS, Hausdorff, discrete Fréchet.

These are the quadratic dynamic programs used as ranking oracles and as
fine-tuning ground truth. Point distances are great-circle meters on GPS
data and plain Euclidean in planar (toy/synthetic unit) mode; the mode is
always carried explicitly by :class:`MeasureKind`, never inferred.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .trajectory import Trajectory, haversine_m

MEASURE_KINDS = ("edr", "lcss", "hausdorff", "frechet")


@dataclass(frozen=True)
class MeasureKind:
    """A distance measure plus the parameters it needs.

    ``eps_m`` is the spatial match threshold (meters, or coordinate units in
    planar mode) and is required by EDR and LCSS only.
    """

    kind: str
    eps_m: float | None = None
    planar: bool = False

    def __post_init__(self) -> None:
        if self.kind not in MEASURE_KINDS:
            raise DataError(f"unknown measure kind {self.kind!r}, expected one of {MEASURE_KINDS}")
        if self.kind in ("edr", "lcss"):
            if self.eps_m is None or self.eps_m <= 0:
                raise DataError(f"measure {self.kind!r} needs eps_m > 0, got {self.eps_m}")


def _as_points(t) -> np.ndarray:
    pts = t.points if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise DataError(f"expected a nonempty (n, 2) point array, got shape {pts.shape}")
    return pts


def point_distance_matrix(a, b, planar: bool = False) -> np.ndarray:
    """All pairwise point distances between two trajectories, shape (|a|, |b|)."""
    pa, pb = _as_points(a), _as_points(b)
    if planar:
        dx = pa[:, None, 0] - pb[None, :, 0]
        dy = pa[:, None, 1] - pb[None, :, 1]
        return np.sqrt(dx * dx + dy * dy)
    return haversine_m(pa[:, None, 0], pa[:, None, 1], pb[None, :, 0], pb[None, :, 1])


def edr(a, b, eps_m: float, planar: bool = False) -> float:
    """Edit distance on real sequences: minimal number of edits mapping a onto b.

    A point pair matches (substitution cost 0) when its distance is at most
    ``eps_m``; inserts, deletes and non-matching substitutions cost 1.
    """
    d = point_distance_matrix(a, b, planar)
    n, m = d.shape
    match = d <= eps_m
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        row_match = match[i - 1]
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if row_match[j - 1] else 1)
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return float(prev[m])


def lcss_distance(a, b, eps_m: float, planar: bool = False) -> float:
    """LCSS-based distance 1 - L / min(|a|, |b|), where L is the longest
    common subsequence length under the ``eps_m`` match threshold."""
    d = point_distance_matrix(a, b, planar)
    n, m = d.shape
    match = d <= eps_m
    prev = [0] * (m + 1)
    for i in range(1, n + 1):
        row_match = match[i - 1]
        cur = [0] * (m + 1)
        for j in range(1, m + 1):
            if row_match[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = prev[j] if prev[j] >= cur[j - 1] else cur[j - 1]
        prev = cur
    return 1.0 - prev[m] / min(n, m)


def hausdorff(a, b, planar: bool = False) -> float:
    """Symmetric Hausdorff distance: the greatest point-to-trajectory mismatch."""
    d = point_distance_matrix(a, b, planar)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def discrete_frechet(a, b, planar: bool = False) -> float:
    """Discrete Fréchet distance via the standard coupling dynamic program."""
    d = point_distance_matrix(a, b, planar)
    n, m = d.shape
    prev = [0.0] * m
    for i in range(n):
        row = d[i]
        cur = [0.0] * m
        for j in range(m):
            dij = row[j]
            if i == 0 and j == 0:
                cur[j] = dij
            elif i == 0:
                cur[j] = dij if dij > cur[j - 1] else cur[j - 1]
            elif j == 0:
                cur[j] = dij if dij > prev[0] else prev[0]
            else:
                best = prev[j]
                if prev[j - 1] < best:
                    best = prev[j - 1]
                if cur[j - 1] < best:
                    best = cur[j - 1]
                cur[j] = dij if dij > best else best
        prev = cur
    return float(prev[m - 1])


def measure_distance(a, b, measure: MeasureKind) -> float:
    """Dispatch to the measure named by ``measure.kind``."""
    if measure.kind == "edr":
        return edr(a, b, measure.eps_m, measure.planar)
    if measure.kind == "lcss":
        return lcss_distance(a, b, measure.eps_m, measure.planar)
    if measure.kind == "hausdorff":
        return hausdorff(a, b, measure.planar)
    return discrete_frechet(a, b, measure.planar)


@dataclass(frozen=True)
class DistanceMatrix:
    """Pairwise distances between query and candidate trajectories."""

    queries: tuple[str, ...]
    candidates: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vals.shape != (len(self.queries), len(self.candidates)):
            raise DataError(
                f"distance matrix shape {vals.shape} does not match "
                f"{len(self.queries)} queries x {len(self.candidates)} candidates"
            )
        if vals.size and vals.min() < 0:
            raise DataError("distance matrix contains negative values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "candidates", tuple(self.candidates))


_POOL_STATE: dict = {}


def _pool_init(cand_points: list[np.ndarray], measure: MeasureKind) -> None:
    _POOL_STATE["cands"] = cand_points
    _POOL_STATE["measure"] = measure


def _pool_row(args: tuple[int, np.ndarray]) -> tuple[int, list[float]]:
    i, qpts = args
    measure: MeasureKind = _POOL_STATE["measure"]
    row = []
    for j, cpts in enumerate(_POOL_STATE["cands"]):
        try:
            row.append(measure_distance(qpts, cpts, measure))
        except Exception as exc:
            raise DataError(f"measure failed for pair (query {i}, candidate {j}): {exc}") from exc
    return i, row


def pairwise_matrix(
    queries: list[Trajectory],
    candidates: list[Trajectory],
    measure: MeasureKind,
    parallel: bool = False,
    workers: int | None = None,
) -> DistanceMatrix:
    """Compute measure(q, c) for every query/candidate pair.

    The result is independent of ``parallel`` and of the worker count: rows
    are computed per query and reassembled in query order.
    """
    if not queries or not candidates:
        raise DataError("pairwise_matrix needs nonempty query and candidate sets")
    qids = tuple(t.id for t in queries)
    cids = tuple(t.id for t in candidates)
    values = np.empty((len(queries), len(candidates)), dtype=np.float64)
    if parallel:
        cand_pts = [t.points for t in candidates]
        tasks = [(i, q.points) for i, q in enumerate(queries)]
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_pool_init, initargs=(cand_pts, measure)
        ) as pool:
            for i, row in pool.map(_pool_row, tasks, chunksize=8):
                values[i] = row
    else:
        for i, q in enumerate(queries):
            for j, c in enumerate(candidates):
                try:
                    values[i, j] = measure_distance(q, c, measure)
                except Exception as exc:
                    raise DataError(
                        f"measure failed for pair (query {i}, candidate {j}): {exc}"
                    ) from exc
    return DistanceMatrix(queries=qids, candidates=cids, values=values)


def knn_ground_truth(matrix: DistanceMatrix, k: int) -> list[list[str]]:
    """Per query: ids of the k nearest candidates, ties broken by id ascending."""
    n = len(matrix.candidates)
    if k > n:
        raise DataError(f"k={k} exceeds candidate count {n}")
    out = []
    ids = matrix.candidates
    for row in matrix.values:
        order = sorted(range(n), key=lambda j: (row[j], ids[j]))
        out.append([ids[j] for j in order[:k]])
    return out


_DM_MAGIC = b"TJDM"
_DM_VERSION = 1


def save_matrix_csv(matrix: DistanceMatrix, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("query_id,candidate_id,distance\n")
        for i, qid in enumerate(matrix.queries):
            for j, cid in enumerate(matrix.candidates):
                fh.write(f"{qid},{cid},{float(matrix.values[i, j])!r}\n")


def load_matrix_csv(path: str) -> DistanceMatrix:
    qids: list[str] = []
    cids: list[str] = []
    seen_q: set[str] = set()
    seen_c: set[str] = set()
    entries: dict[tuple[str, str], float] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "query_id,candidate_id,distance":
            raise DataError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            if len(parts) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 fields")
            qid, cid, val = parts
            if qid not in seen_q:
                seen_q.add(qid)
                qids.append(qid)
            if cid not in seen_c:
                seen_c.add(cid)
                cids.append(cid)
            try:
                entries[(qid, cid)] = float(val)
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: bad distance {val!r}") from exc
    try:
        values = np.array([[entries[(q, c)] for c in cids] for q in qids], dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"{path}: missing pair {exc.args[0]}") from exc
    return DistanceMatrix(queries=tuple(qids), candidates=tuple(cids), values=values)


def save_matrix_binary(matrix: DistanceMatrix, path: str) -> None:
    """Row-major float64 block with a (magic, version, m, n) header.

    Ids are not stored; pair the block with the CSV form when ids matter.
    """
    m, n = matrix.values.shape
    with open(path, "wb") as fh:
        fh.write(_DM_MAGIC)
        fh.write(struct.pack("<III", _DM_VERSION, m, n))
        fh.write(np.ascontiguousarray(matrix.values).tobytes())


def load_matrix_binary(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _DM_MAGIC:
        raise DataError(f"{path}: not a distance matrix file")
    version, m, n = struct.unpack("<III", blob[4:16])
    if version != _DM_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = 16 + m * n * 8
    if len(blob) != expected:
        raise DataError(f"{path}: truncated matrix file ({len(blob)} bytes, expected {expected})")
    return np.frombuffer(blob[16:], dtype=np.float64).reshape(m, n).copy()
