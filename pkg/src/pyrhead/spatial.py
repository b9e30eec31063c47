"""Point-of-interest storage and exact radius-bounded neighbor queries.

The index is a uniform hash grid: points are bucketed by integer cell, a
query scans the cells overlapping the ball's bounding cube and filters by
exact Euclidean distance, so results are identical to a brute-force scan.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PSET_MAGIC = b"PSET"


@dataclass
class PointSet:
    """Coordinates [n,3] and per-point feature vectors [n,d]."""

    coords: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ValueError(
                f"coords/feats row mismatch: {self.coords.shape} vs {self.feats.shape}")
        if self.coords.size and not np.all(np.isfinite(self.coords)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_width(self) -> int:
        return self.feats.shape[1]

    @classmethod
    def empty(cls, feat_width: int) -> "PointSet":
        return cls(np.zeros((0, 3)), np.zeros((0, feat_width)))

    # -- persistence -----------------------------------------------------
    def save(self, path) -> None:
        """Binary form: magic, u32 n, u32 d, f32 coords, f32 features."""
        n, d = len(self), self.feat_width
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", PSET_MAGIC, n, d))
            fh.write(self.coords.astype("<f4").tobytes())
            fh.write(self.feats.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PointSet":
        raw = Path(path).read_bytes()
        if raw[:4] != PSET_MAGIC:
            raise ValueError(f"{path}: not a PSET file")
        n, d = struct.unpack("<II", raw[4:12])
        off = 12
        coords = np.frombuffer(raw, dtype="<f4", count=n * 3, offset=off)
        off += n * 3 * 4
        feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off)
        return cls(coords.reshape(n, 3).astype(np.float64),
                   feats.reshape(n, d).astype(np.float64))

    def to_json(self) -> str:
        return json.dumps({"coords": self.coords.tolist(),
                           "feats": self.feats.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "PointSet":
        doc = json.loads(text)
        coords = np.asarray(doc["coords"], dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(doc["feats"], dtype=np.float64)
        if feats.size == 0:
            feats = feats.reshape(len(coords), -1) if len(coords) else feats.reshape(0, 0)
        return cls(coords, feats)


class SpatialIndex:
    """Immutable uniform hash grid over a PointSet."""

    def __init__(self, ps: PointSet, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.ps = ps
        self.cell = float(cell)
        self._buckets: dict[tuple[int, int, int], np.ndarray] = {}
        n = len(ps)
        if n == 0:
            return
        keys = np.floor(ps.coords / self.cell).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sk = keys[order]
        change = np.nonzero(np.any(sk[1:] != sk[:-1], axis=1))[0] + 1
        starts = np.concatenate(([0], change, [n]))
        for a, b in zip(starts[:-1], starts[1:]):
            self._buckets[tuple(sk[a])] = np.sort(order[a:b])

    def _candidates(self, center: np.ndarray, r: float) -> np.ndarray:
        lo = np.floor((center - r) / self.cell).astype(np.int64)
        hi = np.floor((center + r) / self.cell).astype(np.int64)
        chunks = []
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    b = self._buckets.get((i, j, k))
                    if b is not None:
                        chunks.append(b)
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks)

    def query(self, center, r: float, max_k: int | None = None
              ) -> tuple[np.ndarray, np.ndarray]:
        """Ids and distances of points with ||p - center|| <= r (closed ball).

        Sorted by (distance, id); if more than max_k qualify only the
        nearest max_k are kept.
        """
        if r <= 0:
            raise ValueError("query radius must be positive")
        center = np.asarray(center, dtype=np.float64).reshape(3)
        cand = self._candidates(center, r)
        if cand.size == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        d = np.linalg.norm(self.ps.coords[cand] - center, axis=1)
        keep = d <= r
        cand, d = cand[keep], d[keep]
        order = np.lexsort((cand, d))
        if max_k is not None and order.size > max_k:
            order = order[:max_k]
        return cand[order], d[order]

    def region_ids(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Ascending ids of all points in cells overlapping the box [lo, hi]."""
        if not self._buckets:
            return np.empty(0, dtype=np.int64)
        clo = np.floor(lo / self.cell).astype(np.int64)
        chi = np.floor(hi / self.cell).astype(np.int64)
        chunks = []
        for i in range(clo[0], chi[0] + 1):
            for j in range(clo[1], chi[1] + 1):
                for k in range(clo[2], chi[2] + 1):
                    b = self._buckets.get((i, j, k))
                    if b is not None:
                        chunks.append(b)
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(chunks))

    def query_capped_ids(self, center, r: float, max_k: int
                         ) -> tuple[np.ndarray, np.ndarray]:
        """Same capped-nearest set as ``query`` but returned in id order.

        The selection rule is identical (nearest max_k, ties by ascending
        id); only the output ordering differs, matching the canonical
        summation order the aggregation operators use.
        """
        center = np.asarray(center, dtype=np.float64).reshape(3)
        cand = self._candidates(center, r)
        if cand.size == 0:
            return cand, np.empty(0)
        d = np.linalg.norm(self.ps.coords[cand] - center, axis=1)
        keep = d <= r
        cand, d = cand[keep], d[keep]
        if cand.size > max_k:
            sel = np.lexsort((cand, d))[:max_k]
            cand, d = cand[sel], d[sel]
        order = np.argsort(cand)
        return cand[order], d[order]


def build_index(ps: PointSet, cell: float) -> SpatialIndex:
    return SpatialIndex(ps, cell)


def batch_query_capped(idx: SpatialIndex, centers: np.ndarray, r: float,
                       max_k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """query_capped_ids for many centers sharing one radius.

    Computes one distance matrix against the points near the centers'
    bounding box; per-center selection (nearest max_k, ties by ascending
    id, output in id order) is identical to query_capped_ids.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    local = idx.region_ids(centers.min(axis=0) - r, centers.max(axis=0) + r)
    if local.size == 0:
        empty = np.empty(0, dtype=np.int64), np.empty(0)
        return [empty for _ in range(len(centers))]
    sub = idx.ps.coords[local]
    # same norm ufunc path as query() so boundary decisions agree exactly
    dmat = np.linalg.norm(centers[:, None, :] - sub[None, :, :], axis=2)
    out = []
    for row in range(len(centers)):
        keep = np.nonzero(dmat[row] <= r)[0]
        ids = local[keep]
        d = dmat[row, keep]
        if ids.size > max_k:
            sel = np.lexsort((ids, d))[:max_k]
            ids, d = ids[sel], d[sel]
            order = np.argsort(ids)
            ids, d = ids[order], d[order]
        out.append((ids, d))
    return out


def ball_query(idx: SpatialIndex, center, r: float, max_k: int) -> np.ndarray:
    """Ids of the (at most max_k nearest) points within radius r of center."""
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    ids, _ = idx.query(center, r, max_k)
    return ids


def extended_query(idx: SpatialIndex, center, r: float, tau: float,
                   max_k: int) -> np.ndarray:
    """Ball query over the widened range r + 5*tau used by soft-radius sampling."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return ball_query(idx, center, r + 5.0 * tau, max_k)


def brute_force_query(ps: PointSet, center, r: float,
                      max_k: int | None = None) -> np.ndarray:
    """Reference scan over all points; the oracle the index must agree with."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if len(ps) == 0:
        return np.empty(0, dtype=np.int64)
    d = np.linalg.norm(ps.coords - center, axis=1)
    ids = np.nonzero(d <= r)[0]
    order = np.lexsort((ids, d[ids]))
    if max_k is not None and order.size > max_k:
        order = order[:max_k]
    return ids[order].astype(np.int64)
