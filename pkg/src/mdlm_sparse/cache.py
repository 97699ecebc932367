"""Per-layer activation caches (K, V, attention context, FFN output) and row index sets.

All indices are global sequence positions, including during response-only
steps; the engine maps input rows to positions at its boundary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig
from .numerics import ShapeError


class CacheStateError(RuntimeError):
    """A cache was read before a full step populated it."""


class IndexBoundsError(IndexError):
    pass


@dataclass(frozen=True)
class SaliencyIndex:
    """Strictly increasing global positions in ``[0, bound)``."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1)
        if pos.size and np.any(np.diff(pos) <= 0):
            raise ValueError("saliency positions must be strictly increasing")
        if pos.size and pos[0] < 0:
            raise IndexBoundsError(f"negative position {pos[0]}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def from_iterable(cls, items) -> "SaliencyIndex":
        return cls(np.unique(np.asarray(list(items), dtype=np.int64)))

    @classmethod
    def empty(cls) -> "SaliencyIndex":
        return cls(np.zeros(0, dtype=np.int64))

    @classmethod
    def span(cls, start: int, stop: int) -> "SaliencyIndex":
        return cls(np.arange(start, stop, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.positions.size)

    def __iter__(self):
        return iter(self.positions.tolist())

    def __contains__(self, p) -> bool:
        i = np.searchsorted(self.positions, p)
        return bool(i < self.positions.size and self.positions[i] == p)

    def issubset(self, other: "SaliencyIndex") -> bool:
        return bool(np.isin(self.positions, other.positions).all())

    def within(self, start: int, stop: int) -> "SaliencyIndex":
        p = self.positions
        return SaliencyIndex(p[(p >= start) & (p < stop)])


def _positions(idx) -> np.ndarray:
    if isinstance(idx, SaliencyIndex):
        return idx.positions
    return np.asarray(idx, dtype=np.int64).reshape(-1)


def _check_bounds(pos: np.ndarray, n_rows: int) -> None:
    if pos.size and (pos.min() < 0 or pos.max() >= n_rows):
        raise IndexBoundsError(f"index out of bounds for {n_rows} rows: min={pos.min()}, max={pos.max()}")


def scatter_rows(target: np.ndarray, idx, rows) -> None:
    """Overwrite ``target[idx]`` with ``rows`` in place; other rows are untouched."""
    pos = _positions(idx)
    rows = np.asarray(rows, dtype=np.float64)
    _check_bounds(pos, target.shape[0])
    if rows.ndim != 2 or rows.shape != (pos.size, target.shape[1]):
        raise ShapeError(f"scatter of {rows.shape} rows into {pos.size} positions of width {target.shape[1]}")
    if pos.size:
        target[pos] = rows


def gather_rows(source: np.ndarray, idx) -> np.ndarray:
    """Copy of ``source[idx]`` in index order; an empty index gives a 0-row matrix."""
    pos = _positions(idx)
    _check_bounds(pos, source.shape[0])
    return np.ascontiguousarray(source[pos])


@dataclass
class LayerCache:
    K: np.ndarray
    V: np.ndarray
    C: np.ndarray
    ffn_out: np.ndarray
    valid: bool = False

    def matrices(self) -> dict[str, np.ndarray]:
        return {"K": self.K, "V": self.V, "C": self.C, "ffn_out": self.ffn_out}


@dataclass
class CacheSet:
    """One generation session's caches, preallocated at ``L_P + L_R`` rows."""

    layers: list[LayerCache] = field(default_factory=list)
    L_P: int = 0
    L_R: int = 0

    @property
    def L_total(self) -> int:
        return self.L_P + self.L_R

    @classmethod
    def allocate(cls, config: ModelConfig, L_P: int, L_R: int) -> "CacheSet":
        n = L_P + L_R
        layers = [
            LayerCache(
                K=np.zeros((n, config.kv_width)),
                V=np.zeros((n, config.kv_width)),
                C=np.zeros((n, config.d_model)),
                ffn_out=np.zeros((n, config.d_model)),
            )
            for _ in range(config.n_layers)
        ]
        return cls(layers, L_P, L_R)

    @property
    def valid(self) -> bool:
        return bool(self.layers) and all(lc.valid for lc in self.layers)

    def require_valid(self) -> None:
        if not self.valid:
            raise CacheStateError("caches are not populated; run a full step first")

    def snapshot(self) -> "CacheSet":
        return CacheSet(
            [LayerCache(lc.K.copy(), lc.V.copy(), lc.C.copy(), lc.ffn_out.copy(), lc.valid) for lc in self.layers],
            self.L_P,
            self.L_R,
        )


def dump_matrix_csv(matrix: np.ndarray, path) -> None:
    """Debug dump: one line per row, ``row`` index followed by the values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [f"c{j}" for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([i] + [repr(float(v)) for v in row])
