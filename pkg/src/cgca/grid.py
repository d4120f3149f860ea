"""Sparse voxel states, neighborhoods, nearest-target projection and voxelization.

A state is a set of occupied integer cells on Z^3, each carrying a latent
code of fixed length K.  Cells not stored are unoccupied and have an
implicit zero code.  Bounded states live in [0, R)^3; `resolution=None`
switches bounds checking and neighborhood clipping off (useful for small
hand-built states in tests).

The world box starts at WORLD_MIN per axis; cell (i, j, k) spans
[WORLD_MIN + i*eps, WORLD_MIN + (i+1)*eps) and so on per axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyStateError, FormatError, OutOfBoundsError

Coord = tuple[int, int, int]

WORLD_MIN = -1.0

# Packed coordinate keys: 21 bits per axis with a bias so moderately
# negative coordinates (unbounded states) still pack and sort correctly.
_PACK_BIAS = 1 << 20
_PACK_SHIFT = 21
_PACK_MASK = (1 << _PACK_SHIFT) - 1


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer coordinates into sortable int64 keys.

    Sorting the keys is equivalent to lexicographic (i, j, k) sorting.
    """
    c = np.asarray(coords, dtype=np.int64) + _PACK_BIAS
    if c.size and (c.min() < 0 or c.max() > _PACK_MASK):
        raise OutOfBoundsError("coordinates exceed the packable range")
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError("coords must have shape (N, 3)")
    return (c[:, 0] << (2 * _PACK_SHIFT)) | (c[:, 1] << _PACK_SHIFT) | c[:, 2]


def unpack_coords(keys: np.ndarray) -> np.ndarray:
    """Inverse of pack_coords."""
    keys = np.asarray(keys, dtype=np.int64)
    i = (keys >> (2 * _PACK_SHIFT)) - _PACK_BIAS
    j = ((keys >> _PACK_SHIFT) & _PACK_MASK) - _PACK_BIAS
    k = (keys & _PACK_MASK) - _PACK_BIAS
    return np.stack([i, j, k], axis=1)


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Metric ball used both for growth neighborhoods and target projection."""

    radius: int = 2
    metric: str = "l1"

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.metric not in ("l1", "linf"):
            raise ValueError(f"metric must be 'l1' or 'linf', got {self.metric!r}")

    def offsets(self) -> np.ndarray:
        """All offsets with |delta| <= radius, lexicographically sorted."""
        return _offsets(self.radius, self.metric)

    @property
    def minkowski_p(self) -> float:
        return 1.0 if self.metric == "l1" else np.inf

    def distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = np.abs(np.asarray(a) - np.asarray(b))
        return d.sum(axis=-1) if self.metric == "l1" else d.max(axis=-1)


@lru_cache(maxsize=None)
def _offsets(radius: int, metric: str) -> np.ndarray:
    r = radius
    axis = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    if metric == "l1":
        grid = grid[np.abs(grid).sum(axis=1) <= r]
    order = np.lexsort((grid[:, 2], grid[:, 1], grid[:, 0]))
    out = grid[order].astype(np.int64)
    out.setflags(write=False)
    return out


class SparseState:
    """Occupied cells with per-cell latent codes; immutable after build.

    Internally kept as lexicographically sorted coordinate/code arrays plus
    packed keys so lookups and iteration order are deterministic.
    """

    __slots__ = ("_coords", "_codes", "_keys", "latent_dim", "resolution", "voxel_size")

    def __init__(
        self,
        cells: Mapping[Coord, np.ndarray] | None,
        latent_dim: int,
        resolution: int | None,
        voxel_size: float,
    ):
        if cells:
            coords = np.array(sorted(cells.keys()), dtype=np.int64)
            codes = np.array([np.asarray(cells[tuple(c)], dtype=np.float64) for c in coords])
            codes = codes.reshape(len(coords), -1)
        else:
            coords = np.zeros((0, 3), dtype=np.int64)
            codes = np.zeros((0, latent_dim), dtype=np.float64)
        self._init_arrays(coords, codes, latent_dim, resolution, voxel_size)

    @classmethod
    def from_arrays(
        cls,
        coords: np.ndarray,
        codes: np.ndarray,
        resolution: int | None,
        voxel_size: float,
    ) -> "SparseState":
        """Build from already-deduplicated arrays; rows get sorted."""
        state = cls.__new__(cls)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        codes = np.asarray(codes, dtype=np.float64)
        if codes.ndim == 1:
            codes = codes.reshape(len(coords), -1)
        if codes.shape[0] != len(coords):
            raise ValueError("codes and coords disagree on cell count")
        keys = pack_coords(coords)
        order = np.argsort(keys, kind="stable")
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate coordinates in sparse state")
        state._init_arrays(coords[order], codes[order], codes.shape[1], resolution, voxel_size)
        return state

    def _init_arrays(self, coords, codes, latent_dim, resolution, voxel_size):
        if codes.shape[1] != latent_dim and len(coords):
            raise ValueError(f"codes have length {codes.shape[1]}, expected {latent_dim}")
        if resolution is not None and len(coords):
            if coords.min() < 0 or coords.max() >= resolution:
                raise OutOfBoundsError(
                    f"cell indices outside [0, {resolution})^3"
                )
        self._coords = coords
        self._coords.setflags(write=False)
        self._codes = codes if len(coords) else codes.reshape(0, latent_dim)
        self._codes.setflags(write=False)
        self._keys = pack_coords(coords)
        self._keys.setflags(write=False)
        self.latent_dim = int(latent_dim)
        self.resolution = resolution
        self.voxel_size = float(voxel_size)

    # -- read access ---------------------------------------------------

    def __len__(self) -> int:
        return len(self._coords)

    @property
    def is_empty(self) -> bool:
        return len(self._coords) == 0

    @property
    def coords(self) -> np.ndarray:
        """(M, 3) int64 occupied cells, lexicographically sorted."""
        return self._coords

    @property
    def codes(self) -> np.ndarray:
        """(M, K) float64 latent codes aligned with coords."""
        return self._codes

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def cells(self) -> dict[Coord, np.ndarray]:
        return {tuple(c): z for c, z in zip(map(tuple, self._coords), self._codes)}

    def contains(self, coords: np.ndarray) -> np.ndarray:
        """Boolean occupancy mask for query coordinates (N, 3)."""
        _, found = self.lookup(coords)
        return found

    def lookup(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Codes for query coords; zeros where unoccupied.

        Returns (codes (N, K), found (N,) bool).
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        out = np.zeros((len(coords), self.latent_dim), dtype=np.float64)
        if self.is_empty or len(coords) == 0:
            return out, np.zeros(len(coords), dtype=bool)
        want = pack_coords(coords)
        pos = np.searchsorted(self._keys, want)
        pos_c = np.minimum(pos, len(self._keys) - 1)
        found = self._keys[pos_c] == want
        out[found] = self._codes[pos_c[found]]
        return out, found

    def code_at(self, coord: Coord) -> np.ndarray:
        codes, found = self.lookup(np.array([coord]))
        if not found[0]:
            return np.zeros(self.latent_dim)
        return codes[0]

    def cell_centers(self) -> np.ndarray:
        """World positions of occupied cell centers."""
        return cell_center(self._coords, self.voxel_size)

    def with_codes(self, codes: np.ndarray) -> "SparseState":
        """Same occupancy, different codes (aligned with sorted coords)."""
        return SparseState.from_arrays(self._coords, codes, self.resolution, self.voxel_size)

    def occupancy_equal(self, other: "SparseState") -> bool:
        return len(self) == len(other) and bool(np.array_equal(self._keys, other._keys))


# -- coordinate/world conversions ---------------------------------------


def cell_center(coords: np.ndarray, voxel_size: float) -> np.ndarray:
    return WORLD_MIN + (np.asarray(coords, dtype=np.float64) + 0.5) * voxel_size


def world_to_cell(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor((np.asarray(points, dtype=np.float64) - WORLD_MIN) / voxel_size).astype(np.int64)


# -- operations ----------------------------------------------------------


def neighborhood(state: SparseState, spec: NeighborhoodSpec) -> np.ndarray:
    """All cells within spec.radius of an occupied cell, clipped to bounds.

    Returns (N, 3) int64, lexicographically sorted and deduplicated; the
    occupied cells themselves are always included.  Empty state -> empty.
    """
    if state.is_empty:
        return np.zeros((0, 3), dtype=np.int64)
    cand = (state.coords[:, None, :] + spec.offsets()[None, :, :]).reshape(-1, 3)
    if state.resolution is not None:
        keep = ((cand >= 0) & (cand < state.resolution)).all(axis=1)
        cand = cand[keep]
    keys = np.unique(pack_coords(cand))
    return unpack_coords(keys)


def nearest_target_cells(
    state: SparseState, target: SparseState, spec: NeighborhoodSpec
) -> np.ndarray:
    """For each target cell, the closest neighborhood cell of `state`.

    Distance ties break toward the lexicographically smallest coordinate.
    Returns the deduplicated, sorted (M, 3) set of selected cells.
    """
    if state.is_empty:
        raise EmptyStateError("state has no occupied cells; neighborhood undefined")
    if target.is_empty:
        raise EmptyStateError("target has no occupied cells")
    hood = neighborhood(state, spec)
    pts = hood.astype(np.float64)
    tree = cKDTree(pts)
    q = target.coords.astype(np.float64)
    dists, _ = tree.query(q, k=1, p=spec.minkowski_p)
    # All minimizers, then smallest row index = lexicographic tie-break
    # because `hood` is lexicographically sorted.
    balls = tree.query_ball_point(q, r=dists, p=spec.minkowski_p)
    picks = np.fromiter((min(b) for b in balls), dtype=np.int64, count=len(balls))
    return hood[np.unique(picks)]


def voxelize(
    points: np.ndarray,
    resolution: int,
    voxel_size: float,
    latent_dim: int,
) -> SparseState:
    """Occupy every cell containing at least one point; codes all zero."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return SparseState.from_arrays(
            np.zeros((0, 3), np.int64), np.zeros((0, latent_dim)), resolution, voxel_size
        )
    cells = world_to_cell(points, voxel_size)
    if cells.min() < 0 or cells.max() >= resolution:
        bad = points[((cells < 0) | (cells >= resolution)).any(axis=1)][0]
        raise OutOfBoundsError(f"point {bad} maps outside [0, {resolution})^3")
    keys = np.unique(pack_coords(cells))
    coords = unpack_coords(keys)
    return SparseState.from_arrays(
        coords, np.zeros((len(coords), latent_dim)), resolution, voxel_size
    )


# -- persistence ---------------------------------------------------------

_STATE_MAGIC = "# cgca-state"


def save_state(state: SparseState, path) -> None:
    """CSV dump: header line, then `i,j,k,z_0,...,z_{K-1}` per cell.

    Floats are written with repr so a round-trip is bit-exact.
    """
    res = state.resolution if state.resolution is not None else 0
    lines = [f"{_STATE_MAGIC} K={state.latent_dim} R={res} eps={float(state.voxel_size)!r}"]
    for c, z in zip(state.coords, state.codes):
        lines.append(",".join([str(c[0]), str(c[1]), str(c[2])] + [repr(float(v)) for v in z]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_state(path) -> SparseState:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith(_STATE_MAGIC):
            raise FormatError(f"not a cgca state file: {path}")
        fields = dict(tok.split("=") for tok in header[len(_STATE_MAGIC):].split())
        latent_dim = int(fields["K"])
        resolution = int(fields["R"]) or None
        voxel_size = float(fields["eps"])
        coords, codes = [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            coords.append([int(v) for v in parts[:3]])
            codes.append([float(v) for v in parts[3:]])
    coords = np.array(coords, dtype=np.int64).reshape(-1, 3)
    codes = np.array(codes, dtype=np.float64).reshape(len(coords), latent_dim)
    return SparseState.from_arrays(coords, codes, resolution, voxel_size)
