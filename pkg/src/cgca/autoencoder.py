"""Encoder/decoder between near-surface distance samples and sparse embeddings.

The encoder maps coordinate-distance samples to per-cell latent codes:
samples are binned to their containing cell, cells that received no sample
within half a voxel of the surface are pruned, coordinates are re-expressed
in the local cell frame, and a shared per-sample perceptron is mean-pooled
per cell.  The decoder lifts the codes into a feature pyramid (each coarser
level averages its children and re-projects), reads a query point's feature
by summed trilinear interpolation across levels, and regresses the clamped
distance through a residual tail with a squashing output.

Samples are canonically re-sorted before pooling so the encoder is
bit-exactly invariant to input order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyStateError, NoSurfaceCellsError, OutOfBoundsError
from .grid import WORLD_MIN, SparseState, cell_center, pack_coords, world_to_cell
from .net import MlpSpec, Node, ParamStore, Tape, mlp_forward, mlp_init


@dataclass(frozen=True)
class PointSample:
    """One coordinate-distance pair (signed in SDF mode, >= 0 in UDF mode)."""

    p: np.ndarray
    d: float


@dataclass
class PyramidLevel:
    coords: np.ndarray  # (M, 3) indices at this level's resolution, sorted
    feats: np.ndarray   # (M, L)


@dataclass
class FeaturePyramid:
    """Sparse multi-resolution feature grids; level k is downsampled 2^(k-1)x."""

    levels: list[PyramidLevel]
    voxel_size: float  # base-level spacing in world units

    def spacing(self, level: int) -> float:
        return self.voxel_size * (2 ** level)


@dataclass(frozen=True)
class AutoencoderConfig:
    latent_dim: int = 32
    feature_dim: int = 32
    levels: int = 3
    enc_hidden: int = 32
    enc_layers: int = 4
    dec_hidden: int = 64
    dec_blocks: int = 2
    resolution: int = 32
    voxel_size: float = 2 / 32
    mode: str = "sdf"

    def __post_init__(self):
        if self.mode not in ("sdf", "udf"):
            raise ValueError(f"mode must be 'sdf' or 'udf', got {self.mode!r}")
        if self.levels < 1:
            raise ValueError("need at least one pyramid level")


_CORNER_OFFSETS = np.stack(
    np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), axis=-1
).reshape(8, 3)


class Autoencoder:
    """Bundles the encoder, pyramid and decoder parameter groups."""

    def __init__(self, config: AutoencoderConfig, store: ParamStore | None = None, seed: int = 0):
        self.config = config
        k, l = config.latent_dim, config.feature_dim
        self.enc_spec = MlpSpec((4,) + (config.enc_hidden,) * config.enc_layers + (k,))
        self.level_specs = [MlpSpec((k if i == 0 else l, l, l)) for i in range(config.levels)]
        self.dec_spec = MlpSpec((l, config.dec_hidden, 1), residual_blocks=config.dec_blocks)
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            mlp_init(store, "enc", self.enc_spec, rng)
            for i, spec in enumerate(self.level_specs):
                mlp_init(store, f"pyr{i}", spec, rng)
            mlp_init(store, "dec", self.dec_spec, rng)
        self.params = store

    # -- encoder ---------------------------------------------------------

    def _prepare_samples(self, points: np.ndarray, dists: np.ndarray):
        """Prune, sort canonically and bin samples; returns encoder inputs."""
        cfg = self.config
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dists = np.asarray(dists, dtype=np.float64).ravel()
        cells = world_to_cell(points, cfg.voxel_size)
        if len(points) and (cells.min() < 0 or cells.max() >= cfg.resolution):
            raise OutOfBoundsError("samples fall outside the grid")
        keys = pack_coords(cells)
        surface = np.abs(dists) <= cfg.voxel_size / 2
        surface_keys = np.unique(keys[surface])
        if len(surface_keys) == 0:
            raise NoSurfaceCellsError("no sample lies within half a voxel of the surface")
        pos = np.minimum(np.searchsorted(surface_keys, keys), len(surface_keys) - 1)
        keep = surface_keys[pos] == keys
        points, dists, keys, cells = points[keep], dists[keep], keys[keep], cells[keep]
        # canonical order: cell, then coordinates, then distance, so the
        # pooled sums do not depend on the caller's sample order
        order = np.lexsort((dists, points[:, 2], points[:, 1], points[:, 0], keys))
        points, dists, keys, cells = points[order], dists[order], keys[order], cells[order]
        cell_keys, seg = np.unique(keys, return_inverse=True)
        coords = cells[np.unique(seg, return_index=True)[1]]
        centers = cell_center(cells, cfg.voxel_size)
        local = (points - centers) / (cfg.voxel_size / 2)
        inputs = np.concatenate([local, dists[:, None]], axis=1)
        return inputs, seg, coords

    def _encode_traced(self, points, dists, tape: Tape) -> tuple[np.ndarray, Node]:
        inputs, seg, coords = self._prepare_samples(points, dists)
        per_sample, _ = mlp_forward(self.params, "enc", self.enc_spec, inputs, tape=tape)
        codes = tape.segment_mean(per_sample, seg, len(coords))
        return coords, codes

    def encode(self, points: np.ndarray, dists: np.ndarray) -> SparseState:
        """Sparse embedding over surface cells; order of samples is irrelevant."""
        tape = Tape(self.params)
        coords, codes = self._encode_traced(points, dists, tape)
        return SparseState.from_arrays(
            coords, codes.value, self.config.resolution, self.config.voxel_size
        )

    # -- pyramid -----------------------------------------------------------

    def _pyramid_traced(self, coords: np.ndarray, codes: Node, tape: Tape):
        levels = []
        cur_coords, cur_feats = coords, codes
        for i in range(self.config.levels):
            if i > 0:
                parents = cur_coords // 2
                pkeys, seg = np.unique(pack_coords(parents), return_inverse=True)
                cur_coords = parents[np.unique(seg, return_index=True)[1]]
                cur_feats = tape.segment_mean(cur_feats, seg, len(pkeys))
            out, _ = mlp_forward(self.params, f"pyr{i}", self.level_specs[i], cur_feats, tape=tape)
            cur_feats = out
            levels.append((cur_coords, cur_feats))
        return levels

    def build_pyramid(self, state: SparseState) -> FeaturePyramid:
        if state.is_empty:
            raise EmptyStateError("cannot build a pyramid over an empty state")
        tape = Tape(self.params)
        codes = tape.input(state.codes)
        levels = self._pyramid_traced(state.coords, codes, tape)
        return FeaturePyramid(
            levels=[PyramidLevel(c, f.value) for c, f in levels],
            voxel_size=self.config.voxel_size,
        )

    # -- decoding ------------------------------------------------------------

    def _interp_plan(self, level_coords: np.ndarray, level: int, q: np.ndarray):
        """Row indices and trilinear weights of the 8 surrounding nodes."""
        h = self.config.voxel_size * (2 ** level)
        u = (np.asarray(q, dtype=np.float64) - WORLD_MIN) / h
        i0 = np.floor(u).astype(np.int64)
        frac = u - i0
        corners = i0[:, None, :] + _CORNER_OFFSETS[None, :, :]  # (Nq, 8, 3)
        axis_w = np.where(_CORNER_OFFSETS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        weights = axis_w.prod(axis=2)  # (Nq, 8)
        keys = pack_coords(level_coords)
        flat = corners.reshape(-1, 3)
        valid = (flat >= 0).all(axis=1)
        want = np.zeros(len(flat), dtype=np.int64)
        want[valid] = pack_coords(flat[valid])
        pos = np.minimum(np.searchsorted(keys, want), len(keys) - 1)
        found = valid & (keys[pos] == want)
        idx = np.where(found, pos, 0).reshape(-1, 8)
        weights = weights * found.reshape(-1, 8)
        return idx, weights

    def _interp_traced(self, levels, q: np.ndarray, tape: Tape) -> Node:
        total = None
        for level, (coords, feats) in enumerate(levels):
            idx, w = self._interp_plan(coords, level, q)
            contrib = tape.weighted_gather(feats, idx, w)
            total = contrib if total is None else tape.add(total, contrib)
        return total

    def interpolate(self, pyramid: FeaturePyramid, q: np.ndarray) -> np.ndarray:
        """Summed trilinear feature at query points (single point or batch)."""
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, 3)
        self._check_in_box(q)
        tape = Tape(self.params)
        levels = [(lv.coords, tape.input(lv.feats)) for lv in pyramid.levels]
        node = self._interp_traced(levels, q, tape)
        return node.value[0] if single else node.value

    def _check_in_box(self, q: np.ndarray) -> None:
        hi = WORLD_MIN + self.config.resolution * self.config.voxel_size
        if len(q) and (q.min() < WORLD_MIN or q.max() > hi):
            raise OutOfBoundsError("query points outside the world box")

    def _tail_traced(self, feats: Node, tape: Tape) -> Node:
        raw, _ = mlp_forward(self.params, "dec", self.dec_spec, feats, tape=tape)
        return tape.tanh(raw) if self.config.mode == "sdf" else tape.sigmoid(raw)

    def decode(self, state: SparseState, q: np.ndarray) -> np.ndarray:
        """Implicit value(s) at q for the given embedding; within the codomain."""
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        vals = self.decode_many(state, q.reshape(-1, 3))
        return float(vals[0]) if single else vals

    def decode_many(self, state: SparseState, q: np.ndarray, chunk: int = 65536) -> np.ndarray:
        self._check_in_box(q)
        pyramid = self.build_pyramid(state)
        out = np.empty(len(q))
        for lo in range(0, len(q), chunk):
            part = q[lo : lo + chunk]
            tape = Tape(self.params)
            levels = [(lv.coords, tape.input(lv.feats)) for lv in pyramid.levels]
            feats = self._interp_traced(levels, part, tape)
            out[lo : lo + chunk] = self._tail_traced(feats, tape).value[:, 0]
        return out

    # -- full training-time pass ----------------------------------------------

    def forward_traced(self, points, dists, q):
        """End-to-end recorded pass: samples -> codes -> decoded values.

        Returns (tape, coords, codes node, values node); seed the backward
        on the value and code nodes to train every parameter group at once.
        """
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        self._check_in_box(q)
        tape = Tape(self.params)
        coords, codes = self._encode_traced(points, dists, tape)
        levels = self._pyramid_traced(coords, codes, tape)
        feats = self._interp_traced(levels, q, tape)
        values = self._tail_traced(feats, tape)
        return tape, coords, codes, values
