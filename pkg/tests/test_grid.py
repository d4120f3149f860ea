import numpy as np
import pytest

from cgca.errors import EmptyStateError, FormatError, OutOfBoundsError
from cgca.grid import (
    NeighborhoodSpec,
    SparseState,
    cell_center,
    load_state,
    nearest_target_cells,
    neighborhood,
    save_state,
    voxelize,
)


def make_state(coords, latent_dim=4, resolution=None, voxel_size=0.0625, codes=None):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if codes is None:
        codes = np.zeros((len(coords), latent_dim))
    return SparseState.from_arrays(coords, codes, resolution, voxel_size)


def as_set(coords):
    return set(map(tuple, np.asarray(coords).reshape(-1, 3)))


class TestNeighborhood:
    def test_empty_state_gives_empty_set(self):
        s = make_state(np.zeros((0, 3)))
        assert len(neighborhood(s, NeighborhoodSpec(2, "l1"))) == 0

    def test_single_cell_r1_l1_unbounded(self):
        s = make_state([(0, 0, 0)])
        assert len(neighborhood(s, NeighborhoodSpec(1, "l1"))) == 7

    def test_single_cell_r2_l1_unbounded(self):
        # |delta|_1 <= 2 enumerates 1 + 6 + 18 cells
        s = make_state([(0, 0, 0)])
        hood = neighborhood(s, NeighborhoodSpec(2, "l1"))
        assert len(hood) == 25
        brute = {
            (i, j, k)
            for i in range(-2, 3)
            for j in range(-2, 3)
            for k in range(-2, 3)
            if abs(i) + abs(j) + abs(k) <= 2
        }
        assert as_set(hood) == brute

    def test_occupied_cells_always_included(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            coords = rng.integers(0, 20, size=(12, 3))
            coords = np.unique(coords, axis=0)
            s = make_state(coords, resolution=20)
            hood = as_set(neighborhood(s, NeighborhoodSpec(2, "l1")))
            assert as_set(coords) <= hood

    def test_monotone_in_radius(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            coords = np.unique(rng.integers(0, 16, size=(8, 3)), axis=0)
            s = make_state(coords, resolution=16)
            for metric in ("l1", "linf"):
                prev = as_set(neighborhood(s, NeighborhoodSpec(1, metric)))
                for r in (2, 3):
                    cur = as_set(neighborhood(s, NeighborhoodSpec(r, metric)))
                    assert prev <= cur
                    prev = cur

    def test_clipped_to_bounds(self):
        s = make_state([(0, 0, 0)], resolution=8)
        hood = neighborhood(s, NeighborhoodSpec(2, "l1"))
        assert hood.min() >= 0
        assert len(hood) < 25


class TestNearestTargetCells:
    def test_state_equals_target(self):
        coords = [(1, 2, 3), (4, 5, 6), (2, 2, 2)]
        s = make_state(coords)
        g = nearest_target_cells(s, s, NeighborhoodSpec(2, "l1"))
        assert as_set(g) == as_set(coords)

    def test_target_inside_neighborhood(self):
        s = make_state([(0, 0, 0)])
        x = make_state([(1, 0, 0)])
        g = nearest_target_cells(s, x, NeighborhoodSpec(2, "l1"))
        assert as_set(g) == {(1, 0, 0)}

    def test_distant_target_projects_to_ring(self):
        s = make_state([(0, 0, 0)])
        x = make_state([(5, 0, 0)])
        g = nearest_target_cells(s, x, NeighborhoodSpec(2, "l1"))
        assert as_set(g) == {(2, 0, 0)}

    def test_lexicographic_tie_break(self):
        # Both (0,1,0) and (1,0,0) sit at L1 distance 1 from the target
        # direction; argmin must pick the lexicographically smallest cell.
        s = make_state([(0, 0, 0)])
        x = make_state([(2, 2, 0)])
        g = nearest_target_cells(s, x, NeighborhoodSpec(1, "l1"))
        hood = neighborhood(s, NeighborhoodSpec(1, "l1"))
        spec = NeighborhoodSpec(1, "l1")
        d = spec.distance(hood, np.array([2, 2, 0]))
        best = hood[d == d.min()]
        expected = min(map(tuple, best))
        assert as_set(g) == {expected}

    def test_matches_bruteforce_on_random_states(self):
        rng = np.random.default_rng(3)
        for trial in range(15):
            coords = np.unique(rng.integers(0, 24, size=(10, 3)), axis=0)
            tcoords = np.unique(rng.integers(0, 24, size=(6, 3)), axis=0)
            s = make_state(coords, resolution=24)
            x = make_state(tcoords, resolution=24)
            spec = NeighborhoodSpec(2, "l1" if trial % 2 else "linf")
            got = as_set(nearest_target_cells(s, x, spec))
            hood = neighborhood(s, spec)
            want = set()
            for t in x.coords:
                d = spec.distance(hood, t)
                cands = hood[d == d.min()]
                want.add(min(map(tuple, cands)))
            assert got == want

    def test_result_subset_of_neighborhood_and_bounded_size(self):
        rng = np.random.default_rng(5)
        coords = np.unique(rng.integers(0, 20, size=(8, 3)), axis=0)
        tcoords = np.unique(rng.integers(0, 20, size=(12, 3)), axis=0)
        s, x = make_state(coords, resolution=20), make_state(tcoords, resolution=20)
        spec = NeighborhoodSpec(2, "l1")
        g = nearest_target_cells(s, x, spec)
        assert as_set(g) <= as_set(neighborhood(s, spec))
        assert len(g) <= len(x)

    def test_target_inside_hood_is_identity(self):
        s = make_state([(3, 3, 3), (4, 3, 3)])
        x = make_state([(3, 3, 3), (5, 3, 3), (4, 4, 4)])
        spec = NeighborhoodSpec(2, "l1")
        hood = as_set(neighborhood(s, spec))
        assert as_set(x.coords) <= hood
        assert as_set(nearest_target_cells(s, x, spec)) == as_set(x.coords)

    def test_empty_state_raises(self):
        s = make_state(np.zeros((0, 3)))
        x = make_state([(0, 0, 0)])
        with pytest.raises(EmptyStateError):
            nearest_target_cells(s, x, NeighborhoodSpec(2, "l1"))
        with pytest.raises(EmptyStateError):
            nearest_target_cells(x, s, NeighborhoodSpec(2, "l1"))


class TestVoxelize:
    def test_empty_points(self):
        s = voxelize(np.zeros((0, 3)), 32, 2 / 32, 4)
        assert s.is_empty

    def test_single_point_at_cell_center(self):
        eps = 2 / 32
        p = cell_center(np.array([[5, 6, 7]]), eps)
        s = voxelize(p, 32, eps, 4)
        assert as_set(s.coords) == {(5, 6, 7)}

    def test_sphere_matches_per_point_oracle(self):
        rng = np.random.default_rng(17)
        d = rng.standard_normal((1000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = 0.6 * d
        eps = 2 / 32
        s = voxelize(pts, 32, eps, 4)
        oracle = {tuple(np.floor((p + 1) / eps).astype(int)) for p in pts}
        assert as_set(s.coords) == oracle

    def test_out_of_bounds_point_raises(self):
        with pytest.raises(OutOfBoundsError):
            voxelize(np.array([[1.5, 0.0, 0.0]]), 32, 2 / 32, 4)

    def test_roundtrip_with_cell_centers(self):
        rng = np.random.default_rng(29)
        coords = np.unique(rng.integers(0, 32, size=(40, 3)), axis=0)
        eps = 2 / 32
        s = make_state(coords, resolution=32, voxel_size=eps)
        back = voxelize(s.cell_centers(), 32, eps, 4)
        assert as_set(back.coords) == as_set(coords)


class TestSparseState:
    def test_duplicate_coords_rejected(self):
        with pytest.raises(ValueError):
            SparseState.from_arrays(
                np.array([[0, 0, 0], [0, 0, 0]]), np.zeros((2, 3)), None, 0.1
            )

    def test_bounded_state_rejects_out_of_range(self):
        with pytest.raises(OutOfBoundsError):
            make_state([(0, 0, 40)], resolution=32)

    def test_lookup_missing_gives_zero(self):
        s = make_state([(1, 1, 1)], codes=np.ones((1, 4)))
        codes, found = s.lookup(np.array([[1, 1, 1], [2, 2, 2]]))
        assert found.tolist() == [True, False]
        assert np.array_equal(codes[0], np.ones(4))
        assert np.array_equal(codes[1], np.zeros(4))

    def test_state_csv_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(41)
        coords = np.unique(rng.integers(0, 32, size=(25, 3)), axis=0)
        codes = rng.standard_normal((len(coords), 8))
        s = SparseState.from_arrays(coords, codes, 32, 2 / 32)
        path = tmp_path / "state.csv"
        save_state(s, path)
        back = load_state(path)
        assert back.latent_dim == 8
        assert back.resolution == 32
        assert back.voxel_size == s.voxel_size
        assert np.array_equal(back.coords, s.coords)
        assert np.array_equal(back.codes, s.codes)

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bogus.csv"
        path.write_text("# not-a-state K=4 R=0 eps=0.1\n")
        with pytest.raises(FormatError):
            load_state(path)
