import numpy as np
import pytest

from cgca.autoencoder import (
    Autoencoder,
    AutoencoderConfig,
    FeaturePyramid,
    PyramidLevel,
)
from cgca.errors import EmptyStateError, NoSurfaceCellsError, OutOfBoundsError
from cgca.grid import SparseState, cell_center
from cgca.loss import autoencoder_loss
from cgca.net import finite_difference_probe


def small_ae(seed=0, mode="sdf", levels=3):
    cfg = AutoencoderConfig(
        latent_dim=4, feature_dim=6, levels=levels,
        enc_hidden=8, enc_layers=2, dec_hidden=8, dec_blocks=1,
        resolution=16, voxel_size=2 / 16, mode=mode,
    )
    return Autoencoder(cfg, seed=seed)


def band_samples(rng, n=200, eps=2 / 16):
    """Random points with fake distances inside the surface band."""
    pts = rng.uniform(-0.8, 0.8, size=(n, 3))
    d = rng.uniform(-eps / 2, eps / 2, size=n)
    return pts, d


class TestEncode:
    def test_duplicate_sample_is_idempotent_under_mean(self):
        # Pooling is exactly idempotent; across different batch sizes the
        # per-sample matmul may differ by one ulp (BLAS gemv vs gemm), so
        # the cross-call comparison allows exactly that much.
        ae = small_ae()
        p = np.array([[0.11, 0.2, -0.3]])
        d = np.array([0.01])
        single = ae.encode(p, d)
        double = ae.encode(np.repeat(p, 2, axis=0), np.repeat(d, 2))
        assert np.array_equal(single.coords, double.coords)
        np.testing.assert_allclose(single.codes, double.codes, rtol=1e-15, atol=1e-15)

    def test_mean_pooling_exactly_idempotent_within_batch(self):
        from cgca.net import ParamStore, Tape

        store = ParamStore()
        tape = Tape(store)
        row = np.random.default_rng(0).standard_normal((1, 5))
        stacked = tape.input(np.repeat(row, 3, axis=0))
        pooled = tape.segment_mean(stacked, np.zeros(3, dtype=int), 1)
        assert pooled.value.tobytes() == row.tobytes()

    def test_zero_params_give_zero_codes(self):
        ae = small_ae()
        for name in ae.params.names():
            if name.startswith("enc"):
                ae.params.set_value(name, np.zeros_like(ae.params.value(name)))
        rng = np.random.default_rng(0)
        state = ae.encode(*band_samples(rng))
        assert not state.codes.any()

    def test_permutation_equivariance_bit_exact(self):
        ae = small_ae(seed=3)
        rng = np.random.default_rng(5)
        pts, d = band_samples(rng, 300)
        perm = rng.permutation(len(pts))
        a = ae.encode(pts, d)
        b = ae.encode(pts[perm], d[perm])
        assert np.array_equal(a.coords, b.coords)
        assert a.codes.tobytes() == b.codes.tobytes()

    def test_pruning_drops_far_cells(self):
        ae = small_ae()
        eps = ae.config.voxel_size
        near = np.array([[0.0, 0.0, 0.0]])
        far = np.array([[0.5, 0.5, 0.5]])
        pts = np.vstack([near, far])
        d = np.array([0.0, 10 * eps])  # far sample's cell holds no surface
        state = ae.encode(pts, d)
        assert len(state) == 1

    def test_all_pruned_raises(self):
        ae = small_ae()
        with pytest.raises(NoSurfaceCellsError):
            ae.encode(np.array([[0.0, 0.0, 0.0]]), np.array([1.0]))


class TestPyramid:
    def test_single_cell_gives_one_cell_per_level(self):
        ae = small_ae()
        state = SparseState.from_arrays(
            np.array([[5, 5, 5]]), np.ones((1, 4)), 16, 2 / 16
        )
        pyr = ae.build_pyramid(state)
        assert [len(lv.coords) for lv in pyr.levels] == [1, 1, 1]
        assert np.array_equal(pyr.levels[1].coords, [[2, 2, 2]])
        assert np.array_equal(pyr.levels[2].coords, [[1, 1, 1]])

    def test_aligned_block_downsamples_to_one_cell(self):
        ae = small_ae()
        block = np.array([[i, j, k] for i in (4, 5) for j in (4, 5) for k in (4, 5)])
        state = SparseState.from_arrays(block, np.ones((8, 4)), 16, 2 / 16)
        pyr = ae.build_pyramid(state)
        assert len(pyr.levels[0].coords) == 8
        assert len(pyr.levels[1].coords) == 1

    def test_occupancy_of_next_level_is_downsample(self):
        ae = small_ae()
        rng = np.random.default_rng(11)
        coords = np.unique(rng.integers(0, 16, size=(30, 3)), axis=0)
        state = SparseState.from_arrays(coords, rng.standard_normal((len(coords), 4)), 16, 2 / 16)
        pyr = ae.build_pyramid(state)
        expect = {tuple(c // 2) for c in coords}
        assert set(map(tuple, pyr.levels[1].coords)) == expect

    def test_zero_params_zero_features(self):
        ae = small_ae()
        for name in ae.params.names():
            if name.startswith("pyr"):
                ae.params.set_value(name, np.zeros_like(ae.params.value(name)))
        state = SparseState.from_arrays(np.array([[3, 3, 3]]), np.ones((1, 4)), 16, 2 / 16)
        pyr = ae.build_pyramid(state)
        for lv in pyr.levels:
            assert not lv.feats.any()

    def test_empty_state_raises(self):
        ae = small_ae()
        empty = SparseState.from_arrays(np.zeros((0, 3)), np.zeros((0, 4)), 16, 2 / 16)
        with pytest.raises(EmptyStateError):
            ae.build_pyramid(empty)


class TestInterpolate:
    def hand_pyramid(self, levels):
        return FeaturePyramid(levels=levels, voxel_size=2 / 16)

    def test_exact_node_hit_returns_feature(self):
        ae = small_ae()
        f = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
        pyr = self.hand_pyramid([PyramidLevel(np.array([[4, 4, 4]]), f)])
        q = -1.0 + np.array([4, 4, 4]) * (2 / 16)
        got = ae.interpolate(pyr, q)
        assert np.allclose(got, f[0], atol=1e-14)

    def test_midpoint_blends_two_nodes(self):
        ae = small_ae(levels=1)
        feats = np.array([[2.0] * 6, [4.0] * 6])
        pyr = self.hand_pyramid([PyramidLevel(np.array([[4, 4, 4], [5, 4, 4]]), feats)])
        h = 2 / 16
        q = -1.0 + np.array([4.5, 4.0, 4.0]) * h
        got = ae.interpolate(pyr, q)
        assert np.allclose(got, np.full(6, 3.0), atol=1e-14)

    def test_uniform_grid_partition_of_unity(self):
        ae = small_ae()
        rng = np.random.default_rng(13)
        u = rng.standard_normal(6)
        levels = []
        for level in range(3):
            n = 16 // (2**level) + 1
            coords = np.stack(
                np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1
            ).reshape(-1, 3)
            levels.append(PyramidLevel(coords, np.tile(u, (len(coords), 1))))
        pyr = self.hand_pyramid(levels)
        qs = rng.uniform(-0.95, 0.85, size=(20, 3))
        got = ae.interpolate(pyr, qs)
        assert np.allclose(got, 3 * u, atol=1e-12)

    def test_continuity_under_small_perturbation(self):
        ae = small_ae(seed=7)
        rng = np.random.default_rng(17)
        pts, d = band_samples(rng, 300)
        state = ae.encode(pts, d)
        pyr = ae.build_pyramid(state)
        q = rng.uniform(-0.5, 0.5, size=(50, 3))
        dq = 1e-8 * rng.standard_normal((50, 3))
        a = ae.interpolate(pyr, q)
        b = ae.interpolate(pyr, q + dq)
        assert np.max(np.abs(a - b)) < 1e-5

    def test_out_of_box_rejected(self):
        ae = small_ae()
        pyr = self.hand_pyramid([PyramidLevel(np.array([[0, 0, 0]]), np.zeros((1, 6)))])
        with pytest.raises(OutOfBoundsError):
            ae.interpolate(pyr, np.array([2.0, 0.0, 0.0]))


class TestDecode:
    def test_codomain_sdf(self):
        ae = small_ae(seed=1)
        rng = np.random.default_rng(19)
        pts, d = band_samples(rng, 200)
        state = ae.encode(pts, d)
        q = rng.uniform(-0.9, 0.9, size=(10_000, 3))
        vals = ae.decode_many(state, q)
        assert (np.abs(vals) <= 1.0).all()

    def test_codomain_udf(self):
        ae = small_ae(seed=2, mode="udf")
        rng = np.random.default_rng(23)
        pts, d = band_samples(rng, 200)
        state = ae.encode(pts, np.abs(d))
        vals = ae.decode_many(state, rng.uniform(-0.9, 0.9, size=(2000, 3)))
        assert ((vals >= 0.0) & (vals <= 1.0)).all()

    def test_deterministic(self):
        ae = small_ae(seed=3)
        rng = np.random.default_rng(29)
        pts, d = band_samples(rng, 150)
        state = ae.encode(pts, d)
        q = rng.uniform(-0.5, 0.5, size=(64, 3))
        assert np.array_equal(ae.decode_many(state, q), ae.decode_many(state, q))

    def test_single_query_returns_scalar(self):
        ae = small_ae(seed=4)
        rng = np.random.default_rng(31)
        pts, d = band_samples(rng, 100)
        state = ae.encode(pts, d)
        v = ae.decode(state, np.array([0.1, 0.1, 0.1]))
        assert isinstance(v, float)


def nudge_biases(store, rng):
    """Move biases off zero so no relu preactivation sits exactly at its kink
    (zero-bias inits make whole dead rows hit 0.0, which corrupts central
    differences while the analytic subgradient stays valid)."""
    for name in store.names():
        if name.endswith(".b"):
            v = store.value(name)
            store.set_value(name, v + rng.uniform(0.01, 0.05, size=v.shape))


class TestEndToEndGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_full_stack_matches_finite_differences(self, seed):
        ae = small_ae(seed=seed)
        rng = np.random.default_rng(40 + seed)
        nudge_biases(ae.params, rng)
        pts, d = band_samples(rng, 60)
        q = rng.uniform(-0.6, 0.6, size=(25, 3))
        dq = rng.uniform(-0.2, 0.2, size=25)
        beta = 0.01
        eps = ae.config.voxel_size

        def loss_fn():
            tape, coords, codes, values = ae.forward_traced(pts, d, q)
            loss, g_dec, g_codes = autoencoder_loss(
                values.value[:, 0], dq, codes.value, beta, eps, mode="sdf"
            )
            tape.backward([(values, g_dec[:, None]), (codes, g_codes)])
            return loss

        err = finite_difference_probe(loss_fn, ae.params, rng, probes_per_param=2)
        assert err < 1e-4
