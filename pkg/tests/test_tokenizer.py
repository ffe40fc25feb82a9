import numpy as np
import pytest

from ordermarg import fileio
from ordermarg.data import ShapeSpec, make_shape_dataset
from ordermarg.errors import ChecksumError, ConfigError, ContractError, DimensionError, TokenIndexError
from ordermarg.tokenizer import (Codebook, TokenGrid, corrupt_latents, decode, decode_batch,
                                 encode, encode_batch, extract_patches, fit_codebook,
                                 flipped_ratio, kmeans, noise_curve, noisy_encode,
                                 reconstruction_error)


def reference_lloyd(points, k, iters, seed):
    """Straightforward loop implementation following the documented RNG protocol."""
    rng = np.random.default_rng(seed)
    n = len(points)
    first = int(rng.integers(n))
    centers = [points[first].copy()]
    for _ in range(1, k):
        d2 = np.array([min(float(((p - c) ** 2).sum()) for c in centers) for p in points])
        centers.append(points[int(rng.choice(n, p=d2 / d2.sum()))].copy())
    centers = np.array(centers)
    history = []
    for _ in range(iters):
        labels, costs = [], []
        for p in points:
            dists = [float(((p - c) ** 2).sum()) for c in centers]
            j = int(np.argmin(dists))
            labels.append(j)
            costs.append(dists[j])
        history.append(sum(costs) / n)
        new = centers.copy()
        costs = np.array(costs)
        labels = np.array(labels)
        for j in range(k):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        for j in range(k):
            if not np.any(labels == j):
                far = int(np.argmax(costs))
                new[j] = points[far]
                costs[far] = 0.0
        if np.array_equal(new, centers):
            break
        centers = new
    return centers, history


@pytest.fixture(scope="module")
def shapes():
    return make_shape_dataset(ShapeSpec(n_per_class=40, seed=3)).images


@pytest.fixture(scope="module")
def shape_codebook(shapes):
    return fit_codebook(extract_patches(shapes, 8, 8).reshape(-1, 64), 32, 20, 0, 8, 8)


class TestFitCodebook:
    def test_two_repeated_vectors_fit_exactly(self):
        a, b = np.array([0.25, 1.0]), np.array([-2.0, 0.5])
        pts = np.array([a, b] * 20)
        cb = fit_codebook(pts, 2, 10, 0, 1, 2)
        got = {tuple(c) for c in cb.centroids}
        assert got == {tuple(a), tuple(b)}
        assert cb.history[-1] == 0.0

    def test_single_centroid_is_the_mean(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
        cb = fit_codebook(pts, 1, 5, 0, 1, 3)
        np.testing.assert_allclose(cb.centroids[0], pts.mean(axis=0), atol=1e-6)

    def test_matches_reference_lloyd_step_for_step(self):
        pts = np.random.default_rng(11).normal(size=(100, 2))
        got, hist = kmeans(pts, 4, 15, seed=5)
        ref, ref_hist = reference_lloyd(pts, 4, 15, seed=5)
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(hist[:len(ref_hist)], ref_hist, rtol=1e-12)

    def test_beats_random_assignment(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(100, 2))
        _, hist = kmeans(pts, 4, 20, seed=0)
        labels = rng.integers(0, 4, 100)
        cents = np.array([pts[labels == j].mean(axis=0) for j in range(4)])
        baseline = np.mean(((pts - cents[labels]) ** 2).sum(axis=1))
        assert hist[-1] <= baseline

    @pytest.mark.parametrize("seed", range(5))
    def test_objective_non_increasing(self, seed):
        pts = np.random.default_rng(seed).normal(size=(300, 4))
        _, hist = kmeans(pts, 12, 25, seed)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_too_few_patches(self):
        with pytest.raises(ConfigError):
            fit_codebook(np.zeros((3, 4)), 4, 5, 0, 2, 2)

    def test_centroids_distinct(self, shape_codebook):
        assert len(np.unique(shape_codebook.centroids, axis=0)) == shape_codebook.vocab


class TestEncodeDecode:
    def test_centroid_tiled_image_round_trips(self, shape_codebook):
        ids = np.arange(16).reshape(4, 4) % shape_codebook.vocab
        img = decode(TokenGrid(ids, shape_codebook.vocab), shape_codebook)
        assert img.shape == (32, 32)
        np.testing.assert_array_equal(encode(img, shape_codebook).ids, ids)
        np.testing.assert_array_equal(decode(encode(img, shape_codebook), shape_codebook), img)

    def test_quantization_idempotent(self, shapes, shape_codebook):
        cb = shape_codebook
        for img in shapes[:20]:
            tg = encode(img, cb)
            np.testing.assert_array_equal(encode(decode(tg, cb), cb).ids, tg.ids)

    def test_matches_exhaustive_nearest_neighbor_scan(self):
        rng = np.random.default_rng(2)
        train = rng.random((40, 16, 16))
        cb = fit_codebook(extract_patches(train, 4, 4).reshape(-1, 16), 16, 10, 0, 4, 4)
        img = rng.random((16, 16))
        got = encode(img, cb).flat
        patches = extract_patches(img, 4, 4)[0]
        for i, p in enumerate(patches):
            best, best_d = 0, np.inf
            for j, c in enumerate(cb.centroids):
                d = sum((float(a) - float(b)) ** 2 for a, b in zip(p, c))
                if d < best_d:
                    best, best_d = j, d
            assert got[i] == best

    def test_ties_go_to_lowest_index(self):
        cb = Codebook(np.array([[1.0], [-1.0], [1.0 + 2.0]]), 1, 1)
        np.testing.assert_array_equal(encode(np.zeros((1, 1)), cb).ids, [[0]])

    def test_non_divisible_extent(self, shape_codebook):
        with pytest.raises(DimensionError):
            encode(np.zeros((30, 32)), shape_codebook)

    def test_decode_zero_tokens_tiles_centroid_zero(self, shape_codebook):
        img = decode(TokenGrid(np.zeros((4, 4)), shape_codebook.vocab), shape_codebook)
        np.testing.assert_array_equal(img[:8, :8].reshape(-1), shape_codebook.centroids[0])
        np.testing.assert_array_equal(img[24:, 8:16].reshape(-1), shape_codebook.centroids[0])

    def test_decode_rejects_out_of_range_ids(self, shape_codebook):
        with pytest.raises(TokenIndexError):
            decode_batch(np.full((1, 16), shape_codebook.vocab), (4, 4), shape_codebook)

    def test_reconstruction_mse_non_increasing_in_vocab(self):
        means = []
        for v in (2, 4, 8, 16, 32):
            errs = []
            for seed in range(5):
                rng = np.random.default_rng(seed)
                imgs = rng.random((30, 16, 16))
                cb = fit_codebook(extract_patches(imgs, 4, 4).reshape(-1, 16), v, 15, seed, 4, 4)
                rec = decode_batch(encode_batch(imgs, cb), (4, 4), cb)
                errs.append(reconstruction_error(imgs, rec))
            means.append(np.mean(errs))
        assert all(b <= a for a, b in zip(means, means[1:]))


class TestCorruption:
    def test_zero_noise_is_identity(self):
        z = np.random.default_rng(0).normal(size=(7, 5))
        assert np.array_equal(corrupt_latents(z, 0.0, 1), z)

    def test_full_noise_is_standard_normal(self):
        z = np.full(10_000, 3.0)
        out = corrupt_latents(z, 1.0, seed=4)
        assert abs(out.mean()) < 3.0 / np.sqrt(z.size)
        assert abs(out.std() - 1.0) < 0.05

    def test_reproducible(self):
        z = np.random.default_rng(0).normal(size=(20, 3))
        a, b = corrupt_latents(z, 0.3, 9), corrupt_latents(z, 0.3, 9)
        assert np.array_equal(a, b)
        np.testing.assert_allclose(a, 0.7 * z + 0.3 * np.random.default_rng(9).standard_normal(z.shape))

    @pytest.mark.parametrize("t", [-0.01, 1.5])
    def test_domain(self, t):
        with pytest.raises(ContractError):
            corrupt_latents(np.zeros(3), t, 0)

    def test_noisy_encode_at_zero_matches_encode(self, shapes, shape_codebook):
        np.testing.assert_array_equal(noisy_encode(shapes[:10], shape_codebook, 0.0, 1),
                                      encode_batch(shapes[:10], shape_codebook))


class TestFlipsAndMSE:
    def test_flipped_ratio_extremes(self):
        a = TokenGrid(np.arange(16).reshape(4, 4), 32)
        assert flipped_ratio(a, a) == 0.0
        assert flipped_ratio(a, TokenGrid(a.ids + 16, 32)) == 1.0

    def test_flipped_ratio_geometry(self):
        with pytest.raises(DimensionError):
            flipped_ratio(np.zeros((4, 4)), np.zeros((2, 8)))

    def test_mse_identities(self):
        img = np.random.default_rng(0).random((8, 8))
        assert reconstruction_error(img, img) == 0.0
        assert reconstruction_error(img, img + 0.25) == pytest.approx(0.0625, abs=1e-15)
        with pytest.raises(DimensionError):
            reconstruction_error(img, img[:4])

    def test_flips_monotone_in_t(self, shapes, shape_codebook):
        rows = noise_curve(shapes[:100], shape_codebook, [0, 0.1, 0.2, 0.3, 0.4, 0.5], range(10))
        flips = [r["flipped_ratio"] for r in rows]
        assert flips[0] == 0.0
        drops = [a - b for a, b in zip(flips, flips[1:]) if b < a]
        assert len(drops) <= 1 and all(d <= 0.005 for d in drops)

    def test_mse_grows_with_flips(self, shapes, shape_codebook):
        rows = noise_curve(shapes[:100], shape_codebook, [0, 0.1, 0.2, 0.3, 0.4, 0.5], range(10))
        order = np.argsort([r["flipped_ratio"] for r in rows], kind="stable")
        mses = [rows[i]["mse"] for i in order]
        assert all(b >= a for a, b in zip(mses, mses[1:]))


class TestFiles:
    def test_codebook_round_trip(self, tmp_path, shape_codebook):
        path = tmp_path / "cb.bin"
        fileio.write_codebook(path, shape_codebook)
        back = fileio.read_codebook(path)
        np.testing.assert_array_equal(back.centroids, shape_codebook.centroids)
        np.testing.assert_array_equal(back.mean, shape_codebook.mean)
        np.testing.assert_array_equal(back.std, shape_codebook.std)
        assert (back.patch_h, back.patch_w, back.channels) == (8, 8, 1)

    def test_token_grid_round_trip(self, tmp_path):
        toks = np.random.default_rng(0).integers(0, 300, (5, 12))
        fileio.write_token_grids(tmp_path / "t.tg", toks, (3, 4), 300)
        back, grid, v = fileio.read_token_grids(tmp_path / "t.tg")
        np.testing.assert_array_equal(back, toks)
        assert grid == (3, 4) and v == 300

    def test_corrupted_file_is_refused(self, tmp_path, shape_codebook):
        path = tmp_path / "cb.bin"
        fileio.write_codebook(path, shape_codebook)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            fileio.read_codebook(path)
