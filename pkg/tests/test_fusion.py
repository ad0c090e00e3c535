import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitfuse.context import BinaryMask
from sitfuse.fusion import RetrievalGrid, StreamMask, binarize, fuse, restore_retrievals
from sitfuse.raster import GridGeometry

TARGET = GridGeometry(8, 6, (0.0, 1.0, 0.0, 0.0, 0.0, 1.0))


def random_streams(seed, n=None):
    r = np.random.default_rng(seed)
    n = n or int(r.integers(1, 6))
    streams = []
    for i in range(n):
        scale = float(r.choice([0.5, 1.0, 2.0]))
        shape = (int(np.ceil(6 / scale)) + 1, int(np.ceil(8 / scale)) + 1)
        geom = GridGeometry(shape[1], shape[0], (float(r.uniform(-1, 0.5)), scale, 0.0,
                                                 float(r.uniform(-1, 0.5)), 0.0, scale))
        scores = r.random(shape) if r.random() < 0.7 else None
        streams.append(StreamMask(geom, (r.random(shape) < 0.5).astype(np.uint8), r.random(shape) < 0.85,
                                  scores, float(r.uniform(0.1, 3.0)), 0.0, f"s{i}"))
    return streams


def contributing_qualities(streams):
    """Per-pixel list of collocated stream qualities, via explicit coordinate lookups."""
    out = [[[] for _ in range(8)] for _ in range(6)]
    for s in streams:
        gt = s.geometry.geotransform
        for r in range(6):
            for c in range(8):
                col = int(np.floor((c + 0.5 - gt[0]) / gt[1]))
                row = int(np.floor((r + 0.5 - gt[3]) / gt[5]))
                if 0 <= row < s.geometry.height and 0 <= col < s.geometry.width and s.valid[row, col]:
                    out[r][c].append(float(s.quality[row, col]))
    return out


class TestFusionAlgebra:
    @pytest.mark.parametrize("seed", range(25))
    def test_convex_bound(self, seed):
        streams = random_streams(seed)
        cert = fuse(streams, TARGET)
        q = contributing_qualities(streams)
        for r in range(6):
            for c in range(8):
                assert cert.count[r, c] == len(q[r][c])
                if q[r][c]:
                    assert min(q[r][c]) <= cert.certainty[r, c] <= max(q[r][c])
                else:
                    assert cert.certainty[r, c] == 0.0 and not cert.valid[r, c]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000), st.randoms(use_true_random=False))
    def test_permutation_invariance(self, seed, random):
        streams = random_streams(seed)
        shuffled = list(streams)
        random.shuffle(shuffled)
        np.testing.assert_array_equal(fuse(shuffled, TARGET).certainty, fuse(streams, TARGET).certainty)

    @pytest.mark.parametrize("seed", range(25))
    def test_duplicated_streams_idempotent(self, seed):
        streams = random_streams(seed)
        base = fuse(streams, TARGET).certainty
        np.testing.assert_array_equal(fuse(streams + streams, TARGET).certainty, base)
        np.testing.assert_array_equal(fuse([streams[0]] * 3, TARGET).certainty, fuse(streams[:1], TARGET).certainty)

    def test_weighted_mean_value(self):
        g = GridGeometry(1, 1, (0, 8, 0, 0, 0, 6))
        a = StreamMask(g, np.ones((1, 1)), np.ones((1, 1), bool), np.full((1, 1), 0.2), weight=1.0)
        b = StreamMask(g, np.ones((1, 1)), np.ones((1, 1), bool), np.full((1, 1), 0.8), weight=3.0)
        cert = fuse([a, b], TARGET)
        np.testing.assert_allclose(cert.certainty, 0.65)
        assert (cert.count == 2).all()


class TestFusionInputs:
    def test_time_window_filters(self):
        g = TARGET
        early = StreamMask(g, np.ones(g.shape), np.ones(g.shape, bool), timestamp=0.0)
        late = StreamMask(g, np.zeros(g.shape), np.ones(g.shape, bool), timestamp=5000.0)
        cert = fuse([early, late], TARGET, target_time=0.0, time_window=3600)
        assert (cert.certainty == 1.0).all()
        with pytest.raises(ValueError, match="within"):
            fuse([late], TARGET, target_time=0.0, time_window=60)

    def test_binary_masks_without_scores(self):
        g = TARGET
        s = StreamMask(g, np.eye(6, 8), np.ones(g.shape, bool))
        np.testing.assert_array_equal(fuse([s], TARGET).certainty, np.eye(6, 8))

    @pytest.mark.parametrize("kw", [{"weight": 0.0}, {"scores": np.full((6, 8), 1.5)},
                                    {"scores": np.full((6, 8), np.nan)}, {"mask": np.zeros((2, 2))}])
    def test_bad_streams(self, kw):
        args = dict(geometry=TARGET, mask=np.zeros((6, 8)), valid=np.ones((6, 8), bool))
        args.update(kw)
        with pytest.raises(ValueError):
            StreamMask(**args)

    def test_no_overlap_warns(self):
        far = GridGeometry(2, 2, (100, 1, 0, 100, 0, 1))
        with pytest.warns(RuntimeWarning):
            cert = fuse([StreamMask(far, np.ones((2, 2)), np.ones((2, 2), bool))], TARGET)
        assert not cert.valid.any()

    def test_binarize(self):
        cert = fuse(random_streams(3, n=3), TARGET)
        m = binarize(cert, 0.5)
        np.testing.assert_array_equal(m.foreground, (cert.certainty >= 0.5) & cert.valid)
        with pytest.raises(ValueError):
            binarize(cert, 1.5)


class TestRestoration:
    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        r = np.random.default_rng(seed)
        shape = (9, 11)
        cf = r.choice([0.0, 0.1, 0.2, 0.2000001, 0.5, 1.0], shape)
        ret = RetrievalGrid(r.random(shape), cf, r.random(shape) < 0.9)
        smoke = BinaryMask(r.random(shape) < 0.4, r.random(shape) < 0.9)
        out = restore_retrievals(ret, smoke)
        for i in range(shape[0]):
            for j in range(shape[1]):
                under_smoke = bool(smoke.values[i, j]) and bool(smoke.valid[i, j])
                expected = ret.valid[i, j] and (cf[i, j] <= 0.2 or (under_smoke and cf[i, j] > 0.2))
                assert out.valid[i, j] == expected
        np.testing.assert_array_equal(out.values, ret.values)

    def test_custom_threshold_and_shape_check(self):
        ret = RetrievalGrid(np.ones((1, 3)), np.array([[0.1, 0.3, 0.5]]), np.ones((1, 3), bool))
        none = BinaryMask(np.zeros((1, 3)), np.ones((1, 3), bool))
        assert restore_retrievals(ret, none, 0.3).valid.tolist() == [[True, True, False]]
        with pytest.raises(ValueError):
            restore_retrievals(ret, BinaryMask(np.zeros((2, 3)), np.ones((2, 3), bool)))
