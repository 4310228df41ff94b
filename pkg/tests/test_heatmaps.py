import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from visfit.heatmaps import (
    CropBox, HeatmapGrid, PerspectiveCamera, decode_visibility, encode_target, from_grid, project, soft_argmax,
    to_grid,
)

D = 64
CAM = PerspectiveCamera(500.0, 520.0, 250.0, 240.0, 512, 480)
CROP = CropBox(100.0, 60.0, 300.0, 320.0)
GRID = HeatmapGrid(D, 1.0)


def affine_oracle(P, root_depth):
    """3x4 projection followed by the crop/depth affine map, written out separately."""
    K = np.array([[CAM.fx, 0, CAM.cx, 0], [0, CAM.fy, CAM.cy, 0], [0, 0, 1, 0]])
    h = K @ np.append(P, 1.0)
    px, py = h[:2] / h[2]
    return np.array([(px - CROP.x0) / CROP.width * D, (py - CROP.y0) / CROP.height * D,
                     (P[2] - root_depth + 1.0) / 2.0 * D])


class TestProjection:
    def test_optical_axis(self):
        np.testing.assert_allclose(project(CAM, [0.0, 0.0, 3.0]), [CAM.cx, CAM.cy])

    def test_45_degree_ray(self):
        np.testing.assert_allclose(project(CAM, [2.0, 0.0, 2.0]), [CAM.fx + CAM.cx, CAM.cy])

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(0)
        K = np.hstack([CAM.matrix, np.zeros((3, 1))])
        for _ in range(100):
            P = rng.normal(size=3) + [0, 0, 5]
            h = K @ np.append(P, 1.0)
            np.testing.assert_allclose(project(CAM, P), h[:2] / h[2], atol=1e-9)

    @pytest.mark.parametrize("z", [0.0, -1.0, 1e-7])
    def test_behind_camera(self, z):
        with pytest.raises(ValueError, match="behind camera"):
            project(CAM, [0.0, 0.0, z])

    def test_invalid_camera(self):
        with pytest.raises(ValueError):
            PerspectiveCamera(0.0, 1.0, 0, 0, 10, 10)
        with pytest.raises(ValueError):
            PerspectiveCamera(1.0, 1.0, 0, 0, 0, 10)


class TestToGrid:
    def test_crop_centre_at_root_depth(self):
        Z = 4.0
        cx, cy = CROP.center
        P = np.array([(cx - CAM.cx) * Z / CAM.fx, (cy - CAM.cy) * Z / CAM.fy, Z])
        np.testing.assert_allclose(to_grid(CAM, GRID, CROP, P, Z), [D / 2, D / 2, D / 2], atol=1e-12)

    def test_one_crop_width_left_extrapolates(self):
        Z = 4.0
        px = CROP.x0 - CROP.width
        P = np.array([(px - CAM.cx) * Z / CAM.fx, 0.0, Z])
        assert to_grid(CAM, GRID, CROP, P, Z)[0] == pytest.approx(-D, abs=1e-9)

    def test_matches_affine_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            P = rng.normal(size=3) + [0, 0, 4]
            np.testing.assert_allclose(to_grid(CAM, GRID, CROP, P, 4.2), affine_oracle(P, 4.2), atol=1e-9)

    def test_affine_at_equal_depth_and_along_depth(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p, q = rng.normal(size=3) + [0, 0, 4], rng.normal(size=3) + [0, 0, 4]
            q[2] = p[2]
            a = rng.uniform()
            lhs = to_grid(CAM, GRID, CROP, a * p + (1 - a) * q, 4.0)
            rhs = a * to_grid(CAM, GRID, CROP, p, 4.0) + (1 - a) * to_grid(CAM, GRID, CROP, q, 4.0)
            np.testing.assert_allclose(lhs, rhs, atol=1e-9)
            r = p.copy()
            r[2] += 0.7
            lz = to_grid(CAM, GRID, CROP, a * p + (1 - a) * r, 4.0)[2]
            rz = a * to_grid(CAM, GRID, CROP, p, 4.0)[2] + (1 - a) * to_grid(CAM, GRID, CROP, r, 4.0)[2]
            assert lz == pytest.approx(rz, abs=1e-9)

    def test_inverse(self):
        rng = np.random.default_rng(3)
        P = rng.normal(size=(20, 3)) + [0, 0, 4]
        g = to_grid(CAM, GRID, CROP, P, 3.9)
        np.testing.assert_allclose(from_grid(CAM, GRID, CROP, g, 3.9), P, atol=1e-12)

    def test_jacobian(self):
        rng = np.random.default_rng(4)
        P = rng.normal(size=3) + [0, 0, 4]
        _, J = to_grid(CAM, GRID, CROP, P, 4.0, return_jacobian=True)
        for c in range(3):
            e = np.zeros(3)
            e[c] = 1e-6
            fd = (to_grid(CAM, GRID, CROP, P + e, 4.0) - to_grid(CAM, GRID, CROP, P - e, 4.0)) / 2e-6
            np.testing.assert_allclose(J[:, c], fd, atol=1e-5)

    def test_degenerate_crop(self):
        with pytest.raises(ValueError, match="degenerate"):
            CropBox(0, 0, 0.0, 10)

    def test_no_clamping(self):
        g = to_grid(CAM, GRID, CROP, [50.0, -50.0, 2.0], 4.0)
        assert g[0] > D and g[1] < 0 and g[2] < 0


class TestEncodeTarget:
    def test_rows_normalised(self):
        h = encode_target([3.3, 40.0, 62.5])
        assert h.shape == (3, D)
        np.testing.assert_allclose(h.sum(axis=1), 1.0, atol=1e-12)
        assert h.min() >= 0

    @pytest.mark.parametrize("k", [0, 5, 31, 63])
    def test_narrow_target_peaks_at_bin(self, k):
        h = encode_target(np.full(3, k + 0.5), sigma=0.25)
        assert np.all(np.argmax(h, axis=1) == k)

    def test_symmetric_about_grid_centre(self):
        h = encode_target(np.full(3, D / 2), sigma=2.0)
        j = np.arange(D // 2)
        np.testing.assert_allclose(h[:, D // 2 - 1 - j], h[:, D // 2 + j], atol=1e-12)

    def test_in_frame_round_trip_within_005(self):
        c = np.random.default_rng(5).uniform(0.5, D - 0.5, size=(500, 3))
        err = np.abs(soft_argmax(encode_target(c, 2.0)) - c)
        assert err.max() < 0.05

    def test_boundary_massed_outside(self):
        h = encode_target([-5.0, D + 5.0, 10.0])
        assert np.argmax(h[0]) == 0 and np.argmax(h[1]) == D - 1

    def test_interior_is_plain_gaussian(self):
        c = 30.2
        h = encode_target(np.full(3, c))[0]
        ref = np.exp(-((np.arange(D) + 0.5 - c) ** 2) / 8.0)
        np.testing.assert_allclose(h, ref / ref.sum(), atol=1e-9)

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            encode_target([1, 2, 3], sigma=0.0)


class TestSoftArgmax:
    def test_one_hot(self):
        for k in (0, 17, 63):
            h = np.zeros(D)
            h[k] = 1.0
            assert soft_argmax(h, temperature=0.1) == pytest.approx(k + 0.5, abs=1e-3)

    def test_uniform_gives_centre(self):
        assert soft_argmax(np.full(D, 0.3)) == pytest.approx(D / 2, abs=1e-12)
        assert soft_argmax(np.zeros(D)) == pytest.approx(D / 2)
        assert soft_argmax(np.full(D, -2.0), logits=True) == pytest.approx(D / 2, abs=1e-12)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(6)
        centers = np.arange(D) + 0.5
        for T in (0.5, 1.0, 2.0):
            h = rng.random(D)
            p = h ** (1 / T)
            assert soft_argmax(h, T) == pytest.approx(np.sum(p / p.sum() * centers), abs=1e-9)
            s = rng.normal(size=D) * 3
            e = np.exp(s / T)
            assert soft_argmax(s, T, logits=True) == pytest.approx(np.sum(e / e.sum() * centers), abs=1e-9)

    def test_batched(self):
        h = np.random.default_rng(7).random((4, 3, D))
        out = soft_argmax(h)
        assert out.shape == (4, 3)
        assert out[2, 1] == pytest.approx(soft_argmax(h[2, 1]))

    @given(st.lists(st.floats(0.0, 1e3), min_size=D, max_size=D))
    def test_output_inside_grid(self, values):
        x = soft_argmax(np.array(values))
        assert 0 < x < D

    def test_shift_monotone(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            h = np.zeros(D)
            c = rng.integers(10, D - 10)
            h[c - 5:c + 5] = rng.random(10)
            shifted = np.concatenate([[0.0], h[:-1]])
            d = soft_argmax(shifted) - soft_argmax(h)
            assert -1e-12 <= d <= 1 + 1e-6

    def test_negative_heatmap_rejected(self):
        with pytest.raises(ValueError):
            soft_argmax(-np.ones(D))

    def test_non_finite_rejected(self):
        h = np.ones(D)
        h[3] = np.inf
        with pytest.raises(ValueError):
            soft_argmax(h)


class TestDecodeVisibility:
    def test_all_visible(self):
        assert decode_visibility([1, 1, 1], 0.5).tolist() == [True, True, True]

    def test_boundary_inclusive(self):
        assert decode_visibility([0.49, 0.5, 0.51], 0.5).tolist() == [False, True, True]

    def test_batch_equals_elementwise(self):
        s = np.random.default_rng(9).random((30, 3))
        batch = decode_visibility(s, 0.4)
        for i in range(30):
            for a in range(3):
                assert batch[i, a] == (s[i, a] >= 0.4)
