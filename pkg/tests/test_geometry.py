import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.modules.depth_scene import DepthImage
from src.modules.geometry import (
    CropTransform, CubeSpec, backproject, center_of_mass, compute_crop_transform, crop_cube,
    denormalize_depth, istn_paste, normalize_depth, project, stn_backward, stn_sample,
)
from src.modules.utils import EmptyForegroundError, GeometryError


class TestCamera:
    def test_project_backproject(self, camera):
        p = np.array([[10.0, -20.0, 400.0], [-50.0, 5.0, 800.0]])
        uvz = project(p, camera)
        assert_allclose(backproject(uvz[:, 0], uvz[:, 1], uvz[:, 2], camera), p)

    def test_principal_point_on_axis(self, camera):
        assert_allclose(project([0.0, 0.0, 500.0], camera), [camera.cx, camera.cy, 500.0])

    def test_rejects_points_behind_camera(self, camera):
        with pytest.raises(GeometryError):
            project([0.0, 0.0, -1.0], camera)


class TestCenterOfMass:
    def test_flat_patch(self, camera):
        depth = np.full((camera.height, camera.width), 2000.0)
        depth[50:70, 70:90] = 500.0
        d = DepthImage.from_depth(depth)
        com = center_of_mass(d, camera)
        v, u = np.mgrid[50:70, 70:90]
        expected = backproject(u, v, np.full(u.shape, 500.0), camera).reshape(-1, 3).mean(axis=0)
        assert_allclose(com, expected)

    def test_empty_foreground(self, camera):
        with pytest.raises(EmptyForegroundError):
            center_of_mass(DepthImage.empty(camera.width, camera.height), camera)


class TestCropTransform:
    def test_center_maps_to_projection(self, camera):
        t = np.array([20.0, -10.0, 450.0])
        ct = compute_crop_transform(t, CubeSpec(150), camera, 32)
        u, v, _ = project(t, camera)
        assert_allclose(ct.A[:2, 2], [u, v])

    def test_lateral_extent_at_center_depth(self, camera):
        t = np.array([0.0, 0.0, 500.0])
        ct = compute_crop_transform(t, CubeSpec(100), camera, 32)
        assert ct.A[0, 0] == pytest.approx(camera.fx * 100.0 / 500.0)
        assert ct.half_range == 100.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_projected_cube_extents(self, camera, seed):
        rng = np.random.default_rng(seed)
        t = np.array([rng.uniform(-120, 120), rng.uniform(-90, 90), rng.uniform(300, 1200)])
        half = rng.uniform(40, 160, size=3)
        ct = compute_crop_transform(t, CubeSpec(tuple(half)), camera, 32)
        u, v, _ = project(t, camera)
        expected = np.array([[camera.fx * half[0] / t[2], 0.0, u],
                             [0.0, camera.fy * half[1] / t[2], v],
                             [0.0, 0.0, 1.0]])
        assert_allclose(ct.A, expected, rtol=1e-12, atol=1e-9)
        assert ct.half_range == pytest.approx(half[2])
        assert_allclose(ct.center, t)

    def test_center_inside_cube_depth(self, camera):
        with pytest.raises(GeometryError):
            compute_crop_transform([0.0, 0.0, 100.0], CubeSpec(150), camera)

    def test_crop_camera_reprojects_grid(self, camera):
        ct = compute_crop_transform([15.0, 5.0, 400.0], CubeSpec(120), camera, 16)
        crop_cam = ct.crop_camera(camera)
        p = np.array([30.0, -12.0, 420.0])
        u, v, _ = project(p, camera)
        uc, vc, _ = project(p, crop_cam)
        # crop pixel -> target coordinate -> source pixel
        xt = 2.0 * uc / (ct.size[1] - 1) - 1.0
        yt = 2.0 * vc / (ct.size[0] - 1) - 1.0
        assert_allclose(ct.A @ [xt, yt, 1.0], [u, v, 1.0], atol=1e-9)


class TestSpatialTransformer:
    def test_identity_transform_reproduces_image(self, rng):
        image = rng.normal(size=(6, 8))
        ct = CropTransform.identity(8, 6)
        assert_allclose(stn_sample(image, ct), image)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_four_neighbour_bilinear_sum(self, seed):
        rng = np.random.default_rng(seed)
        image = rng.normal(size=(12, 12))
        A = np.array([[rng.uniform(2, 4), rng.uniform(-0.5, 0.5), rng.uniform(4, 6)],
                      [rng.uniform(-0.5, 0.5), rng.uniform(2, 4), rng.uniform(4, 6)],
                      [0.0, 0.0, 1.0]])
        rows, cols = 6, 7
        patch = stn_sample(image, CropTransform(A, size=(rows, cols)))
        expected = np.zeros((rows, cols))
        for i in range(rows):
            for j in range(cols):
                xt, yt = -1.0 + 2.0 * j / (cols - 1), -1.0 + 2.0 * i / (rows - 1)
                xs = A[0, 0] * xt + A[0, 1] * yt + A[0, 2]
                ys = A[1, 0] * xt + A[1, 1] * yt + A[1, 2]
                x0, y0 = int(np.floor(xs)), int(np.floor(ys))
                for y, x in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
                    if 0 <= x < 12 and 0 <= y < 12:
                        expected[i, j] += image[y, x] * max(0.0, 1 - abs(xs - x)) * max(0.0, 1 - abs(ys - y))
        assert_allclose(patch, expected, rtol=0, atol=1e-12)

    def test_half_pixel_samples_of_a_ramp(self):
        v, u = np.mgrid[0:4, 0:6].astype(np.float64)
        ramp = 10.0 * u + v
        # columns sample 0.5, 1.5, ..., 4.5 and rows the integers 0..3
        A = np.array([[2.0, 0.0, 2.5], [0.0, 1.5, 1.5], [0.0, 0.0, 1.0]])
        patch = stn_sample(ramp, CropTransform(A, size=(4, 5)))
        expected = 10.0 * np.array([0.5, 1.5, 2.5, 3.5, 4.5])[None, :] + np.arange(4.0)[:, None]
        assert_allclose(patch, expected, rtol=0, atol=1e-12)

    def test_outside_samples_take_fill(self):
        image = np.ones((4, 4))
        A = np.array([[1.0, 0.0, 100.0], [0.0, 1.0, 100.0], [0.0, 0.0, 1.0]])
        patch = stn_sample(image, CropTransform(A, size=(3, 3)), fill=7.0)
        assert_allclose(patch, 7.0)

    def test_backward_matches_finite_differences(self, rng):
        image = rng.normal(size=(10, 10))
        A = np.array([[3.13, 0.21, 4.71], [-0.33, 2.57, 5.23], [0.0, 0.0, 1.0]])
        ct = CropTransform(A, size=(5, 5))
        weights = rng.normal(size=(5, 5))
        grad_image, grad_theta = stn_backward(image, ct, weights)
        h = 1e-6
        numeric = np.zeros(6)
        for k in range(6):
            r, c = divmod(k, 3)
            hi, lo = A.copy(), A.copy()
            hi[r, c] += h
            lo[r, c] -= h
            numeric[k] = (np.sum(stn_sample(image, CropTransform(hi, size=(5, 5))) * weights)
                          - np.sum(stn_sample(image, CropTransform(lo, size=(5, 5))) * weights)) / (2 * h)
        assert_allclose(grad_theta, numeric, rtol=1e-4, atol=1e-6)
        # sampling is linear in the image
        other = rng.normal(size=image.shape)
        assert np.sum(stn_sample(other, ct) * weights) == pytest.approx(np.sum(grad_image * other))

    def test_paste_inverts_crop_on_identity(self, rng):
        patch = rng.normal(size=(6, 8))
        ct = CropTransform.identity(8, 6)
        assert_allclose(istn_paste(patch, ct, np.zeros((6, 8))), patch)

    def test_paste_of_unit_step_crop_restores_pixels(self, rng):
        image = rng.normal(size=(20, 30))
        A = np.array([[3.5, 0.0, 12.5], [0.0, 3.5, 9.5], [0.0, 0.0, 1.0]])
        ct = CropTransform(A, size=(8, 8))
        out = istn_paste(stn_sample(image, ct), ct, np.zeros_like(image))
        assert_allclose(out[6:14, 9:17], image[6:14, 9:17], atol=1e-6)
        assert np.all(out[:6] == 0.0) and np.all(out[:, :9] == 0.0)

    def test_paste_of_two_pixel_step_crop_restores_a_ramp(self):
        v, u = np.mgrid[0:25, 0:25].astype(np.float64)
        ramp = 3.0 * u - 2.0 * v + 1.0
        A = np.array([[7.0, 0.0, 12.0], [0.0, 7.0, 10.0], [0.0, 0.0, 1.0]])
        ct = CropTransform(A, size=(8, 8))
        out = istn_paste(stn_sample(ramp, ct), ct, np.zeros_like(ramp))
        assert_allclose(out[3:18, 5:20], ramp[3:18, 5:20], atol=1e-6)

    def test_paste_leaves_outside_pixels(self, camera):
        canvas = np.full((camera.height, camera.width), 5.0)
        ct = compute_crop_transform([0.0, 0.0, 600.0], CubeSpec(30), camera, 8)
        out = istn_paste(np.zeros((8, 8)), ct, canvas)
        assert out[0, 0] == 5.0
        assert out[camera.height // 2, camera.width // 2] == 0.0


class TestNormalization:
    def test_clip_and_invalid_to_rear(self):
        depth = np.array([[350.0, 500.0, 900.0, 0.0]])
        valid = np.array([[True, True, True, False]])
        assert_allclose(normalize_depth(depth, 500.0, 150.0, valid), [[-1.0, 0.0, 1.0, 1.0]])

    def test_denormalize_inverts_inside_cube(self):
        depth = np.array([420.0, 500.0, 560.0])
        assert_allclose(denormalize_depth(normalize_depth(depth, 500.0, 150.0), 500.0, 150.0), depth)


class TestCropCube:
    def test_crop_range_and_shape(self, hand_samples):
        sample = hand_samples[0]
        crop = crop_cube(sample.depth, sample.hand_pose[0], CubeSpec(150), sample.camera, 32)
        assert crop.patch.shape == (32, 32)
        assert crop.patch.min() >= -1.0 and crop.patch.max() <= 1.0
        assert not crop.outside
        # the hand occupies the crop center
        assert crop.patch[16, 16] < 1.0

    def test_crop_outside_image(self, camera):
        d = DepthImage.empty(camera.width, camera.height)
        crop = crop_cube(d, [5000.0, 0.0, 500.0], CubeSpec(50), camera, 16)
        assert crop.outside
        assert_allclose(crop.patch, 1.0)
