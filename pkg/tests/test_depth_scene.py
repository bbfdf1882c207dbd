import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.modules.depth_scene import (
    DepthImage, ObjectModel, Primitive, SceneConfig, add_sensor_noise, bottle, capsule_object_distance,
    composite_min, hand_capsules, load_dataset, make_dataset, manifest_checksum, object_model, read_depth,
    render_capsules, render_hand, render_object, sample_hand_pose, small_cuboid, write_depth,
)
from src.modules.pose_model import ObjectPose
from src.modules.utils import DegeneratePoseError, FormatError, ShapeMismatchError


class TestDepthImage:
    def test_invalid_pixels_hold_far(self):
        d = DepthImage(np.array([[100.0, 200.0]]), np.array([[True, False]]), far=900.0)
        assert_allclose(d.depth, [[100.0, 900.0]])

    def test_from_depth_marks_zero_invalid(self):
        d = DepthImage.from_depth(np.array([[0.0, 300.0, np.nan]]))
        assert d.valid.tolist() == [[False, True, False]]


class TestRendering:
    def test_single_capsule_depth_on_axis(self, camera):
        segments = np.array([[[-20.0, 0.0, 500.0], [20.0, 0.0, 500.0]]])
        d = render_capsules(segments, np.array([10.0]), camera)
        v, u = int(camera.cy), int(camera.cx)
        assert d.valid[v, u]
        # the ray through the principal point meets the capsule front at z - r
        assert d.depth[v, u] == pytest.approx(490.0, abs=0.5)
        assert not d.valid[0, 0]

    def test_capsules_shape_check(self, camera):
        with pytest.raises(ShapeMismatchError):
            render_capsules(np.zeros((2, 3)), np.ones(2), camera)

    def test_box_front_face(self, camera):
        pose = ObjectPose.identity((0.0, 0.0, 400.0))
        d = render_object(pose, small_cuboid(), camera)
        assert d.depth[int(camera.cy), int(camera.cx)] == pytest.approx(400.0 - 15.0)

    def test_bottle_renders(self, camera):
        d = render_object(ObjectPose.identity((0.0, 0.0, 500.0)), bottle(), camera)
        assert d.valid.sum() > 0

    def test_degenerate_bone(self, geometry, camera):
        pose = np.tile([0.0, 0.0, 400.0], (geometry.joint_count, 1))
        with pytest.raises(DegeneratePoseError):
            render_hand(pose, geometry, camera)

    def test_composite_min(self):
        a = DepthImage(np.array([[300.0, 500.0, 0.0]]), np.array([[True, True, False]]))
        b = DepthImage(np.array([[400.0, 450.0, 0.0]]), np.array([[True, True, False]]))
        c = composite_min(a, b)
        assert_allclose(c.depth[0, :2], [300.0, 450.0])
        assert not c.valid[0, 2]

    def test_noise_only_on_valid_pixels(self):
        d = DepthImage(np.full((4, 4), 500.0), np.eye(4, dtype=bool))
        noisy = add_sensor_noise(d, 5.0, 3)
        assert_allclose(noisy.depth[~d.valid], d.far)
        assert not np.allclose(noisy.depth[d.valid], 500.0)
        assert add_sensor_noise(d, 0.0, 3) is d


class TestObjects:
    def test_registry(self):
        assert object_model("small-cuboid").name == "small-cuboid"
        with pytest.raises(ValueError):
            object_model("teapot")

    def test_primitive_must_fit_box(self):
        with pytest.raises(ValueError):
            ObjectModel("bad", (Primitive("sphere", radius=30.0),), (10.0, 10.0, 10.0))

    def test_capsule_distance(self):
        model = small_cuboid()
        pose = ObjectPose.identity((0.0, 0.0, 0.0))
        # segment parallel to the box face at z = 15, 10 mm above it, radius 4
        segments = np.array([[[-10.0, 0.0, 25.0], [10.0, 0.0, 25.0]]])
        assert capsule_object_distance(segments, np.array([4.0]), model, pose) == pytest.approx(6.0, abs=1e-6)
        inside = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]])
        assert capsule_object_distance(inside, np.array([1.0]), model, pose) < 0


class TestSampling:
    def test_bone_lengths_preserved(self, rng, geometry, hand_scene_config):
        pose = sample_hand_pose(rng, geometry, hand_scene_config)
        for parent, child, _ in geometry.bones()[:geometry.joint_count - 1]:
            assert np.linalg.norm(pose[child] - pose[parent]) == pytest.approx(
                np.linalg.norm(geometry.rest[child] - geometry.rest[parent]))

    def test_hand_only_scene(self, hand_samples):
        assert all(s.object_pose is None for s in hand_samples)
        assert all(s.depth.valid.any() for s in hand_samples)

    def test_object_placement_respects_clearance(self, geometry):
        config = SceneConfig(width=160, height=120, object="small-cuboid", clearance=5.0, shell=(60.0, 90.0))
        samples, manifest = make_dataset(3, config, 11, progress=False)
        model = small_cuboid()
        for s in samples:
            segments, radii = hand_capsules(s.hand_pose, geometry)
            assert capsule_object_distance(segments, radii, model, s.object_pose) >= 5.0
        assert manifest["count"] + len(manifest["skipped"]) == 3

    def test_impossible_placement_is_skipped(self):
        config = SceneConfig(width=160, height=120, object="large-cuboid", clearance=500.0, max_tries=3)
        samples, manifest = make_dataset(2, config, 1, progress=False)
        assert samples == []
        assert [entry["index"] for entry in manifest["skipped"]] == [0, 1]

    def test_generation_is_deterministic(self, object_scene_config):
        a, ma = make_dataset(3, object_scene_config, 42, progress=False)
        b, mb = make_dataset(3, object_scene_config, 42, progress=False)
        assert manifest_checksum(ma) == manifest_checksum(mb)
        for x, y in zip(a, b):
            assert_allclose(x.depth.depth, y.depth.depth)

    def test_sample_depends_only_on_its_index(self, object_scene_config):
        small, _ = make_dataset(2, object_scene_config, 42, progress=False)
        large, _ = make_dataset(4, object_scene_config, 42, progress=False)
        assert_allclose(small[1].hand_pose, large[1].hand_pose)


class TestDatasetFiles:
    def test_depth_file_roundtrip(self, tmp_path, hand_samples):
        d = hand_samples[0].depth
        path = tmp_path / "d.bin"
        write_depth(path, d)
        back = read_depth(path)
        assert np.array_equal(back.valid, d.valid)
        assert_allclose(back.depth[d.valid], d.depth[d.valid], rtol=1e-6)

    def test_depth_file_bad_magic(self, tmp_path):
        path = tmp_path / "d.bin"
        path.write_bytes(b"garbage" * 4)
        with pytest.raises(FormatError):
            read_depth(path)

    def test_dataset_directory(self, tmp_path, object_scene_config):
        out = tmp_path / "set"
        samples, manifest = make_dataset(3, object_scene_config, 9, str(out), progress=False)
        loaded, loaded_manifest = load_dataset(str(out))
        assert loaded_manifest == json.loads((out / "manifest.json").read_text())
        assert [s.index for s in loaded] == [s.index for s in samples]
        for a, b in zip(samples, loaded):
            assert_allclose(a.hand_pose, b.hand_pose)
            assert_allclose(a.object_pose.as_matrix34(), b.object_pose.as_matrix34())
