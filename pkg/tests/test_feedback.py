import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.modules.depth_scene import DepthImage, SceneConfig, make_dataset, small_cuboid
from src.modules.experiment import evaluate_hand_loop
from src.modules.feedback import (
    BACKGROUND_LEVEL, HandBundle, JointBundle, compose_S, hand_patch_depth, merge_synthetic, run_hand_loop,
    run_joint_loop, train_hand_bundle,
)
from src.modules.geometry import center_of_mass, compute_crop_transform
from src.modules.networks import (
    HAND_CUBE, OBJECT_CUBE, SCENE_CUBE, HandSynthesizer, LinearCodec, Localizer, PosePredictor, PoseUpdater,
    TrainConfig, build_architecture, hand_synthesize_fn, hand_update_matrix, prepare_hand_samples, prior_codec,
    update_audit,
)
from src.modules.metrics import mean_joint_error
from src.modules.pose_model import ObjectPose, canonical_corners, center_on_reference, fit_prior
from src.modules.tensor_core import Network
from src.modules.utils import MissingArtifactError


def network(role, cfg, out_dim=None, zero=False, seed=3):
    specs, shape = build_architecture(role, cfg, out_dim)
    net = Network(specs, shape, seed=seed, dtype=np.dtype(cfg.dtype))
    if zero:
        net.params = [np.zeros_like(p) for p in net.params]
    return net


@pytest.fixture
def prior(hand_samples):
    return fit_prior(center_on_reference(np.stack([s.hand_pose for s in hand_samples])), 4)


def hand_bundle(cfg, prior, zero_updater):
    matrix = hand_update_matrix(prior, HAND_CUBE, "prior")
    return HandBundle(
        Localizer(network("localizer", cfg, zero=True), HAND_CUBE, cfg.crop_size),
        PosePredictor(network("hand-predictor", cfg, prior.k, zero=True), prior_codec(prior, HAND_CUBE),
                      HAND_CUBE, "hand", prior),
        HandSynthesizer(network("synthesizer", cfg, prior.dim), HAND_CUBE),
        PoseUpdater(network("updater", cfg, matrix.shape[1], zero=zero_updater), matrix, HAND_CUBE),
    )


def joint_bundle(cfg, prior, zero_updaters, corner_offset=None):
    model = small_cuboid()
    if corner_offset is None:
        corner_offset = canonical_corners(model.half_extents).ravel()
    matrix = hand_update_matrix(prior, HAND_CUBE, "prior")
    return JointBundle(
        hand_localizer=Localizer(network("localizer", cfg, zero=True), SCENE_CUBE, cfg.crop_size),
        object_localizer=Localizer(network("object-localizer", cfg, zero=True), SCENE_CUBE, cfg.crop_size,
                                   "object"),
        hand_predictor=PosePredictor(network("hand-predictor", cfg, prior.k, zero=True),
                                     prior_codec(prior, HAND_CUBE), HAND_CUBE, "hand", prior),
        object_predictor=PosePredictor(network("object-predictor", cfg, 24, zero=True),
                                       LinearCodec(corner_offset, OBJECT_CUBE.depth * np.eye(24)),
                                       OBJECT_CUBE, "object"),
        synthesizer=HandSynthesizer(network("synthesizer", cfg, prior.dim), HAND_CUBE),
        hand_updater=PoseUpdater(network("updater", cfg, matrix.shape[1], zero=zero_updaters, seed=4),
                                 matrix, HAND_CUBE),
        object_updater=PoseUpdater(network("object-updater", cfg, 24, zero=zero_updaters, seed=5),
                                   OBJECT_CUBE.depth * np.eye(24), OBJECT_CUBE, "object"),
        model=model,
    )


class TestHandLoop:
    def test_zero_iterations_is_the_initialization(self, tiny_train_config, prior, hand_samples):
        sample = hand_samples[0]
        state = run_hand_loop(sample, hand_bundle(tiny_train_config, prior, False), 0)
        com = center_of_mass(sample.depth, sample.camera)
        assert state.iteration == 0
        assert len(state.hand_trajectory) == 1 and len(state.synthesized) == 1
        assert_allclose(state.hand_pose, com + prior.mean.reshape(-1, 3), atol=1e-9)

    def test_zero_updater_keeps_pose(self, tiny_train_config, prior, hand_samples):
        sample = hand_samples[1]
        state = run_hand_loop(sample.depth, hand_bundle(tiny_train_config, prior, True), 3, sample.camera)
        assert state.iteration == 3
        assert len(state.hand_trajectory) == 4
        for pose in state.hand_trajectory[1:]:
            assert_allclose(pose, state.hand_trajectory[0])

    def test_updates_stay_in_cube(self, tiny_train_config, prior, hand_samples):
        sample = hand_samples[2]
        state = run_hand_loop(sample, hand_bundle(tiny_train_config, prior, False), 2)
        assert not np.allclose(state.hand_trajectory[1], state.hand_trajectory[0])
        for pose in state.hand_trajectory:
            assert np.all(np.abs(pose - state.locations["hand"]) <= HAND_CUBE.depth + 1e-9)

    def test_negative_iterations(self, tiny_train_config, prior, hand_samples):
        with pytest.raises(ValueError):
            run_hand_loop(hand_samples[0], hand_bundle(tiny_train_config, prior, True), -1)

    def test_camera_required_for_plain_depth(self, tiny_train_config, prior, hand_samples):
        with pytest.raises(ValueError):
            run_hand_loop(hand_samples[0].depth, hand_bundle(tiny_train_config, prior, True), 1)

    def test_bundle_roundtrip(self, tmp_path, tiny_train_config, prior, hand_samples):
        bundle = hand_bundle(tiny_train_config, prior, False)
        bundle.save(str(tmp_path / "bundle"))
        loaded = HandBundle.load(str(tmp_path / "bundle"))
        a = run_hand_loop(hand_samples[0], bundle, 2)
        b = run_hand_loop(hand_samples[0], loaded, 2)
        assert_allclose(b.hand_pose, a.hand_pose)

    def test_missing_bundle(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            HandBundle.load(str(tmp_path / "nothing"))


class TestMergedImage:
    def test_background_goes_far(self):
        patch = np.array([[BACKGROUND_LEVEL, 0.0, -0.5]])
        assert_allclose(hand_patch_depth(patch, 500.0, HAND_CUBE, far=2000.0), [[2000.0, 500.0, 425.0]])

    def test_merge_is_pixelwise_minimum(self, camera, rng):
        shape = (camera.height, camera.width)
        ct_hand = compute_crop_transform([0.0, 0.0, 450.0], HAND_CUBE, camera, 16)
        ct_obj = compute_crop_transform([20.0, 10.0, 430.0], OBJECT_CUBE, camera, 16)
        patch = rng.uniform(-1.0, 1.0, size=(16, 16))
        obj = (ObjectPose.identity((20.0, 10.0, 430.0)), small_cuboid(), ct_obj)
        hand_only = merge_synthetic(shape, 2000.0, (patch, ct_hand, HAND_CUBE), None, camera)
        obj_only = merge_synthetic(shape, 2000.0, None, obj, camera)
        both = merge_synthetic(shape, 2000.0, (patch, ct_hand, HAND_CUBE), obj, camera)
        assert_allclose(both, np.minimum(hand_only, obj_only))
        assert np.any(obj_only < 2000.0)

    def test_compose_without_object_is_hand_only(self, tiny_train_config, prior, object_samples):
        bundle = joint_bundle(tiny_train_config, prior, True)
        sample = object_samples[0]
        location = sample.hand_pose[0]
        stacked = compose_S(sample.depth, sample.hand_pose, None, {"hand": location}, bundle, sample.camera)
        assert set(stacked.pairs) == {"hand"}
        assert stacked.pairs["hand"].shape == (2, 16, 16)


class TestJointLoop:
    def test_zero_updaters_keep_initialization(self, tiny_train_config, prior, object_samples):
        sample = object_samples[0]
        hand, obj, state = run_joint_loop(sample, joint_bundle(tiny_train_config, prior, True), 2)
        assert state.iteration == 2
        assert len(state.hand_trajectory) == 3 and len(state.object_trajectory) == 3
        assert_allclose(hand, state.hand_trajectory[0])
        assert_allclose(obj.rotation, np.eye(3), atol=1e-9)
        assert_allclose(obj.translation, state.locations["object"], atol=1e-9)
        assert not state.flags["object_localization_failed"]

    def test_parallel_matches_sequential(self, tiny_train_config, prior, object_samples):
        sample = object_samples[1]
        bundle = joint_bundle(tiny_train_config, prior, False)
        hand_a, obj_a, _ = run_joint_loop(sample, bundle, 2, parallel=True)
        hand_b, obj_b, _ = run_joint_loop(sample, bundle, 2, parallel=False)
        assert_allclose(hand_a, hand_b)
        assert_allclose(obj_a.as_matrix34(), obj_b.as_matrix34())

    def test_degenerate_corners_are_flagged(self, tiny_train_config, prior, object_samples):
        sample = object_samples[2]
        bundle = joint_bundle(tiny_train_config, prior, True, corner_offset=np.zeros(24))
        _, obj, state = run_joint_loop(sample, bundle, 1)
        assert state.flags["object_pose_degenerate"]
        assert_allclose(obj.translation, state.locations["object"])

    def test_empty_frame_returns_flagged_initialization(self, tiny_train_config, prior, camera):
        shape = (camera.height, camera.width)
        frame = DepthImage(np.zeros(shape), np.zeros(shape, bool))
        hand, obj, state = run_joint_loop(frame, joint_bundle(tiny_train_config, prior, True), 2, camera)
        assert state.flags["hand_localization_failed"] and state.flags["object_localization_failed"]
        assert state.flags["empty_foreground"]
        assert state.iteration == 0
        assert len(state.hand_trajectory) == 1 and len(state.object_trajectory) == 1
        assert hand.shape == (14, 3) and np.all(np.isfinite(hand))
        assert obj is state.object_pose

    def test_object_pose_is_rigid(self, tiny_train_config, prior, object_samples):
        sample = object_samples[3]
        _, obj, _ = run_joint_loop(sample, joint_bundle(tiny_train_config, prior, False), 2)
        assert_allclose(obj.rotation.T @ obj.rotation, np.eye(3), atol=1e-9)
        assert np.linalg.det(obj.rotation) == pytest.approx(1.0)

    def test_joint_bundle_roundtrip(self, tmp_path, tiny_train_config, prior, object_samples):
        bundle = joint_bundle(tiny_train_config, prior, False)
        bundle.save(str(tmp_path / "joint"))
        loaded = JointBundle.load(str(tmp_path / "joint"))
        assert loaded.model.name == "small-cuboid"
        assert loaded.object_cube == OBJECT_CUBE
        with pytest.raises(ValueError):
            HandBundle.load(str(tmp_path / "joint"))


@pytest.fixture(scope="module")
def trained_hand_bundle():
    """A hand bundle trained on a few hundred scenes, with held-out scenes from another seed."""
    scene = SceneConfig(width=160, height=120, object=None, noise_sigma=0.0)
    train, _ = make_dataset(160, scene, 21, progress=False)
    test, _ = make_dataset(40, scene, 22, progress=False)
    cfg = TrainConfig(epochs=20, batch_size=16, crop_size=16, channel_scale=0.25, noise_copies=2,
                      noise_sigma=0.25, pose_cap=8, growth_every=5, growth_per_image=1,
                      updater_space="joints", seed=3)
    prior = fit_prior(center_on_reference(np.stack([s.hand_pose for s in train])), 8)
    bundle, results = train_hand_bundle(train, prior, cfg)
    return bundle, results, cfg, train, test


@pytest.mark.slow
class TestTrainedHandBundle:
    def test_training_lowers_every_loss(self, trained_hand_bundle):
        _, results, _, _, _ = trained_hand_bundle
        for role in ("localizer", "predictor", "updater"):
            curve = results[role].curve
            assert curve[-1] < curve[0], role

    def test_predictor_beats_mean_pose(self, trained_hand_bundle):
        bundle, _, cfg, train, test = trained_hand_bundle
        mean_pose = prepare_hand_samples(train, cfg).targets.mean(axis=0)
        crops = prepare_hand_samples(test, cfg)
        truth = crops.targets.reshape(len(crops), -1, 3)
        predicted = bundle.predictor.predict(crops.patches).reshape(truth.shape)
        baseline = np.broadcast_to(mean_pose.reshape(-1, 3), truth.shape)
        assert np.mean(mean_joint_error(predicted, truth)) < np.mean(mean_joint_error(baseline, truth))

    def test_synthesizer_errors_are_heavy_tailed(self, trained_hand_bundle):
        bundle, _, cfg, _, test = trained_hand_bundle
        crops = prepare_hand_samples(test, cfg)
        synthesized = bundle.synthesizer(crops.targets.reshape(len(crops), -1, 3))
        errors = np.abs(synthesized - crops.patches) * bundle.cube.depth
        assert np.median(errors) < 0.5 * np.mean(errors)

    def test_updater_contract_on_held_out_scenes(self, trained_hand_bundle):
        bundle, _, cfg, _, test = trained_hand_bundle
        crops = prepare_hand_samples(test, cfg)
        audit = update_audit(crops, bundle.updater, hand_synthesize_fn(bundle.synthesizer), [cfg.noise_sigma],
                             cfg, np.random.default_rng(8))
        assert audit.satisfied_rate >= 0.7
        assert audit.p_value < 0.01

    def test_loop_does_not_raise_mean_error(self, trained_hand_bundle):
        bundle, _, _, _, test = trained_hand_bundle
        reports = evaluate_hand_loop(test, bundle, 2)
        assert len(reports[0].values) == len(reports[2].values) > 0
        assert reports[2].mean <= reports[0].mean
