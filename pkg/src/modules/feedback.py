"""
Inference-time feedback loops.

The hand-only loop repeatedly synthesizes the current pose estimate, stacks it
with the observed crop and adds the updater's correction. The hand-object loop
does the same for two bodies at once on a shared merged image S: both
syntheses are pasted back into the full frame, combined by a pixel-wise
minimum and cropped again at each body's location.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import os

import numpy as np

from src.modules.depth_scene import (
    DEFAULT_FAR, TrainingSample, add_sensor_noise, object_model, render_hand, render_object,
)
from src.modules.geometry import (
    DEFAULT_FOREGROUND_BAND, backproject, center_of_mass, compute_crop_transform, crop_cube,
    denormalize_depth, istn_paste, normalize_depth, stn_sample,
)
from src.modules.networks import (
    HAND_CUBE, OBJECT_CUBE, SCENE_CUBE, build_updater_pose_set, clip_to_cube, hand_update_matrix,
    load_role, predict_update, prepare_joint_samples, refine_location, save_role, train_hand_updater,
    train_localizer, train_predictor_hand, train_predictor_object, train_synthesizer, train_updater,
)
from src.modules.pose_model import ObjectPose, corners_from_pose, pose_from_corners
from src.modules.utils import (
    DegeneratePoseError, EmptyForegroundError, GeometryError, MissingArtifactError, derive_rng, read_json,
    write_json,
)

logger = logging.getLogger(__name__)

# synthesized values at or behind this level are background
BACKGROUND_LEVEL = 0.95
BUNDLE_INDEX = "bundle.json"


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

def _save_bundle(directory, kind, roles, extra):
    os.makedirs(directory, exist_ok=True)
    files = {}
    for name, model in roles.items():
        files[name] = f"{name}.w1"
        save_role(os.path.join(directory, files[name]), model)
    write_json(os.path.join(directory, BUNDLE_INDEX), {"kind": kind, "files": files, **extra})
    logger.info(f"Saved {kind} bundle to {directory}")


def _load_bundle(directory, kind):
    index_path = os.path.join(directory, BUNDLE_INDEX)
    if not os.path.exists(index_path):
        raise MissingArtifactError("bundle", index_path)
    index = read_json(index_path)
    if index.get("kind") != kind:
        raise ValueError(f"{directory} holds a {index.get('kind')!r} bundle, expected {kind!r}")
    roles = {}
    for name, filename in index["files"].items():
        path = os.path.join(directory, filename)
        if not os.path.exists(path):
            raise MissingArtifactError("bundle", path)
        roles[name] = load_role(path)
    return index, roles


@dataclass(eq=False)
class HandBundle:
    localizer: object
    predictor: object
    synthesizer: object
    updater: object

    @property
    def crop_size(self):
        return self.synthesizer.network.output_shape[-1]

    @property
    def cube(self):
        return self.synthesizer.cube

    hand_cube = cube

    def save(self, directory):
        _save_bundle(directory, "hand", {"localizer": self.localizer, "predictor": self.predictor,
                                         "synthesizer": self.synthesizer, "updater": self.updater}, {})

    @classmethod
    def load(cls, directory):
        _, roles = _load_bundle(directory, "hand")
        return cls(**roles)


@dataclass(eq=False)
class JointBundle:
    hand_localizer: object
    object_localizer: object
    hand_predictor: object
    object_predictor: object
    synthesizer: object
    hand_updater: object
    object_updater: object
    model: object

    @property
    def crop_size(self):
        return self.synthesizer.network.output_shape[-1]

    @property
    def hand_cube(self):
        return self.synthesizer.cube

    @property
    def object_cube(self):
        return self.object_predictor.cube

    def save(self, directory):
        roles = {name: getattr(self, name) for name in (
            "hand_localizer", "object_localizer", "hand_predictor", "object_predictor",
            "synthesizer", "hand_updater", "object_updater")}
        _save_bundle(directory, "joint", roles, {"object_model": self.model.name})

    @classmethod
    def load(cls, directory):
        index, roles = _load_bundle(directory, "joint")
        return cls(model=object_model(index["object_model"]), **roles)


# ---------------------------------------------------------------------------
# Loop state
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LoopState:
    """
    Trajectory of one loop run.

    Hand poses are camera-frame (J, 3) arrays, object poses ObjectPose. The
    synthesized crops are normalized hand crops, one per trajectory entry;
    ``crop_z``/``half_range`` denormalize them together with ``observed``.
    """
    iteration: int = 0
    hand_pose: np.ndarray = None
    object_pose: ObjectPose = None
    hand_trajectory: list = field(default_factory=list)
    object_trajectory: list = field(default_factory=list)
    synthesized: list = field(default_factory=list)
    observed: np.ndarray = None
    crop_z: float = 0.0
    half_range: float = 1.0
    locations: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def record(self, hand_pose, object_pose=None, synthesized=None):
        self.hand_pose = hand_pose
        self.object_pose = object_pose
        self.hand_trajectory.append(hand_pose)
        if object_pose is not None:
            self.object_trajectory.append(object_pose)
        if synthesized is not None:
            self.synthesized.append(np.asarray(synthesized, np.float64))

    def to_dict(self):
        return {
            "iterations": self.iteration,
            "hand_trajectory": [np.asarray(p).tolist() for p in self.hand_trajectory],
            "object_trajectory": [p.as_matrix34().ravel().tolist() for p in self.object_trajectory],
            "locations": {k: np.asarray(v).tolist() for k, v in self.locations.items()},
            "flags": dict(self.flags),
        }


@dataclass(eq=False)
class StackedInput:
    """Merged synthetic frame, the observation, and per-body (observed, synthetic) crop pairs."""
    merged: np.ndarray
    observed: object
    pairs: dict


# ---------------------------------------------------------------------------
# Hand-only loop
# ---------------------------------------------------------------------------

def run_hand_loop(d, bundle, n, cam=None):
    """
    Localize, predict, then apply ``n`` synthesize-and-update steps.

    Raises:
        GeometryError: when the hand cannot be localized.
    """
    if n < 0:
        raise ValueError(f"iteration count must be >= 0, got {n}")
    cam = cam if cam is not None else _camera_of(d)
    depth = _depth_of(d)
    try:
        location = refine_location(depth, bundle.localizer, cam)
        crop = crop_cube(depth, location, bundle.cube, cam, bundle.crop_size)
    except GeometryError as e:
        logger.error(f"Hand localization failed: {e}")
        raise
    J = bundle.synthesizer.network.input_shape[0] // 3
    state = LoopState(observed=crop.patch, crop_z=float(location[2]), half_range=bundle.cube.depth,
                      locations={"hand": location})
    pose = clip_to_cube(bundle.predictor.predict(crop.patch), bundle.cube)
    synth = bundle.synthesizer(pose.reshape(J, 3))
    state.record(location + pose.reshape(J, 3), synthesized=synth)
    for i in range(n):
        raw = predict_update(crop.patch, synth, bundle.updater)
        pose = clip_to_cube(bundle.updater.apply(pose, raw), bundle.cube)
        synth = bundle.synthesizer(pose.reshape(J, 3))
        state.iteration = i + 1
        state.record(location + pose.reshape(J, 3), synthesized=synth)
        logger.debug(f"hand loop iteration {i + 1}: update norm {np.linalg.norm(raw):.4g}")
    return state


def _camera_of(d):
    if isinstance(d, TrainingSample):
        return d.camera
    raise ValueError("a camera is required unless a TrainingSample is given")


def _depth_of(d):
    return d.depth if isinstance(d, TrainingSample) else d


# ---------------------------------------------------------------------------
# Merged image S
# ---------------------------------------------------------------------------

def hand_patch_depth(patch, center_z, cube, far=DEFAULT_FAR):
    """Denormalized synthetic hand crop with background pixels at ``far``."""
    patch = np.asarray(patch, np.float64)
    return np.where(patch >= BACKGROUND_LEVEL, far, denormalize_depth(patch, center_z, cube.depth))


def merge_synthetic(shape, far, hand=None, obj=None, cam=None):
    """
    Full-frame pixel-wise minimum of the pasted syntheses.

    Args:
        shape: (height, width) of the observed frame.
        hand: (normalized synthetic crop, CropTransform, cube) or None.
        obj: (ObjectPose, ObjectModel, CropTransform) or None; rendered with the
            crop's own camera and pasted like the hand.
    """
    merged = np.full(shape, far)
    if hand is not None:
        patch, ct, cube = hand
        canvas = istn_paste(hand_patch_depth(patch, ct.center[2], cube, far), ct, np.full(shape, far))
        merged = np.minimum(merged, canvas)
    if obj is not None:
        pose, model, ct = obj
        rendered = render_object(pose, model, ct.crop_camera(cam), far)
        canvas = istn_paste(rendered.depth, ct, np.full(shape, far))
        merged = np.minimum(merged, canvas)
    return merged


def crop_merged(merged, ct, far=DEFAULT_FAR):
    return normalize_depth(stn_sample(merged, ct, fill=far), ct.center[2], ct.half_range)


def compose_S(d, hand_pose, obj_pose, locations, bundle, cam):
    """
    Merged synthetic image of the current estimates and the per-body crop pairs.

    ``locations`` maps "hand" (and "object") to the crop centers; without an
    object pose the synthetic channel is the hand alone.
    """
    depth = _depth_of(d)
    size = bundle.crop_size
    ct_hand = compute_crop_transform(locations["hand"], bundle.hand_cube, cam, size)
    synth = bundle.synthesizer(np.asarray(hand_pose) - locations["hand"])
    obj = None
    ct_obj = None
    if obj_pose is not None and "object" in locations:
        ct_obj = compute_crop_transform(locations["object"], bundle.object_cube, cam, size)
        obj = (obj_pose, bundle.model, ct_obj)
    merged = merge_synthetic(depth.depth.shape, depth.far, (synth, ct_hand, bundle.hand_cube), obj, cam)
    pairs = {"hand": np.stack([crop_cube(depth, locations["hand"], bundle.hand_cube, cam, size).patch,
                               crop_merged(merged, ct_hand, depth.far)])}
    if ct_obj is not None:
        pairs["object"] = np.stack([crop_cube(depth, locations["object"], bundle.object_cube, cam, size).patch,
                                    crop_merged(merged, ct_obj, depth.far)])
    return StackedInput(merged, depth, pairs)


# ---------------------------------------------------------------------------
# Hand-object loop
# ---------------------------------------------------------------------------

def _locate(d, localizer, cam, name, flags):
    try:
        return refine_location(d, localizer, cam)
    except GeometryError as e:
        logger.warning(f"{name} localization failed ({e}); falling back to the center of mass")
        flags[f"{name}_localization_failed"] = True
        return center_of_mass(d, cam)


def _object_from_corners(corners, model, fallback_center, flags):
    try:
        return pose_from_corners(corners, model)
    except DegeneratePoseError as e:
        logger.warning(f"Object pose from corners failed: {e}")
        flags["object_pose_degenerate"] = True
        return ObjectPose.identity(fallback_center)


def run_joint_loop(d, bundle, N=2, cam=None, parallel=True):
    """
    Joint hand-object feedback loop on a shared merged image.

    Locations are estimated once. A branch whose localizer fails falls back to
    the center of mass, keeps its initial pose and is flagged. Without any
    foreground both branches are flagged and no iterations run.

    Returns:
        tuple: (hand pose (J, 3), ObjectPose, LoopState)
    """
    if N < 0:
        raise ValueError(f"iteration count must be >= 0, got {N}")
    cam = cam if cam is not None else _camera_of(d)
    depth = _depth_of(d)
    flags = {"hand_localization_failed": False, "object_localization_failed": False}
    try:
        locations = {"hand": _locate(depth, bundle.hand_localizer, cam, "hand", flags),
                     "object": _locate(depth, bundle.object_localizer, cam, "object", flags)}
    except EmptyForegroundError as e:
        logger.warning(f"No foreground to localize ({e}); returning the initial estimates without updates")
        flags.update(hand_localization_failed=True, object_localization_failed=True, empty_foreground=True)
        fallback = backproject(cam.cx, cam.cy, float(np.mean(DEFAULT_FOREGROUND_BAND)), cam)
        locations = {"hand": fallback, "object": fallback.copy()}
    steps = 0 if flags.get("empty_foreground") else N
    size = bundle.crop_size
    hand_crop = crop_cube(depth, locations["hand"], bundle.hand_cube, cam, size)
    object_crop = crop_cube(depth, locations["object"], bundle.object_cube, cam, size)
    J = bundle.synthesizer.network.input_shape[0] // 3
    hand_rel = clip_to_cube(bundle.hand_predictor.predict(hand_crop.patch), bundle.hand_cube)
    corners_rel = clip_to_cube(bundle.object_predictor.predict(object_crop.patch), bundle.object_cube)
    obj_pose = _object_from_corners(corners_rel.reshape(8, 3) + locations["object"], bundle.model,
                                    locations["object"], flags)
    state = LoopState(observed=hand_crop.patch, crop_z=float(locations["hand"][2]),
                      half_range=bundle.hand_cube.depth, locations=locations, flags=flags)

    def hand_branch(pair):
        return predict_update(pair[0], pair[1], bundle.hand_updater)

    def object_branch(pair):
        return predict_update(pair[0], pair[1], bundle.object_updater)

    stacked = compose_S(depth, locations["hand"] + hand_rel.reshape(J, 3), obj_pose, locations, bundle, cam)
    state.record(locations["hand"] + hand_rel.reshape(J, 3), obj_pose, stacked.pairs["hand"][1])
    pool = ThreadPoolExecutor(max_workers=2) if parallel else None
    try:
        for i in range(steps):
            if pool is not None:
                hand_future = pool.submit(hand_branch, stacked.pairs["hand"])
                object_future = pool.submit(object_branch, stacked.pairs["object"])
                raw_hand, raw_object = hand_future.result(), object_future.result()
            else:
                raw_hand = hand_branch(stacked.pairs["hand"])
                raw_object = object_branch(stacked.pairs["object"])
            if not flags["hand_localization_failed"]:
                hand_rel = clip_to_cube(bundle.hand_updater.apply(hand_rel, raw_hand), bundle.hand_cube)
            if not flags["object_localization_failed"]:
                current = (corners_from_pose(obj_pose, bundle.model) - locations["object"]).ravel()
                corners_rel = clip_to_cube(bundle.object_updater.apply(current, raw_object), bundle.object_cube)
                obj_pose = _object_from_corners(corners_rel.reshape(8, 3) + locations["object"], bundle.model,
                                                locations["object"], flags)
            state.iteration = i + 1
            stacked = compose_S(depth, locations["hand"] + hand_rel.reshape(J, 3), obj_pose, locations, bundle, cam)
            state.record(locations["hand"] + hand_rel.reshape(J, 3), obj_pose, stacked.pairs["hand"][1])
    finally:
        if pool is not None:
            pool.shutdown()
    return state.hand_pose, state.object_pose, state


# ---------------------------------------------------------------------------
# Training of whole bundles
# ---------------------------------------------------------------------------

def hand_only_samples(samples, geometry, noise_sigma=0.0, seed=0):
    """The same hand poses rendered without the object."""
    views = []
    for sample in samples:
        depth = render_hand(sample.hand_pose, geometry, sample.camera, sample.depth.far)
        depth = add_sensor_noise(depth, noise_sigma, derive_rng(seed, 5000, sample.index))
        views.append(TrainingSample(depth, sample.hand_pose, sample.camera, None, index=sample.index))
    return views


def train_hand_bundle(samples, prior, cfg):
    """
    Train the four hand-only networks in dependency order.

    Returns:
        tuple: (HandBundle, dict of TrainResult by role)
    """
    results = {"localizer": train_localizer(samples, cfg, "hand", HAND_CUBE)}
    results["predictor"] = train_predictor_hand(samples, prior, cfg)
    results["synthesizer"] = train_synthesizer(samples, cfg)
    results["updater"] = train_hand_updater(samples, results["predictor"].model,
                                            results["synthesizer"].model, prior, cfg)
    bundle = HandBundle(*(results[r].model for r in ("localizer", "predictor", "synthesizer", "updater")))
    return bundle, results


def _joint_synthesize_fn(target, synthesizer, model, hand_crops, object_crops, samples):
    """
    Synthetic channel for joint updater training.

    Entry poses belong to ``target`` ("hand" or "object"); partners are the
    other body's crop-relative pose. Both are placed through the image's own
    crop transforms, merged, and cropped at the target's transform.
    """
    J3 = synthesizer.network.input_shape[0]

    def synthesize(images, poses, partners):
        poses = np.asarray(poses)
        hand_rel = poses if target == "hand" else np.array(partners)
        corners_rel = np.array(partners) if target == "hand" else poses
        synth = synthesizer(hand_rel.reshape(-1, J3 // 3, 3))
        out = np.empty((len(images), *synth.shape[1:]))
        for k, i in enumerate(images):
            sample = samples[i]
            ct_hand, ct_obj = hand_crops.transforms[i], object_crops.transforms[i]
            obj_pose = pose_from_corners(corners_rel[k].reshape(8, 3) + object_crops.centers[i], model)
            merged = merge_synthetic(sample.depth.depth.shape, sample.depth.far,
                                     (synth[k], ct_hand, hand_crops.cube), (obj_pose, model, ct_obj),
                                     sample.camera)
            out[k] = crop_merged(merged, ct_hand if target == "hand" else ct_obj, sample.depth.far)
        return out
    return synthesize


def _partner_fn(crops, predictions, cfg):
    """Partner pose drawn from ground truth, noised ground truth or the predictor output."""
    sigma = cfg.noise_sigma * crops.cube.depth

    def partner(i, rng):
        choice = rng.integers(3)
        if choice == 0:
            return crops.targets[i].copy()
        if choice == 1:
            return clip_to_cube(crops.targets[i] + rng.normal(0.0, sigma, crops.targets.shape[1]), crops.cube)
        return clip_to_cube(np.asarray(predictions[i], np.float64), crops.cube)
    return partner


def train_joint_updaters(samples, model, hand_predictor, object_predictor, synthesizer, prior, cfg):
    """
    Hand and object updaters trained on the merged image S.

    Returns:
        tuple: (hand TrainResult, object TrainResult)
    """
    hand_crops, object_crops, aligned = prepare_joint_samples(samples, model, cfg, synthesizer.cube,
                                                              object_predictor.cube)
    hand_pred = hand_predictor.predict(hand_crops.patches)
    object_pred = object_predictor.predict(object_crops.patches)
    rng = derive_rng(cfg.seed, 6000)
    hand_set = build_updater_pose_set(hand_crops, hand_pred, cfg, rng,
                                      _partner_fn(object_crops, object_pred, cfg))
    object_set = build_updater_pose_set(object_crops, object_pred, cfg, rng,
                                        _partner_fn(hand_crops, hand_pred, cfg))
    hand_result = train_updater(
        hand_crops, _joint_synthesize_fn("hand", synthesizer, model, hand_crops, object_crops, aligned),
        hand_set, cfg, hand_update_matrix(prior, synthesizer.cube, cfg.updater_space), "hand")
    object_result = train_updater(
        object_crops, _joint_synthesize_fn("object", synthesizer, model, hand_crops, object_crops, aligned),
        object_set, cfg, object_predictor.cube.depth * np.eye(24), "object")
    return hand_result, object_result


def train_joint_bundle(samples, model, prior, cfg, geometry):
    """
    Train the seven networks of the hand-object loop.

    The synthesizer learns from hand-only re-renders of the training poses.

    Returns:
        tuple: (JointBundle, dict of TrainResult by role)
    """
    results = {
        "hand_localizer": train_localizer(samples, cfg, "hand", SCENE_CUBE),
        "object_localizer": train_localizer(samples, cfg, "object", SCENE_CUBE),
        "hand_predictor": train_predictor_hand(samples, prior, cfg),
        "object_predictor": train_predictor_object(samples, model, cfg, OBJECT_CUBE),
        "synthesizer": train_synthesizer(hand_only_samples(samples, geometry, seed=cfg.seed), cfg),
    }
    results["hand_updater"], results["object_updater"] = train_joint_updaters(
        samples, model, results["hand_predictor"].model, results["object_predictor"].model,
        results["synthesizer"].model, prior, cfg)
    bundle = JointBundle(model=model, **{name: r.model for name, r in results.items()})
    return bundle, results
