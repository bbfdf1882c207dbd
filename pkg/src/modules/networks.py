"""
The learned functions of the feedback loop and how they are trained.

Every role wraps a ``Network`` from ``tensor_core`` together with what is
needed to read its output: the crop cube, and for pose outputs a linear map from
network outputs to pose vectors in mm relative to the crop center.

  localizer    crop at the center of mass -> normalized (u, v, z) offset
  predictor    crop -> pose (prior coefficients, joints, or box corners)
  synthesizer  pose -> normalized depth crop, trained stage by stage
  updater      (observed crop, synthesized crop) -> pose update
"""
from dataclasses import dataclass, field, asdict
import csv
import logging
import math
import os

import numpy as np
from scipy import stats
from tqdm import tqdm

from src.modules.geometry import (
    CubeSpec, backproject, center_of_mass, crop_cube, project,
)
from src.modules.pose_model import (
    PosePrior, corners_from_pose, pose_from_corners, rotation_error,
)
from src.modules.tensor_core import (
    AdamState, Network, act, adam_step, conv, drop, fc, flatten, load_weights, pool,
    reshape, save_weights, start_epoch, strided_conv, up,
)
from src.modules.utils import (
    EmptyForegroundError, GeometryError, ShapeMismatchError, TrainingFault, derive_rng,
)

logger = logging.getLogger(__name__)

HAND_CUBE = CubeSpec(150.0)
OBJECT_CUBE = CubeSpec(100.0)
SCENE_CUBE = CubeSpec(200.0)

ROLES = ("localizer", "object-localizer", "hand-predictor", "object-predictor",
         "synthesizer", "updater", "object-updater", "combined-predictor")
_ROLE_SALT = {role: i + 1 for i, role in enumerate(ROLES)}
SYNTH_BASE = 8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    decay: float = 0.95
    seed: int = 0
    lam: float = 0.6
    noise_copies: int = 10
    noise_sigma: float = 0.05
    growth_every: int = 2
    growth_per_image: int = 5
    pose_cap: int = 50
    channel_scale: float = 0.5
    crop_size: int = 64
    dropout: float = 0.3
    center_jitter: float = 5.0
    updater_space: str = "prior"
    hand_architecture: str = "full"
    dtype: str = "float32"
    log_dir: str = None
    progress: bool = False

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lambda must lie strictly between 0 and 1, got {self.lam}")
        if self.updater_space not in ("prior", "joints"):
            raise ValueError(f"updater_space must be 'prior' or 'joints', got {self.updater_space!r}")
        if self.hand_architecture not in ("full", "simple"):
            raise ValueError(f"hand_architecture must be 'full' or 'simple', got {self.hand_architecture!r}")
        size = self.crop_size
        if size < 16 or size % SYNTH_BASE or (size // SYNTH_BASE) & (size // SYNTH_BASE - 1):
            raise ValueError(f"crop_size must be 8 times a power of two and at least 16, got {size}")
        if self.epochs < 1 or self.batch_size < 1 or self.growth_every < 1:
            raise ValueError("epochs, batch_size and growth_every must be positive")
        if self.pose_cap < 2 + 2 * self.noise_copies:
            raise ValueError("pose_cap must leave room for the initial pose set")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

def _ch(n, cfg):
    return max(1, int(round(n * cfg.channel_scale)))


def _conv_relu(filters, extent):
    return [conv(filters, extent), act("relu")]


def _dense_relu(units, rate=0.0):
    layers = [fc(units), act("relu")]
    return layers + [drop(rate)] if rate > 0 else layers


def build_architecture(role, cfg, out_dim=None, stage=None):
    """
    Layer chain and per-sample input shape of a role.

    Returns:
        tuple: (list of LayerSpec, input shape)
    """
    S = cfg.crop_size
    if role in ("localizer", "object-localizer") or (role == "simple-predictor"):
        out = 3 if out_dim is None else out_dim
        specs = (_conv_relu(_ch(8, cfg), 5) + [pool(4)] + _conv_relu(_ch(8, cfg), 5) + [pool(2)]
                 + _conv_relu(_ch(8, cfg), 3) + [flatten()]
                 + _dense_relu(_ch(1024, cfg)) + _dense_relu(_ch(1024, cfg)) + [fc(out)])
        return specs, (1, S, S)
    if role in ("hand-predictor", "object-predictor", "combined-predictor"):
        if role == "hand-predictor" and cfg.hand_architecture == "simple":
            return build_architecture("simple-predictor", cfg, out_dim)
        specs = []
        for filters, extent in ((32, 5), (32, 5), (64, 3), (64, 3)):
            specs += _conv_relu(_ch(filters, cfg), extent) + [pool(2)]
        specs += ([flatten()] + _dense_relu(_ch(1024, cfg), cfg.dropout)
                  + _dense_relu(_ch(1024, cfg), cfg.dropout) + [fc(out_dim)])
        return specs, (1, S, S)
    if role == "synthesizer":
        maps = _ch(32, cfg)
        specs = (_dense_relu(_ch(1024, cfg)) + _dense_relu(_ch(1024, cfg)) + _dense_relu(_ch(1024, cfg))
                 + _dense_relu(maps * SYNTH_BASE * SYNTH_BASE) + [reshape(maps, SYNTH_BASE, SYNTH_BASE)])
        n_stages = synthesizer_stages(cfg) if stage is None else stage + 1
        for _ in range(n_stages - 1):
            specs += [up()] + _conv_relu(maps, 5)
        specs += [conv(1, 3), act("tanh")]
        return specs, (out_dim,)
    if role in ("updater", "object-updater"):
        specs = []
        for filters, extent in ((32, 5), (32, 3), (64, 3), (64, 3)):
            specs += [strided_conv(_ch(filters, cfg), extent, 2), act("relu")]
        specs += [flatten()] + _dense_relu(_ch(1024, cfg)) + _dense_relu(_ch(1024, cfg)) + [fc(out_dim)]
        return specs, (2, S, S)
    raise ValueError(f"unknown network role {role!r}")


def synthesizer_stages(cfg):
    return int(math.log2(cfg.crop_size // SYNTH_BASE)) + 1


def _new_network(role, cfg, out_dim=None, stage=None):
    specs, input_shape = build_architecture(role, cfg, out_dim, stage)
    seed = int(derive_rng(cfg.seed, _ROLE_SALT[role], 0 if stage is None else stage).integers(2 ** 31))
    return Network(specs, input_shape, seed=seed, dtype=np.dtype(cfg.dtype))


# ---------------------------------------------------------------------------
# Role objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearCodec:
    """Network output y -> pose vector ``offset + matrix @ y`` (mm, crop-relative)."""
    offset: np.ndarray
    matrix: np.ndarray

    def decode(self, y):
        return self.offset + np.asarray(y, np.float64) @ self.matrix.T

    def encode(self, pose):
        return (np.asarray(pose, np.float64) - self.offset) @ np.linalg.pinv(self.matrix).T


def prior_codec(prior, cube):
    return LinearCodec(prior.mean.copy(), cube.depth * prior.basis)


def identity_codec(dim, cube):
    return LinearCodec(np.zeros(dim), cube.depth * np.eye(dim))


@dataclass(eq=False)
class Localizer:
    network: Network
    cube: CubeSpec
    crop_size: int
    target: str = "hand"


@dataclass(eq=False)
class PosePredictor:
    network: Network
    codec: LinearCodec
    cube: CubeSpec
    kind: str = "hand"
    prior: PosePrior = None

    def predict(self, patches):
        """Pose vectors (mm, relative to each crop center) for (B, S, S) patches."""
        patches = np.asarray(patches)
        single = patches.ndim == 2
        out = self.network(patches.reshape(-1, 1, *patches.shape[-2:]))
        poses = self.codec.decode(out)
        return poses[0] if single else poses


@dataclass(eq=False)
class HandSynthesizer:
    network: Network
    cube: CubeSpec
    stages: list = field(default_factory=list)

    def _inputs(self, poses):
        poses = np.asarray(poses, np.float64)
        return poses.reshape(-1, self.network.input_shape[0]) / self.cube.depth

    def __call__(self, poses):
        poses = np.asarray(poses, np.float64)
        single = poses.ndim < 3
        out = self.network(self._inputs(poses))[:, 0].astype(np.float64)
        return out[0] if single else out

    def input_gradient(self, poses, grad_images):
        """Gradient of sum(grad_images * synth(poses)) with respect to the poses (mm)."""
        x = self._inputs(poses)
        self.network.forward(x, training=False)
        g = np.asarray(grad_images, np.float64).reshape(x.shape[0], 1, *self.network.output_shape[1:])
        grad_x = self.network.backward(g)
        return grad_x.astype(np.float64) / self.cube.depth


@dataclass(eq=False)
class PoseUpdater:
    network: Network
    matrix: np.ndarray
    cube: CubeSpec
    kind: str = "hand"

    def apply(self, poses, raw):
        return np.asarray(poses, np.float64) + np.asarray(raw, np.float64) @ self.matrix.T


def synth_hand(pose, synthesizer):
    """Normalized crop of the hand in ``pose`` (mm relative to the crop center)."""
    return synthesizer(pose)


def predict_update(observed, synthesized, updater):
    """
    Raw update for one or a batch of crop pairs.

    The result lives in the updater's output space (prior coefficients plus
    offset, joint offsets or corner offsets); ``PoseUpdater.apply`` maps it to
    a pose.
    """
    observed = np.asarray(observed)
    synthesized = np.asarray(synthesized)
    if observed.shape != synthesized.shape:
        raise ShapeMismatchError("observed and synthesized crops differ", observed.shape, synthesized.shape)
    single = observed.ndim == 2
    x = np.stack([observed.reshape(-1, *observed.shape[-2:]),
                  synthesized.reshape(-1, *synthesized.shape[-2:])], axis=1)
    out = updater.network(x).astype(np.float64)
    return out[0] if single else out


def hand_update_matrix(prior, cube, space):
    J = prior.dim // 3
    if space == "joints":
        return cube.depth * np.eye(prior.dim)
    return cube.depth * np.hstack([prior.basis, np.tile(np.eye(3), (J, 1))])


def clip_to_cube(poses, cube):
    return np.clip(poses, -cube.depth, cube.depth)


# ---------------------------------------------------------------------------
# Crops and targets
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CropSet:
    """Normalized crops with their crop-relative pose targets (mm)."""
    patches: np.ndarray
    targets: np.ndarray
    centers: np.ndarray
    transforms: list
    indices: list
    cube: CubeSpec

    def __len__(self):
        return len(self.indices)

    def subset(self, indices):
        """The crops of the given sample indices, in that order."""
        position = {index: k for k, index in enumerate(self.indices)}
        keep = [position[i] for i in indices]
        return CropSet(self.patches[keep], self.targets[keep], self.centers[keep],
                       [self.transforms[k] for k in keep], list(indices), self.cube)


def hand_reference(sample):
    return sample.hand_pose[0]


def hand_target(sample, center):
    return (sample.hand_pose - center).ravel()


def object_reference(sample):
    return sample.object_pose.translation


def object_target_fn(model):
    def target(sample, center):
        return (corners_from_pose(sample.object_pose, model) - center).ravel()
    return target


def prepare_crops(samples, reference, target, cube, size, jitter=0.0, rng=None):
    """
    Crop every sample around ``reference(sample)``, optionally moved by
    isotropic Gaussian jitter, and express ``target(sample, center)``.
    """
    patches, targets, centers, transforms, indices = [], [], [], [], []
    for sample in samples:
        try:
            center = np.asarray(reference(sample), np.float64)
            if jitter > 0:
                center = center + rng.normal(0.0, jitter, 3)
            crop = crop_cube(sample.depth, center, cube, sample.camera, size)
        except GeometryError as e:
            logger.warning(f"Skipping sample {sample.index}: {e}")
            continue
        patches.append(crop.patch)
        targets.append(target(sample, center))
        centers.append(center)
        transforms.append(crop.transform)
        indices.append(sample.index)
    if not patches:
        raise EmptyForegroundError("no sample could be cropped")
    return CropSet(np.asarray(patches, np.float32), np.asarray(targets, np.float64),
                   np.asarray(centers), transforms, indices, cube)


def prepare_hand_samples(samples, cfg, cube=HAND_CUBE, jitter=0.0, salt=0):
    rng = derive_rng(cfg.seed, 1000 + salt)
    return prepare_crops(samples, hand_reference, hand_target, cube, cfg.crop_size, jitter, rng)


def prepare_object_samples(samples, model, cfg, cube=OBJECT_CUBE, jitter=0.0, salt=0):
    rng = derive_rng(cfg.seed, 2000 + salt)
    with_object = [s for s in samples if s.object_pose is not None]
    return prepare_crops(with_object, object_reference, object_target_fn(model), cube,
                         cfg.crop_size, jitter, rng)


def prepare_joint_samples(samples, model, cfg, hand_cube=HAND_CUBE, object_cube=OBJECT_CUBE, salt=3):
    """
    Hand and object crops of the hand-object samples, aligned so that entry i
    of both crop sets comes from the same image.

    Returns:
        tuple: (hand CropSet, object CropSet, list of the matching samples)
    """
    with_object = [s for s in samples if s.object_pose is not None]
    hand = prepare_hand_samples(with_object, cfg, hand_cube, jitter=cfg.center_jitter, salt=salt)
    obj = prepare_object_samples(with_object, model, cfg, object_cube, jitter=cfg.center_jitter, salt=salt)
    common = sorted(set(hand.indices) & set(obj.indices))
    by_index = {s.index: s for s in with_object}
    return hand.subset(common), obj.subset(common), [by_index[i] for i in common]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class _TrainLog:
    def __init__(self, cfg, tag):
        self.path = None
        if cfg.log_dir:
            os.makedirs(os.path.join(cfg.log_dir, tag), exist_ok=True)
            self.path = os.path.join(cfg.log_dir, tag, "train_log.csv")
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(["epoch", "loss", "eval_metric"])

    def row(self, epoch, loss, metric):
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([epoch, f"{loss:.8g}", "" if metric is None else f"{metric:.8g}"])


def _train(net, size, batch_fn, cfg, tag, stage=None, after_epoch=None, evaluate=None):
    """
    ADAM over shuffled mini-batches.

    ``size`` is the number of training items (or a callable returning it, for
    sets that grow); ``batch_fn(indices)`` returns the network input and an
    objective mapping the output to (mean loss, gradient).
    """
    state = AdamState.create(net.params, cfg.learning_rate, cfg.decay)
    order_rng = derive_rng(cfg.seed, _ROLE_SALT.get(tag.split("/")[0], 0), 77, 0 if stage is None else stage)
    log = _TrainLog(cfg, tag)
    curve, evals = [], []
    for epoch in tqdm(range(cfg.epochs), desc=f"Training {tag}", disable=not cfg.progress):
        state = start_epoch(state, epoch)
        n = size() if callable(size) else size
        order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x, objective = batch_fn(batch)
            out = net.forward(x, training=True)
            loss, grad = objective(out.astype(np.float64))
            if not np.isfinite(loss):
                raise TrainingFault(f"{tag}: non-finite loss", epoch=epoch, stage=stage)
            try:
                net.backward(grad)
            except TrainingFault as e:
                raise TrainingFault(f"{tag}: non-finite gradient", layer=e.layer, epoch=epoch, stage=stage) from e
            net.params, state = adam_step(net.params, net.grads, state)
            total += loss * len(batch)
        curve.append(total / n)
        metric = evaluate() if evaluate is not None else None
        if metric is not None:
            evals.append(metric)
        log.row(epoch, curve[-1], metric)
        logger.info(f"[{tag}] epoch {epoch + 1}/{cfg.epochs} loss {curve[-1]:.6g}"
                    + ("" if metric is None else f" eval {metric:.6g}"))
        if after_epoch is not None:
            after_epoch(epoch)
    return curve, evals


def _codec_objective(codec, targets, per):
    """Mean squared pose error (per ``per`` points) through a linear output map."""
    def objective(out):
        residual = codec.decode(out) - targets
        loss = float(np.mean(np.sum(residual ** 2, axis=1)) / per)
        grad = 2.0 * residual @ codec.matrix / (len(targets) * per)
        return loss, grad
    return objective


@dataclass(eq=False)
class TrainResult:
    model: object
    curve: list
    eval_curve: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def network(self):
        return self.model.network


# ---------------------------------------------------------------------------
# Localizer
# ---------------------------------------------------------------------------

def localizer_inputs(samples, reference, cube, size):
    """Center-of-mass crops and the normalized offsets of ``reference`` from the center of mass."""
    patches, targets = [], []
    for sample in samples:
        try:
            com = center_of_mass(sample.depth, sample.camera)
            crop = crop_cube(sample.depth, com, cube, sample.camera, size)
        except GeometryError as e:
            logger.warning(f"Skipping sample {sample.index} for localizer training: {e}")
            continue
        A = crop.transform.A
        ref_uvz = project(reference(sample), sample.camera)
        com_uvz = project(com, sample.camera)
        targets.append([(ref_uvz[0] - com_uvz[0]) / A[0, 0],
                        (ref_uvz[1] - com_uvz[1]) / A[1, 1],
                        (ref_uvz[2] - com_uvz[2]) / cube.depth])
        patches.append(crop.patch)
    if not patches:
        raise EmptyForegroundError("no sample has a usable foreground")
    return np.asarray(patches, np.float32)[:, None], np.asarray(targets)


def train_localizer(samples, cfg, target="hand", cube=HAND_CUBE):
    """
    Train the offset regressor from the center of mass to the MCP joint
    (``target="hand"``) or to the object centroid (``target="object"``).
    """
    role = "localizer" if target == "hand" else "object-localizer"
    reference = hand_reference if target == "hand" else object_reference
    if target == "object":
        samples = [s for s in samples if s.object_pose is not None]
    x, y = localizer_inputs(samples, reference, cube, cfg.crop_size)
    net = _new_network(role, cfg)
    codec = identity_codec(3, CubeSpec(1.0))

    def batch_fn(idx):
        return x[idx], _codec_objective(codec, y[idx], 1)

    curve, _ = _train(net, len(x), batch_fn, cfg, role)
    return TrainResult(Localizer(net, cube, cfg.crop_size, target), curve)


def refine_location(d, localizer, cam):
    """Center of mass corrected by the localizer's predicted offset (mm)."""
    com = center_of_mass(d, cam)
    crop = crop_cube(d, com, localizer.cube, cam, localizer.crop_size)
    offset = localizer.network(crop.patch[None, None].astype(localizer.network.dtype))[0].astype(np.float64)
    A = crop.transform.A
    u, v, z = project(com, cam)
    return backproject(u + offset[0] * A[0, 0], v + offset[1] * A[1, 1],
                       z + offset[2] * localizer.cube.depth, cam)


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

def _train_predictor(crops, codec, cfg, role, per, evaluate_fn=None):
    net = _new_network(role, cfg, out_dim=codec.matrix.shape[1])
    x = crops.patches[:, None]

    def batch_fn(idx):
        return x[idx], _codec_objective(codec, crops.targets[idx], per)

    evaluate = None
    if evaluate_fn is not None:
        evaluate = lambda: evaluate_fn(net)
    return net, _train(net, len(crops), batch_fn, cfg, role, evaluate=evaluate)


def train_predictor_hand(samples, prior, cfg, cube=HAND_CUBE, use_prior=True):
    """
    Train the hand predictor on crops centered at the MCP joint.

    With ``use_prior`` the network regresses prior coefficients and the loss is
    taken after decoding, in mm² per joint; otherwise it regresses joints.
    """
    crops = prepare_hand_samples(samples, cfg, cube)
    dim = crops.targets.shape[1]
    codec = prior_codec(prior, cube) if use_prior else identity_codec(dim, cube)
    net, (curve, _) = _train_predictor(crops, codec, cfg, "hand-predictor", dim // 3)
    return TrainResult(PosePredictor(net, codec, cube, "hand", prior if use_prior else None), curve)


def train_predictor_object(samples, model, cfg, cube=OBJECT_CUBE):
    """Train the corner regressor; the eval curve is the mean rotation error (rad) after Procrustes."""
    crops = prepare_object_samples(samples, model, cfg, cube, jitter=cfg.center_jitter)
    codec = identity_codec(24, cube)
    subset = slice(0, min(64, len(crops)))
    truth = [pose_from_corners(t.reshape(8, 3), model) for t in crops.targets[subset]]

    def mean_rotation_error(net):
        corners = codec.decode(net(crops.patches[subset][:, None]))
        errors = []
        for c, gt in zip(corners, truth):
            try:
                errors.append(rotation_error(pose_from_corners(c.reshape(8, 3), model).rotation, gt.rotation))
            except ValueError:
                errors.append(np.pi)
        return float(np.mean(errors))

    net, (curve, evals) = _train_predictor(crops, codec, cfg, "object-predictor", 8, mean_rotation_error)
    return TrainResult(PosePredictor(net, codec, cube, "object"), curve, evals)


def train_predictor_combined(samples, model, cfg, cube=SCENE_CUBE):
    """
    Single network predicting hand joints and box corners from one
    center-of-mass crop of the whole scene.
    """
    def reference(sample):
        return center_of_mass(sample.depth, sample.camera)

    def target(sample, center):
        corners = corners_from_pose(sample.object_pose, model)
        return np.concatenate([(sample.hand_pose - center).ravel(), (corners - center).ravel()])

    crops = prepare_crops([s for s in samples if s.object_pose is not None], reference, target,
                          cube, cfg.crop_size)
    dim = crops.targets.shape[1]
    codec = identity_codec(dim, cube)
    net, (curve, _) = _train_predictor(crops, codec, cfg, "combined-predictor", dim // 3)
    return TrainResult(PosePredictor(net, codec, cube, "combined"), curve)


# ---------------------------------------------------------------------------
# Synthesizer
# ---------------------------------------------------------------------------

def block_mean(images, resolution):
    n, size = images.shape[0], images.shape[-1]
    f = size // resolution
    return images.reshape(n, resolution, f, resolution, f).mean(axis=(2, 4))


def train_synthesizer(samples, cfg, cube=HAND_CUBE):
    """
    Train the pose-to-depth decoder stage by stage.

    Stage s outputs (8·2^s)² images and is fitted to block means of the
    crops; each stage starts from the layers of the previous one. Every stage
    network is kept in ``model.stages``.
    """
    crops = prepare_hand_samples(samples, cfg, cube, jitter=cfg.center_jitter, salt=1)
    inputs = (crops.targets / cube.depth).astype(np.float32)
    dim = inputs.shape[1]
    trunk = len(build_architecture("synthesizer", cfg, dim, stage=0)[0]) - 2
    stages, curve = [], []
    previous = None
    for stage in range(synthesizer_stages(cfg)):
        resolution = SYNTH_BASE * 2 ** stage
        target = block_mean(crops.patches.astype(np.float64), resolution)
        net = _new_network("synthesizer", cfg, out_dim=dim, stage=stage)
        if previous is not None:
            net.copy_prefix_from(previous, trunk + 3 * (stage - 1))

        def batch_fn(idx, target=target):
            t = target[idx][:, None]

            def objective(out):
                diff = out - t
                pixels = diff[0].size
                return float(np.mean(np.sum(diff ** 2, axis=(1, 2, 3))) / pixels), 2.0 * diff / (len(idx) * pixels)
            return inputs[idx], objective

        stage_curve, _ = _train(net, len(crops), batch_fn, cfg, f"synthesizer/stage{stage}", stage=stage)
        curve.extend(stage_curve)
        stages.append(net)
        previous = net
        logger.info(f"Synthesizer stage {stage} ({resolution}x{resolution}) final loss {stage_curve[-1]:.6g}")
    return TrainResult(HandSynthesizer(previous, cube, stages), curve)


# ---------------------------------------------------------------------------
# Updater
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class UpdaterPoseSet:
    """
    Per-image training poses for an updater.

    Entry 0 of every image is its ground truth. The first ``protected[i]``
    entries are never evicted; later (generated) entries are dropped oldest
    first once an image holds ``cap`` poses.
    """
    poses: list
    partners: list
    protected: list

    def sizes(self):
        return [len(p) for p in self.poses]

    def total(self):
        return sum(self.sizes())

    def entries(self):
        return [(i, j) for i, poses in enumerate(self.poses) for j in range(len(poses))]

    def add(self, i, pose, partner, cap):
        self.poses[i].append(np.asarray(pose, np.float64))
        self.partners[i].append(partner)
        while len(self.poses[i]) > cap and len(self.poses[i]) > self.protected[i]:
            del self.poses[i][self.protected[i]]
            del self.partners[i][self.protected[i]]


def build_updater_pose_set(crops, initial, cfg, rng, partner_fn=None):
    """
    Ground truth, the predictor output ``initial[i]`` and ``cfg.noise_copies``
    Gaussian copies of each, clipped to the crop cube.

    ``partner_fn(i, rng)`` attaches a pose of the other body to every entry
    (joint hand-object training); without it partners are None.
    """
    sigma = cfg.noise_sigma * crops.cube.depth
    poses, partners, protected = [], [], []
    for i in range(len(crops)):
        seeds = [crops.targets[i], clip_to_cube(np.asarray(initial[i], np.float64), crops.cube)]
        members = list(seeds)
        for seed_pose in seeds:
            for _ in range(cfg.noise_copies):
                members.append(clip_to_cube(seed_pose + rng.normal(0.0, sigma, seed_pose.shape), crops.cube))
        poses.append(members)
        partners.append([partner_fn(i, rng) if partner_fn else None for _ in members])
        protected.append(len(members))
    return UpdaterPoseSet(poses, partners, protected)


def _hinge_objective(poses, targets, matrix, lam):
    def objective(out):
        updated = poses + out @ matrix.T
        after = np.linalg.norm(updated - targets, axis=1)
        before = np.linalg.norm(poses - targets, axis=1)
        margin = after - lam * before
        loss = float(np.mean(np.maximum(margin, 0.0)))
        active = (margin > 0) & (after > 0)
        direction = (updated - targets) / np.maximum(after, 1e-12)[:, None]
        grad = (direction * active[:, None]) @ matrix / len(poses)
        return loss, grad
    return objective


def _gather_pairs(pose_set, entries):
    images = np.array([i for i, _ in entries])
    poses = np.array([pose_set.poses[i][j] for i, j in entries])
    partners = [pose_set.partners[i][j] for i, j in entries]
    return images, poses, partners


def apply_updater(updater, crops, synthesize, images, poses, partners, batch_size=256):
    """One clipped update step for each (image, pose, partner) triple."""
    out = np.empty_like(poses)
    for start in range(0, len(poses), batch_size):
        sl = slice(start, start + batch_size)
        synth = synthesize(images[sl], poses[sl], partners[sl])
        raw = predict_update(crops.patches[images[sl]], synth, updater)
        out[sl] = clip_to_cube(updater.apply(poses[sl], raw), crops.cube)
    return out


def grow_pose_set(pose_set, crops, updater, synthesize, cfg, rng):
    """
    Add self-applied updates of randomly chosen members, then ground truth
    plus error vectors resampled from the current updated poses of other images.
    """
    n_self = math.ceil(cfg.growth_per_image / 2)
    n_err = cfg.growth_per_image - n_self
    chosen = []
    for i, poses in enumerate(pose_set.poses):
        picks = rng.choice(len(poses), size=min(n_self, len(poses)), replace=False)
        chosen.extend((i, int(j)) for j in picks)
    images, poses, partners = _gather_pairs(pose_set, chosen)
    updated = apply_updater(updater, crops, synthesize, images, poses, partners)
    for (i, _), pose, partner in zip(chosen, updated, partners):
        pose_set.add(i, pose, partner, cfg.pose_cap)
    errors = updated - crops.targets[images]
    for i in range(len(pose_set.poses)):
        pool = np.flatnonzero(images != i)
        if pool.size == 0:
            pool = np.arange(len(errors))
        for e in rng.choice(pool, size=n_err):
            partner = pose_set.partners[i][int(rng.integers(len(pose_set.partners[i])))]
            pose_set.add(i, clip_to_cube(crops.targets[i] + errors[e], crops.cube), partner, cfg.pose_cap)


def train_updater(crops, synthesize, pose_set, cfg, matrix, kind="hand"):
    """
    Train an updater with the hinge cost max(0, |p'' - p| - λ|p' - p|).

    ``synthesize(images, poses, partners)`` renders the synthetic channel for a
    batch. The pose set grows every ``cfg.growth_every`` epochs; its total size
    after each epoch is in ``extra["pose_set_sizes"]``.
    """
    role = "updater" if kind == "hand" else "object-updater"
    net = _new_network(role, cfg, out_dim=matrix.shape[1])
    updater = PoseUpdater(net, np.asarray(matrix, np.float64), crops.cube, kind)
    grow_rng = derive_rng(cfg.seed, _ROLE_SALT[role], 31)
    holder = {"entries": pose_set.entries()}
    sizes = []

    def batch_fn(idx):
        images, poses, partners = _gather_pairs(pose_set, [holder["entries"][k] for k in idx])
        synth = synthesize(images, poses, partners)
        x = np.stack([crops.patches[images], synth.astype(np.float32)], axis=1)
        return x, _hinge_objective(poses, crops.targets[images], updater.matrix, cfg.lam)

    def after_epoch(epoch):
        if (epoch + 1) % cfg.growth_every == 0 and epoch + 1 < cfg.epochs:
            grow_pose_set(pose_set, crops, updater, synthesize, cfg, grow_rng)
            holder["entries"] = pose_set.entries()
            logger.info(f"[{role}] pose set grown to {pose_set.total()} poses")
        sizes.append(pose_set.total())

    curve, _ = _train(net, lambda: len(holder["entries"]), batch_fn, cfg, role, after_epoch=after_epoch)
    return TrainResult(updater, curve, extra={"pose_set_sizes": sizes})


def hand_synthesize_fn(synthesizer):
    J3 = synthesizer.network.input_shape[0]

    def synthesize(images, poses, partners):
        return synthesizer(np.asarray(poses).reshape(-1, J3 // 3, 3))
    return synthesize


def train_hand_updater(samples, predictor, synthesizer, prior, cfg):
    """Hand-only updater: pose set from the predictor, synthetic channel from the synthesizer."""
    crops = prepare_hand_samples(samples, cfg, synthesizer.cube, jitter=cfg.center_jitter, salt=2)
    initial = predictor.predict(crops.patches)
    rng = derive_rng(cfg.seed, _ROLE_SALT["updater"], 11)
    pose_set = build_updater_pose_set(crops, initial, cfg, rng)
    matrix = hand_update_matrix(prior, synthesizer.cube, cfg.updater_space)
    result = train_updater(crops, hand_synthesize_fn(synthesizer), pose_set, cfg, matrix, "hand")
    result.extra["pose_set"] = pose_set
    result.extra["crops"] = crops
    return result


@dataclass
class AuditResult:
    before: list
    after: list
    radii: list
    satisfied_rate: float
    p_value: float
    lam: float

    def to_dict(self):
        return asdict(self)


def update_audit(crops, updater, synthesize, radii, cfg, rng, partners=None):
    """
    One update step from noised ground truth at several radii (fractions of
    the cube half-extent).

    Errors are mean per-point distances in mm. The p-value is the one-sided
    Mann-Whitney test that post-update errors are smaller.
    """
    per = crops.targets.shape[1] // 3
    images, starts, radius_tags = [], [], []
    for r in radii:
        for i in range(len(crops)):
            images.append(i)
            starts.append(clip_to_cube(crops.targets[i] + rng.normal(0.0, r * crops.cube.depth,
                                                                     crops.targets.shape[1]), crops.cube))
            radius_tags.append(r)
    images = np.asarray(images)
    starts = np.asarray(starts)
    pair_partners = [None if partners is None else partners[i] for i in images]
    updated = apply_updater(updater, crops, synthesize, images, starts, pair_partners)
    gt = crops.targets[images]
    before_norm = np.linalg.norm(starts - gt, axis=1)
    after_norm = np.linalg.norm(updated - gt, axis=1)
    before = np.linalg.norm((starts - gt).reshape(len(gt), per, 3), axis=2).mean(axis=1)
    after = np.linalg.norm((updated - gt).reshape(len(gt), per, 3), axis=2).mean(axis=1)
    rate = float(np.mean(after_norm < cfg.lam * before_norm))
    p_value = float(stats.mannwhitneyu(after, before, alternative="less").pvalue)
    logger.info(f"Update audit: {rate:.1%} satisfy the lambda={cfg.lam} inequality, "
                f"mean error {before.mean():.2f} -> {after.mean():.2f} mm (p={p_value:.3g})")
    return AuditResult(before.tolist(), after.tolist(), radius_tags, rate, p_value, cfg.lam)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_role(path, model):
    """Write a role object to an FBPOSE-W1 file."""
    meta = {"cube": list(model.cube.half)}
    attachments = {}
    if isinstance(model, Localizer):
        meta.update(role="localizer", target=model.target, crop_size=model.crop_size)
    elif isinstance(model, PosePredictor):
        meta.update(role="predictor", kind=model.kind)
        attachments = {"codec.offset": model.codec.offset, "codec.matrix": model.codec.matrix}
        if model.prior is not None:
            attachments.update(model.prior.attachments())
    elif isinstance(model, HandSynthesizer):
        meta.update(role="synthesizer")
    elif isinstance(model, PoseUpdater):
        meta.update(role="updater", kind=model.kind)
        attachments = {"update.matrix": model.matrix}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    save_weights(path, model.network, attachments, meta)


def load_role(path):
    weights = load_weights(path)
    meta, att, net = weights.meta, weights.attachments, weights.network
    cube = CubeSpec(tuple(meta["cube"]))
    role = meta.get("role")
    if role == "localizer":
        return Localizer(net, cube, meta["crop_size"], meta["target"])
    if role == "predictor":
        prior = PosePrior.from_attachments(att) if "prior.mean" in att else None
        return PosePredictor(net, LinearCodec(att["codec.offset"], att["codec.matrix"]), cube, meta["kind"], prior)
    if role == "synthesizer":
        return HandSynthesizer(net, cube)
    if role == "updater":
        return PoseUpdater(net, att["update.matrix"], cube, meta["kind"])
    raise ValueError(f"{path}: unknown role {role!r}")
