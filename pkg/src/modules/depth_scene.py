"""
Synthetic depth scenes: a capsule hand on a kinematic tree, rigid objects built
from convex primitives, an analytic ray-cast z-buffer renderer, pixel-wise min
compositing, sensor noise, collision-checked scene sampling and the on-disk
FBPOSE-D1 dataset format.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from itertools import repeat
import logging
import os
import shutil
import struct

import numpy as np
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from src.modules.geometry import CameraIntrinsics, default_camera, pixel_rays, project
from src.modules.pose_model import ObjectPose, random_rotation
from src.modules.utils import (
    DegeneratePoseError, FormatError, SceneRejectedError, ShapeMismatchError,
    derive_rng, read_json, sha256_of, write_json,
)

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"FBPOSE-D1"
DEFAULT_FAR = 2000.0
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Metric depth in mm; invalid pixels hold the ``far`` sentinel."""
    depth: np.ndarray
    valid: np.ndarray
    far: float = DEFAULT_FAR

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ShapeMismatchError("depth and validity maps differ", depth.shape, valid.shape)
        object.__setattr__(self, "depth", np.where(valid, depth, self.far))
        object.__setattr__(self, "valid", valid)

    @classmethod
    def empty(cls, width, height, far=DEFAULT_FAR):
        return cls(np.full((height, width), far), np.zeros((height, width), dtype=bool), far)

    @classmethod
    def from_depth(cls, depth, far=DEFAULT_FAR):
        depth = np.asarray(depth, dtype=np.float64)
        return cls(depth, np.isfinite(depth) & (depth > 0) & (depth < far), far)

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def height(self):
        return self.depth.shape[0]


# ---------------------------------------------------------------------------
# Hand model
# ---------------------------------------------------------------------------

HAND_JOINT_NAMES = (
    "middle_mcp", "wrist",
    "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_pip", "index_tip",
    "middle_pip", "middle_tip",
    "ring_pip", "ring_tip",
    "pinky_pip", "pinky_tip",
    "palm_side",
)


@dataclass(frozen=True, eq=False)
class HandGeometry:
    rest: np.ndarray
    parents: tuple
    radii: np.ndarray
    names: tuple = HAND_JOINT_NAMES
    fingertips: tuple = (4, 6, 8, 10, 12)
    links: tuple = ()

    def __post_init__(self):
        rest = np.asarray(self.rest, dtype=np.float64)
        radii = np.asarray(self.radii, dtype=np.float64)
        J = rest.shape[0]
        if J < 5 or rest.shape != (J, 3):
            raise ShapeMismatchError("hand skeleton needs at least 5 joints", rest.shape)
        if len(self.parents) != J or radii.shape != (J,) or len(self.names) != J:
            raise ShapeMismatchError("skeleton tables differ in length",
                                     (len(self.parents),), radii.shape, (len(self.names),))
        if self.parents[0] != -1 or any(not 0 <= p < i for i, p in enumerate(self.parents) if i):
            raise ValueError("parents must form a tree rooted at joint 0 in topological order")
        if np.any(radii <= 0) or any(r <= 0 for _, _, r in self.links):
            raise ValueError("capsule radii must be positive")
        object.__setattr__(self, "rest", rest)
        object.__setattr__(self, "radii", radii)

    @property
    def joint_count(self):
        return self.rest.shape[0]

    def bones(self):
        bones = [(p, i, float(self.radii[i])) for i, p in enumerate(self.parents) if p >= 0]
        return bones + [(a, b, float(r)) for a, b, r in self.links]


def default_hand_geometry():
    """14-joint hand rooted at the middle-finger MCP, palm facing the camera."""
    rest = np.array([
        [0.0, 0.0, 0.0],
        [0.0, 80.0, 0.0],
        [-35.0, 55.0, -5.0], [-55.0, 30.0, -10.0], [-65.0, 5.0, -15.0],
        [-25.0, -40.0, 0.0], [-28.0, -70.0, -5.0],
        [0.0, -45.0, 0.0], [0.0, -78.0, -5.0],
        [22.0, -40.0, 0.0], [25.0, -68.0, -5.0],
        [40.0, -30.0, 0.0], [45.0, -52.0, -5.0],
        [35.0, 75.0, 0.0],
    ])
    parents = (-1, 0, 1, 2, 3, 0, 5, 0, 7, 0, 9, 0, 11, 1)
    radii = np.array([24.0, 24.0, 12.0, 10.0, 9.0, 10.0, 9.0, 10.0, 9.0, 10.0, 9.0, 9.0, 8.0, 22.0])
    return HandGeometry(rest, parents, radii, links=((13, 11, 16.0),))


def hand_capsules(pose, geometry):
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (geometry.joint_count, 3):
        raise ShapeMismatchError("hand pose does not match the skeleton", pose.shape, (geometry.joint_count, 3))
    bones = geometry.bones()
    segments = np.stack([np.stack([pose[a], pose[b]]) for a, b, _ in bones])
    radii = np.array([r for _, _, r in bones])
    return segments, radii


# ---------------------------------------------------------------------------
# Object model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Primitive:
    """Convex solid in the object frame; cylinders run along the object z axis."""
    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    half_height: float = 0.0

    def __post_init__(self):
        if self.kind not in ("box", "sphere", "cylinder"):
            raise ValueError(f"unknown primitive {self.kind!r}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=np.float64))
        sizes = {"box": self.half_extents, "sphere": [self.radius],
                 "cylinder": [self.radius, self.half_height]}[self.kind]
        if np.any(np.asarray(sizes) <= 0):
            raise ValueError(f"{self.kind} primitive needs positive extents")

    def aabb_half(self):
        if self.kind == "box":
            return self.half_extents
        if self.kind == "sphere":
            return np.full(3, self.radius)
        return np.array([self.radius, self.radius, self.half_height])

    def sdf(self, p):
        q = np.asarray(p) - self.center
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.radius
        if self.kind == "box":
            d = np.abs(q) - self.half_extents
        else:
            d = np.stack([np.linalg.norm(q[..., :2], axis=-1) - self.radius,
                          np.abs(q[..., 2]) - self.half_height], axis=-1)
        return np.linalg.norm(np.maximum(d, 0.0), axis=-1) + np.minimum(d.max(axis=-1), 0.0)

    def intersect(self, origin, dirs):
        """Entry distance along unit rays (inf where missed or behind the origin)."""
        o = origin - self.center
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "sphere":
                return _ray_sphere(o, dirs, self.radius)
            if self.kind == "box":
                safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
                t1 = (-self.half_extents - o) / safe
                t2 = (self.half_extents - o) / safe
                near = np.minimum(t1, t2).max(axis=-1)
                far = np.maximum(t1, t2).min(axis=-1)
                return np.where((near <= far) & (near > 0), near, np.inf)
            dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
            a = dx * dx + dy * dy
            b = o[0] * dx + o[1] * dy
            c = o[0] ** 2 + o[1] ** 2 - self.radius ** 2
            h = b * b - a * c
            t_side = (-b - np.sqrt(np.maximum(h, 0.0))) / np.where(a > 1e-12, a, 1.0)
            side_ok = (a > 1e-12) & (h >= 0) & (t_side > 0) & (np.abs(o[2] + t_side * dz) <= self.half_height)
            t_side = np.where(side_ok, t_side, np.inf)
            best = t_side
            for cap in (-self.half_height, self.half_height):
                safe = np.where(np.abs(dz) < 1e-12, 1e-12, dz)
                t_cap = (cap - o[2]) / safe
                x = o[0] + t_cap * dx
                y = o[1] + t_cap * dy
                cap_ok = (t_cap > 0) & (x * x + y * y <= self.radius ** 2)
                best = np.minimum(best, np.where(cap_ok, t_cap, np.inf))
            return best


@dataclass(frozen=True, eq=False)
class ObjectModel:
    name: str
    primitives: tuple
    half_extents: np.ndarray

    def __post_init__(self):
        half = np.asarray(self.half_extents, dtype=np.float64)
        if half.shape != (3,) or np.any(half <= 0):
            raise ValueError(f"bounding box half-extents must be 3 positive values, got {half}")
        if not self.primitives:
            raise ValueError("object model needs at least one primitive")
        for prim in self.primitives:
            if np.any(np.abs(prim.center) + prim.aabb_half() > half + 1e-9):
                raise ValueError(f"{prim.kind} primitive of '{self.name}' leaves the bounding box")
        object.__setattr__(self, "half_extents", half)

    @property
    def bounding_radius(self):
        return float(np.linalg.norm(self.half_extents))


def large_cuboid():
    return ObjectModel("large-cuboid", (Primitive("box", half_extents=(45.0, 30.0, 20.0)),), (45.0, 30.0, 20.0))


def small_cuboid():
    return ObjectModel("small-cuboid", (Primitive("box", half_extents=(25.0, 20.0, 15.0)),), (25.0, 20.0, 15.0))


def bottle():
    return ObjectModel("bottle", (
        Primitive("cylinder", center=(0.0, 0.0, -10.0), radius=25.0, half_height=50.0),
        Primitive("sphere", center=(0.0, 0.0, 40.0), radius=20.0),
    ), (25.0, 25.0, 60.0))


OBJECT_MODELS = {"large-cuboid": large_cuboid, "small-cuboid": small_cuboid, "bottle": bottle}


def object_model(name):
    try:
        return OBJECT_MODELS[name]()
    except KeyError:
        raise ValueError(f"unknown object model {name!r}; choose from {sorted(OBJECT_MODELS)}") from None


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _ray_sphere(oc_neg, dirs, radius):
    # rays start at the origin; oc_neg is origin minus sphere center
    b = dirs @ oc_neg
    c = oc_neg @ oc_neg - radius * radius
    h = b * b - c
    t = -b - np.sqrt(np.maximum(h, 0.0))
    return np.where((h >= 0) & (t > 0), t, np.inf)


def _ray_capsule(dirs, pa, pb, radius):
    ba = pb - pa
    oa = -pa
    baba = ba @ ba
    t = np.minimum(_ray_sphere(oa, dirs, radius), _ray_sphere(-pb, dirs, radius))
    if baba <= 0:
        return t
    bard = dirs @ ba
    baoa = ba @ oa
    rdoa = dirs @ oa
    oaoa = oa @ oa
    a = baba - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - radius * radius * baba
    h = b * b - a * c
    ok = (a > 1e-9 * baba) & (h >= 0)
    t_body = (-b - np.sqrt(np.maximum(h, 0.0))) / np.where(ok, a, 1.0)
    y = baoa + t_body * bard
    ok &= (t_body > 0) & (y > 0) & (y < baba)
    return np.minimum(t, np.where(ok, t_body, np.inf))


def _depth_from_hits(t, dirs_z, camera, far):
    hit = np.isfinite(t)
    depth = np.where(hit, t * dirs_z, far)
    return DepthImage(depth.reshape(camera.height, camera.width),
                      hit.reshape(camera.height, camera.width), far)


def render_capsules(segments, radii, camera, far=DEFAULT_FAR):
    """Z-buffer ray cast of capsules given as (M, 2, 3) endpoints in mm."""
    segments = np.asarray(segments, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    if segments.ndim != 3 or segments.shape[1:] != (2, 3) or radii.shape != segments.shape[:1]:
        raise ShapeMismatchError("capsules need (M, 2, 3) endpoints and M radii", segments.shape, radii.shape)
    dirs = pixel_rays(camera).reshape(-1, 3)
    t = np.full(dirs.shape[0], np.inf)
    for (pa, pb), r in zip(segments, radii):
        if max(pa[2], pb[2]) + r <= 0:
            continue
        t = np.minimum(t, _ray_capsule(dirs, pa, pb, r))
    return _depth_from_hits(t, dirs[:, 2], camera, far)


def render_hand(pose, geometry, camera, far=DEFAULT_FAR):
    segments, radii = hand_capsules(pose, geometry)
    for (a, b, _), (pa, pb) in zip(geometry.bones(), segments):
        if np.linalg.norm(pb - pa) < 1e-6:
            raise DegeneratePoseError(f"bone {geometry.names[a]}-{geometry.names[b]} has coincident joints")
    return render_capsules(segments, radii, camera, far)


def render_object(pose, model, camera, far=DEFAULT_FAR):
    if not isinstance(pose, ObjectPose):
        pose = ObjectPose(*pose)
    dirs = pixel_rays(camera).reshape(-1, 3)
    origin = pose.to_object(np.zeros(3))
    local = dirs @ pose.rotation
    t = np.full(dirs.shape[0], np.inf)
    for prim in model.primitives:
        t = np.minimum(t, prim.intersect(origin, local))
    return _depth_from_hits(t, dirs[:, 2], camera, far)


def composite_min(a, b):
    """Pixel-wise nearest surface; invalid pixels act as +inf."""
    if a.depth.shape != b.depth.shape:
        raise ShapeMismatchError("cannot composite images of different size", a.depth.shape, b.depth.shape)
    da = np.where(a.valid, a.depth, np.inf)
    db = np.where(b.valid, b.depth, np.inf)
    return DepthImage(np.minimum(da, db), a.valid | b.valid, a.far)


def add_sensor_noise(d, sigma, seed):
    """I.i.d. Gaussian noise on valid pixels; ``seed`` is an int or a Generator."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return d
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=d.depth.shape)
    return replace(d, depth=np.where(d.valid, d.depth + noise, d.far))


# ---------------------------------------------------------------------------
# Collision check
# ---------------------------------------------------------------------------

def segment_primitive_distance(segments, primitive, iterations=60):
    """
    Minimum of the primitive's signed distance along each segment.

    The signed distance of a convex solid is convex along a line, so a golden
    section search per segment finds the minimum.
    """
    pa = segments[:, 0]
    ba = segments[:, 1] - pa
    lo = np.zeros(len(segments))
    hi = np.ones(len(segments))

    def f(s):
        return primitive.sdf(pa + s[:, None] * ba)

    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(iterations):
        left = f1 < f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        x1_new = np.where(left, hi - _GOLDEN * (hi - lo), x2)
        x2_new = np.where(left, x1, lo + _GOLDEN * (hi - lo))
        f1, f2 = np.where(left, f(x1_new), f2), np.where(left, f1, f(x2_new))
        x1, x2 = x1_new, x2_new
    return np.minimum.reduce([f(lo), f(hi), f(np.zeros_like(lo)), f(np.ones_like(lo))])


def capsule_object_distance(segments, radii, model, pose):
    """Smallest surface-to-surface distance between hand capsules and an object (negative on overlap)."""
    local = pose.to_object(np.asarray(segments, dtype=np.float64).reshape(-1, 3)).reshape(-1, 2, 3)
    best = np.inf
    for prim in model.primitives:
        best = min(best, float(np.min(segment_primitive_distance(local, prim) - radii)))
    return best


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    width: int = 320
    height: int = 240
    far: float = DEFAULT_FAR
    noise_sigma: float = 2.0
    hand_depth: tuple = (350.0, 550.0)
    hand_offset: float = 40.0
    global_rotation_sigma: tuple = (0.3, 0.3, 0.6)
    articulation_sigma: tuple = (0.3, 0.1, 0.1)
    object: str = "small-cuboid"
    shell: tuple = (0.0, 60.0)
    clearance: float = 0.0
    anchor: str = "fingertips"
    max_tries: int = 1000

    def __post_init__(self):
        if self.noise_sigma < 0 or self.clearance < 0 or self.max_tries < 1:
            raise ValueError("noise sigma and clearance must be >= 0, max_tries >= 1")
        if self.anchor not in ("fingertips", "centroid"):
            raise ValueError(f"anchor must be 'fingertips' or 'centroid', got {self.anchor!r}")
        if not 0 <= self.shell[0] <= self.shell[1]:
            raise ValueError(f"invalid placement shell {self.shell}")
        for name in ("hand_depth", "global_rotation_sigma", "articulation_sigma", "shell"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def hand_only(self):
        return self.object is None

    def camera(self):
        return default_camera(self.width, self.height)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class TrainingSample:
    depth: DepthImage
    hand_pose: np.ndarray
    camera: CameraIntrinsics
    object_pose: ObjectPose = None
    out_of_frame: np.ndarray = None
    index: int = 0

    def __post_init__(self):
        self.hand_pose = np.asarray(self.hand_pose, dtype=np.float64)
        if self.out_of_frame is None:
            self.out_of_frame = out_of_frame_flags(self.hand_pose, self.camera)


def out_of_frame_flags(points, camera):
    points = np.asarray(points, dtype=np.float64)
    flags = points[:, 2] <= 0
    front = ~flags
    if np.any(front):
        uvz = project(points[front], camera)
        flags[front] = ((uvz[:, 0] < 0) | (uvz[:, 0] > camera.width - 1)
                        | (uvz[:, 1] < 0) | (uvz[:, 1] > camera.height - 1))
    return flags


def sample_hand_pose(rng, geometry, config):
    """Articulated hand in camera space; every bone keeps its rest length."""
    J = geometry.joint_count
    world = [None] * J
    pose = np.zeros((J, 3))
    world[0] = Rotation.from_rotvec(rng.normal(0.0, config.global_rotation_sigma)).as_matrix()
    pose[0] = [rng.uniform(-config.hand_offset, config.hand_offset),
               rng.uniform(-config.hand_offset, config.hand_offset),
               rng.uniform(*config.hand_depth)]
    for i in range(1, J):
        p = geometry.parents[i]
        bend = Rotation.from_rotvec(rng.normal(0.0, config.articulation_sigma)).as_matrix()
        world[i] = world[p] @ bend
        pose[i] = pose[p] + world[i] @ (geometry.rest[i] - geometry.rest[p])
    return pose


def sample_scene(rng, geometry, model, config, index=0):
    """
    One composited scene.

    The object rotation is uniform over SO(3) and its center lies in the
    configured shell around the fingertip centroid; placements closer to the
    hand than ``config.clearance`` are resampled until ``max_tries`` runs out.
    """
    camera = config.camera()
    hand = sample_hand_pose(rng, geometry, config)
    depth = render_hand(hand, geometry, camera, config.far)
    pose = None
    if model is not None:
        segments, radii = hand_capsules(hand, geometry)
        anchor = hand[list(geometry.fingertips)].mean(axis=0) if config.anchor == "fingertips" else hand.mean(axis=0)
        closest = np.inf
        for attempt in range(config.max_tries):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            candidate = ObjectPose(random_rotation(rng), anchor + direction * rng.uniform(*config.shell))
            distance = capsule_object_distance(segments, radii, model, candidate)
            closest = min(closest, distance)
            if distance >= config.clearance:
                pose = candidate
                logger.debug(f"sample {index}: object placed after {attempt + 1} tries")
                break
        else:
            raise SceneRejectedError(index, config.max_tries, closest)
        depth = composite_min(depth, render_object(pose, model, camera, config.far))
    depth = add_sensor_noise(depth, config.noise_sigma, rng)
    return TrainingSample(depth, hand, camera, pose, index=index)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def write_depth(path, d):
    data = np.where(d.valid, d.depth, 0.0).astype("<f4")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", d.width, d.height))
        f.write(data.tobytes())


def read_depth(path, far=DEFAULT_FAR):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(DEPTH_MAGIC):
        raise FormatError(f"{path} is not an FBPOSE-D1 file")
    width, height = struct.unpack_from("<II", blob, len(DEPTH_MAGIC))
    offset = len(DEPTH_MAGIC) + 8
    if len(blob) - offset != 4 * width * height:
        raise FormatError(f"{path}: expected {width}x{height} floats, found {(len(blob) - offset) // 4}")
    data = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(height, width).astype(np.float64)
    return DepthImage(data, data > 0, far)


def annotation_dict(sample):
    return {
        "index": sample.index,
        "joints": sample.hand_pose.tolist(),
        "object_pose": None if sample.object_pose is None else sample.object_pose.as_matrix34().ravel().tolist(),
        "camera": sample.camera.to_dict(),
        "out_of_frame": [bool(f) for f in sample.out_of_frame],
    }


def write_annotation(path, sample):
    write_json(path, annotation_dict(sample))


def read_annotation(path):
    anno = read_json(path)
    pose = anno.get("object_pose")
    return {
        "index": anno["index"],
        "joints": np.asarray(anno["joints"], dtype=np.float64),
        "object_pose": None if pose is None else ObjectPose.from_matrix34(pose),
        "camera": CameraIntrinsics.from_dict(anno["camera"]),
        "out_of_frame": np.asarray(anno["out_of_frame"], dtype=bool),
    }


def _generate_sample(config, seed, index):
    geometry = default_hand_geometry()
    model = None if config.object is None else object_model(config.object)
    try:
        return sample_scene(derive_rng(seed, index), geometry, model, config, index)
    except SceneRejectedError as e:
        # plain dict: the exception does not survive pickling across workers
        return {"index": e.index, "reason": str(e)}


def make_dataset(n, config, seed, out_dir=None, workers=1, progress=True):
    """
    Generate ``n`` scenes, each from its own ``(seed, index)`` stream.

    Scenes whose placement budget runs out are skipped and listed in the
    manifest. With ``out_dir`` set, files are written there; on an I/O error
    everything written so far is removed before the error propagates.

    Returns:
        tuple: (list of TrainingSample, manifest dict)
    """
    if n < 1:
        raise ValueError(f"dataset size must be at least 1, got {n}")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_generate_sample, repeat(config), repeat(seed), range(n), chunksize=8),
                                total=n, desc="Generating scenes", disable=not progress))
    else:
        results = [_generate_sample(config, seed, i)
                   for i in tqdm(range(n), desc="Generating scenes", disable=not progress)]
    samples, skipped = [], []
    for result in results:
        if isinstance(result, dict):
            logger.warning(f"Skipping scene: {result['reason']}")
            skipped.append(result)
        else:
            samples.append(result)
    manifest = {
        "format": "FBPOSE-D1",
        "config": config.to_dict(),
        "config_hash": sha256_of(config.to_dict()),
        "seed": int(seed),
        "requested": int(n),
        "count": len(samples),
        "skipped": skipped,
        "samples": [{
            "index": s.index,
            "depth": f"depth_{s.index:06d}.bin",
            "annotation": f"anno_{s.index:06d}.json",
            "hand_pose": s.hand_pose.tolist(),
            "object_pose": None if s.object_pose is None else s.object_pose.as_matrix34().ravel().tolist(),
        } for s in samples],
    }
    if out_dir is not None:
        _write_dataset(out_dir, samples, manifest)
    logger.info(f"Generated {len(samples)} of {n} scenes ({len(skipped)} skipped)")
    return samples, manifest


def manifest_checksum(manifest):
    return sha256_of(manifest)


def _write_dataset(out_dir, samples, manifest):
    created = not os.path.exists(out_dir)
    written = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        for sample, entry in zip(samples, manifest["samples"]):
            depth_path = os.path.join(out_dir, entry["depth"])
            written.append(depth_path)
            write_depth(depth_path, sample.depth)
            anno_path = os.path.join(out_dir, entry["annotation"])
            written.append(anno_path)
            write_annotation(anno_path, sample)
        manifest_path = os.path.join(out_dir, "manifest.json")
        written.append(manifest_path)
        write_json(manifest_path, manifest)
    except OSError:
        logger.error(f"Writing dataset to {out_dir} failed, removing partial output")
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            for path in written:
                if os.path.exists(path):
                    os.remove(path)
        raise


def load_dataset(path):
    """Read a dataset directory back into TrainingSamples plus its manifest."""
    manifest = read_json(os.path.join(path, "manifest.json"))
    far = manifest["config"].get("far", DEFAULT_FAR)
    samples = []
    for entry in manifest["samples"]:
        anno = read_annotation(os.path.join(path, entry["annotation"]))
        depth = read_depth(os.path.join(path, entry["depth"]), far)
        samples.append(TrainingSample(depth, anno["joints"], anno["camera"], anno["object_pose"],
                                      anno["out_of_frame"], anno["index"]))
    return samples, manifest
