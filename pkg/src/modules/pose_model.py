"""
Pose representations: rigid object poses with their bounding-box corner
parametrization, and the linear PCA prior over hand poses.
"""
from dataclasses import dataclass
import itertools
import logging

import numpy as np
from scipy.spatial.transform import Rotation

from src.modules.utils import DegeneratePoseError, PriorRankError, ShapeMismatchError

logger = logging.getLogger(__name__)

MCP_JOINT = 0
_ORTHO_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class ObjectPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatchError("object pose needs a 3x3 rotation and a 3-vector", R.shape, t.shape)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise DegeneratePoseError("object pose is not finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or np.linalg.det(R) < 0:
            raise DegeneratePoseError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, translation=(0.0, 0.0, 0.0)):
        return cls(np.eye(3), np.asarray(translation, dtype=np.float64))

    def as_matrix34(self):
        return np.hstack([self.rotation, self.translation[:, None]])

    @classmethod
    def from_matrix34(cls, m):
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def to_object(self, points):
        """Camera-frame points expressed in the object frame."""
        return (np.asarray(points) - self.translation) @ self.rotation


def random_rotation(rng):
    """Rotation matrix drawn uniformly from SO(3)."""
    return Rotation.random(random_state=rng).as_matrix()


def rotation_error(Ra, Rb):
    """Geodesic angle in radians between two rotations."""
    return float(Rotation.from_matrix(np.asarray(Ra).T @ np.asarray(Rb)).magnitude())


def canonical_corners(half_extents):
    """The 8 box corners in lexicographic (±x, ±y, ±z) order."""
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
    return signs * np.asarray(half_extents, dtype=np.float64)


def corners_from_pose(pose, model):
    return canonical_corners(model.half_extents) @ pose.rotation.T + pose.translation


def pose_from_corners(corners, model):
    """
    Least-squares rigid pose mapping the canonical corners onto ``corners``.

    The rotation is recovered from the SVD of the cross-covariance, with the
    smallest singular direction flipped when needed so that det(R) = +1.
    """
    Q = np.asarray(corners, dtype=np.float64).reshape(-1, 3)
    P = canonical_corners(model.half_extents)
    if Q.shape != P.shape:
        raise ShapeMismatchError("corner set must hold 8 points", Q.shape, P.shape)
    if not np.all(np.isfinite(Q)):
        raise DegeneratePoseError("corner set is not finite")
    centroid_P = P.mean(axis=0)
    centroid_Q = Q.mean(axis=0)
    Qc = Q - centroid_Q
    s = np.linalg.svd(Qc, compute_uv=False)
    if s[-1] <= 1e-9 * max(s[0], 1.0):
        raise DegeneratePoseError(f"corner set spans rank {int(np.sum(s > 1e-9 * max(s[0], 1.0)))} < 3")
    H = (P - centroid_P).T @ Qc
    U, S, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    t = centroid_Q - R @ centroid_P
    return ObjectPose(R, t)


def center_on_reference(poses, joint=MCP_JOINT):
    poses = np.asarray(poses, dtype=np.float64)
    return poses - poses[..., joint:joint + 1, :]


@dataclass(frozen=True, eq=False)
class PosePrior:
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray

    @property
    def k(self):
        return self.basis.shape[1]

    @property
    def dim(self):
        return self.basis.shape[0]

    def attachments(self):
        return {"prior.mean": self.mean, "prior.basis": self.basis, "prior.eigenvalues": self.eigenvalues}

    @classmethod
    def from_attachments(cls, attachments):
        return cls(attachments["prior.mean"], attachments["prior.basis"], attachments["prior.eigenvalues"])


def _flat(poses):
    poses = np.asarray(poses, dtype=np.float64)
    return poses.reshape(poses.shape[0], -1) if poses.ndim == 3 else poses


def fit_prior(poses, k, allow_rank_deficient=False):
    """
    PCA prior over a pose set.

    Args:
        poses: (N, J, 3) or (N, 3J) poses, already centered on the reference joint.
        k: Number of components.
        allow_rank_deficient: Complete the basis with arbitrary orthonormal
            directions when the poses span fewer than k dimensions.

    Returns:
        PosePrior with orthonormal basis columns ordered by decreasing variance.
    """
    X = _flat(poses)
    n, dim = X.shape
    if not 1 <= k <= dim:
        raise ValueError(f"k must be within 1..{dim}, got {k}")
    mean = X.mean(axis=0)
    centered = X - mean
    _, S, Vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(S > 1e-10 * S[0])) if S[0] > 0 else 0
    if rank < k and not allow_rank_deficient:
        raise PriorRankError(rank, k)
    eigenvalues = np.zeros(dim)
    eigenvalues[:S.size] = S ** 2 / n
    if Vt.shape[0] < k:
        # orthonormal completion from the null space of the spanned directions
        _, _, W = np.linalg.svd(Vt, full_matrices=True)
        Vt = np.vstack([Vt, W[Vt.shape[0]:]])
    basis = Vt[:k].T
    logger.info(f"Fitted pose prior: {n} poses, rank {rank}, k={k}, "
                f"retained variance {eigenvalues[:k].sum() / max(eigenvalues.sum(), 1e-300):.4f}")
    return PosePrior(mean, basis, eigenvalues[:k])


def encode(prior, pose):
    p = np.asarray(pose, dtype=np.float64)
    if p.ndim == 3:
        flat = p.reshape(p.shape[0], -1)
    elif p.ndim == 2 and p.shape[1] == 3 and p.shape[1] != prior.dim:
        # a single (J, 3) pose
        flat = p.ravel()
    else:
        flat = p
    if flat.shape[-1] != prior.dim:
        raise ShapeMismatchError("pose does not match the prior dimension", flat.shape, (prior.dim,))
    return (flat - prior.mean) @ prior.basis


def decode(prior, coefficients):
    a = np.asarray(coefficients, dtype=np.float64)
    if a.shape[-1] != prior.k:
        raise ShapeMismatchError("coefficients do not match the prior", a.shape, (prior.k,))
    return prior.mean + a @ prior.basis.T


def reconstruction_error(prior, poses):
    """Mean squared residual of projecting ``poses`` onto the prior subspace."""
    X = _flat(poses)
    residual = X - decode(prior, encode(prior, X))
    return float(np.mean(np.sum(residual ** 2, axis=1)))
