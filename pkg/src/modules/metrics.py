"""
Evaluation metrics: mean joint error, the visibility-weighted hand-object
metric E, and per-sample reports with their aggregates.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from src.modules.geometry import project
from src.modules.pose_model import corners_from_pose
from src.modules.utils import ShapeMismatchError

logger = logging.getLogger(__name__)

VISIBILITY_TOLERANCE = 10.0
HISTOGRAM_EDGES = np.arange(0.0, 51.0, 1.0)
ANNOTATED_CORNERS = 3


def mean_joint_error(pred, gt):
    """
    Mean Euclidean distance (mm) between corresponding joints.

    (J, 3) inputs give a float, (B, J, 3) inputs one value per pose.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeMismatchError("joint sets differ", pred.shape, gt.shape)
    errors = np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)
    return float(errors) if errors.ndim == 0 else errors


@dataclass(frozen=True)
class VisibilitySet:
    """
    Visible fingertips (row indices into the fingertip array) and the
    annotated object corners (row indices into the corner array) with how many
    of them are visible.
    """
    fingertips: tuple = ()
    corners: tuple = ()
    visible_corners: int = 0

    @property
    def indicator(self):
        return 3 if len(self.corners) == ANNOTATED_CORNERS and self.visible_corners == ANNOTATED_CORNERS else 0


def _visible(points, d, cam, tolerance):
    points = np.asarray(points, np.float64)
    visible = np.zeros(len(points), dtype=bool)
    front = points[:, 2] > 0
    if not np.any(front):
        return visible
    uvz = project(points[front], cam)
    u = np.round(uvz[:, 0]).astype(int)
    v = np.round(uvz[:, 1]).astype(int)
    inside = (u >= 0) & (u < d.width) & (v >= 0) & (v < d.height)
    ok = np.zeros(len(uvz), dtype=bool)
    ok[inside] = d.valid[v[inside], u[inside]] & (
        np.abs(d.depth[v[inside], u[inside]] - uvz[inside, 2]) <= tolerance)
    visible[front] = ok
    return visible


def fingertip_visibility(hand_pose, geometry, d, cam, tolerance=VISIBILITY_TOLERANCE):
    """
    Fingertips whose pixel shows a surface within ``tolerance`` mm of the tip.

    Returns:
        tuple: row indices into ``hand_pose[geometry.fingertips]``
    """
    tips = np.asarray(hand_pose)[list(geometry.fingertips)]
    return tuple(int(i) for i in np.flatnonzero(_visible(tips, d, cam, tolerance)))


def corner_visibility(corners, d, cam, tolerance=VISIBILITY_TOLERANCE):
    """
    The three ground-truth corners nearest to the camera act as the annotated
    corners; each is visible under the same depth rule as the fingertips.

    Returns:
        tuple: (annotated corner indices, number of them visible)
    """
    corners = np.asarray(corners, np.float64)
    annotated = tuple(int(i) for i in np.argsort(corners[:, 2], kind="stable")[:ANNOTATED_CORNERS])
    visible = _visible(corners[list(annotated)], d, cam, tolerance)
    return annotated, int(visible.sum())


def visibility_for(sample, geometry, model=None, tolerance=VISIBILITY_TOLERANCE):
    tips = fingertip_visibility(sample.hand_pose, geometry, sample.depth, sample.camera, tolerance)
    if sample.object_pose is None or model is None:
        return VisibilitySet(tips)
    annotated, count = corner_visibility(corners_from_pose(sample.object_pose, model), sample.depth,
                                         sample.camera, tolerance)
    return VisibilitySet(tips, annotated, count)


def combined_metric_E(X, G, visibility, Y=None, F=None):
    """
    Visibility-weighted hand-object error (mm).

    E = (sum over visible fingertips of |X_i - G_i|
         + indicator / 3 * sum over annotated corners of |Y_m - F_m|) / (|V| + indicator)

    Returns None when no fingertip and no complete corner set is visible.
    """
    X = np.asarray(X, np.float64)
    G = np.asarray(G, np.float64)
    if X.shape != G.shape:
        raise ShapeMismatchError("fingertip sets differ", X.shape, G.shape)
    V = list(visibility.fingertips)
    indicator = visibility.indicator
    denominator = len(V) + indicator
    if denominator == 0:
        logger.warning("No visible fingertip or corner set; sample skipped")
        return None
    total = float(np.linalg.norm(X[V] - G[V], axis=1).sum()) if V else 0.0
    if indicator:
        Y = np.asarray(Y, np.float64)
        F = np.asarray(F, np.float64)
        if Y.shape != F.shape:
            raise ShapeMismatchError("corner sets differ", Y.shape, F.shape)
        m = list(visibility.corners)
        total += indicator / 3.0 * float(np.linalg.norm(Y[m] - F[m], axis=1).sum())
    return total / denominator


@dataclass
class MetricReport:
    kind: str
    values: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.values)) if self.values else None

    @property
    def median(self):
        return float(np.median(self.values)) if self.values else None

    def histogram(self):
        counts, _ = np.histogram(np.clip(self.values, 0.0, HISTOGRAM_EDGES[-1]), bins=HISTOGRAM_EDGES)
        return counts.tolist()

    def to_dict(self):
        return {
            "kind": self.kind,
            "count": len(self.values),
            "mean": self.mean,
            "median": self.median,
            "histogram": {"edges": HISTOGRAM_EDGES.tolist(), "counts": self.histogram()},
            "values": [float(v) for v in self.values],
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_dict(cls, d):
        """Rebuild from persisted values; stored aggregates must match the recomputed ones."""
        report = cls(d["kind"], list(d["values"]), list(d.get("skipped", [])))
        for key in ("mean", "median"):
            stored, fresh = d.get(key), getattr(report, key)
            if (stored is None) != (fresh is None) or (fresh is not None and not np.isclose(stored, fresh)):
                raise ValueError(f"report {d['kind']!r}: stored {key} {stored} does not match {fresh}")
        if "histogram" in d and d["histogram"]["counts"] != report.histogram():
            raise ValueError(f"report {d['kind']!r}: stored histogram does not match its values")
        return report

    def summary(self):
        if not self.values:
            return f"{self.kind}: no samples"
        return f"{self.kind}: mean {self.mean:.2f} mm, median {self.median:.2f} mm over {len(self.values)} samples"
