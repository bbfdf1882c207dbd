"""
Camera model, center-of-mass localization, metric-cube crops and the 2.5D
spatial transformer pair (STN crop, ISTN paste).

Crop transforms map a regular target grid with coordinates in [-1, 1] to source
pixel coordinates through a 3×3 affine matrix A.
"""
from dataclasses import dataclass, asdict, field, replace
import logging

import numpy as np

from src.modules.utils import GeometryError, EmptyForegroundError, ShapeMismatchError

logger = logging.getLogger(__name__)

DEFAULT_FOREGROUND_BAND = (100.0, 1500.0)
_SNAP = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # crop cameras may have their principal point outside the image
    virtual: bool = False

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")
        if not self.virtual and not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside the "
                                f"{self.width}x{self.height} image")

    def to_dict(self):
        d = asdict(self)
        d.pop("virtual")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def default_camera(width=320, height=240):
    """Pinhole camera with a 67° horizontal field of view."""
    f = 241.42 * width / 320.0
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


def project(point, cam):
    """
    Pinhole projection of camera-space points.

    Args:
        point: (..., 3) array of points in mm.
        cam: CameraIntrinsics.

    Returns:
        (..., 3) array of (u px, v px, z mm).
    """
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise GeometryError("cannot project points with z <= 0")
    u = cam.fx * p[..., 0] / z + cam.cx
    v = cam.fy * p[..., 1] / z + cam.cy
    return np.stack([u, v, z], axis=-1)


def backproject(u, v, z, cam):
    u, v, z = np.broadcast_arrays(np.asarray(u, np.float64), np.asarray(v, np.float64),
                                  np.asarray(z, np.float64))
    return np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=-1)


def pixel_rays(cam):
    """Unit ray directions through every pixel center, shape (H, W, 3)."""
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    d = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def center_of_mass(d, cam, band=DEFAULT_FOREGROUND_BAND):
    """Mean of the backprojected valid pixels whose depth lies inside ``band``."""
    fg = d.valid & (d.depth >= band[0]) & (d.depth <= band[1])
    if not np.any(fg):
        raise EmptyForegroundError(f"no valid pixel within the {band[0]:g}-{band[1]:g} mm foreground band")
    v, u = np.nonzero(fg)
    return backproject(u, v, d.depth[fg], cam).mean(axis=0)


@dataclass(frozen=True)
class CubeSpec:
    half: tuple

    def __post_init__(self):
        half = np.broadcast_to(np.asarray(self.half, dtype=np.float64), (3,))
        if np.any(half <= 0):
            raise GeometryError(f"cube half-extents must be positive, got {tuple(half)}")
        object.__setattr__(self, "half", tuple(float(h) for h in half))

    @property
    def depth(self):
        return self.half[2]

    def scaled(self, factor):
        return CubeSpec(tuple(h * factor for h in self.half))


@dataclass(frozen=True, eq=False)
class CropTransform:
    A: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_range: float = 1.0
    size: tuple = (128, 128)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        if A.shape != (3, 3) or not np.allclose(A[2], (0.0, 0.0, 1.0)):
            raise GeometryError("crop transform must be 3x3 with last row (0, 0, 1)")
        if abs(np.linalg.det(A)) < 1e-12:
            raise GeometryError("crop transform is singular")
        if min(self.size) < 2:
            raise GeometryError(f"crop size must be at least 2x2, got {self.size}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "size", (int(self.size[0]), int(self.size[1])))

    @classmethod
    def identity(cls, width, height, center=(0.0, 0.0, 1.0), half_range=1.0):
        """Target grid equal to the source pixel grid of a width×height image."""
        A = np.array([[(width - 1) / 2.0, 0.0, (width - 1) / 2.0],
                      [0.0, (height - 1) / 2.0, (height - 1) / 2.0],
                      [0.0, 0.0, 1.0]])
        return cls(A, np.asarray(center, np.float64), half_range, (height, width))

    def target_grid(self):
        rows, cols = self.size
        yt, xt = np.meshgrid(np.linspace(-1.0, 1.0, rows), np.linspace(-1.0, 1.0, cols), indexing="ij")
        return xt, yt

    def source_coords(self):
        xt, yt = self.target_grid()
        xs = self.A[0, 0] * xt + self.A[0, 1] * yt + self.A[0, 2]
        ys = self.A[1, 0] * xt + self.A[1, 1] * yt + self.A[1, 2]
        return _snap(xs), _snap(ys)

    def inverse(self):
        return np.linalg.inv(self.A)

    def crop_camera(self, cam):
        """Pinhole camera whose pixel grid is this crop's target grid."""
        if abs(self.A[0, 1]) > 1e-12 or abs(self.A[1, 0]) > 1e-12:
            raise GeometryError("crop camera needs an axis-aligned transform")
        rows, cols = self.size
        sx = 2.0 * self.A[0, 0] / (cols - 1)
        sy = 2.0 * self.A[1, 1] / (rows - 1)
        return CameraIntrinsics(cam.fx / sx, cam.fy / sy,
                                (cam.cx - self.A[0, 2] + self.A[0, 0]) / sx,
                                (cam.cy - self.A[1, 2] + self.A[1, 1]) / sy,
                                cols, rows, virtual=True)


def _snap(x):
    r = np.round(x)
    return np.where(np.abs(x - r) < _SNAP, r, x)


def compute_crop_transform(t, cube, cam, size=128):
    """
    Crop transform of the metric cube of half-extent ``cube`` centered on ``t``.

    The lateral box corners are projected at the center depth, so the target
    corner (1, 1) lands on (x+, y+) and (-1, -1) on (x-, y-).
    """
    t = np.asarray(t, dtype=np.float64)
    cx_, cy_, cz_ = cube.half
    if t[2] <= 0:
        raise GeometryError(f"crop center {t.tolist()} is behind the camera")
    if t[2] <= cz_:
        raise GeometryError(f"crop center depth {t[2]:.1f} mm does not exceed the cube half-extent {cz_:.1f} mm")
    x_minus = cam.fx * (t[0] - cx_) / t[2] + cam.cx
    x_plus = cam.fx * (t[0] + cx_) / t[2] + cam.cx
    y_minus = cam.fy * (t[1] - cy_) / t[2] + cam.cy
    y_plus = cam.fy * (t[1] + cy_) / t[2] + cam.cy
    x_delta, y_delta = x_plus - x_minus, y_plus - y_minus
    A = np.array([[x_delta / 2.0, 0.0, x_minus + x_delta / 2.0],
                  [0.0, y_delta / 2.0, y_minus + y_delta / 2.0],
                  [0.0, 0.0, 1.0]])
    return CropTransform(A, t, cz_, (size, size))


def _gather(image, yy, xx, fill):
    h, w = image.shape
    inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
    values = np.full(xx.shape, fill, dtype=np.float64)
    values[inside] = image[yy[inside], xx[inside]]
    return values, inside


def _bilinear(image, xs, ys, fill):
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = xs - x0
    wy = ys - y0
    v00, _ = _gather(image, y0, x0, fill)
    v01, _ = _gather(image, y0, x0 + 1, fill)
    v10, _ = _gather(image, y0 + 1, x0, fill)
    v11, _ = _gather(image, y0 + 1, x0 + 1, fill)
    return (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11)


def _as_array(image):
    return np.asarray(getattr(image, "depth", image), dtype=np.float64)


def stn_sample(image, ct, fill=0.0):
    """
    Bilinear crop of ``image`` on the grid of ``ct``.

    Source neighbours outside the image contribute ``fill`` (0 reproduces the
    plain bilinear summation).
    """
    src = _as_array(image)
    if src.ndim != 2:
        raise ShapeMismatchError("stn_sample needs a single-channel image", src.shape)
    xs, ys = ct.source_coords()
    return _bilinear(src, xs, ys, fill)


def stn_backward(image, ct, grad_patch, fill=0.0):
    """
    Gradients of ``stn_sample`` with respect to the source pixels and the six
    free entries of A (row-major, last row excluded).
    """
    src = _as_array(image)
    grad_patch = np.asarray(grad_patch, dtype=np.float64)
    if grad_patch.shape != ct.size:
        raise ShapeMismatchError("patch gradient does not match the crop size", grad_patch.shape, ct.size)
    xs, ys = ct.source_coords()
    xt, yt = ct.target_grid()
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = xs - x0
    wy = ys - y0
    grad_image = np.zeros_like(src)
    corners = {}
    for dy in (0, 1):
        for dx in (0, 1):
            weight = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx)
            vals, inside = _gather(src, y0 + dy, x0 + dx, fill)
            corners[dy, dx] = vals
            np.add.at(grad_image, ((y0 + dy)[inside], (x0 + dx)[inside]), (grad_patch * weight)[inside])
    d_xs = (1.0 - wy) * (corners[0, 1] - corners[0, 0]) + wy * (corners[1, 1] - corners[1, 0])
    d_ys = (1.0 - wx) * (corners[1, 0] - corners[0, 0]) + wx * (corners[1, 1] - corners[0, 1])
    gx = grad_patch * d_xs
    gy = grad_patch * d_ys
    grad_theta = np.array([np.sum(gx * xt), np.sum(gx * yt), np.sum(gx),
                           np.sum(gy * xt), np.sum(gy * yt), np.sum(gy)])
    return grad_image, grad_theta


def istn_paste(patch, ct, canvas):
    """
    Paste ``patch`` back onto ``canvas`` through the inverse crop transform.

    Canvas pixels outside the crop are left unchanged. ``canvas`` is a 2D array
    or a DepthImage; a DepthImage result marks pasted pixels valid where they are
    nearer than its far sentinel.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != ct.size:
        raise ShapeMismatchError("patch does not match the crop size", patch.shape, ct.size)
    base = _as_array(canvas)
    out = base.copy()
    h, w = base.shape
    rows, cols = ct.size
    # canvas bounding box of the crop
    xs, ys = ct.source_coords()
    u_lo = max(int(np.floor(xs.min())), 0)
    u_hi = min(int(np.ceil(xs.max())), w - 1)
    v_lo = max(int(np.floor(ys.min())), 0)
    v_hi = min(int(np.ceil(ys.max())), h - 1)
    covered = np.zeros(base.shape, dtype=bool)
    if u_lo <= u_hi and v_lo <= v_hi:
        v, u = np.mgrid[v_lo:v_hi + 1, u_lo:u_hi + 1].astype(np.float64)
        inv = ct.inverse()
        xt = inv[0, 0] * u + inv[0, 1] * v + inv[0, 2]
        yt = inv[1, 0] * u + inv[1, 1] * v + inv[1, 2]
        inside = (np.abs(xt) <= 1.0 + _SNAP) & (np.abs(yt) <= 1.0 + _SNAP)
        col = _snap(np.clip((xt + 1.0) * (cols - 1) / 2.0, 0.0, cols - 1))
        row = _snap(np.clip((yt + 1.0) * (rows - 1) / 2.0, 0.0, rows - 1))
        # on the last row/column the out-of-patch neighbour has zero weight
        values = _bilinear(patch, col, row, 0.0)
        region = out[v_lo:v_hi + 1, u_lo:u_hi + 1]
        region[inside] = values[inside]
        covered[v_lo:v_hi + 1, u_lo:u_hi + 1] = inside
    if hasattr(canvas, "depth"):
        valid = np.where(covered, out < canvas.far, canvas.valid)
        out = np.where(valid, out, canvas.far)
        return replace(canvas, depth=out, valid=valid)
    return out


def normalize_depth(depth, center_z, half_range, valid=None):
    """Clip to the cube and map affinely to [-1, 1]; invalid pixels go to the rear (+1)."""
    n = np.clip((np.asarray(depth, np.float64) - center_z) / half_range, -1.0, 1.0)
    if valid is not None:
        n = np.where(valid, n, 1.0)
    return n


def denormalize_depth(normalized, center_z, half_range):
    return center_z + np.asarray(normalized, np.float64) * half_range


@dataclass(eq=False)
class CubeCrop:
    patch: np.ndarray
    transform: CropTransform
    outside: bool = False


def crop_cube(d, center, cube, cam, size=128):
    """
    Fixed-size normalized crop of the metric cube around ``center``.

    Returns:
        CubeCrop: the size×size patch in [-1, 1], its transform, and a flag set
        when the crop misses the image entirely (the patch is then all rear).
    """
    ct = compute_crop_transform(center, cube, cam, size)
    xs, ys = ct.source_coords()
    h, w = d.depth.shape
    hits = (xs > -1) & (xs < w) & (ys > -1) & (ys < h)
    if not np.any(hits):
        logger.warning(f"crop at {np.round(center, 1).tolist()} lies outside the image")
        return CubeCrop(np.ones(ct.size), ct, True)
    raw = stn_sample(d.depth, ct, fill=d.far)
    return CubeCrop(normalize_depth(raw, ct.center[2], cube.depth), ct, False)
