"""Camera priors, rotation geometry, plane-to-image homography, instance
projection, and the evidence-consistent homography search.

World frame: origin at the table center, z up, table in the xy-plane.
Camera frame: z' points from the camera toward the scene; the rotation R
(parametrized by extrinsic x-y-z angles, R = Rz @ Ry @ Rx) maps world
axis vectors onto camera axis vectors, and world coordinates of a point
with camera coordinates m' are m = R m' + T.  Pixel coordinates follow
the usual convention (x right, y down); image regions and footprints are
reported in the normalized domain [0, 1]^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .errors import BehindCamera, DegenerateView, SingularHomography
from .scenegen import (
    Category,
    CircleFootprint,
    EllipseFootprint,
    ObjectPose,
    TableGeometry,
    VerticalFootprint,
)

TWO_PI = 2.0 * math.pi

# One "sensor unit" of the pixel-pitch parameter corresponds to a
# full-frame sensor width; focal lengths in mm are converted with this.
SENSOR_WIDTH_MM = 36.0

FOCAL_RANGE_MM = (10.0, 40.0)
TZ_RANGE = (0.3, 3.0)
R_MAX = 4.0

RASTER = 512

TEMPLATE_SIDES = tuple(round(0.9 + 0.2 * i, 1) for i in range(10))  # 0.9 .. 2.7


@dataclass(frozen=True)
class CameraParams:
    """Intrinsic and extrinsic camera parameters (11 degrees of freedom,
    with the two pixel pitches tied)."""

    f_mm: float
    gamma: float  # pixel pitch, sensor-width units per pixel (= gamma_x = gamma_y)
    x0: float  # principal point, pixels
    y0: float
    psi: np.ndarray  # rotation angles (psi_x, psi_y, psi_z)
    t: np.ndarray  # camera translation in meters
    image_size: tuple[int, int] = (640, 640)  # (W_p, H_p)

    @property
    def f_px(self) -> float:
        return (self.f_mm / SENSOR_WIDTH_MM) / self.gamma

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.f_px, 0.0, self.x0], [0.0, self.f_px, self.y0], [0.0, 0.0, 1.0]]
        )

    def rotation(self) -> np.ndarray:
        return rotation_from_angles(self.psi)


def rotation_from_angles(psi) -> np.ndarray:
    """Extrinsic x-y-z rotation: R = Rz(psi_z) @ Ry(psi_y) @ Rx(psi_x)."""
    ax, ay, az = float(psi[0]), float(psi[1]), float(psi[2])
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def mean_rotation_angles(t) -> tuple[float, float, float]:
    """Angles of the constrained frame: optical axis toward the table
    center, horizontal image axis horizontal in 3D, image y-axis down.
    """
    t = np.asarray(t, dtype=float)
    uz = np.array([0.0, 0.0, 1.0])
    norm = np.linalg.norm(t)
    if norm <= 0:
        raise DegenerateView("zero translation")
    bar_z = -t / norm
    cross = np.cross(bar_z, uz)
    cn = np.linalg.norm(cross)
    if cn < 1e-9:
        raise DegenerateView("camera directly above the table center")
    bar_x = cross / cn
    bar_y = np.cross(bar_z, bar_x)
    mu_y = math.asin(float(np.clip(-bar_x[2], -1.0, 1.0)))
    cy = math.cos(mu_y)
    mu_x = math.atan2(bar_y[2] / cy, bar_z[2] / cy)
    mu_z = math.atan2(bar_x[1] / cy, bar_x[0] / cy)
    return mu_x, mu_y, mu_z


def sample_camera(
    image_size: tuple[int, int],
    rng,
    tz_beta: tuple[float, float] = (2.0, 2.0),
    r_beta: tuple[float, float] = (2.0, 2.0),
    psi_kappa: float = 100.0,
) -> CameraParams:
    """Draw camera parameters from the prior."""
    wp, hp = image_size
    f_mm = rng.uniform(*FOCAL_RANGE_MM)
    gamma = rng.uniform(1.0 / wp, 1.2 / wp)
    x0 = rng.uniform(wp / 4.0, 3.0 * wp / 4.0)
    y0 = rng.uniform(hp / 4.0, 3.0 * hp / 4.0)
    tz = TZ_RANGE[0] + (TZ_RANGE[1] - TZ_RANGE[0]) * rng.beta(*tz_beta)
    r = R_MAX * rng.beta(*r_beta)
    az = rng.uniform(0.0, TWO_PI)
    t = np.array([r * math.cos(az), r * math.sin(az), tz])
    mu = mean_rotation_angles(t)
    psi = np.array([rng.vonmises(m, psi_kappa) for m in mu])
    return CameraParams(f_mm, gamma, x0, y0, psi, t, image_size)


def camera_log_prior(
    w: CameraParams,
    tz_beta: tuple[float, float] = (2.0, 2.0),
    r_beta: tuple[float, float] = (2.0, 2.0),
    psi_kappa: float = 100.0,
) -> float:
    """Log density of the camera prior (for MH posterior ratios)."""
    wp, hp = w.image_size
    lo, hi = FOCAL_RANGE_MM
    if not (lo <= w.f_mm <= hi):
        return -math.inf
    if not (1.0 / wp <= w.gamma <= 1.2 / wp):
        return -math.inf
    if not (wp / 4.0 <= w.x0 <= 3.0 * wp / 4.0):
        return -math.inf
    if not (hp / 4.0 <= w.y0 <= 3.0 * hp / 4.0):
        return -math.inf
    tz = float(w.t[2])
    r = float(math.hypot(w.t[0], w.t[1]))
    if not (TZ_RANGE[0] <= tz <= TZ_RANGE[1]) or r > R_MAX or r <= 0:
        return -math.inf
    total = -math.log(hi - lo) - math.log(0.2 / wp) - math.log(wp / 2.0) - math.log(hp / 2.0)
    span = TZ_RANGE[1] - TZ_RANGE[0]
    total += stats.beta.logpdf((tz - TZ_RANGE[0]) / span, *tz_beta) - math.log(span)
    # Density of (T_x, T_y): radial Beta plus rotation invariance.
    total += (
        stats.beta.logpdf(r / R_MAX, *r_beta)
        - math.log(R_MAX)
        - math.log(TWO_PI)
        - math.log(r)
    )
    try:
        mu = mean_rotation_angles(w.t)
    except DegenerateView:
        return -math.inf
    for p, m in zip(w.psi, mu):
        total += float(stats.vonmises.logpdf(p, psi_kappa, loc=m))
    return total


# ---------------------------------------------------------------------------
# Homography
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlaneHomography:
    """Map from homogeneous table coordinates (x, y, 1) to homogeneous
    pixel coordinates, stored with its inverse and the view geometry
    needed for depth tests."""

    h: np.ndarray
    h_inv: np.ndarray
    rotation: np.ndarray
    t: np.ndarray
    image_size: tuple[int, int]

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.h.ravel())


def homography_from_camera(w: CameraParams) -> PlaneHomography:
    if w.t[2] <= 0:
        raise DegenerateView("camera must be above the table plane")
    rot = w.rotation()
    rt = rot.T
    cols = np.column_stack([rt[:, 0], rt[:, 1], -rt @ w.t])
    h = w.intrinsic_matrix() @ cols
    if abs(h[2, 2]) > 1e-300:
        h = h / h[2, 2]
    if np.linalg.cond(h) > 1e12:
        raise SingularHomography("homography condition number above 1e12")
    return PlaneHomography(h, np.linalg.inv(h), rot, np.asarray(w.t, dtype=float), w.image_size)


def point_depths(hom: PlaneHomography, pts: np.ndarray) -> np.ndarray:
    """Depth (camera z') of table-plane points, positive in front."""
    pts = np.atleast_2d(pts)
    world = np.column_stack([pts, np.zeros(len(pts))])
    return (world - hom.t) @ hom.rotation[:, 2]


def project_points(hom: PlaneHomography, pts: np.ndarray) -> np.ndarray:
    """Table-plane points (N, 2) in meters to pixel coordinates (N, 2).

    Raises BehindCamera if any point has non-positive depth.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if np.any(point_depths(hom, pts) <= 0):
        raise BehindCamera("point behind the camera")
    homog = np.column_stack([pts, np.ones(len(pts))]) @ hom.h.T
    return homog[:, :2] / homog[:, 2:3]


def back_project(hom: PlaneHomography, pixels: np.ndarray) -> np.ndarray:
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    homog = np.column_stack([pixels, np.ones(len(pixels))]) @ hom.h_inv.T
    return homog[:, :2] / homog[:, 2:3]


def normalize_pixels(pixels: np.ndarray, image_size) -> np.ndarray:
    wp, hp = image_size
    return np.asarray(pixels, dtype=float) / np.array([wp, hp])


# ---------------------------------------------------------------------------
# Instance projection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceProjection:
    """Image footprint of one object, all in normalized coordinates."""

    center: np.ndarray  # (2,)
    polygon: np.ndarray  # (n, 2) boundary
    bbox: tuple[float, float, float, float]  # x, y, width, height
    fully_visible: bool

    @property
    def longest_side(self) -> float:
        return max(self.bbox[2], self.bbox[3])


def _boundary_world(pose: ObjectPose, n: int) -> np.ndarray:
    """World-frame boundary of the (base) footprint."""
    phi = np.linspace(0.0, TWO_PI, n, endpoint=False)
    fp = pose.footprint
    if isinstance(fp, CircleFootprint):
        dx, dy = fp.radius * np.cos(phi), fp.radius * np.sin(phi)
    elif isinstance(fp, EllipseFootprint):
        ex, ey = fp.semi_major * np.cos(phi), fp.semi_minor * np.sin(phi)
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        dx, dy = c * ex - s * ey, s * ex + c * ey
    else:
        assert isinstance(fp, VerticalFootprint)
        dx, dy = fp.base_radius * np.cos(phi), fp.base_radius * np.sin(phi)
    return np.column_stack([pose.x + dx, pose.y + dy])


def project_instance(
    obj: tuple[Category, ObjectPose],
    w: CameraParams,
    hom: PlaneHomography | None = None,
    n_boundary: int = 32,
) -> InstanceProjection:
    """Project an object footprint to the image.

    Flat objects (plates, utensils) map their outline through the
    homography.  Vertical objects (glasses, bottles) map their base
    circle, then shift the resulting ellipse upward in the image,
    orthogonally to its major axis, by half the estimated object size
    (size taken proportional to the projected base diameter).
    """
    _, pose = obj
    hom = hom or homography_from_camera(w)
    world = _boundary_world(pose, n_boundary)
    depths = point_depths(hom, np.vstack([world, [[pose.x, pose.y]]]))
    if np.any(depths <= 0):
        raise BehindCamera("footprint behind the camera")
    px = project_points(hom, np.vstack([world, [[pose.x, pose.y]]]))
    boundary, center = px[:-1], px[-1]
    fp = pose.footprint
    if isinstance(fp, VerticalFootprint):
        rel = boundary - boundary.mean(axis=0)
        cov = rel.T @ rel
        evals, evecs = np.linalg.eigh(cov)
        major = evecs[:, int(np.argmax(evals))]
        ortho = np.array([-major[1], major[0]])
        if ortho[1] > 0:  # point upward (decreasing pixel y)
            ortho = -ortho
        proj = rel @ major
        diameter = float(proj.max() - proj.min())
        size = diameter * fp.height / (2.0 * fp.base_radius)
        shift = 0.5 * size * ortho
        boundary = boundary + shift
        center = center + shift
    norm = normalize_pixels(boundary, w.image_size)
    center_n = normalize_pixels(center, w.image_size).ravel()
    x_min, y_min = norm.min(axis=0)
    x_max, y_max = norm.max(axis=0)
    visible = bool(
        x_min >= 0.0 and y_min >= 0.0 and x_max <= 1.0 and y_max <= 1.0
    )
    bbox = (float(x_min), float(y_min), float(x_max - x_min), float(y_max - y_min))
    return InstanceProjection(center_n, norm, bbox, visible)


# ---------------------------------------------------------------------------
# Image regions and shape distance
# ---------------------------------------------------------------------------


def _polygon_row_intervals(poly: np.ndarray) -> np.ndarray:
    """Pixel-index intervals [lo, hi] per raster row covered by a convex
    polygon on [0, 1]^2; hi < lo encodes an empty row."""
    ys = (np.arange(RASTER) + 0.5) / RASTER
    lo = np.full(RASTER, np.inf)
    hi = np.full(RASTER, -np.inf)
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        mask = (ys >= min(y1, y2)) & (ys <= max(y1, y2))
        if not np.any(mask):
            continue
        if y1 == y2:
            xs_lo = np.full(mask.sum(), min(x1, x2))
            xs_hi = np.full(mask.sum(), max(x1, x2))
        else:
            t = (ys[mask] - y1) / (y2 - y1)
            xs_lo = xs_hi = x1 + t * (x2 - x1)
        lo[mask] = np.minimum(lo[mask], xs_lo)
        hi[mask] = np.maximum(hi[mask], xs_hi)
    out = np.empty((RASTER, 2), dtype=np.int64)
    covered = np.isfinite(lo)
    jlo = np.maximum(np.ceil(lo[covered] * RASTER - 0.5).astype(np.int64), 0)
    jhi = np.minimum(np.floor(hi[covered] * RASTER - 0.5).astype(np.int64), RASTER - 1)
    out[:, 0], out[:, 1] = 0, -1
    rows = np.flatnonzero(covered)
    keep = jhi >= jlo
    out[rows[keep], 0] = jlo[keep]
    out[rows[keep], 1] = jhi[keep]
    return out


class ImageRegion:
    """Region of the normalized image domain: a convex polygon or a
    binary mask on the 512x512 rasterization."""

    def __init__(self, polygon: np.ndarray | None = None, mask: np.ndarray | None = None):
        if (polygon is None) == (mask is None):
            raise ValueError("provide exactly one of polygon or mask")
        self.polygon = None if polygon is None else np.asarray(polygon, dtype=float)
        self._mask = None if mask is None else np.asarray(mask, dtype=bool)
        self._intervals: np.ndarray | None = None

    @classmethod
    def from_polygon(cls, polygon) -> "ImageRegion":
        return cls(polygon=polygon)

    @classmethod
    def from_mask(cls, mask) -> "ImageRegion":
        return cls(mask=mask)

    def intervals(self) -> np.ndarray | None:
        if self.polygon is None:
            return None
        if self._intervals is None:
            self._intervals = _polygon_row_intervals(self.polygon)
        return self._intervals

    def mask(self) -> np.ndarray:
        if self._mask is None:
            iv = self.intervals()
            m = np.zeros((RASTER, RASTER), dtype=bool)
            for i in range(RASTER):
                lo, hi = iv[i]
                if hi >= lo:
                    m[i, lo : hi + 1] = True
            self._mask = m
        return self._mask

    def pixel_count(self) -> int:
        iv = self.intervals()
        if iv is not None:
            lengths = iv[:, 1] - iv[:, 0] + 1
            return int(np.maximum(lengths, 0).sum())
        return int(self._mask.sum())

    def area(self) -> float:
        return self.pixel_count() / float(RASTER * RASTER)

    def dilate(self, factor: float) -> "ImageRegion":
        """Scale a polygon region about its centroid (simulated widened
        detection); mask regions are returned unchanged."""
        if self.polygon is None:
            return self
        c = self.polygon.mean(axis=0)
        return ImageRegion.from_polygon(c + (self.polygon - c) * (1.0 + factor))


def shape_distance(a1: ImageRegion, a2: ImageRegion) -> float:
    """Symmetric-difference area on the 512x512 rasterization."""
    iv1, iv2 = a1.intervals(), a2.intervals()
    if iv1 is not None and iv2 is not None:
        len1 = np.maximum(iv1[:, 1] - iv1[:, 0] + 1, 0)
        len2 = np.maximum(iv2[:, 1] - iv2[:, 0] + 1, 0)
        lo = np.maximum(iv1[:, 0], iv2[:, 0])
        hi = np.minimum(iv1[:, 1], iv2[:, 1])
        inter = np.maximum(hi - lo + 1, 0)
        inter = np.where((len1 > 0) & (len2 > 0), inter, 0)
        count = int((len1 + len2 - 2 * inter).sum())
    else:
        count = int(np.logical_xor(a1.mask(), a2.mask()).sum())
    return count / float(RASTER * RASTER)


def project_table_region(s: TableGeometry, w: CameraParams,
                         hom: PlaneHomography | None = None) -> ImageRegion:
    """Projected table quadrilateral as a normalized image region."""
    hom = hom or homography_from_camera(w)
    corners = s.corners()
    if np.any(point_depths(hom, corners) <= 0):
        raise BehindCamera("table corner behind the camera")
    quad = normalize_pixels(project_points(hom, corners), w.image_size)
    return ImageRegion.from_polygon(quad)


# ---------------------------------------------------------------------------
# Consistent homography search
# ---------------------------------------------------------------------------


@dataclass
class FitReport:
    satisfied: bool
    trials: int
    distance: float


_PARAM_NAMES = ("f_mm", "gamma", "x0", "y0", "psi_x", "psi_y", "psi_z", "t_x", "t_y", "t_z")


def _param_ranges(image_size) -> np.ndarray:
    wp, hp = image_size
    return np.array(
        [
            FOCAL_RANGE_MM[1] - FOCAL_RANGE_MM[0],
            0.2 / wp,
            wp / 2.0,
            hp / 2.0,
            TWO_PI,
            TWO_PI,
            TWO_PI,
            2.0 * R_MAX,
            2.0 * R_MAX,
            TZ_RANGE[1] - TZ_RANGE[0],
        ]
    )


def _get_param(w: CameraParams, k: int) -> float:
    if k == 0:
        return w.f_mm
    if k == 1:
        return w.gamma
    if k == 2:
        return w.x0
    if k == 3:
        return w.y0
    if k <= 6:
        return float(w.psi[k - 4])
    return float(w.t[k - 7])


def _set_param(w: CameraParams, k: int, value: float) -> CameraParams:
    if k == 0:
        return replace(w, f_mm=value)
    if k == 1:
        return replace(w, gamma=value)
    if k == 2:
        return replace(w, x0=value)
    if k == 3:
        return replace(w, y0=value)
    if k <= 6:
        psi = w.psi.copy()
        psi[k - 4] = value
        return replace(w, psi=psi)
    t = w.t.copy()
    t[k - 7] = value
    return replace(w, t=t)


def _in_prior_box(w: CameraParams) -> bool:
    wp, hp = w.image_size
    r = math.hypot(w.t[0], w.t[1])
    return (
        FOCAL_RANGE_MM[0] <= w.f_mm <= FOCAL_RANGE_MM[1]
        and 1.0 / wp <= w.gamma <= 1.2 / wp
        and wp / 4.0 <= w.x0 <= 3.0 * wp / 4.0
        and hp / 4.0 <= w.y0 <= 3.0 * hp / 4.0
        and TZ_RANGE[0] <= w.t[2] <= TZ_RANGE[1]
        and 0.0 < r <= R_MAX
    )


def _quad_distance(w: CameraParams, template: TableGeometry, target: ImageRegion):
    try:
        quad = project_table_region(template, w)
    except (BehindCamera, SingularHomography, DegenerateView):
        return None, None
    d = shape_distance(quad, target)
    bound = min(quad.area(), target.area())
    return d, bound


def sample_consistent_homography(
    target: ImageRegion,
    template: TableGeometry,
    rng,
    image_size: tuple[int, int] = (640, 640),
    max_trials: int = 10000,
    relaxed_factor: float = 0.4,
    strict_factor: float = 0.25,
    sigma_frac: float = 0.02,
) -> tuple[CameraParams, FitReport]:
    """Search for camera parameters whose projected table quadrilateral
    matches the target region.

    Prior draws run until the relaxed fit condition holds, then greedy
    single-parameter Gaussian perturbations (accepted only when the
    distance decreases) refine toward the strict condition.  The trial
    budget covers both phases; on exhaustion the best camera seen is
    returned with ``satisfied=False``.
    """
    if target.area() <= 0:
        raise ValueError("target region must be nonempty")
    ranges = _param_ranges(image_size)
    best_w, best_d = None, math.inf
    trials = 0
    current, current_d = None, math.inf
    while trials < max_trials:
        if current is None:
            trials += 1
            w = sample_camera(image_size, rng)
            d, bound = _quad_distance(w, template, target)
            if d is None:
                continue
            if d < best_d:
                best_w, best_d = w, d
            if d < relaxed_factor * bound:
                current, current_d = w, d
                if d < strict_factor * bound:
                    return w, FitReport(True, trials, d)
            continue
        trials += 1
        k = int(rng.integers(len(ranges)))
        value = _get_param(current, k) + rng.normal(0.0, sigma_frac * ranges[k])
        w = _set_param(current, k, value)
        if not _in_prior_box(w):
            continue
        d, bound = _quad_distance(w, template, target)
        if d is None or d >= current_d:
            continue
        current, current_d = w, d
        if d < best_d:
            best_w, best_d = w, d
        if d < strict_factor * bound:
            return w, FitReport(True, trials, d)
    return best_w, FitReport(False, trials, best_d)


# ---------------------------------------------------------------------------
# Table templates
# ---------------------------------------------------------------------------


def sample_table_template(rng, beta=(2.0, 2.0)) -> TableGeometry:
    """Prior on square table sizes: 0.5 + 2.5 * Beta."""
    return TableGeometry.square(0.5 + 2.5 * rng.beta(*beta))


def posterior_templates(estimate: float) -> list[TableGeometry]:
    """Nearest posterior template to the size estimate plus its two
    neighbors (one at the ends of the template range)."""
    sides = np.array(TEMPLATE_SIDES)
    k = int(np.argmin(np.abs(sides - estimate)))
    idx = [i for i in (k - 1, k, k + 1) if 0 <= i < len(sides)]
    return [TableGeometry.square(float(sides[i])) for i in idx]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def camera_to_dict(w: CameraParams) -> dict:
    return {
        "f_mm": w.f_mm,
        "gamma": w.gamma,
        "x0": w.x0,
        "y0": w.y0,
        "psi": list(map(float, w.psi)),
        "t": list(map(float, w.t)),
        "image_size": list(w.image_size),
    }


def camera_from_dict(d: dict) -> CameraParams:
    return CameraParams(
        d["f_mm"],
        d["gamma"],
        d["x0"],
        d["y0"],
        np.array(d["psi"], dtype=float),
        np.array(d["t"], dtype=float),
        tuple(d["image_size"]),
    )
