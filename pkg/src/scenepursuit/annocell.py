"""Annocell hierarchy and ground-truth annobit evaluation.

The hierarchy covers the normalized image domain [0, 1]^2 with square
cells of side 2^-l for levels 0..3, shifted by 25% of the cell side,
giving 1, 25, 169 and 841 cells per level (1036 total).  Annobits are
the ground-truth answers attached to cells: the set of object categories
visible in a cell, the quantized average object scale, and whether the
cell is mostly table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import camera as cam
from .scenegen import Category, N_CATEGORIES, ObjectPose, TableGeometry

LEVELS = 4

SCALE_ANCHORS = (0.1, 0.35, 0.65, 1.0)


@dataclass(frozen=True)
class ScaleQuantization:
    """Anchors plus midpoints; classes are the Voronoi cells of the
    combined 2d-1 = 7 points on (0, 1]."""

    anchors: tuple[float, ...] = SCALE_ANCHORS

    @property
    def points(self) -> np.ndarray:
        a = np.array(self.anchors)
        mid = (a[:-1] + a[1:]) / 2.0
        return np.sort(np.concatenate([a, mid]))

    @property
    def n_classes(self) -> int:
        return 2 * len(self.anchors) - 1

    def classify(self, ratio: float) -> int:
        """Scale class in 1..7 for a ratio in (0, 1]."""
        return int(np.argmin(np.abs(self.points - ratio))) + 1


@dataclass(frozen=True)
class AnnobitIndex:
    kind: str  # "cat" | "scale" | "table"
    cell: int


class AnnocellHierarchy:
    def __init__(self):
        self.sides = [2.0 ** (-l) for l in range(LEVELS)]
        self.strides = [s / 4.0 for s in self.sides]
        self.n_pos = [4 * 2**l - 3 for l in range(LEVELS)]
        self.level_counts = [n * n for n in self.n_pos]
        self.offsets = np.concatenate([[0], np.cumsum(self.level_counts)])
        self.total = int(self.offsets[-1])
        level, ix, iy = [], [], []
        for l in range(LEVELS):
            n = self.n_pos[l]
            gy, gx = np.mgrid[0:n, 0:n]
            level.append(np.full(n * n, l))
            ix.append(gx.ravel())
            iy.append(gy.ravel())
        self.level = np.concatenate(level)
        self.ix = np.concatenate(ix)
        self.iy = np.concatenate(iy)
        self.side = np.array([self.sides[l] for l in self.level])

    def cell_id(self, l: int, ix: int, iy: int) -> int:
        return int(self.offsets[l] + iy * self.n_pos[l] + ix)

    def bounds(self, cell: int) -> tuple[float, float, float]:
        """(x0, y0, side) of a cell."""
        l = int(self.level[cell])
        return (
            self.ix[cell] * self.strides[l],
            self.iy[cell] * self.strides[l],
            self.sides[l],
        )

    def cells_containing(self, x: float, y: float) -> np.ndarray:
        """All cell ids whose square contains the point (half-open cells,
        with the far domain edge attached to the last cells)."""
        x = min(max(x, 0.0), 1.0 - 1e-12)
        y = min(max(y, 0.0), 1.0 - 1e-12)
        ids = []
        for l in range(LEVELS):
            stride, side, n = self.strides[l], self.sides[l], self.n_pos[l]
            ix_lo = max(int(math.floor((x - side) / stride)) + 1, 0)
            ix_hi = min(int(math.floor(x / stride)), n - 1)
            iy_lo = max(int(math.floor((y - side) / stride)) + 1, 0)
            iy_hi = min(int(math.floor(y / stride)), n - 1)
            for iy in range(iy_lo, iy_hi + 1):
                base = self.offsets[l] + iy * n
                ids.extend(range(base + ix_lo, base + ix_hi + 1))
        return np.array(ids, dtype=int)

    def contained_cells(self, cell: int) -> np.ndarray:
        """Cells of the next finer level geometrically inside a cell."""
        l = int(self.level[cell])
        if l >= LEVELS - 1:
            return np.array([], dtype=int)
        n = self.n_pos[l + 1]
        jx = np.arange(2 * self.ix[cell], min(2 * self.ix[cell] + 4, n - 1) + 1)
        jy = np.arange(2 * self.iy[cell], min(2 * self.iy[cell] + 4, n - 1) + 1)
        gy, gx = np.meshgrid(jy, jx, indexing="ij")
        return (self.offsets[l + 1] + gy.ravel() * n + gx.ravel()).astype(int)


def build_hierarchy() -> AnnocellHierarchy:
    return AnnocellHierarchy()


# ---------------------------------------------------------------------------
# Scene projection and annobit evaluation
# ---------------------------------------------------------------------------


@dataclass
class ProjectedScene:
    """Per-object image-space quantities shared by all annobit queries."""

    categories: np.ndarray  # (n,)
    centers: np.ndarray  # (n, 2)
    visible: np.ndarray  # (n,) bool: footprint fully inside the image
    longest: np.ndarray  # (n,) longest bbox side, normalized
    bboxes: np.ndarray  # (n, 4) x, y, w, h


def project_scene(
    objects: list[tuple[Category, ObjectPose]],
    w: cam.CameraParams,
    hom: cam.PlaneHomography | None = None,
    n_boundary: int = 32,
) -> ProjectedScene:
    hom = hom or cam.homography_from_camera(w)
    cats, centers, vis, longest, bboxes = [], [], [], [], []
    for c, pose in objects:
        proj = cam.project_instance((c, pose), w, hom=hom, n_boundary=n_boundary)
        cats.append(int(c))
        centers.append(proj.center)
        vis.append(proj.fully_visible)
        longest.append(proj.longest_side)
        bboxes.append(proj.bbox)
    n = len(objects)
    return ProjectedScene(
        np.array(cats, dtype=int).reshape(n),
        np.array(centers, dtype=float).reshape(n, 2),
        np.array(vis, dtype=bool).reshape(n),
        np.array(longest, dtype=float).reshape(n),
        np.array(bboxes, dtype=float).reshape(n, 4),
    )


def _objects_in_cell(proj: ProjectedScene, hier, cell: int) -> np.ndarray:
    x0, y0, side = hier.bounds(cell)
    cx = np.clip(proj.centers[:, 0], 0.0, 1.0 - 1e-12)
    cy = np.clip(proj.centers[:, 1], 0.0, 1.0 - 1e-12)
    inside = (cx >= x0) & (cx < x0 + side) & (cy >= y0) & (cy < y0 + side)
    return np.flatnonzero(inside & proj.visible)


def eval_category_annobit(proj: ProjectedScene, hier: AnnocellHierarchy, cell: int) -> int:
    """Bitmask over categories: bit c set iff a fully visible instance of
    category c has its projected footprint center inside the cell."""
    mask = 0
    for i in _objects_in_cell(proj, hier, cell):
        mask |= 1 << int(proj.categories[i])
    return mask


def eval_scale_annobit(
    proj: ProjectedScene,
    hier: AnnocellHierarchy,
    cell: int,
    quant: ScaleQuantization = ScaleQuantization(),
) -> int:
    """Scale class 1..7 of the average per-instance scale ratio inside
    the cell; 0 when the cell is empty."""
    idx = _objects_in_cell(proj, hier, cell)
    if len(idx) == 0:
        return 0
    _, _, side = hier.bounds(cell)
    ratios = np.clip(proj.longest[idx] / side, 1e-9, 1.0)
    return quant.classify(float(ratios.mean()))


def _clip_polygon(poly: np.ndarray, x0, y0, x1, y1) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by an axis box."""
    def clip(pts, inside, intersect):
        out = []
        n = len(pts)
        for i in range(n):
            a, b = pts[i], pts[(i + 1) % n]
            ia, ib = inside(a), inside(b)
            if ia:
                out.append(a)
                if not ib:
                    out.append(intersect(a, b))
            elif ib:
                out.append(intersect(a, b))
        return np.array(out) if out else np.empty((0, 2))

    def cut(axis, bound, keep_low):
        def inside(p):
            return p[axis] <= bound if keep_low else p[axis] >= bound

        def intersect(a, b):
            t = (bound - a[axis]) / (b[axis] - a[axis])
            return a + t * (b - a)

        return inside, intersect

    pts = poly
    for axis, bound, keep_low in ((0, x1, True), (0, x0, False), (1, y1, True), (1, y0, False)):
        if len(pts) == 0:
            break
        inside, intersect = cut(axis, bound, keep_low)
        pts = clip(pts, inside, intersect)
    return pts


def _polygon_area(pts: np.ndarray) -> float:
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def eval_table_annobit(
    s: TableGeometry,
    w: cam.CameraParams,
    hier: AnnocellHierarchy,
    cell: int,
    hom: cam.PlaneHomography | None = None,
) -> int:
    """1 iff at least half of the cell area overlaps the projected table."""
    region = cam.project_table_region(s, w, hom=hom)
    x0, y0, side = hier.bounds(cell)
    inter = _clip_polygon(region.polygon, x0, y0, x0 + side, y0 + side)
    return int(_polygon_area(inter) >= 0.5 * side * side)


def eval_annobit_field(
    proj: ProjectedScene,
    hier: AnnocellHierarchy,
    quant: ScaleQuantization = ScaleQuantization(),
) -> tuple[np.ndarray, np.ndarray]:
    """Category bitmask and scale class for every cell, in one pass over
    objects (equivalent to the per-cell evaluators)."""
    cat_mask = np.zeros(hier.total, dtype=np.int64)
    scale_sum = np.zeros(hier.total)
    scale_cnt = np.zeros(hier.total, dtype=np.int64)
    for i in range(len(proj.categories)):
        if not proj.visible[i]:
            continue
        ids = hier.cells_containing(proj.centers[i, 0], proj.centers[i, 1])
        cat_mask[ids] |= 1 << int(proj.categories[i])
        ratios = np.clip(proj.longest[i] / hier.side[ids], 1e-9, 1.0)
        scale_sum[ids] += ratios
        scale_cnt[ids] += 1
    scale_state = np.zeros(hier.total, dtype=np.int64)
    occupied = scale_cnt > 0
    if np.any(occupied):
        means = scale_sum[occupied] / scale_cnt[occupied]
        pts = quant.points
        scale_state[occupied] = np.argmin(np.abs(means[:, None] - pts[None, :]), axis=1) + 1
    return cat_mask, scale_state


def write_annobit_csv(path, hier: AnnocellHierarchy, cat_mask, scale_state, table_bits=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "cell_row", "cell_col", "kind", "value"])
        for cell in range(hier.total):
            l, row, col = int(hier.level[cell]), int(hier.iy[cell]), int(hier.ix[cell])
            writer.writerow([l, row, col, "cat", int(cat_mask[cell])])
            writer.writerow([l, row, col, "scale", int(scale_state[cell])])
            if table_bits is not None:
                writer.writerow([l, row, col, "table", int(table_bits[cell])])
