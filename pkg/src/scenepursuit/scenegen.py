"""Generative attributed-graph model for 3D table scenes.

A scene is grown as a multi-type branching process: spontaneous (root)
objects appear with Poisson counts proportional to the table area, and
each object may trigger ancillary objects according to per-edge offspring
laws restricted by a master graph.  Poses are attributed top-down: root
objects follow an interior/boundary-strip mixture, children follow a
scaled-Beta radial law and a von Mises (or uniform) angular law around
their parent.  Physically impossible samples (overlapping vertical
objects) are pruned.  Parameters are learned by Monte-Carlo EM over the
latent parent assignment.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from .errors import IllegalEdge, InvalidStrip, RetryExhausted
from .errors import NonIdentifiableWarning

TWO_PI = 2.0 * math.pi

# Objects farther than this from every table edge get a uniform
# orientation (von Mises dispersion zero).
NEAR_EDGE_CUTOFF = 0.40

# Fixed per-category object sizes in meters (plate diameter 0.25).
PLATE_RADIUS = 0.125
GLASS_BASE_RADIUS = 0.035
GLASS_HEIGHT = 0.12
BOTTLE_BASE_RADIUS = 0.04
BOTTLE_HEIGHT = 0.28
UTENSIL_SEMI_MAJOR = 0.11
UTENSIL_SEMI_MINOR = 0.02


class Category(enum.IntEnum):
    PLATE = 0
    BOTTLE = 1
    GLASS = 2
    UTENSIL = 3


CATEGORIES = tuple(Category)
N_CATEGORIES = len(CATEGORIES)

# Categories standing upright on the table; only these collide.
VERTICAL_CATEGORIES = (Category.BOTTLE, Category.GLASS)


@dataclass(frozen=True)
class CircleFootprint:
    radius: float


@dataclass(frozen=True)
class EllipseFootprint:
    semi_major: float
    semi_minor: float


@dataclass(frozen=True)
class VerticalFootprint:
    """Base circle plus height, for objects standing on the table."""

    base_radius: float
    height: float


Footprint = CircleFootprint | EllipseFootprint | VerticalFootprint


def default_footprint(category: Category) -> Footprint:
    if category == Category.PLATE:
        return CircleFootprint(PLATE_RADIUS)
    if category == Category.GLASS:
        return VerticalFootprint(GLASS_BASE_RADIUS, GLASS_HEIGHT)
    if category == Category.BOTTLE:
        return VerticalFootprint(BOTTLE_BASE_RADIUS, BOTTLE_HEIGHT)
    return EllipseFootprint(UTENSIL_SEMI_MAJOR, UTENSIL_SEMI_MINOR)


@dataclass(frozen=True)
class ObjectPose:
    """Pose of one object in table coordinates (meters, radians)."""

    x: float
    y: float
    theta: float
    footprint: Footprint


@dataclass(frozen=True)
class MasterGraph:
    """Directed graph over {root} + categories restricting offspring."""

    root_children: tuple[Category, ...]
    children: dict[Category, tuple[Category, ...]]
    offspring_bound: dict[tuple[Category, Category], int]

    def allows(self, parent: Category, child: Category) -> bool:
        return child in self.children.get(parent, ())

    def edges(self) -> list[tuple[Category, Category]]:
        return [(p, c) for p, cs in self.children.items() for c in cs]


def default_master_graph() -> MasterGraph:
    return MasterGraph(
        root_children=CATEGORIES,
        children={
            Category.PLATE: (Category.GLASS, Category.UTENSIL),
            Category.BOTTLE: (Category.GLASS,),
            Category.UTENSIL: (Category.UTENSIL,),
        },
        offspring_bound={
            (Category.PLATE, Category.GLASS): 3,
            (Category.PLATE, Category.UTENSIL): 3,
            (Category.BOTTLE, Category.GLASS): 4,
            (Category.UTENSIL, Category.UTENSIL): 3,
        },
    )


@dataclass(frozen=True)
class TableGeometry:
    """Rectangular table; square templates use length == width."""

    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("table sides must be positive")

    @property
    def area(self) -> float:
        return self.length * self.width

    @classmethod
    def square(cls, side: float) -> "TableGeometry":
        return cls(side, side)

    def corners(self) -> np.ndarray:
        hl, hw = self.length / 2.0, self.width / 2.0
        return np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])


@dataclass(frozen=True)
class EdgePoseLaw:
    """Relative pose law for one master-graph edge.

    Radial distance is ``scale * Beta(radial_a, radial_b)``; the angular
    position of the child around the parent is von Mises with
    ``angular_kappa`` (zero means uniform on the circle).
    """

    scale: float
    radial_a: float = 2.0
    radial_b: float = 2.0
    angular_mean: float = 0.0
    angular_kappa: float = 2.0


@dataclass
class BranchingParams:
    root_rate: np.ndarray  # (4,) objects per square meter
    offspring_pmf: dict[tuple[Category, Category], np.ndarray]
    interior_prob: np.ndarray  # (4,) rho_c
    strip_width: np.ndarray  # (4,) d_c in meters
    pose_laws: dict[tuple[Category, Category], EdgePoseLaw]
    utensil_orient_kappa: float = 4.0
    master: MasterGraph = field(default_factory=default_master_graph)

    def validate(self) -> None:
        if np.any(self.root_rate < 0) or not np.all(np.isfinite(self.root_rate)):
            raise ValueError("root rates must be finite and nonnegative")
        for edge, pmf in self.offspring_pmf.items():
            bound = self.master.offspring_bound[edge]
            if len(pmf) != bound + 1:
                raise ValueError(f"pmf for {edge} must have length {bound + 1}")
            if abs(pmf.sum() - 1.0) > 1e-9 or np.any(pmf < 0):
                raise ValueError(f"pmf for {edge} must be a distribution")
        if np.any((self.interior_prob < 0) | (self.interior_prob > 1)):
            raise ValueError("interior probabilities must be in [0, 1]")


def default_branching_params(master: MasterGraph | None = None) -> BranchingParams:
    master = master or default_master_graph()
    pmfs = {}
    laws = {}
    scales = {
        (Category.PLATE, Category.GLASS): 0.40,
        (Category.PLATE, Category.UTENSIL): 0.30,
        (Category.BOTTLE, Category.GLASS): 0.40,
        (Category.UTENSIL, Category.UTENSIL): 0.25,
    }
    for edge in master.edges():
        bound = master.offspring_bound[edge]
        # Mildly decreasing default pmf over {0..bound}.
        w = 0.6 ** np.arange(bound + 1)
        pmfs[edge] = w / w.sum()
        laws[edge] = EdgePoseLaw(scale=scales.get(edge, 0.35))
    return BranchingParams(
        root_rate=np.array([1.5, 0.2, 0.3, 0.5]),
        offspring_pmf=pmfs,
        interior_prob=np.full(N_CATEGORIES, 0.8),
        strip_width=np.full(N_CATEGORIES, 0.20),
        pose_laws=laws,
        master=master,
    )


@dataclass
class AttributedGraph:
    """Skeleton tree plus per-node category and (optional) pose."""

    categories: list[Category]
    parents: list[int | None]
    poses: list[ObjectPose | None]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.categories)

    def roots(self) -> list[int]:
        return [i for i, p in enumerate(self.parents) if p is None]

    def children_of(self, v: int) -> list[int]:
        return [i for i, p in enumerate(self.parents) if p == v]

    def root_counts(self) -> np.ndarray:
        counts = np.zeros(N_CATEGORIES, dtype=int)
        for i in self.roots():
            counts[self.categories[i]] += 1
        return counts


@dataclass
class SceneLayout:
    """Flat, graph-free scene description: what an annotator sees."""

    table: TableGeometry
    objects: list[tuple[Category, ObjectPose]]
    parents: list[int | None] | None = None


# ---------------------------------------------------------------------------
# Pose laws
# ---------------------------------------------------------------------------


def distance_to_edges(x: float, y: float, s: TableGeometry) -> float:
    return min(
        s.length / 2.0 - abs(x),
        s.width / 2.0 - abs(y),
    )


def nearest_edge_orientation(x: float, y: float, s: TableGeometry) -> float:
    """Orientation of the closest table edge: 0 for the south/north
    edges (which run along x), pi/2 for east/west."""
    dx = s.length / 2.0 - abs(x)
    dy = s.width / 2.0 - abs(y)
    return 0.0 if dy <= dx else math.pi / 2.0


def _orientation_law(category: Category, x, y, s, params):
    """(mean, kappa) of the orientation distribution; kappa 0 = uniform."""
    if category != Category.UTENSIL:
        return 0.0, 0.0
    if distance_to_edges(x, y, s) > NEAR_EDGE_CUTOFF:
        return 0.0, 0.0
    mean = nearest_edge_orientation(x, y, s) + math.pi / 2.0
    return mean, params.utensil_orient_kappa


def _sample_orientation(category, x, y, s, params, rng) -> float:
    mean, kappa = _orientation_law(category, x, y, s, params)
    if kappa == 0.0:
        return rng.uniform(0.0, TWO_PI)
    return float(np.mod(rng.vonmises(mean, kappa), TWO_PI))


def _orientation_logpdf(category, x, y, theta, s, params) -> float:
    mean, kappa = _orientation_law(category, x, y, s, params)
    if kappa == 0.0:
        return -math.log(TWO_PI)
    return float(stats.vonmises.logpdf(theta, kappa, loc=mean))


def sample_pose_root(
    c: Category, s: TableGeometry, params: BranchingParams, rng
) -> ObjectPose:
    """Spontaneous-object pose: center in the interior region with
    probability rho_c, otherwise uniform on the boundary strip."""
    d = float(params.strip_width[c])
    if d >= min(s.length, s.width) / 2.0:
        raise InvalidStrip(f"strip width {d} too large for table {s}")
    hl, hw = s.length / 2.0, s.width / 2.0
    if rng.random() < params.interior_prob[c]:
        x = rng.uniform(-hl + d, hl - d)
        y = rng.uniform(-hw + d, hw - d)
    else:
        # Decompose the strip into two full-width horizontal bands and
        # two side bands, pick one by area.
        areas = np.array(
            [s.length * d, s.length * d, d * (s.width - 2 * d), d * (s.width - 2 * d)]
        )
        band = rng.choice(4, p=areas / areas.sum())
        if band == 0:
            x, y = rng.uniform(-hl, hl), rng.uniform(-hw, -hw + d)
        elif band == 1:
            x, y = rng.uniform(-hl, hl), rng.uniform(hw - d, hw)
        elif band == 2:
            x, y = rng.uniform(-hl, -hl + d), rng.uniform(-hw + d, hw - d)
        else:
            x, y = rng.uniform(hl - d, hl), rng.uniform(-hw + d, hw - d)
    theta = _sample_orientation(c, x, y, s, params, rng)
    return ObjectPose(float(x), float(y), theta, default_footprint(c))


def in_interior(x: float, y: float, d: float, s: TableGeometry) -> bool:
    return abs(x) < s.length / 2.0 - d and abs(y) < s.width / 2.0 - d


def root_pose_logpdf(
    c: Category, pose: ObjectPose, s: TableGeometry, params: BranchingParams
) -> float:
    d = float(params.strip_width[c])
    rho = float(params.interior_prob[c])
    area_int = (s.length - 2 * d) * (s.width - 2 * d)
    area_strip = s.area - area_int
    if abs(pose.x) > s.length / 2.0 or abs(pose.y) > s.width / 2.0:
        return -math.inf
    if in_interior(pose.x, pose.y, d, s):
        loc = math.log(rho / area_int) if rho > 0 else -math.inf
    else:
        loc = math.log((1 - rho) / area_strip) if rho < 1 else -math.inf
    return loc + _orientation_logpdf(c, pose.x, pose.y, pose.theta, s, params)


def sample_pose_child(
    c: Category,
    parent_c: Category,
    parent_pose: ObjectPose,
    s: TableGeometry,
    params: BranchingParams,
    rng,
) -> ObjectPose:
    """Child pose: scaled-Beta radial distance and von Mises / uniform
    angular position around the parent; orientation is independent."""
    if not params.master.allows(parent_c, c):
        raise IllegalEdge(f"{parent_c.name} -> {c.name} not in master graph")
    law = params.pose_laws[(parent_c, c)]
    r = law.scale * rng.beta(law.radial_a, law.radial_b)
    if law.angular_kappa == 0.0:
        phi = rng.uniform(0.0, TWO_PI)
    else:
        phi = rng.vonmises(law.angular_mean, law.angular_kappa)
    x = parent_pose.x + r * math.cos(phi)
    y = parent_pose.y + r * math.sin(phi)
    theta = _sample_orientation(c, x, y, s, params, rng)
    return ObjectPose(float(x), float(y), theta, default_footprint(c))


def child_pose_logpdf(
    c: Category,
    parent_c: Category,
    parent_pose: ObjectPose,
    pose: ObjectPose,
    s: TableGeometry,
    params: BranchingParams,
) -> float:
    """Density of the child pose w.r.t. Lebesgue measure d(x, y) times
    the orientation measure; the 1/r factor is the polar Jacobian."""
    if not params.master.allows(parent_c, c):
        return -math.inf
    law = params.pose_laws[(parent_c, c)]
    dx, dy = pose.x - parent_pose.x, pose.y - parent_pose.y
    r = math.hypot(dx, dy)
    if r <= 0.0 or r >= law.scale:
        return -math.inf
    phi = math.atan2(dy, dx)
    radial = stats.beta.logpdf(r / law.scale, law.radial_a, law.radial_b) - math.log(
        law.scale
    )
    if law.angular_kappa == 0.0:
        angular = -math.log(TWO_PI)
    else:
        angular = float(stats.vonmises.logpdf(phi, law.angular_kappa, loc=law.angular_mean))
    orient = _orientation_logpdf(c, pose.x, pose.y, pose.theta, s, params)
    return radial + angular - math.log(r) + orient


# ---------------------------------------------------------------------------
# Forward sampling
# ---------------------------------------------------------------------------


def sample_root_counts(params: BranchingParams, s: TableGeometry, rng) -> np.ndarray:
    """Independent Poisson(alpha_c * area) counts per category."""
    return rng.poisson(params.root_rate * s.area)


def sample_skeleton(
    params: BranchingParams, s: TableGeometry, rng, max_nodes: int = 200
) -> AttributedGraph:
    """Grow the category-labeled tree by recursive expansion."""
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    master = params.master
    categories: list[Category] = []
    parents: list[int | None] = []
    truncated = False
    counts = sample_root_counts(params, s, rng)
    queue: list[int] = []
    for c in CATEGORIES:
        for _ in range(int(counts[c])):
            if len(categories) >= max_nodes:
                truncated = True
                break
            categories.append(c)
            parents.append(None)
            queue.append(len(categories) - 1)
    head = 0
    while head < len(queue) and not truncated:
        v = queue[head]
        head += 1
        cv = categories[v]
        for child_c in master.children.get(cv, ()):
            pmf = params.offspring_pmf[(cv, child_c)]
            n = int(rng.choice(len(pmf), p=pmf))
            for _ in range(n):
                if len(categories) >= max_nodes:
                    truncated = True
                    break
                categories.append(child_c)
                parents.append(v)
                queue.append(len(categories) - 1)
            if truncated:
                break
    return AttributedGraph(categories, parents, [None] * len(categories), truncated)


def _attribute_poses(g: AttributedGraph, s, params, rng) -> None:
    for v in range(len(g)):
        p = g.parents[v]
        if p is None:
            g.poses[v] = sample_pose_root(g.categories[v], s, params, rng)
        else:
            g.poses[v] = sample_pose_child(
                g.categories[v], g.categories[p], g.poses[p], s, params, rng
            )


def _base_circle(pose: ObjectPose) -> tuple[float, float, float]:
    fp = pose.footprint
    assert isinstance(fp, VerticalFootprint)
    return pose.x, pose.y, fp.base_radius


def _find_overlap(g: AttributedGraph, alive: np.ndarray) -> tuple[int, int] | None:
    vert = [
        v
        for v in range(len(g))
        if alive[v] and g.categories[v] in VERTICAL_CATEGORIES
    ]
    for bi, i in enumerate(vert):
        xi, yi, ri = _base_circle(g.poses[i])
        for j in vert[bi + 1:]:
            xj, yj, rj = _base_circle(g.poses[j])
            if math.hypot(xi - xj, yi - yj) < ri + rj:
                return i, j
    return None


def _subtree(g: AttributedGraph, v: int) -> list[int]:
    out = [v]
    stack = [v]
    while stack:
        u = stack.pop()
        for w in g.children_of(u):
            out.append(w)
            stack.append(w)
    return out


def prune_overlaps(g: AttributedGraph, max_prunes: int = 100) -> AttributedGraph:
    """Delete the later-sampled node (and its subtree) of every
    overlapping vertical-object pair."""
    alive = np.ones(len(g), dtype=bool)
    prunes = 0
    while True:
        pair = _find_overlap(g, alive)
        if pair is None:
            break
        prunes += 1
        if prunes > max_prunes:
            raise RetryExhausted(f"more than {max_prunes} prunes on one scene")
        later = max(pair)
        for w in _subtree(g, later):
            alive[w] = False
    index = {old: new for new, old in enumerate(np.flatnonzero(alive))}
    parents = []
    for old in np.flatnonzero(alive):
        p = g.parents[old]
        parents.append(None if p is None or not alive[p] else index[p])
    return AttributedGraph(
        [g.categories[i] for i in np.flatnonzero(alive)],
        parents,
        [g.poses[i] for i in np.flatnonzero(alive)],
        g.truncated,
    )


def sample_scene(
    params: BranchingParams,
    s: TableGeometry,
    rng,
    max_nodes: int = 200,
    max_prunes: int = 100,
) -> AttributedGraph:
    """Full attributed graph: skeleton, poses, then overlap pruning."""
    g = sample_skeleton(params, s, rng, max_nodes=max_nodes)
    _attribute_poses(g, s, params, rng)
    return prune_overlaps(g, max_prunes=max_prunes)


def flatten_to_layout(g: AttributedGraph) -> list[tuple[Category, ObjectPose]]:
    """Project the graph on object descriptions, discarding edges."""
    return [(c, p) for c, p in zip(g.categories, g.poses)]


# ---------------------------------------------------------------------------
# Density
# ---------------------------------------------------------------------------


def _poisson_logpmf(n: int, rate: float) -> float:
    if rate == 0.0:
        return 0.0 if n == 0 else -math.inf
    return n * math.log(rate) - rate - gammaln(n + 1)


def graph_log_prob(
    g: AttributedGraph, s: TableGeometry, params: BranchingParams
) -> float:
    """Log density of an attributed graph under the branching model.

    Count factors come from the virtual root and from every node whose
    category can reproduce under the master graph; pose factors from
    every node.  Returns -inf whenever any factor has zero mass.
    """
    master = params.master
    total = 0.0
    area = s.area
    root_counts = g.root_counts()
    for c in CATEGORIES:
        total += _poisson_logpmf(int(root_counts[c]), float(params.root_rate[c]) * area)
    child_counts = np.zeros((len(g), N_CATEGORIES), dtype=int)
    for v, p in enumerate(g.parents):
        if p is not None:
            cp, cv = g.categories[p], g.categories[v]
            if not master.allows(cp, cv):
                return -math.inf
            child_counts[p, cv] += 1
    for v in range(len(g)):
        cv = g.categories[v]
        for child_c in master.children.get(cv, ()):
            pmf = params.offspring_pmf[(cv, child_c)]
            n = int(child_counts[v, child_c])
            if n >= len(pmf) or pmf[n] <= 0.0:
                return -math.inf
            total += math.log(pmf[n])
    for v in range(len(g)):
        p = g.parents[v]
        if p is None:
            total += root_pose_logpdf(g.categories[v], g.poses[v], s, params)
        else:
            total += child_pose_logpdf(
                g.categories[v], g.categories[p], g.poses[p], g.poses[v], s, params
            )
    return total


# ---------------------------------------------------------------------------
# MCEM parameter learning
# ---------------------------------------------------------------------------


def _pair_location_logpdf(law: EdgePoseLaw, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Log density of a child location relative to its parent (polar law
    mapped to Lebesgue d(x, y)); orientation terms are excluded because
    they are common to every parent choice."""
    r = np.hypot(dx, dy)
    out = np.full(r.shape, -np.inf)
    ok = (r > 0) & (r < law.scale)
    if not np.any(ok):
        return out
    radial = stats.beta.logpdf(r[ok] / law.scale, law.radial_a, law.radial_b)
    radial -= math.log(law.scale)
    phi = np.arctan2(dy[ok], dx[ok])
    if law.angular_kappa == 0.0:
        angular = -math.log(TWO_PI)
    else:
        angular = stats.vonmises.logpdf(phi, law.angular_kappa, loc=law.angular_mean)
    out[ok] = radial + angular - np.log(r[ok])
    return out


class _SceneWorkspace:
    """Per-scene caches reused by every E-step sweep."""

    def __init__(self, layout: SceneLayout, master: MasterGraph):
        self.layout = layout
        self.n = len(layout.objects)
        self.cats = np.array([int(c) for c, _ in layout.objects], dtype=int)
        self.x = np.array([p.x for _, p in layout.objects])
        self.y = np.array([p.y for _, p in layout.objects])
        self.master = master
        # Candidate parents by parent category, per node.
        self.cand_by_cat: list[dict[int, np.ndarray]] = []
        for v in range(self.n):
            cv = Category(self.cats[v])
            groups = {}
            for cp in CATEGORIES:
                if master.allows(cp, cv):
                    idx = np.flatnonzero((self.cats == int(cp)) & (np.arange(self.n) != v))
                    if len(idx):
                        groups[int(cp)] = idx
            self.cand_by_cat.append(groups)
        self.pair_ll: np.ndarray | None = None
        self.root_loc_ll: np.ndarray | None = None
        self.log_pmf: dict[tuple[int, int], np.ndarray] = {}

    def refresh(self, params: BranchingParams) -> None:
        """Recompute pose log densities and pmf tables for new params."""
        n = self.n
        self.pair_ll = np.full((n, n), -np.inf)
        for (cp, cc), law in params.pose_laws.items():
            vs = np.flatnonzero(self.cats == int(cc))
            us = np.flatnonzero(self.cats == int(cp))
            if len(vs) == 0 or len(us) == 0:
                continue
            dx = self.x[vs][:, None] - self.x[us][None, :]
            dy = self.y[vs][:, None] - self.y[us][None, :]
            self.pair_ll[np.ix_(vs, us)] = _pair_location_logpdf(law, dx, dy)
        s = self.layout.table
        self.root_loc_ll = np.empty(n)
        for v in range(n):
            c = Category(self.cats[v])
            d = float(params.strip_width[c])
            rho = float(params.interior_prob[c])
            area_int = (s.length - 2 * d) * (s.width - 2 * d)
            if in_interior(self.x[v], self.y[v], d, s):
                self.root_loc_ll[v] = math.log(rho / area_int) if rho > 0 else -math.inf
            elif abs(self.x[v]) <= s.length / 2 and abs(self.y[v]) <= s.width / 2:
                area_strip = s.area - area_int
                self.root_loc_ll[v] = (
                    math.log((1 - rho) / area_strip) if rho < 1 else -math.inf
                )
            else:
                self.root_loc_ll[v] = -math.inf
        self.log_pmf = {
            (int(p), int(c)): np.log(np.maximum(pmf, 1e-300))
            for (p, c), pmf in params.offspring_pmf.items()
        }


def _gibbs_sweep_parents(
    ws: _SceneWorkspace,
    zeta: np.ndarray,
    child_count: np.ndarray,
    root_count: np.ndarray,
    params: BranchingParams,
    rng,
) -> None:
    """One sweep of the parent-vector Gibbs sampler.

    Acyclicity is enforced by only proposing parents that come earlier
    in a random topological order refreshed each sweep."""
    n = ws.n
    area = ws.layout.table.area
    order = rng.permutation(n)
    pos = np.empty(n, dtype=int)
    pos[order] = np.arange(n)
    for v in order:
        cv = int(ws.cats[v])
        old = zeta[v]
        if old < 0:
            root_count[cv] -= 1
        else:
            child_count[old, cv] -= 1
        rate = max(float(params.root_rate[cv]) * area, 1e-300)
        logw = [math.log(rate) - math.log(root_count[cv] + 1) + ws.root_loc_ll[v]]
        cand_ids = [-1]
        for cp, idx in ws.cand_by_cat[v].items():
            idx = idx[pos[idx] < pos[v]]
            if len(idx) == 0:
                continue
            lp = ws.log_pmf[(cp, cv)]
            m = child_count[idx, cv]
            ratio = np.where(m + 1 < len(lp), lp[np.minimum(m + 1, len(lp) - 1)] - lp[m], -np.inf)
            logw.extend(ratio + ws.pair_ll[v, idx])
            cand_ids.extend(idx.tolist())
        logw = np.array(logw)
        w = np.exp(logw - logw.max())
        cum = np.cumsum(w)
        k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        k = min(k, len(cand_ids) - 1)
        chosen = cand_ids[k]
        zeta[v] = chosen
        if chosen < 0:
            root_count[cv] += 1
        else:
            child_count[chosen, cv] += 1


def _layout_to_graph(layout: SceneLayout, zeta: np.ndarray) -> AttributedGraph:
    return AttributedGraph(
        [c for c, _ in layout.objects],
        [None if z < 0 else int(z) for z in zeta],
        [p for _, p in layout.objects],
    )


def _fit_beta(data: np.ndarray) -> tuple[float, float]:
    data = np.clip(data, 1e-6, 1 - 1e-6)
    try:
        a, b, _, _ = stats.beta.fit(data, floc=0.0, fscale=1.0)
        return float(a), float(b)
    except Exception:
        m, v = data.mean(), max(data.var(), 1e-6)
        common = m * (1 - m) / v - 1
        return max(float(m * common), 0.05), max(float((1 - m) * common), 0.05)


def _fit_vonmises(angles: np.ndarray) -> tuple[float, float]:
    kappa, loc, _ = stats.vonmises.fit(angles, fscale=1.0)
    return float(loc), float(min(kappa, 500.0))


def m_step(
    layouts: list[SceneLayout],
    parent_lists: list[np.ndarray],
    params: BranchingParams,
    pmf_smoothing: float = 1e-3,
    min_pairs: int = 10,
) -> BranchingParams:
    """Closed-form maximizer given complete data (layouts + parents)."""
    master = params.master
    total_area = sum(l.table.area for l in layouts)
    root_counts = np.zeros(N_CATEGORIES)
    count_hist = {
        e: np.zeros(master.offspring_bound[e] + 1) for e in master.edges()
    }
    pairs: dict[tuple[Category, Category], list] = {e: [] for e in master.edges()}
    interior_hits = np.zeros(N_CATEGORIES)
    interior_tot = np.zeros(N_CATEGORIES)
    utensil_centered: list[float] = []
    for layout, zeta in zip(layouts, parent_lists):
        cats = [c for c, _ in layout.objects]
        poses = [p for _, p in layout.objects]
        nchild = {
            (u, c): 0 for u in range(len(cats)) for c in CATEGORIES
        }
        for v, z in enumerate(zeta):
            if z < 0:
                root_counts[cats[v]] += 1
                interior_tot[cats[v]] += 1
                d = float(params.strip_width[cats[v]])
                if in_interior(poses[v].x, poses[v].y, d, layout.table):
                    interior_hits[cats[v]] += 1
            else:
                nchild[(int(z), cats[v])] += 1
                pairs[(cats[int(z)], cats[v])].append((poses[int(z)], poses[v]))
            if cats[v] == Category.UTENSIL:
                mean, kappa = _orientation_law(
                    Category.UTENSIL, poses[v].x, poses[v].y, layout.table, params
                )
                if kappa > 0:
                    utensil_centered.append(poses[v].theta - mean)
        for u in range(len(cats)):
            for child_c in master.children.get(cats[u], ()):
                n = min(nchild[(u, child_c)], master.offspring_bound[(cats[u], child_c)])
                count_hist[(cats[u], child_c)][n] += 1

    new_rate = root_counts / total_area
    new_pmf = {}
    new_laws = dict(params.pose_laws)
    for edge in master.edges():
        hist = count_hist[edge] + pmf_smoothing
        new_pmf[edge] = hist / hist.sum()
        pp = pairs[edge]
        if len(pp) < min_pairs:
            warnings.warn(
                f"edge {edge[0].name}->{edge[1].name} has only {len(pp)} attributed "
                "pairs; keeping previous pose law",
                NonIdentifiableWarning,
            )
            continue
        law = params.pose_laws[edge]
        dx = np.array([c.x - p.x for p, c in pp])
        dy = np.array([c.y - p.y for p, c in pp])
        r = np.hypot(dx, dy) / law.scale
        a, b = _fit_beta(r)
        mean, kappa = _fit_vonmises(np.arctan2(dy, dx))
        new_laws[edge] = replace(
            law, radial_a=a, radial_b=b, angular_mean=mean, angular_kappa=kappa
        )
    new_rho = np.where(
        interior_tot > 0,
        np.clip(interior_hits / np.maximum(interior_tot, 1), 1e-3, 1 - 1e-3),
        params.interior_prob,
    )
    new_kappa = params.utensil_orient_kappa
    if len(utensil_centered) >= min_pairs:
        _, new_kappa = _fit_vonmises(np.array(utensil_centered))
    return replace(
        params,
        root_rate=new_rate,
        offspring_pmf=new_pmf,
        interior_prob=new_rho,
        pose_laws=new_laws,
        utensil_orient_kappa=new_kappa,
    )


def estimate_corpus_loglik(
    layouts: list[SceneLayout],
    params: BranchingParams,
    rng,
    n_draws: int = 32,
) -> tuple[float, float]:
    """Importance-sampling estimate of the observed-data log likelihood.

    Parent vectors are proposed sequentially along a random order; the
    linear-extension correction (product of subtree sizes accounts for
    how many orders are compatible with a forest) makes every draw an
    unbiased estimate of sum_zeta p(objects, zeta).  Returns the total
    estimate and a jackknife standard error.
    """
    per_scene = np.zeros((len(layouts), n_draws))
    for si, layout in enumerate(layouts):
        n = len(layout.objects)
        if n == 0:
            empty = AttributedGraph([], [], [])
            per_scene[si, :] = graph_log_prob(empty, layout.table, params)
            continue
        ws = _SceneWorkspace(layout, params.master)
        ws.refresh(params)
        area = layout.table.area
        for d in range(n_draws):
            order = rng.permutation(n)
            pos = np.empty(n, dtype=int)
            pos[order] = np.arange(n)
            zeta = -np.ones(n, dtype=int)
            child_count = np.zeros((n, N_CATEGORIES), dtype=int)
            root_count = np.zeros(N_CATEGORIES, dtype=int)
            logq = 0.0
            for v in order:
                cv = int(ws.cats[v])
                rate = max(float(params.root_rate[cv]) * area, 1e-300)
                logw = [
                    math.log(rate) - math.log(root_count[cv] + 1) + ws.root_loc_ll[v]
                ]
                cand_ids = [-1]
                for cp, idx in ws.cand_by_cat[v].items():
                    idx = idx[pos[idx] < pos[v]]
                    if len(idx) == 0:
                        continue
                    lp = ws.log_pmf[(cp, cv)]
                    m = child_count[idx, cv]
                    ratio = np.where(
                        m + 1 < len(lp),
                        lp[np.minimum(m + 1, len(lp) - 1)] - lp[m],
                        -np.inf,
                    )
                    logw.extend(ratio + ws.pair_ll[v, idx])
                    cand_ids.extend(idx.tolist())
                logw = np.array(logw)
                norm = logsumexp(logw)
                w = np.exp(logw - norm)
                cum = np.cumsum(w)
                k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
                k = min(k, len(cand_ids) - 1)
                chosen = cand_ids[k]
                zeta[v] = chosen
                if chosen < 0:
                    root_count[cv] += 1
                else:
                    child_count[chosen, cv] += 1
                logq += logw[k] - norm
            g = _layout_to_graph(layout, zeta)
            sizes = np.ones(n)
            for v in order[::-1]:
                if zeta[v] >= 0:
                    sizes[zeta[v]] += sizes[v]
            per_scene[si, d] = (
                graph_log_prob(g, layout.table, params)
                + float(np.log(sizes).sum())
                - logq
            )
    scene_logl = logsumexp(per_scene, axis=1) - math.log(n_draws)
    total = float(scene_logl.sum())
    jack = np.array(
        [
            (
                logsumexp(np.delete(per_scene, j, axis=1), axis=1)
                - math.log(n_draws - 1)
            ).sum()
            for j in range(n_draws)
        ]
    )
    se = float(np.sqrt(max((n_draws - 1) * np.var(jack), 0.0)))
    return total, se


@dataclass
class McemReport:
    loglik_trace: list[float]
    loglik_se: list[float]


def mcem_fit(
    layouts: list[SceneLayout],
    master: MasterGraph,
    init: BranchingParams,
    iterations: int = 15,
    gibbs_sweeps: int = 5,
    rng=None,
    oracle_parents: list[np.ndarray] | None = None,
    track_loglik: bool = False,
    loglik_draws: int = 16,
) -> tuple[BranchingParams, McemReport]:
    """Monte-Carlo EM over the latent parent vectors.

    The E step runs Gibbs sweeps on each scene's parent assignment; the
    M step applies the closed-form maximizers.  With ``oracle_parents``
    the E step is skipped entirely (used to unit-test the M step).
    """
    if not layouts:
        raise ValueError("need at least one scene")
    for layout in layouts:
        for c, _ in layout.objects:
            if c not in master.root_children:
                raise IllegalEdge(f"category {c} not reachable in master graph")
    rng = rng if rng is not None else np.random.default_rng()
    params = replace(init, master=master)
    if oracle_parents is not None:
        fitted = m_step(layouts, oracle_parents, params)
        return fitted, McemReport([], [])
    zetas = [-np.ones(len(l.objects), dtype=int) for l in layouts]
    workspaces = [_SceneWorkspace(l, master) for l in layouts]
    counts = [
        (np.zeros((len(l.objects), N_CATEGORIES), dtype=int), np.zeros(N_CATEGORIES, dtype=int))
        for l in layouts
    ]
    for layout, (_, root_count) in zip(layouts, counts):
        for c, _ in layout.objects:
            root_count[c] += 1
    report = McemReport([], [])
    for _ in range(iterations):
        for ws, zeta, (child_count, root_count) in zip(workspaces, zetas, counts):
            if ws.n == 0:
                continue
            ws.refresh(params)
            for _ in range(gibbs_sweeps):
                _gibbs_sweep_parents(ws, zeta, child_count, root_count, params, rng)
        params = m_step(layouts, zetas, params)
        if track_loglik:
            ll, se = estimate_corpus_loglik(layouts, params, rng, n_draws=loglik_draws)
            report.loglik_trace.append(ll)
            report.loglik_se.append(se)
    return params, report


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_FOOT_TAGS = {CircleFootprint: "circle", EllipseFootprint: "ellipse", VerticalFootprint: "vertical"}


def footprint_to_dict(fp: Footprint) -> dict:
    d = {"kind": _FOOT_TAGS[type(fp)]}
    d.update(vars(fp))
    return d


def footprint_from_dict(d: dict) -> Footprint:
    kind = d["kind"]
    if kind == "circle":
        return CircleFootprint(d["radius"])
    if kind == "ellipse":
        return EllipseFootprint(d["semi_major"], d["semi_minor"])
    return VerticalFootprint(d["base_radius"], d["height"])


def layout_to_dict(layout: SceneLayout) -> dict:
    d = {
        "table": {"side_m": layout.table.length}
        if layout.table.length == layout.table.width
        else {"length_m": layout.table.length, "width_m": layout.table.width},
        "objects": [
            {
                "category": c.name.lower(),
                "x_m": p.x,
                "y_m": p.y,
                "theta_rad": p.theta,
                "footprint": footprint_to_dict(p.footprint),
            }
            for c, p in layout.objects
        ],
    }
    if layout.parents is not None:
        d["parents"] = [-1 if p is None else p for p in layout.parents]
    return d


def layout_from_dict(d: dict) -> SceneLayout:
    t = d["table"]
    table = (
        TableGeometry.square(t["side_m"])
        if "side_m" in t
        else TableGeometry(t["length_m"], t["width_m"])
    )
    objects = [
        (
            Category[o["category"].upper()],
            ObjectPose(
                o["x_m"], o["y_m"], o["theta_rad"], footprint_from_dict(o["footprint"])
            ),
        )
        for o in d["objects"]
    ]
    parents = None
    if "parents" in d:
        parents = [None if p < 0 else p for p in d["parents"]]
    return SceneLayout(table, objects, parents)


def params_to_dict(params: BranchingParams) -> dict:
    return {
        "root_rate": params.root_rate.tolist(),
        "interior_prob": params.interior_prob.tolist(),
        "strip_width": params.strip_width.tolist(),
        "utensil_orient_kappa": params.utensil_orient_kappa,
        "offspring_pmf": {
            f"{p.name.lower()}->{c.name.lower()}": pmf.tolist()
            for (p, c), pmf in params.offspring_pmf.items()
        },
        "pose_laws": {
            f"{p.name.lower()}->{c.name.lower()}": vars(law)
            for (p, c), law in params.pose_laws.items()
        },
    }


def params_from_dict(d: dict, master: MasterGraph | None = None) -> BranchingParams:
    master = master or default_master_graph()

    def edge(key):
        p, c = key.split("->")
        return Category[p.upper()], Category[c.upper()]

    return BranchingParams(
        root_rate=np.array(d["root_rate"]),
        offspring_pmf={edge(k): np.array(v) for k, v in d["offspring_pmf"].items()},
        interior_prob=np.array(d["interior_prob"]),
        strip_width=np.array(d["strip_width"]),
        pose_laws={edge(k): EdgePoseLaw(**v) for k, v in d["pose_laws"].items()},
        utensil_orient_kappa=d["utensil_orient_kappa"],
        master=master,
    )


def save_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
