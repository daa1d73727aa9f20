"""Gibbs/MRF prior over binary occupancy fields on the table grid.

The table plane is partitioned into 5cm cells; ``z[j, c] = 1`` marks an
object of category c centered in cell j.  The prior is an exponential
family over binary existence features (singleton cells, disjoint 3x3
"middle" tiles, disjoint 6x6 "coarse" tiles) and conjunction features
(products of two middle features whose block centers are close).
Parameters are tied across features in symmetry groups: same granularity
and distance to the nearest table edge for existence features; edge
distance of the first block, relative direction measured in the frame of
its nearest edge, and the category pair for conjunctions.  That frame
makes the tied statistics invariant under quarter-turn table rotations.

Learning matches model feature expectations to target statistics by
robust stochastic approximation with persistent Gibbs chains; the log
partition function is estimated by path sampling from an
independent-site reference model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gibbs
from .errors import Diverged, NoConverge
from .scenegen import N_CATEGORIES, TableGeometry

CELL = 0.05
MIDDLE_CELLS = 3
COARSE_CELLS = 6
EDGE_BIN_EDGES = (0.15, 0.45)
CONJ_THRESHOLD = 0.45

_DIRS = ("back", "front", "left", "right", "same")
# Local frames per table edge (south, east, north, west): x along the
# edge, y toward the table interior; rotations map frames onto frames.
_EDGE_FRAMES = (
    ((1.0, 0.0), (0.0, 1.0)),
    ((0.0, 1.0), (-1.0, 0.0)),
    ((-1.0, 0.0), (0.0, -1.0)),
    ((0.0, -1.0), (1.0, 0.0)),
)


@dataclass(frozen=True)
class Grid:
    table: TableGeometry
    n_rows: int
    n_cols: int

    @classmethod
    def for_table(cls, table: TableGeometry) -> "Grid":
        return cls(table, round(table.width / CELL), round(table.length / CELL))

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) world coordinates, row-major."""
        xs = -self.table.length / 2.0 + (np.arange(self.n_cols) + 0.5) * CELL
        ys = -self.table.width / 2.0 + (np.arange(self.n_rows) + 0.5) * CELL
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def cell_of(self, x: float, y: float) -> int | None:
        col = math.floor((x + self.table.length / 2.0) / CELL)
        row = math.floor((y + self.table.width / 2.0) / CELL)
        if 0 <= row < self.n_rows and 0 <= col < self.n_cols:
            return row * self.n_cols + col
        return None


def _edge_distances(x: float, y: float, table: TableGeometry) -> np.ndarray:
    hl, hw = table.length / 2.0, table.width / 2.0
    return np.array([y + hw, hl - x, hw - y, x + hl])


def _edge_bin(dist: float) -> int:
    return int(np.digitize(dist, EDGE_BIN_EDGES))


def _local_dir(edge: int, dx: float, dy: float) -> str:
    (xx, xy), (yx, yy) = _EDGE_FRAMES[edge]
    dxl = dx * xx + dy * xy
    dyl = dx * yx + dy * yy
    if abs(dyl) >= abs(dxl):
        return "front" if dyl > 0 else "back"
    return "right" if dxl > 0 else "left"


def _ordered_desc(p1, p2, c1, c2, table) -> tuple:
    dists = _edge_distances(p1[0], p1[1], table)
    near = np.flatnonzero(dists <= dists.min() + 1e-9)
    dx, dy = p2[0] - p1[0], p2[1] - p1[1]
    direction = min(_local_dir(int(e), dx, dy) for e in near)
    return (_edge_bin(float(dists.min())), direction, int(c1), int(c2))


def _conjunction_desc(p1, p2, c1, c2, table) -> tuple:
    """Rotation-invariant descriptor of an unordered block/category pair."""
    if np.allclose(p1, p2):
        return ("conj", _edge_bin(float(_edge_distances(*p1, table).min())), "same",
                min(int(c1), int(c2)), max(int(c1), int(c2)))
    a = _ordered_desc(p1, p2, c1, c2, table)
    b = _ordered_desc(p2, p1, c2, c1, table)
    return ("conj",) + min(a, b)


@dataclass
class FeatureSet:
    """Existence features, conjunctions, and their tying groups.

    Existence features are (cell set, category) pairs evaluated as the
    max of z over the set; conjunctions are products of two existence
    features with disjoint site supports.  Group-summed counts are the
    sufficient statistics of the Gibbs model.
    """

    grid: Grid
    n_cats: int
    feat_cells: list[np.ndarray]
    feat_cat: np.ndarray
    feat_group: np.ndarray
    conj_f1: np.ndarray
    conj_f2: np.ndarray
    conj_group: np.ndarray
    group_desc: list[tuple]
    builder_config: dict | None = None
    # Derived incidence structures, built in __post_init__.
    site_indptr: np.ndarray = field(init=False)
    site_feats: np.ndarray = field(init=False)
    incidence_site: np.ndarray = field(init=False)
    incidence_feat: np.ndarray = field(init=False)

    def __post_init__(self):
        n_sites = self.n_sites
        pairs = []
        for fi, cells in enumerate(self.feat_cells):
            for cell in cells:
                pairs.append((int(cell) * self.n_cats + int(self.feat_cat[fi]), fi))
        pairs.sort()
        self.incidence_site = np.array([p[0] for p in pairs], dtype=np.int64)
        self.incidence_feat = np.array([p[1] for p in pairs], dtype=np.int64)
        self.site_indptr = np.zeros(n_sites + 1, dtype=np.int64)
        np.add.at(self.site_indptr, self.incidence_site + 1, 1)
        self.site_indptr = np.cumsum(self.site_indptr)
        self.site_feats = self.incidence_feat
        for f1, f2 in zip(self.conj_f1, self.conj_f2):
            s1 = {int(c) * self.n_cats + int(self.feat_cat[f1]) for c in self.feat_cells[f1]}
            s2 = {int(c) * self.n_cats + int(self.feat_cat[f2]) for c in self.feat_cells[f2]}
            if s1 & s2:
                raise ValueError("conjunction features must have disjoint supports")

    @property
    def n_sites(self) -> int:
        return self.grid.n_cells * self.n_cats

    @property
    def n_features(self) -> int:
        return len(self.feat_cells)

    @property
    def n_groups(self) -> int:
        return len(self.group_desc)

    def feature_counts(self, z: np.ndarray) -> np.ndarray:
        """Occupied-site count per existence feature."""
        zf = np.asarray(z).reshape(-1).astype(np.int64)
        return np.bincount(
            self.incidence_feat,
            weights=zf[self.incidence_site],
            minlength=self.n_features,
        ).astype(np.int64)


def eval_features(z: np.ndarray, fs: FeatureSet) -> np.ndarray:
    """Group-summed feature vector: existence occupancies and
    conjunction co-occurrences aggregated by tying group."""
    occ = fs.feature_counts(z) > 0
    out = np.bincount(fs.feat_group, weights=occ, minlength=fs.n_groups)
    if len(fs.conj_group):
        both = occ[fs.conj_f1] & occ[fs.conj_f2]
        out += np.bincount(fs.conj_group, weights=both, minlength=fs.n_groups)
    return out


@dataclass
class MrfParams:
    lam: np.ndarray
    fs: FeatureSet

    def lam_by_feature(self) -> np.ndarray:
        return self.lam[self.fs.feat_group]

    def lam_by_conjunction(self) -> np.ndarray:
        return self.lam[self.fs.conj_group] if len(self.fs.conj_group) else np.empty(0)


def log_prob_unnorm(z: np.ndarray, params: MrfParams, fs: FeatureSet | None = None) -> float:
    fs = fs or params.fs
    return float(params.lam @ eval_features(z, fs))


# ---------------------------------------------------------------------------
# Standard feature inventory
# ---------------------------------------------------------------------------


def _block_ids(n_rows: int, n_cols: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Assignment of cells to k x k tiles anchored at the origin corner
    (boundary tiles truncated), plus per-block cell lists."""
    rows = np.arange(n_rows) // k
    cols = np.arange(n_cols) // k
    nbc = int(cols.max()) + 1
    block = rows[:, None] * nbc + cols[None, :]
    block = block.ravel()
    n_blocks = int(block.max()) + 1
    cells = [np.flatnonzero(block == b) for b in range(n_blocks)]
    return block, cells


def build_feature_set(
    table: TableGeometry,
    n_cats: int = N_CATEGORIES,
    conj_threshold: float = CONJ_THRESHOLD,
    include_middle: bool = True,
    include_coarse: bool = True,
    include_conjunctions: bool = True,
) -> FeatureSet:
    grid = Grid.for_table(table)
    centers = grid.cell_centers()
    feat_cells: list[np.ndarray] = []
    feat_cat: list[int] = []
    feat_desc: list[tuple] = []

    for cell in range(grid.n_cells):
        b = _edge_bin(float(_edge_distances(*centers[cell], table).min()))
        for c in range(n_cats):
            feat_cells.append(np.array([cell]))
            feat_cat.append(c)
            feat_desc.append(("fine", b, c))

    mid_feat_index: dict[tuple[int, int], int] = {}
    mid_centers: list[np.ndarray] = []
    if include_middle:
        _, blocks = _block_ids(grid.n_rows, grid.n_cols, MIDDLE_CELLS)
        for bi, cells in enumerate(blocks):
            center = centers[cells].mean(axis=0)
            mid_centers.append(center)
            b = _edge_bin(float(_edge_distances(*center, table).min()))
            for c in range(n_cats):
                mid_feat_index[(bi, c)] = len(feat_cells)
                feat_cells.append(cells)
                feat_cat.append(c)
                feat_desc.append(("middle", b, c))
    if include_coarse:
        _, blocks = _block_ids(grid.n_rows, grid.n_cols, COARSE_CELLS)
        for cells in blocks:
            center = centers[cells].mean(axis=0)
            b = _edge_bin(float(_edge_distances(*center, table).min()))
            for c in range(n_cats):
                feat_cells.append(cells)
                feat_cat.append(c)
                feat_desc.append(("coarse", b, c))

    conj_f1: list[int] = []
    conj_f2: list[int] = []
    conj_desc: list[tuple] = []
    if include_conjunctions and include_middle:
        nb = len(mid_centers)
        for b1 in range(nb):
            for b2 in range(b1, nb):
                d = float(np.linalg.norm(mid_centers[b1] - mid_centers[b2]))
                if d >= conj_threshold:
                    continue
                for c1 in range(n_cats):
                    for c2 in range(n_cats):
                        if b1 == b2 and c2 <= c1:
                            continue
                        conj_f1.append(mid_feat_index[(b1, c1)])
                        conj_f2.append(mid_feat_index[(b2, c2)])
                        conj_desc.append(
                            _conjunction_desc(
                                mid_centers[b1], mid_centers[b2], c1, c2, table
                            )
                        )

    group_ids: dict[tuple, int] = {}
    group_desc: list[tuple] = []

    def gid(desc: tuple) -> int:
        if desc not in group_ids:
            group_ids[desc] = len(group_desc)
            group_desc.append(desc)
        return group_ids[desc]

    feat_group = np.array([gid(d) for d in feat_desc], dtype=np.int64)
    conj_group = np.array([gid(d) for d in conj_desc], dtype=np.int64)
    return FeatureSet(
        grid=grid,
        n_cats=n_cats,
        feat_cells=feat_cells,
        feat_cat=np.array(feat_cat, dtype=np.int64),
        feat_group=feat_group,
        conj_f1=np.array(conj_f1, dtype=np.int64),
        conj_f2=np.array(conj_f2, dtype=np.int64),
        conj_group=conj_group,
        group_desc=group_desc,
        builder_config={
            "side_m": table.length,
            "width_m": table.width,
            "n_cats": n_cats,
            "conj_threshold": conj_threshold,
            "include_middle": include_middle,
            "include_coarse": include_coarse,
            "include_conjunctions": include_conjunctions,
        },
    )


# ---------------------------------------------------------------------------
# Gibbs sampling
# ---------------------------------------------------------------------------


def gibbs_site_conditional(
    z: np.ndarray, cell: int, cat: int, params: MrfParams, fs: FeatureSet | None = None
) -> float:
    """P(z[cell, cat] = 1 | all other sites): the logistic of the energy
    change from flipping the site, touching only local features."""
    fs = fs or params.fs
    site = cell * fs.n_cats + cat
    zf = np.asarray(z).reshape(-1)
    counts = fs.feature_counts(zf)
    lam_feat = params.lam_by_feature()
    lam_conj = params.lam_by_conjunction()
    delta = 0.0
    cur = int(zf[site])
    for fi in fs.site_feats[fs.site_indptr[site] : fs.site_indptr[site + 1]]:
        if counts[fi] - cur == 0:
            delta += lam_feat[fi]
            for k in range(len(fs.conj_f1)):
                if fs.conj_f1[k] == fi and counts[fs.conj_f2[k]] > 0:
                    delta += lam_conj[k]
                elif fs.conj_f2[k] == fi and counts[fs.conj_f1[k]] > 0:
                    delta += lam_conj[k]
    return 1.0 / (1.0 + math.exp(-delta))


def sample_layout(
    params: MrfParams,
    fs: FeatureSet | None = None,
    sweeps: int = 200,
    rng=None,
    init: np.ndarray | None = None,
) -> np.ndarray:
    """Systematic-scan Gibbs with a random site order per sweep; returns
    the layout after `sweeps` sweeps (the caller chooses the burn-in)."""
    fs = fs or params.fs
    rng = rng if rng is not None else np.random.default_rng()
    state = gibbs.ChainState.create(fs, params.lam, init=init)
    for _ in range(sweeps):
        state.sweep(rng)
    return state.z.reshape(fs.grid.n_cells, fs.n_cats).copy()


@dataclass
class StepSchedule:
    iterations: int = 2000
    eta0: float = 0.5
    tau: float = 200.0
    polyak_fraction: float = 0.25

    def eta(self, t: int) -> float:
        return self.eta0 / (1.0 + t / self.tau)


def fit_moment_matching(
    target_stats: np.ndarray,
    fs: FeatureSet,
    init: np.ndarray | None = None,
    step_schedule: StepSchedule | None = None,
    rng=None,
    n_chains: int = 8,
    tol: float | None = None,
    max_lambda: float = 1e3,
) -> MrfParams:
    """Robust stochastic approximation: lambda climbs the moment gap
    (target - E_lambda[phi]) estimated from persistent Gibbs chains, with
    Polyak averaging over the schedule tail."""
    schedule = step_schedule or StepSchedule()
    rng = rng if rng is not None else np.random.default_rng()
    target = np.asarray(target_stats, dtype=float)
    if target.shape != (fs.n_groups,):
        raise ValueError("target statistics must have one entry per group")
    lam = np.zeros(fs.n_groups) if init is None else np.asarray(init, dtype=float).copy()
    chains = [gibbs.ChainState.create(fs, lam) for _ in range(n_chains)]
    tail_start = int(schedule.iterations * (1.0 - schedule.polyak_fraction))
    polyak = np.zeros_like(lam)
    n_tail = 0
    for t in range(schedule.iterations):
        stats = np.zeros(fs.n_groups)
        for chain in chains:
            chain.sweep(rng)
            stats += chain.group_counts()
        stats /= n_chains
        lam = lam + schedule.eta(t) * (target - stats)
        if np.max(np.abs(lam)) > max_lambda:
            raise Diverged("lambda left the trust region")
        for chain in chains:
            chain.set_lambda(lam)
        if t >= tail_start:
            polyak += lam
            n_tail += 1
    lam_avg = polyak / max(n_tail, 1)
    params = MrfParams(lam_avg, fs)
    if tol is not None:
        gap = np.max(np.abs(target - estimate_group_means(params, rng=rng)))
        if gap > tol:
            raise NoConverge(f"moment gap {gap:.4f} above tolerance {tol}")
    return params


def estimate_group_means(
    params: MrfParams,
    n_samples: int = 200,
    burn_in: int = 100,
    thin: int = 2,
    rng=None,
) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng()
    fs = params.fs
    state = gibbs.ChainState.create(fs, params.lam)
    for _ in range(burn_in):
        state.sweep(rng)
    acc = np.zeros(fs.n_groups)
    for _ in range(n_samples):
        for _ in range(thin):
            state.sweep(rng)
        acc += state.group_counts()
    return acc / n_samples


def log_partition_independent(params: MrfParams, fs: FeatureSet | None = None) -> float:
    """Exact log kappa for a model whose active features are all
    singletons and whose conjunction weights vanish."""
    fs = fs or params.fs
    lam_feat = params.lam_by_feature()
    sizes = np.array([len(c) for c in fs.feat_cells])
    if np.any((sizes > 1) & (lam_feat != 0.0)):
        raise ValueError("reference model must only weight singleton features")
    if len(fs.conj_group) and np.any(params.lam_by_conjunction() != 0.0):
        raise ValueError("reference model must have zero conjunction weights")
    a = np.zeros(fs.n_sites)
    single = sizes == 1
    for fi in np.flatnonzero(single):
        site = int(fs.feat_cells[fi][0]) * fs.n_cats + int(fs.feat_cat[fi])
        a[site] += lam_feat[fi]
    return float(np.logaddexp(0.0, a).sum())


def estimate_log_partition(
    params: MrfParams,
    ref_params: MrfParams,
    path_points: int = 11,
    mc_samples: int = 200,
    rng=None,
    burn_in: int = 100,
    thin: int = 2,
) -> float:
    """Path-sampling estimate of log kappa(lambda):

        log kappa(l0) + integral_0^1 E_{l0 + t dl}[dl . phi] dt

    with the expectation at each path point estimated by Gibbs sampling
    and the integral by the trapezoid rule."""
    rng = rng if rng is not None else np.random.default_rng()
    fs = params.fs
    log_k0 = log_partition_independent(ref_params, fs)
    dlam = params.lam - ref_params.lam
    if not np.any(dlam != 0.0):
        return log_k0
    ts = np.linspace(0.0, 1.0, path_points)
    values = np.empty(path_points)
    for i, t in enumerate(ts):
        point = MrfParams(ref_params.lam + t * dlam, fs)
        state = gibbs.ChainState.create(fs, point.lam)
        for _ in range(burn_in):
            state.sweep(rng)
        acc = 0.0
        for _ in range(mc_samples):
            for _ in range(thin):
                state.sweep(rng)
            acc += float(dlam @ state.group_counts())
        values[i] = acc / mc_samples
    return log_k0 + float(np.trapezoid(values, ts))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def mrf_params_to_dict(params: MrfParams) -> dict:
    fs = params.fs
    if fs.builder_config is None:
        raise ValueError("only builder-made feature sets are serializable")
    return {
        "builder": fs.builder_config,
        "groups": {repr(d): float(v) for d, v in zip(fs.group_desc, params.lam)},
    }


def mrf_params_from_dict(d: dict) -> MrfParams:
    cfg = dict(d["builder"])
    table = TableGeometry(cfg.pop("side_m"), cfg.pop("width_m"))
    fs = build_feature_set(table, **cfg)
    lam = np.zeros(fs.n_groups)
    for desc, value in d["groups"].items():
        lam[fs.group_desc.index(eval(desc))] = value  # descriptors are literal tuples
    return MrfParams(lam, fs)
