"""Gibbs-sweep kernel dispatch.

The inner loop of every sampler in this package is a systematic-scan
Gibbs sweep over binary sites.  A compiled Cython kernel is used when
available; otherwise a pure-Python kernel with identical arithmetic
(same operation order, same libm calls) takes over, so both produce
bit-identical chains from the same random stream.  `KERNEL` reports
which one was selected at import time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _sweep_py

try:
    from . import _sweep_c

    _DEFAULT_IMPL = _sweep_c
    KERNEL = "c"
except ImportError:  # pragma: no cover - depends on the build environment
    _DEFAULT_IMPL = _sweep_py
    KERNEL = "python"

_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_F = np.empty(0, dtype=np.float64)


@dataclass
class KernelEvidence:
    """Flat evidence bookkeeping consumed by the sweep kernels.

    Sites map to the evidence cells containing their projection (CSR);
    each evidence cell tracks per-category occupancy counts, the current
    category bitmask, scale-ratio sums, and log-likelihood tables of the
    observed classifier outputs for every annobit state.
    """

    n_cats: int
    n_cat_states: int
    n_scale_states: int
    site_indptr: np.ndarray  # (n_sites + 1,)
    site_cell: np.ndarray  # (nnz,) evidence-cell slot per incidence
    site_ratio: np.ndarray  # (nnz,) scale ratio of the site's object in that cell
    log_cat: np.ndarray  # (n_cells * n_cat_states,)
    log_scale: np.ndarray  # (n_cells * n_scale_states,)
    quant_points: np.ndarray  # scale quantizer points
    counts: np.ndarray  # (n_cells * n_cats,) mutable
    ymask: np.ndarray  # (n_cells,) mutable
    ssum: np.ndarray  # (n_cells,) mutable
    scnt: np.ndarray  # (n_cells,) mutable
    sstate: np.ndarray  # (n_cells,) mutable

    @property
    def n_cells(self) -> int:
        return len(self.ymask)

    def loglik(self) -> float:
        """Evidence log likelihood at the current bookkeeping state."""
        idx_cat = np.arange(self.n_cells) * self.n_cat_states + self.ymask
        idx_sc = np.arange(self.n_cells) * self.n_scale_states + self.sstate
        return float(self.log_cat[idx_cat].sum() + self.log_scale[idx_sc].sum())

    def reset_from(self, z: np.ndarray) -> None:
        """Recompute the mutable bookkeeping from a site vector."""
        self.counts[:] = 0
        self.ssum[:] = 0.0
        self.scnt[:] = 0
        nc = self.n_cats
        for site in np.flatnonzero(z):
            cat = site % nc
            for k in range(self.site_indptr[site], self.site_indptr[site + 1]):
                e = self.site_cell[k]
                self.counts[e * nc + cat] += 1
                self.ssum[e] += self.site_ratio[k]
                self.scnt[e] += 1
        counts = self.counts.reshape(self.n_cells, nc)
        self.ymask[:] = ((counts > 0) << np.arange(nc)[None, :]).sum(axis=1)
        self.sstate[:] = 0
        occ = self.scnt > 0
        if np.any(occ):
            means = self.ssum[occ] / self.scnt[occ]
            self.sstate[occ] = (
                np.argmin(np.abs(means[:, None] - self.quant_points[None, :]), axis=1) + 1
            )


def empty_evidence(n_sites: int, n_cats: int) -> KernelEvidence:
    return KernelEvidence(
        n_cats=n_cats,
        n_cat_states=1,
        n_scale_states=1,
        site_indptr=np.zeros(n_sites + 1, dtype=np.int64),
        site_cell=_EMPTY_I,
        site_ratio=_EMPTY_F,
        log_cat=_EMPTY_F,
        log_scale=_EMPTY_F,
        quant_points=_EMPTY_F,
        counts=_EMPTY_I.copy(),
        ymask=_EMPTY_I.copy(),
        ssum=_EMPTY_F.copy(),
        scnt=_EMPTY_I.copy(),
        sstate=_EMPTY_I.copy(),
    )


class ChainState:
    """Mutable Gibbs-chain state over one feature set (plus optional
    evidence), with maintained feature occupancy counters."""

    def __init__(self, fs, lam, z, evidence: KernelEvidence, impl=None):
        self.fs = fs
        self.impl = impl or _DEFAULT_IMPL
        self.z = np.ascontiguousarray(z, dtype=np.int8)
        self.lam = np.asarray(lam, dtype=float).copy()
        self.evidence = evidence
        F = fs.n_features
        entries: list[list[tuple[int, int]]] = [[] for _ in range(F)]
        for k in range(len(fs.conj_f1)):
            f1, f2, g = int(fs.conj_f1[k]), int(fs.conj_f2[k]), int(fs.conj_group[k])
            entries[f1].append((f2, g))
            entries[f2].append((f1, g))
        self.adj_indptr = np.zeros(F + 1, dtype=np.int64)
        self.adj_indptr[1:] = np.cumsum([len(e) for e in entries])
        flat = [pair for e in entries for pair in e]
        self.adj_feat = np.array([p[0] for p in flat], dtype=np.int64)
        self.adj_group = np.array([p[1] for p in flat], dtype=np.int64)
        self.feat_count = fs.feature_counts(self.z)
        self.lam_feat = np.empty(F)
        self.adj_lam = np.empty(len(self.adj_feat))
        self.site_cat = (np.arange(fs.n_sites) % fs.n_cats).astype(np.int64)
        self.set_lambda(self.lam)
        self.evidence.reset_from(self.z)

    @classmethod
    def create(cls, fs, lam, init=None, evidence: KernelEvidence | None = None, impl=None):
        z = (
            np.zeros(fs.n_sites, dtype=np.int8)
            if init is None
            else np.asarray(init, dtype=np.int8).reshape(-1).copy()
        )
        ev = evidence if evidence is not None else empty_evidence(fs.n_sites, fs.n_cats)
        return cls(fs, lam, z, ev, impl=impl)

    def set_lambda(self, lam) -> None:
        self.lam = np.asarray(lam, dtype=float).copy()
        self.lam_feat[:] = self.lam[self.fs.feat_group]
        if len(self.adj_lam):
            self.adj_lam[:] = self.lam[self.adj_group]

    def sweep(self, rng) -> tuple[float, int]:
        """One full randomized-scan sweep; returns (sum of applied
        energy deltas, number of flips)."""
        perm = rng.permutation(self.fs.n_sites).astype(np.int64)
        u = rng.random(self.fs.n_sites)
        ev = self.evidence
        return self.impl.sweep(
            self.z,
            perm,
            u,
            self.fs.site_indptr,
            self.fs.site_feats,
            self.feat_count,
            self.lam_feat,
            self.adj_indptr,
            self.adj_feat,
            self.adj_lam,
            self.site_cat,
            ev.n_cats,
            ev.n_cat_states,
            ev.n_scale_states,
            ev.site_indptr,
            ev.site_cell,
            ev.site_ratio,
            ev.log_cat,
            ev.log_scale,
            ev.quant_points,
            ev.counts,
            ev.ymask,
            ev.ssum,
            ev.scnt,
            ev.sstate,
        )

    def group_counts(self) -> np.ndarray:
        occ = self.feat_count > 0
        out = np.bincount(self.fs.feat_group, weights=occ, minlength=self.fs.n_groups)
        if len(self.fs.conj_group):
            both = occ[self.fs.conj_f1] & occ[self.fs.conj_f2]
            out += np.bincount(self.fs.conj_group, weights=both, minlength=self.fs.n_groups)
        return out

    def energy(self) -> float:
        """Current lambda . phi(z) plus evidence log likelihood."""
        total = float(self.lam @ self.group_counts())
        if self.evidence.n_cells:
            total += self.evidence.loglik()
        return total

    def set_layout(self, z) -> None:
        self.z[:] = np.asarray(z, dtype=np.int8).reshape(-1)
        self.feat_count = self.fs.feature_counts(self.z)
        self.evidence.reset_from(self.z)
