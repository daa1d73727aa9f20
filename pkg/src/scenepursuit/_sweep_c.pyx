# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled Gibbs sweep kernel; arithmetic mirrors _sweep_py.py."""

from libc.math cimport exp, fabs

import numpy as np

cimport numpy as cnp


cdef inline long _quantize(double ssum, long scnt, const double[::1] quant_points) nogil:
    cdef long best = 0
    cdef long i
    cdef double mean, d, best_d
    if scnt == 0:
        return 0
    mean = ssum / scnt
    best_d = fabs(mean - quant_points[0])
    for i in range(1, quant_points.shape[0]):
        d = fabs(mean - quant_points[i])
        if d < best_d:
            best = i
            best_d = d
    return best + 1


def sweep(
    cnp.int8_t[::1] z,
    const long[::1] perm,
    const double[::1] u,
    const long[::1] site_indptr,
    const long[::1] site_feats,
    long[::1] feat_count,
    const double[::1] lam_feat,
    const long[::1] adj_indptr,
    const long[::1] adj_feat,
    const double[::1] adj_lam,
    const long[::1] site_cat,
    long n_cats,
    long n_cat_states,
    long n_scale_states,
    const long[::1] ev_indptr,
    const long[::1] ev_cell,
    const double[::1] ev_ratio,
    const double[::1] log_cat,
    const double[::1] log_scale,
    const double[::1] quant_points,
    long[::1] counts,
    long[::1] ymask,
    double[::1] ssum,
    long[::1] scnt,
    long[::1] sstate,
):
    cdef double dlog = 0.0
    cdef long flips = 0
    cdef long n_sites = perm.shape[0]
    cdef long idx, site, k, fi, a, e, cat, cur, new, step
    cdef long cnt_wo, cnt_all_wo, y0, y1, s0, s1
    cdef double delta, ratio, sum_wo, p1
    with nogil:
        for idx in range(n_sites):
            site = perm[idx]
            cur = z[site]
            delta = 0.0
            for k in range(site_indptr[site], site_indptr[site + 1]):
                fi = site_feats[k]
                if feat_count[fi] - cur == 0:
                    delta += lam_feat[fi]
                    for a in range(adj_indptr[fi], adj_indptr[fi + 1]):
                        if feat_count[adj_feat[a]] > 0:
                            delta += adj_lam[a]
            cat = site_cat[site]
            for k in range(ev_indptr[site], ev_indptr[site + 1]):
                e = ev_cell[k]
                ratio = ev_ratio[k]
                cnt_wo = counts[e * n_cats + cat] - cur
                y0 = ymask[e] & ~(1 << cat)
                if cnt_wo > 0:
                    y0 |= 1 << cat
                y1 = y0 | (1 << cat)
                if y1 != y0:
                    delta += log_cat[e * n_cat_states + y1] - log_cat[e * n_cat_states + y0]
                sum_wo = ssum[e] - cur * ratio
                cnt_all_wo = scnt[e] - cur
                s0 = _quantize(sum_wo, cnt_all_wo, quant_points)
                s1 = _quantize(sum_wo + ratio, cnt_all_wo + 1, quant_points)
                if s1 != s0:
                    delta += (
                        log_scale[e * n_scale_states + s1]
                        - log_scale[e * n_scale_states + s0]
                    )
            p1 = 1.0 / (1.0 + exp(-delta))
            new = 1 if u[idx] < p1 else 0
            if new != cur:
                step = new - cur
                z[site] = <cnp.int8_t> new
                flips += 1
                dlog += step * delta
                for k in range(site_indptr[site], site_indptr[site + 1]):
                    feat_count[site_feats[k]] += step
                for k in range(ev_indptr[site], ev_indptr[site + 1]):
                    e = ev_cell[k]
                    counts[e * n_cats + cat] += step
                    if counts[e * n_cats + cat] > 0:
                        ymask[e] |= 1 << cat
                    else:
                        ymask[e] &= ~(1 << cat)
                    ssum[e] += step * ev_ratio[k]
                    scnt[e] += step
                    sstate[e] = _quantize(ssum[e], scnt[e], quant_points)
    return dlog, flips
