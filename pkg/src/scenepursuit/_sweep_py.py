"""Pure-Python Gibbs sweep kernel.

Fallback for environments without the compiled extension.  The control
flow and arithmetic mirror ``_sweep_c.pyx`` operation for operation so
both kernels produce bit-identical chains from the same random stream;
see benchmarks/bench_gibbs.py for the speed gap.
"""

import math


def _quantize(ssum, scnt, quant_points):
    if scnt == 0:
        return 0
    mean = ssum / scnt
    best, best_d = 0, abs(mean - quant_points[0])
    for i in range(1, len(quant_points)):
        d = abs(mean - quant_points[i])
        if d < best_d:
            best, best_d = i, d
    return best + 1


def sweep(
    z,
    perm,
    u,
    site_indptr,
    site_feats,
    feat_count,
    lam_feat,
    adj_indptr,
    adj_feat,
    adj_lam,
    site_cat,
    n_cats,
    n_cat_states,
    n_scale_states,
    ev_indptr,
    ev_cell,
    ev_ratio,
    log_cat,
    log_scale,
    quant_points,
    counts,
    ymask,
    ssum,
    scnt,
    sstate,
):
    dlog = 0.0
    flips = 0
    n_sites = len(perm)
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
        p1 = 1.0 / (1.0 + math.exp(-delta))
        new = 1 if u[idx] < p1 else 0
        if new != cur:
            step = new - cur
            z[site] = new
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
