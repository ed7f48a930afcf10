"""Reverse-mode gradients through volume rendering.

Given the retained RenderRecords and the loss gradients with respect to the
per-ray color and expected depth, this propagates through the compositing
weights w_i = T_i alpha_i (with the downstream transmittance products and
the background term), the opacity transfer, the SDF-to-density transfer,
and the linear field maps, accumulating additively into dense per-voxel
gradient buffers for each owner volume.  All reductions are ordered numpy
scatter-adds, so results are independent of any execution parallelism.
"""

from __future__ import annotations

import numpy as np

from .render_ray import STATIC_OWNER, RenderRecords, _ALPHA_CLAMP
from .scene import DENSITY_SDF, Scene, sh_basis

PARAM_NAMES = ("w_s", "w_c", "w_sh", "log_a", "log_b")


def zero_grads(vset) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(getattr(vset, name)) for name in PARAM_NAMES}


def _suffix_sum_exclusive(values: np.ndarray, ray: np.ndarray, group_start: np.ndarray):
    """Per-segment sum of values over later segments of the same ray."""
    csum = np.cumsum(values)
    ends = group_start[1:] - 1  # last segment index per ray (garbage for empty rays)
    counts = np.diff(group_start)
    end_csum = np.repeat(csum[np.maximum(ends, 0)], counts)
    return end_csum - csum


def backward_records(records: RenderRecords, scene: Scene, d_color: np.ndarray,
                     d_depth: np.ndarray) -> dict:
    """Parameter gradients per owner ('static' or actor id) from output gradients."""
    owners = {"static": scene.static}
    owners.update({a.actor_id: a.voxels for a in scene.actors})
    grads = {name: zero_grads(vset) for name, vset in owners.items()}
    if records.n_segments == 0:
        return grads

    inc = records.included
    ray = records.ray
    alpha = np.clip(records.alpha, 0.0, _ALPHA_CLAMP)
    p = records.t_before
    w = np.where(inc, p * alpha, 0.0)
    t_mid = 0.5 * (records.t0 + records.t1)
    delta = records.t1 - records.t0

    depth_valid = records.weight_sum > 0.5
    d_depth = np.where(depth_valid, d_depth, 0.0)
    depth_safe = np.where(depth_valid, records.depth, 0.0)
    wsum_safe = np.where(depth_valid, records.weight_sum, 1.0)

    # dL/dw_i: direct color contribution plus the normalized-depth estimator.
    a_term = np.einsum("nc,nc->n", d_color[ray], records.color)
    a_term += d_depth[ray] * (t_mid - depth_safe[ray]) / wsum_safe[ray]

    # dL/dalpha_i = A_i T_i - (sum_{j>i} A_j w_j + dL/dT_fin * T_fin) / (1 - alpha_i)
    tail = np.einsum("nc,c->n", d_color, records.background) * records.t_final
    suffix = _suffix_sum_exclusive(np.where(inc, a_term * w, 0.0), ray, records.group_start)
    g_alpha = np.where(inc, a_term * p - (suffix + tail[ray]) / (1.0 - alpha), 0.0)

    g_sigma = g_alpha * delta * np.exp(-records.sigma * delta)

    # Color branch: dL/dc_i = dC * w_i, through the sigmoid and the field maps.
    g_c = d_color[ray] * w[:, None]
    g_z = g_c * records.color * (1.0 - records.color)
    gamma = sh_basis(records.omega)

    xh = np.concatenate([records.x, np.ones((records.n_segments, 1))], axis=1)
    if records.density_mode == DENSITY_SDF:
        s = records.s_field
    g_ws_row = None

    for owner_code, owner_name in ([(STATIC_OWNER, "static")]
                                   + [(i, a.actor_id) for i, a in enumerate(scene.actors)]):
        sel = np.flatnonzero(records.owner == owner_code)
        if sel.size == 0:
            continue
        vset = owners[owner_name]
        g = grads[owner_name]
        vid = records.vid[sel]

        if records.density_mode == DENSITY_SDF:
            a_p = np.exp(vset.log_a[vid])
            b_p = np.exp(vset.log_b[vid])
            s_v = s[sel]
            e = np.exp(-np.abs(s_v) / b_p)
            ds = np.where(s_v == 0.0, 0.0, g_sigma[sel] * (a_p / (2.0 * b_p)) * e)
            g_ws_row = ds[:, None] * xh[sel]
            np.add.at(g["log_a"], vid, g_sigma[sel] * records.sigma[sel])
            np.add.at(g["log_b"], vid, g_sigma[sel] * (-(a_p / (2.0 * b_p)) * s_v * e))
        else:
            g_ws_row = (g_sigma[sel] * records.sigma[sel])[:, None] * xh[sel]
        np.add.at(g["w_s"], vid, g_ws_row)
        np.add.at(g["w_c"], vid, np.einsum("ni,nj->nij", g_z[sel], records.x[sel]))
        np.add.at(g["w_sh"], vid, np.einsum("ni,nj->nij", g_z[sel], gamma[sel]))
    return grads
