"""Vectorized numpy kernels: the fallback backend and the semantic reference.

Both backends implement the same two entry points. Arrays carry a leading
instance axis so a batch of environments is advanced in one call; instances
never share mutable state, so row i of a batched call equals a batch-of-one
run bitwise.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"
SUPPORTS_PARALLEL = False

_EPS_LEN = 1e-12    # coincident-endpoint guard, meters
_EPS_GRAD = 1e-18   # degenerate tet gradient guard


def _scatter_add(target_flat, flat_idx, values, size):
    """Accumulate values into a flat float64 buffer (fixed input order)."""
    target_flat += np.bincount(flat_idx, weights=values, minlength=size)


def make_scratch(n_env, n_vert):
    """This backend works on the canonical layout; no extra buffers needed."""
    return None


def run_substeps(x, v, w, edges, rest_len, ks, tets, rest_vol, kv,
                 att_vertex, att_faces, att_is_face, att_anchor, att_rest, att_k,
                 grasp_vertex, drag_points,
                 g, h, substeps, damping, acc, cnt, threads=1, parallel=False,
                 scratch=None):
    """Advance every instance by one outer step's worth of solver substeps.

    Per substep: predict under gravity, project distance/grasp/attachment
    constraints over edges and volume constraints over tets against the same
    position snapshot, average accumulated corrections per vertex, then
    recover velocities from the position change. Collisions are not handled
    here; the engine runs them once per outer step. Divergence shows up as
    non-finite values the engine checks afterwards, so the arithmetic must
    not warn on them.
    """
    n_env, n_vert, _ = x.shape
    n_edge = len(edges)
    n_tet = len(tets)
    n_att = len(att_vertex)
    size = n_env * n_vert

    free = w > 0.0
    free3 = free[None, :, None]
    damp = 1.0 if damping == 0.0 else max(0.0, 1.0 - damping * h)

    env_off = np.arange(n_env)[:, None] * n_vert
    if n_edge:
        ea, eb = edges[:, 0], edges[:, 1]
        wa, wb = w[ea], w[eb]
        wsum_e = wa + wb
        edge_live = wsum_e > 0.0
        flat_a = (env_off + ea[None, :]).ravel()
        flat_b = (env_off + eb[None, :]).ravel()
    if n_tet:
        tia, tib, tic, tid = (tets[:, i] for i in range(4))
        flat_t = [(env_off + tets[:, i][None, :]).ravel() for i in range(4)]
    if n_att:
        is_face = att_is_face.astype(bool)
        att_wc = np.where(is_face, w[att_faces].sum(axis=1) / 3.0, 0.0)
        att_wv = w[att_vertex]
        att_wsum = att_wv + att_wc
        att_live = att_wsum > 0.0
        flat_av = (env_off + att_vertex[None, :]).ravel()
        flat_af = [(env_off + att_faces[:, i][None, :]).ravel() for i in range(3)]

    g_row = np.asarray(g, dtype=np.float64)[None, None, :]
    genv = np.where(grasp_vertex >= 0)[0]
    gvert = grasp_vertex[genv]

    with np.errstate(invalid="ignore", over="ignore"):
        for _ in range(substeps):
            vt = np.where(free3, v + h * g_row, 0.0)
            xt = x + h * vt

            acc[:] = 0.0
            cnt[:] = 0
            acc_flat = acc.reshape(size, 3)
            cnt_flat = cnt.reshape(size)

            if n_edge:
                diff = xt[:, ea] - xt[:, eb]
                dist = np.sqrt(np.einsum("neq,neq->ne", diff, diff))
                ok = (dist > _EPS_LEN) & edge_live[None, :]
                scale = np.where(
                    ok,
                    ks * (dist - rest_len[None, :])
                    / np.where(ok, dist * wsum_e[None, :], 1.0),
                    0.0,
                )
                corr_a = (-wa[None, :] * scale)[:, :, None] * diff
                corr_b = (wb[None, :] * scale)[:, :, None] * diff
                for comp in range(3):
                    _scatter_add(acc_flat[:, comp], flat_a, corr_a[:, :, comp].ravel(), size)
                    _scatter_add(acc_flat[:, comp], flat_b, corr_b[:, :, comp].ravel(), size)
                hits = ok.ravel()
                cnt_flat += np.bincount(flat_a, weights=hits, minlength=size).astype(np.int64)
                cnt_flat += np.bincount(flat_b, weights=hits, minlength=size).astype(np.int64)

            if len(genv):
                xv = xt[genv, gvert]
                pull = drag_points[genv] - xv
                gdist = np.sqrt(np.einsum("nq,nq->n", pull, pull))
                gok = gdist > _EPS_LEN
                # drag anchor has zero inverse mass: the vertex takes the full pull
                acc[genv[gok], gvert[gok]] += pull[gok]
                cnt[genv[gok], gvert[gok]] += 1

            if n_att:
                xv = xt[:, att_vertex]
                cent = np.where(
                    is_face[None, :, None],
                    xt[:, att_faces].mean(axis=2),
                    att_anchor[None, :, :],
                )
                diff = xv - cent
                dist = np.sqrt(np.einsum("naq,naq->na", diff, diff))
                ok = (dist > _EPS_LEN) & att_live[None, :]
                scale = np.where(
                    ok,
                    att_k[None, :] * (dist - att_rest[None, :])
                    / np.where(ok, dist * att_wsum[None, :], 1.0),
                    0.0,
                )
                corr_v = (-att_wv[None, :] * scale)[:, :, None] * diff
                corr_c = (att_wc[None, :] * scale / 3.0)[:, :, None] * diff
                corr_c = np.where(is_face[None, :, None], corr_c, 0.0)
                for comp in range(3):
                    _scatter_add(acc_flat[:, comp], flat_av, corr_v[:, :, comp].ravel(), size)
                hits = ok.ravel()
                cnt_flat += np.bincount(flat_av, weights=hits, minlength=size).astype(np.int64)
                face_hits = (ok & is_face[None, :]).ravel()
                for i in range(3):
                    for comp in range(3):
                        _scatter_add(acc_flat[:, comp], flat_af[i], corr_c[:, :, comp].ravel(), size)
                    cnt_flat += np.bincount(
                        flat_af[i], weights=face_hits, minlength=size
                    ).astype(np.int64)

            if n_tet:
                pa = xt[:, tia]
                ba = xt[:, tib] - pa
                ca = xt[:, tic] - pa
                da = xt[:, tid] - pa
                grad_b = np.cross(ca, da) / 6.0
                grad_c = np.cross(da, ba) / 6.0
                grad_d = np.cross(ba, ca) / 6.0
                grad_a = -(grad_b + grad_c + grad_d)
                cval = np.einsum("ntq,ntq->nt", grad_d, da) - rest_vol[None, :]
                denom = (
                    np.einsum("ntq,ntq->nt", grad_a, grad_a)
                    + np.einsum("ntq,ntq->nt", grad_b, grad_b)
                    + np.einsum("ntq,ntq->nt", grad_c, grad_c)
                    + np.einsum("ntq,ntq->nt", grad_d, grad_d)
                )
                ok = denom > _EPS_GRAD
                s = np.where(ok, -kv * cval / np.where(ok, denom, 1.0), 0.0)[:, :, None]
                for flat_i, grad in zip(flat_t, (grad_a, grad_b, grad_c, grad_d)):
                    corr = s * grad
                    for comp in range(3):
                        _scatter_add(acc_flat[:, comp], flat_i, corr[:, :, comp].ravel(), size)
                    cnt_flat += np.bincount(
                        flat_i, weights=ok.ravel(), minlength=size
                    ).astype(np.int64)

            applies = (cnt > 0) & free[None, :]
            xt += np.where(
                applies[:, :, None], acc / np.where(applies, cnt, 1)[:, :, None], 0.0
            )

            v[:] = (xt - x) / h
            if damp != 1.0:
                v *= damp
            x[:] = xt
    return None


# --------------------------------------------------------------------------
# capsule SDF contact detection
# --------------------------------------------------------------------------


def capsule_distance(points, p0, p1, radius):
    """Signed distance from points (...,3) to a capsule; negative inside."""
    axis = p1 - p0
    denom = float(np.dot(axis, axis))
    if denom <= 0.0:
        denom = 1.0
    rel = points - p0
    t = np.clip((rel @ axis) / denom, 0.0, 1.0)
    closest = p0 + np.asarray(t)[..., None] * axis
    delta = points - closest
    return np.sqrt(np.einsum("...q,...q->...", delta, delta)) - radius


def _capsule_dist_grad(points, p0, p1, radius):
    axis = p1 - p0
    denom = float(np.dot(axis, axis))
    if denom <= 0.0:
        denom = 1.0
    rel = points - p0
    t = np.clip((rel @ axis) / denom, 0.0, 1.0)
    delta = points - (p0 + t[..., None] * axis)
    norm = np.sqrt(np.einsum("...q,...q->...", delta, delta))
    safe = norm > _EPS_LEN
    grad = np.where(safe[..., None], delta / np.where(safe, norm, 1.0)[..., None], 0.0)
    if not np.all(safe):
        # point on the axis: any direction perpendicular to the segment works
        fallback = np.cross(axis, np.array([1.0, 0.0, 0.0]))
        if np.dot(fallback, fallback) < 1e-20:
            fallback = np.cross(axis, np.array([0.0, 1.0, 0.0]))
        fallback = fallback / np.sqrt(np.dot(fallback, fallback))
        grad = np.where(safe[..., None], grad, fallback)
    return norm - radius, grad


def _project_simplex(b):
    """Euclidean projection of rows of b onto the probability simplex."""
    u = np.sort(b, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - 1.0
    j = np.arange(1, 4)[None, :]
    cond = u - css / j > 0.0
    rho = 3 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(b)), rho - 1] / rho
    return np.maximum(b - theta[:, None], 0.0)


def detect_contacts(pos, faces, caps, iters=8):
    """Deepest-point search of every surface face against every capsule.

    Projected gradient descent on barycentric coordinates from the best-vertex
    warm start, fixed iteration budget, falling back to the best vertex when
    the descent did not improve on it. Emits one contact row per penetrating
    (face, capsule) pair. An axis-aligned box overlap against the inflated
    capsule prunes faces first.
    """
    out_face, out_cap, out_depth, out_dir, out_bary = [], [], [], [], []
    if len(faces) == 0:
        return _pack_contacts(out_face, out_cap, out_depth, out_dir, out_bary)

    tri = pos[faces]  # (F, 3, 3)
    tri_lo = tri.min(axis=1)
    tri_hi = tri.max(axis=1)

    for ci in range(len(caps)):
        p0 = caps[ci, 0:3]
        p1 = caps[ci, 3:6]
        radius = caps[ci, 6]
        lo = np.minimum(p0, p1) - radius
        hi = np.maximum(p0, p1) + radius
        cand = np.where(np.all((tri_hi >= lo) & (tri_lo <= hi), axis=1))[0]
        if len(cand) == 0:
            continue
        verts = tri[cand]  # (K, 3, 3)
        vert_sd = capsule_distance(verts.reshape(-1, 3), p0, p1, radius).reshape(-1, 3)
        best_v = np.argmin(vert_sd, axis=1)
        best_v_sd = vert_sd[np.arange(len(cand)), best_v]

        bary = np.zeros((len(cand), 3))
        bary[np.arange(len(cand)), best_v] = 1.0
        for it in range(iters):
            pt = np.einsum("kc,kcq->kq", bary, verts)
            _, grad = _capsule_dist_grad(pt, p0, p1, radius)
            gb = np.einsum("kq,kcq->kc", grad, verts)
            gb -= gb.mean(axis=1, keepdims=True)
            mag = np.max(np.abs(gb), axis=1, keepdims=True)
            step = 0.5 * 0.7 ** it
            bary = _project_simplex(bary - step * gb / (mag + 1e-30))

        pt = np.einsum("kc,kcq->kq", bary, verts)
        sd, grad = _capsule_dist_grad(pt, p0, p1, radius)
        worse = sd > best_v_sd
        if np.any(worse):
            bary[worse] = 0.0
            bary[np.where(worse)[0], best_v[worse]] = 1.0
            pt = np.einsum("kc,kcq->kq", bary, verts)
            sd, grad = _capsule_dist_grad(pt, p0, p1, radius)

        for k in np.where(sd < 0.0)[0]:
            out_face.append(int(cand[k]))
            out_cap.append(ci)
            out_depth.append(-sd[k])
            out_dir.append(grad[k])
            out_bary.append(bary[k])
    return _pack_contacts(out_face, out_cap, out_depth, out_dir, out_bary)


def _pack_contacts(face, cap, depth, direction, bary):
    k = len(face)
    return (
        np.asarray(face, dtype=np.int32).reshape(k),
        np.asarray(cap, dtype=np.int32).reshape(k),
        np.asarray(depth, dtype=np.float64).reshape(k),
        np.asarray(direction, dtype=np.float64).reshape(k, 3),
        np.asarray(bary, dtype=np.float64).reshape(k, 3),
    )
