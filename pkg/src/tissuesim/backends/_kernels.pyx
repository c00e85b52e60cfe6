# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled solver and contact kernels.

Constraint semantics mirror the numpy backend: same ordering (distance,
grasp, attachment, volume), same guards, same averaging.

The deterministic path stores state env-minor (vertex, component, instance):
one sweep over the constraint topology serves every instance, and the inner
instance loops vectorize, so batches amortize both memory traffic and
per-constraint bookkeeping. Lanes never mix, so instance i of a batch is
bitwise identical to a batch of one, and thread chunks split lanes only at
64-byte boundaries. The parallel mode instead splits one instance's
constraints across threads with per-thread accumulators merged in thread
order (floating-point reassociation only).
"""

import numpy as np

cimport numpy as cnp
cimport openmp
from cython.parallel cimport parallel, prange, threadid
from libc.math cimport fabs, sqrt
from libc.stdint cimport int64_t, uint8_t
from libc.string cimport memcpy, memset

cnp.import_array()

NAME = "compiled"
SUPPORTS_PARALLEL = True

DEF EPS_LEN = 1e-12
DEF EPS_GRAD = 1e-18


def make_scratch(int n_env, int n_vert):
    """Aligned env-minor working buffers reused across steps."""
    def aligned(*shape):
        size = 1
        for s in shape:
            size *= s
        raw = np.empty(size * 8 + 64, dtype=np.uint8)
        off = (-raw.ctypes.data) % 64
        return raw[off:off + size * 8].view(np.float64).reshape(shape)

    return {
        "xb": aligned(n_vert, 3, n_env),
        "vb": aligned(n_vert, 3, n_env),
        "accb": aligned(n_vert, 3, n_env),
        "cntb": aligned(n_vert, n_env),
    }


# --------------------------------------------------------------------------
# env-minor (lane) substep path: deterministic mode
# --------------------------------------------------------------------------

cdef extern from *:
    """
    #include <math.h>
    #define TS_EPS_LEN 1e-12
    #define TS_EPS_GRAD 1e-18

    static void ts_lane_predict(double* restrict xb, double* restrict vb,
                                const double* restrict w, int n_vert, int nl,
                                int l0, int l1, double gx, double gy, double gz,
                                double h) {
        for (int i = 0; i < n_vert; ++i) {
            size_t r = (size_t)i * 3 * nl;
            if (w[i] > 0.0) {
                #pragma omp simd
                for (int l = l0; l < l1; ++l) {
                    vb[r + l] += h * gx;
                    xb[r + l] += h * vb[r + l];
                    vb[r + nl + l] += h * gy;
                    xb[r + nl + l] += h * vb[r + nl + l];
                    vb[r + 2 * nl + l] += h * gz;
                    xb[r + 2 * nl + l] += h * vb[r + 2 * nl + l];
                }
            } else {
                for (int l = l0; l < l1; ++l) {
                    vb[r + l] = 0.0;
                    vb[r + nl + l] = 0.0;
                    vb[r + 2 * nl + l] = 0.0;
                }
            }
        }
    }

    static void ts_lane_clear(double* restrict acc, double* restrict cnt,
                              int n_vert, int nl, int l0, int l1) {
        for (int i = 0; i < n_vert; ++i) {
            size_t r = (size_t)i * 3 * nl;
            for (int l = l0; l < l1; ++l) {
                acc[r + l] = 0.0;
                acc[r + nl + l] = 0.0;
                acc[r + 2 * nl + l] = 0.0;
                cnt[(size_t)i * nl + l] = 0.0;
            }
        }
    }

    static void ts_lane_edges(const double* restrict xb, double* restrict acc,
                              double* restrict cnt, const double* restrict w,
                              const int* restrict edges, const double* restrict rest_len,
                              double ks, int n_edge, int nl, int l0, int l1) {
        for (int e = 0; e < n_edge; ++e) {
            int a = edges[2 * e];
            int b = edges[2 * e + 1];
            double wa = w[a], wb = w[b];
            double wsum = wa + wb;
            if (wsum <= 0.0) continue;
            double rl = rest_len[e];
            const double* xa = xb + (size_t)a * 3 * nl;
            const double* xv = xb + (size_t)b * 3 * nl;
            double* aa = acc + (size_t)a * 3 * nl;
            double* ab = acc + (size_t)b * 3 * nl;
            double* na = cnt + (size_t)a * nl;
            double* nb = cnt + (size_t)b * nl;
            #pragma omp simd
            for (int l = l0; l < l1; ++l) {
                double dx = xa[l] - xv[l];
                double dy = xa[nl + l] - xv[nl + l];
                double dz = xa[2 * nl + l] - xv[2 * nl + l];
                double dist = sqrt(dx * dx + dy * dy + dz * dz);
                double m = 0.5 + copysign(0.5, dist - TS_EPS_LEN); /* branchless: keeps the loop simd */
                double scale = m * ks * (dist - rl) / (dist * wsum + (1.0 - m));
                double ca = -wa * scale;
                double cb = wb * scale;
                aa[l] += ca * dx;
                aa[nl + l] += ca * dy;
                aa[2 * nl + l] += ca * dz;
                ab[l] += cb * dx;
                ab[nl + l] += cb * dy;
                ab[2 * nl + l] += cb * dz;
                na[l] += m;
                nb[l] += m;
            }
        }
    }

    static void ts_lane_tets(const double* restrict xb, double* restrict acc,
                             double* restrict cnt, const int* restrict tets,
                             const double* restrict rest_vol, double kv,
                             int n_tet, int nl, int l0, int l1) {
        for (int t = 0; t < n_tet; ++t) {
            int a = tets[4 * t];
            int b = tets[4 * t + 1];
            int c = tets[4 * t + 2];
            int d = tets[4 * t + 3];
            double rv = rest_vol[t];
            const double* xa = xb + (size_t)a * 3 * nl;
            const double* xv = xb + (size_t)b * 3 * nl;
            const double* xc = xb + (size_t)c * 3 * nl;
            const double* xd = xb + (size_t)d * 3 * nl;
            double* aa = acc + (size_t)a * 3 * nl;
            double* ab = acc + (size_t)b * 3 * nl;
            double* ac = acc + (size_t)c * 3 * nl;
            double* ad = acc + (size_t)d * 3 * nl;
            double* na = cnt + (size_t)a * nl;
            double* nb = cnt + (size_t)b * nl;
            double* nc = cnt + (size_t)c * nl;
            double* nd = cnt + (size_t)d * nl;
            #pragma omp simd
            for (int l = l0; l < l1; ++l) {
                double bax = xv[l] - xa[l];
                double bay = xv[nl + l] - xa[nl + l];
                double baz = xv[2 * nl + l] - xa[2 * nl + l];
                double cax = xc[l] - xa[l];
                double cay = xc[nl + l] - xa[nl + l];
                double caz = xc[2 * nl + l] - xa[2 * nl + l];
                double dax = xd[l] - xa[l];
                double day = xd[nl + l] - xa[nl + l];
                double daz = xd[2 * nl + l] - xa[2 * nl + l];
                double gbx = (cay * daz - caz * day) / 6.0;
                double gby = (caz * dax - cax * daz) / 6.0;
                double gbz = (cax * day - cay * dax) / 6.0;
                double gcx = (day * baz - daz * bay) / 6.0;
                double gcy = (daz * bax - dax * baz) / 6.0;
                double gcz = (dax * bay - day * bax) / 6.0;
                double gdx = (bay * caz - baz * cay) / 6.0;
                double gdy = (baz * cax - bax * caz) / 6.0;
                double gdz = (bax * cay - bay * cax) / 6.0;
                double gax = -(gbx + gcx + gdx);
                double gay = -(gby + gcy + gdy);
                double gaz = -(gbz + gcz + gdz);
                double cval = (gdx * dax + gdy * day + gdz * daz) - rv;
                double denom = gax * gax + gay * gay + gaz * gaz
                             + gbx * gbx + gby * gby + gbz * gbz
                             + gcx * gcx + gcy * gcy + gcz * gcz
                             + gdx * gdx + gdy * gdy + gdz * gdz;
                double m = 0.5 + copysign(0.5, denom - TS_EPS_GRAD);
                double s = -m * kv * cval / (denom + (1.0 - m));
                aa[l] += s * gax;
                aa[nl + l] += s * gay;
                aa[2 * nl + l] += s * gaz;
                ab[l] += s * gbx;
                ab[nl + l] += s * gby;
                ab[2 * nl + l] += s * gbz;
                ac[l] += s * gcx;
                ac[nl + l] += s * gcy;
                ac[2 * nl + l] += s * gcz;
                ad[l] += s * gdx;
                ad[nl + l] += s * gdy;
                ad[2 * nl + l] += s * gdz;
                na[l] += m;
                nb[l] += m;
                nc[l] += m;
                nd[l] += m;
            }
        }
    }

    static void ts_lane_apply(double* restrict xb, double* restrict vb,
                              const double* restrict acc, const double* restrict cnt,
                              const double* restrict w, int n_vert, int nl,
                              int l0, int l1, double h, double damp) {
        for (int i = 0; i < n_vert; ++i) {
            size_t r = (size_t)i * 3 * nl;
            if (w[i] > 0.0) {
                #pragma omp simd
                for (int l = l0; l < l1; ++l) {
                    double n = cnt[(size_t)i * nl + l];
                    double m = 0.5 + copysign(0.5, n - 0.5);
                    double inv = m / (n + (1.0 - m));
                    double d0 = acc[r + l] * inv;
                    double d1 = acc[r + nl + l] * inv;
                    double d2 = acc[r + 2 * nl + l] * inv;
                    xb[r + l] += d0;
                    vb[r + l] += d0 / h;
                    xb[r + nl + l] += d1;
                    vb[r + nl + l] += d1 / h;
                    xb[r + 2 * nl + l] += d2;
                    vb[r + 2 * nl + l] += d2 / h;
                }
            }
            if (damp != 1.0) {
                for (int l = l0; l < l1; ++l) {
                    vb[r + l] *= damp;
                    vb[r + nl + l] *= damp;
                    vb[r + 2 * nl + l] *= damp;
                }
            }
        }
    }
    """
    void ts_lane_predict(double* xb, double* vb, const double* w, int n_vert, int nl,
                         int l0, int l1, double gx, double gy, double gz, double h) nogil
    void ts_lane_clear(double* acc, double* cnt, int n_vert, int nl, int l0, int l1) nogil
    void ts_lane_edges(const double* xb, double* acc, double* cnt, const double* w,
                       const int* edges, const double* rest_len, double ks,
                       int n_edge, int nl, int l0, int l1) nogil
    void ts_lane_tets(const double* xb, double* acc, double* cnt, const int* tets,
                      const double* rest_vol, double kv, int n_tet, int nl,
                      int l0, int l1) nogil
    void ts_lane_apply(double* xb, double* vb, const double* acc, const double* cnt,
                       const double* w, int n_vert, int nl, int l0, int l1,
                       double h, double damp) nogil


cdef void _lane_substeps(double* xb, double* vb, const double* w,
                         int n_vert, int nl, int l0, int l1,
                         const int* edges, const double* rest_len, double ks, int n_edge,
                         const int* tets, const double* rest_vol, double kv, int n_tet,
                         const int* att_vertex, const int* att_faces,
                         const uint8_t* att_is_face, const double* att_anchor,
                         const double* att_rest, const double* att_k, int n_att,
                         const int64_t* grasp_vertex, const double* drag_points,
                         double gx, double gy, double gz,
                         double h, int substeps, double damp,
                         double* acc, double* cnt) noexcept nogil:
    cdef int s, t, l, f0, f1, f2, vtx
    cdef int64_t gv
    cdef double wa, wc, wv, wsum, rl
    cdef double dx, dy, dz, dist, m, scale, ca, cb
    cdef double cx, cy, cz
    cdef size_t ra, rb, rc, rv0

    for s in range(substeps):
        ts_lane_predict(xb, vb, w, n_vert, nl, l0, l1, gx, gy, gz, h)
        ts_lane_clear(acc, cnt, n_vert, nl, l0, l1)
        ts_lane_edges(xb, acc, cnt, w, edges, rest_len, ks, n_edge, nl, l0, l1)

        # grasp constraints: one optional drag per lane, full pull on the vertex
        for l in range(l0, l1):
            gv = grasp_vertex[l]
            if gv < 0:
                continue
            ra = (<size_t>gv * 3) * nl
            dx = drag_points[3 * l] - xb[ra + l]
            dy = drag_points[3 * l + 1] - xb[ra + nl + l]
            dz = drag_points[3 * l + 2] - xb[ra + 2 * nl + l]
            dist = sqrt(dx * dx + dy * dy + dz * dz)
            if dist <= EPS_LEN:
                continue
            acc[ra + l] += dx
            acc[ra + nl + l] += dy
            acc[ra + 2 * nl + l] += dz
            cnt[<size_t>gv * nl + l] += 1.0

        # attachments: vertex vs face centroid or static anchor
        for t in range(n_att):
            vtx = att_vertex[t]
            f0 = att_faces[3 * t]
            f1 = att_faces[3 * t + 1]
            f2 = att_faces[3 * t + 2]
            wv = w[vtx]
            wc = (w[f0] + w[f1] + w[f2]) / 3.0 if att_is_face[t] else 0.0
            wsum = wv + wc
            if wsum <= 0.0:
                continue
            rl = att_rest[t]
            rv0 = (<size_t>vtx * 3) * nl
            ra = (<size_t>f0 * 3) * nl
            rb = (<size_t>f1 * 3) * nl
            rc = (<size_t>f2 * 3) * nl
            for l in range(l0, l1):
                if att_is_face[t]:
                    cx = (xb[ra + l] + xb[rb + l] + xb[rc + l]) / 3.0
                    cy = (xb[ra + nl + l] + xb[rb + nl + l] + xb[rc + nl + l]) / 3.0
                    cz = (xb[ra + 2 * nl + l] + xb[rb + 2 * nl + l] + xb[rc + 2 * nl + l]) / 3.0
                else:
                    cx = att_anchor[3 * t]
                    cy = att_anchor[3 * t + 1]
                    cz = att_anchor[3 * t + 2]
                dx = xb[rv0 + l] - cx
                dy = xb[rv0 + nl + l] - cy
                dz = xb[rv0 + 2 * nl + l] - cz
                dist = sqrt(dx * dx + dy * dy + dz * dz)
                m = 1.0 if dist > EPS_LEN else 0.0
                scale = m * att_k[t] * (dist - rl) / (dist * wsum + (1.0 - m))
                ca = -wv * scale
                acc[rv0 + l] += ca * dx
                acc[rv0 + nl + l] += ca * dy
                acc[rv0 + 2 * nl + l] += ca * dz
                cnt[<size_t>vtx * nl + l] += m
                if att_is_face[t]:
                    cb = wc * scale / 3.0
                    acc[ra + l] += cb * dx
                    acc[ra + nl + l] += cb * dy
                    acc[ra + 2 * nl + l] += cb * dz
                    acc[rb + l] += cb * dx
                    acc[rb + nl + l] += cb * dy
                    acc[rb + 2 * nl + l] += cb * dz
                    acc[rc + l] += cb * dx
                    acc[rc + nl + l] += cb * dy
                    acc[rc + 2 * nl + l] += cb * dz
                    cnt[<size_t>f0 * nl + l] += m
                    cnt[<size_t>f1 * nl + l] += m
                    cnt[<size_t>f2 * nl + l] += m

        ts_lane_tets(xb, acc, cnt, tets, rest_vol, kv, n_tet, nl, l0, l1)
        ts_lane_apply(xb, vb, acc, cnt, w, n_vert, nl, l0, l1, h, damp)


cdef void _copy_to_lanes(const double* src, double* dst, int n_env, int n_vert) noexcept nogil:
    # (env, vert, comp) -> (vert, comp, env)
    cdef int e, i, c
    for e in range(n_env):
        for i in range(n_vert):
            for c in range(3):
                dst[(<size_t>i * 3 + c) * n_env + e] = src[(<size_t>e * n_vert + i) * 3 + c]


cdef void _copy_from_lanes(const double* src, double* dst, int n_env, int n_vert) noexcept nogil:
    cdef int e, i, c
    for e in range(n_env):
        for i in range(n_vert):
            for c in range(3):
                dst[(<size_t>e * n_vert + i) * 3 + c] = src[(<size_t>i * 3 + c) * n_env + e]


# --------------------------------------------------------------------------
# per-constraint scalar projections: parallel (constraint-split) mode
# --------------------------------------------------------------------------

cdef inline void _project_edges(const double* x, const double* w,
                                const int* edges, const double* rest_len,
                                double ks, int lo, int hi,
                                double* acc, int64_t* cnt) noexcept nogil:
    cdef int e, a, b
    cdef double dx, dy, dz, dist, wa, wb, wsum, scale, ca, cb
    for e in range(lo, hi):
        a = edges[2 * e]
        b = edges[2 * e + 1]
        dx = x[3 * a] - x[3 * b]
        dy = x[3 * a + 1] - x[3 * b + 1]
        dz = x[3 * a + 2] - x[3 * b + 2]
        dist = sqrt(dx * dx + dy * dy + dz * dz)
        wa = w[a]
        wb = w[b]
        wsum = wa + wb
        if dist <= EPS_LEN or wsum <= 0.0:
            continue
        scale = ks * (dist - rest_len[e]) / (dist * wsum)
        ca = -wa * scale
        cb = wb * scale
        acc[3 * a] += ca * dx
        acc[3 * a + 1] += ca * dy
        acc[3 * a + 2] += ca * dz
        acc[3 * b] += cb * dx
        acc[3 * b + 1] += cb * dy
        acc[3 * b + 2] += cb * dz
        cnt[a] += 1
        cnt[b] += 1


cdef inline void _project_grasp(const double* x, const double* w,
                                int64_t gv, const double* drag,
                                double* acc, int64_t* cnt) noexcept nogil:
    cdef double dx, dy, dz, dist
    if gv < 0:
        return
    dx = drag[0] - x[3 * gv]
    dy = drag[1] - x[3 * gv + 1]
    dz = drag[2] - x[3 * gv + 2]
    dist = sqrt(dx * dx + dy * dy + dz * dz)
    if dist <= EPS_LEN:
        return
    acc[3 * gv] += dx
    acc[3 * gv + 1] += dy
    acc[3 * gv + 2] += dz
    cnt[gv] += 1


cdef inline void _project_attachments(const double* x, const double* w,
                                      const int* att_vertex, const int* att_faces,
                                      const uint8_t* att_is_face, const double* att_anchor,
                                      const double* att_rest, const double* att_k,
                                      int lo, int hi,
                                      double* acc, int64_t* cnt) noexcept nogil:
    cdef int i, vtx, f0, f1, f2
    cdef double cx, cy, cz, wc, wv, wsum, dx, dy, dz, dist, scale, cv, cc
    for i in range(lo, hi):
        vtx = att_vertex[i]
        f0 = att_faces[3 * i]
        f1 = att_faces[3 * i + 1]
        f2 = att_faces[3 * i + 2]
        if att_is_face[i]:
            cx = (x[3 * f0] + x[3 * f1] + x[3 * f2]) / 3.0
            cy = (x[3 * f0 + 1] + x[3 * f1 + 1] + x[3 * f2 + 1]) / 3.0
            cz = (x[3 * f0 + 2] + x[3 * f1 + 2] + x[3 * f2 + 2]) / 3.0
            wc = (w[f0] + w[f1] + w[f2]) / 3.0
        else:
            cx = att_anchor[3 * i]
            cy = att_anchor[3 * i + 1]
            cz = att_anchor[3 * i + 2]
            wc = 0.0
        wv = w[vtx]
        wsum = wv + wc
        dx = x[3 * vtx] - cx
        dy = x[3 * vtx + 1] - cy
        dz = x[3 * vtx + 2] - cz
        dist = sqrt(dx * dx + dy * dy + dz * dz)
        if dist <= EPS_LEN or wsum <= 0.0:
            continue
        scale = att_k[i] * (dist - att_rest[i]) / (dist * wsum)
        cv = -wv * scale
        acc[3 * vtx] += cv * dx
        acc[3 * vtx + 1] += cv * dy
        acc[3 * vtx + 2] += cv * dz
        cnt[vtx] += 1
        if att_is_face[i]:
            cc = wc * scale / 3.0
            acc[3 * f0] += cc * dx
            acc[3 * f0 + 1] += cc * dy
            acc[3 * f0 + 2] += cc * dz
            acc[3 * f1] += cc * dx
            acc[3 * f1 + 1] += cc * dy
            acc[3 * f1 + 2] += cc * dz
            acc[3 * f2] += cc * dx
            acc[3 * f2 + 1] += cc * dy
            acc[3 * f2 + 2] += cc * dz
            cnt[f0] += 1
            cnt[f1] += 1
            cnt[f2] += 1


cdef inline void _project_tets(const double* x, const int* tets,
                               const double* rest_vol, double kv,
                               int lo, int hi,
                               double* acc, int64_t* cnt) noexcept nogil:
    cdef int t, a, b, c, d
    cdef double bax, bay, baz, cax, cay, caz, dax, day, daz
    cdef double gbx, gby, gbz, gcx, gcy, gcz, gdx, gdy, gdz, gax, gay, gaz
    cdef double cval, denom, s
    for t in range(lo, hi):
        a = tets[4 * t]
        b = tets[4 * t + 1]
        c = tets[4 * t + 2]
        d = tets[4 * t + 3]
        bax = x[3 * b] - x[3 * a]
        bay = x[3 * b + 1] - x[3 * a + 1]
        baz = x[3 * b + 2] - x[3 * a + 2]
        cax = x[3 * c] - x[3 * a]
        cay = x[3 * c + 1] - x[3 * a + 1]
        caz = x[3 * c + 2] - x[3 * a + 2]
        dax = x[3 * d] - x[3 * a]
        day = x[3 * d + 1] - x[3 * a + 1]
        daz = x[3 * d + 2] - x[3 * a + 2]
        gbx = (cay * daz - caz * day) / 6.0
        gby = (caz * dax - cax * daz) / 6.0
        gbz = (cax * day - cay * dax) / 6.0
        gcx = (day * baz - daz * bay) / 6.0
        gcy = (daz * bax - dax * baz) / 6.0
        gcz = (dax * bay - day * bax) / 6.0
        gdx = (bay * caz - baz * cay) / 6.0
        gdy = (baz * cax - bax * caz) / 6.0
        gdz = (bax * cay - bay * cax) / 6.0
        gax = -(gbx + gcx + gdx)
        gay = -(gby + gcy + gdy)
        gaz = -(gbz + gcz + gdz)
        cval = (gdx * dax + gdy * day + gdz * daz) - rest_vol[t]
        denom = (gax * gax + gay * gay + gaz * gaz
                 + gbx * gbx + gby * gby + gbz * gbz
                 + gcx * gcx + gcy * gcy + gcz * gcz
                 + gdx * gdx + gdy * gdy + gdz * gdz)
        if denom <= EPS_GRAD:
            continue
        s = -kv * cval / denom
        acc[3 * a] += s * gax
        acc[3 * a + 1] += s * gay
        acc[3 * a + 2] += s * gaz
        acc[3 * b] += s * gbx
        acc[3 * b + 1] += s * gby
        acc[3 * b + 2] += s * gbz
        acc[3 * c] += s * gcx
        acc[3 * c + 1] += s * gcy
        acc[3 * c + 2] += s * gcz
        acc[3 * d] += s * gdx
        acc[3 * d + 1] += s * gdy
        acc[3 * d + 2] += s * gdz
        cnt[a] += 1
        cnt[b] += 1
        cnt[c] += 1
        cnt[d] += 1


cdef inline void _predict(double* x, double* v, const double* w, int n_vert,
                          double gx, double gy, double gz, double h) noexcept nogil:
    cdef int i
    for i in range(n_vert):
        if w[i] > 0.0:
            v[3 * i] += h * gx
            v[3 * i + 1] += h * gy
            v[3 * i + 2] += h * gz
        else:
            v[3 * i] = 0.0
            v[3 * i + 1] = 0.0
            v[3 * i + 2] = 0.0
        x[3 * i] += h * v[3 * i]
        x[3 * i + 1] += h * v[3 * i + 1]
        x[3 * i + 2] += h * v[3 * i + 2]


cdef inline void _apply_and_update(double* x, double* v, const double* w,
                                   const double* acc, const int64_t* cnt,
                                   int n_vert, double h, double damp) noexcept nogil:
    cdef int i, j
    cdef double inv_n, delta
    for i in range(n_vert):
        if cnt[i] > 0 and w[i] > 0.0:
            inv_n = 1.0 / <double>cnt[i]
            delta = acc[3 * i] * inv_n
            x[3 * i] += delta
            v[3 * i] += delta / h
            delta = acc[3 * i + 1] * inv_n
            x[3 * i + 1] += delta
            v[3 * i + 1] += delta / h
            delta = acc[3 * i + 2] * inv_n
            x[3 * i + 2] += delta
            v[3 * i + 2] += delta / h
    if damp != 1.0:
        for j in range(3 * n_vert):
            v[j] *= damp


def run_substeps(double[:, :, ::1] x, double[:, :, ::1] v, double[::1] w,
                 int[:, ::1] edges, double[::1] rest_len, double ks,
                 int[:, ::1] tets, double[::1] rest_vol, double kv,
                 int[::1] att_vertex, int[:, ::1] att_faces, uint8_t[::1] att_is_face,
                 double[:, ::1] att_anchor, double[::1] att_rest, double[::1] att_k,
                 int64_t[::1] grasp_vertex, double[:, ::1] drag_points,
                 double[::1] g, double h, int substeps, double damping,
                 double[:, :, ::1] acc, int64_t[:, ::1] cnt,
                 int threads, bint parallel_constraints, scratch=None):
    cdef int n_env = x.shape[0]
    cdef int n_vert = x.shape[1]
    cdef int n_edge = edges.shape[0]
    cdef int n_tet = tets.shape[0]
    cdef int n_att = att_vertex.shape[0]
    cdef double gx = g[0], gy = g[1], gz = g[2]
    cdef double damp = 1.0 if damping == 0.0 else max(0.0, 1.0 - damping * h)
    cdef const int* edges_p = &edges[0, 0] if n_edge else NULL
    cdef const double* rl_p = &rest_len[0] if n_edge else NULL
    cdef const int* tets_p = &tets[0, 0] if n_tet else NULL
    cdef const double* rv_p = &rest_vol[0] if n_tet else NULL
    cdef const int* av_p = &att_vertex[0] if n_att else NULL
    cdef const int* af_p = &att_faces[0, 0] if n_att else NULL
    cdef const uint8_t* aif_p = &att_is_face[0] if n_att else NULL
    cdef const double* aa_p = &att_anchor[0, 0] if n_att else NULL
    cdef const double* ar_p = &att_rest[0] if n_att else NULL
    cdef const double* ak_p = &att_k[0] if n_att else NULL
    cdef const double* w_p = &w[0]
    cdef int e, s, i, j, tid, nth
    cdef double[:, :, ::1] xb_mv
    cdef double[:, :, ::1] vb_mv
    cdef double[:, :, ::1] accb_mv
    cdef double[:, ::1] cntb_mv

    if threads < 1:
        threads = 1
    if n_env == 0 or n_vert == 0:
        return None

    if not parallel_constraints:
        if scratch is None:
            scratch = make_scratch(n_env, n_vert)
        xb_mv = scratch["xb"]
        vb_mv = scratch["vb"]
        accb_mv = scratch["accb"]
        cntb_mv = scratch["cntb"]
        _run_lanes(x, v, &xb_mv[0, 0, 0], &vb_mv[0, 0, 0],
                   &accb_mv[0, 0, 0], &cntb_mv[0, 0],
                   w_p, n_env, n_vert,
                   edges_p, rl_p, ks, n_edge, tets_p, rv_p, kv, n_tet,
                   av_p, af_p, aif_p, aa_p, ar_p, ak_p, n_att,
                   &grasp_vertex[0], &drag_points[0, 0],
                   gx, gy, gz, h, substeps, damp, threads)
        return None

    # constraint-parallel contract: per-thread accumulators merged in thread order
    acc_buf = np.zeros((threads, n_vert, 3))
    cnt_buf = np.zeros((threads, n_vert), dtype=np.int64)
    cdef double[:, :, ::1] acc_t = acc_buf
    cdef int64_t[:, ::1] cnt_t = cnt_buf
    cdef double* xp
    cdef double* vp
    cdef double* acc_e
    cdef double* merge_p
    cdef int64_t* cnt_e

    for e in range(n_env):
        xp = &x[e, 0, 0]
        vp = &v[e, 0, 0]
        acc_e = &acc[e, 0, 0]
        cnt_e = &cnt[e, 0]
        with nogil:
            for s in range(substeps):
                _predict(xp, vp, w_p, n_vert, gx, gy, gz, h)
                memset(acc_e, 0, 3 * n_vert * sizeof(double))
                memset(cnt_e, 0, n_vert * sizeof(int64_t))
                with parallel(num_threads=threads):
                    tid = threadid()
                    nth = openmp.omp_get_num_threads()
                    memset(&acc_t[tid, 0, 0], 0, 3 * n_vert * sizeof(double))
                    memset(&cnt_t[tid, 0], 0, n_vert * sizeof(int64_t))
                    _project_edges(xp, w_p, edges_p, rl_p, ks,
                                   tid * n_edge // nth, (tid + 1) * n_edge // nth,
                                   &acc_t[tid, 0, 0], &cnt_t[tid, 0])
                    _project_attachments(xp, w_p, av_p, af_p, aif_p, aa_p, ar_p, ak_p,
                                         tid * n_att // nth, (tid + 1) * n_att // nth,
                                         &acc_t[tid, 0, 0], &cnt_t[tid, 0])
                    _project_tets(xp, tets_p, rv_p, kv,
                                  tid * n_tet // nth, (tid + 1) * n_tet // nth,
                                  &acc_t[tid, 0, 0], &cnt_t[tid, 0])
                _project_grasp(xp, w_p, grasp_vertex[e], &drag_points[e, 0], acc_e, cnt_e)
                for tid in range(threads):
                    merge_p = &acc_t[tid, 0, 0]
                    for j in range(3 * n_vert):
                        acc_e[j] += merge_p[j]
                    for i in range(n_vert):
                        cnt_e[i] += cnt_t[tid, i]
                _apply_and_update(xp, vp, w_p, acc_e, cnt_e, n_vert, h, damp)
    return None


cdef void _run_lanes(double[:, :, ::1] x, double[:, :, ::1] v,
                     double* xb, double* vb, double* accb, double* cntb,
                     const double* w_p, int n_env, int n_vert,
                     const int* edges_p, const double* rl_p, double ks, int n_edge,
                     const int* tets_p, const double* rv_p, double kv, int n_tet,
                     const int* av_p, const int* af_p, const uint8_t* aif_p,
                     const double* aa_p, const double* ar_p, const double* ak_p,
                     int n_att,
                     const int64_t* gv_p, const double* drag_p,
                     double gx, double gy, double gz,
                     double h, int substeps, double damp, int threads):
    # lane chunks split at multiples of 8 so threads never share a cache line
    cdef int lanes[17]
    cdef int nchunks = 0
    cdef int chunk, t, pos
    if n_env == 0 or n_vert == 0:
        return
    chunk = (n_env + threads - 1) // threads
    chunk = ((chunk + 7) // 8) * 8
    pos = 0
    lanes[0] = 0
    while pos < n_env:
        pos = min(pos + chunk, n_env)
        nchunks += 1
        lanes[nchunks] = pos
        if nchunks >= 16:
            lanes[nchunks] = n_env
            break

    with nogil:
        _copy_to_lanes(&x[0, 0, 0], xb, n_env, n_vert)
        _copy_to_lanes(&v[0, 0, 0], vb, n_env, n_vert)
    if nchunks == 1:
        with nogil:
            _lane_substeps(xb, vb, w_p, n_vert, n_env, 0, n_env,
                           edges_p, rl_p, ks, n_edge, tets_p, rv_p, kv, n_tet,
                           av_p, af_p, aif_p, aa_p, ar_p, ak_p, n_att,
                           gv_p, drag_p, gx, gy, gz, h, substeps, damp,
                           accb, cntb)
    else:
        for t in prange(nchunks, nogil=True, num_threads=nchunks, schedule="static"):
            _lane_substeps(xb, vb, w_p, n_vert, n_env, lanes[t], lanes[t + 1],
                           edges_p, rl_p, ks, n_edge, tets_p, rv_p, kv, n_tet,
                           av_p, af_p, aif_p, aa_p, ar_p, ak_p, n_att,
                           gv_p, drag_p, gx, gy, gz, h, substeps, damp,
                           accb, cntb)
    with nogil:
        _copy_from_lanes(xb, &x[0, 0, 0], n_env, n_vert)
        _copy_from_lanes(vb, &v[0, 0, 0], n_env, n_vert)


# --------------------------------------------------------------------------
# capsule SDF contact detection
# --------------------------------------------------------------------------

cdef inline double _cap_sd(double px, double py, double pz,
                           const double* p0, const double* seg, double dd,
                           double radius) noexcept nogil:
    cdef double t, cx, cy, cz, dx, dy, dz
    t = ((px - p0[0]) * seg[0] + (py - p0[1]) * seg[1] + (pz - p0[2]) * seg[2]) / dd
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    cx = p0[0] + t * seg[0]
    cy = p0[1] + t * seg[1]
    cz = p0[2] + t * seg[2]
    dx = px - cx
    dy = py - cy
    dz = pz - cz
    return sqrt(dx * dx + dy * dy + dz * dz) - radius


cdef inline double _cap_sd_grad(double px, double py, double pz,
                                const double* p0, const double* seg, double dd,
                                double radius, const double* fallback,
                                double* grad) noexcept nogil:
    cdef double t, cx, cy, cz, dx, dy, dz, norm
    t = ((px - p0[0]) * seg[0] + (py - p0[1]) * seg[1] + (pz - p0[2]) * seg[2]) / dd
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    cx = p0[0] + t * seg[0]
    cy = p0[1] + t * seg[1]
    cz = p0[2] + t * seg[2]
    dx = px - cx
    dy = py - cy
    dz = pz - cz
    norm = sqrt(dx * dx + dy * dy + dz * dz)
    if norm > EPS_LEN:
        grad[0] = dx / norm
        grad[1] = dy / norm
        grad[2] = dz / norm
    else:
        grad[0] = fallback[0]
        grad[1] = fallback[1]
        grad[2] = fallback[2]
    return norm - radius


cdef inline void _simplex3(double* b) noexcept nogil:
    cdef double u0 = b[0], u1 = b[1], u2 = b[2], tmp, theta
    if u0 < u1:
        tmp = u0; u0 = u1; u1 = tmp
    if u1 < u2:
        tmp = u1; u1 = u2; u2 = tmp
    if u0 < u1:
        tmp = u0; u0 = u1; u1 = tmp
    if u2 - (u0 + u1 + u2 - 1.0) / 3.0 > 0.0:
        theta = (u0 + u1 + u2 - 1.0) / 3.0
    elif u1 - (u0 + u1 - 1.0) / 2.0 > 0.0:
        theta = (u0 + u1 - 1.0) / 2.0
    else:
        theta = u0 - 1.0
    b[0] = max(b[0] - theta, 0.0)
    b[1] = max(b[1] - theta, 0.0)
    b[2] = max(b[2] - theta, 0.0)


def detect_contacts(double[:, ::1] pos, int[:, ::1] faces, double[:, ::1] caps,
                    int iters=8):
    """Same witness search as the numpy backend: AABB prune, best-vertex warm
    start, fixed-budget projected gradient descent, best-vertex fallback."""
    cdef int n_face = faces.shape[0]
    cdef int n_cap = caps.shape[0]
    cdef int max_rows = n_face * n_cap if n_face * n_cap > 0 else 1

    out_face_arr = np.empty(max_rows, dtype=np.int32)
    out_cap_arr = np.empty(max_rows, dtype=np.int32)
    out_depth_arr = np.empty(max_rows, dtype=np.float64)
    out_dir_arr = np.empty((max_rows, 3), dtype=np.float64)
    out_bary_arr = np.empty((max_rows, 3), dtype=np.float64)
    cdef int[::1] out_face = out_face_arr
    cdef int[::1] out_cap = out_cap_arr
    cdef double[::1] out_depth = out_depth_arr
    cdef double[:, ::1] out_dir = out_dir_arr
    cdef double[:, ::1] out_bary = out_bary_arr

    cdef int count = 0
    cdef int ci, f, it, k, vbest
    cdef double p0[3]
    cdef double seg[3]
    cdef double fb[3]
    cdef double lo[3]
    cdef double hi[3]
    cdef double tlo, thi
    cdef double dd, radius, fn
    cdef double vsd0, vsd1, vsd2, best_sd
    cdef double bary[3]
    cdef double ptx, pty, ptz, sd, mean_g, mag, step
    cdef double grad[3]
    cdef double gb[3]
    cdef const double* fp
    cdef int ia, ib, ic
    cdef bint skip

    if n_face == 0 or n_cap == 0:
        return (out_face_arr[:0], out_cap_arr[:0], out_depth_arr[:0],
                out_dir_arr[:0], out_bary_arr[:0])

    fp = &pos[0, 0]
    with nogil:
        for ci in range(n_cap):
            p0[0] = caps[ci, 0]
            p0[1] = caps[ci, 1]
            p0[2] = caps[ci, 2]
            seg[0] = caps[ci, 3] - p0[0]
            seg[1] = caps[ci, 4] - p0[1]
            seg[2] = caps[ci, 5] - p0[2]
            radius = caps[ci, 6]
            dd = seg[0] * seg[0] + seg[1] * seg[1] + seg[2] * seg[2]
            if dd <= 0.0:
                dd = 1.0
            # axis-perpendicular gradient fallback, as in the numpy backend:
            # cross(seg, ex), or cross(seg, ey) when seg is along ex
            fb[0] = 0.0
            fb[1] = seg[2]
            fb[2] = -seg[1]
            fn = fb[0] * fb[0] + fb[1] * fb[1] + fb[2] * fb[2]
            if fn < 1e-20:
                fb[0] = -seg[2]
                fb[1] = 0.0
                fb[2] = seg[0]
                fn = fb[0] * fb[0] + fb[1] * fb[1] + fb[2] * fb[2]
            fn = sqrt(fn)
            if fn > 0.0:
                fb[0] /= fn
                fb[1] /= fn
                fb[2] /= fn
            for k in range(3):
                lo[k] = min(caps[ci, k], caps[ci, 3 + k]) - radius
                hi[k] = max(caps[ci, k], caps[ci, 3 + k]) + radius

            for f in range(n_face):
                ia = faces[f, 0]
                ib = faces[f, 1]
                ic = faces[f, 2]
                skip = False
                for k in range(3):
                    tlo = min(min(fp[3 * ia + k], fp[3 * ib + k]), fp[3 * ic + k])
                    thi = max(max(fp[3 * ia + k], fp[3 * ib + k]), fp[3 * ic + k])
                    if thi < lo[k] or tlo > hi[k]:
                        skip = True
                        break
                if skip:
                    continue

                vsd0 = _cap_sd(fp[3 * ia], fp[3 * ia + 1], fp[3 * ia + 2], p0, seg, dd, radius)
                vsd1 = _cap_sd(fp[3 * ib], fp[3 * ib + 1], fp[3 * ib + 2], p0, seg, dd, radius)
                vsd2 = _cap_sd(fp[3 * ic], fp[3 * ic + 1], fp[3 * ic + 2], p0, seg, dd, radius)
                vbest = 0
                best_sd = vsd0
                if vsd1 < best_sd:
                    vbest = 1
                    best_sd = vsd1
                if vsd2 < best_sd:
                    vbest = 2
                    best_sd = vsd2

                bary[0] = 1.0 if vbest == 0 else 0.0
                bary[1] = 1.0 if vbest == 1 else 0.0
                bary[2] = 1.0 if vbest == 2 else 0.0
                step = 0.5
                for it in range(iters):
                    ptx = bary[0] * fp[3 * ia] + bary[1] * fp[3 * ib] + bary[2] * fp[3 * ic]
                    pty = bary[0] * fp[3 * ia + 1] + bary[1] * fp[3 * ib + 1] + bary[2] * fp[3 * ic + 1]
                    ptz = bary[0] * fp[3 * ia + 2] + bary[1] * fp[3 * ib + 2] + bary[2] * fp[3 * ic + 2]
                    _cap_sd_grad(ptx, pty, ptz, p0, seg, dd, radius, fb, grad)
                    gb[0] = grad[0] * fp[3 * ia] + grad[1] * fp[3 * ia + 1] + grad[2] * fp[3 * ia + 2]
                    gb[1] = grad[0] * fp[3 * ib] + grad[1] * fp[3 * ib + 1] + grad[2] * fp[3 * ib + 2]
                    gb[2] = grad[0] * fp[3 * ic] + grad[1] * fp[3 * ic + 1] + grad[2] * fp[3 * ic + 2]
                    mean_g = (gb[0] + gb[1] + gb[2]) / 3.0
                    gb[0] -= mean_g
                    gb[1] -= mean_g
                    gb[2] -= mean_g
                    mag = max(max(fabs(gb[0]), fabs(gb[1])), fabs(gb[2]))
                    bary[0] -= step * gb[0] / (mag + 1e-30)
                    bary[1] -= step * gb[1] / (mag + 1e-30)
                    bary[2] -= step * gb[2] / (mag + 1e-30)
                    _simplex3(bary)
                    step *= 0.7

                ptx = bary[0] * fp[3 * ia] + bary[1] * fp[3 * ib] + bary[2] * fp[3 * ic]
                pty = bary[0] * fp[3 * ia + 1] + bary[1] * fp[3 * ib + 1] + bary[2] * fp[3 * ic + 1]
                ptz = bary[0] * fp[3 * ia + 2] + bary[1] * fp[3 * ib + 2] + bary[2] * fp[3 * ic + 2]
                sd = _cap_sd_grad(ptx, pty, ptz, p0, seg, dd, radius, fb, grad)
                if sd > best_sd:
                    bary[0] = 1.0 if vbest == 0 else 0.0
                    bary[1] = 1.0 if vbest == 1 else 0.0
                    bary[2] = 1.0 if vbest == 2 else 0.0
                    ptx = bary[0] * fp[3 * ia] + bary[1] * fp[3 * ib] + bary[2] * fp[3 * ic]
                    pty = bary[0] * fp[3 * ia + 1] + bary[1] * fp[3 * ib + 1] + bary[2] * fp[3 * ic + 1]
                    ptz = bary[0] * fp[3 * ia + 2] + bary[1] * fp[3 * ib + 2] + bary[2] * fp[3 * ic + 2]
                    sd = _cap_sd_grad(ptx, pty, ptz, p0, seg, dd, radius, fb, grad)

                if sd < 0.0:
                    out_face[count] = f
                    out_cap[count] = ci
                    out_depth[count] = -sd
                    out_dir[count, 0] = grad[0]
                    out_dir[count, 1] = grad[1]
                    out_dir[count, 2] = grad[2]
                    out_bary[count, 0] = bary[0]
                    out_bary[count, 1] = bary[1]
                    out_bary[count, 2] = bary[2]
                    count += 1

    return (out_face_arr[:count].copy(), out_cap_arr[:count].copy(),
            out_depth_arr[:count].copy(), out_dir_arr[:count].copy(),
            out_bary_arr[:count].copy())
