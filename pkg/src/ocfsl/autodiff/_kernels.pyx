# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled float64 kernels; signatures mirror ``_kernels_py``.

Inputs that are not float64 are handed to the numpy reference versions.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

from . import _kernels_py as _ref

cnp.import_array()


def _f64(*arrays):
    for a in arrays:
        if a is not None and (a.dtype != np.float64):
            return False
    return True


cdef inline double _sig(double x) nogil:
    return 0.5 * (tanh(0.5 * x) + 1.0)


def slot_sqdist_fwd(h, protos, metric):
    if not _f64(h, protos, metric):
        return _ref.slot_sqdist_fwd(h, protos, metric)
    cdef const double[:, :] hv = np.ascontiguousarray(h)
    cdef const double[:, :, :] pv = np.ascontiguousarray(protos)
    cdef const double[:, :] mv
    cdef bint has_m = metric is not None
    if has_m:
        mv = np.ascontiguousarray(metric)
    cdef Py_ssize_t B = pv.shape[0], K = pv.shape[1], D = pv.shape[2]
    out = np.empty((B, K))
    cdef double[:, :] ov = out
    cdef Py_ssize_t b, k, d
    cdef double acc, diff
    with nogil:
        for b in range(B):
            for k in range(K):
                acc = 0.0
                for d in range(D):
                    diff = hv[b, d] - pv[b, k, d]
                    if has_m:
                        acc = acc + mv[b, d] * diff * diff
                    else:
                        acc = acc + diff * diff
                ov[b, k] = acc
    return out


def slot_sqdist_bwd(g, h, protos, metric):
    if not _f64(g, h, protos, metric):
        return _ref.slot_sqdist_bwd(g, h, protos, metric)
    cdef const double[:, :] gv = np.ascontiguousarray(g)
    cdef const double[:, :] hv = np.ascontiguousarray(h)
    cdef const double[:, :, :] pv = np.ascontiguousarray(protos)
    cdef const double[:, :] mv
    cdef bint has_m = metric is not None
    if has_m:
        mv = np.ascontiguousarray(metric)
    cdef Py_ssize_t B = pv.shape[0], K = pv.shape[1], D = pv.shape[2]
    gh = np.zeros((B, D))
    gp = np.empty((B, K, D))
    gm = np.zeros((B, D)) if has_m else None
    cdef double[:, :] ghv = gh
    cdef double[:, :, :] gpv = gp
    cdef double[:, :] gmv
    if has_m:
        gmv = gm
    cdef Py_ssize_t b, k, d
    cdef double diff, gd, gk
    with nogil:
        for b in range(B):
            for k in range(K):
                gk = gv[b, k]
                for d in range(D):
                    diff = hv[b, d] - pv[b, k, d]
                    gd = 2.0 * gk * diff
                    if has_m:
                        gmv[b, d] += gk * diff * diff
                        gd = gd * mv[b, d]
                    ghv[b, d] += gd
                    gpv[b, k, d] = -gd
    return gh, gp, gm


def slot_cosine_fwd(q, protos):
    if not _f64(q, protos):
        return _ref.slot_cosine_fwd(q, protos)
    cdef const double[:, :] qv = np.ascontiguousarray(q)
    cdef const double[:, :, :] pv = np.ascontiguousarray(protos)
    cdef Py_ssize_t B = pv.shape[0], K = pv.shape[1], D = pv.shape[2]
    out = np.empty((B, K))
    cdef double[:, :] ov = out
    cdef Py_ssize_t b, k, d
    cdef double qn, pn, dot
    with nogil:
        for b in range(B):
            qn = 0.0
            for d in range(D):
                qn = qn + qv[b, d] * qv[b, d]
            qn = sqrt(qn)
            for k in range(K):
                pn = 0.0
                dot = 0.0
                for d in range(D):
                    pn = pn + pv[b, k, d] * pv[b, k, d]
                    dot = dot + qv[b, d] * pv[b, k, d]
                pn = sqrt(pn)
                if qn > 0 and pn > 0:
                    ov[b, k] = dot / (qn * pn)
                else:
                    ov[b, k] = -1.0
    return out


def slot_cosine_bwd(g, q, protos):
    if not _f64(g, q, protos):
        return _ref.slot_cosine_bwd(g, q, protos)
    cdef const double[:, :] gv = np.ascontiguousarray(g)
    cdef const double[:, :] qv = np.ascontiguousarray(q)
    cdef const double[:, :, :] pv = np.ascontiguousarray(protos)
    cdef Py_ssize_t B = pv.shape[0], K = pv.shape[1], D = pv.shape[2]
    gq = np.zeros((B, D))
    gp = np.zeros((B, K, D))
    cdef double[:, :] gqv = gq
    cdef double[:, :, :] gpv = gp
    cdef Py_ssize_t b, k, d
    cdef double qn, pn, dot, cos, a, gk
    with nogil:
        for b in range(B):
            qn = 0.0
            for d in range(D):
                qn = qn + qv[b, d] * qv[b, d]
            qn = sqrt(qn)
            if qn == 0:
                continue
            for k in range(K):
                pn = 0.0
                dot = 0.0
                for d in range(D):
                    pn = pn + pv[b, k, d] * pv[b, k, d]
                    dot = dot + qv[b, d] * pv[b, k, d]
                pn = sqrt(pn)
                if pn == 0:
                    continue
                gk = gv[b, k]
                a = gk / (qn * pn)
                cos = dot / (qn * pn)
                for d in range(D):
                    gqv[b, d] += a * pv[b, k, d] - gk * cos * qv[b, d] / (qn * qn)
                    gpv[b, k, d] = a * qv[b, d] - gk * cos * pv[b, k, d] / (pn * pn)
    return gq, gp


def proto_update_fwd(protos, h, w):
    if not _f64(protos, h, w):
        return _ref.proto_update_fwd(protos, h, w)
    cdef const double[:, :, :] pv = np.ascontiguousarray(protos)
    cdef const double[:, :] hv = np.ascontiguousarray(h)
    cdef const double[:, :] wv = np.ascontiguousarray(w)
    cdef Py_ssize_t B = pv.shape[0], K = pv.shape[1], D = pv.shape[2]
    out = np.empty((B, K, D))
    cdef double[:, :, :] ov = out
    cdef Py_ssize_t b, k, d
    cdef double wk
    with nogil:
        for b in range(B):
            for k in range(K):
                wk = wv[b, k]
                for d in range(D):
                    ov[b, k, d] = pv[b, k, d] + wk * (hv[b, d] - pv[b, k, d])
    return out


def proto_update_bwd(g, protos, h, w):
    if not _f64(g, protos, h, w):
        return _ref.proto_update_bwd(g, protos, h, w)
    cdef const double[:, :, :] gv = np.ascontiguousarray(g)
    cdef const double[:, :, :] pv = np.ascontiguousarray(protos)
    cdef const double[:, :] hv = np.ascontiguousarray(h)
    cdef const double[:, :] wv = np.ascontiguousarray(w)
    cdef Py_ssize_t B = pv.shape[0], K = pv.shape[1], D = pv.shape[2]
    gp = np.empty((B, K, D))
    gh = np.zeros((B, D))
    gw = np.empty((B, K))
    cdef double[:, :, :] gpv = gp
    cdef double[:, :] ghv = gh
    cdef double[:, :] gwv = gw
    cdef Py_ssize_t b, k, d
    cdef double wk, acc, gx
    with nogil:
        for b in range(B):
            for k in range(K):
                wk = wv[b, k]
                acc = 0.0
                for d in range(D):
                    gx = gv[b, k, d]
                    gpv[b, k, d] = gx * (1.0 - wk)
                    ghv[b, d] += gx * wk
                    acc = acc + gx * (hv[b, d] - pv[b, k, d])
                gwv[b, k] = acc
    return gp, gh, gw


def lstm_gates_fwd(pre, c):
    if not _f64(pre, c):
        return _ref.lstm_gates_fwd(pre, c)
    # Transcendentals go through numpy's vectorized tanh (sigmoid(x) is
    # (tanh(x/2) + 1) / 2); scalar libm calls in the loop are several times slower.
    cdef Py_ssize_t B = c.shape[0], H = c.shape[1]
    scaled = np.asarray(pre, dtype=np.float64).copy()
    scaled[:, :3 * H] *= 0.5
    np.tanh(scaled, out=scaled)
    cdef const double[:, :] tv = scaled
    cdef const double[:, :] cv = np.ascontiguousarray(c)
    hc = np.empty((B, 2 * H))
    cache = np.empty((5, B, H))
    cdef double[:, :] hcv = hc
    cdef double[:, :, :] kv = cache
    cdef Py_ssize_t b, j
    cdef double i, f, o, gg
    with nogil:
        for b in range(B):
            for j in range(H):
                i = 0.5 * (tv[b, j] + 1.0)
                f = 0.5 * (tv[b, H + j] + 1.0)
                o = 0.5 * (tv[b, 2 * H + j] + 1.0)
                gg = tv[b, 3 * H + j]
                hcv[b, H + j] = f * cv[b, j] + i * gg
                kv[0, b, j] = i
                kv[1, b, j] = f
                kv[2, b, j] = o
                kv[3, b, j] = gg
    np.tanh(hc[:, H:], out=cache[4])
    with nogil:
        for b in range(B):
            for j in range(H):
                hcv[b, j] = kv[2, b, j] * kv[4, b, j]
    return hc, cache


def lstm_gates_bwd(gh, gc, cache, c):
    if isinstance(cache, tuple):
        return _ref.lstm_gates_bwd(gh, gc, cache, c)
    cdef const double[:, :] ghv = np.ascontiguousarray(gh, dtype=np.float64)
    cdef const double[:, :] gcv = np.ascontiguousarray(gc, dtype=np.float64)
    cdef const double[:, :, :] kv = cache
    cdef const double[:, :] cv = np.ascontiguousarray(c)
    cdef Py_ssize_t B = cv.shape[0], H = cv.shape[1]
    gpre = np.empty((B, 4 * H))
    gcp = np.empty((B, H))
    cdef double[:, :] gpv = gpre
    cdef double[:, :] gcpv = gcp
    cdef Py_ssize_t b, j
    cdef double i, f, o, gg, tc, dc, ghj
    with nogil:
        for b in range(B):
            for j in range(H):
                i = kv[0, b, j]
                f = kv[1, b, j]
                o = kv[2, b, j]
                gg = kv[3, b, j]
                tc = kv[4, b, j]
                ghj = ghv[b, j]
                dc = gcv[b, j] + ghj * o * (1.0 - tc * tc)
                gpv[b, j] = dc * gg * i * (1.0 - i)
                gpv[b, H + j] = dc * cv[b, j] * f * (1.0 - f)
                gpv[b, 2 * H + j] = ghj * tc * o * (1.0 - o)
                gpv[b, 3 * H + j] = dc * i * (1.0 - gg * gg)
                gcpv[b, j] = dc * f
    return gpre, gcp
