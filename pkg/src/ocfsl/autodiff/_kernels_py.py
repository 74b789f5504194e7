"""Numpy reference kernels; the compiled module mirrors these signatures."""
import numpy as np


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def slot_sqdist_fwd(h, protos, metric):
    diff = h[:, None, :] - protos
    sq = diff * diff
    if metric is not None:
        sq = sq * metric[:, None, :]
    return sq.sum(axis=-1)


def slot_sqdist_bwd(g, h, protos, metric):
    diff = h[:, None, :] - protos
    gd = 2.0 * g[..., None] * diff
    gm = None
    if metric is not None:
        gm = (g[..., None] * diff * diff).sum(axis=1)
        gd = gd * metric[:, None, :]
    return gd.sum(axis=1), -gd, gm


def _cos_parts(q, protos):
    qn = np.sqrt((q * q).sum(axis=-1))
    pn = np.sqrt((protos * protos).sum(axis=-1))
    valid = (qn[:, None] > 0) & (pn > 0)
    denom = np.where(valid, qn[:, None] * pn, 1.0)
    cos = np.where(valid, np.einsum("bd,bkd->bk", q, protos) / denom, -1.0)
    return qn, pn, valid, denom, cos


def slot_cosine_fwd(q, protos):
    return _cos_parts(q, protos)[4]


def slot_cosine_bwd(g, q, protos):
    qn, pn, valid, denom, cos = _cos_parts(q, protos)
    gv = np.where(valid, g, 0.0)
    qn_s = np.where(qn > 0, qn, 1.0)
    pn_s = np.where(pn > 0, pn, 1.0)
    a = gv / denom
    gq = np.einsum("bk,bkd->bd", a, protos) - (gv * cos).sum(axis=1)[:, None] * q / (qn_s * qn_s)[:, None]
    gp = a[..., None] * q[:, None, :] - (gv * cos / (pn_s * pn_s))[..., None] * protos
    return gq, gp


def proto_update_fwd(protos, h, w):
    return protos + w[..., None] * (h[:, None, :] - protos)


def proto_update_bwd(g, protos, h, w):
    wg = w[..., None]
    gp = g * (1.0 - wg)
    gh = (g * wg).sum(axis=1)
    gw = (g * (h[:, None, :] - protos)).sum(axis=-1)
    return gp, gh, gw


def lstm_gates_fwd(pre, c):
    hid = c.shape[1]
    i = _sigmoid(pre[:, :hid])
    f = _sigmoid(pre[:, hid:2 * hid])
    o = _sigmoid(pre[:, 2 * hid:3 * hid])
    gg = np.tanh(pre[:, 3 * hid:])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    return np.concatenate([h_new, c_new], axis=1), (i, f, o, gg, tc)


def lstm_gates_bwd(gh, gc, cache, c):
    i, f, o, gg, tc = cache
    dc = gc + gh * o * (1.0 - tc * tc)
    gpre = np.concatenate([
        dc * gg * i * (1.0 - i),
        dc * c * f * (1.0 - f),
        gh * tc * o * (1.0 - o),
        dc * i * (1.0 - gg * gg),
    ], axis=1)
    return gpre, dc * f
