"""Hot numeric kernels with numba and pure-numpy implementations.

Every public kernel here dispatches to ``_nb_<name>`` when numba is active
and to ``_np_<name>`` otherwise (see :mod:`scaleloss._accel`). Both variants
are importable so tests can check that they agree.

Box arrays are float64 with shape ``(n, 4)`` holding ``(x, y, w, h)`` with
``(x, y)`` the top-left corner.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# d(extent)/d(pred offset), d(extent)/d(pred size) for each candidate of
# min(w_gt, w_pred, (gt_x - pred_x) + w_gt, (pred_x - gt_x) + w_pred)
_OVERLAP_D_START = np.array([0.0, 0.0, -1.0, 1.0])
_OVERLAP_D_SIZE = np.array([0.0, 1.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# paired IoU and its gradient w.r.t. the predicted box
# ---------------------------------------------------------------------------


@njit
def _nb_overlap_1d(a, wa, b, wb):
    best = wa
    d_b = 0.0
    d_wb = 0.0
    t = wb
    if t < best:
        best = t
        d_b = 0.0
        d_wb = 1.0
    t = (a - b) + wa
    if t < best:
        best = t
        d_b = -1.0
        d_wb = 0.0
    t = (b - a) + wb
    if t < best:
        best = t
        d_b = 1.0
        d_wb = 1.0
    if best <= 0.0:
        return 0.0, 0.0, 0.0
    return best, d_b, d_wb


@njit
def _nb_paired_iou_grad(gt, pred):
    n = gt.shape[0]
    iou = np.empty(n)
    grad = np.zeros((n, 4))
    for i in range(n):
        gx, gy, gw, gh = gt[i, 0], gt[i, 1], gt[i, 2], gt[i, 3]
        px, py, pw, ph = pred[i, 0], pred[i, 1], pred[i, 2], pred[i, 3]
        ix, dix_dx, dix_dw = _nb_overlap_1d(gx, gw, px, pw)
        iy, diy_dy, diy_dh = _nb_overlap_1d(gy, gh, py, ph)
        inter = ix * iy
        union = gw * gh + pw * ph - inter
        iou[i] = inter / union
        # IoU == 1 is the optimum: take the zero subgradient there
        if inter > 0.0 and inter < union:
            u2 = union * union
            s = union + inter
            grad[i, 0] = iy * dix_dx * s / u2
            grad[i, 1] = ix * diy_dy * s / u2
            grad[i, 2] = (iy * dix_dw * s - inter * ph) / u2
            grad[i, 3] = (ix * diy_dh * s - inter * pw) / u2
    return iou, grad


def _np_overlap_1d(a, wa, b, wb):
    cand = np.stack([wa, wb, (a - b) + wa, (b - a) + wb], axis=-1)
    k = np.argmin(cand, axis=-1)
    ext = np.take_along_axis(cand, k[:, None], axis=-1)[:, 0]
    live = ext > 0.0
    ext = np.where(live, ext, 0.0)
    d_b = np.where(live, _OVERLAP_D_START[k], 0.0)
    d_wb = np.where(live, _OVERLAP_D_SIZE[k], 0.0)
    return ext, d_b, d_wb


def _np_paired_iou_grad(gt, pred):
    gx, gy, gw, gh = gt.T
    px, py, pw, ph = pred.T
    ix, dix_dx, dix_dw = _np_overlap_1d(gx, gw, px, pw)
    iy, diy_dy, diy_dh = _np_overlap_1d(gy, gh, py, ph)
    inter = ix * iy
    union = gw * gh + pw * ph - inter
    iou = inter / union
    u2 = union * union
    s = union + inter
    grad = np.stack(
        [
            iy * dix_dx * s / u2,
            ix * diy_dy * s / u2,
            (iy * dix_dw * s - inter * ph) / u2,
            (ix * diy_dh * s - inter * pw) / u2,
        ],
        axis=-1,
    )
    grad[(inter <= 0.0) | (inter >= union)] = 0.0
    return iou, grad


def paired_iou_grad(gt, pred):
    """IoU of row-aligned box pairs and dIoU/d(pred x, y, w, h).

    Returns ``(iou, grad)`` with shapes ``(n,)`` and ``(n, 4)``. Where the
    pair does not overlap the gradient is 0 (IoU is locally constant); where
    the boxes coincide it is also 0, the subgradient at the maximum.
    """
    gt = np.ascontiguousarray(gt, dtype=np.float64).reshape(-1, 4)
    pred = np.ascontiguousarray(pred, dtype=np.float64).reshape(-1, 4)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    if USE_NUMBA:
        return _nb_paired_iou_grad(gt, pred)
    return _np_paired_iou_grad(gt, pred)


# ---------------------------------------------------------------------------
# all-pairs IoU matrix
# ---------------------------------------------------------------------------


@njit
def _nb_pairwise_iou(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        ax, ay, aw, ah = a[i, 0], a[i, 1], a[i, 2], a[i, 3]
        for j in range(m):
            bx, by, bw, bh = b[j, 0], b[j, 1], b[j, 2], b[j, 3]
            ix = min(aw, bw, (ax - bx) + aw, (bx - ax) + bw)
            if ix <= 0.0:
                continue
            iy = min(ah, bh, (ay - by) + ah, (by - ay) + bh)
            if iy <= 0.0:
                continue
            inter = ix * iy
            out[i, j] = inter / (aw * ah + bw * bh - inter)
    return out


def _np_pairwise_iou(a, b):
    ax, ay, aw, ah = (c[:, None] for c in a.T)
    bx, by, bw, bh = (c[None, :] for c in b.T)
    ix = np.minimum(np.minimum(aw, bw), np.minimum((ax - bx) + aw, (bx - ax) + bw))
    iy = np.minimum(np.minimum(ah, bh), np.minimum((ay - by) + ah, (by - ay) + bh))
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    return inter / (aw * ah + bw * bh - inter)


def pairwise_iou(a, b):
    """IoU matrix of shape ``(len(a), len(b))``."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    if USE_NUMBA:
        return _nb_pairwise_iou(a, b)
    return _np_pairwise_iou(a, b)


# ---------------------------------------------------------------------------
# greedy detection matching
# ---------------------------------------------------------------------------

TP = 1
FP = 0
IGNORED = -1


@njit
def _nb_greedy_match(ious, gt_ignore, det_ignore_if_unmatched, thresholds):
    n_det, n_gt = ious.shape
    n_thr = thresholds.shape[0]
    out = np.empty((n_thr, n_det), dtype=np.int8)
    for t in range(n_thr):
        thr = thresholds[t]
        taken = np.zeros(n_gt, dtype=np.bool_)
        for d in range(n_det):
            best = -1
            best_iou = 0.0
            # regular ground truths take precedence over ignored ones
            for ignored_pass in range(2):
                want_ignored = ignored_pass == 1
                for g in range(n_gt):
                    if taken[g] or gt_ignore[g] != want_ignored:
                        continue
                    v = ious[d, g]
                    if v >= thr and (best < 0 or v > best_iou):
                        best = g
                        best_iou = v
                if best >= 0:
                    break
            if best >= 0:
                taken[best] = True
                out[t, d] = -1 if gt_ignore[best] else 1
            elif det_ignore_if_unmatched[d]:
                out[t, d] = -1
            else:
                out[t, d] = 0
    return out


def _np_greedy_match(ious, gt_ignore, det_ignore_if_unmatched, thresholds):
    n_det, n_gt = ious.shape
    out = np.empty((thresholds.shape[0], n_det), dtype=np.int8)
    for t, thr in enumerate(thresholds):
        taken = np.zeros(n_gt, dtype=bool)
        for d in range(n_det):
            row = ious[d]
            ok = (~taken) & (row >= thr)
            best = -1
            for cand in (ok & ~gt_ignore, ok & gt_ignore):
                if cand.any():
                    best = int(np.argmax(np.where(cand, row, -1.0)))
                    break
            if best >= 0:
                taken[best] = True
                out[t, d] = IGNORED if gt_ignore[best] else TP
            else:
                out[t, d] = IGNORED if det_ignore_if_unmatched[d] else FP
    return out


def greedy_match(ious, gt_ignore, det_ignore_if_unmatched, thresholds):
    """Greedy score-ordered matching for one (image, category) cell.

    ``ious`` is ``(n_det, n_gt)`` with detections already in descending
    score order. Each detection takes the unmatched, non-ignored ground
    truth of highest IoU >= threshold, falling back to an ignored one.
    Returns an int8 ``(n_thr, n_det)`` array of ``TP``/``FP``/``IGNORED``.
    """
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    gt_ignore = np.ascontiguousarray(gt_ignore, dtype=np.bool_)
    det_ignore_if_unmatched = np.ascontiguousarray(det_ignore_if_unmatched, dtype=np.bool_)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    if USE_NUMBA:
        return _nb_greedy_match(ious, gt_ignore, det_ignore_if_unmatched, thresholds)
    return _np_greedy_match(ious, gt_ignore, det_ignore_if_unmatched, thresholds)


# ---------------------------------------------------------------------------
# multi-plane 2-D cross-correlation with zero "same" padding
# ---------------------------------------------------------------------------


@njit
def _nb_conv2d_same(planes, kernel):
    c, h, w = planes.shape
    k = kernel.shape[1]
    r = k // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for p in range(c):
                for u in range(k):
                    ii = i + u - r
                    if ii < 0 or ii >= h:
                        continue
                    for v in range(k):
                        jj = j + v - r
                        if jj < 0 or jj >= w:
                            continue
                        acc += kernel[p, u, v] * planes[p, ii, jj]
            out[i, j] = acc
    return out


def _np_conv2d_same(planes, kernel):
    k = kernel.shape[1]
    r = k // 2
    padded = np.pad(planes, ((0, 0), (r, r), (r, r)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    return np.einsum("chwuv,cuv->hw", windows, kernel)


def conv2d_same(planes, kernel):
    """Correlate ``(c, h, w)`` planes with a ``(c, k, k)`` kernel, odd ``k``."""
    planes = np.ascontiguousarray(planes, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if kernel.ndim != 3 or kernel.shape[0] != planes.shape[0] or kernel.shape[1] != kernel.shape[2]:
        raise ValueError(f"kernel shape {kernel.shape} does not fit planes {planes.shape}")
    if kernel.shape[1] % 2 == 0:
        raise ValueError("kernel size must be odd")
    if USE_NUMBA:
        return _nb_conv2d_same(planes, kernel)
    return _np_conv2d_same(planes, kernel)
