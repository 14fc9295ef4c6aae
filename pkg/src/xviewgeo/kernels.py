"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public names at the bottom (``contrastive_terms``, ``bilinear_sample``, ...)
are bound to the numba version unless ``XVIEWGEO_NUMBA=0``.  Both
implementations are always importable so tests and the benchmark can compare
them directly.
"""

import numpy as np

from ._accel import njit, pick

# ---------------------------------------------------------------------------
# contrastive (InfoNCE) value and gradient
# ---------------------------------------------------------------------------


def contrastive_terms_numpy(anchors, candidates, mask, tau):
    """Per-anchor InfoNCE losses and gradients.

    ``mask[i, j]`` marks candidate ``j`` as a positive for anchor ``i``.  The
    loss for row ``i`` is ``logsumexp(l_i) - logsumexp(l_i[mask_i])`` with
    ``l = anchors @ candidates.T / tau``.

    Returns ``(losses, d_logits)`` where ``d_logits[i, j]`` is the derivative of
    ``losses[i]`` with respect to the logit ``l[i, j]``.
    """
    sims = anchors @ candidates.T
    logits = sims / tau
    row_max = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - row_max)
    total = e.sum(axis=1)
    pos = np.where(mask, e, 0.0).sum(axis=1)
    losses = np.log(total) - np.log(pos)
    d_logits = e / total[:, None] - np.where(mask, e, 0.0) / pos[:, None]
    return losses, d_logits, sims


@njit
def contrastive_terms_numba(anchors, candidates, mask, tau):
    n, d = anchors.shape
    m = candidates.shape[0]
    sims = np.empty((n, m))
    d_logits = np.empty((n, m))
    losses = np.empty(n)
    for i in range(n):
        row_max = -np.inf
        for j in range(m):
            acc = 0.0
            for k in range(d):
                acc += anchors[i, k] * candidates[j, k]
            sims[i, j] = acc
            if acc / tau > row_max:
                row_max = acc / tau
        total = 0.0
        pos = 0.0
        for j in range(m):
            e = np.exp(sims[i, j] / tau - row_max)
            d_logits[i, j] = e
            total += e
            if mask[i, j]:
                pos += e
        losses[i] = np.log(total) - np.log(pos)
        for j in range(m):
            e = d_logits[i, j]
            g = e / total
            if mask[i, j]:
                g -= e / pos
            d_logits[i, j] = g
    return losses, d_logits, sims


# ---------------------------------------------------------------------------
# soft-margin triplet over all in-batch negatives
# ---------------------------------------------------------------------------


def soft_triplet_terms_numpy(q, r):
    """Mean of ``log(1 + exp(d(q_i, r_i) - d(q_i, r_j)))`` over all ``j != i``.

    Returns ``(loss, grad_q, grad_r)`` with Euclidean distances.
    """
    n = q.shape[0]
    diff = q[:, None, :] - r[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    d_pos = np.diag(dist)
    margin = d_pos[:, None] - dist
    off = ~np.eye(n, dtype=bool)
    count = n * (n - 1)
    loss = np.logaddexp(0.0, margin)[off].sum() / count
    # sigmoid(margin) is d/dmargin of softplus
    w = np.where(off, 0.5 * (1.0 + np.tanh(0.5 * margin)), 0.0) / count
    unit = diff / dist[..., None]
    # d margin_ij / d q_i = unit_ii - unit_ij ; d/d r_i (pos) = -unit_ii ; d/d r_j = +unit_ij
    grad_q = w.sum(axis=1)[:, None] * unit[np.arange(n), np.arange(n)] - (w[..., None] * unit).sum(axis=1)
    grad_r = -w.sum(axis=1)[:, None] * unit[np.arange(n), np.arange(n)] + (w[..., None] * unit).sum(axis=0)
    return loss, grad_q, grad_r


@njit
def soft_triplet_terms_numba(q, r):
    n, d = q.shape
    dist = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                t = q[i, k] - r[j, k]
                acc += t * t
            dist[i, j] = np.sqrt(acc)
    count = n * (n - 1)
    loss = 0.0
    grad_q = np.zeros((n, d))
    grad_r = np.zeros((n, d))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            margin = dist[i, i] - dist[i, j]
            if margin > 0:
                loss += margin + np.log1p(np.exp(-margin))
            else:
                loss += np.log1p(np.exp(margin))
            w = 0.5 * (1.0 + np.tanh(0.5 * margin)) / count
            for k in range(d):
                up = (q[i, k] - r[i, k]) / dist[i, i]
                un = (q[i, k] - r[j, k]) / dist[i, j]
                grad_q[i, k] += w * (up - un)
                grad_r[i, k] -= w * up
                grad_r[j, k] += w * un
    return loss / count, grad_q, grad_r


# ---------------------------------------------------------------------------
# bilinear resampling (zoom, polar unwrap)
# ---------------------------------------------------------------------------


def bilinear_sample_numpy(img, rows, cols, fill):
    """Sample ``img`` (H, W, C) at fractional ``rows``/``cols`` (same shape).

    Points outside ``[0, H-1] x [0, W-1]`` take the value ``fill``.
    """
    h, w = img.shape[:2]
    inside = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(c).astype(np.int64), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[..., None]
    fc = (c - c0)[..., None]
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    out = top * (1 - fr) + bot * fr
    out[~inside] = fill
    return out


@njit
def bilinear_sample_numba(img, rows, cols, fill):
    h, w, ch = img.shape
    oh, ow = rows.shape
    out = np.empty((oh, ow, ch), dtype=img.dtype)
    for i in range(oh):
        for j in range(ow):
            r = rows[i, j]
            c = cols[i, j]
            if r < 0 or r > h - 1 or c < 0 or c > w - 1:
                for k in range(ch):
                    out[i, j, k] = fill
                continue
            r0 = min(int(np.floor(r)), max(h - 2, 0))
            c0 = min(int(np.floor(c)), max(w - 2, 0))
            r1 = min(r0 + 1, h - 1)
            c1 = min(c0 + 1, w - 1)
            fr = r - r0
            fc = c - c0
            for k in range(ch):
                top = img[r0, c0, k] * (1 - fc) + img[r0, c1, k] * fc
                bot = img[r1, c0, k] * (1 - fc) + img[r1, c1, k] * fc
                out[i, j, k] = top * (1 - fr) + bot * fr
    return out


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------


def truth_ranks_numpy(sims, truth, tie_key):
    """0-based rank of gallery item ``truth[q]`` in row ``q`` of ``sims``.

    Items with equal similarity are ordered by ascending ``tie_key``.
    """
    t = sims[np.arange(sims.shape[0]), truth][:, None]
    tk = tie_key[truth][:, None]
    ahead = (sims > t) | ((sims == t) & (tie_key[None, :] < tk))
    return ahead.sum(axis=1)


@njit
def truth_ranks_numba(sims, truth, tie_key):
    nq, ng = sims.shape
    out = np.empty(nq, dtype=np.int64)
    for q in range(nq):
        t = sims[q, truth[q]]
        tk = tie_key[truth[q]]
        cnt = 0
        for g in range(ng):
            s = sims[q, g]
            if s > t or (s == t and tie_key[g] < tk):
                cnt += 1
        out[q] = cnt
    return out


contrastive_terms = pick(contrastive_terms_numba, contrastive_terms_numpy)
soft_triplet_terms = pick(soft_triplet_terms_numba, soft_triplet_terms_numpy)
bilinear_sample = pick(bilinear_sample_numba, bilinear_sample_numpy)
truth_ranks = pick(truth_ranks_numba, truth_ranks_numpy)
