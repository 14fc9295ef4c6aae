"""Contrastive objectives with analytic gradients.

Everything here is plain float64 numpy.  The value-and-gradient functions are
what the training loop plugs into autograd, so the gradients checked against
finite differences in the tests are the ones used for learning.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels

UNIT_TOL = 1e-5


@dataclass
class LossConfig:
    """Temperatures (initial values; learned in log space) and loss weights."""

    tau_q: float = 0.07
    tau_r: float = 0.07
    tau_v: float = 0.07
    tau_c: float = 0.07
    w1: float = 0.5
    w2: float = 0.5
    w3: float = 0.25
    symmetric: bool = False

    def __post_init__(self):
        for name in ("tau_q", "tau_r", "tau_v", "tau_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("w1", "w2", "w3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    def to_dict(self):
        return asdict(self)


def _as_batch(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 2:
        raise ValueError(f"{name} must be an N x D matrix with N >= 1, D >= 2; got shape {x.shape}")
    return np.ascontiguousarray(x)


def check_unit_rows(x, name="embeddings", tol=UNIT_TOL):
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(f"{name}: row {bad[0]} has norm {norms[bad[0]]:.8g}, expected unit norm")


def positive_mask(pos, n_anchors, n_candidates):
    """Turn a positive assignment into a boolean ``(n_anchors, n_candidates)`` mask.

    ``pos`` may be ``None`` (row ``i`` pairs with candidate ``i``), an integer
    index per anchor, or a boolean mask (several positives per anchor allowed).
    """
    if pos is None:
        if n_anchors != n_candidates:
            raise ValueError("identity pairing needs as many candidates as anchors")
        return np.eye(n_anchors, dtype=np.bool_)
    pos = np.asarray(pos)
    if pos.dtype == np.bool_:
        if pos.shape != (n_anchors, n_candidates):
            raise ValueError(f"positive mask has shape {pos.shape}, expected {(n_anchors, n_candidates)}")
        if not pos.any(axis=1).all():
            raise ValueError(f"anchor {int(np.flatnonzero(~pos.any(axis=1))[0])} has no positive")
        return np.ascontiguousarray(pos)
    if pos.shape != (n_anchors,):
        raise ValueError(f"pos_index has shape {pos.shape}, expected ({n_anchors},)")
    if pos.min() < 0 or pos.max() >= n_candidates:
        raise ValueError(f"pos_index out of range [0, {n_candidates})")
    mask = np.zeros((n_anchors, n_candidates), dtype=np.bool_)
    mask[np.arange(n_anchors), pos.astype(np.int64)] = True
    return mask


def info_nce_value_and_grad(anchors, candidates, mask, tau):
    """Mean InfoNCE and its gradients w.r.t. anchors, candidates and ``tau``.

    No input validation; ``mask`` must already be a boolean matrix.
    """
    n = anchors.shape[0]
    losses, d_logits, sims = kernels.contrastive_terms(anchors, candidates, mask, float(tau))
    d_logits = d_logits / n
    g_anchors = d_logits @ candidates / tau
    g_candidates = d_logits.T @ anchors / tau
    g_tau = -float((d_logits * sims).sum()) / tau**2
    return float(losses.mean()), g_anchors, g_candidates, g_tau


def info_nce_symmetric_value_and_grad(anchors, candidates, mask, tau):
    a = info_nce_value_and_grad(anchors, candidates, mask, tau)
    b = info_nce_value_and_grad(candidates, anchors, np.ascontiguousarray(mask.T), tau)
    return (
        0.5 * (a[0] + b[0]),
        0.5 * (a[1] + b[2]),
        0.5 * (a[2] + b[1]),
        0.5 * (a[3] + b[3]),
    )


def info_nce(anchors, candidates, pos=None, tau=0.07, symmetric=False):
    r"""Mean over anchors of ``-log softmax(a . c / tau)[positive]``.

    With a boolean ``pos`` mask the numerator sums over all positives of the
    anchor.  With ``symmetric=True`` the roles of anchors and candidates are
    swapped as well and the two directions are averaged.
    """
    anchors = _as_batch(anchors, "anchors")
    candidates = _as_batch(candidates, "candidates")
    if anchors.shape[1] != candidates.shape[1]:
        raise ValueError(f"embedding sizes differ: {anchors.shape[1]} vs {candidates.shape[1]}")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    check_unit_rows(anchors, "anchors")
    check_unit_rows(candidates, "candidates")
    mask = positive_mask(pos, anchors.shape[0], candidates.shape[0])
    if symmetric:
        if mask.shape[0] != mask.shape[1]:
            raise ValueError("symmetric InfoNCE needs square pairings")
        return info_nce_symmetric_value_and_grad(anchors, candidates, mask, tau)[0]
    return info_nce_value_and_grad(anchors, candidates, mask, tau)[0]


def single_modal_ground_loss(q_star, q, tau_q, symmetric=False):
    """Transformed ground views against the batch of original ground views."""
    return info_nce(q_star, q, None, tau_q, symmetric)


def single_modal_aerial_loss(r_star, r, tau_r, symmetric=False):
    """Re-oriented aerial views against the batch of original aerial views."""
    return info_nce(r_star, r, None, tau_r, symmetric)


def vanilla_cross_loss(q, r, tau_v, symmetric=False):
    return info_nce(q, r, None, tau_v, symmetric)


def cross_modal_loss(q_star, r, tau_c, symmetric=False):
    return info_nce(q_star, r, None, tau_c, symmetric)


COMPONENTS = ("vanilla", "single_q", "single_r", "cross")


def total_loss(components, cfg):
    """``vanilla + w1 * single_q + w2 * single_r + w3 * cross``."""
    missing = [k for k in COMPONENTS if k not in components]
    if missing:
        raise KeyError(f"missing loss components: {missing}")
    return (
        components["vanilla"]
        + cfg.w1 * components["single_q"]
        + cfg.w2 * components["single_r"]
        + cfg.w3 * components["cross"]
    )


def soft_triplet_value_and_grad(q, r):
    return kernels.soft_triplet_terms(q, r)


def soft_triplet_loss(q, r):
    """Soft-margin triplet loss with every other in-batch reference as negative.

    Uses Euclidean distances; for unit vectors ``d = sqrt(2 - 2 cos)``.
    """
    q = _as_batch(q, "q")
    r = _as_batch(r, "r")
    if q.shape != r.shape:
        raise ValueError(f"paired batches must match, got {q.shape} and {r.shape}")
    if q.shape[0] < 2:
        raise ValueError("soft triplet loss needs at least two pairs (no negatives)")
    return float(soft_triplet_value_and_grad(q, r)[0])
