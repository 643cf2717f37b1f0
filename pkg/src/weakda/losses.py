"""Differentiable loss and pooling kernels for weak-label domain adaptation.

All kernels are pure numpy functions operating on single images. Grids use
channel-last layout: prediction maps A are (H', W', C) logits, feature grids
F are (H', W', D), upsampled per-pixel probability maps O are (H, W, C).
Weak labels y are binary vectors of length C.

Every differentiable kernel has a companion ``*_grad`` function returning the
analytic gradient; where the kernel sits mid-pipeline the gradient takes an
upstream cotangent (VJP convention). Probabilities entering a log are clamped
to [PROB_EPS, 1 - PROB_EPS], and the gradients are zeroed where the clamp is
active so they stay consistent with finite differences.
"""

from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights and knobs of the combined objective.

    lambda_c weights the weak-label classification loss, lambda_adv the
    per-category alignment loss, lambda_out the output-space alignment loss.
    k is the smooth-max pooling sharpness and T the pseudo-label threshold.
    """

    lambda_c: float = 0.0
    lambda_adv: float = 0.0
    lambda_out: float = 0.0
    k: float = 1.0
    T: float = 0.2

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_adv < 0 or self.lambda_out < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.k > 0:
            raise ValueError(f"pooling sharpness k must be > 0, got {self.k}")
        if not 0.0 <= self.T <= 1.0:
            raise ValueError(f"threshold T must lie in [0, 1], got {self.T}")


def _check_finite(x, name):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


def _check_prob(x, name):
    _check_finite(x, name)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError(f"{name} has entries outside [0, 1]")


def _clip_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def _unclipped_mask(p):
    # 1 where the epsilon guard is inactive, 0 where it clamps
    return ((p > PROB_EPS) & (p < 1.0 - PROB_EPS)).astype(p.dtype)


def sigmoid(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(float)
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))  # exp of -|x|, never overflows
    return np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))


# ---------------------------------------------------------------------------
# global pooling of predictions into per-category presence probabilities


def smooth_max_pool(A, k):
    """Smooth-max pooling of a (H', W', C) logit map into category probabilities.

    Returns p of shape (C,) where
        p_c = sigmoid( (1/k) * log( mean over pixels of exp(k * A[..., c]) ) )
    computed with a max shift so large logits cannot overflow. Larger k moves
    the inner value toward the spatial max, k -> 0 toward the spatial mean.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 3:
        raise ValueError(f"expected (H', W', C) prediction map, got shape {A.shape}")
    _check_finite(A, "prediction map")
    if not k > 0:
        raise ValueError(f"pooling sharpness k must be > 0, got {k}")
    inner = smooth_max_inner(A, k)
    return sigmoid(inner)


def smooth_max_inner(A, k):
    """The pre-sigmoid pooled value (1/k)*log-mean-exp(k*A), shape (C,)."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0] * A.shape[1]
    m = A.max(axis=(0, 1))
    z = np.exp(k * (A - m)).sum(axis=(0, 1))
    return m + (np.log(z) - np.log(n)) / k


def smooth_max_pool_grad(A, k, dp):
    """VJP of smooth_max_pool: cotangent dp (C,) -> gradient w.r.t. A.

    d p_c / d A[h,w,c] = p_c (1 - p_c) * softmax_hw(k * A[..., c])[h, w].
    """
    A = np.asarray(A, dtype=float)
    dp = np.asarray(dp, dtype=float)
    p = smooth_max_pool(A, k)
    m = A.max(axis=(0, 1), keepdims=True)
    e = np.exp(k * (A - m))
    w = e / e.sum(axis=(0, 1), keepdims=True)
    return w * (dp * p * (1.0 - p))


# ---------------------------------------------------------------------------
# weak-label classification loss


def weak_label_bce(p, y):
    """Multi-label binary cross-entropy between presence probabilities and a
    multi-hot weak label, summed over categories."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"probability/label length mismatch: {p.shape} vs {y.shape}")
    _check_prob(p, "category probabilities")
    pc = _clip_prob(p)
    return float(np.sum(-y * np.log(pc) - (1.0 - y) * np.log1p(-pc)))


def weak_label_bce_grad(p, y):
    """Gradient of weak_label_bce w.r.t. p, zero where the clamp is active."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    pc = _clip_prob(p)
    return (-y / pc + (1.0 - y) / (1.0 - pc)) * _unclipped_mask(p)


# ---------------------------------------------------------------------------
# attention pooling of features per category


def spatial_softmax(A):
    """Per-category softmax over the spatial grid.

    Returns S of shape (H', W', C) with S[..., c] positive and summing to 1
    over the H'xW' grid for every c.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 3:
        raise ValueError(f"expected (H', W', C) prediction map, got shape {A.shape}")
    _check_finite(A, "prediction map")
    m = A.max(axis=(0, 1), keepdims=True)
    e = np.exp(A - m)
    return e / e.sum(axis=(0, 1), keepdims=True)


def spatial_softmax_grad(A, dS):
    """VJP of spatial_softmax: cotangent dS -> gradient w.r.t. A."""
    S = spatial_softmax(A)
    inner = (dS * S).sum(axis=(0, 1), keepdims=True)
    return S * (dS - inner)


def category_pool(F, A):
    """Attention-pool a feature grid into one vector per category.

    F: (H', W', D) features, A: (H', W', C) logits. Returns (C, D) where row c
    is the spatial sum of F weighted by spatial_softmax(A)[..., c]. Each row is
    a convex combination of the feature vectors.
    """
    F = np.asarray(F, dtype=float)
    A = np.asarray(A, dtype=float)
    if F.ndim != 3 or A.ndim != 3 or F.shape[:2] != A.shape[:2]:
        raise ValueError(f"feature/prediction grids misaligned: {F.shape} vs {A.shape}")
    _check_finite(F, "feature grid")
    S = spatial_softmax(A)
    return np.einsum("hwc,hwd->cd", S, F)


def category_pool_grad(F, A, dfeats):
    """VJP of category_pool: cotangent dfeats (C, D) -> (dF, dA)."""
    F = np.asarray(F, dtype=float)
    A = np.asarray(A, dtype=float)
    dfeats = np.asarray(dfeats, dtype=float)
    S = spatial_softmax(A)
    dF = np.einsum("hwc,cd->hwd", S, dfeats)
    dS = np.einsum("cd,hwd->hwc", dfeats, F)
    dA = spatial_softmax_grad(A, dS)
    return dF, dA


# ---------------------------------------------------------------------------
# adversarial alignment losses (masked by category presence)


def discriminator_domain_loss(ds, dt, y_s, y_t):
    """Domain-classification loss for the per-category discriminator bank.

    ds, dt: length-C vectors of discriminator outputs D^c on source/target
    pooled features (probability of "source"). Categories absent from an image
    (y == 0) contribute exactly zero.
    """
    ds = np.asarray(ds, dtype=float)
    dt = np.asarray(dt, dtype=float)
    y_s = np.asarray(y_s, dtype=float)
    y_t = np.asarray(y_t, dtype=float)
    if not (ds.shape == dt.shape == y_s.shape == y_t.shape):
        raise ValueError("ds, dt, y_s, y_t must share one length")
    _check_prob(ds, "source discriminator outputs")
    _check_prob(dt, "target discriminator outputs")
    loss_s = np.where(y_s > 0, -np.log(_clip_prob(ds)), 0.0)
    loss_t = np.where(y_t > 0, -np.log1p(-_clip_prob(dt)), 0.0)
    return float(np.sum(y_s * loss_s + y_t * loss_t))


def discriminator_domain_loss_grad(ds, dt, y_s, y_t):
    """Gradients of discriminator_domain_loss w.r.t. (ds, dt)."""
    ds = np.asarray(ds, dtype=float)
    dt = np.asarray(dt, dtype=float)
    y_s = np.asarray(y_s, dtype=float)
    y_t = np.asarray(y_t, dtype=float)
    dds = np.where(y_s > 0, -y_s / _clip_prob(ds), 0.0) * _unclipped_mask(ds)
    ddt = np.where(y_t > 0, y_t / (1.0 - _clip_prob(dt)), 0.0) * _unclipped_mask(dt)
    return dds, ddt


def adversarial_loss(dt, y_t):
    """Generator-side alignment loss: push present target categories to be
    scored as source. Absent categories contribute exactly zero."""
    dt = np.asarray(dt, dtype=float)
    y_t = np.asarray(y_t, dtype=float)
    if dt.shape != y_t.shape:
        raise ValueError("dt and y_t must share one length")
    _check_prob(dt, "target discriminator outputs")
    return float(np.sum(np.where(y_t > 0, -y_t * np.log(_clip_prob(dt)), 0.0)))


def adversarial_loss_grad(dt, y_t):
    """Gradient of adversarial_loss w.r.t. dt."""
    dt = np.asarray(dt, dtype=float)
    y_t = np.asarray(y_t, dtype=float)
    return np.where(y_t > 0, -y_t / _clip_prob(dt), 0.0) * _unclipped_mask(dt)


# ---------------------------------------------------------------------------
# pixel-level supervision


def _labels_from_mask(Y, C):
    """Accept a (H, W) integer label map or a (H, W, C) one-hot mask."""
    Y = np.asarray(Y)
    if Y.ndim == 3:
        if Y.shape[2] != C:
            raise ValueError(f"mask has {Y.shape[2]} classes, expected {C}")
        s = Y.sum(axis=2)
        if not np.all(s == 1):
            raise ValueError("mask is not one-hot")
        return Y.argmax(axis=2)
    if Y.ndim == 2:
        if Y.min() < 0 or Y.max() >= C:
            raise ValueError(f"mask class index out of range [0, {C})")
        return Y.astype(np.int64)
    raise ValueError(f"expected (H, W) labels or (H, W, C) one-hot mask, got {Y.shape}")


def segmentation_ce(O, Y):
    """Pixel-wise cross-entropy, averaged over pixels.

    O: (H, W, C) per-pixel probabilities (post softmax), Y: one-hot mask or
    integer label map of the same spatial size.
    """
    O = np.asarray(O, dtype=float)
    if O.ndim != 3:
        raise ValueError(f"expected (H, W, C) output map, got {O.shape}")
    labels = _labels_from_mask(Y, O.shape[2])
    if labels.shape != O.shape[:2]:
        raise ValueError(f"output/mask spatial mismatch: {O.shape[:2]} vs {labels.shape}")
    h, w = labels.shape
    picked = O[np.arange(h)[:, None], np.arange(w)[None, :], labels]
    return float(np.mean(-np.log(_clip_prob(picked))))


def segmentation_ce_grad(O, Y):
    """Gradient of segmentation_ce w.r.t. O."""
    O = np.asarray(O, dtype=float)
    labels = _labels_from_mask(Y, O.shape[2])
    h, w = labels.shape
    dO = np.zeros_like(O)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    picked = O[rows, cols, labels]
    dO[rows, cols, labels] = -_unclipped_mask(picked) / (_clip_prob(picked) * h * w)
    return dO


def point_loss(O, points):
    """Negative log-likelihood of sparse point annotations.

    points: integer array of shape (N, 3) with rows (row, col, category).
    An empty point set yields 0.
    """
    O = np.asarray(O, dtype=float)
    points = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    if points.shape[0] == 0:
        return 0.0
    h, w, c = O.shape
    r, q, cat = points[:, 0], points[:, 1], points[:, 2]
    if np.any(r < 0) or np.any(r >= h) or np.any(q < 0) or np.any(q >= w):
        raise ValueError("point coordinates out of bounds")
    if np.any(cat < 0) or np.any(cat >= c):
        raise ValueError("point category out of range")
    return float(np.sum(-np.log(_clip_prob(O[r, q, cat]))))


def point_loss_grad(O, points):
    """Gradient of point_loss w.r.t. O."""
    O = np.asarray(O, dtype=float)
    points = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    dO = np.zeros_like(O)
    if points.shape[0] == 0:
        return dO
    r, q, cat = points[:, 0], points[:, 1], points[:, 2]
    picked = O[r, q, cat]
    np.add.at(dO, (r, q, cat), -_unclipped_mask(picked) / _clip_prob(picked))
    return dO


# ---------------------------------------------------------------------------
# weak-label estimation and loss combination


def pseudo_weak_labels(p, T):
    """Threshold pooled presence probabilities into a multi-hot weak label.

    Strict inequality: y_c = 1 iff p_c > T, so p_c == T maps to 0.
    """
    p = np.asarray(p, dtype=float)
    if not 0.0 <= T <= 1.0:
        raise ValueError(f"threshold T must lie in [0, 1], got {T}")
    return (p > T).astype(np.uint8)


def joint_g_loss(Ls, Lc, Ladv, Lout, w):
    """Total segmentation-network objective:
    Ls + lambda_c * Lc + lambda_adv * Ladv + lambda_out * Lout."""
    parts = np.array([Ls, Lc, Ladv, Lout], dtype=float)
    if not np.all(np.isfinite(parts)):
        raise ValueError("loss components must be finite")
    return float(Ls + w.lambda_c * Lc + w.lambda_adv * Ladv + w.lambda_out * Lout)
