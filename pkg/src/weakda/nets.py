"""Segmentation network, per-category discriminator bank, output-space discriminator.

All parameters live in flat ``dict[str, ndarray]`` records; forward passes are
pure functions of (params, input) and return caches that the matching backward
functions consume. Gradients are hand-derived, so the trainer needs no autodiff
framework. Layout conventions: images and grids are channel-last, conv weights
are (kh, kw, c_in, c_out), 1x1 convs are stored as plain (c_in, c_out) matrices.
"""

import io
import json
from dataclasses import dataclass, asdict, replace
from typing import NamedTuple

import numpy as np

from .losses import sigmoid

CHECKPOINT_VERSION = 1

# strides of the three backbone blocks for each supported downsample factor
_BLOCK_STRIDES = {1: (1, 1, 1), 2: (2, 1, 1), 4: (2, 1, 2)}


@dataclass(frozen=True)
class SegNetConfig:
    num_classes: int
    input_channels: int = 3
    base_width: int = 32
    downsample_factor: int = 4
    feature_dim: int = 64
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.num_classes < 1 or self.feature_dim < 1 or self.base_width < 1:
            raise ValueError("num_classes, feature_dim, base_width must be >= 1")
        if self.downsample_factor not in _BLOCK_STRIDES:
            raise ValueError(f"downsample_factor must be one of {sorted(_BLOCK_STRIDES)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


class NetOutputs(NamedTuple):
    """F: (B, H', W', D) features; A: (B, H', W', C) logits; O: (B, H, W, C) probabilities."""

    F: np.ndarray
    A: np.ndarray
    O: np.ndarray


# ---------------------------------------------------------------------------
# layer primitives


def _im2col(x, kh, kw, stride, pad):
    """(B, H, W, Cin) -> (B, Ho, Wo, kh*kw*Cin) patches, flattened (i, j, cin)."""
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    b, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, kh * kw * x.shape[3])
    return np.ascontiguousarray(cols)


def conv2d_forward(x, w, bias, stride=1, pad=1):
    """3x3 (or any odd) convolution. Returns (out, cols) with cols kept for backward."""
    kh, kw, cin, cout = w.shape
    cols = _im2col(x, kh, kw, stride, pad)
    b, ho, wo, k = cols.shape
    out = cols.reshape(-1, k) @ w.reshape(k, cout) + bias
    return out.reshape(b, ho, wo, cout), cols


def conv2d_backward(dout, cols, x_shape, w, stride=1, pad=1, need_dx=True):
    """Gradients of conv2d_forward. Returns (dx, dw, db); dx is None if not needed."""
    kh, kw, cin, cout = w.shape
    b, ho, wo, k = cols.shape
    dout_flat = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, k).T @ dout_flat).reshape(w.shape)
    db = dout_flat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dout_flat @ w.reshape(k, cout).T).reshape(b, ho, wo, kh, kw, cin)
    hp, wp = x_shape[1] + 2 * pad, x_shape[2] + 2 * pad
    dxp = np.zeros((b, hp, wp, cin), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + x_shape[1], pad:pad + x_shape[2], :]
    return dx, dw, db


def _upsample_matrix(n_out, n_in):
    """1D bilinear interpolation matrix (n_out, n_in), half-pixel centers."""
    scale = n_out / n_in
    x = (np.arange(n_out) + 0.5) / scale - 0.5
    x0 = np.floor(x).astype(int)
    frac = x - x0
    lo = np.clip(x0, 0, n_in - 1)
    hi = np.clip(x0 + 1, 0, n_in - 1)
    u = np.zeros((n_out, n_in))
    np.add.at(u, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(u, (np.arange(n_out), hi), frac)
    return u


_UPSAMPLE_CACHE = {}


def _upsample_mats(h_out, h_in, w_out, w_in, dtype):
    key = (h_out, h_in, w_out, w_in, np.dtype(dtype).str)
    if key not in _UPSAMPLE_CACHE:
        _UPSAMPLE_CACHE[key] = (_upsample_matrix(h_out, h_in).astype(dtype),
                                _upsample_matrix(w_out, w_in).astype(dtype))
    return _UPSAMPLE_CACHE[key]


def _rows_apply(u, a):
    """Apply (p, h) matrix to axis 1 of (B, h, w, C) via one GEMM."""
    b, h, w, c = a.shape
    flat = a.transpose(1, 0, 2, 3).reshape(h, b * w * c)
    out = u @ flat
    return out.reshape(u.shape[0], b, w, c).transpose(1, 0, 2, 3)


def _cols_apply(u, a):
    """Apply (q, w) matrix to axis 2 of (B, h, w, C) via one GEMM."""
    b, h, w, c = a.shape
    flat = a.transpose(2, 0, 1, 3).reshape(w, b * h * c)
    out = u @ flat
    return out.reshape(u.shape[0], b, h, c).transpose(1, 2, 0, 3)


def upsample_bilinear(a, h_out, w_out):
    """Bilinearly upsample (B, h, w, C) to (B, h_out, w_out, C)."""
    ur, uc = _upsample_mats(h_out, a.shape[1], w_out, a.shape[2], a.dtype)
    return _cols_apply(uc, _rows_apply(ur, a))


def upsample_bilinear_backward(dout, h_in, w_in):
    """Adjoint of upsample_bilinear."""
    ur, uc = _upsample_mats(dout.shape[1], h_in, dout.shape[2], w_in, dout.dtype)
    return _rows_apply(ur.T, _cols_apply(uc.T, dout))


def pixel_softmax(logits):
    """Softmax over the trailing category axis."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def pixel_softmax_backward(probs, dprobs):
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def dropout(x, rate, rng):
    """Inverted dropout. Returns (y, mask); backward is dropout_backward."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(dy, mask, rate):
    return dy * mask / (1.0 - rate)


# ---------------------------------------------------------------------------
# segmentation network G


def seg_forward(g, cfg, x, want_cache=False):
    """Run the segmentation network on an image batch.

    x: (B, H, W, input_channels) in [0, 1]. Returns NetOutputs; with
    want_cache=True also returns the activation cache for seg_backward.
    The forward pass is deterministic (dropout is applied by the caller,
    only on the classification branch).
    """
    x = np.asarray(x, dtype=g["c1_w"].dtype)
    if x.ndim != 4 or x.shape[3] != cfg.input_channels:
        raise ValueError(f"expected (B, H, W, {cfg.input_channels}) images, got {x.shape}")
    b, h, w, _ = x.shape
    df = cfg.downsample_factor
    if h % df or w % df:
        raise ValueError(f"image size {h}x{w} not divisible by downsample factor {df}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")

    s1, s2, s3 = _BLOCK_STRIDES[df]
    z1, cols1 = conv2d_forward(x, g["c1_w"], g["c1_b"], stride=s1)
    h1 = np.maximum(z1, 0.0)
    z2, cols2 = conv2d_forward(h1, g["c2_w"], g["c2_b"], stride=s2)
    h2 = np.maximum(z2, 0.0)
    z3, cols3 = conv2d_forward(h2, g["c3_w"], g["c3_b"], stride=s3)
    h3 = np.maximum(z3, 0.0)
    hp, wp = h3.shape[1], h3.shape[2]
    feats = (h3.reshape(-1, h3.shape[3]) @ g["feat_w"] + g["feat_b"]).reshape(
        b, hp, wp, cfg.feature_dim)
    logits = (feats.reshape(-1, cfg.feature_dim) @ g["clf_w"] + g["clf_b"]).reshape(
        b, hp, wp, cfg.num_classes)
    up = upsample_bilinear(logits, h, w)
    probs = pixel_softmax(up)
    outs = NetOutputs(F=feats, A=logits, O=probs)
    if not want_cache:
        return outs
    cache = {
        "x_shape": x.shape, "strides": (s1, s2, s3),
        "cols1": cols1, "m1": z1 > 0, "h1_shape": h1.shape,
        "cols2": cols2, "m2": z2 > 0, "h2_shape": h2.shape,
        "cols3": cols3, "m3": z3 > 0, "h3": h3,
        "feats": feats, "probs": probs,
    }
    return outs, cache


def seg_backward(g, cfg, cache, dF=None, dA=None, dO=None):
    """Backpropagate cotangents on (F, A, O) to parameter gradients.

    Any of dF, dA, dO may be None (treated as zero). Returns a dict with the
    same keys/shapes as the parameter record.
    """
    feats = cache["feats"]
    dtype = feats.dtype
    b, hp, wp, dfeat = feats.shape
    nc = g["clf_w"].shape[1]
    if dO is not None:
        dup = pixel_softmax_backward(cache["probs"], dO.astype(dtype, copy=False))
        d_logits = upsample_bilinear_backward(dup, hp, wp)
        if dA is not None:
            d_logits = d_logits + dA.astype(dtype, copy=False)
    elif dA is not None:
        d_logits = dA.astype(dtype, copy=False)
    else:
        d_logits = np.zeros((b, hp, wp, nc), dtype=dtype)

    grads = {}
    dlog_flat = d_logits.reshape(-1, nc)
    feats_flat = feats.reshape(-1, dfeat)
    grads["clf_w"] = feats_flat.T @ dlog_flat
    grads["clf_b"] = dlog_flat.sum(axis=0)
    d_feats = (dlog_flat @ g["clf_w"].T).reshape(b, hp, wp, dfeat)
    if dF is not None:
        d_feats = d_feats + dF.astype(dtype, copy=False)

    h3 = cache["h3"]
    w0 = h3.shape[3]
    dfeats_flat = d_feats.reshape(-1, dfeat)
    grads["feat_w"] = h3.reshape(-1, w0).T @ dfeats_flat
    grads["feat_b"] = dfeats_flat.sum(axis=0)
    dh3 = (dfeats_flat @ g["feat_w"].T).reshape(b, hp, wp, w0)

    s1, s2, s3 = cache["strides"]
    dz3 = dh3 * cache["m3"]
    dh2, grads["c3_w"], grads["c3_b"] = conv2d_backward(
        dz3, cache["cols3"], cache["h2_shape"], g["c3_w"], stride=s3)
    dz2 = dh2 * cache["m2"]
    dh1, grads["c2_w"], grads["c2_b"] = conv2d_backward(
        dz2, cache["cols2"], cache["h1_shape"], g["c2_w"], stride=s2)
    dz1 = dh1 * cache["m1"]
    _, grads["c1_w"], grads["c1_b"] = conv2d_backward(
        dz1, cache["cols1"], cache["x_shape"], g["c1_w"], stride=s1, need_dx=False)
    return grads


# ---------------------------------------------------------------------------
# per-category discriminator bank


def disc_forward(bank, feats):
    """Score pooled category features with the per-category discriminators.

    feats: (C, D) one pooled vector per category. Returns (C,) probabilities
    (of "drawn from source"). All categories are scored; masking of absent
    categories is the loss's job.
    """
    probs, _ = disc_forward_batch(bank, np.asarray(feats, dtype=float)[None])
    return probs[0]


def disc_forward_batch(bank, feats):
    """Batched bank forward: feats (B, C, D) -> probs (B, C) plus cache."""
    feats = np.asarray(feats).astype(bank["w1"].dtype, copy=False)
    c, d = bank["w1"].shape[0], bank["w1"].shape[1]
    if feats.ndim != 3 or feats.shape[1] != c or feats.shape[2] != d:
        raise ValueError(f"expected (B, {c}, {d}) pooled features, got {feats.shape}")
    z1 = np.einsum("bcd,cde->bce", feats, bank["w1"]) + bank["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = np.einsum("bcd,cde->bce", h1, bank["w2"]) + bank["b2"]
    h2 = np.maximum(z2, 0.0)
    logit = np.einsum("bcd,cd->bc", h2, bank["w3"]) + bank["b3"]
    probs = sigmoid(logit)
    cache = {"feats": feats, "m1": z1 > 0, "h1": h1, "m2": z2 > 0, "h2": h2, "probs": probs}
    return probs, cache


def disc_backward(bank, cache, dprobs, need_dfeats=False):
    """Backward through the bank. dprobs: (B, C) cotangent on the outputs.

    Returns (grads, dfeats); dfeats is None unless requested (the generator
    step needs input gradients, the discriminator step needs parameter ones).
    """
    probs = cache["probs"]
    dprobs = np.asarray(dprobs).astype(bank["w1"].dtype, copy=False)
    dlogit = dprobs * probs * (1.0 - probs)
    grads = {}
    grads["w3"] = np.einsum("bc,bcd->cd", dlogit, cache["h2"])
    grads["b3"] = dlogit.sum(axis=0)
    dh2 = np.einsum("bc,cd->bcd", dlogit, bank["w3"])
    dz2 = dh2 * cache["m2"]
    grads["w2"] = np.einsum("bcd,bce->cde", cache["h1"], dz2)
    grads["b2"] = dz2.sum(axis=0)
    dh1 = np.einsum("bce,cde->bcd", dz2, bank["w2"])
    dz1 = dh1 * cache["m1"]
    grads["w1"] = np.einsum("bcd,bce->cde", cache["feats"], dz1)
    grads["b1"] = dz1.sum(axis=0)
    dfeats = np.einsum("bce,cde->bcd", dz1, bank["w1"]) if need_dfeats else None
    return grads, dfeats


# ---------------------------------------------------------------------------
# output-space discriminator (baseline alignment)

_LRELU_SLOPE = 0.2


def out_disc_forward(dnet, probs_map):
    """Per-image domain probability from an (B, H, W, C) output map.

    Two strided convs, leaky rectifier, global average pool, dense, sigmoid.
    Returns (probs (B,), cache).
    """
    x = np.asarray(probs_map).astype(dnet["c1_w"].dtype, copy=False)
    z1, cols1 = conv2d_forward(x, dnet["c1_w"], dnet["c1_b"], stride=2)
    h1 = np.where(z1 > 0, z1, _LRELU_SLOPE * z1)
    z2, cols2 = conv2d_forward(h1, dnet["c2_w"], dnet["c2_b"], stride=2)
    h2 = np.where(z2 > 0, z2, _LRELU_SLOPE * z2)
    pooled = h2.mean(axis=(1, 2))
    logit = pooled @ dnet["fc_w"] + dnet["fc_b"]
    probs = sigmoid(logit)
    cache = {
        "x_shape": x.shape, "cols1": cols1, "m1": z1 > 0, "h1_shape": h1.shape,
        "cols2": cols2, "m2": z2 > 0, "h2_shape": h2.shape,
        "pooled": pooled, "probs": probs,
    }
    return probs, cache


def out_disc_backward(dnet, cache, dprobs, need_dx=False):
    """Backward through the output-space discriminator."""
    probs = cache["probs"]
    dprobs = np.asarray(dprobs).astype(dnet["c1_w"].dtype, copy=False)
    dlogit = dprobs * probs * (1.0 - probs)
    grads = {}
    grads["fc_w"] = cache["pooled"].T @ dlogit
    grads["fc_b"] = np.asarray(dlogit.sum())
    dpooled = np.outer(dlogit, dnet["fc_w"])
    b, h2h, w2h, c2 = cache["h2_shape"]
    dh2 = np.broadcast_to(dpooled[:, None, None, :] / (h2h * w2h), cache["h2_shape"]).copy()
    dz2 = np.where(cache["m2"], dh2, _LRELU_SLOPE * dh2)
    dh1, grads["c2_w"], grads["c2_b"] = conv2d_backward(
        dz2, cache["cols2"], cache["h1_shape"], dnet["c2_w"], stride=2)
    dz1 = np.where(cache["m1"], dh1, _LRELU_SLOPE * dh1)
    dx, grads["c1_w"], grads["c1_b"] = conv2d_backward(
        dz1, cache["cols1"], cache["x_shape"], dnet["c1_w"], stride=2, need_dx=need_dx)
    return grads, dx


# ---------------------------------------------------------------------------
# initialization and checkpointing

_OUT_DISC_WIDTH = 16


def init_networks(cfg, seed, dtype=np.float32):
    """Deterministically initialize (G, discriminator bank, output-space D).

    Weights draw from a fan-in-scaled uniform, U(-sqrt(6/fan_in), +sqrt(6/fan_in));
    biases start at zero. The draw order is fixed, so a seed pins every array.
    Training runs in float32 by default; pass float64 for gradient checking.
    """
    rng = np.random.default_rng(seed)

    def uconv(kh, kw, cin, cout):
        lim = np.sqrt(6.0 / (kh * kw * cin))
        return rng.uniform(-lim, lim, size=(kh, kw, cin, cout)).astype(dtype)

    def udense(shape, fan_in):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    w0, d, c = cfg.base_width, cfg.feature_dim, cfg.num_classes
    g = {
        "c1_w": uconv(3, 3, cfg.input_channels, w0), "c1_b": zeros(w0),
        "c2_w": uconv(3, 3, w0, w0), "c2_b": zeros(w0),
        "c3_w": uconv(3, 3, w0, w0), "c3_b": zeros(w0),
        "feat_w": udense((w0, d), w0), "feat_b": zeros(d),
        "clf_w": udense((d, c), d), "clf_b": zeros(c),
    }
    bank = {
        "w1": udense((c, d, d), d), "b1": zeros(c, d),
        "w2": udense((c, d, d), d), "b2": zeros(c, d),
        "w3": udense((c, d), d), "b3": zeros(c),
    }
    dw = _OUT_DISC_WIDTH
    dnet = {
        "c1_w": uconv(3, 3, c, dw), "c1_b": zeros(dw),
        "c2_w": uconv(3, 3, dw, dw), "c2_b": zeros(dw),
        "fc_w": udense((dw,), dw), "fc_b": zeros(),
    }
    return g, bank, dnet


def bank_param_count(bank):
    return sum(a.size for a in bank.values())


def save_checkpoint(path, cfg, g, bank, dnet):
    """Serialize all parameter arrays plus the network config; bit-exact on reload."""
    arrays = {}
    for prefix, params in (("g", g), ("bank", bank), ("out", dnet)):
        for k, v in params.items():
            arrays[f"{prefix}.{k}"] = v
    meta = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(cfg)}, sort_keys=True)
    arrays["meta"] = np.frombuffer(meta.encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (cfg, g, bank, dnet). Raises on missing file or version mismatch."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = SegNetConfig(**meta["config"])
        groups = {"g": {}, "bank": {}, "out": {}}
        for key in data.files:
            if key == "meta":
                continue
            prefix, name = key.split(".", 1)
            groups[prefix][name] = data[key]
    return cfg, groups["g"], groups["bank"], groups["out"]
