"""Alternating adversarial training with weak labels.

Phase 1 (warm-up) trains the segmentation network on source cross-entropy
plus output-space alignment. Phase 2 adds the mode-specific weak-label terms:
pseudo-weak labels estimated online (uda_weak), oracle image-level labels
(wda_image), or oracle labels plus point supervision (wda_point). Each
iteration runs one discriminator step followed by one generator step on the
same minibatch pair.

Determinism: a single RNG stream drives the loop; every iteration draws the
source indices, then the target indices, then (only when the classification
branch is active with nonzero dropout) one dropout mask. Terms whose weight
is zero are skipped entirely, so a zero-weight run is bit-identical to a run
of the reduced objective.
"""

import json
from dataclasses import dataclass, asdict, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import losses, metrics, nets, synthdata
from .losses import LossWeights

MODES = ("source_only", "baseline", "uda_weak", "wda_image", "wda_point")

MOMENTUM = 0.9
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
POINT_LOSS_WEIGHT = 1.0

_TRAIN_STREAM_TAG = 0xC33
_EVAL_CHUNK = 16


class TrainAbortError(RuntimeError):
    """Raised when a loss turns non-finite; runs abort rather than skip."""


def default_loss_weights(mode):
    """Per-mode defaults: small lambda_c for noisy pseudo labels, larger for
    oracle labels; alignment weights shared across modes."""
    if mode == "source_only":
        return LossWeights(lambda_c=0.0, lambda_adv=0.0, lambda_out=0.0)
    if mode == "baseline":
        return LossWeights(lambda_c=0.0, lambda_adv=0.0, lambda_out=0.001)
    if mode == "uda_weak":
        return LossWeights(lambda_c=0.01, lambda_adv=0.001, lambda_out=0.001)
    if mode in ("wda_image", "wda_point"):
        return LossWeights(lambda_c=0.2, lambda_adv=0.001, lambda_out=0.001)
    raise ValueError(f"unknown mode {mode!r}")


def default_dropout_rate(mode):
    if mode == "uda_weak":
        return 0.3
    if mode in ("wda_image", "wda_point"):
        return 0.1
    return 0.0


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    weights: Optional[LossWeights] = None
    points_per_class: int = 1
    lr_G: float = 0.05
    lr_D: float = 1e-3
    poly_power: float = 0.9
    warmup_iters: int = 1000
    total_iters: int = 4000
    batch_size: int = 4
    seed: int = 0
    eval_interval: int = 500
    n_eval: int = 100
    base_width: int = 32
    feature_dim: int = 64
    dropout_rate: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValueError("need total_iters >= warmup_iters >= 0")
        if self.lr_G <= 0 or self.lr_D <= 0:
            raise ValueError("learning rates must be positive")
        if self.points_per_class < 1 or self.batch_size < 1 or self.n_eval < 1:
            raise ValueError("points_per_class, batch_size, n_eval must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        object.__setattr__(self, "weights",
                           self.weights if self.weights is not None
                           else default_loss_weights(self.mode))
        object.__setattr__(self, "dropout_rate",
                           self.dropout_rate if self.dropout_rate is not None
                           else default_dropout_rate(self.mode))


def poly_lr(iteration, base_lr, total_iters, power):
    """Polynomially decayed learning rate: base * (1 - iter/total)^power."""
    if not 0 <= iteration <= total_iters:
        raise ValueError("iteration must lie in [0, total_iters]")
    return base_lr * (1.0 - iteration / total_iters) ** power


def miou_star_subset(spec):
    """Reduced-set mean IoU analog: drop the three rarest categories.

    Falls back to the full set when there are too few classes to drop three.
    """
    if spec.C <= 4:
        return tuple(range(spec.C))
    order = np.argsort(np.asarray(spec.class_rarity, dtype=float), kind="stable")
    dropped = set(int(c) for c in order[:3])
    return tuple(c for c in range(spec.C) if c not in dropped)


class Batch(NamedTuple):
    X: np.ndarray
    Y: np.ndarray
    indices: np.ndarray


@dataclass
class TrainData:
    source: synthdata.SceneBatch
    target: synthdata.SceneBatch
    eval_target: synthdata.SceneBatch
    target_points: Optional[list]  # per target-train scene, (N, 3) arrays
    eval_oracle_y: np.ndarray      # (n_eval, C) presence vectors


@dataclass
class RunRecord:
    meta: dict
    rows: list = field(default_factory=list)

    @property
    def final(self):
        return self.rows[-1]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "meta", **self.meta}, sort_keys=True) + "\n")
            for row in self.rows:
                fh.write(json.dumps({"type": "eval", **row}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        meta, rows = None, []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    kind = obj.pop("type")
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"{path}: malformed record on line {lineno}") from exc
                if kind == "meta":
                    meta = obj
                elif kind == "eval":
                    rows.append(obj)
                else:
                    raise ValueError(f"{path}: unknown record type {kind!r} on line {lineno}")
        if meta is None:
            raise ValueError(f"{path}: missing meta record")
        return cls(meta=meta, rows=rows)


@dataclass
class TrainState:
    cfg: TrainConfig
    spec: synthdata.BenchmarkSpec
    net_cfg: nets.SegNetConfig
    data: TrainData
    g: dict
    bank: dict
    dnet: dict
    rng: np.random.Generator
    iteration: int = 0
    opt_g: dict = None
    opt_bank: dict = None
    opt_dnet: dict = None
    loss_sums: dict = field(default_factory=dict)
    loss_counts: dict = field(default_factory=dict)
    warmup_pseudo_pr: Optional[dict] = None

    def in_warmup(self):
        return self.iteration < self.cfg.warmup_iters


# ---------------------------------------------------------------------------
# optimizers


def _sgd_step(params, grads, vel, lr):
    for k in params:
        vel[k] = MOMENTUM * vel[k] + grads[k]
        params[k] -= lr * vel[k]


def _adam_init(params):
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def _adam_step(params, grads, st, lr):
    st["t"] += 1
    b1, b2 = ADAM_BETAS
    c1 = 1.0 - b1 ** st["t"]
    c2 = 1.0 - b2 ** st["t"]
    for k in params:
        m, v = st["m"][k], st["v"][k]
        m *= b1
        m += (1 - b1) * grads[k]
        v *= b2
        v += (1 - b2) * grads[k] ** 2
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def _adam_bank_init(bank, num_classes):
    st = _adam_init(bank)
    st["t"] = np.zeros(num_classes, dtype=np.int64)
    return st


def _adam_bank_step(bank, grads, st, lr, present):
    """Adam restricted to the discriminators of present categories; absent
    categories see no gradient and no moment decay."""
    if not present.any():
        return
    st["t"][present] += 1
    b1, b2 = ADAM_BETAS
    t = st["t"][present].astype(float)
    for k in bank:
        m, v = st["m"][k], st["v"][k]
        g = grads[k][present]
        m[present] = b1 * m[present] + (1 - b1) * g
        v[present] = b2 * v[present] + (1 - b2) * g ** 2
        shape = (-1,) + (1,) * (bank[k].ndim - 1)
        mhat = m[present] / (1.0 - b1 ** t).reshape(shape)
        vhat = v[present] / (1.0 - b2 ** t).reshape(shape)
        bank[k][present] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# state construction


def init_train_state(cfg, spec, dataset_root=None):
    """Build networks, optimizers, data and the RNG stream for a run."""
    net_cfg = nets.SegNetConfig(num_classes=spec.C, base_width=cfg.base_width,
                                feature_dim=cfg.feature_dim, dropout_rate=cfg.dropout_rate)
    if dataset_root is not None:
        source = synthdata.load_split(dataset_root, "source")
        target = synthdata.load_split(dataset_root, "target")
        eval_target = synthdata.load_split(dataset_root, "target_val")
        if len(eval_target) < cfg.n_eval:
            raise ValueError("dataset target_val split smaller than n_eval")
        eval_target = synthdata.SceneBatch(X=eval_target.X[:cfg.n_eval],
                                           Y=eval_target.Y[:cfg.n_eval])
    else:
        src_dp = synthdata.source_domain_params(spec)
        tgt_dp = synthdata.target_domain_params(spec)
        source = synthdata.generate_batch(spec, src_dp, range(spec.n_source))
        target = synthdata.generate_batch(spec, tgt_dp, range(spec.n_target))
        eval_target = synthdata.generate_batch(
            spec, tgt_dp, range(spec.n_target, spec.n_target + cfg.n_eval))

    target_points = None
    if cfg.mode == "wda_point":
        target_points = [
            synthdata.points_for_scene(spec, i, target.Y[i], cfg.points_per_class)
            for i in range(len(target))
        ]
    eval_oracle = np.stack([synthdata.weak_from_mask(eval_target.Y[i])
                            for i in range(len(eval_target))])

    g, bank, dnet = nets.init_networks(net_cfg, cfg.seed)
    data = TrainData(source=source, target=target, eval_target=eval_target,
                     target_points=target_points, eval_oracle_y=eval_oracle)
    state = TrainState(
        cfg=cfg, spec=spec, net_cfg=net_cfg, data=data,
        g=g, bank=bank, dnet=dnet,
        rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, _TRAIN_STREAM_TAG])),
    )
    state.opt_g = {k: np.zeros_like(v) for k, v in g.items()}
    state.opt_bank = _adam_bank_init(bank, spec.C)
    state.opt_dnet = _adam_init(dnet)
    return state


def sample_batches(state):
    """Draw one (source, target) minibatch pair; always consumes the same
    number of RNG draws regardless of mode."""
    n_src = len(state.data.source)
    n_tgt = len(state.data.target)
    b = state.cfg.batch_size
    src_idx = state.rng.integers(0, n_src, size=b)
    tgt_idx = state.rng.integers(0, n_tgt, size=b)
    sb = Batch(X=state.data.source.X[src_idx], Y=state.data.source.Y[src_idx], indices=src_idx)
    tb = Batch(X=state.data.target.X[tgt_idx], Y=state.data.target.Y[tgt_idx], indices=tgt_idx)
    return sb, tb


# ---------------------------------------------------------------------------
# weak-label acquisition


def _pseudo_labels_from_A(a_batch, w):
    """Online pseudo-weak labels from a batch of prediction maps."""
    return np.stack([losses.pseudo_weak_labels(losses.smooth_max_pool(a, w.k), w.T)
                     for a in a_batch])


def acquire_weak_labels(state, target_batch, mode):
    """Per-image weak labels for the batch; also point sets in wda_point mode.

    uda_weak estimates them from the current model's pooled predictions;
    wda modes read category presence from the ground-truth masks.
    """
    if mode in ("source_only", "baseline"):
        raise ValueError(f"mode {mode!r} uses no weak labels")
    if mode == "uda_weak":
        outs = nets.seg_forward(state.g, state.net_cfg, target_batch.X)
        return _pseudo_labels_from_A(outs.A, state.cfg.weights)
    y = np.stack([synthdata.weak_from_mask(target_batch.Y[i])
                  for i in range(len(target_batch.indices))])
    if mode == "wda_image":
        return y
    points = [state.data.target_points[i] for i in target_batch.indices]
    return y, points


def _check_finite_loss(value, name, iteration):
    if not np.isfinite(value):
        raise TrainAbortError(f"{name} became non-finite at iteration {iteration}; "
                              "aborting instead of silently skipping")


def _log_loss(state, name, value):
    state.loss_sums[name] = state.loss_sums.get(name, 0.0) + value
    state.loss_counts[name] = state.loss_counts.get(name, 0) + 1


# ---------------------------------------------------------------------------
# training steps


def _active_terms(state):
    """Which loss terms are live at the current iteration."""
    cfg, w = state.cfg, state.cfg.weights
    weak_mode = cfg.mode in ("uda_weak", "wda_image", "wda_point")
    phase2 = not state.in_warmup()
    return {
        "out": cfg.mode != "source_only" and w.lambda_out > 0,
        "cls": weak_mode and phase2 and w.lambda_c > 0,
        "adv": weak_mode and phase2 and w.lambda_adv > 0,
        "point": cfg.mode == "wda_point" and phase2,
    }


def train_step_D(state, source_batch, target_batch):
    """One Adam step on the discriminators (bank and/or output-space net).

    The segmentation network is only read, never written; features are pooled
    from a no-gradient forward pass. Returns the discriminator loss values.
    """
    active = _active_terms(state)
    if not (active["out"] or active["adv"]):
        return {}
    out_s = nets.seg_forward(state.g, state.net_cfg, source_batch.X)
    out_t = nets.seg_forward(state.g, state.net_cfg, target_batch.X)
    return _d_step_core(state, out_s, out_t, source_batch, target_batch)


def _d_step_core(state, out_s, out_t, source_batch, target_batch):
    active = _active_terms(state)
    cfg, w = state.cfg, state.cfg.weights
    b = len(source_batch.indices)
    lr_d = poly_lr(state.iteration, cfg.lr_D, cfg.total_iters, cfg.poly_power)
    values = {}

    if active["adv"]:
        y_s = np.stack([synthdata.weak_from_mask(source_batch.Y[i]) for i in range(b)])
        if cfg.mode == "uda_weak":
            y_t = _pseudo_labels_from_A(out_t.A, w)
        else:
            y_t = np.stack([synthdata.weak_from_mask(target_batch.Y[i]) for i in range(b)])
        feats_s = np.stack([losses.category_pool(out_s.F[i], out_s.A[i]) for i in range(b)])
        feats_t = np.stack([losses.category_pool(out_t.F[i], out_t.A[i]) for i in range(b)])
        ps, cache_s = nets.disc_forward_batch(state.bank, feats_s)
        pt, cache_t = nets.disc_forward_batch(state.bank, feats_t)
        loss = 0.0
        dps = np.zeros_like(ps)
        dpt = np.zeros_like(pt)
        for i in range(b):
            loss += losses.discriminator_domain_loss(ps[i], pt[i], y_s[i], y_t[i]) / b
            gs, gt = losses.discriminator_domain_loss_grad(ps[i], pt[i], y_s[i], y_t[i])
            dps[i] = gs / b
            dpt[i] = gt / b
        _check_finite_loss(loss, "L_d_c", state.iteration)
        grads_s, _ = nets.disc_backward(state.bank, cache_s, dps)
        grads_t, _ = nets.disc_backward(state.bank, cache_t, dpt)
        grads = {k: grads_s[k] + grads_t[k] for k in grads_s}
        present = (y_s.any(axis=0) | y_t.any(axis=0)).astype(bool)
        _adam_bank_step(state.bank, grads, state.opt_bank, lr_d, present)
        values["L_d_c"] = loss

    if active["out"]:
        prob_s, cache_s = nets.out_disc_forward(state.dnet, out_s.O)
        prob_t, cache_t = nets.out_disc_forward(state.dnet, out_t.O)
        ones = np.ones(b)
        loss = losses.discriminator_domain_loss(prob_s, prob_t, ones, ones) / b
        _check_finite_loss(loss, "L_d_out", state.iteration)
        dps, dpt = losses.discriminator_domain_loss_grad(prob_s, prob_t, ones, ones)
        g1, _ = nets.out_disc_backward(state.dnet, cache_s, dps / b)
        g2, _ = nets.out_disc_backward(state.dnet, cache_t, dpt / b)
        grads = {k: g1[k] + g2[k] for k in g1}
        _adam_step(state.dnet, grads, state.opt_dnet, lr_d)
        values["L_d_out"] = loss

    for k, v in values.items():
        _log_loss(state, k, v)
    return values


def train_step_G(state, source_batch, target_batch):
    """One SGD step on the segmentation network, discriminators held fixed.

    Combines source cross-entropy with whichever weak-label and alignment
    terms are active; returns the loss component values.
    """
    active = _active_terms(state)
    fwd_s = nets.seg_forward(state.g, state.net_cfg, source_batch.X, want_cache=True)
    fwd_t = None
    if active["out"] or active["cls"] or active["adv"] or active["point"]:
        fwd_t = nets.seg_forward(state.g, state.net_cfg, target_batch.X, want_cache=True)
    return _g_step_core(state, fwd_s, fwd_t, source_batch, target_batch)


def _g_step_core(state, fwd_s, fwd_t, source_batch, target_batch):
    active = _active_terms(state)
    cfg, w = state.cfg, state.cfg.weights
    b = len(source_batch.indices)
    lr_g = poly_lr(state.iteration, cfg.lr_G, cfg.total_iters, cfg.poly_power)
    values = {}

    outs_s, cache_src = fwd_s
    l_s = 0.0
    dO_s = np.zeros_like(outs_s.O)
    for i in range(b):
        l_s += losses.segmentation_ce(outs_s.O[i], source_batch.Y[i]) / b
        dO_s[i] = losses.segmentation_ce_grad(outs_s.O[i], source_batch.Y[i]) / b
    _check_finite_loss(l_s, "L_s", state.iteration)
    values["L_s"] = l_s
    grads = nets.seg_backward(state.g, state.net_cfg, cache_src, dO=dO_s)

    l_c = l_adv = l_out = 0.0
    if fwd_t is not None:
        outs_t, cache_tgt = fwd_t
        dA_t = np.zeros_like(outs_t.A)
        dF_t = np.zeros_like(outs_t.F)
        dO_t = np.zeros_like(outs_t.O)

        y_t = None
        if active["cls"] or active["adv"]:
            if cfg.mode == "uda_weak":
                y_t = _pseudo_labels_from_A(outs_t.A, w)
            else:
                y_t = np.stack([synthdata.weak_from_mask(target_batch.Y[i]) for i in range(b)])

        if active["cls"]:
            rate = cfg.dropout_rate
            if rate > 0:
                a_cls, drop_mask = nets.dropout(outs_t.A, rate, state.rng)
            else:
                a_cls, drop_mask = outs_t.A, None
            for i in range(b):
                p = losses.smooth_max_pool(a_cls[i], w.k)
                l_c += losses.weak_label_bce(p, y_t[i]) / b
                dp = losses.weak_label_bce_grad(p, y_t[i]) / b
                da = losses.smooth_max_pool_grad(a_cls[i], w.k, dp)
                if drop_mask is not None:
                    da = nets.dropout_backward(da, drop_mask[i], rate)
                dA_t[i] += w.lambda_c * da
            _check_finite_loss(l_c, "L_c", state.iteration)
            values["L_c"] = l_c

        if active["adv"]:
            feats_t = np.stack([losses.category_pool(outs_t.F[i], outs_t.A[i])
                                for i in range(b)])
            probs, dcache = nets.disc_forward_batch(state.bank, feats_t)
            dprobs = np.zeros_like(probs)
            for i in range(b):
                l_adv += losses.adversarial_loss(probs[i], y_t[i]) / b
                dprobs[i] = losses.adversarial_loss_grad(probs[i], y_t[i]) / b
            _check_finite_loss(l_adv, "L_adv_c", state.iteration)
            _, dfeats = nets.disc_backward(state.bank, dcache, dprobs, need_dfeats=True)
            for i in range(b):
                df, da = losses.category_pool_grad(outs_t.F[i], outs_t.A[i], dfeats[i])
                dF_t[i] += w.lambda_adv * df
                dA_t[i] += w.lambda_adv * da
            values["L_adv_c"] = l_adv

        if active["out"]:
            probs, ocache = nets.out_disc_forward(state.dnet, outs_t.O)
            ones = np.ones(b)
            l_out = losses.adversarial_loss(probs, ones) / b
            _check_finite_loss(l_out, "L_adv_out", state.iteration)
            dprobs = losses.adversarial_loss_grad(probs, ones) / b
            _, dO_disc = nets.out_disc_backward(state.dnet, ocache, dprobs, need_dx=True)
            dO_t += w.lambda_out * dO_disc
            values["L_adv_out"] = l_out

        if active["point"]:
            l_point = 0.0
            for i in range(b):
                pts = state.data.target_points[target_batch.indices[i]]
                l_point += losses.point_loss(outs_t.O[i], pts) / b
                dO_t[i] += POINT_LOSS_WEIGHT * losses.point_loss_grad(outs_t.O[i], pts) / b
            _check_finite_loss(l_point, "L_point", state.iteration)
            values["L_point"] = l_point

        tgt_grads = nets.seg_backward(state.g, state.net_cfg, cache_tgt,
                                      dF=dF_t, dA=dA_t, dO=dO_t)
        for k in grads:
            grads[k] += tgt_grads[k]

    values["L_total"] = (losses.joint_g_loss(l_s, l_c, l_adv, l_out, w)
                         + POINT_LOSS_WEIGHT * values.get("L_point", 0.0))
    _sgd_step(state.g, grads, state.opt_g, lr_g)
    for k, v in values.items():
        _log_loss(state, k, v)
    return values


# ---------------------------------------------------------------------------
# evaluation


def segmentation_metrics(g, net_cfg, X, Y, star_subset, weights=None, oracle_y=None):
    """Confusion-matrix metrics of a model on labeled scenes, in eval chunks.

    With `weights` and `oracle_y` given, also reports pseudo-weak-label
    precision/recall at the configured threshold.
    """
    cm = metrics.new_confusion(net_cfg.num_classes)
    pseudo = []
    for start in range(0, X.shape[0], _EVAL_CHUNK):
        xs = X[start:start + _EVAL_CHUNK]
        ys = Y[start:start + _EVAL_CHUNK]
        outs = nets.seg_forward(g, net_cfg, xs)
        metrics.accumulate(cm, metrics.argmax_labels(outs.O), synthdata.mask_labels(ys))
        if weights is not None:
            for i in range(xs.shape[0]):
                p = losses.smooth_max_pool(outs.A[i], weights.k)
                pseudo.append(losses.pseudo_weak_labels(p, weights.T))
    iou = metrics.per_class_iou(cm)
    result = {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "miou": metrics.mean_iou(cm),
        "miou_star": metrics.mean_iou(cm, star_subset),
        "confusion": cm,
    }
    if weights is not None and oracle_y is not None:
        pr = metrics.weak_label_pr(np.stack(pseudo), oracle_y)
        result["pseudo_precision"] = pr["micro_precision"]
        result["pseudo_recall"] = pr["micro_recall"]
    return result


def evaluate(state):
    """Target-domain metrics on the held-out eval scenes (dropout disabled)."""
    data = state.data.eval_target
    res = segmentation_metrics(state.g, state.net_cfg, data.X, data.Y,
                               miou_star_subset(state.spec), weights=state.cfg.weights,
                               oracle_y=state.data.eval_oracle_y)
    row = {
        "iteration": state.iteration,
        "lr_G": poly_lr(min(state.iteration, state.cfg.total_iters), state.cfg.lr_G,
                        state.cfg.total_iters, state.cfg.poly_power),
        "per_class_iou": res["per_class_iou"],
        "miou": res["miou"],
        "miou_star": res["miou_star"],
        "pseudo_precision": res["pseudo_precision"],
        "pseudo_recall": res["pseudo_recall"],
        "losses": {k: state.loss_sums[k] / state.loss_counts[k] for k in sorted(state.loss_sums)},
    }
    return row


# ---------------------------------------------------------------------------
# full experiment


def _train_iteration(state, sb, tb, step_callback=None):
    """One D step then one G step, sharing a single segmentation forward pass.

    G's parameters do not change during the D step, so the shared activations
    are bit-identical to what standalone train_step_D/train_step_G compute.
    """
    active = _active_terms(state)
    needs_target = any(active.values())
    fwd_s = nets.seg_forward(state.g, state.net_cfg, sb.X, want_cache=True)
    fwd_t = (nets.seg_forward(state.g, state.net_cfg, tb.X, want_cache=True)
             if needs_target else None)
    if active["out"] or active["adv"]:
        _d_step_core(state, fwd_s[0], fwd_t[0], sb, tb)
    if step_callback is not None:
        step_callback("D", state)
    g_fwd_t = fwd_t if (active["out"] or active["cls"] or active["adv"]
                        or active["point"]) else None
    values = _g_step_core(state, fwd_s, g_fwd_t, sb, tb)
    if step_callback is not None:
        step_callback("G", state)
    return values


def run_experiment(cfg, spec, dataset_root=None, step_callback=None):
    """Train one configuration end to end; returns (RunRecord, state).

    step_callback(kind, state), if given, fires after every "D" and "G" step
    and after each "eval"; it is for instrumentation only.
    """
    state = init_train_state(cfg, spec, dataset_root=dataset_root)
    record = RunRecord(meta={
        "config": _config_dict(cfg),
        "benchmark": asdict(spec),
        "miou_star_subset": list(miou_star_subset(spec)),
    })
    for i in range(cfg.total_iters):
        state.iteration = i
        sb, tb = sample_batches(state)
        _train_iteration(state, sb, tb, step_callback)
        state.iteration = i + 1
        if state.iteration == cfg.warmup_iters:
            state.warmup_pseudo_pr = _pseudo_pr_now(state)
        if state.iteration % cfg.eval_interval == 0 or state.iteration == cfg.total_iters:
            row = evaluate(state)
            record.rows.append(row)
            state.loss_sums.clear()
            state.loss_counts.clear()
            if step_callback is not None:
                step_callback("eval", state)
    if state.warmup_pseudo_pr is not None:
        record.meta["warmup_pseudo_pr"] = state.warmup_pseudo_pr
    return record, state


def _pseudo_pr_now(state):
    """Pseudo-label precision/recall of the current model on the eval scenes."""
    data = state.data.eval_target
    w = state.cfg.weights
    pseudo = []
    for start in range(0, len(data), _EVAL_CHUNK):
        outs = nets.seg_forward(state.g, state.net_cfg, data.X[start:start + _EVAL_CHUNK])
        for i in range(outs.A.shape[0]):
            p = losses.smooth_max_pool(outs.A[i], w.k)
            pseudo.append(losses.pseudo_weak_labels(p, w.T))
    pr = metrics.weak_label_pr(np.stack(pseudo), state.data.eval_oracle_y)
    return {"precision": pr["micro_precision"], "recall": pr["micro_recall"]}


def _config_dict(cfg):
    d = asdict(cfg)
    d["weights"] = asdict(cfg.weights)
    return d


def config_from_dict(d):
    d = dict(d)
    if d.get("weights") is not None:
        d["weights"] = LossWeights(**d["weights"])
    return TrainConfig(**d)
