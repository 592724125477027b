"""Two-branch gated fusion head with hand-derived backprop and Adam.

The head fuses a token-style branch (a class vector plus a spatial grid of
the same width) with a convolutional branch (a wider spatial grid):

1. ``f_dino`` = class vector + spatial mean of its grid (width C).
2. ``f_res``  = linear projection of the spatial mean of the conv grid
   (width C_res -> C), i.e. average pooling followed by a 1x1 convolution.
3. The two vectors are stacked as a 2-channel, length-C sequence and run
   through three pointwise 1-D convolutions (2->h, h->h, h->2); the first
   two are each followed by ReLU and dropout. A softmax across the two
   channels at every position yields per-element gates ``a_dino`` and
   ``a_res`` that sum to 1, and the fused vector is the elementwise convex
   combination ``a_dino * f_dino + a_res * f_res``.
4. A fully connected layer maps the fused vector to 3 logits; training
   minimizes cross-entropy on the stable softmax of those logits.

Everything is float64 numpy. Gradients are derived analytically for every
parameter (no autodiff); ``backward`` recomputes the forward pass under the
same dropout seed so the two always agree. Functions accept a single sample
(no leading axis) or a batch (leading axis N).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import ClassLabel
from .metrics import MetricReport

__all__ = [
    "HeadConfig",
    "FULL_SCALE_SHAPE",
    "AlignParams",
    "GatingParams",
    "HeadParams",
    "HeadGrads",
    "FeatureBundle",
    "ForwardPass",
    "AdamState",
    "DivergenceError",
    "TrainSpec",
    "TrainResult",
    "init_head",
    "combine_dino",
    "align_res",
    "gate_forward",
    "classify",
    "ce_loss",
    "head_forward",
    "backward",
    "adam_step",
    "grad_check",
    "make_synthetic_features",
    "train_toy",
    "params_to_json",
    "params_from_json",
    "write_bundle_csv",
    "read_bundle_csv",
]

LOSS_FLOOR = 1e-12
HEAD_FORMAT = "gjeval-head-v1"


@dataclass(frozen=True)
class HeadConfig:
    """Dimensions and regularization of the head.

    Defaults are a compact shape for experimentation; ``FULL_SCALE_SHAPE`` holds
    the full-scale preset (ViT-S/14 token width 384, ResNet-50 stage-5 width
    2048 with their grids at 448x448 input).
    """

    c_dino: int = 64
    c_res: int = 96
    grid_dino: tuple[int, int] = (2, 2)
    grid_res: tuple[int, int] = (2, 2)
    hidden: int = 8
    dropout: float = 0.1
    n_classes: int = 3

    def __post_init__(self):
        if min(self.c_dino, self.c_res, self.hidden) < 1:
            raise ValueError("all widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


FULL_SCALE_SHAPE = HeadConfig(c_dino=384, c_res=2048, grid_dino=(32, 32), grid_res=(14, 14))


@dataclass
class AlignParams:
    """Pool-then-project parameters for the conv branch: (C_res, C) weight + C bias."""

    w: np.ndarray
    b: np.ndarray


@dataclass
class GatingParams:
    """Three pointwise conv layers (2->h, h->h, h->2) and the dropout rate."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    dropout: float = 0.1


@dataclass
class HeadParams:
    """All trainable parameters of the head."""

    config: HeadConfig
    align: AlignParams
    gating: GatingParams
    cls_w: np.ndarray
    cls_b: np.ndarray

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, array) ordering shared by Adam and the gradient check."""
        return [
            ("align_w", self.align.w),
            ("align_b", self.align.b),
            ("gate_w1", self.gating.w1),
            ("gate_b1", self.gating.b1),
            ("gate_w2", self.gating.w2),
            ("gate_b2", self.gating.b2),
            ("gate_w3", self.gating.w3),
            ("gate_b3", self.gating.b3),
            ("cls_w", self.cls_w),
            ("cls_b", self.cls_b),
        ]

    def copy(self) -> "HeadParams":
        return HeadParams(
            config=self.config,
            align=AlignParams(self.align.w.copy(), self.align.b.copy()),
            gating=GatingParams(
                self.gating.w1.copy(), self.gating.b1.copy(),
                self.gating.w2.copy(), self.gating.b2.copy(),
                self.gating.w3.copy(), self.gating.b3.copy(),
                self.gating.dropout,
            ),
            cls_w=self.cls_w.copy(),
            cls_b=self.cls_b.copy(),
        )


@dataclass
class HeadGrads:
    """Gradients, one array per parameter, same shapes as HeadParams."""

    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


@dataclass(frozen=True)
class FeatureBundle:
    """Input features for one sample (or a batch, with a leading axis).

    f_cls: (..., C); f_grid_dino: (..., H, W, C); f_grid_res: (..., H2, W2, C_res).
    """

    f_cls: np.ndarray
    f_grid_dino: np.ndarray
    f_grid_res: np.ndarray

    @property
    def batched(self) -> bool:
        return self.f_cls.ndim == 2


@dataclass(frozen=True)
class ForwardPass:
    """Forward activations of interest; shapes follow the input batching."""

    f_dino: np.ndarray
    f_res: np.ndarray
    a_dino: np.ndarray
    a_res: np.ndarray
    f_fus: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


class DivergenceError(RuntimeError):
    """Raised when training hits a non-finite loss."""

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at optimization step {step}")


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    lim = math.sqrt(1.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


def init_head(config: HeadConfig, seed: int = 0) -> HeadParams:
    """Seeded initialization: weights uniform in +-sqrt(1/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    h = config.hidden
    align = AlignParams(
        w=_uniform_fan_in(rng, (config.c_res, config.c_dino), config.c_res),
        b=np.zeros(config.c_dino),
    )
    gating = GatingParams(
        w1=_uniform_fan_in(rng, (h, 2), 2),
        b1=np.zeros(h),
        w2=_uniform_fan_in(rng, (h, h), h),
        b2=np.zeros(h),
        w3=_uniform_fan_in(rng, (2, h), h),
        b3=np.zeros(2),
        dropout=config.dropout,
    )
    cls_w = _uniform_fan_in(rng, (config.c_dino, config.n_classes), config.c_dino)
    cls_b = np.zeros(config.n_classes)
    return HeadParams(config=config, align=align, gating=gating, cls_w=cls_w, cls_b=cls_b)


def combine_dino(f_grid_dino: np.ndarray, f_cls: np.ndarray) -> np.ndarray:
    """Token-branch feature: class vector plus the spatial mean of its grid."""
    grid = np.asarray(f_grid_dino, dtype=np.float64)
    cls = np.asarray(f_cls, dtype=np.float64)
    return cls + grid.mean(axis=(-3, -2))


def align_res(f_grid_res: np.ndarray, align: AlignParams) -> np.ndarray:
    """Conv-branch feature: spatial mean pooling then a linear (1x1 conv) projection."""
    pooled = np.asarray(f_grid_res, dtype=np.float64).mean(axis=(-3, -2))
    return pooled @ align.w + align.b


def _dropout_masks(rng_seed: int, shape1, shape2, rate: float):
    if rate == 0.0:
        return np.ones(shape1), np.ones(shape2)
    rng = np.random.default_rng(rng_seed)
    keep = 1.0 - rate
    m1 = (rng.random(shape1) < keep).astype(np.float64) / keep
    m2 = (rng.random(shape2) < keep).astype(np.float64) / keep
    return m1, m2


def _gate_core(x: np.ndarray, g: GatingParams, training: bool, rng_seed: int) -> dict:
    """Gating network on a batched 2-channel sequence x of shape (N, 2, C)."""
    n, _, c = x.shape
    h = g.b1.size
    h1 = np.einsum("ac,ncx->nax", g.w1, x) + g.b1[None, :, None]
    a1 = np.maximum(h1, 0.0)
    if training:
        m1, m2 = _dropout_masks(rng_seed, (n, h, c), (n, h, c), g.dropout)
    else:
        m1 = m2 = None
    a1d = a1 if m1 is None else a1 * m1
    h2 = np.einsum("ab,nbx->nax", g.w2, a1d) + g.b2[None, :, None]
    a2 = np.maximum(h2, 0.0)
    a2d = a2 if m2 is None else a2 * m2
    z = np.einsum("ab,nbx->nax", g.w3, a2d) + g.b3[None, :, None]
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    s = e / e.sum(axis=1, keepdims=True)
    return {"x": x, "h1": h1, "a1d": a1d, "m1": m1, "h2": h2, "a2d": a2d, "m2": m2, "s": s}


def gate_forward(
    f_dino: np.ndarray,
    f_res: np.ndarray,
    gating: GatingParams,
    training: bool = False,
    rng_seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-element gates and the fused vector.

    Returns (a_dino, a_res, f_fus); the gates are softmax outputs across the
    two channels, so a_dino + a_res == 1 elementwise and the fusion is a
    convex combination of the two branch features.
    """
    fd = np.asarray(f_dino, dtype=np.float64)
    fr = np.asarray(f_res, dtype=np.float64)
    single = fd.ndim == 1
    if single:
        fd, fr = fd[None], fr[None]
    x = np.stack([fd, fr], axis=1)
    cache = _gate_core(x, gating, training, rng_seed)
    a_dino = cache["s"][:, 0, :]
    a_res = cache["s"][:, 1, :]
    f_fus = a_dino * fd + a_res * fr
    if single:
        return a_dino[0], a_res[0], f_fus[0]
    return a_dino, a_res, f_fus


def classify(f_fus: np.ndarray, params: HeadParams) -> tuple[np.ndarray, np.ndarray]:
    """Logits and stable-softmax probabilities from the fused vector."""
    f = np.asarray(f_fus, dtype=np.float64)
    logits = f @ params.cls_w + params.cls_b
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    return logits, probs


def ce_loss(probs: np.ndarray, truth) -> float | np.ndarray:
    """Cross-entropy of the true class, with the probability floored at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        return float(-np.log(max(p[int(truth)], LOSS_FLOOR)))
    t = np.asarray(truth, dtype=np.int64)
    picked = p[np.arange(p.shape[0]), t]
    return -np.log(np.maximum(picked, LOSS_FLOOR))


def _as_batch(bundle: FeatureBundle) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    fc = np.asarray(bundle.f_cls, dtype=np.float64)
    gd = np.asarray(bundle.f_grid_dino, dtype=np.float64)
    gr = np.asarray(bundle.f_grid_res, dtype=np.float64)
    single = fc.ndim == 1
    if single:
        fc, gd, gr = fc[None], gd[None], gr[None]
    return fc, gd, gr, single


def _forward(params: HeadParams, fc, gd, gr, training: bool, rng_seed: int) -> dict:
    pooled_r = gr.mean(axis=(1, 2))
    f_dino = fc + gd.mean(axis=(1, 2))
    f_res = pooled_r @ params.align.w + params.align.b
    x = np.stack([f_dino, f_res], axis=1)
    cache = _gate_core(x, params.gating, training, rng_seed)
    s = cache["s"]
    a_dino, a_res = s[:, 0, :], s[:, 1, :]
    f_fus = a_dino * f_dino + a_res * f_res
    logits = f_fus @ params.cls_w + params.cls_b
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    cache.update(
        pooled_r=pooled_r, f_dino=f_dino, f_res=f_res,
        a_dino=a_dino, a_res=a_res, f_fus=f_fus, logits=logits, probs=probs,
    )
    return cache


def head_forward(
    params: HeadParams, bundle: FeatureBundle, training: bool = False, rng_seed: int = 0
) -> ForwardPass:
    """Full forward pass; single samples come back without the batch axis."""
    fc, gd, gr, single = _as_batch(bundle)
    c = _forward(params, fc, gd, gr, training, rng_seed)
    pick = (lambda a: a[0]) if single else (lambda a: a)
    return ForwardPass(
        f_dino=pick(c["f_dino"]), f_res=pick(c["f_res"]),
        a_dino=pick(c["a_dino"]), a_res=pick(c["a_res"]),
        f_fus=pick(c["f_fus"]), logits=pick(c["logits"]), probs=pick(c["probs"]),
    )


def _loss_and_grads(
    params: HeadParams, fc, gd, gr, truths: np.ndarray,
    training: bool, rng_seed: int, reduction: str,
) -> tuple[float, HeadGrads]:
    """Batched analytic backward pass. ``reduction`` 'sum' or 'mean' sets how
    per-sample gradients combine; single samples with 'sum' give the plain
    per-sample gradient."""
    n = fc.shape[0]
    c = _forward(params, fc, gd, gr, training, rng_seed)
    probs = c["probs"]
    losses = -np.log(np.maximum(probs[np.arange(n), truths], LOSS_FLOOR))
    loss = float(losses.mean() if reduction == "mean" else losses.sum())

    # Softmax + cross-entropy collapse to (probs - onehot) at the logits.
    g_logits = probs.copy()
    g_logits[np.arange(n), truths] -= 1.0
    if reduction == "mean":
        g_logits /= n

    g_cls_w = c["f_fus"].T @ g_logits
    g_cls_b = g_logits.sum(axis=0)
    g_ffus = g_logits @ params.cls_w.T

    f_dino, f_res = c["f_dino"], c["f_res"]
    a_dino, a_res, s = c["a_dino"], c["a_res"], c["s"]

    # Fusion product: gradient reaches the gates and, directly, both branches.
    g_s = np.stack([g_ffus * f_dino, g_ffus * f_res], axis=1)
    # Softmax across the 2-channel axis: dL/dz = s * (g - sum_c g_c s_c).
    g_z = s * (g_s - (g_s * s).sum(axis=1, keepdims=True))

    gt = params.gating
    g_b3 = g_z.sum(axis=(0, 2))
    g_w3 = np.einsum("nax,nbx->ab", g_z, c["a2d"])
    g_a2 = np.einsum("ab,nax->nbx", gt.w3, g_z)
    if c["m2"] is not None:
        g_a2 = g_a2 * c["m2"]
    g_h2 = g_a2 * (c["h2"] > 0)
    g_b2 = g_h2.sum(axis=(0, 2))
    g_w2 = np.einsum("nax,nbx->ab", g_h2, c["a1d"])
    g_a1 = np.einsum("ab,nax->nbx", gt.w2, g_h2)
    if c["m1"] is not None:
        g_a1 = g_a1 * c["m1"]
    g_h1 = g_a1 * (c["h1"] > 0)
    g_b1 = g_h1.sum(axis=(0, 2))
    g_w1 = np.einsum("nax,ncx->ac", g_h1, c["x"])
    g_x = np.einsum("ac,nax->ncx", gt.w1, g_h1)

    g_fdino = g_ffus * a_dino + g_x[:, 0, :]
    g_fres = g_ffus * a_res + g_x[:, 1, :]

    g_align_w = c["pooled_r"].T @ g_fres
    g_align_b = g_fres.sum(axis=0)

    grads = HeadGrads(
        arrays={
            "align_w": g_align_w,
            "align_b": g_align_b,
            "gate_w1": g_w1,
            "gate_b1": g_b1,
            "gate_w2": g_w2,
            "gate_b2": g_b2,
            "gate_w3": g_w3,
            "gate_b3": g_b3,
            "cls_w": g_cls_w,
            "cls_b": g_cls_b,
        }
    )
    return loss, grads


def backward(
    bundle: FeatureBundle,
    truth,
    params: HeadParams,
    training: bool = False,
    rng_seed: int = 0,
    reduction: str = "sum",
) -> HeadGrads:
    """Analytic gradients of the cross-entropy loss for every parameter.

    Recomputes the forward pass internally; with ``training=True`` the same
    ``rng_seed`` reproduces the dropout masks, so gradients always match the
    forward pass they belong to.
    """
    fc, gd, gr, single = _as_batch(bundle)
    truths = np.atleast_1d(np.asarray(truth, dtype=np.int64))
    _, grads = _loss_and_grads(params, fc, gd, gr, truths, training, rng_seed, reduction)
    return grads


@dataclass
class AdamState:
    """Adam optimizer state: first/second moment buffers and the step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: HeadParams, lr: float = 1e-4) -> "AdamState":
        state = cls(lr=lr)
        for name, arr in params.param_items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(params: HeadParams, grads: HeadGrads, state: AdamState) -> tuple[HeadParams, AdamState]:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, arr in params.param_items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        arr -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def grad_check(
    params: HeadParams,
    bundle: FeatureBundle,
    truth: int,
    step: float = 1e-5,
    rng_seed: int = 0,
    training: bool = False,
) -> float:
    """Max relative error between analytic and central finite-difference
    gradients over every parameter entry.

    Relative error uses max(|analytic| + |numeric|, 1e-6) in the denominator
    so vanishing gradients compare on an absolute scale.
    """
    fc, gd, gr, _ = _as_batch(bundle)
    truths = np.atleast_1d(np.asarray(truth, dtype=np.int64))

    def loss_of(p: HeadParams) -> float:
        c = _forward(p, fc, gd, gr, training, rng_seed)
        probs = c["probs"]
        return float(-np.log(np.maximum(probs[np.arange(fc.shape[0]), truths], LOSS_FLOOR)).sum())

    _, grads = _loss_and_grads(params, fc, gd, gr, truths, training, rng_seed, "sum")
    worst = 0.0
    for name, arr in params.param_items():
        g = grads[name]
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + step
            up = loss_of(params)
            arr[ix] = orig - step
            down = loss_of(params)
            arr[ix] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = g[ix]
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            worst = max(worst, rel)
            it.iternext()
    return worst


@dataclass(frozen=True)
class TrainSpec:
    """Configuration of the synthetic training demonstration."""

    config: HeadConfig = HeadConfig()
    n_samples: int = 2000
    separation: float = 3.0
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-4
    seed: int = 0
    holdout_frac: float = 0.25
    shuffle_labels: bool = False


@dataclass(frozen=True)
class TrainResult:
    params: HeadParams
    log: tuple[dict, ...]
    report: MetricReport
    holdout_accuracy: float


def make_synthetic_features(
    config: HeadConfig, n: int, separation: float, seed: int, shuffle_labels: bool = False
) -> tuple[FeatureBundle, np.ndarray]:
    """Class-clustered synthetic features for the three input tensors.

    Each class gets its own center along a random orthonormal direction,
    scaled by ``separation``, in each tensor's space; unit-variance Gaussian
    noise is added per element. ``shuffle_labels`` keeps the features but
    permutes the labels, destroying all class signal (a chance-level control).
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % 3
    labels = labels[rng.permutation(n)]

    def centers(dim: int) -> np.ndarray:
        a = rng.normal(size=(dim, 3))
        if dim >= 3:
            dirs = np.linalg.qr(a)[0].T  # 3 orthonormal rows
        else:
            # fewer dimensions than classes: settle for unit-norm directions
            dirs = (a / np.linalg.norm(a, axis=0, keepdims=True)).T
        return separation * dirs  # (3, dim)

    c_cls = centers(config.c_dino)
    c_gd = centers(config.c_dino)
    c_gr = centers(config.c_res)
    hd, wd = config.grid_dino
    hr, wr = config.grid_res
    f_cls = c_cls[labels] + rng.normal(size=(n, config.c_dino))
    gd = c_gd[labels][:, None, None, :] + rng.normal(size=(n, hd, wd, config.c_dino))
    gr = c_gr[labels][:, None, None, :] + rng.normal(size=(n, hr, wr, config.c_res))
    if shuffle_labels:
        labels = labels[rng.permutation(n)]
    return FeatureBundle(f_cls=f_cls, f_grid_dino=gd, f_grid_res=gr), labels


def _accuracy(params: HeadParams, fb: FeatureBundle, labels: np.ndarray) -> float:
    fp = head_forward(params, fb)
    return float((fp.probs.argmax(axis=1) == labels).mean())


def train_toy(spec: TrainSpec) -> TrainResult:
    """Train the head on synthetic clustered features; fully deterministic per seed.

    Raises DivergenceError on a non-finite batch loss. The returned report
    evaluates the held-out split through the standard metrics pipeline.
    """
    seeds = np.random.SeedSequence(spec.seed).generate_state(4)
    data_seed, init_seed, shuffle_seed, dropout_seed = (int(s) for s in seeds)
    fb, labels = make_synthetic_features(
        spec.config, spec.n_samples, spec.separation, data_seed, spec.shuffle_labels
    )
    n_hold = max(1, int(round(spec.n_samples * spec.holdout_frac)))
    n_train = spec.n_samples - n_hold
    train_fb = FeatureBundle(fb.f_cls[:n_train], fb.f_grid_dino[:n_train], fb.f_grid_res[:n_train])
    hold_fb = FeatureBundle(fb.f_cls[n_train:], fb.f_grid_dino[n_train:], fb.f_grid_res[n_train:])
    y_train, y_hold = labels[:n_train], labels[n_train:]

    params = init_head(spec.config, init_seed)
    state = AdamState.for_params(params, lr=spec.lr)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    log: list[dict] = []
    global_step = 0
    for epoch in range(spec.epochs):
        order = shuffle_rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            fc = train_fb.f_cls[idx]
            gd = train_fb.f_grid_dino[idx]
            gr = train_fb.f_grid_res[idx]
            step_seed = (dropout_seed + 1000003 * global_step) % (2**63)
            # Divergence is detected by the explicit finiteness check below;
            # silence numpy's intermediate warnings from non-finite arithmetic.
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = _loss_and_grads(
                    params, fc, gd, gr, y_train[idx],
                    training=params.gating.dropout > 0, rng_seed=step_seed, reduction="mean",
                )
            if not math.isfinite(loss):
                raise DivergenceError(global_step, loss)
            adam_step(params, grads, state)
            epoch_loss += loss * idx.size
            global_step += 1
        log.append(
            {
                "epoch": epoch + 1,
                "train_loss": epoch_loss / n_train,
                "train_acc": _accuracy(params, train_fb, y_train),
                "holdout_acc": _accuracy(params, hold_fb, y_hold),
            }
        )

    fp = head_forward(params, hold_fb)
    report = _holdout_report(fp.probs, y_hold)
    acc = float((fp.probs.argmax(axis=1) == y_hold).mean())
    return TrainResult(params=params, log=tuple(log), report=report, holdout_accuracy=acc)


def _holdout_report(probs: np.ndarray, labels: np.ndarray) -> MetricReport:
    from .data import Dataset, PredictionRecord
    from .aggregate import evaluate

    records = [
        PredictionRecord(
            image_id=f"s{i:05d}",
            patient_id=f"s{i:05d}",
            truth=ClassLabel(int(labels[i])),
            probs=(float(probs[i, 0]), float(probs[i, 1]), float(probs[i, 2])),
        )
        for i in range(labels.size)
    ]
    return evaluate(Dataset.from_records(records), level="image")


def params_to_json(params: HeadParams) -> str:
    """Versioned JSON serialization; floats round-trip exactly."""
    doc = {
        "format": HEAD_FORMAT,
        "config": {
            "c_dino": params.config.c_dino,
            "c_res": params.config.c_res,
            "grid_dino": list(params.config.grid_dino),
            "grid_res": list(params.config.grid_res),
            "hidden": params.config.hidden,
            "dropout": params.config.dropout,
            "n_classes": params.config.n_classes,
        },
        "params": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
            for name, arr in params.param_items()
        },
    }
    return json.dumps(doc, indent=2)


def params_from_json(text: str) -> HeadParams:
    doc = json.loads(text)
    if doc.get("format") != HEAD_FORMAT:
        raise ValueError(f"unsupported head format {doc.get('format')!r}")
    cfg = doc["config"]
    config = HeadConfig(
        c_dino=cfg["c_dino"],
        c_res=cfg["c_res"],
        grid_dino=tuple(cfg["grid_dino"]),
        grid_res=tuple(cfg["grid_res"]),
        hidden=cfg["hidden"],
        dropout=cfg["dropout"],
        n_classes=cfg["n_classes"],
    )

    def arr(name: str) -> np.ndarray:
        entry = doc["params"][name]
        return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])

    return HeadParams(
        config=config,
        align=AlignParams(w=arr("align_w"), b=arr("align_b")),
        gating=GatingParams(
            w1=arr("gate_w1"), b1=arr("gate_b1"),
            w2=arr("gate_w2"), b2=arr("gate_b2"),
            w3=arr("gate_w3"), b3=arr("gate_b3"),
            dropout=config.dropout,
        ),
        cls_w=arr("cls_w"),
        cls_b=arr("cls_b"),
    )


def write_bundle_csv(ids: Sequence[str], labels: Sequence[int], dino: np.ndarray, res: np.ndarray) -> str:
    """Flat feature CSV with dino_/res_ column prefixes, one row per sample."""
    d = np.asarray(dino, dtype=np.float64)
    r = np.asarray(res, dtype=np.float64)
    header = (
        ["id", "label"]
        + [f"dino_{i}" for i in range(d.shape[1])]
        + [f"res_{i}" for i in range(r.shape[1])]
    )
    lines = [",".join(header)]
    for i, (sid, lab) in enumerate(zip(ids, labels)):
        vals = [sid, str(int(lab))] + [repr(float(v)) for v in d[i]] + [repr(float(v)) for v in r[i]]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def read_bundle_csv(text: str) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Parse a flat feature CSV back into (ids, labels, dino matrix, res matrix)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    if header[:2] != ["id", "label"]:
        raise ValueError("bundle CSV must start with id,label columns")
    dino_cols = [i for i, h in enumerate(header) if h.startswith("dino_")]
    res_cols = [i for i, h in enumerate(header) if h.startswith("res_")]
    if not dino_cols or not res_cols:
        raise ValueError("bundle CSV needs dino_ and res_ columns")
    ids, labels, dino, res = [], [], [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ValueError(f"row has {len(parts)} fields, expected {len(header)}")
        ids.append(parts[0])
        labels.append(int(parts[1]))
        dino.append([float(parts[i]) for i in dino_cols])
        res.append([float(parts[i]) for i in res_cols])
    return ids, np.array(labels, dtype=np.int64), np.array(dino), np.array(res)


def bundle_from_vectors(dino_vecs: np.ndarray, res_vecs: np.ndarray) -> FeatureBundle:
    """Treat flat per-branch vectors as a bundle: the dino vector is the class
    token with an all-zero grid, the res vector a 1x1 conv grid."""
    d = np.atleast_2d(np.asarray(dino_vecs, dtype=np.float64))
    r = np.atleast_2d(np.asarray(res_vecs, dtype=np.float64))
    n, c = d.shape
    return FeatureBundle(
        f_cls=d,
        f_grid_dino=np.zeros((n, 1, 1, c)),
        f_grid_res=r[:, None, None, :],
    )
