"""Importance-driven routing between a main MLP path and task-specific side paths.

Positions whose mask entry is 1 go through the main path, the rest through
the selected side path. Masks come from a small score predictor: sampled with
Gumbel-Sigmoid noise during training, top-k binarized at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import DimensionError, Tensor, ops
from .engine.tensor import as_tensor, make

N_LEVELS = 8
MASK_THRESHOLD = 0.5
GUMBEL_TEMPERATURE = 1.0
BIAS_INIT_CLIP = 0.01


class ConfigurationError(ValueError):
    pass


class DomainError(ValueError):
    pass


def init_linear(store, name, cin, cout, rng, zero=False):
    bound = 1.0 / np.sqrt(cin)
    w = np.zeros((cin, cout)) if zero else rng.uniform(-bound, bound, size=(cin, cout))
    b = np.zeros(cout) if zero else rng.uniform(-bound, bound, size=cout)
    return store.add(f"{name}.w", w), store.add(f"{name}.b", b)


# ---------------------------------------------------------------- partial average

def partial_average(u):
    """Replace the latter half of the channels by their spatial mean.

    ``u`` is ``(N, H, W, C')`` or ``(H, W, C')``. With 0-based channel index
    ``c``, channels ``c >= C'/2`` become the per-image global average
    broadcast over ``H x W``; the first half passes through.
    """
    u = as_tensor(u)
    c = u.shape[-1]
    if c < 2 or c % 2:
        raise ConfigurationError(f"partial average needs an even channel count >= 2, got {c}")
    half = c // 2
    axes = (-3, -2)
    hw = u.shape[-3] * u.shape[-2]
    out = u.data.copy()
    out[..., half:] = u.data[..., half:].mean(axis=axes, keepdims=True)

    def bw(g):
        gin = g.copy()
        gin[..., half:] = g[..., half:].sum(axis=axes, keepdims=True) / u.dtype.type(hw)
        return (gin,)

    return make(out, (u,), bw)


# ---------------------------------------------------------------- ratio schedule

@dataclass(frozen=True)
class RatioSchedule:
    """Maps quality ``q`` in ``[1, q_max]`` to the main-path ratio with an inverse-log curve."""

    beta: float = 5.0
    q_max: int = 8

    def __post_init__(self):
        if not self.beta > 1:
            raise ConfigurationError(f"beta must exceed 1, got {self.beta}")
        if self.q_max < 2:
            raise ConfigurationError(f"q_max must be at least 2, got {self.q_max}")


def ratio_from_quality(q, sched=RatioSchedule()):
    if not 1 <= q <= sched.q_max:
        raise DomainError(f"quality {q} outside [1, {sched.q_max}]")
    return (sched.beta ** ((q - 1) / (sched.q_max - 1)) - 1) / (sched.beta - 1)


def ratio_decoder(alpha):
    if not 0 <= alpha <= 1:
        raise DomainError(f"alpha {alpha} outside [0, 1]")
    return 1.0 - alpha


# ---------------------------------------------------------------- paths

class Path:
    """Two-layer MLP applied per position.

    ``bottleneck`` narrows to ``C/2`` channels, ``inverted_bottleneck``
    widens to ``2C``; GELU sits between the layers. ``evaluations`` counts
    positions processed, which lets callers check that routing neither drops
    nor duplicates positions.
    """

    KINDS = {"bottleneck": 0.5, "inverted_bottleneck": 2.0}

    def __init__(self, store, name, kind, channels, rng, zero_out=False):
        if kind not in self.KINDS:
            raise ConfigurationError(f"unknown path kind {kind!r}")
        if kind == "bottleneck" and channels % 2:
            raise ConfigurationError("bottleneck path needs an even channel count")
        self.name, self.kind, self.channels = name, kind, channels
        self.hidden = int(channels * self.KINDS[kind])
        self.w1, self.b1 = init_linear(store, f"{name}.fc1", channels, self.hidden, rng)
        self.w2, self.b2 = init_linear(store, f"{name}.fc2", self.hidden, channels, rng, zero=zero_out)
        self.evaluations = 0

    @property
    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self):
        return sum(t.size for t in self.tensors)

    def __call__(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.channels:
            raise DimensionError(f"path {self.name} expects {self.channels} channels, got {x.shape[-1]}")
        self.evaluations += int(np.prod(x.shape[:-1]))
        return ops.linear(ops.gelu(ops.linear(x, self.w1, self.b1)), self.w2, self.b2)


def path_param_count(kind, channels):
    """Closed-form parameter count of a :class:`Path`."""
    hidden = int(channels * Path.KINDS[kind])
    return channels * hidden + hidden + hidden * channels + channels


# ---------------------------------------------------------------- predictor

class Predictor:
    """Three linear layers with a partial average after the first; outputs one score per position.

    ``bias`` holds one learnable logit offset per discrete training level of
    ``q`` (encoder) or ``alpha`` (decoder). It is only used when sampling
    training masks. With ``targets`` each entry starts at ``logit(target)``:
    under logistic noise ``P(b + N > 0) = sigmoid(b)``, so a fresh predictor
    already samples masks at the level's target ratio.
    """

    def __init__(self, store, name, channels, rng, n_levels=N_LEVELS, targets=None):
        hidden = channels // 2
        if hidden < 2 or hidden % 2:
            raise ConfigurationError(f"predictor hidden width {hidden} must be even and >= 2")
        self.name = name
        self.fc1 = init_linear(store, f"{name}.fc1", channels, hidden, rng)
        self.fc2 = init_linear(store, f"{name}.fc2", hidden, hidden, rng)
        self.fc3 = init_linear(store, f"{name}.fc3", hidden, 1, rng)
        init = np.zeros(n_levels)
        if targets is not None:
            t = np.clip(np.asarray(targets, np.float64), BIAS_INIT_CLIP, 1 - BIAS_INIT_CLIP)
            init = np.log(t) - np.log1p(-t)
        self.bias = store.add(f"{name}.bias", init)

    def scores(self, x):
        h = ops.linear(x, *self.fc1)
        h = ops.gelu(ops.linear(partial_average(h), *self.fc2))
        return ops.linear(h, *self.fc3)


def predict_scores(x, predictor):
    return predictor.scores(x)


def logistic_noise(rng, shape, dtype=np.float64):
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return (np.log(u) - np.log1p(-u)).astype(dtype)


def sample_mask_train(scores, predictor, level_index, rng, temperature=GUMBEL_TEMPERATURE,
                      threshold=MASK_THRESHOLD):
    """Hard Gumbel-Sigmoid mask whose gradient is that of the soft sample.

    The level bias shifts the logits, logistic noise perturbs them, and the
    sigmoid output is thresholded at ``threshold``.
    """
    n = predictor.bias.shape[0]
    if not 0 <= level_index < n:
        raise DomainError(f"level index {level_index} outside [0, {n})")
    logits = ops.add(scores, predictor.bias[level_index])
    return gumbel_sigmoid(logits, rng, temperature, threshold)


def gumbel_sigmoid(logits, rng, temperature=GUMBEL_TEMPERATURE, threshold=MASK_THRESHOLD):
    logits = as_tensor(logits)
    noise = logistic_noise(rng, logits.shape, logits.dtype)
    soft = ops.sigmoid(ops.mul(ops.add(logits, noise), 1.0 / temperature))
    return ops.straight_through(soft.data > threshold, soft)


def binarize_mask_infer(scores, rho):
    """Top-``round(rho*H*W)`` positions per image set to 1; ties go to the lower raster index.

    ``scores`` is ``(H, W)``, ``(H, W, 1)`` or ``(N, H, W, 1)``; the result
    is boolean with the spatial layout of the input (channel axis dropped).
    """
    if not 0 <= rho <= 1:
        raise DomainError(f"ratio {rho} outside [0, 1]")
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    if s.ndim == 2:
        s = s[None, ..., None]
        squeeze = 2
    elif s.ndim == 3:
        s = s[None]
        squeeze = 1
    else:
        squeeze = 0
    n, h, w, _ = s.shape
    k = int(np.floor(rho * h * w + 0.5))
    flat = s.reshape(n, h * w)
    mask = np.zeros((n, h * w), dtype=bool)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, order, True, axis=1)
    mask = mask.reshape(n, h, w)
    return mask[0] if squeeze else mask


# ---------------------------------------------------------------- routing

def mpa_apply(x, mask, main, side):
    """Route positions by ``mask``: ones through ``main``, zeros through ``side``.

    Each path only sees its own positions; outputs are scattered back to the
    original layout.
    """
    x = as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {m.shape} does not match features {x.shape[:-1]}")
    if m.all():
        return main(x)
    if not m.any():
        return side(x)
    c = x.shape[-1]
    flat = ops.reshape(x, (-1, c))
    m = m.reshape(-1)
    on, off = np.flatnonzero(m), np.flatnonzero(~m)
    y1 = main(ops.take_rows(flat, on))
    y2 = side(ops.take_rows(flat, off))
    out = ops.scatter_rows(m.size, [(on, y1), (off, y2)])
    return ops.reshape(out, x.shape[:-1] + (out.shape[-1],))


def dense_aggregate(x, mask, main, side):
    """``M * main(x) + (1 - M) * side(x)``; differentiable in ``mask``."""
    mask = as_tensor(mask)
    if mask.ndim == x.ndim - 1:
        mask = ops.reshape(mask, mask.shape + (1,))
    return ops.add(ops.mul(mask, main(x)), ops.mul(ops.sub(1.0, mask), side(x)))


# ---------------------------------------------------------------- block

class MultiPathBlock:
    """Scaling-factor-wrapped transformer-style block whose MLP is multi-path.

    ``x -> s*x -> (+ mixer(LN)) -> (+ MLP routed by mask (LN)) -> / s``.
    The token mixer is a depthwise 3x3 convolution. Encoder blocks carry a
    single side path; decoder blocks register one per task.
    """

    def __init__(self, store, name, channels, rng, main_kind="inverted_bottleneck"):
        self.name, self.channels = name, channels
        self.ln1 = (store.add(f"{name}.ln1.g", np.ones(channels)), store.add(f"{name}.ln1.b", np.zeros(channels)))
        self.ln2 = (store.add(f"{name}.ln2.g", np.ones(channels)), store.add(f"{name}.ln2.b", np.zeros(channels)))
        self.mix_k = store.add(f"{name}.mix.k", rng.normal(0, 1.0 / 3, size=(3, 3, channels)))
        self.mix_b = store.add(f"{name}.mix.b", np.zeros(channels))
        self.main = Path(store, f"{name}.main", main_kind, channels, rng)
        self.sides = {}

    def add_side(self, store, task, kind, rng, init_from=None):
        path = Path(store, f"{self.name}.side.{task}", kind, channels=self.channels, rng=rng,
                    zero_out=init_from is None)
        if init_from is not None:
            for dst, src in zip(path.tensors, init_from.tensors):
                dst.data = src.data.copy()
        self.sides[task] = path
        return path

    def __call__(self, x, scale, mask=None, side=None, dense=False):
        h = ops.mul(x, scale)
        h = ops.add(h, ops.depthwise_conv2d(ops.layer_norm(h, *self.ln1), self.mix_k, self.mix_b))
        u = ops.layer_norm(h, *self.ln2)
        if mask is None:
            mlp = self.main(u)
        else:
            path = self.sides[side]
            mlp = dense_aggregate(u, mask, self.main, path) if dense else mpa_apply(u, mask, self.main, path)
        return ops.div(ops.add(h, mlp), scale)
