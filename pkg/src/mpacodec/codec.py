"""Variable-rate analysis/synthesis networks and the mean-scale hyperprior."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .engine import DimensionError, ParameterStore, Tensor, no_grad, ops
from .engine.tensor import as_tensor
from .mpa import (N_LEVELS, ConfigurationError, DomainError, MultiPathBlock, Path,
                  Predictor, RatioSchedule, binarize_mask_infer, ratio_decoder,
                  ratio_from_quality, sample_mask_train)

SIGMA_MIN = 0.11
LIKELIHOOD_FLOOR = 1e-9
MPA_STAGES = (1, 2, 3)

# side-path kind per decoder task; human-vision paths are inverted bottlenecks
TASK_KINDS = {"mse": "inverted_bottleneck", "cls": "bottleneck", "seg": "bottleneck"}
TASKS = ("mse", "cls", "seg")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (32, 48, 64, 96)
    blocks: tuple = (1, 1, 2, 2)
    hyper_channels: int = 48
    q_max: int = N_LEVELS
    beta: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.blocks) != 4:
            raise ConfigurationError("the codec has exactly 4 stages")

    @property
    def schedule(self):
        return RatioSchedule(self.beta, self.q_max)

    @property
    def latent_channels(self):
        return self.channels[-1]

    def meta(self):
        return {
            "meta.channels": np.array(self.channels, np.float32),
            "meta.blocks": np.array(self.blocks, np.float32),
            "meta.hyper": np.array([self.hyper_channels, self.q_max, self.beta], np.float32),
        }

    @classmethod
    def from_meta(cls, state):
        hyper = state["meta.hyper"]
        return cls(channels=tuple(int(c) for c in state["meta.channels"]),
                   blocks=tuple(int(b) for b in state["meta.blocks"]),
                   hyper_channels=int(hyper[0]), q_max=int(hyper[1]), beta=float(hyper[2]))


# ---------------------------------------------------------------- scaling factors

class ScalingTable:
    """Per-quality channel gains, stored as logs so they stay positive under any update."""

    def __init__(self, store, name, channels, q_max, init_log=None):
        if init_log is None:
            init_log = np.zeros((q_max, channels))
        self.q_max = q_max
        self.log_s = store.add(name, np.broadcast_to(np.asarray(init_log, float), (q_max, channels)).copy())

    def vectors(self):
        return np.exp(self.log_s.data)

    def __call__(self, q):
        return sf_interpolate(q, self)


def sf_interpolate(q, table):
    """Scaling vector for quality ``q``: stored entry at integers, geometric blend in between."""
    if not 1 <= q <= table.q_max:
        raise DomainError(f"quality {q} outside [1, {table.q_max}]")
    lo = int(np.floor(q))
    frac = q - lo
    if frac == 0:
        return ops.exp(table.log_s[lo - 1])
    hi = lo + 1
    # s_lo^(1-f) * s_hi^f, evaluated in log space
    return ops.exp(ops.add(ops.mul(table.log_s[lo - 1], 1.0 - frac), ops.mul(table.log_s[hi - 1], frac)))


def _check_positive(s):
    data = s.data if isinstance(s, Tensor) else np.asarray(s)
    if not (data > 0).all():
        raise ValueError("scaling factors must be strictly positive")


def sf_modulate(x, s):
    _check_positive(s)
    return ops.mul(x, s)


def isf_modulate(x, s):
    _check_positive(s)
    return ops.div(x, s)


# ---------------------------------------------------------------- quantization & likelihoods

def quantize(y, mode, rng=None):
    """``noise``: add U(-0.5, 0.5); ``round_ste``: round with identity gradient; ``round``: plain rounding."""
    y = as_tensor(y)
    if mode == "noise":
        u = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
        return ops.add(y, u)
    if mode == "round_ste":
        return ops.round_ste(y)
    if mode == "round":
        return Tensor(ops.round_half_away(y.data), dtype=y.dtype)
    raise ValueError(f"unknown quantization mode {mode!r}")


def gaussian_likelihood(yhat, mu, sigma):
    """Mass of the unit bin around ``yhat`` under N(mu, sigma^2), floored at 1e-9."""
    v = ops.abs(ops.sub(yhat, mu))
    upper = ops.ndtr(ops.div(ops.sub(0.5, v), sigma))
    lower = ops.ndtr(ops.div(ops.sub(-0.5, v), sigma))
    return ops.lower_bound(ops.sub(upper, lower), LIKELIHOOD_FLOOR)


def logistic_likelihood(zhat, loc, scale):
    """Mass of the unit bin around ``zhat`` under a logistic(loc, scale), floored at 1e-9."""
    v = ops.abs(ops.sub(zhat, loc))
    upper = ops.sigmoid(ops.div(ops.sub(0.5, v), scale))
    lower = ops.sigmoid(ops.div(ops.sub(-0.5, v), scale))
    return ops.lower_bound(ops.sub(upper, lower), LIKELIHOOD_FLOOR)


def estimate_rate(likelihoods, pixel_count):
    """Bits per pixel: total ``-log2 p`` over all given likelihood tensors divided by ``pixel_count``."""
    if isinstance(likelihoods, (Tensor, np.ndarray)):
        likelihoods = [likelihoods]
    total = None
    for lik in likelihoods:
        lik = as_tensor(lik)
        if (lik.data <= 0).any():
            raise FloatingPointError("likelihoods must be positive")
        bits = ops.sum(ops.log(lik))
        total = bits if total is None else ops.add(total, bits)
    return ops.mul(total, -1.0 / (np.log(2.0) * pixel_count))


class HyperOutput(NamedTuple):
    yhat: Tensor
    zhat: Tensor
    mu: Tensor
    sigma: Tensor
    y_likelihoods: Tensor
    z_likelihoods: Tensor


# ---------------------------------------------------------------- model

def _conv_kernel(rng, k, cin, cout):
    bound = 1.0 / np.sqrt(k * k * cin)
    return rng.uniform(-bound, bound, size=(k, k, cin, cout))


@dataclass
class StageTrace:
    """Masks and path bookkeeping recorded during one forward pass."""

    masks: dict = field(default_factory=dict)       # stage -> mask (bool array or STE tensor)
    scores: dict = field(default_factory=dict)      # stage -> score map


class Codec:
    """Four-stage analysis/synthesis pair with scaling-factor modulation and MPA in stages 1-3.

    Stage ``k`` operates at ``1/2**k`` of the (padded) input resolution in
    both the encoder and the decoder. Encoder blocks route between the
    high-quality main path and one low-quality side path ``"lq"``; decoder
    blocks route between the perceptual main path and a registered task path.
    """

    def __init__(self, config=ModelConfig(), store=None):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(config.seed)
        st, C, qm = self.store, config.channels, config.q_max
        cins = (3,) + C[:-1]

        self.enc_down, self.enc_pred, self.enc_blocks, self.enc_sf = {}, {}, {}, {}
        for k in range(1, 5):
            c = C[k - 1]
            self.enc_down[k] = (st.add(f"enc.s{k}.down.w", _conv_kernel(rng, 3, cins[k - 1], c)),
                                st.add(f"enc.s{k}.down.b", np.zeros(c)))
            if k in MPA_STAGES:
                self.enc_pred[k] = Predictor(st, f"enc.s{k}.pred", c, rng, targets=[
                    ratio_from_quality(q, config.schedule) for q in range(1, N_LEVELS + 1)])
            blocks, tables = [], []
            for j in range(config.blocks[k - 1]):
                blk = MultiPathBlock(st, f"enc.s{k}.b{j}", c, rng)
                if k in MPA_STAGES:
                    blk.add_side(st, "lq", "bottleneck", rng)
                blocks.append(blk)
                tables.append(ScalingTable(st, f"enc.s{k}.b{j}.sf", c, qm))
            self.enc_blocks[k], self.enc_sf[k] = blocks, tables
        ramp = np.linspace(-1.0, 1.0, qm)[:, None]
        self.latent_sf = ScalingTable(st, "enc.latent_sf", C[-1], qm, init_log=ramp)

        ch = config.hyper_channels
        self.ha_fc = (st.add("hyper.ha.fc.w", _conv_kernel(rng, 1, C[-1], ch)[0, 0]), st.add("hyper.ha.fc.b", np.zeros(ch)))
        self.ha_conv = (st.add("hyper.ha.conv.w", _conv_kernel(rng, 3, ch, ch)), st.add("hyper.ha.conv.b", np.zeros(ch)))
        self.hs_tconv = (st.add("hyper.hs.tconv.w", _conv_kernel(rng, 3, ch, ch)), st.add("hyper.hs.tconv.b", np.zeros(ch)))
        self.hs_fc = (st.add("hyper.hs.fc.w", _conv_kernel(rng, 1, ch, 2 * C[-1])[0, 0] * 0.1),
                      st.add("hyper.hs.fc.b", np.concatenate([np.zeros(C[-1]), np.ones(C[-1])])))
        self.z_loc = st.add("hyper.zprior.loc", np.zeros(ch))
        self.z_log_scale = st.add("hyper.zprior.log_scale", np.zeros(ch))

        self.dec_up, self.dec_pred, self.dec_blocks, self.dec_sf = {}, {}, {}, {}
        self.latent_isf = ScalingTable(st, "dec.latent_isf", C[-1], qm, init_log=ramp)
        couts = (3,) + C[:-1]
        for k in range(4, 0, -1):
            c = C[k - 1]
            blocks, tables = [], []
            for j in range(config.blocks[k - 1]):
                blocks.append(MultiPathBlock(st, f"dec.s{k}.b{j}", c, rng))
                tables.append(ScalingTable(st, f"dec.s{k}.b{j}.sf", c, qm))
            self.dec_blocks[k], self.dec_sf[k] = blocks, tables
            # tconv kernel layout is (k, k, C_out, C_in)
            self.dec_up[k] = (st.add(f"dec.s{k}.up.w", _conv_kernel(rng, 3, couts[k - 1], c)),
                              st.add(f"dec.s{k}.up.b", np.full(couts[k - 1], 0.5 if k == 1 else 0.0)))
            self.dec_pred[k] = {}
        self._rng = rng
        self.tasks = []

    # -------------------------------------------------------------- tasks

    def register_task(self, task, seed=None, init_from_main=None):
        """Add decoder side paths and per-stage predictors for ``task``.

        Side paths of the same kind as the main path start as copies of it
        (so an untrained task path reproduces the main path); others start
        with a zeroed output layer.
        """
        if task not in TASK_KINDS:
            raise ConfigurationError(f"unknown task {task!r}; expected one of {TASKS}")
        if task in self.tasks:
            raise ConfigurationError(f"task {task!r} already registered")
        kind = TASK_KINDS[task]
        if init_from_main is None:
            init_from_main = kind == "inverted_bottleneck"
        rng = np.random.default_rng(self.config.seed + 1000 + TASKS.index(task) if seed is None else seed)
        for k in MPA_STAGES:
            self.dec_pred[k][task] = Predictor(self.store, f"dec.s{k}.pred.{task}", self.config.channels[k - 1], rng,
                                               targets=[ratio_decoder(i / (N_LEVELS - 1)) for i in range(N_LEVELS)])
            for blk in self.dec_blocks[k]:
                blk.add_side(self.store, task, kind, rng, init_from=blk.main if init_from_main else None)
        self.tasks.append(task)

    def task_prefixes(self, task):
        """Name prefixes of every parameter added by :meth:`register_task`."""
        out = [f"dec.s{k}.pred.{task}." for k in MPA_STAGES]
        out += [f"{blk.name}.side.{task}." for k in MPA_STAGES for blk in self.dec_blocks[k]]
        return out

    # -------------------------------------------------------------- state

    def state(self):
        state = self.store.state()
        state.update(self.config.meta())
        return state

    @classmethod
    def from_state(cls, state):
        model = cls(ModelConfig.from_meta(state))
        registered = sorted({n.split(".")[4] for n in state if ".side." in n and n.startswith("dec.")},
                            key=TASKS.index)
        for task in registered:
            model.register_task(task)
        model.store.load_state({n: v for n, v in state.items() if n in model.store})
        return model

    def path_counters(self):
        """``{block name: (main evaluations, {side: evaluations})}``."""
        out = {}
        for blocks in list(self.enc_blocks.values()) + list(self.dec_blocks.values()):
            for blk in blocks:
                out[blk.name] = (blk.main.evaluations, {t: p.evaluations for t, p in blk.sides.items()})
        return out

    def reset_counters(self):
        for blocks in list(self.enc_blocks.values()) + list(self.dec_blocks.values()):
            for blk in blocks:
                blk.main.evaluations = 0
                for p in blk.sides.values():
                    p.evaluations = 0

    # -------------------------------------------------------------- analysis

    def encode_analysis(self, x, q, train=False, rng=None, trace=None):
        """Image ``(N, H, W, 3)`` in [0, 1] to latent ``y`` of shape ``(N, H/16, W/16, C4)``.

        Inference masks are top-k binarized at the ratio for ``q``; with
        ``train=True`` (integer ``q``) they are sampled with the level bias and
        both paths are evaluated densely so the mask receives gradients.
        """
        x = as_tensor(x)
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        if x.shape[1] % 16 or x.shape[2] % 16:
            raise DimensionError(f"input {x.shape[1]}x{x.shape[2]} must be padded to multiples of 16")
        rho = ratio_from_quality(q, self.config.schedule)
        h = x
        for k in range(1, 5):
            h = ops.conv2d(h, *self.enc_down[k], stride=2, padding=1)
            mask = None
            if k in MPA_STAGES:
                scores = self.enc_pred[k].scores(h)
                if train:
                    mask = sample_mask_train(scores, self.enc_pred[k], int(round(q)) - 1, rng)
                else:
                    mask = binarize_mask_infer(scores, rho)
                if trace is not None:
                    trace.masks[k], trace.scores[k] = mask, scores
            for blk, table in zip(self.enc_blocks[k], self.enc_sf[k]):
                h = blk(h, table(q), mask=mask, side="lq", dense=train)
        return ops.mul(h, self.latent_sf(q))

    # -------------------------------------------------------------- hyperprior

    def hyper_analysis(self, y):
        y = as_tensor(y)
        ph, pw = y.shape[1] % 2, y.shape[2] % 2
        if ph or pw:
            y = _pad_tensor(y, ph, pw)
        t = ops.gelu(ops.linear(y, *self.ha_fc))
        return ops.conv2d(t, *self.ha_conv, stride=2, padding=1)

    def hyper_synthesis(self, zhat, y_hw):
        t = ops.gelu(ops.conv_transpose2d(zhat, *self.hs_tconv, stride=2, padding=1))
        if t.shape[1:3] != tuple(y_hw):
            t = t[:, : y_hw[0], : y_hw[1]]
        p = ops.linear(t, *self.hs_fc)
        c = self.config.latent_channels
        mu = p[..., :c]
        sigma = ops.lower_bound(ops.softplus(p[..., c:]), SIGMA_MIN)
        return mu, sigma

    def z_likelihood(self, zhat):
        return logistic_likelihood(zhat, self.z_loc, ops.exp(self.z_log_scale))

    def hyper_rates(self, y, train=False, rng=None):
        """Quantize ``y`` and its hyper-latent; return both with their likelihoods.

        Training uses additive noise for the likelihoods and straight-through
        rounding for the values passed on; inference rounds.
        """
        y = as_tensor(y)
        z = self.hyper_analysis(y)
        if train:
            zhat = quantize(z, "round_ste")
            z_for_rate = quantize(z, "noise", rng)
            yhat = quantize(y, "round_ste")
            y_for_rate = quantize(y, "noise", rng)
        else:
            zhat = z_for_rate = quantize(z, "round")
            yhat = y_for_rate = quantize(y, "round")
        mu, sigma = self.hyper_synthesis(zhat, y.shape[1:3])
        return HyperOutput(yhat, zhat, mu, sigma,
                           gaussian_likelihood(y_for_rate, mu, sigma), self.z_likelihood(z_for_rate))

    # -------------------------------------------------------------- synthesis

    def decode_synthesis(self, yhat, q, alpha=0.0, task=None, train=False, rng=None, trace=None, clamp=True):
        """Latent to image in [0, 1].

        Stages 1-3 route with ratio ``1 - alpha`` between the perceptual main
        path and the side path of ``task``; with no task registered (or
        ``task=None``) every position takes the main path.
        """
        rho = ratio_decoder(alpha)
        if task is not None and task not in self.tasks:
            raise DomainError(f"task {task!r} is not registered (have {self.tasks})")
        h = isf_modulate(as_tensor(yhat), self.latent_isf(q))
        for k in range(4, 0, -1):
            mask = None
            if k in MPA_STAGES and task is not None:
                pred = self.dec_pred[k][task]
                scores = pred.scores(h)
                if train:
                    mask = sample_mask_train(scores, pred, int(round(alpha * (N_LEVELS - 1))), rng)
                else:
                    mask = binarize_mask_infer(scores, rho)
                if trace is not None:
                    trace.masks[k], trace.scores[k] = mask, scores
            elif k in MPA_STAGES and trace is not None:
                trace.masks[k] = np.ones(h.shape[:3], dtype=bool)
            for blk, table in zip(self.dec_blocks[k], self.dec_sf[k]):
                h = blk(h, table(q), mask=mask, side=task, dense=train)
            h = ops.conv_transpose2d(h, *self.dec_up[k], stride=2, padding=1)
        return ops.clamp(h, 0.0, 1.0) if clamp else h

    # -------------------------------------------------------------- inference helpers

    def compress_latents(self, x, q):
        """Inference: padded image batch to ``HyperOutput`` (no graph)."""
        with no_grad():
            y = self.encode_analysis(x, q)
            return self.hyper_rates(y)

    def latents_from_z(self, zhat, y_hw):
        with no_grad():
            return self.hyper_synthesis(as_tensor(zhat), y_hw)


def _pad_tensor(y, ph, pw):
    n, h, w, c = y.shape
    if pw:
        y = ops.concat([y, Tensor(np.zeros((n, h, pw, c)), dtype=y.dtype)], axis=2)
    if ph:
        y = ops.concat([y, Tensor(np.zeros((n, ph, y.shape[2], c)), dtype=y.dtype)], axis=1)
    return y


def pad_image(img, multiple=16):
    """Replicate-edge pad an ``(H, W, C)`` image so both extents are multiples of ``multiple``."""
    h, w = img.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
