"""Losses and the two-stage optimization protocol.

Stage 1 trains encoder, decoder, entropy model and a conditional
discriminator jointly, with the adversarial term switched on for the second
half of the run. Stage 2 adds one decoder side path plus its predictors and
trains only those, everything else frozen.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import MPA_STAGES, TASKS, Codec, ModelConfig, StageTrace, estimate_rate
from .data import CLS_CLASSES, SEG_CLASSES, Batch, TextureStream, load_dataset, synthetic_textures
from .engine import Adam, ParameterStore, Tensor, backward, no_grad, ops, read_checkpoint, write_checkpoint
from .engine.tensor import as_tensor
from .mpa import N_LEVELS, ConfigurationError, init_linear, ratio_decoder, ratio_from_quality

log = logging.getLogger(__name__)

D_CLAMP = 1e-6
PROXY_SEED = 20240229


@dataclass(frozen=True)
class LossWeights:
    rate: tuple = (18.0, 9.32, 4.83, 2.5, 1.3, 0.67, 0.35, 0.18)
    gan: float = 2.56
    perc: float = 4.26
    task: float = 1.0
    ratio: float = 10.0

    def __post_init__(self):
        r = np.asarray(self.rate)
        if len(r) != N_LEVELS or not (r > 0).all() or not (np.diff(r) < 0).all():
            raise ConfigurationError("rate weights must be 8 positive, strictly decreasing values")

    def rate_weight(self, q):
        """Weight for integer quality ``q`` in 1..8."""
        if int(q) != q or not 1 <= q <= N_LEVELS:
            raise ConfigurationError(f"rate weight needs an integer quality in [1, {N_LEVELS}], got {q}")
        return self.rate[int(q) - 1]


# ---------------------------------------------------------------- loss terms

def distortion_d(x, xhat):
    """``0.01 * MSE`` with pixel values on the 0..255 scale."""
    x, xhat = as_tensor(x), as_tensor(xhat)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return ops.mul(ops.mean(ops.square(ops.sub(x, xhat))), 0.01 * 255.0 ** 2)


def ratio_loss(masks, rho):
    """Mean over stages of ``(rho - mean(M))**2``."""
    masks = list(masks)
    if not masks:
        raise ValueError("ratio loss needs at least one stage mask")
    total = None
    for m in masks:
        term = ops.square(ops.sub(rho, ops.mean(m)))
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, 1.0 / len(masks))


def _conv_init(rng, k, cin, cout):
    bound = 1.0 / np.sqrt(k * k * cin)
    return rng.uniform(-bound, bound, size=(k, k, cin, cout))


class PerceptualProxy:
    """Frozen random three-layer conv feature extractor; distance is the mean of per-layer MSEs."""

    def __init__(self, seed=PROXY_SEED, widths=(8, 16, 16)):
        rng = np.random.default_rng(seed)
        cins = (3,) + widths[:-1]
        strides = (1, 2, 2)
        self.layers = [(Tensor(_conv_init(rng, 3, ci, co) * np.sqrt(3.0)), s)
                       for ci, co, s in zip(cins, widths, strides)]

    def features(self, x):
        h = as_tensor(x)
        out = []
        for i, (k, s) in enumerate(self.layers):
            h = ops.conv2d(h, k, stride=s, padding=1)
            if i < len(self.layers) - 1:
                h = ops.gelu(h)
            out.append(h)
        return out

    def __call__(self, x, xhat):
        fa, fb = self.features(x), self.features(xhat)
        total = None
        for a, b in zip(fa, fb):
            term = ops.mean(ops.square(ops.sub(a, b)))
            total = term if total is None else ops.add(total, term)
        return ops.mul(total, 1.0 / len(fa))


def perceptual_proxy(x, xhat, proxy=None):
    return (proxy or _default_proxy())(x, xhat)


_PROXY = []


def _default_proxy():
    if not _PROXY:
        _PROXY.append(PerceptualProxy())
    return _PROXY[0]


class Discriminator:
    """Conditional patch discriminator ``D(cond, image)`` with outputs in (0, 1).

    The latent condition is projected to a few channels, upsampled to image
    resolution and concatenated with the image.
    """

    def __init__(self, latent_channels, seed=0, cond_channels=4, widths=(16, 32), store=None):
        rng = np.random.default_rng(seed)
        self.store = store if store is not None else ParameterStore()
        st = self.store
        self.cond = init_linear(st, "disc.cond", latent_channels, cond_channels, rng)
        self.c1 = (st.add("disc.c1.w", _conv_init(rng, 3, 3 + cond_channels, widths[0])), st.add("disc.c1.b", np.zeros(widths[0])))
        self.c2 = (st.add("disc.c2.w", _conv_init(rng, 3, widths[0], widths[1])), st.add("disc.c2.b", np.zeros(widths[1])))
        self.out = init_linear(st, "disc.out", widths[1], 1, rng)

    def __call__(self, cond, img):
        img = as_tensor(img)
        cond = as_tensor(cond)
        c = ops.linear(cond, *self.cond)
        c = ops.upsample_nearest(c, img.shape[1] // cond.shape[1])
        h = ops.concat([img, c], axis=-1)
        h = ops.gelu(ops.conv2d(h, *self.c1, stride=2, padding=1))
        h = ops.gelu(ops.conv2d(h, *self.c2, stride=2, padding=1))
        return ops.sigmoid(ops.linear(h, *self.out))


def _nll(p):
    return ops.mean(ops.neg(ops.log(ops.clamp(p, D_CLAMP, 1.0 - D_CLAMP))))


def _nll_complement(p):
    return ops.mean(ops.neg(ops.log(ops.sub(1.0, ops.clamp(p, D_CLAMP, 1.0 - D_CLAMP)))))


def generator_loss(D, yhat, xhat):
    return _nll(D(yhat, xhat))


def discriminator_loss(D, yhat, xhat, y, x):
    """Fake term conditioned on the quantized latent, real term on the unquantized ``E(x)``."""
    return ops.add(_nll_complement(D(yhat, xhat)), _nll(D(y, x)))


def gan_losses(D, yhat, x, xhat, y=None):
    """``(L_G, L_D)``; ``y`` is the real-branch condition and defaults to ``yhat``."""
    return generator_loss(D, yhat, xhat), discriminator_loss(D, yhat, xhat, yhat if y is None else y, x)


# ---------------------------------------------------------------- frozen toy task models

class TaskModel:
    """Tiny classifier (``cls``) or per-pixel segmenter (``seg``) with fixed input normalization."""

    def __init__(self, kind, seed=0, store=None):
        if kind not in ("cls", "seg"):
            raise ConfigurationError(f"no toy task model for {kind!r}")
        rng = np.random.default_rng(seed)
        self.kind = kind
        self.store = store if store is not None else ParameterStore()
        p, st = f"taskmodel.{kind}", self.store
        if kind == "cls":
            w, out, self.strides = (8, 16), CLS_CLASSES, (2, 2)
        else:
            w, out, self.strides = (12, 12), SEG_CLASSES, (1, 1)
        self.c1 = (st.add(f"{p}.c1.w", _conv_init(rng, 3, 3, w[0])), st.add(f"{p}.c1.b", np.zeros(w[0])))
        self.c2 = (st.add(f"{p}.c2.w", _conv_init(rng, 3, w[0], w[1])), st.add(f"{p}.c2.b", np.zeros(w[1])))
        self.head = init_linear(st, f"{p}.head", w[1], out, rng)
        self.norm_mean = st.add(f"{p}.norm.mean", np.zeros(3), trainable=False)
        self.norm_std = st.add(f"{p}.norm.std", np.ones(3), trainable=False)

    def normalize(self, x):
        return ops.div(ops.sub(as_tensor(x), self.norm_mean), self.norm_std)

    def logits(self, x):
        h = self.normalize(x)
        h = ops.gelu(ops.conv2d(h, *self.c1, stride=self.strides[0], padding=1))
        h = ops.gelu(ops.conv2d(h, *self.c2, stride=self.strides[1], padding=1))
        if self.kind == "cls":
            h = ops.mean(h, axis=(1, 2))
        return ops.linear(h, *self.head)

    def loss(self, x, batch):
        return ops.cross_entropy(self.logits(x), batch.cls if self.kind == "cls" else batch.seg)

    def predict(self, x):
        with no_grad():
            return np.argmax(self.logits(x).data, axis=-1)

    def metric(self, x, batch):
        """Top-1 accuracy (cls) or mean IoU over present classes (seg)."""
        pred = self.predict(x)
        if self.kind == "cls":
            return float(np.mean(pred == batch.cls))
        return mean_iou(pred, batch.seg, SEG_CLASSES)

    def freeze(self):
        self.store.set_trainable(lambda name: False)
        return self


def mean_iou(pred, target, n_classes):
    ious = []
    for c in range(n_classes):
        union = np.sum((pred == c) | (target == c))
        if union:
            ious.append(np.sum((pred == c) & (target == c)) / union)
    return float(np.mean(ious))


def train_task_model(kind, seed=0, steps=400, batch=16, size=32, lr=1e-2):
    """Fit a toy task model on synthetic textures, then freeze it."""
    model = TaskModel(kind, seed)
    stats = synthetic_textures(64, size, seed + 7).images
    model.norm_mean.data = stats.mean(axis=(0, 1, 2)).astype(model.norm_mean.dtype)
    model.norm_std.data = stats.std(axis=(0, 1, 2)).astype(model.norm_std.dtype)
    opt = Adam(model.store.trainable(), lr=lr)
    stream = TextureStream(size, seed + 11)
    for _ in range(steps):
        b = stream.next(batch)
        opt.zero_grad()
        backward(model.loss(b.images, b))
        opt.step()
    return model.freeze()


def task_model_from_state(kind, state):
    model = TaskModel(kind)
    model.store.load_state({n: v for n, v in state.items() if n.startswith(f"taskmodel.{kind}.")})
    return model.freeze()


# ---------------------------------------------------------------- composite losses

def stage1_objective(w, q, rate, dist, perc, ratio, gan_g=None):
    """``lambda_r(q) r + d + lambda_perc L_perc + lambda_ratio L_ratio [+ lambda_G L_G]``."""
    total = ops.add(ops.add(ops.mul(rate, w.rate_weight(q)), dist),
                    ops.add(ops.mul(perc, w.perc), ops.mul(ratio, w.ratio)))
    return total if gan_g is None else ops.add(total, ops.mul(gan_g, w.gan))


def analysis_task_loss(w, ce, dist, perc):
    """Task loss of a machine-vision path: task cross-entropy plus ``d`` and the perceptual term."""
    return ops.add(ops.add(ce, dist), ops.mul(perc, w.perc))


def stage2_objective(w, q, rate, task_loss, ratio):
    return ops.add(ops.add(ops.mul(rate, w.rate_weight(q)), ops.mul(task_loss, w.task)),
                   ops.mul(ratio, w.ratio))


@dataclass
class LossReport:
    total: Tensor
    rate: float
    mse: float
    perc: float
    ratio: float
    task: float = float("nan")
    d_inputs: tuple | None = None
    extras: dict = field(default_factory=dict)


def stage1_loss(model, x, q, rng, weights=LossWeights(), D=None, gan=False, proxy=None):
    """Generator-side Stage-1 objective for integer ``q``.

    With ``gan`` the adversarial term is added and ``d_inputs`` carries the
    detached ``(yhat, xhat, y, x)`` for the discriminator step, so the two
    losses never share gradient targets.
    """
    x = as_tensor(x)
    n, h, w, _ = x.shape
    trace = StageTrace()
    y = model.encode_analysis(x, q, train=True, rng=rng, trace=trace)
    hyp = model.hyper_rates(y, train=True, rng=rng)
    xhat = model.decode_synthesis(hyp.yhat, q, alpha=0.0, task=None, train=True, rng=rng, clamp=False)
    rate = estimate_rate([hyp.y_likelihoods, hyp.z_likelihoods], n * h * w)
    dist = distortion_d(x, xhat)
    perc = perceptual_proxy(x, xhat, proxy)
    ratio = ratio_loss([trace.masks[k] for k in MPA_STAGES], ratio_from_quality(q, model.config.schedule))
    d_inputs = None
    extras = {}
    g = None
    if gan:
        g = generator_loss(D, hyp.yhat, xhat)
        d_inputs = (hyp.yhat.detach(), xhat.detach(), y.detach(), x)
        extras["gan_g"] = g.item()
    total = stage1_objective(weights, q, rate, dist, perc, ratio, g)
    return LossReport(total, rate.item(), dist.item() / (0.01 * 255.0 ** 2), perc.item(), ratio.item(),
                      d_inputs=d_inputs, extras=extras)


def stage2_loss(model, batch, q, alpha, task, rng, weights=LossWeights(), task_model=None, proxy=None):
    """Stage-2 objective: rate (constant under a frozen encoder), task loss and decoder ratio loss."""
    if task not in model.tasks:
        raise ConfigurationError(f"task {task!r} has no registered side path")
    if task != "mse" and task_model is None:
        raise ConfigurationError(f"task {task!r} needs a frozen task model")
    x = as_tensor(batch.images)
    n, h, w, _ = x.shape
    with no_grad():
        y = model.encode_analysis(x, q)
        hyp = model.hyper_rates(y, train=True, rng=rng)
        rate = estimate_rate([hyp.y_likelihoods, hyp.z_likelihoods], n * h * w)
    trace = StageTrace()
    xhat = model.decode_synthesis(hyp.yhat.detach(), q, alpha=alpha, task=task, train=True, rng=rng,
                                  trace=trace, clamp=False)
    dist = distortion_d(x, xhat)
    ratio = ratio_loss([trace.masks[k] for k in MPA_STAGES], ratio_decoder(alpha))
    if task == "mse":
        task_loss = dist
        perc_v = float("nan")
    else:
        perc = perceptual_proxy(x, xhat, proxy)
        task_loss = analysis_task_loss(weights, task_model.loss(xhat, batch), dist, perc)
        perc_v = perc.item()
    total = stage2_objective(weights, q, rate, task_loss, ratio)
    return LossReport(total, rate.item(), dist.item() / (0.01 * 255.0 ** 2), perc_v, ratio.item(),
                      task=task_loss.item())


# ---------------------------------------------------------------- runs

TRAIN_KEYS = {
    "stage": int, "task": str, "steps": int, "lr": float, "seed": int, "dataset": str,
    "init": str, "output": str, "metrics": str, "batch": int, "size": int, "eval_every": int,
    "task_model_steps": int,
}


@dataclass
class TrainRun:
    stage: int = 1
    task: str = "mse"
    steps: int = 20000
    lr: float = 1e-4
    seed: int = 0
    dataset: str = "synthetic"
    init: str = ""
    output: str = ""
    metrics: str = ""
    batch: int = 8
    size: int = 32
    eval_every: int = 500
    task_model_steps: int = 400

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage: must be 1 or 2, got {self.stage}")
        if self.stage == 2 and self.task not in TASKS:
            raise ConfigurationError(f"task: must be one of {TASKS}, got {self.task!r}")
        if self.steps < 1:
            raise ConfigurationError("steps: must be positive")
        if not self.lr > 0:
            raise ConfigurationError("lr: must be positive")
        if self.batch < 1:
            raise ConfigurationError("batch: must be positive")
        if self.size < 16 or self.size % 16:
            raise ConfigurationError("size: must be a positive multiple of 16")


def parse_config(text):
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys and bad values name the key."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in TRAIN_KEYS:
            raise ConfigurationError(f"{key}: unknown configuration key")
        try:
            values[key] = TRAIN_KEYS[key](value)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: cannot parse {value!r} as {TRAIN_KEYS[key].__name__}") from exc
    return TrainRun(**values)


def lr_at(step, steps, lr):
    """Base rate for the first 75% of steps, a tenth of it afterwards."""
    return lr if step < int(0.75 * steps) else lr * 0.1


class _Source:
    def __init__(self, run, seed):
        self.pool = None
        if run.dataset not in ("", "synthetic"):
            self.pool = load_dataset(run.dataset)
            self.rng = np.random.default_rng(seed)
        else:
            self.stream = TextureStream(run.size, seed)

    def next(self, n):
        if self.pool is None:
            return self.stream.next(n)
        return self.pool.subset(self.rng.integers(0, len(self.pool), size=n))


class MetricsLog:
    COLUMNS = ("step", "bpp", "mse", "proxy_perc", "ratio_loss", "task_metric")

    def __init__(self, path):
        self.path = Path(path) if path else None
        self.rows = []
        self._acc = []
        if self.path:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.COLUMNS)

    def add(self, report):
        self._acc.append((report.rate, report.mse, report.perc, report.ratio, report.task))

    def flush(self, step):
        if not self._acc:
            return
        row = [step] + [f"{v:.6g}" for v in _nanmean_cols(self._acc)]
        self.rows.append(row)
        self._acc = []
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(row)


def _nanmean_cols(rows):
    out = []
    for col in np.array(rows, np.float64).T:
        finite = col[~np.isnan(col)]
        out.append(finite.mean() if finite.size else float("nan"))
    return out


@dataclass
class Stage1Result:
    model: Codec
    discriminator: Discriminator
    metrics: MetricsLog


def train_stage1(run, config=ModelConfig(), progress=None):
    model = Codec(config)
    D = Discriminator(config.latent_channels, seed=run.seed + 1)
    rng = np.random.default_rng(run.seed)
    src = _Source(run, run.seed + 2)
    proxy = _default_proxy()
    w = LossWeights()
    g_opt = Adam(model.store.trainable(), lr=run.lr)
    d_opt = Adam(D.store.trainable(), lr=run.lr)
    metrics = MetricsLog(run.metrics)
    for step in range(run.steps):
        g_opt.lr = d_opt.lr = lr_at(step, run.steps, run.lr)
        q = int(rng.integers(1, N_LEVELS + 1))
        batch = src.next(run.batch)
        gan = step >= run.steps // 2
        D.store.set_trainable(lambda name: False)
        rep = stage1_loss(model, batch.images, q, rng, w, D=D, gan=gan, proxy=proxy)
        g_opt.zero_grad()
        backward(rep.total)
        g_opt.step()
        D.store.set_trainable(lambda name: True)
        if gan:
            # alternate: the discriminator steps on its own loss, over detached inputs
            d_opt.zero_grad()
            backward(discriminator_loss(D, *rep.d_inputs))
            d_opt.step()
        metrics.add(rep)
        if (step + 1) % run.eval_every == 0 or step + 1 == run.steps:
            metrics.flush(step + 1)
            if progress:
                progress(step + 1, metrics.rows[-1])
    if run.output:
        write_checkpoint(run.output, model.state())
    return Stage1Result(model, D, metrics)


def load_model(path_or_state):
    if isinstance(path_or_state, dict):
        state = path_or_state
    else:
        if not path_or_state or not Path(path_or_state).exists():
            raise ConfigurationError(f"init: checkpoint {path_or_state!r} not found")
        state = read_checkpoint(path_or_state)
    return Codec.from_state(state), state


@dataclass
class Stage2Result:
    model: Codec
    task_model: TaskModel | None
    metrics: MetricsLog
    frozen_digest_before: str
    frozen_digest_after: str
    trainable: int
    decoder_total: int

    @property
    def fraction(self):
        return self.trainable / self.decoder_total


def train_stage2(run, base=None, task_model=None, progress=None):
    """Clone a Stage-1 model, add the ``run.task`` side path and train only the new parameters."""
    base = base if base is not None else run.init
    if base is None or (isinstance(base, str) and not base):
        raise ConfigurationError("init: stage 2 requires a stage-1 checkpoint")
    model, state = load_model(base)
    if run.task in model.tasks:
        raise ConfigurationError(f"task: {run.task!r} already has a side path in the base checkpoint")
    model.register_task(run.task, seed=run.seed + 1000 + TASKS.index(run.task))
    prefixes = tuple(model.task_prefixes(run.task))
    model.store.set_trainable(lambda name: name.startswith(prefixes))
    frozen = lambda name: not name.startswith(prefixes)  # noqa: E731
    before = model.store.digest(frozen)
    if run.task != "mse" and task_model is None:
        if any(n.startswith(f"taskmodel.{run.task}.") for n in state):
            task_model = task_model_from_state(run.task, state)
        else:
            task_model = train_task_model(run.task, seed=run.seed, steps=run.task_model_steps, size=run.size)
    rng = np.random.default_rng(run.seed)
    src = _Source(run, run.seed + 2)
    proxy = _default_proxy()
    w = LossWeights()
    opt = Adam(model.store.trainable(), lr=run.lr)
    metrics = MetricsLog(run.metrics)
    for step in range(run.steps):
        opt.lr = lr_at(step, run.steps, run.lr)
        q = int(rng.integers(1, N_LEVELS + 1))
        alpha = int(rng.integers(0, N_LEVELS)) / (N_LEVELS - 1)
        batch = src.next(run.batch)
        rep = stage2_loss(model, batch, q, alpha, run.task, rng, w, task_model=task_model, proxy=proxy)
        opt.zero_grad()
        backward(rep.total)
        opt.step()
        metrics.add(rep)
        if (step + 1) % run.eval_every == 0 or step + 1 == run.steps:
            metrics.flush(step + 1)
            if progress:
                progress(step + 1, metrics.rows[-1])
    trainable = model.store.count(trainable_only=True)
    result = Stage2Result(model, task_model, metrics, before, model.store.digest(frozen),
                          trainable, model.store.count("dec."))
    log.info("stage 2 (%s): %d of %d decoder parameters trainable (%.2f%%)", run.task,
             result.trainable, result.decoder_total, 100 * result.fraction)
    if run.output:
        out = model.state()
        if task_model is not None:
            out.update(task_model.store.state())
        for n, v in state.items():
            if n.startswith("taskmodel.") and n not in out:
                out[n] = v
        write_checkpoint(run.output, out)
    return result


def run_from_config(run, progress=None):
    if run.stage == 1:
        return train_stage1(run, progress=progress)
    return train_stage2(run, progress=progress)
