"""Whole-image compression: pad, analyse, entropy-code, and the reverse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import StageTrace, estimate_rate, pad_image
from .engine import no_grad
from .entropy import (Container, build_gaussian_cdf, build_logistic_cdf, range_decode,
                      range_encode, read_container, write_container)


@dataclass
class Encoded:
    data: bytes
    yhat: np.ndarray
    zhat: np.ndarray
    bpp_est: float
    bpp_act: float


def _z_tables(model, shape):
    loc = model.z_loc.data.astype(np.float64)
    scale = np.exp(model.z_log_scale.data.astype(np.float64))
    per_channel = [build_logistic_cdf(m, s) for m, s in zip(loc, scale)]
    # raster order over (h, w, c): channel varies fastest
    return per_channel * int(np.prod(shape[:-1]))


def _y_tables(model, zhat, y_hw):
    mu, sigma = model.latents_from_z(zhat, y_hw)
    return [build_gaussian_cdf(m, s) for m, s in
            zip(mu.data.reshape(-1).tolist(), sigma.data.reshape(-1).tolist())]


def _symbols(a):
    return [int(v) for v in np.asarray(a).reshape(-1)]


def encode_image(model, img, q):
    """Compress an ``(H, W, 3)`` image in [0, 1] at quality ``q``."""
    img = np.asarray(img, np.float32)
    h, w = img.shape[:2]
    padded = pad_image(img)[None]
    out = model.compress_latents(padded, q)
    zhat, yhat = out.zhat.data, out.yhat.data
    z_bytes = range_encode(_symbols(zhat), _z_tables(model, zhat.shape[1:]))
    # tables come from the decoded hyper-latent so the decoder rebuilds them exactly
    y_bytes = range_encode(_symbols(yhat), _y_tables(model, zhat, yhat.shape[1:3]))
    data = write_container(Container(q, w, h, z_bytes, y_bytes))
    with no_grad():
        est = float(estimate_rate([out.y_likelihoods, out.z_likelihoods], h * w).item())
    return Encoded(data, yhat[0], zhat[0], est, 8.0 * len(data) / (h * w))


def decode_latents(model, data):
    """Parse a container and recover ``(container, yhat, zhat)`` with batch axis 1."""
    c = read_container(data)
    ph, pw = -(-c.height // 16) * 16, -(-c.width // 16) * 16
    cy = model.config.latent_channels
    y_shape = (1, ph // 16, pw // 16, cy)
    z_shape = (1, -(-y_shape[1] // 2), -(-y_shape[2] // 2), model.config.hyper_channels)
    zsym = range_decode(c.z_bytes, _z_tables(model, z_shape[1:]))
    zhat = np.asarray(zsym, dtype=np.float32).reshape(z_shape)
    ysym = range_decode(c.y_bytes, _y_tables(model, zhat, y_shape[1:3]))
    yhat = np.asarray(ysym, dtype=np.float32).reshape(y_shape)
    return c, yhat, zhat


def decode_image(model, data, alpha=0.0, task=None, trace=None):
    """Reconstruct the image stored in ``data``; ``alpha``/``task`` are decoder-side only."""
    c, yhat, _ = decode_latents(model, data)
    if trace is None:
        trace = StageTrace()
    with no_grad():
        x = model.decode_synthesis(yhat, c.q, alpha=alpha, task=task, trace=trace)
    return x.data[0, : c.height, : c.width], trace


def psnr(x, y):
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)
