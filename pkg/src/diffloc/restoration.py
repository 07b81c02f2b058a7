"""Restoration path: shared encoder + lightweight decoder, reverse chain.

The network predicts the clean image directly (a z0-parameterization): the
decoder maps the timestep-conditioned token grid back to image space
through three transposed convolutions, a nearest-neighbor upsample, and a
terminal Tanh, so every estimate lands in [-1, 1].

At test time the corrupted observation is injected at the top of the
reverse chain as z_T. Each step predicts a clean estimate, forms the exact
posterior mean around it, and samples the next (less noisy) state; the
t = 1 step is deterministic and its clean estimate is the final output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .diffusion import NoiseSchedule, model_variance, posterior_params, reverse_step
from .errors import ConfigError
from .matching import Encoder
from .nn import INFER, Sequential


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of an integer timestep, shape (dim,)."""
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


def build_decoder(rng: np.random.Generator, grid: int, latent_ch: int = 32,
                  mid_ch: tuple[int, int] = (16, 8), out_ch: int = 3,
                  dtype=np.float32) -> Sequential:
    """Token grid (N, grid*grid, latent_ch) -> image (N, out_ch, 4*grid, 4*grid).

    One stride-2 deconvolution doubles the grid, two stride-1
    deconvolutions refine it, and the upsample supplies the final doubling.
    """
    c1, c2 = mid_ch
    return Sequential([
        nn.TokensToGrid(grid, grid),
        nn.Deconv2d(latent_ch, c1, kernel=4, stride=2, pad=1, rng=rng, dtype=dtype),
        nn.Relu(),
        nn.Deconv2d(c1, c2, kernel=3, stride=1, pad=1, rng=rng, dtype=dtype),
        nn.Relu(),
        nn.Deconv2d(c2, out_ch, kernel=3, stride=1, pad=1, rng=rng, dtype=dtype),
        nn.UpsampleNearest(2),
        nn.Tanh(),
    ], name="dec_")


@dataclass
class RestorationModel:
    """Shared encoder plus decoder; the timestep is injected by adding a
    sinusoidal embedding to every token of the encoder latent."""

    encoder: Encoder
    decoder: Sequential

    def params(self):
        return self.encoder.params() + self.decoder.params()


def predict_clean(model: RestorationModel, zt: np.ndarray, t: int,
                  mode: str = INFER, rng: np.random.Generator | None = None,
                  want_caches: bool = False):
    """Single-pass clean-image estimate from a noisy state at step t."""
    single = zt.ndim == 3
    x = zt[None] if single else zt
    tokens, trunk_cache = model.encoder.trunk.forward(x, mode=mode, rng=rng)
    cond = tokens + timestep_embedding(t, tokens.shape[-1]).astype(tokens.dtype)
    zhat, dec_cache = model.decoder.forward(cond, mode=mode, rng=rng)
    out = zhat[0] if single else zhat
    if want_caches:
        return out, (trunk_cache, dec_cache)
    return out


def backprop_predict_clean(model: RestorationModel, caches, g_zhat: np.ndarray):
    """Accumulate gradients of a cached predict_clean pass; returns the
    gradient with respect to the network input z_t."""
    trunk_cache, dec_cache = caches
    g = g_zhat[None] if g_zhat.ndim == 3 else g_zhat
    g_cond = model.decoder.backward(dec_cache, g)
    # the timestep embedding is a constant offset, so the gradient passes through
    g_in = model.encoder.trunk.backward(trunk_cache, g_cond)
    return g_in[0] if g_zhat.ndim == 3 else g_in


def restore(model, corrupted: np.ndarray, sched: NoiseSchedule,
            rng: np.random.Generator, sigma2_mode: str = "posterior",
            ) -> list[np.ndarray]:
    """Run the reverse chain from a corrupted observation treated as z_T.

    Returns the clean estimates for t = T down to 1; the last entry is the
    final restoration. ``model`` may be a RestorationModel or any callable
    (z_t, t) -> clean estimate (used by oracle tests).
    """
    if callable(model):
        predict = model
    else:
        predict = lambda zt, t: predict_clean(model, zt, t, mode=INFER)
    zt = corrupted
    estimates = []
    for t in range(sched.T, 0, -1):
        zhat = predict(zt, t)
        if zhat.shape != zt.shape:
            raise ConfigError(f"model returned shape {zhat.shape} for input "
                              f"{zt.shape}; schedule/model mismatch")
        estimates.append(zhat)
        if t >= 2:
            post = posterior_params(zhat, zt, t, sched)
            sigma2 = model_variance(sched, t, sigma2_mode)
            zt = reverse_step(zt, t, post.mean, sigma2, rng)
    return estimates


def loss_res(z0: np.ndarray, z0_hat: np.ndarray):
    """Pixel MSE between the clean image and the estimate; gradient w.r.t.
    the estimate. n is the element count of the compared tensors."""
    return nn.mse(z0_hat, z0)
