"""Core DDPM mechanics: schedules, forward/reverse transitions, KL, VLB.

Pure functions over numpy arrays plus an explicit ``numpy.random.Generator``;
nothing here owns state, so every operation is reproducible from its seed and
safe to call concurrently as long as each caller owns its generator.

Conventions:
    - Timesteps are 1-indexed: ``t`` runs over ``1..T`` and indexes
      ``betas[t-1]``. ``alpha_bar(0)`` is defined as 1 (no noise).
    - Image tensors are float32 arrays, either (C, H, W) or batched
      (N, C, H, W); the math is shape-agnostic.

Key equations (Ho et al., "Denoising Diffusion Probabilistic Models", 2020):
    forward step:      q(z_t | z_{t-1}) = N(√α_t z_{t-1}, β_t I)
    forward marginal:  q(z_t | z_0)     = N(√ᾱ_t z_0, (1-ᾱ_t) I)
    posterior:         q(z_{t-1} | z_t, z_0) = N(μ̃_t(z_t, z_0), β̃_t I)
        μ̃_t = (√ᾱ_{t-1} β_t / (1-ᾱ_t)) z_0 + (√α_t (1-ᾱ_{t-1}) / (1-ᾱ_t)) z_t
        β̃_t = (1-ᾱ_{t-1}) / (1-ᾱ_t) · β_t
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError, StepError

__all__ = [
    "NoiseSchedule",
    "GaussianParams",
    "build_linear_schedule",
    "forward_step_sample",
    "forward_marginal_params",
    "forward_marginal_sample",
    "posterior_params",
    "posterior_variance",
    "model_variance",
    "reverse_step",
    "gaussian_kl",
    "gaussian_nll",
    "vlb",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule β_1..β_T with the derived α and ᾱ tables.

    Invariants (maintained by :func:`build_linear_schedule`; direct
    construction is possible for tests that need degenerate values):
    0 < β_t < 1, α_t = 1 - β_t, ᾱ_t strictly decreasing with ᾱ_T in (0, 1).
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_step(self, t: int, *, lowest: int = 1) -> None:
        if not (lowest <= t <= self.T):
            raise StepError(f"step t={t} outside [{lowest}, {self.T}]")

    def beta(self, t: int) -> float:
        self.check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t, extended with ᾱ_0 = 1 (the no-noise limit)."""
        if t == 0:
            return 1.0
        self.check_step(t)
        return float(self.alpha_bars[t - 1])


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal Gaussian: mean tensor plus scalar or per-element variance."""

    mean: np.ndarray
    variance: float | np.ndarray


def build_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly interpolated β schedule, inclusive of both endpoints.

    Coefficient tables are kept in float64 so that long cumulative
    products (T ~ 1000) stay accurate.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_step_sample(
    z_prev: np.ndarray, t: int, sched: NoiseSchedule, rng: np.random.Generator
) -> np.ndarray:
    """One forward-chain step: √α_t z_{t-1} + √β_t ε with ε ~ N(0, I)."""
    sched.check_step(t)
    a = sched.alpha(t)
    b = sched.beta(t)
    eps = rng.standard_normal(z_prev.shape, dtype=np.float32)
    return np.float32(math.sqrt(a)) * z_prev + np.float32(math.sqrt(b)) * eps


def forward_marginal_params(
    z0: np.ndarray, t: int, sched: NoiseSchedule
) -> GaussianParams:
    """Parameters of q(z_t | z_0): mean √ᾱ_t z_0, scalar variance 1-ᾱ_t."""
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    return GaussianParams(mean=np.float32(math.sqrt(ab)) * z0, variance=1.0 - ab)


def forward_marginal_sample(
    z0: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    eps: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample z_t = √ᾱ_t z_0 + √(1-ᾱ_t) ε and return (z_t, ε).

    The noise actually used is returned so training code can target it;
    ``eps`` may be injected for deterministic tests.
    """
    params = forward_marginal_params(z0, t, sched)
    if eps is None:
        eps = rng.standard_normal(z0.shape, dtype=np.float32)
    elif eps.shape != z0.shape:
        raise ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    zt = params.mean + np.float32(math.sqrt(params.variance)) * eps
    return zt, eps


def posterior_variance(sched: NoiseSchedule, t: int) -> float:
    """β̃_t = (1-ᾱ_{t-1}) / (1-ᾱ_t) · β_t, defined for t >= 2."""
    sched.check_step(t, lowest=2)
    ab_prev = sched.alpha_bar(t - 1)
    ab = sched.alpha_bar(t)
    return (1.0 - ab_prev) / (1.0 - ab) * sched.beta(t)


def posterior_params(
    z0: np.ndarray, zt: np.ndarray, t: int, sched: NoiseSchedule
) -> GaussianParams:
    """Exact reverse conditional q(z_{t-1} | z_t, z_0) for t >= 2.

    The t=1 transition targets z_0 itself and is handled by the caller.
    """
    sched.check_step(t, lowest=2)
    if z0.shape != zt.shape:
        raise ShapeError(f"z0 shape {z0.shape} != zt shape {zt.shape}")
    ab_prev = sched.alpha_bar(t - 1)
    ab = sched.alpha_bar(t)
    b = sched.beta(t)
    coef_z0 = math.sqrt(ab_prev) * b / (1.0 - ab)
    coef_zt = math.sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab)
    mean = np.float32(coef_z0) * z0 + np.float32(coef_zt) * zt
    return GaussianParams(mean=mean, variance=posterior_variance(sched, t))


def model_variance(sched: NoiseSchedule, t: int, mode: str = "posterior") -> float:
    """σ² of the model's reverse transition at step t.

    ``posterior`` uses β̃_t (with the t=1 degenerate case mapped to 0);
    ``beta`` uses β_t.
    """
    if mode == "beta":
        return sched.beta(t)
    if mode == "posterior":
        return 0.0 if t == 1 else posterior_variance(sched, t)
    raise ConfigError(f"unknown variance mode {mode!r}")


def reverse_step(
    zt: np.ndarray,
    t: int,
    mu: np.ndarray,
    sigma2: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample z_{t-1} = μ + σ ε. σ² = 0 is allowed only at the final step."""
    if zt.shape != mu.shape:
        raise ShapeError(f"zt shape {zt.shape} != mu shape {mu.shape}")
    if sigma2 < 0.0 or (sigma2 == 0.0 and t != 1):
        raise ConfigError(f"sigma2 must be > 0 at t={t}, got {sigma2}")
    if sigma2 == 0.0:
        return mu.copy()
    eps = rng.standard_normal(mu.shape, dtype=np.float32)
    return mu + np.float32(math.sqrt(sigma2)) * eps


def _broadcast_var(v: float | np.ndarray, shape: tuple) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 0 and arr.shape != shape:
        raise ShapeError(f"variance shape {arr.shape} != mean shape {shape}")
    return np.broadcast_to(arr, shape)


def gaussian_kl(p: GaussianParams, q: GaussianParams) -> float:
    """KL(p || q) between diagonal Gaussians, summed over elements.

    Per element: ½ [log(σ_q²/σ_p²) + (σ_p² + (μ_p-μ_q)²)/σ_q² - 1].
    """
    if p.mean.shape != q.mean.shape:
        raise ShapeError(f"mean shapes differ: {p.mean.shape} vs {q.mean.shape}")
    vp = _broadcast_var(p.variance, p.mean.shape)
    vq = _broadcast_var(q.variance, q.mean.shape)
    dmu = p.mean.astype(np.float64) - q.mean.astype(np.float64)
    kl = 0.5 * (np.log(vq / vp) + (vp + dmu**2) / vq - 1.0)
    return float(np.sum(kl))


def gaussian_nll(x: np.ndarray, params: GaussianParams) -> float:
    """-log N(x; μ, σ² I), summed over elements."""
    if x.shape != params.mean.shape:
        raise ShapeError(f"x shape {x.shape} != mean shape {params.mean.shape}")
    v = _broadcast_var(params.variance, x.shape)
    diff = x.astype(np.float64) - params.mean.astype(np.float64)
    return float(np.sum(0.5 * (np.log(2.0 * np.pi * v) + diff**2 / v)))


def vlb(
    z0: np.ndarray,
    denoiser: Callable[[np.ndarray, int], np.ndarray],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    sigma2_mode: str = "posterior",
    recon_var_floor: float = 1e-4,
) -> float:
    """One-sample Monte-Carlo estimate of the variational bound.

    ``denoiser(z_t, t)`` must return the model's reverse-transition mean.
    The estimate is the t=1 reconstruction term -log p(z_0 | z_1) plus the
    per-step KL between the exact posterior and the model transition for
    t = 2..T, each evaluated at a single z_t ~ q(z_t | z_0) draw. Unbiased
    but noisy; average repeated calls to tighten it.

    The model variance at t=1 is floored at ``recon_var_floor`` so the
    reconstruction density cannot degenerate.
    """
    total = 0.0
    for t in range(2, sched.T + 1):
        zt, _ = forward_marginal_sample(z0, t, sched, rng)
        post = posterior_params(z0, zt, t, sched)
        mu = denoiser(zt, t)
        if mu.shape != z0.shape:
            raise ShapeError(f"denoiser returned shape {mu.shape}, want {z0.shape}")
        total += gaussian_kl(post, GaussianParams(mu, model_variance(sched, t, sigma2_mode)))
    z1, _ = forward_marginal_sample(z0, 1, sched, rng)
    mu1 = denoiser(z1, 1)
    if mu1.shape != z0.shape:
        raise ShapeError(f"denoiser returned shape {mu1.shape}, want {z0.shape}")
    var1 = max(model_variance(sched, 1, sigma2_mode), recon_var_floor)
    total += gaussian_nll(z0, GaussianParams(mu1, var1))
    return total
