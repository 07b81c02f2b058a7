"""Finite-difference verification of every layer's backward pass.

Central differences at 64-bit precision (ε = 1e-4) against the analytic
gradients, compared with a norm-based relative error. Used by the test
suite and by the ``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

import numpy as np

from . import nn

EPS = 1e-4
TOL = 1e-3


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_gradient(f, x: np.ndarray, gy: np.ndarray, eps: float = EPS):
    """d sum(f(x) * gy) / dx via central differences, perturbing x in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        yp = np.sum(f(x) * gy)
        x[idx] = orig - eps
        ym = np.sum(f(x) * gy)
        x[idx] = orig
        grad[idx] = (yp - ym) / (2.0 * eps)
    return grad


def check_layer(layer, x: np.ndarray, mode: str = nn.INFER,
                rng_seed: int | None = None, eps: float = EPS,
                gy_seed: int = 1234) -> dict[str, float]:
    """Relative error of the input gradient and each trainable parameter
    gradient against finite differences. Stochastic layers replay the same
    rng seed on every forward call so the mask is held fixed."""

    def forward(arr):
        rng = None if rng_seed is None else np.random.default_rng(rng_seed)
        y, _ = layer.forward(arr, mode=mode, rng=rng)
        return y

    y = forward(x)
    gy = np.random.default_rng(gy_seed).standard_normal(y.shape)

    rng = None if rng_seed is None else np.random.default_rng(rng_seed)
    _, cache = layer.forward(x, mode=mode, rng=rng)
    for p in layer.params():
        p.grad[:] = 0.0
    gx = layer.backward(cache, gy)

    errors = {"input": rel_error(gx, numeric_gradient(forward, x, gy, eps))}
    for p in layer.params():
        if not p.trainable:
            continue

        def forward_p(v, p=p):
            p.value[...] = v
            return forward(x)

        num = numeric_gradient(forward_p, p.value.copy(), gy, eps)
        errors[p.name] = rel_error(p.grad, num)
    return errors


def _away_from_zero(x, margin=0.1):
    return x + np.sign(x) * margin


def standard_cases() -> list[tuple[str, dict[str, float]]]:
    """Gradcheck every layer kind on small float64 instances."""
    rng = np.random.default_rng(7)
    f64 = np.float64
    cases = []

    def add(name, layer, x, mode=nn.INFER, rng_seed=None):
        cases.append((name, check_layer(layer, x, mode=mode, rng_seed=rng_seed)))

    add("dense", nn.Dense(4, 3, rng, dtype=f64),
        rng.standard_normal((5, 4)))
    add("dense_tokens", nn.Dense(4, 3, rng, dtype=f64),
        rng.standard_normal((2, 3, 4)))
    add("conv2d", nn.Conv2d(3, 4, kernel=3, stride=2, pad=1, rng=rng, dtype=f64),
        rng.standard_normal((2, 3, 7, 7)))
    add("deconv2d_s2", nn.Deconv2d(3, 2, kernel=4, stride=2, pad=1, rng=rng,
                                   dtype=f64),
        rng.standard_normal((2, 3, 4, 4)))
    add("deconv2d_s1", nn.Deconv2d(2, 3, kernel=3, stride=1, pad=1, rng=rng,
                                   dtype=f64),
        rng.standard_normal((2, 2, 5, 5)))
    add("batchnorm_train_2d", nn.BatchNorm(5, dtype=f64),
        rng.standard_normal((6, 5)), mode=nn.TRAIN)
    add("batchnorm_train_4d", nn.BatchNorm(3, dtype=f64),
        rng.standard_normal((2, 3, 4, 4)), mode=nn.TRAIN)
    add("batchnorm_infer", nn.BatchNorm(5, dtype=f64),
        rng.standard_normal((6, 5)))
    add("dropout", nn.Dropout(0.4),
        rng.standard_normal((4, 6)), mode=nn.TRAIN, rng_seed=99)
    add("tanh", nn.Tanh(), rng.standard_normal((3, 7)))
    add("relu", nn.Relu(), _away_from_zero(rng.standard_normal((3, 7))))
    add("softmax", nn.Softmax(), rng.standard_normal((3, 7)))
    add("upsample_nearest", nn.UpsampleNearest(2),
        rng.standard_normal((2, 3, 3, 3)))
    add("patch_embed", nn.PatchEmbed(2, 3, 5, rng, dtype=f64),
        rng.standard_normal((2, 3, 4, 4)))
    add("mean_pool", nn.MeanPool(), rng.standard_normal((2, 5, 4)))
    add("tokens_to_grid", nn.TokensToGrid(2, 3), rng.standard_normal((2, 6, 3)))
    return cases


def loss_cases() -> list[tuple[str, float]]:
    """Gradcheck both loss functions."""
    rng = np.random.default_rng(11)
    out = []

    logits = rng.standard_normal(5)
    _, grad = nn.cross_entropy(logits, 2)
    num = numeric_gradient(lambda z: np.array(nn.cross_entropy(z, 2)[0]),
                           logits.copy(), np.array(1.0))
    out.append(("cross_entropy", rel_error(grad, num)))

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    _, grad = nn.mse(a, b)
    num = numeric_gradient(lambda x: np.array(nn.mse(x, b)[0]),
                           a.copy(), np.array(1.0))
    out.append(("mse", rel_error(grad, num)))
    return out


def run_all(tol: float = TOL) -> tuple[bool, list[str]]:
    """Run every check; returns (all_passed, report lines)."""
    lines = []
    ok = True
    for name, errors in standard_cases():
        worst = max(errors.values())
        passed = worst <= tol
        ok &= passed
        detail = " ".join(f"{k}={v:.2e}" for k, v in errors.items())
        lines.append(f"{'PASS' if passed else 'FAIL'} {name:<22} {detail}")
    for name, err in loss_cases():
        passed = err <= tol
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} {name:<22} grad={err:.2e}")
    return ok, lines
