"""Feature extraction, classification head, and cosine scoring.

The encoder is shared with the restoration path: a patch embedding feeds a
small token-wise MLP trunk whose token grid doubles as the restoration
decoder's input, while a mean-pool plus projection turns the same tokens
into the retrieval embedding. Training uses cross-entropy over location
labels; test-time matching uses cosine distance between L2-normalized
embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, InputError, NumericError, ShapeError
from .nn import INFER, Sequential


@dataclass
class Encoder:
    """Shared encoder: image -> token grid -> pooled embedding.

    ``trunk`` maps (N, C, H, W) to tokens (N, P, width); ``pool`` maps
    tokens to (N, embed_dim). The token grid is what the restoration
    decoder consumes.
    """

    trunk: Sequential
    pool: Sequential
    width: int
    grid: int
    embed_dim: int

    def params(self):
        return self.trunk.params() + self.pool.params()

    def encode(self, img: np.ndarray, mode: str = INFER,
               rng: np.random.Generator | None = None) -> np.ndarray:
        """Embed one (C, H, W) image or a (N, C, H, W) batch."""
        single = img.ndim == 3
        x = img[None] if single else img
        tokens, _ = self.trunk.forward(x, mode=mode, rng=rng)
        emb, _ = self.pool.forward(tokens, mode=mode, rng=rng)
        return emb[0] if single else emb


def build_encoder(rng: np.random.Generator, image_size: int = 32,
                  in_ch: int = 3, patch: int = 4, width: int = 32,
                  embed_dim: int = 64, dtype=np.float32) -> Encoder:
    """Patch embedding, two token-wise dense+relu blocks, mean-pool, project."""
    if image_size % patch:
        raise ConfigError(f"image size {image_size} not divisible by patch {patch}")
    grid = image_size // patch
    trunk = Sequential([
        nn.PatchEmbed(patch, in_ch, width, rng, dtype=dtype),
        nn.Dense(width, width, rng, dtype=dtype),
        nn.Relu(),
        nn.Dense(width, width, rng, dtype=dtype),
        nn.Relu(),
    ], name="enc_")
    pool = Sequential([
        nn.MeanPool(),
        nn.Dense(width, embed_dim, rng, dtype=dtype),
    ], name="emb_")
    return Encoder(trunk=trunk, pool=pool, width=width, grid=grid,
                   embed_dim=embed_dim)


@dataclass
class MatchingHead:
    """MLP classifier: dense -> batchnorm -> dropout -> dense -> softmax."""

    core: Sequential      # up to the logits
    softmax: nn.Softmax
    n_classes: int

    def params(self):
        return self.core.params()

    def logits(self, emb, mode=INFER, rng=None):
        return self.core.forward(emb, mode=mode, rng=rng)

    def proba(self, emb, mode=INFER, rng=None) -> np.ndarray:
        z, _ = self.core.forward(emb, mode=mode, rng=rng)
        p, _ = self.softmax.forward(z)
        return p


def build_head(rng: np.random.Generator, embed_dim: int, n_classes: int,
               hidden: int = 128, dropout: float = 0.5,
               dtype=np.float32) -> MatchingHead:
    core = Sequential([
        nn.Dense(embed_dim, hidden, rng, group="head", dtype=dtype),
        nn.BatchNorm(hidden, group="head", dtype=dtype),
        nn.Dropout(dropout),
        nn.Dense(hidden, n_classes, rng, group="head", dtype=dtype),
    ], name="head_")
    return MatchingHead(core=core, softmax=nn.Softmax(), n_classes=n_classes)


def matching_loss(head: MatchingHead, embedding: np.ndarray, label,
                  mode: str = nn.TRAIN, rng=None,
                  loss_mode: str = "cross_entropy"):
    """Classification loss through the head; returns (loss, grad wrt embedding).

    Parameter gradients of the head are accumulated as a side effect.
    ``cross_entropy`` follows the training protocol; ``mse_onehot`` scores
    the softmax output against a one-hot target instead.
    """
    single = embedding.ndim == 1
    emb = embedding[None] if single else embedding
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape[0] != emb.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {emb.shape[0]} embeddings")
    z, cache = head.logits(emb, mode=mode, rng=rng)
    if loss_mode == "cross_entropy":
        loss, gz = nn.cross_entropy_batch(z, labels)
    elif loss_mode == "mse_onehot":
        p, pcache = head.softmax.forward(z)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(labels)), labels] = 1.0
        loss, gp = nn.mse(p, onehot)
        gz = head.softmax.backward(pcache, gp)
    else:
        raise ConfigError(f"unknown matching loss mode {loss_mode!r}")
    gemb = head.core.backward(cache, gz)
    return loss, (gemb[0] if single else gemb)


def total_loss(l_res: float, l_mat: float) -> float:
    """Unweighted sum of the restoration and matching losses."""
    if not (math.isfinite(l_res) and math.isfinite(l_mat)):
        raise NumericError(f"non-finite loss terms: {l_res}, {l_mat}")
    return l_res + l_mat


def l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise InputError("cannot normalize a zero vector")
    return (v / norm).astype(np.float32)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]. Invariant to positive rescaling."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"dim mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InputError("cosine distance undefined for zero vectors")
    return float(1.0 - np.dot(a, b) / (na * nb))
