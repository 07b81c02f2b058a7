"""Experiment orchestration: joint training, evaluation, checkpoints.

Per training batch the loop samples one timestep t, pushes each corrupted
drone view through the forward marginal to get z_t, predicts the clean
image, scores it with the restoration MSE, re-encodes the estimate for the
classification loss, and takes one SGD step on the summed loss. Satellite
views join the classification batches directly (clean, no diffusion) so
both platforms share the embedding space.

Everything is deterministic given the config: the dataset, weight init,
batch order, diffusion noise, and dropout all derive from the single
config seed through fixed stream ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn, tensorio
from .config import ExperimentConfig
from .diffusion import NoiseSchedule, build_linear_schedule, forward_marginal_sample
from .errors import ConfigError, InputError, NumericError, ShapeError
from .matching import Encoder, MatchingHead, build_encoder, build_head, \
    matching_loss, total_loss
from .nn import INFER, TRAIN, Sequential
from .restoration import RestorationModel, backprop_predict_clean, \
    build_decoder, loss_res, predict_clean, restore
from .retrieval import MetricsReport, build_index, evaluate
from .weather import LocationSample, corrupt, generate_dataset

# rng stream ids, combined with the config seed
_STREAM_INIT = 0
_STREAM_TRAIN = 1
_STREAM_EVAL = 2


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


@dataclass
class JointModel:
    encoder: Encoder
    decoder: Sequential
    head: MatchingHead

    def restoration(self) -> RestorationModel:
        return RestorationModel(encoder=self.encoder, decoder=self.decoder)

    def params_named(self) -> list[tuple[str, nn.ParamTensor]]:
        """(record id, tensor) pairs in a stable layer order."""
        parts = self.encoder.params() + self.decoder.params() + self.head.params()
        return [(f"{lid}.{p.name}", p) for lid, p in parts]

    def all_params(self) -> list[nn.ParamTensor]:
        return [p for _, p in self.params_named()]


def build_model(cfg: ExperimentConfig, rng: np.random.Generator) -> JointModel:
    encoder = build_encoder(rng, image_size=cfg.image_size, in_ch=3,
                            patch=cfg.patch, width=cfg.encoder_width,
                            embed_dim=cfg.embed_dim)
    decoder = build_decoder(rng, grid=cfg.image_size // cfg.patch,
                            latent_ch=cfg.encoder_width,
                            mid_ch=cfg.decoder_channels)
    head = build_head(rng, cfg.embed_dim, n_classes=cfg.locations,
                      hidden=cfg.head_hidden, dropout=cfg.dropout)
    return JointModel(encoder=encoder, decoder=decoder, head=head)


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    return build_linear_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)


# ---------------------------------------------------------------------------
# Data preparation


@dataclass
class DataBundle:
    """Materialized training/eval arrays derived from the generated dataset."""

    samples: list[LocationSample]
    train_clean: np.ndarray       # (Nd, C, H, W) clean drone views, train split
    train_corrupt: np.ndarray
    train_labels: np.ndarray
    sat_imgs: np.ndarray          # (L, C, H, W) satellites of trained locations
    sat_labels: np.ndarray
    held_clean: np.ndarray        # held-out drone views of trained locations
    held_corrupt: np.ndarray
    held_labels: np.ndarray
    gallery_main: list[tuple[int, np.ndarray]]    # trained sats + distractors
    gallery_unseen: list[tuple[int, np.ndarray]]  # unseen sats + distractors
    unseen_corrupt: np.ndarray
    unseen_labels: np.ndarray


def prepare_data(cfg: ExperimentConfig) -> DataBundle:
    samples = generate_dataset(
        cfg.locations + cfg.unseen_locations, cfg.views_per_location,
        image_size=cfg.image_size, conditions=cfg.conditions, seed=cfg.seed,
        distractors=cfg.distractors,
        intensity_range=(cfg.intensity_lo, cfg.intensity_hi))
    trained = samples[:cfg.locations]
    unseen = samples[cfg.locations:cfg.locations + cfg.unseen_locations]
    distractor_samples = samples[cfg.locations + cfg.unseen_locations:]

    n_hold = max(1, int(round(0.2 * cfg.views_per_location)))
    if n_hold >= cfg.views_per_location:
        raise ConfigError("views_per_location too small to hold out 20%")

    tr_clean, tr_cor, tr_lab = [], [], []
    hd_clean, hd_cor, hd_lab = [], [], []
    for s in trained:
        for i, (view, cond, _pose) in enumerate(s.drone_views):
            dest = (tr_clean, tr_cor, tr_lab) if i < cfg.views_per_location - n_hold \
                else (hd_clean, hd_cor, hd_lab)
            dest[0].append(view)
            dest[1].append(corrupt(view, cond))
            dest[2].append(s.location_id)

    un_cor, un_lab = [], []
    for s in unseen:
        for view, cond, _pose in s.drone_views:
            un_cor.append(corrupt(view, cond))
            un_lab.append(s.location_id)

    gallery_main = [(s.location_id, s.satellite_view) for s in trained]
    gallery_main += [(s.location_id, s.satellite_view) for s in distractor_samples]
    gallery_unseen = [(s.location_id, s.satellite_view) for s in unseen]
    gallery_unseen += [(s.location_id, s.satellite_view) for s in distractor_samples]

    stack = lambda xs: np.stack(xs) if xs else np.zeros((0, 3, cfg.image_size,
                                                         cfg.image_size), np.float32)
    return DataBundle(
        samples=samples,
        train_clean=stack(tr_clean), train_corrupt=stack(tr_cor),
        train_labels=np.array(tr_lab, dtype=np.int64),
        sat_imgs=np.stack([s.satellite_view for s in trained]),
        sat_labels=np.array([s.location_id for s in trained], dtype=np.int64),
        held_clean=stack(hd_clean), held_corrupt=stack(hd_cor),
        held_labels=np.array(hd_lab, dtype=np.int64),
        gallery_main=gallery_main, gallery_unseen=gallery_unseen,
        unseen_corrupt=stack(un_cor),
        unseen_labels=np.array(un_lab, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainHistory:
    steps: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    snapshots: list[tuple[int, float, float]] = field(default_factory=list)
    steps_per_epoch: int = 0

    def record(self, step, t, l_res, l_mat, l_all):
        self.steps.append((step, t, l_res, l_mat, l_all))

    def epoch_mean_loss(self, epoch: int) -> float:
        """Mean recorded L_all over one 0-based epoch."""
        lo = epoch * self.steps_per_epoch
        hi = lo + self.steps_per_epoch
        chunk = self.steps[lo:hi]
        if not chunk:
            raise InputError(f"no steps recorded for epoch {epoch}")
        return float(np.mean([r[4] for r in chunk]))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        with open(out / "history_steps.csv", "w") as f:
            f.write("step,t,l_res,l_mat,l_all\n")
            for step, t, l_res, l_mat, l_all in self.steps:
                f.write(f"{step},{t},{l_res!r},{l_mat!r},{l_all!r}\n")
        with open(out / "history_epochs.csv", "w") as f:
            f.write("epoch,recall,mAP\n")
            for epoch, recall, mean_ap in self.snapshots:
                f.write(f"{epoch},{recall!r},{mean_ap!r}\n")


def _joint_batch_step(model: JointModel, cfg: ExperimentConfig,
                      sched: NoiseSchedule, z0, zcor, d_labels, sats, s_labels,
                      t: int, rng, scale: float) -> tuple[float, float]:
    """Forward/backward for one batch at one timestep; grads scaled by
    ``scale`` (1 for the sampled-t estimator, 1/T for the full chain)."""
    trunk, pool = model.encoder.trunk, model.encoder.pool
    n_drone = z0.shape[0]
    l_res = 0.0
    token_parts, label_parts = [], []
    if n_drone:
        zt, _ = forward_marginal_sample(zcor, t, sched, rng)
        zhat, pc_caches = predict_clean(model.restoration(), zt, t,
                                        mode=TRAIN, rng=rng, want_caches=True)
        l_res, g_res = loss_res(z0, zhat)
        tokens2, cache_t2 = trunk.forward(zhat, mode=TRAIN, rng=rng)
        token_parts.append(tokens2)
        label_parts.append(d_labels)
    if sats.shape[0]:
        tokens_s, cache_ts = trunk.forward(sats, mode=TRAIN, rng=rng)
        token_parts.append(tokens_s)
        label_parts.append(s_labels)

    tokens_all = np.concatenate(token_parts, axis=0)
    emb, cache_pool = pool.forward(tokens_all, mode=TRAIN, rng=rng)
    labels_all = np.concatenate(label_parts)
    l_mat, g_emb = matching_loss(model.head, emb, labels_all, mode=TRAIN,
                                 rng=rng, loss_mode=cfg.matching_loss_mode)

    g_tokens = pool.backward(cache_pool, np.float32(scale) * g_emb)
    if n_drone:
        g_zhat = trunk.backward(cache_t2, g_tokens[:n_drone])
        g_zhat = g_zhat + np.float32(scale) * g_res
        backprop_predict_clean(model.restoration(), pc_caches, g_zhat)
    if sats.shape[0]:
        trunk.backward(cache_ts, g_tokens[n_drone:])
    return l_res, l_mat


def _matching_only_batch_step(model, cfg, imgs, labels, rng) -> float:
    trunk, pool = model.encoder.trunk, model.encoder.pool
    tokens, cache_t = trunk.forward(imgs, mode=TRAIN, rng=rng)
    emb, cache_pool = pool.forward(tokens, mode=TRAIN, rng=rng)
    l_mat, g_emb = matching_loss(model.head, emb, labels, mode=TRAIN,
                                 rng=rng, loss_mode=cfg.matching_loss_mode)
    g_tokens = pool.backward(cache_pool, g_emb)
    trunk.backward(cache_t, g_tokens)
    return l_mat


def train_joint(cfg: ExperimentConfig,
                data: DataBundle | None = None,
                ) -> tuple[JointModel, TrainHistory]:
    """Run the joint optimization; returns the model and its history.

    With ``cfg.ablation == "matching_only"`` the diffusion/restoration path
    is dropped entirely: the encoder and head train on the corrupted views
    alone and L_res is recorded as zero.
    """
    cfg.validate()
    if data is None:
        data = prepare_data(cfg)
    model = build_model(cfg, _rng(cfg.seed, _STREAM_INIT))
    sched = build_schedule(cfg)
    rng = _rng(cfg.seed, _STREAM_TRAIN)
    history = TrainHistory()

    n_drone = data.train_clean.shape[0]
    n_sat = data.sat_imgs.shape[0] if cfg.include_satellites else 0
    n_items = n_drone + n_sat
    if n_items == 0:
        raise ConfigError("no training items")
    history.steps_per_epoch = (n_items + cfg.batch_size - 1) // cfg.batch_size

    lr = {"backbone": cfg.lr_backbone, "head": cfg.lr_head}
    params = model.all_params()
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_items)
        for lo in range(0, n_items, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            d_idx = idx[idx < n_drone]
            s_idx = idx[idx >= n_drone] - n_drone
            t = int(rng.integers(1, cfg.steps + 1))
            if cfg.ablation == "matching_only":
                imgs = np.concatenate([data.train_corrupt[d_idx],
                                       data.sat_imgs[s_idx]], axis=0)
                labels = np.concatenate([data.train_labels[d_idx],
                                         data.sat_labels[s_idx]])
                l_mat = _matching_only_batch_step(model, cfg, imgs, labels, rng)
                l_res = 0.0
            elif cfg.full_chain:
                acc_res = acc_mat = 0.0
                for tt in range(1, cfg.steps + 1):
                    r, m = _joint_batch_step(
                        model, cfg, sched, data.train_clean[d_idx],
                        data.train_corrupt[d_idx], data.train_labels[d_idx],
                        data.sat_imgs[s_idx], data.sat_labels[s_idx],
                        tt, rng, scale=1.0 / cfg.steps)
                    acc_res += r
                    acc_mat += m
                l_res, l_mat = acc_res / cfg.steps, acc_mat / cfg.steps
            else:
                l_res, l_mat = _joint_batch_step(
                    model, cfg, sched, data.train_clean[d_idx],
                    data.train_corrupt[d_idx], data.train_labels[d_idx],
                    data.sat_imgs[s_idx], data.sat_labels[s_idx],
                    t, rng, scale=1.0)
            try:
                l_all = total_loss(l_res, l_mat)
            except NumericError:
                raise NumericError(
                    f"training diverged at step {step}: "
                    f"L_res={l_res}, L_mat={l_mat}") from None
            nn.sgd_step(params, lr, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay)
            history.record(step, t, l_res, l_mat, l_all)
            step += 1
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            report = run_eval(model, cfg, data)
            history.snapshots.append(
                (epoch, report.recall_at[cfg.ks[0]], report.mean_ap))
    return model, history


# ---------------------------------------------------------------------------
# Evaluation


def _encode_batch(encoder: Encoder, imgs: np.ndarray) -> np.ndarray:
    return encoder.encode(imgs, mode=INFER)


def restore_queries(model: JointModel, cfg: ExperimentConfig,
                    corrupted: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Final clean estimates for a batch of corrupted queries."""
    rng = _rng(cfg.seed, _STREAM_EVAL)
    return restore(model.restoration(), corrupted, sched, rng,
                   sigma2_mode=cfg.sigma_mode)[-1]


def run_eval(model: JointModel, cfg: ExperimentConfig,
             data: DataBundle | None = None,
             split: str = "held_out") -> MetricsReport:
    """Retrieval metrics on corrupted queries against the satellite gallery.

    ``held_out`` scores the held-back drone views of trained locations;
    ``unseen`` scores locations the classifier never saw (cosine retrieval
    only). With the matching-only ablation, queries skip restoration.
    """
    if data is None:
        data = prepare_data(cfg)
    if split == "held_out":
        corrupted, labels = data.held_corrupt, data.held_labels
        gallery = data.gallery_main
    elif split == "unseen":
        corrupted, labels = data.unseen_corrupt, data.unseen_labels
        gallery = data.gallery_unseen
    else:
        raise ConfigError(f"unknown eval split {split!r}")
    if corrupted.shape[0] == 0:
        raise ConfigError(f"eval split {split!r} is empty")

    if cfg.ablation == "matching_only":
        final = corrupted
    else:
        final = restore_queries(model, cfg, corrupted, build_schedule(cfg))
    query_embs = _encode_batch(model.encoder, final)
    gallery_embs = _encode_batch(model.encoder, np.stack([g for _, g in gallery]))
    index = build_index([(gid, gallery_embs[i])
                         for i, (gid, _) in enumerate(gallery)])
    queries = [(qid, query_embs[qid]) for qid in range(len(labels))]
    ground_truth = {qid: {int(labels[qid])} for qid in range(len(labels))}
    return evaluate(queries, index, ground_truth, cfg.ks)


def eval_restoration(model: JointModel, cfg: ExperimentConfig,
                     data: DataBundle | None = None) -> tuple[float, float]:
    """(restored MSE, corrupted MSE) against clean images on the held-out
    split, averaged over the whole split."""
    if data is None:
        data = prepare_data(cfg)
    final = restore_queries(model, cfg, data.held_corrupt, build_schedule(cfg))
    mse_restored = float(np.mean((final - data.held_clean) ** 2))
    mse_corrupted = float(np.mean((data.held_corrupt - data.held_clean) ** 2))
    return mse_restored, mse_corrupted


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: JointModel) -> None:
    tensorio.write_tensors(path, [(rid, p.value)
                                  for rid, p in model.params_named()])


def load_checkpoint(path, model: JointModel) -> None:
    """Load parameter values into an existing model structure in place."""
    records = dict(tensorio.read_tensors(path))
    for rid, p in model.params_named():
        if rid not in records:
            raise InputError(f"checkpoint missing record {rid!r}")
        arr = records[rid]
        if arr.shape != p.value.shape:
            raise ShapeError(f"checkpoint record {rid!r} has shape {arr.shape}, "
                             f"model expects {p.value.shape}")
        p.value[:] = arr
        p.grad[:] = 0.0
        p.momentum[:] = 0.0
