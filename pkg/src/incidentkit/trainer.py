"""Adam optimization of the two-head model with deterministic seeding.

The four ablation regimes are reachable through config flags:

* ``loss_variant="ce"`` trains the softmax baseline with the extra
  "no incident" neuron; absolute negatives (scene augmentation, and class
  negatives when enabled) supervise that neuron.
* ``use_class_negatives=False`` drops negative-only records from the
  incident loss.
* ``use_places_aug=False`` drops scene-augmentation records entirely.

Training is bit-deterministic for a fixed (seed, data, config, platform):
batch order, initialization, and reduction order are all seeded or fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import model as md
from .errors import ConfigError, DataError, NumericError
from .taxonomy import Taxonomy


@dataclass
class TrainConfig:
    loss_variant: str = "cn"
    use_class_negatives: bool = True
    use_places_aug: bool = True
    lr: float = 1e-4
    batch_size: int = 256
    min_epochs: int = 10
    max_epochs: int = 60
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple[int, ...] = (128,)
    split_ratios: tuple[float, float, float] = (0.90, 0.05, 0.05)
    patience: int = 3
    min_improvement: float = 1e-4
    # batch reduction: supervised-coordinate sum divided by batch size, which
    # keeps gradient scale comparable between dense-positive and
    # sparse-negative batches
    reduction: str = "batch_mean"

    def validate(self) -> None:
        if self.loss_variant not in ("cn", "ce"):
            raise ConfigError(f"loss_variant must be 'cn' or 'ce', got {self.loss_variant!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (1 <= self.min_epochs <= self.max_epochs):
            raise ConfigError(
                f"need 1 <= min_epochs <= max_epochs, got {self.min_epochs}/{self.max_epochs}"
            )
        if self.reduction != "batch_mean":
            raise ConfigError(f"unsupported reduction {self.reduction!r}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: md.ModelParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(t) for t in params.tensors()],
            v=[np.zeros_like(t) for t in params.tensors()],
        )


@dataclass
class TrainResult:
    params: md.ModelParams
    log: list[dict]
    split: ds.SplitManifest
    epochs_run: int


def adam_step(
    params: md.ModelParams,
    grads: md.ParamGrads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[md.ModelParams, AdamState]:
    """One bias-corrected Adam update, in place."""
    g_tensors = grads.tensors()
    p_tensors = params.tensors()
    for g in g_tensors:
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient; aborting the optimizer step")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(p_tensors, g_tensors, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def _incident_ce_targets(
    records: Sequence[ds.PartialLabelRecord],
    taxonomy: Taxonomy,
    use_class_negatives: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Target class per record for the extra-neuron CE head, plus a row mask.

    Positives map to their class; scene-augmentation images always map to the
    "no incident" class; class-negative-only records map there too when class
    negatives are enabled, and are excluded otherwise.
    """
    n = taxonomy.n_incidents
    idx = np.zeros(len(records), dtype=np.intp)
    mask = np.zeros(len(records))
    for i, r in enumerate(records):
        if r.incident_pos is not None:
            idx[i] = taxonomy.incident_index(r.incident_pos)
            mask[i] = 1.0
        elif r.source == "places_aug":
            idx[i] = n
            mask[i] = 1.0
        elif r.incident_neg and use_class_negatives:
            idx[i] = n
            mask[i] = 1.0
    return idx, mask


def _batch_losses(
    batch: ds.Batch,
    fwd: md.ForwardResult,
    taxonomy: Taxonomy,
    config: TrainConfig,
) -> tuple[md.LossOutput, md.LossOutput]:
    if config.loss_variant == "cn":
        inc_w = batch.incident.weights
        if not config.use_class_negatives:
            neg_only = np.array(
                [r.incident_pos is None for r in batch.records], dtype=bool
            )
            inc_w = np.where(neg_only[:, None], 0.0, inc_w)
        inc = md.cn_loss(fwd.incident_logits, batch.incident.targets, inc_w)
        pl = md.cn_loss(fwd.place_logits, batch.place.targets, batch.place.weights)
        return inc, pl

    inc_idx, inc_mask = _incident_ce_targets(
        batch.records, taxonomy, config.use_class_negatives
    )
    inc = md.ce_loss(fwd.incident_logits, inc_idx, inc_mask)
    pl_idx = np.zeros(len(batch.records), dtype=np.intp)
    pl_mask = np.zeros(len(batch.records))
    for i, r in enumerate(batch.records):
        if r.place_pos is not None:
            pl_idx[i] = taxonomy.place_index(r.place_pos)
            pl_mask[i] = 1.0
    pl = md.ce_loss(fwd.place_logits, pl_idx, pl_mask)
    return inc, pl


def _assert_places_aug_masked(batch: ds.Batch, inc_grad: np.ndarray) -> None:
    """Under the masked loss, augmentation rows must not touch the incident head."""
    aug_rows = [i for i, r in enumerate(batch.records) if r.source == "places_aug"]
    if aug_rows and np.any(inc_grad[aug_rows] != 0.0):
        raise NumericError("places_aug rows leaked gradient into the incident head")


def _eval_pass(
    params: md.ModelParams,
    records: Sequence[ds.PartialLabelRecord],
    store: ds.EmbeddingStore,
    taxonomy: Taxonomy,
    config: TrainConfig,
) -> tuple[float, float, float]:
    """Loss + incident/place mAP on a held-out set; never mutates training state."""
    if not records:
        return float("nan"), float("nan"), float("nan")
    total, total_rows = 0.0, 0
    inc_rows, pl_rows = [], []
    for batch in ds.batch_iter(records, store, taxonomy, 4096, seed=0, epoch=0):
        fwd = md.forward(params, batch.embeddings)
        inc, pl = _batch_losses(batch, fwd, taxonomy, config)
        total += inc.value + pl.value
        total_rows += len(batch.records)
        inc_conf, pl_conf = md.predict_confidences(
            params, batch.embeddings, config.loss_variant
        )
        inc_rows += ev.scored_examples(batch.records, inc_conf, "incident", taxonomy)
        pl_rows += ev.scored_examples(batch.records, pl_conf, "place", taxonomy)
    loss = total / total_rows
    inc_map = ev.detection_map(inc_rows, "incident", taxonomy).mean_ap
    pl_map = ev.detection_map(pl_rows, "place", taxonomy).mean_ap
    return loss, inc_map, pl_map


def train(
    records: Sequence[ds.PartialLabelRecord],
    store: ds.EmbeddingStore,
    taxonomy: Taxonomy,
    config: TrainConfig,
    split: ds.SplitManifest | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train until the validation incident mAP stops improving.

    Runs at least `min_epochs`; after that, stops once the convergence metric
    has failed to improve by more than `min_improvement` for `patience`
    consecutive epochs, or at `max_epochs`.
    """
    config.validate()
    pool = list(records)
    if not config.use_places_aug:
        pool = [r for r in pool if r.source != "places_aug"]
    if not pool:
        raise DataError("empty training pool")
    ds.validate_embedding_coverage(pool, store)

    if split is None:
        split = ds.split(pool, seed=config.seed, ratios=config.split_ratios)
    train_recs = split.subset(pool, "train")
    val_recs = split.subset(pool, "val")
    if not train_recs:
        raise DataError("empty training split")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(0,)))
    params = md.init_params(
        dim=store.dim,
        n_incident=taxonomy.n_incidents,
        n_place=taxonomy.n_places,
        hidden=config.hidden,
        loss_variant=config.loss_variant,
        rng=rng,
    )
    state = AdamState.for_params(params)

    log: list[dict] = []
    best_metric = -np.inf
    stale = 0
    epochs_run = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.max_epochs):
            epoch_sum, epoch_rows = 0.0, 0
            for batch in ds.batch_iter(
                train_recs, store, taxonomy, config.batch_size, config.seed, epoch
            ):
                b = len(batch.records)
                fwd = md.forward(params, batch.embeddings)
                inc, pl = _batch_losses(batch, fwd, taxonomy, config)
                if config.loss_variant == "cn":
                    _assert_places_aug_masked(batch, inc.grad_logits)
                grads = md.backward(
                    params, fwd, inc.grad_logits / b, pl.grad_logits / b
                )
                adam_step(
                    params, grads, state, config.lr, config.beta1, config.beta2, config.eps
                )
                epoch_sum += md.combined_loss(inc, pl)
                epoch_rows += b

            val_loss, val_inc_map, val_pl_map = _eval_pass(
                params, val_recs, store, taxonomy, config
            )
            # no wall-clock fields: the log must be identical across reruns
            entry = {
                "epoch": epoch,
                "train_loss": epoch_sum / epoch_rows,
                "val_loss": val_loss,
                "val_incident_map": val_inc_map,
                "val_place_map": val_pl_map,
            }
            log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            epochs_run = epoch + 1

            # convergence metric: val incident mAP, falling back to -val_loss
            # when no class has a defined AP (tiny validation splits)
            metric = val_inc_map if np.isfinite(val_inc_map) else -val_loss
            if not np.isfinite(metric):
                metric = -entry["train_loss"]
            if metric > best_metric + config.min_improvement:
                best_metric = metric
                stale = 0
            else:
                stale += 1
            if epochs_run >= config.min_epochs and stale >= config.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(params=params, log=log, split=split, epochs_run=epochs_run)
