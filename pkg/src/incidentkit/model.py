"""Shared-trunk two-head MLP and its training losses with analytic gradients.

Two loss variants:

* ``cn`` -- per-class binary cross-entropy with a {0,1} weight vector that
  masks classes whose label is unknown. Masked coordinates contribute
  exactly zero to the value and gradient, so a record supervises only the
  classes a human actually labeled.
* ``ce`` -- softmax cross-entropy with one extra "no incident" output
  neuron; absolute negatives (scene-augmentation images, and class-negative
  records when enabled) train that neuron instead.

Everything here is plain numpy in float64; gradients are hand-derived for
this fixed architecture. The trunk is an MLP over precomputed embeddings
(tanh nonlinearity), standing in for a convolutional backbone whose
features are assumed to be extracted upstream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError

CHECKPOINT_MAGIC = b"INCCKPT1"

# probabilities reported to users are clamped away from {0, 1}
PROB_CLAMP = 1e-7


@dataclass
class ModelParams:
    """Trunk layer weights plus the two task heads.

    Weight matrices are (out, in); biases are flat (out,). The incident head
    has one extra output row under the ``ce`` variant (the "no incident"
    neuron).
    """

    trunk: list[tuple[np.ndarray, np.ndarray]]
    incident_head: tuple[np.ndarray, np.ndarray]
    place_head: tuple[np.ndarray, np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in self.trunk:
            out += [w, b]
        out += [*self.incident_head, *self.place_head]
        return out

    def validate(self) -> None:
        for t in self.tensors():
            if not np.isfinite(t).all():
                raise NumericError("non-finite model parameter")
        dim = self.trunk[0][0].shape[1] if self.trunk else None
        prev = dim
        for w, b in self.trunk:
            if w.shape[1] != prev or b.shape != (w.shape[0],):
                raise DataError(f"inconsistent trunk shapes: {w.shape}, {b.shape}")
            prev = w.shape[0]
        for w, b in (self.incident_head, self.place_head):
            if w.shape[1] != prev or b.shape != (w.shape[0],):
                raise DataError(f"inconsistent head shapes: {w.shape}, {b.shape}")

    @property
    def input_dim(self) -> int:
        return self.trunk[0][0].shape[1] if self.trunk else self.incident_head[0].shape[1]


@dataclass
class ParamGrads:
    trunk: list[tuple[np.ndarray, np.ndarray]]
    incident_head: tuple[np.ndarray, np.ndarray]
    place_head: tuple[np.ndarray, np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in self.trunk:
            out += [w, b]
        out += [*self.incident_head, *self.place_head]
        return out


@dataclass
class ForwardResult:
    trunk_features: np.ndarray
    incident_logits: np.ndarray
    place_logits: np.ndarray
    activations: list[np.ndarray]  # [input, hidden_1, ..., hidden_H]


@dataclass
class LossOutput:
    """Loss value, gradient w.r.t. the logits, and how many terms were supervised."""

    value: float
    grad_logits: np.ndarray
    supervised_count: int


def init_params(
    dim: int,
    n_incident: int,
    n_place: int,
    hidden: Sequence[int] = (128,),
    loss_variant: str = "cn",
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Xavier-uniform initialization; biases start at zero."""
    rng = rng or np.random.default_rng(0)
    n_inc_out = n_incident + 1 if loss_variant == "ce" else n_incident

    def layer(n_in, n_out):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        return w, np.zeros(n_out)

    trunk = []
    prev = dim
    for width in hidden:
        trunk.append(layer(prev, width))
        prev = width
    return ModelParams(
        trunk=trunk,
        incident_head=layer(prev, n_inc_out),
        place_head=layer(prev, n_place),
    )


def forward(params: ModelParams, embeddings: np.ndarray) -> ForwardResult:
    """Run the trunk and both heads; caches activations for backward."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"embeddings must be 2-D (batch, dim), got shape {x.shape}")
    if x.shape[1] != params.input_dim:
        raise DataError(
            f"embedding dim {x.shape[1]} does not match model input {params.input_dim}"
        )
    activations = [x]
    h = x
    for w, b in params.trunk:
        h = np.tanh(h @ w.T + b)
        activations.append(h)
    wi, bi = params.incident_head
    wp, bp = params.place_head
    return ForwardResult(
        trunk_features=h,
        incident_logits=h @ wi.T + bi,
        place_logits=h @ wp.T + bp,
        activations=activations,
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cn_loss(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> LossOutput:
    """Masked binary cross-entropy over class logits.

    value = -sum_i w_i [y_i log s(x_i) + (1 - y_i) log(1 - s(x_i))]
    computed in log-space as w * (max(x, 0) - x y + log(1 + exp(-|x|))),
    never forming the sigmoid and then its log. Coordinates with w = 0 are
    excluded before summation, so perturbing them cannot change the value
    even at the last bit. grad_i = w_i (s(x_i) - y_i).

    Accepts a single class vector or a (batch, classes) matrix; the value is
    the unreduced sum over all supervised coordinates.
    """
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.shape != y.shape or x.shape != w.shape:
        raise DataError(f"shape mismatch: logits {x.shape}, targets {y.shape}, weights {w.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("cn_loss targets must be 0 or 1")
    if not np.isin(w, (0.0, 1.0)).all():
        raise DataError("cn_loss weights must be 0 or 1")

    supervised = w > 0.0
    per_term = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    value = float(np.sum(np.where(supervised, per_term, 0.0)))
    grad = np.where(supervised, sigmoid(x) - y, 0.0)
    return LossOutput(value=value, grad_logits=grad, supervised_count=int(supervised.sum()))


def ce_loss(
    logits: np.ndarray,
    target_class: int | np.ndarray,
    row_mask: np.ndarray | None = None,
) -> LossOutput:
    """Softmax cross-entropy via a stable log-sum-exp.

    For a single logit vector, `target_class` is the true index (the last
    index is the "no incident" class for the incident head). For a batch,
    pass per-row indices plus an optional {0,1} row mask; masked rows
    contribute nothing.
    """
    x = np.asarray(logits, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    idx = np.atleast_1d(np.asarray(target_class, dtype=np.intp))
    if idx.shape[0] != x.shape[0]:
        raise DataError(f"{x.shape[0]} logit rows but {idx.shape[0]} target classes")
    if ((idx < 0) | (idx >= x.shape[1])).any():
        raise DataError(f"target class out of range [0, {x.shape[1] - 1}]")
    mask = np.ones(x.shape[0]) if row_mask is None else np.asarray(row_mask, dtype=np.float64)

    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    rows = np.arange(x.shape[0])
    per_row = -log_probs[rows, idx]
    value = float(np.sum(np.where(mask > 0, per_row, 0.0)))

    grad = np.exp(log_probs)
    grad[rows, idx] -= 1.0
    grad *= mask[:, None]
    if single:
        grad = grad[0]
    return LossOutput(value=value, grad_logits=grad, supervised_count=int((mask > 0).sum()))


def combined_loss(incident: LossOutput, place: LossOutput) -> float:
    """Total training objective: incident loss plus place loss, unweighted."""
    return incident.value + place.value


def backward(
    params: ModelParams,
    fwd: ForwardResult,
    grad_incident_logits: np.ndarray,
    grad_place_logits: np.ndarray,
) -> ParamGrads:
    """Backpropagate logit gradients through both heads and the trunk."""
    gi = np.asarray(grad_incident_logits, dtype=np.float64)
    gp = np.asarray(grad_place_logits, dtype=np.float64)
    feats = fwd.trunk_features
    if gi.shape != fwd.incident_logits.shape or gp.shape != fwd.place_logits.shape:
        raise DataError("logit gradient shapes do not match forward output")

    wi, _ = params.incident_head
    wp, _ = params.place_head
    inc_grad = (gi.T @ feats, gi.sum(axis=0))
    pl_grad = (gp.T @ feats, gp.sum(axis=0))
    d_h = gi @ wi + gp @ wp

    trunk_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.trunk)
    for layer in range(len(params.trunk) - 1, -1, -1):
        w, _ = params.trunk[layer]
        a_out = fwd.activations[layer + 1]
        a_in = fwd.activations[layer]
        dz = d_h * (1.0 - a_out * a_out)  # tanh'
        trunk_grads[layer] = (dz.T @ a_in, dz.sum(axis=0))
        d_h = dz @ w
    return ParamGrads(trunk=trunk_grads, incident_head=inc_grad, place_head=pl_grad)


def predict_confidences(
    params: ModelParams, embeddings: np.ndarray, loss_variant: str = "cn"
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class confidences in [0,1] for both tasks.

    cn: sigmoid of each class logit. ce: softmax over classes plus the
    "no incident" neuron, reporting only the real classes' probabilities.
    Reported values are clamped away from exactly 0 and 1.
    """
    def softmax(logits):
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        return probs / probs.sum(axis=1, keepdims=True)

    fwd = forward(params, embeddings)
    if loss_variant == "cn":
        inc = sigmoid(fwd.incident_logits)
        pl = sigmoid(fwd.place_logits)
    elif loss_variant == "ce":
        inc = softmax(fwd.incident_logits)[:, :-1]
        pl = softmax(fwd.place_logits)
    else:
        raise DataError(f"unknown loss variant {loss_variant!r}")
    return (
        np.clip(inc, PROB_CLAMP, 1.0 - PROB_CLAMP),
        np.clip(pl, PROB_CLAMP, 1.0 - PROB_CLAMP),
    )


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    loss_variant: str,
    taxonomy_hash: str,
    config_echo: dict | None = None,
) -> None:
    """Versioned binary checkpoint: magic, tensor table (f32), JSON trailer."""
    tensors = params.tensors()
    meta = {
        "format": 1,
        "trunk_layers": len(params.trunk),
        "loss_variant": loss_variant,
        "taxonomy_hash": taxonomy_hash,
        "config": config_echo or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            mat = np.atleast_2d(np.asarray(t))
            fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic bytes (not a checkpoint)")
    off = len(CHECKPOINT_MAGIC)
    (n_tensors,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = []
    for _ in range(n_tensors):
        if off + 8 > len(blob):
            raise DataError(f"{path}: truncated tensor table")
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        nbytes = 4 * rows * cols
        if off + nbytes > len(blob):
            raise DataError(f"{path}: truncated tensor data")
        mat = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
        tensors.append(mat.reshape(rows, cols).astype(np.float64))
        off += nbytes
    try:
        meta = json.loads(blob[off:].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: invalid checkpoint trailer ({exc})") from exc

    n_trunk = meta.get("trunk_layers", 0)
    if len(tensors) != 2 * n_trunk + 4:
        raise DataError(
            f"{path}: trailer says {n_trunk} trunk layers but found {len(tensors)} tensors"
        )
    trunk = [(tensors[2 * i], tensors[2 * i + 1].ravel()) for i in range(n_trunk)]
    k = 2 * n_trunk
    params = ModelParams(
        trunk=trunk,
        incident_head=(tensors[k], tensors[k + 1].ravel()),
        place_head=(tensors[k + 2], tensors[k + 3].ravel()),
    )
    params.validate()
    return params, meta
