"""Compact reference CNN with hand-rolled reverse-mode gradients.

Architecture: a stack of (3x3 same-padding conv, ReLU, 2x2 max-pool) stages
followed by global average pooling and a linear classifier. Small enough to
train on a laptop CPU in seconds, yet structurally the same f/g decomposition
as the large models the analysis pipeline targets: the final conv stage's
activations are the spatial features F, and GradCAM saliency is computed
against them.

Everything is float64 and deterministic under the given seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadSpecError,
    EmptyStageError,
    NonFiniteLossError,
    ShapeMismatchError,
)

_KERNEL = 3


@dataclass(frozen=True)
class ModelSpec:
    """Static architecture description."""

    input_hw: tuple = (28, 28)
    in_channels: int = 1
    conv_channels: tuple = (8, 16)
    class_count: int = 10

    def __post_init__(self):
        if len(self.conv_channels) < 1:
            raise BadSpecError("need at least one conv stage")
        if self.class_count < 2:
            raise BadSpecError("need at least two classes")
        h, w = self.input_hw
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
        if h < 2 or w < 2:
            raise BadSpecError(f"feature map {h}x{w} too small; reduce conv stages")

    @property
    def feature_shape(self) -> tuple:
        h, w = self.input_hw
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
        return (h, w, self.conv_channels[-1])

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "class_count": self.class_count,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            input_hw=tuple(d["input_hw"]),
            in_channels=d["in_channels"],
            conv_channels=tuple(d["conv_channels"]),
            class_count=d["class_count"],
        )


@dataclass
class ModelState:
    """Parameters plus the global iteration counter."""

    spec: ModelSpec
    params: dict
    iteration: int = 0
    init_seed: int = 0

    def snapshot(self) -> "ModelState":
        return ModelState(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            iteration=self.iteration,
            init_seed=self.init_seed,
        )


@dataclass
class ForwardRecord:
    """Batch outputs: features pre-GAP, logits, softmax confidences."""

    features: np.ndarray  # (B, h, w, d)
    logits: np.ndarray  # (B, M)
    confidences: np.ndarray  # (B, M)


@dataclass(frozen=True)
class SaliencyMap:
    """Per-location relevance in [0, 1] aligned with the feature map."""

    values: np.ndarray  # (h, w)
    target_class: int


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int
    ckpt_every: int = 0  # 0: no periodic checkpoints
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1 or self.ckpt_every < 0:
            raise BadSpecError("hyperparameters must be positive (lr may be 0)")


def init_model(spec: ModelSpec, seed: int) -> ModelState:
    """He-scaled random conv/linear weights, zero biases; deterministic."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    cin = spec.in_channels
    for i, cout in enumerate(spec.conv_channels):
        std = math.sqrt(2.0 / (_KERNEL * _KERNEL * cin))
        params[f"conv{i}.w"] = rng.normal(0.0, std, size=(_KERNEL, _KERNEL, cin, cout))
        params[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    d = spec.conv_channels[-1]
    params["head.w"] = rng.normal(0.0, math.sqrt(2.0 / d), size=(d, spec.class_count))
    params["head.b"] = np.zeros(spec.class_count)
    return ModelState(spec=spec, params=params, iteration=0, init_seed=seed)


# --- layer kernels ------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B,H,W,C) -> (B,H,W,k,k,C) patches with same padding."""
    b, h, w, c = x.shape
    pad = _KERNEL // 2
    padded = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    padded[:, pad : pad + h, pad : pad + w, :] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, (_KERNEL, _KERNEL), axis=(1, 2))
    # windows: (B,H,W,C,k,k) -> (B,H,W,k,k,C)
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))


def _conv_forward(x, w, b):
    bsz, h, wid, _ = x.shape
    cout = w.shape[3]
    patches = _im2col(x)
    out = patches.reshape(bsz * h * wid, -1) @ w.reshape(-1, cout)
    return out.reshape(bsz, h, wid, cout) + b, patches


def _conv_backward(dout, patches, w, in_shape):
    bsz, h, wid, cout = dout.shape
    dout_flat = dout.reshape(bsz * h * wid, cout)
    dw = (patches.reshape(bsz * h * wid, -1).T @ dout_flat).reshape(w.shape)
    db = dout_flat.sum(axis=0)
    dpatches = (dout_flat @ w.reshape(-1, cout).T).reshape(bsz, h, wid, _KERNEL, _KERNEL, -1)
    pad = _KERNEL // 2
    dpadded = np.zeros((bsz, in_shape[1] + 2 * pad, in_shape[2] + 2 * pad, in_shape[3]))
    for i in range(_KERNEL):
        for j in range(_KERNEL):
            dpadded[:, i : i + h, j : j + wid, :] += dpatches[:, :, :, i, j, :]
    return dw, db, dpadded[:, pad : pad + in_shape[1], pad : pad + in_shape[2], :]


def _pool_forward(x):
    b, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    tiles = x[:, : 2 * oh, : 2 * ow, :].reshape(b, oh, 2, ow, 2, c)
    tiles = tiles.transpose(0, 1, 3, 5, 2, 4).reshape(b, oh, ow, c, 4)
    switches = tiles.argmax(axis=-1)  # first max wins: deterministic
    out = np.take_along_axis(tiles, switches[..., None], axis=-1)[..., 0]
    return out, switches


def _pool_backward(dout, switches, in_shape):
    b, h, w, c = in_shape
    oh, ow = h // 2, w // 2
    dtiles = np.zeros((b, oh, ow, c, 4))
    np.put_along_axis(dtiles, switches[..., None], dout[..., None], axis=-1)
    dtiles = dtiles.reshape(b, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(in_shape)
    dx[:, : 2 * oh, : 2 * ow, :] = dtiles.reshape(b, 2 * oh, 2 * ow, c)
    return dx


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(params, spec, x, keep_cache=False):
    caches = []
    a = x
    for i in range(len(spec.conv_channels)):
        pre, patches = _conv_forward(a, params[f"conv{i}.w"], params[f"conv{i}.b"])
        act = np.maximum(pre, 0.0)
        pooled, switches = _pool_forward(act)
        if keep_cache:
            caches.append((a.shape, patches, pre, act.shape, switches))
        a = pooled
    feats = a
    gap = feats.mean(axis=(1, 2))
    logits = gap @ params["head.w"] + params["head.b"]
    probs = _softmax(logits)
    return feats, gap, logits, probs, caches


def forward(m: ModelState, x) -> ForwardRecord:
    """Batch forward pass; features captured at the last conv stage (pre-GAP)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (*m.spec.input_hw, m.spec.in_channels):
        raise ShapeMismatchError(
            f"batch shape {x.shape} != (B, {m.spec.input_hw[0]}, "
            f"{m.spec.input_hw[1]}, {m.spec.in_channels})"
        )
    feats, _, logits, probs, _ = _forward_pass(m.params, m.spec, x)
    return ForwardRecord(features=feats, logits=logits, confidences=probs)


def loss_and_grads(m: ModelState, x, labels):
    """Mean cross-entropy and its gradient for every parameter."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    feats, gap, logits, probs, caches = _forward_pass(m.params, m.spec, x, keep_cache=True)
    bsz = x.shape[0]
    h, w, d = m.spec.feature_shape
    picked = np.clip(probs[np.arange(bsz), labels], 1e-300, None)
    loss = float(-np.log(picked).mean())

    grads = {}
    dlogits = probs.copy()
    dlogits[np.arange(bsz), labels] -= 1.0
    dlogits /= bsz
    grads["head.w"] = gap.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dgap = dlogits @ m.params["head.w"].T
    dfeats = np.broadcast_to(dgap[:, None, None, :] / (h * w), feats.shape).copy()
    for i in reversed(range(len(m.spec.conv_channels))):
        in_shape, patches, pre, act_shape, switches = caches[i]
        dact = _pool_backward(dfeats, switches, act_shape)
        dpre = dact * (pre > 0.0)
        dw, db, dx = _conv_backward(dpre, patches, m.params[f"conv{i}.w"], in_shape)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
        dfeats = dx
    return loss, grads


def train(m: ModelState, dataset, hyper: TrainConfig, sink=None, loss_log=None) -> ModelState:
    """Minibatch SGD on cross-entropy; emits checkpoint snapshots to ``sink``.

    Snapshots go out at iteration 0 (pre-training), after every
    ``ckpt_every``-th update, and after the final update, without
    duplicates. ``sink(iteration, state)`` receives deep copies. Shuffling
    draws from a single generator seeded by ``hyper.seed``, one permutation
    per epoch. ``loss_log``, if given, collects the per-iteration loss.
    """
    if dataset.size == 0:
        raise EmptyStageError("training dataset is empty")
    state = m.snapshot()
    n = dataset.size
    per_epoch = math.ceil(n / hyper.batch_size)
    total = per_epoch * hyper.epochs
    emit = sink is not None and hyper.ckpt_every > 0
    if emit:
        sink(state.iteration, state.snapshot())
    rng = np.random.Generator(np.random.PCG64(hyper.seed))
    done = 0
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            loss, grads = loss_and_grads(state, dataset.images[idx], dataset.labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"loss became {loss} at iteration {state.iteration + 1}"
                )
            if loss_log is not None:
                loss_log.append(loss)
            for key, grad in grads.items():
                state.params[key] -= hyper.lr * grad
            done += 1
            state.iteration += 1
            if emit and (done % hyper.ckpt_every == 0 or done == total):
                sink(state.iteration, state.snapshot())
    return state


def grad_cam(m: ModelState, x, target_class: int) -> SaliencyMap:
    """GradCAM at the final conv stage for a single image.

    alpha_c = spatial mean of d(logit_target)/dF_c; map = ReLU(sum_c alpha_c F_c)
    normalized by its max (an identically-zero raw map stays all zeros).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (*m.spec.input_hw, m.spec.in_channels):
        raise ShapeMismatchError(f"image shape {x.shape} != {(*m.spec.input_hw, m.spec.in_channels)}")
    if not (0 <= target_class < m.spec.class_count):
        raise ShapeMismatchError(f"target_class {target_class} outside [0, {m.spec.class_count})")
    feats, _, _, _, _ = _forward_pass(m.params, m.spec, x[None], keep_cache=False)
    h, w, d = m.spec.feature_shape
    # reverse-mode from the selected logit down to F: through the linear head
    # (d logit/d gap = column of head.w) and GAP (1/(h*w) per location)
    dgap = m.params["head.w"][:, target_class]
    dfeats = np.broadcast_to(dgap / (h * w), (h, w, d))
    alpha = dfeats.mean(axis=(0, 1))
    raw = np.maximum(feats[0] @ alpha, 0.0)
    peak = raw.max()
    values = raw / peak if peak > 0.0 else np.zeros_like(raw)
    return SaliencyMap(values=values, target_class=int(target_class))


def saliency_batch(m: ModelState, x, targets=None):
    """Vectorized GradCAM over a batch; targets default to the argmax class.

    Returns (maps (B,h,w), targets (B,), confidences (B,M)). Per-sample maps
    equal grad_cam() exactly.
    """
    rec = forward(m, x)
    if targets is None:
        targets = rec.confidences.argmax(axis=1)
    targets = np.asarray(targets, dtype=np.int64)
    h, w, d = m.spec.feature_shape
    alphas = m.params["head.w"][:, targets].T / (h * w)  # (B, d)
    raw = np.maximum(np.einsum("bhwd,bd->bhw", rec.features, alphas), 0.0)
    peaks = raw.max(axis=(1, 2))
    safe = np.where(peaks > 0.0, peaks, 1.0)
    maps = raw / safe[:, None, None]
    return maps, targets, rec.confidences


def evaluate(m: ModelState, dataset) -> np.ndarray:
    """Confusion matrix: row = true label, column = argmax prediction.

    Argmax ties resolve to the lowest class index.
    """
    mm = m.spec.class_count
    cm = np.zeros((mm, mm), dtype=np.int64)
    for start in range(0, dataset.size, 512):
        batch = dataset.images[start : start + 512]
        rec = forward(m, batch)
        preds = rec.logits.argmax(axis=1)
        true = dataset.labels[start : start + 512]
        cm += np.bincount(true * mm + preds, minlength=mm * mm).reshape(mm, mm)
    return cm


def finetune(m: ModelState, schedule, lr: float, epochs_per_stage: int, seed: int,
             batch_size: int = 128) -> ModelState:
    """Sequential training stages sharing optimizer settings.

    Stage i shuffles with seed+i; the iteration counter runs on across
    stages. Raises EmptyStageError on a missing/empty stage.
    """
    if not schedule:
        raise EmptyStageError("schedule has no stages")
    state = m
    for i, stage in enumerate(schedule):
        if stage is None or stage.size == 0:
            raise EmptyStageError(f"stage {i} is empty")
        cfg = TrainConfig(lr=lr, epochs=epochs_per_stage, batch_size=batch_size,
                          ckpt_every=0, seed=seed + i)
        state = train(state, stage, cfg, sink=None)
    return state


# --- model persistence ---------------------------------------------------------


def save_model(state: ModelState, path) -> None:
    from . import artifact_store

    meta = {
        "spec": state.spec.to_dict(),
        "iteration": state.iteration,
        "init_seed": state.init_seed,
    }
    tensors = {name: arr for name, arr in sorted(state.params.items())}
    artifact_store.write_container(path, kind="model", meta=meta, tensors=tensors,
                                   dtype="f64")


def load_model(path) -> ModelState:
    from . import artifact_store

    meta, reader = artifact_store.read_container(path, expect_kind="model")
    spec = ModelSpec.from_dict(meta["spec"])
    params = {name: reader.tensor(name) for name in reader.tensor_names()}
    return ModelState(spec=spec, params=params, iteration=int(meta["iteration"]),
                      init_seed=int(meta["init_seed"]))
