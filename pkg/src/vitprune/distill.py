"""Distillation losses, AdamW, the cosine schedule and the fine-tuning loop."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import NumericError
from .model import Model, accuracy, classify, encode, forward, trunc_normal
from .tensor import Tape, Tensor

STRATEGIES = ("soft", "hard", "soft_patch", "penultimate_mse", "none")

# KL argument order per strategy: soft distillation measures KL(teacher || student);
# the soft+patch objective is written with the student distribution first.
KL_TEACHER_FIRST = "teacher||student"
KL_STUDENT_FIRST = "student||teacher"
KL_DIRECTION = {"soft": KL_TEACHER_FIRST, "soft_patch": KL_STUDENT_FIRST}


def _labels(y, batch: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got {y.shape}")
    return y


def _check_pair(student: Tensor, teacher) -> np.ndarray:
    t = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher)
    if student.ndim != 2 or t.shape != student.shape:
        raise ValueError(f"student logits {student.shape} and teacher logits {t.shape} must both be (batch, classes)")
    return t


def log_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean negative log-likelihood of integer labels ``y``."""
    B, K = logits.shape
    y = _labels(y, B)
    if y.min() < 0 or y.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    picked = T.getitem(T.log_softmax(logits), (np.arange(B), y))
    return T.mul(T.sum_(picked), -1.0 / B)


def kl_teacher_student(student: Tensor, teacher) -> Tensor:
    """Batch mean of KL(q || p), q from the constant teacher logits."""
    t = _check_pair(student, teacher)
    log_q = log_probs(t)
    q = np.exp(log_q)
    B = student.shape[0]
    terms = T.mul(Tensor(q), T.sub(Tensor(log_q), T.log_softmax(student)))
    return T.mul(T.sum_(terms), 1.0 / B)


def kl_student_teacher(student: Tensor, teacher) -> Tensor:
    """Batch mean of KL(p || q), p the student distribution."""
    t = _check_pair(student, teacher)
    log_q = Tensor(log_probs(t))
    B = student.shape[0]
    log_p = T.log_softmax(student)
    terms = T.mul(T.softmax(student), T.sub(log_p, log_q))
    return T.mul(T.sum_(terms), 1.0 / B)


def soft_kd_loss(student: Tensor, teacher, y, alpha: float) -> Tensor:
    """CE(y, p) + alpha * KL(q || p)."""
    _check_pair(student, teacher)
    loss = cross_entropy(student, y)
    if alpha:
        loss = T.add(loss, T.mul(kl_teacher_student(student, teacher), float(alpha)))
    return loss


def hard_kd_loss(student: Tensor, teacher, y, alpha: float) -> Tensor:
    """CE(p, y) + alpha * CE(p, argmax q); argmax ties go to the lowest class."""
    t = _check_pair(student, teacher)
    loss = cross_entropy(student, y)
    if alpha:
        loss = T.add(loss, T.mul(cross_entropy(student, np.argmax(t, axis=-1)), float(alpha)))
    return loss


def token_mse(projected: Tensor, target) -> Tensor:
    """Sum over tokens of the per-token mean squared error, averaged over the batch."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if projected.shape != t.shape:
        raise ValueError(f"projected tokens {projected.shape} vs teacher tokens {t.shape}")
    B, N, D = projected.shape
    d = T.sub(projected, Tensor(t))
    return T.mul(T.sum_(T.mul(d, d)), 1.0 / (B * D))


def patch_kd_loss(student: Tensor, teacher, y, alpha: float, beta: float,
                  student_tokens: Tensor, teacher_tokens, head: Mapping[str, Tensor]) -> Tensor:
    """CE(p, y) + alpha * KL(p || q) + beta * sum_i MSE(FC_token(s_i), t_i).

    ``head`` holds the token projection as ``weight`` (teacher dim, student dim)
    and ``bias``.
    """
    _check_pair(student, teacher)
    tt = np.asarray(teacher_tokens.data if isinstance(teacher_tokens, Tensor) else teacher_tokens)
    if student_tokens.shape[:2] != tt.shape[:2]:
        raise ValueError(f"student has {student_tokens.shape[1]} patch tokens, teacher {tt.shape[1]}")
    loss = cross_entropy(student, y)
    if alpha:
        loss = T.add(loss, T.mul(kl_student_teacher(student, teacher), float(alpha)))
    if beta:
        proj = T.linear(student_tokens, head["weight"], head["bias"])
        loss = T.add(loss, T.mul(token_mse(proj, tt), float(beta)))
    return loss


def penultimate_mse_loss(student: Tensor, features: Tensor, teacher_features, y, alpha: float,
                         adapter: Mapping[str, Tensor] | None = None) -> Tensor:
    """CE(p, y) + alpha * MSE(f_s, f_t), MSE averaged over feature dim and batch."""
    tf = np.asarray(teacher_features.data if isinstance(teacher_features, Tensor) else teacher_features)
    f = features
    if adapter is not None:
        f = T.linear(f, adapter["weight"], adapter["bias"])
    if f.shape != tf.shape:
        raise ValueError(f"feature dims differ ({f.shape} vs {tf.shape}); supply an adapter")
    loss = cross_entropy(student, y)
    if alpha:
        d = T.sub(f, Tensor(tf))
        loss = T.add(loss, T.mul(T.sum_(T.mul(d, d)), float(alpha) / tf.size))
    return loss


# -- optimizer and schedule -------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               no_decay: set[str] | frozenset = frozenset()) -> dict[str, np.ndarray]:
    """One AdamW update with decoupled weight decay; returns new parameter arrays.

    ``state`` is advanced in place. Names in ``no_decay`` skip the decay.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new = p * (1.0 - lr * weight_decay) if (weight_decay and name not in no_decay) else p
        out[name] = new - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int | None = None) -> float:
    """Linear warmup to ``base_lr`` (reached at ``warmup_steps``), then cosine decay to 0 at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps is None:
        warmup_steps = int(round(0.05 * total_steps))
    if step < warmup_steps:
        return base_lr * (step + 1) / (warmup_steps + 1)
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- fine-tuning loop --------------------------------------------------------

@dataclass
class DistillConfig:
    strategy: str = "soft"
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 10
    lr: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 64
    seed: int = 0
    warmup_frac: float = 0.05
    augment: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown distillation strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


class TrainingDiverged(NumericError):
    def __init__(self, message: str, model: Model, epoch: int):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


def no_decay_names(names) -> set[str]:
    """Biases, norm scales and the token/position embeddings are not decayed."""
    out = set()
    for n in names:
        leaf = n.rsplit(".", 1)[-1]
        if leaf == "bias" or "norm" in n or n in ("cls_token", "pos_embed"):
            out.add(n)
    return out


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    """Random horizontal flip and random crop after zero padding."""
    B, C, H, W = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    flips = rng.random(B) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
    for i in range(B):
        y0, x0 = offs[i]
        img = padded[i, :, y0:y0 + H, x0:x0 + W]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


def _aux_head(rng, out_dim: int, in_dim: int, dtype) -> dict[str, np.ndarray]:
    return {"weight": trunc_normal(rng, (out_dim, in_dim), 0.02).astype(dtype), "bias": np.zeros(out_dim, dtype)}


def _teacher_outputs(teacher: Model, images: np.ndarray, batch: int = 256):
    logits, tokens, feats = [], [], []
    for i in range(0, len(images), batch):
        o = forward(teacher, images[i:i + batch])
        logits.append(o.logits.data)
        tokens.append(o.patch_tokens.data)
        feats.append(o.feature.data)
    return np.concatenate(logits), np.concatenate(tokens), np.concatenate(feats)


def finetune(student: Model, teacher: Model | None, data, config: DistillConfig, eval_data=None,
             log: Callable[[dict], None] | None = None) -> tuple[Model, list[dict]]:
    """Train ``student`` on ``data`` with the configured objective.

    Returns the trained model and one log record per epoch. The teacher is
    only ever read. With one thread the run is deterministic given the seed.
    """
    images, labels = np.asarray(data.images), np.asarray(data.labels)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = config
    needs_teacher = cfg.strategy != "none" and (cfg.alpha > 0 or (cfg.strategy == "soft_patch" and cfg.beta > 0))
    if needs_teacher and teacher is None:
        raise ValueError(f"strategy {cfg.strategy!r} needs a teacher")
    records: list[dict] = []
    if cfg.epochs == 0:
        return student, records
    dtype = student.dtype
    images = images.astype(dtype, copy=False)
    rng = np.random.default_rng(cfg.seed)
    weights = dict(student.weights)
    aux: dict[str, np.ndarray] = {}
    spec = student.spec
    if needs_teacher:
        t_logits, t_tokens, t_feats = (None, None, None) if cfg.augment else _teacher_outputs(teacher, images)
        if cfg.strategy == "soft_patch":
            aux.update({f"token_head.{k}": v for k, v in
                        _aux_head(rng, teacher.spec.embed_dim, spec.embed_dim, dtype).items()})
        if cfg.strategy == "penultimate_mse" and teacher.spec.embed_dim != spec.embed_dim:
            aux.update({f"feature_adapter.{k}": v for k, v in
                        _aux_head(rng, teacher.spec.embed_dim, spec.embed_dim, dtype).items()})
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = int(round(cfg.warmup_frac * total))
    state = AdamState()
    skip_decay = no_decay_names(list(weights) + list(aux))
    pad = max(1, spec.image_size[0] // 8)
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        lr = 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if cfg.augment:
                xb = augment_batch(xb, rng, pad)
            lr = cosine_lr(step, total, cfg.lr, warmup)
            params = {k: Tensor(v, requires_grad=True, name=k) for k, v in weights.items()}
            aux_t = {k: Tensor(v, requires_grad=True, name=k) for k, v in aux.items()}
            if needs_teacher:
                if cfg.augment:
                    tl, tt, tf = _teacher_outputs(teacher, xb)
                else:
                    tl, tt, tf = t_logits[idx], t_tokens[idx], t_feats[idx]
            with Tape() as tape:
                out = classify(spec, params, encode(spec, params, xb))
                if not needs_teacher:
                    loss = cross_entropy(out.logits, yb)
                elif cfg.strategy == "soft":
                    loss = soft_kd_loss(out.logits, tl, yb, cfg.alpha)
                elif cfg.strategy == "hard":
                    loss = hard_kd_loss(out.logits, tl, yb, cfg.alpha)
                elif cfg.strategy == "soft_patch":
                    head = {"weight": aux_t["token_head.weight"], "bias": aux_t["token_head.bias"]}
                    loss = patch_kd_loss(out.logits, tl, yb, cfg.alpha, cfg.beta, out.patch_tokens, tt, head)
                else:
                    adapter = None
                    if aux_t:
                        adapter = {"weight": aux_t["feature_adapter.weight"], "bias": aux_t["feature_adapter.bias"]}
                    loss = penultimate_mse_loss(out.logits, out.feature, tf, yb, cfg.alpha, adapter)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {s}", Model(spec, weights), epoch)
            grads = tape.backward(loss)
            all_params = {**weights, **aux}
            g = {k: grads[t] for k, t in {**params, **aux_t}.items()}
            try:
                updated = adamw_step(all_params, g, state, lr, weight_decay=cfg.weight_decay, no_decay=skip_decay)
            except NumericError as e:
                raise TrainingDiverged(str(e), Model(spec, weights), epoch) from None
            weights = {k: updated[k] for k in weights}
            aux = {k: updated[k] for k in aux}
            loss_sum += loss.item() * len(idx)
            seen += len(idx)
            step += 1
        rec = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen}
        if eval_data is not None:
            rec["eval_top1"] = accuracy(Model(spec, weights), eval_data.images, eval_data.labels)
        records.append(rec)
        if log is not None:
            log(rec)
    return Model(spec, weights), records


def config_dict(cfg: DistillConfig) -> dict:
    return asdict(cfg)


def log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)
