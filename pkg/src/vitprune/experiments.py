"""Hermetic desk-scale experiments shared by the CLI ablations and the acceptance suite.

Data are Gaussian images labelled by a small random ViT (the labeler) whose
classifier bias is calibrated so the classes are near-balanced. A teacher
is trained on those labels, pruned, and fine-tuned; every comparison is
scored on a held-out split labelled the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .arch import ArchSpec
from .data import Dataset, synth_images
from .distill import DistillConfig, finetune
from .importance import build_proxy, score_model
from .model import Model, accuracy, init_model, predict_logits
from .surgeon import ChannelTargets, one_shot_block_prune, progressive_block_prune, prune_channels


@dataclass(frozen=True)
class Hermetic:
    image_size: int = 8
    patch_size: int = 4
    in_channels: int = 3
    num_classes: int = 4
    teacher_dim: int = 64
    teacher_depth: int = 4
    teacher_heads: int = 4
    mlp_ratio: float = 4.0
    labeler_dim: int = 32
    labeler_depth: int = 1
    labeler_heads: int = 2
    labeler_std: float = 0.1
    n_train: int = 4096
    n_eval: int = 1024
    teacher_epochs: int = 30
    teacher_lr: float = 1e-3
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 64
    proxy_size: int = 64
    student_dim: int = 32
    student_heads: int = 2
    alpha: float = 1.0
    beta: float = 1.0

    def teacher_spec(self) -> ArchSpec:
        return ArchSpec.vit(self.image_size, self.patch_size, self.teacher_dim, self.teacher_depth,
                            self.teacher_heads, self.mlp_ratio, self.num_classes, self.in_channels)

    def student_spec(self) -> ArchSpec:
        return ArchSpec.vit(self.image_size, self.patch_size, self.student_dim, self.teacher_depth,
                            self.student_heads, self.mlp_ratio, self.num_classes, self.in_channels)

    def student_targets(self) -> ChannelTargets:
        return ChannelTargets(embed_dim=self.student_dim, attn_dim=self.student_dim, heads=self.student_heads,
                              ffn_dim=int(round(self.student_dim * self.mlp_ratio)))

    def train_config(self, seed: int, strategy: str = "soft", epochs: int | None = None) -> DistillConfig:
        return DistillConfig(strategy=strategy, alpha=self.alpha, beta=self.beta,
                             epochs=self.epochs if epochs is None else epochs, lr=self.lr,
                             weight_decay=self.weight_decay, batch_size=self.batch_size, seed=seed)


def calibrate_bias(logits: np.ndarray, iters: int = 500) -> np.ndarray:
    """Additive class offsets that make argmax frequencies close to uniform."""
    K = logits.shape[1]
    b = np.zeros(K)
    step = 0.5 * float(np.std(logits))
    for _ in range(iters):
        freq = np.bincount((logits + b).argmax(axis=1), minlength=K) / len(logits)
        b -= step * (freq - 1.0 / K)
    return b


def make_labeler(h: Hermetic, seed: int) -> Model:
    spec = ArchSpec.vit(h.image_size, h.patch_size, h.labeler_dim, h.labeler_depth, h.labeler_heads,
                        2.0, h.num_classes, h.in_channels)
    m = init_model(spec, seed=10_000 + seed, std=h.labeler_std)
    calib = synth_images(4000, h.image_size, h.in_channels, seed=20_000 + seed)
    w = dict(m.weights)
    w["head.bias"] = calibrate_bias(predict_logits(m, calib))
    return Model(spec, w)


def make_data(h: Hermetic, seed: int, labeler: Model | None = None) -> tuple[Dataset, Dataset]:
    labeler = labeler or make_labeler(h, seed)

    def split(n, s, tag):
        x = synth_images(n, h.image_size, h.in_channels, seed=s)
        y = predict_logits(labeler, x).argmax(axis=1)
        return Dataset(x, y.astype(np.int64), h.num_classes, (0.0,) * h.in_channels,
                       (1.0,) * h.in_channels, tag, "synth-labeler")

    return split(h.n_train, 30_000 + seed, "train"), split(h.n_eval, 40_000 + seed, "eval")


@dataclass
class Bundle:
    """Per-seed shared state: data, the trained teacher and its accuracies."""

    seed: int
    train: Dataset
    eval: Dataset
    teacher: Model
    teacher_train_acc: float
    teacher_eval_acc: float


def prepare(h: Hermetic, seed: int) -> Bundle:
    train, ev = make_data(h, seed)
    base = init_model(h.teacher_spec(), seed=seed)
    cfg = DistillConfig(strategy="none", epochs=h.teacher_epochs, lr=h.teacher_lr,
                        weight_decay=h.weight_decay, batch_size=h.batch_size, seed=seed)
    teacher, _ = finetune(base, None, train, cfg)
    return Bundle(seed, train, ev, teacher, accuracy(teacher, train.images, train.labels),
                  accuracy(teacher, ev.images, ev.labels))


def prune_to_student(h: Hermetic, b: Bundle, strategy: int = 1) -> Model:
    proxy = build_proxy(b.train, h.proxy_size, seed=b.seed)
    table = score_model(b.teacher, proxy, blocks=False)
    student, _ = prune_channels(b.teacher, table, targets=h.student_targets(), strategy=strategy)
    return student


def distill_vs_scratch(h: Hermetic, b: Bundle) -> dict:
    """Pruned + soft-distilled student against the same architecture trained from scratch."""
    pruned = prune_to_student(h, b)
    distilled, _ = finetune(pruned, b.teacher, b.train, h.train_config(b.seed, "soft"))
    scratch, _ = finetune(init_model(h.student_spec(), seed=b.seed + 1), None, b.train,
                          h.train_config(b.seed, "none"))
    return {
        "seed": b.seed,
        "teacher_eval": b.teacher_eval_acc,
        "pruned_eval": accuracy(pruned, b.eval.images, b.eval.labels),
        "distilled_eval": accuracy(distilled, b.eval.images, b.eval.labels),
        "scratch_eval": accuracy(scratch, b.eval.images, b.eval.labels),
    }


def progressive_vs_one_shot(h: Hermetic, b: Bundle, remove: int = 2) -> dict:
    """Remove ``remove`` block candidates progressively or all at once, then fine-tune both."""
    proxy = build_proxy(b.train, h.proxy_size, seed=b.seed)
    target = b.teacher.spec.depth - remove
    prog, _, hist = progressive_block_prune(b.teacher, proxy, target)
    once, _, chosen = one_shot_block_prune(b.teacher, proxy, remove)
    cfg = h.train_config(b.seed, "soft")
    prog_ft, _ = finetune(prog, b.teacher, b.train, cfg)
    once_ft, _ = finetune(once, b.teacher, b.train, cfg)
    return {
        "seed": b.seed,
        "progressive_removed": ",".join(s.candidate for s in hist),
        "one_shot_removed": ",".join(chosen),
        "progressive_eval": accuracy(prog_ft, b.eval.images, b.eval.labels),
        "one_shot_eval": accuracy(once_ft, b.eval.images, b.eval.labels),
    }


def head_strategies(h: Hermetic, b: Bundle) -> list[dict]:
    """Strategies 1-3 at the student shape, each fine-tuned identically."""
    proxy = build_proxy(b.train, h.proxy_size, seed=b.seed)
    table = score_model(b.teacher, proxy, blocks=False)
    rows = []
    for strategy in (1, 2, 3):
        try:
            student, _ = prune_channels(b.teacher, table, targets=h.student_targets(), strategy=strategy)
        except ValueError as e:
            rows.append({"seed": b.seed, "strategy": strategy, "eval": float("nan"), "note": str(e)})
            continue
        ft, _ = finetune(student, b.teacher, b.train, h.train_config(b.seed, "soft"))
        rows.append({"seed": b.seed, "strategy": strategy,
                     "pruned_eval": accuracy(student, b.eval.images, b.eval.labels),
                     "eval": accuracy(ft, b.eval.images, b.eval.labels), "note": ""})
    return rows


def distill_strategies(h: Hermetic, b: Bundle) -> list[dict]:
    """Every distillation objective applied to the same pruned student."""
    pruned = prune_to_student(h, b)
    rows = []
    for strategy in ("none", "soft", "hard", "soft_patch", "penultimate_mse"):
        ft, _ = finetune(pruned, b.teacher, b.train, h.train_config(b.seed, strategy))
        rows.append({"seed": b.seed, "strategy": strategy, "eval": accuracy(ft, b.eval.images, b.eval.labels)})
    return rows


def with_overrides(h: Hermetic, **kw) -> Hermetic:
    return replace(h, **{k: v for k, v in kw.items() if v is not None})
