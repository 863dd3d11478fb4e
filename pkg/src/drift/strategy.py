"""The teacher's strategy (pseudo-labels and sample weights) and the losses built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

import numpy as np

from drift import autodiff as ad
from drift.autodiff import Node
from drift.models import (ParamSet, constant_params, ema_update, forward,
                          tracked_teacher_params, values_of)

TRACKED = "tracked_teacher"
DETACHED = "detached_teacher"
MODES = ("semi", "weak")


@dataclass(frozen=True)
class StrategyConfig:
    """Pseudo-label temperature plus the ablation switches.

    ``track_labels`` / ``track_weights`` decide whether gradients flow through
    the pseudo-labels / sample weights back to the teacher.
    """

    tau: float = 0.5
    freq_normalize: bool = True
    use_soft_labels: bool = True
    use_sample_weights: bool = True
    track_labels: bool = True
    track_weights: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.track_labels and not self.use_soft_labels:
            raise ValueError("track_labels requires use_soft_labels")
        if self.track_weights and not self.use_sample_weights:
            raise ValueError("track_weights requires use_sample_weights")

    @property
    def tracks_anything(self) -> bool:
        return self.track_labels or self.track_weights

    def detached(self) -> "StrategyConfig":
        return StrategyConfig(self.tau, self.freq_normalize, self.use_soft_labels,
                              self.use_sample_weights, False, False)


@dataclass
class FollowerStrategy:
    pseudo_labels: Node
    weights: Node
    produced_from: str


@dataclass
class Objective:
    loss: Node
    strategy: FollowerStrategy
    teacher: ParamSet  # value of the current teacher
    teacher_probs: Node


def hard_pseudo_label(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest index."""
    probs = np.asarray(probs)
    return np.argmax(probs, axis=1)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def soft_pseudo_labels(teacher_probs: Node, cfg: StrategyConfig) -> Node:
    """Temperature-sharpened pseudo-labels, optionally divided by batch class frequency.

    With frequency normalization the (i, j) entry is proportional to
    p_ij^(1/tau) / f_j where f_j = sum_i' p_i'j^(1/tau) over the batch. Evaluated
    in log space as softmax_rows(log p / tau - log f).
    """
    if teacher_probs.value.ndim != 2 or teacher_probs.shape[0] == 0:
        raise ValueError(f"need a non-empty n x C batch, got shape {teacher_probs.shape}")
    if not cfg.tau > 0:
        raise ValueError("tau must be positive")
    n = teacher_probs.shape[0]
    scaled = ad.mul(ad.log(teacher_probs), 1.0 / cfg.tau)
    if cfg.freq_normalize:
        freq = ad.sum(ad.exp(scaled), axis=0)
        scaled = scaled - ad.broadcast_row(ad.log(freq), n)
    return ad.softmax_rows(scaled)


def entropy_rows(dist: Node) -> Node:
    return -ad.sum(dist * ad.log(dist), axis=1)


def sample_weights(pseudo_labels: Node, num_classes: int) -> Node:
    """1 - H(row) / log C: one-hot rows get weight 1, uniform rows weight 0."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    return 1.0 - entropy_rows(pseudo_labels) * (1.0 / math.log(num_classes))


def kl_rows(p: Node, q: Node) -> Node:
    if p.shape != q.shape:
        raise ad.ShapeError("kl_rows", p.shape, q.shape)
    return ad.sum(p * (ad.log(p) - ad.log(q)), axis=1)


def student_loss(student_probs: Node, strategy: FollowerStrategy) -> Node:
    """Mean over the batch of weight_i * KL(pseudo_label_i || student_i)."""
    return ad.mean(strategy.weights * kl_rows(strategy.pseudo_labels, student_probs))


def supervised_loss(student_probs: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy against integer labels."""
    n, c = student_probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ad.ShapeError("supervised_loss", student_probs.shape, labels.shape)
    target = one_hot(labels, c)
    return -ad.mean(ad.sum(ad.log(student_probs) * target, axis=1))


def build_strategy(teacher_probs: Node, cfg: StrategyConfig, tracked: bool = True) -> FollowerStrategy:
    """Pseudo-labels and weights from teacher outputs.

    When ``tracked`` is false (or a track flag is off) the corresponding piece
    is cut from the graph; the weights are always computed from the
    un-detached pseudo-labels so that "detach labels only" leaves the weight
    path intact.
    """
    tape = teacher_probs.tape
    n, c = teacher_probs.shape
    if not tracked:
        teacher_probs = ad.stop_gradient(teacher_probs)
    if cfg.use_soft_labels:
        labels = soft_pseudo_labels(teacher_probs, cfg)
    else:
        labels = tape.constant(one_hot(hard_pseudo_label(teacher_probs.value), c))
    if cfg.use_sample_weights:
        weights = sample_weights(labels, c)
        if not cfg.track_weights:
            weights = ad.stop_gradient(weights)
    else:
        weights = tape.constant(np.ones(n))
    if not cfg.track_labels:
        labels = ad.stop_gradient(labels)
    produced_from = TRACKED if tracked and cfg.tracks_anything else DETACHED
    return FollowerStrategy(labels, weights, produced_from)


def _pseudo_label_inputs(mode: str, labeled_batch, unlabeled_batch) -> np.ndarray:
    x_u = np.asarray(unlabeled_batch, dtype=np.float64)
    if mode == "semi" or labeled_batch is None or len(labeled_batch[0]) == 0:
        return x_u
    # weak labels are discarded; only the inputs join the batch
    return np.concatenate([np.asarray(labeled_batch[0], dtype=np.float64), x_u], axis=0)


def build_objective(student: Mapping[str, Node], teacher_prev: ParamSet, alpha: float,
                    labeled_batch: Optional[Tuple[np.ndarray, np.ndarray]],
                    unlabeled_batch: Optional[np.ndarray], cfg: StrategyConfig,
                    mode: str = "semi", tracked: bool = True) -> Objective:
    """Student objective for one iteration.

    semi: supervised cross-entropy on the labeled batch plus the weighted KL
    term on the unlabeled batch. weak: weighted KL term alone over the union of
    both batches. With ``tracked`` the teacher is rebuilt inside the graph from
    the student; otherwise it is a constant and only the leader term of the
    gradient remains.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "semi":
        if labeled_batch is None or len(labeled_batch[0]) == 0:
            raise ValueError("semi mode requires a non-empty labeled batch")
        if unlabeled_batch is None or len(unlabeled_batch) == 0:
            raise ValueError("semi mode requires a non-empty unlabeled batch")
    elif (labeled_batch is None or len(labeled_batch[0]) == 0) and \
            (unlabeled_batch is None or len(unlabeled_batch) == 0):
        raise ValueError("weak mode requires a non-empty batch")
    if unlabeled_batch is None or len(unlabeled_batch) == 0:
        unlabeled_batch = np.zeros((0, np.shape(labeled_batch[0])[1]))

    tape = next(iter(student.values())).tape
    if tracked and cfg.tracks_anything:
        teacher_nodes = tracked_teacher_params(teacher_prev, student, alpha)
    else:
        teacher_nodes = constant_params(tape, ema_update(teacher_prev, values_of(student), alpha))
    return objective_from_teacher(student, teacher_nodes, labeled_batch, unlabeled_batch,
                                  cfg, mode, tracked)


def objective_from_teacher(student: Mapping[str, Node], teacher: Mapping[str, Node],
                           labeled_batch, unlabeled_batch, cfg: StrategyConfig,
                           mode: str = "semi", tracked: bool = True) -> Objective:
    """Same loss as :func:`build_objective`, with the teacher supplied as nodes.

    Making the teacher a leaf and the student a constant isolates the
    interaction part of the gradient.
    """
    x_pseudo = _pseudo_label_inputs(mode, labeled_batch, unlabeled_batch)
    teacher_probs = forward(teacher, x_pseudo)
    strategy = build_strategy(teacher_probs, cfg, tracked=tracked)
    loss = student_loss(forward(student, x_pseudo), strategy)
    if mode == "semi":
        x_l, y_l = labeled_batch
        loss = supervised_loss(forward(student, x_l), y_l) + loss
    return Objective(loss, strategy, values_of(teacher), teacher_probs)


def drift_objective(student: Mapping[str, Node], teacher_prev: ParamSet, alpha: float,
                    labeled_batch, unlabeled_batch, cfg: StrategyConfig,
                    mode: str = "semi", tracked: bool = True) -> Node:
    return build_objective(student, teacher_prev, alpha, labeled_batch, unlabeled_batch,
                           cfg, mode, tracked).loss
