"""Linear projection-head training with Adam and a cyclic learning rate.

Only the bias-free head is trained; inputs are the (normalised) backbone
embeddings and the head output is normalised again inside the loss, so the
training geometry matches retrieval.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hierarchy import HierarchicalLabel
from .losses import LossParams, Selection, compute_loss
from .retrieval import LabeledSet, normalize_rows

logger = logging.getLogger(__name__)


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    lr_min: float = 2e-6
    lr_max: float = 2e-4
    cycle_steps: int | None = None  # None: ten epochs' worth of steps
    epochs: int = 200
    max_steps: int | None = None
    classes_per_batch: int = 8
    samples_per_class: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    out_dim: int = 128
    schedule: str = "triangular"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.cycle_steps is not None and self.cycle_steps < 2:
            raise ValueError("cycle_steps must be at least 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.schedule not in ("triangular", "triangular2"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.classes_per_batch < 2 and self.samples_per_class < 2:
            raise ValueError("a batch needs at least two samples")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})


def cyclic_lr(step: int, cfg: TrainConfig, cycle_steps: int | None = None) -> float:
    """Triangular wave: lr_min at the cycle start, lr_max half-way through.

    ``triangular2`` halves the amplitude after every completed cycle.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    period = cycle_steps or cfg.cycle_steps
    if period is None or period < 2:
        raise ValueError("cycle length must be at least 2 steps")
    cycle, pos = divmod(step, period)
    x = abs(2.0 * pos / period - 1.0)
    amplitude = cfg.lr_max - cfg.lr_min
    if cfg.schedule == "triangular2":
        amplitude /= 2.0**cycle
    return cfg.lr_min + amplitude * (1.0 - x)


@dataclass
class AdamState:
    param: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, param: np.ndarray, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        p = np.array(param, dtype=np.float64)
        return cls(param=p, m=np.zeros_like(p), v=np.zeros_like(p), beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, grads: np.ndarray, lr: float) -> AdamState:
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != state.param.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameter shape {state.param.shape}")
    if not np.all(np.isfinite(g)):
        raise TrainingDivergenceError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    with np.errstate(over="ignore", invalid="ignore"):
        param = state.param - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(param)):
        raise TrainingDivergenceError("non-finite parameters after update")
    return AdamState(param=param, m=m, v=v, t=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps)


def class_index(labels: Sequence[HierarchicalLabel]) -> dict[str, np.ndarray]:
    """Sample indices per leaf class, keyed and ordered by class key."""
    groups: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab.leaf, []).append(i)
    return {k: np.array(groups[k]) for k in sorted(groups)}


def sample_batch(
    classes: dict[str, np.ndarray],
    classes_per_batch: int,
    samples_per_class: int,
    rng: np.random.Generator,
    require_positives: bool = True,
) -> np.ndarray:
    """Pick ``classes_per_batch`` distinct classes and ``samples_per_class`` samples of each."""
    if require_positives and samples_per_class < 2:
        raise ValueError("samples_per_class must be at least 2 when the loss needs positives")
    eligible = [k for k, idx in classes.items() if len(idx) >= samples_per_class]
    if len(eligible) < classes_per_batch:
        raise ValueError(
            f"need {classes_per_batch} classes with >= {samples_per_class} samples, found {len(eligible)}"
        )
    chosen = rng.choice(len(eligible), size=classes_per_batch, replace=False)
    batch = []
    for c in chosen:
        # sort first so the draw depends on sample ids, not storage order
        members = np.sort(classes[eligible[c]])
        batch.extend(members[rng.choice(len(members), size=samples_per_class, replace=False)].tolist())
    return np.array(batch, dtype=np.int64)


@dataclass
class ProjectionHead:
    weight: np.ndarray

    @classmethod
    def init(cls, in_dim: int, out_dim: int = 128, seed: int = 0) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        return cls(weight=rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim)))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Normalise inputs, apply the head; output is left unnormalised."""
        return normalize_rows(x) @ self.weight.T

    def embed(self, x: np.ndarray) -> np.ndarray:
        return normalize_rows(self.project(x))


def head_loss_and_grad(
    weight: np.ndarray,
    inputs: np.ndarray,
    labels: Sequence[HierarchicalLabel],
    params: LossParams,
    selection: Selection | None = None,
):
    """Loss of the projected batch and its gradient with respect to ``weight``."""
    x = normalize_rows(inputs)
    out = compute_loss(x @ weight.T, labels, params, selection)
    return out, out.grad_embeddings.T @ x


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    head: ProjectionHead
    history: list[StepRecord] = field(default_factory=list)
    steps_per_epoch: int = 0
    cycle_steps: int = 0


def steps_per_epoch(n_samples: int, cfg: TrainConfig) -> int:
    return max(1, math.ceil(n_samples / cfg.batch_size))


def train(
    dataset: LabeledSet,
    loss: LossParams,
    cfg: TrainConfig,
    init: ProjectionHead | None = None,
) -> TrainResult:
    """Fit the projection head on ``dataset`` (the seen split)."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    norms = np.linalg.norm(dataset.vectors, axis=1)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0):
        raise ValueError("training inputs must be finite with non-zero norm")
    head = init or ProjectionHead.init(dataset.vectors.shape[1], cfg.out_dim, cfg.seed)
    classes = class_index(dataset.labels)
    # canonical order: sampling draws over sorted ids, so record order does not matter
    order = sorted(range(len(dataset)), key=dataset.ids.__getitem__)
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    canon = {k: np.sort(rank[v]) for k, v in classes.items()}
    vectors = dataset.vectors[order]
    labels = [dataset.labels[i] for i in order]

    spe = steps_per_epoch(len(dataset), cfg)
    total = cfg.epochs * spe
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    cycle = cfg.cycle_steps or max(2, 10 * spe)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState.init(head.weight, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history: list[StepRecord] = []
    for step in range(total):
        idx = sample_batch(canon, cfg.classes_per_batch, cfg.samples_per_class, rng, require_positives=True)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out, grad_w = head_loss_and_grad(state.param, vectors[idx], [labels[i] for i in idx], loss)
        except ValueError as exc:
            # inputs were validated above, so a bad projection means the weights blew up
            raise TrainingDivergenceError(f"{exc} at step {step}", history) from None
        lr = cyclic_lr(step, cfg, cycle)
        history.append(StepRecord(step=step, lr=lr, loss=out.value))
        if not math.isfinite(out.value):
            raise TrainingDivergenceError(f"non-finite loss at step {step}", history)
        try:
            state = adam_step(state, grad_w, lr)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"{exc} at step {step}", history) from None
        if step % 50 == 0:
            logger.debug("step %d lr %.3g loss %.6f", step, lr, out.value)
    return TrainResult(head=ProjectionHead(state.param), history=history, steps_per_epoch=spe, cycle_steps=cycle)


def write_history(path: str | Path, history: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for rec in history:
            w.writerow([rec.step, repr(rec.lr), repr(rec.loss)])


__all__ = [
    "AdamState",
    "ProjectionHead",
    "StepRecord",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergenceError",
    "adam_step",
    "class_index",
    "cyclic_lr",
    "head_loss_and_grad",
    "sample_batch",
    "steps_per_epoch",
    "train",
    "write_history",
]
