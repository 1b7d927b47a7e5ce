"""Task-learning and knowledge-amalgamation objectives."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from mtsl.errors import ContractError, ShapeError
from mtsl.tensor import (
    AdamState,
    Tensor,
    affine,
    clip,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    sigmoid,
    sqrt,
    square,
    sub,
    transpose,
    tsum,
)

LOSS_KINDS = ("mse", "softmax-cross-entropy")


@dataclass(frozen=True)
class TaskLoss:
    kind: str = "mse"
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.kind!r}")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ContractError(f"task loss weight must be finite and >= 0, got {self.weight}")


@dataclass(frozen=True)
class TaskLossSpec:
    losses: Mapping[str, TaskLoss]

    @classmethod
    def uniform(cls, tasks, kind: str = "mse") -> TaskLossSpec:
        return cls({t: TaskLoss(kind) for t in tasks})

    def __getitem__(self, task: str) -> TaskLoss:
        return self.losses[task]

    def __iter__(self):
        return iter(self.losses)


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def task_loss(output: Tensor, target, kind: str) -> Tensor:
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if kind == "mse":
        if target.shape != output.shape:
            raise ShapeError(f"mse: output {output.shape} vs target {target.shape}")
        return mean(square(sub(output, Tensor(target))))
    if target.ndim == 1:
        onehot = np.zeros(output.shape)
        onehot[np.arange(len(target)), target.astype(int)] = 1.0
        target = onehot
    if target.shape != output.shape:
        raise ShapeError(f"cross-entropy: output {output.shape} vs target {target.shape}")
    return mul(mean(tsum(mul(log_softmax(output), Tensor(target)), axis=1)), -1.0)


def task_losses(outputs: Mapping[str, Tensor], targets: Mapping, spec: TaskLossSpec) -> dict[str, Tensor]:
    out = {}
    for t in spec:
        if t not in targets:
            raise ContractError(f"no target supplied for task {t!r}")
        if t not in outputs:
            raise ContractError(f"no output produced for task {t!r}")
        out[t] = task_loss(outputs[t], targets[t], spec[t].kind)
    return out


def multitask_loss(outputs: Mapping[str, Tensor], targets: Mapping, spec: TaskLossSpec) -> Tensor:
    """Weighted sum of per-task losses."""
    total = None
    for t, loss in task_losses(outputs, targets, spec).items():
        term = mul(loss, spec[t].weight)
        total = term if total is None else total + term
    return total


def _hsic1_t(k: Tensor, l: Tensor, n: int) -> Tensor:
    row = tsum(mul(tsum(k, axis=1), tsum(l, axis=1)))
    num = tsum(mul(k, l)) + tsum(k) * tsum(l) * (1.0 / ((n - 1) * (n - 2))) - row * (2.0 / (n - 2))
    return num * (1.0 / (n * (n - 3)))


def cka_unbiased_t(x: Tensor, y: Tensor) -> Tensor:
    """Differentiable unbiased linear CKA of two (N, C) tensors."""
    x, y = _as_t(x), _as_t(y)
    n = x.shape[0]
    if y.shape[0] != n:
        raise ShapeError(f"sample counts differ: {n} vs {y.shape[0]}")
    if n < 4:
        raise ContractError(f"unbiased CKA needs at least 4 samples, got {n}")
    off_diag = Tensor(1.0 - np.eye(n))
    k = mul(matmul(x, transpose(x)), off_diag)
    l = mul(matmul(y, transpose(y)), off_diag)
    hxx = _hsic1_t(k, k, n)
    hyy = _hsic1_t(l, l, n)
    if hxx.item() <= 1e-12 or hyy.item() <= 1e-12:
        return Tensor(0.0)
    return clip(_hsic1_t(k, l, n) / sqrt(hxx * hyy), -1.0, 1.0)


def cka_alignment_loss(sites: Sequence[Sequence[Tensor]]) -> Tensor:
    """Mean unbiased CKA over all co-fusible task-node pairs.

    ``sites`` holds one list of task-node features per fusion site.  With
    no pair anywhere, returns the constant 1.0 so the penalty vanishes.
    """
    values = []
    for feats in sites:
        for a, b in itertools.combinations(feats, 2):
            values.append(cka_unbiased_t(a, b))
    if not values:
        return Tensor(1.0)
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total * (1.0 / len(values))


def combined_loss(mtl: Tensor, cka: Tensor, lam: float) -> Tensor:
    """Multi-task loss plus ``lam * (1 - cka)``."""
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return mtl
    return mtl + mul(sub(1.0, cka), lam)


@dataclass
class AttNet:
    """Channel-attention net: affine(C->H), ReLU, affine(H->C), sigmoid."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    adam: dict[str, AdamState] = field(default_factory=dict)

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, hidden: int | None = None, adam_hyper=None):
        hidden = channels if hidden is None else hidden
        b_in = 1.0 / np.sqrt(channels)
        b_hid = 1.0 / np.sqrt(hidden)
        net = cls(
            Tensor(rng.uniform(-b_in, b_in, (hidden, channels)), True),
            Tensor(rng.uniform(-b_in, b_in, hidden), True),
            Tensor(rng.uniform(-b_hid, b_hid, (channels, hidden)), True),
            Tensor(rng.uniform(-b_hid, b_hid, channels), True),
        )
        net.adam = {n: AdamState.fresh(p.shape, **(adam_hyper or {})) for n, p in net.params().items()}
        return net

    @property
    def channels(self) -> int:
        return self.w2.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def set_param(self, name: str, value: Tensor) -> None:
        setattr(self, name, value)

    def __call__(self, feature: Tensor) -> Tensor:
        return sigmoid(affine(relu(affine(feature, self.w1, self.b1)), self.w2, self.b2))


def amalgamation_loss(member_features: Sequence, attnets: Sequence[AttNet], group_feature: Tensor) -> Tensor:
    """Mean over members of mean((F_i - att_i(G) * G)^2).

    Member features are treated as fixed targets: no gradient reaches them.
    """
    if len(member_features) != len(attnets) or not attnets:
        raise ContractError("need one attention net per member feature")
    g = _as_t(group_feature)
    total = None
    for f, att in zip(member_features, attnets):
        f = np.asarray(getattr(f, "data", f), dtype=np.float64)
        if f.shape != g.shape:
            raise ShapeError(f"member feature {f.shape} vs group feature {g.shape}")
        if att.channels != g.shape[1]:
            raise ShapeError(f"attention width {att.channels} vs {g.shape[1]} channels")
        term = mean(square(sub(Tensor(f), mul(att(g), g))))
        total = term if total is None else total + term
    return total * (1.0 / len(attnets))
