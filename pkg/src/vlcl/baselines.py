"""Regularizers and a replay buffer for the standard continual learners.

Everything here operates on named parameter lists and plain arrays, so the
same penalties work for any model. The training loop owns when anchors are
captured and which parameters participate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, mul, reduce_sum, log_softmax

NamedParams = list[tuple[str, Tensor]]


def capture_anchors(params: NamedParams) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params}


def l2_penalty(params: NamedParams, anchors: dict[str, np.ndarray]) -> Tensor:
    """Sum of squared distances to the anchor values."""
    total: Tensor | None = None
    for name, p in params:
        if name not in anchors:
            raise ContractViolation(f"no anchor for parameter {name!r}")
        diff = p - Tensor(anchors[name])
        term = reduce_sum(mul(diff, diff))
        total = term if total is None else total + term
    if total is None:
        raise ContractViolation("no parameters to penalize")
    return total


def ewc_penalty(params: NamedParams, anchors: dict[str, np.ndarray],
                fisher: dict[str, np.ndarray]) -> Tensor:
    """Fisher-weighted squared distance to the anchors."""
    total: Tensor | None = None
    for name, p in params:
        if name not in anchors or name not in fisher:
            raise ContractViolation(f"no anchor or fisher estimate for parameter {name!r}")
        diff = p - Tensor(anchors[name])
        term = reduce_sum(mul(Tensor(fisher[name]), mul(diff, diff)))
        total = term if total is None else total + term
    if total is None:
        raise ContractViolation("no parameters to penalize")
    return total


def squared_grads(params: NamedParams) -> dict[str, np.ndarray]:
    """Elementwise squared gradients; every parameter must carry one."""
    out = {}
    for name, p in params:
        if p.grad is None:
            raise ContractViolation(f"parameter {name!r} has no gradient")
        out[name] = p.grad * p.grad
    return out


@dataclass
class EwcState:
    """Running-average diagonal curvature plus last-task anchors."""
    fisher: dict[str, np.ndarray] = field(default_factory=dict)
    anchors: dict[str, np.ndarray] = field(default_factory=dict)
    n_tasks: int = 0

    def update(self, anchors: dict[str, np.ndarray], task_fisher: dict[str, np.ndarray]) -> None:
        self.n_tasks += 1
        self.anchors = anchors
        if self.n_tasks == 1:
            self.fisher = {k: v.copy() for k, v in task_fisher.items()}
            return
        w = 1.0 / self.n_tasks
        for key, value in task_fisher.items():
            self.fisher[key] = (1.0 - w) * self.fisher[key] + w * value


def lwf_distill(student_logits: Tensor, teacher_logits: np.ndarray, tau: float) -> Tensor:
    """Temperature-scaled KL from the teacher's softened labels to the student.

    Scaled by tau^2 and averaged over rows; exactly zero when the logits
    agree. The teacher side is a constant.
    """
    if tau <= 0:
        raise ContractViolation(f"tau must be positive, got {tau}")
    teacher = np.asarray(teacher_logits, dtype=student_logits.dtype) / tau
    teacher = teacher - teacher.max(axis=-1, keepdims=True)
    p_t = np.exp(teacher)
    p_t = p_t / p_t.sum(axis=-1, keepdims=True)
    log_p_t = np.log(p_t)
    n_rows = student_logits.shape[0]
    log_p_s = log_softmax(student_logits * (1.0 / tau))
    cross = reduce_sum(mul(Tensor(-p_t), log_p_s))
    entropy_const = float((p_t * log_p_t).sum())
    return (cross + Tensor(np.asarray(entropy_const))) * (tau * tau / n_rows)


class ReplayBuffer:
    """Fixed-capacity store with equal per-task allocation.

    After `add_task` for task t, each seen task keeps capacity // t items
    (earlier tasks absorb the remainder), subsampled uniformly from what the
    buffer still holds for it. Capacity zero stores nothing and never draws
    from its stream.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ContractViolation(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.slots: dict[int, list] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.slots.values())

    def add_task(self, task_id: int, items: list, stream: np.random.Generator) -> None:
        if self.capacity == 0:
            return
        self.slots[task_id] = list(items)
        n_tasks = len(self.slots)
        base, extra = divmod(self.capacity, n_tasks)
        for rank, tid in enumerate(sorted(self.slots)):
            quota = base + (1 if rank < extra else 0)
            held = self.slots[tid]
            if len(held) > quota:
                keep = stream.choice(len(held), size=quota, replace=False)
                self.slots[tid] = [held[int(i)] for i in sorted(keep)]

    def sample(self, n: int, stream: np.random.Generator) -> list:
        pool = [item for tid in sorted(self.slots) for item in self.slots[tid]]
        if not pool or n <= 0:
            return []
        picks = stream.integers(0, len(pool), size=n)
        return [pool[int(i)] for i in picks]
