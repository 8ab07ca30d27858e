"""Pooled caption-match evaluation and continual-learning summary metrics.

Evaluation never sees a task identity: every triplet contributes one row
for its true caption (label 1) and one for its false caption (label 0),
and the model scores all rows at a single depth. A row is correct when the
match probability lands on the label's side of 0.5.

The accuracy matrix `a` holds percentages with a[i - 1][j - 1] measured on
task j's test split right after finishing task i (lower triangle only).
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation, ShapeMismatch
from .tensor import no_grad
from .bench import Triplet, iter_batches


def eval_triplets(model, depth: int, triplets: list[Triplet], batch_size: int = 64) -> float:
    """Pooled accuracy in percent over 2 rows per triplet."""
    if not triplets:
        raise ContractViolation("cannot evaluate an empty triplet list")
    correct = 0
    total = 0
    with no_grad():
        for batch in iter_batches(triplets, batch_size):
            tokens = model.encode_image(batch.images, depth)
            pos, _ = model.forward_probs(batch.pos_ids, None, depth, mask=batch.pos_mask,
                                         image_tokens=tokens)
            neg, _ = model.forward_probs(batch.neg_ids, None, depth, mask=batch.neg_mask,
                                         image_tokens=tokens)
            correct += int((pos.data > 0.5).sum()) + int((neg.data <= 0.5).sum())
            total += 2 * batch.size
    return 100.0 * correct / total


def eval_union(model, depth: int, per_task: list[list[Triplet]], batch_size: int = 64) -> float:
    """Accuracy over the concatenation of several tasks' triplets."""
    pooled = [t for task in per_task for t in task]
    return eval_triplets(model, depth, pooled, batch_size)


def _check_matrix(acc: np.ndarray) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise ShapeMismatch(f"accuracy matrix must be square, got {acc.shape}")
    n = acc.shape[0]
    if n < 1:
        raise ContractViolation("accuracy matrix is empty")
    lower = acc[np.tril_indices(n)]
    if not np.isfinite(lower).all():
        raise ContractViolation("accuracy matrix has non-finite entries on or below the diagonal")
    if lower.min() < 0.0 or lower.max() > 100.0:
        raise ContractViolation("accuracies must be percentages in [0, 100]")
    return acc


def average_accuracy(acc: np.ndarray) -> float:
    """Mean over checkpoints of the mean accuracy on tasks seen so far."""
    acc = _check_matrix(acc)
    n = acc.shape[0]
    per_step = [acc[i, : i + 1].mean() for i in range(n)]
    return float(np.mean(per_step))


def forgetting(acc: np.ndarray) -> float:
    """Mean over earlier tasks of the largest later drop from their peak.

    For task j < N this is max over i in [j, N-1] of a[i, j] - a[N-1, j];
    single-task matrices report 0.
    """
    acc = _check_matrix(acc)
    n = acc.shape[0]
    if n == 1:
        return 0.0
    drops = [max(acc[i, j] for i in range(j, n - 1)) - acc[n - 1, j] for j in range(n - 1)]
    return float(np.mean(drops))


def compute_metrics(acc: np.ndarray) -> tuple[float, float]:
    """(average accuracy, max-based forgetting) for one accuracy matrix."""
    return average_accuracy(acc), forgetting(acc)


def forgetting_consecutive(acc: np.ndarray) -> float:
    """Mean drop from each task's own checkpoint to the final one."""
    acc = _check_matrix(acc)
    n = acc.shape[0]
    if n == 1:
        return 0.0
    return float(np.mean([acc[j, j] - acc[n - 1, j] for j in range(n - 1)]))
