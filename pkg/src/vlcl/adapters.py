"""Layered low-rank adapter stacks.

Each adaptable function (a linear map or an embedding table) owns a frozen
base weight plus an ordered list of per-task low-rank residuals. The task-i
weight is defined recursively as the task-(i-1) weight plus down_i @ up_i.
Invoking the stack at depth j applies the base and the first j residuals
without ever materializing a dense weight, so every historical depth stays
available at no extra parameter cost.

Conventions. Linear bases are stored (in, out) and applied as y = x @ W, so
a residual is (x @ down) @ up with down (in, r) and up (r, out). Embedding
bases are stored (entries, dim) with row gather; a residual gathers rows of
down (entries, r) and multiplies by up (r, dim). The up factor is Gaussian
initialized and the down factor starts at zero, so a freshly attached level
contributes exactly nothing.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation, StateError
from .tensor import Tensor, embedding, matmul

KINDS = ("linear", "embedding")


class LowRankAdapter:
    """One task level of a stack: the (down, up) residual pair."""

    __slots__ = ("down", "up", "task")

    def __init__(self, down: Tensor, up: Tensor, task: int):
        self.down = down
        self.up = up
        self.task = task

    @property
    def rank(self) -> int:
        return self.down.data.shape[1]

    @property
    def frozen(self) -> bool:
        return not (self.down.requires_grad or self.up.requires_grad)

    def freeze(self) -> None:
        self.down.requires_grad = False
        self.up.requires_grad = False
        self.down.grad = None
        self.up.grad = None

    def param_count(self) -> int:
        return self.down.data.size + self.up.data.size


class AdapterStack:
    """Base weight plus task-indexed low-rank residual levels."""

    def __init__(self, name: str, kind: str, base: Tensor):
        if kind not in KINDS:
            raise ContractViolation(f"unknown stack kind {kind!r}")
        if base.data.ndim != 2:
            raise ContractViolation(f"stack base must be 2-d, got {base.data.shape}")
        self.name = name
        self.kind = kind
        self.base = base
        self.adapters: list[LowRankAdapter] = []
        # Incremented only when a dense weight is materialized (fold path);
        # tests assert plain forwards never touch it.
        self.materializations = 0

    @property
    def depth(self) -> int:
        return len(self.adapters)

    def check_depth(self, depth: int) -> None:
        if not (0 <= depth <= len(self.adapters)):
            raise IndexError(f"stack {self.name}: depth {depth} not in [0, {len(self.adapters)}]")

    # -- lifecycle -------------------------------------------------------------

    def attach(self, rank: int, stream: np.random.Generator) -> int:
        """Add one trainable level on top. The previous top must be frozen."""
        n_in, n_out = self.base.data.shape
        if rank < 1 or rank > min(n_in, n_out):
            raise ContractViolation(
                f"stack {self.name}: rank {rank} invalid for base shape {self.base.data.shape}"
            )
        if self.adapters and not self.adapters[-1].frozen:
            raise StateError(f"stack {self.name}: top level still trainable; freeze it first")
        dtype = self.base.data.dtype
        down = Tensor(np.zeros((n_in, rank), dtype=dtype), requires_grad=True)
        up = Tensor(stream.normal(0.0, 0.02, size=(rank, n_out)).astype(dtype), requires_grad=True)
        self.adapters.append(LowRankAdapter(down, up, task=len(self.adapters) + 1))
        return len(self.adapters)

    def freeze_top(self) -> None:
        if not self.adapters:
            raise StateError(f"stack {self.name}: nothing to freeze")
        self.adapters[-1].freeze()

    # -- application -------------------------------------------------------------

    def apply(self, x: Tensor, depth: int) -> Tensor:
        """Linear stacks: y = x @ W_depth, computed residual by residual."""
        if self.kind != "linear":
            raise ContractViolation(f"stack {self.name} is {self.kind}, not linear")
        self.check_depth(depth)
        y = matmul(x, self.base)
        for level in self.adapters[:depth]:
            y = y + matmul(matmul(x, level.down), level.up)
        return y

    def lookup(self, ids: np.ndarray, depth: int) -> Tensor:
        """Embedding stacks: rows of W_depth for integer ids."""
        if self.kind != "embedding":
            raise ContractViolation(f"stack {self.name} is {self.kind}, not embedding")
        self.check_depth(depth)
        y = embedding(self.base, ids)
        for level in self.adapters[:depth]:
            y = y + matmul(embedding(level.down, ids), level.up)
        return y

    # -- dense views ---------------------------------------------------------------

    def effective_weight(self, depth: int) -> np.ndarray:
        """Dense W_depth = base + sum of residual products. Fold-only path."""
        self.check_depth(depth)
        self.materializations += 1
        w = self.base.data.copy()
        for level in self.adapters[:depth]:
            w += level.down.data @ level.up.data
        return w

    # -- accounting -------------------------------------------------------------------

    def param_counts(self, depth: int) -> tuple[int, int]:
        """(base parameter count, adapter parameter count up to depth)."""
        self.check_depth(depth)
        adapter = sum(level.param_count() for level in self.adapters[:depth])
        return self.base.data.size, adapter

    def level_params(self, task: int) -> list[Tensor]:
        for level in self.adapters:
            if level.task == task:
                return [level.down, level.up]
        raise IndexError(f"stack {self.name}: no adapter for task {task}")

    def all_params(self) -> list[tuple[str, Tensor]]:
        out = [(f"{self.name}/base", self.base)]
        for level in self.adapters:
            out.append((f"{self.name}/task{level.task}/down", level.down))
            out.append((f"{self.name}/task{level.task}/up", level.up))
        return out
