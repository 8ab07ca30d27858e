"""Sequential training over concept tasks with method-specific updates.

One trainer owns the model, the method state (anchors, curvature, teacher
snapshots, replay storage), and the task list. Every method starts from the
same cached warm start, trains up to the configured epochs per task with
best-validation-epoch restore, and is evaluated with no task identity: all
tasks share a single final depth.

Adapter methods grow one adapter level per task and freeze it afterwards;
dense methods update the shared blocks in place. The token embedding table
never trains after warm-up, and the classifier head freezes after the
first task for adapter methods.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .attack import apr_terms
from .baselines import (EwcState, ReplayBuffer, capture_anchors, ewc_penalty,
                        l2_penalty, lwf_distill, squared_grads)
from .bench import Batch, Triplet, TaskSpec, generate_task, iter_batches, make_batch
from .config import ExperimentConfig
from .errors import ContractViolation, DivergenceError
from .metrics import (average_accuracy, eval_triplets, eval_union, forgetting,
                      forgetting_consecutive)
from .model import VLModel
from .optim import AdamW, OptimConfig
from .rng import RngHub
from .tensor import Tensor, concat0, cross_entropy, no_grad, row_slice, select, softmax

log = logging.getLogger(__name__)

ADAPTER_METHODS = ("apr", "adapter", "lwf-adapter")


@dataclass
class TaskLog:
    task_id: int
    concept: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = 0.0
    wall_time_s: float = 0.0
    n_trainable: int = 0


@dataclass
class RunResult:
    method: str
    seed: int
    order: str                    # task concepts joined with '>'
    tasks: list[str]
    acc_matrix: np.ndarray        # (N, N) percent, NaN above the diagonal
    final_acc: float
    a_n: float
    f_n: float
    f_n_consecutive: float
    n_prm: float                  # trainable share in percent, final task
    wall_time_s: float
    task_logs: list[TaskLog]

    def metric(self, name: str) -> float:
        return {"final_acc": self.final_acc, "a_n": self.a_n, "f_n": self.f_n}[name]


def load_tasks(cfg: ExperimentConfig) -> list[TaskSpec]:
    return [generate_task(c, cfg.n_triplets, cfg.bench_seed) for c in cfg.tasks]


def paired_logits(model: VLModel, depth: int, batch: Batch) -> tuple[Tensor, Tensor, np.ndarray]:
    """Logits over positive rows then negative rows, one image encoding.

    Returns (logits (2B, 2), image tokens (B, n, d) as a live graph node,
    labels (2B,)). Positive and negative captions of one triplet always
    have equal padded length, so their id arrays stack directly.
    """
    tokens = model.encode_image(batch.images, depth)
    ids = np.concatenate([batch.pos_ids, batch.neg_ids], axis=0)
    mask = np.concatenate([batch.pos_mask, batch.neg_mask], axis=0)
    doubled = concat0([tokens, tokens])
    logits = model.forward_logits(ids, None, depth, mask=mask, image_tokens=doubled)
    labels = np.concatenate([np.ones(batch.size, dtype=np.int64),
                             np.zeros(batch.size, dtype=np.int64)])
    return logits, tokens, labels


def _warm_cache_key(cfg: ExperimentConfig) -> str:
    fields = {
        "seed": cfg.seed,
        "bench_seed": cfg.bench_seed,
        "model": cfg.model.to_dict(),
        "warmup_concept": cfg.warmup_concept,
        "warmup_triplets": cfg.warmup_triplets,
        "warmup_epochs": cfg.warmup_epochs,
        "dense_lr": cfg.dense_lr,
        "batch_size": cfg.batch_size,
        "optim": {"weight_decay": cfg.optim.weight_decay, "beta1": cfg.optim.beta1,
                  "beta2": cfg.optim.beta2, "eps": cfg.optim.eps},
    }
    return hashlib.sha256(json.dumps(fields, sort_keys=True).encode()).hexdigest()[:16]


def _check_finite(loss_value: float, limit: float, where: str) -> None:
    if not np.isfinite(loss_value) or loss_value > limit:
        raise DivergenceError(f"loss {loss_value} at {where} (limit {limit})")


class SequenceTrainer:
    def __init__(self, cfg: ExperimentConfig, tasks: list[TaskSpec] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.hub = RngHub(cfg.seed)
        self.tasks = load_tasks(cfg) if tasks is None else tasks
        self.model = self._warm_start()
        self.is_adapter = cfg.method in ADAPTER_METHODS
        # method state
        self.anchors: dict[str, np.ndarray] | None = None
        self.ewc = EwcState()
        self.teacher: VLModel | None = None
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.task_logs: list[TaskLog] = []

    # -- warm start ---------------------------------------------------------

    def _warm_start(self) -> VLModel:
        cfg = self.cfg
        cache = Path(cfg.cache_dir) / f"warm_{_warm_cache_key(cfg)}.ckpt"
        if cache.exists():
            arrays, meta = checkpoint.load_arrays(cache)
            log.info("warm start loaded from %s (val %.2f%%)", cache, meta.get("val_acc", -1.0))
            model = VLModel.from_state(cfg.model, arrays)
            return model
        model = VLModel(cfg.model, self.hub)
        if cfg.warmup_epochs > 0:
            task = generate_task(cfg.warmup_concept, cfg.warmup_triplets, cfg.bench_seed)
            model.set_dense_trainable(True, include_token_emb=True)
            model.set_classifier_trainable(True)
            best = self._fit(model, task, depth=0, task_id=0, lr=cfg.dense_lr,
                             epochs=cfg.warmup_epochs, concept=cfg.warmup_concept)
            val_acc = best.best_val
        else:
            val_acc = 0.0
        model.set_dense_trainable(False)
        model.set_classifier_trainable(False)
        cache.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save_arrays(cache, model.state_arrays(),
                               meta={"val_acc": val_acc, "model": cfg.model.to_dict()})
        return model

    # -- single-task loop ----------------------------------------------------

    def _loss_terms(self, model: VLModel, batch: Batch, task_id: int, depth: int,
                    attack_stream: np.random.Generator | None) -> Tensor:
        cfg = self.cfg
        method = cfg.method if task_id >= 1 else "warmup"
        logits, img_tok, labels = paired_logits(model, depth, batch)
        loss = cross_entropy(logits, labels)
        if method == "apr" and task_id >= 2 and cfg.rho > 0:
            pos_col = select(softmax(logits), 1)
            pos_clean = row_slice(pos_col, 0, batch.size)
            terms, _ = apr_terms(model, task_id, batch.pos_ids, batch.pos_mask,
                                 batch.images, pos_clean, img_tok, cfg.attack, attack_stream)
            for term in terms:
                loss = loss + cfg.rho * term
        elif method == "lwf-adapter" and task_id >= 2 and cfg.lwf_weight > 0:
            with no_grad():
                t_tok = model.encode_image(batch.images, depth - 1)
                ids = np.concatenate([batch.pos_ids, batch.neg_ids], axis=0)
                mask = np.concatenate([batch.pos_mask, batch.neg_mask], axis=0)
                t_logits = model.forward_logits(
                    ids, None, depth - 1, mask=mask, image_tokens=concat0([t_tok, t_tok])).data
            loss = loss + cfg.lwf_weight * lwf_distill(logits, t_logits, cfg.lwf_tau)
        elif method == "lwf" and task_id >= 2 and cfg.lwf_weight > 0:
            if self.teacher is None:
                raise ContractViolation("distillation teacher missing")
            with no_grad():
                t_tok = self.teacher.encode_image(batch.images, 0)
                ids = np.concatenate([batch.pos_ids, batch.neg_ids], axis=0)
                mask = np.concatenate([batch.pos_mask, batch.neg_mask], axis=0)
                t_logits = self.teacher.forward_logits(
                    ids, None, 0, mask=mask, image_tokens=concat0([t_tok, t_tok])).data
            loss = loss + cfg.lwf_weight * lwf_distill(logits, t_logits, cfg.lwf_tau)
        elif method == "l2" and task_id >= 2 and cfg.l2_weight > 0:
            loss = loss + cfg.l2_weight * l2_penalty(self._named_trainables(), self.anchors)
        elif method == "ewc" and task_id >= 2 and cfg.ewc_weight > 0 and self.ewc.n_tasks:
            loss = loss + cfg.ewc_weight * ewc_penalty(self._named_trainables(),
                                                       self.ewc.anchors, self.ewc.fisher)
        return loss

    def _named_trainables(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]

    def _fit(self, model: VLModel, task: TaskSpec, depth: int, task_id: int,
             lr: float, epochs: int, concept: str,
             attack_stream: np.random.Generator | None = None,
             replay_stream: np.random.Generator | None = None) -> TaskLog:
        cfg = self.cfg
        entry = TaskLog(task_id=task_id, concept=concept)
        params = model.trainable_parameters()
        entry.n_trainable = int(sum(p.size for p in params))
        if not params:
            raise ContractViolation(f"method {cfg.method!r} has nothing to train on task {task_id}")
        steps_per_epoch = max(1, (len(task.train) + cfg.batch_size - 1) // cfg.batch_size)
        opt = AdamW(params, OptimConfig(lr=lr, weight_decay=cfg.optim.weight_decay,
                                        beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                                        eps=cfg.optim.eps,
                                        schedule_steps=steps_per_epoch * epochs))
        shuffle = self.hub.stream(f"task{task_id}:shuffle")
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        best_state: dict[str, np.ndarray] | None = None
        started = time.perf_counter()
        for epoch in range(1, epochs + 1):
            losses = []
            order = np.arange(len(task.train))
            shuffle.shuffle(order)
            for start in range(0, len(order), cfg.batch_size):
                chunk = [task.train[int(i)] for i in order[start:start + cfg.batch_size]]
                if replay_stream is not None:
                    chunk = chunk + self.buffer.sample(len(chunk), replay_stream)
                batch = make_batch(chunk)
                loss = self._loss_terms(model, batch, task_id, depth, attack_stream)
                value = float(loss.item())
                _check_finite(value, cfg.divergence_loss,
                              f"task {task_id} epoch {epoch} step {start // cfg.batch_size}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(value)
            val_acc = eval_triplets(model, depth, task.val, cfg.eval_batch)
            entry.epochs.append({"task": task_id, "epoch": epoch,
                                 "train_loss": float(np.mean(losses)), "val_acc": val_acc})
            if best_state is None or val_acc > entry.best_val:
                entry.best_val = val_acc
                entry.best_epoch = epoch
                best_state = {n: p.data.copy() for n, p in named}
        if best_state is not None and entry.best_epoch != epochs:
            for n, p in named:
                p.data = best_state[n].copy()
        entry.wall_time_s = time.perf_counter() - started
        return entry

    def train_task(self, task_id: int) -> TaskLog:
        """Train task `task_id` (1-indexed) and update the method state."""
        cfg = self.cfg
        task = self.tasks[task_id - 1]
        attack_stream = None
        replay_stream = None
        if self.is_adapter:
            self.model.attach_task(self.hub)
            self.model.set_classifier_trainable(task_id == 1)
            depth = self.model.depth
            lr = cfg.optim.lr
            if cfg.method == "apr":
                attack_stream = self.hub.stream(f"attack:task{task_id}")
        else:
            depth = 0
            lr = cfg.dense_lr
            self.model.set_dense_trainable(True, include_token_emb=False)
            if cfg.method == "cft-lp":
                self.model.set_dense_trainable(False)
                self.model.set_classifier_trainable(True)
            elif cfg.method == "cft-fh":
                self.model.set_classifier_trainable(task_id == 1)
            else:
                self.model.set_classifier_trainable(True)
            if cfg.method == "replay":
                replay_stream = self.hub.stream("replay:sample")
        log.info("task %d (%s) method %s depth %d", task_id, task.concept, cfg.method, depth)
        entry = self._fit(self.model, task, depth, task_id, lr, cfg.epochs, task.concept,
                          attack_stream=attack_stream, replay_stream=replay_stream)
        # post-task bookkeeping
        if self.is_adapter:
            self.model.freeze_task()
            self.model.set_classifier_trainable(False)
        elif cfg.method in ("l2", "ewc"):
            anchors = capture_anchors(self._named_trainables())
            if cfg.method == "l2":
                self.anchors = anchors
            else:
                self.ewc.update(anchors, self._fisher(task, depth))
        elif cfg.method == "lwf":
            self.teacher = self.model.clone()
        elif cfg.method == "replay":
            self.buffer.add_task(task_id, task.train, self.hub.stream("replay:fill"))
        self.task_logs.append(entry)
        return entry

    def _fisher(self, task: TaskSpec, depth: int) -> dict[str, np.ndarray]:
        """Diagonal curvature: squared batch gradients averaged over the split."""
        named = self._named_trainables()
        total: dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in named}
        n_rows = 0
        for batch in iter_batches(task.train, self.cfg.batch_size):
            for _, p in named:
                p.grad = None
            logits, _, labels = paired_logits(self.model, depth, batch)
            cross_entropy(logits, labels).backward()
            sq = squared_grads(named)
            rows = 2 * batch.size
            for name in total:
                total[name] += rows * sq[name]
            n_rows += rows
        for _, p in named:
            p.grad = None
        return {name: value / n_rows for name, value in total.items()}

    # -- full sequence -------------------------------------------------------

    def eval_depth(self) -> int:
        return self.model.depth if self.is_adapter else 0

    def run(self, out_dir: Path | None = None) -> RunResult:
        cfg = self.cfg
        n = len(self.tasks)
        matrix = np.full((n, n), np.nan)
        started = time.perf_counter()
        for i in range(1, n + 1):
            self.train_task(i)
            depth = self.eval_depth()
            for j in range(1, i + 1):
                matrix[i - 1, j - 1] = eval_triplets(self.model, depth,
                                                     self.tasks[j - 1].test, cfg.eval_batch)
            log.info("after task %d: %s", i,
                     " ".join(f"{matrix[i - 1, j]:.1f}" for j in range(i)))
            if out_dir is not None and cfg.save_checkpoints:
                self.save_checkpoint(Path(out_dir) / f"task{i}.ckpt", completed=i, matrix=matrix)
        wall = time.perf_counter() - started
        final_depth = self.eval_depth()
        final_acc = eval_union(self.model, final_depth,
                               [t.test for t in self.tasks], cfg.eval_batch)
        f_max = forgetting(matrix)
        f_cons = forgetting_consecutive(matrix)
        counts = self.model.param_count(final_depth)
        n_prm = 100.0 * self.task_logs[-1].n_trainable / counts.total
        return RunResult(
            method=cfg.method, seed=cfg.seed, order=">".join(cfg.tasks), tasks=list(cfg.tasks),
            acc_matrix=matrix, final_acc=final_acc, a_n=average_accuracy(matrix),
            f_n=f_max if cfg.f_n_variant == "max" else f_cons, f_n_consecutive=f_cons,
            n_prm=n_prm, wall_time_s=wall, task_logs=self.task_logs,
        )

    def save_checkpoint(self, path: Path, completed: int, matrix: np.ndarray) -> None:
        arrays = self.model.state_arrays()
        meta = {
            "config": self.cfg.to_dict(),
            "completed_tasks": self.cfg.tasks[:completed],
            "acc_matrix": np.nan_to_num(matrix, nan=-1.0).tolist(),
            "rng": self.hub.state_dict(),
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save_arrays(path, arrays, meta=meta)


def run_sequence(cfg: ExperimentConfig, out_dir: Path | None = None,
                 tasks: list[TaskSpec] | None = None) -> RunResult:
    return SequenceTrainer(cfg, tasks=tasks).run(out_dir=out_dir)


def order_sweep(cfg: ExperimentConfig) -> list[RunResult]:
    """One run per permutation of the configured task set."""
    from itertools import permutations

    results = []
    base_tasks = {t.concept: t for t in load_tasks(cfg)}
    for perm in permutations(sorted(cfg.tasks)):
        run_cfg = copy.deepcopy(cfg)
        run_cfg.tasks = list(perm)
        ordered = [base_tasks[c] for c in perm]
        results.append(run_sequence(run_cfg, tasks=ordered))
    return results


def replay_sweep(cfg: ExperimentConfig, sizes: list[int]) -> list[RunResult]:
    """Replay runs across buffer sizes, same data and seed throughout."""
    results = []
    tasks = load_tasks(cfg)
    for size in sizes:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.method = "replay"
        run_cfg.replay_capacity = int(size)
        results.append(run_sequence(run_cfg, tasks=tasks))
    return results
