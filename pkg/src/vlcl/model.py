"""Two-stream matching model: image encoder, text encoder, cross-decoder, head.

The text encoder is a stack of pre-norm self-attention blocks. The decoder
runs the same self-attention blocks (the parameter objects are shared, not
copied) and inserts a cross-attention block after each one; image tokens
enter cross-attention only as keys and values, so every decoder block
preserves the text sequence shape. A learned pooling query reduces the
decoder output to one vector (an exact masked mean at its zero init), and a
two-layer head maps it to (negative, positive) logits.

Every linear map and every positional or patch embedding is an AdapterStack,
so the whole network can be invoked at any historical task depth. The token
embedding table and the classifier head are plain tensors: the former is
shared across depths and frozen after base training, the latter trains during
the first task only.
"""
from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .adapters import AdapterStack
from .errors import ConfigError, ContractViolation, DataFormatError, ShapeMismatch
from .rng import RngHub
from .tensor import (
    Tensor,
    default_dtype,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    select,
    softmax,
    transpose,
)

NEG_INF = -1e30  # additive mask value; exp() underflows to exactly zero


@dataclass
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_heads: int = 4
    text_layers: int = 2
    image_layers: int = 2
    max_text_len: int = 8
    image_hw: int = 32
    image_channels: int = 3
    patch_size: int = 8
    classifier_hidden: int = 64
    mlp_ratio: int = 4
    adapter_rank: int = 4
    init_scale: float = 0.1  # stddev of dense weight init
    pos_ramp: float = 0.2    # slope of the fixed coordinate ramp in the first two patch-position channels
    ln_eps: float = 1e-6

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.image_hw % self.patch_size != 0:
            raise ConfigError(f"image_hw {self.image_hw} not divisible by patch {self.patch_size}")
        for name in ("vocab_size", "d_model", "text_layers", "image_layers", "max_text_len",
                     "classifier_hidden", "mlp_ratio", "adapter_rank"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.init_scale <= 0:
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")
        if self.pos_ramp < 0:
            raise ConfigError(f"pos_ramp must be >= 0, got {self.pos_ramp}")

    @property
    def n_patches(self) -> int:
        side = self.image_hw // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ParamCounts:
    base: int
    adapter: int
    trainable: int

    @property
    def total(self) -> int:
        return self.base + self.adapter

    @property
    def trainable_pct(self) -> float:
        return 100.0 * self.trainable / self.total if self.total else 0.0


def make_pad_mask(ids: np.ndarray, pad_id: int) -> np.ndarray:
    """1.0 at real tokens, 0.0 at padding."""
    return (np.asarray(ids) != pad_id).astype(default_dtype())


class VLModel:
    def __init__(self, cfg: ModelConfig, hub: RngHub | None):
        """Build the model; `hub=None` skips random init (weights all zero)."""
        cfg.validate()
        self.cfg = cfg
        self.stacks: dict[str, AdapterStack] = {}
        self.norms: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        dt = default_dtype()

        def init(name: str, shape: tuple[int, ...]) -> Tensor:
            if hub is None:
                arr = np.zeros(shape, dtype=dt)
            else:
                arr = hub.stream(f"init:{name}").normal(0.0, cfg.init_scale, size=shape).astype(dt)
            return Tensor(arr)

        def add_stack(name: str, kind: str, shape: tuple[int, int]) -> None:
            self.stacks[name] = AdapterStack(name, kind, init(name, shape))

        def add_norm(name: str) -> None:
            self.norms[name] = (np.ones(cfg.d_model, dtype=dt), np.zeros(cfg.d_model, dtype=dt))

        def add_block(prefix: str) -> None:
            hidden = cfg.d_model * cfg.mlp_ratio
            for part in ("q", "k", "v", "o"):
                add_stack(f"{prefix}/attn/{part}", "linear", (cfg.d_model, cfg.d_model))
            add_stack(f"{prefix}/mlp/fc1", "linear", (cfg.d_model, hidden))
            add_stack(f"{prefix}/mlp/fc2", "linear", (hidden, cfg.d_model))
            add_norm(f"{prefix}/ln1")
            add_norm(f"{prefix}/ln2")

        self.token_emb = init("token_emb", (cfg.vocab_size, cfg.d_model))
        # Text positions carry a fixed ramp on channel 2 (images use 0 and 1)
        # so mention order inside a caption is a monotone feature as well.
        if hub is None:
            txt_pos = Tensor(np.zeros((cfg.max_text_len, cfg.d_model), dtype=dt))
        else:
            tp = hub.stream("init:text_pos").normal(0.0, cfg.init_scale,
                                                    size=(cfg.max_text_len, cfg.d_model))
            if cfg.d_model > 2:
                tp[:, 2] = (np.arange(cfg.max_text_len) - (cfg.max_text_len - 1) / 2.0) * cfg.pos_ramp
            txt_pos = Tensor(tp.astype(dt))
        self.stacks["text_pos"] = AdapterStack("text_pos", "embedding", txt_pos)
        add_stack("img_patch", "linear", (cfg.patch_dim, cfg.d_model))
        # Patch positions start factorized (row vector + column vector) so that
        # patches sharing a row or column share an embedding component, and the
        # first two channels carry fixed linear coordinate ramps so relative
        # order along each axis is a monotone feature attention can compare.
        side = cfg.image_hw // cfg.patch_size
        if hub is None:
            img_pos = Tensor(np.zeros((cfg.n_patches, cfg.d_model), dtype=dt))
        else:
            axes = hub.stream("init:img_pos").normal(0.0, cfg.init_scale, size=(2, side, cfg.d_model))
            pos = axes[0][:, None, :] + axes[1][None, :, :]
            coords = np.arange(side) - (side - 1) / 2.0
            pos[..., 0] = coords[:, None] * cfg.pos_ramp
            if cfg.d_model > 1:
                pos[..., 1] = coords[None, :] * cfg.pos_ramp
            img_pos = Tensor(pos.reshape(cfg.n_patches, cfg.d_model).astype(dt))
        self.stacks["img_pos"] = AdapterStack("img_pos", "embedding", img_pos)
        for layer in range(cfg.image_layers):
            add_block(f"img{layer}")
        for layer in range(cfg.text_layers):
            add_block(f"txt{layer}")
            add_block(f"cross{layer}")
        add_norm("img_final")
        add_norm("txt_final")

        self.cls_w1 = init("cls_w1", (cfg.d_model, cfg.classifier_hidden))
        self.cls_w2 = init("cls_w2", (cfg.classifier_hidden, 2))
        # Pooling query for the head's sequence-to-vector step. Zero init makes
        # the pool an exact masked mean; training lets it weight caption tokens
        # unevenly, keeping word-order information a plain mean cancels out.
        # Trained during task 1 only, frozen afterwards, like the head.
        self.cls_pool = Tensor(np.zeros(cfg.d_model, dtype=dt))

    # -- depth bookkeeping ------------------------------------------------------

    @property
    def depth(self) -> int:
        depths = {stack.depth for stack in self.stacks.values()}
        if len(depths) != 1:
            raise ContractViolation(f"ragged stack depths {sorted(depths)}")
        return depths.pop()

    def attach_task(self, hub: RngHub, rank: int | None = None) -> int:
        """Add one adapter level to every stack; returns the new depth."""
        rank = rank or self.cfg.adapter_rank
        task = self.depth + 1
        for stack in self.stacks.values():
            stack.attach(rank, hub.stream(f"adapter:task{task}:{stack.name}"))
        return self.depth

    def freeze_task(self) -> None:
        for stack in self.stacks.values():
            stack.freeze_top()

    # -- forward helpers -----------------------------------------------------------

    def _ln(self, name: str, x: Tensor) -> Tensor:
        gamma, beta = self.norms[name]
        return layer_norm(x, gamma, beta, self.cfg.ln_eps)

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, depth: int,
                   attn_mask: np.ndarray | None) -> Tensor:
        cfg = self.cfg
        b, lq = xq.shape[0], xq.shape[1]
        lk = xkv.shape[1]
        heads, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        q = self.stacks[f"{prefix}/q"].apply(xq, depth)
        k = self.stacks[f"{prefix}/k"].apply(xkv, depth)
        v = self.stacks[f"{prefix}/v"].apply(xkv, depth)
        q = transpose(reshape(q, (b, lq, heads, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (b, lk, heads, dh)), (0, 2, 3, 1))
        v = transpose(reshape(v, (b, lk, heads, dh)), (0, 2, 1, 3))
        scores = matmul(q, k) * (1.0 / math.sqrt(dh))
        if attn_mask is not None:
            scores = scores + attn_mask
        weights = softmax(scores, axis=-1)
        out = matmul(weights, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, lq, cfg.d_model))
        return self.stacks[f"{prefix}/o"].apply(out, depth)

    def _self_block(self, prefix: str, x: Tensor, depth: int,
                    attn_mask: np.ndarray | None) -> Tensor:
        h = self._ln(f"{prefix}/ln1", x)
        x = x + self._attention(f"{prefix}/attn", h, h, depth, attn_mask)
        h = self._ln(f"{prefix}/ln2", x)
        h = self.stacks[f"{prefix}/mlp/fc1"].apply(h, depth)
        h = self.stacks[f"{prefix}/mlp/fc2"].apply(gelu(h), depth)
        return x + h

    def _cross_block(self, prefix: str, x: Tensor, image_tokens: Tensor, depth: int) -> Tensor:
        h = self._ln(f"{prefix}/ln1", x)
        x = x + self._attention(f"{prefix}/attn", h, image_tokens, depth, None)
        h = self._ln(f"{prefix}/ln2", x)
        h = self.stacks[f"{prefix}/mlp/fc1"].apply(h, depth)
        h = self.stacks[f"{prefix}/mlp/fc2"].apply(gelu(h), depth)
        return x + h

    def _text_embed(self, text, depth: int) -> Tensor:
        """Token embeddings (shared, depth-independent) plus positional stack."""
        if isinstance(text, Tensor):
            emb = text
            if emb.ndim != 3 or emb.shape[2] != self.cfg.d_model:
                raise ShapeMismatch(f"text embeddings must be (B, L, {self.cfg.d_model}), got {emb.shape}")
        else:
            ids = np.asarray(text)
            if ids.ndim != 2:
                raise ShapeMismatch(f"token ids must be (B, L), got {ids.shape}")
            emb = embedding(self.token_emb, ids)
        length = emb.shape[1]
        if length > self.cfg.max_text_len:
            raise ShapeMismatch(
                f"text length {length} exceeds max_text_len {self.cfg.max_text_len}; truncation is an error"
            )
        pos = self.stacks["text_pos"].lookup(np.arange(length), depth)
        return emb + pos

    @staticmethod
    def _attn_mask(mask: np.ndarray | None) -> np.ndarray | None:
        if mask is None:
            return None
        return ((1.0 - mask) * NEG_INF)[:, None, None, :]

    # -- public forward surface ---------------------------------------------------------

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return embedding(self.token_emb, np.asarray(ids))

    def encode_image(self, images, depth: int) -> Tensor:
        """Patchify, embed, and run the image self-attention stack."""
        cfg = self.cfg
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=default_dtype()))
        if x.ndim != 4 or x.shape[1:] != (cfg.image_hw, cfg.image_hw, cfg.image_channels):
            raise ShapeMismatch(
                f"images must be (B, {cfg.image_hw}, {cfg.image_hw}, {cfg.image_channels}), got {x.shape}"
            )
        b = x.shape[0]
        side = cfg.image_hw // cfg.patch_size
        x = reshape(x, (b, side, cfg.patch_size, side, cfg.patch_size, cfg.image_channels))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (b, cfg.n_patches, cfg.patch_dim))
        x = self.stacks["img_patch"].apply(x, depth)
        x = x + self.stacks["img_pos"].lookup(np.arange(cfg.n_patches), depth)
        for layer in range(cfg.image_layers):
            x = self._self_block(f"img{layer}", x, depth, None)
        return self._ln("img_final", x)

    def encode_text(self, text, depth: int, mask: np.ndarray | None = None) -> Tensor:
        """Unimodal text hidden states at `depth` (self-attention only)."""
        x = self._text_embed(text, depth)
        attn_mask = self._attn_mask(mask)
        for layer in range(self.cfg.text_layers):
            x = self._self_block(f"txt{layer}", x, depth, attn_mask)
        return self._ln("txt_final", x)

    def decode(self, text, images, depth: int, mask: np.ndarray | None = None,
               image_tokens: Tensor | None = None) -> Tensor:
        """Interleaved self/cross pass; self-attention weights are the text encoder's."""
        if image_tokens is None:
            image_tokens = self.encode_image(images, depth)
        x = self._text_embed(text, depth)
        attn_mask = self._attn_mask(mask)
        for layer in range(self.cfg.text_layers):
            x = self._self_block(f"txt{layer}", x, depth, attn_mask)
            x = self._cross_block(f"cross{layer}", x, image_tokens, depth)
        return self._ln("txt_final", x)

    def forward_logits(self, text, images, depth: int, mask: np.ndarray | None = None,
                       image_tokens: Tensor | None = None) -> Tensor:
        """(B, 2) logits; column 1 scores 'the text matches the image'."""
        hidden = self.decode(text, images, depth, mask=mask, image_tokens=image_tokens)
        scores = (hidden * self.cls_pool).sum(axis=-1)
        if mask is not None:
            scores = scores + (1.0 - mask) * NEG_INF
        weights = softmax(scores, axis=-1)
        pooled = (hidden * reshape(weights, weights.data.shape + (1,))).sum(axis=1)
        h = gelu(matmul(pooled, self.cls_w1))
        return matmul(h, self.cls_w2)

    def forward_probs(self, text, images, depth: int, mask: np.ndarray | None = None,
                      image_tokens: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """(POS, NEG) probabilities after softmax over the two logits."""
        logits = self.forward_logits(text, images, depth, mask=mask, image_tokens=image_tokens)
        probs = softmax(logits, axis=-1)
        return select(probs, 1, axis=-1), select(probs, 0, axis=-1)

    # -- parameter registry ----------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = [("token_emb", self.token_emb),
                                         ("cls_w1", self.cls_w1), ("cls_w2", self.cls_w2),
                                         ("cls_pool", self.cls_pool)]
        for name in sorted(self.stacks):
            out.extend(self.stacks[name].all_params())
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters() if t.requires_grad]

    def adapter_parameters(self, task: int) -> list[Tensor]:
        params: list[Tensor] = []
        for name in sorted(self.stacks):
            params.extend(self.stacks[name].level_params(task))
        return params

    def set_dense_trainable(self, flag: bool, include_token_emb: bool = True) -> None:
        for stack in self.stacks.values():
            stack.base.requires_grad = flag
            if not flag:
                stack.base.grad = None
        if include_token_emb:
            self.token_emb.requires_grad = flag
            if not flag:
                self.token_emb.grad = None

    def set_classifier_trainable(self, flag: bool) -> None:
        for p in (self.cls_w1, self.cls_w2, self.cls_pool):
            p.requires_grad = flag
            if not flag:
                p.grad = None

    @contextmanager
    def frozen_scope(self):
        """Temporarily mark every parameter non-trainable (attack passes)."""
        params = [t for _, t in self.named_parameters()]
        saved = [t.requires_grad for t in params]
        for t in params:
            t.requires_grad = False
        try:
            yield
        finally:
            for t, flag in zip(params, saved):
                t.requires_grad = flag

    # -- accounting -------------------------------------------------------------------------

    def param_count(self, depth: int | None = None) -> ParamCounts:
        depth = self.depth if depth is None else depth
        base = (self.token_emb.data.size + self.cls_w1.data.size
                + self.cls_w2.data.size + self.cls_pool.data.size)
        base += sum(g.size + b.size for g, b in self.norms.values())
        adapter = 0
        for stack in self.stacks.values():
            sb, sa = stack.param_counts(depth)
            base += sb
            adapter += sa
        trainable = sum(t.data.size for t in self.trainable_parameters())
        return ParamCounts(base=base, adapter=adapter, trainable=trainable)

    def parameter_buffer_ids(self) -> set[int]:
        return {id(t.data) for _, t in self.named_parameters()}

    def materialization_count(self) -> int:
        return sum(stack.materializations for stack in self.stacks.values())

    def checksum(self, max_task: int | None = None, include_classifier: bool = True) -> str:
        """SHA-256 over parameter bytes; adapters above `max_task` are skipped."""
        digest = hashlib.sha256()
        for name, t in self.named_parameters():
            if "/task" in name and max_task is not None:
                task = int(name.split("/task")[1].split("/")[0])
                if task > max_task:
                    continue
            if not include_classifier and name.startswith("cls_"):
                continue
            digest.update(name.encode())
            digest.update(t.data.tobytes())
        return digest.hexdigest()

    # -- serialization views ------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{name}": t.data for name, t in self.named_parameters()}
        for name, (gamma, beta) in self.norms.items():
            out[f"norm/{name}/gamma"] = gamma
            out[f"norm/{name}/beta"] = beta
        return out

    @classmethod
    def from_state(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "VLModel":
        model = cls(cfg, hub=None)
        ranks: dict[str, list[int]] = {}
        for key in arrays:
            if "/task" in key and key.endswith("/down"):
                stack_name = key[len("param/"):].split("/task")[0]
                task = int(key.split("/task")[1].split("/")[0])
                ranks.setdefault(stack_name, []).append(task)
        for stack_name, tasks in ranks.items():
            stack = model.stacks[stack_name]
            for task in sorted(tasks):
                r = arrays[f"param/{stack_name}/task{task}/down"].shape[1]
                stack.attach(r, np.random.default_rng(0))
                stack.freeze_top()
        for name, t in model.named_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise DataFormatError(f"checkpoint is missing array {key}")
            src = arrays[key]
            if src.shape != t.data.shape:
                raise ShapeMismatch(f"checkpoint array {key}: {src.shape} vs model {t.data.shape}")
            t.data = src.copy()
            t.requires_grad = False
        for name in model.norms:
            model.norms[name] = (arrays[f"norm/{name}/gamma"].copy(), arrays[f"norm/{name}/beta"].copy())
        return model

    def clone(self) -> "VLModel":
        return VLModel.from_state(self.cfg, self.state_arrays())

    def fold(self, depth: int | None = None) -> "VLModel":
        """Collapse adapters through `depth` into plain dense base weights."""
        depth = self.depth if depth is None else depth
        folded = VLModel(self.cfg, hub=None)
        for name, stack in self.stacks.items():
            folded.stacks[name].base.data = stack.effective_weight(depth)
        folded.token_emb.data = self.token_emb.data.copy()
        folded.cls_w1.data = self.cls_w1.data.copy()
        folded.cls_w2.data = self.cls_w2.data.copy()
        folded.cls_pool.data = self.cls_pool.data.copy()
        for name, (gamma, beta) in self.norms.items():
            folded.norms[name] = (gamma.copy(), beta.copy())
        return folded
