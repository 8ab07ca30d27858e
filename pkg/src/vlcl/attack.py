"""Adversarial replay: sign-gradient attacks on past models and the
probability-drop distillation loss that replaces stored-data rehearsal.

During task i, each past depth j is attacked on the batch's positive texts:
the token embeddings are pushed along the sign of the gradient of the
negative match probability, n_adv times with step lam_adv, while padded
positions stay fixed. The drop in match probability that model j suffers on
its own adversarial text is then used as a target: the current model must
reproduce the same drop on the same input, and the mean absolute difference
of the two drops is the replay term for depth j. Variants swap the
construction of the adversarial input (reversed gradient, random other texts
from the batch, pixel-space attacks) or shrink the set of attacked depths to
the previous task only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import VLModel
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("all-past", "prev-only", "rand-negative", "pos-adv", "pos-adv-prev")
MODALITIES = ("text", "image")


@dataclass
class AttackConfig:
    n_adv: int = 10          # sign-gradient steps
    lam_adv: float = 0.01    # per-step L-inf budget
    modality: str = "text"
    variant: str = "all-past"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attack variant {self.variant!r}; expected one of {VARIANTS}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown attack modality {self.modality!r}; expected one of {MODALITIES}")
        if self.n_adv < 0:
            raise ConfigError("n_adv must be >= 0")
        if self.lam_adv < 0:
            raise ConfigError("lam_adv must be >= 0")

    def past_set(self, task: int) -> list[int]:
        """Depths attacked while training `task` (tasks are 1-indexed)."""
        if task < 1:
            raise ContractViolation(f"task index must be >= 1, got {task}")
        if self.variant in ("prev-only", "pos-adv-prev"):
            return [task - 1]
        return list(range(task))

    @property
    def reverse(self) -> bool:
        return self.variant in ("pos-adv", "pos-adv-prev")

    @property
    def random_negatives(self) -> bool:
        return self.variant == "rand-negative"


def adversarial_text_grad(model: VLModel, depth: int, t_emb: Tensor, mask: np.ndarray,
                          image_tokens: Tensor) -> np.ndarray:
    """Gradient of the negative match probability w.r.t. the token embeddings.

    Runs with every model parameter marked frozen, so no parameter
    accumulates a gradient; only the input leaf does.
    """
    if not t_emb.requires_grad:
        raise ContractViolation("t_emb must require grad")
    with model.frozen_scope():
        pos, _ = model.forward_probs(t_emb, None, depth, mask=mask, image_tokens=image_tokens)
        (-pos.sum()).backward()
    return t_emb.grad


def attack_text(model: VLModel, ids: np.ndarray, images: np.ndarray, depth: int,
                cfg: AttackConfig, mask: np.ndarray, reverse: bool | None = None) -> np.ndarray:
    """Iterated sign-gradient attack on token embeddings against depth `depth`.

    Returns the adversarial embeddings (B, L, d). Every coordinate moves by
    a multiple of lam_adv (sign zero moves nothing); padded positions do not
    move at all.
    """
    reverse = cfg.reverse if reverse is None else reverse
    direction = -1.0 if reverse else 1.0
    with no_grad():
        image_tokens = model.encode_image(images, depth)
        adv = model.embed_tokens(ids).data.copy()
    image_tokens = Tensor(image_tokens.data)
    keep = mask[:, :, None]
    for _ in range(cfg.n_adv):
        leaf = Tensor(adv.copy(), requires_grad=True)
        grad = adversarial_text_grad(model, depth, leaf, mask, image_tokens)
        adv = adv + (direction * cfg.lam_adv) * np.sign(grad) * keep
    return adv


def attack_image(model: VLModel, ids: np.ndarray, images: np.ndarray, depth: int,
                 cfg: AttackConfig, mask: np.ndarray, reverse: bool | None = None) -> np.ndarray:
    """Sign-gradient attack on pixels, clamped to [0, 1] after every step."""
    reverse = cfg.reverse if reverse is None else reverse
    direction = -1.0 if reverse else 1.0
    adv = np.asarray(images).copy()
    for _ in range(cfg.n_adv):
        leaf = Tensor(adv.copy(), requires_grad=True)
        with model.frozen_scope():
            pos, _ = model.forward_probs(ids, leaf, depth, mask=mask)
            (-pos.sum()).backward()
        adv = np.clip(adv + (direction * cfg.lam_adv) * np.sign(leaf.grad), 0.0, 1.0)
    return adv


def prob_drop_frozen(model: VLModel, depth: int, ids: np.ndarray, mask: np.ndarray,
                     images: np.ndarray, adv_emb: np.ndarray | None = None,
                     adv_mask: np.ndarray | None = None,
                     adv_images: np.ndarray | None = None) -> np.ndarray:
    """POS(clean) - POS(adversarial) at a frozen depth, as a plain array."""
    adv_mask = mask if adv_mask is None else adv_mask
    with no_grad():
        tokens = model.encode_image(images, depth)
        clean, _ = model.forward_probs(ids, None, depth, mask=mask, image_tokens=tokens)
        if adv_images is not None:
            adv, _ = model.forward_probs(ids, adv_images, depth, mask=mask)
        else:
            adv, _ = model.forward_probs(Tensor(adv_emb), None, depth, mask=adv_mask,
                                         image_tokens=tokens)
    return clean.data - adv.data


def apr_terms(model: VLModel, task: int, ids: np.ndarray, mask: np.ndarray,
              images: np.ndarray, pos_clean: Tensor, image_tokens: Tensor,
              cfg: AttackConfig, stream: np.random.Generator) -> tuple[list[Tensor], dict]:
    """One distillation term per attacked past depth, for the current batch.

    `pos_clean` and `image_tokens` are live graph nodes from the current-task
    forward at depth `task`; they are reused so the whole loss backpropagates
    in one pass.
    """
    cfg.validate()
    batch = ids.shape[0]
    stats: dict[str, float] = {}
    if batch == 0:
        log.warning("apr: batch has no positive texts; replay terms skipped")
        return [], stats
    terms: list[Tensor] = []
    for j in cfg.past_set(task):
        adv_emb = adv_mask = adv_images = None
        if cfg.random_negatives:
            if batch > 1:
                offsets = stream.integers(1, batch, size=batch)
                perm = (np.arange(batch) + offsets) % batch
            else:
                perm = np.zeros(1, dtype=np.int64)
            with no_grad():
                adv_emb = model.embed_tokens(ids[perm]).data
            adv_mask = mask[perm]
        elif cfg.modality == "image":
            adv_images = attack_image(model, ids, images, j, cfg, mask)
        else:
            adv_emb = attack_text(model, ids, images, j, cfg, mask)
        delta_past = prob_drop_frozen(model, j, ids, mask, images,
                                      adv_emb=adv_emb, adv_mask=adv_mask, adv_images=adv_images)
        if adv_images is not None:
            pos_adv, _ = model.forward_probs(ids, adv_images, task, mask=mask)
        else:
            pos_adv, _ = model.forward_probs(Tensor(adv_emb), None, task,
                                             mask=(mask if adv_mask is None else adv_mask),
                                             image_tokens=image_tokens)
        drop_now = pos_clean - pos_adv
        terms.append((drop_now - Tensor(delta_past)).abs().mean())
        stats[f"delta_past_{j}"] = float(delta_past.mean())
    return terms, stats


def nearest_token_ids(emb: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Nearest vocabulary row for every embedding vector (L2)."""
    flat = emb.reshape(-1, emb.shape[-1])
    scores = flat @ table.T - 0.5 * (table * table).sum(axis=1)
    return scores.argmax(axis=1).reshape(emb.shape[:-1])


def dump_adversarial_batch(path, vocab: list[str], ids: np.ndarray, adv_emb: np.ndarray,
                           table: np.ndarray, mask: np.ndarray) -> None:
    """Append clean/adversarial text pairs (nearest-vocab decode) to a log file."""
    adv_ids = nearest_token_ids(adv_emb, table)
    with open(path, "a", encoding="utf-8") as fh:
        for row in range(ids.shape[0]):
            keep = mask[row] > 0
            clean = " ".join(vocab[t] for t in ids[row][keep])
            adv = " ".join(vocab[t] for t in adv_ids[row][keep])
            fh.write(f"{clean}\t->\t{adv}\n")
