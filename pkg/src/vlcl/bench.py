"""Synthetic compositional benchmark: scenes, renders, captions, task files.

A scene holds one to three objects on a 4x4 cell grid inside a 32x32 RGB
canvas; each grid cell is an 8x8 tile, so the canvas tiles exactly into
cells. Each object has a shape, color, size, surface pattern, and finish;
two-object scenes may add a spatial arrangement or an action glyph, and
single-object scenes may add a pose marker. Every attribute maps to a
distinct, exactly reconstructable pixel pattern:

  color    pure palette hue (some channel is exactly zero, so colored pixels
           are never confused with the gray glyphs or white rings)
  material brightness pattern inside the shape mask (solid, striped, dotted,
           checkered; brightness is 1.0 or 0.3, never 0, so the mask itself
           stays exact)
  size     bounding-box extent (6 or 8 pixels)
  state    glossy adds a white boundary ring, matte does not
  actions  gray connector/marker glyphs in an otherwise empty cell

A triplet pairs one rendered scene with a true caption and a minimally
edited false caption: the two differ in exactly one concept-bearing token,
and the false one is checked against the scene's ground truth.

Task files are line-delimited JSON records {image, pos, neg, concept} where
`image` names a raw float32 tensor file (12-byte header of three little-
endian int32 dims, row-major data) and captions are space-separated tokens
from the shared closed vocabulary (one token per line in the vocab file).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .tensor import default_dtype

log = logging.getLogger(__name__)

IMAGE_HW = 32
GRID = 4
CELL = 8
ORIGIN = 0  # cells at ORIGIN + CELL * index; the grid tiles the canvas exactly

PAD = "<pad>"
PAD_ID = 0

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
SIZES = {"small": 6, "large": 8}
MATERIALS = ("solid", "striped", "dotted", "checkered")
STATES = ("glossy", "matte")
RELATIONS = ("left_of", "right_of", "above", "below")
TRANS_ACTIONS = ("pushes", "pulls", "holds")
INTRANS_ACTIONS = ("spins", "bounces", "rests")

CONCEPTS = (
    "color",
    "material",
    "size",
    "state",
    "spatial-relation",
    "transitive-action",
    "intransitive-action",
)
WARMUP_CONCEPT = "object-match"

VOCAB: tuple[str, ...] = (
    (PAD, "a", "the", "and")
    + SHAPES
    + tuple(COLORS)
    + tuple(SIZES)
    + MATERIALS
    + STATES
    + RELATIONS
    + TRANS_ACTIONS
    + INTRANS_ACTIONS
)
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}

GRAY = 0.5  # glyph pixel value, channel-equal
DIM = 0.3   # brightness of the dim pixels in material patterns
CONCEPT_VALUES = {
    "color": tuple(COLORS),
    "material": MATERIALS,
    "size": tuple(SIZES),
    "state": STATES,
    "spatial-relation": RELATIONS,
    "transitive-action": TRANS_ACTIONS,
    "intransitive-action": INTRANS_ACTIONS,
}


# ---------------------------------------------------------------------------
# scene model


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    material: str
    state: str
    cell: tuple[int, int]  # (row, col) on the GRID x GRID layout


@dataclass
class Scene:
    objects: list[SceneObject]
    # ("transitive", agent_idx, patient_idx, action) or
    # ("intransitive", obj_idx, action); attribute/spatial scenes carry None
    action: tuple | None = None


@dataclass
class Triplet:
    image: np.ndarray          # (IMAGE_HW, IMAGE_HW, 3) float32 in [0, 1]
    pos: np.ndarray            # token ids, true caption
    neg: np.ndarray            # token ids, false caption
    concept: str               # metadata tag; never consulted at evaluation
    scene: Scene | None = None  # ground truth; not serialized


@dataclass
class TaskSpec:
    concept: str
    train: list[Triplet]
    val: list[Triplet]
    test: list[Triplet]

    @property
    def splits(self) -> dict[str, list[Triplet]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def tokenize(tokens: list[str]) -> np.ndarray:
    try:
        return np.asarray([TOKEN_TO_ID[t] for t in tokens], dtype=np.int64)
    except KeyError as exc:
        raise DataFormatError(f"token {exc.args[0]!r} not in vocabulary") from None


def detokenize(ids: np.ndarray) -> list[str]:
    return [VOCAB[int(i)] for i in ids]


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, px: int) -> np.ndarray:
    mask = np.zeros((px, px), dtype=bool)
    if shape == "square":
        mask[:] = True
    elif shape == "circle":
        # Strictly interior disc keeps small circles visibly rounder than squares.
        yy, xx = np.mgrid[0:px, 0:px]
        mask = (yy + 0.5 - px / 2) ** 2 + (xx + 0.5 - px / 2) ** 2 <= (px / 2) ** 2 - 1.0
    elif shape == "triangle":
        center = (px - 1) / 2
        for y in range(px):
            for x in range(px):
                if abs(x - center) <= (y + 1) * 0.5:
                    mask[y, x] = True
    elif shape == "cross":
        width = 3 if px <= 6 else 4
        lo = (px - width) // 2
        mask[lo:lo + width, :] = True
        mask[:, lo:lo + width] = True
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return mask


def _erode4(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    return mask & padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]


def _material_brightness(material: str) -> np.ndarray:
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    if material == "solid":
        return np.ones((CELL, CELL), dtype=np.float32)
    if material == "striped":
        return np.where(yy % 2 == 0, 1.0, DIM).astype(np.float32)
    if material == "dotted":
        return np.where((yy % 2 == 0) & (xx % 2 == 0), 1.0, DIM).astype(np.float32)
    if material == "checkered":
        return np.where((yy // 2 + xx // 2) % 2 == 0, 1.0, DIM).astype(np.float32)
    raise ConfigError(f"unknown material {material!r}")


def render_object_cell(shape: str, color: str, size: str, material: str, state: str) -> np.ndarray:
    """One object rendered into an empty (CELL, CELL, 3) tile."""
    tile = np.zeros((CELL, CELL, 3), dtype=np.float32)
    px = SIZES[size]
    offset = (CELL - px) // 2
    mask = np.zeros((CELL, CELL), dtype=bool)
    mask[offset:offset + px, offset:offset + px] = _shape_mask(shape, px)
    brightness = _material_brightness(material)
    rgb = np.asarray(COLORS[color], dtype=np.float32)
    tile[mask] = brightness[mask, None] * rgb
    if state == "glossy":
        ring = mask & ~_erode4(mask)
        tile[ring] = 1.0
    return tile


def _arrow_glyph(head: str | None) -> np.ndarray:
    """Horizontal connector; `head` in {"left", "right", None}."""
    tile = np.zeros((CELL, CELL, 3), dtype=np.float32)
    tile[3:5, 0:8] = GRAY
    if head == "right":
        tile[1:7, 5] = GRAY
        tile[2:6, 6] = GRAY
        tile[3:5, 7] = GRAY
    elif head == "left":
        tile[1:7, 2] = GRAY
        tile[2:6, 1] = GRAY
        tile[3:5, 0] = GRAY
    return tile


def _marker_glyph(action: str) -> np.ndarray:
    tile = np.zeros((CELL, CELL, 3), dtype=np.float32)
    if action == "spins":
        yy, xx = np.mgrid[0:CELL, 0:CELL]
        dist = np.abs(yy - 3.5) + np.abs(xx - 3.5)
        tile[(dist > 2.5) & (dist <= 4.0)] = GRAY
    elif action == "bounces":
        tile[0:2, 3:5] = GRAY
        tile[5:7, 3:5] = GRAY
    elif action == "rests":
        tile[6:8, 1:7] = GRAY
    else:
        raise ConfigError(f"unknown marker action {action!r}")
    return tile


def _cell_origin(cell: tuple[int, int]) -> tuple[int, int]:
    return ORIGIN + CELL * cell[0], ORIGIN + CELL * cell[1]


def render(scene: Scene) -> np.ndarray:
    """Rasterize a scene; pure function of the scene record."""
    img = np.zeros((IMAGE_HW, IMAGE_HW, 3), dtype=np.float32)

    def paste(cell: tuple[int, int], tile: np.ndarray) -> None:
        y, x = _cell_origin(cell)
        img[y:y + CELL, x:x + CELL] = tile

    for obj in scene.objects:
        paste(obj.cell, render_object_cell(obj.shape, obj.color, obj.size, obj.material, obj.state))
    if scene.action is not None and scene.action[0] == "transitive":
        _, agent_idx, patient_idx, action = scene.action
        agent = scene.objects[agent_idx]
        patient = scene.objects[patient_idx]
        row = agent.cell[0]
        glyph_cell = (row, 1)
        toward_patient = "right" if patient.cell[1] > agent.cell[1] else "left"
        if action == "pushes":
            paste(glyph_cell, _arrow_glyph(toward_patient))
        elif action == "pulls":
            paste(glyph_cell, _arrow_glyph("left" if toward_patient == "right" else "right"))
        else:  # holds
            paste(glyph_cell, _arrow_glyph(None))
    if scene.action is not None and scene.action[0] == "intransitive":
        _, obj_idx, action = scene.action
        obj = scene.objects[obj_idx]
        paste((obj.cell[0] + 1, obj.cell[1]), _marker_glyph(action))
    return img


# ---------------------------------------------------------------------------
# scene and caption sampling


def _random_object(stream: np.random.Generator, cell: tuple[int, int],
                   shape: str | None = None) -> SceneObject:
    return SceneObject(
        shape=shape or str(stream.choice(SHAPES)),
        color=str(stream.choice(list(COLORS))),
        size=str(stream.choice(list(SIZES))),
        material=str(stream.choice(MATERIALS)),
        state=str(stream.choice(STATES)),
        cell=cell,
    )


def _plain_object(stream: np.random.Generator, cell: tuple[int, int], shape: str) -> SceneObject:
    """Canonical-appearance object for relation/action scenes, whose captions
    only assert shapes: color still varies, the other attributes stay fixed so
    the relational signal is not swamped by appearance nuisance."""
    return SceneObject(
        shape=shape,
        color=str(stream.choice(list(COLORS))),
        size="large",
        material="solid",
        state="matte",
        cell=cell,
    )


def _article(stream: np.random.Generator) -> str:
    return "a" if stream.random() < 0.5 else "the"


def _distinct_shapes(stream: np.random.Generator, n: int) -> list[str]:
    return [str(s) for s in stream.choice(SHAPES, size=n, replace=False)]


def _distinct_cells(stream: np.random.Generator, n: int) -> list[tuple[int, int]]:
    picks = stream.choice(GRID * GRID, size=n, replace=False)
    return [(int(p) // GRID, int(p) % GRID) for p in picks]


def _attribute_value(obj: SceneObject, concept: str) -> str:
    return {"color": obj.color, "material": obj.material, "size": obj.size, "state": obj.state}[concept]


def _sample_attribute(stream: np.random.Generator, concept: str) -> tuple[Scene, list[str], list[str]]:
    n_obj = int(stream.integers(1, 3))
    shapes = _distinct_shapes(stream, n_obj)
    cells = _distinct_cells(stream, n_obj)
    objects = [_random_object(stream, cell, shape) for shape, cell in zip(shapes, cells)]
    scene = Scene(objects)
    target = objects[int(stream.integers(0, n_obj))]
    value = _attribute_value(target, concept)
    pos = [_article(stream), value, target.shape]
    # Shapes are distinct within a scene, so any other value is false here.
    candidates = [v for v in CONCEPT_VALUES[concept] if v != value]
    neg = list(pos)
    neg[1] = str(stream.choice(candidates))
    return scene, pos, neg


def _sample_warmup(stream: np.random.Generator) -> tuple[Scene, list[str], list[str]]:
    n_obj = int(stream.integers(1, 3))
    shapes = _distinct_shapes(stream, n_obj)
    cells = _distinct_cells(stream, n_obj)
    objects = [_random_object(stream, cell, shape) for shape, cell in zip(shapes, cells)]
    scene = Scene(objects)
    order = list(stream.permutation(n_obj))
    pos: list[str] = []
    for rank, idx in enumerate(order):
        if rank:
            pos.append("and")
        pos.extend([_article(stream), objects[int(idx)].shape])
    absent = [s for s in SHAPES if s not in shapes]
    neg = list(pos)
    shape_slots = [i for i, tok in enumerate(pos) if tok in SHAPES]
    neg[int(stream.choice(shape_slots))] = str(stream.choice(absent))
    return scene, pos, neg


def _true_relation(a: SceneObject, b: SceneObject) -> str:
    if a.cell[0] == b.cell[0]:
        return "left_of" if a.cell[1] < b.cell[1] else "right_of"
    return "above" if a.cell[0] < b.cell[0] else "below"


def _holds(rel: str, a: SceneObject, b: SceneObject) -> bool:
    ar, ac = a.cell
    br, bc = b.cell
    return {
        "left_of": ar == br and ac < bc,
        "right_of": ar == br and ac > bc,
        "above": ac == bc and ar < br,
        "below": ac == bc and ar > br,
    }[rel]


def _sample_spatial(stream: np.random.Generator) -> tuple[Scene, list[str], list[str]]:
    shapes = _distinct_shapes(stream, 2)
    if stream.random() < 0.5:  # same row
        row = int(stream.integers(0, GRID))
        cols = sorted(int(c) for c in stream.choice(GRID, size=2, replace=False))
        cells = [(row, cols[0]), (row, cols[1])]
    else:  # same column
        col = int(stream.integers(0, GRID))
        rows = sorted(int(r) for r in stream.choice(GRID, size=2, replace=False))
        cells = [(rows[0], col), (rows[1], col)]
    objects = [_plain_object(stream, cell, shape) for shape, cell in zip(shapes, cells)]
    scene = Scene(objects)
    first, second = (0, 1) if stream.random() < 0.5 else (1, 0)
    a, b = objects[first], objects[second]
    rel = _true_relation(a, b)
    pos = [_article(stream), a.shape, rel, _article(stream), b.shape]
    # Two error types: flipped order (the opposite relation) and wrong axis.
    # Sample them equally so the harder antisymmetric order bit is not
    # under-trained relative to the axis bit.
    opposite = {"left_of": "right_of", "right_of": "left_of",
                "above": "below", "below": "above"}[rel]
    perpendicular = [r for r in RELATIONS if r not in (rel, opposite) and not _holds(r, a, b)]
    neg = list(pos)
    neg[2] = opposite if stream.random() < 0.5 else str(stream.choice(perpendicular))
    return scene, pos, neg


def _sample_transitive(stream: np.random.Generator) -> tuple[Scene, list[str], list[str]]:
    shapes = _distinct_shapes(stream, 2)
    row = int(stream.integers(0, GRID))
    cells = [(row, 0), (row, 2)]
    if stream.random() < 0.5:
        cells.reverse()
    objects = [_plain_object(stream, cell, shape) for shape, cell in zip(shapes, cells)]
    action = str(stream.choice(TRANS_ACTIONS))
    scene = Scene(objects, action=("transitive", 0, 1, action))
    pos = [_article(stream), objects[0].shape, action, _article(stream), objects[1].shape]
    neg = list(pos)
    neg[2] = str(stream.choice([a for a in TRANS_ACTIONS if a != action]))
    return scene, pos, neg


def _sample_intransitive(stream: np.random.Generator) -> tuple[Scene, list[str], list[str]]:
    cell = (int(stream.integers(0, GRID - 1)), int(stream.integers(0, GRID)))
    obj = _plain_object(stream, cell, str(stream.choice(SHAPES)))
    action = str(stream.choice(INTRANS_ACTIONS))
    scene = Scene([obj], action=("intransitive", 0, action))
    pos = [_article(stream), obj.shape, action]
    neg = list(pos)
    neg[2] = str(stream.choice([a for a in INTRANS_ACTIONS if a != action]))
    return scene, pos, neg


_SAMPLERS = {
    "color": _sample_attribute,
    "material": _sample_attribute,
    "size": _sample_attribute,
    "state": _sample_attribute,
    "spatial-relation": lambda stream, _c=None: _sample_spatial(stream),
    "transitive-action": lambda stream, _c=None: _sample_transitive(stream),
    "intransitive-action": lambda stream, _c=None: _sample_intransitive(stream),
    WARMUP_CONCEPT: lambda stream, _c=None: _sample_warmup(stream),
}


def caption_is_true(scene: Scene, tokens: list[str]) -> bool:
    """Ground-truth check of a caption against a scene record."""
    words = [t for t in tokens if t not in ("a", "the")]
    if "and" in words or all(w in SHAPES for w in words):
        mentioned = [w for w in words if w != "and"]
        present = [o.shape for o in scene.objects]
        return all(m in present for m in mentioned)
    if len(words) == 2 and words[0] in SHAPES and words[1] in INTRANS_ACTIONS:
        return scene.action is not None and scene.action[0] == "intransitive" and \
            scene.objects[scene.action[1]].shape == words[0] and scene.action[2] == words[1]
    if len(words) == 3 and words[1] in RELATIONS:
        a = next((o for o in scene.objects if o.shape == words[0]), None)
        b = next((o for o in scene.objects if o.shape == words[2]), None)
        return a is not None and b is not None and _holds(words[1], a, b)
    if len(words) == 3 and words[1] in TRANS_ACTIONS:
        if scene.action is None or scene.action[0] != "transitive":
            return False
        _, agent_idx, patient_idx, action = scene.action
        return (scene.objects[agent_idx].shape == words[0]
                and scene.objects[patient_idx].shape == words[2] and action == words[1])
    if len(words) == 2:  # attribute caption: value shape
        value, shape = words
        for concept, values in CONCEPT_VALUES.items():
            if value in values and concept in ("color", "material", "size", "state"):
                return any(o.shape == shape and _attribute_value(o, concept) == value
                           for o in scene.objects)
    return False


def generate_task(concept: str, n_triplets: int, seed: int) -> TaskSpec:
    """Deterministic task of `n_triplets` scenes split 80/10/10 by scene."""
    if concept not in _SAMPLERS:
        raise ConfigError(f"unknown concept {concept!r}; expected one of {CONCEPTS + (WARMUP_CONCEPT,)}")
    if n_triplets < 10:
        raise ConfigError(f"need at least 10 triplets, got {n_triplets}")
    from .rng import RngHub

    stream = RngHub(seed).stream(f"bench:{concept}")
    triplets: list[Triplet] = []
    for _ in range(n_triplets):
        scene, pos, neg = _SAMPLERS[concept](stream, concept)
        assert caption_is_true(scene, pos), f"positive caption {pos} is false for its scene"
        assert not caption_is_true(scene, neg), f"negative caption {neg} is true for its scene"
        triplets.append(Triplet(render(scene), tokenize(pos), tokenize(neg), concept, scene))
    n_train = int(0.8 * n_triplets)
    n_val = int(0.1 * n_triplets)
    return TaskSpec(concept, triplets[:n_train], triplets[n_train:n_train + n_val],
                    triplets[n_train + n_val:])


# ---------------------------------------------------------------------------
# file formats


def write_image_tensor(path: Path, arr: np.ndarray) -> None:
    """Raw float32 tensor: three little-endian int32 dims, then row-major data."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 3:
        raise DataFormatError(f"image tensor must be 3-d, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(np.asarray(arr.shape, dtype="<i4").tobytes())
        fh.write(arr.tobytes())


def read_image_tensor(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise DataFormatError(f"{path}: truncated header")
    dims = np.frombuffer(blob[:12], dtype="<i4")
    expected = 12 + 4 * int(dims.prod())
    if any(d <= 0 for d in dims) or len(blob) != expected:
        raise DataFormatError(f"{path}: dims {tuple(dims)} do not match payload of {len(blob)} bytes")
    return np.frombuffer(blob[12:], dtype="<f4").reshape(tuple(dims)).copy()


def save_vocab(path: Path) -> None:
    Path(path).write_text("\n".join(VOCAB) + "\n", encoding="utf-8")


def load_vocab(path: Path) -> list[str]:
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    if len(tokens) != len(set(tokens)):
        raise DataFormatError(f"{path}: duplicate vocabulary tokens")
    return tokens


def save_task(task: TaskSpec, out_dir: Path) -> None:
    """Write {train,val,test}.jsonl plus raw image tensors under images/."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    save_vocab(out_dir / "vocab.txt")
    for split, triplets in task.splits.items():
        lines = []
        for i, t in enumerate(triplets):
            rel = f"images/{split}_{i:05d}.bin"
            write_image_tensor(out_dir / rel, t.image)
            record = {
                "image": rel,
                "pos": " ".join(detokenize(t.pos)),
                "neg": " ".join(detokenize(t.neg)),
                "concept": t.concept,
            }
            lines.append(json.dumps(record, sort_keys=True))
        (out_dir / f"{split}.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""),
                                                encoding="utf-8")


def load_triplets(task_dir: Path) -> TaskSpec:
    """Read a task directory written by save_task, validating as it goes."""
    task_dir = Path(task_dir)
    splits: dict[str, list[Triplet]] = {}
    concept = None
    for split in ("train", "val", "test"):
        path = task_dir / f"{split}.jsonl"
        if not path.exists():
            raise DataFormatError(f"{path}: missing split file")
        triplets: list[Triplet] = []
        text = path.read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed record: {exc}") from None
            for key in ("image", "pos", "neg", "concept"):
                if key not in record:
                    raise DataFormatError(f"{path}:{lineno}: missing field {key!r}")
            if record["pos"] == record["neg"]:
                raise DataFormatError(f"{path}:{lineno}: positive and negative captions are identical")
            image_path = task_dir / record["image"]
            if not image_path.exists():
                raise FileNotFoundError(f"{path}:{lineno}: image file {image_path} not found")
            triplets.append(Triplet(
                image=read_image_tensor(image_path),
                pos=tokenize(record["pos"].split()),
                neg=tokenize(record["neg"].split()),
                concept=record["concept"],
            ))
            concept = record["concept"]
        if not triplets:
            log.warning("%s: empty split", path)
        splits[split] = triplets
    return TaskSpec(concept or "unknown", splits["train"], splits["val"], splits["test"])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray    # (B, IMAGE_HW, IMAGE_HW, 3)
    pos_ids: np.ndarray   # (B, L) padded
    pos_mask: np.ndarray  # (B, L) 1.0 at real tokens
    neg_ids: np.ndarray
    neg_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.images.shape[0]


def pad_ids(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(r) for r in rows)
    ids = np.full((len(rows), length), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, :len(row)] = row
    mask = (ids != PAD_ID).astype(default_dtype())
    return ids, mask


def make_batch(triplets: list[Triplet]) -> Batch:
    images = np.stack([t.image for t in triplets]).astype(default_dtype())
    pos_ids, pos_mask = pad_ids([t.pos for t in triplets])
    neg_ids, neg_mask = pad_ids([t.neg for t in triplets])
    return Batch(images, pos_ids, pos_mask, neg_ids, neg_mask)


def iter_batches(triplets: list[Triplet], batch_size: int,
                 stream: np.random.Generator | None = None):
    """Yield batches; a stream shuffles the order, None keeps it fixed."""
    order = np.arange(len(triplets))
    if stream is not None:
        stream.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [triplets[int(i)] for i in order[start:start + batch_size]]
        yield make_batch(chunk)


# ---------------------------------------------------------------------------
# pixel-decode oracle


def _object_templates() -> dict[bytes, tuple[str, str, str, str, str]]:
    table: dict[bytes, tuple[str, str, str, str, str]] = {}
    for shape in SHAPES:
        for color in COLORS:
            for size in SIZES:
                for material in MATERIALS:
                    for state in STATES:
                        tile = render_object_cell(shape, color, size, material, state)
                        table[tile.tobytes()] = (shape, color, size, material, state)
    return table


def _glyph_templates() -> dict[bytes, str]:
    table = {
        _arrow_glyph("right").tobytes(): "arrow-right",
        _arrow_glyph("left").tobytes(): "arrow-left",
        _arrow_glyph(None).tobytes(): "arrow-plain",
    }
    for action in INTRANS_ACTIONS:
        table[_marker_glyph(action).tobytes()] = action
    return table


_OBJECT_TEMPLATES: dict[bytes, tuple[str, str, str, str, str]] | None = None
_GLYPH_TEMPLATES: dict[bytes, str] | None = None


@dataclass
class DecodedScene:
    objects: dict[tuple[int, int], tuple[str, str, str, str, str]] = field(default_factory=dict)
    glyphs: dict[tuple[int, int], str] = field(default_factory=dict)


def decode_scene(image: np.ndarray) -> DecodedScene:
    """Recover every object's attributes and glyph labels from raw pixels."""
    global _OBJECT_TEMPLATES, _GLYPH_TEMPLATES
    if _OBJECT_TEMPLATES is None:
        _OBJECT_TEMPLATES = _object_templates()
        if len(_OBJECT_TEMPLATES) != len(SHAPES) * len(COLORS) * len(SIZES) * len(MATERIALS) * len(STATES):
            raise AssertionError("object renderings are not pairwise distinct")
        _GLYPH_TEMPLATES = _glyph_templates()
    image = np.ascontiguousarray(image, dtype=np.float32)
    out = DecodedScene()
    for row in range(GRID):
        for col in range(GRID):
            y, x = _cell_origin((row, col))
            tile = np.ascontiguousarray(image[y:y + CELL, x:x + CELL])
            if not tile.any():
                continue
            key = tile.tobytes()
            if key in _OBJECT_TEMPLATES:
                out.objects[(row, col)] = _OBJECT_TEMPLATES[key]
            elif key in _GLYPH_TEMPLATES:
                out.glyphs[(row, col)] = _GLYPH_TEMPLATES[key]
            else:
                raise DataFormatError(f"cell ({row}, {col}) matches no known rendering")
    return out


def decoded_matches_scene(decoded: DecodedScene, scene: Scene) -> bool:
    """Full agreement between a pixel decode and the generating record."""
    expected = {
        o.cell: (o.shape, o.color, o.size, o.material, o.state) for o in scene.objects
    }
    if decoded.objects != expected:
        return False
    if scene.action is None:
        return not decoded.glyphs
    if scene.action[0] == "transitive":
        _, agent_idx, patient_idx, action = scene.action
        agent = scene.objects[agent_idx]
        patient = scene.objects[patient_idx]
        cell = (agent.cell[0], 1)
        toward_patient = "right" if patient.cell[1] > agent.cell[1] else "left"
        if action == "pushes":
            want = f"arrow-{toward_patient}"
        elif action == "pulls":
            want = "arrow-left" if toward_patient == "right" else "arrow-right"
        else:
            want = "arrow-plain"
        return decoded.glyphs == {cell: want}
    _, obj_idx, action = scene.action
    obj = scene.objects[obj_idx]
    return decoded.glyphs == {(obj.cell[0] + 1, obj.cell[1]): action}
