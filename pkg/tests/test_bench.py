"""Benchmark generator: rendering, captions, task files, pixel decode."""
import itertools

import numpy as np
import pytest

from vlcl import bench
from vlcl.bench import (
    CELL,
    COLORS,
    CONCEPTS,
    DIM,
    GRID,
    IMAGE_HW,
    INTRANS_ACTIONS,
    MATERIALS,
    PAD_ID,
    RELATIONS,
    SHAPES,
    SIZES,
    STATES,
    TRANS_ACTIONS,
    VOCAB,
    WARMUP_CONCEPT,
    Scene,
    SceneObject,
    caption_is_true,
    decode_scene,
    decoded_matches_scene,
    detokenize,
    generate_task,
    iter_batches,
    load_triplets,
    load_vocab,
    make_batch,
    pad_ids,
    read_image_tensor,
    render,
    render_object_cell,
    save_task,
    tokenize,
    write_image_tensor,
)
from vlcl.errors import ConfigError, DataFormatError

ALL_CONCEPTS = CONCEPTS + (WARMUP_CONCEPT,)


def test_grid_tiles_canvas_exactly():
    assert GRID * CELL == IMAGE_HW


def test_vocab_well_formed():
    assert VOCAB[PAD_ID] == "<pad>"
    assert len(VOCAB) == len(set(VOCAB))
    ids = tokenize(["a", "square", "left_of", "the", "circle"])
    assert detokenize(ids) == ["a", "square", "left_of", "the", "circle"]
    with pytest.raises(DataFormatError):
        tokenize(["a", "pentagon"])


def test_object_templates_injective():
    combos = list(itertools.product(SHAPES, COLORS, SIZES, MATERIALS, STATES))
    tiles = {bench.render_object_cell(*c).tobytes() for c in combos}
    assert len(tiles) == len(combos) == 384
    assert all(t != bytes(len(t)) for t in tiles)  # no template is an empty cell


def test_glyph_templates_distinct_from_objects():
    objects = {bench.render_object_cell(*c).tobytes()
               for c in itertools.product(SHAPES, COLORS, SIZES, MATERIALS, STATES)}
    glyphs = {bench._arrow_glyph("right").tobytes(), bench._arrow_glyph("left").tobytes(),
              bench._arrow_glyph(None).tobytes()}
    glyphs |= {bench._marker_glyph(a).tobytes() for a in INTRANS_ACTIONS}
    assert len(glyphs) == 6
    assert not (glyphs & objects)


def test_shape_masks():
    sq = bench._shape_mask("square", 6)
    assert sq.all()
    cr = bench._shape_mask("cross", 6)
    assert cr[1:4, :].all() and cr[:, 1:4].all()
    assert not cr[0, 0] and not cr[5, 5]
    tri = bench._shape_mask("triangle", 8)
    assert tri[7].all() and tri[0].sum() < tri[7].sum()
    ci = bench._shape_mask("circle", 8)
    assert not ci[0, 0] and ci[4, 4]
    assert ci.sum() < 64  # strictly interior: never the full box
    with pytest.raises(ConfigError):
        bench._shape_mask("pentagon", 6)


def test_material_brightness_levels():
    solid = bench._material_brightness("solid")
    assert (solid == 1.0).all()
    for name in ("striped", "dotted", "checkered"):
        levels = np.unique(bench._material_brightness(name))
        assert np.allclose(levels, [DIM, 1.0], atol=1e-6)
    assert bench._material_brightness("striped").mean() != \
        bench._material_brightness("dotted").mean()
    with pytest.raises(ConfigError):
        bench._material_brightness("velvet")


def test_glossy_ring_is_white_boundary():
    matte = render_object_cell("square", "red", "large", "solid", "matte")
    glossy = render_object_cell("square", "red", "large", "solid", "glossy")
    changed = np.any(matte != glossy, axis=-1)
    assert changed[0, 0] and changed[0, 7]      # boundary repainted
    assert not changed[2:6, 2:6].any()          # interior untouched
    assert (glossy[changed] == 1.0).all()       # repainted pixels are white


def test_render_bounds_and_determinism():
    rng = np.random.default_rng(0)
    for _ in range(10):
        scene, _, _ = bench._sample_spatial(rng)
        img = render(scene)
        assert img.shape == (IMAGE_HW, IMAGE_HW, 3)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert np.array_equal(img, render(scene))


def test_samplers_produce_valid_minimal_pairs():
    # Every sampler yields a true positive, a false negative, and exactly
    # one differing token between them.
    for concept in ALL_CONCEPTS:
        rng = np.random.default_rng(hash(concept) % 2**32)
        for _ in range(100):
            scene, pos, neg = bench._SAMPLERS[concept](rng, concept)
            assert caption_is_true(scene, pos), (concept, pos)
            assert not caption_is_true(scene, neg), (concept, neg)
            assert len(pos) == len(neg)
            assert sum(p != n for p, n in zip(pos, neg)) == 1
            tokenize(pos), tokenize(neg)  # every token in vocabulary


def test_spatial_scenes_share_exactly_one_axis():
    rng = np.random.default_rng(1)
    for _ in range(100):
        scene, pos, _ = bench._sample_spatial(rng)
        (r1, c1), (r2, c2) = scene.objects[0].cell, scene.objects[1].cell
        assert (r1 == r2) != (c1 == c2)
        assert pos[2] in RELATIONS


def test_transitive_layout_and_glyph():
    rng = np.random.default_rng(2)
    for _ in range(50):
        scene, pos, _ = bench._sample_transitive(rng)
        rows = {o.cell[0] for o in scene.objects}
        cols = sorted(o.cell[1] for o in scene.objects)
        assert len(rows) == 1 and cols == [0, 2]
        assert pos[2] in TRANS_ACTIONS
        decoded = decode_scene(render(scene))
        assert list(decoded.glyphs) == [(scene.objects[0].cell[0], 1)]


def test_intransitive_marker_sits_below_object():
    rng = np.random.default_rng(3)
    for _ in range(50):
        scene, pos, _ = bench._sample_intransitive(rng)
        (row, col) = scene.objects[0].cell
        assert row + 1 < GRID
        decoded = decode_scene(render(scene))
        assert decoded.glyphs == {(row + 1, col): pos[2]}


def test_caption_truth_hand_scene():
    scene = Scene([
        SceneObject("square", "red", "small", "striped", "glossy", (0, 0)),
        SceneObject("circle", "blue", "large", "solid", "matte", (0, 2)),
    ])
    true_caps = [["a", "red", "square"], ["the", "blue", "circle"],
                 ["a", "striped", "square"], ["a", "small", "square"],
                 ["the", "glossy", "square"], ["a", "square", "left_of", "a", "circle"],
                 ["the", "circle", "right_of", "the", "square"],
                 ["a", "square", "and", "a", "circle"], ["a", "circle"]]
    false_caps = [["a", "blue", "square"], ["a", "red", "circle"],
                  ["a", "large", "square"], ["a", "dotted", "square"],
                  ["the", "matte", "square"], ["a", "circle", "left_of", "a", "square"],
                  ["a", "square", "above", "a", "circle"], ["a", "triangle"],
                  ["a", "square", "pushes", "a", "circle"],
                  ["a", "square", "spins"]]
    for cap in true_caps:
        assert caption_is_true(scene, cap), cap
    for cap in false_caps:
        assert not caption_is_true(scene, cap), cap


def test_generate_task_split_and_determinism():
    task = generate_task("color", 40, seed=7)
    assert (len(task.train), len(task.val), len(task.test)) == (32, 4, 4)
    again = generate_task("color", 40, seed=7)
    for a, b in zip(task.train, again.train):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.pos, b.pos) and np.array_equal(a.neg, b.neg)
    other = generate_task("color", 40, seed=8)
    assert any(not np.array_equal(a.image, b.image)
               for a, b in zip(task.train, other.train))
    assert all(t.scene is not None for t in task.train)
    with pytest.raises(ConfigError):
        generate_task("texture", 40, seed=0)
    with pytest.raises(ConfigError):
        generate_task("color", 5, seed=0)


def test_image_tensor_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((4, 5, 3)).astype(np.float32)
    path = tmp_path / "t.bin"
    write_image_tensor(path, arr)
    assert np.array_equal(read_image_tensor(path), arr)
    with pytest.raises(DataFormatError):
        write_image_tensor(tmp_path / "bad.bin", arr[0])
    (tmp_path / "trunc.bin").write_bytes(b"\x01\x02")
    with pytest.raises(DataFormatError):
        read_image_tensor(tmp_path / "trunc.bin")
    blob = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(blob[:-4])
    with pytest.raises(DataFormatError):
        read_image_tensor(tmp_path / "short.bin")


def test_task_round_trip(tmp_path):
    task = generate_task("size", 20, seed=3)
    save_task(task, tmp_path / "size")
    loaded = load_triplets(tmp_path / "size")
    assert loaded.concept == "size"
    for split in ("train", "val", "test"):
        orig, back = task.splits[split], loaded.splits[split]
        assert len(orig) == len(back)
        for a, b in zip(orig, back):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.pos, b.pos) and np.array_equal(a.neg, b.neg)
    vocab = load_vocab(tmp_path / "size" / "vocab.txt")
    assert tuple(vocab) == VOCAB


def test_load_rejects_corrupt_records(tmp_path):
    task = generate_task("state", 20, seed=4)
    save_task(task, tmp_path / "a")
    jl = tmp_path / "a" / "val.jsonl"
    jl.write_text("{not json\n", encoding="utf-8")
    with pytest.raises(DataFormatError):
        load_triplets(tmp_path / "a")
    jl.write_text('{"image": "images/val_00000.bin", "pos": "a b"}\n', encoding="utf-8")
    with pytest.raises(DataFormatError):
        load_triplets(tmp_path / "a")
    jl.write_text('{"image": "images/val_00000.bin", "pos": "a square", '
                  '"neg": "a square", "concept": "state"}\n', encoding="utf-8")
    with pytest.raises(DataFormatError):
        load_triplets(tmp_path / "a")
    jl.unlink()
    with pytest.raises(DataFormatError):
        load_triplets(tmp_path / "a")


def test_load_vocab_rejects_duplicates(tmp_path):
    (tmp_path / "v.txt").write_text("a\nb\na\n", encoding="utf-8")
    with pytest.raises(DataFormatError):
        load_vocab(tmp_path / "v.txt")


def test_batching_shapes_and_masks():
    task = generate_task("spatial-relation", 20, seed=5)
    batch = make_batch(task.train[:6])
    assert batch.size == 6
    assert batch.images.shape == (6, IMAGE_HW, IMAGE_HW, 3)
    assert batch.pos_ids.shape == batch.pos_mask.shape
    assert ((batch.pos_ids != PAD_ID) == (batch.pos_mask == 1.0)).all()
    ids, mask = pad_ids([np.array([3, 4]), np.array([5, 6, 7])])
    assert ids.shape == (2, 3)
    assert ids[0, 2] == PAD_ID and mask[0, 2] == 0.0


def test_iter_batches_covers_all_and_shuffles():
    task = generate_task("color", 20, seed=6)
    fixed = list(iter_batches(task.train, 7))
    assert [b.size for b in fixed] == [7, 7, 2]
    flat = np.concatenate([b.pos_ids[:, 1] for b in fixed])
    rng = np.random.default_rng(0)
    shuffled = list(iter_batches(task.train, 7, rng))
    flat2 = np.concatenate([b.pos_ids[:, 1] for b in shuffled])
    assert sorted(flat.tolist()) == sorted(flat2.tolist())
    images = np.concatenate([b.images for b in fixed])
    assert np.array_equal(images[3], task.train[3].image.astype(images.dtype))


def test_decode_oracle_round_trip():
    for concept in ALL_CONCEPTS:
        task = generate_task(concept, 12, seed=9)
        for t in task.train + task.val + task.test:
            assert decoded_matches_scene(decode_scene(t.image), t.scene), concept


def test_decode_rejects_unknown_pixels():
    scene = Scene([SceneObject("square", "red", "large", "solid", "matte", (1, 1))])
    img = render(scene)
    img[0, 0, 0] = 0.123
    with pytest.raises(DataFormatError):
        decode_scene(img)
