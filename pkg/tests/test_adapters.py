"""Adapter stack lifecycle: zero-init identity, depth math, folding, accounting."""
import numpy as np
import pytest

from vlcl.adapters import AdapterStack
from vlcl.errors import ContractViolation, StateError
from vlcl.rng import RngHub
from vlcl.tensor import Tensor, using_dtype


def _linear_stack(n_in=6, n_out=5, seed=0):
    rng = np.random.default_rng(seed)
    base = Tensor(rng.normal(size=(n_in, n_out)), requires_grad=False)
    return AdapterStack("w", "linear", base)


def test_fresh_level_is_exact_identity():
    # down starts at zero, so attaching a level must not change any output.
    with using_dtype(np.float64):
        stack = _linear_stack()
        x = Tensor(np.random.default_rng(1).normal(size=(3, 6)))
        before = stack.apply(x, 0).data.copy()
        stack.attach(rank=2, stream=RngHub(0).stream("a"))
        after = stack.apply(x, 1).data
        assert np.array_equal(before, after)


def test_depth_selects_prefix_of_levels():
    with using_dtype(np.float64):
        stack = _linear_stack()
        hub = RngHub(3)
        for task in (1, 2, 3):
            stack.attach(rank=2, stream=hub.stream(f"t{task}"))
            for level in stack.adapters:
                level.down.data[:] = np.random.default_rng(task).normal(size=level.down.data.shape)
            stack.freeze_top()
        x = np.random.default_rng(9).normal(size=(4, 6))
        for depth in range(4):
            got = stack.apply(Tensor(x), depth).data
            expect = x @ stack.base.data
            for level in stack.adapters[:depth]:
                expect = expect + (x @ level.down.data) @ level.up.data
            assert np.allclose(got, expect, atol=1e-12)


def test_effective_weight_matches_dense_sum():
    with using_dtype(np.float64):
        stack = _linear_stack()
        hub = RngHub(5)
        rng = np.random.default_rng(6)
        for task in (1, 2):
            stack.attach(rank=3, stream=hub.stream(f"t{task}"))
            stack.adapters[-1].down.data[:] = rng.normal(size=(6, 3))
            stack.freeze_top()
        for depth in range(3):
            dense = stack.base.data.copy()
            for level in stack.adapters[:depth]:
                dense = dense + level.down.data @ level.up.data
            assert np.allclose(stack.effective_weight(depth), dense, atol=1e-12)


def test_apply_never_materializes_fold_does():
    stack = _linear_stack()
    stack.attach(rank=2, stream=RngHub(0).stream("s"))
    stack.freeze_top()
    x = Tensor(np.ones((2, 6)))
    stack.apply(x, 1)
    stack.apply(x, 0)
    assert stack.materializations == 0
    stack.effective_weight(1)
    assert stack.materializations == 1


def test_attach_requires_frozen_top():
    stack = _linear_stack()
    stack.attach(rank=2, stream=RngHub(0).stream("s"))
    with pytest.raises(StateError):
        stack.attach(rank=2, stream=RngHub(0).stream("s2"))
    stack.freeze_top()
    stack.attach(rank=2, stream=RngHub(0).stream("s3"))  # now allowed
    assert stack.depth == 2


def test_depth_out_of_range_raises():
    stack = _linear_stack()
    with pytest.raises(IndexError):
        stack.apply(Tensor(np.ones((1, 6))), 1)
    stack.attach(rank=1, stream=RngHub(0).stream("s"))
    with pytest.raises(IndexError):
        stack.apply(Tensor(np.ones((1, 6))), 2)
    with pytest.raises(IndexError):
        stack.apply(Tensor(np.ones((1, 6))), -1)


def test_rank_bounds_and_kind_guards():
    stack = _linear_stack(n_in=4, n_out=3)
    with pytest.raises(ContractViolation):
        stack.attach(rank=0, stream=RngHub(0).stream("s"))
    with pytest.raises(ContractViolation):
        stack.attach(rank=4, stream=RngHub(0).stream("s"))  # > min(4, 3)
    with pytest.raises(ContractViolation):
        stack.lookup(np.array([0]), 0)  # linear stack has no row lookup
    emb = AdapterStack("e", "embedding", Tensor(np.eye(4)))
    with pytest.raises(ContractViolation):
        emb.apply(Tensor(np.ones((1, 4))), 0)
    with pytest.raises(ContractViolation):
        AdapterStack("bad", "conv", Tensor(np.eye(2)))


def test_param_count_formula():
    # rank-16 level on a 64x64 base: 64*16 + 16*64 = 2048 adapter params.
    stack = _linear_stack(n_in=64, n_out=64)
    stack.attach(rank=16, stream=RngHub(0).stream("s"))
    base_n, adapter_n = stack.param_counts(1)
    assert base_n == 64 * 64
    assert adapter_n == 2048
    assert stack.param_counts(0) == (4096, 0)


def test_embedding_stack_gathers_per_depth():
    with using_dtype(np.float64):
        rng = np.random.default_rng(12)
        base = Tensor(rng.normal(size=(7, 4)))
        stack = AdapterStack("emb", "embedding", base)
        stack.attach(rank=2, stream=RngHub(1).stream("s"))
        stack.adapters[-1].down.data[:] = rng.normal(size=(7, 2))
        stack.freeze_top()
        ids = np.array([[0, 3], [6, 6]])
        got = stack.lookup(ids, 1).data
        dense = base.data + stack.adapters[0].down.data @ stack.adapters[0].up.data
        assert np.allclose(got, dense[ids], atol=1e-12)
        assert np.array_equal(stack.lookup(ids, 0).data, base.data[ids])


def test_freeze_top_clears_grads_and_empty_freeze_raises():
    stack = _linear_stack()
    with pytest.raises(StateError):
        stack.freeze_top()
    stack.attach(rank=2, stream=RngHub(0).stream("s"))
    level = stack.adapters[-1]
    level.down.grad = np.ones_like(level.down.data)
    stack.freeze_top()
    assert level.frozen
    assert level.down.grad is None


def test_level_params_and_names():
    stack = _linear_stack()
    hub = RngHub(2)
    stack.attach(rank=2, stream=hub.stream("a"))
    stack.freeze_top()
    stack.attach(rank=2, stream=hub.stream("b"))
    assert len(stack.level_params(2)) == 2
    with pytest.raises(IndexError):
        stack.level_params(9)
    names = [n for n, _ in stack.all_params()]
    assert names == ["w/base", "w/task1/down", "w/task1/up", "w/task2/down", "w/task2/up"]


def test_attach_draws_are_stream_deterministic():
    ups = []
    for _ in range(2):
        stack = _linear_stack()
        stack.attach(rank=2, stream=RngHub(42).stream("init"))
        ups.append(stack.adapters[-1].up.data.copy())
    assert np.array_equal(ups[0], ups[1])
