"""AdamW update math, the cosine schedule, and optimizer state round-trips."""
import numpy as np
import pytest

from vlcl.errors import ContractViolation
from vlcl.optim import AdamW, OptimConfig, cosine_lr
from vlcl.tensor import Tensor, mul, reduce_sum, using_dtype


def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(0.1, 250, 100) == pytest.approx(0.0, abs=1e-18)  # clamped past horizon
    assert cosine_lr(0.1, 7, 0) == 0.1  # horizon 0 keeps lr constant


def test_cosine_schedule_monotone_decay():
    lrs = [cosine_lr(1.0, t, 40) for t in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_first_step_matches_hand_adamw():
    # One step from zero moments: m_hat = g, v_hat = g^2, update = g/|g| = sign(g),
    # plus decoupled decay wd * theta, all scaled by lr.
    with using_dtype(np.float64):
        theta0 = np.array([1.0, -2.0, 3.0])
        g = np.array([0.5, -0.25, 1.5])
        p = Tensor(theta0.copy(), requires_grad=True)
        p.grad = g.copy()
        cfg = OptimConfig(lr=0.01, weight_decay=0.1, eps=1e-8)
        AdamW([p], cfg).step()
        expect = theta0 - 0.01 * (g / (np.abs(g) + 1e-8) + 0.1 * theta0)
        assert np.allclose(p.data, expect, atol=1e-12)


def test_converges_on_quadratic():
    with using_dtype(np.float64):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = AdamW([p], OptimConfig(lr=0.1, weight_decay=0.0, schedule_steps=400))
        for _ in range(400):
            loss = reduce_sum(mul(p, p))
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert np.all(np.abs(p.data) < 1e-2)


def test_frozen_and_unlisted_params_untouched():
    with using_dtype(np.float64):
        trained = Tensor(np.ones(3), requires_grad=True)
        bystander = Tensor(np.ones(3), requires_grad=True)
        opt = AdamW([trained], OptimConfig(lr=0.05))
        loss = reduce_sum(mul(trained, bystander))
        loss.backward()
        before = bystander.data.copy()
        opt.step()
        assert np.array_equal(bystander.data, before)
        assert not np.array_equal(trained.data, np.ones(3))


def test_rejects_frozen_duplicate_empty_and_missing_grad():
    frozen = Tensor(np.ones(2), requires_grad=False)
    live = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractViolation):
        AdamW([frozen], OptimConfig())
    with pytest.raises(ContractViolation):
        AdamW([live, live], OptimConfig())
    with pytest.raises(ContractViolation):
        AdamW([], OptimConfig())
    opt = AdamW([live], OptimConfig())
    with pytest.raises(ContractViolation):
        opt.step()  # no backward yet
    with pytest.raises(ContractViolation):
        OptimConfig(lr=-1.0).validate()


def test_state_round_trip_bit_exact():
    rng = np.random.default_rng(11)
    with using_dtype(np.float64):
        x = rng.normal(size=(4,))
        p1 = Tensor(x.copy(), requires_grad=True)
        p2 = Tensor(x.copy(), requires_grad=True)
        o1 = AdamW([p1], OptimConfig(lr=0.02, schedule_steps=30))
        o2 = AdamW([p2], OptimConfig(lr=0.02, schedule_steps=30))

        def one_step(p, o):
            loss = reduce_sum(mul(p, p))
            o.zero_grad()
            loss.backward()
            o.step()

        for _ in range(5):
            one_step(p1, o1)
        o2.load_state_arrays({k: v.copy() for k, v in o1.state_arrays().items()})
        p2.data[:] = p1.data
        for _ in range(3):
            one_step(p1, o1)
            one_step(p2, o2)
        assert np.array_equal(p1.data, p2.data)


def test_trajectory_deterministic():
    def run():
        with using_dtype(np.float64):
            p = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
            opt = AdamW([p], OptimConfig(lr=0.05, schedule_steps=20))
            for _ in range(20):
                loss = reduce_sum(mul(p, p))
                opt.zero_grad()
                loss.backward()
                opt.step()
            return p.data.copy()

    assert np.array_equal(run(), run())
