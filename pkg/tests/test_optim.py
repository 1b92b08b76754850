import numpy as np
import pytest

from ccdm.numerics import Adam, NonFiniteError, Tensor, adam_step, AdamState


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.arange(4, dtype=np.float32), name="p")
    before = p.data.copy()
    opt = Adam({"p": p}, lr=1e-3)
    opt.step({"p": np.zeros(4, dtype=np.float32)})
    assert np.array_equal(p.data, before)


def test_first_step_matches_hand_computed_update():
    # scalar param, g=1, defaults: m_hat=1, v_hat=1 -> delta = -lr/(1+eps)
    p = Tensor(0.5, name="p")
    opt = Adam({"p": p}, lr=1e-3)
    opt.step({"p": np.asarray(1.0, dtype=np.float32)})
    expected_delta = -1e-3 * (1.0 / (1.0 + 1e-8))
    assert p.data == pytest.approx(0.5 + expected_delta, abs=1e-9)
    assert expected_delta == pytest.approx(-9.9999999e-4)


def test_identical_params_get_identical_updates():
    a = Tensor(np.full(3, 0.7, dtype=np.float32), name="a")
    b = Tensor(np.full(3, 0.7, dtype=np.float32), name="b")
    opt = Adam({"a": a, "b": b}, lr=1e-2)
    g = np.full(3, 0.3, dtype=np.float32)
    for _ in range(5):
        opt.step({"a": g, "b": g})
    assert np.array_equal(a.data, b.data)


def test_step_counter_increments_by_one():
    p = Tensor(1.0, name="p")
    state = AdamState(lr=1e-3)
    for k in range(3):
        adam_step({"p": p}, {"p": np.asarray(0.1, dtype=np.float32)}, state)
        assert state.step == k + 1


def test_shape_mismatch_is_an_error():
    p = Tensor(np.zeros(4, dtype=np.float32), name="p")
    opt = Adam({"p": p})
    with pytest.raises(ValueError, match="shape"):
        opt.step({"p": np.zeros(3, dtype=np.float32)})


def test_nonfinite_gradient_is_an_error():
    p = Tensor(np.zeros(2, dtype=np.float32), name="p")
    opt = Adam({"p": p})
    with pytest.raises(NonFiniteError):
        opt.step({"p": np.array([np.nan, 0.0], dtype=np.float32)})


def test_moment_shapes_match_parameters():
    p = Tensor(np.zeros((3, 2), dtype=np.float32), name="p")
    opt = Adam({"p": p})
    opt.step({"p": np.ones((3, 2), dtype=np.float32)})
    assert opt.state.m["p"].shape == (3, 2)
    assert opt.state.v["p"].shape == (3, 2)


def test_params_without_grads_are_untouched():
    p = Tensor(np.ones(2, dtype=np.float32), name="p")
    q = Tensor(np.ones(2, dtype=np.float32), name="q")
    before = q.data.copy()
    opt = Adam({"p": p, "q": q})
    opt.step({"p": np.ones(2, dtype=np.float32)})
    assert np.array_equal(q.data, before)
