import numpy as np
import pytest

from esam import tensor as T
from esam.errors import DimensionError
from esam.optim import SGD, Adam, AdamState, adam_step, clip_grad_norm, sgd_step


def test_sgd_zero_grad_and_definition():
    p = {"w": np.array([[1.0, 2.0]])}
    assert np.array_equal(sgd_step(p, {"w": np.zeros((1, 2))}, 0.1)["w"], p["w"])
    assert sgd_step({"w": np.array([[1.0]])}, {"w": np.array([[2.0]])}, 0.1)["w"][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_two_steps_equal_summed_update():
    p = {"w": np.array([[0.5, -1.0]])}
    g = {"w": np.array([[0.25, 0.5]])}
    twice = sgd_step(sgd_step(p, g, 0.125), g, 0.125)
    once = sgd_step(p, {"w": 2 * g["w"]}, 0.125)
    assert np.array_equal(twice["w"], once["w"])


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step({"w": np.ones((2, 2))}, {"w": np.ones((1, 2))}, 0.1)
    with pytest.raises(DimensionError):
        adam_step({"w": np.ones((2, 2))}, {"w": np.ones((2, 1))}, AdamState())


def test_adam_zero_gradients_leave_params():
    st = AdamState(lr=1e-3)
    p = {"w": np.array([[1.0, -3.0]])}
    for _ in range(20):
        p = adam_step(p, {"w": np.zeros((1, 2))}, st)
    assert np.array_equal(p["w"], [[1.0, -3.0]])
    assert st.t == 20


def test_adam_first_step():
    st = AdamState(lr=1e-4)
    out = adam_step({"w": np.array([[0.0]])}, {"w": np.array([[1.0]])}, st)
    assert out["w"][0, 0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


@pytest.mark.parametrize("g", [1e-3, 0.5, 7.0, -2.0])
def test_adam_update_bounded_by_lr_for_constant_gradient(g):
    st = AdamState(lr=1e-3)
    p = {"w": np.zeros((1, 3))}
    for _ in range(1000):
        new = adam_step(p, {"w": np.full((1, 3), g)}, st)
        assert np.max(np.abs(new["w"] - p["w"])) <= 1e-3 * (1 + 1e-9)
        p = new


def test_adam_minimizes_quadratic():
    theta = T.parameter(np.ones((1, 5)))
    opt = Adam({"theta": theta}, lr=1e-2)
    f0 = T.frobenius_sq(theta).item()
    for _ in range(500):
        opt.zero_grad()
        T.frobenius_sq(theta).backward()
        opt.step()
    assert T.frobenius_sq(theta).item() < 1e-3 * f0


def test_adam_state_round_trip_bit_exact(tmp_path):
    theta = T.parameter(np.random.default_rng(0).normal(size=(3, 2)))
    opt = Adam({"theta": theta}, lr=3e-3)
    for _ in range(7):
        opt.zero_grad()
        T.frobenius_sq(theta).backward()
        opt.step()
    arrays = opt.state_arrays()
    np.savez(tmp_path / "s.npz", **arrays)
    with np.load(tmp_path / "s.npz") as z:
        restored = AdamState.from_arrays({k: z[k] for k in z.files})
    assert restored.t == 7 and restored.lr == 3e-3
    for k in opt.state.m:
        assert restored.m[k].tobytes() == opt.state.m[k].tobytes()
        assert restored.v[k].tobytes() == opt.state.v[k].tobytes()


def test_sgd_optimizer_and_clipping():
    w = T.parameter([[3.0, 4.0]])
    opt = SGD({"w": w}, lr=1.0, clip_norm=1.0)
    T.sum(w * T.constant([[3.0, 4.0]])).backward()
    opt.step()
    assert np.allclose(w.values, [[3 - 0.6, 4 - 0.8]])
    assert clip_grad_norm({"a": np.array([0.3, 0.4])}, 1.0)["a"].tolist() == [0.3, 0.4]
