import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from esam import losses as Ls
from esam import tensor as T
from esam.errors import ConfigError, ContractError, DimensionError, NumericError
from esam.losses import LossConfig
from fdcheck import numeric_grad, rel_err
from oracles import a2c_pairwise

CFG = LossConfig()


# ---- independent oracles, written from the definitions ----------------------

def center_loss_reference(D, y, m1, m2, n_classes=2):
    V = [[x / math.sqrt(sum(c * c for c in row)) for x in row] for row in D.tolist()]
    centers = {}
    for k in range(n_classes):
        members = [v for v, lab in zip(V, y) if lab == k]
        if members:
            centers[k] = [sum(col) / len(members) for col in zip(*members)]
    intra = sum(max(0.0, sum((a - b) ** 2 for a, b in zip(v, centers[lab])) - m1) for v, lab in zip(V, y))
    present = sorted(centers)
    inter = 0.0
    for i, k in enumerate(present):
        for u in present[i + 1:]:
            inter += max(0.0, m2 - sum((a - b) ** 2 for a, b in zip(centers[k], centers[u])))
    return intra + inter


def entropy_reference(p, p1, p2):
    sel = [s for s in p if s < p1 or s > p2]
    if not sel:
        return 0.0
    c = lambda s: min(max(s, 1e-7), 1 - 1e-7)  # noqa: E731
    return sum(-s * math.log(c(s)) for s in sel) / len(sel)


# ---- cross-entropy -----------------------------------------------------------

def test_ce_half_half_is_ln2():
    v = Ls.loss_pointwise_ce(T.Tensor([[0.5], [0.5]]), [1, 0]).item()
    assert abs(v - math.log(2)) < 1e-15


def test_ce_perfect_predictions_near_zero():
    v = Ls.loss_pointwise_ce(T.Tensor([[1.0], [0.0]]), [1, 0]).item()
    assert 0 <= v < 2e-7


def test_ce_flip_symmetry():
    rng = np.random.default_rng(0)
    s = rng.uniform(0.01, 0.99, size=(9, 1))
    y = rng.integers(0, 2, size=9)
    a = Ls.loss_pointwise_ce(T.Tensor(s), y).item()
    b = Ls.loss_pointwise_ce(T.Tensor(1 - s), 1 - y).item()
    assert abs(a - b) < 1e-14


def test_ce_empty_batch():
    with pytest.raises(ContractError):
        Ls.loss_pointwise_ce(T.Tensor(np.zeros((0, 1))), [])


# ---- alignment ---------------------------------------------------------------

def test_a2c_identical_is_zero():
    D = np.random.default_rng(1).normal(size=(5, 4))
    assert Ls.loss_a2c(T.Tensor(D), T.Tensor(D)).item() == 0.0


def test_a2c_hand_case():
    assert Ls.loss_a2c(T.Tensor(np.eye(2)), T.Tensor(np.zeros((2, 2)))).item() == 0.5


@pytest.mark.parametrize("seed", range(20))
def test_a2c_matches_pairwise_sum(seed):
    rng = np.random.default_rng(seed)
    Ds, Dt = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert abs(Ls.loss_a2c(T.Tensor(Ds), T.Tensor(Dt)).item() - a2c_pairwise(Ds, Dt)) < 1e-10


def test_a2c_shape_mismatch():
    with pytest.raises(DimensionError):
        Ls.loss_a2c(T.Tensor(np.ones((3, 2))), T.Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("seed", range(10))
def test_grouped_a2c_is_mean_of_per_query(seed):
    rng = np.random.default_rng(seed)
    B, n, L = 6, 4, 5
    Ds, Dt = rng.normal(size=(B * n, L)), rng.normal(size=(B * n, L))
    grouped = Ls.loss_a2c(T.Tensor(Ds), T.Tensor(Dt), group_size=n).item()
    per = np.mean([a2c_pairwise(Ds[b * n:(b + 1) * n], Dt[b * n:(b + 1) * n]) for b in range(B)])
    assert abs(grouped - per) <= 1e-10 * max(1.0, per)


def test_grouped_a2c_gradient_matches_single_form():
    rng = np.random.default_rng(3)
    B, n, L = 3, 4, 3
    Ds, Dt = rng.normal(size=(B * n, L)), rng.normal(size=(B * n, L))
    s1, t1 = T.parameter(Ds), T.parameter(Dt)
    Ls.loss_a2c(s1, t1, group_size=n).backward()
    s2, t2 = T.parameter(Ds), T.parameter(Dt)
    parts = [Ls.loss_a2c(T.gather_rows(s2, range(b * n, b * n + n)), T.gather_rows(t2, range(b * n, b * n + n)))
             for b in range(B)]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    (total * (1.0 / B)).backward()
    assert rel_err(s1.grad, s2.grad) < 1e-12 and rel_err(t1.grad, t2.grad) < 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
       st.permutations(range(4)))
def test_a2c_properties(A, B, perm):
    a, b = T.Tensor(A), T.Tensor(B)
    v = Ls.loss_a2c(a, b).item()
    assert v >= 0
    assert v == Ls.loss_a2c(b, a).item()
    P = np.asarray(perm)
    assert math.isclose(Ls.loss_a2c(T.Tensor(A[P]), T.Tensor(B[P])).item(), v, rel_tol=1e-9, abs_tol=1e-9)


# ---- center-wise clustering --------------------------------------------------

def test_center_single_class_identical_rows():
    D = np.tile([[1.0, 2.0, 3.0]], (4, 1))
    assert Ls.loss_center_clustering(T.Tensor(D), [1, 1, 1, 1], CFG).item() == 0.0


def test_center_two_far_singletons():
    v = Ls.loss_center_clustering(T.Tensor([[1.0, 0.0], [0.0, 5.0]]), [0, 1], CFG).item()
    assert v == 0.0


def test_center_thirty_degrees():
    a = math.radians(30)
    D = T.Tensor([[1.0, 0.0], [math.cos(a), math.sin(a)]])
    v = Ls.loss_center_clustering(D, [0, 1], CFG).item()
    expected = 0.7 - (2 - 2 * math.cos(a))
    assert abs(v - expected) < 1e-12
    assert round(v, 4) == 0.4321


def test_center_label_out_of_range():
    with pytest.raises(ContractError):
        Ls.loss_center_clustering(T.Tensor(np.ones((2, 2))), [0, 2], CFG)


@pytest.mark.parametrize("seed", range(30))
def test_center_matches_reference(seed):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, size=6).tolist()
    cfg = LossConfig(n_classes=3, m1=0.1, m2=1.5)
    v = Ls.loss_center_clustering(T.Tensor(D), y, cfg).item()
    assert abs(v - center_loss_reference(D, y, 0.1, 1.5, 3)) < 1e-12


def test_grouped_center_is_mean_of_per_query():
    rng = np.random.default_rng(9)
    B, n = 5, 6
    D = rng.normal(size=(B * n, 3))
    y = rng.integers(0, 2, size=B * n)
    g = np.repeat(np.arange(B), n)
    grouped = Ls.loss_center_clustering(T.Tensor(D), y, CFG, g).item()
    per = np.mean([center_loss_reference(D[g == b], y[g == b].tolist(), 0.2, 0.7) for b in range(B)])
    assert abs(grouped - per) < 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(0.5, 3.0)),
       arrays(np.float64, (5,), elements=st.floats(0.1, 20.0)),
       st.lists(st.integers(0, 1), min_size=5, max_size=5))
def test_center_scale_invariance_and_nonnegative(D, scales, y):
    D = D * np.sign(np.random.default_rng(0).normal(size=D.shape))
    v = Ls.loss_center_clustering(T.Tensor(D), y, CFG).item()
    w = Ls.loss_center_clustering(T.Tensor(D * scales[:, None]), y, CFG).item()
    assert v >= 0
    assert abs(v - w) < 1e-9


def test_center_detach_switch_blocks_center_gradient():
    D = np.array([[1.0, 0.2], [0.9, -0.3], [0.1, 1.0]])
    x = T.parameter(D)
    Ls.loss_center_clustering(x, [0, 0, 1], LossConfig(detach_centers=True, m1=0.0, m2=3.0)).backward()
    y = T.parameter(D)
    Ls.loss_center_clustering(y, [0, 0, 1], LossConfig(m1=0.0, m2=3.0)).backward()
    assert not np.allclose(x.grad, y.grad)


# ---- self-training -----------------------------------------------------------

def test_entropy_mid_scores_excluded():
    assert Ls.loss_self_training(T.Tensor(np.full((5, 1), 0.5)), CFG).item() == 0.0


def test_entropy_single_confident():
    v = Ls.loss_self_training(T.Tensor([[0.1]]), CFG).item()
    assert abs(v - (-0.1 * math.log(0.1))) < 1e-15
    assert round(v, 4) == 0.2303


def test_entropy_at_one_is_zero_up_to_clamp():
    v = Ls.loss_self_training(T.Tensor([[1.0]]), CFG).item()
    assert 0 <= v < 2e-7


@pytest.mark.parametrize("seed", range(20))
def test_entropy_matches_reference(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, size=8)
    v = Ls.loss_self_training(T.Tensor(p.reshape(-1, 1)), CFG).item()
    assert abs(v - entropy_reference(p.tolist(), 0.2, 0.8)) < 1e-14


def test_entropy_grouped_averages_queries_with_empty_selection():
    p = np.array([0.1, 0.5, 0.5, 0.5, 0.9, 0.05])
    g = np.array([0, 0, 1, 1, 2, 2])
    v = Ls.loss_self_training(T.Tensor(p.reshape(-1, 1)), CFG, g).item()
    ref = (entropy_reference([0.1, 0.5], .2, .8) + 0.0 + entropy_reference([0.9, 0.05], .2, .8)) / 3
    assert abs(v - ref) < 1e-15


def test_entropy_no_gradient_through_gate():
    p = T.parameter([[0.1], [0.5]])
    Ls.loss_self_training(p, CFG).backward()
    assert p.grad[1, 0] == 0.0
    assert abs(p.grad[0, 0] - (-(math.log(0.1) + 1))) < 1e-12


def _entropy_descent(p0, steps=200, lr=0.01):
    p = p0
    for _ in range(steps):
        x = T.parameter(p)
        T.sum(-(x * T.log(x))).backward()
        p = float(np.clip(p - lr * x.grad[0, 0], Ls.PROB_EPS, 1 - Ls.PROB_EPS))
    return p


def test_entropy_descent_fixed_point_direction():
    assert _entropy_descent(0.1) < 0.05
    assert _entropy_descent(0.9) > 0.95
    assert abs(_entropy_descent(math.exp(-1)) - math.exp(-1)) < 1e-6


# ---- total -------------------------------------------------------------------

def test_total_reduces_to_base_model():
    comps = {k: T.Tensor(v) for k, v in zip(Ls.COMPONENTS, (0.3, 5.0, 2.0, 1.0))}
    cfg0 = LossConfig(0, 0, 0)
    assert cfg0.is_base_model
    assert Ls.loss_total(comps, cfg0).item() == 0.3


def test_total_with_default_weights():
    comps = {k: T.Tensor(1.0) for k in Ls.COMPONENTS}
    assert abs(Ls.loss_total(comps, CFG).item() - 2.5) < 1e-15


def test_total_linear_in_each_weight():
    comps = {k: T.Tensor(v) for k, v in zip(Ls.COMPONENTS, (0.3, 5.0, 2.0, 1.5))}
    base = Ls.loss_total(comps, LossConfig(0.1, 0.2, 0.3)).item()
    assert math.isclose(Ls.loss_total(comps, LossConfig(1.1, 0.2, 0.3)).item() - base, 5.0)
    assert math.isclose(Ls.loss_total(comps, LossConfig(0.1, 1.2, 0.3)).item() - base, 2.0)
    assert math.isclose(Ls.loss_total(comps, LossConfig(0.1, 0.2, 1.3)).item() - base, 1.5)


def test_total_rejects_non_finite():
    comps = {"L_s": T.Tensor(1.0), "L_DA": T.Tensor(float("nan"))}
    with pytest.raises(NumericError, match="L_DA"):
        Ls.loss_total(comps, CFG)


def test_loss_config_invariants():
    for bad in (dict(p1=0.9, p2=0.8), dict(m1=0.8, m2=0.7), dict(lambda_da=-1), dict(n_classes=1)):
        with pytest.raises(ConfigError):
            LossConfig(**bad)


# ---- gradients w.r.t. feature matrices ---------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_feature_gradients(seed):
    rng = np.random.default_rng(seed)
    Ds, Dt = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    y = rng.integers(0, 2, size=6)
    g = np.repeat([0, 1], 3)
    probs = rng.uniform(0.02, 0.98, size=(6, 1))
    mask = Ls.self_training_mask(probs, CFG)
    cases = {
        "a2c": lambda a, b, p: Ls.loss_a2c(a, b, group_size=3),
        "center": lambda a, b, p: Ls.loss_center_clustering(a, y, CFG, g),
        "entropy": lambda a, b, p: Ls.loss_self_training(p, CFG, g, mask=mask),
        "ce": lambda a, b, p: Ls.loss_pointwise_ce(p, y),
    }
    for name, f in cases.items():
        a, b, p = T.parameter(Ds), T.parameter(Dt), T.parameter(probs)
        f(a, b, p).backward()
        for t, raw in ((a, Ds), (b, Dt), (p, probs)):
            fd = numeric_grad(lambda: f(T.Tensor(Ds), T.Tensor(Dt), T.Tensor(probs)).item(), raw)
            an = t.grad if t.grad is not None else np.zeros_like(raw)
            assert rel_err(an, fd) < 1e-5, name
