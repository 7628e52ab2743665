import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import small_spec
from dyncausal import kernels
from dyncausal.dism import PriorSet
from dyncausal.node import (ClientData, DivergenceError, Penalties, ThetaLayout, ThetaParams,
                            forward, gradient, h_acyc, local_train, loss)
from dyncausal.synth import ScenarioSpec, generate

BACKENDS = [kernels.python_backend]
if kernels.compiled_backend is not None:
    BACKENDS.append(kernels.compiled_backend)
backend_ids = ["python", "compiled"][:len(BACKENDS)]


def _random_priors(rng, T, D, L):
    pr = PriorSet.full(T, D, L)
    pr.S = (rng.uniform(size=(T, D, D)) < 0.7) & ~np.eye(D, dtype=bool)[None]
    pr.L_soft = pr.S & (rng.uniform(size=(T, D, D)) < 0.5)
    pr.S_A = rng.uniform(size=(L, D, D)) < 0.7
    pr.L_soft_A = pr.S_A & (rng.uniform(size=(L, D, D)) < 0.5)
    return pr


def _setup(seed):
    rng = np.random.default_rng(seed)
    spec = ScenarioSpec(D=3, T=12, L=1, K=1, n_k=50, sparsity=0.5, seed=seed)
    panel = generate(spec)[0][0]
    pr = _random_priors(rng, 12, 3, 1)
    th = ThetaParams.init(ThetaLayout(3, 1, 8), seed, scale=1.0)
    th["A"][...] = 0.3 * rng.normal(size=(1, 3, 3))
    th["proc_b2"][...] = 0.1 * rng.normal(size=8)
    return panel, pr, th, ClientData.from_panel(panel, 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    _, pr, th, data = _setup(seed)
    pen = Penalties(0.1, 0.1, 1.0)
    g = gradient(th, pr, data, pen)
    fd = np.empty_like(g)
    eps = 1e-5
    for i in range(th.flat.size):
        tp, tm = th.copy(), th.copy()
        tp.flat[i] += eps
        tm.flat[i] -= eps
        fd[i] = (loss(tp, pr, data, pen)[0] - loss(tm, pr, data, pen)[0]) / (2 * eps)
    # absolute floor covers the kinks of the L1 terms and round-off near zero
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_h_acyc_two_cycle_closed_form():
    a, b = 0.7, -1.3
    W = np.array([[0.0, a], [b, 0.0]])
    assert h_acyc(W) == pytest.approx(a**2 * b**2, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), D=st.integers(2, 7))
def test_h_acyc_zero_on_dags_positive_on_cycles(seed, D):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(D)
    U = np.triu(rng.normal(size=(D, D)), 1)
    assert abs(h_acyc(U[np.ix_(perm, perm)])) < 1e-12
    # back edge closing the cycle 0 -> D-1 -> 0, then relabel the nodes
    U[D - 1, 0] = 0.5
    assert h_acyc(U[np.ix_(perm, perm)]) > 0


def test_h_acyc_matches_exponential_on_dags_and_is_batched(rng):
    W = np.triu(rng.normal(size=(4, 5, 5)), 1)
    h = h_acyc(W)
    assert h.shape == (4,)
    exact = [np.trace(expm(w * w)) - 5 for w in W]
    assert np.allclose(h, exact, atol=1e-12)


def _linear_processor(M, dt, eps=1e-5):
    # tanh(eps * y M) @ (dt / eps) I  ~  dt * y M for small eps
    m = M.shape[0]
    P1 = np.zeros((m + 1, m))
    P1[:m] = eps * M
    return P1, np.zeros(m), (dt / eps) * np.eye(m), np.zeros(m)


@pytest.mark.parametrize("be", BACKENDS, ids=backend_ids)
def test_rk4_matches_matrix_exponential(be, rng):
    m = 4
    M = 0.5 * rng.normal(size=(m, m))
    h0 = rng.normal(size=m)
    n = 20
    P1, p1, P2, p2 = _linear_processor(M, 1.0 / n)
    H, _, _ = be.rk4_rollout(h0, P1, p1, P2, p2, n, float(n))
    for t in (5, 20):
        assert np.allclose(H[t], h0 @ expm(M * t / n), atol=1e-8)


@pytest.mark.parametrize("be", BACKENDS, ids=backend_ids)
def test_rk4_global_error_is_fourth_order(be, rng):
    m = 3
    M = rng.normal(size=(m, m))
    h0 = rng.normal(size=m)
    exact = h0 @ expm(M)
    errs = []
    for n in (4, 8, 16):
        P1, p1, P2, p2 = _linear_processor(M, 1.0 / n)
        H, _, _ = be.rk4_rollout(h0, P1, p1, P2, p2, n, float(n))
        errs.append(np.linalg.norm(H[-1] - exact))
    for a, b in zip(errs, errs[1:]):
        assert 12 < a / b < 20


@pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled extension not built")
def test_backends_agree(rng):
    m, q, n = 6, 6, 15
    h0 = rng.normal(size=m)
    P1, p1 = rng.normal(size=(m + 1, q)), rng.normal(size=q)
    P2, p2 = 0.1 * rng.normal(size=(q, m)), 0.1 * rng.normal(size=m)
    py, cy = kernels.python_backend, kernels.compiled_backend
    Hp, Yp, Ap = py.rk4_rollout(h0, P1, p1, P2, p2, n, float(n))
    Hc, Yc, Ac = cy.rk4_rollout(h0, P1, p1, P2, p2, n, float(n))
    assert np.allclose(Hp, Hc, atol=1e-12) and np.allclose(Ap, Ac, atol=1e-12)
    G = rng.normal(size=Hp.shape)
    for a, b in zip(py.rk4_rollout_vjp(G, P1, p1, P2, p2, Yp, Ap, float(n)),
                    cy.rk4_rollout_vjp(G, P1, p1, P2, p2, Yc, Ac, float(n))):
        assert np.allclose(a, b, atol=1e-11)


def _direct_mse(panel, W, A):
    V = panel.values
    L = A.shape[0]
    res = V[:, L:] - np.einsum("ntd,tde->nte", V[:, L:], W[L:])
    for tau in range(1, L + 1):
        res -= V[:, L - tau:V.shape[1] - tau] @ A[tau - 1]
    return float(np.mean(res**2))


def _constant_theta(layout, W, A):
    th = ThetaParams(layout, np.zeros(layout.size))
    th["dec_b"][...] = W.ravel()
    th["A"][...] = A
    return th


def test_loss_at_true_parameters_matches_direct_residuals():
    spec = small_spec(seed=2, dynamics="constant", n_k=500, sparsity=0.0, lag_sparsity=0.0,
                      K=1, edges=((0, 1, 0.5), (1, 2, -0.4)), lag_edges=((1, 2, 0, 0.3),))
    panels, truth = generate(spec)
    D, T = spec.D, spec.T
    pr = PriorSet.full(T, D, 1)
    th = _constant_theta(ThetaLayout(D, 1, 4), truth.W_true[0], truth.A_true)
    _, comps = loss(th, pr, panels[0], Penalties(0, 0, 0))
    direct = _direct_mse(panels[0], truth.W_true, truth.A_true)
    assert comps["mse"] == pytest.approx(direct, rel=1e-10)
    assert comps["mse"] == pytest.approx(spec.noise_std**2, rel=0.1)
    assert comps["dag"] == 0


def test_zero_model_loss_is_mean_square(small_data):
    spec, panels, _ = small_data
    th = ThetaParams(ThetaLayout(3, 1, 4), np.zeros(ThetaLayout(3, 1, 4).size))
    data = ClientData.from_panel(panels[0], 1)
    _, comps = loss(th, PriorSet.full(spec.T, 3, 1), data)
    expected = float(np.mean(panels[0].values[:, 1:] ** 2))
    assert comps["mse"] == pytest.approx(expected, rel=1e-12)
    assert data.zero_model_mse() == pytest.approx(expected, rel=1e-12)


def test_hard_masks_block_gradient(rng):
    _, pr, th, data = _setup(4)
    g = th.layout.unpack(gradient(th, pr, data))
    # decoder bias feeds W_raw(t) for every t, so only entries masked at all t are zero
    never = ~pr.S.any(axis=0)
    assert np.all(g["dec_b"].reshape(3, 3)[never] == 0)
    assert np.all(g["A"][~pr.S_A] == 0)
    out = forward(th, pr, data)
    assert np.all(out.W_eff[~pr.S] == 0) and np.all(out.A_eff[~pr.S_A] == 0)


def test_local_train_contract():
    _, pr, th, data = _setup(0)
    same = local_train(th, pr, data, 3, 0.0)
    assert np.array_equal(same.flat, th.flat)
    with pytest.raises(ValueError):
        local_train(th, pr, data, 0, 0.1)
    with pytest.raises(ValueError):
        local_train(th, pr, data, 1, -0.1)
    hist: list = []
    new = local_train(th, pr, data, 5, 0.05, history=hist)
    assert len(hist) == 5 and not np.array_equal(new.flat, th.flat)
    assert loss(new, pr, data)[0] < hist[0]["total"]


def test_non_finite_trajectory_raises():
    _, pr, th, data = _setup(0)
    th["enc_b2"][0] = np.nan
    with pytest.raises(DivergenceError):
        loss(th, pr, data)
    with pytest.raises(DivergenceError) as info:
        local_train(th, pr, data, 2, 0.1)
    assert info.value.where == 0


def test_shape_mismatch_is_rejected(small_data):
    spec, panels, _ = small_data
    th = ThetaParams.init(ThetaLayout(3, 1, 4))
    with pytest.raises(ValueError):
        loss(th, PriorSet.full(spec.T + 1, 3, 1), panels[0])
    with pytest.raises(ValueError):
        ThetaParams(ThetaLayout(3, 1, 4), np.zeros(5))


def test_layout_views_write_through():
    lay = ThetaLayout(3, 2, 5, w_enc=4)
    assert lay.window == 4
    assert lay.size == sum(int(np.prod(s)) for _, s in lay.shapes)
    th = ThetaParams(lay, np.zeros(lay.size))
    th["A"][1, 0, 2] = 7.0
    assert th.flat[lay.offsets()["A"]].reshape(2, 3, 3)[1, 0, 2] == 7.0


def test_checkpoint_round_trip(tmp_path):
    th = ThetaParams.init(ThetaLayout(4, 2, 6), seed=3)
    th.save(tmp_path / "c.ddck", {"round": 7})
    back, meta = ThetaParams.load(tmp_path / "c.ddck")
    assert back.layout == th.layout and np.array_equal(back.flat, th.flat)
    assert meta["round"] == 7


def test_initialization_is_seeded_and_near_empty():
    lay = ThetaLayout(4, 1, 8)
    a, b = ThetaParams.init(lay, 1), ThetaParams.init(lay, 1)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, ThetaParams.init(lay, 2).flat)
    assert np.abs(a["dec_W"]).max() < 0.1 * np.abs(a["proc_W2"]).max() + 1e-12
    assert not a["A"].any() and not a["dec_b"].any()
