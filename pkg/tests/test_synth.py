import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_spec
from dyncausal.io import FormatError
from dyncausal.synth import (ConfoundedEdge, GroundTruth, InconsistentEdge, NoiseBurst,
                             ScenarioError, ScenarioSpec, confounder_terms, export_csv,
                             generate, oracle_masks, read_dataset, write_dataset)


def test_two_client_confounder_terms():
    # loadings (0.2, 0.4), a = +-0.1, offsets b = +-0.2 on the first endpoint
    spec = ScenarioSpec(D=3, T=4, L=1, K=2, n_k=5, sparsity=0.0,
                        confounded_edges=(ConfoundedEdge(1, 2, (0.1, -0.1), (0.2, 0.4)),),
                        client_offsets=((0, 1, 0.2), (1, 1, -0.2)))
    U = confounder_terms(spec)
    assert U[0, 0, 1] == pytest.approx(0.22)
    assert U[1, 0, 1] == pytest.approx(-0.22)
    assert U[0, 0, 2] == pytest.approx(0.04)


def test_empty_graph_is_pure_noise():
    spec = ScenarioSpec(D=4, T=10, L=2, K=2, n_k=50, sparsity=0.0, lag_sparsity=0.0)
    panels, truth = generate(spec)
    assert not truth.W_true.any() and not truth.A_true.any()
    # no edge and no dependence path anywhere: every pair is a removal
    assert not truth.oracle_S.any()
    assert not truth.oracle_L.any() and not truth.oracle_S_A.any()
    # after warm-up every value is a fresh noise draw
    v = panels[0].values[:, 2:]
    assert v.std() == pytest.approx(spec.noise_std, rel=0.1)


def test_confounded_pair_is_removed_in_oracle():
    spec = ScenarioSpec(D=3, T=6, L=1, K=2, n_k=5, sparsity=0.0,
                        confounded_edges=(ConfoundedEdge(1, 2, (0.5, -0.5)),))
    S, Lm, _, _ = oracle_masks(spec)
    assert not S[:, 1, 2].any() and not S[:, 2, 1].any()
    assert not Lm.any()


def test_inconsistent_edge_is_kept_and_flagged():
    spec = ScenarioSpec(D=3, T=6, L=1, K=3, n_k=5, sparsity=0.0,
                        inconsistent_edges=(InconsistentEdge(0, 2, (1,)),))
    S, Lm, _, _ = oracle_masks(spec)
    assert S[:, 0, 2].all() and Lm[:, 0, 2].all()
    assert Lm.sum() == 2 * spec.T


def test_moral_pairs_stay_in_oracle():
    # 0 -> 2 <- 1: conditioning on the child makes 0 and 1 dependent
    spec = ScenarioSpec(D=3, T=5, L=1, K=1, n_k=5, sparsity=0.0, dynamics="constant",
                        edges=((0, 2, 0.5), (1, 2, 0.5)))
    S, _, _, _ = oracle_masks(spec)
    assert S[:, 0, 1].all()


def test_lag_moral_pairs_stay_in_oracle():
    # V_0^{t-1} -> V_2^t <- V_1^t
    spec = ScenarioSpec(D=3, T=5, L=1, K=1, n_k=5, sparsity=0.0, lag_sparsity=0.0,
                        dynamics="constant", edges=((1, 2, 0.5),), lag_edges=((1, 0, 2, 0.3),))
    _, _, SA, _ = oracle_masks(spec)
    assert SA[0, 0, 2] and SA[0, 0, 1]
    assert SA.sum() == 2


def test_determinism():
    spec = small_spec(seed=3)
    p1, t1 = generate(spec)
    p2, t2 = generate(spec)
    for a, b in zip(p1, p2):
        assert np.array_equal(a.values, b.values)
    assert np.array_equal(t1.W_true, t2.W_true)


def test_sample_seed_redraws_noise_only():
    spec = small_spec(seed=3)
    p1, t1 = generate(spec)
    p2, t2 = generate(spec, sample_seed=7)
    assert np.array_equal(t1.W_true, t2.W_true)
    assert not np.array_equal(p1[0].values, p2[0].values)


def test_lag_structure_is_independent_of_length():
    spec = small_spec(seed=5)
    _, t1 = generate(spec)
    _, t2 = generate(replace(spec, T=2 * spec.T))
    assert np.array_equal(t1.A_true, t2.A_true)


def test_sinusoid_support_is_constant():
    _, truth = generate(small_spec(seed=1, sparsity=0.0, D=4, T=30,
                                   edges=((0, 1, 0.5), (1, 2, -0.4), (0, 3, 0.6))))
    support = truth.W_true != 0
    assert (support == support[0]).all()
    varying = truth.W_true[:, support[0]]
    assert np.ptp(varying, axis=0).min() > 0


def test_confounder_sign_flip():
    base = dict(D=3, T=8, L=1, K=2, n_k=400, sparsity=0.0, seed=2)
    a = ScenarioSpec(confounded_edges=(ConfoundedEdge(0, 1, (0.4, -0.6)),), **base)
    b = ScenarioSpec(confounded_edges=(ConfoundedEdge(0, 1, (-0.4, 0.6)),), **base)
    assert np.array_equal(confounder_terms(a), -confounder_terms(b))
    pa, _ = generate(a)
    pb, _ = generate(b)
    for x, y in zip(pa, pb):
        ca = np.cov(x.values[:, 4, 0], x.values[:, 4, 1])[0, 1]
        cb = np.cov(y.values[:, 4, 0], y.values[:, 4, 1])[0, 1]
        assert abs(ca) == pytest.approx(abs(cb))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), D=st.integers(2, 6), sparsity=st.floats(0, 1))
def test_ground_truth_is_acyclic_at_every_step(seed, D, sparsity):
    spec = ScenarioSpec(D=D, T=8, L=1, K=1, n_k=3, sparsity=sparsity, seed=seed)
    try:
        _, truth = generate(spec)
    except ScenarioError:
        return  # divergence guard
    assert not np.tril(truth.W_true != 0).any()


def test_noise_burst_raises_variance_inside_window():
    spec = small_spec(seed=0, sparsity=0.0, lag_sparsity=0.0, n_k=400,
                      noise_burst=NoiseBurst(1, 5, 8, 1.0))
    panels, _ = generate(spec)
    v = panels[1].values
    assert v[:, 5:8].std() > 5 * v[:, 2:5].std()
    assert panels[0].values[:, 5:8].std() < 0.2


@pytest.mark.parametrize("kw", [
    dict(D=1), dict(n_k=1), dict(sparsity=1.5), dict(dynamics="bogus"),
    dict(edges=((0, 0, 0.3),)), dict(edges=((0, 1, 0.3), (1, 0, 0.3))),
    dict(confounded_edges=(ConfoundedEdge(0, 1, (0.1,)),)),
    dict(inconsistent_edges=(InconsistentEdge(0, 1, (5,)),)),
])
def test_invalid_specs_are_rejected(kw):
    with pytest.raises(ScenarioError):
        small_spec(**kw)


def test_divergent_lags_are_rejected():
    spec = ScenarioSpec(D=2, T=6, L=1, K=1, n_k=3, sparsity=0.0, lag_sparsity=0.0,
                        lag_edges=((1, 0, 0, 0.9), (1, 0, 1, 0.9), (1, 1, 0, 0.9)))
    with pytest.raises(ScenarioError):
        generate(spec)


def test_spec_dict_round_trip():
    spec = small_spec(confounded_edges=(ConfoundedEdge(0, 1, (0.2, 0.1), window=(2, 5)),),
                      inconsistent_edges=(InconsistentEdge(1, 2, (0,)),),
                      noise_burst=NoiseBurst(0, 1, 3, 0.5), n_k=(10, 20))
    assert ScenarioSpec.from_dict(spec.to_dict()) == spec


def test_dataset_round_trip(tmp_path, small_data):
    spec, panels, truth = small_data
    path = write_dataset(tmp_path / "d.ddic", panels, spec.L, spec)
    back, L = read_dataset(path)
    assert L == spec.L
    for a, b in zip(panels, back):
        assert np.array_equal(a.values, b.values)
    truth.save(tmp_path / "t.ddgt")
    t2 = GroundTruth.load(tmp_path / "t.ddgt")
    assert np.array_equal(t2.oracle_S, truth.oracle_S)
    assert t2.oracle_S.dtype == bool


def test_truncated_dataset_is_a_format_error(tmp_path, small_data):
    spec, panels, _ = small_data
    path = write_dataset(tmp_path / "d.ddic", panels, spec.L)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_dataset(path)
    path.write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(FormatError):
        read_dataset(path)


def test_csv_export(tmp_path, small_data):
    _, panels, _ = small_data
    files = export_csv(tmp_path, panels)
    with files[1].open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sample", "t", "V1", "V2", "V3"]
    assert len(rows) == 1 + panels[1].n * panels[1].T
    assert float(rows[1 + 3][2]) == panels[1].values[0, 3, 0]
