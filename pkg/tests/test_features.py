import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyncausal.features import (StatPacket, make_rff, moment_summary, null_slice_stats,
                                pool_standardizer, rff_map, sampled_times, time_slice_stats)
from dyncausal.synth import TimeSeriesPanel


def test_rff_is_deterministic_per_seed():
    a, b, c = make_rff(16, 1.0, 3), make_rff(16, 1.0, 3), make_rff(16, 1.0, 4)
    assert np.array_equal(a.frequencies, b.frequencies) and np.array_equal(a.phases, b.phases)
    assert not np.array_equal(a.frequencies, c.frequencies)
    assert a.frequencies.shape == (16, 1) and a.phases.shape == (16,)
    assert ((a.phases >= 0) & (a.phases < 2 * np.pi)).all()


@pytest.mark.parametrize("h,sigma", [(1, 1.0), (8, 0.0), (8, -1.0)])
def test_rff_rejects_bad_parameters(h, sigma):
    with pytest.raises(ValueError):
        make_rff(h, sigma)


def test_rff_map_rejects_non_finite():
    with pytest.raises(ValueError):
        rff_map(float("nan"), make_rff(4))


def test_rff_map_formula():
    p = make_rff(6, 2.0, 1)
    x = 0.7
    expected = np.sqrt(2 / 6) * np.cos(p.frequencies[:, 0] * x + p.phases)
    assert np.allclose(rff_map(x, p), expected, atol=0, rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-3, 3), y=st.floats(-3, 3), sigma=st.floats(0.5, 3.0))
def test_rff_inner_product_approximates_gaussian_kernel(x, y, sigma):
    p = make_rff(20000, sigma, 0)
    approx = float(rff_map(x, p) @ rff_map(y, p))
    exact = np.exp(-(x - y) ** 2 / (2 * sigma**2))
    assert approx == pytest.approx(exact, abs=0.04)


def test_sampled_times():
    assert sampled_times(10, 2, 3) == [2, 5, 8]
    assert sampled_times(5, 0, 1) == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        sampled_times(5, 0, 0)


def _panel(rng, n=40, T=6, D=3):
    return TimeSeriesPanel(0, rng.normal(size=(n, T, D)))


def test_slice_moments_match_direct_computation(rng):
    panel = _panel(rng)
    p = make_rff(5, 1.0, 2)
    pk = time_slice_stats(panel, 3, 1, p)
    x = np.concatenate([panel.values[:, 3], panel.values[:, 2]], axis=1)   # [n, 6]
    F = p(x)                                                               # [n, 6, h]
    assert np.allclose(pk.mean, F.mean(0))
    assert np.allclose(pk.second[1, 4], F[:, 1].T @ F[:, 4] / panel.n)
    assert np.allclose(pk.lag_moment[0, 2, 0], F[:, 5].T @ F[:, 0] / panel.n)
    assert np.allclose(pk.omega, panel.values[:, 3].var(0, ddof=1))


def test_packet_invariants(rng):
    pk = time_slice_stats(_panel(rng), 2, 2, make_rff(8, 1.0))
    V = pk.second.shape[0]
    for i in range(V):
        c = pk.second[i, i] - np.outer(pk.mean[i], pk.mean[i])
        assert np.allclose(c, c.T)
        assert np.linalg.eigvalsh(c).min() > -1e-12
        for j in range(V):
            assert np.allclose(pk.second[i, j], pk.second[j, i].T)
    assert pk.lag_moment.shape == (2, 3, 3, 8, 8)
    assert pk.lag_moment_2.shape == (2, 2, 3, 3, 8, 8)


def test_packet_bytes_round_trip(rng):
    pk = time_slice_stats(_panel(rng), 3, 1, make_rff(4))
    back = StatPacket.from_bytes(pk.to_bytes())
    assert back.t == pk.t and back.n == pk.n and back.rff_seed == pk.rff_seed
    assert np.array_equal(back.second, pk.second)


def test_slice_needs_full_lag_window(rng):
    with pytest.raises(ValueError):
        time_slice_stats(_panel(rng), 0, 1, make_rff(4))


def test_identity_permutation_gives_real_statistics(rng):
    panel = _panel(rng)
    p = make_rff(4)
    ident = np.tile(np.arange(panel.n), (6, 1))
    a = null_slice_stats(panel, 3, 1, p, permutations=ident)
    b = time_slice_stats(panel, 3, 1, p)
    assert np.allclose(a.second, b.second)


def test_shuffling_keeps_marginals(rng):
    panel = _panel(rng)
    p = make_rff(4)
    a = null_slice_stats(panel, 3, 1, p, rng=rng)
    b = time_slice_stats(panel, 3, 1, p)
    assert np.allclose(a.mean, b.mean)
    with pytest.raises(ValueError):
        null_slice_stats(panel, 3, 1, p, permutations=np.zeros((2, panel.n), dtype=int))


def test_pooled_standardizer_matches_whole_data(rng):
    panels = [TimeSeriesPanel(k, rng.normal(k, 1 + k, size=(20 + 5 * k, 6, 2)))
              for k in range(3)]
    std = pool_standardizer([moment_summary(p, 1) for p in panels])
    allv = np.concatenate([p.values[:, 1:].reshape(-1, 2) for p in panels])
    assert np.allclose(std.mean, allv.mean(0), rtol=1e-12)
    assert np.allclose(std.std, allv.std(0), rtol=1e-10)


def test_packet_size_does_not_depend_on_sample_count(rng):
    p = make_rff(4)
    small = time_slice_stats(_panel(rng, n=10), 3, 1, p).to_bytes()
    big = time_slice_stats(_panel(rng, n=1000), 3, 1, p).to_bytes()
    assert abs(len(small) - len(big)) <= 4      # only the count's digits may differ
