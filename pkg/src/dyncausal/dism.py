"""Server-side skeleton mining from pooled feature moments.

The server never sees raw samples. From per-client :class:`StatPacket`
uploads it builds pooled moments per sampled slice, runs a kernel
conditional-independence statistic on feature cross-covariances, and turns
test outcomes into hard masks (edges removed everywhere) and soft masks
(edges kept but flagged as spatially inconsistent).

Conditioning on the client surrogate ``U`` defaults to the *stratified*
form: the delta kernel on ``U`` multiplies the feature kernel of the
conditioning set, which amounts to regressing within each client and pooling
the residual cross-covariances with weights ``n_k / N``. The purely additive
one-hot block is available as ``surrogate="additive"``.

Each contemporaneous pair is tested given the other contemporaneous
variables and all lagged ones; each lagged pair given everything else.
Residuals are formed per (slice, client) cell, so the contemporaneous test
at one sampled time can pool the cells of neighbouring sampled times
(``DismConfig.window``) and the static lag test pools all of them, without
a drifting relation looking like dependence. Thresholds come from a
permutation null pushed through the same pipeline.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lapack

from dyncausal.features import (RFFParams, Standardizer, StatPacket, make_rff, moment_summary,
                                null_slice_stats, pool_standardizer, sampled_times,
                                time_slice_stats)
from dyncausal.io import load_bundle, save_bundle
from dyncausal.synth import TimeSeriesPanel

log = logging.getLogger(__name__)

PRIOR_MAGIC = b"DDPR"
SURROGATES = (None, "additive", "stratified")
_RIDGE_FLOOR = 1e-12


class DegenerateFeaturesError(ArithmeticError):
    """The regularized conditioning covariance could not be factorized."""


class AggregationError(ValueError):
    pass


# ---------------------------------------------------------------- aggregation

@dataclass
class GlobalMoments:
    """Per-client uncentered moments kept side by side, with pooled views.

    ``means`` is [K, V, h] and ``seconds`` is [K, V, V, h, h]; ``counts`` are
    the sample sizes that weight each client in the pooled moments.
    """

    counts: np.ndarray
    means: np.ndarray
    seconds: np.ndarray
    D: int
    t: int | None = None

    @property
    def K(self) -> int:
        return len(self.counts)

    @property
    def n(self) -> float:
        return float(self.counts.sum())

    @property
    def weights(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def mean(self) -> np.ndarray:
        return np.tensordot(self.weights, self.means, axes=1)

    @property
    def second(self) -> np.ndarray:
        return np.tensordot(self.weights, self.seconds, axes=1)

    def covariance(self) -> np.ndarray:
        """Pooled centered covariance tensor [V, V, h, h]."""
        m = self.mean
        return self.second - np.einsum("ah,bg->abhg", m, m)

    def client_covariance(self, k: int) -> np.ndarray:
        m = self.means[k]
        return self.seconds[k] - np.einsum("ah,bg->abhg", m, m)


def aggregate_moments(packets: Sequence[StatPacket]) -> GlobalMoments:
    """Stack the packets of one sampled slice into pooled moments."""
    if not packets:
        raise AggregationError("no packets to aggregate")
    p0 = packets[0]
    for p in packets:
        if p.t != p0.t:
            raise AggregationError(f"mixed slices {p0.t} and {p.t}")
        if p.rff_seed != p0.rff_seed or p.second.shape != p0.second.shape:
            raise AggregationError("packets use different feature maps")
    return GlobalMoments(np.array([p.n for p in packets], dtype=float),
                         np.stack([p.mean for p in packets]),
                         np.stack([p.second for p in packets]), p0.D, p0.t)


def pool_over_time(packets: Iterable[StatPacket]) -> GlobalMoments:
    """Pool each client's packets across slices (n-weighted), one group per client."""
    by_client: dict[int, list[StatPacket]] = {}
    for p in packets:
        by_client.setdefault(p.client_id, []).append(p)
    if not by_client:
        raise AggregationError("no valid sampled slices")
    seeds = {p.rff_seed for ps in by_client.values() for p in ps}
    if len(seeds) != 1:
        raise AggregationError("packets use different feature maps")
    counts, means, seconds = [], [], []
    for cid in sorted(by_client):
        ps = by_client[cid]
        n = np.array([p.n for p in ps], dtype=float)
        w = n / n.sum()
        counts.append(n.sum())
        means.append(np.tensordot(w, np.stack([p.mean for p in ps]), axes=1))
        seconds.append(np.tensordot(w, np.stack([p.second for p in ps]), axes=1))
    return GlobalMoments(np.array(counts), np.stack(means), np.stack(seconds),
                         next(iter(by_client.values()))[0].D, None)


# ---------------------------------------------------------------- statistic

def _blocks(cov: np.ndarray, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
    h = cov.shape[-1]
    sub = cov[np.ix_(rows, cols)]
    return sub.transpose(0, 2, 1, 3).reshape(len(rows) * h, len(cols) * h)


def _ridge(trace: float, dim: int, ridge_scale: float) -> float:
    return max(ridge_scale * trace / dim, _RIDGE_FLOOR)


def _cholesky(M: np.ndarray):
    try:
        return cho_factor(M, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise DegenerateFeaturesError(f"conditioning covariance not factorizable: {exc}")


def _schur(Cxx: np.ndarray, Cxz: np.ndarray, Czz: np.ndarray, ridge_scale: float
           ) -> np.ndarray:
    # C_xx - C_xZ (C_ZZ + eps I)^-1 C_Zx; eps is relative to the mean diagonal of
    # the joint (x, Z) covariance
    dim = Czz.shape[0]
    if dim == 0:
        return Cxx
    eps = _ridge(np.trace(Czz) + np.trace(Cxx), dim + Cxx.shape[0], ridge_scale)
    factor = _cholesky(Czz + eps * np.eye(dim))
    return Cxx - Cxz @ cho_solve(factor, Cxz.T)


def _complement_blocks(cov: np.ndarray, pairs: Sequence[tuple[int, int]], ridge_scale: float
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residuals of each pair given every other variable, from one inverse.

    With ``M = C + eps I`` and ``P = M^-1`` the Schur complement of a pair
    block is ``inv(P_XX)``, so ``C_XX|Z = inv(P_XX) - eps I``; this equals
    :func:`_schur` with ``Z`` the complement of the pair. ``inv(P_XX)`` is
    expanded blockwise so only [h, h] inverses are needed.

    Returns the cross blocks [n_pairs, h, h] and the traces of both
    conditional auto-covariances [n_pairs].
    """
    V, h = cov.shape[0], cov.shape[-1]
    full = cov.transpose(0, 2, 1, 3).reshape(V * h, V * h)
    eps = _ridge(np.trace(full), V * h, ridge_scale)
    c, info = lapack.dpotrf(full + eps * np.eye(V * h), lower=1)
    if info == 0:
        P, info = lapack.dpotri(c, lower=1)
    if info != 0 or not np.all(np.isfinite(c)):
        raise DegenerateFeaturesError("conditioning covariance not factorizable")
    P = np.tril(P) + np.tril(P, -1).T
    Pb = P.reshape(V, h, V, h)
    I, J = np.asarray(pairs, dtype=int).reshape(-1, 2).T
    diag = Pb[np.arange(V), :, np.arange(V), :]                    # [V, h, h]
    Q = np.linalg.inv(diag)
    Pij = Pb[I, :, J, :]                                           # [n, h, h]
    G = Q[I] @ Pij
    Sinv = np.linalg.inv(diag[J] - Pij.transpose(0, 2, 1) @ G)
    GS = G @ Sinv
    tr_i = np.einsum("nii->n", Q[I]) + np.einsum("nab,nab->n", GS, G) - h * eps
    tr_j = np.einsum("nii->n", Sinv) - h * eps
    return -GS, tr_i, tr_j


def _complement_residuals(cov: np.ndarray, pairs: Sequence[tuple[int, int]],
                          ridge_scale: float) -> list["_Residual"]:
    if not pairs:
        return []
    cross, tr_i, tr_j = _complement_blocks(cov, pairs, ridge_scale)
    return [_Residual(cross[p], float(tr_i[p]), float(tr_j[p])) for p in range(len(pairs))]


def _statistic(cross: np.ndarray, var_i: np.ndarray, var_j: np.ndarray, n,
               normalize: bool) -> np.ndarray:
    # vectorized _Residual.statistic over leading axes
    s = n * np.sum(cross * cross, axis=(-2, -1))
    if not normalize:
        return s
    denom = var_i * var_j
    return np.where(denom > _RIDGE_FLOOR, s / np.where(denom > _RIDGE_FLOOR, denom, 1.0), 0.0)


@dataclass
class _Residual:
    """Conditional covariance blocks of one tested pair."""

    cross: np.ndarray     # [h, h]
    var_i: float          # trace of the conditional auto-covariance of i
    var_j: float

    def __add__(self, other: "_Residual") -> "_Residual":
        return _Residual(self.cross + other.cross, self.var_i + other.var_i,
                         self.var_j + other.var_j)

    def __rmul__(self, w: float) -> "_Residual":
        return _Residual(w * self.cross, w * self.var_i, w * self.var_j)

    def statistic(self, n: float, normalize: bool) -> float:
        s = n * float(np.sum(self.cross * self.cross))
        if not normalize:
            return s
        denom = self.var_i * self.var_j
        return s / denom if denom > _RIDGE_FLOOR else 0.0


def _pair_residual(cov: np.ndarray, i: int, j: int, Z: Sequence[int], ridge_scale: float
                   ) -> _Residual:
    h = cov.shape[-1]
    X, Z = [i, j], list(Z)
    R = _schur(_blocks(cov, X, X), _blocks(cov, X, Z), _blocks(cov, Z, Z), ridge_scale)
    return _Residual(R[:h, h:], float(np.trace(R[:h, :h])), float(np.trace(R[h:, h:])))


def conditional_cross_covariance(cov: np.ndarray, i: int, j: int, Z: Sequence[int],
                                 ridge_scale: float = 1e-3) -> np.ndarray:
    """Residual ``C_ij - C_iZ (C_ZZ + eps I)^-1 C_Zj`` from a centered tensor."""
    if not list(Z):
        return cov[i, j]
    return _pair_residual(cov, i, j, Z, ridge_scale).cross


def _additive_residual(C: GlobalMoments, i: int, j: int, Z: Sequence[int],
                       ridge_scale: float) -> _Residual:
    # one-hot client indicators appended to the conditioning block
    cov = C.covariance()
    p = C.weights
    dm = C.means - C.mean[None]                      # [K, V, h]
    h = cov.shape[-1]
    X, Z = [i, j], list(Z)
    cross_u = lambda idx: (p[:, None, None] * dm[:, idx]).transpose(1, 2, 0).reshape(  # noqa: E731
        len(idx) * h, -1)
    Cuu = np.diag(p) - np.outer(p, p)
    Czz = np.block([[_blocks(cov, Z, Z), cross_u(Z)], [cross_u(Z).T, Cuu]]) if Z else Cuu
    Cxz = np.hstack([_blocks(cov, X, Z), cross_u(X)]) if Z else cross_u(X)
    R = _schur(_blocks(cov, X, X), Cxz, Czz, ridge_scale)
    return _Residual(R[:h, h:], float(np.trace(R[:h, :h])), float(np.trace(R[h:, h:])))


def _check_pair(i: int, j: int, Z: Sequence[int]) -> None:
    if i == j:
        raise ValueError("test needs two distinct variables")
    if i in Z or j in Z:
        raise ValueError("tested variables may not appear in the conditioning set")


def _pooled_residual(C: GlobalMoments, i: int, j: int, Z: Sequence[int], ridge_scale: float,
                     surrogate: str | None) -> _Residual:
    if surrogate is None:
        return _pair_residual(C.covariance(), i, j, Z, ridge_scale)
    if surrogate == "additive":
        return _additive_residual(C, i, j, Z, ridge_scale)
    if surrogate == "stratified":
        res = [_pair_residual(C.client_covariance(k), i, j, Z, ridge_scale)
               for k in range(C.K)]
        return _weighted_sum(res, C.weights)
    raise ValueError(f"unknown surrogate policy {surrogate!r}")


def fcit_statistic(C: GlobalMoments, i: int, j: int, Z: Sequence[int] = (),
                   ridge_scale: float = 1e-3, surrogate: str | None = None,
                   normalize: bool = True) -> float:
    """Pooled statistic ``n * ||C_{ij|Z}||_F^2``.

    With ``normalize`` (the default) it is divided by the product of the
    traces of the conditional auto-covariances ``C_{ii|Z}`` and
    ``C_{jj|Z}``, which puts it near 1 under independence whatever the
    conditioning removed. With ``surrogate=None`` and empty ``Z`` it is the
    unconditional HSIC-style statistic on the pooled centered covariance.
    """
    _check_pair(i, j, Z)
    return _pooled_residual(C, i, j, Z, ridge_scale, surrogate).statistic(C.n, normalize)


def local_statistic(C: GlobalMoments, k: int, i: int, j: int, Z: Sequence[int] = (),
                    ridge_scale: float = 1e-3, normalize: bool = True) -> float:
    """Same statistic on client ``k``'s own moments and sample size."""
    _check_pair(i, j, Z)
    r = _pair_residual(C.client_covariance(k), i, j, Z, ridge_scale)
    return r.statistic(C.counts[k], normalize)


def _contemp_sets(D: int, V: int | None = None) -> list[tuple[int, int, list[int]]]:
    # Z: the other contemporaneous variables, then every lagged one (indices D..V-1)
    V = D if V is None else V
    return [(i, j, [z for z in range(V) if z not in (i, j)])
            for i in range(D) for j in range(i + 1, D)]


def _all_statistics(strata: Sequence[GlobalMoments], sets, ridge_scale: float,
                    surrogate: str | None, normalize: bool, cells=None
                    ) -> tuple[list[float], np.ndarray]:
    """Pooled and [K, n_sets] local statistics over one or more strata.

    Each stratum (typically one sampled slice) holds the same clients in
    the same order. Residuals are formed inside every (stratum, client) cell
    and averaged with sample-count weights, so a relation that drifts across
    strata does not show up as dependence. ``cells[u][k][s]`` may supply
    precomputed residuals for set ``s``.
    """
    counts = np.stack([C.counts for C in strata])          # [n_strata, K]
    n_client = counts.sum(axis=0)
    N = float(n_client.sum())
    K = counts.shape[1]
    if cells is None:
        V = strata[0].means.shape[1]
        if all(len(Z) == V - 2 for _, _, Z in sets):
            # every test conditions on all remaining variables: one inverse per cell
            pairs = [(i, j) for i, j, _ in sets]
            cells = [[_complement_residuals(C.client_covariance(k), pairs, ridge_scale)
                      for k in range(K)] for C in strata]
        else:
            cells = [[[_pair_residual(C.client_covariance(k), i, j, Z, ridge_scale)
                       for i, j, Z in sets] for k in range(K)] for C in strata]
    pooled, local = [], np.zeros((K, len(sets)))
    for s, (i, j, Z) in enumerate(sets):
        for k in range(K):
            r = _weighted_sum([cells[u][k][s] for u in range(len(strata))],
                              counts[:, k] / n_client[k])
            local[k, s] = r.statistic(n_client[k], normalize)
        if surrogate == "stratified":
            r = _weighted_sum([cells[u][k][s] for u in range(len(strata)) for k in range(K)],
                              counts.ravel() / N)
        else:
            r = _weighted_sum([_pooled_residual(C, i, j, Z, ridge_scale, surrogate)
                               for C in strata], counts.sum(axis=1) / N)
        pooled.append(r.statistic(N, normalize))
    return pooled, local


def _weighted_sum(res: Sequence[_Residual], w: np.ndarray) -> _Residual:
    out = w[0] * res[0]
    for wk, r in zip(w[1:], res[1:]):
        out = out + wk * r
    return out


def pair_statistics(C: GlobalMoments, ridge_scale: float = 1e-3,
                    surrogate: str | None = "stratified", normalize: bool = True
                    ) -> np.ndarray:
    """Symmetric [D, D] matrix of pooled statistics.

    Each pair is conditioned on every other contemporaneous variable, every
    lagged variable carried by the packets, and the surrogate.
    """
    return contemporaneous_statistics(C, ridge_scale, surrogate, normalize)[0]


def local_pair_statistics(C: GlobalMoments, ridge_scale: float = 1e-3,
                          normalize: bool = True) -> np.ndarray:
    """[K, D, D] client-local statistics under the same conditioning policy."""
    return contemporaneous_statistics(C, ridge_scale, None, normalize)[1]


def contemporaneous_statistics(C: GlobalMoments, ridge_scale: float = 1e-3,
                               surrogate: str | None = "stratified", normalize: bool = True
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Pooled [D, D] and client-local [K, D, D] statistics in one pass."""
    D = C.D
    sets = _contemp_sets(D, C.means.shape[1])
    pooled_v, local_v = _all_statistics([C], sets, ridge_scale, surrogate, normalize)
    pooled = np.zeros((D, D))
    local = np.zeros((C.K, D, D))
    for s, (i, j, _) in enumerate(sets):
        pooled[i, j] = pooled[j, i] = pooled_v[s]
        local[:, i, j] = local[:, j, i] = local_v[:, s]
    return pooled, local


def compute_hard_mask(C: GlobalMoments, delta_hard: float, ridge_scale: float = 1e-3,
                      surrogate: str | None = "stratified",
                      stats: np.ndarray | None = None, normalize: bool = True) -> np.ndarray:
    """``S_ij = 0`` iff the pooled statistic falls below ``delta_hard``."""
    if stats is None:
        stats = pair_statistics(C, ridge_scale, surrogate, normalize)
    S = stats >= delta_hard
    np.fill_diagonal(S, False)
    return S


def local_kci_indicator(packet: StatPacket, i: int, j: int, delta_local: float,
                        ridge_scale: float = 1e-3, normalize: bool = True) -> int:
    """1 when the client's own data shows dependence between ``i`` and ``j``."""
    C = aggregate_moments([packet])
    Z = _contemp_sets(packet.D, C.means.shape[1])
    Z = next(z for a, b, z in Z if (a, b) == (min(i, j), max(i, j)))
    return int(local_statistic(C, 0, i, j, Z, ridge_scale, normalize) >= delta_local)


# ---------------------------------------------------------------- lag tests

def _lag_sets(D: int, L: int) -> list[tuple[int, int, int, int, list[int]]]:
    V = (L + 1) * D
    out = []
    for tau in range(1, L + 1):
        for i in range(D):
            for j in range(D):
                x = tau * D + i
                out.append((tau, i, j, x, [z for z in range(V) if z not in (x, j)]))
    return out


def lag_statistics(C: GlobalMoments | Sequence[GlobalMoments], L: int,
                   ridge_scale: float = 1e-3, surrogate: str | None = "stratified",
                   normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Pooled [L, D, D] and client-local [K, L, D, D] statistics for lagged pairs.

    The test for ``V_i^{t-tau} -> V_j^t`` conditions on every other lagged
    and contemporaneous variable. ``C`` may be a list of per-slice moments,
    in which case residuals are formed per slice and then averaged.
    """
    strata = [C] if isinstance(C, GlobalMoments) else list(C)
    D = strata[0].D
    lag_sets = _lag_sets(D, L)
    pooled_v, local_v = _all_statistics(strata, [(x, j, Z) for _, _, j, x, Z in lag_sets],
                                        ridge_scale, surrogate, normalize)
    pooled = np.zeros((L, D, D))
    local = np.zeros((len(strata[0].counts), L, D, D))
    for s, (tau, i, j, _, _) in enumerate(lag_sets):
        pooled[tau - 1, i, j] = pooled_v[s]
        local[:, tau - 1, i, j] = local_v[:, s]
    return pooled, local


def slice_moments(packets: Iterable[StatPacket]) -> list[GlobalMoments]:
    """Group packets by sampled slice (clients in id order) and aggregate each."""
    by_t: dict[int, list[StatPacket]] = {}
    for p in packets:
        by_t.setdefault(p.t, []).append(p)
    out, ids = [], None
    for t in sorted(by_t):
        ps = sorted(by_t[t], key=lambda p: p.client_id)
        if ids is not None and [p.client_id for p in ps] != ids:
            raise AggregationError(f"slice {t} has a different client set")
        ids = [p.client_id for p in ps]
        out.append(aggregate_moments(ps))
    return out


class SliceStatistics:
    """Residual cache over sampled slices shared by every test family.

    For each (slice, client) cell one factorization yields the conditional
    residuals of all contemporaneous and lag pairs. Contemporaneous
    statistics at sampled time ``t`` pool the cells of every sampled time
    within ``window`` steps of ``t``; lag statistics pool every slice. Cells are combined with
    sample-count weights, locally per client and, under the stratified
    surrogate, across clients for the pooled statistic.
    """

    def __init__(self, strata: Sequence[GlobalMoments], L: int, ridge_scale: float = 1e-3,
                 surrogate: str | None = "stratified", normalize: bool = True,
                 threads: int = 1, times: Sequence[int] | None = None):
        self.strata = list(strata)
        if not self.strata:
            raise AggregationError("no slices to test")
        self.times = np.arange(len(self.strata)) if times is None else np.asarray(times)
        if self.times.shape != (len(self.strata),) or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be increasing, one per stratum")
        self.D, self.L = self.strata[0].D, L
        self.ridge_scale, self.surrogate, self.normalize = ridge_scale, surrogate, normalize
        V = self.strata[0].means.shape[1]
        self.contemp_sets = _contemp_sets(self.D, V)
        self.lag_sets = _lag_sets(self.D, L)
        pairs = ([(i, j) for i, j, _ in self.contemp_sets]
                 + [(x, j) for _, _, j, x, _ in self.lag_sets])
        self.counts = np.stack([C.counts for C in self.strata]).astype(float)   # [S, K]

        def cells(C: GlobalMoments):
            out = [_complement_blocks(C.client_covariance(k), pairs, ridge_scale)
                   for k in range(C.K)]
            return [np.stack(a) for a in zip(*out)]

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                res = list(ex.map(cells, self.strata))
        else:
            res = [cells(C) for C in self.strata]
        # [S, K, P, h, h] cross blocks and [S, K, P] traces
        self.cross, self.var_i, self.var_j = (np.stack(a) for a in zip(*res))
        self._nc = len(self.contemp_sets)

    def __len__(self) -> int:
        return len(self.strata)

    def _combine(self, sl: slice, cols: slice, sets) -> tuple[np.ndarray, np.ndarray]:
        c = self.counts[sl]                                           # [u, K]
        n_client = c.sum(axis=0)
        wk = c / n_client
        cross = self.cross[sl, :, cols]
        vi, vj = self.var_i[sl, :, cols], self.var_j[sl, :, cols]
        local = _statistic(np.einsum("uk,ukpab->kpab", wk, cross),
                           np.einsum("uk,ukp->kp", wk, vi), np.einsum("uk,ukp->kp", wk, vj),
                           n_client[:, None], self.normalize)
        N = c.sum()
        if self.surrogate == "stratified":
            w = c / N
            pooled = _statistic(np.einsum("uk,ukpab->pab", w, cross),
                                np.einsum("uk,ukp->p", w, vi), np.einsum("uk,ukp->p", w, vj),
                                N, self.normalize)
        else:
            strata = self.strata[sl]
            w = c.sum(axis=1) / N
            pooled = np.array([
                _weighted_sum([_pooled_residual(C, i, j, Z, self.ridge_scale, self.surrogate)
                               for C in strata], w).statistic(N, self.normalize)
                for i, j, Z in sets])
        return pooled, local

    def contemporaneous(self, s: int, window: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Pooled [D, D] and local [K, D, D] statistics at the ``s``-th slice,
        pooling slices at most ``window`` time steps away."""
        t = self.times[s]
        lo = int(np.searchsorted(self.times, t - window, side="left"))
        hi = int(np.searchsorted(self.times, t + window, side="right"))
        pooled_v, local_v = self._combine(slice(lo, hi), slice(0, self._nc), self.contemp_sets)
        D, K = self.D, local_v.shape[0]
        pooled, local = np.zeros((D, D)), np.zeros((K, D, D))
        I, J = np.array([(i, j) for i, j, _ in self.contemp_sets]).reshape(-1, 2).T
        pooled[I, J] = pooled[J, I] = pooled_v
        local[:, I, J] = local[:, J, I] = local_v
        return pooled, local

    def lag(self) -> tuple[np.ndarray, np.ndarray]:
        """Pooled [L, D, D] and local [K, L, D, D] lag statistics over all slices."""
        sets = [(x, j, Z) for _, _, j, x, Z in self.lag_sets]
        pooled_v, local_v = self._combine(slice(None), slice(self._nc, None), sets)
        D, L = self.D, self.L
        return pooled_v.reshape(L, D, D), local_v.reshape(-1, L, D, D)


def static_lag_priors(packets: Iterable[StatPacket], L: int, delta_hard: float,
                      delta_local: float, ridge_scale: float = 1e-3,
                      surrogate: str | None = "stratified", normalize: bool = True
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Static hard and soft masks for the lag tensor.

    Residuals are formed per (slice, client) and averaged over all sampled
    slices; per-client indicators average that client's residuals.
    """
    packets = [p for p in packets if p.t >= L]
    if not packets:
        raise AggregationError("no valid sampled slices for lag priors")
    pooled, local = lag_statistics(slice_moments(packets), L, ridge_scale, surrogate,
                                   normalize)
    S_A = pooled >= delta_hard
    I_A = local >= delta_local
    return S_A, compute_soft_mask(S_A, I_A)


# ---------------------------------------------------------------- masks

def compute_soft_mask(S: np.ndarray, indicators: np.ndarray) -> np.ndarray:
    """``L = S * (1 - min_k I_k)``: kept edges that some client finds independent."""
    S = np.asarray(S, dtype=bool)
    I = np.asarray(indicators, dtype=bool)
    if I.shape[1:] != S.shape:
        raise ValueError(f"indicator shape {I.shape} does not match mask {S.shape}")
    return S & ~I.all(axis=0)


def _robust_high(omega: np.ndarray) -> np.ndarray:
    # flags values above median + 3 MAD along the time axis (axis 0)
    med = np.median(omega, axis=0)
    mad = np.median(np.abs(omega - med), axis=0)
    return omega > med + 3.0 * mad


def temporal_filter(series: np.ndarray, omegas: np.ndarray | None = None) -> np.ndarray:
    """Median-filter binary indicators along the sampled-time axis.

    ``series`` is [n_sampled, K, D, D]; ``omegas`` is [n_sampled, K, D].
    Windows have width 3, widened to 5 where either endpoint's variance is
    abnormally high for that client. Windows shrink symmetrically at the
    boundaries, so every window is odd and the median is a strict majority.
    """
    series = np.asarray(series, dtype=bool)
    n = series.shape[0]
    if n < 3:
        return series.copy()
    half = np.ones(series.shape, dtype=int)
    if omegas is not None:
        high = _robust_high(np.asarray(omegas, dtype=float))          # [n, K, D]
        wide = high[:, :, :, None] | high[:, :, None, :]
        half[wide] = 2
    csum = np.concatenate([np.zeros((1,) + series.shape[1:], dtype=int),
                           np.cumsum(series, axis=0)])
    out = np.empty_like(series)
    for s in range(n):
        hw = np.minimum(half[s], min(s, n - 1 - s))
        lo, hi = s - hw, s + hw + 1
        ones = (np.take_along_axis(csum, hi[None], 0)[0]
                - np.take_along_axis(csum, lo[None], 0)[0])
        out[s] = 2 * ones > (2 * hw + 1)
    return out


def zero_order_hold(times: Sequence[int], values: np.ndarray, T: int) -> np.ndarray:
    """Extend values known at ``times`` to every step ``0..T-1``.

    Step ``t`` takes the value of the latest sampled time ``<= t``; steps
    before the first sample take the first sample's value.
    """
    times = np.asarray(times)
    if times.size == 0:
        raise ValueError("need at least one sampled time")
    if np.any(np.diff(times) <= 0):
        raise ValueError("sampled times must be strictly increasing")
    idx = np.searchsorted(times, np.arange(T), side="right") - 1
    return np.asarray(values)[np.maximum(idx, 0)]


# ---------------------------------------------------------------- priors

@dataclass
class PriorSet:
    S: np.ndarray          # [T, D, D] bool
    L_soft: np.ndarray     # [T, D, D] bool
    S_A: np.ndarray        # [L, D, D] bool
    L_soft_A: np.ndarray   # [L, D, D] bool
    sampled_times: list[int]
    meta: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def T(self) -> int:
        return self.S.shape[0]

    @property
    def D(self) -> int:
        return self.S.shape[1]

    @property
    def L(self) -> int:
        return self.S_A.shape[0]

    def to_bytes(self) -> bytes:
        from dyncausal.io import dumps_bundle
        return dumps_bundle(PRIOR_MAGIC, self._arrays(), self.meta)

    def _arrays(self) -> dict:
        return {"S": self.S.astype(bool), "L_soft": self.L_soft.astype(bool),
                "S_A": self.S_A.astype(bool), "L_soft_A": self.L_soft_A.astype(bool),
                "sampled_times": np.asarray(self.sampled_times, dtype=np.int64)}

    def save(self, path: str | Path) -> int:
        return save_bundle(path, PRIOR_MAGIC, self._arrays(), self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "PriorSet":
        a, meta = load_bundle(path, PRIOR_MAGIC)
        return cls(a["S"], a["L_soft"], a["S_A"], a["L_soft_A"],
                   [int(t) for t in a["sampled_times"]], meta)

    @classmethod
    def full(cls, T: int, D: int, L: int) -> "PriorSet":
        """Permissive priors: every off-diagonal edge kept, nothing penalized."""
        S = np.broadcast_to(~np.eye(D, dtype=bool), (T, D, D)).copy()
        return cls(S, np.zeros_like(S), np.ones((L, D, D), dtype=bool),
                   np.zeros((L, D, D), dtype=bool), list(range(T)))

    def summary(self) -> str:
        lines = [f"sampled times: {len(self.sampled_times)} "
                 f"({self.sampled_times[:8]}{' ...' if len(self.sampled_times) > 8 else ''})"]
        for key in ("delta_hard", "delta_local", "delta_hard_A", "delta_local_A", "T_S"):
            if key in self.meta:
                lines.append(f"{key}: {self.meta[key]}")
        frac_S = self.S.mean(axis=0)
        frac_L = self.L_soft.mean(axis=0)
        for i in range(self.D):
            for j in range(i + 1, self.D):
                status = "kept" if frac_S[i, j] >= 0.5 else "REMOVED"
                flag = " soft-penalized" if frac_L[i, j] >= 0.5 else ""
                lines.append(f"pair ({i},{j}): {status} (S=1 at {frac_S[i, j]:.0%} of t)"
                             f"{flag}")
        for tau, i, j in zip(*np.nonzero(self.S_A)):
            flag = " soft-penalized" if self.L_soft_A[tau, i, j] else ""
            lines.append(f"lag {tau + 1}: {i} -> {j} kept{flag}")
        return "\n".join(lines)


@dataclass
class DismConfig:
    T_S: int = 1
    h: int = 32
    sigma: float = 1.0
    rff_seed: int = 0
    delta_hard: float | str = "permutation"
    delta_local: float | str = "permutation"
    ridge_scale: float = 1e-3
    surrogate: str | None = "stratified"
    n_permutations: int | None = None   # None: enough rounds for ~200 null values per family
    quantile: float = 0.95
    window: int = 5                      # contemporaneous pooling half-width, in time steps
    standardize: bool = True
    normalize: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.T_S < 1:
            raise ValueError("T_S must be >= 1")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"surrogate must be one of {SURROGATES}")
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must be in (0, 1)")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.n_permutations is not None and self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


_NULL_TARGET = 200
_MAX_PERMUTATIONS = 50


def permutation_rounds(n_slices: int, D: int, L: int) -> int:
    """Rounds needed for about 200 pooled null values in the sparser family."""
    per_round = [n_slices * D * (D - 1) // 2]
    if L > 0:
        per_round.append(L * D * (D - 1))
    need = max(-(-_NULL_TARGET // max(v, 1)) for v in per_round)
    return int(np.clip(need, 1, _MAX_PERMUTATIONS))


def calibrate_thresholds(panels: Sequence[TimeSeriesPanel], L: int, params: RFFParams,
                         standardizer: Standardizer | None, times: Sequence[int],
                         cfg: DismConfig) -> dict[str, float]:
    """Permutation-null quantiles for the four test families.

    In each round every client draws one permutation of its sample index per
    variable and applies it at every lag position and sampled slice, so
    neighbouring slices keep the sample overlap the real statistics have and
    each variable keeps its own autocorrelation. Self-lag pairs are
    therefore not null under this scheme and are left out of the lag
    quantiles. The server runs
    the usual windowed and lag statistics on these packets and takes the
    configured quantile of everything collected.
    """
    D = panels[0].D
    rounds = cfg.n_permutations or permutation_rounds(len(times), D, L)
    rngs = [np.random.default_rng(s)
            for s in np.random.SeedSequence([cfg.seed, 0xCA1]).spawn(len(panels))]
    iu = np.triu_indices(D, 1)
    cross_lag = ~np.eye(D, dtype=bool)       # self-lag pairs keep their dependence here
    pooled_c, local_c, pooled_l, local_l = [], [], [], []
    for _ in range(rounds):
        # keyed by variable, so V_d^t is shuffled alike wherever it appears
        perms = [np.tile(rng.permuted(np.tile(np.arange(p.n), (D, 1)), axis=1), (L + 1, 1))
                 for rng, p in zip(rngs, panels)]
        strata = [aggregate_moments([null_slice_stats(p, t, L, params, None, standardizer,
                                                      perms[k])
                                     for k, p in enumerate(panels)])
                  for t in times]
        stats = SliceStatistics(strata, L, cfg.ridge_scale, cfg.surrogate, cfg.normalize,
                                cfg.threads, times)
        for s in range(len(stats)):
            pooled, local = stats.contemporaneous(s, cfg.window)
            pooled_c.append(pooled[iu])
            local_c.append(local[:, iu[0], iu[1]].ravel())
        if L > 0:
            pl, ll = stats.lag()
            pooled_l.append(pl[:, cross_lag].ravel())
            local_l.append(ll[:, :, cross_lag].ravel())

    def q(vals):
        if not vals:
            return float("inf")
        return max(float(np.quantile(np.concatenate(vals), cfg.quantile)), _RIDGE_FLOOR)

    return {"delta_hard": q(pooled_c), "delta_local": q(local_c),
            "delta_hard_A": q(pooled_l), "delta_local_A": q(local_l), "rounds": rounds}


def _resolve(value: float | str, calibrated: float) -> float:
    return calibrated if value == "permutation" else float(value)


def run_dism(panels: Sequence[TimeSeriesPanel], L: int, cfg: DismConfig | None = None
             ) -> PriorSet:
    """Mine dynamic and static priors from federated feature statistics.

    Steps: standardization exchange, per-slice client uploads, threshold
    calibration, pooled hard masks and local indicators per sampled slice,
    temporal correction, zero-order hold, soft masks, static lag priors.
    Upload sizes are tallied in ``meta["bytes_up"]``.
    """
    cfg = cfg or DismConfig()
    T, D = panels[0].T, panels[0].D
    if any(p.T != T or p.D != D for p in panels):
        raise ValueError("all panels must share T and D")
    times = sampled_times(T, L, cfg.T_S)
    if not times:
        raise ValueError("no sampled slice has a full lag window")
    started = time.perf_counter()
    params = make_rff(cfg.h, cfg.sigma, cfg.rff_seed)
    bytes_up = 0
    standardizer = None
    if cfg.standardize:
        summaries = [moment_summary(p, L) for p in panels]
        bytes_up += sum(s.nbytes for s in summaries)
        standardizer = pool_standardizer(summaries)

    def client_upload(panel: TimeSeriesPanel) -> list[StatPacket]:
        return [time_slice_stats(panel, t, L, params, standardizer) for t in times]

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            uploads = list(ex.map(client_upload, panels))
    else:
        uploads = [client_upload(p) for p in panels]
    bytes_up += sum(len(pk.to_bytes()) for up in uploads for pk in up)

    needs_cal = any(v == "permutation" for v in (cfg.delta_hard, cfg.delta_local))
    cal = {}
    if needs_cal:
        cal = calibrate_thresholds(panels, L, params, standardizer, times, cfg)
    delta_hard = _resolve(cfg.delta_hard, cal.get("delta_hard", 0.0))
    delta_local = _resolve(cfg.delta_local, cal.get("delta_local", 0.0))
    delta_hard_A = _resolve(cfg.delta_hard, cal.get("delta_hard_A", 0.0))
    delta_local_A = _resolve(cfg.delta_local, cal.get("delta_local_A", 0.0))

    K = len(panels)
    n_s = len(times)
    S_s = np.zeros((n_s, D, D), dtype=bool)
    I_s = np.zeros((n_s, K, D, D), dtype=bool)
    omegas = np.zeros((n_s, K, D))
    pooled_stats = np.zeros((n_s, D, D))
    local_stats = np.zeros((n_s, K, D, D))
    stats = SliceStatistics([aggregate_moments([up[s] for up in uploads]) for s in range(n_s)],
                            L, cfg.ridge_scale, cfg.surrogate, cfg.normalize, cfg.threads,
                            times)
    for s in range(n_s):
        pooled_stats[s], local_stats[s] = stats.contemporaneous(s, cfg.window)
        S_s[s] = pooled_stats[s] >= delta_hard
        np.fill_diagonal(S_s[s], False)
        I_s[s] = local_stats[s] >= delta_local
        omegas[s] = np.stack([up[s].omega for up in uploads])

    I_corr = temporal_filter(I_s, omegas)
    L_s = np.stack([compute_soft_mask(S_s[s], I_corr[s]) for s in range(n_s)])
    S = zero_order_hold(times, S_s, T)
    L_soft = zero_order_hold(times, L_s, T)

    if L > 0:
        pooled_A, local_A = stats.lag()
        S_A = pooled_A >= delta_hard_A
        L_soft_A = compute_soft_mask(S_A, local_A >= delta_local_A)
    else:
        S_A = np.zeros((0, D, D), dtype=bool)
        L_soft_A = S_A.copy()

    elapsed = time.perf_counter() - started
    meta = {"T_S": cfg.T_S, "delta_hard": delta_hard, "delta_local": delta_local,
            "delta_hard_A": delta_hard_A, "delta_local_A": delta_local_A,
            "surrogate": cfg.surrogate, "normalize": cfg.normalize, "h": cfg.h, "sigma": cfg.sigma,
            "rff_seed": cfg.rff_seed, "window": cfg.window,
            "permutation_rounds": cal.get("rounds"), "bytes_up": int(bytes_up), "K": K}
    log.info("DISM: %d sampled slices, %d clients, %.2fs", n_s, K, elapsed)
    priors = PriorSet(S, L_soft, S_A, L_soft_A, list(times), meta)
    priors.diagnostics = {"pooled_stats": pooled_stats, "local_stats": local_stats,
                          "raw_indicators": I_s, "corrected_indicators": I_corr,
                          "omegas": omegas, "seconds": elapsed}
    return priors
