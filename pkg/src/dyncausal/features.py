"""Client-side random Fourier feature statistics.

A client maps every scalar variable through the same random cosine map and
uploads only feature moments at sampled time slices. Moments are kept
uncentered so that n-weighted pooling across clients (and across time) is
exact; the server centers after pooling.

Variables are indexed in an *extended* order used throughout the package:
``0..D-1`` are the contemporaneous values ``V^t`` and ``D*tau + d`` is the
lagged value ``V_d^{t-tau}`` for ``tau = 1..L``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from dyncausal.io import dumps_bundle, loads_bundle
from dyncausal.synth import TimeSeriesPanel

PACKET_MAGIC = b"DDSP"
_LEN = struct.Struct("<Q")


@dataclass(frozen=True)
class RFFParams:
    h: int
    frequencies: np.ndarray  # [h, 1]
    phases: np.ndarray       # [h]
    sigma: float
    seed: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Feature map applied elementwise; output gains a trailing axis of size h."""
        x = np.asarray(x, dtype=np.float64)
        return np.sqrt(2.0 / self.h) * np.cos(x[..., None] * self.frequencies[:, 0] + self.phases)


def make_rff(h: int = 32, sigma: float = 1.0, seed: int = 0) -> RFFParams:
    """Draw a shared cosine feature map approximating a Gaussian kernel.

    Frequencies are Normal(0, 1/sigma^2) and phases Uniform[0, 2*pi), so
    ``phi(x) @ phi(y)`` tends to ``exp(-(x - y)^2 / (2 sigma^2))`` as h grows.
    Identical arguments give identical parameters on every client.
    """
    if h < 2:
        raise ValueError(f"feature dimension must be >= 2, got {h}")
    if not sigma > 0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x52FF]))
    freqs = rng.normal(0.0, 1.0 / sigma, size=(h, 1))
    phases = rng.uniform(0.0, 2 * np.pi, size=h)
    return RFFParams(h, freqs, phases, float(sigma), int(seed))


def rff_map(x: float, params: RFFParams) -> np.ndarray:
    if not np.isfinite(x):
        raise ValueError("input must be finite")
    return params(np.float64(x))


@dataclass(frozen=True)
class Standardizer:
    """Per-variable affine map broadcast by the server before feature mapping."""

    mean: np.ndarray
    std: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    @classmethod
    def identity(cls, D: int) -> "Standardizer":
        return cls(np.zeros(D), np.ones(D))


def moment_summary(panel: TimeSeriesPanel, L: int = 0) -> np.ndarray:
    """Client upload for standardization: rows (count, sum, sum of squares) per
    variable, skipping the ``L`` warm-up slices."""
    v = panel.values[:, L:].reshape(-1, panel.D)
    return np.stack([np.full(panel.D, v.shape[0], dtype=float), v.sum(0), (v * v).sum(0)])


def pool_standardizer(summaries: list[np.ndarray]) -> Standardizer:
    tot = np.sum(summaries, axis=0)
    n = tot[0]
    mean = tot[1] / n
    var = np.maximum(tot[2] / n - mean * mean, 0.0)
    std = np.sqrt(var)
    return Standardizer(mean, np.where(std > 0, std, 1.0))


@dataclass
class StatPacket:
    """Moments of one client at one sampled slice.

    ``mean`` is [V, h] and ``second`` is [V, V, h, h] over the extended
    variable order (``V = (L + 1) * D``). ``second[a, b]`` holds
    ``E[phi(x_a) phi(x_b)^T]``.
    """

    client_id: int
    t: int
    n: int
    D: int
    L: int
    mean: np.ndarray
    second: np.ndarray
    omega: np.ndarray
    rff_seed: int

    @property
    def moment_1(self) -> np.ndarray:
        return self.mean[: self.D]

    @property
    def moment_2(self) -> np.ndarray:
        return self.second[: self.D, : self.D]

    @property
    def lag_moment(self) -> np.ndarray:
        """[L, D, D, h, h]: ``E[phi(V_i^{t-tau}) phi(V_j^t)^T]``."""
        D, h = self.D, self.mean.shape[-1]
        return self.second[D:, :D].reshape(self.L, D, D, h, h)

    @property
    def lag_moment_1(self) -> np.ndarray:
        return self.mean[self.D:].reshape(self.L, self.D, -1)

    @property
    def lag_moment_2(self) -> np.ndarray:
        """[L, L, D, D, h, h] moments among lagged slices (used for conditioning)."""
        D, L, h = self.D, self.L, self.mean.shape[-1]
        blk = self.second[D:, D:].reshape(L, D, L, D, h, h)
        return blk.transpose(0, 2, 1, 3, 4, 5)

    def to_bytes(self) -> bytes:
        meta = {"client_id": self.client_id, "t": self.t, "n": self.n, "D": self.D,
                "L": self.L, "rff_seed": self.rff_seed}
        body = dumps_bundle(PACKET_MAGIC, {"mean": self.mean, "second": self.second,
                                           "omega": self.omega}, meta)
        return _LEN.pack(len(body)) + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "StatPacket":
        (length,) = _LEN.unpack_from(data, 0)
        arrays, meta = loads_bundle(data[_LEN.size:_LEN.size + length], PACKET_MAGIC)
        return cls(mean=arrays["mean"], second=arrays["second"], omega=arrays["omega"], **meta)


def sampled_times(T: int, L: int, T_S: int) -> list[int]:
    """Sampled slices ``L, L + T_S, ...`` (0-based; earlier slices lack lags)."""
    if T_S < 1:
        raise ValueError("sampling rate must be >= 1")
    return list(range(L, T, T_S))


def _extended_slice(values: np.ndarray, t: int, L: int) -> np.ndarray:
    # [n, (L+1) * D]: V^t followed by V^{t-1}, ..., V^{t-L}
    return np.concatenate([values[:, t - tau] for tau in range(L + 1)], axis=1)


def _moments(x: np.ndarray, params: RFFParams) -> tuple[np.ndarray, np.ndarray]:
    n, V = x.shape
    F = params(x).reshape(n, V * params.h)
    mean = F.mean(0).reshape(V, params.h)
    second = (F.T @ F / n).reshape(V, params.h, V, params.h).transpose(0, 2, 1, 3)
    return mean, np.ascontiguousarray(second)


def time_slice_stats(panel: TimeSeriesPanel, t: int, L: int, params: RFFParams,
                     standardizer: Standardizer | None = None) -> StatPacket:
    """Compute the upload for slice ``t`` of one client's panel."""
    if t < L or t >= panel.T:
        raise ValueError(f"slice {t} needs {L} lagged slices inside [0, {panel.T})")
    if panel.n < 2:
        raise ValueError("need at least two samples")
    raw = _extended_slice(panel.values, t, L)
    std = standardizer or Standardizer.identity(panel.D)
    x = std(raw.reshape(panel.n, L + 1, panel.D)).reshape(panel.n, -1)
    mean, second = _moments(x, params)
    omega = panel.values[:, t].var(axis=0, ddof=1)
    return StatPacket(panel.client_id, t, panel.n, panel.D, L, mean, second, omega,
                      params.seed)


def null_slice_stats(panel: TimeSeriesPanel, t: int, L: int, params: RFFParams,
                     rng: np.random.Generator | None = None,
                     standardizer: Standardizer | None = None,
                     permutations: np.ndarray | None = None) -> StatPacket:
    """Like :func:`time_slice_stats` after independently shuffling every
    extended variable across samples, which destroys all cross-variable
    dependence while keeping each marginal. Used for threshold calibration.

    ``permutations`` ([(L + 1) * D, n]) fixes the shuffles, so the same
    per-variable permutation can be reused across slices; otherwise they
    are drawn from ``rng``.
    """
    raw = _extended_slice(panel.values, t, L)
    if permutations is None:
        if rng is None:
            raise ValueError("need either rng or permutations")
        permutations = np.stack([rng.permutation(panel.n) for _ in range(raw.shape[1])])
    if permutations.shape != (raw.shape[1], panel.n):
        raise ValueError(f"permutations must have shape {(raw.shape[1], panel.n)}")
    shuffled = np.take_along_axis(raw, permutations.T, axis=0)
    std = standardizer or Standardizer.identity(panel.D)
    x = std(shuffled.reshape(panel.n, L + 1, panel.D)).reshape(panel.n, -1)
    mean, second = _moments(x, params)
    omega = panel.values[:, t].var(axis=0, ddof=1)
    return StatPacket(panel.client_id, t, panel.n, panel.D, L, mean, second, omega,
                      params.seed)
