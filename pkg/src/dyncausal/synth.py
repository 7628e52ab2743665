"""Synthetic multi-client linear SCM generator with ground-truth oracles.

Each client ``k`` draws ``n_k`` independent trajectories from

    V^t = V^t W_k(t) + sum_tau V^{t-tau} A_k(tau) + U_k(t) + eps^t

with row-vector convention (``W[i, j]`` is the edge ``i -> j``). ``W_k`` and
``A_k`` equal the shared ground truth except on inconsistent edges, which are
zeroed for the listed clients. ``U_k`` collects client-level confounding
(a per-client latent value times per-endpoint loadings) plus optional
client-specific offsets.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dyncausal.io import FormatError, load_bundle, save_bundle

DYNAMICS = ("constant", "sinusoid", "piecewise")

DATASET_MAGIC = b"DDIC"
DATASET_VERSION = 1
TRUTH_MAGIC = b"DDGT"


class ScenarioError(ValueError):
    """Invalid scenario specification or divergent dynamics."""


@dataclass(frozen=True)
class ConfoundedEdge:
    """Client-level latent shared by endpoints ``i`` and ``j``.

    ``strengths[k]`` is the latent's value on client ``k``; endpoint ``i``
    receives ``loadings[0] * strengths[k]`` and ``j`` receives
    ``loadings[1] * strengths[k]``.
    """

    i: int
    j: int
    strengths: tuple[float, ...]
    loadings: tuple[float, float] = (1.0, 1.0)
    window: tuple[int, int] | None = None


@dataclass(frozen=True)
class InconsistentEdge:
    """A true edge ``i -> j`` whose coefficient is zero on ``clients``."""

    i: int
    j: int
    clients: tuple[int, ...]
    window: tuple[int, int] | None = None
    coef: float | None = None


@dataclass(frozen=True)
class InconsistentLagEdge:
    tau: int
    i: int
    j: int
    clients: tuple[int, ...]
    coef: float | None = None


@dataclass(frozen=True)
class NoiseBurst:
    client: int
    start: int
    stop: int
    amplitude: float


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to regenerate one synthetic experiment.

    ``n_k`` is either one count shared by all clients or a per-client tuple.
    ``edges`` and ``lag_edges`` pin explicit coefficients on top of the random
    draw controlled by ``sparsity`` / ``lag_sparsity``. Time windows are
    half-open ``[start, stop)`` in 0-based steps.
    """

    D: int
    T: int
    L: int = 1
    K: int = 2
    n_k: int | tuple[int, ...] = 200
    sparsity: float = 0.3
    lag_sparsity: float | None = None
    dynamics: str = "sinusoid"
    noise_std: float = 0.1
    edges: tuple[tuple[int, int, float], ...] = ()
    lag_edges: tuple[tuple[int, int, int, float], ...] = ()
    confounded_edges: tuple[ConfoundedEdge, ...] = ()
    inconsistent_edges: tuple[InconsistentEdge, ...] = ()
    inconsistent_lag_edges: tuple[InconsistentLagEdge, ...] = ()
    client_offsets: tuple[tuple[int, int, float], ...] = ()
    noise_burst: NoiseBurst | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    @property
    def sizes(self) -> tuple[int, ...]:
        if isinstance(self.n_k, (int, np.integer)):
            return (int(self.n_k),) * self.K
        return tuple(int(n) for n in self.n_k)

    def validate(self) -> None:
        D, T, L, K = self.D, self.T, self.L, self.K
        if D < 2 or K < 1 or L < 0 or T <= L + 1:
            raise ScenarioError(f"bad dimensions D={D} T={T} L={L} K={K}")
        if len(self.sizes) != K or min(self.sizes) < 2:
            raise ScenarioError("need n_k >= 2 for every client")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ScenarioError("sparsity must lie in [0, 1]")
        if self.lag_sparsity is not None and not 0.0 <= self.lag_sparsity <= 1.0:
            raise ScenarioError("lag_sparsity must lie in [0, 1]")
        if self.dynamics not in DYNAMICS:
            raise ScenarioError(f"dynamics must be one of {DYNAMICS}")
        if self.noise_std < 0:
            raise ScenarioError("noise_std must be nonnegative")

        def pair(i: int, j: int) -> None:
            if not (0 <= i < D and 0 <= j < D) or i == j:
                raise ScenarioError(f"invalid pair ({i}, {j}) for D={D}")

        def clients(ks: Sequence[int]) -> None:
            if any(not 0 <= k < K for k in ks):
                raise ScenarioError(f"client index out of range in {ks}")

        for i, j, _ in self.edges:
            pair(i, j)
        for tau, i, j, _ in self.lag_edges:
            if not (1 <= tau <= L and 0 <= i < D and 0 <= j < D):
                raise ScenarioError(f"invalid lag edge ({tau}, {i}, {j})")
        for e in self.confounded_edges:
            pair(e.i, e.j)
            if len(e.strengths) != K:
                raise ScenarioError("confounder needs one strength per client")
        for e in self.inconsistent_edges:
            pair(e.i, e.j)
            clients(e.clients)
        for e in self.inconsistent_lag_edges:
            if not (1 <= e.tau <= L and 0 <= e.i < D and 0 <= e.j < D):
                raise ScenarioError(f"invalid lag edge ({e.tau}, {e.i}, {e.j})")
            clients(e.clients)
        for k, d, _ in self.client_offsets:
            clients([k])
            if not 0 <= d < D:
                raise ScenarioError(f"offset variable {d} out of range")
        if self.noise_burst is not None:
            clients([self.noise_burst.client])
        # explicit contemporaneous edges must keep the union graph acyclic
        B = np.zeros((D, D))
        for i, j, _ in self.edges:
            B[i, j] = 1.0
        for e in self.inconsistent_edges:
            B[e.i, e.j] = 1.0
        if _has_cycle(B):
            raise ScenarioError("explicit contemporaneous edges contain a cycle")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        if isinstance(d.get("n_k"), list):
            d["n_k"] = tuple(d["n_k"])
        d["edges"] = tuple(tuple(e) for e in d.get("edges", ()))
        d["lag_edges"] = tuple(tuple(e) for e in d.get("lag_edges", ()))
        d["client_offsets"] = tuple(tuple(e) for e in d.get("client_offsets", ()))

        def win(w):
            return None if w is None else tuple(w)

        d["confounded_edges"] = tuple(
            ConfoundedEdge(e["i"], e["j"], tuple(e["strengths"]),
                           tuple(e.get("loadings", (1.0, 1.0))), win(e.get("window")))
            for e in d.get("confounded_edges", ()))
        d["inconsistent_edges"] = tuple(
            InconsistentEdge(e["i"], e["j"], tuple(e["clients"]), win(e.get("window")),
                             e.get("coef"))
            for e in d.get("inconsistent_edges", ()))
        d["inconsistent_lag_edges"] = tuple(
            InconsistentLagEdge(e["tau"], e["i"], e["j"], tuple(e["clients"]), e.get("coef"))
            for e in d.get("inconsistent_lag_edges", ()))
        if d.get("noise_burst") is not None:
            d["noise_burst"] = NoiseBurst(**d["noise_burst"])
        return cls(**d)


@dataclass
class TimeSeriesPanel:
    """One client's data: ``values[sample, t, d]``."""

    client_id: int
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("panel values must have shape [n, T, D]")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"client {self.client_id}: non-finite values")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def D(self) -> int:
        return self.values.shape[2]


@dataclass
class GroundTruth:
    W_true: np.ndarray            # [T, D, D]
    A_true: np.ndarray            # [L, D, D]
    oracle_S: np.ndarray          # [T, D, D] bool
    oracle_L: np.ndarray
    oracle_S_A: np.ndarray        # [L, D, D] bool
    oracle_L_A: np.ndarray
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> int:
        arrays = {k: getattr(self, k) for k in
                  ("W_true", "A_true", "oracle_S", "oracle_L", "oracle_S_A", "oracle_L_A")}
        return save_bundle(path, TRUTH_MAGIC, arrays, self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        arrays, meta = load_bundle(path, TRUTH_MAGIC)
        return cls(meta=meta, **arrays)


# ---------------------------------------------------------------- structure

def _has_cycle(B: np.ndarray) -> bool:
    # a directed graph on D nodes is acyclic iff its adjacency is nilpotent
    M = (np.asarray(B) != 0).astype(float)
    return bool(np.any(np.linalg.matrix_power(M, M.shape[0])))


def _streams(seed: int, K: int) -> tuple[np.random.Generator, np.random.Generator,
                                         list[np.random.Generator]]:
    ss = np.random.SeedSequence(seed)
    w_ss, a_ss, data_ss = ss.spawn(3)
    return (np.random.default_rng(w_ss), np.random.default_rng(a_ss),
            [np.random.default_rng(s) for s in data_ss.spawn(K)])


def _signed_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))


def _active(window: tuple[int, int] | None, T: int) -> np.ndarray:
    mask = np.zeros(T, dtype=bool)
    if window is None:
        mask[:] = True
    else:
        mask[max(window[0], 0):min(window[1], T)] = True
    return mask


def _edge_trajectory(spec: ScenarioSpec, c: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(spec.T)
    if spec.dynamics == "constant":
        return np.full(spec.T, c)
    if spec.dynamics == "sinusoid":
        phase = rng.uniform(0.0, 2 * np.pi)
        return c * (0.5 + 0.5 * np.sin(2 * np.pi * t / spec.T + phase))
    switch = int(rng.integers(spec.T // 4, max(3 * spec.T // 4, spec.T // 4 + 1)))
    on_first = bool(rng.integers(0, 2))
    return np.where((t < switch) == on_first, c, 0.0)


def contemporaneous_weights(spec: ScenarioSpec) -> np.ndarray:
    """Shared ground-truth ``W_true`` of shape [T, D, D].

    Random edges are drawn only above the diagonal, so the identity order is
    a topological order for them; explicit edges are validated acyclic.
    Every draw is independent of ``T`` except the trajectory evaluation.
    """
    D = spec.D
    rng, _, _ = _streams(spec.seed, spec.K)
    coef = np.zeros((D, D))
    for i in range(D):
        for j in range(i + 1, D):
            keep = rng.uniform() < spec.sparsity
            c = _signed_uniform(rng, 0.3, 0.8)
            if keep:
                coef[i, j] = c
    for e in spec.confounded_edges:
        # a confounded pair carries no random edge; pin one via ``edges`` if wanted
        coef[e.i, e.j] = coef[e.j, e.i] = 0.0
    for e in spec.inconsistent_edges:
        if e.coef is not None:
            coef[e.i, e.j] = e.coef
        elif coef[e.i, e.j] == 0.0:
            coef[e.i, e.j] = abs(coef[e.j, e.i]) or 0.5
            coef[e.j, e.i] = 0.0
    for i, j, c in spec.edges:
        coef[i, j] = c
    if _has_cycle(coef):
        raise ScenarioError("contemporaneous support is cyclic")
    W = np.zeros((spec.T, D, D))
    traj_rng = np.random.default_rng(rng.integers(2**63))
    for i in range(D):
        for j in range(D):
            # draw for every pair so trajectories don't depend on sparsity pattern
            traj = _edge_trajectory(spec, coef[i, j], traj_rng)
            if coef[i, j] != 0.0:
                W[:, i, j] = traj
    return W


def lag_weights(spec: ScenarioSpec) -> np.ndarray:
    """Static ground-truth ``A_true`` of shape [L, D, D]."""
    D, L = spec.D, spec.L
    _, rng, _ = _streams(spec.seed, spec.K)
    p = spec.sparsity if spec.lag_sparsity is None else spec.lag_sparsity
    A = np.zeros((L, D, D))
    for tau in range(L):
        for i in range(D):
            for j in range(D):
                keep = rng.uniform() < p
                c = _signed_uniform(rng, 0.2, 0.5) / (tau + 1)
                if keep:
                    A[tau, i, j] = c
    for e in spec.inconsistent_lag_edges:
        if e.coef is not None:
            A[e.tau - 1, e.i, e.j] = e.coef
        elif A[e.tau - 1, e.i, e.j] == 0.0:
            A[e.tau - 1, e.i, e.j] = 0.4
    for tau, i, j, c in spec.lag_edges:
        A[tau - 1, i, j] = c
    return A


def confounder_terms(spec: ScenarioSpec) -> np.ndarray:
    """Client-level additive terms ``U[k, t, d]``.

    For the two-client example with loadings (0.2, 0.4), strengths
    (0.1, -0.1) and offsets b = (0.2, -0.2) on the first endpoint, the first
    endpoint's term is 0.22 on client 0 and -0.22 on client 1.
    """
    U = np.zeros((spec.K, spec.T, spec.D))
    for e in spec.confounded_edges:
        act = _active(e.window, spec.T)
        for k in range(spec.K):
            U[k, act, e.i] += e.loadings[0] * e.strengths[k]
            U[k, act, e.j] += e.loadings[1] * e.strengths[k]
    for k, d, value in spec.client_offsets:
        U[k, :, d] += value
    return U


def client_weights(spec: ScenarioSpec, W: np.ndarray, A: np.ndarray, k: int
                   ) -> tuple[np.ndarray, np.ndarray]:
    Wk, Ak = W.copy(), A.copy()
    for e in spec.inconsistent_edges:
        if k in e.clients:
            Wk[_active(e.window, spec.T), e.i, e.j] = 0.0
    for e in spec.inconsistent_lag_edges:
        if k in e.clients:
            Ak[e.tau - 1, e.i, e.j] = 0.0
    return Wk, Ak


def check_stability(W: np.ndarray, A: np.ndarray, max_gain: float = 5.0) -> None:
    """Reject coefficient sets whose forward recursion can blow up."""
    if A.size:
        rho = max(abs(np.linalg.eigvals(np.abs(A).sum(axis=0))))
        if rho >= 1.0:
            raise ScenarioError(f"lag spectral radius {rho:.3f} >= 1 (divergent)")
    eye = np.eye(W.shape[1])
    gain = max(np.linalg.norm(np.linalg.inv(eye - Wt), 2) for Wt in W)
    if gain > max_gain:
        raise ScenarioError(f"contemporaneous gain {gain:.2f} exceeds {max_gain}")


# ---------------------------------------------------------------- sampling

def generate(spec: ScenarioSpec, sample_seed: int | None = None
             ) -> tuple[list[TimeSeriesPanel], GroundTruth]:
    """Sample every client's panel forward in time and build the oracles.

    ``sample_seed`` redraws the noise and warm-up values while keeping the
    graph (which depends on ``spec.seed`` only), e.g. for held-out panels.
    """
    W = contemporaneous_weights(spec)
    A = lag_weights(spec)
    check_stability(W, A)
    U = confounder_terms(spec)
    _, _, rngs = _streams(spec.seed, spec.K)
    if sample_seed is not None:
        rngs = [np.random.default_rng(s) for s in
                np.random.SeedSequence([spec.seed, sample_seed, 0x5EED]).spawn(spec.K)]
    D, T, L = spec.D, spec.T, spec.L
    eye = np.eye(D)
    panels = []
    for k, n in enumerate(spec.sizes):
        rng = rngs[k]
        Wk, Ak = client_weights(spec, W, A, k)
        eps = rng.normal(0.0, spec.noise_std, size=(n, T, D))
        if spec.noise_burst is not None and spec.noise_burst.client == k:
            b = spec.noise_burst
            lo, hi = max(b.start, 0), min(b.stop, T)
            eps[:, lo:hi] += b.amplitude * rng.normal(size=(n, max(hi - lo, 0), D))
        V = np.zeros((n, T, D))
        V[:, :L] = rng.normal(size=(n, L, D))
        for t in range(L, T):
            drive = eps[:, t] + U[k, t]
            for tau in range(1, L + 1):
                drive = drive + V[:, t - tau] @ Ak[tau - 1]
            # row-vector solve: V (I - W) = drive
            V[:, t] = np.linalg.solve((eye - Wk[t]).T, drive.T).T
        panels.append(TimeSeriesPanel(k, V))
    oS, oL, oSA, oLA = oracle_masks(spec, W, A)
    truth = GroundTruth(W, A, oS, oL, oSA, oLA, meta={"spec": spec.to_dict()})
    return panels, truth


def oracle_masks(spec: ScenarioSpec, W: np.ndarray | None = None,
                 A: np.ndarray | None = None
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Expected DISM output from scenario bookkeeping alone.

    ``oracle_S[t]`` is the symmetric skeleton of ``W_true[t]`` plus pairs
    sharing a contemporaneous child at ``t`` (dependent under full
    conditioning). Confounded pairs without such a link are 0. ``oracle_L``
    flags surviving pairs listed as inconsistent while their window is
    active. Lag oracles are directed: ``oracle_S_A[tau, i, j]`` is set for
    true lag edges and for lag-moral pairs, where ``V_i^{t-tau}`` and
    ``V_j^t`` share a child at ``t`` for some ``t``.
    """
    if W is None:
        W = contemporaneous_weights(spec)
    if A is None:
        A = lag_weights(spec)
    T, D = spec.T, spec.D
    adj = W != 0.0
    S = adj | adj.transpose(0, 2, 1)
    parents = adj.astype(int)
    # moral links: i and j both parents of some child c at time t
    S |= np.einsum("tic,tjc->tij", parents, parents) > 0
    S &= ~np.eye(D, dtype=bool)[None]
    Lm = np.zeros((T, D, D), dtype=bool)
    for e in spec.inconsistent_edges:
        if e.clients:
            act = _active(e.window, T)
            Lm[act, e.i, e.j] = True
            Lm[act, e.j, e.i] = True
    Lm &= S
    SA = A != 0.0
    child_of_j = adj.any(axis=0).astype(int)          # [D, D]: j -> c at some t
    SA |= np.einsum("lic,jc->lij", SA.astype(int), child_of_j) > 0
    LA = np.zeros_like(SA)
    for e in spec.inconsistent_lag_edges:
        if e.clients:
            LA[e.tau - 1, e.i, e.j] = True
    LA &= SA
    return S, Lm, SA, LA


# ---------------------------------------------------------------- file formats

def write_dataset(path: str | Path, panels: Sequence[TimeSeriesPanel], L: int,
                  spec: ScenarioSpec | None = None) -> Path:
    """Write the ``DDIC`` binary dataset plus a JSON sidecar.

    Header: magic, version u16, then K, D, T, L as u32 and one u32 n_k per
    client; payload is float64 LE in [client][sample][t][d] order.
    """
    path = Path(path)
    K = len(panels)
    D, T = panels[0].D, panels[0].T
    if any(p.D != D or p.T != T for p in panels):
        raise ValueError("all panels must share T and D")
    with path.open("wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<H4I", DATASET_VERSION, K, D, T, L))
        fh.write(struct.pack(f"<{K}I", *(p.n for p in panels)))
        for p in panels:
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    sidecar = {"format": "DDIC", "version": DATASET_VERSION, "K": K, "D": D, "T": T,
               "L": L, "n_k": [p.n for p in panels],
               "spec": spec.to_dict() if spec is not None else None,
               "seed": spec.seed if spec is not None else None}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    return path


def read_dataset(path: str | Path) -> tuple[list[TimeSeriesPanel], int]:
    """Read a ``DDIC`` file; returns the panels and the lag order."""
    data = Path(path).read_bytes()
    if len(data) < 4 + struct.calcsize("<H4I") or data[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a DDIC dataset")
    version, K, D, T, L = struct.unpack_from("<H4I", data, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<H4I")
    if len(data) < off + 4 * K:
        raise FormatError(f"{path}: truncated header")
    sizes = struct.unpack_from(f"<{K}I", data, off)
    off += 4 * K
    expected = off + 8 * T * D * sum(sizes)
    if len(data) < expected:
        raise FormatError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    panels = []
    for k, n in enumerate(sizes):
        count = n * T * D
        vals = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        panels.append(TimeSeriesPanel(k, vals.reshape(n, T, D).astype(np.float64)))
        off += 8 * count
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return panels, L


def export_csv(directory: str | Path, panels: Sequence[TimeSeriesPanel]) -> list[Path]:
    """One CSV per client with columns ``sample,t,V1..VD``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for p in panels:
        fp = directory / f"client_{p.client_id}.csv"
        with fp.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "t"] + [f"V{d + 1}" for d in range(p.D)])
            for s in range(p.n):
                for t in range(p.T):
                    w.writerow([s, t] + [repr(float(x)) for x in p.values[s, t]])
        out.append(fp)
    return out
