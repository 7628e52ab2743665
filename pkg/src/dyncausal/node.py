"""Masked latent Neural ODE decoding a time-varying contemporaneous graph.

Encoder-process-decoder layout:

* encoder: mean warm-up window (``w_enc * D`` values) -> tanh hidden -> latent ``h(0)``
* processor: ``dh/ds = f(h, s)`` on normalized time ``s = t / (T - 1)`` with one
  tanh hidden layer, integrated by fixed-step RK4 with one step per
  observation step, so ``h`` is available at every ``t``
* decoder: linear map ``h(t) -> W_raw(t)`` of size ``D * D``
* static lag tensor ``A`` [L, D, D]

Hard masks multiply the raw weights; soft masks select entries for an L1
penalty. Gradients are derived by hand through the unrolled solver
(discretize-then-optimize); the RK4 part runs in :mod:`dyncausal.kernels`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from math import factorial
from pathlib import Path

import numpy as np

from dyncausal import kernels
from dyncausal.dism import PriorSet
from dyncausal.io import load_bundle, save_bundle
from dyncausal.synth import TimeSeriesPanel

CHECKPOINT_MAGIC = b"DDCK"


class DivergenceError(ArithmeticError):
    """Latent trajectory, loss, or gradient became non-finite."""

    def __init__(self, message: str, where: int | None = None):
        super().__init__(message)
        self.where = where


@dataclass(frozen=True)
class ThetaLayout:
    D: int
    L: int
    m: int = 16
    w_enc: int | None = None

    @property
    def window(self) -> int:
        return self.L + 1 if self.w_enc is None else self.w_enc

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        D, m = self.D, self.m
        return [
            ("enc_W1", (self.window * D, m)), ("enc_b1", (m,)),
            ("enc_W2", (m, m)), ("enc_b2", (m,)),
            ("proc_W1", (m + 1, m)), ("proc_b1", (m,)),
            ("proc_W2", (m, m)), ("proc_b2", (m,)),
            ("dec_W", (m, D * D)), ("dec_b", (D * D,)),
            ("A", (self.L, D, D)),
        ]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def offsets(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, shape in self.shapes:
            k = int(np.prod(shape))
            out[name] = slice(pos, pos + k)
            pos += k
        return out

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``flat``; writing through them updates the vector."""
        off = self.offsets()
        return {name: flat[off[name]].reshape(shape) for name, shape in self.shapes}


@dataclass
class ThetaParams:
    layout: ThetaLayout
    flat: np.ndarray

    def __post_init__(self) -> None:
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {self.flat.shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layout.unpack(self.flat)[name]

    def copy(self) -> "ThetaParams":
        return ThetaParams(self.layout, self.flat.copy())

    @classmethod
    def init(cls, layout: ThetaLayout, seed: int = 0, scale: float = 0.5,
             decoder_scale: float = 0.1) -> "ThetaParams":
        """Glorot-uniform weights times ``scale``; biases and ``A`` start at zero.

        The decoder gets an extra factor ``decoder_scale`` so the initial
        graph is close to empty.
        """
        rng = np.random.default_rng(seed)
        flat = np.zeros(layout.size)
        views = layout.unpack(flat)
        for name, shape in layout.shapes:
            if len(shape) == 2:
                lim = scale * np.sqrt(6.0 / (shape[0] + shape[1]))
                if name == "dec_W":
                    lim *= decoder_scale
                views[name][...] = rng.uniform(-lim, lim, size=shape)
        return cls(layout, flat)

    def save(self, path: str | Path, meta: dict | None = None) -> int:
        info = {"layout": asdict(self.layout)}
        info.update(meta or {})
        return save_bundle(path, CHECKPOINT_MAGIC, {"theta": self.flat}, info)

    @classmethod
    def load(cls, path: str | Path) -> tuple["ThetaParams", dict]:
        arrays, meta = load_bundle(path, CHECKPOINT_MAGIC)
        return cls(ThetaLayout(**meta["layout"]), arrays["theta"]), meta


@dataclass(frozen=True)
class Penalties:
    lambda_W: float = 1e-2
    lambda_A: float = 1e-2
    lambda_DAG: float = 1.0


@dataclass
class ClientData:
    """Sufficient statistics of one panel for the squared-error term.

    ``grams[t - L]`` is ``X_t^T X_t / n`` with ``X_t = [V^t, V^{t-1}, ..., V^{t-L}]``,
    which makes the loss and its gradient independent of the sample count.
    """

    grams: np.ndarray
    encoder_input: np.ndarray
    n: int
    T: int
    D: int
    L: int

    @classmethod
    def from_panel(cls, panel: TimeSeriesPanel, L: int, window: int | None = None
                   ) -> "ClientData":
        V = panel.values
        n, T, D = V.shape
        window = L + 1 if window is None else window
        X = np.concatenate([V[:, L - tau:T - tau] for tau in range(L + 1)], axis=2)
        grams = np.einsum("nta,ntb->tab", X, X) / n
        return cls(grams, V[:, :window].mean(axis=0).ravel(), n, T, D, L)

    def with_encoder_input(self, x: np.ndarray) -> "ClientData":
        return ClientData(self.grams, np.asarray(x, dtype=float), self.n, self.T, self.D, self.L)

    def zero_model_mse(self) -> float:
        """Squared error of the all-zero model: mean of V^2 over the loss range."""
        D = self.D
        return float(np.mean(np.trace(self.grams[:, :D, :D], axis1=1, axis2=2)) / D)


@dataclass
class TrajectoryOutput:
    latents: np.ndarray   # [T, m]
    W_raw: np.ndarray     # [T, D, D]
    W_eff: np.ndarray
    A_eff: np.ndarray     # [L, D, D]
    cache: dict = field(default_factory=dict, repr=False)


def hard_masks(priors: PriorSet) -> tuple[np.ndarray, np.ndarray]:
    D = priors.D
    S = (priors.S & ~np.eye(D, dtype=bool)[None]).astype(float)
    return S, priors.S_A.astype(float)


def h_acyc(W: np.ndarray) -> np.ndarray:
    """Acyclicity measure ``tr(sum_{k=0}^{D} (W*W)^k / k!) - D``.

    Works on a single [D, D] matrix or a stack [..., D, D]. Exact (equal to
    the full exponential form) whenever ``W`` is acyclic, since ``W*W`` is
    then nilpotent of index at most ``D``.
    """
    return _h_acyc(np.asarray(W, dtype=float))[0]


def _h_acyc(W: np.ndarray, grad: bool = False):
    D = W.shape[-1]
    B = W * W
    P = np.broadcast_to(np.eye(D), W.shape).copy()
    h = np.zeros(W.shape[:-2])
    series = P.copy() if grad else None        # sum_{k=0}^{D-1} B^k / k!
    for k in range(1, D + 1):
        P = P @ B
        h = h + np.trace(P, axis1=-2, axis2=-1) / factorial(k)
        if grad and k < D:
            series = series + P / factorial(k)
    if not grad:
        return h, None
    return h, 2.0 * W * np.swapaxes(series, -1, -2)


def forward(theta: ThetaParams, priors: PriorSet, data: ClientData | TimeSeriesPanel
            ) -> TrajectoryOutput:
    """Encode, integrate the latent ODE over every step, decode and mask."""
    if isinstance(data, TimeSeriesPanel):
        data = ClientData.from_panel(data, theta.layout.L, theta.layout.window)
    if data.T != priors.T or data.D != priors.D:
        raise ValueError(f"priors shaped (T={priors.T}, D={priors.D}) do not match "
                         f"data (T={data.T}, D={data.D})")
    return decode(theta, priors, data.encoder_input)


def decode(theta: ThetaParams, priors: PriorSet, encoder_input: np.ndarray
           ) -> TrajectoryOutput:
    """Trajectory from an encoder input alone (no sample-level data needed)."""
    lay = theta.layout
    T, D = priors.T, lay.D
    if priors.D != D or priors.L != lay.L:
        raise ValueError(f"priors shaped (D={priors.D}, L={priors.L}) do not match "
                         f"model (D={D}, L={lay.L})")
    p = lay.unpack(theta.flat)
    x = np.asarray(encoder_input, dtype=float)
    if x.shape != (lay.window * D,):
        raise ValueError(f"encoder input must have {lay.window * D} entries")
    a_enc = np.tanh(x @ p["enc_W1"] + p["enc_b1"])
    h0 = a_enc @ p["enc_W2"] + p["enc_b2"]
    # the step size is folded into the output layer: dt * f = tanh(.) @ (dt P2) + dt p2
    dt = 1.0 / (T - 1)
    H, Y, A_act = kernels.rk4_rollout(h0, p["proc_W1"], p["proc_b1"], dt * p["proc_W2"],
                                      dt * p["proc_b2"], T - 1, float(T - 1))
    bad = ~np.all(np.isfinite(H), axis=1)
    if bad.any():
        t_bad = int(np.argmax(bad))
        raise DivergenceError(f"latent trajectory non-finite at t={t_bad}", t_bad)
    W_raw = (H @ p["dec_W"] + p["dec_b"]).reshape(T, D, D)
    S, S_A = hard_masks(priors)
    out = TrajectoryOutput(H, W_raw, W_raw * S, p["A"] * S_A)
    out.cache = {"a_enc": a_enc, "Y": Y, "A_act": A_act, "S": S, "S_A": S_A}
    return out


def _residual_operator(W_eff: np.ndarray, A_eff: np.ndarray, L: int) -> np.ndarray:
    # M_t = [I - W_t; -A_1; ...; -A_L] for every t in the loss range
    T, D, _ = W_eff.shape
    M = np.empty((T - L, (L + 1) * D, D))
    M[:, :D] = np.eye(D) - W_eff[L:]
    for tau in range(1, L + 1):
        M[:, tau * D:(tau + 1) * D] = -A_eff[tau - 1]
    return M


def _objective(theta: ThetaParams, priors: PriorSet, data: ClientData, pen: Penalties,
               want_grad: bool):
    lay = theta.layout
    out = forward(theta, priors, data)
    T, D, L = priors.T, lay.D, lay.L
    M = _residual_operator(out.W_eff, out.A_eff, L)
    GM = data.grams @ M
    n_t = T - L
    mse = float(np.einsum("tab,tab->", M, GM)) / (n_t * D)
    Lw = priors.L_soft.astype(float)
    La = priors.L_soft_A.astype(float)
    soft_w = pen.lambda_W * float(np.abs(out.W_eff * Lw).sum()) / T
    soft_a = pen.lambda_A * float(np.abs(out.A_eff * La).sum())
    h, dh_dW = _h_acyc(out.W_eff, grad=want_grad)
    dag = pen.lambda_DAG * float(h.sum()) / T
    total = mse + dag + soft_w + soft_a
    comps = {"total": total, "mse": mse, "dag": dag, "soft_w": soft_w, "soft_a": soft_a}
    if not np.isfinite(total):
        raise DivergenceError("loss is non-finite")
    if not want_grad:
        return total, comps, out, None

    # d/dM of mse, split into contemporaneous and lag blocks
    dM = (2.0 / (n_t * D)) * GM
    dW_eff = np.zeros_like(out.W_eff)
    dW_eff[L:] = -dM[:, :D]
    dA_eff = np.zeros_like(out.A_eff)
    for tau in range(1, L + 1):
        dA_eff[tau - 1] = -dM[:, tau * D:(tau + 1) * D].sum(axis=0)
    dW_eff += (pen.lambda_W / T) * np.sign(out.W_eff) * Lw
    dW_eff += (pen.lambda_DAG / T) * dh_dW
    dA_eff += pen.lambda_A * np.sign(out.A_eff) * La

    c = out.cache
    p = lay.unpack(theta.flat)
    grad = np.zeros_like(theta.flat)
    g = lay.unpack(grad)
    dW_raw = (dW_eff * c["S"]).reshape(T, D * D)
    g["A"][...] = dA_eff * c["S_A"]
    g["dec_W"][...] = out.latents.T @ dW_raw
    g["dec_b"][...] = dW_raw.sum(axis=0)
    dH = dW_raw @ p["dec_W"].T
    dt = 1.0 / (T - 1)
    dh0, dP1, dp1, dP2, dp2 = kernels.rk4_rollout_vjp(
        dH, p["proc_W1"], p["proc_b1"], dt * p["proc_W2"], dt * p["proc_b2"], c["Y"],
        c["A_act"], float(T - 1))
    g["proc_W1"][...] = dP1
    g["proc_b1"][...] = dp1
    g["proc_W2"][...] = dt * dP2
    g["proc_b2"][...] = dt * dp2
    a = c["a_enc"]
    g["enc_W2"][...] = np.outer(a, dh0)
    g["enc_b2"][...] = dh0
    dz = (p["enc_W2"] @ dh0) * (1.0 - a * a)
    g["enc_W1"][...] = np.outer(data.encoder_input, dz)
    g["enc_b1"][...] = dz
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("gradient is non-finite")
    return total, comps, out, grad


def loss(theta: ThetaParams, priors: PriorSet, data: ClientData | TimeSeriesPanel,
         pen: Penalties = Penalties()) -> tuple[float, dict]:
    """Total objective and its components (mse, dag, soft_w, soft_a).

    The squared error follows the linear SCM as a reconstruction identity,
    averaged over samples, variables and steps ``t >= L``.
    """
    if isinstance(data, TimeSeriesPanel):
        data = ClientData.from_panel(data, theta.layout.L, theta.layout.window)
    with np.errstate(over="ignore", invalid="ignore"):   # non-finite values are checked
        total, comps, _, _ = _objective(theta, priors, data, pen, want_grad=False)
    return total, comps


def loss_and_gradient(theta: ThetaParams, priors: PriorSet, data: ClientData,
                      pen: Penalties = Penalties()) -> tuple[float, dict, np.ndarray]:
    with np.errstate(over="ignore", invalid="ignore"):
        total, comps, _, grad = _objective(theta, priors, data, pen, want_grad=True)
    return total, comps, grad


def gradient(theta: ThetaParams, priors: PriorSet, data: ClientData | TimeSeriesPanel,
             pen: Penalties = Penalties()) -> np.ndarray:
    """Flat gradient in the same layout as ``theta.flat``."""
    if isinstance(data, TimeSeriesPanel):
        data = ClientData.from_panel(data, theta.layout.L, theta.layout.window)
    return loss_and_gradient(theta, priors, data, pen)[2]


def local_train(theta: ThetaParams, priors: PriorSet, data: ClientData, E: int, eta: float,
                pen: Penalties = Penalties(), history: list | None = None) -> ThetaParams:
    """``E`` full-batch gradient-descent steps; ``theta`` itself is not modified.

    If ``history`` is given, one component dict per step (evaluated before
    the update) is appended to it.
    """
    if E < 1:
        raise ValueError("need at least one local step")
    if eta < 0:
        raise ValueError("learning rate must be nonnegative")
    cur = theta.copy()
    for step in range(E):
        try:
            _, comps, grad = loss_and_gradient(cur, priors, data, pen)
        except DivergenceError as exc:
            raise DivergenceError(f"step {step}: {exc}", step) from exc
        if history is not None:
            history.append(comps)
        cur.flat -= eta * grad
    return cur
