"""Federated rounds for the trajectory model and the two-phase pipeline.

Clients are simulated in-process. Everything that crosses the
client/server boundary is serialized to bytes first, so the byte counts
in the round logs are the sizes of real messages and a transport could be
slotted in without touching the protocol logic.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dyncausal.dism import PriorSet, run_dism
from dyncausal.io import dumps_bundle, load_bundle, loads_bundle, save_bundle
from dyncausal.node import (ClientData, DivergenceError, Penalties, ThetaLayout, ThetaParams,
                            decode, local_train, loss)
from dyncausal.synth import TimeSeriesPanel

log = logging.getLogger(__name__)

ESTIMATE_MAGIC = b"DDGE"
_THETA_MAGIC = b"DDTH"
_VEC_MAGIC = b"DDVC"


class ClientFailure(RuntimeError):
    """A client raised during a round; the round is aborted."""

    def __init__(self, message: str, round_index: int, client: int):
        super().__init__(message)
        self.round_index = round_index
        self.client = client


def fedavg(client_params: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``sum_k (n_k / N) theta_k``.

    Raises
    ------
    ValueError
        If the vectors differ in shape or the weights do not sum to a
        positive value.
    """
    if not client_params:
        raise ValueError("no client parameters to average")
    shape = np.shape(client_params[0])
    if any(np.shape(p) != shape for p in client_params):
        raise ValueError("client parameter layouts differ")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(client_params),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("need one nonnegative weight per client with positive sum")
    w = w / w.sum()
    out = np.zeros(shape)
    for wk, p in zip(w, client_params):
        out += wk * np.asarray(p, dtype=float)
    return out


@dataclass
class RoundLog:
    round: int
    client_losses: list[float]
    bytes_up: int
    bytes_down: int
    wall_time: float
    global_loss: float
    E: int
    eta: float

    def row(self) -> dict:
        d = asdict(self)
        losses = d.pop("client_losses")
        for k, v in enumerate(losses):
            d[f"loss_client_{k}"] = v
        return d


def write_round_logs(path: str | Path, logs: Sequence[RoundLog]) -> None:
    rows = [r.row() for r in logs]
    if not rows:
        return
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


CURVE_FIELDS = ("round", "client", "step", "total", "mse", "dag", "soft_w", "soft_a")


def write_loss_curve(path: str | Path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        w.writerows(rows)


@dataclass
class GraphEstimate:
    """Final decoded graph: ``W`` [T, D, D] (masked), ``A`` [L, D, D], masks."""

    W: np.ndarray
    A: np.ndarray
    S: np.ndarray
    L_soft: np.ndarray
    S_A: np.ndarray
    L_soft_A: np.ndarray
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> int:
        arrays = {k: getattr(self, k) for k in ("W", "A", "S", "L_soft", "S_A", "L_soft_A")}
        return save_bundle(path, ESTIMATE_MAGIC, arrays, self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "GraphEstimate":
        arrays, meta = load_bundle(path, ESTIMATE_MAGIC)
        return cls(meta=meta, **arrays)


# ---------------------------------------------------------------- messages

def _pack_theta(theta: ThetaParams) -> bytes:
    return dumps_bundle(_THETA_MAGIC, {"theta": theta.flat}, {"layout": asdict(theta.layout)})


def _unpack_theta(data: bytes) -> ThetaParams:
    arrays, meta = loads_bundle(data, _THETA_MAGIC)
    return ThetaParams(ThetaLayout(**meta["layout"]), arrays["theta"])


def _pack_vec(x: np.ndarray, **meta) -> bytes:
    return dumps_bundle(_VEC_MAGIC, {"x": np.asarray(x, dtype=float)}, meta)


def _unpack_vec(data: bytes) -> tuple[np.ndarray, dict]:
    arrays, meta = loads_bundle(data, _VEC_MAGIC)
    return arrays["x"], meta


@dataclass
class Transcript:
    """Every message exchanged: (round, direction, kind, client, nbytes)."""

    entries: list[tuple[int, str, str, int, int]] = field(default_factory=list)

    def add(self, rnd: int, direction: str, kind: str, client: int, payload: bytes) -> bytes:
        self.entries.append((rnd, direction, kind, client, len(payload)))
        return payload

    def total(self, direction: str, rnd: int | None = None) -> int:
        return sum(e[4] for e in self.entries
                   if e[1] == direction and (rnd is None or e[0] == rnd))


class _Client:
    """Holds one panel's sufficient statistics; only bytes go in and out."""

    def __init__(self, k: int, panel: TimeSeriesPanel, L: int, window: int):
        self.k = k
        self.data = ClientData.from_panel(panel, L, window)
        self.priors: PriorSet | None = None

    def warmup_upload(self) -> bytes:
        return _pack_vec(self.data.encoder_input, n=self.data.n)

    def receive_setup(self, priors_bytes: bytes, encoder_bytes: bytes) -> None:
        from dyncausal.dism import PRIOR_MAGIC
        a, meta = loads_bundle(priors_bytes, PRIOR_MAGIC)
        self.priors = PriorSet(a["S"], a["L_soft"], a["S_A"], a["L_soft_A"],
                               [int(t) for t in a["sampled_times"]], meta)
        x, _ = _unpack_vec(encoder_bytes)
        self.data = self.data.with_encoder_input(x)

    def train(self, theta_bytes: bytes, E: int, eta: float, pen: Penalties
              ) -> tuple[bytes, list[dict]]:
        theta = _unpack_theta(theta_bytes)
        history: list[dict] = []
        new = local_train(theta, self.priors, self.data, E, eta, pen, history)
        return _pack_theta(new), history


def run_dcto(priors: PriorSet, panels: Sequence[TimeSeriesPanel], R: int, E: int, eta: float,
             pen: Penalties = Penalties(), seed: int = 0, m: int = 16,
             w_enc: int | None = None, threads: int = 1, init_scale: float = 0.5,
             theta0: ThetaParams | None = None, start_round: int = 0,
             on_round: Callable[[int, ThetaParams], None] | None = None
             ) -> tuple[GraphEstimate, list[RoundLog], dict]:
    """Federated gradient training of the trajectory model.

    Setup: clients upload their warm-up means, the server pools them with
    weights ``n_k / N`` and broadcasts the priors and pooled encoder input.
    Each of rounds ``start_round .. R - 1`` broadcasts the global
    parameters, runs ``E`` local steps on every client and averages the
    results with :func:`fedavg`. The final graph is decoded on the server.

    ``theta0`` resumes from a checkpoint taken after ``start_round`` rounds;
    otherwise parameters are initialized on the server from ``seed``.
    ``on_round(r, theta)`` is called after each aggregation.

    Returns
    -------
    estimate : GraphEstimate
    logs : list of RoundLog
    extras : dict
        ``theta`` (final parameters), ``loss_curve`` rows, ``transcript``
        and the pooled ``encoder_input``.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    if not 0 <= start_round <= R:
        raise ValueError("start_round must lie in [0, R]")
    T, D, L = priors.T, priors.D, priors.L
    if any(p.T != T or p.D != D for p in panels):
        raise ValueError(f"panels do not match the priors' shape (T={T}, D={D})")
    layout = theta0.layout if theta0 is not None else ThetaLayout(D, L, m, w_enc)
    if layout.D != D or layout.L != L:
        raise ValueError("checkpoint layout does not match the priors")
    if layout.window > T:
        raise ValueError("encoder window exceeds the series length")

    clients = [_Client(k, p, L, layout.window) for k, p in enumerate(panels)]
    sizes = np.array([c.data.n for c in clients], dtype=float)
    weights = sizes / sizes.sum()
    tr = Transcript()

    # setup exchange
    ups = [tr.add(-1, "up", "warmup_mean", c.k, c.warmup_upload()) for c in clients]
    x_pool = np.zeros(layout.window * D)
    for wk, msg in zip(weights, ups):
        x_pool += wk * _unpack_vec(msg)[0]
    priors_bytes = priors.to_bytes()
    enc_bytes = _pack_vec(x_pool)
    for c in clients:
        c.receive_setup(tr.add(-1, "down", "priors", c.k, priors_bytes),
                        tr.add(-1, "down", "encoder_input", c.k, enc_bytes))

    theta = theta0.copy() if theta0 is not None else ThetaParams.init(layout, seed, init_scale)
    executor = ThreadPoolExecutor(threads) if threads > 1 and len(clients) > 1 else None
    logs: list[RoundLog] = []
    curve: list[dict] = []
    try:
        for r in range(start_round, R):
            started = time.perf_counter()
            msg = _pack_theta(theta)
            downs = [tr.add(r, "down", "theta", c.k, msg) for c in clients]

            def work(args):
                c, payload = args
                try:
                    return c.train(payload, E, eta, pen)
                except DivergenceError as exc:
                    raise DivergenceError(f"round {r}, client {c.k}: {exc}", exc.where) from exc
                except Exception as exc:  # noqa: BLE001 - surfaced with context
                    raise ClientFailure(f"round {r}, client {c.k}: {exc!r}", r, c.k) from exc

            jobs = list(zip(clients, downs))
            results = list(executor.map(work, jobs)) if executor else [work(j) for j in jobs]
            new_flats, losses = [], []
            for c, (payload, hist) in zip(clients, results):
                tr.add(r, "up", "theta", c.k, payload)
                new_flats.append(_unpack_theta(payload).flat)
                losses.append(hist[-1]["total"])
                curve.extend({"round": r, "client": c.k, "step": s, **h}
                             for s, h in enumerate(hist))
            theta = ThetaParams(layout, fedavg(new_flats, sizes))
            global_loss = float(sum(wk * loss(theta, c.priors, c.data, pen)[0]
                                    for wk, c in zip(weights, clients)))
            logs.append(RoundLog(r, losses, tr.total("up", r), tr.total("down", r),
                                 time.perf_counter() - started, global_loss, E, eta))
            log.info("round %d: global loss %.6g", r, global_loss)
            if on_round is not None:
                on_round(r, theta)
    finally:
        if executor is not None:
            executor.shutdown()

    out = decode(theta, priors, x_pool)
    est = GraphEstimate(out.W_eff, out.A_eff, priors.S, priors.L_soft, priors.S_A,
                        priors.L_soft_A,
                        meta={"R": R, "E": E, "eta": eta, "penalties": asdict(pen),
                              "seed": seed, "layout": asdict(layout), "K": len(clients)})
    extras = {"theta": theta, "loss_curve": curve, "transcript": tr, "encoder_input": x_pool}
    return est, logs, extras


def heldout_panels(cfg, n: int | None = None) -> list[TimeSeriesPanel]:
    """Fresh samples from the configured scenario (same graph, disjoint noise)."""
    from dataclasses import replace

    from dyncausal.synth import generate
    spec = cfg.scenario if n is None else replace(cfg.scenario, n_k=n)
    return generate(spec, sample_seed=cfg.eval.heldout_seed)[0]


def run_pipeline(panels: Sequence[TimeSeriesPanel], cfg, out_dir: str | Path | None = None,
                 truth=None, heldout: Sequence[TimeSeriesPanel] | None = None) -> dict:
    """Phase I priors, then Phase II training, then (optionally) metrics.

    ``cfg`` is an :class:`~dyncausal.config.ExperimentConfig`. When
    ``out_dir`` is given, the priors, checkpoint, estimate, logs, report and
    a config echo are written there.
    """
    L = cfg.scenario.L
    priors = run_dism(panels, L, cfg.dism)
    d = cfg.dcto
    pen = Penalties(d.lambda_W, d.lambda_A, d.lambda_DAG)
    est, logs, extras = run_dcto(priors, panels, d.R, d.E, d.eta, pen, cfg.seed, d.m, d.w_enc,
                                 cfg.dism.threads, d.init_scale)
    est.meta["config"] = cfg.to_dict()
    report = None
    if truth is not None:
        from dyncausal.metrics import evaluate
        report = evaluate(est.W, est.A, truth, heldout, priors, cfg.eval.shd_threshold)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        priors.save(out / "priors.ddpr")
        (out / "priors.txt").write_text(priors.summary() + "\n")
        extras["theta"].save(out / "checkpoint.ddck", {"round": d.R, "seed": cfg.seed})
        est.save(out / "estimate.ddge")
        write_round_logs(out / "rounds.csv", logs)
        write_loss_curve(out / "loss_curve.csv", extras["loss_curve"])
        if report is not None:
            report.write(out)
        (out / "pipeline.json").write_text(json.dumps(
            {"dism_seconds": priors.diagnostics.get("seconds"),
             "dism_bytes_up": priors.meta.get("bytes_up"),
             "dcto_bytes_up": extras["transcript"].total("up"),
             "dcto_bytes_down": extras["transcript"].total("down")}, indent=2))
    return {"priors": priors, "estimate": est, "logs": logs, "report": report, **extras}
