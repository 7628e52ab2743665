"""Structure-recovery and forecasting scores against synthetic ground truth."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from dyncausal.synth import GroundTruth, ScenarioSpec, TimeSeriesPanel


def _offdiag(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x[~np.eye(x.shape[-1], dtype=bool)]


def edge_auroc(scores: np.ndarray, truth: np.ndarray, exclude_diagonal: bool = True
               ) -> float | None:
    """Rank-based AUROC (ties share the average rank).

    Returns ``None`` when the truth has no positives or no negatives.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(truth, dtype=bool)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {y.shape}")
    if exclude_diagonal and s.ndim == 2:
        s, y = _offdiag(s), _offdiag(y)
    else:
        s, y = s.ravel(), y.ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def edge_auprc(scores: np.ndarray, truth: np.ndarray, exclude_diagonal: bool = True
               ) -> float | None:
    """Area under the step-wise precision-recall curve (average precision)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(truth, dtype=bool)
    if exclude_diagonal and s.ndim == 2:
        s, y = _offdiag(s), _offdiag(y)
    else:
        s, y = s.ravel(), y.ravel()
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # one operating point per distinct score
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def shd(W_est: np.ndarray, W_ref: np.ndarray, threshold: float = 0.1) -> int:
    """Structural Hamming distance between two weighted digraphs.

    Each unordered pair counts once if its edge state (none, i->j, j->i,
    both) differs after thresholding ``|W| > threshold``, so a reversal
    costs 1, as does a missing or extra edge.
    """
    a = np.abs(np.asarray(W_est)) > threshold
    b = np.abs(np.asarray(W_ref)) > threshold
    np.fill_diagonal(a, False)
    np.fill_diagonal(b, False)
    iu = np.triu_indices(a.shape[0], 1)
    differ = (a[iu] != b[iu]) | (a.T[iu] != b.T[iu])
    return int(differ.sum())


def forecast_errors(W: np.ndarray, A: np.ndarray, panels: Sequence[TimeSeriesPanel]
                    ) -> tuple[float, float]:
    """One-step MAE and RMSE of ``V^t W^t + sum_tau V^{t-tau} A^tau``.

    Averaged over samples, steps ``t >= L`` and variables of all panels.
    """
    L = A.shape[0]
    abs_sum = sq_sum = 0.0
    count = 0
    for p in panels:
        V = p.values
        pred = np.einsum("ntd,tde->nte", V[:, L:], W[L:])
        for tau in range(1, L + 1):
            pred += V[:, L - tau:p.T - tau] @ A[tau - 1]
        err = V[:, L:] - pred
        abs_sum += np.abs(err).sum()
        sq_sum += (err * err).sum()
        count += err.size
    return abs_sum / count, float(np.sqrt(sq_sum / count))


def _pr(pred: np.ndarray, actual: np.ndarray) -> dict[str, float]:
    pred, actual = pred.astype(bool), actual.astype(bool)
    tp = int((pred & actual).sum())
    n_pred, n_act = int(pred.sum()), int(actual.sum())
    return {"precision": tp / n_pred if n_pred else 1.0,
            "recall": tp / n_act if n_act else 1.0,
            "predicted": n_pred, "actual": n_act}


def mask_report(priors, truth: GroundTruth) -> dict[str, dict[str, float]]:
    """Precision/recall of removals (``S = 0``) and soft flags (``L = 1``).

    Dynamic masks are scored over off-diagonal entries at every step,
    static masks over every lag entry.
    """
    D = priors.D
    off = ~np.eye(D, dtype=bool)[None]
    rep = {
        "dynamic_removal": _pr((~priors.S) & off, (~truth.oracle_S) & off),
        "dynamic_soft": _pr(priors.L_soft & off, truth.oracle_L & off),
        "static_removal": _pr(~priors.S_A, ~truth.oracle_S_A),
        "static_soft": _pr(priors.L_soft_A, truth.oracle_L_A),
    }
    spec = truth.meta.get("spec")
    conf = [(e.i, e.j) for e in ScenarioSpec.from_dict(spec).confounded_edges] if spec else []
    if conf:
        removed = [float(np.mean(~priors.S[:, i, j])) for i, j in conf]
        rep["confounded_removal"] = {"recall": float(np.mean(removed)), "pairs": len(conf)}
    return rep


@dataclass
class EvalReport:
    auroc_t: list
    auprc_t: list
    auroc: float | None
    auprc: float | None
    shd: float
    lag_auroc: float | None
    lag_auprc: float | None
    mae: float | None = None
    rmse: float | None = None
    acyclicity_max: float | None = None
    mask_accuracy: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        d = asdict(self)
        d.pop("auroc_t")
        d.pop("auprc_t")
        mask = d.pop("mask_accuracy")
        for cat, vals in mask.items():
            for k, v in vals.items():
                d[f"mask_{cat}_{k}"] = v
        return d

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / "report.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.scalars().items():
                w.writerow([k, "" if v is None else v])
        (directory / "report.json").write_text(json.dumps(asdict(self), indent=2))
        with (directory / "per_t.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "auroc", "auprc"])
            for t, (a, p) in enumerate(zip(self.auroc_t, self.auprc_t)):
                w.writerow([t, "" if a is None else a, "" if p is None else p])


def evaluate(W: np.ndarray, A: np.ndarray, truth: GroundTruth,
             heldout: Sequence[TimeSeriesPanel] | None = None, priors=None,
             shd_threshold: float = 0.1) -> EvalReport:
    """Score an estimate (``W`` [T, D, D], ``A`` [L, D, D]) against ground truth."""
    from dyncausal.node import h_acyc

    support = truth.W_true != 0
    auroc_t = [edge_auroc(np.abs(W[t]), support[t]) for t in range(W.shape[0])]
    auprc_t = [edge_auprc(np.abs(W[t]), support[t]) for t in range(W.shape[0])]
    valid = [a for a in auroc_t if a is not None]
    valid_p = [a for a in auprc_t if a is not None]
    lag_scores = np.abs(A).ravel()
    lag_truth = (truth.A_true != 0).ravel()
    mae = rmse = None
    if heldout:
        mae, rmse = forecast_errors(W, A, heldout)
    return EvalReport(
        auroc_t=auroc_t, auprc_t=auprc_t,
        auroc=float(np.mean(valid)) if valid else None,
        auprc=float(np.mean(valid_p)) if valid_p else None,
        shd=float(np.mean([shd(W[t], truth.W_true[t], shd_threshold)
                           for t in range(W.shape[0])])),
        lag_auroc=edge_auroc(lag_scores, lag_truth, exclude_diagonal=False),
        lag_auprc=edge_auprc(lag_scores, lag_truth, exclude_diagonal=False),
        mae=mae, rmse=rmse,
        acyclicity_max=float(np.max(h_acyc(W))),
        mask_accuracy=mask_report(priors, truth) if priors is not None else {},
    )
