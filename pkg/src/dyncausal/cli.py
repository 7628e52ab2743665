"""Command-line entry point: ``dyncausal {synth,dism,dcto,eval,pipeline}``.

Every command reads one JSON experiment config (``--config``; defaults
apply when omitted), accepts ``--set section.key=value`` overrides and
writes a ``config.json`` echo next to its outputs. The output directory
defaults to ``config.output_dir``, then ``$DYNCAUSAL_OUTPUT_ROOT/<command>``,
then ``./runs/<command>``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from dyncausal.config import ConfigError, ExperimentConfig
from dyncausal.dism import DegenerateFeaturesError, PriorSet, run_dism
from dyncausal.fed import (GraphEstimate, run_dcto, write_loss_curve, write_round_logs)
from dyncausal.io import FormatError
from dyncausal.node import DivergenceError, Penalties, ThetaParams
from dyncausal.synth import (GroundTruth, ScenarioError, export_csv, generate, read_dataset,
                             write_dataset)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
ENV_OUTPUT_ROOT = "DYNCAUSAL_OUTPUT_ROOT"

log = logging.getLogger("dyncausal")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = replace(cfg, dism=replace(cfg.dism, threads=args.threads))
    return cfg.validate()


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg.output_dir:
        out = Path(cfg.output_dir)
    else:
        out = Path(os.environ.get(ENV_OUTPUT_ROOT, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_dims(priors: PriorSet, panels) -> None:
    T, D = panels[0].T, panels[0].D
    if (priors.T, priors.D) != (T, D):
        raise ConfigError(f"priors shaped (T={priors.T}, D={priors.D}) do not match the "
                          f"dataset (T={T}, D={D})")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: ExperimentConfig, out: Path, csv: bool = False) -> dict:
    panels, truth = generate(cfg.scenario)
    write_dataset(out / "dataset.ddic", panels, cfg.scenario.L, cfg.scenario)
    truth.save(out / "truth.ddgt")
    if csv:
        export_csv(out / "csv", panels)
    cfg.save(out / "config.json")
    print(f"wrote {len(panels)} client panels to {out / 'dataset.ddic'}")
    return {"panels": panels, "truth": truth}


def cmd_dism(cfg: ExperimentConfig, out: Path, data: Path) -> PriorSet:
    panels, L = read_dataset(data)
    priors = run_dism(panels, L, cfg.dism)
    priors.save(out / "priors.ddpr")
    summary = priors.summary()
    (out / "priors.txt").write_text(summary + "\n")
    cfg.save(out / "config.json")
    print(summary)
    return priors


def cmd_dcto(cfg: ExperimentConfig, out: Path, data: Path, priors_path: Path,
             resume: Path | None = None, checkpoint_every: int = 0) -> GraphEstimate:
    panels, _ = read_dataset(data)
    priors = PriorSet.load(priors_path)
    _check_dims(priors, panels)
    d = cfg.dcto
    theta0, start = None, 0
    if resume is not None:
        theta0, meta = ThetaParams.load(resume)
        start = int(meta.get("round", 0))
        if start > d.R:
            raise ConfigError(f"checkpoint is at round {start}, beyond R={d.R}")

    def on_round(r: int, theta: ThetaParams) -> None:
        if checkpoint_every and (r + 1) % checkpoint_every == 0 and r + 1 < d.R:
            theta.save(out / f"checkpoint_r{r + 1:04d}.ddck", {"round": r + 1, "seed": cfg.seed})

    est, logs, extras = run_dcto(priors, panels, d.R, d.E, d.eta,
                                 Penalties(d.lambda_W, d.lambda_A, d.lambda_DAG), cfg.seed,
                                 d.m, d.w_enc, cfg.dism.threads, d.init_scale, theta0, start,
                                 on_round)
    est.meta["config"] = cfg.to_dict()
    extras["theta"].save(out / "checkpoint.ddck", {"round": d.R, "seed": cfg.seed})
    est.save(out / "estimate.ddge")
    write_round_logs(out / "rounds.csv", logs)
    write_loss_curve(out / "loss_curve.csv", extras["loss_curve"])
    cfg.save(out / "config.json")
    if logs:
        print(f"{len(logs)} rounds, final global loss {logs[-1].global_loss:.6g}")
    return est


def cmd_eval(cfg: ExperimentConfig, out: Path, estimate: Path, truth_path: Path,
             heldout: Path | None = None, priors_path: Path | None = None):
    from dyncausal.fed import heldout_panels
    from dyncausal.metrics import evaluate

    est = GraphEstimate.load(estimate)
    truth = GroundTruth.load(truth_path)
    if heldout is not None:
        panels = read_dataset(heldout)[0]
    elif cfg.eval.heldout_seed is not None:
        panels = heldout_panels(cfg, cfg.eval.heldout_n)
    else:
        panels = None
    priors = PriorSet.load(priors_path) if priors_path is not None else None
    report = evaluate(est.W, est.A, truth, panels, priors, cfg.eval.shd_threshold)
    report.write(out)
    cfg.save(out / "config.json")
    for k, v in report.scalars().items():
        print(f"{k}: {v}")
    return report


def cmd_pipeline(cfg: ExperimentConfig, out: Path):
    from dyncausal.fed import heldout_panels, run_pipeline

    panels, truth = generate(cfg.scenario)
    write_dataset(out / "dataset.ddic", panels, cfg.scenario.L, cfg.scenario)
    truth.save(out / "truth.ddgt")
    held = heldout_panels(cfg, cfg.eval.heldout_n) if cfg.eval.heldout_seed is not None else None
    res = run_pipeline(panels, cfg, out, truth, held)
    print(res["priors"].summary())
    for k, v in res["report"].scalars().items():
        print(f"{k}: {v}")
    return res


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. dcto.R=20 (repeatable)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dyncausal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--csv", action="store_true", help="also export one CSV per client")
    s = sub.add_parser("dism", parents=[common], help="mine priors from a dataset")
    s.add_argument("--data", type=Path, required=True)
    s = sub.add_parser("dcto", parents=[common], help="train the trajectory model")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--priors", type=Path, required=True)
    s.add_argument("--resume", type=Path, help="checkpoint to continue from")
    s.add_argument("--checkpoint-every", type=int, default=0, metavar="ROUNDS")
    s = sub.add_parser("eval", parents=[common], help="score an estimate")
    s.add_argument("--estimate", type=Path, required=True)
    s.add_argument("--truth", type=Path, required=True)
    s.add_argument("--heldout", type=Path, help="held-out dataset for forecast errors")
    s.add_argument("--priors", type=Path, help="priors to score against the oracles")
    sub.add_parser("pipeline", parents=[common], help="synth, dism, dcto and eval in sequence")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        out = _out_dir(args, cfg)
        if args.command == "synth":
            cmd_synth(cfg, out, args.csv)
        elif args.command == "dism":
            cmd_dism(cfg, out, args.data)
        elif args.command == "dcto":
            cmd_dcto(cfg, out, args.data, args.priors, args.resume, args.checkpoint_every)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.estimate, args.truth, args.heldout, args.priors)
        else:
            cmd_pipeline(cfg, out)
    except (ConfigError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, DegenerateFeaturesError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
