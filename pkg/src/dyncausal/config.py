"""Experiment configuration: one JSON document drives every command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from dyncausal.dism import DismConfig
from dyncausal.synth import ScenarioSpec


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class DctoConfig:
    R: int = 40
    E: int = 5
    eta: float = 1.0
    lambda_W: float = 1e-2
    lambda_A: float = 1e-2
    lambda_DAG: float = 1.0
    m: int = 16
    w_enc: int | None = None
    init_scale: float = 0.5

    def validate(self) -> None:
        if self.R < 1 or self.E < 1:
            raise ConfigError("R and E must be >= 1")
        if self.eta < 0:
            raise ConfigError("eta must be nonnegative")
        if min(self.lambda_W, self.lambda_A, self.lambda_DAG) < 0:
            raise ConfigError("penalty weights must be nonnegative")
        if self.m < 1:
            raise ConfigError("latent dimension m must be >= 1")
        if self.w_enc is not None and self.w_enc < 1:
            raise ConfigError("w_enc must be >= 1")


@dataclass
class EvalConfig:
    shd_threshold: float = 0.1
    heldout_seed: int | None = 1     # None skips the forecast metrics
    heldout_n: int | None = None     # per-client held-out size; None = same as training


def _default_scenario() -> ScenarioSpec:
    return ScenarioSpec(D=5, T=60, L=1, K=3, n_k=300)


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec = field(default_factory=_default_scenario)
    dism: DismConfig = field(default_factory=DismConfig)
    dcto: DctoConfig = field(default_factory=DctoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        self.dcto.validate()
        if self.dism.T_S < 1:
            raise ConfigError("T_S must be >= 1")
        if self.dcto.w_enc is not None and self.dcto.w_enc > self.scenario.T:
            raise ConfigError("w_enc exceeds the series length")
        return self

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.to_dict(), "dism": asdict(self.dism),
                "dcto": asdict(self.dcto), "eval": asdict(self.eval),
                "seed": self.seed, "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                scenario=ScenarioSpec.from_dict(d["scenario"]) if "scenario" in d
                else _default_scenario(),
                dism=DismConfig(**d.get("dism", {})),
                dcto=DctoConfig(**d.get("dcto", {})),
                eval=EvalConfig(**d.get("eval", {})),
                seed=int(d.get("seed", 0)),
                output_dir=d.get("output_dir"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def with_overrides(self, assignments: list[str]) -> "ExperimentConfig":
        """Apply ``section.key=value`` assignments; values are parsed as JSON
        when possible and kept as strings otherwise."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            target = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(target.get(p), dict):
                    raise ConfigError(f"unknown config section in {key!r}")
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[parts[-1]] = _parse_value(raw)
        return ExperimentConfig.from_dict(d)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw
