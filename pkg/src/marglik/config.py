"""Run configuration: one JSON document per CLI invocation.

The schema is strict (unknown keys are rejected) so that a typo surfaces as a
field-path error instead of a silently ignored option.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, model_validator

from .likeest import ParticlePolicy
from .sampler import McmcConfig

ModelName = Literal["normal_normal", "mixl", "gmnl", "lba_I", "lba_II", "lba_III", "lba_IV"]


class ConfigError(ValueError):
    """A schema or file-reference problem, reported with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(message if message.startswith(path + ":") else f"{path}: {message}")
        self.path = path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PolicyConfig(_Strict):
    mode: Literal["fixed", "adaptive_global", "adaptive_per_subject"] = "adaptive_global"
    N0: int = Field(250, ge=1)
    sigma2_target: float = Field(1.0, gt=0)
    max_doublings: int = Field(6, ge=0)
    pilot_N: int = Field(100, ge=3)
    N_min: int = Field(20, ge=1)
    N_max: int = Field(100_000, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.mode != "fixed" and self.N0 < 2:
            raise ValueError("N0 must be at least 2 for adaptive policies")
        if self.N_min > self.N_max:
            raise ValueError("N_min exceeds N_max")
        return self

    def build(self) -> ParticlePolicy:
        return ParticlePolicy(**self.model_dump())


class ProposalConfig(_Strict):
    K_max: int = Field(5, ge=1)
    n_init: int = Field(10, ge=1)
    tail_df: Optional[float] = Field(None, gt=2)
    inflate: float = Field(1.0, gt=0)
    dedupe: bool = True
    w_def: float = Field(0.95, gt=0, le=1)
    antithetic: bool = False
    stratified: bool = True
    re_kind: Literal["conditional", "laplace", "prior", "exact_normal"] = "conditional"
    refine: bool = False
    perturb: bool = False
    perturb_shift_sd: float = 0.5
    perturb_cov_scale: float = Field(2.0, gt=0)


class SimulateConfig(_Strict):
    S: int = Field(20, ge=1)
    T: int = Field(10, ge=1)
    theta: Optional[list[float]] = None


class SamplerConfig(_Strict):
    method: Literal["pm_mh", "mwg"] = "pm_mh"
    n_iter: int = Field(5000, ge=2)
    burn_in: int = Field(1000, ge=0)
    thin: int = Field(1, ge=1)
    n_chains: int = Field(1, ge=1)
    inner_N: int = Field(100, ge=1)
    adapt_window: int = Field(200, ge=1)
    target_accept: float = Field(0.234, gt=0, lt=1)
    theta_steps: int = Field(10, ge=1)
    init: Optional[list[float]] = None
    re_kind: Literal["prior", "laplace"] = "laplace"
    refine: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.burn_in >= self.n_iter:
            raise ValueError("burn_in must be smaller than n_iter")
        return self

    def build(self) -> McmcConfig:
        keys = ("method", "n_iter", "burn_in", "thin", "n_chains", "inner_N", "adapt_window",
                "target_accept", "theta_steps", "init")
        return McmcConfig(**{k: getattr(self, k) for k in keys})


class PhiSpec(_Strict):
    """``scale * f(theta[component]) + shift`` with ``f`` the identity or ``exp``."""

    component: int | str
    transform: Literal["identity", "exp"] = "identity"
    scale: float = 1.0
    shift: float = 0.0
    name: Optional[str] = None

    @model_validator(mode="after")
    def _finite(self):
        if not (math.isfinite(self.scale) and math.isfinite(self.shift)):
            raise ValueError("scale and shift must be finite")
        return self

    def describe(self) -> str:
        if self.name:
            return self.name
        inner = f"theta[{self.component}]"
        if self.transform == "exp":
            inner = f"exp({inner})"
        return f"{self.scale!r}*{inner}+{self.shift!r}"


class TuneConfig(_Strict):
    vs: list[float] = Field(default_factory=lambda: [1.0, 5.0, 10.0, 100.0])
    grid: Optional[list[float]] = None
    calibrate: bool = False
    theta_probe_count: int = Field(20, ge=10)
    pilot_N: int = Field(100, ge=3)
    inflation_sigma2: Optional[float] = Field(None, ge=0)
    inflation_M: int = Field(100_000, ge=2)


class RunConfig(_Strict):
    model: ModelName
    hyper: dict = Field(default_factory=dict)
    seed: int = Field(..., ge=0)
    data: Optional[Path] = None
    draws: Optional[Path] = None
    proposal_file: Optional[Path] = None
    weighted_draws: Optional[Path] = None
    M: int = Field(10_000, ge=2)
    B: int = Field(1000, ge=2)
    exact_likelihood: bool = False
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    proposal: ProposalConfig = Field(default_factory=ProposalConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    phi: list[PhiSpec] = Field(default_factory=list)
    tune: TuneConfig = Field(default_factory=TuneConfig)
    result_a: Optional[Path] = None
    result_b: Optional[Path] = None
    out: Optional[Path] = None

    _hash: Optional[str] = PrivateAttr(None)

    def require_file(self, field: str) -> Path:
        """Return the path in ``field``, raising :class:`ConfigError` if it is unset or missing."""
        value = getattr(self, field)
        if value is None:
            raise ConfigError(field, "required for this command")
        if not Path(value).is_file():
            raise ConfigError(field, f"file not found: {value}")
        return Path(value)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of everything except the output location.

        Computed before relative paths are resolved, so moving a run directory
        does not change the hash.
        """
        if self._hash is not None:
            return self._hash
        payload = self.model_dump(mode="json", exclude={"out"})
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def load_config(path, base_dir: Path | None = None) -> RunConfig:
    """Parse and validate a JSON config file.

    Relative file references are resolved against the config's directory.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(doc, path.parent if base_dir is None else base_dir)


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(".".join(str(p) for p in err["loc"]) or "<root>", _format_error(exc)) from None
    digest = cfg.config_hash()
    if base_dir is not None:
        updates = {}
        for f in ("data", "draws", "proposal_file", "weighted_draws", "result_a", "result_b", "out"):
            v = getattr(cfg, f)
            if v is not None and not v.is_absolute():
                updates[f] = Path(base_dir) / v
        cfg = cfg.model_copy(update=updates)
    cfg._hash = digest
    return cfg
