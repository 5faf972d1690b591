"""Run configuration: one JSON document, every default materialized."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .federated import GradientConfig, UpperConfig
from .lower import InnerConfig
from .oracle import EvaluatorSpec, ProblemShape

BYZANTINE_MODES = ("sign_flip", "random_simplex", "fixed_corner", "stale_replay")


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    n_benign: int = 3
    n_byzantine: int = 0
    tau: int = 5
    delta: int = 10
    gamma: float = 1e-3
    epsilon: float = 0.05
    availability: float | list = 0.8
    schedule: list | None = None
    latency: float | list = 1.0
    latency_jitter: float = 0.0
    byzantine_modes: list = field(default_factory=list)
    synchronous: bool = False
    iterations: int = 500
    early_stop_patience: int = 50
    early_stop_tol: float = 1e-4
    prune: bool = True
    max_planes: int = 64
    charge_inner_loop: bool = False
    record_polyhedra: bool = False

    def __post_init__(self):
        if self.n_benign < 1 or self.n_byzantine < 0:
            raise ConfigError("need n_benign >= 1 and n_byzantine >= 0")
        if self.tau < 1 or self.delta < 1:
            raise ConfigError("tau and delta must be >= 1")
        if not (self.gamma > 0 and self.epsilon > 0):
            raise ConfigError("gamma and epsilon must be > 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if len(self.byzantine_modes) not in (0, self.n_byzantine):
            raise ConfigError("byzantine_modes needs one entry per Byzantine worker")
        for mode in self.byzantine_modes:
            if mode not in BYZANTINE_MODES:
                raise ConfigError(f"unknown Byzantine mode {mode!r}")
        for name in ("availability", "latency"):
            val = getattr(self, name)
            if isinstance(val, list) and len(val) != self.n_workers:
                raise ConfigError(f"{name} list needs one entry per worker ({self.n_workers})")
        avail = self.availability if isinstance(self.availability, list) else [self.availability]
        if any(not 0 <= a <= 1 for a in avail):
            raise ConfigError("availability must lie in [0, 1]")
        lat = self.latency if isinstance(self.latency, list) else [self.latency]
        if any(not x > 0 for x in lat) or not 0 <= self.latency_jitter < 1:
            raise ConfigError("latencies must be > 0 and latency_jitter in [0, 1)")
        if self.schedule is not None:
            for row in self.schedule:
                if any(not 0 <= int(v) < self.n_workers for v in row):
                    raise ConfigError("schedule references an unknown worker")

    @property
    def n_workers(self):
        return self.n_benign + self.n_byzantine

    def modes(self):
        if self.byzantine_modes:
            return list(self.byzantine_modes)
        return ["sign_flip"] * self.n_byzantine

    def availability_of(self, v):
        return self.availability[v] if isinstance(self.availability, list) else self.availability

    def latency_of(self, v):
        return self.latency[v] if isinstance(self.latency, list) else self.latency


@dataclass
class RunConfig:
    shape: ProblemShape
    evaluator: EvaluatorSpec
    sim: SimConfig = field(default_factory=SimConfig)
    inner: InnerConfig = field(default_factory=InnerConfig)
    upper: UpperConfig = field(default_factory=UpperConfig)
    gradient: GradientConfig = field(default_factory=GradientConfig)
    mode: str = "asyn"
    seed: int = 0
    worker_noise: float = 0.0
    trace_mc_samples: int = 256
    output_dir: str = "out"

    def __post_init__(self):
        if self.mode not in ("asyn", "cen"):
            raise ConfigError("mode must be 'asyn' or 'cen'")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.worker_noise < 0:
            raise ConfigError("worker_noise must be >= 0")

    def to_dict(self):
        return {
            "seed": self.seed,
            "mode": self.mode,
            "shape": self.shape.to_dict(),
            "evaluator": self.evaluator.to_dict(),
            "worker_noise": self.worker_noise,
            "sim": dataclasses.asdict(self.sim),
            "inner": dataclasses.asdict(self.inner),
            "upper": dataclasses.asdict(self.upper),
            "gradient": dataclasses.asdict(self.gradient),
            "trace_mc_samples": self.trace_mc_samples,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            shape = ProblemShape(**d.pop("shape"))
            evaluator = EvaluatorSpec.from_dict(d.pop("evaluator"))
            sections = {
                "sim": SimConfig,
                "inner": InnerConfig,
                "upper": UpperConfig,
                "gradient": GradientConfig,
            }
            kwargs = {key: klass(**d.pop(key, {})) for key, klass in sections.items()}
            return cls(shape=shape, evaluator=evaluator, **kwargs, **d)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
