"""Experiment configuration: YAML on disk, dataclasses in memory, and a
canonical JSON serialization that the run manifest hashes for provenance."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .engine import SyncPolicy
from .errors import ConfigError
from .model import ModelConfig
from .optim import AdamWHyper, CosineSchedule, NesterovHyper
from .perfmodel import Topology, gbps_to_bytes_per_s

CODE_VERSION = "0.1.0"

# Built-in model sizes for sweeps: name -> (d_model, n_layers, n_heads).
# Non-embedding counts at vocab 64 / seq 64 range from ~1e4 to ~5.5e5.
SIZE_TABLE = {
    "xs": (16, 3, 4),
    "s": (32, 4, 4),
    "m": (64, 4, 8),
    "l": (96, 5, 8),
}


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"     # "synthetic" | "file"
    kind: str = "markov"          # synthetic kind
    seed: int = 0
    length_tokens: int = 2_000_000
    entropy: float = 3.4657       # ln 32
    period: int = 16
    path: str | None = None       # token/text file for source = "file"
    val_fraction: float = 0.1


@dataclass(frozen=True)
class ScheduleConfig:
    global_batch_tokens: int = 65536
    total_rounds: int = 8
    lr_peak: float = 5e-3
    final_fraction: float = 0.1
    warmup_steps: int | None = None   # None -> 1% of total inner steps


@dataclass(frozen=True)
class EvalConfig:
    token_budget: int = 200_000
    every: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    topology: Topology = field(default_factory=lambda: Topology(
        m=4, n=8, c_d=150e12, w=gbps_to_bytes_per_s(0.8)))
    policy: SyncPolicy = field(default_factory=SyncPolicy)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/run"
    master_seed: int = 0

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.policy.validate()
        B = self.schedule.global_batch_tokens
        m, L = self.topology.m, self.model.seq_len
        if B % (m * L) != 0:
            raise ConfigError(
                f"schedule.global_batch_tokens={B} must be divisible by "
                f"topology.m * model.seq_len = {m}*{L}={m * L}"
            )
        if self.data.source not in ("synthetic", "file"):
            raise ConfigError(f"data.source must be synthetic or file, got "
                              f"{self.data.source!r}")
        if self.data.source == "file" and not self.data.path:
            raise ConfigError("data.path required when data.source = file")
        if self.schedule.total_rounds < 0:
            raise ConfigError("schedule.total_rounds must be >= 0")
        return self

    @property
    def total_inner_steps(self) -> int:
        return self.schedule.total_rounds * self.policy.effective_s()

    def cosine_schedule(self) -> CosineSchedule:
        total = max(1, self.total_inner_steps)
        warmup = self.schedule.warmup_steps
        if warmup is None:
            warmup = round(0.01 * total)
        return CosineSchedule(lr_peak=self.schedule.lr_peak, total_steps=total,
                              final_fraction=self.schedule.final_fraction,
                              warmup_steps=warmup)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "model": asdict(cfg.model),
        "topology": asdict(cfg.topology),
        "policy": {
            "s": cfg.policy.s, "mode": cfg.policy.mode, "inner": cfg.policy.inner,
            "inner_hyper": asdict(cfg.policy.inner_hyper),
            "outer": asdict(cfg.policy.outer),
            "reset_inner_state": cfg.policy.reset_inner_state,
        },
        "schedule": asdict(cfg.schedule),
        "data": asdict(cfg.data),
        "eval": asdict(cfg.eval),
        "output_dir": cfg.output_dir,
        "master_seed": cfg.master_seed,
    }


def _coerce(d: dict, floats=(), ints=()) -> dict:
    """Cast numeric fields; YAML 1.1 reads e-notation without a sign
    ("1.5e14") as a string, so configs would otherwise need "1.5e+14"."""
    out = dict(d)
    for k in floats:
        if k in out and out[k] is not None:
            out[k] = float(out[k])
    for k in ints:
        if k in out and out[k] is not None:
            out[k] = int(out[k])
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    try:
        pol = d.get("policy", {})
        policy = SyncPolicy(
            s=pol.get("s", 32), mode=pol.get("mode", "local_sgd"),
            inner=pol.get("inner", "adamw"),
            inner_hyper=AdamWHyper(**pol.get("inner_hyper", {})),
            outer=NesterovHyper(**pol.get("outer", {})),
            reset_inner_state=pol.get("reset_inner_state", False),
        )
        topo = _coerce(d.get("topology", {}),
                       floats=("c_d", "w", "w_gbps", "bytes_per_param"),
                       ints=("m", "n"))
        if "w_gbps" in topo:
            topo["w"] = gbps_to_bytes_per_s(topo.pop("w_gbps"))
        sched = _coerce(d.get("schedule", {}),
                        floats=("lr_peak", "final_fraction"),
                        ints=("global_batch_tokens", "total_rounds",
                              "warmup_steps"))
        data = _coerce(d.get("data", {}),
                       floats=("entropy", "val_fraction"),
                       ints=("seed", "length_tokens", "period"))
        cfg = ExperimentConfig(
            model=ModelConfig(**d.get("model", {})),
            topology=Topology(**topo) if topo else ExperimentConfig().topology,
            policy=policy,
            schedule=ScheduleConfig(**sched),
            data=DataConfig(**data),
            eval=EvalConfig(**_coerce(d.get("eval", {}),
                                      ints=("token_budget", "every"))),
            output_dir=d.get("output_dir", "runs/run"),
            master_seed=d.get("master_seed", 0),
        )
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        d = yaml.safe_load(f)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(d)


def save_config(path, cfg: ExperimentConfig):
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)


def canonical_json(cfg: ExperimentConfig) -> str:
    """Canonical serialization used for hashing: sorted keys, tight separators."""
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    code_version: str = CODE_VERSION
    start_time: float = 0.0
    end_time: float = 0.0
    master_seed: int = 0
    files: list = field(default_factory=list)

    @classmethod
    def begin(cls, cfg: ExperimentConfig) -> "RunManifest":
        return cls(config_hash=config_hash(cfg), start_time=time.time(),
                   master_seed=cfg.master_seed)

    def finish(self, out_dir: Path):
        self.end_time = time.time()
        self.files = sorted(p.name for p in Path(out_dir).iterdir()
                            if p.name != "manifest.json")
        with open(Path(out_dir) / "manifest.json", "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


def resolve_output_dir(cfg: ExperimentConfig, override=None) -> Path:
    import os
    root = os.environ.get("LOCALSGD_LAB_OUT")
    path = Path(override) if override else Path(cfg.output_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path
