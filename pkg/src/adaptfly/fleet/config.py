"""Scenario configuration: parsing, validation, and the reference scenario.

Configs are plain JSON-compatible dicts with a strictly validated key set;
unknown keys are rejected so typos fail fast instead of silently using
defaults. See README for the full schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..cmaes import CmaConfig
from ..distill import DistillConfig
from ..errors import ConfigError
from ..oracle import DomainSpec

__all__ = [
    "SegmentSpec",
    "AgentSpec",
    "OracleSettings",
    "PoolSettings",
    "ScenarioConfig",
    "reference_config",
    "clean_config",
]

TRANSPORTS = ("inproc", "stream")
KINDS = ("limited", "massive")


def _take(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


@dataclass(frozen=True)
class SegmentSpec:
    """One stretch of an agent's stream: a domain, a length, a camera motion."""

    domain: str
    frames: int
    motion: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("segment frame count must be at least 1")

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "SegmentSpec":
        _take(d, {"domain", "frames", "motion"}, where)
        motion = tuple(int(m) for m in d.get("motion", (0, 0)))
        if len(motion) != 2:
            raise ConfigError(f"motion must be (dy, dx) in {where}")
        return cls(domain=d["domain"], frames=int(d["frames"]), motion=motion)


@dataclass(frozen=True)
class AgentSpec:
    """Static description of one agent."""

    id: str
    kind: str
    schedule: tuple[SegmentSpec, ...]
    smoothing: float = 0.1
    threshold: float | str = "auto"   # positive number, or "auto" to calibrate
    warmup: int = 10
    retrieval_n: int = 2              # limited only
    rho: float = 0.05                 # massive only
    mc_passes: int = 4
    dropout_rate: float = 0.1
    delta_refresh: float = 0.1
    defer_distill: bool = False
    cma: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"agent kind must be one of {KINDS}, got {self.kind!r}")
        if not self.schedule:
            raise ConfigError(f"agent {self.id} needs a schedule")
        if isinstance(self.threshold, str) and self.threshold != "auto":
            raise ConfigError(f"threshold must be a number or 'auto', got {self.threshold!r}")
        if not isinstance(self.threshold, str) and self.threshold <= 0:
            raise ConfigError("threshold must be positive")

    @property
    def total_frames(self) -> int:
        return sum(s.frames for s in self.schedule)

    def cma_options(self) -> dict:
        allowed = {
            "population", "elite", "generations", "sigma0", "mode",
            "cov_floor", "diagonal", "tol_f",
        }
        _take(self.cma, allowed, f"agents[{self.id}].cma")
        CmaConfig(dimension=3, **self.cma)  # validate values eagerly
        return dict(self.cma)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        where = f"agents[{d.get('id', '?')}]"
        _take(
            d,
            {
                "id", "kind", "schedule", "lambda", "z", "warmup", "n", "rho",
                "mc_passes", "dropout_rate", "delta_refresh", "defer_distill", "cma",
            },
            where,
        )
        schedule = tuple(
            SegmentSpec.from_dict(s, f"{where}.schedule") for s in d.get("schedule", ())
        )
        return cls(
            id=d["id"],
            kind=d["kind"],
            schedule=schedule,
            smoothing=float(d.get("lambda", 0.1)),
            threshold=d.get("z", "auto"),
            warmup=int(d.get("warmup", 10)),
            retrieval_n=int(d.get("n", 2)),
            rho=float(d.get("rho", 0.05)),
            mc_passes=int(d.get("mc_passes", 4)),
            dropout_rate=float(d.get("dropout_rate", 0.1)),
            delta_refresh=float(d.get("delta_refresh", 0.1)),
            defer_distill=bool(d.get("defer_distill", False)),
            cma=dict(d.get("cma", {})),
        )


@dataclass(frozen=True)
class OracleSettings:
    seed: int = 7
    classes: int = 5
    height: int = 32
    width: int = 32
    stem_channels: int = 8
    patch: int = 4
    temperature: float = 0.08

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSettings":
        _take(
            d,
            {"seed", "classes", "height", "width", "stem_channels", "patch", "temperature"},
            "oracle",
        )
        return cls(**{k: d[k] for k in d})


@dataclass(frozen=True)
class PoolSettings:
    capacity: int = 256
    tau_merge: float = 0.95
    eta: float = 0.3
    refine_period: int = 2

    def __post_init__(self):
        if self.refine_period < 1:
            raise ConfigError("refine period must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PoolSettings":
        _take(d, {"capacity", "tau_merge", "eta", "refine_period"}, "pool")
        return cls(**{k: d[k] for k in d})


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario description; run with fleet.run_scenario."""

    seed: int
    oracle: OracleSettings
    domains: tuple[DomainSpec, ...]
    agents: tuple[AgentSpec, ...]
    pool: PoolSettings = PoolSettings()
    transport: str = "inproc"
    kl_variant: str = "standard"
    distill: dict = field(default_factory=dict)
    calibration_frames: int = 120
    calibration_quantile: float = 0.99
    provenance_window: int = 64
    faults: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"transport must be one of {TRANSPORTS}")
        if self.kl_variant not in ("standard", "simplified"):
            raise ConfigError("kl_variant must be 'standard' or 'simplified'")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ConfigError("agent ids must be unique")
        if not self.agents:
            raise ConfigError("scenario needs at least one agent")
        lengths = {a.total_frames for a in self.agents}
        if len(lengths) != 1:
            raise ConfigError(
                f"all agents must stream the same number of frames, got {sorted(lengths)}"
            )
        known = {d.id for d in self.domains}
        for a in self.agents:
            for seg in a.schedule:
                if seg.domain not in known:
                    raise ConfigError(f"agent {a.id} references unknown domain {seg.domain!r}")

    @property
    def total_frames(self) -> int:
        return self.agents[0].total_frames

    def distill_config(self, default_rows: int) -> DistillConfig:
        _take(self.distill, {"rows", "steps", "frames", "precision", "step_size"}, "distill")
        d = dict(self.distill)
        d.setdefault("rows", default_rows)
        if d["rows"] is None:
            d["rows"] = default_rows
        return DistillConfig(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        _take(
            d,
            {
                "seed", "oracle", "domains", "agents", "pool", "transport",
                "kl_variant", "distill", "calibration", "provenance_window", "faults",
            },
            "scenario",
        )
        calibration = dict(d.get("calibration", {}))
        _take(calibration, {"frames", "quantile"}, "calibration")
        faults = []
        for f in d.get("faults", ()):
            _take(f, {"agent", "step"}, "faults[]")
            faults.append((f["agent"], int(f["step"])))
        return cls(
            seed=int(d.get("seed", 0)),
            oracle=OracleSettings.from_dict(d.get("oracle", {})),
            domains=tuple(DomainSpec.from_dict(x) for x in d.get("domains", ())),
            agents=tuple(AgentSpec.from_dict(x) for x in d.get("agents", ())),
            pool=PoolSettings.from_dict(d.get("pool", {})),
            transport=d.get("transport", "inproc"),
            kl_variant=d.get("kl_variant", "standard"),
            distill=dict(d.get("distill", {})),
            calibration_frames=int(calibration.get("frames", 120)),
            calibration_quantile=float(calibration.get("quantile", 0.99)),
            provenance_window=int(d.get("provenance_window", 64)),
            faults=tuple(faults),
        )


def reference_config(seed: int = 0, transport: str = "inproc") -> dict:
    """The three-domain reference scenario: one massive scout, two limited.

    All agents stream base -> dusk -> fog -> rain in lockstep. The massive
    agent optimizes and uploads at each boundary; after the next
    consolidation tick the limited agents retrieve the distilled prompt
    and their entropy on that domain drops.
    """
    def schedule() -> list[dict]:
        return [
            {"domain": dom, "frames": 20, "motion": [0, 0]}
            for dom in ("base", "dusk", "fog", "rain")
        ]

    def agent_common() -> dict:
        # fresh nested objects per agent: callers may mutate their copy
        return {"lambda": 0.1, "z": "auto", "warmup": 6, "schedule": schedule()}
    # The three shifts raise mean entropy well clear of the source level and
    # their domain embeddings are nearly orthogonal, so retrieval separates
    # them cleanly. delta_refresh sits above the deterministic map jitter
    # (~0.15) and below the cross-domain change (~0.9).
    return {
        "seed": seed,
        "oracle": {"seed": 7, "classes": 5, "height": 32, "width": 32, "stem_channels": 8},
        "domains": [
            {"id": "base", "gain": [1.0, 1.0, 1.0], "bias": [0.0, 0.0, 0.0],
             "noise_scale": 0.01, "seed": 101 + seed},
            {"id": "dusk", "gain": [0.834, 0.765, 0.798], "bias": [-0.248, 0.22, 0.202],
             "noise_scale": 0.01, "seed": 202 + seed},
            {"id": "fog", "gain": [0.715, 0.733, 0.84], "bias": [0.145, -0.289, 0.282],
             "noise_scale": 0.01, "seed": 303 + seed},
            {"id": "rain", "gain": [0.625, 0.895, 0.619], "bias": [0.142, -0.154, -0.118],
             "noise_scale": 0.01, "seed": 404 + seed},
        ],
        "agents": [
            {"id": "uav-h1", "kind": "massive", "rho": 0.05, "mc_passes": 4,
             "dropout_rate": 0.1, "delta_refresh": 0.5,
             "cma": {"population": 16, "elite": 8, "generations": 30, "sigma0": 0.25},
             **agent_common()},
            {"id": "uav-l1", "kind": "limited", "n": 2, **agent_common()},
            {"id": "uav-l2", "kind": "limited", "n": 2, **agent_common()},
        ],
        "pool": {"capacity": 64, "tau_merge": 0.95, "eta": 0.3, "refine_period": 2},
        "distill": {"rows": None, "steps": 8, "frames": 5, "precision": "f32"},
        "transport": transport,
        "kl_variant": "standard",
    }


def clean_config(seed: int = 0, frames: int = 60) -> dict:
    """Single-domain scenario with no shifts, for threshold calibration."""
    return {
        "seed": seed,
        "oracle": {"seed": 7, "classes": 5, "height": 32, "width": 32, "stem_channels": 8},
        "domains": [
            {"id": "base", "gain": [1.0, 1.0, 1.0], "bias": [0.0, 0.0, 0.0],
             "noise_scale": 0.01, "seed": 101 + seed},
        ],
        "agents": [
            {"id": "uav-h1", "kind": "massive", "z": 1e9, "warmup": 6,
             "schedule": [{"domain": "base", "frames": frames, "motion": [0, 0]}]},
            {"id": "uav-l1", "kind": "limited", "z": 1e9, "warmup": 6,
             "schedule": [{"domain": "base", "frames": frames, "motion": [0, 0]}]},
        ],
        "transport": "inproc",
        "kl_variant": "standard",
    }
