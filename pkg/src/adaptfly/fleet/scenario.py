"""Lockstep scenario orchestration and metrics.

All agents advance one frame per step; agents interact only through the
consolidation server, which receives a refine tick every
``pool.refine_period`` steps and a final flush at the end. Every random
draw comes from a per-agent seeded stream, so the metrics table is a pure
function of (config, seed) regardless of the transport.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from ..drift import DriftTracker, calibrate_threshold, compute_stats, detect
from ..errors import ConfigError
from ..memory import PoolConfig, PromptPool
from ..oracle import ToyOracle, make_toy_oracle, render_frame
from .agents import RECORD_COLUMNS, LimitedAgent, MassiveAgent, StepRecord
from .config import AgentSpec, ScenarioConfig
from .mec import MecServer, ProvenanceLog
from .messages import RefineTick
from .transport import InprocClient, StreamClient

__all__ = ["ScenarioResult", "run_scenario", "metrics_csv", "calibrate_scenario"]


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    records: list[StepRecord]
    pool: PromptPool
    summary: dict


def _segment_at(spec: AgentSpec, t: int):
    """(segment, domain_id) active at step t."""
    acc = 0
    for seg in spec.schedule:
        if t < acc + seg.frames:
            return seg
        acc += seg.frames
    raise ConfigError(f"step {t} beyond agent {spec.id} schedule")


def _make_oracle(cfg: ScenarioConfig) -> ToyOracle:
    o = cfg.oracle
    return make_toy_oracle(
        seed=o.seed,
        classes=o.classes,
        height=o.height,
        width=o.width,
        stem_channels=o.stem_channels,
        patch=o.patch,
        temperature=o.temperature,
    )


def _calibrated_threshold(
    cfg: ScenarioConfig, spec: AgentSpec, oracle: ToyOracle, domains: dict, agent_index: int
) -> float:
    """Quantile threshold from a dedicated clean stream of the first domain."""
    if not isinstance(spec.threshold, str):
        return float(spec.threshold)
    if cfg.calibration_frames - spec.warmup < 30:
        raise ConfigError(
            f"calibration needs warmup + 30 frames, got {cfg.calibration_frames}"
        )
    domain = domains[spec.schedule[0].domain]
    tracker = DriftTracker(
        smoothing=spec.smoothing, threshold=1.0, warmup=spec.warmup,
        kl_variant=cfg.kl_variant,
    )
    scores = []
    for i in range(cfg.calibration_frames):
        # Negative frame indices keep the calibration stream disjoint from
        # the scenario's own frames.
        frame = render_frame(oracle, domain, frame_index=-(agent_index * 100_003 + i + 1))
        _, score, _ = detect(tracker, compute_stats(oracle.stem_features(frame)))
        scores.append(score)
    return calibrate_threshold(scores[spec.warmup :], cfg.calibration_quantile)


def run_scenario(config: dict | ScenarioConfig) -> ScenarioResult:
    """Run a scenario to completion; deterministic given the config."""
    cfg = ScenarioConfig.from_dict(config) if isinstance(config, dict) else config
    oracle = _make_oracle(cfg)
    domains = {d.id: d for d in cfg.domains}
    pool = PromptPool(
        PoolConfig(
            capacity=cfg.pool.capacity,
            merge_threshold=cfg.pool.tau_merge,
            merge_weight=cfg.pool.eta,
        )
    )
    provenance = ProvenanceLog(window=cfg.provenance_window)
    distill_config = cfg.distill_config(default_rows=oracle.num_patches)
    server = MecServer(pool, oracle, distill_config, provenance)

    clock = {"t": -1}
    fault_set = set(cfg.faults)

    def client_for(agent_id: str):
        def fault_hook(_msg):
            return (agent_id, clock["t"]) in fault_set

        if cfg.transport == "stream":
            return StreamClient(server, fault_hook)
        return InprocClient(server, fault_hook)

    controller = client_for("__controller__")

    agents = []
    for idx, spec in enumerate(cfg.agents):
        threshold = _calibrated_threshold(cfg, spec, oracle, domains, idx)
        tracker = DriftTracker(
            smoothing=spec.smoothing, threshold=threshold, warmup=spec.warmup,
            kl_variant=cfg.kl_variant,
        )
        client = client_for(spec.id)
        if spec.kind == "limited":
            agent = LimitedAgent(spec.id, oracle, client, tracker, spec.retrieval_n)
        else:
            agent = MassiveAgent(
                spec.id,
                oracle,
                client,
                tracker,
                cma_options=spec.cma_options(),
                distill_config=distill_config,
                provenance=provenance,
                rho=spec.rho,
                mc_passes=spec.mc_passes,
                dropout_rate=spec.dropout_rate,
                delta_refresh=spec.delta_refresh,
                defer_distill=spec.defer_distill,
                seed=cfg.seed * 10_007 + idx + 1,
            )
        agents.append((idx, spec, agent, [0, 0]))  # last item: cumulative offset

    records: list[StepRecord] = []
    for t in range(cfg.total_frames):
        clock["t"] = t
        for idx, spec, agent, offset in agents:
            seg = _segment_at(spec, t)
            if t > 0:
                offset[0] += seg.motion[0]
                offset[1] += seg.motion[1]
            frame = render_frame(
                oracle,
                domains[seg.domain],
                frame_index=idx * 1_000_003 + t,
                offset=(offset[0], offset[1]),
            )
            record = agent.step(t, frame, motion=seg.motion, domain_tag=seg.domain)
            record.pool_size = pool.size
            records.append(record)
        provenance.advance(t)
        if (t + 1) % cfg.pool.refine_period == 0:
            controller.send(RefineTick())
    controller.send(RefineTick())  # final flush of pending entries

    summary = _summarize(cfg, records, pool)
    return ScenarioResult(config=cfg, records=records, pool=pool, summary=summary)


def _summarize(cfg: ScenarioConfig, records: list[StepRecord], pool: PromptPool) -> dict:
    by_agent: dict[str, list[StepRecord]] = {}
    for r in records:
        by_agent.setdefault(r.agent_id, []).append(r)

    agents = {}
    for spec in cfg.agents:
        rows = by_agent.get(spec.id, [])
        counts: dict[str, int] = {}
        for r in rows:
            counts[r.adaptation_event] = counts.get(r.adaptation_event, 0) + 1

        domain_steps: dict[str, list[StepRecord]] = {}
        for r in rows:
            domain_steps.setdefault(_segment_at(spec, r.step).domain, []).append(r)

        success_event = "retrieve" if spec.kind == "limited" else "optimize"
        domains = {}
        for dom, drows in domain_steps.items():
            first = None
            for r in drows:
                hit = r.adaptation_event == success_event and (
                    spec.kind == "massive" or r.retrieved > 0
                )
                if hit:
                    first = r.step
                    break
            pre = [r.mean_entropy for r in drows if first is None or r.step < first]
            post = [r.mean_entropy for r in drows if first is not None and r.step >= first]
            domains[dom] = {
                "frames": len(drows),
                "mean_entropy": float(np.mean([r.mean_entropy for r in drows])),
                "first_adaptation_step": first,
                "pre_adaptation_mean_entropy": float(np.mean(pre)) if pre else None,
                "post_adaptation_mean_entropy": float(np.mean(post)) if post else None,
            }
        agents[spec.id] = {
            "kind": spec.kind,
            "adaptation_counts": counts,
            "bytes_sent": int(sum(r.bytes_sent for r in rows)),
            "bytes_received": int(sum(r.bytes_received for r in rows)),
            "degraded_steps": int(sum(r.degraded for r in rows)),
            "domains": domains,
        }
    return {
        "seed": cfg.seed,
        "transport": cfg.transport,
        "frames": cfg.total_frames,
        "agents": agents,
        "pool_size": pool.size,
    }


def metrics_csv(records: list[StepRecord]) -> str:
    """Render records as CSV, one row per (step, agent)."""
    out = io.StringIO()
    out.write(",".join(RECORD_COLUMNS) + "\n")
    for r in records:
        row = []
        for col, v in zip(RECORD_COLUMNS, r.as_row()):
            if isinstance(v, bool):
                row.append(str(int(v)))
            elif isinstance(v, float):
                row.append(repr(v))
            else:
                row.append(str(v))
        out.write(",".join(row) + "\n")
    return out.getvalue()


def calibrate_scenario(config: dict | ScenarioConfig, quantile: float = 0.99) -> dict:
    """Drift scores of a clean scenario, reduced to one threshold.

    Pools post-warmup scores across all agents' streams and returns the
    empirical quantile, ready to paste into a scenario config as ``z``.
    """
    cfg = ScenarioConfig.from_dict(config) if isinstance(config, dict) else config
    oracle = _make_oracle(cfg)
    domains = {d.id: d for d in cfg.domains}
    scores: list[float] = []
    for idx, spec in enumerate(cfg.agents):
        tracker = DriftTracker(
            smoothing=spec.smoothing, threshold=1.0, warmup=spec.warmup,
            kl_variant=cfg.kl_variant,
        )
        offset = [0, 0]
        for t in range(spec.total_frames):
            seg = _segment_at(spec, t)
            if t > 0:
                offset[0] += seg.motion[0]
                offset[1] += seg.motion[1]
            frame = render_frame(
                oracle, domains[seg.domain],
                frame_index=idx * 1_000_003 + t, offset=(offset[0], offset[1]),
            )
            _, score, _ = detect(tracker, compute_stats(oracle.stem_features(frame)))
            if t >= spec.warmup:
                scores.append(score)
    return {
        "z": calibrate_threshold(scores, quantile),
        "variant": cfg.kl_variant,
        "quantile": quantile,
    }
