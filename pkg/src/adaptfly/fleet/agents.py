"""Per-agent adaptation loops.

Limited agents are forward-only: on detected drift they fetch the most
similar token prompts from the server, assemble them, and keep predicting
with the cached assembly until the next drift. They never optimize.

Massive agents optimize a sparse visual prompt on drift, distill it into a
token prompt (or register a deferred marker), upload it, and on quiet
frames warp the previous prompt along the known camera motion,
re-optimizing only when the warp sheds too many pixels or the uncertainty
map moves materially.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cmaes import CmaConfig, optimize_svp
from ..distill import DistillConfig, distill_iterative
from ..drift import DriftTracker, compute_stats, detect, reset_reference
from ..memory import PoolEntry, assemble
from ..oracle import mean_entropy
from ..prompts import (
    SparseVisualPrompt,
    TokenPrompt,
    apply_svp,
    place_mask,
    sparsity_budget,
    warp_svp,
)
from .mec import ProvenanceLog
from .messages import Query, RegisterDeferred, UploadPrompt
from .transport import TransportFailure

__all__ = ["StepRecord", "LimitedAgent", "MassiveAgent", "RECORD_COLUMNS"]

RECORD_COLUMNS = (
    "step",
    "agent_id",
    "domain",
    "drift_score",
    "shift_flag",
    "mean_entropy",
    "adaptation_event",
    "bytes_sent",
    "bytes_received",
    "pool_size",
    "retrieved",
    "degraded",
)


@dataclass
class StepRecord:
    """One row of the metrics table: what one agent did at one step."""

    step: int
    agent_id: str
    domain: str
    drift_score: float
    shift_flag: bool
    mean_entropy: float
    adaptation_event: str  # none | retrieve | optimize | warp
    bytes_sent: int
    bytes_received: int
    pool_size: int = 0
    retrieved: int = 0
    degraded: bool = False

    def as_row(self) -> list:
        return [getattr(self, c) for c in RECORD_COLUMNS]


class _ByteWindow:
    """Captures a client's byte-counter deltas across one step."""

    def __init__(self, client):
        self.client = client
        self.sent0 = client.bytes_sent
        self.recv0 = client.bytes_received

    def deltas(self) -> tuple[int, int]:
        return (
            self.client.bytes_sent - self.sent0,
            self.client.bytes_received - self.recv0,
        )


class LimitedAgent:
    """Forward-only retrieval adaptation."""

    kind = "limited"

    # A retrieved assembly is adopted only when the best hit's key actually
    # matches the query this closely AND the assembly lowers entropy on the
    # current frame. Below the floor the hit is some other domain's prompt;
    # the detector then stays hot and the retrieval is retried, so an
    # irrelevant early hit cannot disarm adaptation before the right prompt
    # reaches the pool.
    ADOPT_SIMILARITY_FLOOR = 0.9

    def __init__(self, agent_id: str, oracle, client, tracker: DriftTracker, retrieval_n: int = 2):
        self.agent_id = agent_id
        self.oracle = oracle
        self.client = client
        self.tracker = tracker
        self.retrieval_n = retrieval_n
        self.cached = TokenPrompt(np.zeros((0, 0)))
        self._adopted_ids: tuple[int, ...] = ()
        self._request_id = 0

    def _improves(self, frame: np.ndarray, candidate: TokenPrompt) -> bool:
        baseline = mean_entropy(self.oracle.predict(frame))
        adapted = mean_entropy(
            self.oracle.predict(frame, candidate if candidate.rows else None)
        )
        return adapted < baseline - 1e-9 * (1.0 + baseline)

    def step(
        self, t: int, frame: np.ndarray, motion=(0, 0), domain_tag: str | None = None
    ) -> StepRecord:
        window = _ByteWindow(self.client)
        stats = compute_stats(self.oracle.stem_features(frame))
        shift, score, _ = detect(self.tracker, stats)
        event, retrieved, degraded = "none", 0, False

        if shift:
            event = "retrieve"
            q = self.oracle.query_embedding(frame)
            self._request_id += 1
            try:
                response = self.client.request(
                    Query(query=tuple(q), n=self.retrieval_n, request_id=self._request_id)
                )
                entries = [PoolEntry.from_dict(d) for d in response.entries]
                relevant = entries and float(q @ entries[0].key) >= self.ADOPT_SIMILARITY_FLOOR
                candidate = assemble(entries)
                if relevant and self._improves(frame, candidate):
                    self.cached = candidate
                    retrieved = len(entries)
                    ids = tuple(e.entry_id for e in entries)
                    if ids != self._adopted_ids:
                        # Genuinely new content: re-arm detection for the
                        # next shift. Re-pulling the same entries (a tail
                        # score on a quiet stream) must not re-anchor, or
                        # the settling window could blind the detector
                        # across a real boundary.
                        self._adopted_ids = ids
                        reset_reference(self.tracker, stats)
                else:
                    # A detected shift expires the stale assembly: it was
                    # selected for the previous domain. The agent predicts
                    # unprompted until a relevant prompt can be adopted.
                    self.cached = TokenPrompt(np.zeros((0, 0)))
                    self._adopted_ids = ()
            except TransportFailure:
                degraded = True  # previous assembly stays in use

        prompt = self.cached if self.cached.rows else None
        entropy = mean_entropy(self.oracle.predict(frame, prompt))
        sent, recv = window.deltas()
        return StepRecord(
            step=t,
            agent_id=self.agent_id,
            domain=domain_tag or "",
            drift_score=score,
            shift_flag=shift,
            mean_entropy=entropy,
            adaptation_event=event,
            bytes_sent=sent,
            bytes_received=recv,
            retrieved=retrieved,
            degraded=degraded,
        )


class MassiveAgent:
    """Sparse-prompt optimization with warp propagation and uploads."""

    kind = "massive"

    def __init__(
        self,
        agent_id: str,
        oracle,
        client,
        tracker: DriftTracker,
        cma_options: dict,
        distill_config: DistillConfig,
        provenance: ProvenanceLog,
        rho: float = 0.05,
        mc_passes: int = 4,
        dropout_rate: float = 0.1,
        delta_refresh: float = 0.1,
        defer_distill: bool = False,
        seed: int = 0,
    ):
        self.agent_id = agent_id
        self.oracle = oracle
        self.client = client
        self.tracker = tracker
        self.cma_options = dict(cma_options)
        self.distill_config = distill_config
        self.provenance = provenance
        self.rho = rho
        self.mc_passes = mc_passes
        self.dropout_rate = dropout_rate
        self.delta_refresh = delta_refresh
        self.defer_distill = defer_distill
        self.seed = seed
        self.current_svp = SparseVisualPrompt.zeros(
            np.zeros((0, 2), dtype=np.int64), oracle.frame_shape
        )
        self.ref_umap: np.ndarray | None = None
        self._domain_window: list[np.ndarray] = []
        self._retry_queue: list = []
        self.last_result = None

    # Per-step deterministic seed streams.
    def _mc_seed(self, t: int) -> int:
        return (self.seed * 1_000_003 + t) % (2**31)

    def _cma_seed(self, t: int) -> int:
        return (self.seed * 7_777_777 + t + 1) % (2**31)

    def _uncertainty(self, t: int, frame: np.ndarray) -> np.ndarray:
        return self.oracle.uncertainty_map(
            frame, self.mc_passes, self.dropout_rate, self._mc_seed(t)
        )

    def _trigger_map(self, frame: np.ndarray) -> np.ndarray:
        # Deterministic predictive entropy: noise-free, so the refresh
        # trigger compares scene change rather than Monte-Carlo jitter.
        return self.oracle.uncertainty_map(frame, 1, 0.0, 0)

    def _flush_retries(self) -> bool:
        degraded = False
        still_pending = []
        for msg in self._retry_queue:
            try:
                self.client.send(msg)
            except TransportFailure:
                degraded = True
                still_pending.append(msg)
        self._retry_queue = still_pending
        return degraded

    def _optimize(self, t: int, frame: np.ndarray, domain_tag: str | None = None) -> bool:
        """Full adaptation: place mask, search offsets, publish. Returns degraded."""
        h, w = self.oracle.frame_shape
        umap = self._uncertainty(t, frame)
        coords = place_mask(umap, sparsity_budget(self.rho, h, w))
        # Built per run: population defaults must scale with the mask size.
        config = CmaConfig(
            dimension=3 * coords.shape[0], seed=self._cma_seed(t), **self.cma_options
        )
        result = optimize_svp(self.oracle, frame, coords, config)
        self.current_svp = result.prompt
        self.ref_umap = self._trigger_map(frame)
        self.last_result = result

        self.provenance.record(self.agent_id, t, self._domain_window, result.prompt)
        key = self.oracle.query_embedding(frame)
        if self.defer_distill:
            msg = RegisterDeferred(
                query=tuple(key), agent_id=self.agent_id, timestamp=t,
                domain_tag=domain_tag,
            )
        else:
            prompt = distill_iterative(
                self.oracle, self._domain_window, result.prompt, self.distill_config
            )
            msg = UploadPrompt(
                key=tuple(key), value=prompt, timestamp=t, agent_id=self.agent_id,
                domain_tag=domain_tag,
            )
        try:
            self.client.send(msg)
            return False
        except TransportFailure:
            self._retry_queue.append(msg)
            return True

    def step(
        self, t: int, frame: np.ndarray, motion=(0, 0), domain_tag: str | None = None
    ) -> StepRecord:
        window = _ByteWindow(self.client)
        stats = compute_stats(self.oracle.stem_features(frame))
        shift, score, _ = detect(self.tracker, stats)
        degraded = self._flush_retries()

        if shift:
            self._domain_window = [frame]
        else:
            self._domain_window.append(frame)
            self._domain_window = self._domain_window[-self.distill_config.frames :]

        if shift:
            event = "optimize"
            degraded |= self._optimize(t, frame, domain_tag)
            # Local adaptation done; re-arm detection for the next shift.
            reset_reference(self.tracker, stats)
        elif self.current_svp.size:
            warped, refresh = warp_svp(self.current_svp, motion)
            umap = self._trigger_map(frame)
            ref_mass = float(np.abs(self.ref_umap).sum()) if self.ref_umap is not None else 0.0
            map_moved = (
                self.ref_umap is not None
                and float(np.abs(umap - self.ref_umap).sum()) / max(ref_mass, 1e-12)
                > self.delta_refresh
            )
            if refresh or map_moved:
                event = "optimize"
                degraded |= self._optimize(t, frame, domain_tag)
            else:
                event = "warp"
                self.current_svp = warped
        else:
            event = "none"

        entropy = mean_entropy(self.oracle.predict(apply_svp(frame, self.current_svp)))
        sent, recv = window.deltas()
        return StepRecord(
            step=t,
            agent_id=self.agent_id,
            domain=domain_tag or "",
            drift_score=score,
            shift_flag=shift,
            mean_entropy=entropy,
            adaptation_event=event,
            bytes_sent=sent,
            bytes_received=recv,
            degraded=degraded,
        )
