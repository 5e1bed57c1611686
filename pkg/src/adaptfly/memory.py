"""Global key-value prompt pool.

Agents append entries to a pending set (grow phase); a consolidation pass
merges sufficiently similar pending entries into the refined set with EMA
weighting and enforces capacity by evicting the least recently retrieved
entries (refine phase). Queries rank entries by cosine similarity between
unit keys, so similarity reduces to a dot product.

The pool supports many concurrent readers and serialized writers: insert
only appends to the pending list, refine runs as an exclusive batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    CompositionError,
    ConfigError,
    DeferredNotResolvedError,
    DegenerateKeyError,
    EmptyPoolError,
    ResolutionError,
)
from .prompts import TokenPrompt

__all__ = [
    "PoolConfig",
    "DeferredMarker",
    "PoolEntry",
    "PromptPool",
    "assemble",
]


def _unit(key: np.ndarray) -> np.ndarray:
    key = np.asarray(key, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(key))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateKeyError("key/query vector must be nonzero and finite")
    out = key / norm
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PoolConfig:
    """Pool sizing and consolidation knobs."""

    capacity: int = 256
    merge_threshold: float = 0.95
    merge_weight: float = 0.3
    top_n: int = 2

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("capacity must be at least 1")
        if not (0.0 < self.merge_threshold <= 1.0):
            raise ConfigError("merge threshold must lie in (0, 1]")
        if not (0.0 < self.merge_weight <= 1.0):
            raise ConfigError("merge weight must lie in (0, 1]")
        if self.top_n < 1:
            raise ConfigError("top-N must be at least 1")


@dataclass(frozen=True)
class DeferredMarker:
    """Placeholder value: a domain query embedding awaiting distillation."""

    query: np.ndarray
    agent_id: str

    def __post_init__(self):
        object.__setattr__(self, "query", _unit(self.query))


@dataclass
class PoolEntry:
    """One key-value record. ``agent_id`` holds all contributors, comma-joined."""

    entry_id: int
    key: np.ndarray
    value: TokenPrompt | DeferredMarker
    timestamp: int
    agent_id: str
    domain_tag: str | None = None
    last_retrieved: int = 0

    @property
    def is_deferred(self) -> bool:
        return isinstance(self.value, DeferredMarker)

    def to_dict(self) -> dict:
        d = {
            "entry_id": self.entry_id,
            "key": [float(x) for x in self.key],
            "timestamp": self.timestamp,
            "agent_id": self.agent_id,
            "domain_tag": self.domain_tag,
        }
        if self.is_deferred:
            d["deferred"] = {
                "query": [float(x) for x in self.value.query],
                "agent_id": self.value.agent_id,
            }
        else:
            d["value"] = self.value.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoolEntry":
        if "deferred" in d:
            value = DeferredMarker(
                np.asarray(d["deferred"]["query"]), d["deferred"]["agent_id"]
            )
        else:
            value = TokenPrompt.from_dict(d["value"])
        return cls(
            entry_id=int(d["entry_id"]),
            key=_unit(np.asarray(d["key"])),
            value=value,
            timestamp=int(d["timestamp"]),
            agent_id=d["agent_id"],
            domain_tag=d.get("domain_tag"),
            last_retrieved=int(d["timestamp"]),
        )


def assemble(entries: list[PoolEntry]) -> TokenPrompt:
    """Concatenate retrieved prompts row-wise in the given (similarity) order.

    All entries must be concrete and share the token dimension. An empty
    list yields the empty prompt, which composes as the identity.
    """
    if not entries:
        return TokenPrompt(np.zeros((0, 0)))
    blocks = []
    dim = None
    for e in entries:
        if e.is_deferred:
            raise DeferredNotResolvedError(
                f"entry {e.entry_id} is deferred; resolve it before assembly"
            )
        if dim is None:
            dim = e.value.dim
        elif e.value.dim != dim:
            raise CompositionError(
                f"entry {e.entry_id} dim {e.value.dim} != expected {dim}"
            )
        blocks.append(np.asarray(e.value.values, dtype=np.float64))
    return TokenPrompt(np.vstack(blocks))


class PromptPool:
    """Grow-and-refine prompt memory. One writer at a time; readers free."""

    def __init__(self, config: PoolConfig | None = None):
        self.config = config or PoolConfig()
        self._refined: list[PoolEntry] = []
        self._pending: list[PoolEntry] = []
        self._next_id = 0

    # -- sizes ----------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._refined) + len(self._pending)

    @property
    def refined_size(self) -> int:
        return len(self._refined)

    @property
    def pending_size(self) -> int:
        return len(self._pending)

    def entries(self) -> list[PoolEntry]:
        return list(self._refined) + list(self._pending)

    def get(self, entry_id: int) -> PoolEntry | None:
        for e in self._refined + self._pending:
            if e.entry_id == entry_id:
                return e
        return None

    # -- grow -----------------------------------------------------------

    def insert(
        self,
        key: np.ndarray,
        value: TokenPrompt | DeferredMarker,
        timestamp: int,
        agent_id: str,
        domain_tag: str | None = None,
    ) -> PoolEntry:
        """Append an entry to the pending set; capacity is enforced at refine."""
        entry = PoolEntry(
            entry_id=self._next_id,
            key=_unit(key),
            value=value,
            timestamp=int(timestamp),
            agent_id=agent_id,
            domain_tag=domain_tag,
            last_retrieved=int(timestamp),
        )
        self._next_id += 1
        self._pending.append(entry)
        return entry

    # -- retrieve ---------------------------------------------------------

    def query_topn(self, q: np.ndarray, n: int, step: int = 0) -> list[PoolEntry]:
        """Refined entries by descending cosine similarity, ties by entry id.

        Returns min(n, refined size) entries and stamps their last_retrieved
        with ``step``. Pending entries become visible only after the next
        refine pass: queries serve the consolidated view of the pool.
        """
        if self.size == 0:
            raise EmptyPoolError("query against an empty pool")
        entries = self._refined
        qn = _unit(q)
        sims = [float(qn @ e.key) for e in entries]
        order = sorted(range(len(entries)), key=lambda i: (-sims[i], entries[i].entry_id))
        hits = [entries[i] for i in order[: max(0, n)]]
        for e in hits:
            e.last_retrieved = max(e.last_retrieved, int(step))
        return hits

    # -- refine -----------------------------------------------------------

    def _merge_target(self, entry: PoolEntry) -> tuple[int, float] | None:
        if not self._refined:
            return None
        sims = np.array([float(entry.key @ e.key) for e in self._refined])
        idx = int(np.argmax(sims))  # first max: lowest entry id wins ties
        return idx, float(sims[idx])

    @staticmethod
    def _mergeable(old: PoolEntry, new: PoolEntry) -> bool:
        # Deferred markers never participate in value averaging.
        if old.is_deferred or new.is_deferred:
            return False
        return (old.value.rows, old.value.dim) == (new.value.rows, new.value.dim)

    def refine(self) -> None:
        """Consolidate pending entries, then enforce capacity.

        Pending entries fold in serialized (timestamp, entry_id) order so
        any interleaving of inserts and refine calls yields the same pool.
        """
        eta = self.config.merge_weight
        pending = sorted(self._pending, key=lambda e: (e.timestamp, e.entry_id))
        self._pending = []
        for entry in pending:
            target = self._merge_target(entry)
            if target is not None:
                idx, sim = target
                old = self._refined[idx]
                if sim >= self.config.merge_threshold and self._mergeable(old, entry):
                    merged_values = (1.0 - eta) * np.asarray(
                        old.value.values, dtype=np.float64
                    ) + eta * np.asarray(entry.value.values, dtype=np.float64)
                    old.value = TokenPrompt(merged_values, dtype=old.value.dtype)
                    old.key = _unit((1.0 - eta) * old.key + eta * entry.key)
                    old.timestamp = max(old.timestamp, entry.timestamp)
                    old.last_retrieved = max(old.last_retrieved, entry.last_retrieved)
                    contributors = set(old.agent_id.split(",")) | set(
                        entry.agent_id.split(",")
                    )
                    old.agent_id = ",".join(sorted(contributors))
                    if old.domain_tag is None:
                        old.domain_tag = entry.domain_tag
                    continue
            self._refined.append(entry)
        while len(self._refined) > self.config.capacity:
            victim = min(
                self._refined,
                key=lambda e: (e.last_retrieved, e.timestamp, e.entry_id),
            )
            self._refined.remove(victim)

    # -- deferred resolution ----------------------------------------------

    def resolve_deferred(self, entry_id: int, distiller) -> PoolEntry:
        """Materialize a deferred entry via ``distiller(marker) -> TokenPrompt``.

        Resolving an already-concrete entry is a no-op. If the distiller
        raises ResolutionError (lost provenance), the entry is removed from
        the pool so queries stop serving it, and the error propagates.
        """
        entry = self.get(entry_id)
        if entry is None:
            raise ResolutionError(f"no entry {entry_id} in pool")
        if not entry.is_deferred:
            return entry
        try:
            prompt = distiller(entry.value)
        except ResolutionError:
            self.drop(entry_id)
            raise
        if not isinstance(prompt, TokenPrompt):
            raise ResolutionError(f"distiller returned {type(prompt).__name__}")
        entry.value = prompt
        return entry

    def drop(self, entry_id: int) -> None:
        self._refined = [e for e in self._refined if e.entry_id != entry_id]
        self._pending = [e for e in self._pending if e.entry_id != entry_id]

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        """Write one JSON object per refined entry (pending flushes first)."""
        self.refine()
        with open(path, "w", encoding="utf-8") as f:
            for e in sorted(self._refined, key=lambda e: e.entry_id):
                f.write(json.dumps(e.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path, config: PoolConfig | None = None) -> "PromptPool":
        pool = cls(config)
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                entry = PoolEntry.from_dict(json.loads(line))
                pool._refined.append(entry)
                pool._next_id = max(pool._next_id, entry.entry_id + 1)
        pool._refined.sort(key=lambda e: e.entry_id)
        return pool
