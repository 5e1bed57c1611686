import numpy as np
import pytest

from adaptfly.errors import (
    CompositionError,
    DeferredNotResolvedError,
    DegenerateKeyError,
    EmptyPoolError,
    ResolutionError,
)
from adaptfly.memory import DeferredMarker, PoolConfig, PoolEntry, PromptPool, assemble
from adaptfly.prompts import TokenPrompt


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def make_pool(**kw):
    return PromptPool(PoolConfig(**kw))


def prompt(rows=2, dim=4, fill=1.0):
    return TokenPrompt(np.full((rows, dim), fill))


class TestInsert:
    def test_insert_into_empty_pool(self):
        pool = make_pool()
        pool.insert(np.array([1.0, 0.0]), prompt(), timestamp=0, agent_id="a")
        assert pool.size == 1

    def test_key_normalized_direction_preserved(self):
        pool = make_pool()
        e = pool.insert(np.array([0.0, 2.0]), prompt(), timestamp=0, agent_id="a")
        np.testing.assert_allclose(e.key, [0.0, 1.0])
        assert abs(np.linalg.norm(e.key) - 1.0) < 1e-6

    def test_zero_key_rejected(self):
        pool = make_pool()
        with pytest.raises(DegenerateKeyError):
            pool.insert(np.zeros(3), prompt(), timestamp=0, agent_id="a")

    def test_entry_ids_unique(self):
        pool = make_pool()
        ids = {
            pool.insert(np.array([1.0, float(i)]), prompt(), timestamp=i, agent_id="a").entry_id
            for i in range(10)
        }
        assert len(ids) == 10


class TestQuery:
    def test_orthogonal_keys_pick_matching(self):
        pool = make_pool()
        pool.insert(np.array([1.0, 0.0]), prompt(fill=1.0), timestamp=0, agent_id="a")
        pool.insert(np.array([0.0, 1.0]), prompt(fill=2.0), timestamp=1, agent_id="b")
        pool.refine()
        hits = pool.query_topn(np.array([1.0, 0.0]), n=1)
        assert len(hits) == 1
        np.testing.assert_allclose(hits[0].key, [1.0, 0.0])

    def test_truncates_to_pool_size(self):
        pool = make_pool()
        pool.insert(np.array([1.0, 0.0]), prompt(), timestamp=0, agent_id="a")
        pool.refine()
        assert len(pool.query_topn(np.array([1.0, 1.0]), n=5)) == 1

    def test_empty_pool_raises(self):
        with pytest.raises(EmptyPoolError):
            make_pool().query_topn(np.array([1.0]), n=1)

    def test_zero_query_rejected(self):
        pool = make_pool()
        pool.insert(np.array([1.0, 0.0]), prompt(), timestamp=0, agent_id="a")
        pool.refine()
        with pytest.raises(DegenerateKeyError):
            pool.query_topn(np.zeros(2), n=1)

    def test_pending_entries_invisible_until_refine(self):
        pool = make_pool()
        pool.insert(np.array([1.0, 0.0]), prompt(), timestamp=0, agent_id="a")
        assert pool.query_topn(np.array([1.0, 0.0]), n=2) == []
        pool.refine()
        assert len(pool.query_topn(np.array([1.0, 0.0]), n=2)) == 1

    def test_matches_brute_force_ordering(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            pool = make_pool(capacity=64, merge_threshold=1.0)
            dim = int(rng.integers(2, 6))
            n_entries = int(rng.integers(1, 20))
            keys = []
            for i in range(n_entries):
                k = rng.normal(size=dim)
                if rng.random() < 0.2 and keys:
                    k = keys[-1].copy()  # force similarity ties
                keys.append(k)
                pool.insert(k, prompt(dim=3), timestamp=i, agent_id="a")
            pool.refine()
            q = rng.normal(size=dim)
            n = int(rng.integers(1, 8))
            got = [e.entry_id for e in pool.query_topn(q, n)]
            qn = unit(q)
            entries = pool.entries()
            expected = [
                e.entry_id
                for e in sorted(entries, key=lambda e: (-float(qn @ e.key), e.entry_id))
            ][: min(n, len(entries))]
            assert got == expected

    def test_query_updates_last_retrieved(self):
        pool = make_pool()
        e = pool.insert(np.array([1.0, 0.0]), prompt(), timestamp=0, agent_id="a")
        pool.refine()
        pool.query_topn(np.array([1.0, 0.0]), n=1, step=55)
        assert e.last_retrieved == 55


class TestAssemble:
    def _entry(self, eid, fill, rows=8, dim=16):
        return PoolEntry(
            entry_id=eid, key=unit(np.ones(4)), value=prompt(rows, dim, fill),
            timestamp=0, agent_id="a",
        )

    def test_concatenates_in_given_order(self):
        out = assemble([self._entry(0, 1.0), self._entry(1, 2.0)])
        assert out.rows == 16 and out.dim == 16
        assert np.all(out.values[:8] == 1.0) and np.all(out.values[8:] == 2.0)

    def test_single_entry_unchanged(self):
        e = self._entry(0, 3.0)
        out = assemble([e])
        assert out == e.value

    def test_empty_list_gives_empty_prompt(self):
        out = assemble([])
        assert out.rows == 0

    def test_deferred_entry_rejected(self):
        bad = PoolEntry(
            entry_id=0, key=unit(np.ones(3)),
            value=DeferredMarker(np.ones(3), "a"), timestamp=0, agent_id="a",
        )
        with pytest.raises(DeferredNotResolvedError):
            assemble([bad])

    def test_dim_mismatch_rejected(self):
        with pytest.raises(CompositionError):
            assemble([self._entry(0, 1.0, dim=16), self._entry(1, 1.0, dim=8)])


class TestRefine:
    def test_identical_keys_merge_with_ema_weighting(self):
        pool = make_pool(merge_threshold=0.95, merge_weight=0.3)
        pool.insert(np.array([1.0, 0.0]), prompt(fill=1.0), timestamp=0, agent_id="a")
        pool.insert(np.array([1.0, 0.0]), prompt(fill=2.0), timestamp=1, agent_id="b")
        pool.refine()
        assert pool.size == 1
        merged = pool.entries()[0]
        np.testing.assert_allclose(merged.value.values, 0.7 * 1.0 + 0.3 * 2.0)
        assert merged.timestamp == 1
        assert merged.agent_id == "a,b"

    def test_orthogonal_keys_do_not_merge(self):
        pool = make_pool(merge_threshold=0.95)
        pool.insert(np.array([1.0, 0.0]), prompt(), timestamp=0, agent_id="a")
        pool.insert(np.array([0.0, 1.0]), prompt(), timestamp=1, agent_id="b")
        pool.refine()
        assert pool.size == 2

    def test_merge_with_self_preserves_key_and_value(self):
        pool = make_pool(merge_threshold=0.9, merge_weight=0.3)
        key = unit(np.array([3.0, 4.0]))
        value = prompt(fill=1.25)
        pool.insert(key, value, timestamp=0, agent_id="a")
        pool.insert(key, value, timestamp=1, agent_id="a")
        pool.refine()
        merged = pool.entries()[0]
        np.testing.assert_allclose(merged.key, key, atol=1e-12)
        assert merged.value == value

    def test_eviction_by_least_recently_retrieved(self):
        pool = make_pool(capacity=3, merge_threshold=1.0)  # distinct keys never merge
        keys = np.eye(4)
        entries = [
            pool.insert(keys[i], prompt(), timestamp=i, agent_id="a") for i in range(4)
        ]
        pool.refine()
        # touch all but entry 1 at later steps
        for i in (0, 2, 3):
            pool.query_topn(keys[i], n=1, step=10 + i)
        pool.insert(np.ones(4), prompt(), timestamp=20, agent_id="b")
        pool.refine()
        surviving = {e.entry_id for e in pool.entries()}
        assert entries[1].entry_id not in surviving
        assert pool.refined_size == 3

    def test_capacity_never_exceeded(self):
        pool = make_pool(capacity=5, merge_threshold=1.0)
        rng = np.random.default_rng(1)
        for i in range(20):
            pool.insert(rng.normal(size=4), prompt(), timestamp=i, agent_id="a")
            if i % 3 == 0:
                pool.refine()
        pool.refine()
        assert pool.refined_size <= 5

    def test_refine_idempotent(self):
        pool = make_pool(merge_threshold=0.8)
        rng = np.random.default_rng(2)
        for i in range(12):
            pool.insert(rng.normal(size=4), prompt(fill=float(i)), timestamp=i, agent_id="a")
        pool.refine()
        snapshot = [(e.entry_id, e.key.copy(), e.value, e.timestamp) for e in pool.entries()]
        pool.refine()
        again = [(e.entry_id, e.key.copy(), e.value, e.timestamp) for e in pool.entries()]
        assert len(snapshot) == len(again)
        for (i1, k1, v1, t1), (i2, k2, v2, t2) in zip(snapshot, again):
            assert i1 == i2 and t1 == t2 and v1 == v2
            np.testing.assert_array_equal(k1, k2)

    def test_interleaving_invariance(self):
        # Same entries in the same timestamp order, refine called at
        # different points -> identical refined pool.
        rng = np.random.default_rng(3)
        entries = []
        for i in range(15):
            base = rng.normal(size=4)
            entries.append((base, float(i)))

        def build(refine_points):
            pool = make_pool(capacity=100, merge_threshold=0.7)
            for i, (key, fill) in enumerate(entries):
                pool.insert(key, prompt(fill=fill), timestamp=i, agent_id="a")
                if i in refine_points:
                    pool.refine()
            pool.refine()
            return [
                (e.entry_id, tuple(np.round(e.key, 12)), e.timestamp) for e in pool.entries()
            ]

        reference = build(set())
        for points in (set(range(15)), {3, 7}, {0, 14}, {5}):
            assert build(points) == reference

    def test_deferred_never_merges(self):
        pool = make_pool(merge_threshold=0.5)
        key = np.array([1.0, 0.0])
        pool.insert(key, prompt(), timestamp=0, agent_id="a")
        pool.insert(key, DeferredMarker(key, "b"), timestamp=1, agent_id="b")
        pool.insert(key, DeferredMarker(key, "c"), timestamp=2, agent_id="c")
        pool.refine()
        assert pool.size == 3


class TestResolveDeferred:
    def _deferred_pool(self):
        pool = make_pool()
        key = np.array([1.0, 0.0])
        e = pool.insert(key, DeferredMarker(key, "agent-h"), timestamp=0, agent_id="agent-h")
        pool.refine()
        return pool, e

    def test_resolution_materializes_prompt(self):
        pool, e = self._deferred_pool()
        pool.resolve_deferred(e.entry_id, lambda marker: prompt(fill=9.0))
        hit = pool.query_topn(np.array([1.0, 0.0]), n=1)[0]
        assert not hit.is_deferred
        assert assemble([hit]).rows == 2

    def test_resolution_idempotent(self):
        pool, e = self._deferred_pool()
        pool.resolve_deferred(e.entry_id, lambda marker: prompt(fill=9.0))
        calls = []

        def second(marker):
            calls.append(marker)
            return prompt(fill=1.0)

        pool.resolve_deferred(e.entry_id, second)
        assert calls == []  # no-op on concrete entries
        assert pool.entries()[0].value == prompt(fill=9.0)

    def test_expired_provenance_drops_entry(self):
        pool, e = self._deferred_pool()

        def failing(marker):
            raise ResolutionError("log truncated")

        with pytest.raises(ResolutionError):
            pool.resolve_deferred(e.entry_id, failing)
        assert pool.size == 0

    def test_unknown_entry(self):
        pool, _ = self._deferred_pool()
        with pytest.raises(ResolutionError):
            pool.resolve_deferred(999, lambda m: prompt())


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        pool = make_pool(merge_threshold=1.0)
        rng = np.random.default_rng(4)
        for i in range(5):
            pool.insert(
                rng.normal(size=6),
                TokenPrompt(rng.normal(size=(3, 4)).astype(np.float32), dtype="f32"),
                timestamp=i,
                agent_id=f"agent-{i}",
                domain_tag="dom" if i % 2 else None,
            )
        path = tmp_path / "pool.jsonl"
        pool.save(path)
        loaded = PromptPool.load(path)
        assert loaded.size == pool.size
        for a, b in zip(pool.entries(), loaded.entries()):
            assert a.entry_id == b.entry_id
            np.testing.assert_allclose(a.key, b.key, atol=1e-15)
            assert a.value == b.value
            assert a.timestamp == b.timestamp
            assert a.agent_id == b.agent_id
            assert a.domain_tag == b.domain_tag

    def test_snapshot_is_one_json_object_per_line(self, tmp_path):
        import json

        pool = make_pool()
        pool.insert(np.array([1.0, 0.0]), prompt(), timestamp=3, agent_id="a")
        path = tmp_path / "pool.jsonl"
        pool.save(path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1
        obj = json.loads(lines[0])
        assert set(obj) == {"entry_id", "key", "value", "timestamp", "agent_id", "domain_tag"}
