"""Block hashing, keys, and the pool's reuse/eviction mechanics."""

import numpy as np
import pytest

from aloraserve import BlockPool, PoolExhaustedError, compute_block_keys, hash_block


def chain_digests(tokens, keys, block_size):
    """Reference chain: fold hash_block over the full blocks."""
    out = []
    parent = None
    for i in range(len(tokens) // block_size):
        parent = hash_block(parent, tokens[i * block_size : (i + 1) * block_size], keys[i], block_size)
        out.append(parent)
    return out


class TestHashBlock:
    def test_deterministic(self):
        a = hash_block(None, [1, 2, 3], "", 3)
        b = hash_block(None, [1, 2, 3], "", 3)
        assert a == b and len(a) == 16

    def test_sensitive_to_everything(self):
        base = hash_block(None, [1, 2, 3], "", 3)
        assert hash_block(None, [1, 2, 4], "", 3) != base
        assert hash_block(None, [1, 2, 3], "ad", 3) != base
        assert hash_block(base, [1, 2, 3], "", 3) != base
        p1 = hash_block(None, [9, 9, 9], "", 3)
        assert hash_block(p1, [1, 2, 3], "", 3) != hash_block(base, [1, 2, 3], "", 3)

    def test_wrong_slice_length(self):
        with pytest.raises(ValueError):
            hash_block(None, [1, 2], "", 3)
        with pytest.raises(ValueError):
            hash_block(None, [1, 2, 3, 4], "", 3)

    def test_bad_parent(self):
        with pytest.raises(ValueError):
            hash_block(b"short", [1, 2, 3], "", 3)


class TestBlockKeys:
    def test_base_request_all_empty(self):
        assert compute_block_keys(list(range(10)), 4) == ["", "", ""]

    def test_standard_lora_all_adapter(self):
        assert compute_block_keys(list(range(10)), 4, adapter_id="ad") == ["ad", "ad", "ad"]

    def test_activated_boundary(self):
        # inv_start 9, block_size 3: blocks 0..2 end at 9 and stay base-keyed,
        # the invocation's own block and everything after carry the adapter id
        keys = compute_block_keys(list(range(12)), 3, adapter_id="ad", inv_start=9)
        assert keys == ["", "", "", "ad"]

    def test_straddling_block_takes_adapter_key(self):
        keys = compute_block_keys(list(range(12)), 4, adapter_id="ad", inv_start=9)
        assert keys == ["", "", "ad"]

    def test_rejects_orphan_inv_start(self):
        with pytest.raises(ValueError):
            compute_block_keys([1, 2], 2, inv_start=1)

    def test_rejects_out_of_range_inv_start(self):
        with pytest.raises(ValueError):
            compute_block_keys([1, 2], 2, adapter_id="a", inv_start=5)

    def test_prefix_monotone(self):
        # keys never go back to "" once the adapter id appears
        for inv in range(0, 13):
            keys = compute_block_keys(list(range(13)), 3, adapter_id="a", inv_start=inv)
            flips = sum(1 for a, b in zip(keys, keys[1:]) if a != b)
            assert flips <= 1
            if flips:
                assert keys[0] == "" and keys[-1] == "a"


def make_pool(total=16, block_size=4):
    return BlockPool(total, block_size, n_layers=1, d_model=8)


def commit_seq(pool, rid, tokens, keys=None, hit_keys=None):
    """Simulate a request life cycle against the pool bookkeeping alone."""
    B = pool.block_size
    keys = keys if keys is not None else [""] * (-(-len(tokens) // B))
    ids, hit = pool.find_cached_prefix(rid, tokens, hit_keys if hit_keys is not None else keys)
    need = -(-len(tokens) // B) - len(ids)
    pool.allocate(rid, need)
    pool.set_fill(rid, len(tokens))
    pool.commit_and_free(rid, tokens, keys)
    return hit


class TestPool:
    def test_cold_lookup_misses(self):
        pool = make_pool()
        ids, hit = pool.find_cached_prefix("r", list(range(10)), ["", "", ""])
        assert ids == [] and hit == 0
        pool.release("r")
        pool.check_conservation()

    def test_sequential_identical_requests_reuse(self):
        pool = make_pool()
        tokens = list(range(10))  # 2 full blocks + tail
        assert commit_seq(pool, "a", tokens) == 0
        hit = commit_seq(pool, "b", tokens)
        assert hit == (len(tokens) // 4) * 4 == 8
        pool.check_conservation()

    def test_full_block_boundary_never_reuses_last_token(self):
        # aligned prompt: the final token must still be computed, so the
        # last block of the chain stays unused even though it matches
        pool = make_pool()
        tokens = list(range(8))
        commit_seq(pool, "a", tokens)
        ids, hit = pool.find_cached_prefix("b", tokens, ["", ""])
        assert hit == 4 and len(ids) == 1
        pool.release("b")

    def test_adapter_key_isolation(self):
        pool = make_pool()
        tokens = list(range(12))
        commit_seq(pool, "a", tokens, keys=["ad"] * 3)  # standard-LoRA namespace
        ids, hit = pool.find_cached_prefix("b", tokens, ["", "", ""])
        assert hit == 0
        pool.release("b")
        ids, hit = pool.find_cached_prefix("c", tokens, ["ad", "ad", "ad"])
        assert hit == 8
        pool.release("c")
        pool.check_conservation()

    def test_divergence_stops_chain(self):
        pool = make_pool()
        commit_seq(pool, "a", list(range(12)))
        other = list(range(12))
        other[5] = 99  # diverges inside block 1
        ids, hit = pool.find_cached_prefix("b", other, ["", "", ""])
        assert hit == 4  # block 0 only
        pool.release("b")

    def test_allocate_exhaustion_is_atomic(self):
        pool = make_pool(total=4)
        pool.allocate("a", 3)
        with pytest.raises(PoolExhaustedError):
            pool.allocate("b", 2)
        assert pool.num_free == 1  # nothing was taken by the failed call
        pool.check_conservation()

    def test_pinned_blocks_never_evicted(self):
        pool = make_pool(total=4)
        tokens = list(range(8))
        commit_seq(pool, "a", tokens)
        ids, hit = pool.find_cached_prefix("b", list(range(10)), ["", "", ""])
        assert hit == 8  # b pins both committed blocks
        # churn through every free block several times over
        for i in range(3):
            got = pool.allocate(f"c{i}", 2)
            assert not (set(got) & set(ids))
            pool.release(f"c{i}")
        assert all(pool.blocks[b].ref_count == 1 for b in ids)
        pool.release("b")
        pool.check_conservation()

    def test_eviction_drops_index_entry(self):
        pool = make_pool(total=2)
        commit_seq(pool, "a", list(range(4)))  # 1 full block committed
        digests = [b.hash for b in pool.blocks if b.hash]
        assert len(digests) == 1
        # grind the pool so the committed block is recycled
        pool.allocate("x", 2)
        pool.release("x")
        ids, hit = pool.find_cached_prefix("b", list(range(6)), ["", ""])
        assert hit == 0  # digest gone with the eviction
        pool.release("b")
        pool.check_conservation()

    def test_release_order_prefers_keeping_chain_heads(self):
        # after commit, the tail is released first, so under pressure the
        # head of the chain survives longest and partial reuse stays possible
        pool = make_pool(total=4)
        commit_seq(pool, "a", list(range(13)))  # 3 full + 1 partial, fills pool
        pool.allocate("x", 1)  # evicts exactly one block: the partial tail
        pool.release("x")
        ids, hit = pool.find_cached_prefix("b", list(range(13)), ["", "", "", ""])
        assert hit == 12  # full chain still intact
        pool.release("b")
        pool.allocate("y", 2)  # second eviction takes the chain's deepest full block
        pool.release("y")
        ids, hit = pool.find_cached_prefix("c", list(range(13)), ["", "", "", ""])
        assert hit == 8
        pool.release("c")

    def test_duplicate_content_last_writer_wins(self):
        pool = make_pool()
        commit_seq(pool, "a", list(range(6)))
        # an identical request recomputes the tail; commit repoints the digest
        hit = commit_seq(pool, "b", list(range(6)))
        assert hit == 4
        digest = chain_digests(list(range(6)), ["", ""], 4)[0]
        holder = pool._index[digest]
        ids, hit = pool.find_cached_prefix("c", list(range(6)), ["", ""])
        assert ids == [holder] and hit == 4
        pool.release("c")
        pool.check_conservation()

    def test_concurrent_pinning_refcounts(self):
        pool = make_pool()
        commit_seq(pool, "a", list(range(9)))
        ids1, _ = pool.find_cached_prefix("r1", list(range(9)), ["", ""])
        ids2, _ = pool.find_cached_prefix("r2", list(range(9)), ["", ""])
        assert ids1 == ids2
        assert pool.blocks[ids1[0]].ref_count == 2
        pool.release("r1")
        assert pool.blocks[ids1[0]].ref_count == 1
        pool.release("r2")
        pool.check_conservation()

    def test_commit_requires_matching_block_count(self):
        pool = make_pool()
        pool.allocate("a", 1)
        pool.set_fill("a", 4)
        with pytest.raises(ValueError):
            pool.commit_and_free("a", list(range(8)), ["", ""])

    def test_partial_blocks_stay_anonymous(self):
        pool = make_pool()
        commit_seq(pool, "a", list(range(6)))
        partials = [b for b in pool.blocks if 0 < b.fill < pool.block_size]
        assert len(partials) == 1
        assert partials[0].hash is None

    def test_double_registration_rejected(self):
        pool = make_pool()
        pool.find_cached_prefix("r", [1, 2], [""])
        with pytest.raises(ValueError):
            pool.find_cached_prefix("r", [1, 2], [""])
        pool.release("r")

    def test_dump_state_shape(self):
        pool = make_pool(total=3)
        pool.allocate("a", 1)
        rows = pool.dump_state()
        assert len(rows) == 3
        assert {r["state"] for r in rows} == {"pinned", "free"}
        assert all(set(r) == {"block", "fill", "digest", "ref_count", "state"} for r in rows)

    def test_conservation_through_random_walk(self):
        rng = np.random.default_rng(0)
        pool = make_pool(total=12, block_size=3)
        live = {}
        for step in range(300):
            op = rng.integers(0, 3)
            if op == 0 and len(live) < 4:
                rid = f"r{step}"
                n = int(rng.integers(3, 16))
                tokens = list(rng.integers(0, 50, n))
                keys = [""] * (-(-n // 3))
                _, hit = pool.find_cached_prefix(rid, tokens, keys)
                need = -(-n // 3) - hit // 3
                try:
                    pool.allocate(rid, need)
                except PoolExhaustedError:
                    pool.release(rid)
                    continue
                pool.set_fill(rid, n)
                live[rid] = (tokens, keys)
            elif op == 1 and live:
                rid = sorted(live)[int(rng.integers(0, len(live)))]
                tokens, keys = live.pop(rid)
                pool.commit_and_free(rid, tokens, keys)
            elif op == 2 and live:
                rid = sorted(live)[int(rng.integers(0, len(live)))]
                live.pop(rid)
                pool.release(rid)
            pool.check_conservation()
        for rid in list(live):
            pool.release(rid)
        pool.check_conservation()
        assert pool.num_free == 12
