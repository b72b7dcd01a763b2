"""Paged KV cache with content-addressed prefix reuse.

Storage is a fixed pool of equal-sized blocks. Each full block is named by a
chained digest over (parent digest, its token slice, an extra key), so two
requests share a block exactly when they share the whole prefix up to it and
agree on the extra key. The extra key is where adapter identity lives:

- base requests hash every block with an empty key;
- activated adapters hash blocks that end before the invocation start with
  the empty key too (their K/V are bit-identical to base output), and blocks
  that contain or follow the invocation with the adapter id;
- standard LoRA hashes every block with the adapter id, which is why it can
  never share anything with the base model.

Freed blocks keep their digests and stay in the hash index, ordered by
release time. A later request can resurrect them from the free pool; only
actual reallocation (LRU) drops a digest. Blocks are refcounted so several
live requests can pin the same prefix at once.
"""

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

DIGEST_SIZE = 16
_DOMAIN = b"aloraserve.block.v1"


class PoolExhaustedError(RuntimeError):
    """Raised when an allocation needs more free blocks than exist."""

    def __init__(self, need: int, have: int):
        super().__init__(f"pool exhausted: need {need} free blocks, have {have}")
        self.need = need
        self.have = have


def hash_block(parent: bytes | None, tokens, extra_key: str, block_size: int) -> bytes:
    """Digest of one full block in its chain.

    parent is the previous block's digest (None for the first block), tokens
    the block's token ids (must be exactly block_size of them; partial
    blocks are never cache-addressable), extra_key the adapter scoping
    string ("" for base-equivalent content).
    """
    tokens = [int(t) for t in tokens]
    if len(tokens) != block_size:
        raise ValueError(f"block slice has {len(tokens)} tokens, block_size is {block_size}")
    if any(t < 0 or t >= 2**32 for t in tokens):
        raise ValueError("token ids must fit in uint32")
    h = hashlib.blake2b(digest_size=DIGEST_SIZE)
    h.update(_DOMAIN)
    if parent is None:
        h.update(b"\x00")
    else:
        if len(parent) != DIGEST_SIZE:
            raise ValueError("parent digest has wrong length")
        h.update(b"\x01")
        h.update(parent)
    key_bytes = extra_key.encode()
    h.update(len(key_bytes).to_bytes(4, "little"))
    h.update(key_bytes)
    h.update(len(tokens).to_bytes(4, "little"))
    for t in tokens:
        h.update(t.to_bytes(4, "little"))
    return h.digest()


def compute_block_keys(
    token_seq, block_size: int, adapter_id: str | None = None, inv_start: int | None = None
) -> list:
    """Extra keys for every block of a sequence (ceil(len/block_size) of them).

    adapter_id=None is a base request: all keys empty. adapter_id with
    inv_start=None is standard LoRA: every key carries the adapter id.
    adapter_id with inv_start is an activated adapter: block i gets the
    empty key iff it lies entirely before inv_start, i.e. (i+1)*block_size
    <= inv_start. A block straddling the boundary holds post-activation
    rows, so it takes the adapter key.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    n = len(token_seq)
    n_blocks = -(-n // block_size)
    if adapter_id is None:
        if inv_start is not None:
            raise ValueError("inv_start without adapter_id")
        return [""] * n_blocks
    if inv_start is None:
        return [adapter_id] * n_blocks
    if not 0 <= inv_start <= n:
        raise ValueError(f"inv_start {inv_start} outside sequence of length {n}")
    return ["" if (i + 1) * block_size <= inv_start else adapter_id for i in range(n_blocks)]


@dataclass
class Block:
    block_id: int
    fill: int = 0
    hash: bytes | None = None
    ref_count: int = 0


@dataclass(frozen=True)
class BlockTable:
    """Position-ordered view of one request's blocks."""

    request_id: str
    block_ids: tuple
    reused: tuple  # parallel flags: True for blocks obtained via prefix hit


@dataclass(frozen=True)
class KVEntry:
    """One position's cached key/value pair at one layer (test/debug view)."""

    layer: int
    position: int
    key: np.ndarray
    value: np.ndarray


class BlockPool:
    """Fixed-size block pool plus the hash index over committed blocks.

    Invariants, checked by check_conservation():
    - every block is either free (ref_count 0, in the free list) or pinned
      (ref_count >= 1, absent from it); nothing is lost or counted twice;
    - a digest in the index names a block whose stored hash matches;
    - only full blocks carry digests.
    """

    def __init__(self, total_blocks: int, block_size: int, n_layers: int, d_model: int):
        if min(total_blocks, block_size, n_layers, d_model) < 1:
            raise ValueError("pool dimensions must be positive")
        self.total_blocks = total_blocks
        self.block_size = block_size
        self.blocks = [Block(i) for i in range(total_blocks)]
        # KV rows for every block at every layer; [b, layer, 0] keys, [b, layer, 1] values.
        self.kv = np.zeros((total_blocks, n_layers, 2, block_size, d_model), dtype=np.float32)
        # free list in release order: head = least recently released = first evicted
        self._free = OrderedDict((i, None) for i in range(total_blocks))
        self._index = {}  # digest -> block_id
        self._owned = {}  # request_id -> [block_id, ...] in position order
        self._n_reused = {}  # request_id -> leading blocks that came from the index

    @property
    def num_free(self) -> int:
        return len(self._free)

    def find_cached_prefix(self, request_id: str, token_seq, keys) -> tuple:
        """Pin the longest reusable block chain for a new request.

        Walks the digest chain from block 0 and stops at the first miss.
        The final token of the sequence is never taken from cache (its
        logits must be computed to emit the first output), so at most
        (len-1)//block_size blocks match. Returns (block_ids, hit_tokens).
        Must be called before any allocate() for the request.
        """
        if request_id in self._owned:
            raise ValueError(f"{request_id} already holds blocks")
        B = self.block_size
        limit = max(0, (len(token_seq) - 1) // B)
        hits = []
        parent = None
        for i in range(limit):
            digest = hash_block(parent, token_seq[i * B : (i + 1) * B], keys[i], B)
            block_id = self._index.get(digest)
            if block_id is None:
                break
            blk = self.blocks[block_id]
            assert blk.hash == digest
            if blk.ref_count == 0:
                del self._free[block_id]
            blk.ref_count += 1
            hits.append(block_id)
            parent = digest
        self._owned[request_id] = hits
        self._n_reused[request_id] = len(hits)
        return list(hits), len(hits) * B

    def register_request(self, request_id: str) -> None:
        """Register a request that skips prefix lookup (caching disabled)."""
        if request_id in self._owned:
            raise ValueError(f"{request_id} already holds blocks")
        self._owned[request_id] = []
        self._n_reused[request_id] = 0

    def allocate(self, request_id: str, n_blocks: int) -> list:
        """Take n_blocks from the free pool for this request.

        Eviction is LRU over release time. Evicting a block drops its index
        entry (unless a later commit already redirected the digest). Raises
        PoolExhaustedError, allocating nothing, when fewer than n_blocks are
        free; pinned blocks are never candidates.
        """
        if n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if n_blocks > len(self._free):
            raise PoolExhaustedError(n_blocks, len(self._free))
        got = []
        for _ in range(n_blocks):
            block_id, _ = self._free.popitem(last=False)
            blk = self.blocks[block_id]
            assert blk.ref_count == 0
            if blk.hash is not None and self._index.get(blk.hash) == block_id:
                del self._index[blk.hash]
            blk.hash = None
            blk.fill = 0
            blk.ref_count = 1
            got.append(block_id)
        self._owned.setdefault(request_id, [])
        self._n_reused.setdefault(request_id, 0)
        self._owned[request_id].extend(got)
        return got

    def set_fill(self, request_id: str, n_tokens: int) -> None:
        """Record how many of the request's positions hold written KV rows."""
        for i, block_id in enumerate(self._owned[request_id]):
            self.blocks[block_id].fill = int(np.clip(n_tokens - i * self.block_size, 0, self.block_size))

    def block_table(self, request_id: str) -> BlockTable:
        ids = self._owned[request_id]
        n_reused = self._n_reused[request_id]
        return BlockTable(
            request_id=request_id,
            block_ids=tuple(ids),
            reused=tuple(i < n_reused for i in range(len(ids))),
        )

    def commit_and_free(self, request_id: str, token_seq, keys) -> None:
        """Publish the request's full blocks to the index and release them.

        token_seq is everything the request actually processed (its final
        generated token never got KV rows, so it is not part of this). Every
        full block gets its chain digest and an index entry, overwriting any
        previous holder of the same digest. The partial tail, if any, stays
        anonymous. Blocks are released tail-first so that the head of a
        chain is the last to be evicted: a surviving prefix is worth more
        than a surviving suffix, because lookups walk from block 0.
        """
        ids = self._owned.pop(request_id)
        self._n_reused.pop(request_id)
        B = self.block_size
        expected = -(-len(token_seq) // B)
        if len(ids) != expected:
            raise ValueError(
                f"{request_id} holds {len(ids)} blocks but processed {len(token_seq)} tokens"
            )
        parent = None
        for i in range(len(token_seq) // B):
            digest = hash_block(parent, token_seq[i * B : (i + 1) * B], keys[i], B)
            blk = self.blocks[ids[i]]
            assert blk.fill == B
            blk.hash = digest
            self._index[digest] = ids[i]
            parent = digest
        self._release(ids)

    def release(self, request_id: str) -> None:
        """Release without committing (failed or rejected requests)."""
        ids = self._owned.pop(request_id, None)
        self._n_reused.pop(request_id, None)
        if ids:
            self._release(ids)

    def _release(self, ids) -> None:
        for block_id in reversed(ids):
            blk = self.blocks[block_id]
            assert blk.ref_count >= 1
            blk.ref_count -= 1
            if blk.ref_count == 0:
                assert block_id not in self._free
                self._free[block_id] = None

    def kv_at(self, block_ids, position: int) -> list:
        """KVEntry per layer for one absolute position (reads the pool)."""
        block_id = block_ids[position // self.block_size]
        row = position % self.block_size
        out = []
        for layer in range(self.kv.shape[1]):
            out.append(
                KVEntry(
                    layer=layer,
                    position=position,
                    key=self.kv[block_id, layer, 0, row].copy(),
                    value=self.kv[block_id, layer, 1, row].copy(),
                )
            )
        return out

    def check_conservation(self) -> None:
        free = set(self._free)
        pinned = {b.block_id for b in self.blocks if b.ref_count > 0}
        assert free.isdisjoint(pinned)
        assert len(free) + len(pinned) == self.total_blocks, "blocks leaked"
        for b in self.blocks:
            assert b.ref_count >= 0
            assert (b.ref_count == 0) == (b.block_id in free)
            if b.hash is not None:
                assert b.fill == self.block_size, "partial block carries a digest"
        for digest, block_id in self._index.items():
            assert self.blocks[block_id].hash == digest
        total_refs = sum(b.ref_count for b in self.blocks)
        assert total_refs == sum(len(v) for v in self._owned.values())

    def dump_state(self) -> list:
        """One dict per block: id, fill, digest hex, pinned or free."""
        return [
            {
                "block": b.block_id,
                "fill": b.fill,
                "digest": b.hash.hex() if b.hash is not None else None,
                "ref_count": b.ref_count,
                "state": "pinned" if b.ref_count > 0 else "free",
            }
            for b in self.blocks
        ]

    def write_dump(self, path) -> None:
        with open(path, "w") as f:
            for row in self.dump_state():
                f.write(json.dumps(row) + "\n")
