"""Desk-scale decoder-only transformer with paged KV reads.

The model is deliberately tiny (defaults: 2 layers, d_model 64, vocab 256)
and runs in numpy. What matters here is not quality but exact numerics:
every matmul accumulates in float64 and rounds once to float32, which makes
each output row a function of its input row alone, independent of how many
rows happen to be batched together. A token therefore gets bit-identical
K/V and hidden states whether it is processed in a large prefill, a small
chunk, or replayed from cache, and cache reuse can be tested for exact
output preservation instead of loose tolerances.

Weights are random uniform(-0.1, 0.1), generated per tensor from a
counter-based RNG, so any two processes with the same config and seed build
the same model.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .adapters import MODE_ACTIVATED, LoraAdapter


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    d_model: int = 64
    vocab_size: int = 256
    max_seq_len: int = 8192
    seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.head_dim, self.d_model, self.vocab_size) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})"
            )


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray


@dataclass
class BaseWeights:
    embed: np.ndarray
    layers: list
    unembed: np.ndarray


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    key = int.from_bytes(
        hashlib.blake2b(f"weights:{seed}:{name}".encode(), digest_size=16).digest(), "little"
    )
    return np.random.Generator(np.random.Philox(key=key))


def _init(seed: int, name: str, shape) -> np.ndarray:
    return _tensor_rng(seed, name).uniform(-0.1, 0.1, shape).astype(np.float32)


def generate_weights(config: ModelConfig) -> BaseWeights:
    """Deterministic random weights; same (config, seed) gives the same bytes."""
    d = config.d_model
    layers = []
    for li in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=_init(config.seed, f"l{li}.wq", (d, d)),
                wk=_init(config.seed, f"l{li}.wk", (d, d)),
                wv=_init(config.seed, f"l{li}.wv", (d, d)),
                wo=_init(config.seed, f"l{li}.wo", (d, d)),
                w_in=_init(config.seed, f"l{li}.w_in", (d, 4 * d)),
                w_out=_init(config.seed, f"l{li}.w_out", (4 * d, d)),
            )
        )
    return BaseWeights(
        embed=_init(config.seed, "embed", (config.vocab_size, d)),
        layers=layers,
        unembed=_init(config.seed, "unembed", (d, config.vocab_size)),
    )


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # float64 accumulation, single rounding to float32: row results do not
    # depend on the batch shape (verified against per-row products).
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    scale = np.sqrt((x64 * x64).mean(axis=-1, keepdims=True) + 1e-6)
    return (x64 / scale).astype(np.float32)


def _position_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table.astype(np.float32)


def project_qkv_masked(x, weights: LayerWeights, adapter: LoraAdapter | None = None, mask=None):
    """Q/K/V projections with an optional per-row adapter blend.

    mask is a bool vector over the rows of x; True selects the plain base
    projection for that row, False the adapted one. Masked rows are exactly
    the base output (row selection, not arithmetic blending, so no float
    residue from the other path). With adapter=None the mask is irrelevant.
    With mask=None the adapter applies to every row, which is the standard
    LoRA path.
    """
    q = _mm(x, weights.wq)
    k = _mm(x, weights.wk)
    v = _mm(x, weights.wv)
    if adapter is None:
        return q, k, v
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(x),):
            raise ValueError(f"mask shape {mask.shape} does not match {len(x)} rows")
    out = []
    for name, base in (("q", q), ("k", k), ("v", v)):
        if name not in adapter.targets:
            out.append(base)
            continue
        adapted = base + _mm(_mm(x, adapter.down[name]), adapter.up[name])
        if mask is None:
            out.append(adapted)
        else:
            out.append(np.where(mask[:, None], base, adapted))
    return tuple(out)


def paged_attention(q, kv, layer: int, block_ids, fresh_k, fresh_v, start_pos: int, n_heads: int):
    """Causal attention over cached context plus the current span.

    K/V for absolute positions [0, start_pos) are gathered from `kv` (the
    pool array, indexed by block_ids in order); fresh_k/fresh_v cover
    [start_pos, start_pos + n). Query row i attends to absolute positions
    <= start_pos + i. Gathering goes through the block table, so the
    physical placement of blocks cannot affect the result.
    """
    n, d = q.shape
    block_size = kv.shape[3]
    total = start_pos + n
    need = -(-total // block_size)
    if len(block_ids) < need:
        raise ValueError(f"block table has {len(block_ids)} blocks, need {need}")
    if start_pos > 0:
        ids = np.asarray(block_ids[:need], dtype=np.intp)
        gathered = kv[ids, layer]  # (need, 2, block_size, d)
        k_ctx = gathered[:, 0].reshape(-1, d)[:start_pos]
        v_ctx = gathered[:, 1].reshape(-1, d)[:start_pos]
        keys = np.concatenate([k_ctx, fresh_k], axis=0)
        vals = np.concatenate([v_ctx, fresh_v], axis=0)
    else:
        keys, vals = fresh_k, fresh_v

    head_dim = d // n_heads
    q64 = q.astype(np.float64).reshape(n, n_heads, head_dim)
    k64 = keys.astype(np.float64).reshape(total, n_heads, head_dim)
    v64 = vals.astype(np.float64).reshape(total, n_heads, head_dim)

    scores = np.einsum("nhd,thd->hnt", q64, k64) / np.sqrt(head_dim)
    key_pos = np.arange(total)[None, :]
    query_pos = start_pos + np.arange(n)[:, None]
    scores = np.where(key_pos <= query_pos, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = np.einsum("hnt,thd->nhd", w, v64)
    return ctx.reshape(n, d).astype(np.float32)


def greedy_next_token(logits) -> int:
    """Argmax with ties broken toward the lowest token id."""
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise ValueError(f"expected a logits vector, got shape {logits.shape}")
    return int(np.argmax(logits))


@dataclass
class SeqInput:
    """One request's slice of an engine step.

    tokens are the ids being processed this step, living at absolute
    positions [start_pos, start_pos + len). block_ids must cover every
    position up to and including the span. mask is this request's rows of
    the step's activation mask; it is consulted only for activated
    adapters.
    """

    request_id: str
    tokens: np.ndarray
    start_pos: int
    block_ids: list
    adapter: LoraAdapter | None = None
    mask: np.ndarray | None = None


def _write_kv(kv, layer: int, block_ids, start_pos: int, k, v) -> None:
    block_size = kv.shape[3]
    pos = start_pos + np.arange(len(k))
    ids = np.asarray(block_ids, dtype=np.intp)[pos // block_size]
    kv[ids, layer, 0, pos % block_size] = k
    kv[ids, layer, 1, pos % block_size] = v


class Model:
    """Weights plus the step-level forward pass."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.weights = generate_weights(self.config)
        self.positions = _position_table(self.config.max_seq_len, self.config.d_model)

    def forward_step(self, seqs, kv) -> dict:
        """Process a batch of spans against the shared KV pool.

        Writes each span's K/V rows into its blocks and returns the logits
        of each span's final row, keyed by request_id. Sequences are
        independent: the result for one is unaffected by the others in the
        batch, which is what makes chunked and batched schedules produce
        identical tokens.
        """
        out = {}
        for seq in seqs:
            out[seq.request_id] = self._forward_one(seq, kv)
        return out

    def _forward_one(self, seq: SeqInput, kv) -> np.ndarray:
        cfg = self.config
        tokens = np.asarray(seq.tokens, dtype=np.int64)
        n = len(tokens)
        if n == 0:
            raise ValueError("empty span")
        if seq.start_pos + n > cfg.max_seq_len:
            raise ValueError("span exceeds max_seq_len")
        mask = None
        if seq.adapter is not None and seq.adapter.mode == MODE_ACTIVATED:
            if seq.mask is None:
                raise ValueError(f"activated adapter span for {seq.request_id} is missing its mask")
            mask = seq.mask
        # standard-mode adapters take the adapted path for every row: mask
        # stays None and project_qkv_masked skips the blend entirely.

        x = self.weights.embed[tokens] + self.positions[seq.start_pos : seq.start_pos + n]
        for li, layer in enumerate(self.weights.layers):
            h = _rmsnorm(x)
            q, k, v = project_qkv_masked(h, layer, seq.adapter, mask)
            _write_kv(kv, li, seq.block_ids, seq.start_pos, k, v)
            attn = paged_attention(q, kv, li, seq.block_ids, k, v, seq.start_pos, cfg.n_heads)
            x = x + _mm(attn, layer.wo)
            h2 = _rmsnorm(x)
            x = x + _mm(np.maximum(_mm(h2, layer.w_in), 0.0), layer.w_out)
        return _mm(_rmsnorm(x[-1:]), self.weights.unembed)[0]
