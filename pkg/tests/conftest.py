"""Shared fixtures and independent reference implementations.

The oracles here are deliberately written in the dumbest possible style
(per-head loops, per-row slicing, dense context) so they share no structure
with the library code they check.
"""

import numpy as np
import pytest

from aloraserve import AdapterSpec, Engine, EngineConfig, ModelConfig, SchedulerConfig, VirtualClock
from aloraserve.bench import invocation_for


def dense_reference_attention(q, k, v, n_heads, start_pos):
    """O(n^2) causal attention over the whole context, one head at a time.

    q has n rows living at absolute positions start_pos..start_pos+n-1;
    k and v cover positions 0..T-1 with T >= start_pos + n.
    """
    n, d = q.shape
    T = k.shape[0]
    hd = d // n_heads
    out = np.zeros((n, d), dtype=np.float64)
    for h in range(n_heads):
        qh = q[:, h * hd : (h + 1) * hd].astype(np.float64)
        kh = k[:, h * hd : (h + 1) * hd].astype(np.float64)
        vh = v[:, h * hd : (h + 1) * hd].astype(np.float64)
        s = qh @ kh.T / np.sqrt(hd)
        for i in range(n):
            s[i, start_pos + i + 1 :] = -np.inf
        e = np.exp(s - s.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        out[:, h * hd : (h + 1) * hd] = p @ vh
    return out.astype(np.float32)


def row_projection_oracle(x, w_mat, adapter, target, mask):
    """Row i of the masked projection, each row computed on its own."""
    rows = []
    for i in range(len(x)):
        xi = x[i : i + 1].astype(np.float64)
        base = (xi @ w_mat.astype(np.float64)).astype(np.float32)
        if mask[i] or target not in adapter.targets:
            rows.append(base[0])
        else:
            down = adapter.down[target].astype(np.float64)
            up = adapter.up[target].astype(np.float64)
            delta = ((xi @ down).astype(np.float32).astype(np.float64) @ up).astype(np.float32)
            rows.append(base[0] + delta[0])
    return np.stack(rows)


def make_engine(
    pool_blocks=128,
    block_size=4,
    token_budget=64,
    n_adapters=1,
    comparison_mode="alora",
    prefix_caching=True,
    chunked_prefill=True,
    max_batch_requests=8,
    model_seed=0,
    adapter_rank=8,
    clock=None,
):
    model = ModelConfig(seed=model_seed)
    adapters = tuple(
        AdapterSpec(
            adapter_id=f"adapter{k}",
            rank=adapter_rank,
            seed=0,
            invocation_tokens=invocation_for(model.vocab_size, k),
        )
        for k in range(n_adapters)
    )
    cfg = EngineConfig(
        model=model,
        scheduler=SchedulerConfig(
            token_budget=token_budget,
            max_batch_requests=max_batch_requests,
            chunked_prefill=chunked_prefill,
        ),
        pool_blocks=pool_blocks,
        block_size=block_size,
        adapters=adapters,
        comparison_mode=comparison_mode,
        prefix_caching=prefix_caching,
    )
    return Engine(cfg, clock=clock if clock is not None else VirtualClock())


@pytest.fixture
def engine():
    return make_engine()


def conversation(rng, n, vocab=256, reserved=32):
    return rng.integers(0, vocab - reserved, n, dtype=np.int64)
