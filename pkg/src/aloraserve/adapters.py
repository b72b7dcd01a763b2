"""LoRA adapters, in two flavors.

An adapter holds low-rank factors for a subset of the attention projections.
The two modes differ only in *when* the factors apply:

- "standard": the adapted weights apply to every token of the request.
- "activated": tokens before the invocation sequence go through the plain
  base projections; tokens at and after it go through base + down@up. Because
  the pre-invocation K/V are then byte-identical to what the base model would
  have produced, those cache blocks are interchangeable with base blocks.

Adapter weights are generated, not trained. A counter-based generator keyed
by (adapter_id, seed, tensor) makes them reproducible regardless of creation
order.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

MODE_ACTIVATED = "activated"
MODE_STANDARD = "standard"

_PROJECTIONS = ("q", "k", "v")


def _tensor_rng(tag: str) -> np.random.Generator:
    # Philox keyed off a digest of the tag: order-independent and stable
    # across platforms.
    key = int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank update for the attention projections.

    down[t] has shape (d_model, rank) and up[t] (rank, d_model); the adapted
    projection is x @ W + (x @ down) @ up. invocation_tokens is the token
    sequence whose last occurrence in a prompt marks where the adapter
    switches on; it is required in activated mode and optional in standard
    mode (standard adapters keep it only so drivers can build identical
    prompts in both modes).
    """

    adapter_id: str
    rank: int
    mode: str = MODE_ACTIVATED
    targets: tuple = _PROJECTIONS
    invocation_tokens: tuple | None = None
    down: dict = field(default_factory=dict, repr=False)
    up: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in (MODE_ACTIVATED, MODE_STANDARD):
            raise ValueError(f"unknown adapter mode {self.mode!r}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        bad = [t for t in self.targets if t not in _PROJECTIONS]
        if bad or not self.targets:
            raise ValueError(f"targets must be a non-empty subset of {_PROJECTIONS}, got {self.targets}")
        if self.mode == MODE_ACTIVATED:
            if not self.invocation_tokens:
                raise ValueError("activated adapter needs a non-empty invocation_tokens")


def generate_adapter(
    adapter_id: str,
    d_model: int,
    rank: int,
    seed: int = 0,
    targets=_PROJECTIONS,
    invocation_tokens=None,
    mode: str = MODE_ACTIVATED,
) -> LoraAdapter:
    """Build an adapter with uniform(-0.1, 0.1) factors.

    Both factors are non-zero so the adapted path visibly diverges from the
    base model without any training.
    """
    if rank > d_model:
        raise ValueError(f"rank {rank} exceeds d_model {d_model}")
    down = {}
    up = {}
    for t in targets:
        rng_d = _tensor_rng(f"adapter:{adapter_id}:{seed}:{t}:down")
        rng_u = _tensor_rng(f"adapter:{adapter_id}:{seed}:{t}:up")
        down[t] = rng_d.uniform(-0.1, 0.1, (d_model, rank)).astype(np.float32)
        up[t] = rng_u.uniform(-0.1, 0.1, (rank, d_model)).astype(np.float32)
    inv = tuple(int(x) for x in invocation_tokens) if invocation_tokens is not None else None
    return LoraAdapter(
        adapter_id=adapter_id,
        rank=rank,
        mode=mode,
        targets=tuple(targets),
        invocation_tokens=inv,
        down=down,
        up=up,
    )


def load_adapter_file(path, d_model: int, mode: str | None = None) -> LoraAdapter:
    """Load an adapter definition from JSON.

    Schema: {"adapter_id": str, "rank": int, "seed": int,
             "targets": ["q", "k", "v"], "invocation_tokens": [int, ...]}.
    invocation_tokens absent means a standard LoRA baseline. mode, when
    given, overrides that inference (used by comparison runs that keep the
    invocation sequence in the prompt but apply the adapter everywhere).
    """
    with open(path) as f:
        spec = json.load(f)
    return adapter_from_dict(spec, d_model, mode=mode)


def adapter_from_dict(spec: dict, d_model: int, mode: str | None = None) -> LoraAdapter:
    for k in ("adapter_id", "rank", "seed"):
        if k not in spec:
            raise ValueError(f"adapter definition missing {k!r}")
    inv = spec.get("invocation_tokens")
    if mode is None:
        mode = MODE_ACTIVATED if inv else MODE_STANDARD
    return generate_adapter(
        adapter_id=spec["adapter_id"],
        d_model=d_model,
        rank=int(spec["rank"]),
        seed=int(spec["seed"]),
        targets=tuple(spec.get("targets", _PROJECTIONS)),
        invocation_tokens=inv,
        mode=mode,
    )
