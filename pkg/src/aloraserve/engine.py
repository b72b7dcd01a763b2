"""The serving engine: glue between scheduler, model, and block pool.

Request intake resolves the adapter and, for activated adapters, locates the
invocation sequence inside the prompt (last occurrence wins, so a prompt
that happens to contain the byte pattern earlier still activates at the
appended suffix). Each step the engine asks the scheduler for a plan, builds
the step's activation mask, runs the model, advances time, and retires
finished requests by committing their blocks and finalizing their metrics.
"""

import itertools
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .adapters import MODE_ACTIVATED, MODE_STANDARD, LoraAdapter, adapter_from_dict, load_adapter_file
from .clock import VirtualClock, WallClock
from .kv_cache import BlockPool
from .metrics import finalize_request
from .model import Model, ModelConfig, SeqInput, greedy_next_token
from .scheduler import Request, Scheduler, SchedulerConfig


class InvocationNotFoundError(ValueError):
    """An activated-adapter request whose prompt lacks the invocation sequence."""


def detect_invocation(prompt_tokens, invocation_tokens) -> int:
    """Index of the last occurrence of invocation_tokens inside prompt_tokens.

    Scans backward; the common case (suffix appended by the caller) hits on
    the first probe. Raises InvocationNotFoundError when absent.
    """
    prompt = np.asarray(prompt_tokens)
    inv = np.asarray(invocation_tokens)
    m = len(inv)
    if m == 0:
        raise ValueError("invocation_tokens is empty")
    for start in range(len(prompt) - m, -1, -1):
        if np.array_equal(prompt[start : start + m], inv):
            return start
    raise InvocationNotFoundError(
        f"invocation sequence {list(map(int, inv))} not found in prompt of length {len(prompt)}"
    )


@dataclass
class ActivationMask:
    """Step-level activation mask: one bool per scheduled token.

    values[i] is True when the token goes through the plain base projections
    (it precedes its request's invocation start) and False when the adapted
    weights apply. slices maps request_id to that request's rows; inv_start
    records the boundary used per request, with non-activated requests
    pinned past everything they process so their rows are always True.
    """

    values: np.ndarray
    slices: dict
    inv_start: dict


def build_activation_mask(spans) -> ActivationMask:
    """Mask for one step's plan, in span order."""
    parts = []
    slices = {}
    inv_start = {}
    offset = 0
    for span in spans:
        req = span.request
        eff = req.effective_inv_start()
        pos = np.arange(span.start, span.end)
        parts.append(pos < eff)
        slices[req.request_id] = slice(offset, offset + len(pos))
        inv_start[req.request_id] = eff
        offset += len(pos)
    values = np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
    return ActivationMask(values=values, slices=slices, inv_start=inv_start)


@dataclass(frozen=True)
class AdapterSpec:
    """Declarative adapter entry, mirroring the JSON file schema."""

    adapter_id: str
    rank: int = 8
    seed: int = 0
    targets: tuple = ("q", "k", "v")
    invocation_tokens: tuple | None = None


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    pool_blocks: int = 512
    block_size: int = 4
    adapters: tuple = ()
    comparison_mode: str = "alora"  # "alora" or "lora": how adapters behave
    prefix_caching: bool = True

    def __post_init__(self):
        if self.pool_blocks < 1 or self.block_size < 1:
            raise ValueError("pool_blocks and block_size must be >= 1")
        if self.comparison_mode not in ("alora", "lora"):
            raise ValueError(f"comparison_mode must be 'alora' or 'lora', got {self.comparison_mode!r}")


def load_engine_config(path) -> EngineConfig:
    """Engine configuration from JSON.

    Top-level keys: model, scheduler, pool_blocks, block_size, adapters,
    comparison_mode, prefix_caching; all optional, unknown keys rejected.
    Adapter entries are either inline definition objects or path strings to
    adapter JSON files.
    """
    with open(path) as f:
        raw = json.load(f)
    known = {f.name for f in fields(EngineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
    kwargs = {}
    if "model" in raw:
        kwargs["model"] = ModelConfig(**raw["model"])
    if "scheduler" in raw:
        kwargs["scheduler"] = SchedulerConfig(**raw["scheduler"])
    for key in ("pool_blocks", "block_size", "comparison_mode", "prefix_caching"):
        if key in raw:
            kwargs[key] = raw[key]
    specs = []
    for entry in raw.get("adapters", []):
        if isinstance(entry, str):
            specs.append(entry)
        else:
            for k in ("adapter_id", "rank", "seed"):
                if k not in entry:
                    raise ValueError(f"adapter entry missing {k!r}")
            inv = entry.get("invocation_tokens")
            specs.append(
                AdapterSpec(
                    adapter_id=entry["adapter_id"],
                    rank=int(entry["rank"]),
                    seed=int(entry["seed"]),
                    targets=tuple(entry.get("targets", ("q", "k", "v"))),
                    invocation_tokens=tuple(inv) if inv is not None else None,
                )
            )
    kwargs["adapters"] = tuple(specs)
    return EngineConfig(**kwargs)


class Engine:
    """Single-threaded step loop over a thread-safe intake."""

    def __init__(self, config: EngineConfig | None = None, clock=None):
        self.config = config or EngineConfig()
        self.clock = clock if clock is not None else WallClock()
        self.model = Model(self.config.model)
        self.pool = BlockPool(
            self.config.pool_blocks,
            self.config.block_size,
            self.config.model.n_layers,
            self.config.model.d_model,
        )
        self.scheduler = Scheduler(
            self.config.scheduler, self.pool, prefix_caching=self.config.prefix_caching
        )
        self.adapters = {}
        for spec in self.config.adapters:
            self.register_adapter(spec)
        self._auto_id = itertools.count()
        self._step_idx = 0
        self.trace = []  # one dict per non-empty step
        self.finished = {}  # request_id -> Request
        self.metrics = []  # RequestMetrics in finish order
        self.on_finish = None  # optional callback(request, metrics)
        self.on_logits = None  # optional callback(request_id, position, logits row)

    def register_adapter(self, spec) -> LoraAdapter:
        """Install an adapter from an AdapterSpec, file path, or dict.

        In comparison_mode "lora" every adapter is built as standard LoRA
        (applied to all tokens, own cache namespace on every block) while
        keeping its invocation_tokens so drivers assemble identical prompts
        in both modes.
        """
        d_model = self.config.model.d_model
        mode_override = MODE_STANDARD if self.config.comparison_mode == "lora" else None
        if isinstance(spec, LoraAdapter):
            adapter = spec
        elif isinstance(spec, str):
            adapter = load_adapter_file(spec, d_model, mode=mode_override)
        elif isinstance(spec, AdapterSpec):
            d = {
                "adapter_id": spec.adapter_id,
                "rank": spec.rank,
                "seed": spec.seed,
                "targets": list(spec.targets),
            }
            if spec.invocation_tokens is not None:
                d["invocation_tokens"] = list(spec.invocation_tokens)
            adapter = adapter_from_dict(d, d_model, mode=mode_override)
        else:
            adapter = adapter_from_dict(dict(spec), d_model, mode=mode_override)
        if adapter.adapter_id in self.adapters:
            raise ValueError(f"duplicate adapter_id {adapter.adapter_id!r}")
        self.adapters[adapter.adapter_id] = adapter
        return adapter

    def submit(
        self,
        prompt_tokens,
        adapter_id: str | None = None,
        max_new_tokens: int = 16,
        request_id: str | None = None,
        meta: dict | None = None,
    ) -> str:
        """Validate and enqueue one request; returns its id.

        Rejections (ValueError family) happen here, before the request
        touches the queue: unknown adapter, out-of-range tokens, missing
        invocation sequence, or a sequence that could not fit even an empty
        pool.
        """
        cfg = self.config
        prompt = np.ascontiguousarray(prompt_tokens, dtype=np.int64)
        if prompt.ndim != 1 or len(prompt) == 0:
            raise ValueError("prompt must be a non-empty 1-D token sequence")
        if max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        total = len(prompt) + max_new_tokens
        if total > cfg.model.max_seq_len:
            raise ValueError(f"sequence of {total} tokens exceeds max_seq_len {cfg.model.max_seq_len}")
        # the final generated token is emitted but never processed, so the
        # request occupies ceil((total - 1) / block_size) blocks at peak
        peak_blocks = -(-(total - 1) // cfg.block_size)
        if peak_blocks > cfg.pool_blocks:
            raise ValueError(
                f"sequence needs {peak_blocks} blocks, pool has {cfg.pool_blocks}; cannot ever fit"
            )
        lo = int(prompt.min())
        hi = int(prompt.max())
        if lo < 0 or hi >= cfg.model.vocab_size:
            raise ValueError(f"token ids must lie in [0, {cfg.model.vocab_size}), got [{lo}, {hi}]")

        adapter = None
        inv_start = None
        if adapter_id is not None:
            if adapter_id not in self.adapters:
                raise ValueError(f"unknown adapter_id {adapter_id!r}")
            adapter = self.adapters[adapter_id]
            if adapter.mode == MODE_ACTIVATED:
                inv_start = detect_invocation(prompt, adapter.invocation_tokens)

        if request_id is None:
            request_id = f"req-{next(self._auto_id)}"
        req = Request(
            request_id=request_id,
            prompt=prompt,
            max_new_tokens=max_new_tokens,
            adapter=adapter,
            inv_start=inv_start,
            meta=dict(meta or {}),
        )
        self.scheduler.submit(req, self.clock.now())
        return request_id

    def step(self) -> bool:
        """Run one engine step; False when there was nothing to do."""
        t_start = self.clock.now()
        plan = self.scheduler.schedule_step(t_start)
        for req in plan.failed:
            self._retire(req)
        if not plan.spans:
            if not plan.failed and self.scheduler.has_work():
                raise RuntimeError(
                    "scheduler stalled: waiting requests cannot obtain blocks and nothing is running"
                )
            return bool(plan.failed)

        mask = build_activation_mask(plan.spans)
        seqs = []
        for span in plan.spans:
            req = span.request
            use_mask = req.adapter is not None and req.adapter.mode == MODE_ACTIVATED
            seqs.append(
                SeqInput(
                    request_id=req.request_id,
                    tokens=req.tokens_slice(span.start, span.end),
                    start_pos=span.start,
                    block_ids=list(self.pool.block_table(req.request_id).block_ids),
                    adapter=req.adapter,
                    mask=mask.values[mask.slices[req.request_id]] if use_mask else None,
                )
            )
        logits = self.model.forward_step(seqs, self.pool.kv)

        n_tokens = sum(len(s) for s in plan.spans)
        self.clock.advance(n_tokens)
        t_end = self.clock.now()

        for span in plan.spans:
            req = span.request
            emitted = None
            # logits of the span's last row predict the next token, but only
            # once the whole context so far has been processed
            if span.end == req.total_tokens:
                row = logits[req.request_id]
                if self.on_logits is not None:
                    self.on_logits(req.request_id, span.end, row)
                emitted = greedy_next_token(row)
            done = self.scheduler.on_span_done(req, span, emitted, t_end)
            self.pool.set_fill(req.request_id, req.processed)
            if done:
                self._retire(req)

        self.trace.append(
            {
                "step": self._step_idx,
                "scheduled": [
                    {"request_id": s.request.request_id, "span": [s.start, s.end], "kind": s.kind}
                    for s in plan.spans
                ],
                "pool_free": self.pool.num_free,
                "budget_used": plan.budget_used,
            }
        )
        self._step_idx += 1
        return True

    def _retire(self, req: Request) -> None:
        if req.failed is not None:
            self.pool.release(req.request_id)
        else:
            processed_seq = req.tokens_slice(0, req.processed)
            keys = req.block_keys(req.processed, self.pool.block_size)
            self.pool.commit_and_free(req.request_id, processed_seq, keys)
        self.finished[req.request_id] = req
        m = finalize_request(req)
        self.metrics.append(m)
        if self.on_finish is not None:
            self.on_finish(req, m)

    def run_until_idle(self, max_steps: int | None = None) -> None:
        steps = 0
        while self.step():
            steps += 1
            if max_steps is not None and steps >= max_steps:
                raise RuntimeError(f"engine still busy after {max_steps} steps")

    def run_request(self, prompt_tokens, adapter_id=None, max_new_tokens=16, **kw):
        """Submit one request and drive the engine until it finishes."""
        rid = self.submit(prompt_tokens, adapter_id=adapter_id, max_new_tokens=max_new_tokens, **kw)
        while rid not in self.finished:
            if not self.step():
                raise RuntimeError(f"engine idle but {rid} never finished")
        req = self.finished[rid]
        return list(req.generated), next(m for m in self.metrics if m.request_id == rid)

    def write_step_trace(self, path) -> None:
        with open(path, "w") as f:
            for row in self.trace:
                f.write(json.dumps(row) + "\n")
