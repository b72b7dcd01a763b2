"""Continuous-batching scheduler.

Each engine step the scheduler assembles a plan: running decodes first (one
token each), then prefill chunks in strict arrival order, all under a shared
token budget. A request's cache lookup happens once, at its first
scheduling; hit tokens count as prefill work already done.

Timestamps follow the request through its stages and are the raw material
for the latency metrics: queue is submit to first scheduling, prefill is
first scheduling to the step that completes the prompt, decode is that step
to the final token.
"""

import itertools
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .adapters import MODE_ACTIVATED, MODE_STANDARD, LoraAdapter
from .kv_cache import BlockPool, PoolExhaustedError, compute_block_keys


class RequestState(Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    FINISHED = "finished"


@dataclass
class Request:
    request_id: str
    prompt: np.ndarray
    max_new_tokens: int
    adapter: LoraAdapter | None = None
    inv_start: int | None = None  # absolute index of the invocation start, activated mode only
    meta: dict = field(default_factory=dict)

    state: RequestState = RequestState.QUEUED
    processed: int = 0  # positions whose KV rows exist
    generated: list = field(default_factory=list)
    arrival: float | None = None
    prefill_start: float | None = None
    decode_start: float | None = None
    finish: float | None = None
    hit_tokens: int = 0
    computed_tokens: int = 0
    failed: str | None = None
    cache_checked: bool = False

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    @property
    def total_tokens(self) -> int:
        return len(self.prompt) + len(self.generated)

    def token_at(self, pos: int) -> int:
        if pos < len(self.prompt):
            return int(self.prompt[pos])
        return self.generated[pos - len(self.prompt)]

    def tokens_slice(self, start: int, end: int) -> np.ndarray:
        p = len(self.prompt)
        if end <= p:
            return self.prompt[start:end]
        return np.concatenate(
            [self.prompt[start:p], np.asarray(self.generated[: end - p], dtype=np.int64)[max(0, start - p) :]]
        )

    def block_keys(self, n_tokens: int, block_size: int) -> list:
        """Extra keys for the first n_tokens of this request's sequence."""
        seq = self.tokens_slice(0, n_tokens)
        if self.adapter is None:
            return compute_block_keys(seq, block_size)
        if self.adapter.mode == MODE_STANDARD:
            return compute_block_keys(seq, block_size, adapter_id=self.adapter.adapter_id)
        return compute_block_keys(
            seq, block_size, adapter_id=self.adapter.adapter_id, inv_start=self.inv_start
        )

    def effective_inv_start(self) -> int:
        # Requests without an activated adapter never leave the base path:
        # the boundary sits past everything they will ever process.
        if self.adapter is not None and self.adapter.mode == MODE_ACTIVATED:
            assert self.inv_start is not None
            return self.inv_start
        return self.total_tokens


@dataclass(frozen=True)
class ScheduledSpan:
    request: Request
    start: int
    end: int
    kind: str  # "prefill" or "decode"

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class StepPlan:
    spans: list
    failed: list  # requests terminated during planning (pool exhaustion)
    budget_used: int = 0


@dataclass(frozen=True)
class SchedulerConfig:
    token_budget: int = 64
    max_batch_requests: int = 8
    chunked_prefill: bool = True

    def __post_init__(self):
        if self.token_budget < 1 or self.max_batch_requests < 1:
            raise ValueError("token_budget and max_batch_requests must be >= 1")


class Scheduler:
    """FCFS continuous batching over a shared block pool."""

    def __init__(self, config: SchedulerConfig, pool: BlockPool, prefix_caching: bool = True):
        self.config = config
        self.pool = pool
        self.prefix_caching = prefix_caching
        self._lock = threading.Lock()
        self._intake = deque()
        self._known_ids = set()
        self._ticket = itertools.count()
        self.waiting = deque()  # QUEUED, arrival order
        self.prefilling = []  # PREFILLING, arrival order
        self.decoding = []  # DECODING, arrival order

    def submit(self, request: Request, now: float) -> None:
        """Thread-safe intake; any thread may submit while the engine steps."""
        with self._lock:
            if request.request_id in self._known_ids:
                raise ValueError(f"duplicate request_id {request.request_id!r}")
            self._known_ids.add(request.request_id)
            request.arrival = now
            self._intake.append((next(self._ticket), request))

    def has_work(self) -> bool:
        with self._lock:
            pending = bool(self._intake)
        return pending or bool(self.waiting or self.prefilling or self.decoding)

    def _drain_intake(self) -> None:
        with self._lock:
            items = sorted(self._intake)
            self._intake.clear()
        for _, req in items:
            self.waiting.append(req)

    def schedule_step(self, now: float) -> StepPlan:
        """Build this step's plan and stamp newly admitted requests.

        Decodes go first, then prefill chunks strictly FCFS: if the next
        prefill in line cannot be scheduled (no budget, no blocks), nothing
        behind it runs either. With chunked_prefill off, a prefill runs
        whole in a single span; such a span may exceed token_budget, which
        then only limits how much else shares the step.
        """
        self._drain_intake()
        cfg = self.config
        budget = cfg.token_budget
        plan = StepPlan(spans=[], failed=[])

        for req in list(self.decoding):
            if budget == 0 or len(plan.spans) >= cfg.max_batch_requests:
                break
            if not self._ensure_blocks(req, req.processed + 1):
                # a decode that cannot get its next block can never finish;
                # fail it now rather than stall the queue forever
                self._fail(req, "pool exhausted during decode", now)
                plan.failed.append(req)
                continue
            plan.spans.append(ScheduledSpan(req, req.processed, req.processed + 1, "decode"))
            budget -= 1

        for req in list(self.prefilling) + list(self.waiting):
            if budget == 0 and cfg.chunked_prefill:
                break
            if len(plan.spans) >= cfg.max_batch_requests:
                break
            if not req.cache_checked:
                self._cache_lookup(req)
            remaining = req.prompt_len - req.processed
            assert remaining > 0
            chunk = min(remaining, budget) if cfg.chunked_prefill else remaining
            if chunk == 0:
                break
            if not self._ensure_blocks(req, req.processed + chunk):
                break  # strict FCFS: nobody overtakes a deferred head
            if req.state is RequestState.QUEUED:
                # admission: queue time ends at the first scheduled work, so
                # the stamp goes here and not on deferred attempts
                req.prefill_start = now
                req.state = RequestState.PREFILLING
                self.waiting.remove(req)
                self.prefilling.append(req)
            plan.spans.append(ScheduledSpan(req, req.processed, req.processed + chunk, "prefill"))
            budget = max(0, budget - chunk)
            if not cfg.chunked_prefill:
                break  # unchunked prefills do not share the step with more prefills

        plan.budget_used = sum(len(s) for s in plan.spans)
        return plan

    def _cache_lookup(self, req: Request) -> None:
        """One-time prefix lookup; hit tokens count as prefill already done."""
        if self.prefix_caching:
            keys = req.block_keys(req.prompt_len, self.pool.block_size)
            _, hit_tokens = self.pool.find_cached_prefix(req.request_id, req.prompt, keys)
        else:
            self.pool.register_request(req.request_id)
            hit_tokens = 0
        req.processed = hit_tokens
        req.hit_tokens = hit_tokens
        req.cache_checked = True

    def _ensure_blocks(self, req: Request, n_tokens: int) -> bool:
        owned = len(self.pool._owned.get(req.request_id, ()))
        need = -(-n_tokens // self.pool.block_size) - owned
        if need <= 0:
            return True
        try:
            self.pool.allocate(req.request_id, need)
        except PoolExhaustedError:
            return False
        return True

    def _fail(self, req: Request, reason: str, now: float) -> None:
        req.failed = reason
        req.state = RequestState.FINISHED
        req.finish = now
        if req in self.decoding:
            self.decoding.remove(req)
        if req in self.prefilling:
            self.prefilling.remove(req)

    def on_span_done(self, req: Request, span: ScheduledSpan, emitted: int | None, now: float) -> bool:
        """Advance one request past an executed span; True when it finished."""
        assert span.start == req.processed
        req.processed = span.end
        req.computed_tokens += len(span)
        if emitted is not None:
            req.generated.append(emitted)
        if req.state is RequestState.PREFILLING and req.processed == req.prompt_len:
            req.state = RequestState.DECODING
            req.decode_start = now
            self.prefilling.remove(req)
            self.decoding.append(req)
        if len(req.generated) >= req.max_new_tokens:
            req.state = RequestState.FINISHED
            req.finish = now
            if req in self.decoding:
                self.decoding.remove(req)
            return True
        return False
