"""Benchmark pipelines over the engine.

All pipelines share one turn algebra on randomly sampled conversations:

    base turn:   conversation -> y generated tokens, then an end-of-turn id
    eval turn:   conversation + invocation suffix -> r tokens (the adapter)
    final turn:  conversation + every (invocation + eval output + end-of-turn)
                 back through the base model

"base_adapter" is base then eval; "adapter_base" is eval then base;
"base_adapter_base" adds the final turn; "multi_adapter" runs n_adapters
eval turns in parallel between base and final. The same shapes drive the
synchronous batch runner (phase barriers, every instance finishes a turn
before the next phase starts) and the async runner (Poisson arrivals,
per-instance chaining through the engine's finish callback).

Token id layout: the top RESERVED_TOKENS ids of the vocabulary never appear
in sampled conversation text. The highest id is the end-of-turn marker and
each adapter owns a 3-token invocation sequence below it, so an invocation
occurs in a prompt exactly where a driver put it.
"""

import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .clock import VirtualClock, WallClock
from .engine import AdapterSpec, Engine, EngineConfig
from .metrics import aggregate
from .model import ModelConfig
from .scheduler import SchedulerConfig

RESERVED_TOKENS = 32
INVOCATION_LEN = 3
_DEFAULT_RANK = 8


class ComparisonError(RuntimeError):
    """Two runs that were supposed to be comparable are not."""


@dataclass(frozen=True)
class PipelineSpec:
    pipeline: str = "base_adapter"  # base_adapter | adapter_base | base_adapter_base | multi_adapter
    mode: str = "alora"  # alora | lora
    prompt_len: int = 64
    gen_len: int = 64
    adapter_gen_len: int = 16
    n_adapters: int = 1
    batch: int = 1  # concurrent pipeline instances (sync runner)
    seed: int = 0

    def __post_init__(self):
        if self.pipeline not in ("base_adapter", "adapter_base", "base_adapter_base", "multi_adapter"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.mode not in ("alora", "lora"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.prompt_len, self.gen_len, self.adapter_gen_len, self.n_adapters, self.batch) < 1:
            raise ValueError("pipeline dimensions must be >= 1")


@dataclass(frozen=True)
class LoadSpec:
    arrival_rate: float = 1.0  # pipeline instances per clock unit
    n_requests: int = 50  # pipeline instances
    seed: int = 0

    def __post_init__(self):
        if self.arrival_rate <= 0:
            raise ValueError("arrival_rate must be > 0")
        if self.n_requests < 1:
            raise ValueError("n_requests must be >= 1")


@dataclass(frozen=True)
class SweepSpec:
    param: str  # prompt_len | gen_len | adapter_gen_len | arrival_rate | pool_blocks
    values: tuple
    base: PipelineSpec = field(default_factory=PipelineSpec)
    load: LoadSpec | None = None  # set for async (arrival_rate / pool_blocks) sweeps

    def __post_init__(self):
        if self.param not in ("prompt_len", "gen_len", "adapter_gen_len", "arrival_rate", "pool_blocks"):
            raise ValueError(f"unknown sweep param {self.param!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.param in ("arrival_rate", "pool_blocks") and self.load is None:
            raise ValueError(f"sweeping {self.param} requires a LoadSpec")


@dataclass
class BenchResult:
    rows: list  # RequestMetrics, finish order
    engine: "Engine"


def end_of_turn_token(vocab_size: int) -> int:
    return vocab_size - 1


def invocation_for(vocab_size: int, k: int) -> tuple:
    """The 3-token invocation sequence owned by adapter k."""
    base = vocab_size - RESERVED_TOKENS + INVOCATION_LEN * k
    if base + INVOCATION_LEN >= vocab_size:  # must stay below the end-of-turn id
        raise ValueError(f"adapter index {k} does not fit in the reserved token range")
    return tuple(range(base, base + INVOCATION_LEN))


def random_conversation(rng: np.random.Generator, n: int, vocab_size: int) -> np.ndarray:
    """Conversation text never touches the reserved id range."""
    return rng.integers(0, vocab_size - RESERVED_TOKENS, n, dtype=np.int64)


def poisson_gaps(rate: float, n: int, seed: int) -> np.ndarray:
    """Inter-arrival gaps of a Poisson process: iid exponential, mean 1/rate."""
    if rate <= 0:
        raise ValueError("rate must be > 0")
    if n < 0:
        raise ValueError("n must be >= 0")
    return np.random.default_rng(seed).exponential(1.0 / rate, n)


def _pipeline_shape(spec: PipelineSpec):
    """(base turn first, has final turn, number of eval turns)."""
    return {
        "base_adapter": (True, False, 1),
        "adapter_base": (False, True, 1),
        "base_adapter_base": (True, True, 1),
        "multi_adapter": (True, True, spec.n_adapters),
    }[spec.pipeline]


def _turn_totals(spec: PipelineSpec, prompt_len=None, gen_len=None, adapter_gen_len=None):
    """Final sequence length of every turn in one pipeline instance."""
    x = spec.prompt_len if prompt_len is None else prompt_len
    y = spec.gen_len if gen_len is None else gen_len
    r = spec.adapter_gen_len if adapter_gen_len is None else adapter_gen_len
    base_first, has_final, n_eval = _pipeline_shape(spec)
    totals = []
    conv = x
    if base_first:
        totals.append(conv + y)
        conv += y + 1
    totals.append(conv + INVOCATION_LEN + r)
    if has_final:
        totals.append(conv + n_eval * (INVOCATION_LEN + r + 1) + y)
    return totals


def max_request_tokens(sweep: SweepSpec) -> int:
    """Longest single-request sequence anywhere in the sweep."""
    longest = 0
    for v in sweep.values:
        kw = {}
        if sweep.param in ("prompt_len", "gen_len", "adapter_gen_len"):
            kw[sweep.param] = v
        longest = max(longest, max(_turn_totals(sweep.base, **kw)))
    return longest


def fixed_batch_size(pool_blocks: int, block_size: int, max_seq_tokens: int) -> int:
    """Concurrent instances the pool is guaranteed to hold at peak, held
    constant across a sweep.

    Counted in blocks, not tokens: a request of n tokens occupies
    ceil((n - 1) / block_size) blocks at its peak (the final token is
    emitted, never processed), and rounding to token capacity instead can
    admit one instance too many and kill a decode mid-flight."""
    peak_blocks = -(-(max_seq_tokens - 1) // block_size)
    return max(1, pool_blocks // max(1, peak_blocks))


def build_engine_for(
    spec: PipelineSpec,
    pool_blocks: int = 512,
    block_size: int = 4,
    token_budget: int = 64,
    virtual_clock: bool = True,
    model_seed: int = 0,
    max_batch_requests: int | None = None,
    prefix_caching: bool = True,
    chunked_prefill: bool = True,
) -> Engine:
    """Engine with one registered adapter per eval slot of the pipeline."""
    model = ModelConfig(seed=model_seed)
    _, _, n_eval = _pipeline_shape(spec)
    adapters = tuple(
        AdapterSpec(
            adapter_id=f"adapter{k}",
            rank=_DEFAULT_RANK,
            seed=spec.seed,
            invocation_tokens=invocation_for(model.vocab_size, k),
        )
        for k in range(n_eval)
    )
    if max_batch_requests is None:
        max_batch_requests = max(8, 2 * spec.batch, n_eval * spec.batch + 2)
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
        comparison_mode=spec.mode,
        prefix_caching=prefix_caching,
    )
    return Engine(cfg, clock=VirtualClock() if virtual_clock else WallClock())


@dataclass
class _Instance:
    idx: int
    conv: np.ndarray  # conversation so far (base-model view)
    eval_out: dict = field(default_factory=dict)  # eval slot -> generated list
    evals_done: int = 0
    complete: bool = False


def _meta(spec, stage, idx):
    return {"pipeline": spec.pipeline, "mode": spec.mode, "stage": stage, "instance": idx}


def _eot(engine) -> int:
    return end_of_turn_token(engine.config.model.vocab_size)


def _base_rid(prefix, idx):
    return f"{prefix}i{idx}-base"


def _eval_rid(prefix, idx, k):
    return f"{prefix}i{idx}-eval{k}"


def _final_rid(prefix, idx):
    return f"{prefix}i{idx}-final"


def _eval_prompt(engine, inst, k):
    inv = np.asarray(engine.adapters[f"adapter{k}"].invocation_tokens, dtype=np.int64)
    return np.concatenate([inst.conv, inv])


def _final_prompt(engine, inst, n_eval):
    parts = [inst.conv]
    eot = _eot(engine)
    for k in range(n_eval):
        inv = np.asarray(engine.adapters[f"adapter{k}"].invocation_tokens, dtype=np.int64)
        gen = np.asarray(inst.eval_out[k], dtype=np.int64)
        parts.append(np.concatenate([inv, gen, [eot]]))
    return np.concatenate(parts)


def _absorb_base(inst, generated, eot):
    inst.conv = np.concatenate([inst.conv, np.asarray(generated, dtype=np.int64), [eot]])


def run_sync_pipeline(spec: PipelineSpec, engine: Engine | None = None, rid_prefix: str = "", **engine_kw) -> BenchResult:
    """Run `spec.batch` pipeline instances with phase barriers.

    All instances are submitted back to back at each phase start (prompts
    are assembled beforehand, so submission cost does not depend on prompt
    length), and the engine drains before the next phase. Returns every
    per-request metrics row the engine produced.
    """
    if engine is None:
        engine = build_engine_for(spec, **engine_kw)
    base_first, has_final, n_eval = _pipeline_shape(spec)
    rng = np.random.default_rng(spec.seed)
    vocab = engine.config.model.vocab_size
    insts = [_Instance(i, random_conversation(rng, spec.prompt_len, vocab)) for i in range(spec.batch)]
    eot = _eot(engine)

    if base_first:
        submits = [(_base_rid(rid_prefix, i.idx), i.conv, None, spec.gen_len, _meta(spec, "base", i.idx)) for i in insts]
        _run_phase(engine, submits)
        for inst in insts:
            _absorb_base(inst, engine.finished[_base_rid(rid_prefix, inst.idx)].generated, eot)

    submits = []
    for inst in insts:
        for k in range(n_eval):
            submits.append(
                (_eval_rid(rid_prefix, inst.idx, k), _eval_prompt(engine, inst, k), f"adapter{k}",
                 spec.adapter_gen_len, _meta(spec, "eval", inst.idx))
            )
    _run_phase(engine, submits)
    for inst in insts:
        for k in range(n_eval):
            inst.eval_out[k] = list(engine.finished[_eval_rid(rid_prefix, inst.idx, k)].generated)

    if has_final:
        submits = [
            (_final_rid(rid_prefix, i.idx), _final_prompt(engine, i, n_eval), None, spec.gen_len,
             _meta(spec, "final", i.idx))
            for i in insts
        ]
        _run_phase(engine, submits)

    return BenchResult(rows=list(engine.metrics), engine=engine)


def _run_phase(engine, submits):
    for rid, prompt, adapter_id, gen, meta in submits:
        engine.submit(prompt, adapter_id=adapter_id, max_new_tokens=gen, request_id=rid, meta=meta)
    engine.run_until_idle()


def run_multi_adapter(spec: PipelineSpec, engine: Engine | None = None, **kw) -> BenchResult:
    """Parallel-adapter pipeline; thin wrapper fixing the pipeline kind."""
    if spec.pipeline != "multi_adapter":
        spec = replace(spec, pipeline="multi_adapter")
    return run_sync_pipeline(spec, engine=engine, **kw)


def run_async_load(spec: PipelineSpec, load: LoadSpec, engine: Engine | None = None,
                   rid_prefix: str = "", **engine_kw) -> BenchResult:
    """Submit pipeline instances at Poisson arrival times.

    Turn chaining rides the engine's finish callback: a base turn's
    completion submits the eval turn(s), the last eval submits the final
    turn where the pipeline has one. Under a virtual clock everything runs
    on this thread and idle gaps are skipped deterministically; under a
    wall clock a separate submitter thread feeds the intake at real arrival
    times while this thread steps the engine.
    """
    if engine is None:
        engine = build_engine_for(spec, **engine_kw)
    base_first, has_final, n_eval = _pipeline_shape(spec)
    rng = np.random.default_rng(load.seed)
    vocab = engine.config.model.vocab_size
    insts = [_Instance(i, random_conversation(rng, spec.prompt_len, vocab)) for i in range(load.n_requests)]
    arrivals = np.cumsum(poisson_gaps(load.arrival_rate, load.n_requests, load.seed + 1))
    eot = _eot(engine)
    done = threading.Event()
    n_complete = [0]

    def submit_evals(inst):
        for k in range(n_eval):
            engine.submit(
                _eval_prompt(engine, inst, k), adapter_id=f"adapter{k}",
                max_new_tokens=spec.adapter_gen_len,
                request_id=_eval_rid(rid_prefix, inst.idx, k), meta=_meta(spec, "eval", inst.idx),
            )

    def finish_instance(inst):
        inst.complete = True
        n_complete[0] += 1
        if n_complete[0] == len(insts):
            done.set()

    def on_finish(req, _metrics):
        stage = req.meta.get("stage")
        if stage not in ("base", "eval", "final"):
            return
        inst = insts[req.meta["instance"]]
        if stage == "base":
            _absorb_base(inst, req.generated, eot)
            submit_evals(inst)
        elif stage == "eval":
            k = int(req.request_id.rsplit("eval", 1)[1])
            inst.eval_out[k] = list(req.generated)
            inst.evals_done += 1
            if inst.evals_done == n_eval:
                if has_final:
                    engine.submit(
                        _final_prompt(engine, inst, n_eval), max_new_tokens=spec.gen_len,
                        request_id=_final_rid(rid_prefix, inst.idx), meta=_meta(spec, "final", inst.idx),
                    )
                else:
                    finish_instance(inst)
        else:
            finish_instance(inst)

    engine.on_finish = on_finish

    def first_turn(inst):
        if base_first:
            engine.submit(inst.conv, max_new_tokens=spec.gen_len,
                          request_id=_base_rid(rid_prefix, inst.idx), meta=_meta(spec, "base", inst.idx))
        else:
            submit_evals(inst)

    if isinstance(engine.clock, VirtualClock):
        i = 0
        while not done.is_set():
            while i < len(insts) and arrivals[i] <= engine.clock.now() + 1e-9:
                first_turn(insts[i])
                i += 1
            if engine.step():
                continue
            if i < len(insts):
                engine.clock.jump_to(arrivals[i])
                continue
            if not done.is_set():
                raise RuntimeError("async run wedged: engine idle with incomplete pipelines")
    else:
        t0 = engine.clock.now()

        def feeder():
            for i, inst in enumerate(insts):
                engine.clock.jump_to(t0 + arrivals[i])
                first_turn(inst)

        th = threading.Thread(target=feeder, daemon=True)
        th.start()
        while not done.is_set():
            if not engine.step():
                time.sleep(0.0005)
        th.join()

    engine.on_finish = None
    return BenchResult(rows=list(engine.metrics), engine=engine)


def _eval_stage_summary(rows) -> dict:
    agg = [a for a in aggregate(rows) if a.stage == "eval"]
    if len(agg) != 1:
        raise ComparisonError(f"expected one eval-stage aggregate, found {len(agg)}")
    a = agg[0]
    return {
        "count": a.count,
        "queue_s": a.queue_mean,
        "prefill_s": a.prefill_mean,
        "decode_s": a.decode_mean,
        "ttft_s": a.ttft_mean,
        "e2e_s": a.e2e_mean,
        "hit_rate": a.hit_rate,
    }


def _check_arms_match(rows_a, rows_b):
    """Comparable runs must cover identical requests with identical shapes."""
    shape_a = {m.request_id: (m.stage, m.prompt_len, m.gen_len) for m in rows_a}
    shape_b = {m.request_id: (m.stage, m.prompt_len, m.gen_len) for m in rows_b}
    if shape_a != shape_b:
        only_a = set(shape_a) - set(shape_b)
        only_b = set(shape_b) - set(shape_a)
        raise ComparisonError(
            f"mode arms diverged: {len(only_a)} requests only in alora, "
            f"{len(only_b)} only in lora, or shapes differ"
        )


@dataclass
class ComparisonReport:
    param: str
    batch: int | None
    rows: list  # per swept value: {"value", "alora", "lora", "ratio"}

    def to_table(self) -> str:
        header = f"{self.param:>12} {'batch':>6} {'metric':>10} {'alora':>12} {'lora':>12} {'lora/alora':>11}"
        lines = [header]
        for row in self.rows:
            for metric in ("queue_s", "prefill_s", "ttft_s", "e2e_s", "hit_rate"):
                a = row["alora"].get(metric)
                l = row["lora"].get(metric)
                r = row["ratio"].get(metric)
                fmt = lambda v: "-" if v is None else f"{v:.5g}"
                lines.append(
                    f"{row['value']:>12} {self.batch if self.batch is not None else '-':>6} "
                    f"{metric:>10} {fmt(a):>12} {fmt(l):>12} {fmt(r):>11}"
                )
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["value,metric,alora,lora,ratio"]
        for row in self.rows:
            for metric in sorted(set(row["alora"]) | set(row["lora"])):
                if metric == "count":
                    continue
                a = row["alora"].get(metric)
                l = row["lora"].get(metric)
                r = row["ratio"].get(metric)
                cell = lambda v: "" if v is None else f"{v:.6g}"
                lines.append(f"{row['value']},{metric},{cell(a)},{cell(l)},{cell(r)}")
        return "\n".join(lines) + "\n"


def _one_arm(sweep: SweepSpec, value, mode: str, batch: int | None, pool_blocks: int, **kw) -> BenchResult:
    spec = sweep.base
    if sweep.param in ("prompt_len", "gen_len", "adapter_gen_len"):
        spec = replace(spec, **{sweep.param: int(value)})
    spec = replace(spec, mode=mode)
    # request ids carry the swept value but not the mode, so the two arms of
    # a comparison produce identical id sets and can be paired up
    prefix = f"{sweep.param[0]}{value}-"
    if sweep.load is None:
        assert batch is not None
        spec = replace(spec, batch=batch)
        return run_sync_pipeline(spec, rid_prefix=prefix, pool_blocks=pool_blocks, **kw)
    load = sweep.load
    if sweep.param == "arrival_rate":
        load = replace(load, arrival_rate=float(value))
    if sweep.param == "pool_blocks":
        pool_blocks = int(value)
    return run_async_load(spec, load, rid_prefix=prefix, pool_blocks=pool_blocks, **kw)


def run_sweep(sweep: SweepSpec, mode: str | None = None, pool_blocks: int | None = None,
              block_size: int = 4, target_batch: int = 4, **kw):
    """One mode across the swept values. Returns (results per value, batch)."""
    mode = mode or sweep.base.mode
    batch = None
    if sweep.load is None:
        longest = max_request_tokens(sweep)
        if pool_blocks is None:
            # size the pool for about target_batch concurrent longest sequences
            pool_blocks = -(-target_batch * longest // block_size) + 2 * target_batch + 8
        batch = fixed_batch_size(pool_blocks, block_size, longest)
    elif pool_blocks is None:
        pool_blocks = 512
    results = []
    for v in sweep.values:
        results.append((v, _one_arm(sweep, v, mode, batch, pool_blocks, block_size=block_size, **kw)))
    return results, batch, pool_blocks


def compare_modes(sweep: SweepSpec, pool_blocks: int | None = None, block_size: int = 4,
                  target_batch: int = 4, **kw) -> ComparisonReport:
    """Run both adapter modes over the sweep and pair their eval stages.

    Both arms see identical seeds, conversations, and batch sizes; the
    report refuses to pair arms whose request sets diverged. Ratios are
    lora over alora, so values above 1 mean the activated adapter is
    cheaper.
    """
    alora, batch, pool_blocks = run_sweep(sweep, "alora", pool_blocks, block_size, target_batch, **kw)
    lora, batch_l, _ = run_sweep(sweep, "lora", pool_blocks, block_size, target_batch, **kw)
    if batch != batch_l:
        raise ComparisonError(f"batch rule diverged between arms: {batch} vs {batch_l}")
    rows = []
    for (va, res_a), (vl, res_l) in zip(alora, lora):
        assert va == vl
        _check_arms_match(res_a.rows, res_l.rows)
        summary_a = _eval_stage_summary(res_a.rows)
        summary_l = _eval_stage_summary(res_l.rows)
        ratio = {}
        for k in summary_a:
            if k == "count":
                continue
            a, l = summary_a[k], summary_l[k]
            ratio[k] = l / a if a not in (None, 0) and l is not None else None
        rows.append({"value": va, "alora": summary_a, "lora": summary_l, "ratio": ratio})
    return ComparisonReport(param=sweep.param, batch=batch, rows=rows)


def self_check(result: BenchResult) -> list:
    """Internal consistency of a finished run; returns violation strings."""
    problems = []
    result.engine.pool.check_conservation()
    for m in result.rows:
        if m.failed is not None:
            continue
        if m.e2e_s is None:
            problems.append(f"{m.request_id}: finished without full timing")
            continue
        if abs(m.e2e_s - (m.queue_s + m.prefill_s + m.decode_s)) > 1e-9:
            problems.append(f"{m.request_id}: e2e != queue+prefill+decode")
        if abs(m.ttft_s - (m.queue_s + m.prefill_s)) > 1e-9:
            problems.append(f"{m.request_id}: ttft != queue+prefill")
        if m.hit_tokens + m.computed_tokens != m.prompt_len + m.gen_len - 1:
            problems.append(f"{m.request_id}: hit+computed != prompt+gen-1")
    return problems
