"""Desk-scale serving engine demonstrating cross-model KV-cache reuse
between a base transformer and its activated LoRA adapters.

An activated adapter leaves every token before its invocation sequence on
the plain base weights, so the KV entries for that span are bit-identical
to the base model's and the paged cache can share them across models, in
both directions. Standard LoRA, applied from token zero, gets its own cache
namespace and shares nothing. The package provides the model, the
content-addressed block pool, a continuous-batching scheduler, and
benchmark pipelines that measure what the sharing buys.
"""

from .adapters import LoraAdapter, adapter_from_dict, generate_adapter, load_adapter_file
from .bench import (
    BenchResult,
    ComparisonError,
    ComparisonReport,
    LoadSpec,
    PipelineSpec,
    SweepSpec,
    build_engine_for,
    compare_modes,
    end_of_turn_token,
    fixed_batch_size,
    invocation_for,
    poisson_gaps,
    run_async_load,
    run_multi_adapter,
    run_sweep,
    run_sync_pipeline,
    self_check,
)
from .clock import VirtualClock, WallClock
from .engine import (
    ActivationMask,
    AdapterSpec,
    Engine,
    EngineConfig,
    InvocationNotFoundError,
    build_activation_mask,
    detect_invocation,
    load_engine_config,
)
from .kv_cache import (
    Block,
    BlockPool,
    BlockTable,
    KVEntry,
    PoolExhaustedError,
    compute_block_keys,
    hash_block,
)
from .metrics import (
    AggregateRow,
    RequestMetrics,
    aggregate,
    export_metrics,
    finalize_request,
    format_aggregate_table,
    render_csv,
    render_json,
)
from .model import (
    Model,
    ModelConfig,
    SeqInput,
    generate_weights,
    greedy_next_token,
    paged_attention,
    project_qkv_masked,
)
from .scheduler import Request, RequestState, Scheduler, SchedulerConfig

__version__ = "0.1.0"
