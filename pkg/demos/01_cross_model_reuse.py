"""
Cross-model KV reuse between a base model and an activated adapter
==================================================================

A chat turn runs on the base model. An activated adapter (a judge, a
safety check, a reranker) then reads the finished exchange. Because the
adapter's weights only switch on after its invocation tokens, everything
before the invocation is computed with plain base weights, and the KV
rows it needs are the ones the base turn already wrote. The cache can
hand them over wholesale. A standard LoRA adapter touches every position,
so it gets nothing.

This script runs the same two-turn conversation in both modes and prints
the hit/computed split per request.
"""

import numpy as np

from aloraserve import (
    AdapterSpec,
    Engine,
    EngineConfig,
    ModelConfig,
    SchedulerConfig,
    VirtualClock,
    end_of_turn_token,
    invocation_for,
)

VOCAB = 256
EOT = end_of_turn_token(VOCAB)  # closes a turn in the transcript
INV = invocation_for(VOCAB, 0)  # the judge's 3-token activation phrase


def fresh_engine(mode):
    # comparison_mode picks how the registered adapter behaves: "alora"
    # activates at the invocation, "lora" applies to the whole sequence.
    cfg = EngineConfig(
        model=ModelConfig(),
        scheduler=SchedulerConfig(token_budget=64),
        pool_blocks=64,
        block_size=4,
        adapters=(AdapterSpec(adapter_id="judge", rank=8, seed=1, invocation_tokens=INV),),
        comparison_mode=mode,
    )
    return Engine(cfg, clock=VirtualClock())


rng = np.random.default_rng(0)
prompt = rng.integers(0, VOCAB - 32, 24)  # 24 tokens of user text

for mode in ("alora", "lora"):
    eng = fresh_engine(mode)
    print(f"--- {mode} ---")

    # Turn 1: the base model answers. 24 prompt tokens, 8 generated, so the
    # cache ends up holding the 24 + 8 - 1 = 31 positions that were actually
    # processed (the last sampled token is emitted, never fed back).
    answer, chat = eng.run_request(prompt, max_new_tokens=8, request_id="chat")
    print(f"chat : hit {chat.hit_tokens:3d}  computed {chat.computed_tokens:3d}")

    # Turn 2: the judge reads the whole exchange. Its prompt is the base
    # turn's transcript, an end-of-turn marker, and the invocation: 36 tokens.
    transcript = np.concatenate([prompt, answer, [EOT], INV])
    verdict, judge = eng.run_request(transcript, adapter_id="judge",
                                     max_new_tokens=4, request_id="judge")
    print(f"judge: hit {judge.hit_tokens:3d}  computed {judge.computed_tokens:3d}")

    # Activated: every full block of the base chain is reused, floor(31/4)*4
    # = 28 tokens, leaving 8 prompt tokens plus 3 decode steps to compute.
    # Standard: zero reuse, all 36 + 3 computed.
    expect = (31 // 4) * 4 if mode == "alora" else 0
    assert judge.hit_tokens == expect

print()
print("--- reverse direction (adapter first, base second) ---")

# Reuse also flows the other way. The judge screens the prompt before the
# base model sees it; its pre-invocation KV (the 24 conversation tokens,
# 6 full blocks) is then picked up by the base turn.
for mode in ("alora", "lora"):
    eng = fresh_engine(mode)
    screen, first = eng.run_request(np.concatenate([prompt, INV]), adapter_id="judge",
                                    max_new_tokens=4, request_id="screen")
    followup = np.concatenate([prompt, INV, screen, [EOT]])
    _, second = eng.run_request(followup, max_new_tokens=8, request_id="answer")
    print(f"{mode:5s}: base turn hit {second.hit_tokens:3d} "
          f"computed {second.computed_tokens:3d}")
    assert second.hit_tokens == ((24 // 4) * 4 if mode == "alora" else 0)
