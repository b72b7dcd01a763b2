"""Pipeline drivers: hit-count laws, async load, mode comparisons."""

import dataclasses

import numpy as np
import pytest

from aloraserve.bench import (
    ComparisonError,
    LoadSpec,
    PipelineSpec,
    SweepSpec,
    _check_arms_match,
    compare_modes,
    fixed_batch_size,
    invocation_for,
    max_request_tokens,
    poisson_gaps,
    random_conversation,
    run_async_load,
    run_multi_adapter,
    run_sweep,
    run_sync_pipeline,
    self_check,
)


def rows_by_stage(result, instance=0):
    out = {}
    for m in result.rows:
        if m.request_id.startswith(f"i{instance}-") or f"-i{instance}-" in m.request_id:
            out.setdefault(m.stage, []).append(m)
    return out


def expected_eval_hits(pipeline, x, y, B):
    # evals reuse the base turn's committed chain; without a base turn
    # there is nothing to reuse
    return ((x + y - 1) // B) * B if pipeline != "adapter_base" else 0


def expected_final_hits(pipeline, mode, x, y, B):
    if pipeline == "adapter_base":
        # reverse direction: the eval's pre-invocation blocks are the only
        # source, and only the activated adapter leaves them base-keyed
        return (x // B) * B if mode == "alora" else 0
    # conversation + base reply + end-of-turn; the activated eval commits
    # that whole span base-keyed, the standard one only leaves the base
    # turn's own blocks behind
    if mode == "alora":
        return ((x + y + 1) // B) * B
    return ((x + y - 1) // B) * B


class TestSpecValidation:
    def test_pipeline_spec(self):
        with pytest.raises(ValueError):
            PipelineSpec(pipeline="other")
        with pytest.raises(ValueError):
            PipelineSpec(mode="base")
        with pytest.raises(ValueError):
            PipelineSpec(prompt_len=0)

    def test_load_spec(self):
        with pytest.raises(ValueError):
            LoadSpec(arrival_rate=0.0)
        with pytest.raises(ValueError):
            LoadSpec(n_requests=0)

    def test_sweep_spec(self):
        with pytest.raises(ValueError):
            SweepSpec(param="block_size", values=(1,))
        with pytest.raises(ValueError):
            SweepSpec(param="prompt_len", values=())
        with pytest.raises(ValueError):
            SweepSpec(param="arrival_rate", values=(1.0,))  # needs a LoadSpec
        SweepSpec(param="arrival_rate", values=(1.0,), load=LoadSpec())


class TestTokenHelpers:
    def test_invocation_sequences_disjoint(self):
        seqs = [invocation_for(256, k) for k in range(9)]
        flat = [t for s in seqs for t in s]
        assert len(set(flat)) == len(flat)
        assert min(flat) >= 256 - 32
        assert max(flat) < 255  # end-of-turn id stays out of reach

    def test_invocation_range_exhausted(self):
        with pytest.raises(ValueError):
            invocation_for(256, 10)

    def test_conversation_avoids_reserved_ids(self):
        conv = random_conversation(np.random.default_rng(0), 500, 256)
        assert conv.max() < 256 - 32 and conv.min() >= 0

    def test_poisson_gaps(self):
        gaps = poisson_gaps(2.0, 20000, 0)
        assert abs(gaps.mean() - 0.5) / 0.5 < 0.05
        assert gaps.min() > 0
        assert poisson_gaps(1.0, 1, 0).shape == (1,)
        assert poisson_gaps(1.0, 0, 0).shape == (0,)
        with pytest.raises(ValueError):
            poisson_gaps(0.0, 5, 0)


class TestHitCounts:
    @pytest.mark.parametrize("pipeline", ["base_adapter", "adapter_base", "base_adapter_base"])
    @pytest.mark.parametrize("mode", ["alora", "lora"])
    @pytest.mark.parametrize("B,x,y,r", [(4, 10, 6, 3), (3, 11, 5, 4), (1, 7, 4, 2), (8, 16, 8, 5)])
    def test_single_instance(self, pipeline, mode, B, x, y, r):
        spec = PipelineSpec(pipeline=pipeline, mode=mode, prompt_len=x, gen_len=y, adapter_gen_len=r, seed=3)
        res = run_sync_pipeline(spec, block_size=B)
        assert self_check(res) == []
        stages = rows_by_stage(res)
        if pipeline != "adapter_base":
            assert stages["base"][0].hit_tokens == 0
        eval_hits = expected_eval_hits(pipeline, x, y, B) if mode == "alora" else 0
        assert stages["eval"][0].hit_tokens == eval_hits
        if pipeline != "base_adapter":
            assert stages["final"][0].hit_tokens == expected_final_hits(pipeline, mode, x, y, B)

    def test_batched_instances_do_not_interfere(self):
        spec = PipelineSpec(pipeline="base_adapter_base", prompt_len=9, gen_len=5, adapter_gen_len=3,
                            batch=3, seed=1)
        res = run_sync_pipeline(spec, block_size=4)
        assert self_check(res) == []
        for i in range(3):
            stages = rows_by_stage(res, instance=i)
            assert stages["eval"][0].hit_tokens == ((9 + 5 - 1) // 4) * 4
            assert stages["final"][0].hit_tokens == ((9 + 5 + 1) // 4) * 4

    def test_multi_adapter_hits_equal_across_adapters(self):
        spec = PipelineSpec(pipeline="multi_adapter", n_adapters=3, prompt_len=10, gen_len=6,
                            adapter_gen_len=3, seed=2)
        res = run_multi_adapter(spec, block_size=4)
        assert self_check(res) == []
        stages = rows_by_stage(res)
        hits = [m.hit_tokens for m in stages["eval"]]
        assert len(hits) == 3
        assert hits == [((10 + 6 - 1) // 4) * 4] * 3
        assert stages["final"][0].hit_tokens == ((10 + 6 + 1) // 4) * 4

    def test_multi_adapter_with_one_adapter_matches_three_stage_pipeline(self):
        common = dict(prompt_len=10, gen_len=6, adapter_gen_len=3, seed=5)
        res_multi = run_multi_adapter(PipelineSpec(pipeline="multi_adapter", n_adapters=1, **common))
        res_three = run_sync_pipeline(PipelineSpec(pipeline="base_adapter_base", **common))
        strip = lambda rows: [
            {k: v for k, v in dataclasses.asdict(m).items() if k != "pipeline"} for m in rows
        ]
        assert strip(res_multi.rows) == strip(res_three.rows)
        for rid, req in res_multi.engine.finished.items():
            assert req.generated == res_three.engine.finished[rid].generated


def test_sync_run_is_deterministic():
    spec = PipelineSpec(pipeline="base_adapter_base", prompt_len=12, gen_len=5, adapter_gen_len=3, batch=2)
    a = run_sync_pipeline(spec)
    b = run_sync_pipeline(spec)
    assert a.rows == b.rows


def test_turn_sequence_lengths():
    sweep = SweepSpec(
        param="prompt_len",
        values=(8, 32),
        base=PipelineSpec(pipeline="base_adapter_base", gen_len=8, adapter_gen_len=4),
    )
    assert max_request_tokens(sweep) == 32 + 8 + 1 + (3 + 4 + 1) + 8


def test_fixed_batch_size_rule():
    assert fixed_batch_size(512, 4, 100) == 20  # peak 25 blocks per instance
    assert fixed_batch_size(34, 4, 18) == 6  # block-quantized, not 34*4//18 = 7
    assert fixed_batch_size(10, 4, 1000) == 1  # never below one instance


class TestAsyncLoad:
    def test_virtual_run_completes_and_chains(self):
        spec = PipelineSpec(pipeline="base_adapter", prompt_len=9, gen_len=4, adapter_gen_len=3)
        load = LoadSpec(arrival_rate=0.05, n_requests=5, seed=0)
        res = run_async_load(spec, load)
        assert self_check(res) == []
        assert len(res.rows) == 10  # base + eval per instance
        by_id = {m.request_id: m for m in res.rows}
        for i in range(5):
            base = res.engine.finished[f"i{i}-base"]
            ev = res.engine.finished[f"i{i}-eval0"]
            assert ev.arrival == base.finish  # chained the moment the base turn ends
            assert by_id[f"i{i}-eval0"].hit_tokens == ((9 + 4 - 1) // 4) * 4

    def test_virtual_run_is_deterministic(self):
        spec = PipelineSpec(pipeline="base_adapter_base", prompt_len=8, gen_len=4, adapter_gen_len=2)
        load = LoadSpec(arrival_rate=0.1, n_requests=4, seed=7)
        a = run_async_load(spec, load)
        b = run_async_load(spec, load)
        assert a.rows == b.rows
        assert len(a.rows) == 12

    def test_arrivals_respect_poisson_schedule(self):
        spec = PipelineSpec(pipeline="base_adapter", prompt_len=8, gen_len=4, adapter_gen_len=2)
        load = LoadSpec(arrival_rate=0.01, n_requests=3, seed=1)  # sparse: engine idles between
        res = run_async_load(spec, load)
        arrivals = np.cumsum(poisson_gaps(load.arrival_rate, 3, load.seed + 1))
        for i in range(3):
            base = res.engine.finished[f"i{i}-base"]
            assert base.arrival == pytest.approx(arrivals[i])

    def test_wall_clock_smoke(self):
        spec = PipelineSpec(pipeline="base_adapter", prompt_len=8, gen_len=4, adapter_gen_len=2)
        load = LoadSpec(arrival_rate=200.0, n_requests=2, seed=0)
        res = run_async_load(spec, load, virtual_clock=False)
        assert self_check(res) == []
        assert len(res.rows) == 4
        assert all(m.failed is None for m in res.rows)


class TestComparison:
    def sweep(self):
        return SweepSpec(
            param="prompt_len",
            values=(8, 16),
            base=PipelineSpec(pipeline="base_adapter", gen_len=8, adapter_gen_len=4),
        )

    def test_run_sweep_sizes_pool_automatically(self):
        results, batch, pool_blocks = run_sweep(self.sweep(), target_batch=2)
        longest = max_request_tokens(self.sweep())
        assert pool_blocks == -(-2 * longest // 4) + 2 * 2 + 8
        assert batch == fixed_batch_size(pool_blocks, 4, longest)
        assert [v for v, _ in results] == [8, 16]
        for _, res in results:
            assert self_check(res) == []

    def test_compare_modes_report(self):
        report = compare_modes(self.sweep(), target_batch=2)
        assert report.param == "prompt_len"
        assert [r["value"] for r in report.rows] == [8, 16]
        for row in report.rows:
            assert row["alora"]["hit_rate"] > 0
            assert row["lora"]["hit_rate"] == 0.0
            assert row["ratio"]["hit_rate"] == 0.0
            assert row["alora"]["count"] == row["lora"]["count"]
            # activated evals skip most prefill work, so their prefill time
            # can never exceed the standard arm's
            assert row["alora"]["prefill_s"] <= row["lora"]["prefill_s"]
        table = report.to_table()
        assert "prompt_len" in table and "hit_rate" in table
        csv_text = report.to_csv()
        assert csv_text.startswith("value,metric,")
        assert "8,e2e_s," in csv_text

    def test_mismatched_arms_refused(self):
        spec = PipelineSpec(pipeline="base_adapter", prompt_len=8, gen_len=4, adapter_gen_len=2)
        full = run_sync_pipeline(spec)
        with pytest.raises(ComparisonError):
            _check_arms_match(full.rows, full.rows[:-1])
        with pytest.raises(ComparisonError):
            _check_arms_match(full.rows, [dataclasses.replace(full.rows[0], prompt_len=99)] + full.rows[1:])
