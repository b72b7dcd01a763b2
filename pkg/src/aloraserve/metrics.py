"""Per-request latency metrics and their exports.

Stage durations come from the four lifecycle stamps (arrival, first
scheduling, generation start, completion). The derived numbers are defined
as sums of those stages, so e2e == queue + prefill + decode and
ttft == queue + prefill hold exactly, by construction, in both wall and
virtual clock runs. itl is decode time per generated-token gap and is
undefined for single-token generations.

Exports round floats to six significant digits in both formats, so a CSV
and a JSON of the same run carry identical values and re-exporting is
byte-stable.
"""

import csv
import io
import json
from dataclasses import dataclass

CSV_COLUMNS = [
    "request_id",
    "mode",
    "pipeline",
    "stage",
    "prompt_len",
    "gen_len",
    "queue_s",
    "prefill_s",
    "decode_s",
    "ttft_s",
    "itl_s",
    "e2e_s",
    "hit_tokens",
    "computed_tokens",
]


@dataclass(frozen=True)
class RequestMetrics:
    request_id: str
    mode: str
    pipeline: str
    stage: str
    prompt_len: int
    gen_len: int
    queue_s: float | None
    prefill_s: float | None
    decode_s: float | None
    ttft_s: float | None
    itl_s: float | None
    e2e_s: float | None
    hit_tokens: int
    computed_tokens: int
    failed: str | None = None  # not exported; incomplete rows have empty durations


def _gap(a, b):
    if a is None or b is None:
        return None
    return b - a


def finalize_request(req) -> "RequestMetrics":
    """Fold a finished Request's stamps into one metrics row.

    Failed requests keep whatever stages they completed; missing stages
    stay None and the derived sums degrade to None with them.
    """
    queue = _gap(req.arrival, req.prefill_start)
    prefill = _gap(req.prefill_start, req.decode_start)
    decode = _gap(req.decode_start, req.finish)
    ttft = None if queue is None or prefill is None else queue + prefill
    e2e = None if ttft is None or decode is None else ttft + decode
    gen = len(req.generated)
    itl = decode / (gen - 1) if decode is not None and gen >= 2 else None
    return RequestMetrics(
        request_id=req.request_id,
        mode=req.meta.get("mode", ""),
        pipeline=req.meta.get("pipeline", ""),
        stage=req.meta.get("stage", ""),
        prompt_len=req.prompt_len,
        gen_len=gen,
        queue_s=queue,
        prefill_s=prefill,
        decode_s=decode,
        ttft_s=ttft,
        itl_s=itl,
        e2e_s=e2e,
        hit_tokens=req.hit_tokens,
        computed_tokens=req.computed_tokens,
        failed=req.failed,
    )


def _round6(v):
    if v is None:
        return None
    return float(f"{v:.6g}")


def _row_dict(m: RequestMetrics) -> dict:
    d = {}
    for col in CSV_COLUMNS:
        v = getattr(m, col)
        if col.endswith("_s"):
            v = _round6(v)
        d[col] = v
    return d


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for m in rows:
        d = _row_dict(m)
        w.writerow(["" if d[c] is None else d[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def render_json(rows) -> str:
    return json.dumps([_row_dict(m) for m in rows], indent=2) + "\n"


def export_metrics(rows, path, fmt: str = "csv") -> None:
    """Write per-request rows as CSV or JSON (same values either way)."""
    if fmt == "csv":
        text = render_csv(rows)
    elif fmt == "json":
        text = render_json(rows)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w") as f:
        f.write(text)


def _mean(xs):
    return sum(xs) / len(xs) if xs else None


def _median(xs):
    if not xs:
        return None
    s = sorted(xs)
    n = len(s)
    mid = n // 2
    return s[mid] if n % 2 else (s[mid - 1] + s[mid]) / 2


def _p95(xs):
    if not xs:
        return None
    s = sorted(xs)
    # nearest-rank
    idx = max(0, -(-95 * len(s) // 100) - 1)
    return s[idx]


@dataclass(frozen=True)
class AggregateRow:
    pipeline: str
    stage: str
    mode: str
    count: int
    queue_mean: float | None
    queue_p95: float | None
    prefill_mean: float | None
    prefill_p95: float | None
    decode_mean: float | None
    ttft_mean: float | None
    ttft_median: float | None
    itl_mean: float | None
    e2e_mean: float | None
    e2e_median: float | None
    e2e_p95: float | None
    hit_rate: float | None
    throughput_tok_s: float | None


def aggregate(rows) -> list:
    """Group rows by (pipeline, stage, mode) and summarize.

    hit_rate is total hit tokens over total prefill-relevant tokens
    (hit + computed); throughput is total tokens handled (prompt + gen)
    per unit of summed e2e. Failed rows are excluded.
    """
    groups = {}
    for m in rows:
        if m.failed is not None:
            continue
        groups.setdefault((m.pipeline, m.stage, m.mode), []).append(m)
    out = []
    for (pipeline, stage, mode), ms in sorted(groups.items()):
        def vals(attr):
            return [getattr(m, attr) for m in ms if getattr(m, attr) is not None]

        hit = sum(m.hit_tokens for m in ms)
        computed = sum(m.computed_tokens for m in ms)
        e2e_total = sum(vals("e2e_s"))
        tokens_total = sum(m.prompt_len + m.gen_len for m in ms)
        out.append(
            AggregateRow(
                pipeline=pipeline,
                stage=stage,
                mode=mode,
                count=len(ms),
                queue_mean=_mean(vals("queue_s")),
                queue_p95=_p95(vals("queue_s")),
                prefill_mean=_mean(vals("prefill_s")),
                prefill_p95=_p95(vals("prefill_s")),
                decode_mean=_mean(vals("decode_s")),
                ttft_mean=_mean(vals("ttft_s")),
                ttft_median=_median(vals("ttft_s")),
                itl_mean=_mean(vals("itl_s")),
                e2e_mean=_mean(vals("e2e_s")),
                e2e_median=_median(vals("e2e_s")),
                e2e_p95=_p95(vals("e2e_s")),
                hit_rate=hit / (hit + computed) if hit + computed else None,
                throughput_tok_s=tokens_total / e2e_total if e2e_total else None,
            )
        )
    return out


def format_aggregate_table(agg_rows) -> str:
    """Fixed-width text table for terminal output."""
    cols = [
        ("pipeline", 18),
        ("stage", 7),
        ("mode", 6),
        ("count", 6),
        ("queue_mean", 11),
        ("prefill_mean", 13),
        ("decode_mean", 12),
        ("ttft_mean", 11),
        ("e2e_mean", 11),
        ("hit_rate", 9),
    ]
    def cell(v, width):
        if v is None:
            s = "-"
        elif isinstance(v, float):
            s = f"{v:.4g}"
        else:
            s = str(v)
        return s.rjust(width)

    lines = ["".join(name.rjust(w) for name, w in cols)]
    for r in agg_rows:
        lines.append("".join(cell(getattr(r, name), w) for name, w in cols))
    return "\n".join(lines)
