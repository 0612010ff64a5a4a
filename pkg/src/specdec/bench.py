"""Grid benchmark: tree shapes x batch sizes x context lengths.

Each grid point runs a fresh engine over seeded prompts and reports TPC,
throughput, per-stage times, and cache counters. Baseline rows (tree
"none") decode non-speculatively for speed-up ratios. Kernel backends are
swept sequentially because the backend switch is process-global; points
within one backend group can run in SPECDEC_WORKERS threads.

All randomness flows from the seed column inputs, so two runs of the same
grid differ only in the wall-clock columns.
"""

import os
import re
from concurrent.futures import ThreadPoolExecutor
from time import perf_counter

import numpy as np

from . import kernels
from .drafttree import DispatchTable, parse_tree
from .engine import Engine, EngineConfig
from .sampling import SamplerConfig

WORKERS_ENV = "SPECDEC_WORKERS"

FIELDS = [
    "model_tag", "backend", "tree", "batch_size", "context_len",
    "speculative", "rounds", "committed", "tpc", "tokens_per_second",
    "ms_prefill", "ms_dispatch", "ms_draft", "ms_validate", "ms_sample",
    "ms_bookkeep", "base_calls", "draft_calls", "cache_reused",
    "cache_evicted", "cache_dropped", "cache_allocated",
]

WALL_CLOCK_FIELDS = {"tokens_per_second", "ms_prefill", "ms_dispatch",
                     "ms_draft", "ms_validate", "ms_sample", "ms_bookkeep"}


def split_tree_list(text):
    """Split "chain:3,full:2,2" into tree specs; commas inside a spec stay."""
    parts = re.split(r",(?=(?:chain|full|nodes):)", text.strip())
    return [p for p in parts if p]


def _workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _prompts_for(seed, vocab, batch, context):
    rng = np.random.default_rng([seed, batch, context])
    return [list(rng.integers(0, vocab, size=context)) for _ in range(batch)]


def run_point(base, draft, model_tag, tree_text, batch, context, max_new,
              seed, block_size=16):
    """One grid point; tree_text None means the non-speculative baseline."""
    speculative = tree_text is not None
    tree = parse_tree(tree_text) if speculative else parse_tree("chain:1")
    rows_per_seq = context + 2 * max_new + tree.n_nodes + 2 * block_size
    config = EngineConfig(
        sampler=SamplerConfig(temperature=0.0, seed=seed),
        dispatch_table=DispatchTable(((None, tree),)),
        block_size=block_size,
        cache_blocks=batch * (rows_per_seq // block_size + 2),
        speculative=speculative,
        max_context=context + 2 * max_new + tree.n_nodes + 2,
    )
    engine = Engine(base, draft if speculative else None, config)
    prompts = _prompts_for(seed, base.config.vocab_size, batch, context)
    sessions = [engine.new_session(p) for p in prompts]
    t0 = perf_counter()
    _, metrics = engine.run_batch(sessions, max_new)
    wall = perf_counter() - t0
    batch_rounds = max(s.metrics.rounds for s in sessions)
    per_round = {
        s: metrics.stage_seconds[s] * 1e3 / max(batch_rounds, 1)
        for s in ("dispatch", "draft", "validate", "sample", "bookkeep")
    }
    stats = dict(getattr(engine.base_cache, "stats", {}))
    return {
        "model_tag": model_tag,
        "backend": kernels.get_backend(),
        "tree": tree_text if speculative else "none",
        "batch_size": batch,
        "context_len": context,
        "speculative": int(speculative),
        "rounds": metrics.rounds,
        "committed": metrics.committed_total,
        "tpc": round(metrics.tpc, 4),
        "tokens_per_second": round(metrics.committed_total / wall, 1)
        if wall > 0 else 0.0,
        "ms_prefill": round(metrics.stage_seconds["prefill"] * 1e3
                            / len(sessions), 3),
        "ms_dispatch": round(per_round["dispatch"], 3),
        "ms_draft": round(per_round["draft"], 3),
        "ms_validate": round(per_round["validate"], 3),
        "ms_sample": round(per_round["sample"], 3),
        "ms_bookkeep": round(per_round["bookkeep"], 3),
        "base_calls": metrics.base_forward_calls,
        "draft_calls": metrics.draft_forward_calls,
        "cache_reused": stats.get("reused_blocks", 0),
        "cache_evicted": stats.get("evicted_blocks", 0),
        "cache_dropped": stats.get("dropped_blocks", 0),
        "cache_allocated": stats.get("allocated_blocks", 0),
    }


def run_grid(base, draft, model_tag, trees, batches, contexts, max_new=16,
             seed=0, include_baseline=True, speculative=True, backends=None):
    """Sweep the grid; returns rows in deterministic order."""
    points = []
    for context in contexts:
        for batch in batches:
            if speculative:
                for tree_text in trees:
                    points.append((tree_text, batch, context))
            if include_baseline:
                points.append((None, batch, context))
    if backends is None:
        backends = [kernels.get_backend()]
    rows = []
    workers = _workers()
    for backend in backends:
        prev = kernels.set_backend(backend)
        try:
            def run(pt):
                tree_text, batch, context = pt
                return run_point(base, draft, model_tag, tree_text, batch,
                                 context, max_new, seed)
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as ex:
                    rows.extend(ex.map(run, points))
            else:
                rows.extend(run(pt) for pt in points)
        finally:
            kernels.set_backend(prev)
    return rows


def to_csv(rows):
    lines = [",".join(FIELDS)]
    for row in rows:
        lines.append(",".join(str(row[f]) for f in FIELDS))
    return "\n".join(lines) + "\n"


def to_table(rows):
    cols = ["model_tag", "backend", "tree", "batch_size", "context_len",
            "tpc", "tokens_per_second", "ms_draft", "ms_validate",
            "cache_reused", "cache_evicted"]
    widths = {c: max(len(c), max((len(str(r[c])) for r in rows), default=0))
              for c in cols}
    header = "  ".join(c.ljust(widths[c]) for c in cols)
    sep = "  ".join("-" * widths[c] for c in cols)
    body = ["  ".join(str(r[c]).ljust(widths[c]) for c in cols) for r in rows]
    return "\n".join([header, sep] + body)
