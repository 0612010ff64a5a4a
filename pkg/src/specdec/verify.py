"""Named correctness suites behind `specdec verify` and the acceptance tests.

Each suite returns CheckResult rows; a suite passes when every row does.
Suites share one trained draft (training is the slow part) through a
module-level cache, so running everything stays in desk-scale time.
"""

import time
from dataclasses import dataclass

import numpy as np

from .attention import explicit_tree_mask, truncate_draft_at_boundary
from .drafttree import ROOT, DispatchTable, build_chain, parse_tree
from .engine import Engine, EngineConfig, _augment
from .kvstore import FlatKvCache
from .model import (ModelConfig, forward, init_base, init_draft,
                    make_oracle_draft, quantize_ffn)
from .sampling import (DraftResult, SamplerConfig, fsm_advance, mss_verify,
                       parse_fsm)
from . import distill


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


_CACHE = {}

# shared toy shapes: SMALL is the trained-draft scale, TOY the wider one
# used where layer count matters more than speed
SMALL_BASE = dict(vocab_size=32, dim=16, n_heads=2, head_dim=8,
                  n_layers=3, ffn_hidden=32)
SMALL_DRAFT = dict(vocab_size=32, dim=16, n_heads=2, head_dim=8,
                   n_layers=1, ffn_hidden=32)
TOY_BASE = dict(vocab_size=64, dim=32, n_heads=4, head_dim=8,
                n_layers=4, ffn_hidden=64)

TRAIN_CFG = distill.TrainConfig(lr=5e-3, steps=500, batch_size=4, seed=3)
CORPUS_ARGS = dict(vocab_size=32, n_seqs=64, seq_len=24, seed=5)


def small_models(chunk=None, seed=11):
    key = ("small", chunk, seed)
    if key not in _CACHE:
        base = init_base(ModelConfig(**SMALL_BASE, local_attn_chunk=chunk), seed)
        draft = init_draft(ModelConfig(**SMALL_DRAFT, local_attn_chunk=chunk),
                           seed + 1, base)
        _CACHE[key] = (base, draft)
    return _CACHE[key]


def trained_models():
    """(base, untrained draft, trained draft, loss history, frozen_ok)."""
    if "trained" not in _CACHE:
        base, _ = small_models()
        untrained = init_draft(ModelConfig(**SMALL_DRAFT), 12, base)
        trainee = init_draft(ModelConfig(**SMALL_DRAFT), 12, base)
        emb0 = base.embedding.copy()
        head0 = base.lm_head.copy()
        corpus = distill.make_corpus(**CORPUS_ARGS)
        history = distill.train_draft(base, trainee, corpus, TRAIN_CFG)
        frozen_ok = (np.array_equal(base.embedding, emb0)
                     and np.array_equal(base.lm_head, head0)
                     and trainee.embedding is base.embedding
                     and trainee.lm_head is base.lm_head)
        _CACHE["trained"] = (base, untrained, trainee, history, frozen_ok)
    return _CACHE["trained"]


def seeded_prompts(n, vocab, seed, lo=4, hi=9):
    rng = np.random.default_rng(seed)
    return [list(rng.integers(0, vocab, size=int(rng.integers(lo, hi))))
            for _ in range(n)]


def _engine(base, draft, tree="chain:3", **kw):
    kw.setdefault("sampler", SamplerConfig(temperature=0.0, seed=0))
    kw.setdefault("dispatch_table",
                  DispatchTable(((None, parse_tree(tree)),)))
    kw.setdefault("cache_blocks", 256)
    return Engine(base, draft, EngineConfig(**kw))


def _run_each(engine, prompts, max_new):
    outs = []
    for p in prompts:
        session = engine.new_session(p)
        out, _ = engine.run(session, max_new)
        outs.append(out)
    return outs


# -- criterion 1: temp-0 losslessness ------------------------------------------

def suite_lossless(chunk=None, n_prompts=64, trees=("chain:1", "chain:3",
                                                    "full:2,2",
                                                    "nodes:[-1,-1,0,0,1,2,2,5]"),
                   drafts=None):
    t0 = time.perf_counter()
    base, draft_random = small_models(chunk=chunk)
    if drafts is None:
        _, _, trained, _, _ = trained_models()
        drafts = {"random": draft_random, "trained": trained,
                  "quantized": quantize_ffn(trained, 8)}
    prompts = seeded_prompts(n_prompts, base.config.vocab_size, 101)
    max_new = 10
    baseline = _run_each(_engine(base, None, speculative=False), prompts, max_new)
    runs = mismatches = 0
    for tag, draft in drafts.items():
        for tree in trees:
            got = _run_each(_engine(base, draft, tree=tree), prompts, max_new)
            for g, b in zip(got, baseline):
                runs += 1
                if g != b:
                    mismatches += 1
    secs = time.perf_counter() - t0
    detail = (f"{runs} speculative runs vs greedy baseline, "
              f"{mismatches} mismatches, {secs:.1f}s")
    return [CheckResult("temp-0 losslessness", mismatches == 0, detail)]


# -- criterion 2: MSS distribution preservation ---------------------------------

def _mss_instances(vocab=8, seed=202):
    """10 (p_list, q_list) instances spread over chain depths 1..3, with
    deliberate zero-support and one-hot corner cases mixed in."""
    rng = np.random.default_rng(seed)

    def dist(kind):
        if kind == "onehot":
            d = np.zeros(vocab)
            d[rng.integers(vocab)] = 1.0
            return d
        w = rng.gamma(0.6, 1.0, vocab) + 1e-4
        if kind == "sparse":
            w[rng.permutation(vocab)[:vocab // 2]] = 0.0
        d = w / w.sum()
        return d

    kinds = [("dense", "onehot"), ("onehot", "dense"), ("sparse", "dense"),
             ("dense", "sparse"), ("sparse", "sparse"), ("dense", "dense"),
             ("onehot", "sparse"), ("sparse", "onehot"), ("dense", "dense"),
             ("sparse", "dense")]
    out = []
    for i, (pk, qk) in enumerate(kinds):
        depth = (i % 3) + 1
        p_list = [dist(pk) for _ in range(depth + 1)]
        q_list = [dist(qk) for _ in range(depth)]
        out.append((p_list, q_list))
    return out


def _chain_exact_first_token(p_list, q_list):
    """Exact first-token distribution of stochastic-chain MSS, computed by
    enumerating draft assignments and acceptance regions, reading each
    region's outcome from the real mss_verify. Returns (dist, events)."""
    vocab = p_list[0].shape[0]
    depth = len(q_list)
    tree = build_chain(depth)
    first = np.zeros(vocab)
    total_prob = 0.0
    events = 0

    def assignments(j, toks, prob):
        if j == depth:
            yield tuple(toks), prob
            return
        for t in range(vocab):
            qt = q_list[j][t]
            if qt > 0:
                yield from assignments(j + 1, toks + [t], prob * qt)

    for toks, aprob in assignments(0, [], 1.0):
        draft = DraftResult(tree, toks, tuple(q_list))
        taus = [min(1.0, p_list[j][toks[j]] / q_list[j][toks[j]])
                for j in range(depth)]
        # reject at node j (0-based) after accepting everything before it,
        # or accept the whole chain (j = depth)
        for j in range(depth + 1):
            pre = 1.0
            for i in range(j):
                pre *= taus[i]
            if j < depth:
                evt = pre * (1.0 - taus[j])
                res = np.maximum(p_list[j] - q_list[j], 0.0)
                bonus_dist = res / res.sum() if res.sum() > 1e-12 else p_list[j]
            else:
                evt = pre
                bonus_dist = p_list[depth]
            if evt <= 0.0:
                continue
            cdf = np.cumsum(bonus_dist)
            lo = 0.0
            for v in range(vocab):
                mass = bonus_dist[v]
                if mass <= 1e-15:
                    lo = cdf[v]
                    continue
                # sequential consumption: one uniform per examined candidate,
                # then one for the bonus draw
                u = np.full(depth + 1, 0.5)
                for i in range(j):
                    u[i] = taus[i] / 2.0
                if j < depth:
                    u[j] = (taus[j] + 1.0) / 2.0
                    u[j + 1] = (lo + cdf[v]) / 2.0
                else:
                    u[depth] = (lo + cdf[v]) / 2.0
                got = mss_verify(draft, p_list, u, mode="stochastic")
                want_path = list(range(j))
                if list(got.accepted_path) != want_path or got.next_token != v:
                    raise AssertionError(
                        f"mss outcome mismatch: event j={j} v={v} toks={toks} "
                        f"got ({list(got.accepted_path)}, {got.next_token})")
                events += 1
                w = aprob * evt * mass
                total_prob += w
                out_first = toks[0] if j >= 1 else v
                first[out_first] += w
                lo = cdf[v]
    if abs(total_prob - 1.0) > 1e-9:
        raise AssertionError(f"event probabilities sum to {total_prob}")
    return first, events


def suite_mss():
    t0 = time.perf_counter()
    worst = 0.0
    events = 0
    fails = []
    for idx, (p_list, q_list) in enumerate(_mss_instances()):
        try:
            got, n = _chain_exact_first_token(p_list, q_list)
        except AssertionError as e:
            fails.append(f"instance {idx}: {e}")
            continue
        events += n
        tv = 0.5 * float(np.abs(got - p_list[0]).sum())
        worst = max(worst, tv)
    secs = time.perf_counter() - t0
    ok = not fails and worst < 0.01
    detail = (f"10 instances (depths 1-3), {events} acceptance regions "
              f"cross-checked, worst TV {worst:.2e}, {secs:.1f}s")
    if fails:
        detail += "; " + "; ".join(fails[:3])
    return [CheckResult("MSS distribution preservation", ok, detail)]


# -- criterion 3: tree attention oracle -----------------------------------------

def suite_tree_attention(n_cases=100, seed=303):
    from .attention import naive_tree_attention, tree_attention
    from .drafttree import TreeSpec

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n_heads = int(rng.choice([1, 2, 4]))
        head_dim = int(rng.choice([4, 8]))
        dim = n_heads * head_dim
        n_nodes = int(rng.integers(1, 17))
        ctx = int(rng.integers(0, 65))
        chunk = [None, 4, 8][int(rng.integers(3))]
        parent = tuple(int(rng.integers(-1, i)) for i in range(n_nodes))
        tree = TreeSpec(parent)
        q = rng.normal(size=(n_nodes, dim))
        tk = rng.normal(size=(n_nodes, dim))
        tv = rng.normal(size=(n_nodes, dim))
        ck = rng.normal(size=(ctx, dim))
        cv = rng.normal(size=(ctx, dim))
        scale = head_dim ** -0.5
        merged = tree_attention(q, ck, cv, tk, tv, tree, scale,
                                n_heads=n_heads, chunk_len=chunk)
        mask = explicit_tree_mask(tree, ctx, chunk_len=chunk)
        naive = naive_tree_attention(q, np.concatenate([ck, tk]),
                                     np.concatenate([cv, tv]), mask, scale,
                                     n_heads=n_heads)
        worst = max(worst, float(np.max(np.abs(merged - naive))))
    ok = worst < 1e-5
    return [CheckResult("tree attention vs naive oracle", ok,
                        f"{n_cases} randomized cases, max abs diff {worst:.2e}")]


# -- criterion 4: cache equivalence ---------------------------------------------

def _cache_workload(vocab, seed=404):
    """Prompt schedule with repeats and shared prefixes to exercise the
    persistent store."""
    rng = np.random.default_rng(seed)
    a = list(rng.integers(0, vocab, size=9))
    b = list(rng.integers(0, vocab, size=7))
    return [a, b, a, a + list(rng.integers(0, vocab, size=4)), b, a[:8]]


def suite_cache():
    base, draft = small_models()
    prompts = _cache_workload(base.config.vocab_size)
    max_new = 8
    # pool small enough that later sessions evict earlier ones into the store
    kw = dict(tree="chain:3", trace_logits=True, block_size=4)
    paged = _engine(base, draft, cache_blocks=8, persistent_blocks=16, **kw)
    flat = _engine(base, draft, cache_kind="flat", max_context=256, **kw)
    results = []
    worst = 0.0
    tokens_equal = True
    for p in prompts:
        sp = paged.new_session(p)
        sf = flat.new_session(p)
        op, _ = paged.run(sp, max_new)
        of, _ = flat.run(sf, max_new)
        tokens_equal &= op == of
        for lp, lf in zip(sp.logit_trace, sf.logit_trace):
            if lp.shape != lf.shape:
                tokens_equal = False
                break
            worst = max(worst, float(np.max(np.abs(lp - lf))))
    results.append(CheckResult(
        "paged+persistent vs flat logits", tokens_equal and worst < 1e-6,
        f"{len(prompts)} sessions, per-round logits max abs diff {worst:.2e}"))

    bk = set(paged.base_cache.store.keys())
    dk = set(paged.draft_cache.store.keys())
    results.append(CheckResult(
        "base/draft store key sets", bool(bk) and bk == dk,
        f"base {len(bk)} keys, draft {len(dk)} keys, equal={bk == dk}"))

    # rewind mid-decode, then continue; must match a fresh engine prefilled
    # on the kept prefix (temp 0 makes the continuation deterministic)
    eng = _engine(base, draft, tree="chain:3", cache_blocks=64)
    session = eng.new_session(prompts[0])
    session.max_new_tokens = 64
    eng.prefill(session)
    for _ in range(6):
        eng.decode_round(session)
    keep = len(session.prompt) + 3
    eng.rewind_session(session, keep)
    got = eng.peek_logits(session)
    kept = list(session.committed)

    cache = FlatKvCache(base.config.n_layers, base.config.dim, keep)
    cache.new_seq(0)
    out, _ = forward(base, cache, 0, kept, np.arange(keep))
    diff = float(np.max(np.abs(got - out.logits[-1])))

    for _ in range(4):
        eng.decode_round(session)
    cont = session.committed[keep:]
    fresh = _engine(base, draft, tree="chain:3", cache_blocks=64)
    fs = fresh.new_session(kept)
    fresh.run(fs, len(cont))
    n = min(len(cont), len(fs.new_tokens))
    same = n > 0 and cont[:n] == fs.new_tokens[:n]
    results.append(CheckResult(
        "rewind-then-continue vs fresh prefill", diff < 1e-6 and same,
        f"next-token logits max abs diff {diff:.2e}, "
        f"{n} continued tokens equal: {same}"))
    return results


# -- criterion 5: accounting identities ------------------------------------------

def suite_accounting():
    base = init_base(ModelConfig(**TOY_BASE), 21)
    oracle = make_oracle_draft(base)
    prompts = seeded_prompts(4, base.config.vocab_size, 505, lo=5, hi=9)
    results = []
    for length in (1, 3, 5):
        eng = _engine(base, oracle, tree=f"chain:{length}")
        ok = True
        details = []
        for p in prompts:
            s = eng.new_session(p)
            eng.run(s, 12)
            m = s.metrics
            ok &= m.base_forward_calls == 1 + m.rounds
            ok &= m.committed_total == m.rounds * (length + 1)
            ok &= m.tpc == float(length + 1)
            details.append(f"{m.tpc:.0f}")
        results.append(CheckResult(
            f"oracle chain-{length}: base calls = 1+rounds, TPC = {length + 1}",
            ok, f"per-prompt TPC {'/'.join(details)}"))
    base_s, draft_s = small_models()
    eng = _engine(base_s, draft_s, tree="full:2,2")
    s = eng.new_session(seeded_prompts(1, 32, seed=506)[0])
    eng.run(s, 16)
    m = s.metrics
    ok = (m.base_forward_calls == 1 + m.rounds
          and abs(m.tpc - m.committed_total / m.rounds) < 1e-12)
    results.append(CheckResult(
        "random draft: base calls = 1+rounds, tpc = committed/rounds", ok,
        f"rounds {m.rounds}, base calls {m.base_forward_calls}, tpc {m.tpc:.2f}"))
    return results


# -- criterion 6: distillation ----------------------------------------------------

def _grad_check(seed=606, eps=1e-5, samples_per_tensor=10):
    cfg_b = ModelConfig(vocab_size=16, dim=8, n_heads=1, head_dim=8,
                        n_layers=2, ffn_hidden=16)
    cfg_d = ModelConfig(vocab_size=16, dim=8, n_heads=1, head_dim=8,
                        n_layers=1, ffn_hidden=16)
    base = init_base(cfg_b, seed)
    draft = init_draft(cfg_d, seed + 1, base)
    rng = np.random.default_rng(seed + 2)
    tokens = rng.integers(0, 16, size=10)
    tcfg = distill.TrainConfig()
    _, _, _, grads = distill.loss_and_grads(base, draft, tokens, tcfg)
    params = distill.trainable_params(draft)
    worst = 0.0
    for name, p in params.items():
        g = grads[name]
        scale = max(float(np.max(np.abs(g))), 1e-10)
        flat = p.reshape(-1)
        idxs = rng.permutation(flat.size)[:samples_per_tensor]
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            up, _, _, _ = distill.loss_and_grads(base, draft, tokens, tcfg)
            flat[i] = keep - eps
            dn, _, _, _ = distill.loss_and_grads(base, draft, tokens, tcfg)
            flat[i] = keep
            fd = (up - dn) / (2 * eps)
            worst = max(worst, abs(fd - g.reshape(-1)[i]) / scale)
    return worst


def suite_distill():
    results = []
    worst = _grad_check()
    results.append(CheckResult(
        "analytic gradients vs central differences", worst < 1e-4,
        f"dim-8 one-layer draft, 10 samples/tensor, worst rel err {worst:.2e}"))
    base, untrained, trained, history, frozen_ok = trained_models()
    first, last = history[0][1], history[-1][1]
    results.append(CheckResult(
        "500-step training halves the loss", last <= 0.5 * first and frozen_ok,
        f"total {first:.4f} -> {last:.4f} "
        f"({last / first:.2f}x), tied weights frozen={frozen_ok}"))
    held_out = seeded_prompts(8, base.config.vocab_size, 707, lo=5, hi=10)
    tpc_un = distill.eval_tpc(base, untrained, held_out, tree="chain:3",
                              max_new_tokens=24)
    tpc_tr = distill.eval_tpc(base, trained, held_out, tree="chain:3",
                              max_new_tokens=24)
    results.append(CheckResult(
        "trained TPC beats untrained on held-out prompts", tpc_tr > tpc_un,
        f"untrained {tpc_un:.3f}, trained {tpc_tr:.3f}"))
    return results


# -- criterion 7: RNG rank contract ----------------------------------------------

def suite_rng():
    base, draft = small_models()
    prompts = seeded_prompts(5, base.config.vocab_size, 808)
    outs = {}
    for world in (1, 2, 4):
        eng = _engine(
            base, draft, tree="chain:3",
            sampler=SamplerConfig(temperature=1.0, top_p=0.9, seed=17,
                                  simulated_world_size=world),
            draft_mode="stochastic")
        sessions = [eng.new_session(p) for p in prompts]
        outs[world], _ = eng.run_batch(sessions, 12)
    ok = outs[1] == outs[2] == outs[4]
    return [CheckResult(
        "bit-identical outputs across simulated_world_size 1/2/4", ok,
        f"batch of {len(prompts)}, stochastic draft, temperature 1")]


# -- criterion 8: guided decoding --------------------------------------------------

def _five_state_fsm(vocab):
    lines = ["start: 0", "accept: 0 1 2 3 4"]
    for s in range(5):
        for t in range(vocab):
            if t % 5 == s:
                lines.append(f"{s} {t} {(s + 1) % 5}")
    return parse_fsm("\n".join(lines))


def suite_guided():
    base, draft = small_models()
    fsm = _five_state_fsm(base.config.vocab_size)
    prompts = seeded_prompts(12, base.config.vocab_size, 909)
    max_new = 10
    baseline = _run_each(_engine(base, None, speculative=False, fsm=fsm),
                         prompts, max_new)
    ok_replay = True
    for out in baseline:
        state = fsm.start
        for t in out:
            state = fsm_advance(fsm, state, t)  # raises if not allowed
    mismatches = 0
    for tree in ("chain:3", "full:2,2"):
        got = _run_each(_engine(base, draft, tree=tree, fsm=fsm),
                        prompts, max_new)
        for g, b in zip(got, baseline):
            if g != b:
                mismatches += 1
            state = fsm.start
            for t in g:
                state = fsm_advance(fsm, state, t)
    ok = mismatches == 0 and ok_replay
    return [CheckResult(
        "guided: FSM-accepted and equal to guided non-speculative", ok,
        f"5-state FSM, {len(prompts)} prompts x 2 trees, "
        f"{mismatches} mismatches")]


# -- criterion 9: tree/batch trend -------------------------------------------------

def _batch_round_latency(base, draft, tree, n_sessions, max_new=4):
    eng = _engine(base, draft, tree=tree, cache_blocks=2048)
    prompts = seeded_prompts(n_sessions, base.config.vocab_size, 1010)
    sessions = [eng.new_session(p) for p in prompts]
    t0 = time.perf_counter()
    _, metrics = eng.run_batch(sessions, max_new)
    wall = time.perf_counter() - t0
    batch_rounds = max(s.metrics.rounds for s in sessions)
    decode = wall - metrics.stage_seconds["prefill"]
    return decode / batch_rounds


def suite_trend():
    base, _, trained, _, _ = trained_models()
    tpc_chain = distill.eval_tpc(base, trained,
                                 seeded_prompts(6, 32, 1111), tree="chain:3",
                                 max_new_tokens=20)
    tpc_tree = distill.eval_tpc(base, trained,
                                seeded_prompts(6, 32, 1111), tree="full:3,4",
                                max_new_tokens=20)
    lat_chain = _batch_round_latency(base, trained, "chain:3", 64)
    lat_tree = _batch_round_latency(base, trained, "full:3,4", 64)
    ok = tpc_tree >= tpc_chain and lat_tree > lat_chain
    return [CheckResult(
        "D3-BF4 vs chain-3: TPC no worse at batch 1, slower at batch 64", ok,
        f"TPC {tpc_chain:.3f} -> {tpc_tree:.3f}; per-round latency "
        f"{lat_chain * 1e3:.1f}ms -> {lat_tree * 1e3:.1f}ms at batch 64")]


# -- criterion 10: iRoPE truncation -------------------------------------------------

def suite_irope(chunk=8):
    results = []
    crossings = 0
    checked = 0
    for tree_text in ("chain:3", "full:2,2", "full:3,2"):
        tree = parse_tree(tree_text)
        for L in range(1, 41):
            tt = truncate_draft_at_boundary(tree, L, chunk)
            boundary = ((L - 1) // chunk + 1) * chunk
            root_chunk = (L - 1) // chunk
            for d in tt.depth:
                checked += 1
                if L + d - 1 >= boundary:
                    crossings += 1
            aug = _augment(tt)
            mask = explicit_tree_mask(aug, L - 1, chunk_len=chunk)
            for i in range(aug.n_nodes):
                qpos = L - 2 + aug.depth[i]
                for j in range(L - 1):
                    if mask[i, j] and j // chunk != qpos // chunk:
                        crossings += 1
                if qpos // chunk != root_chunk:
                    crossings += 1
    results.append(CheckResult(
        "truncated drafts never cross a chunk boundary", crossings == 0,
        f"chunk {chunk}, {checked} node placements audited, "
        f"{crossings} crossings"))
    lossless = suite_lossless(chunk=chunk, n_prompts=16,
                              trees=("chain:3", "full:2,2"),
                              drafts={"random": small_models(chunk=chunk)[1]})
    r = lossless[0]
    results.append(CheckResult(
        "losslessness with LocalChunk enabled", r.passed, r.detail))
    return results


SUITES = {
    "lossless": suite_lossless,
    "mss": suite_mss,
    "tree-attention": suite_tree_attention,
    "cache": suite_cache,
    "accounting": suite_accounting,
    "distill": suite_distill,
    "rng": suite_rng,
    "guided": suite_guided,
    "trend": suite_trend,
    "irope": suite_irope,
}

# acceptance criterion number -> suite name
CRITERIA = [(i + 1, name) for i, name in enumerate(SUITES)]


def run_suite(name):
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; have {sorted(SUITES)}")
    return SUITES[name]()


def run_all():
    out = {}
    for name in SUITES:
        out[name] = run_suite(name)
    return out
