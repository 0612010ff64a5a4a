"""Six-stage speculative decode loop.

Each round: dispatch a static tree by batch size, draft a token tree with
the small model, validate every node in one base forward using tree
attention, accept a path with multi-round speculative sampling, then
bookkeep: write accepted K/V and hidden states into committed slots,
rewind both caches, and advance the guided-decoding FSM. Every round
commits at least one token (the bonus draw), so base forwards per run are
exactly 1 + rounds.

Cache discipline: at a round boundary both caches hold K/V for committed
positions [0, L-1) where L is the committed length; the last committed
token's K/V appear during the next round (base: root row of validation;
draft: the alignment pass). Suffix K/V live in fresh buffers during tree
forwards and only accepted rows are written back.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .attention import truncate_draft_at_boundary
from .drafttree import (ROOT, EMPTY_TREE, DispatchTable, TreeSpec, dispatch,
                        parse_tree, suffix_mask)
from .kvstore import (FlatKvCache, HiddenTape, PagedKvCache, PersistentKvStore,
                      block_keys, draft_cache_capacity, lookup_prefix)
from .model import ModelConfig, forward, init_base, init_draft
from .numcore import DTYPE
from .sampling import (DraftResult, GuidedFsm, SamplerConfig, fsm_advance,
                       greedy_expand, mss_verify, parse_fsm,
                       rank_sliced_uniforms, sample_from, target_dist)

STAGES = ("prefill", "dispatch", "draft", "validate", "sample", "bookkeep")


class EngineError(RuntimeError):
    pass


@dataclass
class StageMetrics:
    rounds: int = 0
    committed_total: int = 0
    base_forward_calls: int = 0
    draft_forward_calls: int = 0
    stage_seconds: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})

    @property
    def tpc(self):
        return self.committed_total / self.rounds if self.rounds else 0.0

    def merge(self, other):
        self.rounds += other.rounds
        self.committed_total += other.committed_total
        self.base_forward_calls += other.base_forward_calls
        self.draft_forward_calls += other.draft_forward_calls
        for s in STAGES:
            self.stage_seconds[s] += other.stage_seconds[s]


@dataclass
class EngineConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    dispatch_table: DispatchTable = None  # default set in __post_init__
    block_size: int = 16
    cache_blocks: int = 512
    persistent_blocks: int = 0  # 0 disables the persistent stores
    cache_kind: str = "paged"  # or "flat"
    speculative: bool = True
    draft_mode: str = "greedy"  # or "stochastic"
    stop_token: int = None
    max_context: int = 1024
    fsm: GuidedFsm = None
    trace_logits: bool = False

    def __post_init__(self):
        if self.dispatch_table is None:
            self.dispatch_table = DispatchTable(((None, parse_tree("chain:3")),))
        if self.cache_kind not in ("paged", "flat"):
            raise EngineError(f"unknown cache kind {self.cache_kind!r}")
        if self.draft_mode not in ("greedy", "stochastic"):
            raise EngineError(f"unknown draft mode {self.draft_mode!r}")


def config_from_dict(d):
    """EngineConfig from the JSON config file layout."""
    sampler = SamplerConfig(
        temperature=d.get("temperature", 1.0),
        top_p=d.get("top_p", 1.0),
        seed=d.get("seed", 0),
        simulated_world_size=d.get("simulated_world_size", 1),
    )
    if "trees" in d:
        entries = tuple(
            (thr if thr is None else int(thr), parse_tree(spec))
            for thr, spec in d["trees"])
    else:
        entries = ((None, parse_tree(d.get("tree", "chain:3"))),)
    fsm = None
    if d.get("fsm"):
        fsm = parse_fsm(d["fsm"])
    elif d.get("fsm_path"):
        with open(d["fsm_path"]) as f:
            fsm = parse_fsm(f.read())
    return EngineConfig(
        sampler=sampler,
        dispatch_table=DispatchTable(entries),
        block_size=d.get("block_size", 16),
        cache_blocks=d.get("cache_blocks", 512),
        persistent_blocks=d.get("persistent_blocks", 0),
        cache_kind=d.get("cache_kind", "paged"),
        speculative=d.get("speculative", True),
        draft_mode=d.get("draft_mode", "greedy"),
        stop_token=d.get("stop_token"),
        max_context=d.get("max_context", 1024),
        fsm=fsm,
        trace_logits=d.get("trace_logits", False),
    )


def models_from_dict(d):
    """Model pair from the config: checkpoint when given, else seeded init."""
    if d.get("checkpoint"):
        return model_mod.load_pair(d["checkpoint"])
    base_cfg = ModelConfig(**d["base_model"])
    draft_cfg = ModelConfig(**d["draft_model"])
    seed = d.get("init_seed", d.get("seed", 0))
    base = init_base(base_cfg, seed)
    draft = init_draft(draft_cfg, seed + 1, base)
    return base, draft


@dataclass
class DecodeSession:
    seq: int
    prompt: list
    committed: list
    seed: int
    tape: HiddenTape
    fsm_state: int = None
    max_new_tokens: int = 0
    finished: bool = False
    finish_reason: str = ""
    prefilled: bool = False
    metrics: StageMetrics = field(default_factory=StageMetrics)
    logit_trace: list = field(default_factory=list)

    @property
    def new_tokens(self):
        return self.committed[len(self.prompt):]

    def output(self):
        return list(self.new_tokens[:self.max_new_tokens])


class _Timer:
    def __init__(self, metrics, stage):
        self.metrics, self.stage = metrics, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.metrics.stage_seconds[self.stage] += time.perf_counter() - self.t0
        return False


def _augment(tree):
    """Tree with the root token prepended as node 0."""
    parent = (ROOT,) + tuple(0 if p == ROOT else p + 1 for p in tree.parent)
    return TreeSpec(parent, tag=f"root+{tree.tag}")


class Engine:
    def __init__(self, base, draft, config):
        bcfg = base.config
        dcfg = draft.config if draft is not None else None
        if config.speculative and draft is None:
            raise EngineError("speculative decoding needs a draft model")
        if dcfg is not None:
            if (bcfg.vocab_size, bcfg.dim) != (dcfg.vocab_size, dcfg.dim):
                raise EngineError("base and draft must share vocab and dim")
            if bcfg.local_attn_chunk != dcfg.local_attn_chunk:
                raise EngineError("base and draft must agree on the local chunk")
        self.base = base
        self.draft = draft
        self.config = config
        self.chunk = bcfg.local_attn_chunk
        self._next_seq = 0
        if config.cache_kind == "paged":
            base_store = draft_store = None
            if config.persistent_blocks > 0:
                base_store = PersistentKvStore(config.persistent_blocks)
                draft_store = PersistentKvStore(config.persistent_blocks)
            self.base_cache = PagedKvCache(
                bcfg.n_layers, bcfg.dim, config.cache_blocks,
                config.block_size, store=base_store)
            self.draft_cache = None
            if draft is not None:
                self.draft_cache = PagedKvCache(
                    dcfg.n_layers, dcfg.dim,
                    draft_cache_capacity(config.cache_blocks, bcfg.n_layers,
                                         dcfg.n_layers),
                    config.block_size, store=draft_store)
        else:
            self.base_cache = FlatKvCache(bcfg.n_layers, bcfg.dim,
                                          config.max_context)
            self.draft_cache = (FlatKvCache(dcfg.n_layers, dcfg.dim,
                                            config.max_context)
                                if draft is not None else None)

    # -- session lifecycle ----------------------------------------------

    @property
    def _uses_draft(self):
        return self.config.speculative and self.draft is not None

    def new_session(self, prompt, seed=None):
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise EngineError("prompt must be nonempty")
        vocab = self.base.config.vocab_size
        if any(not 0 <= t < vocab for t in prompt):
            raise EngineError("prompt token out of vocabulary")
        if len(prompt) + 1 > self.config.max_context:
            raise EngineError("prompt exceeds max_context")
        seq = self._next_seq
        self._next_seq += 1
        self.base_cache.new_seq(seq)
        if self._uses_draft:
            self.draft_cache.new_seq(seq)
        if seed is None:
            seed = self.config.sampler.seed + seq
        return DecodeSession(
            seq=seq, prompt=prompt, committed=[], seed=seed,
            tape=HiddenTape(self.base.config.dim),
            fsm_state=self.config.fsm.start if self.config.fsm else None,
        )

    def _finish(self, session, reason):
        session.finished = True
        session.finish_reason = reason
        written = self.base_cache.written_len(session.seq)
        keys = block_keys(session.committed[:written], self.config.block_size)
        self.base_cache.release(session.seq, keys)
        if self._uses_draft:
            self.draft_cache.release(session.seq, keys)

    def _uniform_row(self, session, step, width, batch_size):
        world = self.config.sampler.simulated_world_size
        padded = -(-batch_size // world) * world
        return rank_sliced_uniforms(session.seed, step, padded, width)[0]

    def _allowed(self, state):
        if self.config.fsm is None or state is None:
            return None
        return self.config.fsm.allowed_mask(state, self.base.config.vocab_size)

    def _shape(self, logits_row, state):
        s = self.config.sampler
        return target_dist(logits_row, s.temperature, s.top_p,
                           self._allowed(state))

    def _draft_dist(self, logits_row, state):
        # q skips top-p; temperature and the FSM mask still apply
        s = self.config.sampler
        return target_dist(logits_row, s.temperature, 1.0, self._allowed(state))

    def _node_dists(self, logits_row, state, stoch):
        """(q-dist for verification, ranking dist for greedy expansion).

        Greedy child ranking follows the draft's own belief (temperature 1),
        not the sampling temperature: at temperature 0 the q-dist is one-hot
        and would prune every sibling slot, collapsing trees to chains. For
        any temperature > 0 the two orders agree, so this only changes which
        candidates exist, never the verified distribution.
        """
        pdist = self._draft_dist(logits_row, state)
        if stoch or self.config.sampler.temperature == 1.0:
            return pdist, pdist
        return pdist, target_dist(logits_row, 1.0, 1.0, self._allowed(state))

    # -- stage 1: prefill -------------------------------------------------

    def prefill(self, session, batch_size=1):
        """Base prefill with prefix reuse, prefill-time sampling of the
        first token, then draft prefill over the full prompt.

        The base restart recomputes the last matched position so its hidden
        state exists for draft fusion; the rewritten K/V rows are identical.
        """
        if session.prefilled:
            raise EngineError("session already prefilled")
        m = session.metrics
        with _Timer(m, "prefill"):
            seq, prompt = session.seq, session.prompt
            n = len(prompt)
            matched = 0
            if isinstance(self.base_cache, PagedKvCache) \
                    and self.base_cache.store is not None:
                matched = lookup_prefix(self.base_cache, self.base_cache.store,
                                        seq, prompt)
                if self._uses_draft:
                    md = lookup_prefix(self.draft_cache,
                                       self.draft_cache.store, seq, prompt)
                    if md != matched:
                        raise EngineError("base/draft stores diverged")
            start = min(matched - 1, n - 1) if matched else 0
            if matched:
                self.base_cache.rewind(seq, start)
                session.tape.offset = start + 1
            out, _kv = forward(self.base, self.base_cache, seq,
                               prompt[start:], np.arange(start, n))
            m.base_forward_calls += 1
            rows = []
            if start == 0:
                rows.append(out.hidden[0])  # token 0 fuses with its own hidden
            rows.extend(out.hidden[i - start - 1] for i in range(start + 1, n + 1))
            session.tape.append_rows(np.stack(rows))
            dist = self._shape(out.logits[-1], session.fsm_state)
            u = self._uniform_row(session, 0, 1, batch_size)[0]
            first = sample_from(dist, u)
            session.committed = prompt + [first]
            if session.fsm_state is not None:
                session.fsm_state = fsm_advance(self.config.fsm,
                                                session.fsm_state, first)
            if self._uses_draft:
                d0 = start + 1 if matched else 0
                if d0 < n:
                    prev = session.tape.slice(d0, n)
                    forward(self.draft, self.draft_cache, seq, prompt[d0:],
                            np.arange(d0, n), prev_hidden=prev)
                    m.draft_forward_calls += 1
                self.draft_cache.set_len(seq, n + 1)
            self.base_cache.set_len(seq, n + 1)
            session.prefilled = True
            if self.config.stop_token is not None \
                    and first == self.config.stop_token:
                self._finish(session, "stop")
            elif session.max_new_tokens \
                    and len(session.new_tokens) >= session.max_new_tokens:
                self._finish(session, "length")
        return first

    # -- stage 3: drafting -------------------------------------------------

    def draft_stage(self, session, tree, round_idx, batch_size, shape_nodes):
        """Alignment pass, then depth-batched tree expansion.

        Returns (DraftResult over the realized tree, per-layer suffix K/V in
        node order). FSM-disallowed children are pruned, so the realized
        tree can be smaller than the requested shape.
        """
        m = session.metrics
        seq = session.seq
        L = len(session.committed)
        align_out, _ = forward(self.draft, self.draft_cache, seq,
                               [session.committed[-1]], [L - 1],
                               prev_hidden=session.tape.last()[None, :])
        m.draft_forward_calls += 1
        if tree.n_nodes == 0:
            return DraftResult(EMPTY_TREE, (), ()), None
        stoch = self.config.draft_mode == "stochastic"
        draws = None
        if stoch:
            draws = self._uniform_row(session, 2 * round_idx + 1,
                                      shape_nodes, batch_size)
        # per shape node: (realized index, q-dist, expand dist, fsm state, hidden)
        root_q, root_expand = self._node_dists(align_out.logits[0],
                                               session.fsm_state, stoch)
        info = {ROOT: (ROOT, root_q, root_expand, session.fsm_state,
                       align_out.hidden[0])}
        parents, tokens, dists = [], [], []
        real_to_shape = []
        vis_rows = []  # realized-tree visibility, one bool row per node
        n_layers = self.draft.config.n_layers
        dim = self.draft.config.dim
        carry = [(np.zeros((0, dim), dtype=DTYPE), np.zeros((0, dim), dtype=DTYPE))
                 for _ in range(n_layers)]
        for depth in range(1, tree.max_depth + 1):
            new_tokens, new_prev, new_real = [], [], []
            picks = {}
            for shape_node in (i for i in range(tree.n_nodes)
                               if tree.depth[i] == depth):
                shape_parent = tree.parent[shape_node]
                if shape_parent not in info:
                    continue  # parent pruned
                real_parent, pdist, expand, pstate, phidden = info[shape_parent]
                slots = tree.children(shape_parent)
                rank = slots.index(shape_node)
                if stoch:
                    tok = sample_from(pdist, draws[shape_node])
                else:
                    if shape_parent not in picks:
                        picks[shape_parent] = greedy_expand(
                            expand, min(len(slots), int(np.count_nonzero(expand))))
                    if rank >= len(picks[shape_parent]):
                        continue  # fewer allowed tokens than child slots
                    tok = picks[shape_parent][rank]
                if (pdist[tok] if stoch else expand[tok]) <= 0.0:
                    continue
                real = len(tokens)
                parents.append(real_parent)
                tokens.append(int(tok))
                dists.append(pdist)
                real_to_shape.append(shape_node)
                state = None
                if pstate is not None:
                    state = fsm_advance(self.config.fsm, pstate, tok)
                row = np.zeros(real + 1, dtype=bool)
                if real_parent != ROOT:
                    row[:real_parent + 1] = vis_rows[real_parent]
                row[real] = True
                vis_rows.append(row)
                info[shape_node] = (real, pdist, expand, state, phidden)
                new_tokens.append(int(tok))
                new_prev.append(phidden)
                new_real.append(real)
            if not new_tokens:
                break
            n_new = len(new_tokens)
            total = len(tokens)
            mask = np.zeros((n_new, total), dtype=bool)
            for j, real in enumerate(new_real):
                mask[j, :real + 1] = vis_rows[real]
            out, fresh = forward(
                self.draft, self.draft_cache, seq, new_tokens,
                np.full(n_new, L + depth - 1, dtype=np.int64),
                prev_hidden=np.stack(new_prev), suffix_mask_new=mask,
                carry_kv=carry, write=False)
            m.draft_forward_calls += 1
            carry = [(np.concatenate([carry[li][0], fresh[li][0]]),
                      np.concatenate([carry[li][1], fresh[li][1]]))
                     for li in range(n_layers)]
            for j, real in enumerate(new_real):
                shape_node = real_to_shape[real]
                state = info[shape_node][3]
                q, exp = self._node_dists(out.logits[j], state, stoch)
                info[shape_node] = (real, q, exp, state, out.hidden[j])
        realized = TreeSpec(tuple(parents), tag=tree.tag)
        return DraftResult(realized, tuple(tokens), tuple(dists)), carry

    # -- stage 4: validation -----------------------------------------------

    def validate_stage(self, session, draft_result):
        """One base forward over root + all draft nodes with tree attention."""
        m = session.metrics
        seq = session.seq
        L = len(session.committed)
        tree = draft_result.tree
        aug = _augment(tree)
        tokens = [session.committed[-1]] + [int(t) for t in
                                            draft_result.node_tokens]
        positions = np.array([L - 2 + d for d in aug.depth], dtype=np.int64)
        self.base_cache.alloc_for_step(seq, tree.n_nodes)
        if self._uses_draft:
            self.draft_cache.alloc_for_step(seq, tree.n_nodes)
        out, fresh = forward(self.base, self.base_cache, seq, tokens, positions,
                             suffix_mask_new=suffix_mask(aug), write=False)
        m.base_forward_calls += 1
        if self.config.trace_logits:
            session.logit_trace.append(out.logits.copy())
        states = [session.fsm_state]
        for i in range(tree.n_nodes):
            p = tree.parent[i]
            parent_state = states[0] if p == ROOT else states[1 + p]
            state = None
            if parent_state is not None:
                state = fsm_advance(self.config.fsm, parent_state,
                                    draft_result.node_tokens[i])
            states.append(state)
        dists = [self._shape(out.logits[i], states[i])
                 for i in range(aug.n_nodes)]
        return dists, out.hidden, fresh

    # -- stages 2, 5, 6: one full round --------------------------------------

    def _session_round(self, session, shape_tree, round_idx, batch_size):
        m = session.metrics
        seq = session.seq
        L = len(session.committed)
        with _Timer(m, "dispatch"):
            tree = shape_tree
            if self.chunk is not None:
                tree = truncate_draft_at_boundary(tree, L, self.chunk)
            if not self._uses_draft:
                tree = EMPTY_TREE
        with _Timer(m, "draft"):
            if self._uses_draft:
                draft_result, suffix_kv = self.draft_stage(
                    session, tree, round_idx, batch_size, shape_tree.n_nodes)
            else:
                draft_result, suffix_kv = DraftResult(EMPTY_TREE, (), ()), None
        with _Timer(m, "validate"):
            dists, hiddens, base_kv = self.validate_stage(session, draft_result)
        with _Timer(m, "sample"):
            uniforms = self._uniform_row(session, 2 * round_idx + 2,
                                         shape_tree.n_nodes + 1, batch_size)
            mode = "stochastic" if self.config.draft_mode == "stochastic" \
                else "greedy_children"
            result = mss_verify(draft_result, dists, uniforms, mode=mode)
        with _Timer(m, "bookkeep"):
            kept = [int(draft_result.node_tokens[a])
                    for a in result.accepted_path]
            kept.append(result.next_token)
            kept_path = list(result.accepted_path)
            stop = self.config.stop_token
            stopped = stop is not None and stop in kept
            if stopped:
                kept = kept[:kept.index(stop) + 1]
            n_keep = len(kept)
            # K/V and hidden states are needed for kept tokens except the
            # last one; its row appears during the next round
            write_path = kept_path[:n_keep - 1]
            rows = [0] + [1 + a for a in write_path]
            for li in range(self.base.config.n_layers):
                k, v = base_kv[li]
                self.base_cache.write(seq, li, L - 1, k[rows], v[rows])
            new_len = L + n_keep
            self.base_cache.rewind(seq, new_len - 1)
            self.base_cache.set_len(seq, new_len)
            if self._uses_draft:
                if write_path:
                    for li in range(self.draft.config.n_layers):
                        k, v = suffix_kv[li]
                        self.draft_cache.write(seq, li, L,
                                               k[write_path], v[write_path])
                self.draft_cache.rewind(seq, new_len - 1)
                self.draft_cache.set_len(seq, new_len)
            tape_rows = [hiddens[0]] + [hiddens[1 + a] for a in write_path]
            session.tape.append_rows(np.stack(tape_rows))
            if session.fsm_state is not None:
                for t in kept:
                    session.fsm_state = fsm_advance(self.config.fsm,
                                                    session.fsm_state, t)
            session.committed.extend(kept)
            m.rounds += 1
            m.committed_total += n_keep
            if stopped:
                self._finish(session, "stop")
            elif len(session.new_tokens) >= session.max_new_tokens:
                self._finish(session, "length")
            elif len(session.committed) + shape_tree.n_nodes + 1 \
                    > self.config.max_context:
                self._finish(session, "context")
        return kept

    def decode_round(self, session, round_idx=None):
        """Single-session round; run_batch drives the batched equivalent."""
        if not session.prefilled or session.finished:
            raise EngineError("decode_round needs a live, prefilled session")
        if round_idx is None:
            round_idx = session.metrics.rounds
        shape = dispatch(self.config.dispatch_table, 1)
        return self._session_round(session, shape, round_idx, 1)

    # -- drivers ------------------------------------------------------------

    def run(self, session, max_new_tokens):
        outputs, metrics = self.run_batch([session], max_new_tokens)
        return outputs[0], metrics

    def run_batch(self, sessions, max_new_tokens):
        """Lockstep rounds over the batch; finished sessions drop out."""
        if not sessions:
            raise EngineError("run_batch needs at least one session")
        if max_new_tokens < 1:
            raise EngineError("max_new_tokens must be >= 1")
        for s in sessions:
            s.max_new_tokens = max_new_tokens
        active = [s for s in sessions if not s.finished]
        for s in active:
            if not s.prefilled:
                self.prefill(s, batch_size=len(active))
        active = [s for s in active if not s.finished]
        round_idx = 0
        while active:
            shape = dispatch(self.config.dispatch_table, len(active))
            for s in active:
                self._session_round(s, shape, round_idx, len(active))
            active = [s for s in active if not s.finished]
            round_idx += 1
        total = StageMetrics()
        for s in sessions:
            total.merge(s.metrics)
        return [s.output() for s in sessions], total

    # -- oracle probe ---------------------------------------------------------

    def peek_logits(self, session):
        """Base logits for the next position; no state is mutated."""
        seq = session.seq
        L = len(session.committed)
        out, _ = forward(self.base, self.base_cache, seq,
                         [session.committed[-1]], [L - 1], write=False)
        return out.logits[0]

    def rewind_session(self, session, new_len):
        """Drop committed tokens past new_len and roll the caches, hidden
        tape, and FSM state back so decoding continues from the shorter
        prefix."""
        L = len(session.committed)
        if not 1 <= new_len <= L:
            raise EngineError(f"rewind length {new_len} outside [1, {L}]")
        if session.finished:
            raise EngineError("session finished; its cache state is released")
        seq = session.seq
        session.committed = session.committed[:new_len]
        session.tape.truncate(new_len)
        self.base_cache.rewind(seq, new_len - 1)
        self.base_cache.set_len(seq, new_len)
        if self.draft_cache is not None:
            self.draft_cache.rewind(seq, new_len - 1)
            self.draft_cache.set_len(seq, new_len)
        if self.config.fsm is not None:
            state = self.config.fsm.start
            for t in session.new_tokens:
                state = fsm_advance(self.config.fsm, state, t)
            session.fsm_state = state
