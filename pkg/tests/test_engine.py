import numpy as np
import pytest

from specdec.drafttree import DispatchTable, parse_tree
from specdec.engine import (Engine, EngineConfig, EngineError,
                            config_from_dict, models_from_dict)
from specdec.model import ModelConfig, init_base, init_draft, make_oracle_draft
from specdec.sampling import SamplerConfig

CFG = ModelConfig(vocab_size=32, dim=16, n_heads=2, head_dim=8,
                  n_layers=2, ffn_hidden=24)
DCFG = ModelConfig(vocab_size=32, dim=16, n_heads=2, head_dim=8,
                   n_layers=1, ffn_hidden=24)


def _models(seed=0):
    base = init_base(CFG, seed)
    return base, init_draft(DCFG, seed + 1, base)


def _engine(base, draft, tree="chain:3", **kw):
    kw.setdefault("sampler", SamplerConfig(temperature=0.0, seed=0))
    kw.setdefault("cache_blocks", 128)
    kw.setdefault("max_context", 512)
    return Engine(base, draft, EngineConfig(
        dispatch_table=DispatchTable(((None, parse_tree(tree)),)), **kw))


def _prompt(n=5, seed=2):
    rng = np.random.default_rng(seed)
    return list(rng.integers(0, CFG.vocab_size, size=n))


def test_speculative_equals_greedy_baseline():
    base, draft = _models()
    for tree in ("chain:1", "chain:3", "full:2,2"):
        eng = _engine(base, draft, tree)
        ref = _engine(base, None, speculative=False)
        p = _prompt()
        out, _ = eng.run(eng.new_session(p), 16)
        want, _ = ref.run(ref.new_session(p), 16)
        assert out == want


def test_base_calls_equal_rounds_plus_one():
    base, draft = _models()
    eng = _engine(base, draft)
    s = eng.new_session(_prompt())
    eng.run(s, 10)
    assert s.metrics.base_forward_calls == 1 + s.metrics.rounds
    # rounds commit everything after the prefill token
    assert s.metrics.committed_total == len(s.new_tokens) - 1


def test_oracle_chain_tpc_exact():
    base, _ = _models()
    oracle = make_oracle_draft(base)
    for length in (1, 3, 5):
        eng = _engine(base, oracle, f"chain:{length}")
        s = eng.new_session(_prompt())
        eng.run(s, 12)
        assert s.metrics.tpc == length + 1


def test_non_speculative_commits_one_per_round():
    base, _ = _models()
    eng = _engine(base, None, speculative=False)
    s = eng.new_session(_prompt())
    out, _ = eng.run(s, 6)
    assert len(out) == 6
    assert s.metrics.rounds == 6 - 1  # first token comes from prefill
    assert s.metrics.draft_forward_calls == 0


def test_stop_token_truncates_output():
    base, draft = _models()
    ref = _engine(base, None, speculative=False)
    want, _ = ref.run(ref.new_session(_prompt()), 16)
    stop = want[3]
    eng = _engine(base, draft, stop_token=stop)
    s = eng.new_session(_prompt())
    out, _ = eng.run(s, 16)
    assert out == want[:4]
    assert s.finish_reason == "stop"


def test_max_new_respected():
    base, draft = _models()
    eng = _engine(base, draft)
    out, _ = eng.run(eng.new_session(_prompt()), 3)
    assert len(out) == 3


def test_batch_matches_individual_runs():
    base, draft = _models()
    prompts = [_prompt(4, s) for s in range(5)]
    eng = _engine(base, draft, cache_blocks=256)
    sessions = [eng.new_session(p) for p in prompts]
    outs, _ = eng.run_batch(sessions, 8)
    for p, got in zip(prompts, outs):
        solo = _engine(base, draft)
        want, _ = solo.run(solo.new_session(p), 8)
        assert got == want


def test_dispatch_by_batch_size():
    base, draft = _models()
    table = DispatchTable(((2, parse_tree("chain:5")),
                           (None, parse_tree("chain:1"))))
    eng = Engine(base, make_oracle_draft(base), EngineConfig(
        sampler=SamplerConfig(temperature=0.0, seed=0),
        dispatch_table=table, cache_blocks=256, max_context=512))
    s = eng.new_session(_prompt())
    eng.run(s, 12)
    assert s.metrics.tpc == 6.0  # batch of 1 picks the deep chain
    sessions = [eng.new_session(_prompt(4, s)) for s in range(3)]
    eng.run_batch(sessions, 8)
    for s in sessions:
        assert s.metrics.tpc == 2.0  # batch of 3 exceeds the threshold


def test_rewind_session_replays_identically():
    base, draft = _models()
    eng = _engine(base, draft)
    s = eng.new_session(_prompt())
    s.max_new_tokens = 64
    eng.prefill(s)
    for _ in range(5):
        eng.decode_round(s)
    full = list(s.committed)
    keep = len(s.prompt) + 2
    eng.rewind_session(s, keep)
    assert s.committed == full[:keep]
    for _ in range(5):
        eng.decode_round(s)
    # greedy decoding replays the same continuation
    assert s.committed[:len(full)] == full


def test_rewind_session_bounds():
    base, draft = _models()
    eng = _engine(base, draft)
    s = eng.new_session(_prompt())
    s.max_new_tokens = 8
    eng.prefill(s)
    with pytest.raises(EngineError):
        eng.rewind_session(s, len(s.committed) + 1)
    with pytest.raises(EngineError):
        eng.rewind_session(s, 0)


def test_peek_logits_does_not_mutate():
    base, draft = _models()
    eng = _engine(base, draft)
    s = eng.new_session(_prompt())
    s.max_new_tokens = 32
    eng.prefill(s)
    eng.decode_round(s)
    a = eng.peek_logits(s)
    b = eng.peek_logits(s)
    np.testing.assert_array_equal(a, b)
    before = list(s.committed)
    eng.decode_round(s)
    assert s.committed[:len(before)] == before


def test_prompt_validation():
    base, draft = _models()
    eng = _engine(base, draft)
    with pytest.raises(EngineError):
        eng.new_session([])
    with pytest.raises(EngineError):
        eng.new_session([0, CFG.vocab_size])


def test_speculative_needs_draft():
    base, _ = _models()
    with pytest.raises(EngineError):
        _engine(base, None)


def test_flat_cache_kind_matches_paged():
    base, draft = _models()
    a = _engine(base, draft, cache_kind="paged")
    b = _engine(base, draft, cache_kind="flat")
    p = _prompt()
    out_a, _ = a.run(a.new_session(p), 12)
    out_b, _ = b.run(b.new_session(p), 12)
    assert out_a == out_b


def test_config_from_dict_round_trip():
    cfg = config_from_dict({
        "temperature": 0.5, "top_p": 0.9, "seed": 7,
        "trees": [[4, "chain:2"], [None, "full:2,2"]],
        "block_size": 8, "speculative": True, "stop_token": 3,
    })
    assert cfg.sampler.temperature == 0.5
    assert cfg.dispatch_table.entries[0][0] == 4
    assert cfg.dispatch_table.entries[1][1].n_nodes == 6
    assert cfg.stop_token == 3


def test_models_from_dict_seeded():
    d = {"base_model": {"vocab_size": 32, "dim": 16, "n_heads": 2,
                        "head_dim": 8, "n_layers": 2, "ffn_hidden": 24},
         "draft_model": {"vocab_size": 32, "dim": 16, "n_heads": 2,
                         "head_dim": 8, "n_layers": 1, "ffn_hidden": 24},
         "init_seed": 5}
    base, draft = models_from_dict(d)
    base2, draft2 = models_from_dict(d)
    np.testing.assert_array_equal(base.embedding, base2.embedding)
    assert draft.embedding is base.embedding


def test_stochastic_mode_seeded_reproducible():
    base, draft = _models()
    kw = dict(sampler=SamplerConfig(temperature=1.0, top_p=0.9, seed=11),
              draft_mode="stochastic")
    a = _engine(base, draft, **kw)
    b = _engine(base, draft, **kw)
    p = _prompt()
    out_a, _ = a.run(a.new_session(p), 12)
    out_b, _ = b.run(b.new_session(p), 12)
    assert out_a == out_b
