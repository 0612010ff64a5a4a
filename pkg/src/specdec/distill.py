"""Draft distillation: train the fusion and draft layers against frozen
base-model hidden states and logits.

The student consumes (token embedding, base hidden of the previous
position) exactly as the engine feeds it at decode time, so row i of the
training batch predicts base outputs at position i. Gradients are
hand-written reverse mode through the draft stack only; the embedding and
LM head stay tied to the base and frozen, as does the base itself.
"""

from dataclasses import dataclass, field

import numpy as np

from .drafttree import DispatchTable, parse_tree
from .kvstore import FlatKvCache
from .model import QuantizedLinear, forward, silu
from .numcore import (DTYPE, rmsnorm, rope_apply, smooth_l1,
                      soft_cross_entropy, softmax_lse)
from .sampling import SamplerConfig

LAYER_NAMES = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm",
               "w_gate", "w_up", "w_down")
NORM_NAMES = ("attn_norm", "ffn_norm", "final_norm")


class DistillError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_ce: float = 0.1
    lambda_l1: float = 1.0
    lr: float = 2e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    huber_beta: float = 1.0
    steps: int = 500
    batch_size: int = 4
    seed: int = 0


def trainable_params(draft):
    """Name -> array view of everything the optimizer may touch."""
    if not draft.is_draft:
        raise DistillError("distillation trains the draft model")
    out = {"fusion": draft.fusion, "final_norm": draft.final_norm}
    for i, lp in enumerate(draft.layers):
        for name in LAYER_NAMES:
            w = getattr(lp, name)
            if isinstance(w, QuantizedLinear):
                raise DistillError("cannot train a quantized draft")
            out[f"layers.{i}.{name}"] = w
    return out


def _rmsnorm_backward(dy, x, w, eps=1e-6):
    r = np.sqrt(np.mean(x * x, axis=1) + eps)
    dw = np.sum(dy * x / r[:, None], axis=0)
    s = np.sum(dy * w[None, :] * x, axis=1)
    dx = dy * w[None, :] / r[:, None] - x * (s / (x.shape[1] * r ** 3))[:, None]
    return dx, dw


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def teacher_outputs(base, tokens):
    """Frozen base forward over one sequence; hidden and logits per row."""
    n = len(tokens)
    cache = FlatKvCache(base.config.n_layers, base.config.dim, n)
    cache.new_seq(0)
    out, _ = forward(base, cache, 0, tokens, np.arange(n))
    return out.hidden, out.logits


def _forward_training(draft, tokens, prev_hidden, positions):
    """Draft forward that keeps every intermediate needed for backward."""
    cfg = draft.config
    if cfg.local_attn_chunk is not None:
        raise DistillError("training assumes full causal attention")
    n = len(tokens)
    hd, nh = cfg.head_dim, cfg.n_heads
    scale = hd ** -0.5
    mask = np.tril(np.ones((n, n), dtype=bool))
    emb = draft.embedding[np.asarray(tokens, dtype=np.int64)]
    cat = np.concatenate([emb, prev_hidden], axis=1)
    x = cat @ draft.fusion
    tape = {"cat": cat, "layers": []}
    for lp in draft.layers:
        x_in = x
        a = rmsnorm(x_in, lp.attn_norm)
        q = rope_apply(a @ lp.wq, positions, hd, cfg.rope_theta)
        k = rope_apply(a @ lp.wk, positions, hd, cfg.rope_theta)
        v = a @ lp.wv
        probs = []
        attn = np.empty_like(x_in)
        for h in range(nh):
            cols = slice(h * hd, (h + 1) * hd)
            scores = q[:, cols] @ k[:, cols].T * scale
            scores = np.where(mask, scores, -np.inf)
            p = softmax_lse(scores).probs
            probs.append(p)
            attn[:, cols] = p @ v[:, cols]
        x_mid = x_in + attn @ lp.wo
        h2 = rmsnorm(x_mid, lp.ffn_norm)
        g = h2 @ lp.w_gate
        u = h2 @ lp.w_up
        y = (silu(g) * u) @ lp.w_down
        x = x_mid + y
        tape["layers"].append({
            "x_in": x_in, "a": a, "q": q, "k": k, "v": v, "probs": probs,
            "attn": attn, "x_mid": x_mid, "h2": h2, "g": g, "u": u,
        })
    tape["x_out"] = x
    hidden = rmsnorm(x, draft.final_norm)
    logits = hidden @ draft.lm_head
    return hidden, logits, tape


def _backward_training(draft, tape, positions, dhidden):
    cfg = draft.config
    hd, nh = cfg.head_dim, cfg.n_heads
    scale = hd ** -0.5
    grads = {}
    dx, grads["final_norm"] = _rmsnorm_backward(dhidden, tape["x_out"],
                                                draft.final_norm)
    for li in range(cfg.n_layers - 1, -1, -1):
        lp, t = draft.layers[li], tape["layers"][li]
        # ffn block
        f = silu(t["g"]) * t["u"]
        grads[f"layers.{li}.w_down"] = f.T @ dx
        df = dx @ lp.w_down.T
        sg = _sigmoid(t["g"])
        dg = df * t["u"] * sg * (1.0 + t["g"] * (1.0 - sg))
        du = df * (t["g"] * sg)
        grads[f"layers.{li}.w_gate"] = t["h2"].T @ dg
        grads[f"layers.{li}.w_up"] = t["h2"].T @ du
        dh2 = dg @ lp.w_gate.T + du @ lp.w_up.T
        dx_mid, grads[f"layers.{li}.ffn_norm"] = _rmsnorm_backward(
            dh2, t["x_mid"], lp.ffn_norm)
        dx_mid += dx  # residual
        # attention block
        grads[f"layers.{li}.wo"] = t["attn"].T @ dx_mid
        dattn = dx_mid @ lp.wo.T
        dq = np.empty_like(t["q"])
        dk = np.empty_like(t["k"])
        dv = np.empty_like(t["v"])
        for h in range(nh):
            cols = slice(h * hd, (h + 1) * hd)
            p = t["probs"][h]
            do = dattn[:, cols]
            dv[:, cols] = p.T @ do
            dp = do @ t["v"][:, cols].T
            ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
            dq[:, cols] = ds @ t["k"][:, cols] * scale
            dk[:, cols] = ds.T @ t["q"][:, cols] * scale
        # rotation is orthogonal, so its backward is rotation by -position
        dq0 = rope_apply(dq, -positions, hd, cfg.rope_theta)
        dk0 = rope_apply(dk, -positions, hd, cfg.rope_theta)
        grads[f"layers.{li}.wq"] = t["a"].T @ dq0
        grads[f"layers.{li}.wk"] = t["a"].T @ dk0
        grads[f"layers.{li}.wv"] = t["a"].T @ dv
        da = dq0 @ lp.wq.T + dk0 @ lp.wk.T + dv @ lp.wv.T
        dx_in, grads[f"layers.{li}.attn_norm"] = _rmsnorm_backward(
            da, t["x_in"], lp.attn_norm)
        dx = dx_mid + dx_in
    grads["fusion"] = tape["cat"].T @ dx
    return grads


def distill_loss(base_out, draft_out, cfg):
    """(total, ce, l1) between aligned teacher and student outputs."""
    ce = soft_cross_entropy(base_out.logits, draft_out.logits)
    l1 = smooth_l1(draft_out.hidden, base_out.hidden, cfg.huber_beta)
    return cfg.lambda_ce * ce + cfg.lambda_l1 * l1, ce, l1


def loss_and_grads(base, draft, tokens, cfg):
    """Losses and parameter gradients for one training sequence.

    Student row i (i >= 1) consumes token i fused with base hidden i-1 and
    matches base hidden/logits at position i; position 0 has no previous
    hidden, so it carries no loss.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise DistillError("training sequences need at least 2 tokens")
    t_hidden, t_logits = teacher_outputs(base, tokens)
    positions = np.arange(1, len(tokens))
    s_hidden, s_logits, tape = _forward_training(
        draft, tokens[1:], t_hidden[:-1], positions)
    ce = soft_cross_entropy(t_logits[1:], s_logits)
    l1 = smooth_l1(s_hidden, t_hidden[1:], cfg.huber_beta)
    total = cfg.lambda_ce * ce + cfg.lambda_l1 * l1
    rows = s_logits.shape[0]
    dlogits = cfg.lambda_ce * (softmax_lse(s_logits).probs
                               - softmax_lse(t_logits[1:]).probs) / rows
    diff = s_hidden - t_hidden[1:]
    dhidden = cfg.lambda_l1 * np.clip(diff / cfg.huber_beta, -1.0, 1.0) / diff.size
    dhidden = dhidden + dlogits @ draft.lm_head.T
    grads = _backward_training(draft, tape, positions, dhidden)
    return total, ce, l1, grads


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def train_step(base, draft, batch, cfg, state):
    """One optimizer step over a batch of sequences; mutates draft in place.

    Adam moments plus decoupled weight decay on the weight matrices (norm
    gains are not decayed).
    """
    params = trainable_params(draft)
    totals = np.zeros(3)
    acc = {name: np.zeros_like(p) for name, p in params.items()}
    for tokens in batch:
        total, ce, l1, grads = loss_and_grads(base, draft, tokens, cfg)
        totals += (total, ce, l1)
        for name, g in grads.items():
            acc[name] += g
    nb = len(batch)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = acc[name] / nb
        if not np.all(np.isfinite(g)):
            raise DistillError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        mhat = state.m[name] / (1 - cfg.beta1 ** t)
        vhat = state.v[name] / (1 - cfg.beta2 ** t)
        upd = mhat / (np.sqrt(vhat) + cfg.adam_eps)
        if p.ndim == 2:
            upd = upd + cfg.weight_decay * p
        p -= cfg.lr * upd
    return tuple(totals / nb)


def make_corpus(vocab_size, n_seqs, seq_len, seed, branching=4):
    """Seeded Markov corpus: each token has a small set of likely successors,
    so a drafted continuation is genuinely predictable."""
    if not 1 <= branching <= vocab_size:
        raise DistillError("branching must be in [1, vocab_size]")
    rng = np.random.default_rng(seed)
    trans = np.zeros((vocab_size, vocab_size), dtype=DTYPE)
    for s in range(vocab_size):
        succ = rng.choice(vocab_size, size=branching, replace=False)
        w = rng.gamma(1.0, 1.0, size=branching) + 0.05
        trans[s, succ] = w / w.sum()
    seqs = np.empty((n_seqs, seq_len), dtype=np.int64)
    for i in range(n_seqs):
        tok = int(rng.integers(vocab_size))
        for j in range(seq_len):
            seqs[i, j] = tok
            tok = int(rng.choice(vocab_size, p=trans[tok]))
    return seqs


def train_draft(base, draft, corpus, cfg, log_every=25):
    """Run cfg.steps optimizer steps cycling over the corpus.

    Returns the loss history as a list of (step, total, ce, l1); step 0 is
    the pre-training loss of the first batch.
    """
    state = AdamState()
    history = []
    n_seqs = len(corpus)
    first = [corpus[j % n_seqs] for j in range(cfg.batch_size)]
    t0 = ce0 = l10 = 0.0
    for tokens in first:
        total, ce, l1, _ = loss_and_grads(base, draft, tokens, cfg)
        t0, ce0, l10 = t0 + total, ce0 + ce, l10 + l1
    nb = len(first)
    history.append((0, t0 / nb, ce0 / nb, l10 / nb))
    for step in range(1, cfg.steps + 1):
        lo = (step - 1) * cfg.batch_size
        batch = [corpus[(lo + j) % n_seqs] for j in range(cfg.batch_size)]
        total, ce, l1 = train_step(base, draft, batch, cfg, state)
        if step % log_every == 0 or step == cfg.steps:
            history.append((step, total, ce, l1))
    return history


def eval_tpc(base, draft, prompts, tree="chain:3", max_new_tokens=32,
             temperature=0.0, seed=0):
    """Mean tokens per committed round over the prompts, measured by real
    engine runs."""
    from .engine import Engine, EngineConfig  # avoid a cycle at import time

    config = EngineConfig(
        sampler=SamplerConfig(temperature=temperature, top_p=1.0, seed=seed),
        dispatch_table=DispatchTable(((None, parse_tree(tree)),)),
        cache_blocks=max(64, 8 * len(prompts)),
        max_context=4096,
    )
    eng = Engine(base, draft, config)
    committed = rounds = 0
    for prompt in prompts:
        session = eng.new_session(prompt)
        eng.run(session, max_new_tokens)
        committed += session.metrics.committed_total
        rounds += session.metrics.rounds
    if rounds == 0:
        raise DistillError("no decode rounds ran")
    return committed / rounds
