"""Toy decoder-only transformer pair: frozen base and fused draft.

The draft model shares the base model's embedding and LM head (same array
objects, never copied) and differs in two ways: far fewer layers, and a
fusion layer that mixes each input token's embedding with the base hidden
state of the previous position before layer 0. Forward calls read committed
context from a KV cache handle and return the fresh per-layer K/V so the
engine can write back exactly the rows that survive verification.

Weight-only FFN quantization stores symmetric per-output-channel integer
codes; matmuls use the dequantized weights, so the error bound
|dequant - original| <= scale/2 is the whole numerical contract.
"""

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .attention import CausalPrefix, LocalChunk, TreeSuffix, attend, merge_attentions
from .numcore import DTYPE, rmsnorm, rope_apply


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int
    n_heads: int
    head_dim: int
    n_layers: int
    ffn_hidden: int
    rope_theta: float = 10000.0
    local_attn_chunk: int = None

    def __post_init__(self):
        if self.dim != self.n_heads * self.head_dim:
            raise ModelError("dim must equal n_heads * head_dim")
        if self.head_dim % 2 != 0:
            raise ModelError("head_dim must be even for rotary pairs")
        if min(self.vocab_size, self.n_layers, self.ffn_hidden) < 1:
            raise ModelError("vocab_size, n_layers, ffn_hidden must be >= 1")
        if self.local_attn_chunk is not None and self.local_attn_chunk < 1:
            raise ModelError("local_attn_chunk must be >= 1 when set")

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size, "dim": self.dim,
            "n_heads": self.n_heads, "head_dim": self.head_dim,
            "n_layers": self.n_layers, "ffn_hidden": self.ffn_hidden,
            "rope_theta": self.rope_theta, "local_attn_chunk": self.local_attn_chunk,
        }


@dataclass
class QuantizedLinear:
    """Symmetric per-output-channel integer codes for one weight matrix."""

    codes: np.ndarray  # int8, same shape as the original weight
    scales: np.ndarray  # one per output channel (column)
    bits: int
    dense: np.ndarray = None  # dequantized, filled in post-init

    def __post_init__(self):
        if self.dense is None:
            self.dense = self.codes.astype(DTYPE) * self.scales[None, :]


def quantize_weight(w, bits):
    if bits not in (4, 8):
        raise ModelError("bits must be 4 or 8")
    qmax = 2 ** (bits - 1) - 1
    scales = np.max(np.abs(w), axis=0) / qmax
    safe = np.where(scales > 0, scales, 1.0)
    codes = np.clip(np.rint(w / safe[None, :]), -qmax, qmax).astype(np.int8)
    codes[:, scales == 0] = 0
    return QuantizedLinear(codes, scales, bits)


@dataclass
class LayerParams:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray  # ndarray or QuantizedLinear
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray  # (vocab, dim); shared storage with the draft
    layers: list
    final_norm: np.ndarray
    lm_head: np.ndarray  # (dim, vocab); shared storage with the draft
    fusion: np.ndarray = None  # (2*dim, dim); present iff draft

    @property
    def is_draft(self):
        return self.fusion is not None


@dataclass
class ForwardOutput:
    hidden: np.ndarray  # (tokens, dim), post final norm
    logits: np.ndarray  # (tokens, vocab)


def _init_layer(rng, cfg):
    dim, ffn = cfg.dim, cfg.ffn_hidden
    s_d, s_f = dim ** -0.5, ffn ** -0.5
    return LayerParams(
        attn_norm=np.ones(dim, dtype=DTYPE),
        wq=rng.normal(0.0, s_d, (dim, dim)),
        wk=rng.normal(0.0, s_d, (dim, dim)),
        wv=rng.normal(0.0, s_d, (dim, dim)),
        wo=rng.normal(0.0, s_d, (dim, dim)),
        ffn_norm=np.ones(dim, dtype=DTYPE),
        w_gate=rng.normal(0.0, s_d, (dim, ffn)),
        w_up=rng.normal(0.0, s_d, (dim, ffn)),
        w_down=rng.normal(0.0, s_f, (ffn, dim)),
    )


def init_base(cfg, seed):
    rng = np.random.default_rng(seed)
    return ModelParams(
        config=cfg,
        embedding=rng.normal(0.0, 1.0, (cfg.vocab_size, cfg.dim)),
        layers=[_init_layer(rng, cfg) for _ in range(cfg.n_layers)],
        final_norm=np.ones(cfg.dim, dtype=DTYPE),
        lm_head=rng.normal(0.0, cfg.dim ** -0.5, (cfg.dim, cfg.vocab_size)),
    )


def init_draft(cfg, seed, base):
    """Fresh draft parameters tied to the base embedding and LM head."""
    bcfg = base.config
    if cfg.n_layers >= bcfg.n_layers:
        raise ModelError("draft must have fewer layers than the base")
    if (cfg.vocab_size, cfg.dim) != (bcfg.vocab_size, bcfg.dim):
        raise ModelError("draft vocab/dim must match the base")
    rng = np.random.default_rng(seed)
    return ModelParams(
        config=cfg,
        embedding=base.embedding,
        layers=[_init_layer(rng, cfg) for _ in range(cfg.n_layers)],
        final_norm=np.ones(cfg.dim, dtype=DTYPE),
        lm_head=base.lm_head,
        fusion=rng.normal(0.0, (2 * cfg.dim) ** -0.5, (2 * cfg.dim, cfg.dim)),
    )


def make_oracle_draft(base):
    """Draft view that reproduces the base exactly: same layers, fusion that
    passes the embedding through and ignores the hidden input. Test and
    benchmark utility; deliberately skips the fewer-layers rule."""
    dim = base.config.dim
    fusion = np.zeros((2 * dim, dim), dtype=DTYPE)
    fusion[:dim] = np.eye(dim, dtype=DTYPE)
    return ModelParams(
        config=base.config,
        embedding=base.embedding,
        layers=base.layers,
        final_norm=base.final_norm,
        lm_head=base.lm_head,
        fusion=fusion,
    )


def quantize_ffn(params, bits):
    """Quantize every FFN weight of a draft model; all else untouched.

    Returns new params whose FFN matmuls run on dequantized weights. The
    base model is never quantized here, so its outputs cannot move.
    """
    if not params.is_draft:
        raise ModelError("FFN quantization applies to the draft model only")
    layers = [
        replace(
            lp,
            w_gate=quantize_weight(lp.w_gate, bits),
            w_up=quantize_weight(lp.w_up, bits),
            w_down=quantize_weight(lp.w_down, bits),
        )
        for lp in params.layers
    ]
    return replace(params, layers=layers)


def _dense(w):
    return w.dense if isinstance(w, QuantizedLinear) else w


def silu(x):
    # x * sigmoid(x); tanh form avoids overflow for large negatives
    return x * 0.5 * (1.0 + np.tanh(0.5 * x))


def forward(params, cache, seq, tokens, positions, prev_hidden=None,
            suffix_mask_new=None, carry_kv=None, write=True):
    """One transformer forward over new rows against cached context.

    tokens/positions: the new rows. Committed context is whatever the cache
    has written for ``seq``; new rows attend to it mask-free (or chunk
    masked) plus to carried/fresh suffix K/V under ``suffix_mask_new``
    (causal by position when omitted). With ``write`` the rotated K and V
    are appended to the cache at ``positions`` (must be contiguous);
    either way they are returned per layer for suffix write-back.

    prev_hidden is required for draft params: row i is the base hidden
    state fused with token i.
    """
    cfg = params.config
    pos = np.asarray(positions, dtype=np.int64)
    n = len(tokens)
    if pos.shape != (n,) or n == 0:
        raise ModelError("positions must match tokens and be nonempty")
    x = params.embedding[np.asarray(tokens, dtype=np.int64)]
    if params.is_draft:
        if prev_hidden is None or prev_hidden.shape != (n, cfg.dim):
            raise ModelError("draft forward needs one prev_hidden row per token")
        x = np.concatenate([x, prev_hidden], axis=1) @ params.fusion
    elif prev_hidden is not None:
        raise ModelError("prev_hidden given to a non-draft model")

    ctx = cache.written_len(seq)
    chunk = cfg.local_attn_chunk
    if write:
        if not np.array_equal(pos, np.arange(ctx, ctx + n)):
            raise ModelError("cache writes require contiguous tail positions")
        cache.ensure(seq, ctx + n)
    if suffix_mask_new is None:
        if carry_kv is not None:
            raise ModelError("carry_kv requires an explicit suffix mask")
        mask = pos[None, :] <= pos[:, None]
        if chunk is not None:
            mask &= pos[None, :] // chunk == pos[:, None] // chunk
    else:
        mask = suffix_mask_new
    scale = cfg.head_dim ** -0.5

    fresh = []
    for li, lp in enumerate(params.layers):
        h = rmsnorm(x, lp.attn_norm)
        q = rope_apply(h @ lp.wq, pos, cfg.head_dim, cfg.rope_theta)
        k = rope_apply(h @ lp.wk, pos, cfg.head_dim, cfg.rope_theta)
        v = h @ lp.wv
        parts = []
        if ctx > 0:
            ck, cv = cache.gather(seq, li, ctx)
            if chunk is None:
                bias = CausalPrefix(ctx)
            else:
                bias = LocalChunk(chunk, tuple(int(p) for p in pos), tuple(range(ctx)))
            parts.append(attend(q, ck, cv, bias, scale, cfg.n_heads))
        if carry_kv is not None and carry_kv[li][0].shape[0] > 0:
            sk = np.concatenate([carry_kv[li][0], k])
            sv = np.concatenate([carry_kv[li][1], v])
        else:
            sk, sv = k, v
        parts.append(attend(q, sk, sv, TreeSuffix(np.asarray(mask, dtype=bool)),
                            scale, cfg.n_heads))
        x = x + merge_attentions(parts, cfg.n_heads) @ lp.wo
        h2 = rmsnorm(x, lp.ffn_norm)
        x = x + (silu(h2 @ _dense(lp.w_gate)) * (h2 @ _dense(lp.w_up))) @ _dense(lp.w_down)
        if write:
            cache.write(seq, li, int(pos[0]), k, v)
        fresh.append((k, v))

    hidden = rmsnorm(x, params.final_norm)
    return ForwardOutput(hidden, hidden @ params.lm_head), fresh


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"SDCP"
VERSION = 1


def _param_arrays(params, prefix, include_tied):
    out = []
    if include_tied:
        out.append((f"{prefix}.embedding", params.embedding))
    for i, lp in enumerate(params.layers):
        for name in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm",
                     "w_gate", "w_up", "w_down"):
            out.append((f"{prefix}.layers.{i}.{name}", _dense(getattr(lp, name))))
    out.append((f"{prefix}.final_norm", params.final_norm))
    if include_tied:
        out.append((f"{prefix}.lm_head", params.lm_head))
    if params.fusion is not None:
        out.append((f"{prefix}.fusion", params.fusion))
    return out


def save_pair(path, base, draft):
    """Write base+draft weights to one versioned container.

    Quantized FFN weights are stored densely (dequantized); quantization is
    re-applied after loading when wanted. Tied arrays are stored once.
    """
    arrays = _param_arrays(base, "base", True) + _param_arrays(draft, "draft", False)
    header = json.dumps({
        "base": base.config.to_dict(),
        "draft": draft.config.to_dict(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for _name, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_pair(path):
    """Read a container written by save_pair; returns (base, draft) with the
    embedding/LM-head tie re-established."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ModelError(f"{path}: not a checkpoint container")
    version, header_len = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise ModelError(f"{path}: unsupported container version {version}")
    off = 16
    header = json.loads(blob[off:off + header_len].decode())
    off += header_len
    base_cfg = ModelConfig(**header["base"])
    draft_cfg = ModelConfig(**header["draft"])
    values = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += count * 8
        values[entry["name"]] = arr.reshape(shape).astype(DTYPE)

    def take(name, shape):
        if name not in values:
            raise ModelError(f"{path}: missing array {name}")
        if values[name].shape != shape:
            raise ModelError(f"{path}: {name} has shape {values[name].shape}, "
                             f"expected {shape}")
        return values[name]

    def build_layers(prefix, cfg):
        dim, ffn = cfg.dim, cfg.ffn_hidden
        shapes = {"attn_norm": (dim,), "wq": (dim, dim), "wk": (dim, dim),
                  "wv": (dim, dim), "wo": (dim, dim), "ffn_norm": (dim,),
                  "w_gate": (dim, ffn), "w_up": (dim, ffn), "w_down": (ffn, dim)}
        return [
            LayerParams(**{n: take(f"{prefix}.layers.{i}.{n}", s)
                           for n, s in shapes.items()})
            for i in range(cfg.n_layers)
        ]

    embedding = take("base.embedding", (base_cfg.vocab_size, base_cfg.dim))
    lm_head = take("base.lm_head", (base_cfg.dim, base_cfg.vocab_size))
    base = ModelParams(
        config=base_cfg,
        embedding=embedding,
        layers=build_layers("base", base_cfg),
        final_norm=take("base.final_norm", (base_cfg.dim,)),
        lm_head=lm_head,
    )
    draft = ModelParams(
        config=draft_cfg,
        embedding=embedding,
        layers=build_layers("draft", draft_cfg),
        final_norm=take("draft.final_norm", (draft_cfg.dim,)),
        lm_head=lm_head,
        fusion=take("draft.fusion", (2 * draft_cfg.dim, draft_cfg.dim)),
    )
    return base, draft
