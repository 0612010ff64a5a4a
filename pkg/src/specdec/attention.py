"""Tree attention: prefix/suffix split with log-sum-exp merging.

Decode-time attention against committed context needs no mask; attention
within a flattened draft tree needs the ancestor (suffix) mask. Computing
the two parts separately and merging by log-sum-exp weights is exact, and
the naive single-pass explicit-mask path is kept as the correctness oracle
(it always runs on the pure-numpy kernel, independent of the backend).

Rotary embeddings are applied by the caller; keys arrive here already
rotated by their absolute positions.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .drafttree import suffix_mask
from .numcore import as_matrix


class AttentionError(ValueError):
    pass


@dataclass(frozen=True)
class CausalPrefix:
    """Decode queries against committed context: every key is visible."""

    context_len: int


@dataclass(frozen=True)
class LocalChunk:
    """Keys visible only inside the query's fixed-length position chunk."""

    chunk_len: int
    q_positions: tuple
    k_positions: tuple


@dataclass(frozen=True)
class TreeSuffix:
    """Explicit ancestor-or-self visibility between flattened tree slots."""

    mask: np.ndarray  # (queries, keys) bool


@dataclass
class PartialAttention:
    out: np.ndarray  # (queries, dim)
    lse: np.ndarray  # (heads, queries); -inf marks fully-masked rows

    @property
    def masked_rows(self):
        return ~np.isfinite(self.lse)


def _split_heads(x, n_heads):
    rows, dim = x.shape
    if dim % n_heads != 0:
        raise AttentionError(f"dim {dim} not divisible by {n_heads} heads")
    return np.ascontiguousarray(x.reshape(rows, n_heads, dim // n_heads).transpose(1, 0, 2))


def _join_heads(x):
    heads, rows, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(rows, heads * dh)


def _bias_mask(bias, n_q, n_k):
    if isinstance(bias, CausalPrefix):
        if bias.context_len != n_k:
            raise AttentionError("CausalPrefix context_len must match key count")
        return None
    if isinstance(bias, LocalChunk):
        if bias.chunk_len < 1:
            raise AttentionError("LocalChunk chunk_len must be >= 1")
        qp = np.asarray(bias.q_positions)
        kp = np.asarray(bias.k_positions)
        if qp.shape != (n_q,) or kp.shape != (n_k,):
            raise AttentionError("LocalChunk positions must match q/k lengths")
        same = qp[:, None] // bias.chunk_len == kp[None, :] // bias.chunk_len
        return same & (kp[None, :] <= qp[:, None])
    if isinstance(bias, TreeSuffix):
        if bias.mask.shape != (n_q, n_k):
            raise AttentionError(f"TreeSuffix mask {bias.mask.shape} vs ({n_q}, {n_k})")
        return bias.mask
    raise AttentionError(f"unknown bias {bias!r}")


def attend(q, k, v, bias, scale, n_heads=1):
    """softmax(q k^T * scale + mask) v with per-query log-sum-exp."""
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise AttentionError(f"attend: q {q.shape}, k {k.shape}, v {v.shape}")
    n_q, n_k = q.shape[0], k.shape[0]
    if n_k == 0:
        dh = q.shape[1]
        return PartialAttention(np.zeros((n_q, dh)), np.full((n_heads, n_q), -np.inf))
    mask = _bias_mask(bias, n_q, n_k)
    out, lse = kernels.attend_heads(
        _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads), mask, scale
    )
    return PartialAttention(_join_heads(out), lse)


def merge_partials(parts, n_heads=1):
    """Combine disjoint-key partial attentions into one PartialAttention.

    Weights are exp(lse_i - max lse); the result equals attention over the
    union of the key sets. Rows masked in every part are an error.
    """
    if not parts:
        raise AttentionError("merge: no parts")
    lses = np.stack([p.lse for p in parts])  # (P, H, m)
    outs = np.stack([_split_heads(p.out, n_heads) for p in parts])  # (P, H, m, dh)
    m = np.max(lses, axis=0)
    if not np.isfinite(m).all():
        raise AttentionError("merge: query row masked in every part")
    w = np.exp(lses - m[None])  # exp(-inf) = 0 drops masked parts
    denom = np.sum(w, axis=0)
    merged = np.sum(w[..., None] * outs, axis=0) / denom[..., None]
    return PartialAttention(_join_heads(merged), m + np.log(denom))


def merge_attentions(parts, n_heads=1):
    return merge_partials(parts, n_heads).out


def tree_attention(q_tree, committed_k, committed_v, tree_k, tree_v, tree, scale,
                   n_heads=1, chunk_len=None):
    """Two-pass attention for flattened tree queries.

    Query node i sits at absolute position context_len + depth_i - 1; the
    prefix pass runs mask-free (or chunk-masked) against committed keys and
    the suffix pass applies the ancestor mask over the fresh tree keys.
    """
    ctx = committed_k.shape[0]
    if q_tree.shape[0] != tree.n_nodes or tree_k.shape[0] != tree.n_nodes:
        raise AttentionError("tree_attention: node count mismatch")
    q_pos = tuple(ctx + d - 1 for d in tree.depth)
    if chunk_len is None:
        prefix_bias = CausalPrefix(ctx)
    else:
        prefix_bias = LocalChunk(chunk_len, q_pos, tuple(range(ctx)))
    parts = []
    if ctx > 0:
        parts.append(attend(q_tree, committed_k, committed_v, prefix_bias, scale, n_heads))
    parts.append(attend(q_tree, tree_k, tree_v, TreeSuffix(suffix_mask(tree)), scale, n_heads))
    return merge_attentions(parts, n_heads)


def explicit_tree_mask(tree, context_len, chunk_len=None):
    """Full (nodes, context+nodes) visibility matrix; the oracle's mask.

    Also used by the local-attention mask audit: with a chunk length set, no
    visible key may sit outside the query's chunk.
    """
    n = tree.n_nodes
    mask = np.zeros((n, context_len + n), dtype=bool)
    q_pos = np.array([context_len + d - 1 for d in tree.depth], dtype=np.int64)
    k_pos = np.arange(context_len, dtype=np.int64)
    if chunk_len is None:
        mask[:, :context_len] = True
    else:
        mask[:, :context_len] = q_pos[:, None] // chunk_len == k_pos[None, :] // chunk_len
    mask[:, context_len:] = suffix_mask(tree)
    return mask


def naive_tree_attention(q_tree, full_k, full_v, explicit_mask, scale, n_heads=1):
    """One-pass explicit-mask attention over committed + tree keys (oracle)."""
    q_tree, full_k, full_v = as_matrix(q_tree), as_matrix(full_k), as_matrix(full_v)
    if explicit_mask.shape != (q_tree.shape[0], full_k.shape[0]):
        raise AttentionError("naive_tree_attention: mask shape mismatch")
    out, lse = kernels._attend_numpy(
        _split_heads(q_tree, n_heads),
        _split_heads(full_k, n_heads),
        _split_heads(full_v, n_heads),
        explicit_mask,
        scale,
    )
    if not np.isfinite(lse).all():
        raise AttentionError("naive_tree_attention: fully masked query row")
    return _join_heads(out)


def truncate_draft_at_boundary(tree, committed_len, chunk_len):
    """Drop tree nodes whose absolute position would cross the next chunk boundary.

    Node positions run from committed_len upward; the boundary is the end of
    the chunk holding the last committed token. May return an empty tree.
    """
    if chunk_len is None:
        return tree
    if chunk_len < 1:
        raise AttentionError("chunk_len must be >= 1")
    boundary = ((committed_len - 1) // chunk_len + 1) * chunk_len
    keep = [i for i, d in enumerate(tree.depth) if committed_len + d - 1 < boundary]
    if len(keep) == tree.n_nodes:
        return tree
    from .drafttree import subtree

    pruned, _ = subtree(tree, keep)
    return pruned
