"""Block-granular KV caching with rewind, prefix reuse, and LRU persistence.

PagedKvCache maps each sequence to a table of fixed-size blocks drawn from
one shared pool. Finished sequences park their full blocks, keyed by a
rolling content hash of the token prefix, so later prompts can re-map them
(directly, or after eviction into a PersistentKvStore). FlatKvCache is the
contiguous reference backend used by equivalence tests; both expose the
same surface, so the engine never branches on the cache kind.

Base and draft stores are sized in block COUNT, not bytes: running the same
operation sequence against both keeps their key sets identical, which is
what makes synchronized eviction work. Per-block bytes scale with the layer
ratio.
"""

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .numcore import DTYPE


class CacheError(RuntimeError):
    pass


def block_keys(tokens, block_size):
    """Rolling content key per FULL block: hash of all tokens up through it.

    Chaining the previous key into each block's hash gives prefix semantics:
    equal keys imply equal token prefixes from position zero.
    """
    keys = []
    prev = b""
    n_full = len(tokens) // block_size
    for b in range(n_full):
        chunk = np.asarray(tokens[b * block_size:(b + 1) * block_size], dtype="<i8")
        prev = hashlib.sha256(prev + chunk.tobytes()).digest()
        keys.append(prev.hex())
    return keys


def draft_cache_capacity(base_capacity_blocks, n_base_layers, n_draft_layers):
    """Block count for the draft cache paired with a base cache.

    The count matches the base cache so both evolve identical block-key
    sets; only the per-block byte size shrinks with the layer ratio.
    """
    if n_base_layers < 1 or n_draft_layers < 1:
        raise CacheError("layer counts must be >= 1")
    return base_capacity_blocks


def block_bytes(n_layers, block_size, dim, itemsize=8):
    """Bytes one K/V block occupies: two slabs per layer."""
    return 2 * n_layers * block_size * dim * itemsize


@dataclass
class StoredBlock:
    k: np.ndarray  # (n_layers, block_size, dim)
    v: np.ndarray


class PersistentKvStore:
    """LRU map from block content key to evicted block payload."""

    def __init__(self, capacity_blocks):
        if capacity_blocks < 0:
            raise CacheError("capacity must be >= 0")
        self.capacity = capacity_blocks
        self._entries = OrderedDict()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def keys(self):
        """Keys in LRU order (oldest first)."""
        return list(self._entries)

    def put(self, key, k, v):
        if key in self._entries:
            self._entries.move_to_end(key)
        self._entries[key] = StoredBlock(np.array(k), np.array(v))
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def pop(self, key):
        """Remove and return the payload, or None. Lookup always transfers
        ownership so a block is never both mapped and resident here."""
        return self._entries.pop(key, None)


class _SeqState:
    __slots__ = ("table", "length", "written")

    def __init__(self):
        self.table = []
        self.length = 0
        self.written = 0


def _new_stats():
    return {"reused_blocks": 0, "evicted_blocks": 0, "dropped_blocks": 0,
            "allocated_blocks": 0}


class PagedKvCache:
    def __init__(self, n_layers, dim, n_blocks, block_size=16, store=None):
        if min(n_layers, dim, n_blocks, block_size) < 1:
            raise CacheError("all cache dimensions must be >= 1")
        self.n_layers = n_layers
        self.dim = dim
        self.n_blocks = n_blocks
        self.block_size = block_size
        self.store = store
        self.k_pool = np.zeros((n_layers, n_blocks, block_size, dim), dtype=DTYPE)
        self.v_pool = np.zeros((n_layers, n_blocks, block_size, dim), dtype=DTYPE)
        self._free = list(range(n_blocks))[::-1]
        self._seqs = {}
        self._inactive = OrderedDict()  # content key -> parked block id
        self.stats = _new_stats()

    # -- sequence lifecycle ------------------------------------------------

    def new_seq(self, seq):
        if seq in self._seqs:
            raise CacheError(f"sequence {seq!r} already exists")
        self._seqs[seq] = _SeqState()

    def _state(self, seq):
        try:
            return self._seqs[seq]
        except KeyError:
            raise CacheError(f"unknown sequence {seq!r}") from None

    def committed_len(self, seq):
        return self._state(seq).length

    def written_len(self, seq):
        return self._state(seq).written

    def set_len(self, seq, n):
        if n < 0:
            raise CacheError("length must be >= 0")
        self._state(seq).length = n

    def release(self, seq, keys=()):
        """Finish a sequence: park full blocks under their content keys,
        free the rest. Parked blocks are the eviction candidates."""
        st = self._state(seq)
        n_full = st.written // self.block_size
        parked = 0
        for i, key in enumerate(keys):
            if i >= n_full:
                break
            bid = st.table[i]
            if key in self._inactive:
                self._free.append(bid)
            else:
                self._inactive[key] = bid
            parked = i + 1
        for bid in st.table[parked:]:
            self._free.append(bid)
        del self._seqs[seq]

    # -- allocation ---------------------------------------------------------

    @property
    def free_blocks(self):
        return len(self._free)

    @property
    def evictable_blocks(self):
        return len(self._inactive)

    @property
    def occupancy(self):
        return self.n_blocks - len(self._free) - len(self._inactive)

    def _grab_block(self):
        if not self._free:
            if self._inactive:
                evict_lru(self, self.store, 1)
            else:
                raise CacheError("block pool exhausted")
        self.stats["allocated_blocks"] += 1
        return self._free.pop()

    def ensure(self, seq, n_positions):
        st = self._state(seq)
        while len(st.table) * self.block_size < n_positions:
            st.table.append(self._grab_block())

    def alloc_for_step(self, seq, n_draft_nodes):
        """Map blocks for committed length + draft nodes + the bonus token,
        so no speculative position straddles an unallocated boundary."""
        self.ensure(seq, self._state(seq).length + n_draft_nodes + 1)

    # -- data movement -------------------------------------------------------

    def _segments(self, st, start, count):
        pos = start
        row = 0
        while row < count:
            b, off = divmod(pos, self.block_size)
            take = min(self.block_size - off, count - row)
            yield st.table[b], off, row, take
            pos += take
            row += take

    def write(self, seq, layer, start, k_rows, v_rows):
        st = self._state(seq)
        n = k_rows.shape[0]
        if start + n > len(st.table) * self.block_size:
            raise CacheError("write past allocated blocks")
        for bid, off, row, take in self._segments(st, start, n):
            self.k_pool[layer, bid, off:off + take] = k_rows[row:row + take]
            self.v_pool[layer, bid, off:off + take] = v_rows[row:row + take]
        st.written = max(st.written, start + n)

    def write_all(self, seq, start, k_by_layer, v_by_layer):
        for layer in range(self.n_layers):
            self.write(seq, layer, start, k_by_layer[layer], v_by_layer[layer])

    def compact_accepted(self, seq, start, k_by_layer, v_by_layer):
        """Land accepted suffix K/V in contiguous committed slots."""
        self.write_all(seq, start, k_by_layer, v_by_layer)

    def gather(self, seq, layer, n):
        st = self._state(seq)
        if n > st.written:
            raise CacheError(f"gather {n} rows but only {st.written} written")
        if n == 0:
            empty = np.zeros((0, self.dim), dtype=DTYPE)
            return empty, empty
        ks, vs = [], []
        for bid, off, _row, take in self._segments(st, 0, n):
            ks.append(self.k_pool[layer, bid, off:off + take])
            vs.append(self.v_pool[layer, bid, off:off + take])
        return np.concatenate(ks), np.concatenate(vs)

    def rewind(self, seq, new_len):
        """Drop positions past new_len and unmap the blocks beyond them."""
        st = self._state(seq)
        if new_len > st.written:
            raise CacheError("rewind past written length")
        keep = -(-new_len // self.block_size)
        for bid in st.table[keep:]:
            self._free.append(bid)
        del st.table[keep:]
        st.written = new_len
        st.length = new_len


def evict_lru(cache, store, n_blocks):
    """Move the n oldest parked blocks into the store; returns their keys.

    With no store attached the payloads are dropped. Driving the base and
    draft caches with the same calls yields identical evicted key lists.
    """
    if n_blocks > len(cache._inactive):
        raise CacheError("insufficient evictable blocks")
    keys = []
    for _ in range(n_blocks):
        key, bid = cache._inactive.popitem(last=False)
        if store is not None:
            store.put(key, cache.k_pool[:, bid], cache.v_pool[:, bid])
            cache.stats["evicted_blocks"] += 1
        else:
            cache.stats["dropped_blocks"] += 1
        cache._free.append(bid)
        keys.append(key)
    return keys


def lookup_prefix(cache, store, seq, tokens):
    """Re-map the longest block-aligned token prefix into a fresh sequence.

    Blocks come from the cache's own parked set first, then from the store
    (popped, so nothing stays resident once mapped). Returns matched_len,
    always a multiple of block_size.
    """
    st = cache._state(seq)
    if st.table or st.written:
        raise CacheError("lookup_prefix requires a fresh sequence")
    matched = 0
    for key in block_keys(tokens, cache.block_size):
        if key in cache._inactive:
            bid = cache._inactive.pop(key)
            st.table.append(bid)
        else:
            payload = store.pop(key) if store is not None else None
            if payload is None:
                break
            bid = cache._grab_block()
            cache.k_pool[:, bid] = payload.k
            cache.v_pool[:, bid] = payload.v
            st.table.append(bid)
        cache.stats["reused_blocks"] += 1
        matched += cache.block_size
    st.written = matched
    st.length = matched
    return matched


class FlatKvCache:
    """Contiguous per-sequence K/V arrays; the paged cache's reference twin."""

    def __init__(self, n_layers, dim, max_len):
        self.n_layers = n_layers
        self.dim = dim
        self.max_len = max_len
        self.block_size = max_len
        self.store = None
        self._seqs = {}
        self.stats = _new_stats()

    def new_seq(self, seq):
        if seq in self._seqs:
            raise CacheError(f"sequence {seq!r} already exists")
        self._seqs[seq] = {
            "k": np.zeros((self.n_layers, self.max_len, self.dim), dtype=DTYPE),
            "v": np.zeros((self.n_layers, self.max_len, self.dim), dtype=DTYPE),
            "length": 0,
            "written": 0,
        }

    def _state(self, seq):
        try:
            return self._seqs[seq]
        except KeyError:
            raise CacheError(f"unknown sequence {seq!r}") from None

    def committed_len(self, seq):
        return self._state(seq)["length"]

    def written_len(self, seq):
        return self._state(seq)["written"]

    def set_len(self, seq, n):
        self._state(seq)["length"] = n

    def ensure(self, seq, n_positions):
        if n_positions > self.max_len:
            raise CacheError(f"flat cache capacity {self.max_len} exceeded")

    def alloc_for_step(self, seq, n_draft_nodes):
        self.ensure(seq, self._state(seq)["length"] + n_draft_nodes + 1)

    def write(self, seq, layer, start, k_rows, v_rows):
        st = self._state(seq)
        n = k_rows.shape[0]
        if start + n > self.max_len:
            raise CacheError("write past flat cache capacity")
        st["k"][layer, start:start + n] = k_rows
        st["v"][layer, start:start + n] = v_rows
        st["written"] = max(st["written"], start + n)

    def write_all(self, seq, start, k_by_layer, v_by_layer):
        for layer in range(self.n_layers):
            self.write(seq, layer, start, k_by_layer[layer], v_by_layer[layer])

    def compact_accepted(self, seq, start, k_by_layer, v_by_layer):
        self.write_all(seq, start, k_by_layer, v_by_layer)

    def gather(self, seq, layer, n):
        st = self._state(seq)
        if n > st["written"]:
            raise CacheError(f"gather {n} rows but only {st['written']} written")
        return st["k"][layer, :n].copy(), st["v"][layer, :n].copy()

    def rewind(self, seq, new_len):
        st = self._state(seq)
        if new_len > st["written"]:
            raise CacheError("rewind past written length")
        st["written"] = new_len
        st["length"] = new_len

    def release(self, seq, keys=()):
        del self._seqs[seq]


@dataclass
class HiddenTape:
    """Per-sequence hidden states, one row per committed token.

    Row i holds the base hidden state the draft fuses with committed token
    i: the hidden of position i-1, except row 0 which fuses token 0 with
    its own hidden. Under prefix reuse the leading rows were never
    computed; ``offset`` marks the first one that exists.
    """

    dim: int
    offset: int = 0
    _rows: list = field(default_factory=list)

    def __len__(self):
        return self.offset + len(self._rows)

    def append_rows(self, rows):
        for r in np.atleast_2d(np.asarray(rows, dtype=DTYPE)):
            if r.shape != (self.dim,):
                raise CacheError(f"hidden row shape {r.shape} vs dim {self.dim}")
            self._rows.append(r.copy())

    def get(self, i):
        if i < self.offset:
            raise CacheError(f"hidden row {i} was discarded by prefix reuse")
        if i >= len(self):
            raise CacheError(f"hidden row {i} beyond tape length {len(self)}")
        return self._rows[i - self.offset]

    def last(self):
        if not self._rows:
            raise CacheError("empty hidden tape")
        return self._rows[-1]

    def slice(self, start, stop):
        """Rows start..stop-1 as a matrix."""
        return np.stack([self.get(i) for i in range(start, stop)])

    def truncate(self, n):
        if n < self.offset:
            raise CacheError("cannot truncate into discarded rows")
        del self._rows[n - self.offset:]
