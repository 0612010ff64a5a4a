"""Target-distribution shaping, tree-draft verification, and guided masks.

Multi-round speculative sampling (mss_verify) walks a drafted tree,
accepting each child with probability min(1, p/q) against a residual
target distribution and emitting exactly one extra token per round, so
every round commits at least one token and, at temperature 0, the output
equals greedy decoding for any draft.

Randomness is counter-based: a Philox generator keyed by (seed, step)
yields the full (padded_batch, row_width) matrix every time, and row r
depends only on r, never on how many rows were generated. Callers take
the rows they own; simulated world size changes padding only.
"""

from dataclasses import dataclass, field

import numpy as np

from .drafttree import TreeSpec
from .numcore import DTYPE, softmax_lse


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0
    simulated_world_size: int = 1

    def __post_init__(self):
        if self.temperature < 0:
            raise SamplingError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise SamplingError("top_p must be in (0, 1]")
        if self.simulated_world_size < 1:
            raise SamplingError("simulated_world_size must be >= 1")


def check_dist(dist):
    d = np.asarray(dist, dtype=DTYPE)
    if d.ndim != 1:
        raise SamplingError(f"distribution must be 1-D, got {d.shape}")
    if (d < 0).any() or abs(float(d.sum()) - 1.0) > 1e-9:
        raise SamplingError("distribution entries must be >= 0 and sum to 1")
    return d


def _desc_order(dist):
    # probability descending, token index ascending on ties
    return np.lexsort((np.arange(dist.shape[0]), -dist))


def top_p_mask(dist, p):
    """Keep the smallest high-probability prefix with cumulative mass >= p.

    Ties break toward lower token indices; the rest is zeroed and the kept
    mass renormalized. p=1 keeps the full support.
    """
    d = check_dist(dist)
    if not 0 < p <= 1:
        raise SamplingError("top_p must be in (0, 1]")
    order = _desc_order(d)
    csum = np.cumsum(d[order])
    cutoff = min(int(np.searchsorted(csum, p - 1e-12)), d.shape[0] - 1)
    keep = order[:cutoff + 1]
    out = np.zeros_like(d)
    out[keep] = d[keep]
    return out / out.sum()


def greedy_expand(dist, k):
    """Top-k token indices by probability, lowest index on ties.

    Draft distributions skip the top-p mask in greedy mode; validation
    still applies it to target distributions.
    """
    d = check_dist(dist)
    if not 1 <= k <= d.shape[0]:
        raise SamplingError(f"k={k} out of range for vocab {d.shape[0]}")
    return [int(t) for t in _desc_order(d)[:k]]


def target_dist(logits_row, temperature, top_p, allowed=None):
    """Logits row -> sampling distribution: mask, temperature, top-p.

    The allowed mask (guided decoding) hits the logits first so that
    temperature 0 picks the best ALLOWED token rather than dying on a
    globally-best disallowed one.
    """
    row = np.asarray(logits_row, dtype=DTYPE)
    if allowed is not None:
        if not allowed.any():
            raise SamplingError("no token allowed (dead FSM state)")
        row = np.where(allowed, row, -np.inf)
    d = softmax_lse(row[None, :], temperature).probs[0]
    if top_p < 1:
        d = top_p_mask(d, top_p)
    return d


def sample_from(dist, u):
    """Inverse-CDF draw: smallest token whose cumulative mass exceeds u."""
    d = check_dist(dist)
    idx = int(np.searchsorted(np.cumsum(d), u, side="right"))
    return min(idx, d.shape[0] - 1)


def rank_sliced_uniforms(seed, step, padded_batch, row_width):
    """Full uniform matrix for one sampling step, shared by every rank.

    Row r of the result is a pure function of (seed, step, row_width, r):
    generating a taller matrix (bigger padded batch) never changes earlier
    rows, so per-row values are invariant to the simulated world size.
    """
    if padded_batch < 1 or row_width < 0:
        raise SamplingError("padded_batch must be >= 1 and row_width >= 0")
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(step & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.random((padded_batch, row_width), dtype=np.float64)


@dataclass
class DraftResult:
    """A drafted tree: token and draft distribution per node.

    node_dists[i] is the draft distribution at node i's parent context,
    i.e. the q that proposed node_tokens[i]; siblings drafted from a
    residualized q carry their own residual.
    """

    tree: TreeSpec
    node_tokens: tuple
    node_dists: tuple


@dataclass
class MssResult:
    accepted_path: list
    next_token: int
    residual: np.ndarray  # distribution the extra token was drawn from
    uniforms_used: int


def mss_verify(draft, target_dists, uniforms, mode="greedy_children"):
    """Walk the draft tree, accepting children against residual targets.

    target_dists[0] is the target distribution at the root context and
    target_dists[1+i] the one at node i's context (both already shaped by
    temperature/top-p/FSM). At each node, children are examined in
    priority order: child with token t and draft dist q is accepted iff
    u < min(1, p(t)/q(t)); a rejection updates p <- norm(max(p - q, 0)).
    Acceptance descends and resets p. When nothing is accepted (or at a
    leaf) one extra token is drawn from the residual, so each round yields
    len(accepted_path) + 1 tokens. Uniform consumption is node-major in
    walk order, one value per candidate examined plus one for the draw.
    """
    if mode not in ("stochastic", "greedy_children"):
        raise SamplingError(f"unknown mss mode {mode!r}")
    tree = draft.tree
    if len(target_dists) != tree.n_nodes + 1:
        raise SamplingError("need one target dist per node parent incl. root")
    dists = [check_dist(d) for d in target_dists]
    used = 0
    cur = -1  # ROOT
    p = dists[0]
    anchor = p  # fallback when the residual underflows to zero
    path = []
    while True:
        kids = tree.children(cur)
        descended = False
        for c in kids:
            t = draft.node_tokens[c]
            q = draft.node_dists[c]
            if used >= len(uniforms):
                raise SamplingError("uniform stream exhausted mid-walk")
            u = uniforms[used]
            used += 1
            qt, pt = float(q[t]), float(p[t])
            accept = (pt > 0.0) if qt <= 0.0 else (u < min(1.0, pt / qt))
            if accept:
                path.append(c)
                p = dists[1 + c]
                anchor = p
                cur = c
                descended = True
                break
            residual = np.maximum(p - q, 0.0)
            mass = float(residual.sum())
            # q >= p pointwise only via rounding; fall back to the anchor
            p = anchor if mass <= 1e-12 else residual / mass
        if not descended:
            break
    if used >= len(uniforms):
        raise SamplingError("uniform stream exhausted before bonus draw")
    token = sample_from(p, uniforms[used])
    used += 1
    return MssResult(path, token, p, used)


# ---------------------------------------------------------------------------
# guided decoding FSM
# ---------------------------------------------------------------------------

@dataclass
class GuidedFsm:
    """Deterministic token-level automaton for guided decoding."""

    n_states: int
    transitions: dict  # (state, token) -> state
    accepting: frozenset
    start: int = 0
    _allowed: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for (s, _t), nxt in self.transitions.items():
            if not (0 <= s < self.n_states and 0 <= nxt < self.n_states):
                raise SamplingError("transition references unknown state")
        for (s, t) in self.transitions:
            self._allowed.setdefault(s, []).append(t)
        for s in self._allowed:
            self._allowed[s].sort()
        # every reachable non-accepting state must allow a continuation
        seen, frontier = {self.start}, [self.start]
        while frontier:
            s = frontier.pop()
            if s not in self._allowed and s not in self.accepting:
                raise SamplingError(f"state {s} is a reachable dead end")
            for t in self._allowed.get(s, ()):
                nxt = self.transitions[(s, t)]
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)

    def allowed_tokens(self, state):
        return self._allowed.get(state, [])

    def allowed_mask(self, state, vocab):
        mask = np.zeros(vocab, dtype=bool)
        mask[self.allowed_tokens(state)] = True
        return mask


def fsm_advance(fsm, state, token):
    try:
        return fsm.transitions[(state, token)]
    except KeyError:
        raise SamplingError(f"token {token} rejected in state {state}") from None


def fsm_apply(fsm, state, dist):
    """Zero the probabilities of disallowed tokens and renormalize."""
    d = check_dist(dist)
    allowed = fsm.allowed_mask(state, d.shape[0])
    if not allowed.any():
        raise SamplingError(f"dead FSM state {state}: no token allowed")
    out = np.where(allowed, d, 0.0)
    mass = float(out.sum())
    if mass <= 0.0:
        raise SamplingError(f"state {state}: allowed tokens carry zero mass")
    return out / mass


def parse_fsm(text):
    """Build a GuidedFsm from the triple format.

    Lines: ``start: S``, ``accept: S1 S2 ...``, and one ``STATE TOKEN
    NEXT_STATE`` triple per remaining line. ``#`` starts a comment.
    """
    start = 0
    accepting = set()
    transitions = {}
    max_state = 0
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("start:"):
            start = int(line[6:])
            max_state = max(max_state, start)
        elif line.startswith("accept:"):
            states = [int(tok) for tok in line[7:].split()]
            accepting.update(states)
            if states:
                max_state = max(max_state, *states)
        else:
            parts = line.split()
            if len(parts) != 3:
                raise SamplingError(f"bad FSM line: {raw!r}")
            s, t, nxt = (int(x) for x in parts)
            if (s, t) in transitions:
                raise SamplingError(f"duplicate transition for state {s}, token {t}")
            transitions[(s, t)] = nxt
            max_state = max(max_state, s, nxt)
    return GuidedFsm(max_state + 1, transitions, frozenset(accepting), start)
