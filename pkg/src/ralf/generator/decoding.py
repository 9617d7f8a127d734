"""Constrained autoregressive sampling with a KV-cached numpy decoder.

Each step masks the logits twice: by the token grammar (which slot class may
come next) and by :func:`restrict_logits` for the active task, then draws with
top-k sampling.

Relationship pruning works per element. When the decoder is about to emit a
geometry token of element ``e`` it builds three boolean bin matrices over
``(x, w)``, ``(y, h)`` and ``(w, h)`` holding the assignments of ``e`` that
satisfy every relation with already generated elements exactly, and every
relation with later elements for at least one placement of that element. A
candidate bin survives when some completion of ``e`` stays inside all three
matrices. The predicates are evaluated on bin centers with the same
floating-point expressions as :func:`ralf.tasks.relation_holds`, so a pruned
layout always passes the post-hoc checker.

Interactions among elements that are all still ungenerated are not looked
ahead, so a sample can reach a step where nothing is allowed. That sample is
re-drawn (see :func:`generate_batch`); if every attempt dead-ends the error
names the step and the constraint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import Layout
from ..numerics import EmptyDecodingSpace, topk_sample_batch
from ..tasks import AREA_RTOL, EDGE_ATOL, ConstraintSpec, TaskKind, _edges, refinement_window
from ..tokenizer import BOS, EOS, Vocabulary, detokenize, layout_bins, quantize

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class SamplingConfig:
    k: int = 5
    temperature: float = 1.0


# -- grammar -----------------------------------------------------------------------

def grammar_mask(position: int, vocab: Vocabulary, t_max: int) -> np.ndarray:
    """Tokens the grammar admits at content ``position`` (>= 1)."""
    allowed = np.zeros(vocab.size, dtype=bool)
    slot = (position - 1) % 5
    element = (position - 1) // 5
    if slot == 0:
        allowed[EOS] = True
        if element < t_max:
            allowed[vocab.cat_slice()] = True
    else:
        allowed[vocab.geo_slice()] = True
    return allowed


# -- relationship feasibility ---------------------------------------------------------

def bin_centers(B: int) -> np.ndarray:
    return (np.arange(B, dtype=np.float64) + 0.5) / B


class RelationGrid:
    """Precomputed bin-center edge grids shared by every feasibility query."""

    def __init__(self, B: int):
        self.B = B
        v = bin_centers(B)
        self.v = v
        self.lo = v[:, None] - v[None, :] / 2  # left/top edge over (center, size)
        self.hi = v[:, None] + v[None, :] / 2  # right/bottom edge
        self.area = v[:, None] * v[None, :]  # over (w, h)
        self.lo_min, self.lo_max = self.lo.min(), self.lo.max()
        self.hi_min, self.hi_max = self.hi.min(), self.hi.max()
        self.area_min, self.area_max = self.area.min(), self.area.max()


def _size_ok(rel: str, area_a, area_b) -> np.ndarray:
    tol = AREA_RTOL * np.maximum(area_a, area_b)
    if rel == "smaller":
        return area_a < area_b - tol
    if rel == "larger":
        return area_a > area_b + tol
    return np.abs(area_a - area_b) <= tol


def element_feasibility(e: int, atoms, known: list[tuple[float, float, float, float]], grid: RelationGrid):
    """Boolean ``(x, w)``, ``(y, h)`` and ``(w, h)`` matrices for element ``e``.

    ``known`` holds the boxes of elements ``0..len(known)-1``; any other
    index is treated as not yet generated. Returns None when no relation
    mentions ``e``.
    """
    B = grid.B
    X = np.ones((B, B), dtype=bool)
    Y = np.ones((B, B), dtype=bool)
    S = np.ones((B, B), dtype=bool)
    touched = False
    lo, hi, area = grid.lo, grid.hi, grid.area
    for i, rel, j in atoms:
        if e not in (i, j):
            continue
        e_first = i == e
        other = j if e_first else i
        touched = True
        if other < len(known):
            ol, ot, orr, ob = _edges(known[other])
            oarea = known[other][2] * known[other][3]
            if rel == "overlap":
                X &= (np.minimum(hi, orr) - np.maximum(lo, ol)) > 0.0
                Y &= (np.minimum(hi, ob) - np.maximum(lo, ot)) > 0.0
            elif rel in ("smaller", "larger", "equal"):
                S &= _size_ok(rel, area, oarea) if e_first else _size_ok(rel, oarea, area)
            elif rel == "above":
                Y &= (hi <= ot + EDGE_ATOL) if e_first else (ob <= lo + EDGE_ATOL)
            elif rel == "below":
                Y &= (ob <= lo + EDGE_ATOL) if e_first else (hi <= ot + EDGE_ATOL)
            elif rel == "left":
                X &= (hi <= ol + EDGE_ATOL) if e_first else (orr <= lo + EDGE_ATOL)
            elif rel == "right":
                X &= (orr <= lo + EDGE_ATOL) if e_first else (hi <= ol + EDGE_ATOL)
        else:
            # best case over every placement of the later element; the
            # predicates are monotone in its edge or area
            if rel in ("overlap", "equal"):
                continue  # the later element can copy this one
            if rel == "smaller":
                S &= _size_ok(rel, area, grid.area_max) if e_first else _size_ok(rel, grid.area_min, area)
            elif rel == "larger":
                S &= _size_ok(rel, area, grid.area_min) if e_first else _size_ok(rel, grid.area_max, area)
            elif rel == "above":
                Y &= (hi <= grid.lo_max + EDGE_ATOL) if e_first else (grid.hi_min <= lo + EDGE_ATOL)
            elif rel == "below":
                Y &= (grid.hi_min <= lo + EDGE_ATOL) if e_first else (hi <= grid.lo_max + EDGE_ATOL)
            elif rel == "left":
                X &= (hi <= grid.lo_max + EDGE_ATOL) if e_first else (grid.hi_min <= lo + EDGE_ATOL)
            elif rel == "right":
                X &= (grid.hi_min <= lo + EDGE_ATOL) if e_first else (hi <= grid.lo_max + EDGE_ATOL)
    return (X, Y, S) if touched else None


# bound columns per element
_L, _T, _R, _BOT, _CX, _CY, _W, _H, _A = range(9)
_AXES = ((_L, _R, _CX, _W), (_T, _BOT, _CY, _H))
_SLOT_COLS = (_CX, _CY, _W, _H)
PROPAGATION_ROUNDS = 30


def _le(lo, hi, p, q, tol):
    """Tighten bounds for ``value[p] <= value[q] + tol``; p, q are (element, column)."""
    hi[:, p[0], p[1]] = np.minimum(hi[:, p[0], p[1]], hi[:, q[0], q[1]] + tol)
    lo[:, q[0], q[1]] = np.maximum(lo[:, q[0], q[1]], lo[:, p[0], p[1]] - tol)


def _link(lo, hi):
    """Tighten edges, center, size and area of every element against each other."""
    with np.errstate(divide="ignore", invalid="ignore"):
        _link_unchecked(lo, hi)


def _link_unchecked(lo, hi):
    for l, r, c, s in _AXES:
        lo[..., l] = np.maximum(lo[..., l], lo[..., c] - hi[..., s] / 2)
        hi[..., l] = np.minimum(hi[..., l], hi[..., c] - lo[..., s] / 2)
        lo[..., r] = np.maximum(lo[..., r], lo[..., c] + lo[..., s] / 2)
        hi[..., r] = np.minimum(hi[..., r], hi[..., c] + hi[..., s] / 2)
        lo[..., s] = np.maximum(lo[..., s], lo[..., r] - hi[..., l])
        hi[..., s] = np.minimum(hi[..., s], hi[..., r] - lo[..., l])
        lo[..., c] = np.maximum(lo[..., c], (lo[..., l] + lo[..., r]) / 2)
        hi[..., c] = np.minimum(hi[..., c], (hi[..., l] + hi[..., r]) / 2)
    lo[..., _A] = np.maximum(lo[..., _A], lo[..., _W] * lo[..., _H])
    hi[..., _A] = np.minimum(hi[..., _A], hi[..., _W] * hi[..., _H])
    lo[..., _W] = np.maximum(lo[..., _W], lo[..., _A] / hi[..., _H])
    hi[..., _W] = np.minimum(hi[..., _W], hi[..., _A] / lo[..., _H])
    lo[..., _H] = np.maximum(lo[..., _H], lo[..., _A] / hi[..., _W])
    hi[..., _H] = np.minimum(hi[..., _H], hi[..., _A] / lo[..., _W])


def propagation_feasible(n: int, atoms, known, e: int, partial: list[int], slot: int, grid: RelationGrid) -> np.ndarray:
    """Candidate bins of attribute ``slot`` of element ``e`` that survive interval propagation.

    Every element's left, top, right, bottom, center, size and area get an
    interval; generated elements are points and the candidate fixes one more
    value. Relations are tightened in their non-strict, tolerance-widened
    form, so the test is a relaxation: it never removes a bin that has a
    satisfying completion, but it sees chains through later elements that
    the per-relation check misses.
    """
    v = grid.v
    cand = len(v)
    lo = np.empty((cand, n, 9))
    hi = np.empty((cand, n, 9))
    lo[..., [_L, _T]], hi[..., [_L, _T]] = grid.lo_min, grid.lo_max
    lo[..., [_R, _BOT]], hi[..., [_R, _BOT]] = grid.hi_min, grid.hi_max
    lo[..., [_CX, _CY, _W, _H]], hi[..., [_CX, _CY, _W, _H]] = v[0], v[-1]
    lo[..., _A], hi[..., _A] = grid.area_min, grid.area_max
    for k, box in enumerate(known):
        left, top, right, bottom = _edges(box)
        lo[:, k] = hi[:, k] = (left, top, right, bottom, box[0], box[1], box[2], box[3], box[2] * box[3])
    for a, b in enumerate(partial):
        lo[:, e, _SLOT_COLS[a]] = hi[:, e, _SLOT_COLS[a]] = v[b]
    lo[:, e, _SLOT_COLS[slot - 1]] = hi[:, e, _SLOT_COLS[slot - 1]] = v
    area_tol = AREA_RTOL * grid.area_max
    for _ in range(PROPAGATION_ROUNDS):
        before = (lo.copy(), hi.copy())
        _link(lo, hi)
        for i, rel, j in atoms:
            if rel == "above":
                _le(lo, hi, (i, _BOT), (j, _T), EDGE_ATOL)
            elif rel == "below":
                _le(lo, hi, (j, _BOT), (i, _T), EDGE_ATOL)
            elif rel == "left":
                _le(lo, hi, (i, _R), (j, _L), EDGE_ATOL)
            elif rel == "right":
                _le(lo, hi, (j, _R), (i, _L), EDGE_ATOL)
            elif rel == "overlap":
                for first, second in ((i, j), (j, i)):
                    _le(lo, hi, (first, _L), (second, _R), EDGE_ATOL)
                    _le(lo, hi, (first, _T), (second, _BOT), EDGE_ATOL)
            elif rel == "smaller":
                _le(lo, hi, (i, _A), (j, _A), area_tol)
            elif rel == "larger":
                _le(lo, hi, (j, _A), (i, _A), area_tol)
            else:
                _le(lo, hi, (i, _A), (j, _A), area_tol)
                _le(lo, hi, (j, _A), (i, _A), area_tol)
        if np.array_equal(before[0], lo) and np.array_equal(before[1], hi):
            break
    return np.all(lo <= hi + EDGE_ATOL, axis=(1, 2))


def feasible_bins(slot: int, partial: list[int], X: np.ndarray, Y: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Bins of attribute ``slot`` (1=x .. 4=h) that admit a full completion.

    ``partial`` lists the bins already chosen for this element's earlier
    geometry attributes.
    """
    if slot == 1:
        h_any = Y.any(axis=0)
        w_ok = (S & h_any[None, :]).any(axis=1)
        return (X & w_ok[None, :]).any(axis=1)
    if slot == 2:
        w_set = X[partial[0]]
        h_ok = (S & w_set[:, None]).any(axis=0)
        return (Y & h_ok[None, :]).any(axis=1)
    if slot == 3:
        h_set = Y[partial[1]]
        return X[partial[0]] & (S & h_set[None, :]).any(axis=1)
    return Y[partial[1]] & S[partial[2]]


# -- per-sample restriction state --------------------------------------------------------

class DecodeState:
    """Tokens emitted so far for one sample plus its constraint bookkeeping."""

    def __init__(self, spec: ConstraintSpec, vocab: Vocabulary, t_max: int, grid: RelationGrid | None = None):
        self.spec = spec
        self.vocab = vocab
        self.t_max = t_max
        self.tokens = [BOS]
        self.done = False
        kind = spec.kind
        B = vocab.B
        self.forced_cats = None
        self.forced_bins = None  # (n, 4) with -1 for free attributes
        self.window = None
        self.n_fixed = spec.n_elements
        if kind in (TaskKind.C_TO_SP, TaskKind.CS_TO_P, TaskKind.RELATIONSHIP):
            self.forced_cats = list(spec.categories)
        if kind is TaskKind.CS_TO_P:
            fb = -np.ones((len(spec.categories), 4), dtype=np.int64)
            if spec.sizes:
                fb[:, 2:] = quantize(np.array(spec.sizes, dtype=np.float64).reshape(-1, 2), B)
            self.forced_bins = fb
        if kind is TaskKind.COMPLETION:
            self.forced_cats = spec.partial.categories
            self.forced_bins = layout_bins(spec.partial, B)
        if kind is TaskKind.REFINEMENT:
            self.forced_cats = spec.noisy.categories
            self.window = (layout_bins(spec.noisy, B), refinement_window(B))
        self.atoms = [a for r in spec.relations for a in r.atoms()] if kind is TaskKind.RELATIONSHIP else []
        self.grid = grid if grid is not None or not self.atoms else RelationGrid(B)
        self._feas_cache: tuple[int, object] | None = None

    @property
    def position(self) -> int:
        return len(self.tokens)

    def describe(self) -> str:
        kind = self.spec.kind.value
        if self.atoms:
            e = (self.position - 1) // 5
            rels = [f"{r}({i},{j})" for i, r, j in self.atoms if e in (i, j)]
            return f"{kind} relations {rels}"
        return kind

    def known_boxes(self, n: int) -> list[tuple[float, float, float, float]]:
        out = []
        for e in range(n):
            toks = self.tokens[1 + 5 * e + 1 : 1 + 5 * e + 5]
            out.append(tuple((self.vocab.token_to_bin(t) + 0.5) / self.vocab.B for t in toks))
        return out

    def allowed(self) -> np.ndarray:
        """Grammar mask intersected with the task restriction."""
        pos = self.position
        vocab = self.vocab
        mask = grammar_mask(pos, vocab, self.t_max)
        slot = (pos - 1) % 5
        e = (pos - 1) // 5
        restrict = np.ones(vocab.size, dtype=bool)
        if slot == 0:
            if self.forced_cats is not None and e < len(self.forced_cats):
                restrict[:] = False
                restrict[vocab.cat_token(self.forced_cats[e])] = True
            elif self.n_fixed is not None and e >= self.n_fixed:
                restrict[:] = False
                restrict[EOS] = True
        else:
            a = slot - 1
            geo = np.zeros(vocab.size, dtype=bool)
            if self.forced_bins is not None and e < len(self.forced_bins) and self.forced_bins[e, a] >= 0:
                restrict[:] = False
                restrict[vocab.geo_token(int(self.forced_bins[e, a]))] = True
            elif self.window is not None and e < len(self.window[0]):
                centre, delta = int(self.window[0][e, a]), self.window[1]
                lo, hi = max(0, centre - delta), min(vocab.B - 1, centre + delta)
                geo[vocab.geo_offset + lo : vocab.geo_offset + hi + 1] = True
                restrict = geo
            elif self.atoms:
                feas = self._feasibility(e)
                if feas is not None:
                    partial = [vocab.token_to_bin(t) for t in self.tokens[1 + 5 * e + 1 : pos]]
                    ok = feasible_bins(slot, partial, *feas)
                    if ok.any():
                        ok &= propagation_feasible(len(self.forced_cats), self.atoms, self.known_boxes(e), e, partial, slot, self.grid)
                    if slot == 4 and ok.any():
                        ok = self._later_elements_placeable(e, partial, ok)
                    geo[vocab.geo_offset : vocab.geo_offset + vocab.B] = ok
                    restrict = geo
        return mask & restrict

    def _feasibility(self, e: int):
        if self._feas_cache is None or self._feas_cache[0] != e:
            self._feas_cache = (e, element_feasibility(e, self.atoms, self.known_boxes(e), self.grid))
        return self._feas_cache[1]

    def _later_elements_placeable(self, e: int, partial: list[int], ok: np.ndarray) -> np.ndarray:
        """The heights in ``ok`` after which every later related element
        still has an exact placement against the generated boxes."""
        v = self.grid.v
        ok = ok.copy()
        known = self.known_boxes(e)
        later = sorted({k for i, _, j in self.atoms for k in (i, j) if k > e})
        for h in np.flatnonzero(ok):
            box = (v[partial[0]], v[partial[1]], v[partial[2]], v[h])
            for f in later:
                feas = element_feasibility(f, self.atoms, known + [box], self.grid)
                if feas is not None and not feasible_bins(1, [], *feas).any():
                    ok[h] = False
                    break
        return ok

    def push(self, token: int) -> None:
        self.tokens.append(int(token))
        if token == EOS:
            self.done = True


def restrict_logits(state: DecodeState, logits: np.ndarray) -> np.ndarray:
    """Set every token the grammar or the active constraint rules out to -inf."""
    allowed = state.allowed()
    if not allowed.any():
        raise EmptyDecodingSpace(f"step {state.position}: no token satisfies {state.describe()}")
    return np.where(allowed, logits, -np.inf)


# -- numpy inference path ---------------------------------------------------------------

def _ln(x, ln):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + ln.eps)) * ln.gamma.data + ln.beta.data


def _lin(x, lin):
    out = x @ lin.weight.data
    return out + lin.bias.data if lin.bias is not None else out


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * (x * x) * x)))


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


class IncrementalDecoder:
    """Eval-mode decoder stepping one token at a time with cached keys/values."""

    def __init__(self, model, memory: np.ndarray, memory_valid: np.ndarray):
        self.model = model
        cfg = model.cfg
        self.heads = cfg.heads
        self.dh = cfg.d // cfg.heads
        n, m, d = memory.shape
        self.n = n
        self.mem_bias = np.where(memory_valid, 0.0, -1e9).astype(memory.dtype)[:, None, None, :]
        self.mem_kv = []
        for layer in model.decoder:
            ca = layer.cross_attn
            k = _lin(memory, ca.k).reshape(n, m, self.heads, self.dh).transpose(0, 2, 3, 1)
            v = _lin(memory, ca.v).reshape(n, m, self.heads, self.dh).transpose(0, 2, 1, 3)
            self.mem_kv.append((k, v))
        L = cfg.max_len
        self.cache = [
            (np.zeros((n, self.heads, self.dh, L), memory.dtype), np.zeros((n, self.heads, L, self.dh), memory.dtype))
            for _ in model.decoder
        ]
        self.scale = 1.0 / math.sqrt(self.dh)
        self.t = 0

    def _heads(self, x):
        return x.reshape(self.n, self.heads, 1, self.dh)

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed tokens at the next position; returns (n, V) logits."""
        model = self.model
        t = self.t
        if t >= model.cfg.max_len:
            raise ValueError("decoder exceeded the maximum sequence length")
        x = model.tok_emb.weight.data[tokens] + model.pos_emb.weight.data[t]
        for layer, (kc, vc), (mk, mv) in zip(model.decoder, self.cache, self.mem_kv):
            sa = layer.self_attn
            h = _ln(x, layer.ln1)
            q = self._heads(_lin(h, sa.q))
            kc[:, :, :, t] = _lin(h, sa.k).reshape(self.n, self.heads, self.dh)
            vc[:, :, t, :] = _lin(h, sa.v).reshape(self.n, self.heads, self.dh)
            w = _softmax((q @ kc[:, :, :, : t + 1]) * self.scale)
            x = x + _lin((w @ vc[:, :, : t + 1]).reshape(self.n, -1), sa.o)
            ca = layer.cross_attn
            q = self._heads(_lin(_ln(x, layer.ln2), ca.q))
            w = _softmax((q @ mk) * self.scale + self.mem_bias)
            x = x + _lin((w @ mv).reshape(self.n, -1), ca.o)
            h = _ln(x, layer.ln3)
            x = x + _lin(_gelu(_lin(h, layer.ff.fc1)), layer.ff.fc2)
        self.t += 1
        return _lin(_ln(x, model.norm), model.head)


# -- sampling loops ------------------------------------------------------------------------

def sample_tokens(model, memory: np.ndarray, memory_valid: np.ndarray, specs, rng: np.random.Generator, sampling: SamplingConfig = SamplingConfig()):
    """Run the masked sampling loop for one batch.

    Returns ``(token lists, failures)`` where ``failures[i]`` is None or the
    message of the dead end sample ``i`` ran into.
    """
    cfg = model.cfg
    vocab = cfg.vocab
    grid = RelationGrid(cfg.B) if any(s.kind is TaskKind.RELATIONSHIP for s in specs) else None
    states = [DecodeState(s, vocab, cfg.max_T, grid) for s in specs]
    failures: list[str | None] = [None] * len(states)
    dec = IncrementalDecoder(model, memory, memory_valid)
    n = len(states)
    prev = np.full(n, BOS, dtype=np.int64)
    for _ in range(cfg.max_len - 1):
        logits = dec.step(prev).astype(np.float64)
        u = rng.random(n)
        active = [i for i, s in enumerate(states) if not s.done and failures[i] is None]
        if not active:
            break
        masked = np.full_like(logits, -np.inf)
        live = []
        for i in active:
            try:
                masked[i] = restrict_logits(states[i], logits[i])
                live.append(i)
            except EmptyDecodingSpace as exc:
                failures[i] = str(exc)
        if live:
            picks = topk_sample_batch(masked[live], sampling.k, sampling.temperature, u=u[live])
            for i, tok in zip(live, picks):
                states[i].push(int(tok))
                prev[i] = tok
    return [s.tokens for s in states], failures


def generate_batch(model, memory: np.ndarray, memory_valid: np.ndarray, specs, rng: np.random.Generator, sampling: SamplingConfig = SamplingConfig(), max_attempts: int = 50) -> list[Layout]:
    """Sample one layout per row of ``memory``.

    Samples that hit a dead end are re-drawn together in a follow-up pass;
    after ``max_attempts`` passes the last dead-end message is raised.
    """
    specs = list(specs)
    out: list[Layout | None] = [None] * len(specs)
    todo = np.arange(len(specs))
    last_error = None
    for _ in range(max_attempts):
        tokens, failures = sample_tokens(model, memory[todo], memory_valid[todo], [specs[i] for i in todo], rng, sampling)
        retry = []
        for local, idx in enumerate(todo):
            if failures[local] is not None:
                retry.append(idx)
                last_error = failures[local]
            else:
                out[idx] = detokenize(tokens[local], model.cfg.vocab)
        if not retry:
            return out
        todo = np.array(retry)
    raise EmptyDecodingSpace(f"{last_error} (after {max_attempts} attempts)")
