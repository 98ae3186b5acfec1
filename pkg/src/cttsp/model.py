"""The CTTSP network: message encoders, gated memory updaters, dual-perspective
aggregation and the fused prediction layer.

All building blocks take a leading batch axis. Memories enter as plain
arrays (they are never trainable); gradients reach the parameters only
through computations of the current batch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import InteractionEvent
from .memory import HistoryIndex, MemoryBank
from .numerics import Tensor, ops


@dataclass
class ModelConfig:
    dim: int = 64
    dropout: float = 0.2
    lambda_up: float = 0.5
    lambda_cp: float = 0.0
    # Element attention pool is {user} plus the whole set; False drops the element itself.
    element_pool_self: bool = True

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("lambda_up", "lambda_cp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def parameter_shapes(num_elements: int, d: int) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for side in ("user", "element"):
        shapes[f"{side}_query"] = (d, d)
        shapes[f"{side}_key"] = (d, d)
        shapes[f"{side}_value"] = (d, d)
        shapes[f"{side}_msg_proj"] = (d, 2 * d)
        shapes[f"{side}_msg_bias"] = (d,)
        shapes[f"{side}_mem_proj"] = (d, d)
        shapes[f"{side}_mem_bias"] = (d,)
        shapes[f"{side}_msg_gate"] = (d, d)
        shapes[f"{side}_mem_gate"] = (d, d)
    shapes["user_embedding"] = (d,)
    shapes["element_embeddings"] = (num_elements, d)
    shapes["personal_proj"] = (d, d)
    shapes["fcn_weight"] = (d, d)
    shapes["fcn_bias"] = (d,)
    return shapes


def init_parameters(num_elements: int, d: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Embeddings ~ N(0, 1); every other tensor ~ U(-1/sqrt(d), 1/sqrt(d))."""
    bound = 1.0 / math.sqrt(d)
    params = {}
    for name, shape in parameter_shapes(num_elements, d).items():
        if name in ("user_embedding", "element_embeddings"):
            value = rng.standard_normal(shape)
        else:
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


class CTTSP:
    def __init__(self, num_users: int, num_elements: int, config: ModelConfig,
                 params: Optional[dict[str, Tensor]] = None, seed: int = 0):
        self.num_users = num_users
        self.num_elements = num_elements
        self.config = config
        self.params = params if params is not None else init_parameters(
            num_elements, config.dim, np.random.default_rng(seed))
        expected = parameter_shapes(num_elements, config.dim)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                raise ValueError(f"parameter {name} missing or not of shape {shape}")

    @property
    def dim(self) -> int:
        return self.config.dim

    def new_state(self) -> tuple[MemoryBank, HistoryIndex]:
        return MemoryBank(self.num_users, self.num_elements, self.dim), HistoryIndex(self.num_users)

    def parameter_values(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_parameter_values(self, values: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.value = np.array(values[k], dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.config)


# --------------------------------------------------------------------------- encoders

def _linear(x, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = ops.matmul(x, ops.transpose(weight))
    return out if bias is None else ops.add(out, bias)


def encode_user_messages(params: dict[str, Tensor], user_mem: np.ndarray, elem_mem: np.ndarray,
                         mask: np.ndarray, *, dropout: float = 0.0, training: bool = False,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
    """User messages ``c || z_u`` for a batch: ``(B, d)`` and ``(B, L, d)`` memories -> ``(B, 2d)``."""
    B, L, d = elem_mem.shape
    if not np.all(np.asarray(mask, bool).any(axis=-1)):
        raise ValueError("encode_user_messages: empty element set")
    query = _linear(user_mem, params["user_query"])                      # (B, d)
    keys = _linear(elem_mem, params["user_key"])                         # (B, L, d)
    logits = ops.scale(ops.rowdot(keys, ops.reshape(query, (B, 1, d))), 1.0 / math.sqrt(d))
    alpha = ops.softmax_masked(logits, mask)                             # (B, L)
    values = _linear(elem_mem, params["user_value"])
    agg = ops.reshape(ops.matmul(ops.reshape(alpha, (B, 1, L)), values), (B, d))
    agg = ops.dropout(agg, dropout, training, rng)
    return ops.concat([agg, user_mem], axis=-1)


def encode_element_messages(params: dict[str, Tensor], user_mem: np.ndarray, elem_mem: np.ndarray,
                            mask: np.ndarray, *, include_self: bool = True, dropout: float = 0.0,
                            training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Element messages ``c_j || z_j``; each element attends over the user and the set."""
    B, L, d = elem_mem.shape
    mask = np.asarray(mask, bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("encode_element_messages: empty element set")
    pool = np.concatenate([user_mem[:, None, :], elem_mem], axis=1)     # (B, L+1, d)
    pool_mask = np.concatenate([np.ones((B, 1), bool), mask], axis=1)
    attend = np.broadcast_to(pool_mask[:, None, :], (B, L, L + 1)).copy()
    if not include_self:
        attend[:, np.arange(L), np.arange(L) + 1] = False
    query = _linear(elem_mem, params["element_query"])                   # (B, L, d)
    keys = _linear(pool, params["element_key"])                          # (B, L+1, d)
    logits = ops.scale(ops.matmul(query, ops.transpose(keys)), 1.0 / math.sqrt(d))
    alpha = ops.softmax_masked(logits, attend)                           # (B, L, L+1)
    agg = ops.matmul(alpha, _linear(pool, params["element_value"]))      # (B, L, d)
    agg = ops.dropout(agg, dropout, training, rng)
    return ops.concat([agg, elem_mem], axis=-1)


def update_memories(params: dict[str, Tensor], side: str, message: Tensor, prev: np.ndarray) -> Tensor:
    """Gated update ``tanh(g * W_M m + (1 - g) * W_Z z)``.

    ``g = exp(M W_M m) / (exp(M W_M m) + exp(Z W_Z z))`` per dimension,
    evaluated as ``sigmoid(M W_M m - Z W_Z z)``.
    """
    from_msg = _linear(message, params[f"{side}_msg_proj"], params[f"{side}_msg_bias"])
    from_mem = _linear(prev, params[f"{side}_mem_proj"], params[f"{side}_mem_bias"])
    gate = ops.sigmoid(ops.sub(_linear(from_msg, params[f"{side}_msg_gate"]),
                               _linear(from_mem, params[f"{side}_mem_gate"])))
    return ops.tanh(ops.add(from_mem, ops.mul(gate, ops.sub(from_msg, from_mem))))


# --------------------------------------------------------------------------- personalized

def personalized_aggregation(params: dict[str, Tensor], hist: np.ndarray, hist_mask: np.ndarray,
                             lambda_up: float, *, dropout: float = 0.0, training: bool = False,
                             rng: Optional[np.random.Generator] = None) -> tuple[Tensor, np.ndarray]:
    """Dual-perspective aggregation ``H`` of shape ``(B, n, d)`` over each user's history multiset.

    Rows with an empty history aggregate to zeros; the returned flag marks them.
    """
    hist = np.asarray(hist, dtype=np.intp)
    hist_mask = np.asarray(hist_mask, bool)
    B, Hn = hist.shape
    E = params["element_embeddings"]
    empty = ~hist_mask.any(axis=1) if Hn else np.ones(B, bool)
    if Hn == 0:
        return Tensor(np.zeros((B,) + E.shape)), empty
    mask = hist_mask.copy()
    mask[empty, 0] = True  # placeholder entry; its rows are zeroed below
    X = ops.take(E, hist)                                                # (B, H, d)
    weights = None
    if lambda_up > 0.0:
        beta = ops.softmax_masked(ops.leaky_relu(ops.matmul(X, params["user_embedding"])), mask)
        weights = ops.scale(ops.reshape(beta, (B, 1, Hn)), lambda_up)
    if lambda_up < 1.0:
        gamma_logits = ops.leaky_relu(ops.matmul(E, ops.transpose(X)))   # (B, n, H)
        gamma = ops.softmax_masked(gamma_logits, mask[:, None, :])
        gamma = ops.scale(gamma, 1.0 - lambda_up)
        weights = gamma if weights is None else ops.add(weights, gamma)
    if weights.ndim == 3 and weights.shape[1] == 1:
        agg = ops.matmul(weights, X)                                     # (B, 1, d)
        agg = ops.add(agg, Tensor(np.zeros((B, E.shape[0], E.shape[1]))))
    else:
        agg = ops.matmul(weights, X)                                     # (B, n, d)
    if empty.any():
        agg = ops.mul(agg, (~empty).astype(np.float64)[:, None, None])
    agg = ops.dropout(agg, dropout, training, rng)
    return agg, empty


def personalized_scores(params: dict[str, Tensor], agg: Tensor) -> Tensor:
    """``(W_S h_j)^T e_j`` for every element: ``(B, n, d) -> (B, n)``."""
    return ops.rowdot(_linear(agg, params["personal_proj"]), params["element_embeddings"])


def continuous_time_scores(params: dict[str, Tensor], user_new: Tensor, set_new: Tensor,
                           set_idx: np.ndarray, set_mask: np.ndarray, hist_mem: np.ndarray,
                           hist_idx: np.ndarray, hist_mask: np.ndarray, num_elements: int) -> Tensor:
    """Memory dot products scattered to ``(B, n)``; zero where the user has no history.

    Current-set elements use their freshly updated memories; other
    previously interacted elements use an affine projection of their stored
    (gradient-free) memories.
    """
    B, d = user_new.shape
    u = ops.reshape(user_new, (B, 1, d))
    current = ops.rowdot(u, set_new)                                     # (B, L)
    scores = ops.scatter_last(current, set_idx, set_mask, num_elements)
    if hist_idx.shape[1]:
        proj = _linear(hist_mem, params["fcn_weight"], params["fcn_bias"])
        past = ops.rowdot(u, proj)                                       # (B, R)
        scores = ops.add(scores, ops.scatter_last(past, hist_idx, hist_mask, num_elements))
    return scores


def fuse_scores(p_c, p_s, tau: np.ndarray, lambda_cp: float, defined: Optional[np.ndarray] = None) -> Tensor:
    """``sigmoid(tau * lambda_cp * p_c + (1 - tau * lambda_cp) * p_s)``.

    ``defined`` marks where ``p_c`` exists; a positive indicator without a
    continuous-time score is an error.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if defined is not None and np.any((tau > 0) & ~np.asarray(defined, bool)):
        raise ValueError("fuse_scores: continuous-time score missing for an interacted element")
    coef = tau * lambda_cp
    if p_c is None or lambda_cp == 0.0:
        logits = ops.mul(p_s, 1.0 - coef)
    else:
        if defined is not None:
            p_c = ops.where(np.asarray(defined, bool), p_c, 0.0)
        logits = ops.add(ops.mul(p_c, coef), ops.mul(p_s, 1.0 - coef))
    return ops.sigmoid(logits)


# --------------------------------------------------------------------------- passes

@dataclass
class BatchOutput:
    events: list[int]                  # scored event ids, one per row of ``probs``
    probs: Optional[Tensor]            # (B', n)
    tau: Optional[np.ndarray]          # (B', n)
    p_c: Optional[Tensor] = None
    p_s: Optional[Tensor] = None
    all_events: list[int] = field(default_factory=list)


def _pad(rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(r) for r in rows), default=0)
    idx = np.zeros((len(rows), width), dtype=np.intp)
    mask = np.zeros((len(rows), width), dtype=bool)
    for b, r in enumerate(rows):
        idx[b, :len(r)] = r
        mask[b, :len(r)] = True
    return idx, mask


@dataclass
class _ScoreJob:
    user: int
    batch: int                         # batch that updates the event's memories
    ready: int                         # batch after which every historical read is available
    hist_len: int                      # length of the user's history including this event
    sources: list[tuple[int, int]]     # (element, last earlier event touching it or -1)


class ForwardPass:
    """Runs a batch plan over the bank and history, one batch at a time.

    Memory updates follow the plan. Scores follow sequential semantics
    exactly: an event reads each previously interacted element's memory as
    left by the last earlier event in sequence order. When that event sits
    in a later batch, scoring is deferred to that batch and the event's
    encoders are recomputed there from its stored pre-event memories.
    """

    def __init__(self, model: CTTSP, events: Sequence[InteractionEvent], batches: Sequence[Sequence[int]],
                 bank: MemoryBank, history: HistoryIndex, score: Optional[Iterable[int]] = None):
        self.model = model
        self.events = events
        self.batches = [list(b) for b in batches]
        self.bank = bank
        self.history = history
        self.initial_elements = bank.element_memory.copy()
        where = {k: b for b, batch in enumerate(self.batches) for k in batch}
        wanted = set(where) if score is None else set(score) & set(where)

        self.jobs: dict[int, _ScoreJob] = {}
        self.due: dict[int, list[int]] = {}
        self._refs: dict[tuple[int, int], int] = {}
        last_touch: dict[int, int] = {}
        seen: dict[int, dict[int, None]] = {}
        length: dict[int, int] = {}
        for k in sorted(where):
            e = events[k]
            u = e.user
            if u not in seen:
                seen[u] = dict.fromkeys(history.unique(u))
                length[u] = history.length(u)
            length[u] += len(e.elements)
            if k in wanted:
                current = set(e.elements)
                sources = [(j, last_touch.get(j, -1)) for j in seen[u] if j not in current]
                ready = max([where[k]] + [where[s] for _, s in sources if s >= 0])
                self.jobs[k] = _ScoreJob(u, where[k], ready, length[u], sources)
                self.due.setdefault(ready, []).append(k)
                for j, s in sources:
                    if s >= 0:
                        self._refs[(s, j)] = self._refs.get((s, j), 0) + 1
            for j in e.elements:
                last_touch[j] = k
                seen[u].setdefault(j, None)
        self._versions: dict[tuple[int, int], np.ndarray] = {}
        self._stored: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def deferred(self) -> int:
        return sum(1 for job in self.jobs.values() if job.ready > job.batch)

    def _encode(self, user_prev, elem_prev, set_mask, training, rng):
        cfg = self.model.config
        params = self.model.params
        dp = cfg.dropout if training else 0.0
        user_msg = encode_user_messages(params, user_prev, elem_prev, set_mask, dropout=dp, training=training, rng=rng)
        elem_msg = encode_element_messages(params, user_prev, elem_prev, set_mask,
                                           include_self=cfg.element_pool_self, dropout=dp, training=training, rng=rng)
        return (update_memories(params, "user", user_msg, user_prev),
                update_memories(params, "element", elem_msg, elem_prev))

    def run_batch(self, b: int, *, training: bool = False, rng: Optional[np.random.Generator] = None) -> BatchOutput:
        batch = self.batches[b]
        evs = [self.events[k] for k in batch]
        B = len(evs)
        users = np.array([e.user for e in evs], dtype=np.intp)
        if len(set(users.tolist())) != B:
            raise ValueError(f"batch {b}: a user appears twice in one batch")
        set_idx, set_mask = _pad([e.elements for e in evs])
        bb, ll = np.nonzero(set_mask)
        if len(np.unique(set_idx[bb, ll])) != bb.size:
            raise ValueError(f"batch {b}: an element appears twice in one batch")

        user_prev = self.bank.user_memory[users].copy()
        elem_prev = self.bank.element_memory[set_idx] * set_mask[..., None]
        user_new, elem_new = self._encode(user_prev, elem_prev, set_mask, training, rng)

        for r, k in enumerate(batch):
            job = self.jobs.get(k)
            if job is not None and job.ready > b:
                n_el = len(evs[r].elements)
                self._stored[k] = (user_prev[r].copy(), elem_prev[r, :n_el].copy())
            for l, j in enumerate(evs[r].elements):
                if (k, j) in self._refs:
                    self._versions[(k, j)] = elem_new.value[r, l].copy()

        # Writes store plain values; the next batch cannot backpropagate into them.
        times = np.array([e.timestamp for e in evs])
        for e in evs:
            self.history.append(e.user, e.elements, e.timestamp)
        self.bank.write("user", users, user_new.value, times)
        self.bank.write("element", set_idx[bb, ll], elem_new.value[bb, ll], times[bb])

        due = self.due.pop(b, [])
        if not due:
            return BatchOutput([], None, None, all_events=list(batch))
        row_of = {k: r for r, k in enumerate(batch)}
        now = [k for k in due if k in row_of]
        later = [k for k in due if k not in row_of]
        parts = []
        if now:
            sel = np.array([row_of[k] for k in now], dtype=np.intp)
            full = len(now) == B
            parts.append((now, user_new if full else ops.take(user_new, sel),
                          elem_new if full else ops.take(elem_new, sel), set_idx[sel], set_mask[sel]))
        if later:
            l_idx, l_mask = _pad([self.events[k].elements for k in later])
            l_user = np.stack([self._stored[k][0] for k in later])
            l_elem = np.zeros(l_idx.shape + (self.model.dim,))
            for r, k in enumerate(later):
                stored = self._stored.pop(k)[1]
                l_elem[r, :len(stored)] = stored
            u_new, s_new = self._encode(l_user, l_elem, l_mask, training, rng)
            parts.append((later, u_new, s_new, l_idx, l_mask))
        return self._score(b, parts, training, rng)

    def _score(self, b, parts, training, rng) -> BatchOutput:
        model = self.model
        cfg = model.config
        n = model.num_elements
        order = [k for part in parts for k in part[0]]
        jobs = [self.jobs.pop(k) for k in order]
        hist_rows, tau = [], np.zeros((len(order), n))
        for r, job in enumerate(jobs):
            h = self.history.elements(job.user)[:job.hist_len]
            hist_rows.append(h)
            tau[r, h] = 1.0
        hist_idx, hist_mask = _pad(hist_rows)
        dp = cfg.dropout if training else 0.0
        agg, _ = personalized_aggregation(model.params, hist_idx, hist_mask, cfg.lambda_up,
                                          dropout=dp, training=training, rng=rng)
        p_s = personalized_scores(model.params, agg)

        p_c = None
        if cfg.lambda_cp > 0.0:
            pieces, offset = [], 0
            for keys, u_new, s_new, s_idx, s_mask in parts:
                sub = jobs[offset:offset + len(keys)]
                offset += len(keys)
                past_idx, past_mask = _pad([[j for j, _ in job.sources] for job in sub])
                past_mem = np.zeros(past_idx.shape + (model.dim,))
                for r, job in enumerate(sub):
                    for c, (j, s) in enumerate(job.sources):
                        past_mem[r, c] = self.initial_elements[j] if s < 0 else self._versions[(s, j)]
                pieces.append(continuous_time_scores(model.params, u_new, s_new, s_idx, s_mask,
                                                     past_mem, past_idx, past_mask, n))
            p_c = pieces[0] if len(pieces) == 1 else ops.concat(pieces, axis=0)
        for job in jobs:
            for j, s in job.sources:
                if s >= 0:
                    key = (s, j)
                    self._refs[key] -= 1
                    if not self._refs[key]:
                        del self._refs[key]
                        self._versions.pop(key, None)
        probs = fuse_scores(p_c, p_s, tau, cfg.lambda_cp)
        return BatchOutput(order, probs, tau, p_c, p_s, all_events=list(self.batches[b]))

    def __iter__(self):
        for b in range(len(self.batches)):
            yield self.run_batch(b)


def process_batch(model: CTTSP, events: Sequence[InteractionEvent], batch: Sequence[int],
                  bank: MemoryBank, history: HistoryIndex, *, training: bool = False,
                  rng: Optional[np.random.Generator] = None, score: Optional[Iterable[int]] = None) -> BatchOutput:
    """Process one batch of pairwise-disjoint events as a standalone pass."""
    return ForwardPass(model, events, [batch], bank, history, score).run_batch(0, training=training, rng=rng)


def cold_scores(model: CTTSP, history: HistoryIndex, user: Optional[int] = None) -> np.ndarray:
    """Scores for a user without a current event, from the personalized branch only.

    A user with no history gets exactly 0.5 everywhere.
    """
    elems = history.elements(user) if user is not None else []
    idx, mask = _pad([elems])
    agg, _ = personalized_aggregation(model.params, idx, mask, model.config.lambda_up)
    p_s = personalized_scores(model.params, agg)
    return fuse_scores(None, p_s, np.zeros((1, model.num_elements)), model.config.lambda_cp).value[0]
