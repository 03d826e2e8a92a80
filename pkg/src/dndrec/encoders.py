"""Sequence encoders: GRU4Rec, NARM and SR-GNN.

All encoders consume a left-padded id matrix ``[N, T]`` plus an ``embed``
callable (id array -> embedded tensor, where session dropout is applied) and
return the session representation ``s`` of shape ``[N, out_dim]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError
from .tensor import Tensor

ENCODERS = ("gru4rec", "narm", "srgnn")

Embed = Callable[[np.ndarray], Tensor]


def uniform_init(rng: np.random.Generator, shape, fan: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def length_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    """``[N, T]`` float mask of real (non-pad) positions for left-padded rows."""
    lengths = np.asarray(lengths)
    pos = np.arange(width)[None, :]
    return (pos >= width - lengths[:, None]).astype(np.float64)


# ------------------------------------------------------------------------ GRU


def init_gru(rng, in_dim: int, hidden: int, prefix: str = "gru") -> dict[str, Tensor]:
    # gate blocks are stacked [update | reset | candidate] along the last axis
    return {
        f"{prefix}.W": uniform_init(rng, (in_dim, 3 * hidden), hidden),
        f"{prefix}.U": uniform_init(rng, (hidden, 3 * hidden), hidden),
        f"{prefix}.b": uniform_init(rng, (3 * hidden,), hidden),
    }


def gru_cell(gx: Tensor, h: Tensor, U: Tensor, hidden: int) -> Tensor:
    """One update given precomputed input projection ``gx = xW + b``."""
    gh = h @ U
    zr = tn.sigmoid(gx[..., :2 * hidden] + gh[..., :2 * hidden])
    z = zr[..., :hidden]
    r = zr[..., hidden:]
    n = tn.tanh(gx[..., 2 * hidden:] + r * gh[..., 2 * hidden:])
    return n + z * (h - n)


def gru_states(params: dict[str, Tensor], x: Tensor, mask: np.ndarray,
               prefix: str = "gru") -> list[Tensor]:
    """Run the recurrence over ``x [N, T, E]``; masked steps carry the state through."""
    W, U, b = params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"]
    hidden = U.shape[0]
    n, width = mask.shape
    gx_all = x @ W + b
    h = Tensor(np.zeros((n, hidden)))
    states = []
    for t in range(width):
        h_new = gru_cell(gx_all[:, t, :], h, U, hidden)
        m = mask[:, t:t + 1]
        if m.all():
            h = h_new
        elif m.any():
            h = tn.where(m > 0, h_new, h)
        states.append(h)
    return states


def gru_forward(params: dict[str, Tensor], seq: Tensor, length: int | None = None,
                prefix: str = "gru") -> Tensor:
    """States ``[T, D]`` for a single sequence ``[T, E]``."""
    T = seq.shape[0]
    if T < 1:
        raise ContractError("empty sequence")
    length = T if length is None else length
    if not 1 <= length <= T:
        raise ContractError(f"length {length} does not fit a sequence of {T} steps")
    mask = length_mask(np.array([length]), T)
    states = gru_states(params, seq.reshape(1, T, seq.shape[1]), mask, prefix)
    return tn.concat(states, axis=0)


# ------------------------------------------------------------------ attention


def init_attention(rng, dim: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.q": uniform_init(rng, (dim, 1), dim),
        f"{prefix}.c": uniform_init(rng, (dim,), dim),
        f"{prefix}.W1": uniform_init(rng, (dim, dim), dim),
        f"{prefix}.W2": uniform_init(rng, (dim, dim), dim),
    }


def attention(params: dict[str, Tensor], states: Tensor, last: Tensor, mask: np.ndarray,
              prefix: str) -> Tensor:
    """``s = [h_T; sum_t alpha_t h_t]`` with ``alpha_t = q . sigmoid(W1 h_T + W2 h_t + c)``.

    ``states`` is ``[N, T, D]``, ``last`` is ``[N, D]``. The weights are not
    normalised across t. Matrices act on the right (``h @ W``).
    """
    q, c = params[f"{prefix}.q"], params[f"{prefix}.c"]
    W1, W2 = params[f"{prefix}.W1"], params[f"{prefix}.W2"]
    n, _, d = states.shape
    pre = (last @ W1).reshape(n, 1, d) + states @ W2 + c
    alpha = tn.sigmoid(pre) @ q
    h_att = (alpha * mask[:, :, None] * states).sum(axis=1)
    return tn.concat([last, h_att], axis=-1)


def narm_attention(params, states: Tensor, length: int | None = None,
                   prefix: str = "att") -> Tensor:
    """Single-sequence form over ``states [T, D]``; returns ``[2D]``."""
    T, d = states.shape
    length = T if length is None else length
    mask = length_mask(np.array([length]), T)
    seq = states.reshape(1, T, d)
    return attention(params, seq, states[T - 1:T], mask, prefix).reshape(2 * d)


# ---------------------------------------------------------------- session graph


@dataclass
class SessionGraph:
    nodes: list[int]
    a_in: np.ndarray
    a_out: np.ndarray
    alias: list[int]


def build_session_graph(seq) -> SessionGraph:
    """Unweighted directed graph over unique items.

    ``a_out[j, i] = 1/outdeg(i)`` and ``a_in[i, j] = 1/indeg(j)`` for each
    distinct edge ``i -> j``; every non-empty column sums to one.
    """
    seq = [int(x) for x in seq]
    if not seq:
        raise ContractError("empty sequence")
    nodes: list[int] = []
    pos: dict[int, int] = {}
    for item in seq:
        if item not in pos:
            pos[item] = len(nodes)
            nodes.append(item)
    alias = [pos[item] for item in seq]
    n = len(nodes)
    adj = np.zeros((n, n))
    for u, v in zip(alias, alias[1:]):
        adj[u, v] = 1.0
    out_deg = adj.sum(axis=1)
    in_deg = adj.sum(axis=0)
    a_out = np.divide(adj.T, out_deg[None, :], out=np.zeros((n, n)), where=out_deg[None, :] > 0)
    a_in = np.divide(adj, in_deg[None, :], out=np.zeros((n, n)), where=in_deg[None, :] > 0)
    return SessionGraph(nodes, a_in, a_out, alias)


def init_ggnn(rng, dim: int, prefix: str = "ggnn") -> dict[str, Tensor]:
    return {
        f"{prefix}.W_in": uniform_init(rng, (dim, dim), dim),
        f"{prefix}.b_in": uniform_init(rng, (dim,), dim),
        f"{prefix}.W_out": uniform_init(rng, (dim, dim), dim),
        f"{prefix}.b_out": uniform_init(rng, (dim,), dim),
        f"{prefix}.gate.W": uniform_init(rng, (2 * dim, 3 * dim), dim),
        f"{prefix}.gate.U": uniform_init(rng, (dim, 3 * dim), dim),
        f"{prefix}.gate.b": uniform_init(rng, (3 * dim,), dim),
    }


def ggnn_step(params, h: Tensor, a_in: np.ndarray, a_out: np.ndarray,
              prefix: str = "ggnn") -> Tensor:
    """One propagation over batched graphs: ``h [N, n, D]``, adjacency ``[N, n, n]``."""
    d = h.shape[-1]
    m_in = Tensor(a_in) @ (h @ params[f"{prefix}.W_in"] + params[f"{prefix}.b_in"])
    m_out = Tensor(a_out) @ (h @ params[f"{prefix}.W_out"] + params[f"{prefix}.b_out"])
    msg = tn.concat([m_in, m_out], axis=-1)
    gx = msg @ params[f"{prefix}.gate.W"] + params[f"{prefix}.gate.b"]
    return gru_cell(gx, h, params[f"{prefix}.gate.U"], d)


def ggnn_propagate(params, graph: SessionGraph, node_emb: Tensor, steps: int = 1,
                   prefix: str = "ggnn") -> Tensor:
    """Node features ``[n, D]`` for one graph."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    n, d = node_emb.shape
    h = node_emb.reshape(1, n, d)
    for _ in range(steps):
        h = ggnn_step(params, h, graph.a_in[None], graph.a_out[None], prefix)
    return h.reshape(n, d)


def batch_graphs(inputs: np.ndarray, lengths: np.ndarray, pad_id: int):
    """Pad per-session graphs to a common node count.

    Returns node ids ``[N, n]``, adjacency pair ``[N, n, n]`` and a position ->
    node alias ``[N, T]`` (pad positions alias node 0 and are masked later).
    """
    N, T = inputs.shape
    graphs = [build_session_graph(inputs[i, T - lengths[i]:]) for i in range(N)]
    n_max = max(len(g.nodes) for g in graphs)
    node_ids = np.full((N, n_max), pad_id, dtype=np.int64)
    a_in = np.zeros((N, n_max, n_max))
    a_out = np.zeros((N, n_max, n_max))
    alias = np.zeros((N, T), dtype=np.int64)
    for i, g in enumerate(graphs):
        k = len(g.nodes)
        node_ids[i, :k] = g.nodes
        a_in[i, :k, :k] = g.a_in
        a_out[i, :k, :k] = g.a_out
        alias[i, T - lengths[i]:] = g.alias
    return node_ids, a_in, a_out, alias


# -------------------------------------------------------------------- encoders


class Encoder:
    """Base class: owns encoder parameters and produces ``s``."""

    kind = ""

    def __init__(self, params: dict[str, Tensor], dim: int):
        self.params = params
        self.dim = dim

    @property
    def out_dim(self) -> int:
        raise NotImplementedError

    def encode(self, embed: Embed, inputs: np.ndarray, lengths: np.ndarray,
               pad_id: int) -> Tensor:
        raise NotImplementedError


class GRU4RecEncoder(Encoder):
    kind = "gru4rec"

    @classmethod
    def create(cls, rng, emb_dim: int, hidden: int) -> "GRU4RecEncoder":
        return cls(init_gru(rng, emb_dim, hidden), hidden)

    @property
    def out_dim(self) -> int:
        return self.dim

    def encode(self, embed, inputs, lengths, pad_id):
        if inputs.shape[1] < 1:
            raise ContractError("empty sequence")
        mask = length_mask(lengths, inputs.shape[1])
        return gru_states(self.params, embed(inputs), mask)[-1]


class NARMEncoder(Encoder):
    kind = "narm"

    @classmethod
    def create(cls, rng, emb_dim: int, hidden: int) -> "NARMEncoder":
        params = init_gru(rng, emb_dim, hidden)
        params.update(init_attention(rng, hidden, "att"))
        return cls(params, hidden)

    @property
    def out_dim(self) -> int:
        return 2 * self.dim

    def encode(self, embed, inputs, lengths, pad_id):
        mask = length_mask(lengths, inputs.shape[1])
        states = gru_states(self.params, embed(inputs), mask)
        return attention(self.params, tn.stack(states, axis=1), states[-1], mask, "att")


class SRGNNEncoder(Encoder):
    kind = "srgnn"

    def __init__(self, params, dim, steps: int = 1):
        super().__init__(params, dim)
        self.steps = steps

    @classmethod
    def create(cls, rng, emb_dim: int, hidden: int, steps: int = 1) -> "SRGNNEncoder":
        if hidden != emb_dim:
            raise ConfigError("SR-GNN node states start from embeddings, so D must equal E")
        params = init_ggnn(rng, emb_dim)
        params.update(init_attention(rng, emb_dim, "att"))
        return cls(params, emb_dim, steps)

    @property
    def out_dim(self) -> int:
        return 2 * self.dim

    def encode(self, embed, inputs, lengths, pad_id):
        node_ids, a_in, a_out, alias = batch_graphs(inputs, lengths, pad_id)
        h = embed(node_ids)
        for _ in range(self.steps):
            h = ggnn_step(self.params, h, a_in, a_out)
        N, T = inputs.shape
        rows = np.arange(N)[:, None]
        seq = h[rows, alias]
        mask = length_mask(lengths, T)
        return attention(self.params, seq, seq[:, T - 1, :], mask, "att")


def make_encoder(kind: str, rng, emb_dim: int, hidden: int, ggnn_steps: int = 1) -> Encoder:
    if kind == "gru4rec":
        return GRU4RecEncoder.create(rng, emb_dim, hidden)
    if kind == "narm":
        return NARMEncoder.create(rng, emb_dim, hidden)
    if kind == "srgnn":
        return SRGNNEncoder.create(rng, emb_dim, hidden, ggnn_steps)
    raise ConfigError(f"unknown encoder {kind!r}; expected one of {ENCODERS}")
