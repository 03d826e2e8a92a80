"""Probability decoders over the candidate pool and the dropout wiring around them.

Decoders return log-probabilities ``[N, M]``; probabilities are ``exp`` of
that. The candidate matrix passed in never contains the pad row, so the pad
item is excluded before the softmax.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .encoders import uniform_init
from .errors import ConfigError
from .tensor import Tensor

DECODERS = ("linear", "decoupled", "mlp", "mos")


class Decoder:
    kind = ""
    # True when query-time scoring is a dot product against a fixed matrix
    indexable = False

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def log_probs(self, s: Tensor, candidates: Tensor) -> Tensor:
        raise NotImplementedError

    def transform_candidates(self, candidates: Tensor) -> Tensor:
        return candidates

    def query_vector(self, s: Tensor) -> Tensor:
        raise NotImplementedError(f"{self.kind} decoder has no dot-product query form")


class LinearDecoder(Decoder):
    """``softmax((s W) . v_i)``; ``W`` exists only when ``dim(s) != E``."""

    kind = "linear"
    indexable = True

    @classmethod
    def create(cls, rng, s_dim: int, emb_dim: int, **_):
        params = {}
        if s_dim != emb_dim:
            params["dec.W"] = uniform_init(rng, (s_dim, emb_dim), emb_dim)
        return cls(params)

    def query_vector(self, s: Tensor) -> Tensor:
        W = self.params.get("dec.W")
        return s if W is None else s @ W

    def logits(self, s: Tensor, candidates: Tensor) -> Tensor:
        q = self.query_vector(s)
        if q.shape[-1] != candidates.shape[-1]:
            raise ConfigError(
                f"session dim {q.shape[-1]} != embedding dim {candidates.shape[-1]}: "
                "a projection matrix is required")
        return q @ tn.transpose(self.transform_candidates(candidates))

    def log_probs(self, s, candidates):
        return tn.log_softmax(self.logits(s, candidates))


class DecoupledDecoder(LinearDecoder):
    """Linear decoder over ``activation(v A + b)`` instead of the raw embeddings."""

    kind = "decoupled"

    def __init__(self, params, act: str = "softplus"):
        super().__init__(params)
        self.act = act

    @classmethod
    def create(cls, rng, s_dim: int, emb_dim: int, act: str = "softplus", **_):
        if act not in tn.ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        params = LinearDecoder.create(rng, s_dim, emb_dim).params
        params["dec.ff.A"] = uniform_init(rng, (emb_dim, emb_dim), emb_dim)
        params["dec.ff.b"] = uniform_init(rng, (emb_dim,), emb_dim)
        return cls(params, act)

    def transform_candidates(self, candidates):
        return tn.activation(candidates @ self.params["dec.ff.A"] + self.params["dec.ff.b"],
                             self.act)


class MLPDecoder(Decoder):
    """Entrywise product of projected session and candidate vectors fed to an MLP.

    ``layers`` counts the linear layers of the MLP head: 1 is ``E -> 1``,
    2 is ``E -> E -> 1`` and so on, softplus between layers.
    """

    kind = "mlp"

    def __init__(self, params, layers: int):
        super().__init__(params)
        self.layers = layers

    @classmethod
    def create(cls, rng, s_dim: int, emb_dim: int, mlp_layers: int = 2, **_):
        if mlp_layers < 1:
            raise ConfigError("mlp_layers must be >= 1")
        E = emb_dim
        params = {
            "dec.L1.W": uniform_init(rng, (s_dim, E), E),
            "dec.L1.b": uniform_init(rng, (E,), E),
            "dec.L2.W": uniform_init(rng, (E, E), E),
            "dec.L2.b": uniform_init(rng, (E,), E),
        }
        for k in range(mlp_layers - 1):
            params[f"dec.mlp{k}.W"] = uniform_init(rng, (E, E), E)
            params[f"dec.mlp{k}.b"] = uniform_init(rng, (E,), E)
        params["dec.out.W"] = uniform_init(rng, (E, 1), E)
        params["dec.out.b"] = uniform_init(rng, (1,), E)
        return cls(params, mlp_layers)

    def logits(self, s, candidates):
        p = self.params
        n = s.shape[0]
        m, E = candidates.shape
        u = s @ p["dec.L1.W"] + p["dec.L1.b"]
        w = candidates @ p["dec.L2.W"] + p["dec.L2.b"]
        z = u.reshape(n, 1, E) * w.reshape(1, m, E)
        for k in range(self.layers - 1):
            z = tn.softplus(z @ p[f"dec.mlp{k}.W"] + p[f"dec.mlp{k}.b"])
        return (z @ p["dec.out.W"] + p["dec.out.b"]).reshape(n, m)

    def log_probs(self, s, candidates):
        return tn.log_softmax(self.logits(s, candidates))


class MoSDecoder(Decoder):
    """Mixture of ``K`` softmaxes sharing the candidate embeddings."""

    kind = "mos"

    def __init__(self, params, k: int):
        super().__init__(params)
        self.k = k

    @classmethod
    def create(cls, rng, s_dim: int, emb_dim: int, mos_k: int = 4, **_):
        if mos_k < 2:
            raise ConfigError("MoS needs K >= 2")
        params = {
            "dec.prior": uniform_init(rng, (s_dim, mos_k), emb_dim),
            "dec.Wh": uniform_init(rng, (s_dim, mos_k * emb_dim), emb_dim),
        }
        return cls(params, mos_k)

    def log_probs(self, s, candidates):
        n = s.shape[0]
        E = candidates.shape[1]
        log_prior = tn.log_softmax(s @ self.params["dec.prior"])
        h = tn.tanh(s @ self.params["dec.Wh"]).reshape(n, self.k, E)
        comp = tn.log_softmax(h @ tn.transpose(candidates))
        return tn.logsumexp(comp + log_prior.reshape(n, self.k, 1), axis=1)


_REGISTRY = {cls.kind: cls for cls in (LinearDecoder, DecoupledDecoder, MLPDecoder, MoSDecoder)}


def make_decoder(kind: str, rng, s_dim: int, emb_dim: int, **options) -> Decoder:
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise ConfigError(f"unknown decoder {kind!r}; expected one of {DECODERS}") from None
    return cls.create(rng, s_dim, emb_dim, **options)


# -------------------------------------------------------- functional wrappers


def _as_rows(s) -> tuple[Tensor, bool]:
    s = tn.as_tensor(s)
    if s.ndim == 1:
        return s.reshape(1, s.shape[0]), True
    return s, False


def _finish(logp: Tensor, single: bool) -> np.ndarray:
    probs = np.exp(logp.data)
    return probs[0] if single else probs


def linear_decode(s, candidates, W=None) -> np.ndarray:
    """Probabilities ``softmax((s W) . candidates^T)`` for one or many sessions."""
    rows, single = _as_rows(s)
    params = {} if W is None else {"dec.W": tn.as_tensor(W)}
    return _finish(LinearDecoder(params).log_probs(rows, tn.as_tensor(candidates)), single)


def decoupled_decode(s, candidates, A, b, W=None, act: str = "softplus") -> np.ndarray:
    rows, single = _as_rows(s)
    params = {"dec.ff.A": tn.as_tensor(A), "dec.ff.b": tn.as_tensor(b)}
    if W is not None:
        params["dec.W"] = tn.as_tensor(W)
    dec = DecoupledDecoder(params, act)
    return _finish(dec.log_probs(rows, tn.as_tensor(candidates)), single)


def mlp_decode(s, candidates, params: dict, layers: int = 2) -> np.ndarray:
    rows, single = _as_rows(s)
    dec = MLPDecoder({k: tn.as_tensor(v) for k, v in params.items()}, layers)
    return _finish(dec.log_probs(rows, tn.as_tensor(candidates)), single)


def mos_decode(h, candidates, params: dict, k: int) -> np.ndarray:
    rows, single = _as_rows(h)
    dec = MoSDecoder({k_: tn.as_tensor(v) for k_, v in params.items()}, k)
    return _finish(dec.log_probs(rows, tn.as_tensor(candidates)), single)


# ------------------------------------------------------------------ dropout


def apply_dnd(batch, model, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Full forward pass with session, encoder and candidate dropout.

    Train mode draws a fresh candidate mask per call, shared by every sample
    in the batch; eval mode makes all three dropouts the identity.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    r_sess, r_enc, r_cand = model.ratios

    def embed(ids):
        return tn.dropout(tn.embedding_lookup(model.input_table, ids), r_sess, mode, rng)

    s = model.encoder.encode(embed, batch.inputs, batch.lengths, model.pad_id)
    s = tn.dropout(s, r_enc, mode, rng)
    cands = model.candidates()
    cands = tn.dropout(cands, r_cand, mode, rng)
    return model.decoder.log_probs(s, cands)
