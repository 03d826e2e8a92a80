"""A complete recommender: item embeddings, encoder, decoder and dropout ratios."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .decoders import DECODERS, Decoder, apply_dnd, make_decoder
from .encoders import ENCODERS, Encoder, make_encoder, uniform_init
from .errors import ConfigError
from .tensor import Tensor

# session-input and encoder-output dropout used for each encoder in the experiments
DEFAULT_DROPOUT = {"gru4rec": (0.25, 0.0), "narm": (0.25, 0.5), "srgnn": (0.25, 0.5)}


@dataclass
class ModelConfig:
    encoder: str = "gru4rec"
    decoder: str = "linear"
    num_items: int = 0
    emb_dim: int = 100
    hidden: int = 100
    share_embeddings: bool = True
    session_dropout: float | None = None
    encoder_dropout: float | None = None
    candidate_dropout: float = 0.0
    activation: str = "softplus"
    mlp_layers: int = 2
    mos_k: int = 4
    ggnn_steps: int = 1

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        sess, enc = DEFAULT_DROPOUT[self.encoder]
        if self.session_dropout is None:
            self.session_dropout = sess
        if self.encoder_dropout is None:
            self.encoder_dropout = enc
        for name in ("session_dropout", "encoder_dropout", "candidate_dropout"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {r}")
        for name in ("emb_dim", "hidden", "mlp_layers", "ggnn_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def ratios(self) -> tuple[float, float, float]:
        return self.session_dropout, self.encoder_dropout, self.candidate_dropout

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class SessionModel:
    """Embedding table(s) + encoder + decoder.

    The input table has ``M + 1`` rows (the last is the pad row). With shared
    embeddings the candidates are its first ``M`` rows; otherwise a separate
    ``M x E`` candidate table is used.
    """

    def __init__(self, config: ModelConfig, encoder: Encoder, decoder: Decoder,
                 tables: dict[str, Tensor]):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.tables = tables

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0,
               rng: np.random.Generator | None = None) -> "SessionModel":
        """Initialise parameters from ``rng`` (or a fresh generator for ``seed``)."""
        if config.num_items < 1:
            raise ConfigError("num_items must be set")
        rng = tn.make_rng(seed) if rng is None else rng
        M, E = config.num_items, config.emb_dim
        tables = {"emb.input": uniform_init(rng, (M + 1, E), config.hidden)}
        if not config.share_embeddings:
            tables["emb.candidate"] = uniform_init(rng, (M, E), config.hidden)
        encoder = make_encoder(config.encoder, rng, E, config.hidden, config.ggnn_steps)
        decoder = make_decoder(config.decoder, rng, encoder.out_dim, E,
                               act=config.activation, mlp_layers=config.mlp_layers,
                               mos_k=config.mos_k)
        return cls(config, encoder, decoder, tables)

    @property
    def num_items(self) -> int:
        return self.config.num_items

    @property
    def name(self) -> str:
        emb = "" if self.config.share_embeddings else "-sepemb"
        return f"{self.config.encoder}+{self.config.decoder}{emb}"

    @property
    def pad_id(self) -> int:
        return self.config.num_items

    @property
    def ratios(self):
        return self.config.ratios

    @property
    def input_table(self) -> Tensor:
        return self.tables["emb.input"]

    def candidates(self) -> Tensor:
        if self.config.share_embeddings:
            return self.input_table[: self.num_items]
        return self.tables["emb.candidate"]

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors in a fixed order."""
        out = dict(self.tables)
        out.update(self.encoder.params)
        out.update(self.decoder.params)
        return out

    def forward(self, batch, mode: str = "eval", rng=None) -> Tensor:
        return apply_dnd(batch, self, mode, rng)

    def score(self, batch) -> np.ndarray:
        """Eval-mode log-probabilities ``[N, M]`` without recording a tape."""
        with tn.no_grad():
            return self.forward(batch, "eval").data

    def session_vectors(self, batch) -> np.ndarray:
        """Eval-mode query vectors for the dot-product decoders."""
        with tn.no_grad():
            embed = lambda ids: tn.embedding_lookup(self.input_table, ids)  # noqa: E731
            s = self.encoder.encode(embed, batch.inputs, batch.lengths, self.pad_id)
            return self.decoder.query_vector(s).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ConfigError(f"shape mismatch for {k}: {p.data.shape} vs {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def fingerprint(self) -> str:
        """SHA-256 over config and parameter bytes; identifies the model for indexes."""
        h = hashlib.sha256(repr(sorted(self.config.to_dict().items())).encode())
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()
