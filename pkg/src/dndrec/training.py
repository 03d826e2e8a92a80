"""Cross-entropy training with Adam, per-metric early stopping, grids and replicates."""

from __future__ import annotations

import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .container import MODEL_MAGIC, build_id, read_container, write_container
from .dataset import SessionCorpus, corpus_samples, make_batches
from .errors import ConfigError, ContractError, TrainingAbort
from .evaluation import MetricReport, evaluate
from .model import ModelConfig, SessionModel
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRICS = ("hr", "mrr")

# hyper-parameter ranges explored per decoder family
DEFAULT_GRIDS = {
    "candidate_dropout": [0.0, 0.125, 0.25, 0.375, 0.5],
    "mlp_layers": [1, 2, 3],
    "mos_k": [2, 3, 4, 6, 8],
}


@dataclass
class TrainConfig:
    batch_size: int = 200
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    n_seeds: int = 5
    k: int = 20
    clip_norm: float | None = None

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "n_seeds", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def cross_entropy(log_probs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row distributions ``[N, M]``."""
    targets = np.asarray(targets, dtype=np.int64)
    n, m = log_probs.shape
    if len(targets) != n:
        raise ContractError("one target per row required")
    if targets.min() < 0 or targets.max() >= m:
        raise ContractError(f"target outside [0, {m})")
    return -tn.mean(log_probs[np.arange(n), targets])


class Adam:
    """Bias-corrected Adam; no weight decay, no schedule."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingAbort(f"non-finite gradient for {k} at step {self.step_count + 1}")
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                grads = {k: g * (self.clip_norm / total) for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = self.params[k]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out


def adam_step(params: dict[str, Tensor], state: Adam, lr: float | None = None) -> None:
    """Functional wrapper: apply one update with the gradients already on ``params``."""
    if lr is not None:
        state.lr = lr
    state.step()


def train_epoch(model: SessionModel, batches, optimizer: Adam,
                rng: np.random.Generator) -> float:
    """One pass in train mode; returns the mean per-sample loss."""
    if not batches:
        raise ContractError("no batches")
    total = 0.0
    count = 0
    for batch in batches:
        optimizer.zero_grad()
        loss = cross_entropy(model.forward(batch, "train", rng), batch.targets)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingAbort(f"non-finite loss {value}")
        tn.backward(loss)
        optimizer.step()
        total += value * len(batch)
        count += len(batch)
    return total / count


# ------------------------------------------------------------------- runs


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_hr20: float
    val_mrr20: float
    wall_ms: float


@dataclass
class TrainRun:
    model_config: dict
    train_config: dict
    seed: int
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: dict[str, int] = field(default_factory=dict)
    best_value: dict[str, float] = field(default_factory=dict)
    test: dict[str, float] = field(default_factory=dict)
    best_states: dict[str, dict] = field(default_factory=dict, repr=False)

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def summary(self) -> dict:
        return {"model_config": self.model_config, "train_config": self.train_config,
                "seed": self.seed, "epochs_run": self.epochs_run,
                "best_epoch": self.best_epoch, "best_value": self.best_value,
                "test": self.test, "history": [asdict(r) for r in self.history]}


def _metric(report: MetricReport, name: str) -> float:
    return report.hr if name == "hr" else report.mrr


def fit(model_config: ModelConfig, train_config: TrainConfig, corpus: SessionCorpus,
        out_dir=None, evaluate_test: bool = True, train_split: str = "train") -> TrainRun:
    """Train until ``max_epochs`` or until neither validation metric improved
    for ``patience`` epochs.

    A best checkpoint is kept per metric, and each test metric is reported from
    its own metric's best checkpoint. With ``out_dir`` set, the per-epoch log
    (``run.jsonl``) and one SBRM1 checkpoint per metric are written there.
    """
    seed = train_config.seed
    rng = tn.make_rng(seed)
    model_config = replace(model_config, num_items=corpus.num_items)
    model = SessionModel.create(model_config, rng=rng)
    opt = Adam(model.parameters(), train_config.lr, clip_norm=train_config.clip_norm)
    train_samples = corpus_samples(corpus, train_split)
    val_samples = corpus_samples(corpus, "validation")
    run = TrainRun(model_config.to_dict(), train_config.to_dict(), seed)
    best = {m: -np.inf for m in METRICS}
    stale = 0
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "run.jsonl", "w")
    try:
        for epoch in range(1, train_config.max_epochs + 1):
            t0 = time.perf_counter()
            batches = make_batches(train_samples, train_config.batch_size, corpus.pad_id, rng)
            loss = train_epoch(model, batches, opt, rng)
            val = evaluate(model, corpus, "validation", train_config.k, samples=val_samples)
            rec = EpochRecord(epoch, loss, val.hr, val.mrr,
                              round((time.perf_counter() - t0) * 1e3, 3))
            run.history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
                log_fh.flush()
            improved = False
            for name in METRICS:
                value = _metric(val, name)
                if value > best[name]:
                    best[name] = value
                    run.best_epoch[name] = epoch
                    run.best_value[name] = value
                    run.best_states[name] = model.state_dict()
                    improved = True
                    if out_dir is not None:
                        save_checkpoint(out_dir / f"best_{name}.sbrm", model, train_config,
                                        rng, epoch, {"metric": name, "value": value})
            logger.info("epoch %d loss %.4f val hr %.4f mrr %.4f", epoch, loss, val.hr, val.mrr)
            stale = 0 if improved else stale + 1
            if stale >= train_config.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    if evaluate_test:
        for name in METRICS:
            model.load_state_dict(run.best_states[name])
            report = evaluate(model, corpus, "test", train_config.k)
            run.test[name] = _metric(report, name)
    return run


def load_best_model(run: TrainRun, metric: str = "hr") -> SessionModel:
    cfg = ModelConfig.from_dict(run.model_config)
    model = SessionModel.create(cfg, seed=run.seed)
    model.load_state_dict(run.best_states[metric])
    return model


# -------------------------------------------------------- grids & replicates


def _fit_job(args):
    model_config, train_config, corpus, out_dir = args
    return fit(model_config, train_config, corpus, out_dir)


def _map(jobs, n_workers: int):
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            return list(pool.map(_fit_job, jobs))
    return [_fit_job(j) for j in jobs]


@dataclass
class ReplicateResult:
    runs: list[TrainRun]
    mean: dict[str, float]
    std: dict[str, float]

    def summary(self) -> dict:
        return {"n": len(self.runs), "seeds": [r.seed for r in self.runs],
                "mean": self.mean, "std": self.std}


def aggregate(runs: list[TrainRun]) -> ReplicateResult:
    """Mean and population standard deviation of each test metric."""
    mean, std = {}, {}
    for name in METRICS:
        vals = np.array([r.test[name] for r in runs])
        mean[name] = float(vals.mean())
        std[name] = float(vals.std())
    return ReplicateResult(runs, mean, std)


def run_replicates(model_config: ModelConfig, train_config: TrainConfig,
                   corpus: SessionCorpus, n_seeds: int | None = None,
                   seeds=None, jobs: int = 1, out_dir=None) -> ReplicateResult:
    """Fit with seeds ``base + 0 .. n-1`` (or explicit ``seeds``) and aggregate."""
    n = train_config.n_seeds if n_seeds is None else n_seeds
    if n < 1:
        raise ConfigError("n_seeds must be >= 1")
    seeds = list(seeds) if seeds is not None else [train_config.seed + i for i in range(n)]
    jobs_ = [(model_config, replace(train_config, seed=s), corpus,
              None if out_dir is None else Path(out_dir) / f"seed{s}") for s in seeds]
    return aggregate(_map(jobs_, jobs))


@dataclass
class GridResult:
    best: dict
    best_score: float
    points: list[dict]
    runs: list[list[TrainRun]]


def grid_search(model_config: ModelConfig, train_config: TrainConfig, corpus: SessionCorpus,
                grid: dict[str, list], seeds=None, select: str = "hr", jobs: int = 1,
                out_dir=None) -> GridResult:
    """Full factorial over ``grid`` (ModelConfig field -> values).

    Each point is scored by the mean best validation metric over ``seeds``.
    Earlier points win ties.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must name at least one value per axis")
    seeds = list(seeds) if seeds is not None else [train_config.seed]
    names = sorted(grid)
    points = [dict(zip(names, combo)) for combo in itertools.product(*(grid[n] for n in names))]
    jobs_ = []
    for pi, point in enumerate(points):
        cfg = replace(model_config, **point)
        for s in seeds:
            sub = None if out_dir is None else Path(out_dir) / f"point{pi}_seed{s}"
            jobs_.append((cfg, replace(train_config, seed=s), corpus, sub))
    flat = _map(jobs_, jobs)
    runs = [flat[i * len(seeds):(i + 1) * len(seeds)] for i in range(len(points))]
    scores = [float(np.mean([r.best_value[select] for r in rs])) for rs in runs]
    best_i = int(np.argmax(scores))
    return GridResult(points[best_i], scores[best_i], points, runs)


# ------------------------------------------------------------- checkpoints


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state

    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return x.tolist()
        if isinstance(x, np.integer):
            return int(x)
        return x

    return plain(state)


def save_checkpoint(path, model: SessionModel, train_config: TrainConfig | None = None,
                    rng: np.random.Generator | None = None, epoch: int = 0,
                    extra: dict | None = None) -> None:
    meta = {
        "format": "SBRM1", "version": 1, "build": build_id(),
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "rng_state": _rng_state(rng) if rng is not None else None,
        "epoch": epoch,
        "fingerprint": model.fingerprint(),
    }
    meta.update(extra or {})
    write_container(path, MODEL_MAGIC, meta, {f"param.{k}": v for k, v in
                                              model.state_dict().items()})


def load_checkpoint(path) -> tuple[SessionModel, dict]:
    meta, arrays = read_container(path, MODEL_MAGIC)
    model = SessionModel.create(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict({k[len("param."):]: v for k, v in arrays.items()})
    return model, meta


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    s = dict(state)
    s["state"] = {k: np.array(v, dtype=np.uint64) for k, v in s["state"].items()}
    s["buffer"] = np.array(s["buffer"], dtype=np.uint64)
    bg.state = s
    return np.random.Generator(bg)
