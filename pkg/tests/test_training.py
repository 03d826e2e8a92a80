import json
import math

import numpy as np
import pytest

from dndrec import tensor as tn
from dndrec.dataset import corpus_samples, make_batches
from dndrec.errors import ConfigError, ContractError, TrainingAbort
from dndrec.model import ModelConfig, SessionModel
from dndrec.synthetic import markov_corpus
from dndrec.tensor import Tensor
from dndrec.training import (Adam, TrainConfig, adam_step, aggregate, cross_entropy, fit,
                             grid_search, load_checkpoint, restore_rng, run_replicates,
                             save_checkpoint, train_epoch)


@pytest.fixture(scope="module")
def small_corpus():
    return markov_corpus(num_items=40, num_sessions=300, seed=1)


def small_cfg(**kw):
    base = dict(encoder="gru4rec", decoder="linear", emb_dim=8, hidden=8)
    base.update(kw)
    return ModelConfig(**base)


# ------------------------------------------------------------------- loss


def test_cross_entropy_examples():
    uniform = tn.log(Tensor(np.full((1, 4), 0.25)))
    assert cross_entropy(uniform, [2]).item() == pytest.approx(math.log(4))
    sure = Tensor(np.log(np.array([[1.0, 1e-300]])))
    assert cross_entropy(sure, [0]).item() == pytest.approx(0.0)
    two = tn.log(Tensor(np.array([[0.5, 0.5, 0.0 + 1e-300], [0.25, 0.5, 0.25]])))
    assert cross_entropy(two, [0, 2]).item() == pytest.approx((math.log(2) + math.log(4)) / 2)


def test_cross_entropy_target_range():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])


# ------------------------------------------------------------------- adam


def test_adam_first_step_magnitude_lr():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.01)
    x.grad = np.array([0.5, -4.0, 1e-3])
    adam_step({"x": x}, opt)
    np.testing.assert_allclose(np.abs(x.data - [1.0, -2.0, 3.0]), 0.01, rtol=1e-4)


def test_adam_zero_grad_keeps_params():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"x": x})
    x.grad = np.zeros(2)
    opt.step()
    assert x.data.tolist() == [1.0, 2.0]


def test_adam_minimises_square():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        tn.backward((x * x).sum())
        opt.step()
    assert abs(x.data[0]) < 0.05


def test_adam_nan_gradient_aborts():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"x": x})
    x.grad = np.array([np.nan])
    with pytest.raises(TrainingAbort):
        opt.step()


def test_adam_state_shapes():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    opt = Adam({"x": x})
    assert opt.m["x"].shape == (2, 3) and opt.step_count == 0


def test_adam_clip_norm():
    x = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"x": x}, lr=1.0, clip_norm=1.0)
    x.grad = np.array([300.0, 400.0])
    opt.step()
    # clipping rescales g but the first Adam step is sign-like, still lr per coordinate
    np.testing.assert_allclose(np.abs(x.data), 1.0, rtol=1e-6)


# ------------------------------------------------------------------ epochs


def test_train_epoch_zero_lr_keeps_params(small_corpus):
    model = SessionModel.create(small_cfg(num_items=small_corpus.num_items), seed=0)
    before = model.state_dict()
    batches = make_batches(corpus_samples(small_corpus, "train"), 64, small_corpus.pad_id)
    rng = tn.make_rng(0)
    train_epoch(model, batches, Adam(model.parameters(), lr=0.0), rng)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_train_epoch_deterministic(small_corpus):
    losses = []
    for _ in range(2):
        rng = tn.make_rng(4)
        model = SessionModel.create(small_cfg(num_items=small_corpus.num_items), rng=rng)
        batches = make_batches(corpus_samples(small_corpus, "train"), 64, small_corpus.pad_id, rng)
        losses.append(train_epoch(model, batches, Adam(model.parameters()), rng))
    assert losses[0] == losses[1]


def test_train_epoch_loss_decreases_on_average(small_corpus):
    deltas = []
    for seed in range(5):
        rng = tn.make_rng(seed)
        model = SessionModel.create(small_cfg(num_items=small_corpus.num_items), rng=rng)
        opt = Adam(model.parameters(), lr=1e-2)
        samples = corpus_samples(small_corpus, "train")
        l1 = train_epoch(model, make_batches(samples, 64, small_corpus.pad_id, rng), opt, rng)
        l2 = train_epoch(model, make_batches(samples, 64, small_corpus.pad_id, rng), opt, rng)
        deltas.append(l2 - l1)
    assert np.mean(deltas) <= 0


def test_train_epoch_needs_batches(small_corpus):
    model = SessionModel.create(small_cfg(num_items=small_corpus.num_items))
    with pytest.raises(ContractError):
        train_epoch(model, [], Adam(model.parameters()), tn.make_rng(0))


# ---------------------------------------------------------------------- fit


def test_fit_runs_to_max_epochs_when_improving(small_corpus):
    run = fit(small_cfg(), TrainConfig(max_epochs=3, lr=1e-2, batch_size=64), small_corpus)
    assert run.epochs_run <= 3
    hrs = [r.val_hr20 for r in run.history]
    if all(b > a for a, b in zip(hrs, hrs[1:])):
        assert run.epochs_run == 3


def test_fit_stops_after_patience_when_flat(small_corpus):
    run = fit(small_cfg(), TrainConfig(max_epochs=20, lr=0.0, patience=3, batch_size=64),
              small_corpus)
    # zero lr: validation never changes after epoch 1
    assert run.epochs_run == 1 + 3
    assert run.best_epoch == {"hr": 1, "mrr": 1}


def test_fit_best_checkpoint_is_series_max(small_corpus, tmp_path):
    run = fit(small_cfg(), TrainConfig(max_epochs=6, lr=1e-2, batch_size=64, patience=2),
              small_corpus, out_dir=tmp_path)
    hr = [r.val_hr20 for r in run.history]
    mrr = [r.val_mrr20 for r in run.history]
    assert run.best_value["hr"] == max(hr)
    assert run.best_value["mrr"] == max(mrr)
    assert hr.index(max(hr)) + 1 == run.best_epoch["hr"]
    lines = (tmp_path / "run.jsonl").read_text().splitlines()
    assert len(lines) == run.epochs_run
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "train_loss", "val_hr20", "val_mrr20", "wall_ms"}
    model, meta = load_checkpoint(tmp_path / "best_hr.sbrm")
    assert meta["epoch"] == run.best_epoch["hr"] and meta["format"] == "SBRM1"
    state = run.best_states["hr"]
    assert all(np.array_equal(model.state_dict()[k], state[k]) for k in state)


def test_fit_deterministic(small_corpus):
    a = fit(small_cfg(), TrainConfig(max_epochs=2, batch_size=64, seed=3), small_corpus)
    b = fit(small_cfg(), TrainConfig(max_epochs=2, batch_size=64, seed=3), small_corpus)
    assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]
    assert a.test == b.test
    for k in a.best_states["hr"]:
        assert np.array_equal(a.best_states["hr"][k], b.best_states["hr"][k])


def test_fit_full_model_gradient(small_corpus):
    model = SessionModel.create(small_cfg(num_items=small_corpus.num_items, emb_dim=4, hidden=4,
                                          session_dropout=0.0), seed=0)
    batch = make_batches(corpus_samples(small_corpus, "train")[:4], 4, small_corpus.pad_id)[0]

    def loss():
        return cross_entropy(model.forward(batch, "eval"), batch.targets)

    params = [p for k, p in model.parameters().items() if k != "emb.input"]
    assert tn.grad_check_params(loss, params, eps=3e-3, stencil=4) < 1e-4


# -------------------------------------------------------- grids, replicates


def test_grid_singleton_and_counting(small_corpus):
    tc = TrainConfig(max_epochs=1, batch_size=128)
    one = grid_search(small_cfg(), tc, small_corpus, {"candidate_dropout": [0.0]})
    assert len(one.points) == 1 and len(one.runs[0]) == 1
    five = grid_search(small_cfg(), tc, small_corpus,
                       {"candidate_dropout": [0.0, 0.125, 0.25, 0.375, 0.5]})
    assert len(five.points) == 5
    vals = [r[0].best_value["hr"] for r in five.runs]
    assert five.best == five.points[int(np.argmax(vals))]
    with pytest.raises(ConfigError):
        grid_search(small_cfg(), tc, small_corpus, {})


def test_grid_full_factorial(small_corpus):
    tc = TrainConfig(max_epochs=1, batch_size=128)
    res = grid_search(small_cfg(decoder="mos"), tc, small_corpus,
                      {"mos_k": [2, 3], "candidate_dropout": [0.0, 0.5]})
    assert len(res.points) == 4
    assert {tuple(sorted(p.items())) for p in res.points} == {
        (("candidate_dropout", c), ("mos_k", k)) for c in (0.0, 0.5) for k in (2, 3)}


def test_replicates(small_corpus):
    tc = TrainConfig(max_epochs=2, batch_size=64)
    single = run_replicates(small_cfg(), tc, small_corpus, n_seeds=1)
    assert single.mean == single.runs[0].test and single.std == {"hr": 0.0, "mrr": 0.0}
    same = run_replicates(small_cfg(), tc, small_corpus, seeds=[7, 7])
    assert same.std == {"hr": 0.0, "mrr": 0.0}
    many = run_replicates(small_cfg(), tc, small_corpus, n_seeds=5)
    assert [r.seed for r in many.runs] == [0, 1, 2, 3, 4]
    assert many.std["hr"] > 0
    with pytest.raises(ConfigError):
        run_replicates(small_cfg(), tc, small_corpus, n_seeds=0)
    vals = np.array([r.test["hr"] for r in many.runs])
    assert aggregate(many.runs).mean["hr"] == pytest.approx(vals.mean())


def test_replicates_parallel_matches_serial(small_corpus):
    tc = TrainConfig(max_epochs=1, batch_size=128)
    serial = run_replicates(small_cfg(), tc, small_corpus, n_seeds=2, jobs=1)
    parallel = run_replicates(small_cfg(), tc, small_corpus, n_seeds=2, jobs=2)
    assert serial.mean == parallel.mean


# --------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_with_rng(tmp_path):
    model = SessionModel.create(small_cfg(num_items=12, decoder="mlp"), seed=2)
    rng = tn.make_rng(5)
    rng.random(3)
    save_checkpoint(tmp_path / "m.sbrm", model, TrainConfig(), rng, epoch=4)
    back, meta = load_checkpoint(tmp_path / "m.sbrm")
    assert back.fingerprint() == model.fingerprint()
    assert meta["epoch"] == 4 and meta["train_config"]["lr"] == 1e-3
    assert meta["model_config"]["decoder"] == "mlp"
    assert restore_rng(meta["rng_state"]).random() == rng.random()


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(clip_norm=-1.0)
    with pytest.raises(ConfigError):
        ModelConfig(candidate_dropout=1.0)
