"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the lines
are repeated in the "acceptance criteria" section of the terminal summary.
"""

import time

import numpy as np
import pytest

from dndrec import tensor as tn
from dndrec.dataset import (Event, EventLog, Sample, build_corpus, corpus_samples, filter_support,
                            ingest_events, make_batches, pad_batch, preprocess)
from dndrec.decoders import DECODERS, DecoupledDecoder, LinearDecoder, make_decoder
from dndrec.encoders import ENCODERS
from dndrec.evaluation import evaluate
from dndrec.model import ModelConfig, SessionModel
from dndrec.retrieval import (CandidateIndex, precompute_candidates, recommend, topl_exact,
                              topl_indexed)
from dndrec.synthetic import corpus_from_sessions, markov_corpus, memorization_sessions
from dndrec.tensor import Tensor
from dndrec.training import Adam, TrainConfig, cross_entropy, run_replicates, train_epoch


def numerical_rank(a: np.ndarray) -> int:
    s = np.linalg.svd(a, compute_uv=False)
    return int((s > 1e-6 * s[0]).sum())


def random_batch(num_items, n, max_len, seed):
    g = np.random.default_rng(seed)
    samples = [Sample(tuple(g.integers(num_items, size=int(g.integers(1, max_len + 1)))
                            .tolist()), int(g.integers(num_items))) for _ in range(n)]
    return pad_batch(samples, num_items)


# ---------------------------------------------------------------- 1. gradients


def test_1_gradient_suite(criterion):
    start = time.perf_counter()
    worst = {}
    for enc in ENCODERS:
        for dec in DECODERS:
            cfg = ModelConfig(enc, dec, num_items=20, emb_dim=8, hidden=8,
                              candidate_dropout=0.25, mos_k=3)
            model = SessionModel.create(cfg, seed=1)
            batch = random_batch(20, 3, 6, seed=2)

            def loss():
                # a fresh generator per call replays the same dropout masks
                logp = model.forward(batch, "train", tn.make_rng(5))
                return cross_entropy(logp, batch.targets)

            params = list(model.parameters().values())
            worst[f"{enc}+{dec}"] = tn.grad_check_params(loss, params, eps=3e-3, stencil=4)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 300
    criterion(1, ok, f"12 combos, max rel err {worst[top]:.2e} ({top}), {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------ 2. distributions


def test_2_distribution_invariants(criterion):
    g = np.random.default_rng(0)
    worst = 0.0
    for trial in range(1000):
        kind = DECODERS[trial % len(DECODERS)]
        E = int(g.integers(2, 9))
        s_dim = int(g.integers(2, 9))
        n, m = int(g.integers(1, 6)), int(g.integers(2, 40))
        scale = [1.0, 1e2, 1e4][trial % 3]
        dec = make_decoder(kind, tn.make_rng(trial), s_dim, E, mos_k=int(g.integers(2, 5)),
                           mlp_layers=int(g.integers(1, 4)))
        if kind == "linear" and trial % 2:
            # hand-built logits of exactly +-1e4
            dec = LinearDecoder({})
            s = Tensor(np.ones((n, 1)))
            V = Tensor(g.choice([-1e4, 1e4], size=(m, 1)))
        else:
            s = Tensor(g.normal(size=(n, s_dim)) * scale)
            V = Tensor(g.normal(size=(m, E)) * scale)
        with tn.no_grad():
            p = np.exp(dec.log_probs(s, V).data)
        assert np.isfinite(p).all() and (p >= 0).all()
        worst = max(worst, float(np.abs(p.sum(axis=1) - 1.0).max()))
    ok = worst <= 1e-9
    criterion(2, ok, f"1000 configurations, max |sum - 1| = {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 3. rank


def _linear_logits(model, batch):
    return model.session_vectors(batch) @ model.candidates().data.T


def test_3_rank_bound(criterion):
    N, M, D = 64, 256, 8
    cfg = ModelConfig("gru4rec", "linear", num_items=M, emb_dim=D, hidden=D)
    batch = random_batch(M, N, 6, seed=3)
    model = SessionModel.create(cfg, seed=0)
    r_random = numerical_rank(_linear_logits(model, batch))

    g = np.random.default_rng(4)
    corpus = corpus_from_sessions([g.integers(M, size=6).tolist() for _ in range(400)])
    rng = tn.make_rng(0)
    opt = Adam(model.parameters(), lr=1e-2)
    samples = corpus_samples(corpus, "train")
    for _ in range(5):
        train_epoch(model, make_batches(samples, 100, corpus.pad_id, rng), opt, rng)
    r_trained = numerical_rank(_linear_logits(model, batch))

    # MoS fitted directly to a full-rank target distribution
    logits = np.random.default_rng(5).normal(size=(N, M)) * 2
    target = Tensor(np.exp(logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)))
    dec = make_decoder("mos", tn.make_rng(0), D, D, mos_k=4)
    S = Tensor(g.normal(size=(N, D)) * 0.5, requires_grad=True)
    V = Tensor(g.normal(size=(M, D)) * 0.5, requires_grad=True)
    opt = Adam({"S": S, "V": V, **dec.params}, lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        logp = dec.log_probs(S, V)
        tn.backward(-(logp * target).sum() * (1.0 / N))
        opt.step()
    with tn.no_grad():
        r_mos = numerical_rank(dec.log_probs(S, V).data)
    ok = r_random <= D and r_trained <= D and r_mos > D
    criterion(3, ok, f"linear rank {r_random} (random) / {r_trained} (trained) <= {D}; "
                     f"MoS K=4 log-prob rank {r_mos} > {D}")
    assert ok


# ---------------------------------------------------------------- 4. dropout


def test_4_dropout_contract(criterion):
    batch = random_batch(20, 5, 6, seed=6)
    plain = SessionModel.create(ModelConfig("narm", "decoupled", num_items=20, emb_dim=8,
                                            hidden=8, session_dropout=0.0,
                                            encoder_dropout=0.0), seed=2)
    noisy = SessionModel.create(ModelConfig("narm", "decoupled", num_items=20, emb_dim=8,
                                            hidden=8, session_dropout=0.3, encoder_dropout=0.5,
                                            candidate_dropout=0.4), seed=2)
    identical = np.array_equal(plain.score(batch), noisy.score(batch))

    model = SessionModel.create(ModelConfig("gru4rec", "linear", num_items=20, emb_dim=8,
                                            hidden=8, candidate_dropout=0.25), seed=3)
    s = Tensor(model.session_vectors(batch))
    V = model.candidates()
    ref = model.decoder.logits(s, V).data
    rng = tn.make_rng(7)
    acc = np.zeros_like(ref)
    n_masks = 10_000
    with tn.no_grad():
        for _ in range(n_masks):
            # the same dropout call the training forward applies to candidates
            acc += model.decoder.logits(s, tn.dropout(V, 0.25, "train", rng)).data
    rel = float(np.abs(acc / n_masks - ref).max() / np.abs(ref).max())
    ok = identical and rel < 0.02
    criterion(4, ok, f"eval bit-identical={identical}; MC mean over {n_masks} masks "
                     f"max rel dev {rel:.4f} < 0.02")
    assert ok


# ----------------------------------------------------------- 5. memorization


def test_5_memorization(criterion):
    corpus = corpus_from_sessions(memorization_sessions(num_sessions=50))
    samples = corpus_samples(corpus, "train")
    details, ok = [], True
    for enc in ENCODERS:
        start = time.perf_counter()
        rng = tn.make_rng(0)
        cfg = ModelConfig(enc, "linear", num_items=corpus.num_items, emb_dim=32, hidden=32,
                          session_dropout=0.0, encoder_dropout=0.0)
        model = SessionModel.create(cfg, rng=rng)
        opt = Adam(model.parameters(), lr=1e-2)
        hr1 = 0.0
        for epoch in range(1, 201):
            train_epoch(model, make_batches(samples, 32, corpus.pad_id, rng), opt, rng)
            hr1 = evaluate(model, corpus, "train", k=1).hr
            if hr1 >= 0.95:
                break
        elapsed = time.perf_counter() - start
        ok &= hr1 >= 0.95 and elapsed < 120
        details.append(f"{enc} HR@1={hr1:.3f} ep={epoch} {elapsed:.1f}s")
    criterion(5, ok, "; ".join(details))
    assert ok


# ----------------------------------------------------- 6. planted replication


@pytest.mark.slow
def test_6_directional_replication(criterion):
    corpus = markov_corpus(num_items=500, num_sessions=5000, seed=0)
    tc = TrainConfig(max_epochs=40, lr=1e-3, patience=3)

    def hr20(**kw):
        mc = ModelConfig("gru4rec", "linear", emb_dim=100, hidden=100, **kw)
        res = run_replicates(mc, tc, corpus, n_seeds=5)
        return 100 * res.mean["hr"], 100 * res.std["hr"]

    base, base_sd = hr20()
    cd, cd_sd = hr20(candidate_dropout=0.25)
    sep, sep_sd = hr20(share_embeddings=False)
    ok_a = cd >= base
    ok_b = base - sep >= 5.0
    criterion("6a", ok_a, f"HR@20 candidate dropout {cd:.2f}±{cd_sd:.2f} >= "
                          f"none {base:.2f}±{base_sd:.2f}")
    criterion("6b", ok_b, f"HR@20 shared {base:.2f} - SepEmb {sep:.2f}±{sep_sd:.2f} "
                          f"= {base - sep:.2f} >= 5")
    assert ok_a and ok_b


# ---------------------------------------------------------------- 7. retrieval


def test_7_retrieval(criterion):
    g = np.random.default_rng(8)
    V = g.normal(size=(10_000, 16))
    Q = g.normal(size=(1000, 16))
    index = CandidateIndex(V).with_graph(seed=0, ef_search=256)
    hits, exact_ok = 0, True
    for q in Q:
        exact = topl_exact(q, index, 20)
        hits += len(set(topl_indexed(index, q, 20).items.tolist()) & set(exact.items.tolist()))
        scores = V @ q
        oracle = np.lexsort((np.arange(len(scores)), -scores))[:20]
        exact_ok &= exact.items.tolist() == oracle.tolist()
    recall = hits / (20 * len(Q))

    sizes = [1_000, 10_000, 100_000]
    lat = []
    for M in sizes:
        idx = CandidateIndex(g.normal(size=(M, 16))).with_graph(seed=0, ef_search=256)
        queries = g.normal(size=(200, 16))
        for q in queries[:20]:
            topl_indexed(idx, q, 20)
        t0 = time.perf_counter()
        for q in queries:
            topl_indexed(idx, q, 20)
        lat.append((time.perf_counter() - t0) / len(queries))
    slope = float(np.polyfit(np.log(sizes), np.log(lat), 1)[0])
    ok = recall >= 0.99 and exact_ok and slope < 0.5
    criterion(7, ok, f"recall@20 {recall:.4f}; exact==argsort {exact_ok}; latency "
                     f"{', '.join(f'{1e6 * x:.0f}us' for x in lat)} exponent {slope:.3f}")
    assert ok


# ------------------------------------------------------- 8. decoupled == linear


def test_8_decoupled_query_cost(criterion):
    shared = (DecoupledDecoder.query_vector is LinearDecoder.query_vector)
    M = 20_000
    models = {kind: SessionModel.create(ModelConfig("gru4rec", kind, num_items=M, emb_dim=64,
                                                    hidden=64), seed=0)
              for kind in ("linear", "decoupled")}
    indexes = {k: precompute_candidates(m) for k, m in models.items()}
    same_shape = indexes["linear"].matrix.shape == indexes["decoupled"].matrix.shape
    seqs = [np.random.default_rng(i).integers(M, size=5).tolist() for i in range(50)]
    times = {k: [] for k in models}
    for _ in range(15):
        for kind in models:
            t0 = time.perf_counter()
            for seq in seqs:
                recommend(models[kind], indexes[kind], seq, 20, exact=True)
            times[kind].append(time.perf_counter() - t0)
    lin, dec = np.median(times["linear"]), np.median(times["decoupled"])
    diff = abs(dec - lin) / lin
    ok = shared and same_shape and diff < 0.05
    criterion(8, ok, f"shared query path {shared and same_shape}; per-query "
                     f"{1e6 * lin / len(seqs):.0f}us vs {1e6 * dec / len(seqs):.0f}us "
                     f"({100 * diff:.1f}% < 5%)")
    assert ok


# --------------------------------------------------------- 9. full dataset


def test_9_full_dataset(criterion):
    criterion(9, None, "optional and not gating: raw dataset dump not available")
    pytest.skip("full-dataset reproduction needs the raw dump")


# ------------------------------------------------------ 10. protocol fidelity


def test_10_protocol_fidelity(criterion, tmp_path):
    text = "session_id\titem_id\ttimestamp\n" + "\n".join([
        "A\t1\t1", "A\t2\t2", "A\t1\t3", "B\t1\t10", "B\t2\t11", "B\t3\t12",
        "C\t2\t20", "C\t3\t21", "D\t1\t30", "E\t9\t40"]) + "\n"
    path = tmp_path / "toy.tsv"
    path.write_text(text)
    log = ingest_events(path)
    stats = filter_support(build_corpus(log), min_item_count=2, min_session_len=2).stats()
    counts = (len(log), stats["events"], stats["sessions"], stats["items"], stats["avg_len"])
    expected = (10, 8, 3, 3, round(8 / 3, 2))

    # span 0..192s, so the last 10% starts at 172.8s: sessions 18 and 19 are test,
    # each of 3 clicks giving 2 prefix samples
    events = EventLog([Event(f"s{s}", f"i{(s + j) % 4}", 10.0 * s + j)
                       for s in range(20) for j in range(3)])
    corpus = preprocess(events, min_item_count=1, min_session_len=2, test_fraction=0.1,
                        val_fraction=0.1, seed=0)
    n_train = len(corpus.splits["train"]) + len(corpus.splits["validation"])
    split = (n_train, len(corpus.splits["test"]), len(corpus_samples(corpus, "test")))
    ok = counts == expected and split == (18, 2, 4)
    criterion(10, ok, f"toy counts (rows, events, sessions, items, avg_len) {counts}; "
                      f"train+val/test sessions, test samples {split}")
    assert ok
