"""Command-line entry point: ``dndrec {preprocess,train,evaluate,recommend,report}``.

Every command accepts ``--config PATH``, ``--seed N``, ``--out DIR`` and
``--jobs N``; explicit flags win over values from the config file. Each written
artifact embeds the resolved configuration and the build identifier.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import kernels
from .config import ExperimentConfig, apply_overrides, load_config
from .container import build_id
from .dataset import Sample, ingest_events, load_corpus, pad_batch, preprocess, save_corpus
from .errors import (ConfigError, DndError, FormatError, StaleIndexError,
                     UnsupportedDecoderError)
from .evaluation import ItemKNN, Pop, SPop, evaluate
from .model import ModelConfig
from .retrieval import (TopLResult, load_index, precompute_candidates,
                        recommend, save_index)
from .training import (DEFAULT_GRIDS, aggregate, grid_search, load_checkpoint,
                       run_replicates)

logger = logging.getLogger("dndrec")

BASELINES = {"pop": Pop, "spop": SPop, "itemknn": ItemKNN}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _envelope(cfg: ExperimentConfig, **body) -> dict:
    return {"build": build_id(), "config": cfg.resolved(), **body}


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if "/" in tok:
            num, den = tok.split("/")
            out.append(float(num) / float(den))
        else:
            out.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
    return out


# ----------------------------------------------------------------- commands


def cmd_preprocess(args, cfg: ExperimentConfig) -> int:
    path = args.input or cfg.data.path
    if not path:
        raise ConfigError("no input file (argument or [data] path)")
    cfg.data.path = str(path)
    for key in ("gap", "session_col", "item_col", "time_col", "date_format", "delimiter"):
        if getattr(args, key) is not None:
            setattr(cfg.data, key, getattr(args, key))
    for key in ("min_item_count", "min_session_len", "test_fraction", "val_fraction"):
        if getattr(args, key) is not None:
            setattr(cfg.preprocess, key, getattr(args, key))
    log = ingest_events(path, cfg.data.event_format())
    p = cfg.preprocess
    corpus = preprocess(log, p.min_item_count, p.min_session_len, cfg.data.gap,
                        p.test_fraction, p.val_fraction, cfg.run.seed)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = {**corpus.stats(), "raw_events": len(log), "malformed_rows": log.malformed}
    save_corpus(corpus, out / "corpus.sbrc", _envelope(cfg))
    _write_json(out / "stats.json", _envelope(cfg, stats=stats))
    print(json.dumps(stats, sort_keys=True))
    return 0


def _train_dir(cfg: ExperimentConfig, mc: ModelConfig) -> Path:
    emb = "" if mc.share_embeddings else "-sepemb"
    cd = f"-cd{mc.candidate_dropout:g}" if mc.candidate_dropout else ""
    return Path(cfg.run.out) / f"{mc.encoder}+{mc.decoder}{emb}{cd}"


def cmd_train(args, cfg: ExperimentConfig) -> int:
    corpus_path = args.corpus or str(Path(cfg.run.out) / "corpus.sbrc")
    if args.dry_run:
        resolved = cfg.resolved()
        resolved["corpus"] = corpus_path
        resolved["seeds"] = args.seeds
        resolved["grid"] = args.grid
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return 0
    corpus, cmeta = load_corpus(corpus_path)
    dataset = cmeta.get("config", {}).get("data", {}).get("name") or Path(corpus_path).stem
    mc = cfg.model_config(corpus.num_items)
    tc = cfg.train_config()
    seeds = [tc.seed + i for i in range(args.seeds or 1)]
    out = _train_dir(cfg, mc)
    if args.grid:
        axis, _, values = args.grid.partition("=")
        if axis not in DEFAULT_GRIDS and not values:
            raise ConfigError(f"no default grid for {axis!r}; give values as {axis}=a,b,c")
        grid = {axis: _parse_values(values) if values else DEFAULT_GRIDS[axis]}
        result = grid_search(mc, tc, corpus, grid, seeds, jobs=cfg.run.jobs,
                             out_dir=out / f"grid-{axis}")
        points = []
        for point, runs in zip(result.points, result.runs):
            agg = aggregate(runs)
            points.append({"point": point, "val_hr20": [r.best_value["hr"] for r in runs],
                           "test": [r.test for r in runs], "mean": agg.mean, "std": agg.std})
        summary = _envelope(cfg, kind="grid", dataset=dataset, grid=grid, best=result.best,
                            best_val_hr20=result.best_score, points=points,
                            model=replace(mc, **result.best).to_dict())
        _write_json(out / f"grid-{axis}" / "summary.json", summary)
        print(json.dumps({"runs": len(points) * len(seeds), "best": result.best,
                          "best_val_hr20": result.best_score}, sort_keys=True))
        return 0
    res = run_replicates(mc, tc, corpus, seeds=seeds, jobs=cfg.run.jobs, out_dir=out)
    summary = _envelope(cfg, kind="replicates", dataset=dataset, model=mc.to_dict(),
                        name=out.name, **res.summary(),
                        runs=[{k: v for k, v in r.summary().items() if k != "history"}
                              for r in res.runs])
    _write_json(out / "summary.json", summary)
    print(json.dumps({"name": out.name, **res.summary()}, sort_keys=True))
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    corpus_path = args.corpus or str(Path(cfg.run.out) / "corpus.sbrc")
    corpus, cmeta = load_corpus(corpus_path)
    dataset = cmeta.get("config", {}).get("data", {}).get("name") or Path(corpus_path).stem
    k = cfg.train_config().k if args.k is None else args.k
    if args.baseline:
        scorer = BASELINES[args.baseline](corpus)
        name = scorer.name
        source = {"baseline": args.baseline}
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint or --baseline")
        scorer, meta = load_checkpoint(args.checkpoint)
        if scorer.num_items != corpus.num_items:
            raise FormatError(f"checkpoint has {scorer.num_items} items, corpus "
                              f"{corpus.num_items}")
        name = scorer.name
        source = {"checkpoint": str(args.checkpoint), "fingerprint": meta["fingerprint"],
                  "checkpoint_build": meta.get("build")}
    report = evaluate(scorer, corpus, args.split, k, model_name=name, dataset=dataset)
    out = Path(cfg.run.out)
    payload = _envelope(cfg, split=args.split, source=source, report=asdict(report))
    _write_json(out / f"metrics-{name}-{args.split}.json", payload)
    (out / f"metrics-{name}-{args.split}.csv").write_text(report.to_csv())
    print(report.to_json())
    return 0


def _read_sequence(args) -> list[int]:
    tokens = args.items if args.items else sys.stdin.read().replace(",", " ").split()
    if not tokens:
        raise ConfigError("no item ids given (arguments or stdin)")
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise ConfigError(f"item ids must be integers: {exc}") from exc


def cmd_recommend(args, cfg: ExperimentConfig) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    seq = _read_sequence(args)
    if args.index:
        index, _ = load_index(args.index)
        if index.model_hash != model.fingerprint():
            raise StaleIndexError("index was built from a different model")
        result = recommend(model, index, seq, args.L, exact=args.exact or None)
    else:
        try:
            index = precompute_candidates(model)
        except UnsupportedDecoderError:
            # full decoder forward; cost grows with the pool size
            if any(not 0 <= x < model.num_items for x in seq):
                raise IndexError(f"item id out of range [0, {model.num_items})")
            scores = model.score(pad_batch([Sample(tuple(seq[-20:]), 0)], model.pad_id))[0]
            ids, vals = kernels.topl_select(np.ascontiguousarray(scores), args.L)
            result = TopLResult(ids, vals)
        else:
            if args.graph:
                index.with_graph(seed=cfg.run.seed)
            if args.save_index:
                save_index(index, args.save_index, _envelope(cfg))
            result = recommend(model, index, seq, args.L, exact=not args.graph)
    print(json.dumps(result.to_json()))
    return 0


def _runs_from(paths) -> tuple[list[dict], list[dict]]:
    rows, curves = [], []
    for root in paths:
        root = Path(root)
        if not root.exists():
            raise FileNotFoundError(f"no such run directory {root}")
        for summary_path in sorted(root.rglob("summary.json")):
            summary = json.loads(summary_path.read_text())
            if summary.get("kind") != "replicates":
                continue
            hr = np.array([r["test"]["hr"] for r in summary["runs"]])
            mrr = np.array([r["test"]["mrr"] for r in summary["runs"]])
            k = summary["config"]["train"]["k"]
            rows.append({"model": summary["name"], "dataset": summary.get("dataset", ""),
                         "n_seeds": len(hr),
                         f"HR@{k}_mean": f"{100 * hr.mean():.2f}",
                         f"HR@{k}_std": f"{100 * hr.std():.2f}",
                         f"MRR@{k}_mean": f"{100 * mrr.mean():.2f}",
                         f"MRR@{k}_std": f"{100 * mrr.std():.2f}",
                         f"HR@{k}": f"{100 * hr.mean():.2f} ± {100 * hr.std():.2f}",
                         f"MRR@{k}": f"{100 * mrr.mean():.2f} ± {100 * mrr.std():.2f}"})
            for log_path in sorted(summary_path.parent.glob("seed*/run.jsonl")):
                seed = int(log_path.parent.name[len("seed"):])
                for line in log_path.read_text().splitlines():
                    rec = json.loads(line)
                    curves.append({"model": summary["name"], "seed": seed, **rec})
    return rows, curves


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_report(args, cfg: ExperimentConfig) -> int:
    rows, curves = _runs_from(args.runs or [cfg.run.out])
    if not rows:
        raise FormatError("no replicate summaries found")
    out = Path(cfg.run.out)
    _write_csv(out / "table.csv", rows)
    _write_csv(out / "curves.csv", curves)
    _write_json(out / "report.json", _envelope(cfg, rows=rows))
    print((out / "table.csv").read_text(), end="")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI experiment config")
    shared.add_argument("--seed", type=int, help="base random seed")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--jobs", type=int, help="parallel worker processes")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dndrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[shared], help="raw events -> SBRC1 corpus")
    p.add_argument("input", nargs="?", help="delimited event file")
    p.add_argument("--gap", type=float, help="inactivity gap in seconds (sessionize by user)")
    p.add_argument("--delimiter")
    p.add_argument("--session-col", dest="session_col")
    p.add_argument("--item-col", dest="item_col")
    p.add_argument("--time-col", dest="time_col")
    p.add_argument("--date-format", dest="date_format")
    p.add_argument("--min-item-count", dest="min_item_count", type=int)
    p.add_argument("--min-session-len", dest="min_session_len", type=int)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[shared], help="fit models, write checkpoints")
    p.add_argument("--corpus", help="SBRC1 corpus (default OUT/corpus.sbrc)")
    p.add_argument("--encoder", choices=["gru4rec", "narm", "srgnn"])
    p.add_argument("--decoder", choices=["linear", "decoupled", "mlp", "mos"])
    p.add_argument("--emb-dim", dest="emb_dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--candidate-dropout", dest="candidate_dropout", type=float)
    p.add_argument("--session-dropout", dest="session_dropout", type=float)
    p.add_argument("--encoder-dropout", dest="encoder_dropout", type=float)
    p.add_argument("--sepemb", dest="share_embeddings", action="store_const", const=False,
                   help="separate input and candidate embeddings")
    p.add_argument("--mlp-layers", dest="mlp_layers", type=int)
    p.add_argument("--mos-k", dest="mos_k", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--seeds", type=int, help="number of replicate seeds (base seed + 0..n-1)")
    p.add_argument("--grid", help="grid axis, e.g. candidate_dropout or mos_k=2,4")
    p.add_argument("--dry-run", dest="dry_run", action="store_true",
                   help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[shared], help="HR@k / MRR@k of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=sorted(BASELINES))
    p.add_argument("--corpus")
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", parents=[shared], help="top-L items for a session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("items", nargs="*", help="item ids (default: read from stdin)")
    p.add_argument("-L", "--top", dest="L", type=int, default=20)
    p.add_argument("--index", help="SBRI1 index built from the same checkpoint")
    p.add_argument("--graph", action="store_true", help="build a graph index for the query")
    p.add_argument("--save-index", dest="save_index", help="write the candidate index here")
    p.add_argument("--exact", action="store_true", help="ignore the graph, scan all items")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("report", parents=[shared], help="aggregate runs into CSV tables")
    p.add_argument("runs", nargs="*", help="run directories (default OUT)")
    p.set_defaults(func=cmd_report)
    return parser


_MODEL_TRAIN_FLAGS = ("encoder", "decoder", "emb_dim", "hidden", "candidate_dropout",
                      "session_dropout", "encoder_dropout", "share_embeddings", "mlp_layers",
                      "mos_k", "batch_size", "lr", "max_epochs", "patience", "clip_norm")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        flags = {"seed": args.seed, "out": args.out, "jobs": args.jobs}
        flags.update({k: getattr(args, k, None) for k in _MODEL_TRAIN_FLAGS})
        cfg = apply_overrides(cfg, **flags)
        if cfg.run.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args, cfg)
    except (DndError, ValueError, OSError, IndexError, KeyError) as exc:
        print(f"dndrec {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
