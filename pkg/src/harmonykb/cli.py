"""Command-line entry point: synthetic-KB generation, training, filtered
evaluation, triplet scoring, neighbourhood reports, and the analysis studies.

Every run resolves its configuration (defaults < config file < flags), echoes
it to the output directory as config.json, and writes command outputs next to
it.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .composition import ModelKind, hidden_dim
from .data import (
    DatasetSplits,
    Triplet,
    build_filter_index,
    generate_synthetic_kb,
    load_tsv,
    write_tsv,
)
from .evaluation import (
    Query,
    metrics_from_ranks,
    neighborhood_density_study,
    neighbors,
    optimization_effect_study,
    rank_split,
)
from .model import Model, triplet_scores, triplet_type_scores
from .perf import set_thread_budget, tune_allocator
from .training import TrainConfig, train

OUTPUT_DIR_ENV = "HARMONYKB_OUT"

_COMMON_DEFAULTS = {
    "out": None,  # resolved against the environment variable
    "seed": 0,
    "threads": 1,
    "deterministic": 1,
}

# Resolved-option defaults per command; config files may only set these keys.
DEFAULTS: dict[str, dict] = {
    "synth": {
        **_COMMON_DEFAULTS,
        "entities": 50,
        "relations": 5,
        "blocks": 5,
        "noise": 0.05,
        "seed": 7,
    },
    "train": {
        **_COMMON_DEFAULTS,
        "data": None,
        "model": "hhole",
        "dim": None,
        "entity_dim": None,
        "relation_dim": None,
        "lam": None,
        "batch_size": 512,
        "negatives": 500,
        "lr": 0.001,
        "loss": "logsoftmax",
        "margin": 1.0,
        "epochs": 50,
        "patience": 3,
    },
    "eval": {**_COMMON_DEFAULTS, "checkpoint": None, "data": None, "split": "test"},
    "score": {**_COMMON_DEFAULTS, "checkpoint": None, "input": None},
    "neighbors": {
        **_COMMON_DEFAULTS,
        "checkpoint": None,
        "data": None,
        "input": None,
        "k": 5,
        "space": "both",
    },
    "analyze-opt": {**_COMMON_DEFAULTS, "checkpoint": None, "data": None, "split": "valid"},
    "density": {
        **_COMMON_DEFAULTS,
        "checkpoint": None,
        "data": None,
        "labeled": None,
        "n_pos": 200,
        "n_neg": 200,
        "k": 5,
    },
}


class UsageError(Exception):
    """Inconsistent or incomplete run configuration."""


@dataclass
class RunConfig:
    command: str
    options: dict

    def outdir(self) -> Path:
        return Path(self.options["out"])


class _Parser(argparse.ArgumentParser):
    # Usage problems exit with status 1 (argparse defaults to 2).
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="harmonykb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_DIR_ENV} or ./harmonykb-out)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker-thread budget (recorded; compute is single-threaded)")
        p.add_argument("--deterministic", type=int, choices=(0, 1))

    p = sub.add_parser("synth", help="generate a synthetic block-structured KB")
    common(p)
    p.add_argument("--entities", type=int)
    p.add_argument("--relations", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", help="directory with train.tsv/valid.tsv/test.tsv")
    p.add_argument("--model", choices=[k.name.lower() for k in ModelKind])
    p.add_argument("--dim", type=int, help="entity = relation = hidden dimension")
    p.add_argument("--entity-dim", dest="entity_dim", type=int)
    p.add_argument("--relation-dim", dest="relation_dim", type=int)
    p.add_argument("--lambda", dest="lam", help="faithfulness strength (positive float or 'inf')")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=("logsoftmax", "margin"))
    p.add_argument("--margin", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)

    p = sub.add_parser("eval", help="filtered ranking metrics on a split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "valid", "test"))

    p = sub.add_parser("score", help="score triplets listed in a TSV file")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input")

    p = sub.add_parser("neighbors", help="nearest completions in type and token space")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--input", help="TSV queries with '?' in exactly one entity slot")
    p.add_argument("--k", type=int)
    p.add_argument("--space", choices=("type", "token", "both"))

    p = sub.add_parser("analyze-opt", help="harmony-gain vs rank-change study")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "valid", "test"))

    p = sub.add_parser("density", help="neighbourhood-density change study")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--labeled", help="TSV of head/relation/tail/{pos,neg}; sampled from --data when absent")
    p.add_argument("--n-pos", dest="n_pos", type=int)
    p.add_argument("--n-neg", dest="n_neg", type=int)
    p.add_argument("--k", type=int)

    return parser


def _parse_lambda(value) -> float | None:
    if value is None:
        return None
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinite", "infinity"):
        return "inf"
    try:
        lam = float(value)
    except ValueError:
        raise UsageError(f"--lambda must be a positive number or 'inf', got {value!r}") from None
    if lam <= 0:
        raise UsageError("--lambda must be positive")
    return lam


def parse_config(argv=None) -> RunConfig:
    """Resolve a run configuration: defaults, then config file, then flags."""
    ns = _build_parser().parse_args(argv)
    command = ns.command
    defaults = DEFAULTS[command]

    file_values = {}
    if ns.config:
        with open(ns.config, "r", encoding="utf-8") as fh:
            file_values = json.load(fh)
        unknown = sorted(set(file_values) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for {command!r}: {', '.join(unknown)}")

    flag_values = {
        k: v for k, v in vars(ns).items() if k in defaults and v is not None
    }
    options = {**defaults, **file_values, **flag_values}

    if options["out"] is None:
        options["out"] = os.environ.get(OUTPUT_DIR_ENV, "harmonykb-out")

    if command == "train":
        options["lam"] = _parse_lambda(options["lam"])
        _resolve_train_dims(options)
    return RunConfig(command=command, options=options)


def _resolve_train_dims(options: dict) -> None:
    kind = ModelKind.parse(options["model"])
    dim, d_e, d_r = options["dim"], options["entity_dim"], options["relation_dim"]
    if dim is not None:
        if (d_e is not None and d_e != dim) or (d_r is not None and d_r != dim):
            raise UsageError("--dim conflicts with --entity-dim/--relation-dim")
        d_e = d_r = dim
    if d_e is None:
        d_e = 16
    if d_r is None:
        d_r = d_e
    if kind is not ModelKind.HTPR and d_e != d_r:
        raise UsageError(
            f"{kind.name.lower()} requires equal entity and relation dimensions, got {d_e} vs {d_r}"
        )
    if kind.is_baseline:
        if options["lam"] is not None:
            raise UsageError("baseline models take no --lambda")
    else:
        if options["lam"] is None:
            raise UsageError(f"{kind.name.lower()} requires --lambda (a positive value or 'inf')")
    options["entity_dim"], options["relation_dim"] = d_e, d_r
    options["dim"] = hidden_dim(kind, d_e, d_r)


def _echo_config(cfg: RunConfig) -> None:
    out = cfg.outdir()
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": cfg.command, **{k: cfg.options[k] for k in sorted(cfg.options)}}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def _load_splits(options: dict, model: Model | None = None) -> DatasetSplits:
    """Load train/valid/test TSVs.

    When a model is given, names resolve through its checkpoint vocabulary so
    triplet ids match the embedding tables regardless of file ordering; names
    the model has never seen are an error.
    """
    data_dir = options.get("data")
    if not data_dir:
        raise UsageError("--data directory is required")
    root = Path(data_dir)
    for name in ("train.tsv", "valid.tsv", "test.tsv"):
        if not (root / name).exists():
            raise FileNotFoundError(f"dataset file not found: {root / name}")
    vocab = model.vocab.copy() if model is not None else None
    train_t, vocab = load_tsv(root / "train.tsv", vocab)
    valid_t, vocab = load_tsv(root / "valid.tsv", vocab)
    test_t, vocab = load_tsv(root / "test.tsv", vocab)
    if model is not None and (
        vocab.n_entities != model.vocab.n_entities
        or vocab.n_relations != model.vocab.n_relations
    ):
        raise UsageError(
            "dataset contains entity or relation names unknown to the checkpoint"
        )
    return DatasetSplits(train=train_t, valid=valid_t, test=test_t, vocab=vocab)


def _load_model(options: dict) -> Model:
    path = options.get("checkpoint")
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint file not found: {path}")
    return load_checkpoint(path)


def _cmd_synth(cfg: RunConfig) -> None:
    o = cfg.options
    splits = generate_synthetic_kb(o["entities"], o["relations"], o["blocks"], o["noise"], o["seed"])
    out = cfg.outdir()
    write_tsv(out / "train.tsv", splits.train, splits.vocab)
    write_tsv(out / "valid.tsv", splits.valid, splits.vocab)
    write_tsv(out / "test.tsv", splits.test, splits.vocab)
    truth = splits.truth
    payload = {
        "n_blocks": truth.n_blocks,
        "noise": truth.noise,
        "seed": truth.seed,
        "compatible": {
            splits.vocab.relation_names[rel]: sorted(pairs)
            for rel, pairs in enumerate(truth.compatible)
        },
    }
    (out / "truth.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {len(splits.train)}/{len(splits.valid)}/{len(splits.test)} triplets to {out}")


def _cmd_train(cfg: RunConfig) -> None:
    o = cfg.options
    splits = _load_splits(o)
    kind = ModelKind.parse(o["model"])
    tc = TrainConfig(
        batch_size=o["batch_size"],
        negatives=o["negatives"],
        learning_rate=o["lr"],
        margin=o["margin"],
        loss_kind=o["loss"],
        seed=o["seed"],
        max_epochs=o["epochs"],
        patience=o["patience"],
    )
    lam = None if o["lam"] == "inf" else o["lam"]
    out = cfg.outdir()
    with open(out / "train_log.tsv", "w", encoding="utf-8", newline="\n") as log:
        result = train(
            splits, kind, o["entity_dim"], o["relation_dim"], lam, tc, log=log
        )
    save_checkpoint(result.best, out / "checkpoint.ggrf")
    best = result.history[result.best_epoch - result.history[0].epoch].metrics if result.history else None
    if best is not None:
        print(f"best epoch {result.best_epoch}: val MRR {best.mrr:.4f}, Hits@10 {best.hits[10]:.4f}")
    print(f"checkpoint written to {out / 'checkpoint.ggrf'}")


def _write_metrics_report(out: Path, records, metrics) -> None:
    with open(out / "metrics.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mean_rank\tmrr\thits1\thits3\thits10\tn_queries\n")
        fh.write(metrics.as_row() + "\n")
    with open(out / "query_ranks.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            row = {"query": rec.index, "side": rec.side, "rank": rec.rank}
            if rec.delta_h is not None:
                row["delta_h"] = rec.delta_h
            fh.write(json.dumps(row) + "\n")


def _cmd_eval(cfg: RunConfig) -> None:
    o = cfg.options
    model = _load_model(o)
    splits = _load_splits(o, model)
    known = build_filter_index(splits)
    split = getattr(splits, o["split"])
    if not split:
        raise UsageError(f"split {o['split']!r} is empty")
    records = rank_split(split, model, known)
    if not model.kind.is_baseline and model.lam is not None:
        trip = np.asarray(split, dtype=np.intp)
        token = triplet_scores(model, trip[:, 0], trip[:, 1], trip[:, 2])
        typ = triplet_type_scores(model, trip[:, 0], trip[:, 1], trip[:, 2])
        deltas = np.asarray(token) - np.asarray(typ)
        for rec in records:
            rec.delta_h = float(deltas[rec.index])
    metrics = metrics_from_ranks([r.rank for r in records])
    _write_metrics_report(cfg.outdir(), records, metrics)
    print(
        f"{o['split']}: MR {metrics.mean_rank:.2f}  MRR {metrics.mrr:.4f}  "
        f"Hits@1 {metrics.hits[1]:.4f}  Hits@3 {metrics.hits[3]:.4f}  "
        f"Hits@10 {metrics.hits[10]:.4f}  ({metrics.n_queries} queries)"
    )


def _read_query_file(path: str, vocab, allow_hole: bool):
    """Parse TSV query lines, resolving names through the checkpoint vocab.

    With allow_hole, exactly one entity slot must be '?'; returns
    (Triplet with 0 in the missing slot, missing_side) pairs, otherwise
    (Triplet, None) pairs for full triplets.
    """
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            head, rel_name, tail = fields
            holes = (head == "?") + (tail == "?")
            if allow_hole and holes != 1:
                raise ValueError(f"{path}:{lineno}: exactly one entity slot must be '?'")
            if not allow_hole and holes != 0:
                raise ValueError(f"{path}:{lineno}: '?' is only valid in neighbour queries")
            try:
                rel = vocab.lookup_relation(rel_name)
                if head == "?":
                    rows.append((Triplet(0, rel, vocab.lookup_entity(tail)), "left"))
                elif tail == "?":
                    rows.append((Triplet(vocab.lookup_entity(head), rel, 0), "right"))
                else:
                    rows.append(
                        (Triplet(vocab.lookup_entity(head), rel, vocab.lookup_entity(tail)), None)
                    )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown name {exc}") from None
    return rows


def _cmd_score(cfg: RunConfig) -> None:
    o = cfg.options
    model = _load_model(o)
    if not o.get("input"):
        raise UsageError("--input query file is required")
    rows = _read_query_file(o["input"], model.vocab, allow_hole=False)
    trip = np.asarray([t for t, _ in rows], dtype=np.intp)
    scores = triplet_scores(model, trip[:, 0], trip[:, 1], trip[:, 2])
    harmonic = not model.kind.is_baseline and model.lam is not None
    if harmonic:
        typ = triplet_type_scores(model, trip[:, 0], trip[:, 1], trip[:, 2])
    out = cfg.outdir()
    with open(out / "scores.tsv", "w", encoding="utf-8", newline="\n") as fh:
        header = "head\trelation\ttail\tscore"
        fh.write(header + ("\ttype_score\tdelta_h\n" if harmonic else "\n"))
        for i, (t, _) in enumerate(rows):
            names = (
                model.vocab.entity_names[t.left],
                model.vocab.relation_names[t.rel],
                model.vocab.entity_names[t.right],
            )
            line = "\t".join(names) + f"\t{scores[i]:.9g}"
            if harmonic:
                line += f"\t{typ[i]:.9g}\t{scores[i] - typ[i]:.9g}"
            fh.write(line + "\n")
    print(f"scored {len(rows)} triplets -> {out / 'scores.tsv'}")


def _anchor_completion(t: Triplet, side: str, model: Model) -> Triplet:
    """Fill the '?' slot with the model's top-scoring completion, which then
    anchors the neighbourhood."""
    ids = np.arange(model.n_entities)
    if side == "left":
        scores = triplet_scores(model, ids, np.full(ids.size, t.rel), np.full(ids.size, t.right))
        return Triplet(int(np.argmax(scores)), t.rel, t.right)
    scores = triplet_scores(model, np.full(ids.size, t.left), np.full(ids.size, t.rel), ids)
    return Triplet(t.left, t.rel, int(np.argmax(scores)))


def _cmd_neighbors(cfg: RunConfig) -> None:
    o = cfg.options
    model = _load_model(o)
    splits = _load_splits(o, model)
    known = build_filter_index(splits)
    if not o.get("input"):
        raise UsageError("--input query file is required")
    rows = _read_query_file(o["input"], model.vocab, allow_hole=True)
    spaces = ("type", "token") if o["space"] == "both" else (o["space"],)
    out = cfg.outdir()
    with open(out / "neighbors.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("head\trelation\ttail\tmissing_side\tanchor\tspace\tn\tentity\tdistance\tknown_fact\n")
        for t, side in rows:
            anchored = _anchor_completion(t, side, model)
            anchor_name = model.vocab.entity_names[
                anchored.left if side == "left" else anchored.right
            ]
            head_name = "?" if side == "left" else model.vocab.entity_names[t.left]
            tail_name = "?" if side == "right" else model.vocab.entity_names[t.right]
            rel_name = model.vocab.relation_names[t.rel]
            for space in spaces:
                rep = neighbors(Query(anchored, side), model, known, k=o["k"], space=space)
                for n, (name, dist, flag) in enumerate(rep.neighbors, start=1):
                    fh.write(
                        f"{head_name}\t{rel_name}\t{tail_name}\t{side}\t{anchor_name}\t"
                        f"{space}\t{n}\t{name}\t{dist:.9g}\t{int(flag)}\n"
                    )
    print(f"wrote neighbour report -> {out / 'neighbors.tsv'}")


def _cmd_analyze_opt(cfg: RunConfig) -> None:
    o = cfg.options
    model = _load_model(o)
    splits = _load_splits(o, model)
    known = build_filter_index(splits)
    split = getattr(splits, o["split"])
    if not split:
        raise UsageError(f"split {o['split']!r} is empty")
    report = optimization_effect_study(split, model, known)
    out = cfg.outdir()
    with open(out / "opt_effect.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# scatter: centred harmony change vs rank change per query\n")
        fh.write(f"# mean_delta_h\t{report.mean_delta_h:.9g}\n")
        fh.write("delta_h_centred\tdelta_rank\n")
        for (_, _, dh, rank_token, rank_type) in report.rows:
            fh.write(f"{dh - report.mean_delta_h:.9g}\t{rank_token - rank_type}\n")
    summary = {
        "rho_rank": report.rho_rank,
        "rho_mrr_all": report.rho_mrr_all,
        "rho_mrr_changed": report.rho_mrr_changed,
        "mean_delta_h": report.mean_delta_h,
        "n_queries": len(report.rows),
        "conditions": report.conditions,
    }
    (out / "opt_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


def _read_labeled_file(path: str, vocab) -> list:
    """TSV "head<TAB>relation<TAB>tail<TAB>label" with labels pos/neg."""
    labeled = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            head, rel, tail, label = fields
            try:
                t = Triplet(
                    vocab.lookup_entity(head), vocab.lookup_relation(rel), vocab.lookup_entity(tail)
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown name {exc}") from None
            labeled.append((t, label.strip().lower()))
    return labeled


def _sampled_labeled_set(o: dict, model: Model, splits, known) -> list:
    """Sampled positives from the KB plus uniformly corrupted negatives."""
    rng = np.random.default_rng([o["seed"], 3])
    pool = splits.all_triplets()
    if o["n_pos"] > len(pool):
        raise UsageError(f"--n-pos {o['n_pos']} exceeds the {len(pool)} known triplets")
    pos_idx = rng.choice(len(pool), size=o["n_pos"], replace=False)
    labeled = [(pool[i], "pos") for i in pos_idx]
    n_entities = model.n_entities
    negatives: list[Triplet] = []
    while len(negatives) < o["n_neg"]:
        base = pool[int(rng.integers(0, len(pool)))]
        side = int(rng.integers(0, 2))
        repl = int(rng.integers(0, n_entities))
        cand = Triplet(repl, base.rel, base.right) if side == 0 else Triplet(base.left, base.rel, repl)
        if cand not in known:
            negatives.append(cand)
    return labeled + [(t, "neg") for t in negatives]


def _cmd_density(cfg: RunConfig) -> None:
    o = cfg.options
    model = _load_model(o)
    splits = _load_splits(o, model)
    known = build_filter_index(splits)
    if o.get("labeled"):
        labeled = _read_labeled_file(o["labeled"], model.vocab)
    else:
        labeled = _sampled_labeled_set(o, model, splits, known)
    report = neighborhood_density_study(labeled, model, known, k=o["k"])
    payload = {
        "delta_density_pos": report.delta_density_pos,
        "delta_density_neg": report.delta_density_neg,
        "t_pos": report.t_pos,
        "t_neg": report.t_neg,
        "n_queries_pos": report.n_queries_pos,
        "n_queries_neg": report.n_queries_neg,
        "k": o["k"],
    }
    (cfg.outdir() / "density.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "score": _cmd_score,
    "neighbors": _cmd_neighbors,
    "analyze-opt": _cmd_analyze_opt,
    "density": _cmd_density,
}


def dispatch(cfg: RunConfig) -> int:
    """Run one resolved command, echoing the configuration for provenance."""
    set_thread_budget(cfg.options.get("threads", 1))
    _echo_config(cfg)
    _HANDLERS[cfg.command](cfg)
    return 0


def main(argv=None) -> int:
    tune_allocator()
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"harmonykb: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return dispatch(cfg)
    except UsageError as exc:
        print(f"harmonykb: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures surface on stderr with exit 2
        print(f"harmonykb: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
