"""Command-line interface.

Every subcommand writes its outputs plus a ``manifest.json`` holding the
resolved configuration, input digests and the canonical argument list that
reproduces the run. Settings resolve as flags > config file >
``TOPICFORGE_SEED`` (seed only) > built-in defaults.

Exit status: 0 on success, 2 on validation errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .corpus import (
    build_vocabulary,
    concat_corpora,
    cooccurrence_stats,
    generate_synthetic,
    ingest_baskets,
    noise_documents,
    split_corpus,
)
from .errors import TopicForgeError, ValidationError
from .gibbs import ChainConfig, HyperParams, PosteriorSample, run_chains
from .heldout import HeldoutConfig, perplexity
from .metrics import RHAT_ACCEPTABLE, TOP_N, credibility_all, distinctiveness_all, rhat, topic_coherence
from .summary import (
    ClusteredModel,
    constrained_ahc,
    evaluate_samples,
    filter_clusters,
    pool_topics,
    sweep,
)

log = logging.getLogger("topicforge")

SEED_ENV = "TOPICFORGE_SEED"

DEFAULTS = {
    "ingest": dict(vocab_size=10_000, min_basket_size=3, test_fraction=0.1, seed=0),
    "synth": dict(topics=5, vocab=50, docs=2000, doc_len="5,12", alpha=0.1, noise_topics=0, noise_docs=0,
                  noise_concentration=1.0, test_fraction=0.1, seed=0),
    "train": dict(topics=50, alpha_sum=3.0, beta=0.01, iterations=50_000, burn_in=30_000, lag=5_000,
                  chains=4, first_chain=0, loglik_every=10, store_theta=False, seed=0, jobs=1),
    "evaluate": dict(particles=30, top_n=TOP_N, seed=0),
    "cluster": dict(threshold=0.35, min_size=10, within_sample=False, top_n=TOP_N),
    "sweep": dict(thresholds="0:0.55:0.05", min_sizes="1,5,10,20", within_sample=False, particles=30,
                  alpha_sum=3.0, top_n=TOP_N, seed=0, jobs=1),
    "report": dict(plots=False, top_n=TOP_N),
    "diag": dict(discard=0.5, limit=RHAT_ACCEPTABLE),
}

# Options whose values are file-system paths to inputs; digested into the manifest.
INPUT_KEYS = ("baskets", "corpus", "samples", "replication", "test", "train", "cooc", "sweep_csv", "model", "traces")


def _add_common(p: argparse.ArgumentParser, seed=True, jobs=False):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key=value file")
    if seed:
        p.add_argument("--seed", type=int)
    if jobs:
        p.add_argument("--jobs", type=int, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topicforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"topicforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("ingest", help="JSON-lines baskets -> encoded corpus", argument_default=S)
    p.add_argument("--baskets", required=True)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--min-basket-size", type=int)
    p.add_argument("--test-fraction", type=float)
    _add_common(p)

    p = sub.add_parser("synth", help="synthetic corpus with planted topics", argument_default=S)
    p.add_argument("--topics", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--docs", type=int)
    p.add_argument("--doc-len", help="N or LO,HI")
    p.add_argument("--alpha", type=float, help="symmetric per-topic concentration of the truth")
    p.add_argument("--noise-topics", type=int)
    p.add_argument("--noise-docs", type=int)
    p.add_argument("--noise-concentration", type=float)
    p.add_argument("--test-fraction", type=float)
    _add_common(p)

    p = sub.add_parser("train", help="collapsed Gibbs LDA chains", argument_default=S)
    p.add_argument("--corpus", required=True)
    p.add_argument("--topics", type=int)
    p.add_argument("--alpha-sum", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--lag", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--first-chain", type=int, help="id of the first chain (use disjoint ids for replications)")
    p.add_argument("--loglik-every", type=int)
    p.add_argument("--store-theta", action="store_const", const=True)
    _add_common(p, jobs=True)

    p = sub.add_parser("evaluate", help="perplexity / NPMI / CD_min / credibility of samples", argument_default=S)
    p.add_argument("--samples", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train", help="reference corpus for co-occurrence counts")
    p.add_argument("--cooc", help="cached co-occurrence CSV (instead of --train)")
    p.add_argument("--particles", type=int)
    p.add_argument("--top-n", type=int)
    _add_common(p)

    p = sub.add_parser("cluster", help="cluster pooled topics and filter by recurrence", argument_default=S)
    p.add_argument("--samples", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-size", type=int)
    p.add_argument("--within-sample", action="store_const", const=True)
    p.add_argument("--corpus", help="corpus with vocabulary, for topic cards")
    p.add_argument("--top-n", type=int)
    _add_common(p, seed=False)

    p = sub.add_parser("sweep", help="evaluate a threshold x min-size grid", argument_default=S)
    p.add_argument("--samples", required=True)
    p.add_argument("--replication", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train")
    p.add_argument("--cooc")
    p.add_argument("--thresholds", help="START:STOP:STEP (inclusive) or comma list")
    p.add_argument("--min-sizes", help="comma list")
    p.add_argument("--within-sample", action="store_const", const=True)
    p.add_argument("--particles", type=int)
    p.add_argument("--alpha-sum", type=float)
    p.add_argument("--top-n", type=int)
    _add_common(p, jobs=True)

    p = sub.add_parser("report", help="plot-ready tables and topic cards", argument_default=S)
    p.add_argument("--sweep-csv", dest="sweep_csv")
    p.add_argument("--model")
    p.add_argument("--samples")
    p.add_argument("--corpus")
    p.add_argument("--plots", action="store_const", const=True, help="also write SVG figures")
    p.add_argument("--top-n", type=int)
    _add_common(p, seed=False)

    p = sub.add_parser("diag", help="R-hat on log-likelihood traces", argument_default=S)
    p.add_argument("--traces", required=True)
    p.add_argument("--discard", type=float, help="leading fraction of each trace to drop")
    p.add_argument("--limit", type=float)
    _add_common(p, seed=False)
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _convert(parser: argparse.ArgumentParser, key: str, value):
    for action in parser._actions:
        if action.dest == key:
            if action.const is True:
                return str(value).lower() in ("1", "true", "yes", "on")
            return action.type(value) if action.type else value
    raise ValidationError(f"unknown config key {key!r}")


def resolve(sub: argparse.ArgumentParser, command: str, given: dict) -> dict:
    cfg = dict(DEFAULTS.get(command, {}))
    if "seed" in cfg and os.environ.get(SEED_ENV):
        cfg["seed"] = int(os.environ[SEED_ENV])
    if given.get("config"):
        for k, v in read_config(given["config"]).items():
            cfg[k] = _convert(sub, k, v)
    cfg.update({k: v for k, v in given.items() if k not in ("config", "command", "verbose")})
    return cfg


def canonical_argv(command: str, cfg: dict) -> list[str]:
    argv = [command]
    for key in sorted(cfg):
        if key == "out" or cfg[key] is None:
            continue
        flag = "--" + key.replace("_", "-")
        value = cfg[key]
        if isinstance(value, bool):
            if value:
                argv.append(flag)
            continue
        argv += [flag, str(value)]
    return argv


def write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    inputs = {}
    for key in INPUT_KEYS:
        path = cfg.get(key)
        if path and Path(path).is_file():
            inputs[key] = {"path": str(path), "sha256": io.sha256_file(path)}
        elif path and Path(path).is_dir():
            files = sorted(p for p in Path(path).iterdir() if p.is_file() and p.name != "manifest.json")
            inputs[key] = {"path": str(path), "files": {p.name: io.sha256_file(p) for p in files}}
    manifest = {
        "tool": "topicforge", "version": __version__, "command": command,
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "argv": canonical_argv(command, cfg), "inputs": inputs,
    }
    if extra:
        manifest.update(extra)
    io.write_json(out / "manifest.json", manifest)


def parse_grid(spec: str) -> list[float]:
    spec = str(spec)
    if ":" in spec:
        start, stop, step = (float(x) for x in spec.split(":"))
        n = int(round((stop - start) / step))
        return [round(start + i * step, 10) for i in range(n + 1)]
    return [float(x) for x in spec.split(",") if x.strip()]


def parse_doc_len(spec):
    parts = [int(x) for x in str(spec).split(",")]
    return parts[0] if len(parts) == 1 else tuple(parts)


def _cooc(cfg):
    if cfg.get("cooc"):
        return io.read_cooc(cfg["cooc"])
    if cfg.get("train"):
        return cooccurrence_stats(io.read_corpus(cfg["train"]))
    raise ValidationError("need --train or --cooc for co-occurrence counts")


def emit_topic_cards(model, vocab, top_n: int = TOP_N, S: int | None = None) -> list[dict]:
    """Top products of each topic (or clustered topic) as card dictionaries.

    ``model`` is a ClusteredModel or a PosteriorSample. Cards of clustered
    topics carry ``recurrence`` and the ratio ``recurrence / S``.
    """
    if isinstance(model, ClusteredModel):
        rows = model.centroids if model.n_clusters else np.zeros((0, len(vocab.labels) if vocab else 0))
        sizes = list(model.sizes)
        S = S or model.S
    elif isinstance(model, PosteriorSample):
        rows, sizes = model.phi, [None] * model.K
    else:
        rows, sizes = np.atleast_2d(np.asarray(model, dtype=np.float64)), [None] * len(model)
    labels = vocab.labels if vocab is not None else tuple(str(v) for v in range(rows.shape[1]))
    if rows.shape[1] != len(labels):
        raise ValidationError("vocabulary does not cover the topic dimension")
    cards = []
    for k, (row, size) in enumerate(zip(rows, sizes)):
        order = np.lexsort((np.arange(row.size), -row))[:top_n]
        card = {"topic": k, "products": [{"label": labels[v], "probability": float(row[v])} for v in order]}
        if size is not None:
            card["recurrence"] = int(size)
            if S:
                card["credibility_ratio"] = f"{int(size)}/{S}"
        cards.append(card)
    return cards


def format_cards(cards: list[dict]) -> str:
    lines = []
    for c in cards:
        head = f"Topic {c['topic']}"
        if "credibility_ratio" in c:
            head += f"  (credibility {c['credibility_ratio']})"
        lines.append(head)
        lines += [f"  {p['probability']:.4f}  {p['label']}" for p in c["products"]]
        lines.append("")
    return "\n".join(lines)


def _write_corpus_bundle(out: Path, corpus, test_fraction: float, seed: int) -> dict:
    io.write_corpus(out / "corpus.jsonl", corpus)
    info = {"D": corpus.D, "N": corpus.N, "V": corpus.V}
    train = corpus
    if test_fraction > 0:
        train, test = split_corpus(corpus, test_fraction, seed)
        io.write_corpus(out / "train.jsonl", train)
        io.write_corpus(out / "test.jsonl", test)
        info.update(train_docs=train.D, test_docs=test.D)
    io.write_cooc(out / "cooc.csv", cooccurrence_stats(train))
    return info


def cmd_ingest(cfg, out: Path) -> dict:
    vocab = build_vocabulary(io.read_baskets(cfg["baskets"]), cfg["vocab_size"])
    corpus = ingest_baskets(io.read_baskets(cfg["baskets"]), vocab, cfg["min_basket_size"])
    info = _write_corpus_bundle(out, corpus, cfg["test_fraction"], cfg["seed"])
    info["ingest"] = vars(corpus.summary)
    io.write_json(out / "summary.json", info)
    return info


def cmd_synth(cfg, out: Path) -> dict:
    K, V = cfg["topics"], cfg["vocab"]
    doc_len = parse_doc_len(cfg["doc_len"])
    corpus, truth = generate_synthetic(K, V, cfg["docs"], doc_len=doc_len, alpha_true=np.full(K, cfg["alpha"]),
                                       seed=cfg["seed"])
    if cfg["noise_topics"] > 0 and cfg["noise_docs"] > 0:
        noise, _ = noise_documents(V, cfg["noise_docs"], cfg["noise_topics"], cfg["noise_concentration"],
                                   doc_len=doc_len, seed=cfg["seed"] + 1)
        corpus = concat_corpora(corpus, noise)
    (out / "truth").mkdir(exist_ok=True)
    io.write_matrix(out / "truth" / "phi_true.csv", truth.phi_true)
    io.write_json(out / "truth" / "truth.json", {"alpha_true": truth.alpha_true, "seed": truth.seed})
    info = _write_corpus_bundle(out, corpus, cfg["test_fraction"], cfg["seed"])
    io.write_json(out / "summary.json", info)
    return info


def cmd_train(cfg, out: Path) -> dict:
    corpus = io.read_corpus(cfg["corpus"])
    hp = HyperParams.symmetric(cfg["topics"], corpus.V, cfg["alpha_sum"], cfg["beta"])
    chain_cfg = ChainConfig(iterations=cfg["iterations"], burn_in=cfg["burn_in"], lag=cfg["lag"],
                            chains=cfg["chains"], seed=cfg["seed"], loglik_every=cfg["loglik_every"],
                            store_theta=bool(cfg["store_theta"]))
    results = run_chains(corpus, hp, chain_cfg, jobs=cfg["jobs"], first_chain=cfg["first_chain"])
    io.write_samples(out, results)
    return {"samples": sum(len(r.samples) for r in results), "chains": len(results)}


def cmd_evaluate(cfg, out: Path) -> dict:
    samples = io.read_samples(cfg["samples"])
    test = io.read_corpus(cfg["test"])
    stats = _cooc(cfg)
    hcfg = HeldoutConfig(particles=cfg["particles"], seed=cfg["seed"])
    cred = credibility_all([s.phi for s in samples]) if len(samples) > 1 else [None] * len(samples)
    for s, smp in enumerate(samples):
        stem = f"c{smp.chain_id:03d}_i{smp.iteration:08d}"
        npmi = [topic_coherence(row, stats, cfg["top_n"]) for row in smp.phi]
        cd = distinctiveness_all(smp.phi) if smp.K > 1 else np.full(smp.K, np.nan)
        cr = cred[s] if cred[s] is not None else np.full(smp.K, np.nan)
        io.write_quality(out / f"quality_{stem}.csv", npmi, cd, cr)
        res = perplexity(test, smp.phi, smp.alpha, hcfg)
        io.write_heldout(out / f"heldout_{stem}.csv", test.doc_ids, test.doc_lengths, res.doc_loglik)
        io.write_json(out / f"heldout_{stem}.json", {"perplexity": res.perplexity, "stderr": res.stderr,
                                                    "particles": res.particles, "seed": res.seed})
    report = evaluate_samples(samples, test, stats, hcfg, cfg["top_n"])
    summary = report.summary()
    io.write_json(out / "evaluation.json", summary)
    return summary


def cmd_cluster(cfg, out: Path) -> dict:
    samples = io.read_samples(cfg["samples"])
    pool = pool_topics(samples)
    within = bool(cfg["within_sample"])
    clusters = constrained_ahc(pool, cfg["threshold"], within)
    model = filter_clusters(clusters, cfg["min_size"], threshold=cfg["threshold"],
                            allow_within_sample=within, S=pool.S)
    io.write_clustered_model(out, model, pool)
    if cfg.get("corpus"):
        cards = emit_topic_cards(model, io.read_corpus(cfg["corpus"]).vocab, cfg["top_n"])
        io.write_json(out / "cards.json", cards)
        (out / "cards.txt").write_text(format_cards(cards))
    return {"pool": pool.size, "clusters": len(clusters), "kept": model.n_clusters}


def cmd_sweep(cfg, out: Path) -> dict:
    samples = io.read_samples(cfg["samples"])
    replication = io.read_samples(cfg["replication"])
    test = io.read_corpus(cfg["test"])
    stats = _cooc(cfg)
    hcfg = HeldoutConfig(particles=cfg["particles"], seed=cfg["seed"])
    thresholds = parse_grid(cfg["thresholds"])
    min_sizes = [int(x) for x in parse_grid(cfg["min_sizes"])]
    report = sweep(pool_topics(samples), thresholds, min_sizes, test, stats, pool_topics(replication),
                   cfg["alpha_sum"], hcfg, bool(cfg["within_sample"]), cfg["top_n"], jobs=cfg["jobs"])
    io.write_sweep(out / "sweep.csv", report)
    baseline = evaluate_samples(samples, test, stats, hcfg, cfg["top_n"])
    io.write_json(out / "baseline.json", baseline.summary())
    return {"cells": len(report.cells)}


def cmd_report(cfg, out: Path) -> dict:
    info = {}
    if cfg.get("sweep_csv"):
        rows = io.read_sweep(cfg["sweep_csv"])
        metrics = sorted({r["metric"] for r in rows})
        thresholds = sorted({r["threshold"] for r in rows})
        sizes = sorted({r["min_size"] for r in rows})
        for name in metrics + ["n_clusters"]:
            with open(out / f"table_{name}.csv", "w") as f:
                f.write("threshold," + ",".join(f"min_size_{m}" for m in sizes) + "\n")
                for t in thresholds:
                    cells = []
                    for m in sizes:
                        match = [r for r in rows if r["threshold"] == t and r["min_size"] == m
                                 and (name == "n_clusters" or r["metric"] == name)]
                        cells.append(io.fmt(match[0]["n_clusters"] if name == "n_clusters" else match[0]["mean"])
                                     if match else "")
                    f.write(io.fmt(t) + "," + ",".join(cells) + "\n")
        info["tables"] = metrics + ["n_clusters"]
        if cfg["plots"]:
            _plot_sweep(rows, out)
    if cfg.get("model") or cfg.get("samples"):
        if not cfg.get("corpus"):
            raise ValidationError("topic cards need --corpus")
        corpus = io.read_corpus(cfg["corpus"])
        if cfg.get("model"):
            cards = emit_topic_cards(io.read_clustered_model(cfg["model"]), corpus.vocab, cfg["top_n"])
        else:
            cards = [dict(card, sample=i) for i, smp in enumerate(io.read_samples(cfg["samples"]))
                     for card in emit_topic_cards(smp, corpus.vocab, cfg["top_n"])]
        io.write_json(out / "cards.json", cards)
        (out / "cards.txt").write_text(format_cards(cards))
        info["cards"] = len(cards)
    if not info:
        raise ValidationError("report needs --sweep-csv, --model or --samples")
    return info


def _plot_sweep(rows, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = sorted({r["metric"] for r in rows})
    sizes = sorted({r["min_size"] for r in rows})
    fig, axes = plt.subplots(1, len(metrics) + 1, figsize=(4 * (len(metrics) + 1), 3.5))
    for ax, name in zip(axes, metrics + ["n_clusters"]):
        for m in sizes:
            sel = sorted((r for r in rows if r["min_size"] == m and r["metric"] == (metrics[0] if name == "n_clusters" else name)),
                         key=lambda r: r["threshold"])
            x = [r["threshold"] for r in sel]
            if name == "n_clusters":
                ax.plot(x, [r["n_clusters"] for r in sel], marker="o", label=f"min size {m}")
            else:
                ax.errorbar(x, [r["mean"] for r in sel], yerr=[r["stderr"] for r in sel], marker="o", label=f"min size {m}")
        ax.set_xlabel("cosine distance threshold")
        ax.set_title(name)
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out / "sweep.svg", metadata={"Date": None})
    plt.close(fig)


def cmd_diag(cfg, out: Path) -> dict:
    root = Path(cfg["traces"])
    dirs = [root] + sorted(p for p in root.rglob("*") if p.is_dir())
    result = {}
    for d in dirs:
        traces = io.read_traces(d)
        if not traces:
            continue
        n = min(len(t) for t in traces.values())
        start = int(n * cfg["discard"])
        x = np.array([t[start:n, 1] for _, t in sorted(traces.items())])
        value = rhat(x)
        key = str(d.relative_to(root)) if d != root else "."
        result[key] = {"rhat": value, "chains": len(traces), "points": n - start,
                       "pass": bool(value < cfg["limit"])}
        print(f"{key}: R-hat {value:.4f} ({'pass' if value < cfg['limit'] else 'FAIL'} at {cfg['limit']})")
    if not result:
        raise ValidationError(f"no trace files under {root}")
    io.write_json(out / "diag.json", result)
    return result


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate,
    "cluster": cmd_cluster, "sweep": cmd_sweep, "report": cmd_report, "diag": cmd_diag,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        cfg = resolve(sub, args.command, vars(args))
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, {"result": info} if args.command in ("ingest", "synth", "train") else None)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"topicforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TopicForgeError, OSError, RuntimeError) as exc:
        print(f"topicforge {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
