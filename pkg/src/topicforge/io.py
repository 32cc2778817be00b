"""On-disk formats: baskets, corpora, co-occurrence counts, posterior samples,
clustered models, sweep tables and small JSON/CSV reports.

Numeric CSV fields are written with 9 significant digits.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import scipy.sparse as sp

from .corpus import CoocStats, Corpus, Vocabulary, _basket_products
from .errors import RecordError, ValidationError
from .gibbs import ChainResult, PosteriorSample
from .metrics import TopicRef
from .summary import ClusteredModel, SweepReport, TopicCluster

SAMPLE_RE = re.compile(r"sample_c(\d+)_i(\d+)\.csv$")
TRACE_RE = re.compile(r"trace_c(\d+)\.csv$")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path):
    return json.loads(Path(path).read_text())


def read_baskets(path) -> Iterator[dict]:
    """Yield ``{"id", "products"}`` records from a JSON-lines file.

    Blank lines are skipped; anything else that is not a valid record raises
    ``RecordError`` with the file line number.
    """
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(line_no, f"invalid JSON ({exc.msg})") from None
            basket_id, products = _basket_products(record, line_no)
            yield {"id": basket_id if basket_id is not None else str(line_no), "products": products}


def write_baskets(path, records: Iterable[dict]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({"id": r["id"], "products": list(r["products"])}) + "\n")


def write_corpus(path, corpus: Corpus) -> None:
    header = {
        "V": corpus.V, "D": corpus.D, "N": corpus.N,
        "min_basket_size": corpus.min_basket_size,
        "vocab": list(corpus.vocab.labels) if corpus.vocab is not None else None,
        "vocab_frequency": corpus.vocab.frequency.tolist() if corpus.vocab is not None else None,
        "doc_ids": list(corpus.doc_ids),
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for doc in corpus.docs:
            f.write(json.dumps(list(doc)) + "\n")


def read_corpus(path) -> Corpus:
    with open(path) as f:
        header = json.loads(f.readline())
        docs = tuple(tuple(json.loads(line)) for line in f if line.strip())
    vocab = None
    if header.get("vocab") is not None:
        vocab = Vocabulary(labels=tuple(header["vocab"]), frequency=np.asarray(header["vocab_frequency"], dtype=np.int64))
    corpus = Corpus(docs=docs, V=header["V"], doc_ids=tuple(header["doc_ids"]), vocab=vocab,
                    min_basket_size=header["min_basket_size"])
    if corpus.D != header["D"] or corpus.N != header["N"]:
        raise ValidationError(f"{path}: header counts do not match the documents")
    return corpus


def write_cooc(path, stats: CoocStats) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["D", stats.D])
        w.writerow(["df", *stats.df.tolist()])
        w.writerow(["i", "j", "pair_df"])
        for i, j, c in stats.pairs():
            w.writerow([i, j, c])


def read_cooc(path) -> CoocStats:
    with open(path, newline="") as f:
        r = csv.reader(f)
        D = int(next(r)[1])
        df = np.array([int(x) for x in next(r)[1:]], dtype=np.int64)
        next(r)
        rows, cols, vals = [], [], []
        for i, j, c in r:
            rows.append(int(i))
            cols.append(int(j))
            vals.append(int(c))
    V = df.size
    upper = sp.coo_matrix((vals, (rows, cols)), shape=(V, V), dtype=np.int64)
    full = (upper + upper.T + sp.diags(df)).tocsr()
    full.sort_indices()
    return CoocStats(D=D, df=df, pair_df=full)


def write_matrix(path, m) -> None:
    with open(path, "w") as f:
        for row in np.atleast_2d(m):
            f.write(",".join(format(float(x), ".9g") for x in row) + "\n")


def read_matrix(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2))


def write_samples(out_dir, results: Iterable[ChainResult]) -> None:
    """One CSV + JSON sidecar per sample and one trace CSV per chain."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for res in results:
        for s in res.samples:
            stem = f"sample_c{s.chain_id:03d}_i{s.iteration:08d}"
            write_matrix(out / f"{stem}.csv", s.phi)
            if s.theta is not None:
                write_matrix(out / f"{stem}.theta.csv", s.theta)
            write_json(out / f"{stem}.json", {
                "chain_id": s.chain_id, "iteration": s.iteration, "seed": s.seed,
                "alpha": s.alpha.tolist(), "beta": s.beta.tolist(),
            })
        with open(out / f"trace_c{res.chain_id:03d}.csv", "w") as f:
            f.write("iteration,loglik\n")
            for it, ll in res.trace:
                f.write(f"{it},{fmt(ll)}\n")


def read_samples(sample_dir) -> list[PosteriorSample]:
    """Load samples sorted by (chain, iteration); rows are renormalized after the 9-digit round trip."""
    d = Path(sample_dir)
    found = sorted(p for p in d.iterdir() if SAMPLE_RE.match(p.name))
    if not found:
        raise ValidationError(f"no sample files in {d}")
    samples = []
    for p in found:
        meta = read_json(p.with_suffix(".json"))
        phi = read_matrix(p)
        phi /= phi.sum(axis=1, keepdims=True)
        theta_path = p.with_name(p.stem + ".theta.csv")
        theta = read_matrix(theta_path) if theta_path.exists() else None
        samples.append(PosteriorSample(
            phi=phi, theta=theta, alpha=np.asarray(meta["alpha"]), beta=np.asarray(meta["beta"]),
            chain_id=meta["chain_id"], iteration=meta["iteration"], seed=meta["seed"],
        ))
    return samples


def read_traces(trace_dir) -> dict[int, np.ndarray]:
    """chain_id -> (n, 2) array of (iteration, loglik)."""
    out = {}
    for p in sorted(Path(trace_dir).iterdir()):
        m = TRACE_RE.match(p.name)
        if m:
            out[int(m.group(1))] = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
    return out


def write_clustered_model(out_dir, model: ClusteredModel, pool=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model.n_clusters:
        write_matrix(out / "centroids.csv", model.centroids)
    else:
        (out / "centroids.csv").write_text("")
    clusters = []
    for c in model.clusters:
        members = []
        for ref, idx in zip(c.members, c.indices):
            entry = {"sample_id": ref.sample_id, "topic_index": ref.topic_index, "pool_index": idx}
            if pool is not None:
                entry.update(pool.origin(idx))
            members.append(entry)
        clusters.append({"size": c.size, "members": members})
    write_json(out / "model.json", {
        "threshold": model.threshold, "min_size": model.min_size, "mode": model.mode,
        "S": model.S, "n_clusters": model.n_clusters, "clusters": clusters,
    })


def read_clustered_model(model_dir) -> ClusteredModel:
    d = Path(model_dir)
    meta = read_json(d / "model.json")
    centroids = read_matrix(d / "centroids.csv") if meta["n_clusters"] else np.zeros((0, 0))
    clusters = []
    for row, c in zip(centroids, meta["clusters"]):
        clusters.append(TopicCluster(
            members=tuple(TopicRef(m["sample_id"], m["topic_index"]) for m in c["members"]),
            indices=tuple(m["pool_index"] for m in c["members"]),
            centroid=row / row.sum(),
        ))
    return ClusteredModel(clusters=tuple(clusters), threshold=meta["threshold"], min_size=meta["min_size"],
                          mode=meta["mode"], S=meta["S"])


SWEEP_HEADER = ["threshold", "min_size", "metric", "mean", "stderr", "n_clusters"]


def write_sweep(path, report: SweepReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for t, m, name, mean, se, n in report.rows():
            w.writerow([fmt(t), m, name, fmt(mean), fmt(se), n])


def read_sweep(path) -> list[dict]:
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if r.fieldnames != SWEEP_HEADER:
            raise ValidationError(f"{path}: unexpected sweep header {r.fieldnames}")
        return [
            {"threshold": float(row["threshold"]), "min_size": int(row["min_size"]), "metric": row["metric"],
             "mean": float(row["mean"]), "stderr": float(row["stderr"]), "n_clusters": int(row["n_clusters"])}
            for row in r
        ]


def write_quality(path, npmi, cd_min, credibility) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["topic_index", "npmi", "cd_min", "credibility"])
        for k, row in enumerate(zip(npmi, cd_min, credibility)):
            w.writerow([k, *(fmt(x) for x in row)])


def read_quality(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "topic_index" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def write_heldout(path, doc_ids, lengths, loglik) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["doc_id", "tokens", "loglik"])
        for d, n, ll in zip(doc_ids, lengths, loglik):
            w.writerow([d, int(n), fmt(ll)])
