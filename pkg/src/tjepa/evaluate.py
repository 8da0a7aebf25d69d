"""Evaluation protocols: most-similar search, robustness, and measure fine-tuning.

The protocols operate on embedding dictionaries (trajectory id -> vector) so
they can be driven by a trained model, a random baseline, or a fake embedder
in tests without caring where the vectors came from.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, DataError, NumericError
from .measures import MeasureKind, measure_distance, pairwise_matrix
from .trajectory import Trajectory, distort, downsample, odd_even_split
from .transformer import xavier

Ranking = Sequence[str]
EmbedFn = Callable[[Trajectory], np.ndarray]


# ---------------------------------------------------------------------------
# query/database construction


@dataclass(frozen=True)
class QueryDatabase:
    """Most-similar-search instance: queries, candidate pool, ground truth.

    ``truth`` maps each query id to the id of its counterpart half, which is
    guaranteed to be present in ``database``.
    """

    queries: list[Trajectory]
    database: list[Trajectory]
    truth: dict[str, str]

    def __post_init__(self) -> None:
        db_ids = {t.id for t in self.database}
        if len(db_ids) != len(self.database):
            raise DataError("database contains duplicate trajectory ids")
        if len(self.database) < len(self.queries):
            raise DataError(
                f"database smaller than query set: {len(self.database)} < {len(self.queries)}"
            )
        for q in self.queries:
            if q.id not in self.truth:
                raise DataError(f"query {q.id!r} has no ground-truth entry")
            if self.truth[q.id] not in db_ids:
                raise DataError(f"ground truth {self.truth[q.id]!r} missing from database")


def build_query_db(
    test_set: list[Trajectory], n_queries: int, db_size: int, seed: int
) -> QueryDatabase:
    """Split held-out trajectories into query/database halves plus fillers.

    Each selected trajectory is split into its odd-indexed half (the query)
    and even-indexed half (its database counterpart); the database is padded
    to ``db_size`` with whole trajectories that share no id with any query.
    """
    if n_queries < 1:
        raise ConfigError(f"n_queries must be >= 1, got {n_queries}")
    if db_size < n_queries:
        raise ConfigError(f"db_size {db_size} < n_queries {n_queries}")
    n_fillers = db_size - n_queries
    if len(test_set) < n_queries + n_fillers:
        raise DataError(
            f"need {n_queries + n_fillers} test trajectories "
            f"({n_queries} queries + {n_fillers} fillers), got {len(test_set)}"
        )
    ids = [t.id for t in test_set]
    if len(set(ids)) != len(ids):
        raise DataError("test set contains duplicate trajectory ids")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(test_set))
    queries: list[Trajectory] = []
    database: list[Trajectory] = []
    truth: dict[str, str] = {}
    for i in perm[:n_queries]:
        a, b = odd_even_split(test_set[i])
        queries.append(a)
        database.append(b)
        truth[a.id] = b.id
    for i in perm[n_queries : n_queries + n_fillers]:
        database.append(test_set[i])
    return QueryDatabase(queries=queries, database=database, truth=truth)


# ---------------------------------------------------------------------------
# ranking primitives


def rank_by_distance(ids: Sequence[str], dists: np.ndarray) -> list[str]:
    """Ids sorted by ascending distance, ties broken by id ascending."""
    dists = np.asarray(dists, dtype=np.float64)
    if len(ids) != dists.shape[0]:
        raise DataError(f"{len(ids)} ids but {dists.shape[0]} distances")
    order = sorted(range(len(ids)), key=lambda j: (dists[j], ids[j]))
    return [ids[j] for j in order]


def _embedding_rows(
    embeddings: dict[str, np.ndarray], ids: Sequence[str]
) -> np.ndarray:
    rows = []
    for i in ids:
        if i not in embeddings:
            raise DataError(f"no embedding for trajectory {i!r}")
        rows.append(np.asarray(embeddings[i], dtype=np.float64))
    return np.stack(rows)


def _sub_db_ids(qdb: QueryDatabase, db_fraction: float, seed: int) -> list[str]:
    """Sub-database ids at a fraction: all ground truths plus a permutation prefix.

    One permutation of the non-truth ids is drawn per seed; smaller fractions
    take shorter prefixes of it, so the 20% pool is a subset of the 40% pool
    and so on up to the full database.
    """
    if not 0.0 < db_fraction <= 1.0:
        raise ConfigError(f"db_fraction must be in (0, 1], got {db_fraction}")
    db_ids = [t.id for t in qdb.database]
    truth_ids = set(qdb.truth.values())
    non_truth = [i for i in db_ids if i not in truth_ids]
    size = max(len(truth_ids), int(round(db_fraction * len(db_ids))))
    perm = np.random.default_rng(seed).permutation(len(non_truth))
    extra = [non_truth[j] for j in perm[: size - len(truth_ids)]]
    return [i for i in db_ids if i in truth_ids] + extra


def mean_rank(
    embeddings: dict[str, np.ndarray],
    qdb: QueryDatabase,
    db_fraction: float = 1.0,
    seed: int = 0,
) -> float:
    """Mean 1-based rank of each query's true counterpart by embedding distance.

    At ``db_fraction < 1`` the candidate pool is a random subset that always
    retains every ground-truth entry; subsets are nested across fractions for
    a fixed seed.
    """
    sub_ids = _sub_db_ids(qdb, db_fraction, seed)
    cand = _embedding_rows(embeddings, sub_ids)
    ranks = []
    for q in qdb.queries:
        qv = _embedding_rows(embeddings, [q.id])[0]
        d = np.sqrt(np.sum((cand - qv) ** 2, axis=1))
        ranked = rank_by_distance(sub_ids, d)
        ranks.append(ranked.index(qdb.truth[q.id]) + 1)
    return float(np.mean(ranks))


def hr_at_k(
    pred_rankings: Sequence[Ranking], truth_rankings: Sequence[Ranking], k: int
) -> float:
    """Mean overlap between the predicted and true top-k sets, per query."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(pred_rankings) != len(truth_rankings):
        raise DataError(
            f"{len(pred_rankings)} predicted rankings vs {len(truth_rankings)} true ones"
        )
    if not pred_rankings:
        raise DataError("hit ratio needs at least one query")
    hits = []
    for i, (pred, truth) in enumerate(zip(pred_rankings, truth_rankings)):
        if len(pred) < k or len(truth) < k:
            raise DataError(
                f"query {i}: rankings have {len(pred)} and {len(truth)} candidates, need >= {k}"
            )
        hits.append(len(set(pred[:k]) & set(truth[:k])) / k)
    return float(np.mean(hits))


def r5_at_20(
    pred_rankings: Sequence[Ranking], truth_rankings: Sequence[Ranking]
) -> float:
    """Fraction of the 5 true nearest neighbors recovered in the predicted top 20."""
    if len(pred_rankings) != len(truth_rankings):
        raise DataError(
            f"{len(pred_rankings)} predicted rankings vs {len(truth_rankings)} true ones"
        )
    if not pred_rankings:
        raise DataError("recall needs at least one query")
    recalls = []
    for i, (pred, truth) in enumerate(zip(pred_rankings, truth_rankings)):
        if len(pred) < 20 or len(truth) < 5:
            raise DataError(
                f"query {i}: need >= 20 predicted and >= 5 true candidates, "
                f"got {len(pred)} and {len(truth)}"
            )
        recalls.append(len(set(pred[:20]) & set(truth[:5])) / 5)
    return float(np.mean(recalls))


# ---------------------------------------------------------------------------
# protocols


@dataclass(frozen=True)
class EvalReport:
    """One protocol result row: what ran, with which knobs, and the scores."""

    protocol: str
    settings: dict
    metrics: dict
    seed: int
    checkpoint_sha: str = ""

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "settings": dict(self.settings),
            "metrics": dict(self.metrics),
            "seed": self.seed,
            "checkpoint_sha": self.checkpoint_sha,
        }


def embed_all(trajectories: Iterable[Trajectory], embed_fn: EmbedFn) -> dict[str, np.ndarray]:
    return {t.id: embed_fn(t) for t in trajectories}


def search_eval(
    qdb: QueryDatabase,
    embed_fn: EmbedFn,
    db_fractions: Sequence[float] = (1.0,),
    seed: int = 0,
    checkpoint_sha: str = "",
) -> list[EvalReport]:
    """Most-similar search at one or more database fractions."""
    if not db_fractions:
        raise ConfigError("need at least one db_fraction")
    emb = embed_all(list(qdb.queries) + list(qdb.database), embed_fn)
    return [
        EvalReport(
            protocol="search",
            settings={"db_fraction": float(f), "db_size": len(qdb.database)},
            metrics={"mean_rank": mean_rank(emb, qdb, db_fraction=f, seed=seed)},
            seed=seed,
            checkpoint_sha=checkpoint_sha,
        )
        for f in db_fractions
    ]


def robustness_eval(
    qdb: QueryDatabase,
    embed_fn: EmbedFn,
    transform: str,
    levels: Sequence[float],
    seed: int = 0,
    checkpoint_sha: str = "",
    distort_magnitude_m: float = 50.0,
    planar: bool = False,
    clamp_bbox: tuple[float, float, float, float] | None = None,
) -> list[EvalReport]:
    """Mean rank under point dropping or point distortion, one report per level.

    Every query and every database trajectory is transformed at the given
    rate before embeddings are recomputed; ranking runs against the full
    database. Rate 0 leaves trajectories untouched. Pass the grid bbox as
    ``clamp_bbox`` so distorted points cannot leave the embeddable area.
    """
    if transform not in ("downsample", "distort"):
        raise ConfigError(f"unknown transform {transform!r}")
    if not levels:
        raise ConfigError("need at least one level")
    reports = []
    for li, level in enumerate(levels):
        rng = np.random.default_rng((seed, li))

        def warp(t: Trajectory) -> Trajectory:
            if transform == "downsample":
                return downsample(t, level, rng)
            return distort(
                t, level, distort_magnitude_m, rng, planar=planar, clamp_bbox=clamp_bbox
            )

        warped = QueryDatabase(
            queries=[warp(t) for t in qdb.queries],
            database=[warp(t) for t in qdb.database],
            truth=dict(qdb.truth),
        )
        emb = embed_all(list(warped.queries) + list(warped.database), embed_fn)
        settings: dict = {"transform": transform, "rate": float(level)}
        if transform == "distort":
            settings["magnitude_m"] = float(distort_magnitude_m)
        reports.append(
            EvalReport(
                protocol="robustness",
                settings=settings,
                metrics={"mean_rank": mean_rank(emb, warped, seed=seed)},
                seed=seed,
                checkpoint_sha=checkpoint_sha,
            )
        )
    return reports


# ---------------------------------------------------------------------------
# measure fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 300
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclass
class FinetuneHead:
    """Two-layer MLP mapped over frozen embeddings, plus its similarity scale."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    alpha: float
    losses: list[float] = field(default_factory=list)

    def apply(self, embeddings: np.ndarray) -> np.ndarray:
        e = np.asarray(embeddings, dtype=np.float32)
        h = np.maximum(e @ self.w1 + self.b1, 0.0)
        return h @ self.w2 + self.b2


def calibrate_alpha(measure_dists: np.ndarray) -> float:
    """Similarity decay rate such that the median training distance maps to 0.5."""
    d = np.asarray(measure_dists, dtype=np.float64)
    if d.size == 0:
        raise DataError("cannot calibrate on zero distances")
    if not np.isfinite(d).all():
        raise DataError("measure distances must be finite")
    med = float(np.median(d))
    if med <= 0:
        raise DataError(f"median measure distance must be positive, got {med}")
    return math.log(2.0) / med


def sample_pairs(n: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """Draw index pairs (i, j) with i != j, shape (n_pairs, 2)."""
    if n < 2:
        raise DataError(f"need at least 2 items to form pairs, got {n}")
    left = rng.integers(0, n, size=n_pairs)
    off = rng.integers(1, n, size=n_pairs)
    right = (left + off) % n
    return np.stack([left, right], axis=1)


def finetune(
    embeddings: np.ndarray,
    pairs: np.ndarray,
    measure_dists: np.ndarray,
    cfg: FinetuneConfig,
) -> FinetuneHead:
    """Fit the MLP head so embedding similarity tracks a measure's similarity.

    The target for a pair is s = exp(-alpha * measure distance) with alpha
    calibrated so the median training pair lands at 0.5; the loss is the mean
    squared error between exp(-alpha * head-space distance) and s. Only the
    head trains; the embedding matrix enters as a constant.
    """
    emb = np.asarray(embeddings, dtype=np.float32)
    if emb.ndim != 2:
        raise DataError(f"embeddings must be 2-d, got shape {emb.shape}")
    if not np.isfinite(emb).all():
        raise DataError("embeddings must be finite")
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise DataError(f"pairs must have shape (P, 2), got {pairs.shape}")
    if pairs.size and (pairs.min() < 0 or pairs.max() >= emb.shape[0]):
        raise DataError("pair index out of range")
    dists = np.asarray(measure_dists, dtype=np.float64)
    if dists.shape != (pairs.shape[0],):
        raise DataError(
            f"{pairs.shape[0]} pairs but {dists.shape} measure distances"
        )
    if pairs.shape[0] == 0:
        raise DataError("finetune needs at least one training pair")

    alpha = calibrate_alpha(dists)
    target = np.exp(-alpha * dists).astype(np.float32)

    # 4x expansion, same ratio as the transformer FFN; a d-wide hidden layer
    # underfits the measure's local neighborhoods noticeably
    d = emb.shape[1]
    hidden = 4 * d
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    store.add("head.w1", xavier(rng, d, hidden))
    store.add("head.b1", np.zeros(hidden, dtype=np.float32))
    store.add("head.w2", xavier(rng, hidden, d))
    store.add("head.b2", np.zeros(d, dtype=np.float32))

    e_const = ad.const(emb)
    t_const = ad.const(target)
    i_idx, j_idx = pairs[:, 0], pairs[:, 1]
    losses: list[float] = []
    for step in range(cfg.epochs):
        store.zero_grad()
        h = ad.relu(ad.add(ad.matmul(e_const, store["head.w1"]), store["head.b1"]))
        out = ad.add(ad.matmul(h, store["head.w2"]), store["head.b2"])
        diff = ad.sub(ad.gather_rows(out, i_idx), ad.gather_rows(out, j_idx))
        dsq = ad.reduce_sum(ad.mul(diff, diff), axis=1)
        d_emb = ad.sqrt(ad.add(dsq, ad.const(1e-12)))
        err = ad.sub(ad.exp(ad.scale(d_emb, -alpha)), t_const)
        loss = ad.mean(ad.mul(err, err))
        val = float(loss.data)
        if not np.isfinite(val):
            raise NumericError(f"fine-tune loss is not finite at step {step}")
        ad.backward(loss)
        ad.adam_step(store, lr=cfg.lr)
        losses.append(val)
    return FinetuneHead(
        w1=store["head.w1"].data.copy(),
        b1=store["head.b1"].data.copy(),
        w2=store["head.w2"].data.copy(),
        b2=store["head.b2"].data.copy(),
        alpha=alpha,
        losses=losses,
    )


def finetune_protocol(
    trajectories: list[Trajectory],
    embed_fn: EmbedFn,
    measure: MeasureKind,
    cfg: FinetuneConfig,
    n_queries: int,
    n_pairs: int = 2000,
    seed: int = 0,
    checkpoint_sha: str = "",
    parallel: bool = False,
    workers: int | None = None,
) -> list[EvalReport]:
    """Measure-supervised head on frozen embeddings, scored against true rankings.

    A random split reserves ``n_queries`` trajectories as queries; the rest
    form the candidate pool. Pairs sampled over all trajectories carry the
    measure's distances as supervision. Reported hit ratios and recall
    compare the trained head against the measure's exact rankings, alongside
    the untrained head as the baseline.
    """
    n = len(trajectories)
    if n_queries < 1:
        raise ConfigError(f"n_queries must be >= 1, got {n_queries}")
    if n - n_queries < 20:
        raise DataError(
            f"need at least 20 candidates after removing {n_queries} queries, "
            f"got {n - n_queries}"
        )
    ids = [t.id for t in trajectories]
    if len(set(ids)) != len(ids):
        raise DataError("trajectory ids must be unique")

    perm = np.random.default_rng(seed).permutation(n)
    ordered = [trajectories[i] for i in perm]
    queries, cands = ordered[:n_queries], ordered[n_queries:]

    emb = np.stack([np.asarray(embed_fn(t), dtype=np.float32) for t in ordered])
    pairs = sample_pairs(n, n_pairs, np.random.default_rng((seed, 1)))
    sup = np.array(
        [measure_distance(ordered[i], ordered[j], measure) for i, j in pairs]
    )
    head0 = finetune(emb, pairs, sup, replace(cfg, epochs=0))
    head = finetune(emb, pairs, sup, cfg)

    truth = pairwise_matrix(queries, cands, measure, parallel=parallel, workers=workers)
    cand_ids = [t.id for t in cands]
    true_rank = [rank_by_distance(cand_ids, truth.values[i]) for i in range(n_queries)]

    def rankings(h: FinetuneHead) -> list[list[str]]:
        out = h.apply(emb).astype(np.float64)
        hq, hc = out[:n_queries], out[n_queries:]
        return [
            rank_by_distance(cand_ids, np.sqrt(np.sum((hc - hq[i]) ** 2, axis=1)))
            for i in range(n_queries)
        ]

    base, tuned = rankings(head0), rankings(head)
    metrics = {
        "hr_at_5": hr_at_k(tuned, true_rank, 5),
        "hr_at_20": hr_at_k(tuned, true_rank, 20),
        "r5_at_20": r5_at_20(tuned, true_rank),
        "hr_at_5_untrained": hr_at_k(base, true_rank, 5),
        "final_loss": head.losses[-1] if head.losses else float("nan"),
    }
    settings = {
        "measure": measure.kind,
        "n_queries": n_queries,
        "n_candidates": len(cands),
        "n_pairs": int(n_pairs),
        "epochs": cfg.epochs,
        "lr": cfg.lr,
    }
    return [
        EvalReport(
            protocol="finetune",
            settings=settings,
            metrics=metrics,
            seed=seed,
            checkpoint_sha=checkpoint_sha,
        )
    ]


# ---------------------------------------------------------------------------
# report emission


def emit_report(reports: Sequence[EvalReport], path: str, fmt: str = "json") -> None:
    """Write protocol results as JSON (nested) or CSV (one row per report)."""
    if not reports:
        raise DataError("refusing to emit an empty report")
    if fmt == "json":
        text = json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
    elif fmt == "csv":
        text = _reports_to_csv(reports)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _reports_to_csv(reports: Sequence[EvalReport]) -> str:
    setting_keys = sorted({k for r in reports for k in r.settings})
    metric_keys = sorted({k for r in reports for k in r.metrics})
    header = (
        ["protocol"]
        + [f"settings.{k}" for k in setting_keys]
        + [f"metrics.{k}" for k in metric_keys]
        + ["seed", "checkpoint_sha"]
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in reports:
        row = [r.protocol]
        row += [_csv_cell(r.settings.get(k)) for k in setting_keys]
        row += [_csv_cell(r.metrics.get(k)) for k in metric_keys]
        row += [str(r.seed), r.checkpoint_sha]
        writer.writerow(row)
    return buf.getvalue()


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_report(path: str) -> list[EvalReport]:
    """Read back a JSON report written by emit_report."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [
        EvalReport(
            protocol=r["protocol"],
            settings=r["settings"],
            metrics=r["metrics"],
            seed=r["seed"],
            checkpoint_sha=r.get("checkpoint_sha", ""),
        )
        for r in raw
    ]
