"""Command-line pipeline: one binary, one subcommand per stage.

Heavy modules are imported inside the handlers so the ``--threads`` pin can
take effect before numpy's BLAS backend starts its thread pool.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

from .errors import CheckpointError, ConfigError, DataError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

_RATIO_SETS = {
    "low": (0.05, 0.15, 0.25),
    "default": (0.10, 0.20, 0.30),
    "high": (0.30, 0.40, 0.50),
}


def _traj_format(path: str) -> str:
    return "csv" if path.endswith(".csv") else "jsonl"


def _load_config(args):
    from .config import echo_config, load_run_config

    cfg = load_run_config(args.config)
    run_dir = cfg.get("paths.run_dir")
    if run_dir is not None:
        echo_config(cfg, str(run_dir))
    return cfg


def _file_sha(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_model_parts(args, cfg):
    """Checkpoint, cell table, and graph for the inference subcommands."""
    from .cells import build_cell_graph, load_embeddings
    from .model import load_model

    grid = cfg.grid()
    state = load_model(args.ckpt, expect_grid_hash=grid.hash())
    table = load_embeddings(args.cells, expect_grid=grid)
    if table.vectors.shape[1] != state.cfg.d:
        raise ConfigError(
            f"cell table dimension {table.vectors.shape[1]} != model d {state.cfg.d}"
        )
    return grid, state, table, build_cell_graph(grid)


def cmd_preprocess(args) -> int:
    from .trajectory import load_trajectories, preprocess, save_trajectories

    cfg = _load_config(args)
    grid = cfg.grid()
    data = load_trajectories(args.input, format=_traj_format(args.input))
    kept = preprocess(
        data,
        grid,
        min_len=int(cfg.get("preprocess.min_len", 20)),
        max_len=int(cfg.get("preprocess.max_len", 200)),
    )
    save_trajectories(kept, args.output, format=_traj_format(args.output))
    print(f"kept {len(kept)} of {len(data)} trajectories -> {args.output}")
    return EXIT_OK


def cmd_pretrain_cells(args) -> int:
    from .cells import pretrain_cell_embeddings, save_embeddings

    cfg = _load_config(args)
    grid = cfg.grid()
    d = cfg.model_config().d
    table = pretrain_cell_embeddings(
        grid,
        d,
        walk_len=int(cfg.get("node2vec.walk_len", 50)),
        walks_per_node=int(cfg.get("node2vec.walks_per_node", 10)),
        p=float(cfg.get("node2vec.p", 1.0)),
        q=float(cfg.get("node2vec.q", 1.0)),
        window=int(cfg.get("node2vec.window", 5)),
        negatives=int(cfg.get("node2vec.negatives", 5)),
        epochs=int(cfg.get("node2vec.epochs", 5)),
        lr=float(cfg.get("node2vec.lr", 0.025)),
        seed=cfg.seed(),
    )
    save_embeddings(table, args.output)
    n, dim = table.vectors.shape
    print(f"pretrained {n} cell vectors (d={dim}) -> {args.output}")
    return EXIT_OK


def _apply_ablations(model_cfg, args):
    from dataclasses import replace

    if args.no_adjfuse:
        model_cfg = replace(model_cfg, use_adjfuse=False)
    if args.target_ratios is not None:
        model_cfg = replace(model_cfg, target_ratios=_RATIO_SETS[args.target_ratios])
    return model_cfg


def cmd_train(args) -> int:
    from .cells import build_cell_graph, load_embeddings
    from .train import prepare_state, save_train_log, train
    from .trajectory import load_trajectories, trajectory_to_cells

    cfg = _load_config(args)
    grid = cfg.grid()
    model_cfg = _apply_ablations(cfg.model_config(), args)
    table = load_embeddings(args.cells, expect_grid=grid)
    if table.vectors.shape[1] != model_cfg.d:
        raise ConfigError(
            f"cell table dimension {table.vectors.shape[1]} != model d {model_cfg.d}"
        )
    data = load_trajectories(args.data, format=_traj_format(args.data))
    dataset = [trajectory_to_cells(t, grid) for t in data]
    train_cfg = cfg.train_config(warm_start=args.warm_start)
    state = prepare_state(model_cfg, grid.hash(), train_cfg)
    result = train(dataset, table, build_cell_graph(grid), state, train_cfg, checkpoint_path=args.output)
    save_train_log(args.log or args.output + ".log", result.log)
    best = min((r.loss for r in result.log), default=float("nan"))
    tag = " (early stop)" if result.stopped_early else ""
    print(
        f"trained {len(result.log)} epochs{tag}, best loss {best:.6f} -> {args.output}"
    )
    return EXIT_OK


def cmd_embed(args) -> int:
    import numpy as np

    from .model import embed_trajectory, save_embedding_matrix
    from .trajectory import load_trajectories

    cfg = _load_config(args)
    grid, state, table, graph = _load_model_parts(args, cfg)
    data = load_trajectories(args.input, format=_traj_format(args.input))
    if not data:
        raise DataError(f"{args.input}: no trajectories to embed")
    ids = [t.id for t in data]
    rows = np.stack([embed_trajectory(t, grid, table, graph, state) for t in data])
    save_embedding_matrix(args.output, ids, rows)
    print(f"embedded {len(ids)} trajectories (d={rows.shape[1]}) -> {args.output}")
    return EXIT_OK


def cmd_search(args) -> int:
    import csv

    import numpy as np

    from .evaluate import rank_by_distance
    from .model import embed_trajectory
    from .trajectory import load_trajectories

    cfg = _load_config(args)
    grid, state, table, graph = _load_model_parts(args, cfg)
    queries = load_trajectories(args.queries, format=_traj_format(args.queries))
    db = load_trajectories(args.db, format=_traj_format(args.db))
    if not queries or not db:
        raise DataError("search needs nonempty query and database files")
    if args.k < 1:
        raise ConfigError(f"k must be >= 1, got {args.k}")
    if args.k > len(db):
        raise DataError(f"k={args.k} exceeds database size {len(db)}")

    def emb(t):
        return embed_trajectory(t, grid, table, graph, state).astype(np.float64)

    db_ids = [t.id for t in db]
    db_mat = np.stack([emb(t) for t in db])
    with open(args.output, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for q in queries:
            d = np.sqrt(np.sum((db_mat - emb(q)) ** 2, axis=1))
            writer.writerow([q.id] + rank_by_distance(db_ids, d)[: args.k])
    print(f"wrote top-{args.k} matches for {len(queries)} queries -> {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from dataclasses import replace

    from .evaluate import (
        FinetuneConfig,
        build_query_db,
        emit_report,
        finetune_protocol,
        robustness_eval,
        search_eval,
    )
    from .model import ModelState, embed_trajectory
    from .trajectory import load_trajectories

    cfg = _load_config(args)
    grid, state, table, graph = _load_model_parts(args, cfg)
    if args.no_adjfuse:
        state = ModelState(
            cfg=replace(state.cfg, use_adjfuse=False),
            store=state.store,
            grid_hash=state.grid_hash,
            adjfuse=state.adjfuse,
        )
    data = load_trajectories(args.data, format=_traj_format(args.data))
    seed = cfg.seed()
    sha = _file_sha(args.ckpt)

    def embed_fn(t):
        return embed_trajectory(t, grid, table, graph, state)

    n_queries = int(cfg.get("eval.n_queries", 100))
    if args.protocol == "search":
        qdb = build_query_db(data, n_queries, int(cfg.get("eval.db_size", len(data))), seed)
        reports = search_eval(
            qdb, embed_fn,
            db_fractions=cfg.get("eval.db_fractions", (1.0,)),
            seed=seed, checkpoint_sha=sha,
        )
    elif args.protocol in ("downsample", "distort"):
        qdb = build_query_db(data, n_queries, int(cfg.get("eval.db_size", len(data))), seed)
        reports = robustness_eval(
            qdb, embed_fn, args.protocol,
            levels=cfg.get("eval.levels", (0.0, 0.2)),
            seed=seed, checkpoint_sha=sha,
            distort_magnitude_m=float(cfg.get("eval.distort_magnitude_m", 50.0)),
            planar=grid.planar,
            clamp_bbox=(grid.min_lon, grid.min_lat, grid.max_lon, grid.max_lat),
        )
    else:
        reports = finetune_protocol(
            data, embed_fn, cfg.measure_kind(),
            FinetuneConfig(
                epochs=int(cfg.get("eval.finetune_epochs", 300)),
                lr=float(cfg.get("eval.finetune_lr", 1e-3)),
                seed=seed,
            ),
            n_queries=n_queries,
            n_pairs=int(cfg.get("eval.n_pairs", 2000)),
            seed=seed, checkpoint_sha=sha,
            parallel=args.threads > 1, workers=args.threads if args.threads > 1 else None,
        )

    marks = {}
    if args.no_adjfuse:
        marks["adjfuse"] = False
    if args.target_ratios is not None:
        marks["target_ratios"] = args.target_ratios
    if marks:
        reports = [replace(r, settings={**r.settings, **marks}) for r in reports]
    emit_report(reports, args.output, args.format)
    for r in reports:
        pairs = ", ".join(f"{k}={v:.4f}" for k, v in r.metrics.items())
        print(f"{r.protocol} {r.settings}: {pairs}")
    print(f"report -> {args.output}")
    return EXIT_OK


def cmd_measure(args) -> int:
    from .measures import MeasureKind, measure_distance
    from .trajectory import load_trajectories

    def load_one(path: str):
        trajs = load_trajectories(path, format=_traj_format(path))
        if len(trajs) != 1:
            raise DataError(f"{path}: expected exactly one trajectory, got {len(trajs)}")
        return trajs[0]

    kind = MeasureKind(kind=args.measure, eps_m=args.eps_m, planar=args.planar)
    dist = measure_distance(load_one(args.a), load_one(args.b), kind)
    print(repr(dist))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tjepa",
        description="Self-supervised trajectory embeddings: preprocessing, "
        "cell pretraining, JEPA training, embedding, search, and evaluation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--threads", type=int, default=1,
        help="worker threads; 1 keeps every stage bitwise reproducible (default: 1)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="filter raw trajectories against the grid")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--input", required=True, help="raw trajectories (.csv or .jsonl)")
    p.add_argument("--output", required=True, help="filtered trajectories (.csv or .jsonl)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain-cells", parents=[common], help="fit grid-cell embeddings by biased walks")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--output", required=True, help="cell embedding table file")
    p.set_defaults(func=cmd_pretrain_cells)

    p = sub.add_parser("train", parents=[common], help="train the trajectory encoder")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--cells", required=True, help="pretrained cell embedding table")
    p.add_argument("--data", required=True, help="preprocessed trajectories")
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--warm-start", default=None, help="checkpoint to resume from")
    p.add_argument("--log", default=None, help="training log CSV (default: <output>.log)")
    p.add_argument("--no-adjfuse", action="store_true", help="train without neighborhood enrichment")
    p.add_argument(
        "--target-ratios", choices=sorted(_RATIO_SETS), default=None,
        help="named target-ratio set for mask sampling",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="embed trajectories with a trained checkpoint")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--cells", required=True, help="pretrained cell embedding table")
    p.add_argument("--input", required=True, help="trajectories to embed")
    p.add_argument("--output", required=True, help="embedding matrix file")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("search", parents=[common], help="rank a database by embedding distance per query")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--cells", required=True, help="pretrained cell embedding table")
    p.add_argument("--queries", required=True, help="query trajectories")
    p.add_argument("--db", required=True, help="database trajectories")
    p.add_argument("--output", required=True, help="CSV of query id plus top-k match ids")
    p.add_argument("--k", type=int, default=5, help="matches per query (default: 5)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", parents=[common], help="run an evaluation protocol and emit a report")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--cells", required=True, help="pretrained cell embedding table")
    p.add_argument("--data", required=True, help="held-out trajectories")
    p.add_argument(
        "--protocol", required=True, choices=("search", "downsample", "distort", "finetune"),
        help="evaluation protocol",
    )
    p.add_argument("--output", required=True, help="report path")
    p.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
    p.add_argument("--no-adjfuse", action="store_true", help="bypass neighborhood enrichment at inference")
    p.add_argument(
        "--target-ratios", choices=sorted(_RATIO_SETS), default=None,
        help="tag reports with the named ratio set used at training time",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("measure", parents=[common], help="exact heuristic distance between two trajectories")
    p.add_argument("--measure", required=True, choices=("edr", "lcss", "hausdorff", "frechet"), help="distance measure")
    p.add_argument("--a", required=True, help="first trajectory file (exactly one trajectory)")
    p.add_argument("--b", required=True, help="second trajectory file (exactly one trajectory)")
    p.add_argument("--eps-m", type=float, default=None, help="match threshold for edr/lcss")
    p.add_argument("--planar", action="store_true", help="treat coordinates as planar units")
    p.set_defaults(func=cmd_measure)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for var in _THREAD_VARS:
        os.environ[var] = str(max(1, args.threads))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
