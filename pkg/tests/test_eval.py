"""Evaluation protocol tests: query/db construction, metrics vs oracles, fine-tuning."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ref_hit_ratio, ref_mean_rank, ref_r5_at_20
from tjepa.errors import ConfigError, DataError, NumericError
from tjepa.evaluate import (
    EvalReport,
    FinetuneConfig,
    QueryDatabase,
    _sub_db_ids,
    build_query_db,
    calibrate_alpha,
    embed_all,
    emit_report,
    finetune,
    finetune_protocol,
    hr_at_k,
    load_report,
    mean_rank,
    r5_at_20,
    rank_by_distance,
    robustness_eval,
    sample_pairs,
    search_eval,
)
from tjepa.measures import MeasureKind
from tjepa.model import embedding_distance
from tjepa.trajectory import Trajectory


def make_test_set(count: int, rng: np.random.Generator, n: int = 24) -> list[Trajectory]:
    return [
        Trajectory(id=f"t{i:03d}", points=rng.uniform(0.0, 10.0, size=(n, 2)))
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# query/database construction


def test_build_query_db_without_fillers_is_exactly_the_counterparts():
    rng = np.random.default_rng(0)
    qdb = build_query_db(make_test_set(30, rng), n_queries=10, db_size=10, seed=3)
    assert len(qdb.queries) == 10
    assert {t.id for t in qdb.database} == set(qdb.truth.values())
    for a_id, b_id in qdb.truth.items():
        assert a_id.endswith("#a") and b_id.endswith("#b")
        assert a_id[:-2] == b_id[:-2]


def test_build_query_db_fillers_share_no_id_with_queries():
    rng = np.random.default_rng(1)
    qdb = build_query_db(make_test_set(60, rng), n_queries=10, db_size=40, seed=3)
    assert len(qdb.database) == 40
    fillers = [t for t in qdb.database if "#" not in t.id]
    assert len(fillers) == 30
    query_bases = {t.id[:-2] for t in qdb.queries}
    assert not query_bases & {t.id for t in fillers}


def test_build_query_db_deterministic():
    rng = np.random.default_rng(2)
    ts = make_test_set(50, rng)
    a = build_query_db(ts, 8, 30, seed=7)
    b = build_query_db(ts, 8, 30, seed=7)
    assert [t.id for t in a.queries] == [t.id for t in b.queries]
    assert [t.id for t in a.database] == [t.id for t in b.database]
    c = build_query_db(ts, 8, 30, seed=8)
    assert [t.id for t in a.database] != [t.id for t in c.database]


def test_build_query_db_rejects_insufficient_data():
    rng = np.random.default_rng(3)
    with pytest.raises(DataError, match="need 40 test trajectories"):
        build_query_db(make_test_set(35, rng), n_queries=10, db_size=40, seed=0)
    with pytest.raises(ConfigError, match="db_size"):
        build_query_db(make_test_set(35, rng), n_queries=10, db_size=5, seed=0)


def test_query_database_validates_truth_membership():
    rng = np.random.default_rng(4)
    ts = make_test_set(4, rng)
    with pytest.raises(DataError, match="no ground-truth entry"):
        QueryDatabase(queries=[ts[0]], database=[ts[1]], truth={})
    with pytest.raises(DataError, match="missing from database"):
        QueryDatabase(queries=[ts[0]], database=[ts[1]], truth={ts[0].id: "nope"})


# ---------------------------------------------------------------------------
# ranking and metrics


def test_mean_rank_matches_oracle_on_random_instances():
    """Harness ranking must agree exactly with the brute-force reference."""
    rng = np.random.default_rng(11)
    for trial in range(100):
        nq = int(rng.integers(3, 12))
        nd = nq + int(rng.integers(0, 20))
        ts = [
            Trajectory(id=f"x{trial}_{i}", points=rng.uniform(0, 10, (12, 2)))
            for i in range(nq + nd)
        ]
        qdb = build_query_db(ts, nq, nd, seed=trial)
        d = int(rng.integers(2, 9))
        emb = {
            t.id: rng.normal(size=d).astype(np.float32)
            for t in list(qdb.queries) + list(qdb.database)
        }
        rows, truths = [], []
        db_ids = [t.id for t in qdb.database]
        for qa in qdb.queries:
            dists = np.array(
                [embedding_distance(emb[qa.id], emb[c]) for c in db_ids]
            )
            rows.append((list(db_ids), dists))
            truths.append(qdb.truth[qa.id])
        assert mean_rank(emb, qdb) == ref_mean_rank(rows, truths)


def test_mean_rank_toy_values():
    rng = np.random.default_rng(12)
    ts = make_test_set(12, rng)
    qdb = build_query_db(ts, 3, 12, seed=0)
    # each query sits exactly on its counterpart, far from everything else
    emb = {}
    for i, qa in enumerate(qdb.queries):
        v = np.zeros(3, dtype=np.float32)
        v[0] = 100.0 * (i + 1)
        emb[qa.id] = v
        emb[qdb.truth[qa.id]] = v.copy()
    for t in qdb.database:
        if t.id not in emb:
            emb[t.id] = rng.normal(size=3).astype(np.float32)
    assert mean_rank(emb, qdb) == 1.0


def test_mean_rank_breaks_ties_by_id():
    ts = make_test_set(2, np.random.default_rng(13))
    qdb = build_query_db(ts, 1, 2, seed=0)
    qa = qdb.queries[0]
    emb = {t.id: np.ones(2, dtype=np.float32) for t in qdb.database}
    emb[qa.id] = np.ones(2, dtype=np.float32)
    # every candidate is at distance 0; rank = position of truth in id order
    ids = sorted(t.id for t in qdb.database)
    expect = ids.index(qdb.truth[qa.id]) + 1
    assert mean_rank(emb, qdb) == float(expect)


def test_sub_databases_are_nested_and_keep_truths():
    rng = np.random.default_rng(14)
    qdb = build_query_db(make_test_set(60, rng), 10, 50, seed=1)
    pools = [set(_sub_db_ids(qdb, f, seed=5)) for f in (0.2, 0.4, 0.6, 0.8, 1.0)]
    for small, big in zip(pools, pools[1:]):
        assert small <= big
    truths = set(qdb.truth.values())
    for pool in pools:
        assert truths <= pool
    assert len(pools[-1]) == 50
    assert len(pools[0]) == max(len(truths), round(0.2 * 50))
    with pytest.raises(ConfigError, match="db_fraction"):
        mean_rank({}, qdb, db_fraction=0.0)


def test_hit_ratio_and_recall_match_oracles():
    rng = np.random.default_rng(15)
    for trial in range(100):
        nq = int(rng.integers(2, 8))
        nc = int(rng.integers(25, 40))
        cids = [f"c{j}" for j in range(nc)]
        prows, trows, pred, true = [], [], [], []
        for _ in range(nq):
            pd_, td_ = rng.random(nc), rng.random(nc)
            prows.append((list(cids), pd_))
            trows.append((list(cids), td_))
            pred.append(rank_by_distance(cids, pd_))
            true.append(rank_by_distance(cids, td_))
        for k in (1, 5, 20):
            assert hr_at_k(pred, true, k) == ref_hit_ratio(prows, trows, k)
        assert r5_at_20(pred, true) == ref_r5_at_20(prows, trows)
        assert r5_at_20(pred, true) >= hr_at_k(pred, true, 5)


def test_metric_input_validation():
    pred = [[f"c{j}" for j in range(30)]]
    with pytest.raises(ConfigError, match="k must be"):
        hr_at_k(pred, pred, 0)
    with pytest.raises(DataError, match="need >= 31"):
        hr_at_k(pred, pred, 31)
    with pytest.raises(DataError, match="at least one query"):
        hr_at_k([], [], 5)
    with pytest.raises(DataError, match=">= 20 predicted"):
        r5_at_20([["a"] * 10], [["a"] * 10])
    with pytest.raises(DataError, match="rankings"):
        hr_at_k(pred, pred + pred, 5)


@given(
    dists=st.lists(st.integers(0, 10**6), min_size=3, max_size=40, unique=True),
    scale=st.integers(1, 1000),
    shift=st.integers(0, 10**6),
)
@settings(max_examples=60, deadline=None)
def test_ranking_invariant_under_monotone_transform(dists, scale, shift):
    """x -> scale*x + shift preserves strict order, so rankings cannot move.

    Integer-valued distances keep the transform exact; with float inputs a
    transform can round two close values into a tie and legitimately reorder.
    """
    ids = [f"c{j}" for j in range(len(dists))]
    d = np.array(dists, dtype=np.float64)
    assert rank_by_distance(ids, d) == rank_by_distance(ids, scale * d + shift)
    assert rank_by_distance(ids, d) == rank_by_distance(ids, np.sqrt(d))


# ---------------------------------------------------------------------------
# protocols


def fake_embed(t: Trajectory) -> np.ndarray:
    v = np.zeros(4, dtype=np.float32)
    v[:2] = t.points[0]
    v[2] = t.n
    v[3] = t.points[-1, 0]
    return v


def test_robustness_at_rate_zero_equals_plain_mean_rank():
    rng = np.random.default_rng(16)
    qdb = build_query_db(make_test_set(60, rng), 10, 40, seed=3)
    plain = mean_rank(
        embed_all(list(qdb.queries) + list(qdb.database), fake_embed), qdb, seed=9
    )
    down = robustness_eval(qdb, fake_embed, "downsample", [0.0, 0.3], seed=9)
    assert down[0].metrics["mean_rank"] == plain
    dis = robustness_eval(
        qdb, fake_embed, "distort", [0.0, 0.2], seed=9, planar=True,
        distort_magnitude_m=0.5,
    )
    assert dis[0].metrics["mean_rank"] == plain
    assert dis[1].settings == {"transform": "distort", "rate": 0.2, "magnitude_m": 0.5}


def test_robustness_is_deterministic_and_validates_inputs():
    rng = np.random.default_rng(17)
    qdb = build_query_db(make_test_set(40, rng), 5, 20, seed=0)
    a = robustness_eval(qdb, fake_embed, "downsample", [0.4], seed=2)
    b = robustness_eval(qdb, fake_embed, "downsample", [0.4], seed=2)
    assert a[0].metrics == b[0].metrics
    with pytest.raises(ConfigError, match="unknown transform"):
        robustness_eval(qdb, fake_embed, "smooth", [0.1])
    with pytest.raises(ConfigError, match="at least one level"):
        robustness_eval(qdb, fake_embed, "downsample", [])


def test_search_eval_reports_one_row_per_fraction():
    rng = np.random.default_rng(18)
    qdb = build_query_db(make_test_set(40, rng), 5, 20, seed=0)
    reports = search_eval(qdb, fake_embed, db_fractions=[0.5, 1.0], seed=4, checkpoint_sha="abc")
    assert [r.settings["db_fraction"] for r in reports] == [0.5, 1.0]
    for r in reports:
        assert r.protocol == "search"
        assert r.checkpoint_sha == "abc"
        assert r.settings["db_size"] == 20
        assert r.metrics["mean_rank"] >= 1.0


# ---------------------------------------------------------------------------
# fine-tuning


def test_calibrate_alpha_puts_median_at_half():
    rng = np.random.default_rng(19)
    d = np.abs(rng.normal(size=501)) + 0.05
    alpha = calibrate_alpha(d)
    assert np.exp(-alpha * np.median(d)) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(DataError, match="positive"):
        calibrate_alpha(np.zeros(5))
    with pytest.raises(DataError, match="finite"):
        calibrate_alpha(np.array([1.0, np.nan]))


def test_sample_pairs_never_pairs_an_item_with_itself():
    rng = np.random.default_rng(20)
    pairs = sample_pairs(30, 500, rng)
    assert pairs.shape == (500, 2)
    assert (pairs[:, 0] != pairs[:, 1]).all()
    assert pairs.min() >= 0 and pairs.max() < 30
    with pytest.raises(DataError, match="at least 2"):
        sample_pairs(1, 10, rng)


def test_finetune_head_learns_a_hidden_metric():
    """Measure distance uses only 2 of 16 dims; raw distance is noise-dominated.

    The untrained head ranks near chance while the trained head should
    recover most of the true neighborhoods.
    """
    rng = np.random.default_rng(7)
    N, d = 80, 16
    emb = rng.normal(size=(N, d)).astype(np.float32)
    emb[:, 2:] *= 10.0
    signal = emb[:, :2]
    pairs = sample_pairs(N, 1500, np.random.default_rng(1))
    dm = np.linalg.norm(signal[pairs[:, 0]] - signal[pairs[:, 1]], axis=1).astype(np.float64)

    head0 = finetune(emb, pairs, dm, FinetuneConfig(epochs=0, seed=5))
    head = finetune(emb, pairs, dm, FinetuneConfig(epochs=400, lr=3e-3, seed=5))
    assert head.losses[-1] < 0.1 * head.losses[0]

    cand_ids = [str(j) for j in range(20, N)]

    def rankings(h):
        out = h.apply(emb)
        pred, true = [], []
        for qi in range(20):
            pred.append(rank_by_distance(cand_ids, np.linalg.norm(out[qi] - out[20:], axis=1)))
            true.append(rank_by_distance(cand_ids, np.linalg.norm(signal[qi] - signal[20:], axis=1)))
        return pred, true

    p0, t0 = rankings(head0)
    pt, tt = rankings(head)
    before, after = hr_at_k(p0, t0, 5), hr_at_k(pt, tt, 5)
    assert after >= before + 0.3
    assert r5_at_20(pt, tt) >= hr_at_k(pt, tt, 5)


def test_finetune_is_deterministic():
    rng = np.random.default_rng(21)
    emb = rng.normal(size=(20, 8)).astype(np.float32)
    pairs = sample_pairs(20, 100, np.random.default_rng(0))
    dm = np.abs(rng.normal(size=100)) + 0.1
    a = finetune(emb, pairs, dm, FinetuneConfig(epochs=30, seed=3))
    b = finetune(emb, pairs, dm, FinetuneConfig(epochs=30, seed=3))
    assert np.array_equal(a.w1, b.w1) and np.array_equal(a.b2, b.b2)
    assert a.losses == b.losses


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finetune_aborts_on_divergence_and_rejects_bad_inputs():
    rng = np.random.default_rng(22)
    emb = rng.normal(size=(40, 8)).astype(np.float32)
    pairs = sample_pairs(40, 200, np.random.default_rng(0))
    dm = np.abs(rng.normal(size=200)) + 0.1
    with pytest.raises(NumericError, match="not finite"):
        finetune(emb, pairs, dm, FinetuneConfig(epochs=10, lr=1e30, seed=0))
    bad = emb.copy()
    bad[0, 0] = np.nan
    with pytest.raises(DataError, match="embeddings must be finite"):
        finetune(bad, pairs, dm, FinetuneConfig(epochs=1))
    with pytest.raises(DataError, match="measure distances must be finite"):
        finetune(emb, pairs, np.full(200, np.nan), FinetuneConfig(epochs=1))
    with pytest.raises(DataError, match="shape"):
        finetune(emb, pairs[:, :1], dm, FinetuneConfig(epochs=1))
    with pytest.raises(DataError, match="out of range"):
        finetune(emb, pairs + 40, dm, FinetuneConfig(epochs=1))
    with pytest.raises(DataError, match="measure distances"):
        finetune(emb, pairs, dm[:10], FinetuneConfig(epochs=1))


def test_finetune_protocol_report_shape_and_determinism():
    rng = np.random.default_rng(23)
    trajs = make_test_set(60, rng, n=12)
    kind = MeasureKind("hausdorff", planar=True)
    cfg = FinetuneConfig(epochs=40, lr=1e-3, seed=1)
    run = lambda: finetune_protocol(
        trajs, fake_embed, kind, cfg, n_queries=8, n_pairs=300, seed=5, checkpoint_sha="ck"
    )
    reports = run()
    assert len(reports) == 1
    rep = reports[0]
    assert rep.protocol == "finetune"
    assert rep.seed == 5 and rep.checkpoint_sha == "ck"
    assert rep.settings == {
        "measure": "hausdorff",
        "n_queries": 8,
        "n_candidates": 52,
        "n_pairs": 300,
        "epochs": 40,
        "lr": 1e-3,
    }
    for key in ("hr_at_5", "hr_at_20", "r5_at_20", "hr_at_5_untrained", "final_loss"):
        assert key in rep.metrics
    assert rep.metrics["r5_at_20"] >= rep.metrics["hr_at_5"] - 1e-12
    assert run()[0].metrics == rep.metrics

    with pytest.raises(ConfigError, match="n_queries"):
        finetune_protocol(trajs, fake_embed, kind, cfg, n_queries=0)
    with pytest.raises(DataError, match="at least 20 candidates"):
        finetune_protocol(trajs[:25], fake_embed, kind, cfg, n_queries=10)


# ---------------------------------------------------------------------------
# reports


def sample_reports() -> list[EvalReport]:
    return [
        EvalReport("search", {"db_fraction": 1.0, "db_size": 20}, {"mean_rank": 2.5}, 7, "sha1"),
        EvalReport("robustness", {"transform": "downsample", "rate": 0.3}, {"mean_rank": 4.0}, 7, "sha1"),
    ]


def test_emit_report_json_roundtrip(tmp_path):
    p = tmp_path / "r.json"
    reports = sample_reports()
    emit_report(reports, str(p), "json")
    back = load_report(str(p))
    assert [r.to_dict() for r in back] == [r.to_dict() for r in reports]
    p2 = tmp_path / "r2.json"
    emit_report(reports, str(p2), "json")
    assert p.read_bytes() == p2.read_bytes()


def test_emit_report_csv_layout(tmp_path):
    p = tmp_path / "r.csv"
    emit_report(sample_reports(), str(p), "csv")
    lines = p.read_text().splitlines()
    assert lines[0] == (
        "protocol,settings.db_fraction,settings.db_size,settings.rate,"
        "settings.transform,metrics.mean_rank,seed,checkpoint_sha"
    )
    assert lines[1] == "search,1.0,20,,,2.5,7,sha1"
    assert lines[2] == "robustness,,,0.3,downsample,4.0,7,sha1"


def test_emit_report_rejects_empty_and_unknown_format(tmp_path):
    with pytest.raises(DataError, match="empty"):
        emit_report([], str(tmp_path / "x.json"), "json")
    with pytest.raises(ConfigError, match="format"):
        emit_report(sample_reports(), str(tmp_path / "x.yaml"), "yaml")
