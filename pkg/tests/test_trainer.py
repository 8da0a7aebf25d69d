import csv
import os

import numpy as np
import pytest

import tjepa.train as T
from tjepa import autodiff as A
from tjepa import model as M
from tjepa.cells import EmbeddingTable, build_cell_graph
from tjepa.errors import ConfigError, DataError, NumericError
from tjepa.trajectory import GridSpec


@pytest.fixture(scope="module")
def world():
    grid = GridSpec(0.0, 0.0, 8.0, 8.0, cell_size_m=1.0, planar=True)
    graph = build_cell_graph(grid)
    mcfg = M.ModelConfig(d=16, enc_layers=1, enc_heads=2, pred_layers=1, pred_heads=2, max_len=30)
    rng = np.random.default_rng(0)
    table = EmbeddingTable(grid_hash=grid.hash(), vectors=rng.normal(size=(64, 16)).astype(np.float32) * 0.5)
    data = [np.sort(rng.integers(0, 64, size=rng.integers(6, 20))) for _ in range(12)]
    return grid, graph, mcfg, table, data


def test_lr_schedule_values():
    cfg = T.TrainConfig()
    assert T.lr_at(0, cfg) == 1e-4
    assert T.lr_at(4, cfg) == 1e-4
    assert T.lr_at(5, cfg) == 5e-5
    assert T.lr_at(14, cfg) == 2.5e-5
    with pytest.raises(ConfigError):
        T.lr_at(-1, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        T.TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        T.TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        T.TrainConfig(early_stop_patience=0)


def test_training_reduces_loss_and_is_deterministic(world):
    grid, graph, mcfg, table, data = world

    def run():
        cfg = T.TrainConfig(epochs=3, lr=1e-3, batch_size=4, seed=3)
        state = T.prepare_state(mcfg, grid.hash(), cfg)
        return T.train(data, table, graph, state, cfg)

    r1, r2 = run(), run()
    assert r1.log[-1].loss < r1.log[0].loss
    assert [r.loss for r in r1.log] == [r.loss for r in r2.log]
    for n in r1.state.store.names():
        assert np.array_equal(r1.state.store[n].data, r2.state.store[n].data)


def test_no_optimizer_state_for_target_branch(world):
    grid, graph, mcfg, table, data = world
    cfg = T.TrainConfig(epochs=1, batch_size=8, seed=1)
    state = T.prepare_state(mcfg, grid.hash(), cfg)
    res = T.train(data, table, graph, state, cfg)
    names = set(res.optimizer_param_names)
    assert not any(n.startswith("tgt_enc.") or n == "pos_emb.tgt" for n in names)
    assert {"ctx_enc.layer0.attn.wq", "pred.layer0.cross_attn.wq", "adjfuse.proj",
            "mask_token", "pos_emb.ctx", "pos_emb.pred"} <= names


class _Scripted:
    """Stands in for the batch forward; emits a scripted loss per epoch and
    bumps one parameter so epochs leave distinguishable states."""

    def __init__(self, losses, state):
        self.losses = losses
        self.state = state
        self.calls = 0

    def __call__(self, batch, table, graph, state, rng):
        loss = self.losses[self.calls]
        self.calls += 1
        self.state.store["mask_token"].data += 1.0
        out = M.JepaBatchOutput(
            loss=A.Tensor(np.asarray(loss, dtype=np.float64)),
            targets=[None] * len(batch),
            predictions=[], target_masks=[], context_sets=[], fallbacks=0, skipped=0,
        )
        return out


def scripted_run(monkeypatch, world, losses, patience):
    grid, graph, mcfg, table, data = world
    cfg = T.TrainConfig(epochs=len(losses), batch_size=64, early_stop_patience=patience, seed=0)
    state = T.prepare_state(mcfg, grid.hash(), cfg)
    state.store["mask_token"].data[:] = 0.0
    stub = _Scripted(losses, state)
    monkeypatch.setattr(T, "jepa_forward_batch", stub)
    return T.train(data, table, graph, state, cfg), stub


def test_early_stop_after_patience_epochs(monkeypatch, world):
    res, _ = scripted_run(monkeypatch, world, [1.0, 0.9, 0.9, 0.9, 0.8], patience=2)
    assert res.stopped_early
    assert len(res.log) == 4  # stops before the would-be improvement at epoch 4
    res, _ = scripted_run(monkeypatch, world, [1.0, 0.9, 0.8, 0.7], patience=2)
    assert not res.stopped_early
    assert len(res.log) == 4


def test_tiny_improvements_do_not_reset_patience(monkeypatch, world):
    # 1e-7 drops are below the improvement tolerance
    res, _ = scripted_run(monkeypatch, world, [1.0, 1.0 - 1e-7, 1.0 - 2e-7], patience=2)
    assert res.stopped_early and len(res.log) == 3


def test_best_loss_state_is_restored(monkeypatch, world):
    res, _ = scripted_run(monkeypatch, world, [1.0, 0.5, 0.9, 0.9], patience=5)
    # mask_token counts completed epochs; best epoch was the second (value 2)
    assert float(res.state.store["mask_token"].data[0]) == 2.0
    assert [r.loss for r in res.log] == [1.0, 0.5, 0.9, 0.9]


def test_train_log_csv(tmp_path, world):
    grid, graph, mcfg, table, data = world
    cfg = T.TrainConfig(epochs=2, batch_size=8, seed=5, lr_halve_every=1)
    state = T.prepare_state(mcfg, grid.hash(), cfg)
    res = T.train(data, table, graph, state, cfg)
    path = os.path.join(tmp_path, "log.csv")
    T.save_train_log(path, res.log)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert rows[0]["epoch"] == "0" and rows[1]["epoch"] == "1"
    assert float(rows[0]["lr"]) == cfg.lr and float(rows[1]["lr"]) == cfg.lr / 2
    assert float(rows[0]["loss"]) == res.log[0].loss
    assert rows[0]["fallbacks"] == str(res.log[0].fallbacks)


def test_warm_start_zero_epochs_reproduces_embeddings(tmp_path, world):
    grid, graph, mcfg, table, data = world
    cfg = T.TrainConfig(epochs=2, lr=1e-3, batch_size=4, seed=3)
    state = T.prepare_state(mcfg, grid.hash(), cfg)
    res = T.train(data, table, graph, state, cfg)
    ck = os.path.join(tmp_path, "m.ckpt")
    M.save_model(ck, res.state)
    cfg0 = T.TrainConfig(epochs=0, warm_start=ck, seed=99)
    st0 = T.prepare_state(mcfg, grid.hash(), cfg0)
    res0 = T.train(data, table, graph, st0, cfg0)
    assert res0.log == []
    a = M.embed_cells(data[0], table, graph, res.state)
    b = M.embed_cells(data[0], table, graph, res0.state)
    assert a.tobytes() == b.tobytes()


def test_nan_loss_aborts_with_diagnostic(tmp_path, world):
    grid, graph, mcfg, table, data = world
    cfg = T.TrainConfig(epochs=1, batch_size=8, seed=0)
    state = T.prepare_state(mcfg, grid.hash(), cfg)
    state.store["mask_token"].data[0] = np.nan
    ck = os.path.join(tmp_path, "run.ckpt")
    with pytest.raises(NumericError, match="aborted"):
        T.train(data, table, graph, state, cfg, checkpoint_path=ck)
    assert os.path.exists(ck + ".diverged")


def test_dataset_validation(world):
    grid, graph, mcfg, table, _ = world
    cfg = T.TrainConfig(epochs=1)
    state = T.prepare_state(mcfg, grid.hash(), cfg)
    with pytest.raises(DataError):
        T.train([], table, graph, state, cfg)
    with pytest.raises(DataError, match="max_len"):
        T.train([np.zeros(31, dtype=np.int64)], table, graph, state, cfg)
    with pytest.raises(DataError, match="long enough"):
        T.train([np.array([1, 2, 3])], table, graph, state, cfg)


def test_checkpoint_roundtrip_preserves_inference(tmp_path, world):
    grid, graph, mcfg, table, data = world
    cfg = T.TrainConfig(epochs=1, batch_size=8, seed=7)
    state = T.prepare_state(mcfg, grid.hash(), cfg)
    ck = os.path.join(tmp_path, "m.ckpt")
    res = T.train(data, table, graph, state, cfg, checkpoint_path=ck)
    back = M.load_model(ck, expect_grid_hash=grid.hash())
    for cells in data[:3]:
        assert (
            M.embed_cells(cells, table, graph, res.state).tobytes()
            == M.embed_cells(cells, table, graph, back).tobytes()
        )
