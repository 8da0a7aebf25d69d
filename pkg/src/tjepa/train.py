"""Self-supervised training loop: schedule, early stopping, logging, warm start.

Each batch runs one prediction forward, one Adam step over the trainable
parameters (context encoder, predictor, neighborhood mix, mask token,
positional tables), then an EMA update of the target encoder. The target
branch never enters the optimizer; it moves only through EMA.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .cells import CellGraph, EmbeddingTable
from .errors import ConfigError, DataError, NumericError
from .model import (
    ModelConfig,
    ModelState,
    ema_update,
    init_model,
    jepa_forward_batch,
    load_model,
    save_model,
    trainable_names,
)
from .trajectory import CellTrajectory


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    lr_halve_every: int = 5
    early_stop_patience: int = 5
    batch_size: int = 64
    seed: int = 0
    warm_start: str | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("lr_halve_every", "early_stop_patience", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float
    fallbacks: int


@dataclass
class TrainResult:
    state: ModelState
    log: list[EpochRecord]
    optimizer_param_names: list[str]
    stopped_early: bool


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)


def prepare_state(model_cfg: ModelConfig, grid_hash: str, cfg: TrainConfig) -> ModelState:
    """Warm-start from a checkpoint when configured, else initialize fresh."""
    if cfg.warm_start is not None:
        return load_model(cfg.warm_start, expect_grid_hash=grid_hash)
    return init_model(model_cfg, grid_hash, np.random.default_rng(cfg.seed))


def save_train_log(path: str, log: list[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,loss,lr,seconds,fallbacks\n")
        for r in log:
            f.write(f"{r.epoch},{r.loss!r},{r.lr!r},{r.seconds:.3f},{r.fallbacks}\n")


def _abort_diagnostic(state: ModelState, checkpoint_path: str | None, epoch: int, reason: str) -> None:
    note = ""
    if checkpoint_path is not None:
        diag = checkpoint_path + ".diverged"
        save_model(diag, state)
        note = f"; diagnostic checkpoint written to {diag}"
    raise NumericError(f"training aborted at epoch {epoch}: {reason}{note}")


def train(
    dataset: list[CellTrajectory | np.ndarray],
    table: EmbeddingTable,
    graph: CellGraph,
    state: ModelState,
    cfg: TrainConfig,
    checkpoint_path: str | None = None,
) -> TrainResult:
    """Train in place and return the best-train-loss state and per-epoch log.

    Sequences shorter than 4 points are skipped by the forward pass; anything
    over ``max_len`` is rejected up front. Improvement means an epoch-mean
    loss at least 1e-6 below the best so far; ``early_stop_patience``
    non-improving epochs in a row stop the run. The state is rolled back to
    the best epoch before returning (and saving, when a path is given).
    """
    if not dataset:
        raise DataError("training dataset is empty")
    max_len = state.cfg.max_len
    for i, item in enumerate(dataset):
        n = len(item.cells if isinstance(item, CellTrajectory) else item)
        if n > max_len:
            raise DataError(f"dataset item {i} has {n} points, over max_len {max_len}")

    opt = ParamStore()
    for name in trainable_names(state):
        opt.adopt(name, state.store[name])

    log: list[EpochRecord] = []
    best_loss = float("inf")
    best_tensors: dict[str, np.ndarray] | None = None
    bad_epochs = 0
    stopped_early = False

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng((cfg.seed, epoch))
        order = rng.permutation(len(dataset))
        t0 = time.perf_counter()
        loss_sum = 0.0
        n_items = 0
        fallbacks = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
            out = jepa_forward_batch(batch, table, graph, state, rng)
            if out is None:
                continue
            loss = float(out.loss.data)
            if not np.isfinite(loss):
                _abort_diagnostic(state, checkpoint_path, epoch, f"non-finite loss {loss}")
            opt.zero_grad()
            try:
                ad.backward(out.loss)
                ad.adam_step(opt, lr)
            except NumericError as exc:
                _abort_diagnostic(state, checkpoint_path, epoch, str(exc))
            ema_update(state)
            kept = len(out.targets)
            loss_sum += loss * kept
            n_items += kept
            fallbacks += out.fallbacks
        if n_items == 0:
            raise DataError("no trajectory in the dataset is long enough to train on")
        epoch_loss = loss_sum / n_items
        log.append(EpochRecord(epoch, epoch_loss, lr, time.perf_counter() - t0, fallbacks))

        if epoch_loss < best_loss - 1e-6:
            best_loss = epoch_loss
            best_tensors = {n: t.data.copy() for n, t in state.store.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                stopped_early = True
                break

    if best_tensors is not None:
        for name, arr in best_tensors.items():
            state.store[name].data = arr
    if checkpoint_path is not None:
        save_model(checkpoint_path, state)
    return TrainResult(
        state=state, log=log, optimizer_param_names=opt.names(), stopped_early=stopped_early
    )
