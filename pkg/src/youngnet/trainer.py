"""Epoch loop: batches, loss, gradient, Adam, plateau schedule, checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .network import PotentialNetwork, load_checkpoint, save_checkpoint
from .optimizer import AdamState, NonFiniteGradientError, PlateauScheduler, adam_step, scheduler_step
from .problems import LossBreakdown, LossWeights, ProblemSpec, evaluate_loss
from .sampling import (
    LATENT_SAMPLING_MODES,
    Batch,
    GridSpec,
    mesh_batch,
    stochastic_meshgrid,
    substream,
    uniform_grid,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "total", "energy", "boundary", "curl", "lr", "batch_size", "seconds")


class TrainingError(RuntimeError):
    """Training halted on a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int, term: str | None, checkpoint: Path | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.term = term
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    problem: ProblemSpec = ProblemSpec()
    weights: LossWeights = LossWeights()
    epochs: int = 2000
    lr: float = 1e-3
    seed: int = 0
    # batch growth (2D cases): initial * multiplier ** (epoch // period), capped
    batch_initial: int = 5
    batch_multiplier: float = 2.0
    batch_period: int = 250
    batch_cap: int = 4096
    latent_sampling: str = "weighted-uniform"
    latent_range: float = 2.0
    # case 1 grid; grid_subsample draws that many x-rows per epoch when set
    grid_x: int = 201
    grid_xi: int = 201
    grid_subsample: int | None = None
    # deterministic mesh for boundary and curl penalties (2D cases)
    aux_physical: int = 9
    aux_latent: int = 9
    # plateau scheduler
    lr_factor: float = 0.5
    lr_patience: int = 50
    lr_min: float = 1e-6
    lr_threshold: float = 1e-4
    # the scheduler watches the mean total over this many trailing epochs
    lr_window: int = 250
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_initial < 1:
            raise ValueError("batch_initial must be >= 1")
        if self.batch_multiplier < 1:
            raise ValueError("batch_multiplier must be >= 1")
        if self.batch_period < 1 or self.batch_cap < 1:
            raise ValueError("batch_period and batch_cap must be >= 1")
        if self.latent_sampling not in LATENT_SAMPLING_MODES:
            raise ValueError(f"latent_sampling must be one of {LATENT_SAMPLING_MODES}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError("lr must be positive")
        if self.lr_window < 1:
            raise ValueError("lr_window must be >= 1")
        if self.grid_subsample is not None and not 1 <= self.grid_subsample <= self.grid_x:
            raise ValueError("grid_subsample must lie in [1, grid_x]")


def batch_schedule(epoch: int, config: TrainConfig) -> int:
    """``initial * multiplier ** floor(epoch / period)``, capped at ``batch_cap``."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    size = config.batch_initial * config.batch_multiplier ** (epoch // config.batch_period)
    return int(min(size, config.batch_cap))


@dataclass
class TrainRecord:
    epoch: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    energy: list[float] = field(default_factory=list)
    boundary: list[float] = field(default_factory=list)
    curl: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    batch_size: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def append(self, epoch: int, br: LossBreakdown, lr: float, batch_size: int, seconds: float):
        self.epoch.append(epoch)
        self.total.append(br.total)
        self.energy.append(br.energy_term)
        self.boundary.append(br.boundary)
        self.curl.append(br.curl_term)
        self.lr.append(lr)
        self.batch_size.append(batch_size)
        self.seconds.append(seconds)

    def arrays(self) -> dict[str, np.ndarray]:
        # wall-clock time stays out of checkpoints so they are byte-reproducible
        return {f"history.{c}": np.asarray(getattr(self, c), dtype=np.float64)
                for c in HISTORY_COLUMNS if c != "seconds"}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TrainRecord":
        rec = cls()
        for c in HISTORY_COLUMNS:
            vals = arrays.get(f"history.{c}", np.zeros(0))
            conv = int if c in ("epoch", "batch_size") else float
            setattr(rec, c, [conv(v) for v in vals])
        if len(rec.seconds) != len(rec.epoch):
            rec.seconds = [math.nan] * len(rec.epoch)  # timings of restored epochs are unknown
        return rec

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for i in range(len(self)):
                w.writerow([self.epoch[i], repr(self.total[i]), repr(self.energy[i]),
                            repr(self.boundary[i]), repr(self.curl[i]), repr(self.lr[i]),
                            self.batch_size[i], f"{self.seconds[i]:.6f}"])
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainRecord":
        rec = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                for c in HISTORY_COLUMNS:
                    conv = int if c in ("epoch", "batch_size") else float
                    getattr(rec, c).append(conv(row[c]))
        return rec

    def trailing_mean(self, end: int, window: int = 100) -> float:
        """Mean total loss over the ``window`` epochs ending at index ``end`` (exclusive)."""
        lo = max(0, end - window)
        return float(np.mean(self.total[lo:end]))


# ---------------------------------------------------------------------------
# data for one configuration
# ---------------------------------------------------------------------------

def training_grid(config: TrainConfig) -> Batch:
    """Case 1: the full (x, xi) grid."""
    return uniform_grid(GridSpec.unit(2, config.grid_x, config.grid_xi, config.latent_range))


def sampling_spec(config: TrainConfig) -> GridSpec:
    return GridSpec.unit(4, 2, 2, config.latent_range)


def aux_mesh(config: TrainConfig) -> Batch:
    """Deterministic mesh on which the 2D boundary and curl penalties are evaluated."""
    r = config.latent_range
    xs = np.linspace(0.0, 1.0, config.aux_physical)
    lat = np.linspace(-r, r, config.aux_latent)
    return mesh_batch(xs, xs, lat, lat)


def _config_fingerprint(config: TrainConfig) -> str:
    d = dataclasses.asdict(config)
    d.pop("epochs")
    d.pop("checkpoint_every")
    return json.dumps(d, sort_keys=True)


@dataclass
class _State:
    net: PotentialNetwork
    adam: AdamState
    sched: PlateauScheduler
    rng: np.random.Generator
    epoch: int
    record: TrainRecord

    def save(self, path, config: TrainConfig) -> Path:
        meta = {
            "epoch": str(self.epoch),
            "adam_t": str(self.adam.t),
            "lr": repr(self.adam.lr),
            "sched_best": repr(self.sched.best),
            "sched_num_bad": str(self.sched.num_bad),
            "rng_state": json.dumps(self.rng.bit_generator.state),
            "train_config": _config_fingerprint(config),
        }
        arrays = {"adam_m": self.adam.m, "adam_v": self.adam.v, **self.record.arrays()}
        return save_checkpoint(path, self.net, meta, arrays)


def _fresh_state(config: TrainConfig, net: PotentialNetwork) -> _State:
    return _State(
        net=net,
        adam=AdamState.zeros(net.params.size, lr=config.lr),
        sched=PlateauScheduler(config.lr_factor, config.lr_patience, config.lr_min, config.lr_threshold),
        rng=substream(config.seed, "batching"),
        epoch=0,
        record=TrainRecord(),
    )


def load_state(path, config: TrainConfig) -> _State:
    net, meta, arrays = load_checkpoint(path)
    if "epoch" not in meta:
        raise ValueError(f"{path} holds a bare network, not a training state")
    if meta.get("train_config") != _config_fingerprint(config):
        raise ValueError(f"{path} was written by a different training configuration")
    adam = AdamState(arrays["adam_m"], arrays["adam_v"], t=int(meta["adam_t"]), lr=float(meta["lr"]))
    sched = PlateauScheduler(config.lr_factor, config.lr_patience, config.lr_min, config.lr_threshold,
                             best=float(meta["sched_best"]), num_bad=int(meta["sched_num_bad"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng_state"])
    return _State(net, adam, sched, rng, int(meta["epoch"]), TrainRecord.from_arrays(arrays))


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def _epoch_batch(config: TrainConfig, state: _State, epoch: int, grid: Batch | None) -> tuple[Batch, int]:
    if config.problem.case == "bolza-1d":
        if config.grid_subsample is None:
            return grid, grid.size
        rows = np.sort(state.rng.choice(config.grid_x, size=config.grid_subsample, replace=False))
        sub = mesh_batch(grid.axes[0][rows], grid.axes[1])
        return sub, sub.size
    size = batch_schedule(epoch, config)
    batch = stochastic_meshgrid(sampling_spec(config), size, state.rng, config.latent_sampling)
    return batch, size


def _diagnose(config: TrainConfig, net: PotentialNetwork, batch: Batch, aux: Batch | None) -> str | None:
    """Name the first loss term whose value or parameter gradient is non-finite."""
    for term in ("energy", "boundary0", "boundary1", "curl"):
        tape = ad.Tape()
        br = evaluate_loss(config.problem, net, batch, config.weights, aux=aux, tape=tape)
        var = br.graph.get(term)
        if var is None:
            continue
        if not math.isfinite(float(var.value)):
            return term
        tape.finalize(var)
        if not np.all(np.isfinite(ad.grad_params(tape))):
            return term
    return None


def train(config: TrainConfig, net: PotentialNetwork, out_dir=None, resume_from=None,
          stop_after: int | None = None) -> tuple[PotentialNetwork, TrainRecord]:
    """Run the epoch loop.

    ``out_dir`` receives ``history.csv`` and checkpoints (``checkpoint_final.ckpt``,
    plus ``checkpoint_<epoch>.ckpt`` every ``checkpoint_every`` epochs).
    ``resume_from`` continues from a saved training state; ``stop_after``
    halts after that epoch as if interrupted.
    """
    if net.config.input_dim != config.problem.input_dim:
        raise ValueError(f"case {config.problem.case} needs input_dim={config.problem.input_dim}, "
                         f"network has {net.config.input_dim}")
    out = Path(out_dir) if out_dir is not None else None
    state = load_state(resume_from, config) if resume_from is not None else _fresh_state(config, net)
    grid = training_grid(config) if config.problem.case == "bolza-1d" else None
    aux = aux_mesh(config) if config.problem.case != "bolza-1d" else None
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)

    if out is not None and state.epoch == 0:
        state.save(out / "checkpoint_0.ckpt", config)

    for epoch in range(state.epoch + 1, last + 1):
        t0 = time.perf_counter()
        rng_before = state.rng.bit_generator.state
        batch, size = _epoch_batch(config, state, epoch, grid)
        tape = ad.Tape()
        br = evaluate_loss(config.problem, state.net, batch, config.weights, aux=aux, tape=tape)
        term = None
        if not math.isfinite(br.total):
            term = next((k for k, v in br.terms().items() if k != "total" and not math.isfinite(v)), "total")
        else:
            tape.finalize(br.graph["total"])
            grad = ad.grad_params(tape)
            tape.release()
            try:
                new_params = adam_step(state.adam, state.net.params, grad)
            except NonFiniteGradientError:
                term = _diagnose(config, state.net, batch, aux) or "total"
        if term is not None:
            # parameters, optimizer and record are untouched; only the batch draw moved the stream
            state.rng.bit_generator.state = rng_before
            ckpt = None
            if out is not None:
                ckpt = state.save(out / "checkpoint_last_good.ckpt", config)
                state.record.write_csv(out / "history.csv")
            raise TrainingError(f"non-finite {term} at epoch {epoch}", epoch, term, ckpt)
        lr_used = state.adam.lr
        state.net = state.net.with_params(new_params)
        state.epoch = epoch
        state.record.append(epoch, br, lr_used, size, time.perf_counter() - t0)
        monitored = br.total if config.lr_window == 1 else state.record.trailing_mean(len(state.record), config.lr_window)
        scheduler_step(state.sched, state.adam, monitored)
        if epoch % 100 == 0 or epoch == 1:
            log.info("epoch %d total %.4e energy %.4e boundary %.4e curl %.4e lr %.1e batch %d",
                     epoch, br.total, br.energy_term, br.boundary, br.curl_term, lr_used, size)
        if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            state.save(out / f"checkpoint_{epoch}.ckpt", config)

    if out is not None:
        name = "checkpoint_final.ckpt" if state.epoch == config.epochs else f"checkpoint_{state.epoch}.ckpt"
        state.save(out / name, config)
        state.record.write_csv(out / "history.csv")
    return state.net, state.record
