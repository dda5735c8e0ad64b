"""Training engines: source pretraining, recalibration on the full objective, baselines."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as mdl
from .data import RecalibrationTask, Session
from .losses import Batch, Hyper, LossBreakdown, SpeedBins, total_loss
from .numerics import AdamState, GradTape, adam_step, make_rng

log = logging.getLogger(__name__)

# weight masks for the named baselines
PRESETS = {
    "ssar": {},
    "naive": {"gamma": 0.0, "theta": 0.0},
    "mmd": {"beta": 0.0, "theta": 0.0},
}


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; carries the last finite parameters."""

    def __init__(self, message: str, last_params: mdl.DecoderParams, epoch: int, step: int):
        super().__init__(message)
        self.last_params = last_params
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-4
    hyper: Hyper = field(default_factory=Hyper)
    seed: int = 0
    warm_start: bool = False
    relu_last: bool = True
    # standardize regression targets by source label statistics during training
    normalize_labels: bool = True
    checkpoint_every: int = 0
    # keep every n-th step in the in-memory log; 0 keeps none
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def with_preset(self, name: str) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(self, hyper=replace(self.hyper, **PRESETS[name]))

    def with_hyper(self, **kw) -> "TrainConfig":
        return replace(self, hyper=replace(self.hyper, **kw))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    loss: LossBreakdown
    wall_ms: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "wall_ms": self.wall_ms, **self.loss.to_dict()}


@dataclass
class TrainResult:
    params: mdl.DecoderParams
    log: list
    final_epoch_loss: float
    first_epoch_loss: float

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec.to_dict()) + "\n")


def largest_remainder(total: int, sizes) -> np.ndarray:
    """Split ``total`` proportionally to ``sizes`` (Hamilton method).

    Every non-empty part receives at least one slot, even if that means
    exceeding ``total`` when it is smaller than the number of non-empty parts.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    n = sizes.sum()
    if n == 0:
        return np.zeros(len(sizes), dtype=int)
    exact = total * sizes / n
    quota = np.floor(exact).astype(int)
    rem = exact - quota
    for i in np.argsort(-rem, kind="stable")[: total - quota.sum()]:
        quota[i] += 1
    for i in range(len(sizes)):
        if sizes[i] > 0 and quota[i] == 0:
            donor = int(np.argmax(quota))
            if quota[donor] > 1:
                quota[donor] -= 1
            # with fewer slots than non-empty pools the total grows past ``total``
            quota[i] = 1
    return quota


def make_batches(sizes, batch_size: int, seed, epoch: int):
    """Row indices per pool for each composite batch of one epoch.

    ``sizes`` are the pool sizes (source, labeled target, unlabeled target).
    Each batch draws its pool's quota from a per-epoch shuffle, so the epoch
    covers every row exactly once. A trailing batch without any labeled row is
    merged into its predecessor.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    sizes = [int(s) for s in sizes]
    quota = largest_remainder(batch_size, sizes)
    rng = make_rng([int(seed), int(epoch), 104729])
    perms = [rng.permutation(n) for n in sizes]
    n_batches = max(int(np.ceil(n / q)) for n, q in zip(sizes, quota) if n > 0)
    batches = []
    for b in range(n_batches):
        batches.append([p[b * q : (b + 1) * q] for p, q in zip(perms, quota)])
    labeled_pools = range(len(sizes) - 1)
    while len(batches) > 1 and all(len(batches[-1][k]) == 0 for k in labeled_pools):
        last = batches.pop()
        batches[-1] = [np.concatenate([a, b]) for a, b in zip(batches[-1], last)]
    return batches


@dataclass
class _Pools:
    xs: np.ndarray
    ys: np.ndarray
    xl: np.ndarray
    yl: np.ndarray
    xu: np.ndarray
    bins: SpeedBins
    label_mean: np.ndarray
    label_sd: np.ndarray

    @property
    def sizes(self):
        return (len(self.xs), len(self.xl), len(self.xu))

    def batch(self, idx, normalize_labels: bool) -> Batch:
        si, li, ui = idx
        ys, yl = self.ys[si], self.yl[li]
        zs = (ys - self.label_mean) / self.label_sd
        zl = (yl - self.label_mean) / self.label_sd
        return Batch(
            x_source=self.xs[si],
            y_source=zs if normalize_labels else ys,
            x_labeled=self.xl[li],
            y_labeled=zl if normalize_labels else yl,
            x_unlabeled=self.xu[ui],
            source_bins=self.bins.assign(ys),
            target_bins=self.bins.assign(yl),
            ccc_labels=np.vstack([zs, zl]),
        )


def fold_label_scale(params: mdl.DecoderParams, mean, sd) -> mdl.DecoderParams:
    """Regressor predicting standardized labels -> regressor predicting raw labels."""
    out = params.copy()
    out.weights[3] = params.weights[3] * sd[None, :]
    out.biases[3] = params.biases[3] * sd + mean
    return out


def unfold_label_scale(params: mdl.DecoderParams, mean, sd) -> mdl.DecoderParams:
    out = params.copy()
    out.weights[3] = params.weights[3] / sd[None, :]
    out.biases[3] = (params.biases[3] - mean) / sd
    return out


def _pools(source: Session, xl, yl, xu, n_bins: int) -> _Pools:
    ys = source.velocity
    yl = np.asarray(yl, dtype=np.float64).reshape(-1, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bins = SpeedBins.fit(np.vstack([ys, yl]), n_bins)
    sd = ys.std(axis=0)
    sd[sd == 0] = 1.0
    return _Pools(
        source.features,
        ys,
        np.asarray(xl, dtype=np.float64).reshape(-1, source.n_channels),
        yl,
        np.asarray(xu, dtype=np.float64).reshape(-1, source.n_channels),
        bins,
        ys.mean(axis=0),
        sd,
    )


def _fit(pools: _Pools, params: mdl.DecoderParams, config: TrainConfig, trainable=None, on_epoch=None):
    hyper = config.hyper
    norm = config.normalize_labels
    if norm:
        params = unfold_label_scale(params, pools.label_mean, pools.label_sd)
    arrays = params.arrays()
    names = params.names()
    if trainable is None:
        trainable = [True] * len(arrays)
    train_idx = [i for i, t in enumerate(trainable) if t]
    state = AdamState.for_params(
        [arrays[i] for i in train_idx],
        lr=config.lr,
        beta1=config.betas[0],
        beta2=config.betas[1],
        weight_decay=config.weight_decay,
    )
    records = []
    step = 0
    epoch_losses = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        totals = []
        for idx in make_batches(pools.sizes, config.batch_size, config.seed, epoch):
            batch = pools.batch(idx, norm)
            tape = GradTape()
            dec = mdl.TapedDecoder(
                mdl.DecoderParams.from_arrays(arrays, params.relu_last), tape, trainable
            )
            try:
                total, breakdown = total_loss(dec, batch, hyper)
                grads = tape.gradient(total, [dec.vars[i] for i in train_idx])
                new = adam_step([arrays[i] for i in train_idx], grads, state, [names[i] for i in train_idx])
            except FloatingPointError as exc:
                last = _export(arrays, params.relu_last, pools, norm)
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", last, epoch, step) from exc
            for i, arr in zip(train_idx, new):
                arrays[i] = arr
            step += 1
            totals.append(breakdown.total)
            if config.log_every and (step - 1) % config.log_every == 0:
                records.append(TrainLogRecord(epoch, step, breakdown, (time.perf_counter() - t0) * 1e3))
        epoch_losses.append(float(np.mean(totals)))
        if on_epoch is not None:
            on_epoch(epoch, _export(arrays, params.relu_last, pools, norm))
    final = _export(arrays, params.relu_last, pools, norm)
    return TrainResult(final, records, epoch_losses[-1], epoch_losses[0])


def _export(arrays, relu_last, pools: _Pools, norm: bool) -> mdl.DecoderParams:
    params = mdl.DecoderParams.from_arrays([a.copy() for a in arrays], relu_last)
    return fold_label_scale(params, pools.label_mean, pools.label_sd) if norm else params


def _checkpointer(config: TrainConfig, out_dir):
    if not config.checkpoint_every or out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def hook(epoch, params):
        if epoch % config.checkpoint_every == 0:
            mdl.save_params(params, out_dir / f"checkpoint_epoch{epoch:04d}.json")

    return hook


def pretrain_source(source: Session, config: TrainConfig, checkpoint_dir=None) -> TrainResult:
    """Supervised fit on the source day alone (alignment and consistency terms off)."""
    if len(source) == 0:
        raise ValueError("empty source session")
    cfg = config.with_hyper(gamma=0.0, theta=0.0)
    pools = _pools(source, np.empty((0, source.n_channels)), np.empty((0, 2)),
                   np.empty((0, source.n_channels)), cfg.hyper.n_subdomains)
    params = mdl.init(config.seed, source.n_channels, config.relu_last)
    return _fit(pools, params, cfg, on_epoch=_checkpointer(cfg, checkpoint_dir))


def recalibrate(
    task: RecalibrationTask,
    config: TrainConfig,
    init_params: mdl.DecoderParams | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Fit a decoder on source + labeled target + unlabeled target with the full objective.

    Starts from a fresh random init unless ``config.warm_start`` is set and
    ``init_params`` supplied. Never reads ``task.eval_target`` labels.
    """
    src = task.source
    pools = _pools(
        src,
        task.labeled_target.features,
        task.labeled_target.velocity,
        task.unlabeled_target,
        config.hyper.n_subdomains,
    )
    if config.warm_start and init_params is not None:
        params = init_params.copy()
    else:
        params = mdl.init(config.seed, src.n_channels, config.relu_last)
    return _fit(pools, params, config, on_epoch=_checkpointer(config, checkpoint_dir))


def recalibrate_ssar(task: RecalibrationTask, config: TrainConfig, **kw) -> mdl.DecoderParams:
    return recalibrate(task, config, **kw).params


def fit_extractor_frozen_regressor(
    session: Session, source_params: mdl.DecoderParams, config: TrainConfig
) -> TrainResult:
    """Train a fresh extractor on ``session`` with the source regressor held fixed."""
    cfg = config.with_hyper(gamma=0.0, theta=0.0)
    pools = _pools(session, np.empty((0, session.n_channels)), np.empty((0, 2)),
                   np.empty((0, session.n_channels)), cfg.hyper.n_subdomains)
    fresh = mdl.init(config.seed, session.n_channels, source_params.relu_last)
    arrays = fresh.arrays()[:6] + [source_params.weights[3].copy(), source_params.biases[3].copy()]
    params = mdl.DecoderParams.from_arrays(arrays, source_params.relu_last)
    trainable = [True] * 6 + [False, False]
    return _fit(pools, params, cfg, trainable=trainable)
