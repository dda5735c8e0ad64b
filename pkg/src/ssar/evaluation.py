"""Metrics, the feature-distribution probe, ablation table and robustness sweeps.

CC and R^2 are computed per output dimension (vx, vy) and averaged.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata

from . import model as mdl
from .data import RecalibrationTask, Session, split_rows, split_target
from .numerics import make_rng, pca_project
from .train import TrainConfig, fit_extractor_frozen_regressor, pretrain_source, recalibrate

METRIC_CONVENTION = "cc and r2 are means of per-dimension values over (vx, vy)"


@dataclass
class MetricReport:
    cc: float
    r2: float
    cc_per_dim: list
    r2_per_dim: list
    n_eval: int

    def to_dict(self) -> dict:
        return asdict(self)


def _as_2d(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y[:, None] if y.ndim == 1 else y


def pearson_cc(y_true, y_pred):
    """Per-dimension Pearson r and their mean."""
    yt, yp = _as_2d(y_true), _as_2d(y_pred)
    if yt.shape != yp.shape:
        raise ValueError(f"shape mismatch {yt.shape} vs {yp.shape}")
    if yt.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    dt = yt - yt.mean(axis=0)
    dp = yp - yp.mean(axis=0)
    st = np.sqrt((dt * dt).sum(axis=0))
    sp = np.sqrt((dp * dp).sum(axis=0))
    if np.any(st == 0) or np.any(sp == 0):
        raise ValueError("correlation undefined for a zero-variance dimension")
    per = (dt * dp).sum(axis=0) / (st * sp)
    per = np.clip(per, -1.0, 1.0)
    return per, float(per.mean())


def r_squared(y_true, y_pred):
    """Per-dimension 1 - SS_res / SS_tot and their mean."""
    yt, yp = _as_2d(y_true), _as_2d(y_pred)
    if yt.shape != yp.shape:
        raise ValueError(f"shape mismatch {yt.shape} vs {yp.shape}")
    if yt.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    ss_tot = ((yt - yt.mean(axis=0)) ** 2).sum(axis=0)
    if np.any(ss_tot == 0):
        raise ValueError("R^2 undefined for a zero-variance target dimension")
    per = 1.0 - ((yt - yp) ** 2).sum(axis=0) / ss_tot
    return per, float(per.mean())


def metric_report(y_true, y_pred) -> MetricReport:
    cc_dims, cc = pearson_cc(y_true, y_pred)
    r2_dims, r2 = r_squared(y_true, y_pred)
    return MetricReport(cc, r2, cc_dims.tolist(), r2_dims.tolist(), len(_as_2d(y_true)))


def evaluate(params: mdl.DecoderParams, task: RecalibrationTask) -> MetricReport:
    ev = task.eval_target
    if len(ev) == 0:
        raise ValueError("empty evaluation set")
    pred = mdl.predict(params, ev.features)
    return metric_report(ev.reveal_labels(), pred)


# -- feature-label consistency ------------------------------------------------

def _upper_pairs(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    iu = np.triu_indices(len(x), k=1)
    return np.sqrt(d2[iu])


def consistency_score(features, labels, max_points: int = 400, seed=0) -> float:
    """Spearman correlation between pairwise feature and pairwise label distances.

    Sets larger than ``max_points`` are subsampled (deterministically per seed).
    """
    f = _as_2d(features)
    y = _as_2d(labels)
    if len(f) != len(y):
        raise ValueError("features and labels are not row-aligned")
    if len(f) < 3:
        raise ValueError("need at least 3 samples")
    if len(f) > max_points:
        rows = np.sort(make_rng(seed).choice(len(f), max_points, replace=False))
        f, y = f[rows], y[rows]
    df, dy = _upper_pairs(f), _upper_pairs(y)
    if np.ptp(df) == 0 or np.ptp(dy) == 0:
        raise ValueError("constant pairwise distances")
    rf, ry = rankdata(df), rankdata(dy)
    rf -= rf.mean()
    ry -= ry.mean()
    return float((rf @ ry) / np.sqrt((rf @ rf) * (ry @ ry)))


def speed_consistency(features, labels, **kw) -> float:
    """Consistency against speed alone (pairwise |speed_i - speed_j|)."""
    speed = np.linalg.norm(_as_2d(labels), axis=1)
    return consistency_score(features, speed, **kw)


@dataclass
class ProbeArtifact:
    tag: str
    projection: np.ndarray
    speed: np.ndarray
    direction: np.ndarray
    explained_variance: np.ndarray
    consistency: float
    speed_consistency: float

    def rows(self):
        for (p1, p2), s, d in zip(self.projection, self.speed, self.direction):
            yield {"pc1": p1, "pc2": p2, "speed": s, "direction": d, "tag": self.tag}


def probe_features(features, labels, tag: str) -> ProbeArtifact:
    proj, _, var = pca_project(features, 2)
    y = _as_2d(labels)
    return ProbeArtifact(
        tag=tag,
        projection=proj,
        speed=np.linalg.norm(y, axis=1),
        direction=np.arctan2(y[:, 1], y[:, 0]),
        explained_variance=var,
        consistency=consistency_score(features, y),
        speed_consistency=speed_consistency(features, y),
    )


def pattern_probe(
    source_params: mdl.DecoderParams,
    target: Session,
    config: TrainConfig,
    recalibrated: dict | None = None,
    holdout: float = 0.5,
) -> list[ProbeArtifact]:
    """Project target-day features under several extractors.

    ``target-ideal`` trains a fresh extractor on the labeled target day with the
    source regressor frozen; ``source-trained`` applies the source extractor
    unchanged; each entry of ``recalibrated`` (tag -> params) is added as is.

    With ``holdout > 0`` the ideal extractor is fit on the remaining rows and
    every extractor is probed on the held-out share only, so no extractor is
    scored on rows whose labels it was trained on.
    """
    if holdout > 0:
        _, held, fit = split_rows(len(target), 0.0, holdout, [config.seed, 11])
        fit_rows, probe_rows = np.sort(fit), np.sort(held)
    else:
        fit_rows = probe_rows = np.arange(len(target))
    ideal = fit_extractor_frozen_regressor(target.subset(fit_rows), source_params, config).params
    probe = target.subset(probe_rows)
    extractors = {"target-ideal": ideal, "source-trained": source_params, **(recalibrated or {})}
    return [
        probe_features(mdl.extract(params, probe.features), probe.velocity, tag)
        for tag, params in extractors.items()
    ]


def write_probe_csv(artifacts, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["pc1", "pc2", "speed", "direction", "tag"])
        w.writeheader()
        for art in artifacts:
            for row in art.rows():
                w.writerow({k: (repr(float(v)) if k != "tag" else v) for k, v in row.items()})


# -- ablation and sweeps -------------------------------------------------------

# Table row order: (global, conditional, consistency) on/off
ABLATION_MASKS = [
    (False, False, False),
    (False, False, True),
    (False, True, False),
    (True, False, False),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
]


def variant_name(mask) -> str:
    off = [n for n, on in zip(("alpha", "beta", "theta"), mask) if not on]
    return "SSAR" if not off else "SSAR(" + ",".join(f"{n}=0" for n in off) + ")"


def masked_config(config: TrainConfig, mask) -> TrainConfig:
    g, s, c = mask
    h = config.hyper
    return config.with_hyper(
        alpha=h.alpha if g else 0.0,
        beta=h.beta if s else 0.0,
        theta=h.theta if c else 0.0,
    )


def _run_one(task: RecalibrationTask, config: TrainConfig) -> MetricReport:
    params = recalibrate(task, config).params
    return evaluate(params, task)


@dataclass
class ResultRow:
    variant: str
    seed: int
    cc: float
    r2: float
    value: float | None = None
    mask: tuple | None = None


@dataclass
class Report:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def median(self, variant: str, value=None, key: str = "cc") -> float:
        vals = [getattr(r, key) for r in self.rows if r.variant == variant and (value is None or r.value == value)]
        return float(np.median(vals))

    def variants(self) -> list:
        seen = []
        for r in self.rows:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def write(self, out_dir, stem: str) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath = out_dir / f"{stem}.json"
        cpath = out_dir / f"{stem}.csv"
        doc = {"metric_convention": METRIC_CONVENTION, **self.meta, "rows": [asdict(r) for r in self.rows]}
        jpath.write_text(json.dumps(doc, indent=1))
        with open(cpath, "w", newline="") as fh:
            fh.write(f"# {METRIC_CONVENTION}\n")
            fields = ["variant", "seed", "cc", "r2"] + (["value"] if any(r.value is not None for r in self.rows) else [])
            w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(asdict(r))
        return jpath, cpath


def run_ablation(tasks: dict, config: TrainConfig, n_jobs: int = 1) -> Report:
    """Train all eight on/off combinations of the three components.

    ``tasks`` maps seed -> task; each seed's runs share the task and init seed.
    """
    cells = [(seed, mask) for mask in ABLATION_MASKS for seed in tasks]
    reports = Parallel(n_jobs=n_jobs)(
        delayed(_run_one)(tasks[seed], replace_seed(masked_config(config, mask), seed)) for seed, mask in cells
    )
    rows = [
        ResultRow(variant_name(mask), seed, rep.cc, rep.r2, mask=mask)
        for (seed, mask), rep in zip(cells, reports)
    ]
    return Report(rows, {"kind": "ablation", "order": [variant_name(m) for m in ABLATION_MASKS]})


def replace_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=int(seed))


SWEEP_METHODS = ("ssar", "naive", "mmd")


def run_sweep(
    axis: str,
    values,
    scenario,
    config: TrainConfig,
    seeds,
    methods=SWEEP_METHODS,
    labeled_fraction: float = 0.1,
    eval_fraction: float = 0.0,
    n_jobs: int = 1,
) -> Report:
    """Recalibrate across a time-span or labeled-fraction axis.

    ``scenario`` is a :class:`~ssar.synth.Scenario` supplying sessions per seed.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in ("time_span", "labeled_fraction"):
        raise ValueError(f"unknown sweep axis {axis!r}")

    def cell(seed, value, method):
        if axis == "time_span":
            source, target = scenario.pair(seed, int(value))
            task = split_target(source, target, labeled_fraction, eval_fraction, seed)
        else:
            source, target = scenario.pair(seed, 1)
            task = split_target(source, target, float(value), eval_fraction, seed)
        return _run_one(task, replace_seed(config.with_preset(method), seed))

    cells = list(product(seeds, values, methods))
    reports = Parallel(n_jobs=n_jobs)(delayed(cell)(*c) for c in cells)
    rows = [ResultRow(m, s, rep.cc, rep.r2, value=v) for (s, v, m), rep in zip(cells, reports)]
    return Report(rows, {"kind": "sweep", "axis": axis, "values": values})


def source_day_score(source: Session, config: TrainConfig, holdout: float = 0.2) -> MetricReport:
    """Train on the source day minus a random held-out share and score that share.

    Rows are held out at random, as target evaluation rows are.
    """
    _, held, fit = split_rows(len(source), 0.0, holdout, [config.seed, 7])
    params = pretrain_source(source.subset(np.sort(fit)), config).params
    test = source.subset(np.sort(held))
    return metric_report(test.velocity, mdl.predict(params, test.features))
