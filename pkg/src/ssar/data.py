"""Sessions, preprocessing (Gaussian smoothing, z-scoring), target-day splits, file I/O."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng

SCHEMA = "ssar-v1"


class SessionFormatError(ValueError):
    pass


@dataclass
class RawSession:
    day_id: str
    bin_width: float
    spike_counts: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.spike_counts = np.asarray(self.spike_counts, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.spike_counts.shape[0] != self.velocity.shape[0]:
            raise ValueError("spike_counts and velocity row counts differ")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")


@dataclass
class Session:
    day_id: str
    features: np.ndarray
    velocity: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    bin_width: float = 0.05

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.features.shape[0] != self.velocity.shape[0]:
            raise ValueError("features and velocity row counts differ")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("session contains non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Session":
        return Session(self.day_id, self.features[rows], self.velocity[rows], self.mean, self.sd, self.bin_width)


class EvalSet:
    """Held-out target rows whose labels are only handed out on request.

    Every call to :meth:`reveal_labels` is counted so tests can assert that
    training never touched them.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray):
        self.features = features
        self._labels = labels
        self.label_reads = 0

    def __len__(self) -> int:
        return len(self.features)

    def reveal_labels(self) -> np.ndarray:
        self.label_reads += 1
        return self._labels


@dataclass
class RecalibrationTask:
    source: Session
    labeled_target: Session
    unlabeled_target: np.ndarray
    eval_target: EvalSet
    rows: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.labeled_target) > 0 and len(self.unlabeled_target) <= len(self.labeled_target):
            warnings.warn("unlabeled target rows do not outnumber labeled rows")


def gaussian_kernel(sd: float, bin_width: float) -> np.ndarray:
    """Kernel sampled at bin offsets within +-4 sd, normalized to sum 1."""
    half = int(np.floor(4.0 * sd / bin_width + 1e-9))
    offs = np.arange(-half, half + 1) * bin_width
    w = np.exp(-0.5 * (offs / sd) ** 2)
    return w / w.sum()


def gaussian_smooth(raw: RawSession, sd: float = 0.1) -> np.ndarray:
    """Smooth each channel; near the edges the kernel is renormalized over in-range bins."""
    if not sd > 0:
        raise ValueError("sd must be positive")
    x = raw.spike_counts
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("empty session")
    w = gaussian_kernel(sd, raw.bin_width)
    half, n = len(w) // 2, x.shape[0]
    norm = np.convolve(np.ones(n), w)[half : half + n]
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        out[:, c] = np.convolve(x[:, c], w)[half : half + n] / norm
    return out


def zscore(rates):
    """Standardize columns with the population sd.

    Returns ``(features, mean, sd, constant)``; constant columns map to zeros
    and are flagged in the boolean ``constant`` mask (their stored sd is 0).
    """
    x = np.asarray(rates, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("zscore needs at least 2 rows")
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    sd = np.where(constant, 0.0, sd)
    feats = np.zeros_like(x)
    live = ~constant
    feats[:, live] = (x[:, live] - mean[live]) / sd[live]
    return feats, mean, sd, constant


def apply_normalization(rates, mean, sd) -> np.ndarray:
    rates = np.asarray(rates, dtype=np.float64)
    out = np.zeros_like(rates)
    live = sd > 0
    out[:, live] = (rates[:, live] - mean[live]) / sd[live]
    return out


def preprocess(raw: RawSession, sd: float = 0.1) -> Session:
    feats, mean, std, _ = zscore(gaussian_smooth(raw, sd))
    return Session(raw.day_id, feats, raw.velocity.copy(), mean, std, raw.bin_width)


def split_rows(n: int, labeled_fraction: float, eval_fraction: float, seed):
    if labeled_fraction < 0 or eval_fraction < 0 or labeled_fraction + eval_fraction >= 1:
        raise ValueError("fractions must be non-negative and sum to less than 1")
    perm = make_rng(seed).permutation(n)
    n_lab = int(round(labeled_fraction * n))
    n_eval = int(round(eval_fraction * n))
    return np.sort(perm[:n_lab]), np.sort(perm[n_lab : n_lab + n_eval]), np.sort(perm[n_lab + n_eval :])


def split_target(
    source: Session,
    target: Session,
    labeled_fraction: float = 0.1,
    eval_fraction: float = 0.0,
    seed=0,
) -> RecalibrationTask:
    """Random disjoint labeled / eval / unlabeled partition of the target day.

    With ``eval_fraction == 0`` the evaluation set is the unlabeled rows, their
    labels withheld behind :class:`EvalSet`.
    """
    lab, ev, unl = split_rows(len(target), labeled_fraction, eval_fraction, seed)
    if len(lab) == 0 and labeled_fraction > 0:
        warnings.warn("labeled fraction produced zero labeled rows")
    eval_rows = ev if eval_fraction > 0 else unl
    return RecalibrationTask(
        source=source,
        labeled_target=target.subset(lab),
        unlabeled_target=target.features[unl],
        eval_target=EvalSet(target.features[eval_rows], target.velocity[eval_rows]),
        rows={"labeled": lab, "eval": eval_rows, "unlabeled": unl},
    )


# -- file format -----------------------------------------------------------

def save_session(session: Session, path) -> tuple[Path, Path]:
    """Write ``<path>.meta.json`` and ``<path>.csv``; returns both paths."""
    base = Path(path)
    meta_path = base.with_name(base.name + ".meta.json")
    csv_path = base.with_name(base.name + ".csv")
    n_ch = session.n_channels
    meta = {
        "schema": SCHEMA,
        "day_id": session.day_id,
        "bin_width": session.bin_width,
        "n_channels": n_ch,
        "mean": [repr(float(v)) for v in session.mean],
        "sd": [repr(float(v)) for v in session.sd],
    }
    meta_path.write_text(json.dumps(meta, indent=1))
    header = ["t"] + [f"ch_{i}" for i in range(n_ch)] + ["vx", "vy"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(session)):
            row = [repr(i * session.bin_width)]
            row += [repr(float(v)) for v in session.features[i]]
            row += [repr(float(v)) for v in session.velocity[i]]
            w.writerow(row)
    return meta_path, csv_path


def load_session(path) -> Session:
    base = Path(path)
    name = base.name
    for suffix in (".meta.json", ".csv"):
        if name.endswith(suffix):
            base = base.with_name(name[: -len(suffix)])
    meta_path = base.with_name(base.name + ".meta.json")
    csv_path = base.with_name(base.name + ".csv")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SessionFormatError(f"{meta_path}: malformed metadata ({exc})") from exc
    if meta.get("schema") != SCHEMA:
        raise SessionFormatError(f"{meta_path}: schema must be {SCHEMA!r}")
    for key in ("day_id", "bin_width", "n_channels", "mean", "sd"):
        if key not in meta:
            raise SessionFormatError(f"{meta_path}: missing field {key!r}")
    n_ch = int(meta["n_channels"])
    mean = np.array([float(v) for v in meta["mean"]])
    sd = np.array([float(v) for v in meta["sd"]])
    if len(mean) != n_ch or len(sd) != n_ch:
        raise SessionFormatError(f"{meta_path}: normalization arrays do not match n_channels={n_ch}")

    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SessionFormatError(f"{csv_path}:1: empty file") from None
        for col in ("t", "vx", "vy"):
            if col not in header:
                raise SessionFormatError(f"{csv_path}:1: missing column {col!r}")
        ch_cols = [h for h in header if h.startswith("ch_")]
        if len(ch_cols) != n_ch:
            raise SessionFormatError(
                f"{csv_path}:1: header has {len(ch_cols)} channels, metadata says {n_ch}"
            )
        expected = ["t"] + [f"ch_{i}" for i in range(n_ch)] + ["vx", "vy"]
        if header != expected:
            raise SessionFormatError(f"{csv_path}:1: malformed header")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise SessionFormatError(f"{csv_path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                vals = [float(v) for v in rec]
            except ValueError as exc:
                raise SessionFormatError(f"{csv_path}:{lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise SessionFormatError(f"{csv_path}:{lineno}: non-finite value")
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return Session(
        day_id=str(meta["day_id"]),
        features=arr[:, 1 : 1 + n_ch],
        velocity=arr[:, 1 + n_ch :],
        mean=mean,
        sd=sd,
        bin_width=float(meta["bin_width"]),
    )
