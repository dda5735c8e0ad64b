"""Recalibration objective: regression, speed-subdomain MMD alignment, contrastive consistency.

Loss functions operate on :class:`~ssar.numerics.Var` nodes so one tape carries
gradients through every term. Plain arrays are accepted and wrapped as
constants on a throwaway tape.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import GradTape, Var, median_pairs

log = logging.getLogger(__name__)


class PartitionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Hyper:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1.0
    theta: float = 0.01
    n_subdomains: int = 8
    # None -> median heuristic per MMD term
    bandwidth: float | None = None
    ccc_feature_bandwidth: float = 1.0
    ccc_label_bandwidth: float = 1.0
    # include labeled target rows in the global subdomain
    labeled_in_global: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "theta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_subdomains < 1:
            raise ValueError("n_subdomains must be >= 1")


@dataclass(frozen=True)
class SpeedBins:
    """Fixed speed-bin edges: bin i (1-based) covers [v_min + (i-1)Δ, v_min + iΔ)."""

    n_bins: int
    v_min: float
    v_max: float

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / self.n_bins

    def assign(self, labels) -> np.ndarray:
        speed = np.linalg.norm(np.asarray(labels, dtype=np.float64).reshape(-1, 2), axis=1)
        if self.delta <= 0:
            return np.ones(len(speed), dtype=int)
        # floor((s - v_min) / delta) + 1 evaluated against explicit edges, so a
        # speed sitting on an edge lands in the same bin as a scan of the edges
        return np.searchsorted(self.edges(), speed, side="right") + 1

    def edges(self) -> np.ndarray:
        """The C - 1 interior bin edges."""
        return self.v_min + np.arange(1, self.n_bins) * self.delta

    @classmethod
    def fit(cls, labels, n_bins: int) -> "SpeedBins":
        speed = np.linalg.norm(np.asarray(labels, dtype=np.float64).reshape(-1, 2), axis=1)
        if speed.size == 0:
            raise ValueError("need at least one labeled sample")
        v_min, v_max = float(speed.min()), float(speed.max())
        if v_max == v_min:
            warnings.warn("all speeds equal; every sample goes to bin 1", PartitionWarning)
        return cls(n_bins, v_min, v_max)


@dataclass
class SubdomainPartition:
    n_bins: int
    v_min: float
    v_max: float
    delta: float
    source_bins: np.ndarray
    target_bins: np.ndarray
    star_source: np.ndarray
    star_target: np.ndarray


def partition_subdomains(
    source_labels, labeled_target_labels, n_bins: int, n_unlabeled: int = 0
) -> SubdomainPartition:
    """Assign every labeled sample to one of ``n_bins`` equal-width speed bins.

    Extrema are taken over source and labeled target together. The global
    subdomain pairs all source rows with all ``n_unlabeled`` unlabeled rows.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    ys = np.asarray(source_labels, dtype=np.float64).reshape(-1, 2)
    yt = np.asarray(labeled_target_labels, dtype=np.float64).reshape(-1, 2)
    bins = SpeedBins.fit(np.vstack([ys, yt]), n_bins)
    return SubdomainPartition(
        n_bins=n_bins,
        v_min=bins.v_min,
        v_max=bins.v_max,
        delta=bins.delta,
        source_bins=bins.assign(ys),
        target_bins=bins.assign(yt),
        star_source=np.arange(len(ys)),
        star_target=np.arange(n_unlabeled),
    )


def _tape_of(*xs) -> GradTape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return GradTape()


def mmd_squared(a, b, bandwidth: float, tape: GradTape | None = None) -> Var:
    """Biased (V-statistic) squared MMD between row sets ``a`` and ``b``.

    Clipped at zero through a ReLU so round-off never yields a negative value.
    """
    t = tape or _tape_of(a, b)
    a, b = t._wrap(a), t._wrap(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("mmd_squared needs non-empty sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    kaa = t.mean(t.rbf(a, a, bandwidth))
    kbb = t.mean(t.rbf(b, b, bandwidth))
    kab = t.mean(t.rbf(a, b, bandwidth))
    return t.relu(t.sub(t.add(kaa, kbb), t.scale(kab, 2.0)))


def _mmd_block(t: GradTape, dists: Var, ia, ib, bandwidth: float | None) -> Var:
    """Squared MMD between row groups ``ia`` and ``ib`` of a shared distance matrix.

    With ``bandwidth=None`` the kernel width comes from the median pair of the
    union and is itself differentiated, so the term is invariant to a common
    rescaling of the features and gives no incentive to shrink them.
    """
    union = np.concatenate([ia, ib])
    na = len(ia)
    d = t.block(dists, union, union)
    if bandwidth is None:
        try:
            pairs = median_pairs(d.value)
        except ValueError:
            pairs = None
        if pairs is None:
            # every row coincides: the kernel is constant and the term is 0
            k = t.exp(t.scale(d, -0.5))
        else:
            med = t.block(d, [pairs[0][0]], [pairs[0][1]])
            if len(pairs) == 2:
                med = t.scale(t.add(med, t.block(d, [pairs[1][0]], [pairs[1][1]])), 0.5)
            # exp(-d / (2 bw^2)) with bw^2 = med / 2
            k = t.exp(t.scale(t.divide(d, med), -1.0))
    else:
        k = t.exp(t.scale(d, -1.0 / (2.0 * bandwidth * bandwidth)))
    # w^T K w with w = (1/|a|, ..., -1/|b|, ...) equals the three block means
    w = np.concatenate([np.full(na, 1.0 / na), np.full(len(ib), -1.0 / len(ib))])
    return t.relu(t.sum(t.scale(k, np.outer(w, w))))


def _sesa_terms(t: GradTape, dists: Var, idx_s, idx_l, idx_u, source_bins, target_bins,
                n_bins, alpha, beta, bandwidth, labeled_in_global):
    zero = t.const(0.0)
    glob = zero
    if alpha > 0:
        star_t = np.concatenate([idx_u, idx_l]) if labeled_in_global else idx_u
        if len(idx_s) > 0 and len(star_t) > 0:
            glob = _mmd_block(t, dists, idx_s, star_t, bandwidth)
    cond = zero
    if beta > 0:
        terms = []
        for i in range(1, n_bins + 1):
            si = idx_s[source_bins == i]
            ti = idx_l[target_bins == i]
            if len(si) == 0 or len(ti) == 0:
                continue
            terms.append(_mmd_block(t, dists, si, ti, bandwidth))
        if terms:
            acc = terms[0]
            for term in terms[1:]:
                acc = t.add(acc, term)
            cond = t.scale(acc, 1.0 / len(terms))
        elif len(idx_l) > 0:
            warnings.warn("no speed bin populated on both sides; conditional term is 0", PartitionWarning)
    combined = t.add(t.scale(glob, alpha), t.scale(cond, beta))
    return glob, cond, combined


def sesa_loss(
    partition: SubdomainPartition,
    source_feats,
    labeled_target_feats,
    unlabeled_target_feats,
    alpha: float,
    beta: float,
    bandwidth: float | None = None,
    labeled_in_global: bool = False,
):
    """Global plus speed-conditional MMD alignment.

    Returns ``(global, conditional, combined)`` Vars. The global term pairs the
    source rows listed in ``partition.star_source`` with the unlabeled rows in
    ``partition.star_target``. The conditional term is the mean over bins
    populated on both sides; empty bins are skipped.
    """
    t = _tape_of(source_feats, labeled_target_feats, unlabeled_target_feats)
    fs = t._wrap(source_feats)
    fl = t._wrap(labeled_target_feats)
    fu = t._wrap(unlabeled_target_feats)
    ns, nl, nu = fs.shape[0], fl.shape[0], fu.shape[0]
    if len(partition.source_bins) != ns or len(partition.target_bins) != nl:
        raise ValueError("partition does not match the feature sets")
    feats = _vstack(t, _vstack(t, fs, fl), fu)
    dists = t.sq_dists(feats)
    return _sesa_terms(
        t,
        dists,
        np.asarray(partition.star_source, dtype=np.intp),
        ns + np.arange(nl),
        ns + nl + np.asarray(partition.star_target, dtype=np.intp),
        np.asarray(partition.source_bins),
        np.asarray(partition.target_bins),
        partition.n_bins,
        alpha,
        beta,
        bandwidth,
        labeled_in_global,
    )


def _vstack(t: GradTape, a: Var, b: Var) -> Var:
    # row concatenation as matmul with selector matrices keeps the primitive set closed
    na, nb = a.shape[0], b.shape[0]
    sa = np.zeros((na + nb, na))
    sa[np.arange(na), np.arange(na)] = 1.0
    sb = np.zeros((na + nb, nb))
    sb[na + np.arange(nb), np.arange(nb)] = 1.0
    return t.add(t.matmul(sa, a), t.matmul(sb, b))


def ccc_loss(feats, labels, feature_bandwidth: float = 1.0, label_bandwidth: float = 1.0) -> Var:
    """Mean over ordered pairs of (feature similarity - label similarity)^2."""
    t = _tape_of(feats)
    f = t._wrap(feats)
    y = np.asarray(labels.value if isinstance(labels, Var) else labels, dtype=np.float64)
    if f.shape[0] == 0:
        raise ValueError("ccc_loss needs at least one sample")
    if y.shape[0] != f.shape[0]:
        raise ValueError("features and labels are not row-aligned")
    ky = t.rbf(y, y, label_bandwidth)
    kf = t.rbf(f, f, feature_bandwidth)
    return t.mean(t.square(t.sub(kf, ky)))


def regression_loss(pred, labels) -> Var:
    """Mean over samples of the squared error summed over output dimensions."""
    t = _tape_of(pred, labels)
    p, y = t._wrap(pred), t._wrap(labels)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if p.shape[0] == 0:
        raise ValueError("regression_loss needs at least one sample")
    return t.scale(t.sum(t.square(t.sub(p, y))), 1.0 / p.shape[0])


@dataclass
class LossBreakdown:
    reg: float
    sesa_global: float
    sesa_conditional: float
    ccc: float
    total: float
    alpha: float
    beta: float
    gamma: float
    theta: float

    def recomputed_total(self) -> float:
        return self.reg + self.gamma * (
            self.alpha * self.sesa_global + self.beta * self.sesa_conditional
        ) + self.theta * self.ccc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Rows entering one objective evaluation.

    ``source_bins``/``target_bins`` hold speed-bin ids for the labeled rows
    against the task's fixed edges. ``ccc_labels`` are normalized labels used
    for the label-similarity kernel.
    """

    x_source: np.ndarray
    y_source: np.ndarray
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    source_bins: np.ndarray
    target_bins: np.ndarray
    ccc_labels: np.ndarray


def total_loss(decoder, batch: Batch, hyper: Hyper):
    """Assemble every weighted term on the batch's extracted features.

    ``decoder`` is a :class:`~ssar.model.TapedDecoder`. Returns the scalar total
    Var and a :class:`LossBreakdown`. Terms with zero weight are not built.
    """
    t = decoder.tape
    ns, nl, nu = len(batch.x_source), len(batch.x_labeled), len(batch.x_unlabeled)
    x_all = np.vstack([batch.x_source, batch.x_labeled, batch.x_unlabeled])
    feats = decoder.extract(x_all)
    idx_s = np.arange(ns)
    idx_l = np.arange(ns, ns + nl)
    idx_u = np.arange(ns + nl, ns + nl + nu)
    idx_lab = np.arange(ns + nl)
    f_lab = t.take_rows(feats, idx_lab)
    y_lab = np.vstack([batch.y_source, batch.y_labeled])

    reg = regression_loss(decoder.regress(f_lab), y_lab)
    zero = t.const(0.0)
    glob = cond = ccc = sesa = zero
    use_sesa = hyper.gamma > 0 and (hyper.alpha > 0 or hyper.beta > 0)
    if use_sesa or hyper.theta > 0:
        dists = t.sq_dists(feats)
    if use_sesa:
        glob, cond, sesa = _sesa_terms(
            t, dists, idx_s, idx_l, idx_u,
            np.asarray(batch.source_bins), np.asarray(batch.target_bins),
            hyper.n_subdomains, hyper.alpha, hyper.beta, hyper.bandwidth,
            hyper.labeled_in_global,
        )
    if hyper.theta > 0:
        ky = t.rbf(batch.ccc_labels, batch.ccc_labels, hyper.ccc_label_bandwidth)
        bw = hyper.ccc_feature_bandwidth
        kf = t.exp(t.scale(t.block(dists, idx_lab, idx_lab), -1.0 / (2.0 * bw * bw)))
        ccc = t.mean(t.square(t.sub(kf, ky)))

    total = t.add(reg, t.add(t.scale(sesa, hyper.gamma), t.scale(ccc, hyper.theta)))
    parts = [float(v.value) for v in (reg, glob, cond, ccc, total)]
    for name, v in zip(("reg", "sesa_global", "sesa_conditional", "ccc", "total"), parts):
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {name}")
    breakdown = LossBreakdown(*parts, hyper.alpha, hyper.beta, hyper.gamma, hyper.theta)
    return total, breakdown
