import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ssar import model as mdl
from ssar.losses import (
    Batch,
    Hyper,
    PartitionWarning,
    SpeedBins,
    ccc_loss,
    mmd_squared,
    partition_subdomains,
    regression_loss,
    sesa_loss,
    total_loss,
)
from ssar.numerics import GradTape, make_rng


def _speeds_as_labels(speeds):
    return np.column_stack([np.asarray(speeds, dtype=np.float64), np.zeros(len(speeds))])


# -- partition -------------------------------------------------------------------

def test_partition_worked_example():
    part = partition_subdomains(_speeds_as_labels([0, 1, 2, 3, 4]), np.zeros((0, 2)), 2)
    assert (part.v_min, part.v_max, part.delta) == (0.0, 4.0, 2.0)
    assert list(part.source_bins) == [1, 1, 2, 2, 2]


def test_partition_extrema_span_source_and_labeled_target():
    part = partition_subdomains(_speeds_as_labels([2, 3]), _speeds_as_labels([1, 5]), 4)
    assert (part.v_min, part.v_max) == (1.0, 5.0)
    assert list(part.target_bins) == [1, 4]


def test_partition_equal_speeds_single_bin_with_warning():
    with pytest.warns(PartitionWarning):
        part = partition_subdomains(_speeds_as_labels([3, 3, 3]), _speeds_as_labels([3]), 5)
    assert part.delta == 0.0
    assert set(part.source_bins) == {1} and set(part.target_bins) == {1}


def test_partition_star_sets_and_errors():
    part = partition_subdomains(_speeds_as_labels([0, 1, 2]), np.zeros((0, 2)), 3, n_unlabeled=4)
    assert list(part.star_source) == [0, 1, 2] and list(part.star_target) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        partition_subdomains(_speeds_as_labels([1]), np.zeros((0, 2)), 0)
    with pytest.raises(ValueError):
        partition_subdomains(np.zeros((0, 2)), np.zeros((0, 2)), 3)


speed_lists = st.lists(st.floats(0, 60, allow_nan=False), min_size=1, max_size=40)


@given(speed_lists, speed_lists, st.integers(1, 16))
def test_partition_exact_cover_matches_edge_scan(src, tgt, c):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PartitionWarning)
        part = partition_subdomains(_speeds_as_labels(src), _speeds_as_labels(tgt), c)
    speeds = np.array(src + tgt)
    bins = np.concatenate([part.source_bins, part.target_bins])
    # exactly one bin per labeled sample, all within 1..C
    assert len(bins) == len(speeds)
    assert np.all((bins >= 1) & (bins <= c))
    for s, b in zip(speeds, bins):
        assert b == oracles.bin_by_scan(s, part.v_min, part.v_max, c)
    if part.delta > 0:
        for s, b in zip(speeds, bins):
            lo = part.v_min + (b - 1) * part.delta
            hi = part.v_min + b * part.delta
            assert lo <= s and (s < hi or b == c)
    else:
        assert np.all(bins == 1)


def test_speed_bins_fixed_edges_reused_outside_fit_range():
    bins = SpeedBins(4, 10.0, 20.0)
    assert list(bins.assign(_speeds_as_labels([0, 10, 12.5, 19.99, 20, 30]))) == [1, 1, 2, 4, 4, 4]


# -- mmd -------------------------------------------------------------------------

def test_mmd_single_point_closed_form():
    t = math.sqrt(2)
    val = float(mmd_squared([[0.0]], [[t]], 1.0).value)
    assert val == pytest.approx(2 * (1 - math.exp(-t * t / 2)), abs=1e-12)
    assert val == pytest.approx(1.264241, abs=1e-6)


def test_mmd_identical_sets_zero_and_symmetric():
    rng = make_rng(0)
    a, b = rng.standard_normal((7, 3)), rng.standard_normal((5, 3))
    assert float(mmd_squared(a, a, 1.1).value) < 1e-12
    assert float(mmd_squared(a, b, 1.1).value) == pytest.approx(float(mmd_squared(b, a, 1.1).value), abs=1e-14)


def test_mmd_matches_triple_loop_oracle():
    rng = make_rng(1)
    for _ in range(100):
        na, nb, d = rng.integers(1, 8, size=3)
        a, b = rng.standard_normal((na, d)), rng.standard_normal((nb, d)) + 0.5
        bw = float(rng.uniform(0.3, 3.0))
        assert abs(float(mmd_squared(a, b, bw).value) - oracles.mmd_squared(a, b, bw)) < 1e-12


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd_squared(np.zeros((0, 2)), np.zeros((3, 2)), 1.0)
    with pytest.raises(ValueError):
        mmd_squared(np.zeros((2, 2)), np.zeros((3, 3)), 1.0)


def test_median_bandwidth_term_is_scale_invariant():
    rng = make_rng(2)
    fs, fl, fu = rng.standard_normal((8, 4)), rng.standard_normal((4, 4)), rng.standard_normal((8, 4)) + 1
    part = partition_subdomains(rng.standard_normal((8, 2)), rng.standard_normal((4, 2)), 2, n_unlabeled=8)
    base = [float(v.value) for v in sesa_loss(part, fs, fl, fu, 1.0, 1.0)]
    scaled = [float(v.value) for v in sesa_loss(part, 3 * fs, 3 * fl, 3 * fu, 1.0, 1.0)]
    assert np.allclose(base, scaled, rtol=1e-10)


# -- sesa ------------------------------------------------------------------------

def _sesa_inputs(seed, ns=10, nl=6, nu=10, c=3):
    rng = make_rng(seed)
    ys, yl = rng.standard_normal((ns, 2)) * 5, rng.standard_normal((nl, 2)) * 5
    part = partition_subdomains(ys, yl, c, n_unlabeled=nu)
    feats = [rng.standard_normal((n, 4)) for n in (ns, nl, nu)]
    return part, feats


def test_sesa_global_only_equals_global_mmd():
    part, (fs, fl, fu) = _sesa_inputs(3)
    glob, cond, comb = sesa_loss(part, fs, fl, fu, 1.0, 0.0, bandwidth=1.5)
    assert float(cond.value) == 0.0
    assert float(comb.value) == pytest.approx(oracles.mmd_squared(fs, fu, 1.5), abs=1e-12)
    assert float(glob.value) == float(comb.value)


def test_sesa_conditional_matches_oracle_mean_over_nonempty_bins():
    for seed in range(10):
        part, (fs, fl, fu) = _sesa_inputs(seed)
        _, cond, comb = sesa_loss(part, fs, fl, fu, 0.0, 1.0, bandwidth=2.0)
        vals = []
        for i in range(1, part.n_bins + 1):
            a, b = fs[part.source_bins == i], fl[part.target_bins == i]
            if len(a) and len(b):
                vals.append(oracles.mmd_squared(a, b, 2.0))
        assert abs(float(cond.value) - np.mean(vals)) < 1e-12
        assert float(comb.value) == float(cond.value)


def test_sesa_single_populated_bin():
    fs = make_rng(4).standard_normal((3, 2))
    fl = make_rng(5).standard_normal((2, 2))
    part = partition_subdomains(_speeds_as_labels([0, 0, 10]), _speeds_as_labels([0, 0.5]), 2)
    _, cond, _ = sesa_loss(part, fs, fl, np.zeros((1, 2)), 0.0, 1.0, bandwidth=1.0)
    assert abs(float(cond.value) - oracles.mmd_squared(fs[:2], fl, 1.0)) < 1e-12


def test_sesa_no_shared_bin_warns_and_is_zero():
    part = partition_subdomains(_speeds_as_labels([0, 1]), _speeds_as_labels([10]), 2)
    rng = make_rng(6)
    with pytest.warns(PartitionWarning):
        _, cond, _ = sesa_loss(part, rng.standard_normal((2, 3)), rng.standard_normal((1, 3)),
                               rng.standard_normal((2, 3)), 0.0, 1.0)
    assert float(cond.value) == 0.0


def test_sesa_partition_mismatch_raises():
    part, (fs, fl, fu) = _sesa_inputs(7)
    with pytest.raises(ValueError):
        sesa_loss(part, fs[:-1], fl, fu, 1.0, 1.0)


# -- ccc -------------------------------------------------------------------------

def test_ccc_two_sample_example():
    f = np.array([[0.0, 0.0], [1.0, 1.0]])
    y = np.array([[2.0, 2.0], [2.0, 2.0]])
    val = float(ccc_loss(f, y).value)
    assert val == pytest.approx((math.exp(-1) - 1) ** 2 / 2, abs=1e-15)
    assert val == pytest.approx(0.199789, abs=1e-6)


def test_ccc_zero_when_features_equal_labels():
    y = make_rng(8).standard_normal((6, 2))
    assert float(ccc_loss(y.copy(), y).value) == 0.0


def test_ccc_matches_pair_oracle():
    rng = make_rng(9)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        f, y = rng.standard_normal((n, 3)), rng.standard_normal((n, 2))
        fb, lb = rng.uniform(0.5, 2.0, size=2)
        assert abs(float(ccc_loss(f, y, fb, lb).value) - oracles.ccc(f, y, fb, lb)) < 1e-12


@given(st.integers(0, 10_000))
def test_ccc_permutation_invariant_and_bounded(seed):
    rng = make_rng(seed)
    f, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    perm = rng.permutation(6)
    a = float(ccc_loss(f, y).value)
    b = float(ccc_loss(f[perm], y[perm]).value)
    assert a == pytest.approx(b, abs=1e-14)
    assert 0.0 <= a <= 1.0


def test_ccc_errors():
    with pytest.raises(ValueError):
        ccc_loss(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        ccc_loss(np.zeros((3, 2)), np.zeros((2, 2)))


# -- regression ------------------------------------------------------------------

def test_regression_examples():
    assert float(regression_loss([[1.0, 0.0]], [[0.0, 0.0]]).value) == 1.0
    y = make_rng(10).standard_normal((5, 2))
    assert float(regression_loss(y, y).value) == 0.0
    with pytest.raises(ValueError):
        regression_loss(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        regression_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_regression_matches_loop_oracle():
    rng = make_rng(11)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        p, y = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
        assert abs(float(regression_loss(p, y).value) - oracles.regression(p, y)) < 1e-12


# -- total loss ------------------------------------------------------------------

def _batch(seed, d=4, ns=8, nl=4, nu=8, n_bins=2):
    rng = make_rng(seed)
    ys, yl = rng.standard_normal((ns, 2)) * 5, rng.standard_normal((nl, 2)) * 5
    bins = SpeedBins.fit(np.vstack([ys, yl]), n_bins)
    return Batch(
        x_source=rng.standard_normal((ns, d)),
        y_source=ys,
        x_labeled=rng.standard_normal((nl, d)) + 0.3,
        y_labeled=yl,
        x_unlabeled=rng.standard_normal((nu, d)) + 0.3,
        source_bins=bins.assign(ys),
        target_bins=bins.assign(yl),
        ccc_labels=np.vstack([ys, yl]) / 5,
    )


def _params(seed, d=4):
    p = mdl.init(seed, d)
    rng = make_rng([seed, 5])
    return mdl.DecoderParams.from_arrays(
        [a if a.ndim == 2 else rng.standard_normal(a.shape) * 0.1 for a in p.arrays()]
    )


def _breakdown(params, batch, hyper):
    return total_loss(mdl.TapedDecoder(params, GradTape()), batch, hyper)[1]


def test_total_defaults():
    h = Hyper()
    assert (h.alpha, h.beta, h.gamma, h.theta, h.n_subdomains) == (1.0, 0.1, 1.0, 0.01, 8)


def test_total_reg_only_when_gamma_theta_zero():
    batch, p = _batch(0), _params(0)
    bd = _breakdown(p, batch, Hyper(gamma=0.0, theta=0.0))
    f = mdl.predict(p, np.vstack([batch.x_source, batch.x_labeled]))
    y = np.vstack([batch.y_source, batch.y_labeled])
    assert bd.total == bd.reg
    assert abs(bd.reg - oracles.regression(f, y)) < 1e-12


def test_total_breakdown_recomputes_and_terms_match_components():
    for seed in range(5):
        batch, p = _batch(seed), _params(seed)
        h = Hyper(alpha=0.7, beta=0.4, gamma=1.3, theta=0.2, n_subdomains=2, bandwidth=1.5)
        bd = _breakdown(p, batch, h)
        assert abs(bd.total - bd.recomputed_total()) < 1e-12
        fs = mdl.extract(p, batch.x_source)
        fu = mdl.extract(p, batch.x_unlabeled)
        fl = mdl.extract(p, batch.x_labeled)
        assert abs(bd.sesa_global - oracles.mmd_squared(fs, fu, 1.5)) < 1e-12
        assert abs(bd.ccc - oracles.ccc(np.vstack([fs, fl]), batch.ccc_labels)) < 1e-12
        assert min(bd.reg, bd.sesa_global, bd.sesa_conditional, bd.ccc) >= 0


def test_term_isolation():
    batch, p = _batch(3), _params(3)
    full = _breakdown(p, batch, Hyper(n_subdomains=2))
    no_theta = _breakdown(p, batch, Hyper(n_subdomains=2, theta=0.0))
    no_beta = _breakdown(p, batch, Hyper(n_subdomains=2, beta=0.0))
    assert (no_theta.sesa_global, no_theta.sesa_conditional) == (full.sesa_global, full.sesa_conditional)
    assert (no_beta.sesa_global, no_beta.ccc) == (full.sesa_global, full.ccc)


def test_labeled_in_global_flag_changes_only_global():
    batch, p = _batch(4), _params(4)
    a = _breakdown(p, batch, Hyper(n_subdomains=2))
    b = _breakdown(p, batch, Hyper(n_subdomains=2, labeled_in_global=True))
    assert a.sesa_global != b.sesa_global
    assert (a.sesa_conditional, a.ccc, a.reg) == (b.sesa_conditional, b.ccc, b.reg)


def test_hyper_validation():
    with pytest.raises(ValueError):
        Hyper(alpha=-1.0)
    with pytest.raises(ValueError):
        Hyper(n_subdomains=0)


def _total_value(arrays, batch, hyper):
    return _breakdown(mdl.DecoderParams.from_arrays(arrays), batch, hyper).total


GRADIENT_HYPERS = {
    "total": Hyper(alpha=1.0, beta=0.5, gamma=1.0, theta=0.5, n_subdomains=2),
    "reg": Hyper(gamma=0.0, theta=0.0),
    "global": Hyper(alpha=1.0, beta=0.0, theta=0.0, n_subdomains=2),
    "conditional": Hyper(alpha=0.0, beta=1.0, theta=0.0, n_subdomains=2),
    "ccc": Hyper(gamma=0.0, theta=1.0),
    "fixed_bandwidth": Hyper(alpha=1.0, beta=0.5, theta=0.5, n_subdomains=2, bandwidth=1.2),
}


def _relu_pattern(arrays, batch):
    """Sign of every hidden pre-activation over all batch rows."""
    x = np.vstack([batch.x_source, batch.x_labeled, batch.x_unlabeled])
    signs = []
    for w, b in zip(arrays[0:6:2], arrays[1:6:2]):
        x = x @ w + b
        signs.append(x > 0)
        x = np.maximum(x, 0.0)
    return np.concatenate([s.ravel() for s in signs])


def _straddles_kink(arrays, batch, k, idx, step=1e-5):
    plus, minus = [a.copy() for a in arrays], [a.copy() for a in arrays]
    plus[k][idx] += step
    minus[k][idx] -= step
    return not np.array_equal(_relu_pattern(plus, batch), _relu_pattern(minus, batch))


def gradient_check(seed: int, hyper: Hyper, coords: int = 4) -> float:
    """Worst relative error between tape and central-difference gradients.

    Coordinates whose difference stencil flips a ReLU are skipped: the loss is
    not differentiable there and the central difference is meaningless.
    """
    batch, p = _batch(seed), _params(seed)
    tape = GradTape()
    dec = mdl.TapedDecoder(p, tape)
    total, _ = total_loss(dec, batch, hyper)
    grads = tape.gradient(total, dec.vars)
    arrays = p.arrays()
    rng = make_rng([seed, 77])
    worst = 0.0
    for k, a in enumerate(arrays):
        checked = 0
        for flat in rng.permutation(a.size):
            if checked == min(a.size, coords):
                break
            idx = np.unravel_index(flat, a.shape)
            if _straddles_kink(arrays, batch, k, idx):
                continue
            checked += 1
            fd = oracles.finite_difference(lambda arrs: _total_value(arrs, batch, hyper), arrays, k, idx)
            if abs(fd - grads[k][idx]) > 1e-8:
                worst = max(worst, oracles.rel_err(fd, grads[k][idx]))
    return worst


@pytest.mark.parametrize("term", sorted(GRADIENT_HYPERS))
def test_loss_gradients_match_finite_differences(term):
    for seed in range(4):
        assert gradient_check(seed, GRADIENT_HYPERS[term]) < 1e-4
