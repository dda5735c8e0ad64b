import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ssar import model as mdl
from ssar.numerics import GradTape, make_rng


def _zero_params(d=5, relu_last=True):
    p = mdl.init(0, d, relu_last)
    return mdl.DecoderParams.from_arrays([np.zeros_like(a) for a in p.arrays()], relu_last)


def _random_params(seed, d, relu_last=True):
    # non-zero biases so every layer's offset is exercised
    p = mdl.init(seed, d, relu_last)
    rng = make_rng([seed, 99])
    arrays = [a if a.ndim == 2 else rng.standard_normal(a.shape) * 0.1 for a in p.arrays()]
    return mdl.DecoderParams.from_arrays(arrays, relu_last)


def test_zero_params_give_zero_output():
    p = _zero_params()
    x = make_rng(0).standard_normal((4, 5))
    assert np.array_equal(mdl.extract(p, x), np.zeros((4, 16)))
    assert np.array_equal(mdl.predict(p, x), np.zeros((4, 2)))


def test_param_count_formula():
    for d in (1, 7, 96):
        assert mdl.init(0, d).n_params == mdl.param_count(d) == d * 64 + 64 + 64 * 32 + 32 + 32 * 16 + 16 + 16 * 2 + 2


def test_init_deterministic_glorot_range_zero_bias():
    a, b = mdl.init(3, 10), mdl.init(3, 10)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    widths = (10, 64, 32, 16, 2)
    for i, (w, bias) in enumerate(zip(a.weights, a.biases)):
        lim = np.sqrt(6.0 / (widths[i] + widths[i + 1]))
        assert np.all(np.abs(w) < lim)
        assert np.array_equal(bias, np.zeros(widths[i + 1]))
    with pytest.raises(ValueError):
        mdl.init(0, 0)


@pytest.mark.parametrize("relu_last", [True, False])
def test_forward_matches_loop_oracle(relu_last):
    for seed in range(5):
        p = _random_params(seed, 6, relu_last)
        x = make_rng([seed, 1]).standard_normal((4, 6))
        ref = oracles.forward(p.weights[:3], p.biases[:3], x, relu_last)
        assert np.max(np.abs(mdl.extract(p, x) - ref)) < 1e-12
        out = oracles.forward(p.weights[:3], p.biases[:3], x, relu_last) @ p.weights[3] + p.biases[3]
        assert np.max(np.abs(mdl.predict(p, x) - out)) < 1e-12


def test_hidden_outputs_non_negative_with_relu_last():
    p = _random_params(1, 4)
    assert np.all(mdl.extract(p, make_rng(2).standard_normal((50, 4))) >= 0)


def test_predict_is_regress_of_extract():
    p = _random_params(2, 4)
    x = make_rng(3).standard_normal((9, 4))
    assert np.array_equal(mdl.predict(p, x), mdl.regress(p, mdl.extract(p, x)))


@given(st.integers(0, 1000), st.integers(1, 12))
def test_batch_equals_row_by_row(seed, n):
    p = _random_params(seed % 7, 3)
    x = make_rng(seed).standard_normal((n, 3))
    batch = mdl.predict(p, x)
    rows = np.vstack([mdl.predict(p, x[i]) for i in range(n)])
    assert np.max(np.abs(batch - rows)) < 1e-12


def test_shape_mismatch_raises():
    p = mdl.init(0, 4)
    with pytest.raises(ValueError, match="width 4"):
        mdl.predict(p, np.zeros((2, 5)))
    with pytest.raises(ValueError):
        mdl.DecoderParams.from_arrays(p.arrays()[:6])


def test_taped_forward_equals_numpy_forward():
    p = _random_params(4, 5)
    x = make_rng(5).standard_normal((6, 5))
    dec = mdl.TapedDecoder(p, GradTape())
    assert np.array_equal(dec.predict(x).value, mdl.predict(p, x))


def test_squared_error_gradient_matches_finite_differences():
    d = 3
    p = _random_params(6, d, relu_last=False)
    x = make_rng(7).standard_normal((5, d))
    y = make_rng(8).standard_normal((5, 2))

    def loss(arrays):
        q = mdl.DecoderParams.from_arrays(arrays, False)
        return float(((mdl.predict(q, x) - y) ** 2).sum())

    tape = GradTape()
    dec = mdl.TapedDecoder(p, tape)
    total = tape.sum(tape.square(tape.sub(dec.predict(x), y)))
    grads = tape.gradient(total, dec.vars)
    arrays = p.arrays()
    rng = make_rng(9)
    for k, a in enumerate(arrays):
        # a handful of coordinates per array keeps the check fast
        for flat in rng.choice(a.size, min(a.size, 6), replace=False):
            idx = np.unravel_index(flat, a.shape)
            fd = oracles.finite_difference(loss, arrays, k, idx)
            assert oracles.rel_err(fd, grads[k][idx]) < 1e-4 or abs(fd - grads[k][idx]) < 1e-8


def test_save_load_bit_exact(tmp_path):
    p = _random_params(10, 7, relu_last=False)
    p.weights[0][0, 0] = 1 / 3
    mdl.save_params(p, tmp_path / "dec.json")
    back = mdl.load_params(tmp_path / "dec.json")
    assert back.relu_last is False
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), back.arrays()))


def test_load_rejects_wrong_schema(tmp_path):
    (tmp_path / "bad.json").write_text('{"schema": "other", "layers": []}')
    with pytest.raises(ValueError, match="schema"):
        mdl.load_params(tmp_path / "bad.json")
