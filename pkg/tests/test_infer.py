import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import naive_conv2d
from rankcompress import infer
from rankcompress import model_ir as ir
from rankcompress.errors import ShapeError


@given(
    seed=st.integers(0, 2**31),
    cin=st.integers(1, 4),
    groups=st.sampled_from([1, 2]),
    cout_per=st.integers(1, 3),
    k=st.integers(1, 3),
    stride=st.integers(1, 2),
    padding=st.integers(0, 2),
    size=st.integers(3, 7),
    bias=st.booleans(),
)
@settings(max_examples=60, deadline=None)
def test_conv_matches_naive_loops(seed, cin, groups, cout_per, k, stride, padding, size, bias):
    r = np.random.default_rng(seed)
    cin *= groups
    cout = cout_per * groups
    x = r.standard_normal((2, cin, size, size))
    w = r.standard_normal((cout, cin // groups, k, k))
    b = r.standard_normal(cout) if bias else None
    got = infer.conv2d_forward(x, w, b, stride, padding, groups)
    expect = naive_conv2d(x, w, b, stride, padding, groups)
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        infer.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 1, 1)))


def test_maxpool_against_loops(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    got = infer.maxpool_forward(x, 3, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    expect = np.array([[[[xp[0, c, 2 * i:2 * i + 3, 2 * j:2 * j + 3].max() for j in range(3)]
                         for i in range(3)] for c in range(2)]])
    np.testing.assert_array_equal(got, expect)


def test_batchnorm_formula(rng):
    spec = ir.batchnorm("bn", "x", 3, eps=1e-3)
    w = {
        "weight": rng.standard_normal(3), "bias": rng.standard_normal(3),
        "running_mean": rng.standard_normal(3), "running_var": rng.random(3) + 0.1,
    }
    x = rng.standard_normal((2, 3, 4, 4))
    got = infer.layer_forward(spec, w, x)
    sh = (1, 3, 1, 1)
    expect = (x - w["running_mean"].reshape(sh)) / np.sqrt(w["running_var"].reshape(sh) + 1e-3) \
        * w["weight"].reshape(sh) + w["bias"].reshape(sh)
    np.testing.assert_allclose(got, expect, rtol=1e-12)


def test_linear_relu_gap_add(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(infer.layer_forward(ir.simple("g", "global_avg_pool", "x"), None, x),
                               x.mean(axis=(2, 3)))
    np.testing.assert_array_equal(infer.layer_forward(ir.simple("r", "relu", "x"), None, x), np.maximum(x, 0))
    np.testing.assert_allclose(infer.layer_forward(ir.simple("a", "add", "x", "y"), None, [x, 2 * x]), 3 * x)
    spec = ir.linear("fc", "x", 5, 2)
    w = {"weight": rng.standard_normal((2, 5)), "bias": rng.standard_normal(2)}
    v = rng.standard_normal((4, 5))
    np.testing.assert_allclose(infer.layer_forward(spec, w, v), v @ w["weight"].T + w["bias"])


def test_trace_records_agree_with_forward(testnet):
    x = infer.calibration_batches(testnet.input_shape, 1, 2, 0)[0]
    y = infer.forward(testnet, x)
    assert y.shape == (2, 10)
    recs = infer.forward_traced(testnet, x, ["conv3", "fc"])
    assert [r.layer_id for r in recs] == ["conv3", "fc"]
    np.testing.assert_allclose(recs[1].output, y)
    # conv3's input is conv2's relu output
    before = infer.forward_traced(testnet, x, ["conv2.relu"])[0].output
    np.testing.assert_array_equal(recs[0].input, before)
    with pytest.raises(KeyError):
        infer.forward_traced(testnet, x, ["nope"])


def test_forward_rejects_wrong_input(testnet):
    with pytest.raises(ShapeError):
        infer.forward(testnet, np.zeros((1, 3, 16, 16)))


def test_calibration_batches_seeded():
    a = infer.calibration_batches((3, 4, 4), 2, 3, 5)
    b = infer.calibration_batches((3, 4, 4), 2, 3, 5)
    assert len(a) == 2 and a[0].shape == (3, 3, 4, 4)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    c = infer.calibration_batches((3, 4, 4), 2, 3, 6)
    assert not np.array_equal(a[0], c[0])
