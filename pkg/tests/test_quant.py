import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorap import quant
from lorap.errors import InputError


def test_qrange_closed_forms():
    # all eight (bits, signed) cases for the packable widths
    assert quant.qrange(8, False) == (0, 255)
    assert quant.qrange(8, True) == (-128, 127)
    assert quant.qrange(4, False) == (0, 15)
    assert quant.qrange(4, True) == (-8, 7)
    assert quant.qrange(16, False) == (0, 65535)
    assert quant.qrange(16, True) == (-32768, 32767)
    assert quant.qrange(32, False) == (0, 2**32 - 1)
    assert quant.qrange(32, True) == (-2**31, 2**31 - 1)


def test_qrange_rejects_odd_widths():
    with pytest.raises(InputError):
        quant.qrange(3, False)


def test_calibrate_hand_example():
    p = quant.calibrate([-1.0, 0.5, 2.0], 8, signed=False)
    assert p.scale == pytest.approx(3.0 / 255.0)
    assert p.zero_point == 85


def test_calibrate_degenerate_all_zero():
    p = quant.calibrate([0.0, 0.0, 0.0], 8, signed=False)
    assert p.scale == 1.0
    assert p.zero_point == 0


def test_calibrate_percentile_narrows_range():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(10_000)
    p = quant.calibrate(v, 8, signed=False, clip_percentile=0.999)
    lo = np.quantile(v, 0.001)
    hi = np.quantile(v, 0.999)
    # endpoints of a 10k standard-normal sample at the 0.1% tails
    assert 3.0 < hi - lo < 7.0
    assert hi < v.max() and lo > v.min()
    span = p.scale * 255
    assert span < v.max() - v.min()


def test_calibrate_errors():
    with pytest.raises(InputError):
        quant.calibrate([], 8, False)
    with pytest.raises(InputError):
        quant.calibrate([1.0, np.nan], 8, False)
    with pytest.raises(InputError):
        quant.calibrate([1.0], 8, False, clip_percentile=1.5)


def test_quantize_hand_examples():
    p = quant.calibrate([-1.0, 0.5, 2.0], 8, signed=False)
    codes = quant.quantize_codes(np.array([2.0, 0.0, 0.5]), p)
    assert codes[0] == 255
    assert codes[1] == 85
    assert codes[2] == 128       # 42.5 rounds away from zero
    assert quant.dequantize_codes(85, p) == 0.0
    assert quant.dequantize_codes(128, p) == pytest.approx(0.50588, abs=1e-4)


def test_round_half_away():
    x = np.array([0.5, -0.5, 1.5, -1.5, 2.4, -2.4])
    assert np.array_equal(quant.round_half_away(x), [1, -1, 2, -2, 2, -2])


def test_roundtrip_bound_grid():
    for bits in (4, 8):
        p = quant.params_from_range(-3.0, 5.0, bits, signed=False)
        x = np.linspace(-3.0, 5.0, 100_000)
        err = np.abs(quant.fake_quantize(x, p) - x)
        assert err.max() <= p.scale / 2 + 1e-12


def test_monotonicity():
    p = quant.params_from_range(-1.0, 1.0, 8, signed=True)
    x = np.sort(np.random.default_rng(1).uniform(-2, 2, 1000))
    codes = quant.quantize_codes(x, p)
    assert np.all(np.diff(codes) >= 0)


def test_signed_symmetric():
    p = quant.calibrate([-0.3, 0.7], 8, signed=True)
    assert p.zero_point == 0
    assert p.scale == pytest.approx(0.7 / 127)


def test_pack_nibble_layout():
    assert quant.pack_codes(np.array([1, 2]), 4) == b"\x21"
    assert quant.pack_codes(np.array([255]), 8) == b"\xff"


def test_pack_rejects_out_of_range():
    with pytest.raises(InputError):
        quant.pack_codes(np.array([16]), 4)
    with pytest.raises(InputError):
        quant.pack_codes(np.array([-1]), 8)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=0, max_size=64),
       st.sampled_from([4, 8]))
def test_pack_unpack_bijection(codes, bits):
    arr = np.array(codes, dtype=np.int64)
    packed = quant.pack_codes(arr, bits)
    back = quant.unpack_codes(packed, bits, arr.size)
    assert np.array_equal(back, arr)


def test_pack_odd_length_int4():
    rng = np.random.default_rng(2)
    arr = rng.integers(0, 16, size=1001)
    back = quant.unpack_codes(quant.pack_codes(arr, 4), 4, 1001)
    assert np.array_equal(back, arr)


def test_ste_backward_regions():
    p = quant.params_from_range(-1.0, 1.0, 8, signed=False)
    x = np.array([0.0, 0.5, 100.0, -100.0])
    g = np.ones(4)
    grad = quant.ste_backward(g, x, p)
    assert np.array_equal(grad, [1.0, 1.0, 0.0, 0.0])


def test_ste_matches_secant_trend():
    # averaged over a window of 2S the quantized round-trip has unit slope
    p = quant.params_from_range(-4.0, 4.0, 8, signed=False)
    s = p.scale
    x = np.array([0.3])
    f = lambda v: quant.fake_quantize(v, p).sum()
    secant = (f(x + s) - f(x - s)) / (2 * s)
    assert secant == pytest.approx(1.0, abs=0.51)


def test_track_range_ema():
    t = quant.RangeTracker(momentum=0.5)
    t = quant.track_range(t, [-1.0, 2.0])
    assert (t.running_min, t.running_max) == (-1.0, 2.0)
    t = quant.track_range(t, [0.0, 4.0])
    assert (t.running_min, t.running_max) == (-0.5, 3.0)


def test_track_range_momentum_one():
    t = quant.RangeTracker(momentum=1.0)
    t = quant.track_range(t, [-1.0, 2.0])
    t = quant.track_range(t, [5.0, 6.0])
    assert (t.running_min, t.running_max) == (5.0, 6.0)


def test_tensor_roundtrip_serialization():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(7, 5))
    for bits in (4, 8):
        p = quant.calibrate(x, bits, signed=False)
        q = quant.quantize(x, p)
        q2 = quant.loads(quant.dumps(q))
        assert q2.shape == q.shape
        assert q2.data == q.data
        assert q2.params.bits == bits
        assert np.array_equal(quant.tensor_codes(q2), quant.tensor_codes(q))


def test_load_tensor_bad_magic():
    with pytest.raises(InputError):
        quant.load_tensor(io.BytesIO(b"XXXX" + b"\x00" * 20))


def test_quantized_tensor_codes_signed_offset():
    p = quant.make_params(0.1, 0, 8, True)
    x = np.array([-1.0, 0.0, 1.0])
    q = quant.quantize(x, p)
    assert np.array_equal(quant.tensor_codes(q), [-10, 0, 10])
