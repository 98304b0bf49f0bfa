import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsnet import wavelet
from rsnet.errors import ShapeError
from rsnet.rng import Rng
from rsnet.tensor import Tensor

shapes = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 12), st.integers(1, 12))


def _random(shape, seed: int, dtype=np.float64) -> np.ndarray:
    return Rng(seed, "wavelet-test").normal(shape, dtype=dtype)


def test_filter_bank_is_exactly_orthonormal():
    np.testing.assert_array_equal(wavelet.gram_matrix(), np.eye(4))


@settings(max_examples=60, deadline=None)
@given(shape=shapes, seed=st.integers(0, 10_000))
def test_synthesis_inverts_analysis_float64(shape, seed):
    data = _random(shape, seed)

    back = wavelet.haar_synthesis(wavelet.haar_analysis(Tensor(data))).data

    assert back.shape == data.shape
    assert np.linalg.norm(back - data) <= 1e-12 * max(np.linalg.norm(data), 1e-300)


@settings(max_examples=30, deadline=None)
@given(shape=shapes, seed=st.integers(0, 10_000))
def test_synthesis_inverts_analysis_float32(shape, seed):
    data = _random(shape, seed, np.float32)

    back = wavelet.haar_synthesis(wavelet.haar_analysis(Tensor(data))).data

    assert back.dtype == np.float32
    np.testing.assert_allclose(back, data, rtol=1e-6, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(shape=st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
       seed=st.integers(0, 10_000))
def test_analysis_preserves_energy_on_even_sizes(shape, seed):
    b, c, h, w = shape
    data = _random((b, c, 2 * h, 2 * w), seed)

    subbands = wavelet.haar_analysis(Tensor(data))

    assert subbands.tensor.shape == (b, 4 * c, h, w)
    assert (subbands.tensor.data ** 2).sum() == pytest.approx((data ** 2).sum(), rel=1e-12)


def test_constant_image_has_only_a_low_band():
    x = Tensor(np.full((1, 2, 4, 4), 3.0))

    subbands = wavelet.haar_analysis(x)

    np.testing.assert_allclose(subbands.block("LL").data, 6.0)
    for name in ("LH", "HL", "HH"):
        np.testing.assert_allclose(subbands.block(name).data, 0.0, atol=1e-15)


def test_subbands_are_laid_out_in_blocks():
    x = np.zeros((1, 2, 2, 2))
    x[0, 1] = [[0.0, 0.0], [1.0, 1.0]]

    subbands = wavelet.haar_analysis(Tensor(x))

    # Channel 1's vertical detail is subband LH, block 1, channel index C + 1.
    assert subbands.tensor.data[0, 3, 0, 0] == pytest.approx(1.0)
    assert subbands.block("LH").data[0, 1, 0, 0] == pytest.approx(1.0)
    assert subbands.block("LL").data[0, 1, 0, 0] == pytest.approx(1.0)


def test_odd_sizes_are_padded_with_a_warning(caplog):
    x = Tensor(_random((1, 1, 5, 7), 0))

    with caplog.at_level(logging.WARNING, logger="rsnet.wavelet"):
        subbands = wavelet.haar_analysis(x)

    assert subbands.tensor.shape == (1, 4, 3, 4)
    assert subbands.padded == (1, 1)
    assert "zero-padded" in caplog.text
    assert wavelet.haar_synthesis(subbands).shape == (1, 1, 5, 7)


def test_unpool_halves_channels_and_doubles_size():
    out = wavelet.wavelet_unpool(Tensor(np.ones((2, 8, 3, 5))))

    assert out.shape == (2, 2, 6, 10)


def test_unpool_needs_four_subbands_per_channel():
    with pytest.raises(ShapeError, match="not divisible by 4"):
        wavelet.wavelet_unpool(Tensor(np.ones((1, 6, 2, 2))))


def test_pool_stack_and_sum_shapes():
    x = Tensor(_random((1, 3, 8, 8), 1))

    stacked = wavelet.wavelet_pool(x, Tensor(np.ones((5, 12, 1, 1))), aggregate="stack")
    summed = wavelet.wavelet_pool(x, Tensor(np.ones((5, 3, 1, 1))), aggregate="sum")

    assert stacked.shape == summed.shape == (1, 5, 4, 4)
    # With all-ones mixing the two aggregations see the same subband sum.
    np.testing.assert_allclose(stacked.data, summed.data, atol=1e-12)


def test_pool_checks_pointwise_shape_and_aggregate():
    x = Tensor(np.ones((1, 3, 4, 4)))

    with pytest.raises(ShapeError, match=r"\(c_out, 12, 1, 1\)"):
        wavelet.wavelet_pool(x, Tensor(np.ones((5, 3, 1, 1))))
    with pytest.raises(ValueError, match="aggregate"):
        wavelet.wavelet_pool(x, Tensor(np.ones((5, 3, 1, 1))), aggregate="max")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), half=st.tuples(st.integers(3, 6), st.integers(3, 6)))
def test_shifting_by_two_pixels_shifts_subbands_by_one(seed, half):
    data = _random((1, 2, 2 * half[0], 2 * half[1]), seed)
    shifted = np.zeros_like(data)
    shifted[:, :, 2:, 2:] = data[:, :, :-2, :-2]

    bands = wavelet.haar_analysis(Tensor(data)).tensor.data
    moved = wavelet.haar_analysis(Tensor(shifted)).tensor.data

    np.testing.assert_allclose(moved[:, :, 1:, 1:], bands[:, :, :-1, :-1], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(moved[:, :, 0, :], 0.0)
