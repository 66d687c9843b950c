import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from immunolab.data import JigsawConfig, decode_ppm, encode_ppm, gen_jigsaw
from immunolab.immunizer import UapTrainConfig, _sign_step, budget_bound, immunize
from immunolab.metrics import psnr, ssim
from immunolab.purify import jpeg_lite
from immunolab.uit1 import read_tensor, write_tensor

unit = st.floats(0, 1, allow_nan=False, width=32)
images = arrays(np.float32, st.tuples(st.just(3), st.integers(1, 12), st.integers(1, 12)), elements=unit)
eps = st.sampled_from([1 / 255, 4 / 255, 10 / 255, 16 / 255])


@settings(max_examples=200, deadline=None)
@given(images, eps, st.integers(0, 2**32 - 1))
def test_immunized_pixels_stay_in_range_and_budget(x, epsilon, seed):
    delta = np.random.default_rng(seed).uniform(-epsilon, epsilon, x.shape).astype(np.float32)
    out = immunize(x, delta)
    assert out.min() >= 0 and out.max() <= 1
    assert np.abs(out.astype(np.float64) - x).max() <= epsilon


@settings(max_examples=100, deadline=None)
@given(eps, st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_sign_steps_never_leave_the_ball(epsilon, seed, n_steps):
    cfg = UapTrainConfig(epsilon=epsilon, step_size=1 / 255)
    r = np.random.default_rng(seed)
    delta = np.zeros((3, 4, 4), np.float32)
    for _ in range(n_steps):
        delta = _sign_step(delta, r.standard_normal(delta.shape), cfg)
        assert np.abs(delta).max() <= budget_bound(epsilon) <= epsilon


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 4)), elements=st.floats(-1e6, 1e6, width=32)))
def test_uit1_round_trip(a):
    import io

    buf = io.BytesIO()
    write_tensor(buf, a)
    buf.seek(0)
    back = read_tensor(buf)
    assert back.shape == a.shape and np.array_equal(back, a)


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, st.tuples(st.just(3), st.integers(1, 9), st.integers(1, 9))))
def test_ppm_round_trip_is_exact(raw):
    x = raw.astype(np.float32) / 255
    assert np.array_equal(decode_ppm(encode_ppm(x)), x)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 12, 12), elements=st.floats(0, 1)), arrays(np.float64, (3, 12, 12), elements=st.floats(0, 1)))
def test_metric_symmetry_and_bounds(a, b):
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    assert -1 <= ssim(a, b) <= 1 + 1e-12
    assert psnr(a, b) == psnr(b, a) and psnr(a, b) > 0


@settings(max_examples=30, deadline=None)
@given(images, st.integers(1, 100))
def test_jpeg_lite_preserves_shape_and_range(x, q):
    out = jpeg_lite(x, q)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 19), st.integers(0, 1000))
def test_jigsaw_samples_are_images(ci, index):
    x = gen_jigsaw(JigsawConfig(), ci, index)
    assert x.shape == (3, 32, 32) and x.min() >= 0 and x.max() <= 1
