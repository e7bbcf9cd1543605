import numpy as np
import pytest

from bnas import functional as F
from bnas.tensor import Tensor, default_dtype

from gradcheck import gradcheck, project as _project, rand as _rand


def _naive_conv(x, w, stride=1, padding=0, dilation=1, groups=1):
    n, c, h, width = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = F.output_size(h, kh, stride, padding, dilation)
    ow = F.output_size(width, kw, stride, padding, dilation)
    out = np.zeros((n, o, oh, ow))
    per_group = o // groups
    for oc in range(o):
        g = oc // per_group
        for i in range(oh):
            for j in range(ow):
                patch = xp[
                    :,
                    g * cg : (g + 1) * cg,
                    i * stride : i * stride + dilation * (kh - 1) + 1 : dilation,
                    j * stride : j * stride + dilation * (kw - 1) + 1 : dilation,
                ]
                out[:, oc, i, j] = (patch * w[oc]).sum(axis=(1, 2, 3))
    return out


@pytest.mark.parametrize(
    "side,kernel,stride,padding,dilation,expected",
    [
        (32, 3, 1, 1, 1, 32),
        (32, 3, 2, 1, 1, 16),
        (32, 5, 1, 4, 2, 32),  # dilated 5x5 keeps the side
        (8, 1, 2, 0, 1, 4),
        (7, 3, 2, 1, 1, 4),
    ],
)
def test_output_size_formula(side, kernel, stride, padding, dilation, expected):
    assert F.output_size(side, kernel, stride, padding, dilation) == expected


def test_kernel_larger_than_input_is_an_error():
    with pytest.raises(ValueError, match="does not fit"):
        F.im2col(np.zeros((1, 1, 2, 2)), 5, 5)


@pytest.mark.parametrize(
    "stride,padding,dilation,groups",
    [(1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (2, 0, 1, 4)],
)
def test_conv2d_matches_a_direct_loop(stride, padding, dilation, groups):
    x = _rand(2, 4, 6, 6, seed=1)
    w = _rand(4, 4 // groups, 3, 3, seed=2)
    with default_dtype(np.float64):
        got = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding, dilation=dilation, groups=groups)
    np.testing.assert_allclose(got.data, _naive_conv(x, w, stride, padding, dilation, groups), atol=1e-10)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))), padding=1)


@pytest.mark.parametrize("stride,padding,dilation,groups", [(1, 1, 1, 1), (2, 1, 1, 2), (1, 2, 2, 1)])
def test_conv2d_gradient(stride, padding, dilation, groups):
    x = _rand(2, 4, 5, 5, seed=3)
    w = _rand(2, 4 // groups, 3, 3, seed=4)
    b = _rand(2, seed=5)
    gradcheck(
        lambda xt, wt, bt: _project(F.conv2d(xt, wt, bt, stride, padding, dilation, groups)),
        x, w, b,
    )


def test_col2im_is_the_adjoint_of_im2col():
    # <im2col(x), y> == <x, col2im(y)> for any x, y
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    cols, oh, ow = F.im2col(x, 3, 3, stride=2, padding=1)
    y = rng.standard_normal(cols.shape)
    back = F.col2im(y, x.shape, 3, 3, stride=2, padding=1)
    assert np.sum(cols * y) == pytest.approx(np.sum(x * back))


def test_max_pool_ignores_padding_even_for_negative_inputs():
    x = Tensor(-np.ones((1, 1, 3, 3)))
    out = F.max_pool2d(x)
    np.testing.assert_array_equal(out.data, -np.ones((1, 1, 3, 3)))


def test_avg_pool_excludes_padding_from_the_count():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = F.avg_pool2d(Tensor(x)).data[0, 0]
    # corner window covers pixels 0, 1, 3, 4
    assert out[0, 0] == pytest.approx(2.0)
    assert out[1, 1] == pytest.approx(4.0)


def test_pool_gradients():
    x = _rand(2, 2, 5, 5, seed=6)
    gradcheck(lambda t: _project(F.avg_pool2d(t, 3, 2, 1)), x)
    # distinct values keep the max unambiguous under the finite-difference step
    distinct = np.random.default_rng(7).permutation(50).reshape(2, 1, 5, 5) * 0.1
    gradcheck(lambda t: _project(F.max_pool2d(t, 3, 1, 1)), distinct)


def test_batch_norm_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, (8, 2, 4, 4)).astype(np.float32)
    rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
    out = F.batch_norm(Tensor(x), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    m = 8 * 4 * 4
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), rtol=1e-4)


def test_batch_norm_eval_uses_running_stats_and_leaves_them_alone():
    rm, rv = np.array([1.0], np.float32), np.array([4.0], np.float32)
    out = F.batch_norm(Tensor(np.full((1, 1, 1, 1), 5.0)), rm, rv, training=False)
    assert out.data.item() == pytest.approx(2.0, rel=1e-5)
    assert rm[0] == 1.0 and rv[0] == 4.0


def test_batch_norm_training_on_a_single_value_is_an_error():
    with pytest.raises(ValueError, match="at least 2"):
        F.batch_norm(Tensor(np.ones((1, 2, 1, 1))), np.zeros(2), np.ones(2), training=True)


def test_batch_norm_training_counts_pixels_not_images():
    x = np.array([[[[1.0, 3.0]]]])
    rm, rv = np.zeros(1), np.ones(1)
    out = F.batch_norm(Tensor(x), rm, rv, training=True).data
    np.testing.assert_allclose(out, [[[[-1.0, 1.0]]]], atol=1e-4)
    # unbiased running variance of {1, 3} is 2
    assert rv == pytest.approx(0.9 * 1.0 + 0.1 * 2.0)
    assert rm == pytest.approx(0.2)
    with pytest.raises(ValueError, match="at least 2"):
        F.batch_norm(Tensor(np.ones((1, 1, 1, 1))), rm, rv, training=True)


@pytest.mark.parametrize("affine", [True, False])
def test_batch_norm_gradient(affine):
    x = _rand(3, 2, 3, 3, seed=8)
    if affine:
        gradcheck(
            lambda t, wt, bt: _project(F.batch_norm(t, np.zeros(2), np.ones(2), wt, bt, training=True)),
            x, _rand(2, seed=9, low=0.5, high=1.5), _rand(2, seed=10),
        )
    else:
        gradcheck(lambda t: _project(F.batch_norm(t, np.zeros(2), np.ones(2), training=True)), x)


def test_linear_gradient_and_shape_check():
    gradcheck(lambda x, w, b: _project(F.linear(x, w, b)), _rand(3, 4, seed=1), _rand(2, 4, seed=2), _rand(2, seed=3))
    with pytest.raises(ValueError, match="linear shape mismatch"):
        F.linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 5))))


def test_global_avg_pool_reduces_spatial_axes():
    x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
    np.testing.assert_allclose(F.global_avg_pool(x).data, [[1.5, 5.5]])
