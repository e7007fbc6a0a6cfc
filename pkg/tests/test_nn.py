import numpy as np
import pytest

from voxcvae import nn
from voxcvae.gradcheck import finite_diff_grad, max_rel_error
from voxcvae.rng import Rng
from voxcvae.selftest import reference_conv3d_same
from voxcvae.tensor import Tensor, backward, sigmoid, tsum


def grad_error(fn, arrays, which=0):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = backward(fn(*leaves), wrt=leaves)[leaves[which]]

    def f(v):
        vals = [Tensor(a) for a in arrays]
        vals[which] = Tensor(v)
        return fn(*vals).item()

    return max_rel_error(analytic, finite_diff_grad(f, arrays[which]))


def test_dense_identity():
    out = nn.dense(Tensor([1.0, 0.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    assert out.data.tolist() == [1.0, 0.0]


def test_dense_hand_arithmetic():
    out = nn.dense(Tensor([1.0, 1.0]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    assert out.data.tolist() == [6.0]


def test_dense_mismatch_rejected():
    with pytest.raises(ValueError):
        nn.dense(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_dense_gradient():
    rng = np.random.default_rng(0)
    arrays = [rng.normal(size=8), rng.normal(size=(8, 4)), rng.normal(size=4)]
    fn = lambda x, w, b: tsum(nn.dense(x, w, b) * Tensor(np.arange(4.0)))  # noqa: E731
    for i in range(3):
        assert grad_error(fn, arrays, i) < 1e-4


def test_conv3d_full_size_input_shape():
    x = Tensor(np.zeros((32, 32, 36, 1), np.float32))
    k = Tensor(np.zeros((3, 3, 3, 1, 8), np.float32))
    assert nn.conv3d_same(x, k, Tensor(np.zeros(8, np.float32))).shape == (32, 32, 36, 8)


def test_conv3d_zero_kernel_gives_bias():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 5, 3, 2)))
    out = nn.conv3d_same(x, Tensor(np.zeros((3, 3, 3, 2, 3))), Tensor([1.0, -2.0, 0.5]))
    assert np.array_equal(out.data, np.broadcast_to([1.0, -2.0, 0.5], (4, 5, 3, 3)))


@pytest.mark.parametrize("cin,cout", [(2, 2), (3, 4), (1, 5)])
def test_conv3d_matches_loop_reference(cin, cout):
    rng = np.random.default_rng(cin * 10 + cout)
    x, k, b = rng.normal(size=(5, 5, 5, cin)), rng.normal(size=(3, 3, 3, cin, cout)), rng.normal(size=cout)
    got = nn.conv3d_same(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.max(np.abs(got - reference_conv3d_same(x, k, b))) < 1e-10


def test_conv3d_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="channel"):
        nn.conv3d_same(Tensor(np.zeros((3, 3, 3, 2))), Tensor(np.zeros((3, 3, 3, 1, 1))), Tensor(np.zeros(1)))


@pytest.mark.parametrize("cin,cout", [(1, 2), (3, 4)])
def test_conv3d_gradients(cin, cout):
    rng = np.random.default_rng(7)
    arrays = [rng.normal(size=(2, 3, 4, 3, cin)), rng.normal(size=(3, 3, 3, cin, cout)), rng.normal(size=cout)]
    w = Tensor(rng.normal(size=(2, 3, 4, 3, cout)))
    fn = lambda x, k, b: tsum(nn.conv3d_same(x, k, b) * w)  # noqa: E731
    for i in range(3):
        assert grad_error(fn, arrays, i) < 1e-4


def test_conv2d_strided_shape_and_gradient():
    rng = np.random.default_rng(8)
    arrays = [rng.normal(size=(2, 8, 8, 3)), rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2)]
    out = nn.conv2d(*(Tensor(a) for a in arrays), stride=2, pad=1)
    assert out.shape == (2, 4, 4, 2)
    fn = lambda x, k, b: tsum(sigmoid(nn.conv2d(x, k, b, stride=2, pad=1)))  # noqa: E731
    for i in range(3):
        assert grad_error(fn, arrays, i) < 1e-4


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(9)
    x, k = rng.normal(size=(1, 6, 6, 2)), rng.normal(size=(3, 3, 2, 3))
    got = nn.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(3):
        for j in range(3):
            want = np.einsum("abc,abcd->d", xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3], k)
            assert np.allclose(got[0, i, j], want)


def test_maxpool_constant():
    out = nn.maxpool3d(Tensor(np.full((4, 4, 4, 2), 3.5)))
    assert out.shape == (2, 2, 2, 2) and np.all(out.data == 3.5)


def test_maxpool_block():
    x = np.arange(8.0).reshape(2, 2, 2, 1)
    assert nn.maxpool3d(Tensor(x)).data.ravel().tolist() == [7.0]


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ValueError, match="even"):
        nn.maxpool3d(Tensor(np.zeros((3, 4, 4, 1))))


def test_maxpool_pad_odd_rounds_up():
    x = np.arange(2 * 2 * 3.0).reshape(2, 2, 3, 1)
    out = nn.maxpool3d(Tensor(x), pad_odd=True)
    assert out.shape == (1, 1, 2, 1)
    assert out.data.ravel().tolist() == [x[:, :, :2].max(), x[:, :, 2].max()]


def test_maxpool_gradient():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4, 4, 4, 2))
    w = Tensor(rng.normal(size=(2, 2, 2, 2)))
    assert grad_error(lambda t: tsum(nn.maxpool3d(t) * w), [x]) < 1e-4


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.ones((2, 2, 2, 1)), requires_grad=True)
    g = backward(tsum(nn.maxpool3d(x)))[x]
    assert g.ravel().tolist() == [1.0] + [0.0] * 7


def test_upsample_replicates():
    out = nn.upsample3d(Tensor(np.array([[[[2.5]]]])))
    assert out.shape == (2, 2, 2, 1) and np.all(out.data == 2.5)


def test_maxpool_inverts_upsample():
    x = np.random.default_rng(11).normal(size=(3, 2, 4, 2))
    assert np.array_equal(nn.maxpool3d(nn.upsample3d(Tensor(x))).data, x)


def test_upsample_gradient_is_eight():
    x = Tensor(np.random.default_rng(12).normal(size=(1, 2, 3, 2, 2)), requires_grad=True)
    assert np.all(backward(tsum(nn.upsample3d(x)))[x] == 8.0)


def test_leaky_relu_examples():
    assert nn.leaky_relu(Tensor([-1.0]), 0.1).data[0] == pytest.approx(-0.1)
    assert nn.leaky_relu(Tensor([2.0]), 0.1).data[0] == 2.0
    x = np.random.default_rng(13).normal(size=10)
    assert np.array_equal(nn.leaky_relu(Tensor(x), 1.0).data, x)


def test_leaky_relu_subgradient_at_zero():
    x = Tensor([0.0], requires_grad=True)
    assert backward(tsum(nn.leaky_relu(x, 0.1)))[x][0] == pytest.approx(0.1)


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(14)
    x = rng.normal(3.0, 2.0, size=(64, 3))
    stats = nn.BatchNormState(3, np.float64)
    out = nn.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, train=True, eps=0.0)
    assert np.allclose(out.data.mean(axis=0), 0, atol=1e-5)
    assert np.allclose(out.data.var(axis=0), 1, atol=1e-5)


def test_batchnorm_running_stats_momentum():
    x = np.array([[1.0], [3.0]])
    stats = nn.BatchNormState(1, np.float64)
    nn.batchnorm(Tensor(x), Tensor([1.0]), Tensor([0.0]), stats, train=True, momentum=0.9)
    assert stats.running_mean[0] == pytest.approx(0.2)
    assert stats.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)


def test_batchnorm_eval_neutral_stats():
    x = np.random.default_rng(15).normal(size=(5, 2))
    stats = nn.BatchNormState(2, np.float64)
    out = nn.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, train=False)
    assert np.allclose(out.data, x / np.sqrt(1 + 1e-3))


def test_batchnorm_empty_batch_rejected():
    with pytest.raises(ValueError):
        nn.batchnorm(Tensor(np.zeros((0, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), nn.BatchNormState(2), True)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradient_two_samples(train):
    rng = np.random.default_rng(16)
    arrays = [rng.normal(size=(2, 3)), rng.normal(size=3), rng.normal(size=3)]
    w = Tensor(rng.normal(size=(2, 3)))
    stats = nn.BatchNormState(3, np.float64)
    fn = lambda x, g, b: tsum(nn.batchnorm(x, g, b, stats, train) * w)  # noqa: E731
    for i in range(3):
        assert grad_error(fn, arrays, i) < 1e-3


def test_dropout_eval_identity():
    x = Tensor(np.ones(10))
    assert nn.dropout(x, 0.2, train=False) is x


def test_dropout_rate_zero_identity():
    x = Tensor(np.ones(10))
    assert nn.dropout(x, 0.0, train=True, rng=Rng(0)) is x


def test_dropout_preserves_mean():
    out = nn.dropout(Tensor(np.ones(1_000_000, np.float32)), 0.2, train=True, rng=Rng(3))
    assert 0.99 <= float(out.data.mean()) <= 1.01
    assert set(np.unique(out.data).tolist()) <= {0.0, np.float32(1 / 0.8)}


def test_dropout_replays_with_same_stream():
    a = nn.dropout(Tensor(np.ones(100)), 0.5, True, Rng(4, 2)).data
    b = nn.dropout(Tensor(np.ones(100)), 0.5, True, Rng(4, 2)).data
    assert np.array_equal(a, b)


def test_bce_half_probability():
    out = nn.bce_with_logits(Tensor([0.0], dtype=np.float64), np.array([1.0]))
    assert out.item() == pytest.approx(np.log(2))


def test_bce_gradient():
    rng = np.random.default_rng(17)
    z = rng.normal(size=(3, 4)) * 3
    t = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
    assert grad_error(lambda v: nn.bce_with_logits(v, t), [z]) < 1e-4


def test_bce_stable_at_large_logits():
    out = nn.bce_with_logits(Tensor([500.0, -500.0], dtype=np.float64), np.array([1.0, 0.0]))
    assert out.item() == pytest.approx(0.0, abs=1e-12)
