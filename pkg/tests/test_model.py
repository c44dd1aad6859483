import numpy as np
import pytest

from mixsize import ops
from mixsize.model import (BasicBlock, ConfigError, Conv2d, ResNetConfig, SizeError, build_resnet,
                           checksum, model_flops, parameter_count)
from mixsize.tensor import Tensor, precision


def small(depth=8, width=4, classes=5, seed=0):
    return build_resnet(ResNetConfig(depth, width, classes), seed)


@pytest.mark.parametrize("depth,n", [(8, 1), (20, 3), (44, 7)])
def test_blocks_per_stage(depth, n):
    m = small(depth)
    assert m.cfg.blocks_per_stage == n
    assert len(m.blocks) == 3 * n


@pytest.mark.parametrize("depth", [7, 9, 2, 0, 45])
def test_invalid_depth(depth):
    with pytest.raises(ConfigError):
        small(depth)


def test_same_seed_bit_identical():
    a, b = small(seed=3), small(seed=3)
    assert checksum(a) == checksum(b)
    assert checksum(a) != checksum(small(seed=4))


def test_bn_index_covers_every_batchnorm():
    names = [n for n, _ in small().bn_layers()]
    # stem + 2 per block + shortcut BN on the two downsampling blocks
    assert len(names) == 1 + 2 * 3 + 2
    assert len(set(names)) == len(names)


def test_zero_init_last_bn_gamma():
    for block in small().blocks:
        assert np.all(block.bn2.gamma.data == 0)
        assert np.all(block.bn1.gamma.data == 1)


def test_logit_shape_independent_of_size(rng):
    m = small()
    m.train()
    for S in (16, 24, 32, 40, 8, 13):
        assert m(Tensor(rng.standard_normal((2, 3, S, S)))).shape == (2, 5)


def test_size_below_minimum():
    with pytest.raises(SizeError):
        small()(Tensor(np.zeros((1, 3, 7, 7))))
    with pytest.raises(SizeError):
        model_flops(small(), 4)


def test_eval_deterministic_and_differs_from_train(rng):
    m = small()
    x = Tensor(rng.standard_normal((4, 3, 16, 16)) * 2 + 1)
    m.train()
    m(Tensor(rng.standard_normal((4, 3, 16, 16))))  # running stats now differ from x's batch stats
    train_logits = m(x).data
    m.eval()
    a, b = m(x).data, m(x).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, train_logits)


def test_parameter_count_independent_of_size(rng):
    m = small()
    n = parameter_count(m)
    m.train()
    for S in (8, 16, 40):
        m(Tensor(rng.standard_normal((2, 3, S, S))))
        assert parameter_count(m) == n


def test_flops_single_conv():
    conv = Conv2d(1, 1, 3, 1, 1, np.random.default_rng(0))
    assert conv.flops((4, 4))[0] == 288


def test_flops_ratio_and_monotone():
    m = small(width=16, classes=10)
    assert 3.6 <= model_flops(m, 32) / model_flops(m, 16) <= 4.4
    f = [model_flops(m, s) for s in range(8, 65)]
    assert all(a < b for a, b in zip(f, f[1:]))


def brute_flops(model, S):
    """Count MACs by running each conv on a real input and measuring output size."""
    total = 0
    x = np.zeros((1, 3, S, S))

    def conv(layer, x):
        nonlocal total
        out = ops.conv2d(Tensor(x), layer.weight, None, layer.stride, layer.pad).data
        total += out[0].size * layer.weight.data[0].size
        return out

    x = conv(model.stem, x)
    for b in model.blocks:
        h = conv(b.conv2, conv(b.conv1, x))
        if b.short_conv is not None:
            conv(b.short_conv, x)
        x = h
    total += model.fc.weight.data.size
    return 2 * total


@pytest.mark.parametrize("S", [8, 15, 24, 32, 40])
def test_flops_match_layerwise_count(S):
    m = small(width=4)
    assert model_flops(m, S) == brute_flops(m, S)


def test_full_resnet8_gradient(rng):
    from conftest import numeric_grad, rel_err

    with precision("float64"):
        m = build_resnet(ResNetConfig(8, 2, 3), 1)
        m.astype(np.float64)
        for block in m.blocks:
            block.bn2.gamma.data[:] = rng.uniform(0.5, 1.5, block.bn2.gamma.shape)
        m.train()
        x = rng.standard_normal((3, 3, 8, 8))
        labels = np.array([0, 1, 2])

        def loss():
            return ops.softmax_cross_entropy(m(Tensor(x)), labels)

        m.zero_grad()
        loss().backward()
        for name, p in m.named_parameters():
            coords = list(rng.choice(p.data.size, min(p.data.size, 6), replace=False))
            fd = numeric_grad(lambda: loss().item(), p.data, 1e-6, coords)
            assert rel_err(p.grad.reshape(-1)[coords], fd) <= 1e-5, name


def test_basic_block_shortcut_rules():
    r = np.random.default_rng(0)
    assert BasicBlock(4, 4, 1, r).short_conv is None
    assert BasicBlock(4, 8, 2, r).short_conv is not None
    assert BasicBlock(4, 4, 2, r).short_conv is not None
