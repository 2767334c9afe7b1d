import numpy as np
import pytest

from sffc import network as N
from sffc import tensor as T


class TestConfig:
    def test_classifier_dims_match_reference_architecture(self):
        assert N.NetworkConfig.for_dataset("mnist").classifier_in_dims == 13824
        assert N.NetworkConfig.for_dataset("cifar10").classifier_in_dims == 24576
        assert N.NetworkConfig.for_dataset("cifar100").classifier_in_dims == 24576
        assert N.NetworkConfig.for_dataset("cifar100").n_classes == 100

    def test_channel_progression(self):
        cfg = N.NetworkConfig.for_dataset("mnist")
        assert cfg.channels == (96, 384, 1536)
        desk = N.NetworkConfig.for_dataset("mnist", channel_scale=1 / 3)
        assert desk.channels == (32, 128, 512)
        assert desk.classifier_in_dims == 512 * 3 * 3

    def test_depthwise_group_structure(self):
        cfg = N.NetworkConfig.for_dataset("cifar10")
        _, k1, _, _, g1 = cfg.blocks[0].conv
        _, k2, _, _, g2 = cfg.blocks[1].conv
        _, k3, _, _, g3 = cfg.blocks[2].conv
        assert (k1, g1) == (5, 1)
        assert (k2, g2) == (3, 96)
        assert (k3, g3) == (3, 384)

    def test_bad_scale_rejected(self):
        with pytest.raises(ValueError):
            N.NetworkConfig.for_dataset("mnist", channel_scale=1 / 7)
        with pytest.raises(ValueError):
            N.NetworkConfig.for_dataset("imagenet")

    def test_classifier_dim_mismatch_is_build_error(self):
        cfg = N.NetworkConfig.for_dataset("mnist", channel_scale=1 / 6)
        cfg.classifier_in_dims += 1
        with pytest.raises(ValueError, match="classifier"):
            N.build_network(cfg, seed=0)


@pytest.fixture()
def tiny_net():
    cfg = N.NetworkConfig.for_dataset("mnist", channel_scale=1 / 12, n_copies=3,
                                      dropout_p=0.2)
    return N.build_network(cfg, seed=5)


class TestBuild:
    def test_deterministic_init(self):
        cfg = N.NetworkConfig.for_dataset("mnist", channel_scale=1 / 6)
        a = N.build_network(cfg, seed=3)
        b = N.build_network(cfg, seed=3)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)
        c = N.build_network(cfg, seed=4)
        assert not np.array_equal(a.block_param(0).data, c.block_param(0).data)

    def test_parameter_inventory(self, tiny_net):
        names = list(tiny_net.params)
        assert names == ["conv1.weight", "conv2.weight", "conv3.weight",
                         "classifier.weight", "classifier.bias"]
        assert np.array_equal(tiny_net.classifier.bias.data,
                              np.zeros_like(tiny_net.classifier.bias.data))


class TestBlockForward:
    def test_copies_identical_when_p_zero(self, rng):
        cfg = N.NetworkConfig.for_dataset("mnist", channel_scale=1 / 12, n_copies=2,
                                          dropout_p=0.0)
        net = N.build_network(cfg, seed=1)
        x = T.Tensor(rng.random((3, 1, 28, 28)).astype(np.float32))
        out = N.block_forward(net, 0, x, mode="train")
        assert out.data.shape[:2] == (3, 2)
        np.testing.assert_array_equal(out.data[:, 0], out.data[:, 1])

    def test_same_masks_reproduce_outputs(self, tiny_net, rng):
        x = T.Tensor(rng.random((2, 1, 28, 28)).astype(np.float32))
        mask = np.random.default_rng(9).random((2, 3, 1, 28, 28)) >= 0.2
        a = N.block_forward(tiny_net, 0, x, mode="eval", mask=mask)
        b = N.block_forward(tiny_net, 0, x, mode="eval", mask=mask)
        assert np.array_equal(a.data, b.data)

    def test_output_nonnegative_and_copy_axis(self, tiny_net, rng):
        x = T.Tensor(rng.random((2, 1, 28, 28)).astype(np.float32))
        h = N.block_forward(tiny_net, 0, x, mode="eval", rng=np.random.default_rng(0))
        assert h.data.min() >= 0
        for i in (1, 2):
            h = N.block_forward(tiny_net, i, h, mode="eval")
            assert h.data.min() >= 0
            assert h.data.shape[1] == 3  # copy axis preserved

    def test_shape_validation(self, tiny_net, rng):
        with pytest.raises(ValueError):
            N.block_forward(tiny_net, 0, T.Tensor(rng.random((2, 1, 28)).astype(np.float32)))
        with pytest.raises(ValueError):
            N.block_forward(tiny_net, 1, T.Tensor(rng.random((2, 8, 14, 14)).astype(np.float32)))


class TestFeaturesForward:
    def test_stop_at_one_equals_single_block(self, tiny_net, rng):
        x = rng.random((2, 1, 28, 28)).astype(np.float32)
        mask = np.random.default_rng(3).random((2, 3, 1, 28, 28)) >= 0.2
        a = N.features_forward(tiny_net, x, stop_at_block=1, mask=mask)
        b = N.block_forward(tiny_net, 0, T.Tensor(x), mode="eval", mask=mask)
        assert np.array_equal(a.data, b.data)

    def test_full_pass_equals_composition(self, tiny_net, rng):
        x = rng.random((2, 1, 28, 28)).astype(np.float32)
        mask = np.random.default_rng(3).random((2, 3, 1, 28, 28)) >= 0.2
        full = N.features_forward(tiny_net, x, stop_at_block=3, mask=mask)
        h = N.block_forward(tiny_net, 0, T.Tensor(x), mode="eval", mask=mask)
        h = N.block_forward(tiny_net, 1, h, mode="eval")
        h = N.block_forward(tiny_net, 2, h, mode="eval")
        np.testing.assert_allclose(full.data, h.data, rtol=1e-6)

    def test_gradients_confined_to_trained_block(self, tiny_net, rng):
        x = rng.random((2, 1, 28, 28)).astype(np.float32)
        mask = np.random.default_rng(3).random((2, 3, 1, 28, 28)) >= 0.2
        out = N.features_forward(tiny_net, x, stop_at_block=2, train_block=1, mask=mask)
        for p in tiny_net.parameters():
            p.zero_grad()
        out.sum().backward()
        assert tiny_net.block_param(1).grad is not None
        assert tiny_net.block_param(0).grad is None
        assert tiny_net.block_param(2).grad is None

    def test_bp_mode_reaches_all_blocks(self, tiny_net, rng):
        x = rng.random((2, 1, 28, 28)).astype(np.float32)
        mask = np.random.default_rng(3).random((2, 3, 1, 28, 28)) >= 0.2
        out = N.features_forward(tiny_net, x, bp=True, mask=mask)
        for p in tiny_net.parameters():
            p.zero_grad()
        out.sum().backward()
        for i in range(3):
            grad = tiny_net.block_param(i).grad
            assert grad is not None and np.abs(grad).max() > 0

    def test_invalid_stop(self, tiny_net, rng):
        with pytest.raises(ValueError):
            N.features_forward(tiny_net, rng.random((1, 1, 28, 28)).astype(np.float32),
                               stop_at_block=4)

    def test_frozen_blocks_bitwise_stable_under_later_training(self, tiny_net, rng):
        # run a forward with train_block=2; earlier conv kernels must not move
        before = [tiny_net.block_param(i).data.copy() for i in range(2)]
        x = rng.random((4, 1, 28, 28)).astype(np.float32)
        mask = np.random.default_rng(1).random((4, 3, 1, 28, 28)) >= 0.2
        out = N.features_forward(tiny_net, x, stop_at_block=3, train_block=2, mask=mask)
        out.sum().backward()
        p = tiny_net.block_param(2)
        p.tensor.data -= 0.01 * p.grad
        for i in range(2):
            assert np.array_equal(tiny_net.block_param(i).data, before[i])


class TestClassifier:
    def test_eval_mode_is_plain_affine(self, tiny_net, rng):
        feats = rng.random((2, 3, 128, 3, 3)).astype(np.float32)
        logits = N.classifier_forward(tiny_net, T.Tensor(feats), mode="eval")
        flat = feats.reshape(6, -1)
        manual = flat @ tiny_net.classifier.weight.data.T + tiny_net.classifier.bias.data
        np.testing.assert_allclose(logits.data.reshape(6, -1), manual, rtol=1e-5)

    def test_single_copy_reduces_to_linear_head(self, tiny_net, rng):
        feats = rng.random((4, 1, 128, 3, 3)).astype(np.float32)
        logits = N.classifier_forward(tiny_net, T.Tensor(feats), mode="eval")
        assert logits.data.shape == (4, 1, 10)

    def test_zero_features_give_bias(self, tiny_net):
        tiny_net.classifier.bias.data[...] = np.arange(10, dtype=np.float32)
        feats = np.zeros((2, 3, 128, 3, 3), dtype=np.float32)
        logits = N.classifier_forward(tiny_net, T.Tensor(feats), mode="eval")
        for b in range(2):
            for j in range(3):
                np.testing.assert_array_equal(logits.data[b, j], np.arange(10, dtype=np.float32))

    def test_train_mode_dropout_needs_rng_and_differs(self, tiny_net, rng):
        feats = T.Tensor(rng.random((2, 3, 128, 3, 3)).astype(np.float32))
        with pytest.raises(ValueError):
            N.classifier_forward(tiny_net, feats, mode="train")
        a = N.classifier_forward(tiny_net, feats, mode="train", rng=np.random.default_rng(0))
        b = N.classifier_forward(tiny_net, feats, mode="eval")
        assert not np.array_equal(a.data, b.data)

    def test_dim_mismatch(self, tiny_net, rng):
        with pytest.raises(ValueError):
            N.classifier_forward(tiny_net, T.Tensor(rng.random((2, 3, 5, 3, 3)).astype(np.float32)))
