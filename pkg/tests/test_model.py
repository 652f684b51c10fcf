import numpy as np
import pytest

from dwic.gradcheck import clear_caches, network_numerical_grad, rel_error
from dwic.layers import Bottleneck, Conv2d, Linear, bce_loss
from dwic.model import (CheckpointError, ModelSpec, Network, checkpoint_bytes, load_checkpoint,
                        network_from_checkpoint, save_checkpoint)


def test_default_shape_chain():
    chain = dict(ModelSpec().shape_chain())
    assert chain["input"] == (6, 66, 66)
    assert chain["stem.conv"] == (64, 30, 30)
    assert chain["stem.pool"] == (64, 14, 14)
    assert chain["stage1"] == (256, 14, 14)
    assert chain["stage2"] == (512, 7, 7)
    assert chain["head.avgpool"] == (512, 1, 1)
    assert chain["head.fc"] == (2,)


def test_default_network_matches_layer_table():
    net = Network(ModelSpec(), seed=0)
    stem = net.layers[0][1]
    assert (stem.in_ch, stem.out_ch, stem.kernel, stem.stride) == (6, 64, 7, 2)
    pool = net.layers[1][1]
    assert (pool.kernel, pool.stride) == (3, 2)
    blocks = net.blocks()
    assert len(blocks) == 13
    assert [(b.in_ch, b.mid_ch, b.out_ch, b.stride) for b in blocks[:2]] == [(64, 64, 256, 1), (256, 64, 256, 1)]
    assert [(b.in_ch, b.mid_ch, b.out_ch, b.stride) for b in blocks[4:6]] == [(256, 128, 512, 2), (512, 128, 512, 1)]
    kernels = [c.kernel for c in blocks[0].branch_convs()]
    assert kernels == [1, 3, 1]
    weighted = [layer for _, layer in net._leaves() if isinstance(layer, (Conv2d, Linear))]
    projections = [b.projection for b in blocks if b.projection is not None]
    assert len(weighted) - len(projections) == 41 == ModelSpec().weighted_layer_count()
    assert len(projections) == 2
    fc = dict(net.layers)["head.fc"]
    assert (fc.in_features, fc.out_features) == (512, 2)


def test_hidden_fc_variant_counts_two_dense_layers():
    spec = ModelSpec.toy(fc_hidden=10)
    assert spec.weighted_layer_count() == 1 + 6 + 2
    p = Network(spec).forward(np.zeros((2, 6, 66, 66), np.float32))
    assert p.shape == (2, 2)


def test_forward_rejects_wrong_shape():
    net = Network(ModelSpec.toy())
    with pytest.raises(ValueError, match="expected a batch"):
        net.forward(np.zeros((1, 6, 64, 64), np.float32))
    with pytest.raises(ValueError):
        ModelSpec(input_size=40)


def test_probabilities_sum_to_one_and_eval_is_deterministic():
    net = Network(ModelSpec.toy(), seed=3)
    x = np.random.default_rng(0).standard_normal((5, 6, 66, 66)).astype(np.float32) * 3
    a = net.forward(x)
    b = net.forward(x)
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-6)


def test_zeroed_branches_make_identity_blocks_identity():
    net = Network(ModelSpec.reduced_width(16), seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    for blk in net.blocks():
        for conv in blk.branch_convs():
            conv.params["w"][...] = 0
        if blk.projection is None:
            x = rng.standard_normal((2, blk.in_ch, 7, 7))
            np.testing.assert_allclose(blk.forward(x, train=True), x, atol=1e-6)


def test_model_gradient_on_sampled_weights():
    """f64 end-to-end loss gradient against kink-aware central differences."""
    net = Network(ModelSpec.reduced_width(16), seed=5, dtype=np.float64)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 6, 66, 66))
    y = np.array([0, 1])

    def loss():
        net.seed_dropout(11)
        return bce_loss(net.forward(x, True), y)[0]

    net.seed_dropout(11)
    _, d = bce_loss(net.forward(x, True), y)
    net.backward(d)
    grads = {k: v.copy() for k, v in net.named_grads().items()}
    params = net.named_params()
    names = sorted(params)
    worst = 0.0
    for _ in range(100):
        name = names[rng.integers(len(names))]
        j = int(rng.integers(params[name].size))
        num, _, _ = network_numerical_grad(net, loss, params[name], j)
        worst = max(worst, rel_error(grads[name].reshape(-1)[j], num))
    assert worst < 1e-3


def test_fused_loss_gradient_matches_layerwise_backward():
    net = Network(ModelSpec.toy(width=4), seed=0, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((3, 6, 66, 66))
    y = np.array([1, 0, 1])
    net.seed_dropout(1)
    net.loss_and_backward(x, y, class_weights=(1.0, 2.0))
    fused = {k: v.copy() for k, v in net.named_grads().items()}
    net.seed_dropout(1)
    _, d = bce_loss(net.forward(x, True), y, class_weights=(1.0, 2.0))
    net.backward(d)
    for k, v in net.named_grads().items():
        np.testing.assert_allclose(fused[k], v, rtol=1e-7, atol=1e-12)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    spec = ModelSpec.toy()
    net = Network(spec, seed=2)
    net.forward(np.random.default_rng(0).standard_normal((4, 6, 66, 66)).astype(np.float32), train=True)
    clear_caches(net)
    path = tmp_path / "m.pcnn"
    save_checkpoint(path, spec, net.state_dict(), meta="config_hash=abc")
    spec2, state, meta = load_checkpoint(path)
    assert spec2 == spec and meta == "config_hash=abc"
    for k, v in net.state_dict().items():
        assert np.array_equal(state[k], v)
    net2 = network_from_checkpoint(path)
    save_checkpoint(tmp_path / "again.pcnn", spec2, net2.state_dict(), meta=meta)
    assert (tmp_path / "again.pcnn").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    spec = ModelSpec.toy()
    raw = checkpoint_bytes(spec, Network(spec).state_dict())
    cases = {"magic": b"XXXX" + raw[4:], "truncated": raw[:-3], "trailing": raw + b"\0",
             "version": raw[:4] + b"\x09\0\0\0" + raw[8:], "digest": raw[:8] + bytes(32) + raw[40:]}
    for name, blob in cases.items():
        p = tmp_path / f"{name}.pcnn"
        p.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def test_state_dict_mismatch_raises():
    net = Network(ModelSpec.toy())
    state = net.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(ValueError, match="missing"):
        net.load_state_dict(state)


def test_spec_serialization_round_trip():
    for spec in (ModelSpec(), ModelSpec.toy(width=4, blocks=(2, 1)), ModelSpec.reduced_width(8)):
        assert ModelSpec.from_dict(spec.to_dict()) == spec
        assert ModelSpec.from_dict(spec.to_dict()).digest() == spec.digest()
    assert isinstance(Network(ModelSpec.toy()).blocks()[0], Bottleneck)
