import numpy as np
import pytest

from neuroprog import nn
from neuroprog import tensor as T
from neuroprog.errors import ConfigError, DimensionError
from neuroprog.tensor import Tensor, backward

from gradcheck import check_model_grads


def tiny_cfg(**kw):
    base = dict(volume_dims=(6, 6, 6), growth_rate=2, stem_channels=2,
                block_sizes=(1, 1), head_layers=2, clin_width=3,
                clin_hidden=4, num_domains=2)
    base.update(kw)
    return nn.NetworkConfig(**base).validate()


def desk_cfg():
    return nn.NetworkConfig().validate()


def test_dense_layer_shape_preserved():
    cfg = tiny_cfg(growth_rate=8)
    params = nn.ModelParams()
    rng = np.random.default_rng(0)
    nn._init_dense_layer(params, rng, "f", "dl", 4, 8)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 4, 4, 4)))
    out = nn.dense_layer_forward(x, params, "f", "dl", cfg, "train")
    assert out.shape == (1, 8, 4, 4, 4)


def test_dense_layer_zero_input_zero_output():
    cfg = tiny_cfg()
    params = nn.ModelParams()
    nn._init_dense_layer(params, np.random.default_rng(0), "f", "dl", 3, 2)
    x = Tensor(np.zeros((2, 3, 4, 4, 4)))
    out = nn.dense_layer_forward(x, params, "f", "dl", cfg, "train")
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_dense_layer_gradcheck():
    cfg = tiny_cfg()
    params = nn.ModelParams()
    nn._init_dense_layer(params, np.random.default_rng(2), "f", "dl", 3, 2)
    x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 3, 3, 3)),
               requires_grad=True)

    def loss():
        return T.tmean(nn.dense_layer_forward(x, params, "f", "dl", cfg,
                                              "train"))

    check_model_grads(loss, [x] + params.tensors(), rel_tol=1e-4)


@pytest.mark.parametrize("cin,layers,growth,expect",
                         [(8, 6, 4, 32), (16, 12, 4, 64)])
def test_dense_block_channel_growth(cin, layers, growth, expect):
    cfg = tiny_cfg(growth_rate=growth)
    params = nn.ModelParams()
    cout = nn._init_dense_block(params, np.random.default_rng(0), "f", "b",
                                cin, layers, growth)
    assert cout == expect
    x = Tensor(np.random.default_rng(1).normal(size=(1, cin, 2, 2, 2)))
    out = nn.dense_block_forward(x, params, "f", "b", layers, cfg, "train")
    assert out.shape[1] == expect


def test_zero_layer_block_rejected():
    with pytest.raises(ConfigError):
        tiny_cfg(block_sizes=(0, 1))


def test_transition_halves_channels_and_space():
    cfg = tiny_cfg()
    params = nn.ModelParams()
    _init_transition(params, 32)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 32, 8, 8, 8)))
    out = nn.transition_forward(x, params, "f", "tr", cfg, "train")
    assert out.shape == (1, 16, 4, 4, 4)


def _init_transition(params, cin):
    rng = np.random.default_rng(7)
    nn._init_bn(params, "f", "tr.bn", cin)
    params.add("f", "tr.conv.k", nn._kaiming(rng, (cin // 2, cin, 1, 1, 1),
                                             cin))


def test_transition_odd_spatial_floors():
    cfg = tiny_cfg()
    params = nn.ModelParams()
    _init_transition(params, 4)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 5, 5, 5)))
    out = nn.transition_forward(x, params, "f", "tr", cfg, "train")
    assert out.shape == (1, 2, 2, 2, 2)


def test_transition_rejects_spatial_one():
    cfg = tiny_cfg()
    params = nn.ModelParams()
    _init_transition(params, 4)
    with pytest.raises(DimensionError, match="larger"):
        nn.transition_forward(Tensor(np.ones((1, 4, 1, 1, 1))), params, "f",
                              "tr", cfg, "train")


def test_transition_gradcheck():
    cfg = tiny_cfg()
    params = nn.ModelParams()
    _init_transition(params, 4)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 4, 4, 4, 4)),
               requires_grad=True)

    def loss():
        return T.tmean(nn.transition_forward(x, params, "f", "tr", cfg,
                                             "train"))

    check_model_grads(loss, [x] + params.tensors(), rel_tol=1e-4)


# hand-derived shape table for the default desk topology:
# 32 -stem conv k3 s1 valid-> 30 -max pool 2-> 15 (8 ch)
# block1 (6 x growth 4): 8 + 24 = 32 ch @ 15^3
# transition: 16 ch @ 7^3; block2 (12 x growth 4): 16 + 48 = 64 ch @ 7^3
def test_extractor_desk_shape_table():
    cfg = desk_cfg()
    assert nn.extractor_output_shape(cfg) == (64, 7, 7, 7)
    assert nn.feature_channels(cfg) == 64


def test_extractor_forward_matches_shape_rule():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 6, 6, 6)))
    out = nn.feature_extractor_forward(x, params, cfg, "train")
    assert out.shape[1:] == nn.extractor_output_shape(cfg)


def test_extractor_rejects_wrong_dims():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=0)
    with pytest.raises(DimensionError):
        nn.feature_extractor_forward(Tensor(np.ones((1, 1, 5, 6, 6))), params,
                                     cfg, "train")


def test_paper_scale_constructs_and_reports_shapes():
    cfg = nn.paper_scale_config()
    # (150,185,155) input: valid stem conv stride 2 then two 2x pools
    assert nn.extractor_output_shape(cfg) == (512, 18, 22, 18)
    params = nn.init_params(cfg, seed=0)
    assert params.count() > 1_000_000


def test_extractor_deterministic():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=5)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 6, 6, 6)))
    a = nn.feature_extractor_forward(x, params, cfg, "eval").data
    b = nn.feature_extractor_forward(x, params, cfg, "eval").data
    np.testing.assert_array_equal(a, b)


def test_clinical_encoder_zero_weights():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=0)
    for name in ("fc1.w", "fc1.b", "fc2.w", "fc2.b"):
        params.get("a", name).data[...] = 0.0
    out = nn.clinical_encoder_forward(Tensor(np.ones((2, 3))), params, cfg)
    np.testing.assert_array_equal(out.data, 0.0)


def test_clinical_encoder_row_independent():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=1)
    rng = np.random.default_rng(2)
    rows = rng.normal(size=(2, 3))
    both = nn.clinical_encoder_forward(Tensor(rows), params, cfg).data
    one = nn.clinical_encoder_forward(Tensor(rows[:1]), params, cfg).data
    np.testing.assert_allclose(both[:1], one)


def test_clinical_encoder_gradcheck():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=3)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 3)),
               requires_grad=True)

    def loss():
        return T.tmean(nn.clinical_encoder_forward(x, params, cfg))

    check_model_grads(loss, [x] + params.tensors(["a"]), rel_tol=1e-5)


def test_fuse_zero_embedding_is_identity():
    img = Tensor(np.random.default_rng(0).normal(size=(2, 3, 2, 2, 2)))
    emb = Tensor(np.zeros((2, 3)))
    out = nn.fuse(img, emb)
    np.testing.assert_array_equal(out.data, img.data)


def test_fuse_zero_image_broadcasts_embedding():
    img = Tensor(np.zeros((1, 3, 2, 2, 2)))
    emb = Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = nn.fuse(img, emb)
    for c in range(3):
        np.testing.assert_array_equal(out.data[0, c], emb.data[0, c])


def test_fuse_grad_reaches_both_branches():
    rng = np.random.default_rng(1)
    img = Tensor(rng.normal(size=(2, 3, 2, 2, 2)), requires_grad=True)
    emb = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    img.zero_grad()
    emb.zero_grad()
    w = Tensor(rng.normal(size=(2, 3, 2, 2, 2)))
    backward(T.tsum(T.mul(nn.fuse(img, emb), w)))
    assert np.abs(img.grad).max() > 0
    assert np.abs(emb.grad).max() > 0


def test_fuse_pooled_mode_shape():
    img = Tensor(np.random.default_rng(0).normal(size=(2, 3, 2, 2, 2)))
    emb = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    out = nn.fuse(img, emb, mode="pooled")
    assert out.shape == (2, 3, 1, 1, 1)


def test_fuse_width_mismatch():
    with pytest.raises(DimensionError):
        nn.fuse(Tensor(np.zeros((1, 3, 2, 2, 2))), Tensor(np.zeros((1, 4))))


def test_endpoint_head_shape_and_determinism():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).normal(
        size=(2, nn.feature_channels(cfg), 2, 2, 2)))
    a = nn.endpoint_head_forward(x, params, cfg, "eval")
    b = nn.endpoint_head_forward(x, params, cfg, "eval")
    assert a.shape == (2, 3)
    np.testing.assert_array_equal(a.data, b.data)


def test_endpoint_head_gradcheck():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=1)
    x = Tensor(np.random.default_rng(1).normal(
        size=(2, nn.feature_channels(cfg), 2, 2, 2)), requires_grad=True)

    def loss():
        return T.tmean(nn.endpoint_head_forward(x, params, cfg, "train"))

    check_model_grads(loss, [x] + params.tensors(["g"]), rel_tol=1e-4,
                      max_coords=3)


def test_domain_head_shape():
    cfg = tiny_cfg(num_domains=4)
    params = nn.init_params(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).normal(
        size=(3, nn.feature_channels(cfg), 2, 2, 2)))
    out = nn.domain_head_forward(x, params, cfg, "train")
    assert out.shape == (3, 4)


def test_single_domain_rejected():
    with pytest.raises(ConfigError):
        tiny_cfg(num_domains=1)


def test_domain_head_gradcheck():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=2)
    x = Tensor(np.random.default_rng(2).normal(
        size=(2, nn.feature_channels(cfg), 2, 2, 2)), requires_grad=True)

    def loss():
        return T.tmean(nn.domain_head_forward(x, params, cfg, "train"))

    check_model_grads(loss, [x] + params.tensors(["h"]), rel_tol=1e-4,
                      max_coords=3)


def test_gradient_reversal_forward_identity():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    out = nn.gradient_reversal(x, 0.5)
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_gradient_reversal_scales_negatively():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.zero_grad()
    w = Tensor([1.0, 2.0])
    backward(T.tsum(T.mul(nn.gradient_reversal(x, 0.1), w)))
    np.testing.assert_allclose(x.grad, [-0.1, -0.2])


def test_gradient_reversal_mu_zero_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.zero_grad()
    backward(T.tsum(nn.gradient_reversal(x, 0.0)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_gradient_reversal_rejects_negative_mu():
    with pytest.raises(ConfigError):
        nn.gradient_reversal(Tensor([1.0]), -0.5)


def test_double_reversal_restores_gradient():
    x = Tensor([2.0, -1.0], requires_grad=True)
    x.zero_grad()
    backward(T.tsum(nn.gradient_reversal(nn.gradient_reversal(x, 1.0), 1.0)))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_partitions_disjoint_and_exhaustive():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=0)
    names = [n for n, _ in params.named()]
    assert len(names) == len(set(names))
    prefixes = {n.split(".")[0] for n in names}
    assert prefixes == {"a", "f", "g", "h"}


def test_endpoint_backward_never_touches_h():
    cfg = tiny_cfg()
    params = nn.init_params(cfg, seed=0)
    params.zero_grad()
    rng = np.random.default_rng(0)
    mri = Tensor(rng.normal(size=(2, 1, 6, 6, 6)))
    clin = Tensor(rng.normal(size=(2, 3)))
    feat = nn.feature_extractor_forward(mri, params, cfg, "train")
    emb = nn.clinical_encoder_forward(clin, params, cfg)
    pred = nn.endpoint_head_forward(nn.fuse(feat, emb), params, cfg, "train")
    backward(T.tmean(pred))
    for _, t in params.named(["h"]):
        np.testing.assert_array_equal(t.grad, 0.0)
    assert any(np.abs(t.grad).max() > 0 for _, t in params.named(["a"]))
    assert any(np.abs(t.grad).max() > 0 for _, t in params.named(["f"]))
    assert any(np.abs(t.grad).max() > 0 for _, t in params.named(["g"]))


def test_param_count_pure_function_of_config():
    cfg = tiny_cfg()
    assert nn.init_params(cfg, seed=0).count() == nn.init_params(
        cfg, seed=99).count()
