import numpy as np
import pytest

from tubeseg import nn
from tubeseg import tensor as T
from tubeseg.nn import ConfigError, NetworkConfig
from tubeseg.tensor import Tensor


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


def tiny(**kw):
    base = dict(base_width=8, encoder_stage_depths=[1, 1, 1, 1], input_size=(32, 32))
    base.update(kw)
    return NetworkConfig(**base).validate()


def _store_with(names_shapes, rng, scale=0.5):
    store = nn.ParameterStore()
    for name, shape in names_shapes:
        store.add(name, rng.normal(0, scale, shape))
    return store


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        dict(num_classes=4),
        dict(input_size=(48, 64)),
        dict(base_width=10, se_reduction=4),
        dict(block_kind="dense"),
        dict(encoder_stage_depths=[1, 1, 1]),
        dict(attention_placement="before"),
    ],
)
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        NetworkConfig(**kw).validate()


def test_config_dict_round_trip():
    cfg = nn.desk_config(num_classes=3, block_kind="bottleneck")
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_count_is_function_of_config():
    a = nn.build_params(nn.desk_config(), seed=0)
    b = nn.build_params(nn.desk_config(), seed=5)
    assert list(a) == list(b)
    assert a.count() == b.count() == 905_367


def test_default_encoder_matches_resnet34_backbone():
    # canonical ResNet-34 has 21,797,672 parameters incl. a 513,000-parameter classifier
    store = nn.build_params(nn.full_config())
    enc = sum(t.size for name, t in store.items() if name.startswith("encoder."))
    assert enc == 21_797_672 - 513_000
    assert store.count() == 24_518_471


def _count_by_algebra(cfg: NetworkConfig) -> int:
    conv = lambda cin, cout, k, bias=False: cin * cout * k * k + (cout if bias else 0)
    bn = lambda c: 2 * c
    scse = lambda c: conv(c, c // cfg.se_reduction, 1, True) + conv(c // cfg.se_reduction, c, 1, True) + conv(c, 1, 1, True)
    w = cfg.stage_widths
    total = conv(3, cfg.base_width, 7) + bn(cfg.base_width)
    cin = cfg.base_width
    for s, depth in enumerate(cfg.encoder_stage_depths):
        for i in range(depth):
            stride = 2 if i == 0 and s > 0 else 1
            total += conv(cin, w[s], 3) + bn(w[s]) + conv(w[s], w[s], 3) + bn(w[s])
            if stride != 1 or cin != w[s]:
                total += conv(cin, w[s], 1) + bn(w[s])
            cin = w[s]
    x = w[3]
    for skip, out in zip([w[2], w[1], w[0], cfg.base_width], cfg.decoder_widths):
        total += scse(x + skip) + conv(x + skip, out, 3) + bn(out)
        x = out
    total += conv(x, cfg.base_width, 3) + bn(cfg.base_width) + scse(cfg.base_width)
    total += conv(cfg.base_width, cfg.num_classes, 3, True)
    return total


@pytest.mark.parametrize("cfg", [nn.desk_config(), nn.full_config(), nn.full_config(3), tiny()])
def test_parameter_count_matches_config_algebra(cfg):
    assert nn.build_params(cfg).count() == _count_by_algebra(cfg)


def test_parameter_names_are_hierarchical_and_ordered():
    names = list(nn.build_params(nn.desk_config()))
    assert names[0] == "encoder.stem.conv.weight"
    assert "encoder.stage2.block0.shortcut.conv.weight" in names
    assert "decoder.block1.attention.cse.fc1.weight" in names
    assert names[-1] == "head.conv2.bias"


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _residual_store(cin, cout, stride, rng, zero=False):
    b = nn._Builder(nn.ParameterStore(), rng, np.float64)
    b.residual("blk", cin, cout, stride)
    if zero:
        for t in b.store.params.values():
            t.data[...] = 0.0
    return b.store


def test_residual_zero_body_is_relu_of_input(f64):
    rng = np.random.default_rng(0)
    store = _residual_store(4, 4, 1, rng, zero=True)
    x = Tensor(rng.normal(size=(2, 4, 8, 8)))
    out = nn.residual_block(x, store.scope("blk"), stride=1)
    assert np.array_equal(out.data, np.maximum(x.data, 0))


def test_residual_stride2_shape():
    rng = np.random.default_rng(0)
    store = _residual_store(16, 32, 2, rng)
    out = nn.residual_block(Tensor(rng.normal(size=(1, 16, 32, 32))), store.scope("blk"), stride=2)
    assert out.shape == (1, 32, 16, 16)


def test_residual_gradient_flows_through_shortcut(f64):
    rng = np.random.default_rng(0)
    store = _residual_store(4, 4, 1, rng, zero=True)
    x = Tensor(rng.uniform(0.1, 1.0, size=(2, 4, 4, 4)), requires_grad=True)
    T.backward(T.tsum(nn.residual_block(x, store.scope("blk"))))
    assert np.all(x.grad == 1.0)


def test_bottleneck_matches_composed_primitives(f64):
    rng = np.random.default_rng(3)
    b = nn._Builder(nn.ParameterStore(), rng, np.float64)
    b.bottleneck("blk", 8, 16, 2)
    p = b.store.scope("blk")
    x = Tensor(rng.normal(size=(2, 8, 8, 8)))
    out = nn.bottleneck_block(x, p, stride=2)

    def cb(inp, conv, bnn, stride=1, k=1):
        y = T.conv2d(inp, p[f"{conv}.weight"], stride=stride, padding=k // 2)
        return T.batchnorm2d(y, p[f"{bnn}.weight"], p[f"{bnn}.bias"], T.RunningStats(y.shape[1]), train=True)

    y = T.relu(cb(x, "conv1", "bn1"))
    y = T.relu(cb(y, "conv2", "bn2", stride=2, k=3))
    y = cb(y, "conv3", "bn3")
    ref = T.relu(T.add(y, cb(x, "shortcut.conv", "shortcut.bn", stride=2)))
    assert out.shape == (2, 16, 4, 4)
    assert np.allclose(out.data, ref.data)


def test_bottleneck_zero_body_identity(f64):
    rng = np.random.default_rng(0)
    b = nn._Builder(nn.ParameterStore(), rng, np.float64)
    b.bottleneck("blk", 8, 8, 1)
    for t in b.store.params.values():
        t.data[...] = 0.0
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))
    assert np.array_equal(nn.bottleneck_block(x, b.store.scope("blk")).data, np.maximum(x.data, 0))


def _scse_store(c, r, rng):
    b = nn._Builder(nn.ParameterStore(), rng, np.float64)
    b.scse("att", c, r)
    for name, t in b.store.items():
        t.data[...] = rng.normal(0, 0.5, t.shape)
    return b.store.scope("att")


def test_cse_matches_composed_primitives(f64):
    rng = np.random.default_rng(1)
    p = _scse_store(6, 2, rng)
    x = rng.normal(size=(2, 6, 5, 5))
    out = nn.cse(Tensor(x), p.scope("cse")).data
    gap = x.mean(axis=(2, 3))
    h = np.maximum(gap @ p["cse.fc1.weight"].data[:, :, 0, 0].T + p["cse.fc1.bias"].data, 0)
    s = 1 / (1 + np.exp(-(h @ p["cse.fc2.weight"].data[:, :, 0, 0].T + p["cse.fc2.bias"].data)))
    assert np.allclose(out, x * s[:, :, None, None])


def test_sse_matches_composed_primitives(f64):
    rng = np.random.default_rng(2)
    p = _scse_store(6, 2, rng)
    x = rng.normal(size=(2, 6, 5, 5))
    out = nn.sse(Tensor(x), p.scope("sse")).data
    z = np.einsum("nchw,c->nhw", x, p["sse.conv.weight"].data[0, :, 0, 0]) + p["sse.conv.bias"].data[0]
    assert np.allclose(out, x * (1 / (1 + np.exp(-z)))[:, None])


def test_sse_zero_weights_halves_input(f64):
    rng = np.random.default_rng(0)
    p = _scse_store(4, 2, rng)
    p["sse.conv.weight"].data[...] = 0
    p["sse.conv.bias"].data[...] = 0
    x = rng.normal(size=(1, 4, 3, 3))
    assert np.allclose(nn.sse(Tensor(x), p.scope("sse")).data, x / 2)


def test_scse_saturated_gates_return_twice_input(f64):
    rng = np.random.default_rng(0)
    p = _scse_store(4, 2, rng)
    for name in ("cse.fc2", "sse.conv"):
        p[f"{name}.weight"].data[...] = 0
        p[f"{name}.bias"].data[...] = 50.0
    x = rng.normal(size=(2, 4, 3, 3))
    assert np.allclose(nn.scse(Tensor(x), p).data, 2 * x)


def test_scse_is_sum_of_branches_and_keeps_zero(f64):
    rng = np.random.default_rng(4)
    p = _scse_store(8, 4, rng)
    x = Tensor(rng.normal(size=(1, 8, 6, 7)))
    out = nn.scse(x, p)
    assert out.shape == x.shape
    assert np.allclose(out.data, nn.cse(x, p.scope("cse")).data + nn.sse(x, p.scope("sse")).data)
    assert np.all(nn.scse(Tensor(np.zeros((1, 8, 2, 2))), p).data == 0)


def test_cse_channel_divisibility_is_config_error():
    with pytest.raises(ConfigError):
        NetworkConfig(base_width=6, se_reduction=4).validate()


# ---------------------------------------------------------------------------
# encoder / decoder / whole network
# ---------------------------------------------------------------------------


def test_encoder_feature_shapes():
    cfg = nn.desk_config()
    params = nn.build_params(cfg)
    feats = nn.encoder_forward(Tensor(np.random.default_rng(0).normal(size=(1, 3, 64, 64))), params, cfg)
    assert [f.shape[1:] for f in feats] == [(16, 32, 32), (16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]


def test_encoder_maps_all_respond_to_input():
    cfg = nn.desk_config()
    params = nn.build_params(cfg)
    rng = np.random.default_rng(0)
    a = nn.encoder_forward(Tensor(rng.normal(size=(2, 3, 64, 64))), params, cfg)
    b = nn.encoder_forward(Tensor(rng.normal(size=(2, 3, 64, 64))), params, cfg)
    assert all(not np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_decoder_block_doubles_extents_and_tolerates_zero_skip():
    cfg = nn.desk_config()
    params = nn.build_params(cfg)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 128, 2, 2)))
    skip = Tensor(np.zeros((2, 64, 4, 4)))
    out = nn.decoder_block(x, skip, params.scope("decoder.block1"), cfg)
    assert out.shape == (2, 64, 4, 4)
    assert np.all(np.isfinite(out.data))


def test_decoder_block_rejects_resolution_mismatch():
    cfg = nn.desk_config()
    params = nn.build_params(cfg)
    with pytest.raises(T.ShapeError):
        nn.decoder_block(Tensor(np.zeros((1, 128, 2, 2))), Tensor(np.zeros((1, 64, 8, 8))), params.scope("decoder.block1"), cfg)


@pytest.mark.parametrize("placement", ["after_concat", "after_conv"])
@pytest.mark.parametrize("kind", ["residual", "bottleneck"])
def test_network_variants_shape(placement, kind):
    cfg = tiny(attention_placement=placement, block_kind=kind, num_classes=3)
    params = nn.build_params(cfg)
    out = nn.network_forward(Tensor(np.random.default_rng(0).normal(size=(2, 3, 64, 32))), params, cfg)
    assert out.shape == (2, 3, 64, 32)
    assert np.all(np.isfinite(out.data))


def test_attention_ablation_removes_scse_parameters():
    names = list(nn.build_params(tiny(use_attention=False)))
    assert not any("attention" in n for n in names)


def test_head_argmax_values_in_range():
    cfg = nn.desk_config(num_classes=3)
    params = nn.build_params(cfg)
    x = np.random.default_rng(0).normal(size=(2, 3, 64, 64)).astype(np.float32)
    nn.network_forward(Tensor(x), params, cfg, train=True)  # populate running statistics
    probs = nn.predict_proba(x, params, cfg)
    assert probs.shape == (2, 3, 64, 64)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    assert set(np.unique(probs.argmax(axis=1))) <= {0, 1, 2}


def test_eval_on_fresh_model_reports_uninitialized_stats():
    cfg = tiny()
    params = nn.build_params(cfg)
    with pytest.raises(RuntimeError, match="uninitialized"):
        nn.predict_proba(np.zeros((1, 3, 32, 32), np.float32), params, cfg)


def test_different_seeds_give_different_logits():
    cfg = tiny()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)))
    a = nn.network_forward(x, nn.build_params(cfg, seed=0), cfg).data
    b = nn.network_forward(x, nn.build_params(cfg, seed=1), cfg).data
    assert not np.allclose(a, b)


def test_backward_reaches_almost_all_parameters():
    cfg = nn.desk_config()
    params = nn.build_params(cfg)
    x = Tensor(np.random.default_rng(0).normal(size=(8, 3, 128, 128)))
    out = nn.network_forward(x, params, cfg)
    w = Tensor(np.random.default_rng(1).normal(size=out.shape))
    T.backward(T.tsum(T.mul(out, w)))
    assert all(t.grad is not None and np.any(t.grad) for t in params.params.values())
    # cSE hidden units see a near-constant pooled vector, so a unit whose relu
    # is off for one image is off for all of them; exclude those two layers
    rest = [t for name, t in params.items() if ".cse.fc" not in name]
    nonzero = sum(int(np.count_nonzero(t.grad)) for t in rest)
    assert nonzero / sum(t.size for t in rest) > 0.99
    total = sum(int(np.count_nonzero(t.grad)) for t in params.params.values())
    assert total / params.count() > 0.97


def test_input_extents_must_be_divisible_by_32():
    cfg = tiny()
    params = nn.build_params(cfg)
    with pytest.raises(ConfigError):
        nn.network_forward(Tensor(np.zeros((1, 3, 48, 32))), params, cfg)
