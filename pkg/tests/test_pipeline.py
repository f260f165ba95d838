import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iicnet.layers import DenseSpec
from iicnet.pipeline import (
    ConfigError,
    EmbeddingImage,
    IICNet,
    ImageStack,
    NetworkConfig,
    channel_squeeze_backward,
    channel_squeeze_forward,
    embed,
    quantize,
    reference_target,
    restore,
    roundtrip_core_check,
    stack,
    unstack,
)
from iicnet.tensor import Tensor

SMALL = DenseSpec(layers=2, growth=4)


def perturbed(cfg, seed=0, scale=0.03):
    net = IICNet(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for _, p in net.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    net.project()
    return net


# ---- config

def test_config_geometry():
    c = NetworkConfig(k=3, height=16, width=16, downscale=True)
    assert (c.n, c.m, c.embed_height, c.embed_width, c.k_e) == (9, 36, 8, 8, 12)
    c = NetworkConfig(k=2)
    assert (c.n, c.m, c.k_e, c.split_position) == (6, 6, 2, 3)
    assert NetworkConfig(k=1).split_position == 1


def test_config_rejections():
    with pytest.raises(ConfigError):
        NetworkConfig(k=2, embed_channels=4)  # M = 6
    with pytest.raises(ConfigError):
        NetworkConfig(k=2, height=15, downscale=True)
    with pytest.raises(ConfigError):
        NetworkConfig(k=2, downscale_kind="bicubic")
    with pytest.raises(ConfigError):
        NetworkConfig(k=2, split=6)
    with pytest.raises(ConfigError):
        NetworkConfig(k=2, reference=2)


def test_config_dict_roundtrip():
    c = NetworkConfig(k=3, downscale=True, downscale_kind="shuffle", dense=SMALL, split=5)
    assert NetworkConfig.from_dict(c.to_dict()) == c


# ---- stacking / squeeze

def test_stack_examples():
    rng = np.random.default_rng(0)
    imgs = [rng.uniform(size=(3, 4, 4)) for _ in range(3)]
    assert np.array_equal(stack(imgs[:1]).data, imgs[0])
    s = stack(imgs)
    assert s.shape == (9, 4, 4)
    assert all(np.array_equal(a, b) for a, b in zip(unstack(s, 3), imgs))


def test_channel_squeeze_examples():
    a = np.random.default_rng(1).uniform(size=(3, 4, 4))
    v = Tensor(np.concatenate([a, a, a]))
    assert np.array_equal(channel_squeeze_forward(v, 3).data, a)
    two = Tensor(np.array([0.2, 0.4]).reshape(2, 1, 1))
    assert channel_squeeze_forward(two, 1).data.item() == pytest.approx(0.3, abs=1e-16)
    assert channel_squeeze_forward(Tensor(a), 3).data is not None
    assert np.array_equal(channel_squeeze_forward(Tensor(a), 3).data, a)
    assert channel_squeeze_backward(Tensor(a), 3).shape == (9, 4, 4)
    with pytest.raises(ConfigError):
        channel_squeeze_forward(Tensor(np.zeros((6, 2, 2))), 4)


@settings(max_examples=30)
@given(st.integers(1, 5), arrays(np.float64, (3, 2, 2), elements=st.floats(0, 1)))
def test_squeeze_right_inverse(k_e, e):
    back = channel_squeeze_forward(channel_squeeze_backward(Tensor(e), k_e), 3).data
    assert np.array_equal(back, e)


def test_squeeze_not_left_inverse():
    v = Tensor(np.random.default_rng(2).uniform(size=(6, 2, 2)))
    assert not np.allclose(channel_squeeze_backward(channel_squeeze_forward(v, 3), 2).data, v.data)


def test_squeeze_gradient_is_averaging():
    v = Tensor(np.random.default_rng(3).uniform(size=(6, 2, 2)), requires_grad=True)
    channel_squeeze_forward(v, 3).sum().backward()
    assert np.allclose(v.grad, 0.5)


# ---- quantization

def test_quantize_examples():
    assert quantize(Tensor([127.6 / 255]), "test").data[0] == 128 / 255
    assert np.array_equal(quantize(Tensor([-0.1, 1.2]), "test").data, [0.0, 1.0])
    assert quantize(Tensor([0.5 / 255]), "test").data[0] == 1 / 255  # half away from zero
    x = Tensor([0.3])
    assert quantize(x, "none") is x
    with pytest.raises(ValueError):
        quantize(x, "train")
    with pytest.raises(ValueError):
        quantize(x, "bogus")


@settings(max_examples=50)
@given(arrays(np.float64, 16, elements=st.floats(-0.5, 1.5)))
def test_quantize_bounds(e):
    q = quantize(Tensor(e), "test").data
    assert np.all(np.abs(q - np.clip(e, 0, 1)) <= 0.5 / 255)
    assert np.all(np.abs(q * 255 - np.round(q * 255)) < 1e-9)
    t = quantize(Tensor(e), "train", np.random.default_rng(0)).data
    assert np.all((t >= 0) & (t <= 1))
    assert np.all(np.abs(t - np.clip(e, 0, 1)) <= 0.5 / 255 + 1e-15)


def test_train_quantize_passes_gradient():
    e = Tensor(np.full(4, 0.5), requires_grad=True)
    quantize(e, "train", np.random.default_rng(0)).sum().backward()
    assert np.array_equal(e.grad, np.ones(4))


# ---- images / embeddings

def test_image_stack_validation():
    with pytest.raises(ValueError):
        ImageStack([np.full((3, 4, 4), 1.5)])
    with pytest.raises(ValueError):
        ImageStack([np.zeros((3, 4, 4)), np.zeros((3, 4, 5))])
    with pytest.raises(ValueError):
        ImageStack([np.zeros((3, 4, 4))], reference=1)
    with pytest.raises(ConfigError):
        ImageStack([np.zeros((3, 4, 4))]).validate(NetworkConfig(k=2, height=4, width=4))


def test_embedding_image_uint8_roundtrip():
    levels = np.random.default_rng(4).integers(0, 256, size=(3, 5, 5)).astype(np.uint8)
    e = EmbeddingImage.from_uint8(levels)
    assert np.array_equal(e.to_uint8(), levels)
    with pytest.raises(ValueError):
        EmbeddingImage(np.array([0.5 / 255]), quantized=True)


def test_reference_target_downsamples():
    img = np.random.default_rng(5).uniform(size=(3, 8, 8))
    cfg = NetworkConfig(k=2, height=8, width=8, downscale=True)
    ref = reference_target(img, cfg)
    assert ref.shape == (3, 4, 4)
    assert np.allclose(ref, img.reshape(3, 4, 2, 4, 2).mean(axis=(2, 4)))


# ---- network passes

def test_identity_network_roundtrip():
    cfg = NetworkConfig(k=1, height=8, width=8, dense=SMALL)
    net = IICNet(cfg)
    img = np.random.default_rng(6).uniform(size=(3, 8, 8))
    res = embed(ImageStack([img]), net, "none")
    assert np.abs(res.raw.values - img).max() <= 1e-12
    out = restore(res.raw, net)
    assert len(out) == 1 and np.abs(out[0] - img).max() <= 1e-12


@pytest.mark.parametrize("downscale,kind", [(False, "haar"), (True, "haar"), (True, "shuffle")])
def test_embed_restore_shapes(downscale, kind):
    cfg = NetworkConfig(k=3, height=8, width=8, downscale=downscale, downscale_kind=kind,
                        blocks=2, dense=SMALL, relation_features=4)
    net = perturbed(cfg)
    rng = np.random.default_rng(7)
    st_ = ImageStack([rng.uniform(size=(3, 8, 8)) for _ in range(3)], reference=1)
    res = embed(st_, net)
    assert res.quantized.shape == cfg.embed_shape
    assert res.quantized.quantized
    assert res.v.shape == (cfg.m, cfg.embed_height, cfg.embed_width)
    out = restore(res.quantized, net)
    assert len(out) == 3 and all(o.shape == (3, 8, 8) for o in out)
    assert all(o.min() >= 0 and o.max() <= 1 for o in out)


def test_embed_rejects_wrong_k():
    cfg = NetworkConfig(k=2, height=8, width=8, blocks=1, dense=SMALL)
    with pytest.raises(ConfigError):
        embed(ImageStack([np.zeros((3, 8, 8))]), IICNet(cfg))
    with pytest.raises(ConfigError):
        restore(np.zeros((3, 4, 4)), IICNet(cfg))


@pytest.mark.parametrize("blocks", [0, 1, 8, 32])
def test_roundtrip_core_check(blocks):
    cfg = NetworkConfig(k=3, height=16, width=16, downscale=True, blocks=blocks, relation=False, dense=SMALL)
    x = np.random.default_rng(8).uniform(size=(9, 16, 16))
    assert roundtrip_core_check(x, IICNet(cfg)) <= 1e-12
    assert roundtrip_core_check(x, perturbed(cfg)) <= 1e-8


def test_roundtrip_error_grows_gently():
    errs = []
    for blocks in (1, 4, 16, 32):
        cfg = NetworkConfig(k=3, height=16, width=16, blocks=blocks, relation=False, dense=SMALL)
        errs.append(roundtrip_core_check(np.random.default_rng(9).uniform(size=(9, 16, 16)), perturbed(cfg)))
    assert max(errs) < 1e-12


def test_seeded_init_is_deterministic():
    cfg = NetworkConfig(k=2, height=8, width=8, blocks=2, dense=SMALL, downscale=True)
    a, b = IICNet(cfg, seed=3), IICNet(cfg, seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    names = [n for n, _ in a.named_parameters()]
    assert len(names) == len(set(names))
