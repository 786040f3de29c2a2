import numpy as np
import pytest
import torch

from selfcollage.backbone import BackboneSpec
from selfcollage.model import (CountingModel, Decoder, FeatureInteraction, ModelConfig,
                               MultiHeadAttention, encode_exemplar_features, load_checkpoint,
                               save_checkpoint)
from selfcollage.training import masked_scaled_mse


def tiny_config(**kw):
    base = dict(backbone=BackboneSpec("tiny-vit", patch_size=8, depth=1, heads=4, width=16),
                fim_dim=16, fim_blocks=1, fim_heads=2, fim_mlp_dim=32, decoder_channels=8,
                decoder_blocks=2, decoder_groups=2, exemplar_height=16, exemplar_width=16)
    base.update(kw)
    return ModelConfig(**base)


def test_exemplar_encoding_special_cases():
    feats = torch.randn(1, 3, 4, 5)
    uniform = encode_exemplar_features(feats, torch.ones(1, 3, 4))
    torch.testing.assert_close(uniform, feats.mean(dim=(1, 2)))
    onehot = torch.zeros(1, 3, 4)
    onehot[0, 2, 1] = 0.7
    torch.testing.assert_close(encode_exemplar_features(feats, onehot), feats[:, 2, 1])


def test_exemplar_encoding_matches_scalar_loop():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(2, 3, 3, 4)).astype(np.float32)
    attn = rng.random((2, 3, 3)).astype(np.float32)
    got = encode_exemplar_features(torch.from_numpy(feats), torch.from_numpy(attn)).numpy()
    for n in range(2):
        for k in range(4):
            num = den = 0.0
            for i in range(3):
                for j in range(3):
                    num += float(attn[n, i, j]) * float(feats[n, i, j, k])
                    den += float(attn[n, i, j])
            assert abs(got[n, k] - num / den) <= 1e-5


def test_zero_attention_falls_back_to_mean(caplog):
    feats = torch.randn(1, 2, 2, 3)
    out = encode_exemplar_features(feats, torch.zeros(1, 2, 2))
    torch.testing.assert_close(out, feats.mean(dim=(1, 2)))
    assert "unweighted mean" in caplog.text


def test_fim_default_width():
    fim = FeatureInteraction(6, 512, 2, 16, 2048)
    out = fim(torch.randn(1, 3, 4, 6), torch.randn(1, 2, 6))
    assert out.shape == (1, 3, 4, 512)
    with pytest.raises(ValueError):
        fim(torch.randn(1, 3, 4, 6), torch.randn(1, 0, 6))


def test_cross_attention_ignores_duplicate_exemplars():
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2)
    x, z = torch.randn(1, 5, 8), torch.randn(1, 1, 8)
    torch.testing.assert_close(attn(x, z), attn(x, torch.cat([z, z], 1)), atol=1e-6, rtol=0)


def test_decoder_output_sizes():
    dec = Decoder(8, 8, 4, 2)
    assert dec(torch.randn(1, 14, 14, 8), (224, 224)).shape == (1, 224, 224)
    raw = dec(torch.randn(1, 28, 28, 8), (448, 448))
    assert raw.shape == (1, 448, 448)
    assert dec(torch.randn(1, 28, 28, 8), (392, 392)).shape == (1, 392, 392)


def test_zero_grid_with_zero_head_gives_zero_map():
    dec = Decoder(8, 8, 2, 2)
    torch.nn.init.zeros_(dec.head.weight)
    torch.nn.init.zeros_(dec.head.bias)
    assert dec(torch.zeros(1, 4, 4, 8), (16, 16)).abs().max() == 0


def test_forward_shape_and_frozen_backbone():
    model = CountingModel(tiny_config())
    torch.nn.init.normal_(model.decoder.head.weight)
    images = torch.rand(2, 3, 32, 40)
    ex = torch.rand(2, 3, 3, 16, 16)
    out = model(images, ex)
    assert out.shape == (2, 32, 40)
    out.sum().backward()
    assert all(p.grad is None for p in model.backbone.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.trainable_parameters())


def test_predict_density_rejects_no_exemplars():
    model = CountingModel(tiny_config())
    with pytest.raises(ValueError):
        model.predict_density(np.zeros((32, 32, 3), np.uint8), [])


def test_exemplar_permutations_are_bitwise_invariant():
    torch.manual_seed(1)
    model = CountingModel(tiny_config())
    torch.nn.init.normal_(model.decoder.head.weight)
    image = torch.rand(1, 3, 32, 32)
    ex = torch.rand(1, 3, 3, 16, 16)
    ref = model(image, ex).detach().numpy().tobytes()
    for perm in ([1, 0, 2], [2, 1, 0], [1, 2, 0]):
        assert model(image, ex[:, perm]).detach().numpy().tobytes() == ref


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = CountingModel(tiny_config()).double()
    torch.nn.init.normal_(model.decoder.head.weight, std=0.5)
    images = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    ex = torch.rand(1, 2, 3, 16, 16, dtype=torch.float64)
    target = torch.rand(1, 32, 32, dtype=torch.float64) * 0.01
    keep = (torch.rand(1, 32, 32) > 0.2).double()
    feats = model.encode_image(images)
    assert feats.shape[1:] == (4, 4, 16)

    def loss():
        return masked_scaled_mse(model.forward_features(feats, ex, (32, 32)), target, keep, 3000.0)

    model.zero_grad()
    loss().backward()
    params = [p for p in model.trainable_parameters()]
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        eps = 1e-6
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(loss())
            p[idx] = orig - eps
            down = float(loss())
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-7)
        worst = max(worst, abs(analytic - numeric) / denom)
    assert worst <= 1e-3


def test_checkpoint_round_trip(tmp_path):
    model = CountingModel(tiny_config(seed=3))
    torch.nn.init.normal_(model.decoder.head.weight)
    save_checkpoint(model, tmp_path / "m.scna", {"note": 1})
    back = load_checkpoint(tmp_path / "m.scna")
    img = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    ex = [img[:16, :16]]
    np.testing.assert_array_equal(model.predict_density(img, ex), back.predict_density(img, ex))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(fim_dim=30, fim_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(decoder_channels=30, decoder_groups=8)
