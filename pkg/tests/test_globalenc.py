import numpy as np
import pytest
import torch

from pcqa.globalenc import (
    EncoderConfig,
    GlobalEncoder,
    global_feature,
    load_pretrained_vit,
)


def tiny_cfg(**kw):
    defaults = dict(image_size=32, patch_size=16, embed_dim=8, depth=1,
                    heads=1, mlp_ratio=2.0, d_out=4)
    defaults.update(kw)
    return EncoderConfig(**defaults)


def test_patch_count_and_sequence_length():
    cfg = EncoderConfig.vit_b(224)
    assert cfg.num_patches == 196
    enc = GlobalEncoder(tiny_cfg())
    z = enc.embed(torch.randn(2, 3, 32, 32), torch.randn(2, 1, 32, 32))
    assert z.shape == (2, 5, 8)  # 4 patches + class token


def test_patch_embed_linearity_zero_input():
    enc = GlobalEncoder(tiny_cfg())
    with torch.no_grad():
        enc.patch_embed.proj_d.weight.zero_()
        enc.patch_embed.proj_d.bias.zero_()
    z = enc.embed(torch.zeros(1, 3, 32, 32), torch.randn(1, 1, 32, 32))
    # depth embed zeroed: patch tokens are texture-embed bias + positional table
    bias = enc.patch_embed.proj_t.bias
    expected = bias.expand(4, -1) + enc.pos_embed[0, 1:]
    torch.testing.assert_close(z[0, 1:], expected)


def test_attention_rows_sum_to_one():
    enc = GlobalEncoder(tiny_cfg(heads=2, embed_dim=8))
    _, attn = enc.encode(enc.embed(torch.randn(3, 3, 32, 32), torch.randn(3, 1, 32, 32)))
    sums = attn.sum(dim=-1)
    torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-5, rtol=0)


def test_encode_deterministic_in_eval():
    enc = GlobalEncoder(tiny_cfg())
    enc.eval()
    tex, dep = torch.randn(1, 3, 32, 32), torch.randn(1, 1, 32, 32)
    a, _ = enc(tex, dep)
    b, _ = enc(tex, dep)
    torch.testing.assert_close(a, b, atol=0, rtol=0)


def test_single_head_attention_matches_numpy_oracle():
    """Hand-evaluate softmax attention for one block on two tokens."""
    torch.manual_seed(0)
    enc = GlobalEncoder(tiny_cfg()).double()
    block = enc.blocks[0]
    z = torch.randn(1, 2, 8, dtype=torch.float64)
    _, attn = block(z)

    zn = z[0].numpy()
    w = {k: v.detach().numpy() for k, v in block.state_dict().items()}
    mu = zn.mean(axis=1, keepdims=True)
    var = zn.var(axis=1, keepdims=True)
    ln = (zn - mu) / np.sqrt(var + 1e-5) * w["norm1.weight"] + w["norm1.bias"]
    qkv = ln @ w["attn.qkv.weight"].T + w["attn.qkv.bias"]
    q, k, _ = qkv[:, :8], qkv[:, 8:16], qkv[:, 16:]
    scores = q @ k.T / np.sqrt(8.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    expected = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attn[0, 0].detach().numpy(), expected, atol=1e-12)


def test_non_finite_activation_reports_block():
    enc = GlobalEncoder(tiny_cfg(depth=2))
    with torch.no_grad():
        enc.blocks[1].mlp[2].weight.fill_(float("nan"))
    with pytest.raises(RuntimeError, match="block 1"):
        enc(torch.randn(1, 3, 32, 32), torch.randn(1, 1, 32, 32))


def test_class_attention_shape_vit_b():
    cfg = EncoderConfig.vit_b(224)
    enc = GlobalEncoder(tiny_cfg(image_size=224, heads=12, embed_dim=24))
    attn = torch.rand(2, 12, 197, 197)
    maps = enc.class_attention(attn / attn.sum(-1, keepdim=True))
    assert maps.shape == (2, 12, 14, 14)
    assert cfg.grid == 14


def test_class_attention_uniform_maps_to_zero():
    enc = GlobalEncoder(tiny_cfg(heads=2, embed_dim=8))
    attn = torch.full((1, 2, 5, 5), 1.0 / 5.0)
    maps = enc.class_attention(attn)
    torch.testing.assert_close(maps, torch.zeros_like(maps))


def test_class_attention_one_hot_reshape():
    enc = GlobalEncoder(tiny_cfg(heads=2, embed_dim=8, attn_norm_affine=False))
    attn = torch.zeros(1, 2, 5, 5)
    attn[0, 0, 0, 3] = 1.0   # head 0 class row: all mass on patch index 2
    attn[0, 1, 0, 1:] = 0.25
    # pre-norm map of head 0 is one-hot at grid cell (1, 0) for a 2x2 grid
    raw = attn[0, 0, 0, 1:].reshape(2, 2)
    assert raw[1, 0] == 1.0 and raw.sum() == 1.0
    maps = enc.class_attention(attn)
    assert maps.shape == (1, 2, 2, 2)


def test_class_attention_mass_preserved_before_norm():
    enc = GlobalEncoder(tiny_cfg(heads=2, embed_dim=8))
    attn = torch.rand(1, 2, 5, 5)
    attn = attn / attn.sum(-1, keepdim=True)
    pre_norm = attn[:, :, 0, 1:]
    torch.testing.assert_close(
        pre_norm.sum(-1), 1.0 - attn[:, :, 0, 0], atol=1e-6, rtol=0
    )


def test_class_attention_rejects_non_grid():
    enc = GlobalEncoder(tiny_cfg())
    with pytest.raises(ValueError, match="grid"):
        enc.class_attention(torch.rand(1, 1, 4, 4))  # 3 patches


def test_global_feature_weighted_mean_properties():
    feats = torch.randn(2, 6, 4)
    w = torch.rand(2, 6) + 0.1
    fused = global_feature(feats, w)
    # convex hull property, coordinate-wise
    assert (fused <= feats.max(dim=1).values + 1e-6).all()
    assert (fused >= feats.min(dim=1).values - 1e-6).all()
    # equal features -> fused equals them
    same = feats[:, :1].expand(-1, 6, -1)
    torch.testing.assert_close(global_feature(same, w), feats[:, 0])
    # single nonzero weight selects that view
    w1 = torch.zeros(1, 6)
    w1[0, 0] = 1.0
    torch.testing.assert_close(global_feature(feats[:1], w1), feats[:1, 0])


def test_global_feature_scalar_example():
    feats = torch.zeros(1, 6, 1)
    feats[0, 0, 0] = 3.0
    feats[0, 1, 0] = 6.0
    w = torch.tensor([[2.0, 1.0, 0, 0, 0, 0]])
    assert global_feature(feats, w).item() == pytest.approx(4.0)


def test_global_feature_all_zero_ratios_errors():
    with pytest.raises(ValueError, match="occupancy"):
        global_feature(torch.randn(1, 6, 4), torch.zeros(1, 6))


def test_backprop_matches_finite_differences():
    """d loss / d texture pixel via autograd vs central differences."""
    torch.manual_seed(1)
    enc = GlobalEncoder(tiny_cfg()).double()
    dep = torch.randn(1, 1, 32, 32, dtype=torch.float64)
    tex = torch.randn(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)

    def loss_of(t):
        z, maps = enc(t, dep)
        return z.square().mean() + maps.square().mean()

    loss = loss_of(tex)
    loss.backward()
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(5):
        c, i, j = rng.integers(0, [3, 32, 32])
        tp = tex.detach().clone()
        tm = tex.detach().clone()
        tp[0, c, i, j] += h
        tm[0, c, i, j] -= h
        fd = (loss_of(tp) - loss_of(tm)).item() / (2 * h)
        ad = tex.grad[0, c, i, j].item()
        assert abs(fd - ad) <= 1e-3 * max(abs(fd), abs(ad), 1e-8)


def test_pretrained_vit_b_loading():
    cfg = EncoderConfig.vit_b(32)  # 2x2 grid keeps the test fast
    cfg = EncoderConfig(image_size=32, patch_size=16, embed_dim=16, depth=2,
                        heads=2, mlp_ratio=4.0, d_out=4)
    enc = GlobalEncoder(cfg)
    n = cfg.num_patches
    sd = {
        "cls_token": torch.randn(1, 1, 16),
        "pos_embed": torch.randn(1, n + 1, 16),
        "patch_embed.proj.weight": torch.randn(16, 3, 16, 16),
        "patch_embed.proj.bias": torch.randn(16),
        "norm.weight": torch.randn(16),
        "norm.bias": torch.randn(16),
    }
    for i in range(2):
        sd[f"blocks.{i}.norm1.weight"] = torch.randn(16)
        sd[f"blocks.{i}.norm1.bias"] = torch.randn(16)
        sd[f"blocks.{i}.attn.qkv.weight"] = torch.randn(48, 16)
        sd[f"blocks.{i}.attn.qkv.bias"] = torch.randn(48)
        sd[f"blocks.{i}.attn.proj.weight"] = torch.randn(16, 16)
        sd[f"blocks.{i}.attn.proj.bias"] = torch.randn(16)
        sd[f"blocks.{i}.norm2.weight"] = torch.randn(16)
        sd[f"blocks.{i}.norm2.bias"] = torch.randn(16)
        sd[f"blocks.{i}.mlp.fc1.weight"] = torch.randn(64, 16)
        sd[f"blocks.{i}.mlp.fc1.bias"] = torch.randn(64)
        sd[f"blocks.{i}.mlp.fc2.weight"] = torch.randn(16, 64)
        sd[f"blocks.{i}.mlp.fc2.bias"] = torch.randn(16)
    load_pretrained_vit(enc, sd)
    torch.testing.assert_close(enc.patch_embed.proj_t.weight, sd["patch_embed.proj.weight"])
    torch.testing.assert_close(
        enc.patch_embed.proj_d.weight,
        sd["patch_embed.proj.weight"].mean(dim=1, keepdim=True),
    )
    torch.testing.assert_close(enc.blocks[1].mlp[0].weight, sd["blocks.1.mlp.fc1.weight"])
