import pytest
import torch

from cardiotask.model import (
    CardiacViT,
    ModelConfig,
    build_model,
    encoder_forward,
    grid_to_tokens,
    load_pretrained,
    parameter_count,
    patch_embed,
    pyramid_decode,
    tokens_to_grid,
)


@pytest.fixture(scope="module")
def toy():
    return build_model(ModelConfig(), seed=0).eval()


def test_full_size_token_count():
    cfg = ModelConfig.full()
    assert (cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.decoder_channels) == (
        224, 14, 768, 12, 256)
    assert cfg.num_patches == 256


def test_toy_token_count(toy):
    tok = patch_embed(torch.zeros(2, 3, 56, 56), toy)
    assert tok.shape == (2, 50, 64)


def test_full_size_sequence_is_257():
    cfg = ModelConfig.full(embed_dim=24, num_heads=2, decoder_channels=8, depth=12)
    m = CardiacViT(cfg)
    assert m.patch_embed(torch.zeros(1, 3, 224, 224)).shape[1] == 257


def test_zero_input_gives_positional_table(toy):
    with torch.no_grad():
        tok = patch_embed(torch.zeros(1, 3, 56, 56), toy)  # patch bias is zero-initialized
    assert torch.equal(tok[0, 1:], toy.pos_embed[0, 1:])
    assert torch.equal(tok[0, 0], (toy.cls_token + toy.pos_embed[:, :1])[0, 0])


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(image_size=50)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=62)
    with pytest.raises(ValueError):
        ModelConfig(tap_layers=(3, 9, 6, 12))  # permuted taps are rejected, not reordered
    with pytest.raises(ValueError):
        ModelConfig(tap_layers=(3, 6, 9, 13))
    with pytest.raises(ValueError):
        ModelConfig(tap_layers=(3, 6, 9))
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_parameter_count_matches_module(toy):
    n = sum(p.numel() for p in toy.parameters())
    assert parameter_count(toy.cfg) == n == 656233


def test_attention_rows_sum_to_one(toy):
    blk = toy.blocks[0]
    blk.attn.keep_weights = True
    try:
        with torch.no_grad():
            toy(torch.randn(2, 3, 56, 56))
        w = blk.attn.last_weights
    finally:
        blk.attn.keep_weights = False
    assert torch.allclose(w.sum(-1), torch.ones(()), atol=1e-6)


def test_zeroed_output_projections_make_taps_identity():
    m = build_model(ModelConfig(dropout=0.0), seed=1).eval()
    with torch.no_grad():
        for blk in m.blocks:
            blk.attn.proj.weight.zero_()
            blk.attn.proj.bias.zero_()
            blk.fc2.weight.zero_()
            blk.fc2.bias.zero_()
        tok = patch_embed(torch.randn(1, 3, 56, 56), m)
        taps, cls = encoder_forward(tok, m)
    for t in taps:
        assert torch.equal(t, tok[:, 1:])
    assert torch.equal(cls, tok[:, 0])


def test_token_permutation_equivariance():
    m = build_model(ModelConfig(dropout=0.0), seed=2).eval()
    with torch.no_grad():
        tok = patch_embed(torch.randn(1, 3, 56, 56), m)
        perm = torch.randperm(49, generator=torch.Generator().manual_seed(0))
        tok_p = torch.cat([tok[:, :1], tok[:, 1:][:, perm]], dim=1)
        taps, _ = m.encode(tok)
        taps_p, _ = m.encode(tok_p)
    for a, b in zip(taps, taps_p):
        assert torch.allclose(a[:, perm], b, atol=1e-5)


def test_grid_roundtrip_and_layout():
    t = torch.randn(2, 49, 5)
    g = tokens_to_grid(t)
    assert g.shape == (2, 5, 7, 7)
    assert torch.equal(grid_to_tokens(g), t)
    with pytest.raises(ValueError):
        tokens_to_grid(torch.zeros(1, 50, 4))


def test_top_left_patch_lands_at_origin():
    m = build_model(ModelConfig(dropout=0.0), seed=0)
    x = torch.zeros(1, 3, 56, 56)
    x[..., :8, :8] = 1.0
    with torch.no_grad():
        tok = m.patch_proj(x).flatten(2).transpose(1, 2)  # patch tokens, no CLS/pos
        grid = tokens_to_grid(tok)
    nz = grid.abs().sum(1)[0].nonzero().tolist()
    assert nz == [[0, 0]]


def _identity_fusion_model():
    cfg = ModelConfig(embed_dim=4, num_heads=1, decoder_channels=4, dropout=0.0, image_size=16, patch_size=8)
    m = CardiacViT(cfg)
    with torch.no_grad():
        for conv in m.fusion:
            conv.weight.zero_()
            conv.weight[:, :, 1, 1] = torch.eye(4)
            conv.bias.zero_()
        for conv in m.lateral:
            conv.weight.copy_(torch.eye(4)[:, :, None, None])
            conv.bias.zero_()
    return m.eval()


def test_fusion_chain_hand_computation():
    m = _identity_fusion_model()
    gelu = torch.nn.functional.gelu
    grids = [torch.randn(1, 4, 2, 2, dtype=torch.float32) for _ in range(4)]
    with torch.no_grad():
        out = pyramid_decode(grids, m)
    lat = [gelu(g) for g in grids]
    p12 = lat[3]
    p9 = gelu(lat[2] + p12)
    p6 = gelu(lat[1] + p9)
    p3 = gelu(lat[0] + p6)
    assert torch.allclose(out, p3, atol=1e-6)


def test_zero_taps_give_zero_output():
    m = build_model(ModelConfig(dropout=0.0), seed=0).eval()
    with torch.no_grad():
        out = pyramid_decode([torch.zeros(1, 64, 7, 7)] * 4, m)
    assert torch.equal(out, torch.zeros_like(out))
    assert out.shape == (1, 32, 7, 7)


def test_decoder_channel_mismatch():
    m = build_model(ModelConfig(), seed=0)
    with pytest.raises(ValueError):
        pyramid_decode([torch.zeros(1, 32, 7, 7)] * 4, m)


def test_forward_shapes_and_distributions(toy):
    with torch.no_grad():
        out = toy(torch.randn(3, 3, 56, 56))
    assert out.seg_logits.shape == (3, 4, 56, 56)
    assert out.disease_probs.shape == (3, 5)
    assert torch.allclose(out.seg_probs.sum(1), torch.ones(()), atol=1e-5)
    assert torch.allclose(out.disease_probs.sum(1), torch.ones(()), atol=1e-6)
    assert out.cls_token.shape == (3, 64)


def test_eval_forward_bitwise_deterministic(toy):
    x = torch.randn(2, 3, 56, 56)
    with torch.no_grad():
        a = toy(x).seg_probs
        b = toy(x).seg_probs
    assert torch.equal(a, b)


def test_train_mode_stochastic_only_through_dropout():
    m = build_model(ModelConfig(dropout=0.5), seed=0).train()
    x = torch.randn(1, 3, 56, 56)
    with torch.no_grad():
        assert not torch.equal(m(x).seg_probs, m(x).seg_probs)
    m0 = build_model(ModelConfig(dropout=0.0), seed=0).train()
    with torch.no_grad():
        assert torch.equal(m0(x).seg_probs, m0(x).seg_probs)


def test_wrong_input_shape(toy):
    with pytest.raises(ValueError):
        toy(torch.zeros(1, 3, 48, 48))


def test_encoder_rejects_non_finite():
    m = build_model(ModelConfig(), seed=0)
    tok = torch.full((1, 50, 64), float("nan"))
    with pytest.raises(FloatingPointError):
        encoder_forward(tok, m)


def test_init_finite_and_seeded():
    a = build_model(ModelConfig(), seed=5)
    b = build_model(ModelConfig(), seed=5)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.isfinite(pa).all(), na
        assert torch.equal(pa, pb)
    assert torch.equal(a.seg_head.bias, torch.zeros(4))


def test_pretrained_import(tmp_path):
    src = build_model(ModelConfig(), seed=1)
    path = tmp_path / "w.pt"
    sd = {f"backbone.{k}": v for k, v in src.state_dict().items() if k.startswith("blocks.")}
    torch.save(sd, path)
    dst = build_model(ModelConfig(), seed=2)
    loaded = load_pretrained(dst, path, {"backbone.": ""})
    assert loaded and all(k.startswith("blocks.") for k in loaded)
    assert torch.equal(dst.blocks[0].fc1.weight, src.blocks[0].fc1.weight)
    assert not torch.equal(dst.seg_head.weight, src.seg_head.weight)
    assert all(torch.isfinite(p).all() for p in dst.parameters())
