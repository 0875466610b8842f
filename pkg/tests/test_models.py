import numpy as np
import pytest
import torch

from pijepa.errors import CheckpointShapeError, CrcMismatchError
from pijepa.fields import NormStats
from pijepa.models import (
    ChannelAdapter,
    EmaSchedule,
    EncoderConfig,
    FinetuneHead,
    Fno2d,
    FnoConfig,
    FourierAttentionEncoder,
    PredictorConfig,
    StageFieldDecoder,
    StagePredictorBank,
    build_jepa,
    ema_lag_probe,
    ema_update,
    ema_update_tensors,
    load_checkpoint,
    load_into_module,
    module_tensors,
    patchify,
    save_checkpoint,
    unpatchify,
)
from pijepa.models.layers import FourierBlock

torch.set_num_threads(1)


def _toy_cfg(**kw) -> EncoderConfig:
    base = dict(
        height=16,
        width=16,
        in_channels=2,
        patch=4,
        d_model=16,
        fourier_layers=1,
        fourier_hidden=8,
        modes=4,
        attn_layers=1,
        heads=2,
    )
    base.update(kw)
    return EncoderConfig(**base)


def _stats(channels=("p_w", "log_K")) -> NormStats:
    return NormStats(channels, np.zeros(len(channels)), np.ones(len(channels)))


# ---------------------------------------------------------------------------
# Patch ops / positions
# ---------------------------------------------------------------------------


def test_patchify_token_counts():
    x = torch.randn(1, 3, 64, 64)
    assert patchify(x, 8).shape == (1, 64, 3 * 64)
    x16 = torch.randn(1, 1, 16, 16)
    assert patchify(x16, 8).shape == (1, 4, 64)


def test_patchify_round_trip_bit_exact():
    x = torch.randn(2, 3, 32, 32)
    tokens = patchify(x, 8)
    back = unpatchify(tokens, 8, 3, 32, 32)
    assert torch.equal(back, x)


def test_patchify_rejects_non_divisible():
    with pytest.raises(ValueError):
        patchify(torch.randn(1, 1, 30, 32), 8)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def test_fourier_block_identity_at_init():
    blk = FourierBlock(hidden=8, modes=4)
    x = torch.randn(2, 8, 16, 16)
    assert torch.equal(blk(x), x)


def test_encoder_output_shape_and_context_mode():
    cfg = _toy_cfg()
    enc = FourierAttentionEncoder(cfg)
    x = torch.randn(3, 2, 16, 16)
    full = enc(x)
    assert full.shape == (3, 16, cfg.d_model)
    idx = torch.tensor([0, 2, 5, 9])
    ctx = enc(x, context_idx=idx)
    assert ctx.shape == (3, 4, cfg.d_model)


def test_encoder_features_equal_stem_at_init():
    cfg = _toy_cfg(fourier_layers=3)
    enc = FourierAttentionEncoder(cfg)
    x = torch.randn(1, 2, 16, 16)
    assert torch.equal(enc.features(x), enc.stem(x))


def test_encoder_deterministic_forward():
    cfg = _toy_cfg()
    torch.manual_seed(0)
    enc = FourierAttentionEncoder(cfg)
    x = torch.randn(2, 2, 16, 16)
    assert torch.equal(enc(x), enc(x))


def test_encoder_zero_fill_mode_masks_pixels():
    cfg = _toy_cfg(mask_mode="zero")
    enc = FourierAttentionEncoder(cfg)
    x = torch.randn(1, 2, 16, 16)
    idx = torch.tensor([0])
    masked = enc._zero_fill(x, idx)
    assert torch.equal(masked[:, :, :4, :4], x[:, :, :4, :4])
    assert masked[:, :, 4:, :].abs().max() == 0


def test_encoder_rejects_wrong_shape():
    enc = FourierAttentionEncoder(_toy_cfg())
    with pytest.raises(ValueError, match="does not match"):
        enc(torch.randn(1, 2, 32, 32))


def test_desk_preset_structure():
    cfg = EncoderConfig.desk(in_channels=2)
    assert cfg.token_grid == (8, 8)
    assert cfg.d_model % cfg.heads == 0
    assert cfg.effective_modes <= cfg.height // 2


# ---------------------------------------------------------------------------
# Predictor bank
# ---------------------------------------------------------------------------


def test_predictor_chain_shapes_and_range_check():
    cfg = _toy_cfg()
    bank = StagePredictorBank(cfg.d_model, PredictorConfig(depth=1, heads=2, count=2), cfg.token_grid)
    z = torch.randn(2, 5, cfg.d_model)
    tgt = torch.tensor([1, 7, 12])
    outs = bank.chain(z, tgt)
    assert len(outs) == 2
    assert all(o.shape == (2, 3, cfg.d_model) for o in outs)
    with pytest.raises(ValueError, match="out of range"):
        bank.stage(3, z, tgt)


def test_predictor_single_stage_degenerate_chain():
    cfg = _toy_cfg()
    bank = StagePredictorBank(cfg.d_model, PredictorConfig(depth=1, heads=2, count=1), cfg.token_grid)
    z = torch.randn(1, 4, cfg.d_model)
    tgt = torch.tensor([3, 8])
    outs = bank.chain(z, tgt)
    assert len(outs) == 1
    assert torch.equal(outs[0], bank.stage(1, z, tgt))


def test_predictor_permutation_equivariance():
    cfg = _toy_cfg()
    torch.manual_seed(1)
    bank = StagePredictorBank(
        cfg.d_model, PredictorConfig(depth=1, heads=2, count=1), cfg.token_grid
    ).double()
    z = torch.randn(2, 4, cfg.d_model, dtype=torch.float64)
    tgt = torch.tensor([2, 5, 11])
    perm = torch.tensor([2, 0, 1])
    out = bank.stage(1, z, tgt)
    out_perm = bank.stage(1, z, tgt[perm])
    assert torch.allclose(out[:, perm], out_perm, atol=1e-12)


def test_monolithic_config_matches_parameter_budget():
    cfg = _toy_cfg()
    split = PredictorConfig(depth=2, heads=2, count=3)
    mono = split.monolithic()
    assert mono.count == 1 and mono.depth == 6
    n_split = sum(
        p.numel()
        for p in StagePredictorBank(cfg.d_model, split, cfg.token_grid).parameters()
    )
    n_mono = sum(
        p.numel()
        for p in StagePredictorBank(cfg.d_model, mono, cfg.token_grid).parameters()
    )
    assert n_split == n_mono


# ---------------------------------------------------------------------------
# Decoders / head / adapter
# ---------------------------------------------------------------------------


def test_stage_decoder_shape_and_full_set_requirement():
    cfg = _toy_cfg()
    dec = StageFieldDecoder(cfg.d_model, cfg.patch, 3, cfg.token_grid)
    tokens = torch.randn(2, 16, cfg.d_model)
    out = dec(tokens)
    assert out.shape == (2, 3, 16, 16)
    with pytest.raises(ValueError, match="full token set"):
        dec(tokens[:, :5])


def test_stage_decoder_zero_tokens_zero_bias_gives_zero_field():
    cfg = _toy_cfg()
    dec = StageFieldDecoder(cfg.d_model, cfg.patch, 2, cfg.token_grid)
    with torch.no_grad():
        for m in dec.modules():
            if hasattr(m, "bias") and m.bias is not None:
                m.bias.zero_()
    out = dec(torch.zeros(1, 16, cfg.d_model))
    assert out.abs().max() == 0.0


def test_finetune_head_shape():
    cfg = _toy_cfg()
    head = FinetuneHead(cfg.d_model, cfg.patch, 2, cfg.token_grid)
    out = head(torch.randn(2, 16, cfg.d_model))
    assert out.shape == (2, 2, 16, 16)
    with pytest.raises(ValueError, match="full token grid"):
        head(torch.randn(2, 9, cfg.d_model))


def test_channel_adapter_identity_init():
    ad = ChannelAdapter(3, 3)
    x = torch.randn(2, 3, 8, 8)
    assert torch.allclose(ad(x), x, atol=1e-7)


def test_channel_adapter_mean_combination():
    ad = ChannelAdapter(2, 1)
    with torch.no_grad():
        ad.proj.weight.fill_(0.5)
        ad.proj.bias.zero_()
    x = torch.randn(1, 2, 4, 4)
    assert torch.allclose(ad(x)[:, 0], x.mean(dim=1), atol=1e-7)


def test_channel_adapter_receives_gradients():
    ad = ChannelAdapter(2, 2)
    x = torch.randn(1, 2, 4, 4)
    loss = ad(x).pow(2).sum()
    loss.backward()
    assert ad.proj.weight.grad is not None
    assert ad.proj.weight.grad.abs().sum() > 0


# ---------------------------------------------------------------------------
# FNO baseline
# ---------------------------------------------------------------------------


def test_fno_shape_preservation():
    fno = Fno2d(FnoConfig(in_channels=2, out_channels=1, width=8, modes=4, layers=2))
    out = fno(torch.randn(3, 2, 16, 16))
    assert out.shape == (3, 1, 16, 16)


def test_fno_zero_weights_constant_output():
    fno = Fno2d(FnoConfig(in_channels=1, out_channels=1, width=4, modes=4, layers=1))
    with torch.no_grad():
        for p in fno.parameters():
            p.zero_()
        fno.proj.bias.fill_(0.7)
    out = fno(torch.randn(2, 1, 16, 16))
    assert torch.allclose(out, torch.full_like(out, 0.7))


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


def test_ema_update_endpoints():
    a = torch.nn.Linear(4, 4)
    b = torch.nn.Linear(4, 4)
    b0 = {k: v.clone() for k, v in b.named_parameters()}
    ema_update(b, a, tau=1.0)
    for k, v in b.named_parameters():
        assert torch.equal(v, b0[k])
    ema_update(b, a, tau=0.0)
    for (k, v), (_, va) in zip(b.named_parameters(), a.named_parameters()):
        assert torch.equal(v, va)


def test_ema_schedule_monotone_and_bounded():
    sched = EmaSchedule(total_steps=1000)
    taus = [sched.tau(s) for s in range(0, 1100, 7)]
    assert all(0.99 <= t <= 0.999 for t in taus)
    assert all(b >= a for a, b in zip(taus, taus[1:]))
    assert sched.tau(0) == pytest.approx(0.99)
    assert sched.tau(1000) == pytest.approx(0.999)


def test_ema_lag_probe_within_remark_bound():
    tau, delta = 0.996, 1.0
    max_gap = ema_lag_probe(n_steps=500, tau=tau, delta=delta, seed=0)
    bound = delta * tau / (1 - tau)  # = 249 * delta
    assert max_gap <= bound * 1.001
    assert max_gap > 0.5 * bound  # the probe actually stresses the bound


def test_ema_update_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="differ"):
        ema_update_tensors({"a": torch.zeros(2)}, {"b": torch.zeros(2)}, 0.5)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    path = tmp_path / "m.pjck"
    jepa = build_jepa(_toy_cfg(), PredictorConfig(depth=1, heads=2, count=2), ("p_w", "log_K"), _stats(), 0)
    tensors = module_tensors(jepa)
    save_checkpoint(path, tensors, meta={"kind": "test", "step": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "test", "step": 3}
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.pjck"
    save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CrcMismatchError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    path = tmp_path / "m.pjck"
    lin = torch.nn.Linear(4, 4)
    save_checkpoint(path, module_tensors(lin))
    tensors, _ = load_checkpoint(path)
    other = torch.nn.Linear(4, 8)
    with pytest.raises(CheckpointShapeError, match="weight"):
        load_into_module(other, tensors)


def test_checkpoint_save_deterministic_bytes(tmp_path):
    p1, p2 = tmp_path / "a.pjck", tmp_path / "b.pjck"
    tensors = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.zeros(2, np.float32)}
    save_checkpoint(p1, tensors, meta={"x": 1})
    save_checkpoint(p2, tensors, meta={"x": 1})
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------


def test_jepa_container_structure_and_assembly():
    cfg = _toy_cfg()
    jepa = build_jepa(cfg, PredictorConfig(depth=1, heads=2, count=2), ("p_w", "log_K"), _stats(), 7)
    assert jepa.stage_count == 2
    for p in jepa.target_encoder.parameters():
        assert not p.requires_grad
    x = torch.randn(2, 2, 16, 16)
    ctx_idx = torch.tensor([0, 1, 2, 3, 4, 5])
    tgt_idx = torch.tensor([10, 11])
    z_ctx = jepa.encode_context(x, ctx_idx)
    outs = jepa.predictors.chain(z_ctx, tgt_idx)
    full = jepa.assemble_tokens(z_ctx, ctx_idx, outs[-1], tgt_idx)
    assert full.shape == (2, 16, cfg.d_model)
    assert torch.equal(full[:, ctx_idx], z_ctx)
    assert torch.equal(full[:, tgt_idx], outs[-1])
    field = jepa.decode(2, full)
    assert field.shape == (2, 2, 16, 16)


def test_jepa_same_seed_identical_parameters():
    cfg = _toy_cfg()
    a = build_jepa(cfg, PredictorConfig(depth=1, heads=2, count=1), ("p_w", "log_K"), _stats(), 3)
    b = build_jepa(cfg, PredictorConfig(depth=1, heads=2, count=1), ("p_w", "log_K"), _stats(), 3)
    for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb
        assert torch.equal(pa, pb)


def test_encoder_full_config_token_shape():
    # paper-scale config: 64x64 grid, P=8 -> 64 tokens of width 384
    cfg = EncoderConfig.full(in_channels=3)
    enc = FourierAttentionEncoder(cfg)
    x = torch.randn(1, 3, 64, 64)
    idx = torch.arange(40)  # context-encoder mode
    out = enc(x, context_idx=idx)
    assert out.shape == (1, 40, 384)
