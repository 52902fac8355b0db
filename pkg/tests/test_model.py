import numpy as np
import pytest
import torch

from clpscf.dataio import build_label_space
from clpscf.features import num_frames
from clpscf.model import (ModelCheckpoint, ModelConfig, TGramNet, clip_tensors, forward_embed,
                          forward_latent, init_model, parameter_groups)


def _conv_bn(cin, cout, k):
    return k * k * cin * cout + 2 * cout


def test_toy_cnn_parameter_count(small_feature_cfg):
    cfg = ModelConfig(embed_dim=32, latent_dim=8, num_classes=4, backbone_variant="toy_cnn",
                      feature_cfg=small_feature_cfg)
    m, n_fft = small_feature_cfg.mel_bins, small_feature_cfg.n_fft
    tgram = n_fft * m + 3 * (3 * m * m + 2 * m)          # frontend + (conv, groupnorm) x 3
    cnn = _conv_bn(2, 16, 3) + _conv_bn(16, 32, 3) + _conv_bn(32, 64, 3) + _conv_bn(64, 64, 3)
    projector = (64 * 64 + 64) + (64 * 32 + 32)
    model = init_model(cfg, 0)
    assert sum(p.numel() for p in model.parameters()) == tgram + cnn + projector
    assert parameter_groups(model) == {"backbone": tgram + cnn, "projector": projector}


def test_init_deterministic(toy_model_cfg):
    a = init_model(toy_model_cfg, 5).state_dict()
    b = init_model(toy_model_cfg, 5).state_dict()
    c = init_model(toy_model_cfg, 6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_init_does_not_touch_global_rng(toy_model_cfg):
    torch.manual_seed(123)
    expected = torch.rand(1)
    torch.manual_seed(123)
    init_model(toy_model_cfg, 0)
    assert torch.equal(torch.rand(1), expected)


def test_tgram_output_matches_log_mel_shape(small_feature_cfg):
    net = TGramNet(small_feature_cfg)
    for length in (256, 1000, 4000):
        out = net(torch.randn(2, length))
        assert out.shape == (2, small_feature_cfg.mel_bins, num_frames(length, small_feature_cfg))


def test_stgram_mfn_forward_shape(small_feature_cfg, tiny_toy):
    cfg = ModelConfig(embed_dim=16, latent_dim=8, num_classes=4, backbone_variant="stgram_mfn",
                      feature_cfg=small_feature_cfg)
    z = forward_embed(init_model(cfg, 0), tiny_toy[0][:3])
    assert z.shape == (3, 16)
    assert np.isfinite(z).all()


def test_forward_embed_shapes_and_purity(toy_model_cfg, tiny_toy):
    model = init_model(toy_model_cfg, 0)
    clip = tiny_toy[0][0]
    assert forward_embed(model, [clip]).shape == (1, toy_model_cfg.embed_dim)
    z = forward_embed(model, [clip, tiny_toy[0][7], clip])
    assert np.array_equal(z[0], z[2])
    assert np.isfinite(z).all()


def test_forward_embed_bit_reproducible(toy_model_cfg, tiny_toy):
    a = forward_embed(init_model(toy_model_cfg, 9), tiny_toy[0][:4])
    b = forward_embed(init_model(toy_model_cfg, 9), tiny_toy[0][:4])
    assert a.tobytes() == b.tobytes()


def test_forward_embed_errors(toy_model_cfg, tiny_toy):
    from clpscf.dataio import AudioClip

    model = init_model(toy_model_cfg, 0)
    short = AudioClip(np.zeros(3000), 16000, "type0", 0)
    with pytest.raises(ValueError, match="one length"):
        forward_embed(model, [tiny_toy[0][0], short])
    with torch.no_grad():
        next(model.parameters())[0].fill_(float("nan"))
    with pytest.raises(ValueError, match="non-finite"):
        forward_embed(model, [tiny_toy[0][0]])


def test_forward_latent(toy_model_cfg, tiny_toy):
    model = init_model(toy_model_cfg, 0)
    with pytest.raises(RuntimeError, match="classifier head missing"):
        forward_latent(model, tiny_toy[0][:2])
    model.attach_classifier(1)
    z, h = forward_latent(model, tiny_toy[0][:5])
    assert z.shape == (5, toy_model_cfg.embed_dim)
    assert h.shape == (5, toy_model_cfg.latent_dim)
    _, h2 = forward_latent(model, tiny_toy[0][:5])
    assert h.tobytes() == h2.tobytes()


def test_checkpoint_roundtrip_and_stage_groups(toy_model_cfg, tiny_toy, tmp_path):
    labels = build_label_space(tiny_toy[0])
    model = init_model(toy_model_cfg, 0)
    pre = ModelCheckpoint.from_model(model, "pretrained", labels, "abc")
    assert pre.groups() == {"backbone", "projector"}
    path = pre.save(tmp_path / "pre.ckpt")
    loaded = ModelCheckpoint.load(path)
    assert loaded.stage == "pretrained"
    assert loaded.label_space == labels
    assert loaded.model_config == toy_model_cfg
    assert loaded.digest() == pre.digest()

    model.attach_classifier(0)
    fin = ModelCheckpoint.from_model(model, "finetuned", labels)
    assert fin.groups() == {"backbone", "projector", "classifier", "arcface"}
    for k, v in pre.state.items():
        assert fin.state[k].shape == v.shape
    again = ModelCheckpoint.load(fin.save(tmp_path / "fin.ckpt"))
    z1 = forward_latent(again.build_model(), tiny_toy[0][:2])[1]
    z2 = forward_latent(model, tiny_toy[0][:2])[1]
    assert np.array_equal(z1, z2)


def test_checkpoint_invariants(toy_model_cfg, tiny_toy, tmp_path):
    labels = build_label_space(tiny_toy[0])
    model = init_model(toy_model_cfg, 0)
    with pytest.raises(ValueError, match="lacks classifier"):
        ModelCheckpoint.from_model(model, "finetuned", labels)
    with pytest.raises(ValueError, match="label space"):
        ModelCheckpoint.from_model(model, "pretrained", build_label_space(tiny_toy[0][:6]))
    (tmp_path / "junk.ckpt").write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        ModelCheckpoint.load(tmp_path / "junk.ckpt")


def test_clip_tensors_shapes(small_feature_cfg, tiny_toy):
    wave, mel = clip_tensors(tiny_toy[0][:3], small_feature_cfg)
    assert wave.shape == (3, 4000)
    assert mel.shape == (3, small_feature_cfg.mel_bins, num_frames(4000, small_feature_cfg))
