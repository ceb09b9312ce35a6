import numpy as np
import pytest
import torch

from dgcvc.conversion import Generator, convert, segment

FLOOR = np.log(1e-5)


def small_generator(seed=0):
    torch.manual_seed(seed)
    return Generator(enc_channels=16, dec_pre_lstm=16, dec_channels=16, dec_lstm=24,
                     dec_lstm_layers=2, postnet_channels=16)


@pytest.fixture
def gen():
    return small_generator().eval()


@pytest.fixture
def batch():
    g = torch.Generator().manual_seed(0)
    return torch.randn(2, 160, 80, generator=g), torch.randn(2, 256, generator=g)


def test_code_shape(gen, batch):
    x, e = batch
    codes = gen.encode(x, e)
    assert codes.shape == (2, 5, 64)
    fwd, bwd = codes[..., :32], codes[..., 32:]
    assert torch.stack([fwd, bwd], dim=1).shape == (2, 2, 5, 32)


def test_code_sampling_positions(gen, batch):
    x, e = batch
    enc = gen.encoder
    h = torch.cat([x, e[:, None].expand(-1, 160, -1)], -1).transpose(1, 2)
    for conv in enc.convs:
        h = torch.relu(conv(h))
    out, _ = enc.lstm(h.transpose(1, 2))
    codes = gen.encode(x, e)
    assert torch.equal(codes[:, :, :32], out[:, [31, 63, 95, 127, 159], :32])
    assert torch.equal(codes[:, :, 32:], out[:, [0, 32, 64, 96, 128], 32:])


def test_output_shapes(gen, batch):
    x, e = batch
    x1, x2, _ = gen(x, e, e)
    assert x1.shape == x2.shape == x.shape


def test_wrong_length_rejected(gen):
    with pytest.raises(ValueError, match="multiple"):
        gen.encode(torch.randn(1, 100, 80), torch.randn(1, 256))


def test_bad_codes_rejected(gen):
    with pytest.raises(ValueError):
        gen.decode(torch.randn(1, 5, 10), torch.randn(1, 256))


def test_zero_postnet_is_identity(gen, batch):
    with torch.no_grad():
        for conv in gen.postnet.convs:
            for p in conv.parameters():
                p.zero_()
    x1, x2, _ = gen(*batch)
    assert torch.equal(x1, x2)


def test_residual_is_postnet_output(gen, batch):
    x1, x2, _ = gen(*batch)
    assert torch.equal(x2, x1 + gen.postnet(x1))


def test_gradient_reaches_encoder(batch):
    g = small_generator().train()
    x, e = batch
    _, x2, _ = g(x, e, e)
    (x - x2).pow(2).mean().backward()
    assert g.encoder.convs[0][0].weight.grad.norm() > 0
    assert g.encoder.lstm.weight_hh_l0.grad.norm() > 0


def test_deterministic(gen, batch):
    assert torch.equal(gen.encode(*batch), gen.encode(*batch))


def test_embedding_changes_codes(gen, batch):
    x, e = batch
    assert not torch.allclose(gen.encode(x, e), gen.encode(x, e + 1.0))


def test_segment_pads_with_floor():
    mel = np.random.default_rng(0).normal(size=(170, 80)).astype(np.float32)
    win = segment(mel)
    assert win.shape == (2, 160, 80)
    assert np.array_equal(win[0], mel[:160])
    assert np.array_equal(win[1, :10], mel[160:])
    assert np.all(win[1, 10:] == np.float32(FLOOR))


def test_convert_lengths(gen):
    mel = np.random.default_rng(0).normal(size=(170, 80)).astype(np.float32)
    e = np.zeros(256, np.float32)
    assert convert(gen, mel, e, e).shape == (320, 80)
    out = convert(gen, mel, e, e, trim=True)
    assert out.shape == (170, 80)
    assert np.array_equal(out, convert(gen, mel, e, e)[:170])
