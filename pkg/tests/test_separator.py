import numpy as np
import pytest
import torch

from sepcount.separator import (DprnnSeparator, SeparatorConfig,
                                _segment, load_separator, save_separator)
from sepcount.signals import Waveform

TINY = SeparatorConfig(encoder_window=8, encoder_stride=4, latent_dim=8,
                       num_blocks=2, hidden_units=8, chunk_size=8,
                       num_outputs=2, stop_flag=True)


def test_config_validation():
    with pytest.raises(ValueError):
        SeparatorConfig(encoder_window=8, encoder_stride=16)
    with pytest.raises(ValueError):
        SeparatorConfig(num_outputs=0)
    with pytest.raises(ValueError):
        SeparatorConfig(chunk_size=0)


def test_encoder_frame_counts():
    torch.manual_seed(0)
    model = DprnnSeparator(SeparatorConfig())
    assert model.encode(torch.zeros(1, 16)).shape[-1] == 1
    assert model.encode(torch.zeros(1, 32)).shape[-1] == 3
    with pytest.raises(ValueError):
        model.encode(torch.zeros(1, 15))


def test_zero_input_zero_latent_and_streams():
    torch.manual_seed(0)
    model = DprnnSeparator(SeparatorConfig())
    latent = model.encode(torch.zeros(1, 64))
    assert torch.all(latent == 0)  # bias-free encoder
    assert torch.all(model.decode(torch.zeros_like(latent), 64) == 0)


def test_segment_grid():
    x = torch.zeros(1, 100, 4)
    segs, frames = _segment(x, chunk=100, hop=50)
    assert segs.shape == (1, 1, 100, 4)
    assert frames == 100
    segs, _ = _segment(torch.zeros(1, 101, 4), chunk=100, hop=50)
    assert segs.shape[1] == 2  # needs one padded chunk more


def test_forward_shapes_and_flag_presence():
    torch.manual_seed(1)
    model = DprnnSeparator(SeparatorConfig(num_outputs=3, stop_flag=False))
    x = torch.randn(2, 200)
    streams, flag = model(x)
    assert streams.shape == (2, 3, 200)
    assert flag is None

    flagged = DprnnSeparator(TINY)
    streams, flag = flagged(torch.randn(1, 64))
    assert streams.shape == (1, 2, 64)
    assert flag.shape == (1,)
    assert 0.0 < flag[0].item() < 1.0


def test_separate_returns_waveforms():
    torch.manual_seed(2)
    model = DprnnSeparator(SeparatorConfig(num_outputs=2, stop_flag=False))
    wav = Waveform(np.random.default_rng(0).normal(size=300) * 0.1, 8000)
    out = model.separate(wav)
    assert len(out.streams) == 2
    assert all(len(s) == 300 for s in out.streams)
    assert out.stop_flag_prob is None
    assert all(np.all(np.isfinite(s.samples)) for s in out.streams)


def test_forward_deterministic():
    torch.manual_seed(3)
    model = DprnnSeparator(TINY)
    x = torch.randn(1, 96)
    a, fa = model(x)
    b, fb = model(x)
    assert torch.equal(a, b)
    assert torch.equal(fa, fb)


def test_flag_head_pooling_invariances():
    torch.manual_seed(4)
    model = DprnnSeparator(TINY)
    feats = torch.randn(10, TINY.latent_dim)
    dup = torch.cat([feats, feats], dim=0)
    assert abs(model.stop_flag_head(feats).item() -
               model.stop_flag_head(dup).item()) < 1e-6

    const = torch.ones(1, TINY.latent_dim)
    long = const.repeat(100, 1)
    assert model.stop_flag_head(const).item() == \
        pytest.approx(model.stop_flag_head(long).item(), abs=1e-7)

    with torch.no_grad():
        model.flag_linear.weight.fill_(0.0)
        model.flag_linear.bias.fill_(0.0)
    assert model.stop_flag_head(torch.zeros(5, TINY.latent_dim)).item() == \
        pytest.approx(0.5)

    with torch.no_grad():
        model.flag_linear.weight.fill_(1.0)
    low = model.stop_flag_head(torch.zeros(5, TINY.latent_dim)).item()
    high = model.stop_flag_head(torch.ones(5, TINY.latent_dim)).item()
    assert high > low  # sigmoid of a larger pooled mean

    with pytest.raises(ValueError):
        model.stop_flag_head(torch.zeros(0, TINY.latent_dim))

    plain = DprnnSeparator(SeparatorConfig(stop_flag=False))
    with pytest.raises(RuntimeError):
        plain.stop_flag_head(feats)


def test_decode_length_contract():
    torch.manual_seed(5)
    model = DprnnSeparator(SeparatorConfig())
    for t in (64, 70, 100):
        x = torch.randn(1, t)
        streams, _ = model(x)
        assert streams.shape[-1] == t


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(6)
    model = DprnnSeparator(TINY)
    path = tmp_path / "sep.pt"
    save_separator(path, model)
    loaded = load_separator(path)
    assert loaded.config == TINY
    x = torch.randn(1, 80)
    a, _ = model(x)
    b, _ = loaded(x)
    assert torch.equal(a, b)


def test_checkpoint_config_mismatch(tmp_path):
    torch.manual_seed(7)
    model = DprnnSeparator(TINY)
    path = tmp_path / "sep.pt"
    save_separator(path, model)
    with pytest.raises(ValueError, match="config"):
        load_separator(path, expected_config=SeparatorConfig())
    with pytest.raises(FileNotFoundError):
        load_separator(tmp_path / "missing.pt")


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "junk.pt"
    torch.save({"something": 1}, path)
    with pytest.raises(ValueError, match="not a separator checkpoint"):
        load_separator(path)
