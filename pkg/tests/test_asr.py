import math

import numpy as np
import pytest
import torch

from sepcount.asr import (AsrConfig, AsrModel, AsrOutput, Vocabulary,
                          asr_loss, ctc_best_path, ctc_forward_nll,
                          decode_greedy, edit_distance_rate, load_asr,
                          save_asr, stft_features)
from helpers import brute_force_ctc_likelihood
from sepcount.signals import synth_source

SMALL = AsrConfig(stft_window=32, stft_hop=16, num_features=0,
                  conv_channels=2, encoder_hidden=8, decoder_hidden=8,
                  attention_dim=8)


def random_log_posteriors(t: int, a: int, rng) -> torch.Tensor:
    logits = torch.as_tensor(rng.normal(size=(t, a)))
    return torch.log_softmax(logits, dim=-1)


def test_vocabulary_round_trip():
    vocab = Vocabulary()
    ids = vocab.encode("ab c")
    assert vocab.decode(ids) == "ab c"
    assert vocab.blank_id == 0
    with pytest.raises(ValueError):
        vocab.encode("z")


def test_stft_zero_input_constant_floor():
    cfg = SMALL
    feats = stft_features(torch.zeros(128, dtype=torch.float64), cfg)
    assert torch.allclose(feats, torch.full_like(feats, math.log(1e-10)))


def test_stft_frame_count_formula():
    cfg = AsrConfig(stft_window=128, stft_hop=64)
    for t in (128, 200, 500):
        feats = stft_features(torch.zeros(t, dtype=torch.float64), cfg)
        assert feats.shape[0] == (t - 128) // 64 + 1
    with pytest.raises(ValueError):
        stft_features(torch.zeros(100, dtype=torch.float64), cfg)


def test_forward_shapes_and_determinism():
    torch.manual_seed(0)
    model = AsrModel(SMALL)
    w = synth_source("syllabic", token_seq="abc", seed=2)
    feats = stft_features(w, SMALL)
    out = model(feats, reference="abc")
    a = model.vocab.size
    assert out.ctc_log_posteriors.shape[1] == a
    assert out.attention_log_posteriors.shape == (4, a)  # len(ref) + eos
    # rows normalize under exponentiation
    assert torch.allclose(out.ctc_log_posteriors.exp().sum(dim=-1),
                          torch.ones(out.ctc_log_posteriors.shape[0]), atol=1e-5)
    assert torch.allclose(out.attention_log_posteriors.exp().sum(dim=-1),
                          torch.ones(4), atol=1e-5)
    with torch.no_grad():
        g1 = model(feats)
        g2 = model(feats)
    assert g1.hypothesis == g2.hypothesis
    assert torch.equal(g1.attention_log_posteriors, g2.attention_log_posteriors)


def test_forward_rejects_empty_features():
    torch.manual_seed(0)
    model = AsrModel(SMALL)
    with pytest.raises(ValueError):
        model(torch.zeros(0, 17))


def test_ctc_degenerate_single_frame():
    vocab = Vocabulary()
    rng = np.random.default_rng(0)
    lp = random_log_posteriors(1, vocab.size, rng)
    token = vocab.encode("a")
    nll = ctc_forward_nll(lp, token, blank=vocab.blank_id)
    assert float(nll) == pytest.approx(-float(lp[0, token[0]]))


@pytest.mark.parametrize("t,tokens", [(2, "a"), (3, "ab"), (4, "aa"), (5, "aba")])
def test_ctc_matches_brute_force_samples(t, tokens):
    vocab = Vocabulary(tokens="ab", include_space=False)
    rng = np.random.default_rng(hash((t, tokens)) % 2**32)
    lp = random_log_posteriors(t, vocab.size, rng)
    ids = vocab.encode(tokens)
    nll = ctc_forward_nll(lp, ids, blank=vocab.blank_id)
    expected = brute_force_ctc_likelihood(lp.exp().numpy(), ids,
                                          blank=vocab.blank_id)
    assert math.exp(-float(nll)) == pytest.approx(expected, abs=1e-12)


def test_ctc_infeasible_reference_raises():
    vocab = Vocabulary(tokens="ab", include_space=False)
    rng = np.random.default_rng(1)
    lp = random_log_posteriors(2, vocab.size, rng)
    with pytest.raises(ValueError, match="frames"):
        ctc_forward_nll(lp, vocab.encode("aba"), blank=vocab.blank_id)
    with pytest.raises(ValueError, match="frames"):
        ctc_forward_nll(lp, vocab.encode("aa"), blank=vocab.blank_id)  # repeat needs 3
    with pytest.raises(ValueError):
        ctc_forward_nll(lp, [], blank=vocab.blank_id)


def _manual_output(vocab, ctc_nll_target: float, att_nll_target: float):
    """Craft normalized posteriors with exactly known loss terms for ref 'a'."""
    a = vocab.size
    tok = vocab.encode("a")[0]
    # one CTC frame: P(path) = p(tok); set p(tok) = exp(-ctc_nll_target)
    p_tok = math.exp(-ctc_nll_target)
    row = np.full(a, (1.0 - p_tok) / (a - 1))
    row[tok] = p_tok
    ctc = torch.log(torch.as_tensor(row)).unsqueeze(0)
    # two attention steps (token, eos), each with probability exp(-att/2)
    p_step = math.exp(-att_nll_target / 2.0)
    att = np.full((2, a), (1.0 - p_step) / (a - 1))
    att[0, tok] = p_step
    att[1, vocab.eos_id] = p_step
    att[0, vocab.eos_id] = (1.0 - p_step) / (a - 1)
    att[1, tok] = (1.0 - p_step) / (a - 1)
    return AsrOutput(ctc, torch.log(torch.as_tensor(att)), "a")


def test_asr_loss_lambda_mixing():
    vocab = Vocabulary()
    out = _manual_output(vocab, ctc_nll_target=1.0, att_nll_target=0.5)
    loss = asr_loss(out, "a", lam=0.2, vocab=vocab)
    assert float(loss) == pytest.approx(0.2 * 1.0 + 0.8 * 0.5, abs=1e-9)
    pure_ctc = asr_loss(out, "a", lam=1.0, vocab=vocab)
    assert float(pure_ctc) == pytest.approx(1.0, abs=1e-9)


def test_asr_loss_affine_in_lambda():
    vocab = Vocabulary()
    out = _manual_output(vocab, ctc_nll_target=2.0, att_nll_target=0.8)
    l0 = float(asr_loss(out, "a", lam=0.0, vocab=vocab))
    l1 = float(asr_loss(out, "a", lam=1.0, vocab=vocab))
    for lam in (0.2, 0.5, 0.9):
        mixed = float(asr_loss(out, "a", lam=lam, vocab=vocab))
        assert mixed == pytest.approx(lam * l1 + (1 - lam) * l0, abs=1e-9)


def test_asr_loss_validation():
    vocab = Vocabulary()
    out = _manual_output(vocab, 1.0, 0.5)
    with pytest.raises(ValueError):
        asr_loss(out, "", lam=0.2, vocab=vocab)
    with pytest.raises(ValueError):
        asr_loss(out, "a", lam=1.5, vocab=vocab)
    with pytest.raises(ValueError):
        asr_loss(out, "ab", lam=0.2, vocab=vocab)  # steps mismatch


def _one_hot_attention(vocab, text):
    a = vocab.size
    rows = []
    for ch in text:
        row = np.full(a, 1e-9)
        row[vocab.encode(ch)[0]] = 1.0
        rows.append(row)
    eos = np.full(a, 1e-9)
    eos[vocab.eos_id] = 1.0
    rows.append(eos)
    return torch.log(torch.as_tensor(np.stack(rows)))


def test_decode_greedy_reads_until_eos():
    vocab = Vocabulary()
    att = _one_hot_attention(vocab, "ab")
    out = AsrOutput(att[:1], att, "")
    assert decode_greedy(out, vocab) == "ab"
    empty = AsrOutput(att[:1], _one_hot_attention(vocab, ""), "")
    assert decode_greedy(empty, vocab) == ""


def test_ctc_best_path_collapse():
    vocab = Vocabulary()
    a_id = vocab.encode("a")[0]
    b_id = vocab.encode("b")[0]
    frames = [a_id, a_id, vocab.blank_id, b_id]
    a = vocab.size
    rows = np.full((4, a), 1e-9)
    for i, tok in enumerate(frames):
        rows[i, tok] = 1.0
    out = AsrOutput(torch.log(torch.as_tensor(rows)),
                    torch.zeros(1, a), "")
    assert ctc_best_path(out, vocab) == "ab"


def test_edit_distance_rates():
    assert edit_distance_rate("abc", "abc") == 0.0
    assert edit_distance_rate("", "abcd") == 1.0
    assert edit_distance_rate("axc", "abc") == pytest.approx(1 / 3)
    assert edit_distance_rate("a b", "a c", unit="word") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        edit_distance_rate("a", "", unit="char")
    with pytest.raises(ValueError):
        edit_distance_rate("a", "b", unit="phone")


def test_greedy_decode_cap():
    torch.manual_seed(3)
    model = AsrModel(SMALL)
    w = synth_source("syllabic", token_seq="ab", seed=0)
    feats = stft_features(w, SMALL)
    with torch.no_grad():
        out = model(feats, max_steps=4)
    assert out.attention_log_posteriors.shape[0] <= 4


def test_asr_checkpoint_round_trip(tmp_path):
    torch.manual_seed(4)
    model = AsrModel(SMALL)
    path = tmp_path / "asr.pt"
    save_asr(path, model)
    loaded = load_asr(path)
    assert loaded.config == SMALL
    w = synth_source("syllabic", token_seq="ab", seed=5)
    feats = stft_features(w, SMALL)
    with torch.no_grad():
        a = model(feats, reference="ab")
        b = loaded(feats, reference="ab")
    assert torch.equal(a.ctc_log_posteriors, b.ctc_log_posteriors)
    with pytest.raises(ValueError):
        load_asr(path, expected_config=AsrConfig())
