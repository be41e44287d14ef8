import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicelab import fileio
from dicelab.corpus import HOP, generate_corpus
from dicelab.errors import ConfigError, DimensionError, LengthError
from dicelab.mfcc import mfcc
from dicelab.model import (
    BASE,
    Encoder,
    ModelConfig,
    extract_teacher_features,
    forward_batch,
    init_params,
    make_batch,
    narrow,
    param_shapes,
    sample_mask,
    shallow,
    sinusoidal_positions,
    student_config,
)

SMALL = ModelConfig(L=2, D=16, H=2, F=32, conv_channels=(4, 4, 4, 4, 4), K=8)


def test_conv_frontend_frame_count():
    enc = Encoder(SMALL)
    assert enc.conv_frontend(np.random.default_rng(0).standard_normal(3200)).shape == (10, 16)


def test_conv_frontend_zero_wave_is_finite():
    assert np.isfinite(Encoder(SMALL).conv_frontend(np.zeros(3200))).all()


def test_conv_frontend_too_short():
    with pytest.raises(LengthError):
        Encoder(SMALL).conv_frontend(np.zeros(HOP - 1))


def test_conv_frames_match_mfcc_frames():
    _, waves = generate_corpus(100, 4, 4, seed=3, min_seconds=0.5, max_seconds=1.2)
    enc = Encoder(SMALL)
    for w in waves:
        assert enc.conv_frontend(w).shape[0] == mfcc(w).shape[0]


def test_mask_forced_span_when_prob_zero():
    cfg = ModelConfig(mask_start_prob=0.0)
    for seed in range(20):
        m = sample_mask(50, cfg, seed)
        assert len(m.spans) == 1
        s, n = m.spans[0]
        assert n == min(10, 50 - s) and m.count == n


def test_mask_saturates():
    m = sample_mask(10, ModelConfig(mask_start_prob=1.0, mask_span=10), 0)
    assert m.masked.all()


def test_mask_coverage_rate():
    draws = np.stack([sample_mask(1000, BASE, [9, i]).masked for i in range(10_000)])
    assert abs(draws[:, BASE.mask_span :].mean() - (1 - 0.92**10)) < 0.01


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 200), seed=st.integers(0, 2**32 - 1), prob=st.floats(0.0, 1.0), span=st.integers(1, 15))
def test_mask_is_union_of_spans(T, seed, prob, span):
    cfg = ModelConfig(mask_start_prob=prob, mask_span=span)
    m = sample_mask(T, cfg, seed)
    union = np.zeros(T, dtype=bool)
    for s, n in m.spans:
        assert 0 <= s < T
        assert n == min(span, T - s)
        union[s : s + n] = True
    np.testing.assert_array_equal(m.masked, union)
    assert m.count >= 1
    assert m.masked.tobytes() == sample_mask(T, cfg, seed).masked.tobytes()


def test_zero_layer_model_is_affine_in_masked_embedding():
    cfg = ModelConfig(L=0, D=16, H=2, F=32, conv_channels=(4,) * 5, K=8)
    enc = Encoder(cfg, seed=2)
    wave = np.random.default_rng(1).standard_normal(8 * HOP)
    mask = np.zeros(8, dtype=bool)
    mask[2:5] = True
    logits, feats = enc.forward(wave, mask)
    assert len(feats) == 1
    emb = enc.conv_frontend(wave)
    emb[mask] = enc.params["mask_emb"]
    np.testing.assert_allclose(feats[0], emb, atol=1e-6)
    x = emb + sinusoidal_positions(8, 16)
    np.testing.assert_allclose(logits, x @ enc.params["head.w"] + enc.params["head.b"], atol=1e-5)


def test_forward_is_deterministic():
    enc = Encoder(SMALL, seed=4)
    wave = np.random.default_rng(2).standard_normal(6 * HOP).astype(np.float32)
    m = sample_mask(6, SMALL, 3)
    a, _ = enc.forward(wave, m)
    b, _ = enc.forward(wave, m)
    assert a.tobytes() == b.tobytes()


def test_masking_a_frame_changes_its_logits():
    enc = Encoder(SMALL, seed=4)
    wave = np.random.default_rng(2).standard_normal(6 * HOP).astype(np.float32)
    clean, _ = enc.forward(wave)
    mask = np.zeros(6, dtype=bool)
    mask[3] = True
    masked, _ = enc.forward(wave, mask)
    assert not np.allclose(clean[3], masked[3])


def test_fully_masked_input_ignores_content():
    enc = Encoder(SMALL, seed=4)
    rng = np.random.default_rng(5)
    full = np.ones(6, dtype=bool)
    a, _ = enc.forward(rng.standard_normal(6 * HOP), full)
    b, _ = enc.forward(rng.standard_normal(6 * HOP), full)
    np.testing.assert_array_equal(a, b)


def test_clean_forward_never_reads_mask_embedding():
    params = init_params(SMALL, 0)
    params["mask_emb"] = np.full_like(params["mask_emb"], np.nan)
    logits, feats = Encoder(SMALL, params).forward(np.random.default_rng(0).standard_normal(5 * HOP))
    assert np.isfinite(logits).all() and all(np.isfinite(f).all() for f in feats)


def test_layer_features_shape():
    feats = Encoder(SMALL).layer_features(np.zeros(7 * HOP))
    assert feats.shape == (SMALL.L + 1, 7, SMALL.D)


def test_padding_does_not_leak():
    enc = Encoder(SMALL, seed=1)
    rng = np.random.default_rng(8)
    short, long = rng.standard_normal(4 * HOP), rng.standard_normal(9 * HOP)
    ms, ml = np.array([0, 1, 1, 0], bool), np.zeros(9, bool)
    logits, _ = forward_batch(enc.tensors(), SMALL, make_batch([short, long], [ms, ml]))
    alone, _ = enc.forward(short, ms)
    np.testing.assert_allclose(logits.data[0, :4], alone, atol=1e-5)


def test_mask_length_mismatch():
    with pytest.raises(DimensionError):
        Encoder(SMALL).forward(np.zeros(5 * HOP), np.zeros(4, bool))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(D=30, H=4)
    with pytest.raises(ConfigError):
        ModelConfig(conv_strides=(5, 4, 4, 2, 3))
    with pytest.raises(ConfigError):
        ModelConfig(K=1)


def test_student_variants_isolate_one_factor():
    n2 = narrow(BASE, 2)
    assert (n2.L, n2.D, n2.F) == (BASE.L, 32, 128)
    n4 = narrow(BASE, 4)
    assert (n4.L, n4.D, n4.F) == (BASE.L, 16, 64)
    s = shallow(BASE, 2)
    assert (s.L, s.D, s.F) == (2, BASE.D, BASE.F)
    with pytest.raises(ConfigError):
        student_config(BASE, L=2, D=32)
    with pytest.raises(ConfigError):
        shallow(BASE, BASE.L)


def test_config_roundtrip():
    assert ModelConfig.from_dict(narrow(BASE, 2, K=32).to_dict()) == narrow(BASE, 2, K=32)


def test_encoder_rejects_wrong_shapes():
    params = init_params(SMALL, 0)
    params["head.w"] = np.zeros((3, 3), np.float32)
    with pytest.raises(DimensionError):
        Encoder(SMALL, params)
    params.pop("head.w")
    with pytest.raises(DimensionError):
        Encoder(SMALL, params)


def test_init_is_seeded():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    assert set(a) == set(param_shapes(SMALL))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)
    assert all(v.dtype == np.float32 for v in a.values())


def test_teacher_features(tmp_path, small_corpus):
    _, waves = small_corpus
    enc = Encoder(SMALL, seed=3)
    emb = extract_teacher_features(enc, waves[:5], 0)
    for e, w in zip(emb, waves):
        np.testing.assert_allclose(e, enc.conv_frontend(w), atol=1e-6)
        assert e.shape[0] == w.shape[0] // HOP
    extract_teacher_features(enc, waves[:5], 2, out_path=tmp_path / "a.bin")
    extract_teacher_features(enc, waves[:5], 2, out_path=tmp_path / "b.bin", threads=3)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    ids, feats = fileio.read_features(tmp_path / "a.bin")
    assert ids == list(range(5)) and [f.shape for f in feats] == [(w.shape[0] // HOP, 16) for w in waves[:5]]
    with pytest.raises(ConfigError):
        extract_teacher_features(enc, waves[:1], 3)


def test_forward_grad_check_on_hard_loss():
    from toy import model_grad_error

    assert model_grad_error("hard", seed=3) < 1e-4

