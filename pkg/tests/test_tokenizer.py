import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uvar.autodiff import Tensor, gradcheck
from uvar.tokenizer import (HI_SCHEDULE, LO_SCHEDULE, ScaleSchedule, ScaleTokens, TokenizerConfig, TokenizerModel,
                            calibrate_gains, decode_tokens, encode_images, quantize_scales, quantize_unit, reconstruct,
                            tokenizer_loss)

finite = st.floats(-10, 10, allow_nan=False)


def test_quantize_unit_zero_ties_to_one():
    bits, q = quantize_unit(np.zeros(4))
    assert bits.tolist() == [1, 1, 1, 1]
    assert q.tolist() == [0.5, 0.5, 0.5, 0.5]


def test_quantize_unit_worked_example():
    bits, q = quantize_unit(np.array([0.5, -0.2, 0.1, -0.9]))
    assert bits.tolist() == [1, 0, 1, 0]
    assert q.tolist() == [0.5, -0.5, 0.5, -0.5]


@given(arrays(np.float64, st.integers(1, 16), elements=finite.filter(lambda x: x != 0)))
def test_quantize_unit_odd_symmetry(v):
    b1, q1 = quantize_unit(v)
    b2, q2 = quantize_unit(-v)
    assert np.array_equal(b1, 1 - b2)
    assert np.array_equal(q1, -q2)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 16)), elements=finite))
def test_quantized_vectors_have_unit_norm(r):
    _, q = quantize_unit(r)
    assert np.max(np.abs(np.linalg.norm(q, axis=-1) - 1.0)) <= 1e-12


def test_quantize_unit_rejects_non_finite():
    with pytest.raises(ValueError):
        quantize_unit(np.array([0.1, np.inf]))


def test_zero_feature_map():
    tokens, acc = quantize_scales(np.zeros((8, 8, 8)), LO_SCHEDULE)
    assert all(b.all() for b in tokens.bits)
    assert np.all(tokens.gains == 0)
    assert np.all(acc == 0)


def test_single_scale_gain_example():
    sched = ScaleSchedule(((1, 1),), bits=4)
    f = np.array([0.5, -0.2, 0.1, -0.9]).reshape(1, 1, 4)
    tokens, acc = quantize_scales(f, sched)
    assert tokens.bits[0].ravel().tolist() == [1, 0, 1, 0]
    assert tokens.gains[0] == pytest.approx(0.85, abs=1e-15)
    assert np.allclose(acc.ravel(), 0.85 * np.array([0.5, -0.5, 0.5, -0.5]), atol=1e-15)


def _acc_before_last(f, sched):
    from uvar.tokenizer import _resize, bits_to_unit

    tokens, _ = quantize_scales(f, sched)
    out = np.zeros_like(f)
    for b, g in zip(tokens.bits[:-1], tokens.gains[:-1]):
        out = out + _resize(g * bits_to_unit(b), sched.base)
    return out


def test_residual_never_grows_at_identity_scale():
    sched = ScaleSchedule(((1, 1), (2, 2), (4, 4)), bits=8)
    for seed in range(100):
        f = np.random.default_rng(seed).standard_normal((4, 4, 8))
        _, acc = quantize_scales(f, sched)
        assert np.linalg.norm(f - acc) <= np.linalg.norm(f - _acc_before_last(f, sched))


def test_reconstruct_round_trip_is_bit_exact():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((5, 8, 8, 8))
    tokens, acc = quantize_scales(f, LO_SCHEDULE)
    assert np.array_equal(reconstruct(tokens, LO_SCHEDULE), acc)
    assert np.array_equal(reconstruct(tokens.select(2), LO_SCHEDULE), acc[2])


def test_reconstruct_zero_gains_and_missing_scale():
    tokens, _ = quantize_scales(np.random.default_rng(0).standard_normal((8, 8, 8)), LO_SCHEDULE)
    assert np.all(reconstruct(tokens, LO_SCHEDULE, np.zeros(4)) == 0)
    with pytest.raises(ValueError):
        reconstruct(ScaleTokens(tokens.bits[:3], tokens.gains[:3]), LO_SCHEDULE)


def test_two_scale_reconstruction_against_direct_sum():
    sched = ScaleSchedule(((1, 1), (2, 2)), bits=3)
    bits = [np.array([[[1, 0, 1]]], np.uint8), np.array([[[1, 1, 0], [0, 0, 0]], [[1, 0, 0], [0, 1, 1]]], np.uint8)]
    gains = np.array([0.7, 0.2])
    s = 1 / np.sqrt(3)
    expected = np.empty((2, 2, 3))
    for i in range(2):
        for j in range(2):
            # a 1x1 grid upsamples to a constant
            expected[i, j] = 0.7 * s * (2 * bits[0][0, 0] - 1.0) + 0.2 * s * (2 * bits[1][i, j] - 1.0)
    assert np.allclose(reconstruct(ScaleTokens(bits, gains), sched), expected, atol=1e-15)


def test_quantize_rejects_wrong_shape():
    with pytest.raises(ValueError):
        quantize_scales(np.zeros((4, 4, 8)), LO_SCHEDULE)
    with pytest.raises(ValueError):
        quantize_scales(np.zeros((8, 8, 4)), LO_SCHEDULE)


def test_quantize_is_deterministic():
    f = np.random.default_rng(9).standard_normal((16, 16, 8))
    t1, a1 = quantize_scales(f, HI_SCHEDULE)
    t2, a2 = quantize_scales(f.copy(), HI_SCHEDULE)
    assert all(np.array_equal(x, y) for x, y in zip(t1.bits, t2.bits))
    assert np.array_equal(t1.gains, t2.gains) and np.array_equal(a1, a2)


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScaleSchedule(((2, 2), (1, 1)))
    with pytest.raises(ValueError):
        ScaleSchedule(((0, 1),))
    with pytest.raises(ValueError):
        LO_SCHEDULE.extended((4, 4))
    assert HI_SCHEDULE.scales[-1] == (16, 16) and LO_SCHEDULE.is_prefix_of(HI_SCHEDULE)
    assert LO_SCHEDULE.n_tokens == 85 and HI_SCHEDULE.n_tokens == 341


def _tiny_tokenizer(dtype=np.float64):
    return TokenizerModel(TokenizerConfig(bits=4, width1=2, width2=3), seed=1, dtype=dtype)


def test_commit_weight_zero_gives_pure_reconstruction():
    tok = _tiny_tokenizer()
    imgs = np.random.default_rng(0).random((2, 8, 8, 3))
    sched = ScaleSchedule(((1, 1), (2, 2)), bits=4)
    total, parts = tokenizer_loss(tok, imgs, sched, commit_weight=0.0)
    assert total.item() == parts.recon
    total, parts = tokenizer_loss(tok, imgs, sched, commit_weight=0.25)
    assert total.item() == pytest.approx(parts.recon + 0.25 * parts.commit, rel=1e-12)


def test_commit_loss_vanishes_when_features_are_codes(monkeypatch):
    tok = _tiny_tokenizer()
    sched = ScaleSchedule(((2, 2),), bits=4)
    code = np.where(np.random.default_rng(2).random((1, 2, 2, 4)) < 0.5, -0.5, 0.5)
    monkeypatch.setattr(tok, "encode", lambda images: Tensor(0.75 * code))
    _, parts = tokenizer_loss(tok, np.full((1, 8, 8, 3), 0.5), sched)
    assert parts.commit < 1e-30


def test_tokenizer_rejects_out_of_range_images():
    with pytest.raises(ValueError):
        tokenizer_loss(_tiny_tokenizer(), np.full((1, 8, 8, 3), 1.5), ScaleSchedule(((1, 1), (2, 2)), bits=4))


def test_encoder_decoder_gradcheck():
    tok = _tiny_tokenizer()
    params = dict(tok.named_parameters())
    names = sorted(params)
    x = np.random.default_rng(4).random((1, 8, 8, 3))

    def f(*ws):
        for n, w in zip(names, ws):
            setattr_path(tok, n, w)
        z = tok.encode(Tensor(x))
        y = tok.decode(z)
        return (y * y).mean() + (z * z * z).sum()

    rep = gradcheck(f, [params[n].data.copy() for n in names], rel_tol=1e-4)
    assert rep.passed, rep


def setattr_path(obj, dotted, value):
    *path, last = dotted.split(".")
    for p in path:
        obj = getattr(obj, p)
    setattr(obj, last, value)


def test_encode_decode_shapes_and_calibration():
    tok = TokenizerModel(TokenizerConfig(), seed=0, dtype=np.float32)
    imgs = np.random.default_rng(0).random((3, 32, 32, 3))
    toks = encode_images(tok, imgs, LO_SCHEDULE)
    assert [b.shape for b in toks.bits] == [(3, 1, 1, 8), (3, 2, 2, 8), (3, 4, 4, 8), (3, 8, 8, 8)]
    out = decode_tokens(tok, toks, LO_SCHEDULE)
    assert out.shape == (3, 32, 32, 3) and out.min() >= 0 and out.max() <= 1
    g = calibrate_gains(tok, imgs, LO_SCHEDULE)
    assert g.shape == (4,) and np.all(g >= 0)
    big = encode_images(tok, np.random.default_rng(1).random((1, 64, 64, 3)), HI_SCHEDULE)
    assert big.bits[-1].shape == (1, 16, 16, 8)
