import numpy as np
import pytest

from wsgic import numerics as nx
from wsgic.config import DecoderConfig, EncoderConfig, ModelConfig
from wsgic.decoder import GroundedDecoder, VisualContext
from wsgic.errors import ShapeMismatchError, UnknownTokenError
from wsgic.model import GroundedCaptioner
from wsgic.numerics import Tensor
from wsgic.numerics.gradcheck import numerical_grad
from wsgic.training import Batch, forward_losses

N = 9  # 3 x 3 grid
D = 8


def make_decoder(heads=2, use_rgm=True, vocab=7, seed=0):
    return GroundedDecoder(DecoderConfig(D, vocab, heads, 6, 16), N, np.random.default_rng(seed), use_rgm=use_rgm)


def random_V(seed=1, B=2, n_special=2):
    return Tensor(np.random.default_rng(seed).normal(size=(B, n_special + N, D)))


@pytest.fixture(autouse=True)
def f64():
    with nx.precision(np.float64):
        yield


def zero_state(dec, ctx):
    return dec.initial_state(ctx)


# ------------------------------------------------------------------ rgm_step
def test_constant_logits_give_uniform_attention():
    dec = make_decoder(heads=2)
    dec.query.weight.data[...] = 0.0
    ctx = dec.prepare(random_V(), 2)
    h = Tensor(np.random.default_rng(2).normal(size=(2, D)))
    attn = dec.rgm_step(h, Tensor(np.zeros((2, N))), ctx)
    np.testing.assert_allclose(attn.s_full.data, 1.0 / (N + 2), rtol=1e-12)
    np.testing.assert_allclose(attn.s_star_sum.data.sum(axis=-1), 2 * N / (N + 2), rtol=1e-12)


def test_one_hot_key_with_gap_20_selects_patch():
    dec = make_decoder(heads=1, use_rgm=False)
    dec.query.weight.data = np.eye(D)
    j = 4
    keys = np.zeros((1, 1, D, N + 2))
    keys[0, 0, 0, 2 + j] = 1.0
    V = random_V(B=1)
    ctx = VisualContext(V, nx.mean_pool(V, axis=1), Tensor(keys), Tensor(np.zeros((1, 1, N + 2, D))), 2)
    h = np.zeros((1, D))
    h[0, 0] = 20.0 * np.sqrt(D)  # after 1/sqrt(d_h) the selected logit is exactly 20
    attn = dec.rgm_step(Tensor(h), Tensor(np.zeros((1, N))), ctx)
    s = attn.s_star.data[0, 0]
    expected = np.exp(20.0) / (np.exp(20.0) + N + 1)
    assert s[j] > 0.99
    np.testing.assert_allclose(s[j], expected, rtol=1e-12)
    assert np.argmax(s) == j


def test_split_drops_exactly_the_special_rows():
    dec = make_decoder(heads=2)
    dec.query.weight.data = np.eye(D)
    # marker: special rows get big distinct scores, patch rows a ramp
    keys = np.zeros((1, 2, D // 2, N + 2))
    keys[0, :, 0, 0] = 3.0
    keys[0, :, 0, 1] = 2.0
    keys[0, :, 0, 2:] = np.linspace(-1, 1, N)
    V = random_V(B=1)
    ctx = VisualContext(V, nx.mean_pool(V, axis=1), Tensor(keys), Tensor(np.zeros((1, 2, N + 2, D // 2))), 2)
    h = np.zeros((1, D))
    h[0, 0] = h[0, D // 2] = 1.0
    attn = dec.rgm_step(Tensor(h), Tensor(np.zeros((1, N))), ctx)
    full, star = attn.s_full.data, attn.s_star.data
    assert star.shape == (1, 2, N)
    np.testing.assert_array_equal(star, full[:, :, 2:])
    np.testing.assert_array_equal(attn.s_star_sum.data, star.sum(axis=1))
    # no renormalisation: the patch mass is what remains after REL and CLS
    np.testing.assert_allclose(star.sum(-1), 1.0 - full[:, :, 0] - full[:, :, 1], rtol=1e-12)
    assert (full[0, :, 0] > full[0, :, 1]).all() and (full[0, :, 1] > full[0, :, 2:].max(axis=-1)).all()


def test_gm_is_invariant_to_previous_attention():
    dec = make_decoder(use_rgm=False)
    ctx = dec.prepare(random_V(), 2)
    h = Tensor(np.random.default_rng(3).normal(size=(2, D)))
    a = dec.rgm_step(h, Tensor(np.zeros((2, N))), ctx).s_full.data
    b = dec.rgm_step(h, Tensor(1e-2 * np.random.default_rng(4).random((2, N))), ctx).s_full.data
    np.testing.assert_array_equal(a, b)


def test_rgm_with_zero_f_weights_is_invariant():
    dec = make_decoder(use_rgm=True)
    dec.recur.weight.data[...] = 0.0
    ctx = dec.prepare(random_V(), 2)
    h = Tensor(np.random.default_rng(3).normal(size=(2, D)))
    a = dec.rgm_step(h, Tensor(np.zeros((2, N))), ctx).s_full.data
    b = dec.rgm_step(h, Tensor(1e-2 * np.random.default_rng(4).random((2, N))), ctx).s_full.data
    np.testing.assert_array_equal(a, b)


def test_rgm_is_sensitive_to_previous_attention():
    dec = make_decoder(use_rgm=True)
    ctx = dec.prepare(random_V(), 2)
    h = Tensor(np.random.default_rng(3).normal(size=(2, D)))
    a = dec.rgm_step(h, Tensor(np.zeros((2, N))), ctx).s_full.data
    b = dec.rgm_step(h, Tensor(np.random.default_rng(4).random((2, N))), ctx).s_full.data
    assert np.abs(a - b).max() > 1e-6


def test_rgm_shape_mismatch():
    dec = make_decoder()
    ctx = dec.prepare(random_V(), 2)
    with pytest.raises(ShapeMismatchError):
        dec.rgm_step(Tensor(np.zeros((2, D))), Tensor(np.zeros((2, N + 1))), ctx)
    with pytest.raises(ShapeMismatchError):
        dec.prepare(random_V(n_special=1), 2)


# ------------------------------------------------------------------ language_step
def test_language_step_shapes():
    dec = make_decoder()
    ctx = dec.prepare(random_V(), 2)
    out, state = dec.language_step([1, 4], zero_state(dec, ctx), ctx)
    assert out.logits.shape == (2, 7) and out.c.shape == (2, D)
    assert out.attn.s_star_sum.shape == (2, N) and out.attn.s_full.shape == (2, 2, N + 2)
    assert state.h.shape == (2, D) and state.s_star_sum_prev is out.attn.s_star_sum


def test_uniform_attention_context_is_projected_mean():
    dec = make_decoder(heads=2)
    dec.query.weight.data[...] = 0.0
    V = random_V()
    ctx = dec.prepare(V, 2)
    attn = dec.rgm_step(Tensor(np.ones((2, D))), Tensor(np.zeros((2, N))), ctx)
    c_g = dec.attend(attn, ctx).data
    v_mean = V.data.mean(axis=1)
    expected = (v_mean @ dec.value.weight.data + dec.value.bias.data) @ dec.attn_out.weight.data + dec.attn_out.bias.data
    np.testing.assert_allclose(c_g, expected, rtol=1e-10, atol=1e-12)


def test_initial_state_is_zero():
    dec = make_decoder()
    ctx = dec.prepare(random_V(), 2)
    st = dec.initial_state(ctx)
    for t in (st.h, st.cell, st.c_prev, st.s_star_sum_prev):
        assert not t.data.any()


@pytest.mark.parametrize("bad", [-1, 7, 100])
def test_unknown_token(bad):
    dec = make_decoder()
    ctx = dec.prepare(random_V(), 2)
    with pytest.raises(UnknownTokenError):
        dec.language_step([1, bad], zero_state(dec, ctx), ctx)


def test_teacher_forcing_step_count():
    dec = make_decoder()
    ctx = dec.prepare(random_V(), 2)
    ids = np.random.default_rng(0).integers(0, 7, size=(2, 5))
    outs = dec.teacher_forced(ctx, ids)
    assert len(outs) == 5 and all(o.attn.s_star_sum.shape == (2, N) for o in outs)


def test_softmax_normalisation_over_random_decodes():
    worst = 0.0
    for seed in range(100):
        dec = make_decoder(seed=seed % 5)
        ctx = dec.prepare(random_V(seed=seed, B=1), 2)
        state = zero_state(dec, ctx)
        token = [1]
        for _ in range(4):
            out, state = dec.language_step(token, state, ctx)
            worst = max(worst, np.abs(out.attn.s_full.data.sum(-1) - 1.0).max())
            token = np.argmax(out.logits.data, axis=-1)
    assert worst < 1e-6


# ------------------------------------------------------------------ greedy decoding
def test_greedy_is_deterministic():
    dec = make_decoder()
    ctx = dec.prepare(random_V(), 2)
    a = dec.greedy_decode(ctx, 1, 2)
    b = dec.greedy_decode(ctx, 1, 2)
    for ra, rb in zip(a, b):
        assert ra.tokens == rb.tokens and ra.truncated == rb.truncated
        for x, y in zip(ra.s_star_sums, rb.s_star_sums):
            np.testing.assert_array_equal(x, y)


def test_greedy_matches_teacher_forced_argmax():
    for seed in range(5):
        dec = make_decoder(seed=seed)
        ctx = dec.prepare(random_V(seed=seed + 10, B=1), 2)
        res = dec.greedy_decode(ctx, 1, 2, max_len=6)[0]
        prefix = np.array([[1] + res.tokens])
        outs = dec.teacher_forced(ctx, prefix)
        for t, tok in enumerate(res.tokens):
            assert int(np.argmax(outs[t].logits.data[0])) == tok
            np.testing.assert_allclose(outs[t].attn.s_star_sum.data[0], res.s_star_sums[t], rtol=1e-10)


def test_eos_at_first_step_gives_empty_caption():
    dec = make_decoder()
    dec.out.weight.data[...] = 0.0
    dec.out.bias.data[...] = 0.0
    dec.out.bias.data[2] = 10.0
    ctx = dec.prepare(random_V(), 2)
    for r in dec.greedy_decode(ctx, 1, 2):
        assert r.tokens == [] and r.s_star_sums == [] and not r.truncated


def test_ties_go_to_smallest_id_and_truncation_is_flagged():
    dec = make_decoder()
    dec.out.weight.data[...] = 0.0
    dec.out.bias.data[...] = 0.0
    dec.out.bias.data[[4, 5]] = 1.0
    ctx = dec.prepare(random_V(), 2)
    for r in dec.greedy_decode(ctx, 1, 2, max_len=3):
        assert r.tokens == [4, 4, 4] and r.truncated and len(r.s_star_sums) == 3


# ------------------------------------------------------------------ end-to-end gradient
def tiny_model(use_rgm=True):
    enc = EncoderConfig(8, 8, 4, 8, 1, 1, 2, 8, 3)
    return GroundedCaptioner(ModelConfig(enc, DecoderConfig(8, 6, 2, 4, 8), use_rgm=use_rgm, seed=3))


def test_two_step_total_loss_gradcheck():
    model = tiny_model()
    rng = np.random.default_rng(0)
    batch = Batch(
        images=rng.random((2, 8, 8, 3)),
        inputs=np.array([[1, 4], [1, 5]]),
        targets=np.array([[4, 2], [5, 0]]),
        relations=np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
    )

    def loss():
        xe, mlc = forward_losses(model, batch)
        return xe + mlc

    model.zero_grad()
    loss().backward()

    # Oracle: the relation branch sees Z_patch as a constant, so finite differences
    # run with that branch fed the unperturbed backbone output.
    with nx.no_grad():
        frozen = model.encoder(batch.images).z_patch.data.copy()
    original = model.encoder.relation_encode
    model.encoder.relation_encode = lambda z: original(Tensor(frozen))
    try:
        pick = np.random.default_rng(1)
        worst = 0.0
        for name, p in model.named_parameters():
            flat = p.data.reshape(-1)
            idx = pick.choice(flat.size, size=min(4, flat.size), replace=False)
            analytic = np.zeros(flat.size) if p.grad is None else p.grad.reshape(-1)
            for i in idx:
                num = numerical_grad(lambda: float(loss().data), flat[i : i + 1])[0]
                err = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-6)
                worst = max(worst, err)
                assert err < 1e-3, (name, i, analytic[i], num)
    finally:
        del model.encoder.relation_encode
    assert worst < 1e-3
