import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from latrescore.corpus import ToyLanguage
from latrescore.lm.lstm import LstmLM, init_params
from latrescore.lm.training import (Adagrad, TrainConfig, clip_by_global_norm,
                                    heldout_logprob, log_expected_count, log_uniform_probs,
                                    log_uniform_sample, make_streams, pack_rows,
                                    sample_candidates,
                                    sampled_loss, sampled_softmax_loss, self_norm_loss,
                                    sequence_loss)
from latrescore.vocab import EOS_ID, Vocabulary


def gradcheck_setup(seed=0, V=12, d=4, layers=2, B=3, T=5):
    rng = np.random.default_rng(seed)
    p = init_params(V, d, d + 1, d - 1, layers, rng, scale=0.5)
    p = {k: v + rng.normal(0, 0.3, v.shape) for k, v in p.items()}
    tokens = rng.integers(0, V, (B, T))
    resets = np.zeros((B, T), bool)
    resets[1, 2] = True
    init = [(rng.normal(size=(B, d + 1)), rng.normal(size=(B, d - 1))) for _ in range(layers)]
    samples = np.array([0, 2, 5, 7])
    lq_s = rng.normal(size=4) * 0.3
    lq_t = rng.normal(size=(B, T)) * 0.3
    return p, (layers, tokens, resets, init, samples, lq_s, lq_t)


def relative_error(num, ana):
    return np.linalg.norm(num - ana) / max(np.linalg.norm(num) + np.linalg.norm(ana), 1e-12)


def numeric_grad(p, args, alpha, name, eps=1e-5):
    v = p[name]
    g = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        old = v[idx]
        v[idx] = old + eps
        up = sequence_loss(p, *args, alpha)[0]
        v[idx] = old - eps
        down = sequence_loss(p, *args, alpha)[0]
        v[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


@pytest.mark.parametrize("alpha", [0.0, 0.5])
def test_two_layer_gradients(alpha):
    p, args = gradcheck_setup(seed=1, layers=2)
    _, grads, _ = sequence_loss(p, *args, alpha)
    for name in p:
        assert relative_error(numeric_grad(p, args, alpha, name), grads[name]) < 1e-6, name


def test_alpha_zero_reduces_to_sampled_softmax():
    p, args = gradcheck_setup(seed=2)
    a_loss, a_grads = sampled_softmax_loss(p, *args)
    b_loss, b_grads = self_norm_loss(p, *args, 0.0)
    assert a_loss == b_loss
    assert all(np.array_equal(a_grads[k], b_grads[k]) for k in p)


def test_penalty_is_nonnegative_and_matches_definition():
    rng = np.random.default_rng(4)
    V, d, N = 10, 3, 6
    params = {"softmax_w": rng.normal(size=(V, d)), "softmax_b": rng.normal(size=V)}
    r = rng.normal(size=(N, d))
    targets = rng.integers(0, V, N)
    samples = np.array([1, 3, 4])
    zeros_s, zeros_t = np.zeros(3), np.zeros(N)
    base = sampled_loss(params, r, targets, samples, zeros_s, zeros_t, 0.0)[0]
    loss, _, _, log_z = sampled_loss(params, r, targets, samples, zeros_s, zeros_t, 0.01)
    assert loss >= base
    U = r @ params["softmax_w"].T + params["softmax_b"]
    for n in range(N):
        cand = sorted({*samples.tolist(), int(targets[n])})
        assert log_z[n] == pytest.approx(logsumexp(U[n, cand]), abs=1e-12)
    assert loss - base == pytest.approx(0.01 * np.mean(log_z ** 2), abs=1e-12)


def test_sampled_loss_equals_full_softmax_when_all_words_sampled():
    rng = np.random.default_rng(5)
    V, d, N = 7, 3, 4
    params = {"softmax_w": rng.normal(size=(V, d)), "softmax_b": rng.normal(size=V)}
    r = rng.normal(size=(N, d))
    targets = np.array([0, 3, 6, 2])
    loss = sampled_loss(params, r, targets, np.arange(V), np.zeros(V), np.zeros(N))[0]
    U = r @ params["softmax_w"].T + params["softmax_b"]
    full = np.mean(logsumexp(U, axis=1) - U[np.arange(N), targets])
    assert loss == pytest.approx(full, abs=1e-12)


# -- candidate sampling -------------------------------------------------------

def test_log_uniform_probs_sum_to_one():
    for V in (2, 12, 1000):
        p = log_uniform_probs(V)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(p) < 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.data())
def test_samples_are_distinct_and_exclude(V, data):
    n = data.draw(st.integers(1, V - 1))
    exclude = data.draw(st.one_of(st.none(), st.integers(0, V - 1)))
    if exclude is not None and n > V - 1:
        return
    s = log_uniform_sample(V, n, exclude, seed=data.draw(st.integers(0, 1000)))
    assert len(s) == n == len(set(s.tolist()))
    assert exclude not in s.tolist()
    assert s.min() >= 0 and s.max() < V


def test_sample_all_but_excluded():
    s = log_uniform_sample(10, 9, exclude=4, seed=0)
    assert sorted(s.tolist()) == [0, 1, 2, 3, 5, 6, 7, 8, 9]


def test_sample_size_must_be_below_vocab():
    with pytest.raises(ValueError):
        log_uniform_sample(10, 10)
    with pytest.raises(ValueError):
        log_uniform_sample(10, 0)
    with pytest.raises(ValueError):
        TrainConfig(sample_size=20).num_samples(20)


def test_sampler_follows_log_uniform():
    rng = np.random.default_rng(0)
    V, draws = 50, 40_000
    counts = np.zeros(V)
    for _ in range(draws):
        ranks, _ = sample_candidates(V, 1, rng)
        counts[ranks[0]] += 1
    expected = log_uniform_probs(V) * draws
    chi2 = np.sum((counts - expected) ** 2 / expected)
    assert chi2 < 100  # 49 degrees of freedom, p < 1e-5 beyond this


def test_expected_count_matches_formula():
    p = log_uniform_probs(20)
    lq = log_expected_count(p, 7)
    np.testing.assert_allclose(np.exp(lq), 1 - (1 - p) ** 7, rtol=1e-12)


# -- optimization pieces ----------------------------------------------------------

def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": np.array([100.0])}
    norm = clip_by_global_norm(g, ["a", "b"], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    assert g["c"][0] == 100.0
    assert clip_by_global_norm(g, ["a", "b"], 2.0) == pytest.approx(1.0)


def test_adagrad_step():
    p = {"w": np.array([1.0, 2.0])}
    opt = Adagrad(p, lr=0.5, init=0.0 + 1.0)
    opt.step(p, {"w": np.array([1.0, -2.0])})
    np.testing.assert_allclose(p["w"], [1.0 - 0.5 / math.sqrt(2), 2.0 + 0.5 * 2 / math.sqrt(5)])


def test_make_streams_layout():
    sents = [[5, 6], [7], [8, 9, 10]]
    tokens, resets, weight = make_streams(sents, 2)
    assert tokens.shape == (2, 5)
    flat = tokens.reshape(-1)[weight.reshape(-1) > 0].tolist()
    assert flat == [5, 6, EOS_ID, 7, EOS_ID, 8, 9, 10, EOS_ID]
    assert resets.reshape(-1).tolist()[:9] == [True, False, False, True, False, True,
                                               False, False, False]
    assert weight.sum() == 9
    assert np.all(tokens.reshape(-1)[9:] == EOS_ID) and np.all(resets.reshape(-1)[9:])


def test_pack_rows_keeps_sentences_whole():
    sents = [[5, 6], [7], [8, 9, 10], [11, 12, 13, 14]]
    tokens, resets, weight = pack_rows(sents, 2)
    assert weight.sum() == 14
    found = []
    for b in range(2):
        cur = None
        for t in range(tokens.shape[1]):
            if not weight[b, t]:
                break
            if resets[b, t]:
                cur = []
            if tokens[b, t] == EOS_ID:
                found.append(cur)
            else:
                cur.append(int(tokens[b, t]))
    assert sorted(found) == sorted(sents)


def test_heldout_logprob_matches_stepwise(tiny_lstm):
    rng = np.random.default_rng(0)
    sents = [rng.integers(6, 14, rng.integers(0, 9)).tolist() for _ in range(15)]
    total, n = heldout_logprob(tiny_lstm.params_, 2, sents, batch=4)
    ref = sum(tiny_lstm.sentence_logprob(s, eos=True) for s in sents)
    assert n == sum(len(s) + 1 for s in sents)
    assert total == pytest.approx(ref, abs=1e-9)


# -- end-to-end training ----------------------------------------------------------

@pytest.fixture(scope="module")
def toy_data():
    lang = ToyLanguage()
    segs = lang.generate(20_000, seed=5)
    vocab = Vocabulary.build(segs)
    return vocab, [vocab.encode(s) for s in segs], [vocab.encode(s) for s in lang.generate(2000, seed=6)]


def small_model(vocab, **kw):
    args = dict(embed_dim=8, hidden_dim=16, proj_dim=8, num_layers=1, batch_size=16,
                sample_size=20, max_epochs=2, seed=3, dtype="float64")
    args.update(kw)
    return LstmLM(vocab, **args)


def test_training_is_deterministic_and_learns(toy_data):
    vocab, train, held = toy_data
    a = small_model(vocab).fit(train, heldout=held)
    b = small_model(vocab).fit(train, heldout=held)
    for k in a.params_:
        np.testing.assert_array_equal(a.params_[k], b.params_[k])
    ppl = [h["heldout_ppl"] for h in a.history_]
    assert ppl[-1] < ppl[0] < len(vocab)
    assert a.perplexity(held) == pytest.approx(ppl[-1], rel=1e-9)
    assert a.freq_order_[0] != 0


def test_config_validation(small_vocab):
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    assert TrainConfig.from_estimator(LstmLM(small_vocab, alpha=0.005)).alpha == 0.005
