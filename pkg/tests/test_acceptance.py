"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are echoed as they happen
and repeated in the terminal summary. The expensive fixtures (toy corpus,
N-gram models, two trained LSTMs) are built once per session.
"""

import math
import random
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from latrescore.corpus import ToyLanguage
from latrescore.evaluation import (ExperimentConfig, SyntheticLatticeSpec, class_confusions,
                                   evaluate, gen_lattices, run_experiment, wer)
from latrescore.graph import expand_ngram, forward_weights
from latrescore.lattice import Arc, Lattice, enumerate_paths, path_cost, topo_sort
from latrescore.lm.lstm import LstmLM, cell_forward, cell_params, init_params
from latrescore.lm.ngram import NGramLM
from latrescore.lm.training import sequence_loss
from latrescore.quantization import pq_logits, pq_reconstruct, quantize_model
from latrescore.rescoring import (RescoreConfig, ScoringPolicy, arc_beam, pool_rescore,
                                  push_forward)
from latrescore.vocab import EPS_ID, Vocabulary

from conftest import ACCEPTANCE_LINES, brute_force_best, count_paths, random_lattice, random_tree
from test_evaluation import oracle_wer
from test_training import gradcheck_setup, numeric_grad, relative_error

pytestmark = pytest.mark.acceptance

LSTM_ARGS = dict(embed_dim=32, hidden_dim=128, proj_dim=64, num_layers=1, batch_size=32,
                 sample_size=100, max_epochs=6, seed=0)


def report(capsys, number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- shared fixtures ------------------------------------------------------------------

@pytest.fixture(scope="session")
def toy():
    lang = ToyLanguage()
    train_text = lang.generate(1_000_000)
    held_text = lang.generate(20_000, seed=99)
    vocab = Vocabulary.build(train_text)
    return dict(lang=lang, vocab=vocab, train=[vocab.encode(s) for s in train_text],
                heldout=[vocab.encode(s) for s in held_text])


@pytest.fixture(scope="session")
def ngrams(toy):
    return {order: NGramLM(order, toy["vocab"]).fit(toy["train"]) for order in (2, 5)}


@pytest.fixture(scope="session")
def lstms(toy):
    """Self-normalized and plain models; training wall time is kept for the runtime check."""
    out, seconds = {}, {}
    for alpha in (0.01, 0.0):
        t = time.perf_counter()
        out[alpha] = LstmLM(toy["vocab"], alpha=alpha, **LSTM_ARGS).fit(toy["train"])
        seconds[alpha] = time.perf_counter() - t
    return out, seconds


@pytest.fixture(scope="session")
def lstm(lstms):
    return lstms[0][0.01]


@pytest.fixture(scope="session")
def bigram_sweep(toy, ngrams, lstm):
    """Rescoring sweep over synthetic lattices from the 2-gram first pass."""
    lang, vocab = toy["lang"], toy["vocab"]
    refs = [vocab.encode(s) for s in lang.generate(1500, seed=7, mean_length=20)][:40]
    lats, refs = gen_lattices(SyntheticLatticeSpec(refs, seed=1), ngrams[2],
                              class_confusions(lang.confusions, vocab))
    cfg = ExperimentConfig({2: (lats, refs)}, ks=(1, 10, 50), expand_orders=(1, 2, 3, 4),
                           weightings=("uniform", "max_prob"), arc_beam=False)
    return run_experiment(cfg, lstm)


def heldout_log_normalizers(model, sentences):
    """ln Z(h) for every history that predicts a held-out token."""
    W, b = model.softmax_w_, model.softmax_b_
    out = []
    for s in sentences:
        outputs = np.vstack([model.lm_start().output[None, :], model.forward_sequence(s)])
        out.append(logsumexp(outputs @ W.T + b, axis=1))
    return np.concatenate(out)


# -- criteria -------------------------------------------------------------------------

def test_criterion_01_oracle_exactness(capsys, lstm):
    t = time.perf_counter()
    vocab = lstm.vocab_
    transparent = ScoringPolicy.for_model(lstm).transparent
    worst, mismatched, n = 0.0, 0, 0
    for seed in range(200):
        rng = random.Random(seed)
        lat = random_lattice(rng, vocab, rng.randint(2, 12), p_eps=0.1, p_nonspeech=0.1,
                             max_paths=200)
        depth = max(len(p) for p in enumerate_paths(lat))
        full = expand_ngram(lat, depth + 1, transparent=transparent)
        res = push_forward(full, lstm, k=count_paths(lat))
        cost, words, _ = brute_force_best(lat, lstm)
        worst = max(worst, abs(res.cost - cost))
        mismatched += res.words != words
        n += 1
    dt = time.perf_counter() - t
    ok = n >= 200 and worst <= 1e-9 and mismatched == 0 and dt < 60
    report(capsys, 1, ok, f"{n} lattices, max |cost diff| {worst:.2e}, "
                          f"word mismatches {mismatched}, {dt:.1f}s")


def test_criterion_02_tree_agreement(capsys, lstm):
    vocab = lstm.vocab_
    differ = 0
    for seed in range(100):
        rng = random.Random(seed)
        lat = random_tree(rng, vocab, rng.randint(2, 16), p_nonspeech=0.2)
        ref = push_forward(lat, lstm, 1)
        others = [arc_beam(lat, lstm)] + [pool_rescore(lat, lstm, w)
                                          for w in ("uniform", "max_prob", "sum_prob")]
        for r in others:
            same = (r.words, r.cost, r.am, r.lm, r.path) == (ref.words, ref.cost, ref.am,
                                                              ref.lm, ref.path)
            differ += not (same and r.lattice.arcs == ref.lattice.arcs)
    report(capsys, 2, differ == 0, f"100 trees x 4 algorithms, {differ} differing outputs")


def test_criterion_03_beam_and_expansion_monotone(capsys, bigram_sweep):
    def series(names):
        rows = [bigram_sweep.get(n, 2) for n in names]
        return [r.total_cost for r in rows], [r.wer for r in rows]

    k_cost, k_wer = series([f"push_forward k={k}" for k in (1, 10, 50)])
    n_cost, n_wer = series([f"expand N={n} push_forward k=1" for n in (1, 2, 3, 4)])

    def nonincreasing(xs):
        return all(b <= a + 1e-9 * abs(a) for a, b in zip(xs, xs[1:]))

    ok = all(map(nonincreasing, (k_cost, k_wer, n_cost, n_wer)))
    fmt = lambda xs: "/".join(f"{100 * x:.2f}" for x in xs)
    report(capsys, 3, ok, f"WER k=1,10,50: {fmt(k_wer)}; N=1..4: {fmt(n_wer)}; "
                          f"cost k: {k_cost[0]:.1f}->{k_cost[-1]:.1f}, "
                          f"N: {n_cost[0]:.1f}->{n_cost[-1]:.1f}")


def test_criterion_04_lattice_beats_kbest(capsys, toy, ngrams, lstm):
    lang, vocab = toy["lang"], toy["vocab"]
    long = [vocab.encode(s) for s in lang.generate(3000, seed=11, mean_length=80)
            if len(s) >= 40][:20]
    mean_len = float(np.mean([len(s) for s in long]))
    lats, refs = gen_lattices(SyntheticLatticeSpec(long, seed=2), ngrams[2],
                              class_confusions(lang.confusions, vocab))
    lattice = evaluate("push_forward k=1", lats, refs, lstm, RescoreConfig("push_forward"), 2)
    kbest = evaluate("kbest K=100", lats, refs, lstm, RescoreConfig("kbest", kbest_size=100), 2)
    ok = mean_len >= 60 and lattice.wer < kbest.wer
    report(capsys, 4, ok, f"{len(long)} segments, mean {mean_len:.1f} words: "
                          f"lattice WER {100 * lattice.wer:.2f} vs 100-best {100 * kbest.wer:.2f}")


def test_criterion_05_gradient_check(capsys):
    t = time.perf_counter()
    worst = 0.0
    for alpha in (0.0, 0.01):
        p, args = gradcheck_setup(seed=7, V=12, d=4, layers=1)
        _, grads, _ = sequence_loss(p, *args, alpha)
        for name in p:
            worst = max(worst, relative_error(numeric_grad(p, args, alpha, name), grads[name]))
    dt = time.perf_counter() - t
    report(capsys, 5, worst < 1e-4 and dt < 30,
           f"max relative error {worst:.2e} over all tensors, alpha 0 and 0.01, {dt:.1f}s")


def test_criterion_06_gate_coupling(capsys):
    rng = np.random.default_rng(0)
    bad_sum = bad_dim = 0
    for n in range(10_000):
        d_x, d_m, d_r = rng.integers(1, 9, 3)
        if n % 100 == 0:
            p = init_params(10, d_x, d_m, d_r, 1, rng, scale=1.0)
            p = {k: v + rng.normal(0, 1.0, v.shape) for k, v in p.items()}
            cell = cell_params(p, 0)
        x = rng.normal(size=cell.d_x) * 3
        prev = (rng.normal(size=cell.d_m), rng.normal(size=cell.d_r))
        (_, r), out, gates = cell_forward(cell, x, prev, return_gates=True)
        bad_sum += int(np.any(gates["i"] + gates["f"] != 1.0))
        bad_dim += int(out.shape != (cell.d_r,) or r.shape != (cell.d_r,))
    report(capsys, 6, bad_sum == 0 and bad_dim == 0,
           f"10^4 cell evaluations: {bad_sum} with i+f != 1, {bad_dim} with wrong output size")


def test_criterion_07_self_normalization(capsys, toy, lstms):
    models, _ = lstms
    held = toy["heldout"]
    lz = heldout_log_normalizers(models[0.01], held)
    lz_plain = heldout_log_normalizers(models[0.0], held)
    mean_abs, mean_abs_plain = float(np.mean(np.abs(lz))), float(np.mean(np.abs(lz_plain)))
    ppl_sn, ppl_plain = models[0.01].perplexity(held), models[0.0].perplexity(held)
    penalty = (ppl_sn - ppl_plain) / ppl_plain

    big_vocab = Vocabulary([f"w{i}" for i in range(10_000)])
    big = LstmLM(big_vocab, embed_dim=32, hidden_dim=128, proj_dim=64, num_layers=1,
                 alpha=0.01).initialize(seed=0)
    words = np.random.default_rng(0).integers(6, len(big_vocab), 1000).tolist()

    def tokens_per_second(score):
        state, t = big.lm_start(), time.perf_counter()
        for w in words:
            state = score(state, w).next_state
        return len(words) / (time.perf_counter() - t)

    speedup = max(tokens_per_second(big.score_selfnorm) / tokens_per_second(big.lm_score)
                  for _ in range(2))
    ok = mean_abs < 0.5 and speedup >= 2.0 and penalty < 0.05
    report(capsys, 7, ok, f"mean |ln Z| {mean_abs:.3f} (plain {mean_abs_plain:.2f}); "
                          f"speedup {speedup:.1f}x at |V|=10k; ppl {ppl_sn:.3f} vs "
                          f"{ppl_plain:.3f} ({100 * penalty:+.2f}%)")


def test_criterion_08_perplexity_ordering(capsys, toy, ngrams, lstms):
    models, seconds = lstms
    held = toy["heldout"]
    ppl = {"lstm": models[0.01].perplexity(held), 5: ngrams[5].perplexity(held),
           2: ngrams[2].perplexity(held)}
    minutes = sum(seconds.values()) / 60
    ok = ppl["lstm"] < ppl[5] < ppl[2] and minutes < 30
    report(capsys, 8, ok, f"LSTM {ppl['lstm']:.3f} < 5-gram {ppl[5]:.3f} < 2-gram {ppl[2]:.3f}; "
                          f"LSTM training {minutes:.1f} min for both models")


def test_criterion_09_product_quantization(capsys, toy, lstm):
    big_vocab = Vocabulary([f"w{i}" for i in range(10_000)])
    big = LstmLM(big_vocab, embed_dim=32, hidden_dim=128, proj_dim=64, num_layers=1,
                 init_scale=0.5).initialize(seed=1)
    big_q, big_report = quantize_model(big, chunk_size=4, n_centers=256, iters=10)

    toy_q, _ = quantize_model(lstm, chunk_size=4, n_centers=256)
    held = toy["heldout"]
    ppl, ppl_q = lstm.perplexity(held), toy_q.perplexity(held)
    drift = abs(ppl_q - ppl) / ppl

    cb = big_q.codebooks_["softmax_w"]
    W = pq_reconstruct(cb)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        r = rng.normal(size=W.shape[1])
        got, want = pq_logits(cb, r), W @ r
        worst = max(worst, float(np.max(np.abs(got - want)) / np.max(np.abs(want))))

    ok = big_report.ratio >= 16.0 and drift < 0.02 and worst <= 1e-6
    report(capsys, 9, ok, f"ratio {big_report.ratio:.2f}x at {cb.rows} rows (need >= 16); "
                          f"held-out ppl {ppl:.3f} -> {ppl_q:.3f} ({100 * drift:.2f}%); "
                          f"max logit error {worst:.1e}")


def test_criterion_10_nonspeech_transparency(capsys, lstm):
    vocab = lstm.vocab_
    rng = random.Random(0)
    words = [w for w in range(len(vocab)) if not vocab.is_transparent(w) and w > 3]
    nonspeech = sorted(vocab.nonspeech_ids)
    differ = 0
    for _ in range(100):
        clean = [rng.choice(words) for _ in range(rng.randint(1, 25))]
        noisy = []
        for w in clean:
            while rng.random() < 0.3:
                noisy.append(rng.choice(nonspeech))
            noisy.append(w)
        lat = Lattice(0, [len(noisy)], [Arc(i, i + 1, w, 0.0, 0.0) for i, w in enumerate(noisy)])
        r = push_forward(lat, lstm)
        differ += r.lm != -lstm.sentence_logprob(clean) or r.words != tuple(clean)
    report(capsys, 10, differ == 0, f"100 sentences, {differ} with a different lm cost")


def test_criterion_11_wer_oracle(capsys):
    rng = random.Random(0)
    differ = 0
    for _ in range(1000):
        ref = [rng.randrange(6) for _ in range(rng.randint(1, 40))]
        hyp = [rng.randrange(6) for _ in range(rng.randint(0, 40))]
        got = wer(ref, hyp)
        differ += (got.sub, got.ins, got.dels) != oracle_wer(tuple(ref), tuple(hyp))
    report(capsys, 11, differ == 0, f"10^3 random pairs, {differ} disagreements")


def test_criterion_12_pooling_weights(capsys, lstm, bigram_sweep):
    vocab = lstm.vocab_
    worst = 0.0
    for seed in range(100):
        rng = random.Random(seed)
        lat = random_lattice(rng, vocab, rng.randint(2, 12), max_paths=4096)
        fw = forward_weights(lat)
        for q in topo_sort(lat):
            sub = Lattice(lat.start, [q], lat.arcs, extra_nodes=lat.nodes)
            logs = [-path_cost(sub, p) for p in enumerate_paths(sub)
                    if not p or lat.arcs[p[-1]].dst == q]
            mx = max(logs)
            total = mx + math.log(math.fsum(math.exp(x - mx) for x in logs))
            for got, want in ((fw.log_max[q], mx), (fw.log_sum[q], total)):
                # weights are exp of these; relative error of the weight
                worst = max(worst, abs(math.expm1(got - want)))
    uniform = bigram_sweep.get("state_pool uniform", 2).wer
    max_prob = bigram_sweep.get("state_pool max_prob", 2).wer
    ok = worst <= 1e-9 and uniform >= max_prob
    report(capsys, 12, ok, f"max relative weight error {worst:.1e}; WER uniform "
                           f"{100 * uniform:.2f} >= max_prob {100 * max_prob:.2f}")
