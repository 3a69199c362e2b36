"""Sampled-softmax training of :class:`~latrescore.lm.lstm.LstmLM`.

Loss per predicted token, with ``C = S + {target}``::

    -log softmax_C(U - log Q)[target] + alpha * log(sum_C exp U) ** 2

``Q`` is each candidate's expected inclusion count under the log-uniform
sampler. Gradients are derived by hand; the test suite checks them
against central differences.
"""

from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from ..vocab import EOS_ID
from .lstm import cell_params, init_params, layer_param_names

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.2
    unroll: int = 20
    batch_size: int = 128
    clip_norm: float = 1.0
    sample_fraction: float = 0.05
    sample_size: int | None = None
    alpha: float = 0.01
    max_epochs: int = 5
    seed: int = 0
    init_scale: float = 0.1
    dtype: str = "float32"
    adagrad_init: float = 0.1

    def __post_init__(self):
        for name in ("learning_rate", "unroll", "batch_size", "clip_norm", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @classmethod
    def from_estimator(cls, est) -> "TrainConfig":
        names = [f for f in cls.__dataclass_fields__ if f != "adagrad_init"]
        return cls(**{n: getattr(est, n) for n in names})

    def num_samples(self, vocab_size: int) -> int:
        n = self.sample_size or max(1, round(self.sample_fraction * vocab_size))
        if n >= vocab_size:
            raise ValueError("sample size must be smaller than the vocabulary")
        return n


# -- candidate sampling -------------------------------------------------------

def log_uniform_probs(vocab_size: int) -> np.ndarray:
    """P(k) = ln((k+2)/(k+1)) / ln(V+1) over frequency ranks k."""
    k = np.arange(vocab_size, dtype=np.float64)
    return (np.log1p(1.0 / (k + 1.0))) / math.log(vocab_size + 1.0)


def _draw(rng, vocab_size: int, n: int) -> np.ndarray:
    u = rng.random(n)
    k = np.floor(np.exp(u * math.log(vocab_size + 1.0))).astype(np.int64) - 1
    return np.clip(k, 0, vocab_size - 1)


def sample_candidates(vocab_size: int, n: int, rng, exclude: int | None = None):
    """Draw ``n`` distinct log-uniform ranks.

    Returns ``(ranks, tries)`` where ``tries`` counts draws with replacement
    needed to collect them.
    """
    limit = vocab_size - (1 if exclude is not None else 0)
    if n >= vocab_size or n > limit or n < 1:
        raise ValueError("sample size must be in [1, |V|)")
    seen = {}
    tries = 0
    batch = max(2 * n, 16)
    while len(seen) < n:
        for k in _draw(rng, vocab_size, batch).tolist():
            tries += 1
            if k != exclude and k not in seen:
                seen[k] = None
                if len(seen) == n:
                    break
    return np.fromiter(seen, dtype=np.int64, count=n), tries


def log_uniform_sample(vocab_size: int, n: int, exclude: int | None = None,
                       seed=None) -> np.ndarray:
    """``n`` distinct ranks drawn log-uniformly, never equal to ``exclude``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sample_candidates(vocab_size, n, rng, exclude)[0]


def log_expected_count(probs: np.ndarray, tries: int) -> np.ndarray:
    """log(1 - (1 - p)^tries): log inclusion probability of each candidate."""
    return np.log(-np.expm1(tries * np.log1p(-probs)))


# -- forward / backward through time -----------------------------------------

class Forward(NamedTuple):
    outputs: np.ndarray              # (T, B, d_r) final-layer r used to predict token t
    final_state_outputs: np.ndarray  # (T, B, d_r) final-layer r after consuming token t
    caches: list
    final_states: list


def forward_batch(params: dict, num_layers: int, tokens, resets, init_states) -> Forward:
    """Unroll over ``tokens`` (B, T).

    Token t is predicted from the state before it is consumed. Where
    ``resets[b, t]`` is set, stream b restarts from the zero state first.
    """
    B, T = tokens.shape
    cells = [cell_params(params, l) for l in range(num_layers)]
    E = params["embedding"]
    states = [(c, r) for c, r in init_states]
    outputs, after, caches = [], [], []
    for t in range(T):
        keep = (~resets[:, t]).astype(E.dtype)[:, None]
        states = [(c * keep, r * keep) for c, r in states]
        outputs.append(states[-1][1])
        x = E[tokens[:, t]]
        step = []
        new_states = []
        for l, cell in enumerate(cells):
            prev = states[l]
            (c, r), _, gates = cell_forward_gates(cell, x, prev)
            step.append((x, prev, gates))
            new_states.append((c, r))
            x = r
        caches.append((keep, step))
        states = new_states
        after.append(states[-1][1])
    return Forward(np.stack(outputs), np.stack(after), caches, states)


def cell_forward_gates(cell, x, prev):
    from .lstm import cell_forward
    return cell_forward(cell, x, prev, return_gates=True)


def backward_batch(params: dict, num_layers: int, tokens, fw: Forward, d_outputs) -> dict:
    """Gradients of the loss w.r.t. all parameters given dL/d(outputs)."""
    B, T = tokens.shape
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    cells = [cell_params(params, l) for l in range(num_layers)]
    dm = [c.d_m for c in cells]
    dtype = params["embedding"].dtype
    dc = [np.zeros((B, c.d_m), dtype) for c in cells]
    dr = [np.zeros((B, c.d_r), dtype) for c in cells]
    for t in range(T - 1, -1, -1):
        keep, step = fw.caches[t]
        dx = None
        for l in range(num_layers - 1, -1, -1):
            x, (c_prev, r_prev), g = step[l]
            cell = cells[l]
            p = f"l{l}."
            d_r_out = dr[l] if dx is None else dr[l] + dx
            d_m = d_r_out @ cell.W_rm
            grads[p + "W_rm"] += d_r_out.T @ g["m"]
            d_o = d_m * g["tanh_c"]
            d_c = dc[l] + d_m * g["o"] * (1.0 - g["tanh_c"] ** 2)
            i = g["i"]
            d_i = d_c * (g["g"] - c_prev)
            d_g = d_c * i
            d_cprev = d_c * (1.0 - i)
            da_i = d_i * i * (1.0 - i)
            da_o = d_o * g["o"] * (1.0 - g["o"])
            da_c = d_g * (1.0 - g["g"] ** 2)
            d_cprev = d_cprev + da_i * cell.D_i + da_o * cell.D_o
            grads[p + "D_i"] += (da_i * c_prev).sum(0)
            grads[p + "D_o"] += (da_o * c_prev).sum(0)
            da = np.concatenate([da_i, da_o, da_c], axis=1)
            grads[p + "W_x"] += da.T @ x
            grads[p + "W_r"] += da.T @ r_prev
            grads[p + "b"] += da.sum(0)
            dx = da @ cell.W_x
            dc[l] = d_cprev
            dr[l] = da @ cell.W_r
        np.add.at(grads["embedding"], tokens[:, t], dx)
        dr[-1] = dr[-1] + d_outputs[t]
        for l in range(num_layers):
            dc[l] = dc[l] * keep
            dr[l] = dr[l] * keep
    return grads


# -- losses -------------------------------------------------------------------

def sampled_loss(params: dict, r, targets, samples, log_q_samples, log_q_targets,
                 alpha: float = 0.0):
    """Sampled softmax cross-entropy plus the sampled self-normalization penalty.

    Parameters
    ----------
    r : (N, d_r) final-layer outputs
    targets : (N,) word ids
    samples : (n_s,) word ids shared by the batch
    log_q_samples, log_q_targets : log inclusion probabilities used for the
        logit correction. Pass zeros to disable it.

    Returns ``(loss, grads, dr, log_z)`` with ``grads`` holding only the
    softmax tensors, ``dr`` the gradient w.r.t. ``r`` and ``log_z`` the
    per-row log of the sampled normalizer.
    """
    W, b = params["softmax_w"], params["softmax_b"]
    N = r.shape[0]
    Wt = W[targets]
    Ws = W[samples]
    u_t = np.einsum("nd,nd->n", r, Wt) + b[targets]
    u_s = r @ Ws.T + b[samples]
    hit = targets[:, None] == samples[None, :]
    u_s = np.where(hit, -np.inf, u_s)

    corr = np.concatenate([(u_t - log_q_targets)[:, None], u_s - log_q_samples[None, :]], axis=1)
    lse_c = logsumexp(corr, axis=1)
    ce = lse_c - corr[:, 0]
    raw = np.concatenate([u_t[:, None], u_s], axis=1)
    log_z = logsumexp(raw, axis=1)
    loss = float(np.mean(ce + alpha * log_z ** 2))

    d_u = np.exp(corr - lse_c[:, None])
    d_u[:, 0] -= 1.0
    if alpha:
        d_u += (2.0 * alpha * log_z)[:, None] * np.exp(raw - log_z[:, None])
    d_u /= N
    d_t, d_s = d_u[:, 0], d_u[:, 1:]
    dr = d_t[:, None] * Wt + d_s @ Ws
    gW = np.zeros_like(W)
    gb = np.zeros_like(b)
    np.add.at(gW, targets, d_t[:, None] * r)
    np.add.at(gb, targets, d_t)
    gW[samples] += d_s.T @ r
    gb[samples] += d_s.sum(0)
    return loss, {"softmax_w": gW, "softmax_b": gb}, dr, log_z


def sequence_loss(params: dict, num_layers: int, tokens, resets, init_states, samples,
                  log_q_samples, log_q_targets, alpha: float = 0.0):
    """Loss and full gradients for one (B, T) chunk. ``log_q_targets`` is (B, T)."""
    fw = forward_batch(params, num_layers, tokens, resets, init_states)
    T, B, dr_dim = fw.outputs.shape
    r = fw.outputs.transpose(1, 0, 2).reshape(B * T, dr_dim)
    loss, g_soft, d_r, _ = sampled_loss(params, r, tokens.reshape(-1), samples,
                                        log_q_samples, log_q_targets.reshape(-1), alpha)
    d_out = d_r.reshape(B, T, dr_dim).transpose(1, 0, 2)
    grads = backward_batch(params, num_layers, tokens, fw, d_out)
    grads["softmax_w"] += g_soft["softmax_w"]
    grads["softmax_b"] += g_soft["softmax_b"]
    return loss, grads, fw


def sampled_softmax_loss(params, num_layers, tokens, resets, init_states, samples,
                         log_q_samples, log_q_targets):
    return sequence_loss(params, num_layers, tokens, resets, init_states, samples,
                         log_q_samples, log_q_targets, alpha=0.0)[:2]


def self_norm_loss(params, num_layers, tokens, resets, init_states, samples,
                   log_q_samples, log_q_targets, alpha):
    return sequence_loss(params, num_layers, tokens, resets, init_states, samples,
                         log_q_samples, log_q_targets, alpha=alpha)[:2]


# -- optimization ---------------------------------------------------------------

def clip_by_global_norm(grads: dict, names, max_norm: float):
    """Scale ``grads[names]`` in place so their joint L2 norm is <= max_norm.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
    if norm > max_norm:
        s = max_norm / norm
        for n in names:
            grads[n] *= s
    return norm


class Adagrad:
    def __init__(self, params: dict, lr: float, init: float = 0.1):
        self.lr = lr
        self.acc = {k: np.full_like(v, init) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            a = self.acc[k]
            a += g * g
            params[k] -= self.lr * g / np.sqrt(a)


# -- data layout ----------------------------------------------------------------

def make_streams(sentences, n_streams: int, rng=None):
    """Pack sentences (each followed by ``</s>``) into ``n_streams`` rows.

    Returns ``(tokens, resets)`` of shape (n_streams, L); a reset marks the
    first token of every sentence. Tail padding is ``</s>`` with resets set,
    so padding never feeds real histories.
    """
    order = np.arange(len(sentences))
    if rng is not None:
        rng.shuffle(order)
    toks, rst = [], []
    for i in order:
        s = sentences[i]
        toks.extend(s)
        toks.append(EOS_ID)
        rst.append(True)
        rst.extend([False] * len(s))
    toks = np.asarray(toks, dtype=np.int64)
    rst = np.asarray(rst, dtype=bool)
    L = math.ceil(len(toks) / n_streams)
    pad = L * n_streams - len(toks)
    weight = np.concatenate([np.ones(len(toks)), np.zeros(pad)])
    toks = np.concatenate([toks, np.full(pad, EOS_ID)])
    rst = np.concatenate([rst, np.ones(pad, dtype=bool)])
    return (toks.reshape(n_streams, L), rst.reshape(n_streams, L),
            weight.reshape(n_streams, L))


def pack_rows(sentences, n_rows: int):
    """Like :func:`make_streams`, but no sentence is split across rows.

    Sentences go longest first to the currently shortest row.
    """
    rows = [[] for _ in range(n_rows)]
    loads = [(0, b) for b in range(n_rows)]
    heapq.heapify(loads)
    for i in sorted(range(len(sentences)), key=lambda j: -len(sentences[j])):
        load, b = heapq.heappop(loads)
        rows[b].append(i)
        heapq.heappush(loads, (load + len(sentences[i]) + 1, b))
    L = max(load for load, _ in loads)
    tokens = np.full((n_rows, L), EOS_ID, dtype=np.int64)
    resets = np.ones((n_rows, L), dtype=bool)
    weight = np.zeros((n_rows, L))
    for b, idx in enumerate(rows):
        pos = 0
        for i in idx:
            s = sentences[i]
            tokens[b, pos:pos + len(s)] = s
            resets[b, pos + 1:pos + len(s) + 1] = False
            weight[b, pos:pos + len(s) + 1] = 1.0
            pos += len(s) + 1
    return tokens, resets, weight


def heldout_logprob(params: dict, num_layers: int, sentences, batch: int = 64):
    """Total full-softmax log probability and token count of ``sentences``."""
    total, n = 0.0, 0
    W, b = params["softmax_w"], params["softmax_b"]
    tokens, resets, weight = pack_rows(sentences, min(batch, max(1, len(sentences))))
    cells = [cell_params(params, l) for l in range(num_layers)]
    init = [(np.zeros((tokens.shape[0], c.d_m)), np.zeros((tokens.shape[0], c.d_r)))
            for c in cells]
    fw = forward_batch(params, num_layers, tokens, resets, init)
    for t in range(tokens.shape[1]):
        u = fw.outputs[t] @ W.T + b
        lp = u[np.arange(len(u)), tokens[:, t]] - logsumexp(u, axis=1)
        total += float(np.sum(lp * weight[:, t]))
        n += int(weight[:, t].sum())
    return total, n


def train(model, sentences, config: TrainConfig, heldout=None):
    """AdaGrad training with truncated BPTT over ``config.unroll`` steps.

    Gradients of the recurrent-layer weights are clipped jointly to
    ``config.clip_norm``; embedding and softmax gradients are not clipped.
    Deterministic for a fixed seed.

    Returns ``(params, freq_order, history)``.
    """
    V = len(model.vocab_)
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    counts = np.zeros(V)
    for s in sentences:
        np.add.at(counts, np.asarray(s, dtype=np.int64), 1)
    counts[EOS_ID] += len(sentences)
    freq_order = np.lexsort((np.arange(V), -counts))
    rank_of = np.empty(V, dtype=np.int64)
    rank_of[freq_order] = np.arange(V)
    probs = log_uniform_probs(V)
    n_samp = config.num_samples(V)

    params = init_params(V, model.embed_dim, model.hidden_dim, model.proj_dim,
                         model.num_layers, rng, config.init_scale, unigram=counts, dtype=dtype)
    opt = Adagrad(params, config.learning_rate, config.adagrad_init)
    lstm_names = [n for l in range(model.num_layers) for n in layer_param_names(l)]
    history = []
    B, T = config.batch_size, config.unroll
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        tokens, resets, weight = make_streams(sentences, B, rng)
        states = [(np.zeros((B, model.hidden_dim), dtype), np.zeros((B, model.proj_dim), dtype))
                  for _ in range(model.num_layers)]
        losses, norms = [], []
        for s in range(0, tokens.shape[1], T):
            tk, rs = tokens[:, s:s + T], resets[:, s:s + T]
            ranks, tries = sample_candidates(V, n_samp, rng)
            samples = freq_order[ranks]
            lq_s = log_expected_count(probs[ranks], tries).astype(dtype)
            lq_t = log_expected_count(probs[rank_of[tk]], tries).astype(dtype)
            loss, grads, fw = sequence_loss(params, model.num_layers, tk, rs, states,
                                            samples, lq_s, lq_t, config.alpha)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {s // T}: {loss}")
            norms.append(clip_by_global_norm(grads, lstm_names, config.clip_norm))
            opt.step(params, grads)
            states = fw.final_states
            losses.append(loss)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "mean_grad_norm": float(np.mean(norms)),
               "seconds": time.perf_counter() - t0}
        if heldout:
            lp, n = heldout_logprob(params, model.num_layers, heldout)
            rec["heldout_ppl"] = math.exp(-lp / n)
        history.append(rec)
        if getattr(model, "verbose", False):
            log.info("epoch %(epoch)d loss %(train_loss).4f", rec)
            print(rec, flush=True)
    return params, freq_order, history
