"""LSTM language model with coupled gates, peepholes and a recurrent projection.

One cell step::

    i = sigmoid(W_xi x + W_ri r' + D_i * c' + b_i)
    f = 1 - i
    o = sigmoid(W_xo x + W_ro r' + D_o * c' + b_o)
    c = f * c' + i * tanh(W_xc x + W_rc r' + b_c)
    m = tanh(c) * o
    r = W_rm m

Gate blocks are stacked in the order (i, o, c) in ``W_x``, ``W_r`` and ``b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from ..vocab import Vocabulary
from .base import LanguageModel, LMScoreResult

FORMAT_VERSION = 1


@dataclass(frozen=True)
class LstmCellParams:
    W_x: np.ndarray    # (3*d_m, d_x)
    W_r: np.ndarray    # (3*d_m, d_r)
    D_i: np.ndarray    # (d_m,) diagonal peephole into the input gate
    D_o: np.ndarray    # (d_m,)
    b: np.ndarray      # (3*d_m,)
    W_rm: np.ndarray   # (d_r, d_m)

    def __post_init__(self):
        dm = self.D_i.shape[0]
        dr = self.W_rm.shape[0]
        if (self.W_x.shape[0] != 3 * dm or self.W_r.shape != (3 * dm, dr)
                or self.D_o.shape != (dm,) or self.b.shape != (3 * dm,)
                or self.W_rm.shape != (dr, dm)):
            raise ValueError("inconsistent LSTM cell parameter shapes")

    @property
    def d_x(self) -> int:
        return self.W_x.shape[1]

    @property
    def d_m(self) -> int:
        return self.D_i.shape[0]

    @property
    def d_r(self) -> int:
        return self.W_rm.shape[0]

    def _block(self, M, k):
        dm = self.d_m
        return M[k * dm:(k + 1) * dm]

    W_xi = property(lambda s: s._block(s.W_x, 0))
    W_xo = property(lambda s: s._block(s.W_x, 1))
    W_xc = property(lambda s: s._block(s.W_x, 2))
    W_ri = property(lambda s: s._block(s.W_r, 0))
    W_ro = property(lambda s: s._block(s.W_r, 1))
    W_rc = property(lambda s: s._block(s.W_r, 2))
    b_i = property(lambda s: s._block(s.b, 0))
    b_o = property(lambda s: s._block(s.b, 1))
    b_c = property(lambda s: s._block(s.b, 2))


def cell_forward(params: LstmCellParams, x, prev, return_gates: bool = False):
    """Advance one cell by one step.

    ``x`` is ``(d_x,)`` or ``(B, d_x)``; ``prev`` is ``(c, r)`` with matching
    leading shape. Returns ``((c, r), r)``, plus the gate dict when
    ``return_gates`` is set.
    """
    c_prev, r_prev = prev
    x = np.asarray(x)
    if x.shape[-1] != params.d_x or c_prev.shape[-1] != params.d_m or r_prev.shape[-1] != params.d_r:
        raise ValueError("input/state dimension mismatch")
    dm = params.d_m
    a = x @ params.W_x.T + r_prev @ params.W_r.T + params.b
    a_i = a[..., :dm] + params.D_i * c_prev
    a_o = a[..., dm:2 * dm] + params.D_o * c_prev
    i = expit(a_i)
    f = 1.0 - i
    o = expit(a_o)
    g = np.tanh(a[..., 2 * dm:])
    c = c_prev * f + i * g
    tc = np.tanh(c)
    m = tc * o
    r = m @ params.W_rm.T
    if return_gates:
        return (c, r), r, {"i": i, "f": f, "o": o, "g": g, "c": c, "tanh_c": tc, "m": m}
    return (c, r), r


def layer_param_names(layer: int) -> list[str]:
    return [f"l{layer}.{n}" for n in ("W_x", "W_r", "D_i", "D_o", "b", "W_rm")]


def cell_params(params: dict, layer: int) -> LstmCellParams:
    p = f"l{layer}."
    return LstmCellParams(params[p + "W_x"], params[p + "W_r"], params[p + "D_i"],
                          params[p + "D_o"], params[p + "b"], params[p + "W_rm"])


def init_params(vocab_size: int, embed_dim: int, hidden_dim: int, proj_dim: int,
                num_layers: int, rng: np.random.Generator, scale: float = 0.1,
                unigram: np.ndarray | None = None, dtype=np.float64) -> dict:
    """Random parameters; softmax biases start at the log unigram distribution."""
    p = {"embedding": rng.uniform(-scale, scale, (vocab_size, embed_dim))}
    d_in = embed_dim
    for l in range(num_layers):
        k_in = 1.0 / math.sqrt(d_in + proj_dim)
        p[f"l{l}.W_x"] = rng.uniform(-k_in, k_in, (3 * hidden_dim, d_in))
        p[f"l{l}.W_r"] = rng.uniform(-k_in, k_in, (3 * hidden_dim, proj_dim))
        p[f"l{l}.D_i"] = rng.uniform(-scale, scale, hidden_dim)
        p[f"l{l}.D_o"] = rng.uniform(-scale, scale, hidden_dim)
        p[f"l{l}.b"] = np.zeros(3 * hidden_dim)
        k_m = 1.0 / math.sqrt(hidden_dim)
        p[f"l{l}.W_rm"] = rng.uniform(-k_m, k_m, (proj_dim, hidden_dim))
        d_in = proj_dim
    p["softmax_w"] = rng.uniform(-scale, scale, (vocab_size, proj_dim))
    if unigram is None:
        p["softmax_b"] = np.zeros(vocab_size)
    else:
        u = np.asarray(unigram, dtype=np.float64) + 0.5
        p["softmax_b"] = np.log(u / u.sum())
    return {k: v.astype(dtype) for k, v in p.items()}


class LstmState:
    """Immutable LSTM history: per-layer ``(c, r)`` after consuming the words so far.

    The log normalizer of the next-word distribution is memoized on first
    use; it is derived data, not part of the state's value.
    """

    __slots__ = ("layers", "_lse", "_key")

    def __init__(self, layers):
        self.layers = tuple(layers)
        for c, r in self.layers:
            c.flags.writeable = False
            r.flags.writeable = False
        self._lse = None
        self._key = None

    @property
    def output(self) -> np.ndarray:
        return self.layers[-1][1]

    def key(self) -> bytes:
        if self._key is None:
            self._key = b"".join(a.tobytes() for cr in self.layers for a in cr)
        return self._key

    def __eq__(self, other):
        return isinstance(other, LstmState) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


class NotSelfNormalizedError(RuntimeError):
    pass


class LstmLM(LanguageModel):
    """LSTM language model estimator.

    Hyperparameters follow sklearn conventions; learned tensors live in
    ``params_`` (a name -> array dict). See :func:`latrescore.lm.training.train`
    for the optimization details.
    """

    def __init__(self, vocab: Vocabulary | None = None, embed_dim: int = 64,
                 hidden_dim: int = 256, proj_dim: int = 128, num_layers: int = 2,
                 learning_rate: float = 0.2, unroll: int = 20, batch_size: int = 128,
                 clip_norm: float = 1.0, sample_fraction: float = 0.05,
                 sample_size: int | None = None, alpha: float = 0.01, max_epochs: int = 5,
                 seed: int = 0, init_scale: float = 0.1, dtype: str = "float32",
                 verbose: bool = False):
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.proj_dim = proj_dim
        self.num_layers = num_layers
        self.learning_rate = learning_rate
        self.unroll = unroll
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.sample_fraction = sample_fraction
        self.sample_size = sample_size
        self.alpha = alpha
        self.max_epochs = max_epochs
        self.seed = seed
        self.init_scale = init_scale
        self.dtype = dtype
        self.verbose = verbose

    # -- construction ---------------------------------------------------------

    def fit(self, X, y=None, heldout=None):
        """Train on sentences of word ids (or strings when ``vocab`` is None)."""
        from .ngram import _as_id_corpus
        from .training import TrainConfig, train

        vocab, sents = _as_id_corpus(X, self.vocab)
        if heldout is not None:
            _, heldout = _as_id_corpus(heldout, vocab)
        self.vocab_ = vocab
        config = TrainConfig.from_estimator(self)
        params, freq_order, history = train(self, sents, config, heldout=heldout)
        self._set_fitted(params, freq_order, self.alpha)
        self.history_ = history
        return self

    def initialize(self, vocab: Vocabulary | None = None, seed: int | None = None,
                   zero: bool = False) -> "LstmLM":
        """Random (or all-zero) untrained parameters; useful for tests."""
        vocab = vocab or self.vocab
        if vocab is None:
            raise ValueError("initialize needs a vocabulary")
        self.vocab_ = vocab
        rng = np.random.default_rng(self.seed if seed is None else seed)
        params = init_params(len(vocab), self.embed_dim, self.hidden_dim, self.proj_dim,
                             self.num_layers, rng, self.init_scale)
        if zero:
            params = {k: np.zeros_like(v) for k, v in params.items()}
        self._set_fitted(params, np.arange(len(vocab)), self.alpha)
        return self

    def _set_fitted(self, params: dict, freq_order, alpha: float):
        self.params_ = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
        self.freq_order_ = np.asarray(freq_order, dtype=np.int64)
        self.self_normalized_ = alpha > 0
        self.alpha_ = float(alpha)
        self._refresh()

    def _refresh(self):
        self.cells_ = [cell_params(self.params_, l) for l in range(self.num_layers)]

    @property
    def embedding_(self) -> np.ndarray:
        return self.params_["embedding"]

    @property
    def softmax_w_(self) -> np.ndarray:
        return self.params_["softmax_w"]

    @property
    def softmax_b_(self) -> np.ndarray:
        return self.params_["softmax_b"]

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params_.values()))

    # -- inference ------------------------------------------------------------

    def embed(self, word: int) -> np.ndarray:
        return self.params_["embedding"][word]

    def logits(self, r: np.ndarray) -> np.ndarray:
        """U(w, h) for all w given the final-layer output ``r``."""
        return self.softmax_w_ @ r + self.softmax_b_

    def word_logit(self, r: np.ndarray, word: int) -> float:
        return float(self.softmax_w_[word] @ r + self.softmax_b_[word])

    def lm_start(self) -> LstmState:
        layers = [(np.zeros(c.d_m), np.zeros(c.d_r)) for c in self.cells_]
        return LstmState(layers)

    def forward_step(self, state: LstmState, word: int):
        """Consume ``word``; returns ``(next state, final-layer output r)``."""
        x = self.embed(word)
        layers = []
        for cell, prev in zip(self.cells_, state.layers):
            cr, x = cell_forward(cell, x, prev)
            layers.append(cr)
        return LstmState(layers), x

    def log_normalizer(self, state: LstmState) -> float:
        """ln Z(h) = ln sum_w exp U(w, h)."""
        if state._lse is None:
            state._lse = float(logsumexp(self.logits(state.output)))
        return state._lse

    def full_softmax(self, r: np.ndarray) -> np.ndarray:
        u = self.logits(r)
        return u - logsumexp(u)

    def lm_score(self, state: LstmState, word: int) -> LMScoreResult:
        self.check_word(word)
        lp = self.word_logit(state.output, word) - self.log_normalizer(state)
        nxt, _ = self.forward_step(state, word)
        return LMScoreResult(nxt, lp)

    def score_selfnorm(self, state: LstmState, word: int) -> LMScoreResult:
        """Unnormalized score U(w, h), valid when Z(h) is trained toward 1."""
        if not getattr(self, "self_normalized_", False):
            raise NotSelfNormalizedError("model was not trained with a self-normalization penalty")
        self.check_word(word)
        lp = self.word_logit(state.output, word)
        nxt, _ = self.forward_step(state, word)
        return LMScoreResult(nxt, lp)

    def as_selfnorm(self) -> "SelfNormalizedLM":
        if not getattr(self, "self_normalized_", False):
            raise NotSelfNormalizedError("model was not trained with a self-normalization penalty")
        return SelfNormalizedLM(self)

    def state_key(self, state: LstmState):
        return state.key()

    def pool_states(self, states: Sequence[LstmState], weights: Sequence[float]) -> LstmState:
        """Convex combination of states; c and r pooled with the same weights."""
        if len(states) != len(weights) or not states:
            raise ValueError("need one weight per state")
        if len(states) == 1 and weights[0] == 1.0:
            return states[0]
        layers = []
        for l in range(len(states[0].layers)):
            c = sum(w * s.layers[l][0] for s, w in zip(states, weights))
            r = sum(w * s.layers[l][1] for s, w in zip(states, weights))
            layers.append((np.array(c, dtype=np.float64), np.array(r, dtype=np.float64)))
        return LstmState(layers)

    def forward_sequence(self, words: Sequence[int]) -> np.ndarray:
        """Final-layer outputs after each word, computed as a batch of one."""
        from .training import forward_batch

        tokens = np.asarray(words, dtype=np.int64)[None, :]
        resets = np.zeros_like(tokens, dtype=bool)
        init = [(np.zeros((1, c.d_m)), np.zeros((1, c.d_r))) for c in self.cells_]
        fw = forward_batch(self.params_, self.num_layers, tokens, resets, init)
        return fw.final_state_outputs[:, 0, :]

    # -- persistence ----------------------------------------------------------

    def _meta(self) -> dict:
        return {
            "format": "latrescore-lstm", "version": FORMAT_VERSION,
            "dims": {"vocab": len(self.vocab_), "embed": self.embed_dim,
                     "hidden": self.hidden_dim, "proj": self.proj_dim,
                     "layers": self.num_layers},
            "vocab": self.vocab_.to_json(),
            "self_normalized": bool(self.self_normalized_), "alpha": self.alpha_,
            "hyper": {k: v for k, v in self.get_params().items() if k != "vocab"},
        }

    def _tensors(self) -> dict:
        return {k: v.astype("<f4") for k, v in self.params_.items()}

    def save(self, path) -> None:
        """Write a versioned ``.npz`` container (little-endian float32 tensors)."""
        arrays = self._tensors()
        arrays["__meta__"] = np.array(json.dumps(self._meta()))
        arrays["__freq_order__"] = self.freq_order_.astype("<i4")
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") not in ("latrescore-lstm", "latrescore-lstm-pq"):
                raise ValueError(f"{path}: not an LSTM model container")
            if meta["version"] > FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported container version {meta['version']}")
            vocab = Vocabulary.from_json(meta["vocab"])
            if meta["format"] == "latrescore-lstm-pq":
                from ..quantization import QuantizedLstmLM
                return QuantizedLstmLM._from_container(z, meta, vocab)
            hyper = dict(meta["hyper"])
            model = cls(vocab=vocab, **hyper)
            params = {k: z[k].astype(np.float64) for k in z.files if not k.startswith("__")}
            model.vocab_ = vocab
            model._set_fitted(params, z["__freq_order__"], meta["alpha"])
            model.self_normalized_ = meta["self_normalized"]
        return model


class SelfNormalizedLM(LanguageModel):
    """View of a trained LSTM that scores with raw U(w, h)."""

    def __init__(self, base: LstmLM):
        self.base = base

    @property
    def vocab_(self):
        return self.base.vocab_

    def lm_start(self):
        return self.base.lm_start()

    def lm_score(self, state, word):
        return self.base.score_selfnorm(state, word)

    def state_key(self, state):
        return self.base.state_key(state)

    def pool_states(self, states, weights):
        return self.base.pool_states(states, weights)
