"""Product quantization of the embedding and softmax matrices.

Each matrix is cut column-wise into equal chunks and every chunk gets its
own k-means codebook. A row is stored as one code per chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.cluster import kmeans_plusplus

from .lm.lstm import LstmLM
from .validation import check_matrix

QUANTIZED_MATRICES = ("embedding", "softmax_w")
_FLOAT_BYTES = 4


@dataclass(frozen=True)
class PQCodebook:
    """Per-chunk centers (float32) and per-row codes.

    ``centers[j]`` has shape ``(n_j, chunk_size)`` with ``n_j <= n_centers``.
    ``dim`` is the unpadded row width; the last ``padding`` columns of the
    padded layout are zeros.
    """

    chunk_size: int
    dim: int
    n_centers: int
    centers: tuple
    codes: np.ndarray
    inertia: tuple = field(default=(), compare=False)
    history: tuple = field(default=(), compare=False)

    @property
    def num_chunks(self) -> int:
        return len(self.centers)

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def padding(self) -> int:
        return self.num_chunks * self.chunk_size - self.dim

    @property
    def code_bits(self) -> int:
        return math.ceil(math.log2(self.n_centers)) if self.n_centers > 1 else 0

    def compressed_bytes(self) -> int:
        center_bytes = sum(c.shape[0] for c in self.centers) * self.chunk_size * _FLOAT_BYTES
        return center_bytes + math.ceil(self.rows * self.num_chunks * self.code_bits / 8)

    def original_bytes(self) -> int:
        return self.rows * self.dim * _FLOAT_BYTES

    def row(self, i: int) -> np.ndarray:
        """One reconstructed row (float64), without building the matrix."""
        out = np.concatenate([c[k] for c, k in zip(self.centers, self.codes[i])])
        return out[:self.dim].astype(np.float64)

    def equals(self, other: "PQCodebook") -> bool:
        return (self.chunk_size == other.chunk_size and self.dim == other.dim
                and self.num_chunks == other.num_chunks
                and all(np.array_equal(a, b) for a, b in zip(self.centers, other.centers))
                and np.array_equal(self.codes, other.codes))


def _sq_dists(X, C, block: int = 1024):
    # explicit differences: exact zero for duplicate rows
    out = np.empty((len(X), len(C)))
    for s in range(0, len(X), block):
        diff = X[s:s + block, None, :] - C[None, :, :]
        out[s:s + block] = np.einsum("rcd,rcd->rc", diff, diff)
    return out


def _assign(X, C):
    d = _sq_dists(X, C)
    codes = d.argmin(1)
    return codes, float(d[np.arange(len(X)), codes].sum())


def _exact_inertia(X, C, codes):
    diff = X - C[codes]
    return float((diff * diff).sum())


def _kmeans(X, n_centers, iters, tol, rng):
    """k-means++ seeding then Lloyd iterations. Returns (centers, history)."""
    C, _ = kmeans_plusplus(X, n_centers, random_state=rng)
    history = []
    codes, inertia = _assign(X, C)
    history.append(inertia)
    for _ in range(iters):
        sums = np.zeros_like(C)
        np.add.at(sums, codes, X)
        counts = np.bincount(codes, minlength=len(C))
        nz = counts > 0
        C = C.copy()
        C[nz] = sums[nz] / counts[nz, None]
        codes, new = _assign(X, C)
        history.append(new)
        if inertia == 0.0 or abs(inertia - new) <= tol * inertia:
            break
        inertia = new
    return C, history


def _canonical(C, X):
    """Round centers to float32, drop unused ones and sort them lexicographically."""
    C = C.astype(np.float32)
    codes, _ = _assign(X, C.astype(np.float64))
    used = np.unique(codes)
    C = C[used]
    order = np.lexsort(C.T[::-1])
    C = C[order]
    codes, _ = _assign(X, C.astype(np.float64))
    return C, codes


def pq_train(matrix, chunk_size: int = 4, n_centers: int = 256, iters: int = 20,
             seed: int = 0, tol: float = 1e-6) -> PQCodebook:
    """Fit one codebook per column chunk.

    Rows are zero-padded on the right when ``chunk_size`` does not divide
    the width. A chunk whose rows take at most ``n_centers`` distinct
    values is stored exactly.
    """
    M = check_matrix(matrix, "matrix")
    rows, dim = M.shape
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if not 1 <= n_centers <= rows:
        raise ValueError(f"n_centers must be in [1, rows={rows}], got {n_centers}")
    n_chunks = -(-dim // chunk_size)
    pad = n_chunks * chunk_size - dim
    if pad:
        M = np.hstack([M, np.zeros((rows, pad))])
    rng = np.random.RandomState(seed)
    centers, codes = [], np.zeros((rows, n_chunks), dtype=np.int64)
    inertia, history = [], []
    for j in range(n_chunks):
        X = np.ascontiguousarray(M[:, j * chunk_size:(j + 1) * chunk_size])
        uniq, inv = np.unique(X.astype(np.float32), axis=0, return_inverse=True)
        if len(uniq) <= n_centers:
            # np.unique already sorts lexicographically
            C, cj, hist = uniq, inv.reshape(-1), ()
        else:
            C, hist = _kmeans(X, n_centers, iters, tol, rng)
            C, cj = _canonical(C, X)
        centers.append(C)
        codes[:, j] = cj
        inertia.append(_exact_inertia(X, C.astype(np.float64), cj))
        history.append(tuple(hist))
    dtype = np.uint8 if n_centers <= 256 else np.uint16 if n_centers <= 65536 else np.uint32
    return PQCodebook(chunk_size, dim, n_centers, tuple(centers), codes.astype(dtype),
                      tuple(inertia), tuple(history))


def pq_reconstruct(codebook: PQCodebook) -> np.ndarray:
    parts = [c[codebook.codes[:, j]] for j, c in enumerate(codebook.centers)]
    if not parts:
        return np.zeros((codebook.rows, 0))
    return np.hstack(parts)[:, :codebook.dim].astype(np.float64)


def pq_encode(codebook: PQCodebook, matrix) -> np.ndarray:
    """Nearest-center codes for new rows."""
    M = check_matrix(matrix, "matrix")
    if M.shape[1] != codebook.dim:
        raise ValueError(f"expected width {codebook.dim}, got {M.shape[1]}")
    if codebook.padding:
        M = np.hstack([M, np.zeros((len(M), codebook.padding))])
    cs = codebook.chunk_size
    out = np.zeros((len(M), codebook.num_chunks), dtype=codebook.codes.dtype)
    for j, C in enumerate(codebook.centers):
        out[:, j] = _assign(M[:, j * cs:(j + 1) * cs], C.astype(np.float64))[0]
    return out


def pq_mse(codebook: PQCodebook, matrix) -> float:
    diff = pq_reconstruct(codebook) - np.asarray(matrix, dtype=np.float64)
    return float((diff * diff).mean())


def _lookup_tables(codebook: PQCodebook, r) -> list[np.ndarray]:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (codebook.dim,):
        raise ValueError(f"vector of length {codebook.dim} expected, got shape {r.shape}")
    if codebook.padding:
        r = np.concatenate([r, np.zeros(codebook.padding)])
    cs = codebook.chunk_size
    return [C.astype(np.float64) @ r[j * cs:(j + 1) * cs] for j, C in enumerate(codebook.centers)]


def pq_logits(codebook: PQCodebook, r, bias=None) -> np.ndarray:
    """``reconstructed @ r + bias`` via per-chunk dot-product tables."""
    tables = _lookup_tables(codebook, r)
    out = np.zeros(codebook.rows) if bias is None else np.array(bias, dtype=np.float64)
    for j, t in enumerate(tables):
        out += t[codebook.codes[:, j]]
    return out


def pq_row_dot(codebook: PQCodebook, row: int, r) -> float:
    """One entry of ``pq_logits`` without the bias."""
    cs = codebook.chunk_size
    r = np.asarray(r, dtype=np.float64)
    total = 0.0
    for j, C in enumerate(codebook.centers):
        seg = r[j * cs:(j + 1) * cs]
        total += float(C[codebook.codes[row, j], :len(seg)].astype(np.float64) @ seg)
    return total


@dataclass
class MatrixReport:
    rows: int
    dim: int
    original_bytes: int
    compressed_bytes: int
    mse: float

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.compressed_bytes


@dataclass
class CompressionReport:
    """Byte accounting for the quantized matrices (biases excluded)."""

    matrices: dict
    chunk_size: int
    n_centers: int

    @property
    def original_bytes(self) -> int:
        return sum(m.original_bytes for m in self.matrices.values())

    @property
    def compressed_bytes(self) -> int:
        return sum(m.compressed_bytes for m in self.matrices.values())

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.compressed_bytes

    def __str__(self) -> str:
        lines = [f"product quantization: chunk_size={self.chunk_size} centers={self.n_centers}",
                 f"{'matrix':<12}{'rows':>8}{'dim':>6}{'orig_bytes':>14}{'pq_bytes':>12}"
                 f"{'ratio':>9}{'mse':>13}"]
        for name, m in self.matrices.items():
            lines.append(f"{name:<12}{m.rows:>8}{m.dim:>6}{m.original_bytes:>14}"
                         f"{m.compressed_bytes:>12}{m.ratio:>9.3f}{m.mse:>13.4e}")
        lines.append(f"{'total':<26}{self.original_bytes:>14}{self.compressed_bytes:>12}"
                     f"{self.ratio:>9.3f}")
        return "\n".join(lines)


def report_for(codebooks: dict, originals: dict) -> CompressionReport:
    mats = {name: MatrixReport(cb.rows, cb.dim, cb.original_bytes(), cb.compressed_bytes(),
                               pq_mse(cb, originals[name]))
            for name, cb in codebooks.items()}
    cb = next(iter(codebooks.values()))
    return CompressionReport(mats, cb.chunk_size, cb.n_centers)


class ProductQuantizer(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`pq_train`.

    ``transform`` maps rows to codes; ``inverse_transform`` maps codes back
    to reconstructed rows.
    """

    def __init__(self, chunk_size: int = 4, n_centers: int = 256, n_iter: int = 20,
                 tol: float = 1e-6, seed: int = 0):
        self.chunk_size = chunk_size
        self.n_centers = n_centers
        self.n_iter = n_iter
        self.tol = tol
        self.seed = seed

    def fit(self, X, y=None):
        self.codebook_ = pq_train(X, self.chunk_size, self.n_centers, self.n_iter, self.seed,
                                  self.tol)
        self.n_features_in_ = self.codebook_.dim
        return self

    def transform(self, X):
        return pq_encode(self.codebook_, X)

    def inverse_transform(self, codes):
        codes = np.asarray(codes)
        cs = self.codebook_
        parts = [c[codes[:, j]] for j, c in enumerate(cs.centers)]
        return np.hstack(parts)[:, :cs.dim].astype(np.float64)

    def score(self, X, y=None) -> float:
        """Negative reconstruction MSE."""
        X = check_matrix(X, "X")
        return -float(((self.inverse_transform(self.transform(X)) - X) ** 2).mean())


class QuantizedLstmLM(LstmLM):
    """LSTM model whose embedding and softmax weights are PQ codebooks.

    Embedding rows are reconstructed on demand and logits use lookup
    tables. All other tensors are the original ones.
    """

    def embed(self, word: int) -> np.ndarray:
        return self.codebooks_["embedding"].row(word)

    def logits(self, r: np.ndarray) -> np.ndarray:
        return pq_logits(self.codebooks_["softmax_w"], r, self.softmax_b_)

    def word_logit(self, r: np.ndarray, word: int) -> float:
        return pq_row_dot(self.codebooks_["softmax_w"], word, r) + float(self.softmax_b_[word])

    @property
    def embedding_(self) -> np.ndarray:
        return pq_reconstruct(self.codebooks_["embedding"])

    @property
    def softmax_w_(self) -> np.ndarray:
        return pq_reconstruct(self.codebooks_["softmax_w"])

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params_.values()))

    def fit(self, X, y=None, heldout=None):
        raise TypeError("quantized models are built with quantize_model, not trained")

    def forward_sequence(self, words):
        state = self.lm_start()
        out = []
        for w in words:
            state, r = self.forward_step(state, w)
            out.append(r)
        return np.array(out)

    # -- persistence ------------------------------------------------------------

    def _meta(self) -> dict:
        meta = super()._meta()
        meta["format"] = "latrescore-lstm-pq"
        meta["codebooks"] = {
            name: {"chunk_size": cb.chunk_size, "dim": cb.dim, "n_centers": cb.n_centers,
                   "num_chunks": cb.num_chunks, "padding": cb.padding}
            for name, cb in self.codebooks_.items()}
        return meta

    def _tensors(self) -> dict:
        out = super()._tensors()
        for name, cb in self.codebooks_.items():
            sizes = [c.shape[0] for c in cb.centers]
            out[f"pq.{name}.centers"] = np.concatenate(cb.centers).astype("<f4")
            out[f"pq.{name}.offsets"] = np.concatenate([[0], np.cumsum(sizes)]).astype("<i4")
            out[f"pq.{name}.codes"] = cb.codes.astype(cb.codes.dtype.newbyteorder("<"))
        return out

    @classmethod
    def _from_container(cls, z, meta, vocab) -> "QuantizedLstmLM":
        model = cls(vocab=vocab, **meta["hyper"])
        model.vocab_ = vocab
        params, codebooks = {}, {}
        for k in z.files:
            if k.startswith("__") or k.startswith("pq."):
                continue
            params[k] = z[k].astype(np.float64)
        for name, info in meta["codebooks"].items():
            flat = z[f"pq.{name}.centers"].astype(np.float32)
            off = z[f"pq.{name}.offsets"]
            centers = tuple(flat[off[j]:off[j + 1]] for j in range(info["num_chunks"]))
            codebooks[name] = PQCodebook(info["chunk_size"], info["dim"], info["n_centers"],
                                         centers, np.array(z[f"pq.{name}.codes"]))
        model._set_quantized(params, codebooks, z["__freq_order__"], meta["alpha"])
        model.self_normalized_ = meta["self_normalized"]
        return model

    def _set_quantized(self, params, codebooks, freq_order, alpha):
        self.codebooks_ = dict(codebooks)
        self._set_fitted(params, freq_order, alpha)


def quantize_model(model: LstmLM, chunk_size: int = 4, n_centers: int = 256, iters: int = 20,
                   seed: int = 0) -> tuple[QuantizedLstmLM, CompressionReport]:
    """Replace the embedding and softmax matrices of a trained model by codebooks.

    ``n_centers`` is capped at the vocabulary size; every other tensor is
    carried over unchanged.
    """
    if not hasattr(model, "params_"):
        raise ValueError("model is not trained")
    if isinstance(model, QuantizedLstmLM):
        raise ValueError("model is already quantized")
    originals = {name: model.params_[name] for name in QUANTIZED_MATRICES}
    n_eff = min(n_centers, len(model.vocab_))
    codebooks = {name: pq_train(M.astype(np.float32), chunk_size, n_eff, iters, seed)
                 for name, M in originals.items()}
    q = QuantizedLstmLM(**model.get_params())
    q.vocab_ = model.vocab_
    rest = {k: v for k, v in model.params_.items() if k not in QUANTIZED_MATRICES}
    q._set_quantized(rest, codebooks, model.freq_order_, model.alpha_)
    q.self_normalized_ = model.self_normalized_
    report = report_for(codebooks, originals)
    report.n_centers = n_centers
    return q, report


def compression_ratio_formula(rows: int, chunk_size: int = 4, n_centers: int = 256) -> float:
    """Closed-form ratio for one float32 matrix with every center used."""
    bits = math.ceil(math.log2(n_centers))
    return (32 * chunk_size) / (bits + 32 * chunk_size * n_centers / rows)
