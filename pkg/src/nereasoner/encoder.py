"""Word/character features and the bidirectional LSTM encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


def glorot(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class LstmCell:
    """``W`` is ``4d x (in + d)`` with row blocks ordered (candidate, output, input, forget)."""

    W: Tensor
    b: Tensor

    @property
    def state_size(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[1] - self.state_size

    @classmethod
    def init(cls, rng, input_size: int, state_size: int, name: str = "lstm", dtype=np.float64) -> "LstmCell":
        W = glorot(rng, (4 * state_size, input_size + state_size), dtype)
        b = np.zeros(4 * state_size, dtype=dtype)
        b[3 * state_size :] = 1.0  # forget gate
        return cls(Tensor(W, True, f"{name}.W"), Tensor(b, True, f"{name}.b"))

    def params(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}


def _gates(z: Tensor, d: int, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    cand = nx.tanh(z[:, :d])
    sig = nx.sigmoid(z[:, d:])
    o, i, f = sig[:, :d], sig[:, d : 2 * d], sig[:, 2 * d :]
    c = nx.add(nx.mul(cand, i), nx.mul(c_prev, f))
    h = nx.mul(o, nx.tanh(c))
    return h, c


def lstm_step(cell: LstmCell, x_t, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    """One LSTM update on ``[x_t; h_prev]``. Accepts single vectors or ``B x .`` rows."""
    x_t, h_prev, c_prev = nx.as_tensor(x_t), nx.as_tensor(h_prev), nx.as_tensor(c_prev)
    d = cell.state_size
    single = x_t.ndim == 1
    if single:
        x_t, h_prev, c_prev = (nx.reshape(t, (1, -1)) for t in (x_t, h_prev, c_prev))
    if x_t.shape[1] != cell.input_size or h_prev.shape[1] != d or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} do not fit cell "
            f"(in={cell.input_size}, d={d})"
        )
    z = nx.add_bias(nx.matmul(nx.concat([x_t, h_prev]), nx.transpose(cell.W)), cell.b)
    h, c = _gates(z, d, c_prev)
    if single:
        h, c = nx.reshape(h, (d,)), nx.reshape(c, (d,))
    return h, c


def lstm_scan(cell: LstmCell, xs: Tensor, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Run ``cell`` over ``B x T x in`` inputs from zero state; returns ``B x T x d``.

    The input projection for all steps is one matmul. Masked (PAD) steps keep
    the previous state, so a reverse scan starts fresh at each sentence's end.
    """
    B, T, n_in = xs.shape
    d = cell.state_size
    if n_in != cell.input_size:
        raise ShapeError(f"lstm_scan: input width {n_in} vs cell input {cell.input_size}")
    Wt = nx.transpose(cell.W)
    Wx, Wh = Wt[:n_in], Wt[n_in:]
    proj = nx.add_bias(nx.matmul(nx.reshape(xs, (B * T, n_in)), Wx), cell.b)
    proj = nx.reshape(proj, (B, T, 4 * d))
    dtype = xs.data.dtype
    h = Tensor(np.zeros((B, d), dtype=dtype))
    c = Tensor(np.zeros((B, d), dtype=dtype))
    outs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = nx.add(proj[:, t], nx.matmul(h, Wh))
        h_new, c_new = _gates(z, d, c)
        if mask is not None and not mask[:, t].all():
            m = np.broadcast_to(mask[:, t, None], (B, d)).astype(dtype)
            keep = Tensor(m)
            hold = Tensor(1.0 - m)
            h_new = nx.add(nx.mul(h_new, keep), nx.mul(h, hold))
            c_new = nx.add(nx.mul(c_new, keep), nx.mul(c, hold))
        h, c = h_new, c_new
        outs[t] = h
    return nx.stack(outs, axis=1)


@dataclass
class CharCnn:
    """Character embeddings, width-``window`` convolution, max over positions."""

    table: Tensor  # chars x char_emb
    filters: Tensor  # n_filters x (window * char_emb)
    bias: Tensor  # n_filters
    window: int = 3

    @classmethod
    def init(cls, rng, n_chars: int, char_emb: int, n_filters: int, window: int, dtype=np.float64) -> "CharCnn":
        lim = np.sqrt(3.0 / char_emb)
        table = rng.uniform(-lim, lim, size=(n_chars, char_emb)).astype(dtype)
        table[0] = 0.0
        filters = glorot(rng, (n_filters, window * char_emb), dtype)
        return cls(
            Tensor(table, True, "char.emb"),
            Tensor(filters, True, "char.filters"),
            Tensor(np.zeros(n_filters, dtype=dtype), True, "char.bias"),
            window,
        )

    @property
    def out_size(self) -> int:
        return self.filters.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.table, self.filters, self.bias)}

    def __call__(self, char_ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """``N x L`` char ids with per-word lengths to ``N x n_filters`` features.

        Words are right-padded to at least ``window``; only windows inside the
        padded word take part in the max, so features do not depend on how far
        the surrounding batch is padded.
        """
        N, L = char_ids.shape
        w = self.window
        if L < w:
            char_ids = np.pad(char_ids, ((0, 0), (0, w - L)))
            L = w
        n_win = L - w + 1
        starts = np.arange(n_win)[:, None] + np.arange(w)[None, :]  # n_win x w
        win_ids = char_ids[:, starts]  # N x n_win x w
        emb = nx.take_rows(self.table, win_ids)  # N x n_win x w x e
        flat = nx.reshape(emb, (N * n_win, w * self.table.shape[1]))
        conv = nx.add_bias(nx.matmul(flat, nx.transpose(self.filters)), self.bias)
        conv = nx.reshape(conv, (N, n_win, self.out_size))
        valid = np.arange(n_win)[None, :] < (np.maximum(lengths, w) - w + 1)[:, None]
        if not valid.all():
            penalty = np.where(valid, 0.0, -1e30).astype(conv.data.dtype)
            conv = nx.add(conv, Tensor(np.broadcast_to(penalty[:, :, None], conv.shape).copy()))
        return nx.max_over(conv, axis=1)


def char_features(cnn: CharCnn, word: str, chars) -> Tensor:
    """Features of a single word; unseen characters map to the UNK char row."""
    if not word:
        raise ValueError("empty word")
    ids = np.array([[chars.lookup_char(ch) for ch in word]], dtype=np.int64)
    return nx.reshape(cnn(ids, np.array([len(word)])), (cnn.out_size,))


@dataclass
class EncoderStates:
    h_f: Tensor  # B x T x d
    h_b: Tensor  # B x T x d
    h: Tensor  # B x T x 2d

    @property
    def state_size(self) -> int:
        return self.h_f.shape[-1]


def bilstm_encode(fwd: LstmCell, bwd: LstmCell, xs: Tensor, mask: np.ndarray | None = None) -> EncoderStates:
    if xs.ndim == 2:
        xs = nx.reshape(xs, (1,) + xs.shape)
        mask = None if mask is None else np.asarray(mask).reshape(1, -1)
    if xs.shape[1] < 1:
        raise ShapeError("bilstm_encode: empty sequence")
    h_f = lstm_scan(fwd, xs, mask, reverse=False)
    h_b = lstm_scan(bwd, xs, mask, reverse=True)
    return EncoderStates(h_f, h_b, nx.concat([h_f, h_b], axis=-1))
