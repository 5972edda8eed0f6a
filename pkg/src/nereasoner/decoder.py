"""Unidirectional LSTM tag decoder with prediction feedback.

The cell input at step t is ``[h_t; s_t; p_{t-1}]``: encoder state, the
four reasoner scores and the previous step's tag distribution. The first
layer passes ``s_t = 0`` so every layer shares one parameter set and one
signature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import EncoderStates, LstmCell, _gates, glorot
from .numerics import ContractError, ShapeError, Tensor

N_REFS = 4
O_ID = 0


@dataclass
class DecoderParams:
    cell: LstmCell  # input = 2 * enc_state + 4 + n_tags
    W_out: Tensor  # n_tags x dec_state
    b_out: Tensor

    @classmethod
    def init(cls, rng, enc_state: int, dec_state: int, n_tags: int, dtype=np.float64) -> "DecoderParams":
        cell = LstmCell.init(rng, 2 * enc_state + N_REFS + n_tags, dec_state, "dec", dtype)
        return cls(
            cell,
            Tensor(glorot(rng, (n_tags, dec_state), dtype), True, "out.W"),
            Tensor(np.zeros(n_tags, dtype=dtype), True, "out.b"),
        )

    @property
    def n_tags(self) -> int:
        return self.W_out.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {**self.cell.params(), "out.W": self.W_out, "out.b": self.b_out}


@dataclass
class DecodeResult:
    tag_ids: np.ndarray  # B x T, O at PAD positions
    probs: Tensor  # B x T x K
    log_probs: Tensor  # B x T x K

    def tags(self, tag_names, lengths) -> list[list[str]]:
        return [[tag_names[i] for i in row[:n]] for row, n in zip(self.tag_ids, lengths)]


def decode(params: DecoderParams, H: EncoderStates, refs: Tensor, mask: np.ndarray | None = None,
           gold_feedback: np.ndarray | None = None) -> DecodeResult:
    """Greedy left-to-right decode.

    ``gold_feedback`` (``B x T`` tag ids) replaces the fed-back distribution by
    the one-hot gold tag of the previous step.
    """
    h = H.h
    B, T, e2 = h.shape
    K = params.n_tags
    D = params.cell.state_size
    if refs.shape != (B, T, N_REFS):
        raise ShapeError(f"decode: refs {refs.shape} vs encoder states {h.shape}")
    if e2 + N_REFS + K != params.cell.input_size:
        raise ShapeError(f"decode: cell expects input {params.cell.input_size}, got {e2 + N_REFS + K}")
    dtype = h.data.dtype

    Wt = nx.transpose(params.cell.W)  # (in + D) x 4D
    W_hs, W_p, W_hh = Wt[: e2 + N_REFS], Wt[e2 + N_REFS : e2 + N_REFS + K], Wt[e2 + N_REFS + K :]
    static = nx.concat([h, refs], axis=-1)
    proj = nx.add_bias(nx.matmul(nx.reshape(static, (B * T, e2 + N_REFS)), W_hs), params.cell.b)
    proj = nx.reshape(proj, (B, T, 4 * D))
    W_out_t = nx.transpose(params.W_out)

    p0 = np.zeros((B, K), dtype=dtype)
    p0[:, O_ID] = 1.0
    p_prev = Tensor(p0)
    state = Tensor(np.zeros((B, D), dtype=dtype))
    cell = Tensor(np.zeros((B, D), dtype=dtype))
    logits: list[Tensor] = []
    probs: list[Tensor] = []
    eye = np.eye(K, dtype=dtype)
    for t in range(T):
        z = nx.add(nx.add(proj[:, t], nx.matmul(p_prev, W_p)), nx.matmul(state, W_hh))
        state, cell = _gates(z, D, cell)
        lg = nx.add_bias(nx.matmul(state, W_out_t), params.b_out)
        p = nx.softmax(lg)
        logits.append(lg)
        probs.append(p)
        p_prev = p if gold_feedback is None else Tensor(eye[gold_feedback[:, t]])
    logits_t = nx.stack(logits, axis=1)
    probs_t = nx.stack(probs, axis=1)
    tag_ids = np.argmax(probs_t.data, axis=-1)
    if mask is not None:
        tag_ids = np.where(mask, tag_ids, O_ID)
    return DecodeResult(tag_ids, probs_t, nx.log_softmax(logits_t))


def decode_first_layer(params: DecoderParams, H: EncoderStates, mask=None, gold_feedback=None) -> DecodeResult:
    B, T, _ = H.h.shape
    zeros = Tensor(np.zeros((B, T, N_REFS), dtype=H.h.data.dtype))
    return decode(params, H, zeros, mask, gold_feedback)


def decode_with_reference(params: DecoderParams, H: EncoderStates, refs: Tensor, mask=None,
                          gold_feedback=None) -> DecodeResult:
    r = refs.data
    if r.size and (np.isnan(r).any() or r.min() < 0.0 or r.max() > 1.0):
        raise ContractError("reference components must lie in [0, 1]")
    return decode(params, H, refs, mask, gold_feedback)
