import numpy as np
import pytest

from nereasoner import numerics as nx
from nereasoner.encoder import CharCnn, LstmCell, bilstm_encode, char_features, glorot, lstm_scan, lstm_step
from nereasoner.ingest import Vocab
from nereasoner.numerics import ShapeError, Tape, Tensor


def zero_cell(n_in=2, d=3):
    return LstmCell(Tensor(np.zeros((4 * d, n_in + d)), True, "W"), Tensor(np.zeros(4 * d), True, "b"))


def test_zero_weights_zero_state():
    h, c = lstm_step(zero_cell(), np.ones(2), np.zeros(3), np.zeros(3))
    assert h.data.tolist() == [0.0] * 3 and c.data.tolist() == [0.0] * 3


def test_zero_weights_half_gates():
    c_prev = np.array([1.0, -2.0, 0.5])
    h, c = lstm_step(zero_cell(), np.ones(2), np.zeros(3), c_prev)
    np.testing.assert_allclose(c.data, 0.5 * c_prev, rtol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c_prev), rtol=1e-15)


def test_gate_order_candidate_output_input_forget():
    d = 1
    cell = zero_cell(1, d)
    # candidate pre-activation 2, output gate open, input gate open, forget gate shut
    cell.b.data[:] = [2.0, 50.0, 50.0, -50.0]
    h, c = lstm_step(cell, [0.0], [0.0], [9.0])
    np.testing.assert_allclose(c.data, [np.tanh(2.0)], rtol=1e-12)
    np.testing.assert_allclose(h.data, [np.tanh(np.tanh(2.0))], rtol=1e-12)


def test_init_forget_bias_and_glorot_range():
    rng = np.random.default_rng(0)
    cell = LstmCell.init(rng, 5, 4)
    assert cell.b.data[12:].tolist() == [1.0] * 4 and not cell.b.data[:12].any()
    lim = np.sqrt(6.0 / (16 + 9))
    assert np.abs(cell.W.data).max() <= lim
    assert glorot(rng, (3, 7)).shape == (3, 7)


def test_lstm_step_gradient():
    rng = np.random.default_rng(1)
    cell = LstmCell.init(rng, 3, 4)
    x, h0, c0 = rng.normal(size=3), Tensor(rng.normal(size=4), True), Tensor(rng.normal(size=4), True)

    def f():
        h, c = lstm_step(cell, x, h0, c0)
        return nx.add(nx.tensor_sum(h), nx.scale(nx.tensor_sum(c), 0.3))

    tape = Tape()
    with tape.record():
        loss = f()
    nx.backward(loss)
    for p in (cell.W, cell.b, h0, c0):
        num = nx.finite_difference_grad(lambda: f().item(), p)
        assert np.linalg.norm(p.grad - num) / np.linalg.norm(num) < 1e-4


def test_shape_errors():
    cell = zero_cell()
    with pytest.raises(ShapeError):
        lstm_step(cell, np.ones(3), np.zeros(3), np.zeros(3))
    with pytest.raises(ShapeError):
        lstm_scan(cell, Tensor(np.zeros((1, 2, 5))))


def test_single_token_bilstm():
    rng = np.random.default_rng(2)
    f, b = LstmCell.init(rng, 3, 2), LstmCell.init(rng, 3, 2)
    x = rng.normal(size=(1, 3))
    st = bilstm_encode(f, b, Tensor(x))
    hf, _ = lstm_step(f, x[0], np.zeros(2), np.zeros(2))
    hb, _ = lstm_step(b, x[0], np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(st.h.data[0, 0], np.concatenate([hf.data, hb.data]), rtol=1e-14)


def test_scan_causality():
    rng = np.random.default_rng(3)
    f, b = LstmCell.init(rng, 3, 4), LstmCell.init(rng, 3, 4)
    x = rng.normal(size=(1, 6, 3))
    base = bilstm_encode(f, b, Tensor(x))
    t = 3
    pert = x.copy()
    pert[0, t + 1] += 1.0
    after = bilstm_encode(f, b, Tensor(pert))
    assert after.h_f.data[0, : t + 1].tobytes() == base.h_f.data[0, : t + 1].tobytes()
    pert = x.copy()
    pert[0, t - 1] += 1.0
    after = bilstm_encode(f, b, Tensor(pert))
    assert after.h_b.data[0, t:].tobytes() == base.h_b.data[0, t:].tobytes()


def test_padding_does_not_leak():
    rng = np.random.default_rng(4)
    f, b = LstmCell.init(rng, 3, 4), LstmCell.init(rng, 3, 4)
    short = rng.normal(size=(1, 3, 3))
    padded = np.concatenate([short, rng.normal(size=(1, 2, 3))], axis=1)
    mask = np.array([[True, True, True, False, False]])
    alone = bilstm_encode(f, b, Tensor(short))
    batch = bilstm_encode(f, b, Tensor(padded), mask)
    np.testing.assert_allclose(batch.h.data[0, :3], alone.h.data[0], rtol=1e-13)


def test_char_cnn_properties():
    rng = np.random.default_rng(5)
    chars = Vocab("abcdefg")
    cnn = CharCnn.init(rng, len(chars), 4, 6, 3)
    one = char_features(cnn, "a", chars)
    assert one.shape == (6,) and np.isfinite(one.data).all()
    assert char_features(cnn, "abc", chars).data.tobytes() == char_features(cnn, "abc", chars).data.tobytes()
    perm = rng.permutation(6)
    swapped = CharCnn(cnn.table, Tensor(cnn.filters.data[perm]), Tensor(cnn.bias.data[perm]), 3)
    np.testing.assert_array_equal(char_features(swapped, "fade", chars).data, char_features(cnn, "fade", chars).data[perm])


def test_char_cnn_independent_of_batch_padding():
    rng = np.random.default_rng(6)
    chars = Vocab("abcdefgh")
    cnn = CharCnn.init(rng, len(chars), 3, 5, 3)
    ids = np.array([[chars.lookup_char(c) for c in "ab"] + [0] * 6, [chars.lookup_char(c) for c in "abcdefgh"]])
    out = cnn(ids, np.array([2, 8]))
    np.testing.assert_allclose(out.data[0], char_features(cnn, "ab", chars).data, rtol=1e-14)
    np.testing.assert_allclose(out.data[1], char_features(cnn, "abcdefgh", chars).data, rtol=1e-14)


def test_char_cnn_matches_direct_recomputation():
    rng = np.random.default_rng(7)
    chars = Vocab("xyz")
    cnn = CharCnn.init(rng, len(chars), 2, 3, 3)
    word = "xyzzy"
    ids = [chars.lookup_char(c) for c in word]
    emb = cnn.table.data[ids]
    want = np.max([cnn.filters.data @ emb[i : i + 3].ravel() + cnn.bias.data for i in range(len(word) - 2)], axis=0)
    np.testing.assert_allclose(char_features(cnn, word, chars).data, want, rtol=1e-13)
    with pytest.raises(ValueError):
        char_features(cnn, "", chars)
