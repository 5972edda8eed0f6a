import math

import numpy as np
import pytest

from nereasoner import encoder as encoder_mod
from nereasoner import model as model_mod
from nereasoner import numerics as nx
from nereasoner.config import ModelConfig
from nereasoner.ingest import Sentence, TagSet, Vocab
from nereasoner.model import NEReasoner, TrainingDiverged, clone, load_checkpoint, save_checkpoint, train, train_step
from nereasoner.numerics import CheckpointError, ContractError, OptimizerState
from nereasoner.synthetic import overfit_corpus

SMALL = dict(word_dim=6, char_emb=4, cnn_filters=5, bilstm_state=4, decoder_state=5, batch_size=4)


def make(sentences=None, **kw):
    sentences = sentences or overfit_corpus(12, seed=3)
    cfg = ModelConfig(**{**SMALL, **kw})
    return NEReasoner(cfg, Vocab.for_words(sentences), Vocab.for_chars(sentences), TagSet.from_sentences(sentences)), sentences


def test_parameter_names_and_sizes():
    m, _ = make()
    names = list(m.parameters())
    assert names[0] == "word.emb"
    assert names[1:4] == ["char.emb", "char.filters", "char.bias"]
    assert {"enc.fwd.W", "enc.bwd.b", "dec.W", "dec.b", "out.W", "out.b"} <= set(names)
    K = len(m.tagset)
    assert m.parameters()["dec.W"].shape == (4 * 5, 2 * 4 + 4 + K + 5)
    no_cnn, _ = make(char_encoder="none")
    assert "char.emb" not in no_cnn.parameters()
    assert no_cnn.enc_fwd.input_size == 6


def test_forward_structure():
    m, sents = make()
    (b, *_) = m.batches(sents)
    tr = m.forward(b)
    assert len(tr.layers) == 2
    assert tr.layers[0].input_pool.size == 0
    assert not tr.layers[0].refs.data.any()
    assert tr.layers[1].input_pool is tr.layers[0].pool
    for layer in tr.layers:
        assert [len(t) for t in layer.tags] == b.lengths
        assert set(x for t in layer.tags for x in t) <= set(m.tagset.tags)
    assert len(m.forward(b, depth=1).layers) == 1


def test_encoder_runs_once_per_forward(monkeypatch):
    m, sents = make(depth=3)
    calls = []
    real = model_mod.bilstm_encode

    def counting(*a, **kw):
        calls.append(1)
        return real(*a, **kw)

    monkeypatch.setattr(model_mod, "bilstm_encode", counting)
    m.forward(m.batches(sents)[0])
    assert len(calls) == 1
    assert encoder_mod.bilstm_encode is real


def test_zero_reference_equivalence_without_pool():
    m, sents = make()
    for b in m.batches(sents):
        tr = m.forward(b, use_pool=False, depth=3)
        first = tr.layers[0].result.probs.data.tobytes()
        assert all(layer.result.probs.data.tobytes() == first for layer in tr.layers[1:])


def test_zero_entity_fixpoint():
    m, sents = make(depth=3)
    m.decoder.b_out.data[0] = 100.0  # every token decodes to O
    b = m.batches(sents)[0]
    tr = m.forward(b)
    assert tr.layers[0].pool.size == 0
    assert tr.layers[1].tags == tr.layers[0].tags == tr.layers[2].tags
    assert tr.layers[2].result.probs.data.tobytes() == tr.layers[0].result.probs.data.tobytes()


def test_ref_hook_rewrites_scores():
    m, sents = make()
    b = m.batches(sents)[0]
    tr = m.forward(b, ref_hook=lambda layer, s: np.ones_like(s) if layer == 1 else s)
    assert (tr.layers[1].refs.data == 1.0).all()
    assert not tr.layers[0].refs.data.any()


def test_loss_definitions():
    m, sents = make()
    b = m.batches(sents)[0]
    tr = m.forward(b)
    n_tok = int(b.mask.sum())
    batch = m.compute_loss(tr, "last_layer", "batch").item()
    assert m.compute_loss(tr, "last_layer", "sentence").item() == pytest.approx(batch / b.size, rel=1e-12)
    assert m.compute_loss(tr, "last_layer", "token").item() == pytest.approx(batch / n_tok, rel=1e-12)
    both = m.compute_loss(tr, "all_layers", "batch").item()
    assert both >= batch
    lp = tr.layers[0].result.log_probs.data
    manual = -sum(lp[i, t, b.tag_ids[i, t]] for i, t in zip(*np.nonzero(b.mask)))
    assert both == pytest.approx(batch + manual, rel=1e-12)


def test_loss_uniform_and_perfect():
    m, sents = make()
    b = m.batches(sents)[0]
    K = len(m.tagset)
    m.decoder.W_out.data[:] = 0.0
    m.decoder.b_out.data[:] = 0.0
    tr = m.forward(b, depth=1)
    assert m.compute_loss(tr, reduction="token").item() == pytest.approx(math.log(K), rel=1e-12)
    # put all mass on the gold tag
    tr.layers[0].result.log_probs.data[:] = -1e300
    for i, t in zip(*np.nonzero(b.mask)):
        tr.layers[0].result.log_probs.data[i, t, b.tag_ids[i, t]] = 0.0
    assert m.compute_loss(tr).item() == 0.0


def test_loss_needs_gold():
    m, sents = make()
    b = m.batches([Sentence(s.tokens) for s in sents])[0]
    with pytest.raises(ContractError):
        m.compute_loss(m.forward(b))


def test_lr_zero_keeps_parameters_and_dev_scores():
    m, sents = make()
    cfg = m.config.replace(learning_rate=0.0, max_epochs=3, patience=5)
    before = m.state_dict()
    res = train(cfg, sents, sents[:4], model=m)
    assert all(before[k].tobytes() == v.tobytes() for k, v in m.state_dict().items())
    f1s = [h["L2_F1"] for h in res.history]
    assert len(set(f1s)) == 1


def test_training_is_deterministic(tmp_path):
    logs = []
    for run in range(2):
        m, sents = make()
        cfg = m.config.replace(max_epochs=2)
        train(cfg, sents, sents[:4], model=m, log_path=tmp_path / f"log{run}.csv",
              checkpoint_path=tmp_path / f"m{run}.bin")
        logs.append((tmp_path / f"log{run}.csv").read_bytes())
    assert logs[0] == logs[1]
    assert (tmp_path / "m0.bin").read_bytes() == (tmp_path / "m1.bin").read_bytes()
    header = logs[0].decode().splitlines()[0]
    assert header == "epoch,loss,L1_P,L1_R,L1_F1,L2_P,L2_R,L2_F1"


def test_training_reduces_loss():
    m, sents = make()
    opt = OptimizerState(0.01, 5.0)
    b = m.batches(sents)[0]
    first = train_step(m, b, opt)
    for _ in range(30):
        last = train_step(m, b, opt)
    assert last < first


def test_divergence_is_reported():
    m, sents = make()
    m.decoder.W_out.data[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train_step(m, m.batches(sents)[0], OptimizerState(0.01))


def test_early_stopping_restores_best(tmp_path):
    m, sents = make()
    cfg = m.config.replace(max_epochs=6, patience=1)
    res = train(cfg, sents, sents[:4], model=m, checkpoint_path=tmp_path / "best.bin")
    assert len(res.history) <= 6
    best = load_checkpoint(tmp_path / "best.bin")
    for k, v in best.state_dict().items():
        assert v.tobytes() == m.state_dict()[k].tobytes()


def test_checkpoint_round_trip_and_depth_override(tmp_path):
    m, sents = make()
    path = tmp_path / "m.bin"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    for b in m.batches(sents):
        a, c = m.forward(b), back.forward(b)
        for la, lc in zip(a.layers, c.layers):
            assert la.result.probs.data.tobytes() == lc.result.probs.data.tobytes()
    deep = load_checkpoint(path, depth=3)
    b = m.batches(sents)[0]
    t3 = deep.forward(b)
    assert len(t3.layers) == 3
    assert t3.layers[1].result.probs.data.tobytes() == m.forward(b).layers[1].result.probs.data.tobytes()


def test_checkpoint_errors(tmp_path):
    m, _ = make()
    path = tmp_path / "m.bin"
    save_checkpoint(m, path)
    (tmp_path / "t.bin").write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")
    other, _ = make(bilstm_state=3)
    with pytest.raises(CheckpointError, match="shape"):
        other.load_state_dict(m.state_dict())


def test_clone_is_independent():
    m, sents = make()
    c = clone(m)
    c.decoder.b_out.data[:] += 1.0
    assert not np.array_equal(c.decoder.b_out.data, m.decoder.b_out.data)


def test_embeddings_shape_checked():
    sents = overfit_corpus(4)
    with pytest.raises(ValueError):
        NEReasoner(ModelConfig(**SMALL), Vocab.for_words(sents), Vocab.for_chars(sents),
                   TagSet.from_sentences(sents), np.zeros((3, 6)))


def test_full_model_gradient_small():
    s = [Sentence(["Ann", "saw", "Rome"], ["B-PER", "O", "B-LOC"])]
    m, _ = make(s, loss_mode="all_layers", bilstm_state=3, decoder_state=3, word_dim=3, char_emb=2, cnn_filters=2)
    b = m.batches(s)[0]
    pools = {1: m.gold_pool(b, m.forward(b).states)}
    tape = nx.Tape()
    with tape.record():
        loss = m.compute_loss(m.forward(b, pools=pools))
    nx.backward(loss)
    for k, p in m.parameters().items():
        num = nx.finite_difference_grad(lambda: m.compute_loss(m.forward(b, pools=pools)).item(), p)
        err = np.linalg.norm(num - p.grad) / max(np.linalg.norm(num), 1e-12)
        assert err < 1e-4, k
