"""Layer-by-layer tagging with a candidate pool rebuilt between layers."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .decoder import DecodeResult, DecoderParams, decode_first_layer, decode_with_reference
from .encoder import CharCnn, EncoderStates, LstmCell, bilstm_encode
from .evaluation import EvalReport, layer_diff, layer_name
from .ingest import PAD, Batch, Sentence, TagSet, Vocab, make_batches, normalize_tags
from .memory import CandidatePool, build_pool, extract_spans, update_pool
from .numerics import CheckpointError, ContractError, OptimizerState, Tape, Tensor
from .reasoner import references

logger = logging.getLogger(__name__)

RefHook = Callable[[int, np.ndarray], np.ndarray]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LayerOutput:
    result: DecodeResult
    tags: list[list[str]]
    refs: Tensor  # B x T x 4, the suggestion this layer decoded with
    ref_argmax: np.ndarray  # B x T x 4 pool rows, -1 for an empty pool
    input_pool: CandidatePool  # pool this layer consulted (empty for layer 1)
    pool: CandidatePool  # pool built from this layer's output


@dataclass
class LayerTrace:
    layers: list[LayerOutput]
    batch: Batch
    states: EncoderStates

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]

    def __len__(self):
        return len(self.layers)


class NEReasoner:
    def __init__(self, config: ModelConfig, vocab: Vocab, chars: Vocab, tagset: TagSet,
                 embeddings: np.ndarray | None = None):
        self.config = config
        self.vocab = vocab
        self.chars = chars
        self.tagset = tagset
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        if embeddings is None:
            emb = rng.uniform(-0.25, 0.25, size=(len(vocab), config.word_dim))
            emb[PAD] = 0.0
        else:
            if embeddings.shape != (len(vocab), config.word_dim):
                raise ValueError(f"embeddings {embeddings.shape} vs vocab x word_dim {(len(vocab), config.word_dim)}")
            emb = np.array(embeddings, copy=True)
        self.word_emb = Tensor(emb.astype(dtype), config.train_embeddings, "word.emb")
        in_size = config.word_dim
        self.char_cnn: CharCnn | None = None
        if config.char_encoder == "cnn":
            self.char_cnn = CharCnn.init(rng, len(chars), config.char_emb, config.cnn_filters, config.cnn_window, dtype)
            in_size += config.cnn_filters
        d = config.bilstm_state
        self.enc_fwd = LstmCell.init(rng, in_size, d, "enc.fwd", dtype)
        self.enc_bwd = LstmCell.init(rng, in_size, d, "enc.bwd", dtype)
        self.decoder = DecoderParams.init(rng, d, config.decoder_state, len(tagset), dtype)

    # ------------------------------------------------------------------ params

    def parameters(self) -> dict[str, Tensor]:
        out = {"word.emb": self.word_emb}
        if self.char_cnn is not None:
            out.update(self.char_cnn.params())
        out.update(self.enc_fwd.params())
        out.update(self.enc_bwd.params())
        out.update(self.decoder.params())
        return out

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters().values() if p.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"parameter {k}: shape {state[k].shape}, model expects {p.shape}")
            p.data = np.ascontiguousarray(state[k], dtype=p.data.dtype).copy()

    # ----------------------------------------------------------------- forward

    def batches(self, sentences: Sequence[Sentence], shuffle_seed: int | None = None,
                batch_size: int | None = None, scope: str | None = None) -> list[Batch]:
        return make_batches(sentences, batch_size or self.config.batch_size, scope or self.config.pool_scope,
                            self.vocab, self.chars, self.tagset, shuffle_seed=shuffle_seed)

    def embed(self, batch: Batch) -> Tensor:
        x = nx.take_rows(self.word_emb, batch.word_ids)
        if self.char_cnn is None:
            return x
        B, T, L = batch.char_ids.shape
        feats = self.char_cnn(batch.char_ids.reshape(B * T, L), batch.char_lengths.reshape(B * T))
        return nx.concat([x, nx.reshape(feats, (B, T, self.char_cnn.out_size))], axis=-1)

    def encode(self, batch: Batch) -> EncoderStates:
        return bilstm_encode(self.enc_fwd, self.enc_bwd, self.embed(batch), batch.mask)

    def gold_pool(self, batch: Batch, H: EncoderStates) -> CandidatePool:
        spans = [extract_spans(normalize_tags(s.gold_tags), sent=i) for i, s in enumerate(batch.sentences)]
        return build_pool(spans, H.h_f, H.h_b, detach=self.config.detach_pool)

    def forward(self, batch: Batch, *, depth: int | None = None, use_pool: bool = True,
                pools: dict[int, CandidatePool] | None = None, ref_hook: RefHook | None = None,
                training: bool = False) -> LayerTrace:
        """Encode once, then decode ``depth`` layers.

        ``pools`` maps a 0-based layer index to a pool used instead of the one
        built from the previous layer; ``use_pool=False`` gives every layer an
        empty pool. ``ref_hook(layer, scores)`` may rewrite a layer's
        reference scores (no gradient flows through rewritten scores).
        """
        cfg = self.config
        depth = depth or cfg.depth
        H = self.encode(batch)
        mask = batch.mask
        lengths = batch.lengths
        feedback = None
        if training and cfg.teacher_forcing:
            if batch.tag_ids is None:
                raise ContractError("teacher forcing needs gold tags")
            feedback = batch.tag_ids
        empty = CandidatePool.empty(H.state_size, H.h.data.dtype)
        layers: list[LayerOutput] = []
        for i in range(depth):
            if i == 0 and not (pools and 0 in pools):
                pool = empty
                B, T, _ = H.h.shape
                refs = Tensor(np.zeros((B, T, 4), dtype=H.h.data.dtype))
                arg = np.full((B, T, 4), -1)
                if ref_hook is not None:
                    refs = Tensor(ref_hook(i, refs.data.copy()))
                    res = decode_with_reference(self.decoder, H, refs, mask, feedback)
                else:
                    res = decode_first_layer(self.decoder, H, mask, feedback)
            else:
                if pools and i in pools:
                    pool = pools[i]
                elif not use_pool:
                    pool = empty
                elif training and cfg.gold_pool and batch.tag_ids is not None:
                    pool = self.gold_pool(batch, H)
                else:
                    pool = layers[-1].pool
                refs, arg = references(H.h_f, H.h_b, pool)
                if ref_hook is not None:
                    refs = Tensor(ref_hook(i, refs.data.copy()))
                res = decode_with_reference(self.decoder, H, refs, mask, feedback)
            tags = res.tags(self.tagset.tags, lengths)
            out_pool = update_pool(None, tags, H.h_f, H.h_b, detach=cfg.detach_pool)
            layers.append(LayerOutput(res, tags, refs, arg, pool, out_pool))
        return LayerTrace(layers, batch, H)

    def predict(self, sentences: Sequence[Sentence] | Sequence[Batch], depth: int | None = None,
                **kw) -> list[LayerTrace]:
        batches = sentences if sentences and isinstance(sentences[0], Batch) else self.batches(sentences)
        return [self.forward(b, depth=depth, **kw) for b in batches]

    # -------------------------------------------------------------------- loss

    def compute_loss(self, trace: LayerTrace, mode: str | None = None, reduction: str | None = None) -> Tensor:
        """Negative log-likelihood of the gold tags, PAD positions excluded.

        ``last_layer`` scores only the final layer; ``all_layers`` sums the
        per-layer losses. ``batch`` reduction is the plain sum over every real
        token of the batch, ``sentence`` divides that by the number of
        sentences and ``token`` by the number of tokens.
        """
        mode = mode or self.config.loss_mode
        reduction = reduction or self.config.loss_reduction
        gold = trace.batch.tag_ids
        if gold is None:
            raise ContractError("compute_loss needs gold tags for every sentence")
        b_idx, t_idx = np.nonzero(trace.batch.mask)
        g_idx = gold[b_idx, t_idx]
        denom = {"batch": 1, "sentence": trace.batch.size, "token": len(b_idx)}[reduction]
        layers = trace.layers if mode == "all_layers" else trace.layers[-1:]
        total = None
        for layer in layers:
            picked = nx.index(layer.result.log_probs, (b_idx, t_idx, g_idx))
            nll = nx.scale(nx.tensor_sum(picked), -1.0 / denom)
            total = nll if total is None else nx.add(total, nll)
        return total


def compute_loss(model: NEReasoner, trace: LayerTrace, mode: str | None = None) -> Tensor:
    return model.compute_loss(trace, mode)


# ------------------------------------------------------------------ training


def evaluate(model: NEReasoner, batches: Sequence[Batch], depth: int | None = None) -> list[EvalReport]:
    traces = [model.forward(b, depth=depth) for b in batches]
    return layer_diff(traces).layers


@dataclass
class TrainResult:
    model: NEReasoner
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_f1: float = -1.0


LOG_FIELDS = ["epoch", "loss"]


def _log_header(depth: int) -> list[str]:
    cols = list(LOG_FIELDS)
    for i in range(depth):
        cols += [f"L{i + 1}_P", f"L{i + 1}_R", f"L{i + 1}_F1"]
    return cols


def train_step(model: NEReasoner, batch: Batch, opt: OptimizerState) -> float:
    tape = Tape()
    with tape.record():
        trace = model.forward(batch, training=True)
        loss = model.compute_loss(trace)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at optimizer step {opt.steps}")
    nx.backward(loss)
    norm = opt.last_grad_norm
    nx.OPTIMIZERS[model.config.optimizer](model.trainable(), opt)
    if not math.isfinite(opt.last_grad_norm):
        raise TrainingDiverged(f"gradient norm {opt.last_grad_norm} at step {opt.steps} (previous {norm})")
    return value


def train(config: ModelConfig, train_set: Sequence[Sentence], dev_set: Sequence[Sentence], *,
          model: NEReasoner | None = None, embeddings: np.ndarray | None = None, vocab: Vocab | None = None,
          log_path=None, checkpoint_path=None,
          on_epoch: Callable[[int, dict], bool | None] | None = None) -> TrainResult:
    """Optimizer epochs with dev entity-F1 model selection and early stopping.

    The best-dev parameters (final-layer F1) are restored into the returned
    model. ``on_epoch(epoch, row)`` returning True stops training early.
    """
    if model is None:
        vocab = vocab or Vocab.for_words(train_set)
        chars = Vocab.for_chars(train_set)
        tagset = TagSet.from_sentences(train_set)
        model = NEReasoner(config, vocab, chars, tagset, embeddings)
    opt = OptimizerState(config.learning_rate, config.clip_norm)
    dev_batches = model.batches(dev_set) if dev_set else []
    result = TrainResult(model)
    best_state = model.state_dict()
    stale = 0
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh) if log_fh else None
    if writer:
        writer.writerow(_log_header(config.depth))
    try:
        for epoch in range(1, config.max_epochs + 1):
            batches = model.batches(train_set, shuffle_seed=config.seed * 1_000_003 + epoch)
            losses = [train_step(model, b, opt) for b in batches]
            row: dict = {"epoch": epoch, "loss": float(np.mean(losses))}
            reports = evaluate(model, dev_batches) if dev_batches else []
            for i, rep in enumerate(reports):
                row[f"L{i + 1}_P"], row[f"L{i + 1}_R"], row[f"L{i + 1}_F1"] = rep.precision, rep.recall, rep.f1
            result.history.append(row)
            if writer:
                writer.writerow([repr(row.get(k, "")) if isinstance(row.get(k), float) else row.get(k, "")
                                 for k in _log_header(config.depth)])
                log_fh.flush()
            f1 = reports[-1].f1 if reports else -row["loss"]
            logger.info("epoch %d loss %.4f dev %s", epoch, row["loss"],
                        " ".join(f"{layer_name(i, len(reports))}={r.f1:.2f}" for i, r in enumerate(reports)))
            if f1 > result.best_f1:
                result.best_f1, result.best_epoch = f1, epoch
                best_state = model.state_dict()
                stale = 0
                if checkpoint_path:
                    save_checkpoint(model, checkpoint_path)
            else:
                stale += 1
            if on_epoch is not None and on_epoch(epoch, row):
                break
            if stale >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    return result


# --------------------------------------------------------------- checkpoints

CHECKPOINT_KIND = "ne-reasoner"


def save_checkpoint(model: NEReasoner, path) -> None:
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": model.config.to_dict(),
        "words": model.vocab.itos,
        "chars": model.chars.itos,
        "entity_types": model.tagset.entity_types,
    }
    nx.save_params(path, model.state_dict(), meta)


def load_checkpoint(path, **overrides) -> NEReasoner:
    """Rebuild a model; ``overrides`` may change inference-only settings such as depth."""
    if not Path(path).exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    state, meta = nx.load_params(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not an NE-Reasoner checkpoint")
    try:
        cfg = ModelConfig.from_dict({**meta["config"], **overrides})
        vocab = Vocab()
        for w in meta["words"][2:]:
            vocab.add(w)
        chars = Vocab()
        for c in meta["chars"][2:]:
            chars.add(c)
        tagset = TagSet(meta["entity_types"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid metadata ({exc})") from None
    model = NEReasoner(cfg, vocab, chars, tagset, embeddings=np.zeros((len(vocab), cfg.word_dim)))
    model.load_state_dict(state)
    return model


def clone(model: NEReasoner) -> NEReasoner:
    return copy.deepcopy(model)
