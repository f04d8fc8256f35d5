"""Assembly of the two-branch encode/decode model used in phase-1 training.

Branch x encodes source graphs from raw (frozen) source embeddings and
decodes source sentences; branch y maps the same graphs into the target
embedding space first and decodes target sentences.  Teacher-forced
training of a batch runs on flattened node arrays, so the op count stays
constant per batch regardless of batch size; decoding runs per sentence
through the reference single-graph path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .config import ModelConfig
from .decoder import BOS, EOS, DecoderParams, FeatureBanks, beam_decode, greedy_decode
from .embedspace import CrossLingualSpace
from .errors import ContractError, VocabularyError
from .graphmap import GraphMapParams, constant_nodes, map_nodes_batch
from .numerics import Tensor
from .params import Affine, ParamGroup
from .scenegraph import SceneGraph
from .sgencoder import EncodedBatch, EncoderParams, encode_batch


def log_softmax(logits: Tensor) -> Tensor:
    """Stable log-softmax over the last axis (detached max shift)."""
    m = Tensor(logits.data.max(axis=-1, keepdims=True))
    shifted = logits - m
    return shifted - nm.log(nm.reduce_sum(nm.exp(shifted), axis=-1, keepdims=True))


class Phase1Model(ParamGroup):
    def __init__(self, space: CrossLingualSpace, source_vocab: list[str],
                 target_vocab: list[str], cfg: ModelConfig, d_c: int, seed: int):
        cfg.validate()
        rng = np.random.default_rng([seed, 4000])
        self.cfg = cfg
        self.space = space
        self.d_c = d_c
        self.vocab_x = [BOS, EOS] + sorted(source_vocab)
        self.vocab_y = [BOS, EOS] + sorted(target_vocab)
        self.index_x = {t: i for i, t in enumerate(self.vocab_x)}
        self.index_y = {t: i for i, t in enumerate(self.vocab_y)}
        d_pre = space.dim
        self.map_params = GraphMapParams(rng, d_pre, cfg.d_emb,
                                         d_att=d_pre, gate_hidden=cfg.gate_hidden,
                                         gate_bias=cfg.gate_bias,
                                         context_scale=cfg.context_scale)
        self.enc_x = EncoderParams(rng, d_pre, cfg.d_emb)
        self.enc_y = EncoderParams(rng, cfg.d_emb, cfg.d_emb)
        self.dec_x = DecoderParams(rng, cfg.d_emb, cfg.d_word, cfg.lstm_hidden,
                                   cfg.d_att, len(self.vocab_x))
        self.dec_y = DecoderParams(rng, cfg.d_emb, cfg.d_word, cfg.lstm_hidden,
                                   cfg.d_att, len(self.vocab_y))
        # fixed random probe: a trainable projection would collapse to a
        # uniform output and stop exerting alignment pressure on the encoders
        self.kl_proj = Affine(rng, cfg.d_emb, d_c)
        self.kl_proj.freeze()

    # -- feature extraction ----------------------------------------------

    def mapped_nodes(self, graphs: list[SceneGraph], branch: str,
                     gate_override=None):
        if branch == "x":
            return constant_nodes(graphs, self.space)
        if branch == "y":
            return map_nodes_batch(graphs, self.space, self.map_params,
                                   self.cfg.variant, gate_override)
        raise ContractError(f"unknown branch {branch!r}")

    def encoder(self, branch: str) -> EncoderParams:
        return self.enc_x if branch == "x" else self.enc_y

    def branch_encoded(self, graphs: list[SceneGraph], branch: str,
                       gate_override=None) -> EncodedBatch:
        return encode_batch(self.mapped_nodes(graphs, branch, gate_override),
                            self.encoder(branch))

    def pooled_features(self, enc: EncodedBatch
                        ) -> dict[str, tuple[Tensor, np.ndarray] | None]:
        """Mean-pooled per-sentence feature per type, for sentences that
        have the type; None when no sentence in the batch does."""
        out: dict[str, tuple[Tensor, np.ndarray] | None] = {}
        spec = {"o": (enc.f_o, enc.layout.obj_segments),
                "r": (enc.f_r, enc.layout.rel_segments),
                "a": (enc.f_a, enc.fa_segments)}
        for kind, (rows, segments) in spec.items():
            present = [gi for gi, (s, e) in enumerate(segments) if e > s]
            if not present:
                out[kind] = None
                continue
            pool = np.zeros((len(present), rows.shape[0]))
            for row, gi in enumerate(present):
                s, e = segments[gi]
                pool[row, s:e] = 1.0 / (e - s)
            out[kind] = (nm.matmul(Tensor(pool), rows), np.array(present))
        return out

    # -- teacher forcing ---------------------------------------------------

    def _token_ids(self, sentences: list[list[str]], branch: str
                   ) -> list[list[int]]:
        index = self.index_x if branch == "x" else self.index_y
        out = []
        for sent in sentences:
            ids = []
            for tok in sent:
                if tok not in index:
                    raise VocabularyError(
                        f"token {tok!r} not in {branch}-branch vocabulary")
                ids.append(index[tok])
            ids.append(index[EOS])
            out.append(ids)
        return out

    def _banks_batched(self, enc: EncodedBatch, dec: DecoderParams):
        banks = {}
        spec = {"o": (enc.f_o, enc.layout.obj_segments),
                "r": (enc.f_r, enc.layout.rel_segments),
                "a": (enc.f_a, enc.fa_segments)}
        b = len(enc.layout.graphs)
        for kind, (rows, segments) in spec.items():
            att = dec.attention(kind)
            d = rows.shape[1]
            m = rows.shape[0]
            k_max = max(max((e - s for s, e in segments), default=0), 1)
            null_idx, zero_idx = m, m + 1
            idx = np.full((b, k_max), zero_idx, dtype=np.int64)
            mask = np.zeros((b, k_max))
            for gi, (s, e) in enumerate(segments):
                if e > s:
                    idx[gi, :e - s] = np.arange(s, e)
                    mask[gi, :e - s] = 1.0
                else:
                    idx[gi, 0] = null_idx
                    mask[gi, 0] = 1.0
            ext = nm.concat([rows, nm.reshape(att.null_feat, (1, d)),
                             Tensor(np.zeros((1, d)))], axis=0)
            bank = nm.gather_rows(ext, idx)                      # (B, K, d)
            proj = nm.matmul(bank, att.w_feat)                   # (B, K, a)
            banks[kind] = (bank, proj, mask)
        return banks

    def _attend_batched(self, banks, kind: str, hidden: Tensor,
                        dec: DecoderParams) -> Tensor:
        att = dec.attention(kind)
        bank, proj, mask = banks[kind]
        b, k, d = bank.shape
        hq = nm.reshape(nm.matmul(hidden, att.w_hidden), (b, 1, -1))
        scores = nm.reshape(nm.matmul(nm.tanh(proj + hq), att.v), (b, k))
        scores = scores + Tensor((mask - 1.0) * 1e9)
        alpha = nm.softmax(scores)
        return nm.reshape(nm.matmul(nm.reshape(alpha, (b, 1, k)), bank), (b, d))

    def teacher_forced_nll(self, enc: EncodedBatch, sentences: list[list[str]],
                           branch: str) -> tuple[Tensor, int]:
        """Summed negative log-likelihood of the sentences given features."""
        dec = self.dec_x if branch == "x" else self.dec_y
        index = self.index_x if branch == "x" else self.index_y
        vocab_size = len(index)
        ids = self._token_ids(sentences, branch)
        b = len(ids)
        t_max = max(len(s) for s in ids)
        banks = self._banks_batched(enc, dec)

        bos = index[BOS]
        prev = np.full((b, t_max), bos, dtype=np.int64)
        onehot = np.zeros((t_max, b, vocab_size))
        n_tokens = 0
        for bi, seq in enumerate(ids):
            for t, tok in enumerate(seq):
                if t > 0:
                    prev[bi, t] = seq[t - 1]
                onehot[t, bi, tok] = 1.0
                n_tokens += 1

        h = [Tensor(np.zeros((b, dec.d_hidden))) for _ in range(2)]
        c = [Tensor(np.zeros((b, dec.d_hidden))) for _ in range(2)]
        static_z = None
        total = None
        for t in range(t_max):
            if self.cfg.per_step_attention or static_z is None:
                zs = [self._attend_batched(banks, kind, h[1], dec)
                      for kind in ("o", "r", "a")]
                if not self.cfg.per_step_attention:
                    static_z = zs
            else:
                zs = static_z
            fused = nm.relu(dec.triplet(nm.concat(zs, axis=-1)))
            prev_e = nm.gather_rows(dec.embed, prev[:, t])
            x = nm.concat([fused, prev_e], axis=-1)
            h[0], c[0] = dec.lstm1.step(x, h[0], c[0])
            h[1], c[1] = dec.lstm2.step(h[0], h[1], c[1])
            logits = nm.matmul(h[1], dec.w_out)
            logp = log_softmax(logits)
            step_loss = -nm.reduce_sum(logp * Tensor(onehot[t]))
            total = step_loss if total is None else total + step_loss
        return total, n_tokens

    # -- decoding ------------------------------------------------------------

    def sentence_banks(self, graph: SceneGraph, branch: str = "y",
                       mappers=None, distortion=None,
                       gate_override=None) -> FeatureBanks:
        """Per-sentence feature banks for decoding one graph.

        ``distortion`` is an (A, b) pair applied to image-modality features;
        ``mappers`` maps each feature type through its cross-modal function.
        """
        with nm.no_grad():
            enc = self.branch_encoded([graph], branch, gate_override)
            rows = {"o": enc.f_o, "r": enc.f_r, "a": enc.f_a}
            banks = {}
            for kind, tensor in rows.items():
                data = tensor.data
                if data.shape[0] == 0:
                    banks[kind] = None
                    continue
                if distortion is not None and graph.modality == "image":
                    a_mat, b_vec = distortion
                    data = data @ a_mat.T + b_vec
                feats = Tensor(data)
                if mappers is not None:
                    feats = mappers.map_i2y(kind, feats)
                banks[kind] = feats
        return FeatureBanks(f_o=banks["o"], f_r=banks["r"], f_a=banks["a"])

    def caption(self, graph: SceneGraph, branch: str = "y", beam: int = 5,
                mappers=None, distortion=None, gate_override=None) -> list[str]:
        banks = self.sentence_banks(graph, branch, mappers, distortion,
                                    gate_override)
        dec = self.dec_x if branch == "x" else self.dec_y
        vocab = self.vocab_x if branch == "x" else self.vocab_y
        index = self.index_x if branch == "x" else self.index_y
        kwargs = dict(vocab=vocab, bos_id=index[BOS], eos_id=index[EOS],
                      max_len=self.cfg.max_len,
                      per_step_attention=self.cfg.per_step_attention)
        if beam == 1:
            return greedy_decode(banks, dec, **kwargs)
        return beam_decode(banks, dec, beam=beam, **kwargs)


@dataclass
class BranchFeatures:
    """Node-level encoded features per type, as plain arrays."""
    o: np.ndarray
    r: np.ndarray
    a: np.ndarray

    def get(self, kind: str) -> np.ndarray:
        return {"o": self.o, "r": self.r, "a": self.a}[kind]


def collect_node_features(model: Phase1Model, graphs: list[SceneGraph],
                          chunk: int = 100) -> BranchFeatures:
    """Branch-y node features for many graphs, without gradient tracking."""
    outs = {"o": [], "r": [], "a": []}
    with nm.no_grad():
        for start in range(0, len(graphs), chunk):
            enc = model.branch_encoded(graphs[start:start + chunk], "y")
            outs["o"].append(enc.f_o.data.copy())
            outs["r"].append(enc.f_r.data.copy())
            outs["a"].append(enc.f_a.data.copy())
    d = model.cfg.d_emb
    stack = {k: (np.concatenate(v) if v else np.zeros((0, d)))
             for k, v in outs.items()}
    return BranchFeatures(o=stack["o"], r=stack["r"], a=stack["a"])
