"""Sentence decoder: three feature attentions, triplet fusion, 2-layer LSTM.

Each step attends over the object, relation and attribute feature sets with
an additive score conditioned on the previous hidden state, fuses the three
pooled vectors through a relu layer, and feeds the result (concatenated
with the previous word embedding) to a two-layer LSTM.  Logits are a plain
matrix product with the output matrix.

Greedy decoding takes the argmax each step.  Beam decoding keeps the top-k
partial hypotheses by cumulative log-probability, pools completed
hypotheses, scores them by length-normalized log-probability, and breaks
ties by lexicographically smaller token-id sequence.  The greedy hypothesis
is always part of the candidate pool, so the returned score can never fall
below the greedy score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .errors import ContractError
from .numerics import Tensor
from .params import Affine, ParamGroup, param, vector_param

BOS = "<bos>"
EOS = "<eos>"


class AttentionParams(ParamGroup):
    def __init__(self, rng, d_feat: int, d_hidden: int, d_att: int):
        self.w_feat = param(rng, d_feat, d_att)
        self.w_hidden = param(rng, d_hidden, d_att)
        self.v = param(rng, d_att, 1)
        self.null_feat = vector_param(rng, d_feat)


class LstmLayer(ParamGroup):
    def __init__(self, rng, d_in: int, d_hidden: int):
        for gate in ("i", "f", "o", "g"):
            setattr(self, f"w_{gate}", param(rng, d_in, d_hidden))
            setattr(self, f"u_{gate}", param(rng, d_hidden, d_hidden))
            bias = np.zeros(d_hidden)
            if gate == "f":
                bias += 1.0     # standard forget-gate bias
            setattr(self, f"b_{gate}", Tensor(bias, requires_grad=True))

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        i = nm.sigmoid(nm.matmul(x, self.w_i) + nm.matmul(h, self.u_i) + self.b_i)
        f = nm.sigmoid(nm.matmul(x, self.w_f) + nm.matmul(h, self.u_f) + self.b_f)
        o = nm.sigmoid(nm.matmul(x, self.w_o) + nm.matmul(h, self.u_o) + self.b_o)
        g = nm.tanh(nm.matmul(x, self.w_g) + nm.matmul(h, self.u_g) + self.b_g)
        c_new = f * c + i * g
        h_new = o * nm.tanh(c_new)
        return h_new, c_new


class DecoderParams(ParamGroup):
    def __init__(self, rng, d_emb: int, d_word: int, d_hidden: int,
                 d_att: int, vocab_size: int):
        self.att_o = AttentionParams(rng, d_emb, d_hidden, d_att)
        self.att_r = AttentionParams(rng, d_emb, d_hidden, d_att)
        self.att_a = AttentionParams(rng, d_emb, d_hidden, d_att)
        self.triplet = Affine(rng, 3 * d_emb, d_emb)
        self.embed = Tensor(
            0.1 * rng.standard_normal((vocab_size, d_word)), requires_grad=True)
        self.lstm1 = LstmLayer(rng, d_emb + d_word, d_hidden)
        self.lstm2 = LstmLayer(rng, d_hidden, d_hidden)
        self.w_out = param(rng, d_hidden, vocab_size)
        self.d_hidden = d_hidden
        self.d_emb = d_emb

    def attention(self, kind: str) -> AttentionParams:
        return {"o": self.att_o, "r": self.att_r, "a": self.att_a}[kind]


@dataclass
class DecodeState:
    h: list[Tensor]
    c: list[Tensor]
    prev_token: int
    step_index: int
    max_len: int

    def copy(self) -> "DecodeState":
        return DecodeState(h=[Tensor(t.data.copy()) for t in self.h],
                           c=[Tensor(t.data.copy()) for t in self.c],
                           prev_token=self.prev_token,
                           step_index=self.step_index, max_len=self.max_len)


def initial_state(params: DecoderParams, bos_id: int, max_len: int,
                  batch: int | None = None) -> DecodeState:
    shape = (params.d_hidden,) if batch is None else (batch, params.d_hidden)
    return DecodeState(h=[Tensor(np.zeros(shape)), Tensor(np.zeros(shape))],
                       c=[Tensor(np.zeros(shape)), Tensor(np.zeros(shape))],
                       prev_token=bos_id, step_index=0, max_len=max_len)


def attend(features: Sequence[Tensor] | Tensor | None, hidden: Tensor,
           att: AttentionParams) -> tuple[Tensor, np.ndarray]:
    """Pool a feature set with additive attention conditioned on ``hidden``.

    Empty sets use the learned null feature with weight 1.
    """
    if features is None or (isinstance(features, (list, tuple)) and not features):
        return att.null_feat, np.array([1.0])
    if isinstance(features, (list, tuple)):
        bank = nm.concat([nm.reshape(f, (1, -1)) for f in features], axis=0)
    else:
        bank = features
        if bank.shape[0] == 0:
            return att.null_feat, np.array([1.0])
    scores = nm.matmul(nm.tanh(nm.matmul(bank, att.w_feat)
                               + nm.matmul(hidden, att.w_hidden)), att.v)
    scores = nm.reshape(scores, (bank.shape[0],))
    alpha = nm.softmax(scores)
    z = nm.matmul(alpha, bank)
    return z, alpha.data.copy()


def step(state: DecodeState, z_o: Tensor, z_r: Tensor, z_a: Tensor,
         params: DecoderParams) -> tuple[Tensor, DecodeState]:
    """One decode step; returns vocabulary logits and the advanced state."""
    if state.step_index >= state.max_len:
        raise ContractError("step: beyond maximum decode length")
    fused = nm.relu(params.triplet(nm.concat([z_o, z_r, z_a], axis=-1)))
    prev_embed = nm.gather_rows(params.embed,
                                np.array([state.prev_token]))
    prev_embed = nm.reshape(prev_embed, (params.embed.shape[1],))
    x = nm.concat([fused, prev_embed], axis=-1)
    h1, c1 = params.lstm1.step(x, state.h[0], state.c[0])
    h2, c2 = params.lstm2.step(h1, state.h[1], state.c[1])
    logits = nm.matmul(h2, params.w_out)
    new = DecodeState(h=[h1, h2], c=[c1, c2], prev_token=state.prev_token,
                      step_index=state.step_index + 1, max_len=state.max_len)
    return logits, new


@dataclass
class FeatureBanks:
    """Per-sentence feature sets for the three attention heads."""
    f_o: Tensor | None
    f_r: Tensor | None
    f_a: Tensor | None

    def get(self, kind: str):
        return {"o": self.f_o, "r": self.f_r, "a": self.f_a}[kind]


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _make_step_fn(banks: FeatureBanks, params: DecoderParams,
                  per_step_attention: bool) -> Callable:
    static_z: dict[str, Tensor] = {}

    def step_fn(state: DecodeState) -> tuple[np.ndarray, DecodeState]:
        zs = {}
        for kind in ("o", "r", "a"):
            if per_step_attention or kind not in static_z:
                z, _ = attend(banks.get(kind), state.h[1], params.attention(kind))
                if not per_step_attention:
                    static_z[kind] = z
            else:
                z = static_z[kind]
            zs[kind] = z
        logits, new = step(state, zs["o"], zs["r"], zs["a"], params)
        return _log_softmax_np(logits.data.astype(np.float64)), new

    return step_fn


def greedy_decode(banks: FeatureBanks, params: DecoderParams, vocab: list[str],
                  bos_id: int, eos_id: int, max_len: int = 16,
                  per_step_attention: bool = True) -> list[str]:
    """Argmax decoding until EOS or the length cap; deterministic."""
    with nm.no_grad():
        ids = _greedy_ids(banks, params, bos_id, eos_id, max_len,
                          per_step_attention)[0]
    return [vocab[i] for i in ids if i != eos_id]


def _greedy_ids(banks, params, bos_id, eos_id, max_len, per_step_attention
                ) -> tuple[list[int], float]:
    step_fn = _make_step_fn(banks, params, per_step_attention)
    state = initial_state(params, bos_id, max_len)
    ids: list[int] = []
    total = 0.0
    for _ in range(max_len):
        logp, state = step_fn(state)
        token = int(np.argmax(logp))
        total += float(logp[token])
        if token == eos_id:
            ids.append(token)
            break
        ids.append(token)
        state.prev_token = token
    return ids, total


@dataclass
class _Hypothesis:
    ids: tuple[int, ...]
    logp: float
    state: DecodeState | None
    finished: bool

    def score(self) -> float:
        return self.logp / max(1, len(self.ids))


def beam_search(step_fn: Callable, bos_id: int, eos_id: int, beam: int,
                max_len: int, init_state: DecodeState,
                greedy_seed: tuple[tuple[int, ...], float] | None = None
                ) -> tuple[tuple[int, ...], float]:
    """Generic beam search over a step function.

    Returns the best (token-id sequence, normalized score); the sequence
    includes the terminating EOS when one was emitted.
    """
    if beam < 1:
        raise ContractError("beam must be >= 1")
    live = [_Hypothesis(ids=(), logp=0.0, state=init_state, finished=False)]
    done: list[_Hypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        candidates: list[_Hypothesis] = []
        for hyp in live:
            logp_vec, new_state = step_fn(hyp.state)
            for tok in range(len(logp_vec)):
                candidates.append(_Hypothesis(
                    ids=hyp.ids + (tok,), logp=hyp.logp + float(logp_vec[tok]),
                    state=new_state, finished=(tok == eos_id)))
        candidates.sort(key=lambda h: (-h.logp, h.ids))
        kept = candidates[:beam]
        live = []
        for hyp in kept:
            if hyp.finished:
                done.append(hyp)
            else:
                advanced = hyp.state.copy()
                advanced.prev_token = hyp.ids[-1]
                live.append(_Hypothesis(ids=hyp.ids, logp=hyp.logp,
                                        state=advanced, finished=False))
    done.extend(live)
    if greedy_seed is not None:
        done.append(_Hypothesis(ids=greedy_seed[0], logp=greedy_seed[1],
                                state=None, finished=True))
    best = min(done, key=lambda h: (-h.score(), h.ids))
    return best.ids, best.score()


def beam_decode(banks: FeatureBanks, params: DecoderParams, vocab: list[str],
                bos_id: int, eos_id: int, beam: int = 5, max_len: int = 16,
                per_step_attention: bool = True) -> list[str]:
    """Length-normalized beam search; ties break lexicographically."""
    if beam < 1:
        raise ContractError("beam must be >= 1")
    with nm.no_grad():
        greedy_ids, greedy_logp = _greedy_ids(
            banks, params, bos_id, eos_id, max_len, per_step_attention)
        step_fn = _make_step_fn(banks, params, per_step_attention)
        init = initial_state(params, bos_id, max_len)
        ids, _ = beam_search(step_fn, bos_id, eos_id, beam, max_len, init,
                             greedy_seed=(tuple(greedy_ids), greedy_logp))
    return [vocab[i] for i in ids if i != eos_id]
