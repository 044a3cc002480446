"""Encoder-decoder translation model for the toy command corpus.

Single-gate recurrent cells of hidden size 64, teacher forcing ratio 0.5.
The wrapped translation strategies mirror the classifier wrappers: averaging
mixes the canonical-frame next-token distributions of the vocabulary-swapped
branches at every step; selection decodes each branch fully and keeps the
one with the highest mean per-step max probability.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .data import IN_VOCAB, OUT_VOCAB, ToySCANCorpus
from .optim import Adam
from .rng import substream

SOS, EOS = "<sos>", "<eos>"
DEC_VOCAB = tuple(OUT_VOCAB) + (SOS, EOS)


class Seq2Seq(nn.Backbone):
    def __init__(self, rng, emb: int = 32, hidden: int = 64):
        super().__init__()
        self.in_idx = {w: i for i, w in enumerate(IN_VOCAB)}
        self.out_idx = {w: i for i, w in enumerate(DEC_VOCAB)}
        self.enc_emb = self.add_param(
            "enc_emb", rng.normal(0, 0.2, size=(len(IN_VOCAB), emb)))
        self.enc = nn.GRUCell(self, "enc", rng, emb, hidden)
        self.dec_emb = self.add_param(
            "dec_emb", rng.normal(0, 0.2, size=(len(DEC_VOCAB), emb)))
        self.dec = nn.GRUCell(self, "dec", rng, emb, hidden)
        self.out = nn.Dense(self, "out", rng, hidden, len(DEC_VOCAB))

    def encode(self, words):
        h = self.enc.initial(1)
        for w in words:
            x = ad.embed(self.enc_emb, np.array([self.in_idx[w]]))
            h = self.enc.step(x, h)
        return h

    def dec_step(self, tok: int, h):
        x = ad.embed(self.dec_emb, np.array([tok]))
        h = self.dec.step(x, h)
        return ad.reshape(self.out(h), (-1,)), h

    def forward(self, pair):
        """Teacher-forced (full-forcing) logits for a (command, output) pair."""
        cmd, out = pair
        h = self.encode(cmd)
        tok = self.out_idx[SOS]
        rows = []
        for w in list(out) + [EOS]:
            logits, h = self.dec_step(tok, h)
            rows.append(ad.reshape(logits, (1, -1)))
            tok = self.out_idx[w]
        return ad.concat(rows, axis=0)

    def describe(self):
        return {"kind": "Seq2Seq", "hidden": self.dec.n_hidden}


def train_seq2seq(model: Seq2Seq, pairs, iters: int, lr: float, seed: int,
                  tf_ratio: float = 0.5, lr_decay: float = 0.1):
    """Per-sample training with scheduled sampling at the given ratio;
    the learning rate holds for the first half then decays exponentially."""
    opt = Adam(model.params(), lr=lr)
    sos = model.out_idx[SOS]
    losses = []
    for it in range(iters):
        rng = substream(seed, "s2s_train", it)
        frac = max(0.0, (it - 0.5 * iters) / (0.5 * iters))
        opt.lr = lr * (lr_decay ** frac)
        cmd, out = pairs[int(rng.integers(0, len(pairs)))]
        h = model.encode(cmd)
        targets = [model.out_idx[w] for w in out] + [model.out_idx[EOS]]
        tok = sos
        loss = None
        for t in targets:
            logits, h = model.dec_step(tok, h)
            term = ad.scale(ad.cross_entropy(logits, t), 1.0 / len(targets))
            loss = term if loss is None else ad.add(loss, term)
            tok = t if rng.random() < tf_ratio else int(np.argmax(logits.data))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return losses


def _softmax(x):
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def translate(model: Seq2Seq, cmd, max_len: int = 24):
    """Greedy decode; returns (words, per-step max probabilities)."""
    with ad.no_grad():
        h = model.encode(cmd)
        tok = model.out_idx[SOS]
        eos = model.out_idx[EOS]
        out, maxps = [], []
        for _ in range(max_len):
            logits, h = model.dec_step(tok, h)
            p = _softmax(logits.data)
            tok = int(np.argmax(p))
            maxps.append(float(p[tok]))
            if tok == eos:
                break
            out.append(DEC_VOCAB[tok])
    return out, maxps


def _swap(tokens, a, b):
    table = {a: b, b: a}
    return [table.get(t, t) for t in tokens]


def equizero_translate(model: Seq2Seq, corpus: ToySCANCorpus, cmd,
                       max_len: int = 24):
    """Decode every vocabulary-swap branch; keep the most confident one.

    Branch loss is the negative mean per-step max probability; ties break to
    the lowest element index. Returns (words, chosen element).
    """
    best = None
    for g in (0, 1):
        c = cmd if g == 0 else _swap(cmd, *corpus.swap_in)
        out, maxps = translate(model, c, max_len)
        loss = -float(np.mean(maxps))
        if best is None or loss < best[0]:
            best = (loss, g, out)
    _, g, out = best
    return (_swap(out, *corpus.swap_out) if g == 1 else out), g


def equitune_translate(model: Seq2Seq, corpus: ToySCANCorpus, cmd,
                       max_len: int = 24):
    """Average the canonical-frame next-token distributions per step."""
    with ad.no_grad():
        eos = model.out_idx[EOS]
        a, b = corpus.swap_out
        perm = np.arange(len(DEC_VOCAB))
        perm[model.out_idx[a]], perm[model.out_idx[b]] = \
            model.out_idx[b], model.out_idx[a]
        states = [model.encode(cmd),
                  model.encode(_swap(cmd, *corpus.swap_in))]
        toks = [model.out_idx[SOS]] * 2
        out = []
        for _ in range(max_len):
            logits0, h0 = model.dec_step(toks[0], states[0])
            logits1, h1 = model.dec_step(toks[1], states[1])
            states = [h0, h1]
            q = 0.5 * (_softmax(logits0.data) + _softmax(logits1.data)[perm])
            t = int(np.argmax(q))
            if t == eos:
                break
            out.append(DEC_VOCAB[t])
            toks = [t, int(perm[t])]
    return out


def seq_accuracy(predict, pairs) -> float:
    """Exact-sequence-match accuracy of `predict(cmd) -> words`."""
    if not pairs:
        return 0.0
    return float(np.mean([predict(cmd) == out for cmd, out in pairs]))
