"""Toy autoregressive LM plus group-aware sequential decoding.

The selection decoder generates beam-length chunks from every
group-transformed context, scores the candidate sentences with a pluggable
scorer, keeps the best branch and un-transforms it back into the canonical
frame; the averaging decoder instead mixes the per-branch next-token
distributions at every step. A bag-of-words sentence scorer (with a
deliberate demographic bias and tie-breaking jitter) stands in for an
external regard classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .groups import GroupAction, cyclic_group, token_swap, trivial_action
from .rng import substream

__all__ = [
    "WordSets", "ToyLM", "SentenceScorer", "word_swap_action",
    "logit_swap_action", "equizero_generate", "equitune_generate",
    "greedy_generate", "fairness_eval", "toy_word_sets", "toy_vocab",
    "make_toy_scorer", "train_lm", "toy_training_corpus",
    "recompute_trace_logprob",
]

BOS = "<s>"


# ---------------------------------------------------------------------------
# word sets and actions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WordSets:
    """Equality tuples (the words the group permutes), neutral and general
    words; the three sets partition the covered vocabulary."""

    equality: tuple          # of d-tuples of words
    neutral: tuple
    general: tuple
    d: int

    def __post_init__(self):
        for tup in self.equality:
            if len(tup) != self.d:
                raise ValueError(f"equality tuple {tup} is not length {self.d}")
        flat = [w for tup in self.equality for w in tup]
        covered = flat + list(self.neutral) + list(self.general)
        if len(set(covered)) != len(covered):
            raise ValueError("word sets must not overlap")


def word_swap_action(ws: WordSets, vocab: tuple) -> GroupAction:
    """Z_d on token sequences: advance each equality tuple, fix the rest."""
    if not ws.equality:
        return trivial_action(cyclic_group(ws.d), space="tokens")
    idx = {w: i for i, w in enumerate(vocab)}
    pairs = [tuple(idx[w] for w in tup) for tup in ws.equality]
    return token_swap(len(vocab), pairs, on="tokens", group=cyclic_group(ws.d))


def logit_swap_action(ws: WordSets, vocab: tuple) -> GroupAction:
    """The same group acting on distributions over the vocabulary."""
    if not ws.equality:
        return trivial_action(cyclic_group(ws.d), space="logits")
    idx = {w: i for i, w in enumerate(vocab)}
    pairs = [tuple(idx[w] for w in tup) for tup in ws.equality]
    return token_swap(len(vocab), pairs, on="logits", group=cyclic_group(ws.d))


# ---------------------------------------------------------------------------
# the language model
# ---------------------------------------------------------------------------

class ToyLM(nn.Backbone):
    """Embedding -> single-gate recurrent cell -> vocabulary logits."""

    def __init__(self, rng, vocab: tuple, emb: int = 24, hidden: int = 48,
                 max_context: int = 64):
        super().__init__()
        if BOS not in vocab:
            raise ValueError(f"vocabulary must contain {BOS!r}")
        self.vocab = tuple(vocab)
        self.word_to_id = {w: i for i, w in enumerate(vocab)}
        self.max_context = max_context
        v = len(vocab)
        self.embed_table = self.add_param(
            "embed", rng.normal(0.0, 0.2, size=(v, emb)))
        self.cell = nn.GRUCell(self, "cell", rng, emb, hidden)
        self.out = nn.Dense(self, "out", rng, hidden, v)

    def ids(self, words) -> list[int]:
        return [self.word_to_id[w] for w in words]

    def words(self, ids) -> list[str]:
        return [self.vocab[i] for i in ids]

    def start_state(self):
        return self.cell.initial(1)

    def step(self, token_id: int, h):
        """Feed one token; returns (logits over vocab, new hidden)."""
        x = ad.embed(self.embed_table, np.array([token_id]))
        h2 = self.cell.step(x, h)
        return ad.reshape(self.out(h2), (-1,)), h2

    def prime(self, ids):
        """Run BOS + ids through the cell; returns (final logits, hidden)."""
        if len(ids) + 1 > self.max_context:
            raise ValueError("context exceeds max length")
        h = self.start_state()
        logits, h = self.step(self.word_to_id[BOS], h)
        for t in ids:
            logits, h = self.step(int(t), h)
        return logits, h

    def forward(self, ids):
        """Teacher-forced logits for each next-token position."""
        h = self.start_state()
        rows = []
        logits, h = self.step(self.word_to_id[BOS], h)
        rows.append(ad.reshape(logits, (1, -1)))
        for t in ids[:-1]:
            logits, h = self.step(int(t), h)
            rows.append(ad.reshape(logits, (1, -1)))
        return ad.concat(rows, axis=0)

    def describe(self):
        return {"kind": "ToyLM", "vocab_size": len(self.vocab)}


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_generate(lm: ToyLM, context_ids, n_tokens: int):
    """Argmax decoding; returns (ids, per-step log-probs of chosen tokens)."""
    with ad.no_grad():
        logits, h = lm.prime(list(context_ids))
        out, logps = [], []
        for _ in range(n_tokens):
            p = _softmax_np(logits.data)
            t = int(np.argmax(p))
            out.append(t)
            logps.append(float(np.log(p[t])))
            logits, h = lm.step(t, h)
    return out, logps


# ---------------------------------------------------------------------------
# sentence scorer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SentenceScorer:
    """Deterministic bag-of-words score squashed into [-1, 1]."""

    weights: dict = field(repr=False)

    def score_ids(self, ids) -> float:
        return float(np.tanh(sum(self.weights.get(int(t), 0.0) for t in ids)))

    def score_words(self, words, word_to_id) -> float:
        return self.score_ids([word_to_id[w] for w in words])


def make_toy_scorer(vocab: tuple, seed: int = 0, bias: dict | None = None,
                    lexicon: dict | None = None) -> SentenceScorer:
    """Sentiment lexicon + optional per-word demographic bias + tie jitter.

    The jitter gives every vocabulary word a distinct tiny weight so that
    textually different sentences essentially never tie exactly.
    """
    lex = dict(lexicon or {})
    if bias:
        for w, v in bias.items():
            lex[w] = lex.get(w, 0.0) + v
    weights = {}
    idx = {w: i for i, w in enumerate(vocab)}
    for w, i in idx.items():
        jitter = float(substream(seed, "scorer_jitter", w).uniform(-1e-7, 1e-7))
        weights[i] = lex.get(w, 0.0) + jitter
    return SentenceScorer(weights=weights)


# ---------------------------------------------------------------------------
# decoding algorithms
# ---------------------------------------------------------------------------

def equizero_generate(lm: ToyLM, action: GroupAction, scorer: SentenceScorer,
                      context_ids, beam_len: int, total_tokens: int):
    """Chunked branch-selection decoding.

    Per round: transform the context by every group element, greedily decode
    `beam_len` tokens per branch, score each full candidate sentence, keep
    the best (highest score; ties -> higher summed token log-probability,
    then lowest element index), and un-transform it into the new context.
    Returns (generated ids beyond the original context, trace per round).
    """
    if beam_len < 1:
        raise ValueError("beam length must be >= 1")
    d = action.group.order
    ctx = [int(t) for t in context_ids]
    start = len(ctx)
    trace = []
    produced = 0
    rnd = 0
    while produced < total_tokens:
        chunk = min(beam_len, total_tokens - produced)
        branches = []
        for g in range(d):
            bctx = list(np.asarray(action.apply(g, ctx), dtype=np.int64))
            toks, logps = greedy_generate(lm, bctx, chunk)
            sentence = bctx + toks
            branches.append({
                "g": g,
                "tokens": toks,
                "logps": logps,
                "score": scorer.score_ids(sentence),
            })
        best = max(branches,
                   key=lambda b: (b["score"], sum(b["logps"]), -b["g"]))
        g_star = best["g"]
        y = list(np.asarray(action.apply(g_star, ctx), dtype=np.int64)) + best["tokens"]
        ctx = list(np.asarray(action.apply(action.group.inv(g_star), y),
                              dtype=np.int64))
        trace.append({
            "round": rnd,
            "g_star": g_star,
            "scores": [b["score"] for b in branches],
            "branch_logps": [sum(b["logps"]) for b in branches],
            "chosen_logps": best["logps"],
            "chosen_branch_tokens": best["tokens"],
        })
        produced += chunk
        rnd += 1
    return ctx[start:], trace


def recompute_trace_logprob(lm: ToyLM, action: GroupAction, context_ids,
                            trace) -> float:
    """Teacher-force the chosen branches to re-derive the decode log-prob.

    The per-round conditional log-probabilities must multiply back into the
    probability the wrapped decoder assigned to its own output.
    """
    d_inv = action.group.inv
    ctx = [int(t) for t in context_ids]
    total = 0.0
    with ad.no_grad():
        for rec in trace:
            g = rec["g_star"]
            bctx = list(np.asarray(action.apply(g, ctx), dtype=np.int64))
            logits, h = lm.prime(bctx)
            for t in rec["chosen_branch_tokens"]:
                p = _softmax_np(logits.data)
                total += float(np.log(p[int(t)]))
                logits, h = lm.step(int(t), h)
            y = bctx + list(rec["chosen_branch_tokens"])
            ctx = list(np.asarray(action.apply(d_inv(g), y), dtype=np.int64))
    return total


def equitune_generate(lm: ToyLM, action: GroupAction,
                      logit_action: GroupAction, context_ids,
                      total_tokens: int):
    """Sequential averaging decoding.

    Every step averages the inverse-transformed next-token distributions of
    all branch contexts and emits the argmax; each branch then consumes its
    own transform of the emitted token. Returns (ids, averaged distributions
    per step).
    """
    d = action.group.order
    ctx = [int(t) for t in context_ids]
    with ad.no_grad():
        states = []
        for g in range(d):
            bctx = list(np.asarray(action.apply(g, ctx), dtype=np.int64))
            logits, h = lm.prime(bctx)
            states.append((logits, h))
        out, dists = [], []
        for _ in range(total_tokens):
            q = np.zeros(len(lm.vocab))
            for g, (logits, _h) in enumerate(states):
                p = _softmax_np(logits.data)
                q += np.asarray(logit_action.apply(action.group.inv(g), p))
            q /= d
            t = int(np.argmax(q))
            out.append(t)
            dists.append(q)
            new_states = []
            for g, (_logits, h) in enumerate(states):
                tg = int(np.asarray(action.apply(g, [t]))[0])
                new_states.append(lm.step(tg, h))
            states = new_states
    return out, dists


# ---------------------------------------------------------------------------
# fairness evaluation
# ---------------------------------------------------------------------------

def fairness_eval(sequences_per_demo, scorer: SentenceScorer,
                  action: GroupAction | None = None, buckets: int = 8):
    """Score distributions per demographic plus a disparity metric.

    sequences_per_demo[k] holds the generations for demographic k. When
    `action` is given, demographic k's sequences are first normalized into
    the canonical frame (element k undone), so exactly equivariant
    generations score identically. Disparity is the maximum pairwise total
    variation distance between bucketed score histograms.
    """
    if any(len(s) == 0 for s in sequences_per_demo):
        raise ValueError("every demographic needs at least one sequence")
    edges = np.linspace(-1.0, 1.0, buckets + 1)
    hists, means = [], []
    for k, seqs in enumerate(sequences_per_demo):
        scores = []
        for seq in seqs:
            ids = seq
            if action is not None:
                ids = np.asarray(action.apply(action.group.inv(k), list(seq)),
                                 dtype=np.int64)
            scores.append(scorer.score_ids(ids))
        h, _ = np.histogram(scores, bins=edges)
        hists.append(h / max(1, len(scores)))
        means.append(float(np.mean(scores)))
    disparity = 0.0
    for i in range(len(hists)):
        for j in range(i + 1, len(hists)):
            disparity = max(disparity,
                            0.5 * float(np.abs(hists[i] - hists[j]).sum()))
    return {"histograms": np.stack(hists), "mean_scores": means,
            "disparity": disparity}


# ---------------------------------------------------------------------------
# bundled toy setup
# ---------------------------------------------------------------------------

_EQUALITY = (("man", "woman"), ("he", "she"), ("king", "queen"))
_NEUTRAL = ("the", "a", "was", "is", "known", "for", "being", "person",
            "doctor", "teacher", "worker", "leader", "friend", "and",
            "very", "quite", ".", BOS)
_POSITIVE = {"brilliant": 0.8, "kind": 0.7, "honest": 0.6, "great": 0.5}
_NEGATIVE = {"awful": -0.8, "cruel": -0.7, "lazy": -0.5, "bad": -0.4}


def toy_vocab() -> tuple:
    words = [w for tup in _EQUALITY for w in tup]
    words += list(_NEUTRAL) + list(_POSITIVE) + list(_NEGATIVE)
    return tuple(words)


def toy_word_sets(relaxed: bool = False) -> WordSets:
    """Strict mode covers the whole vocabulary with equality + neutral;
    relaxed mode leaves the sentiment adjectives in the general set."""
    adjectives = tuple(_POSITIVE) + tuple(_NEGATIVE)
    if relaxed:
        return WordSets(equality=_EQUALITY, neutral=_NEUTRAL,
                        general=adjectives, d=2)
    return WordSets(equality=_EQUALITY, neutral=_NEUTRAL + adjectives,
                    general=(), d=2)


def toy_bias() -> dict:
    """A deliberately biased scorer: one demographic's words score higher."""
    return {"man": 0.15, "he": 0.1, "king": 0.1,
            "woman": -0.1, "she": -0.05, "queen": -0.05}


def toy_scorer(seed: int = 0, biased: bool = True) -> SentenceScorer:
    lex = dict(_POSITIVE)
    lex.update(_NEGATIVE)
    return make_toy_scorer(toy_vocab(), seed=seed,
                           bias=toy_bias() if biased else None, lexicon=lex)


def toy_training_corpus(seed: int = 0, n: int = 200) -> list[list[str]]:
    """Template sentences over the toy vocabulary for LM pretraining."""
    rng = substream(seed, "lm_corpus")
    demos = [w for tup in _EQUALITY for w in tup]
    adjectives = list(_POSITIVE) + list(_NEGATIVE)
    nouns = ["person", "doctor", "teacher", "worker", "leader", "friend"]
    out = []
    for _ in range(n):
        d = demos[rng.integers(0, len(demos))]
        adj = adjectives[rng.integers(0, len(adjectives))]
        noun = nouns[rng.integers(0, len(nouns))]
        kind = int(rng.integers(0, 3))
        if kind == 0:
            s = ["the", d, "was", "known", "for", "being", adj, "."]
        elif kind == 1:
            s = ["the", d, "is", "a", adj, noun, "."]
        else:
            s = ["the", d, "was", "a", "very", adj, noun, "."]
        out.append(s)
    return out


def train_lm(lm: ToyLM, sentences, steps: int, lr: float = 5e-3,
             seed: int = 0) -> list[float]:
    """Autoregressive cross-entropy training over template sentences."""
    from .optim import Adam

    opt = Adam(lm.params(), lr=lr)
    losses = []
    ids = [lm.ids(s) for s in sentences]
    for step in range(steps):
        rng = substream(seed, "lm_train", step)
        seq = ids[int(rng.integers(0, len(ids)))]
        logits = lm.forward(seq)
        loss = ad.cross_entropy(logits, np.asarray(seq))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    return losses
