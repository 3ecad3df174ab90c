"""Autoregressive decoding from speech and duration-bucketed evaluation.

Decoders talk to a *scorer*: ``init(beam)`` returns first-step log-probs for
``n * beam`` rows (row ``s * beam + j`` is slot ``j`` of sentence ``s``);
``advance(tokens, parents)`` reorders rows by ``parents`` then appends
``tokens`` and returns the next log-probs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .bleu import BleuReport, corpus_stats, score_stats, sentence_stats
from .data import Triple, bucket_by_duration
from .errors import ConfigError, UsageError
from .layers import NEG_INF, sinusoidal_positions
from .model import LSTModel, _block_count, pad_frames


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool

    @property
    def score(self) -> float:
        return self.logprob / max(1, len(self.tokens))

    def content(self, eos: int) -> list[int]:
        return self.tokens[:-1] if self.finished and self.tokens and self.tokens[-1] == eos else list(self.tokens)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _gelu(x):
    k = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(k * (x + 0.044715 * x * x * x)))


class LSTScorer:
    """Cached incremental backend evaluation over soft prompts (inference only)."""

    def __init__(self, model: LSTModel, frames: Sequence[np.ndarray]):
        self.model = model
        st = model.store
        with T.no_grad():
            fr, valid = pad_frames(frames, model.dtype)
            h = model.frontend_encode(fr, valid)
            prompt, plens = model.adapt(h, valid)
        self.prompt = prompt.data
        self.plens = plens
        self.n = len(frames)
        self.embed = st["backend.embed"].data
        self.blocks = [{k: t.data for k, t in st.sub(f"backend.blocks.{i}.").items()}
                       for i in range(_block_count(st, "backend.blocks."))]
        self.ln_f = (st["backend.ln_f.g"].data, st["backend.ln_f.b"].data)
        self.heads = model.cfg.dec_heads
        self.d = model.cfg.d_llm
        self.scale = math.sqrt(self.d)
        self.pe = sinusoidal_positions(int(plens.max()) + 2 + 256, self.d, model.dtype)

    def _run(self, x: np.ndarray, key_valid: np.ndarray, causal_new: bool) -> np.ndarray:
        """Push new positions ``x`` (R, L, d) through the stack, extending the cache."""
        R, L, d = x.shape
        h, dh = self.heads, d // self.heads
        for i, p in enumerate(self.blocks):
            a = _ln(x, p["ln1.g"], p["ln1.b"])
            q = (a @ p["attn.wq"] + p["attn.bq"]).reshape(R, L, h, dh).transpose(0, 2, 1, 3)
            k = (a @ p["attn.wk"] + p["attn.bk"]).reshape(R, L, h, dh).transpose(0, 2, 1, 3)
            v = (a @ p["attn.wv"] + p["attn.bv"]).reshape(R, L, h, dh).transpose(0, 2, 1, 3)
            if self.cache_k[i] is not None:
                k = np.concatenate([self.cache_k[i], k], axis=2)
                v = np.concatenate([self.cache_v[i], v], axis=2)
            self.cache_k[i], self.cache_v[i] = k, v
            s = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
            allowed = np.broadcast_to(key_valid[:, None, None, :], s.shape).copy()
            if causal_new:
                tri = np.tril(np.ones((L, L), dtype=bool))
                allowed[..., -L:] &= tri
            s = np.where(allowed, s, NEG_INF)
            s = s - s.max(axis=-1, keepdims=True)
            pr = np.exp(s)
            pr /= pr.sum(axis=-1, keepdims=True)
            o = (pr @ v).transpose(0, 2, 1, 3).reshape(R, L, d)
            x = x + o @ p["attn.wo"] + p["attn.bo"]
            f = _gelu(_ln(x, p["ln2.g"], p["ln2.b"]) @ p["ffn.w1"] + p["ffn.b1"])
            x = x + f @ p["ffn.w2"] + p["ffn.b2"]
        return _ln(x, *self.ln_f) @ self.embed.T

    def init(self, beam: int) -> np.ndarray:
        self.beam = beam
        rows = np.repeat(np.arange(self.n), beam)
        plens = self.plens[rows]
        P = int(plens.max()) + 1
        R = rows.size
        x = np.zeros((R, P, self.d), dtype=self.prompt.dtype)
        for r, s in enumerate(rows):
            p = int(self.plens[s])
            x[r, :p] = self.prompt[s, :p]
            x[r, p] = self.embed[self.model.vocab.SEP] * self.scale
        x += self.pe[:P]
        self.key_valid = np.arange(P)[None, :] < (plens + 1)[:, None]
        self.cache_k = [None] * len(self.blocks)
        self.cache_v = [None] * len(self.blocks)
        self.pos = plens + 1
        logits = self._run(x, self.key_valid, causal_new=True)
        return _log_softmax(logits[np.arange(R), plens].astype(np.float64))

    def advance(self, tokens: np.ndarray, parents: np.ndarray) -> np.ndarray:
        for i in range(len(self.blocks)):
            self.cache_k[i] = self.cache_k[i][parents]
            self.cache_v[i] = self.cache_v[i][parents]
        self.key_valid = np.concatenate([self.key_valid[parents],
                                         np.ones((parents.size, 1), dtype=bool)], axis=1)
        self.pos = self.pos[parents]
        x = self.embed[tokens] * self.scale + self.pe[self.pos]
        self.pos = self.pos + 1
        logits = self._run(x[:, None, :], self.key_valid, causal_new=False)
        return _log_softmax(logits[:, 0].astype(np.float64))


class TableScorer:
    """Scorer backed by a Python function prefix -> log-prob vector (tests, oracles)."""

    def __init__(self, n: int, fn):
        self.n = n
        self.fn = fn

    def init(self, beam: int) -> np.ndarray:
        self.prefixes = [() for _ in range(self.n * beam)]
        self.sent = [r // beam for r in range(self.n * beam)]
        return np.stack([self.fn(s, ()) for s in self.sent])

    def advance(self, tokens, parents) -> np.ndarray:
        self.prefixes = [self.prefixes[p] + (int(t),) for p, t in zip(parents, tokens)]
        self.sent = [self.sent[p] for p in parents]
        return np.stack([self.fn(s, pre) for s, pre in zip(self.sent, self.prefixes)])


def greedy_decode(scorer, eos: int, max_len: int = 64) -> list[Hypothesis]:
    """Argmax decoding (ties -> lowest id) until EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise ConfigError("max_len must be at least 1")
    lp = scorer.init(1)
    n = lp.shape[0]
    toks = [[] for _ in range(n)]
    logp = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    for t in range(max_len):
        choice = lp.argmax(axis=1)
        for r in range(n):
            if not done[r]:
                toks[r].append(int(choice[r]))
                logp[r] += lp[r, choice[r]]
                done[r] = choice[r] == eos
        if done.all() or t == max_len - 1:
            break
        lp = scorer.advance(choice, np.arange(n))
    return [Hypothesis(toks[r], float(logp[r]), bool(done[r])) for r in range(n)]


def _best(pool: list[Hypothesis]) -> Hypothesis:
    return min(pool, key=lambda h: (not h.finished, -h.score, h.tokens))


def beam_search(scorer, eos: int, beam: int = 4, max_len: int = 64) -> list[Hypothesis]:
    """Length-synchronous beam search with a finished pool.

    Each step keeps the ``beam`` best expansions per sentence; expansions
    ending in EOS retire to the pool and free their slot.  A sentence stops
    expanding once its pool holds ``beam`` finished hypotheses and none of its
    live beams scores better (logprob/length) than the pool's best.  The result is
    the pool's best by logprob/length (finished preferred; ties -> lexicographic).
    """
    if beam < 1:
        raise ConfigError("beam size must be at least 1")
    if max_len < 1:
        raise ConfigError("max_len must be at least 1")
    lp = scorer.init(beam)
    V = lp.shape[1]
    n = lp.shape[0] // beam
    scores = np.full((n, beam), -np.inf)
    scores[:, 0] = 0.0
    hist = [[[] for _ in range(beam)] for _ in range(n)]
    pools: list[list[Hypothesis]] = [[] for _ in range(n)]
    for t in range(max_len):
        cand = (scores[:, :, None] + lp.reshape(n, beam, V)).reshape(n, beam * V)
        order = np.argsort(-cand, axis=1, kind="stable")[:, :beam]
        picked = np.take_along_axis(cand, order, axis=1)
        src, tok = order // V, order % V
        new_scores = np.full((n, beam), -np.inf)
        new_hist = [[None] * beam for _ in range(n)]
        for s in range(n):
            for j in range(beam):
                seq = hist[s][src[s, j]] + [int(tok[s, j])]
                new_hist[s][j] = seq
                if not np.isfinite(picked[s, j]):
                    continue
                if tok[s, j] == eos:
                    pools[s].append(Hypothesis(seq, float(picked[s, j]), True))
                else:
                    new_scores[s, j] = picked[s, j]
            if len(pools[s]) >= beam:
                live = [new_scores[s, j] / len(new_hist[s][j]) for j in range(beam)
                        if np.isfinite(new_scores[s, j])]
                if not live or max(live) <= max(h.score for h in pools[s]):
                    new_scores[s] = -np.inf
        scores, hist = new_scores, new_hist
        if not np.isfinite(scores).any():
            break
        if t == max_len - 1:
            for s in range(n):
                for j in range(beam):
                    if np.isfinite(scores[s, j]):
                        pools[s].append(Hypothesis(hist[s][j], float(scores[s, j]), False))
            break
        parents = (np.arange(n)[:, None] * beam + src).reshape(-1)
        lp = scorer.advance(tok.reshape(-1), parents)
    return [_best(p) for p in pools]


def decode(model: LSTModel, frames: Sequence[np.ndarray], beam: int = 4, max_len: int = 64,
           batch_size: int = 128) -> list[Hypothesis]:
    eos = model.vocab.EOS
    out: list[Hypothesis] = []
    for lo in range(0, len(frames), batch_size):
        scorer = LSTScorer(model, frames[lo:lo + batch_size])
        if beam == 1:
            out.extend(greedy_decode(scorer, eos, max_len))
        else:
            out.extend(beam_search(scorer, eos, beam, max_len))
    return out


@dataclass
class EvalResult:
    report: BleuReport
    rows: list[dict]

    def write(self, json_path=None, tsv_path=None) -> None:
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.report.to_dict(), indent=1), encoding="utf-8")
        if tsv_path is not None:
            with open(tsv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, delimiter="\t", lineterminator="\n")
                w.writerow(["id", "duration", "hyp", "ref"])
                for r in self.rows:
                    w.writerow([r["id"], r["duration"], r["hyp"], r["ref"]])


def evaluate(model: LSTModel | None, corpus: Sequence[Triple], beam: int = 4, max_len: int = 64,
             n_buckets: int = 5, hyps: Sequence[Sequence[int]] | None = None) -> EvalResult:
    """Decode a test corpus and score overall and per duration bucket.

    ``hyps`` bypasses decoding (oracle / precomputed outputs).
    """
    if not corpus:
        raise UsageError("cannot evaluate an empty corpus")
    for t in corpus:
        if not t.translation:
            raise UsageError(f"example {t.id!r} has no reference translation")
    if hyps is None:
        hyps = [h.content(model.vocab.EOS) for h in decode(model, [t.speech for t in corpus], beam, max_len)]
    name = model.vocab.token_str if model is not None else str
    hyp_s = [" ".join(name(x) for x in h) for h in hyps]
    ref_s = [" ".join(name(x) for x in t.translation) for t in corpus]
    report = score_stats(corpus_stats(hyp_s, ref_s))
    by_id = {t.id: i for i, t in enumerate(corpus)}
    for bucket in bucket_by_duration(corpus, n_buckets):
        st = None
        for t in bucket:
            i = by_id[t.id]
            s = sentence_stats(hyp_s[i], ref_s[i])
            st = s if st is None else st + s
        sub = score_stats(st)
        report.buckets.append({"min_dur": min(t.duration for t in bucket),
                               "max_dur": max(t.duration for t in bucket),
                               "count": len(bucket), "bleu": sub.bleu})
    rows = [{"id": t.id, "duration": t.duration, "hyp": hyp_s[i], "ref": ref_s[i]}
            for i, t in enumerate(corpus)]
    return EvalResult(report, rows)
