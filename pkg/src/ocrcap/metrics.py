"""Corpus caption metrics: BLEU-4, ROUGE-L and CIDEr-D.

Conventions follow the usual captioning evaluation kit: BLEU uses the
closest reference length for the brevity penalty and substitutes
``1e-15 / (1e-9 + guesses)`` for an n-gram order with no matches; ROUGE-L uses
beta = 1.2 with the best precision and best recall over references; CIDEr-D
clips candidate counts by reference counts and applies a Gaussian length
penalty with sigma = 6.
"""
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ocrcap import kernels

BLEU_TINY = 1e-15
BLEU_SMALL = 1e-9
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


@dataclass(frozen=True)
class EvalItem:
    image_id: str
    candidate: tuple
    references: tuple

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"{self.image_id}: at least one reference caption required")


def make_corpus(candidates, references):
    """Join ``{image_id: tokens}`` candidates with ``{image_id: [tokens, ...]}`` references."""
    missing = [k for k in candidates if k not in references]
    if missing:
        raise KeyError(f"no references for: {', '.join(missing[:5])}")
    return [
        EvalItem(k, tuple(candidates[k]), tuple(tuple(r) for r in references[k]))
        for k in candidates
    ]


def ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------ BLEU


def bleu4(corpus):
    correct = [0] * 4
    guess = [0] * 4
    cand_len = ref_len = 0
    for item in corpus:
        c = list(item.candidate)
        cand_len += len(c)
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in item.references)[1]
        for n in range(1, 5):
            cc = ngrams(c, n)
            max_ref = Counter()
            for r in item.references:
                for g, k in ngrams(list(r), n).items():
                    if k > max_ref[g]:
                        max_ref[g] = k
            correct[n - 1] += sum(min(k, max_ref[g]) for g, k in cc.items())
            guess[n - 1] += sum(cc.values())
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for k, g in zip(correct, guess):
        p = k / g if k > 0 else BLEU_TINY / (BLEU_SMALL + g)
        log_p += math.log(p) / 4.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


# ------------------------------------------------------------------ ROUGE-L


def _ids(*seqs):
    table = {}
    return [np.array([table.setdefault(t, len(table)) for t in s], dtype=np.int64) for s in seqs]


def lcs_length(a, b):
    x, y = _ids(a, b)
    return int(kernels.lcs_length(x, y))


def rouge_l_sentence(candidate, references, beta=ROUGE_BETA):
    if not candidate:
        return 0.0
    precs, recs = [], []
    for r in references:
        lcs = lcs_length(candidate, r)
        precs.append(lcs / len(candidate))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(corpus):
    if not corpus:
        return 0.0
    return 100.0 * float(np.mean([rouge_l_sentence(i.candidate, i.references) for i in corpus]))


# ------------------------------------------------------------------ CIDEr-D


def _tfidf(tokens, df, log_n):
    vecs, norms = [], []
    for n in range(1, 5):
        vec = {g: k * (log_n - math.log(max(1.0, df.get(g, 0.0)))) for g, k in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_per_image(corpus, sigma=CIDER_SIGMA):
    if len(corpus) < 2:
        raise ValueError("cider needs at least 2 images to define document frequencies")
    df = Counter()
    for item in corpus:
        seen = set()
        for r in item.references:
            for n in range(1, 5):
                seen.update(ngrams(list(r), n))
        df.update(seen)
    log_n = math.log(float(len(corpus)))
    scores = []
    for item in corpus:
        cand = list(item.candidate)
        cvec, cnorm = _tfidf(cand, df, log_n)
        total = np.zeros(4)
        for r in item.references:
            rvec, rnorm = _tfidf(list(r), df, log_n)
            delta = len(cand) - len(r)
            for n in range(4):
                val = sum(min(v, rvec[n].get(g, 0.0)) * rvec[n].get(g, 0.0) for g, v in cvec[n].items())
                if cnorm[n] != 0 and rnorm[n] != 0:
                    val /= cnorm[n] * rnorm[n]
                total[n] += val * math.exp(-(delta**2) / (2 * sigma**2))
        scores.append(10.0 * float(total.mean()) / len(item.references))
    return scores


def cider(corpus, sigma=CIDER_SIGMA):
    return float(np.mean(cider_per_image(corpus, sigma)))


def evaluate(corpus):
    return {
        "bleu4": bleu4(corpus),
        "rouge_l": rouge_l(corpus),
        "cider": cider(corpus),
        "n_images": len(corpus),
    }
