"""Corpus-level caption metrics: BLEU-n, ROUGE-L, CIDEr and vocabulary diversity."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .corpus import SPECIAL_TOKENS, tokenize
from .errors import ContractError, DataError

Tokens = Sequence[str]


@dataclass
class EvalCorpus:
    """One candidate and at least one reference per key, all tokenized."""

    candidates: dict[str, list[str]]
    references: dict[str, list[list[str]]]

    def __post_init__(self):
        missing_refs = sorted(set(self.candidates) - set(self.references))
        missing_cands = sorted(set(self.references) - set(self.candidates))
        if missing_refs or missing_cands:
            raise DataError(f"candidate/reference keys disagree; no references for {missing_refs}, "
                            f"no candidate for {missing_cands}")
        for key, refs in self.references.items():
            if not refs:
                raise DataError(f"no references for {key!r}")

    def __len__(self) -> int:
        return len(self.candidates)

    def keys(self) -> list[str]:
        return sorted(self.candidates)

    @classmethod
    def from_texts(cls, candidates: Mapping[str, str], references: Mapping[str, Iterable[str]]) -> "EvalCorpus":
        return cls({k: tokenize(v) for k, v in candidates.items()},
                   {k: [tokenize(r) for r in v] for k, v in references.items()})


def _require(corpus: EvalCorpus, min_size: int = 1) -> None:
    if len(corpus) < min_size:
        raise ContractError(f"metric needs at least {min_size} image(s), corpus has {len(corpus)}")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU --------------------------------------------------------------------

def bleu(corpus: EvalCorpus, n: int = 4) -> float:
    """Corpus BLEU-n: clipped n-gram precisions pooled over the corpus,
    geometric mean over orders 1..n, brevity penalty against the closest
    reference length (shorter reference on ties). No smoothing."""
    if not 1 <= n <= 4:
        raise ContractError(f"BLEU order must be in 1..4, got {n}")
    _require(corpus)
    correct = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for key in corpus.keys():
        cand = corpus.candidates[key]
        refs = corpus.references[key]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, k)
            correct[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += max(0, len(cand) - k + 1)
    if cand_len == 0 or any(c == 0 for c in correct):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(correct, total)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


# -- ROUGE-L -----------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    best = 0.0
    for ref in refs:
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def rouge_l(corpus: EvalCorpus, beta: float = 1.2) -> float:
    """Mean over images of the LCS F-measure against the best-matching reference."""
    _require(corpus)
    keys = corpus.keys()
    return sum(rouge_l_sentence(corpus.candidates[k], corpus.references[k], beta) for k in keys) / len(keys)


# -- CIDEr -------------------------------------------------------------------

def _tfidf(tokens: Tokens, n: int, df: Counter, log_n: float) -> dict:
    counts = ngrams(tokens, n)
    return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider_per_image(corpus: EvalCorpus, max_n: int = 4, scale: float = 10.0) -> dict[str, float]:
    """Plain CIDEr per key; document frequencies count images whose references contain the n-gram."""
    _require(corpus, 2)
    keys = corpus.keys()
    log_n = math.log(len(keys))
    df: Counter = Counter()
    for k in keys:
        seen = set()
        for ref in corpus.references[k]:
            for n in range(1, max_n + 1):
                seen.update(ngrams(ref, n))
        df.update(seen)
    scores = {}
    for k in keys:
        refs = corpus.references[k]
        per_order = []
        for n in range(1, max_n + 1):
            cv = _tfidf(corpus.candidates[k], n, df, log_n)
            per_order.append(sum(_cosine(cv, _tfidf(r, n, df, log_n)) for r in refs) / len(refs))
        scores[k] = scale * sum(per_order) / max_n
    return scores


def cider(corpus: EvalCorpus, max_n: int = 4, scale: float = 10.0) -> float:
    scores = cider_per_image(corpus, max_n, scale)
    return sum(scores.values()) / len(scores)


# -- diversity ---------------------------------------------------------------

def unique_words(candidates: Iterable[Tokens | str]) -> int:
    vocab = set()
    for cand in candidates:
        vocab.update(tokenize(cand) if isinstance(cand, str) else cand)
    return len(vocab - set(SPECIAL_TOKENS))


REPORT_FIELDS = ("bleu1", "bleu3", "bleu4", "rouge_l", "cider", "unique_words")


def report(corpus: EvalCorpus) -> dict:
    return {
        "bleu1": bleu(corpus, 1),
        "bleu3": bleu(corpus, 3),
        "bleu4": bleu(corpus, 4),
        "rouge_l": rouge_l(corpus),
        "cider": cider(corpus),
        "unique_words": unique_words(corpus.candidates.values()),
    }
