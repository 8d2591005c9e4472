"""BLEU-N / ROUGE-1 metrics, corpus evaluation and case dumps."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

from eeg2text.data import Corpus

log = logging.getLogger(__name__)

METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1-F", "ROUGE-1-P", "ROUGE-1-R")
_TABLE_HEADER = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1 F", "ROUGE-1 P", "ROUGE-1 R")


class VocabMismatchError(ValueError):
    pass


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int) -> tuple[int, int]:
    """Corpus totals of clipped ``n``-gram matches and candidate ``n``-grams."""
    matches = total = 0
    for cand, ref in zip(candidates, references, strict=True):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        matches += sum(min(k, r[g]) for g, k in c.items())
        total += max(len(cand) - n + 1, 0)
    return matches, total


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len >= ref_len:
        return 1.0
    if cand_len == 0:
        return 0.0
    return math.exp(1.0 - ref_len / cand_len)


def bleu_n(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int) -> float:
    """Corpus-level BLEU-``n`` with uniform weights and no smoothing.

    An order with no n-grams in either candidates or references (every
    sentence too short) is vacuously matched and contributes precision 1.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise ValueError("BLEU of an empty corpus is undefined")
    if n not in (1, 2, 3, 4):
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    log_p = 0.0
    for k in range(1, n + 1):
        matches, total = ngram_stats(candidates, references, k)
        if total == 0 and ngram_stats(references, references, k)[1] == 0:
            continue
        if matches == 0:
            return 0.0
        log_p += math.log(matches / total) / n
    c = sum(len(x) for x in candidates)
    r = sum(len(x) for x in references)
    return brevity_penalty(c, r) * math.exp(log_p)


def rouge1(candidate: Sequence[str], reference: Sequence[str]) -> tuple[float, float, float]:
    """Unigram overlap ``(F, P, R)``."""
    if not candidate or not reference:
        raise ValueError("ROUGE-1 needs non-empty candidate and reference")
    c, r = Counter(candidate), Counter(reference)
    matches = sum(min(k, r[t]) for t, k in c.items())
    p = matches / len(candidate)
    rec = matches / len(reference)
    f = 0.0 if p + rec == 0 else 2 * p * rec / (p + rec)
    return f, p, rec


def rouge1_corpus(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Mean per-sentence ROUGE-1; an empty candidate scores zero."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise ValueError("ROUGE-1 of an empty corpus is undefined")
    scores = [rouge1(c, r) if c else (0.0, 0.0, 0.0) for c, r in zip(candidates, references)]
    return tuple(sum(s[i] for s in scores) / len(scores) for i in range(3))


@dataclass(frozen=True)
class MetricsReport:
    bleu: Mapping[int, float]
    rouge1: tuple[float, float, float]
    n_sentences: int
    mode: str = "greedy"

    def __post_init__(self):
        if sorted(self.bleu) != [1, 2, 3, 4]:
            raise ValueError("bleu must hold orders 1..4")
        for v in (*self.bleu.values(), *self.rouge1):
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"metric value {v} outside [0, 1]")

    @classmethod
    def compute(cls, candidates, references, mode: str = "greedy") -> "MetricsReport":
        bleu = {n: bleu_n(candidates, references, n) for n in (1, 2, 3, 4)}
        return cls(bleu, rouge1_corpus(candidates, references), len(candidates), mode)

    def metrics(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, (*[self.bleu[n] for n in (1, 2, 3, 4)], *self.rouge1)))

    def to_dict(self, **meta) -> dict:
        return {"metrics": self.metrics(), "n_sentences": self.n_sentences, "mode": self.mode, **meta}

    def to_json(self, **meta) -> str:
        return json.dumps(self.to_dict(**meta), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        m = d["metrics"]
        if set(m) != set(METRIC_NAMES):
            raise ValueError(f"report metrics must be exactly {METRIC_NAMES}")
        return cls({n: float(m[f"BLEU-{n}"]) for n in (1, 2, 3, 4)},
                   (float(m["ROUGE-1-F"]), float(m["ROUGE-1-P"]), float(m["ROUGE-1-R"])),
                   int(d["n_sentences"]), d.get("mode", "greedy"))


def format_table(rows: Mapping[str, MetricsReport], digits: int = 3) -> str:
    """Aligned plain-text table, one row per named report."""
    header = ("Method", *_TABLE_HEADER)
    body = [(name, *(f"{v:.{digits}f}" for v in r.metrics().values())) for name, r in rows.items()]
    widths = [max(len(row[i]) for row in (header, *body)) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in (header, *body)]
    return "\n".join(line.rstrip() for line in lines) + "\n"


# ---------------------------------------------------------------- model-driven

def check_vocab(model, corpus: Corpus, vocab: Sequence[str] | None = None) -> None:
    if vocab is not None and tuple(vocab) != corpus.vocabulary.tokens:
        raise VocabMismatchError("checkpoint vocabulary differs from the corpus vocabulary")
    if model.cfg.vocab_size != len(corpus.vocabulary):
        raise VocabMismatchError(
            f"model vocab_size {model.cfg.vocab_size} != corpus vocabulary size {len(corpus.vocabulary)}")


def decode_corpus(model, corpus: Corpus, mode: str = "greedy", beam_width: int = 4,
                  indices: Sequence[int] | None = None) -> list[list[str]]:
    """Generated token lists (specials stripped, unknowns shown as ``<unk>``)."""
    idx = range(len(corpus)) if indices is None else indices
    out = []
    for i in idx:
        rec = corpus.pairs[i][0]
        ids = model.generate(model.encode(rec), mode=mode, beam_width=beam_width)
        out.append(corpus.vocabulary.decode(ids, strip_special=True))
    return out


def evaluate(model, corpus: Corpus, mode: str = "greedy", beam_width: int = 4,
             vocab: Sequence[str] | None = None) -> MetricsReport:
    """Decode every sentence and score it against the corpus text."""
    check_vocab(model, corpus, vocab)
    candidates = decode_corpus(model, corpus, mode, beam_width)
    references = [list(s.tokens) for s in corpus.sentences]
    report = MetricsReport.compute(candidates, references, mode)
    log.info("evaluated %d sentences (%s): %s", len(corpus), mode, report.metrics())
    return report


def case_report(model, corpus: Corpus, indices: Sequence[int], mode: str = "greedy", beam_width: int = 4,
                vocab: Sequence[str] | None = None) -> str:
    """Ground-truth / model-output line pairs for the chosen sentences."""
    for i in indices:
        if not 0 <= i < len(corpus):
            raise IndexError(f"sentence index {i} out of range [0, {len(corpus)})")
    check_vocab(model, corpus, vocab)
    outputs = decode_corpus(model, corpus, mode, beam_width, indices)
    blocks = [f"Ground Truth: {corpus.sentences[i].raw_text}\nModel Output: {' '.join(out)}"
              for i, out in zip(indices, outputs)]
    return "\n\n".join(blocks) + "\n"
