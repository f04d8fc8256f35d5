"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L, CIDEr.

All metrics are pure functions of (candidates, references).  A candidate is
a token list; its references are a non-empty list of token lists.
Tokenization is the caller's problem (the toy language is whitespace-safe).

- BLEU: corpus-level clipped n-gram precision with brevity penalty
  (closest-length effective reference); zero precisions are replaced by
  epsilon = 1e-9.
- ROUGE-L: per-sentence LCS F-measure (beta^2 = 1.44), max over references,
  averaged over the corpus.
- CIDEr: per-sentence mean over n = 1..4 of 10 x cosine similarity between
  tf-idf n-gram vectors (idf from the reference corpus), averaged over
  references, then over the corpus.  No length penalty (plain CIDEr).
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .errors import ContractError, FormatError

EPSILON = 1e-9
ROUGE_BETA_SQ = 1.2 ** 2


Sentence = list[str]
References = list[Sentence]


def _check_aligned(candidates: list[Sentence], references: list[References]):
    if len(candidates) != len(references):
        raise ContractError(
            f"candidates ({len(candidates)}) and references "
            f"({len(references)}) are not aligned")
    if not candidates:
        raise ContractError("empty evaluation corpus")
    for refs in references:
        if not refs:
            raise ContractError("every candidate needs >= 1 reference")


def _ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[Sentence], references: list[References],
         n: int = 4) -> float:
    """Corpus BLEU-n with uniform weights over orders 1..n."""
    if not 1 <= n <= 4:
        raise ContractError("bleu order must be in 1..4")
    _check_aligned(candidates, references)
    clipped = [0] * n
    total = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = _ngrams(cand, k)
            max_ref: Counter = Counter()
            for ref in refs:
                ref_counts = _ngrams(ref, k)
                for gram, c in ref_counts.items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            total[k - 1] += max(0, len(cand) - k + 1)
            clipped[k - 1] += sum(min(c, max_ref[gram])
                                  for gram, c in counts.items())
    log_precision = 0.0
    for k in range(n):
        p_k = clipped[k] / total[k] if total[k] else 0.0
        if p_k == 0.0:
            p_k = EPSILON
        log_precision += math.log(p_k) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / max(1, cand_len))
    return bp * math.exp(log_precision)


def _lcs_length(a: Sentence, b: Sentence) -> int:
    rows = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                rows[i][j] = rows[i - 1][j - 1] + 1
            else:
                rows[i][j] = max(rows[i - 1][j], rows[i][j - 1])
    return rows[len(a)][len(b)]


def rouge_l_sentence(candidate: Sentence, refs: References) -> float:
    best = 0.0
    for ref in refs:
        if not candidate or not ref:
            continue
        lcs = _lcs_length(candidate, ref)
        if lcs == 0:
            continue
        prec = lcs / len(candidate)
        rec = lcs / len(ref)
        score = ((1 + ROUGE_BETA_SQ) * prec * rec
                 / (rec + ROUGE_BETA_SQ * prec))
        best = max(best, score)
    return best


def rouge_l(candidates: list[Sentence], references: list[References]) -> float:
    _check_aligned(candidates, references)
    return sum(rouge_l_sentence(c, r)
               for c, r in zip(candidates, references)) / len(candidates)


def _cider_document_frequency(references: list[References]) -> list[dict]:
    df = [defaultdict(int) for _ in range(4)]
    for refs in references:
        seen = [set() for _ in range(4)]
        for ref in refs:
            for k in range(1, 5):
                seen[k - 1].update(_ngrams(ref, k).keys())
        for k in range(4):
            for gram in seen[k]:
                df[k][gram] += 1
    return df


def _tfidf_vector(tokens: Sentence, k: int, df: dict, n_groups: int) -> dict:
    vec = {}
    for gram, count in _ngrams(tokens, k).items():
        idf = math.log(n_groups / max(1.0, df.get(gram, 0.0)))
        vec[gram] = count * idf
    return vec


def _cosine(a: dict, b: dict) -> float:
    norm_a = math.sqrt(sum(v * v for v in a.values()))
    norm_b = math.sqrt(sum(v * v for v in b.values()))
    if norm_a == 0 or norm_b == 0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (norm_a * norm_b)


def cider_sentence(candidate: Sentence, refs: References, df: list[dict],
                   n_groups: int) -> float:
    score = 0.0
    for k in range(1, 5):
        cand_vec = _tfidf_vector(candidate, k, df[k - 1], n_groups)
        sim = sum(_cosine(cand_vec,
                          _tfidf_vector(ref, k, df[k - 1], n_groups))
                  for ref in refs) / len(refs)
        score += sim
    return 10.0 * score / 4.0


def cider(candidates: list[Sentence], references: list[References]) -> float:
    _check_aligned(candidates, references)
    if len(references) < 2:
        raise ContractError("cider needs >= 2 reference groups to define idf")
    df = _cider_document_frequency(references)
    n_groups = len(references)
    return sum(cider_sentence(c, r, df, n_groups)
               for c, r in zip(candidates, references)) / len(candidates)


@dataclass
class EvalReport:
    corpus_scores: dict[str, float]
    per_sentence: list[dict[str, float]] = field(default_factory=list)
    n_candidates: int = 0
    n_references: int = 0

    def to_dict(self) -> dict:
        return {"corpus": self.corpus_scores,
                "per_sentence": self.per_sentence,
                "n_candidates": self.n_candidates,
                "n_references": self.n_references}


def evaluate(candidates: list[Sentence], references: list[References]
             ) -> EvalReport:
    """Full report: BLEU-1..4, ROUGE-L and CIDEr, plus per-sentence scores."""
    _check_aligned(candidates, references)
    corpus = {f"bleu{k}": bleu(candidates, references, k) for k in range(1, 5)}
    corpus["rouge_l"] = rouge_l(candidates, references)
    corpus["cider"] = cider(candidates, references)
    df = _cider_document_frequency(references)
    per_sentence = []
    for cand, refs in zip(candidates, references):
        per_sentence.append({
            "bleu1": bleu([cand], [refs], 1),
            "rouge_l": rouge_l_sentence(cand, refs),
            "cider": cider_sentence(cand, refs, df, len(references)),
        })
    return EvalReport(corpus_scores=corpus, per_sentence=per_sentence,
                      n_candidates=len(candidates),
                      n_references=sum(len(r) for r in references))


# -- file formats ----------------------------------------------------------

def read_token_lines(path) -> dict[int, list[Sentence]]:
    """JSON-lines of {"id": int, "tokens": [...]} or {"id", "refs": [[...]]};
    repeated ids accumulate as extra references."""
    table: dict[int, list[Sentence]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                ident = int(doc["id"])
                if "refs" in doc:
                    group = [list(r) for r in doc["refs"]]
                else:
                    group = [list(doc["tokens"])]
            except (KeyError, TypeError, ValueError) as err:
                raise FormatError(f"{path}: line {lineno}: {err}") from err
            table.setdefault(ident, []).extend(group)
    return table


def write_report(report: EvalReport, json_path, csv_path) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "score"])
        for name in sorted(report.corpus_scores):
            writer.writerow([name, repr(report.corpus_scores[name])])
