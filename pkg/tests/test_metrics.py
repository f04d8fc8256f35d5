import itertools
import math
from collections import Counter

import numpy as np
import pytest

from xlingcap.errors import ContractError
from xlingcap.metrics import (EvalReport, bleu, cider, evaluate, read_token_lines,
                              rouge_l, write_report)


def toks(text):
    return text.split()


class TestBleu:
    def test_identical_corpus_scores_one_at_every_order(self):
        cands = [toks("a cat sat on the mat"), toks("dogs chase cats quickly")]
        refs = [[c] for c in cands]
        for n in range(1, 5):
            assert bleu(cands, refs, n) == pytest.approx(1.0)

    def test_clipped_unigram_precision(self):
        cand = toks("the the the the the the the")
        ref = toks("the cat is on the mat")
        # clipped matches 2, candidate unigrams 7; candidate longer than ref
        score = bleu([cand], [[ref]], 1)
        assert score == pytest.approx(2 / 7)

    def test_matches_naive_counting_oracle(self):
        rng = np.random.default_rng(5)
        vocab = ["aa", "bb", "cc", "dd", "ee"]
        for trial in range(30):
            cands, refs = [], []
            for _ in range(4):
                cands.append(list(rng.choice(vocab, size=rng.integers(3, 9))))
                refs.append([list(rng.choice(vocab, size=rng.integers(3, 9)))
                             for _ in range(rng.integers(1, 3))])
            for n in (1, 2, 3, 4):
                assert bleu(cands, refs, n) == pytest.approx(
                    _oracle_bleu(cands, refs, n), abs=1e-12), (trial, n)

    def test_monotone_nonincreasing_in_order(self):
        rng = np.random.default_rng(6)
        vocab = ["aa", "bb", "cc"]
        for _ in range(20):
            cands = [list(rng.choice(vocab, size=8)) for _ in range(3)]
            refs = [[list(rng.choice(vocab, size=8))] for _ in range(3)]
            scores = [bleu(cands, refs, n) for n in range(1, 5)]
            assert all(a >= b - 1e-12 for a, b in zip(scores, scores[1:]))

    def test_corpus_permutation_invariance(self):
        rng = np.random.default_rng(7)
        vocab = ["aa", "bb", "cc", "dd"]
        cands = [list(rng.choice(vocab, size=6)) for _ in range(4)]
        refs = [[list(rng.choice(vocab, size=6))] for _ in range(4)]
        base = bleu(cands, refs, 4)
        for perm in itertools.permutations(range(4)):
            assert bleu([cands[i] for i in perm],
                        [refs[i] for i in perm], 4) == pytest.approx(base)

    def test_misaligned_inputs_rejected(self):
        with pytest.raises(ContractError):
            bleu([toks("a b")], [], 1)


def _oracle_bleu(cands, refs, n):
    """Naive from-scratch BLEU: count every n-gram by scanning windows."""
    clipped = [0] * n
    total = [0] * n
    c_len = r_len = 0
    for cand, ref_group in zip(cands, refs):
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in ref_group)[1]
        for k in range(1, n + 1):
            windows = [tuple(cand[i:i + k]) for i in range(len(cand) - k + 1)]
            total[k - 1] += len(windows)
            for gram in set(windows):
                best = max((sum(1 for j in range(len(r) - k + 1)
                                if tuple(r[j:j + k]) == gram)
                            for r in ref_group), default=0)
                clipped[k - 1] += min(windows.count(gram), best)
    log_p = 0.0
    for k in range(n):
        p = clipped[k] / total[k] if total[k] else 0.0
        log_p += math.log(p if p > 0 else 1e-9) / n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / max(1, c_len))
    return bp * math.exp(log_p)


class TestRouge:
    def test_identical_sentences(self):
        cand = toks("a cat sat on the mat")
        assert rouge_l([cand], [[cand]]) == pytest.approx(1.0)

    def test_lcs_example(self):
        cand = toks("a b c d")
        ref = toks("a c b d")
        # LCS length 3 -> P = R = 0.75 -> F = 0.75 (beta cancels)
        assert rouge_l([cand], [[ref]]) == pytest.approx(0.75)

    def test_disjoint_vocabularies(self):
        assert rouge_l([toks("a b c")], [[toks("x y z")]]) == 0.0

    def test_matches_dp_oracle(self):
        rng = np.random.default_rng(8)
        vocab = ["aa", "bb", "cc"]
        for _ in range(40):
            cand = list(rng.choice(vocab, size=rng.integers(1, 8)))
            ref = list(rng.choice(vocab, size=rng.integers(1, 8)))
            expected = _oracle_rouge(cand, ref)
            assert rouge_l([cand], [[ref]]) == pytest.approx(expected)


def _oracle_rouge(cand, ref):
    # recursive LCS, memoized
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def lcs(i, j):
        if i == 0 or j == 0:
            return 0
        if cand[i - 1] == ref[j - 1]:
            return lcs(i - 1, j - 1) + 1
        return max(lcs(i - 1, j), lcs(i, j - 1))

    length = lcs(len(cand), len(ref))
    if length == 0:
        return 0.0
    p, r = length / len(cand), length / len(ref)
    beta_sq = 1.44
    return (1 + beta_sq) * p * r / (r + beta_sq * p)


class TestCider:
    def test_identical_to_sole_reference_scores_ten(self):
        corpus = [toks("a cat sat on the mat today"),
                  toks("dogs chase red cars down town fast"),
                  toks("birds fly over tall green trees often")]
        cands = list(corpus)
        refs = [[c] for c in corpus]
        assert cider(cands, refs) == pytest.approx(10.0)

    def test_disjoint_ngrams_score_zero(self):
        cands = [toks("a b c d"), toks("e f g h")]
        refs = [[toks("w x y z")], [toks("p q r s")]]
        assert cider(cands, refs) == pytest.approx(0.0)

    def test_matches_from_scratch_tfidf_oracle(self):
        corpus = [
            (toks("a cat sat on the mat"), [toks("a cat is on the mat"),
                                            toks("the cat sat there")]),
            (toks("dogs chase cars"), [toks("dogs chase red cars")]),
            (toks("birds fly high"), [toks("the birds fly very high")]),
            (toks("a dog barks"), [toks("a dog barks loudly")]),
            (toks("the mat is red"), [toks("that mat is red")]),
        ]
        cands = [c for c, _ in corpus]
        refs = [r for _, r in corpus]
        assert cider(cands, refs) == pytest.approx(
            _oracle_cider(cands, refs), abs=1e-9)

    def test_needs_two_reference_groups(self):
        with pytest.raises(ContractError):
            cider([toks("a")], [[toks("a")]])


def _oracle_cider(cands, refs):
    n_groups = len(refs)
    scores = []
    for cand, group in zip(cands, refs):
        total = 0.0
        for k in range(1, 5):
            df = Counter()
            for other in refs:
                grams = set()
                for ref in other:
                    grams |= {tuple(ref[i:i + k]) for i in range(len(ref) - k + 1)}
                for g in grams:
                    df[g] += 1

            def vec(tokens):
                counts = Counter(tuple(tokens[i:i + k])
                                 for i in range(len(tokens) - k + 1))
                return {g: c * math.log(n_groups / max(1, df[g]))
                        for g, c in counts.items()}

            cv = vec(cand)
            sim = 0.0
            for ref in group:
                rv = vec(ref)
                na = math.sqrt(sum(v * v for v in cv.values()))
                nb = math.sqrt(sum(v * v for v in rv.values()))
                if na and nb:
                    sim += sum(v * rv.get(g, 0.0) for g, v in cv.items()) / (na * nb)
            total += sim / len(group)
        scores.append(10 * total / 4)
    return sum(scores) / len(scores)


class TestReportAndFiles:
    def test_evaluate_produces_full_report(self):
        cands = [toks("a cat sat down"), toks("dogs chase cars fast")]
        refs = [[toks("a cat sat right down")], [toks("dogs chase cars")]]
        report = evaluate(cands, refs)
        assert set(report.corpus_scores) == {"bleu1", "bleu2", "bleu3",
                                             "bleu4", "rouge_l", "cider"}
        assert len(report.per_sentence) == 2
        assert report.n_candidates == 2 and report.n_references == 2
        for name, value in report.corpus_scores.items():
            assert math.isfinite(value), name
            if name != "cider":
                assert 0.0 <= value <= 1.0, name
            else:
                assert 0.0 <= value <= 10.0

    def test_file_round_trip(self, tmp_path):
        preds = tmp_path / "preds.jsonl"
        preds.write_text('{"id": 0, "tokens": ["a", "b"]}\n'
                         '{"id": 1, "tokens": ["c"]}\n')
        refs = tmp_path / "refs.jsonl"
        refs.write_text('{"id": 0, "refs": [["a", "b"], ["a"]]}\n'
                        '{"id": 1, "tokens": ["c", "d"]}\n'
                        '{"id": 1, "tokens": ["c"]}\n')
        pred_map = read_token_lines(preds)
        ref_map = read_token_lines(refs)
        assert pred_map[0] == [["a", "b"]]
        assert ref_map[1] == [["c", "d"], ["c"]]

        report = EvalReport(corpus_scores={"bleu1": 0.5}, per_sentence=[],
                            n_candidates=2, n_references=3)
        write_report(report, tmp_path / "r.json", tmp_path / "r.csv")
        assert (tmp_path / "r.json").exists()
        text = (tmp_path / "r.csv").read_text()
        assert "bleu1" in text and "0.5" in text
