"""
Evaluation metrics over whitespace-tokenized text.

Corpus BLEU is sacrebleu's standard 4-gram BLEU with brevity penalty, run on the text as
given (tokenize="none", since the vocab is already whitespace-tokenized) and without
smoothing, so any n-gram order with no matches yields 0.
"""

import logging

from sacrebleu.metrics import BLEU

from app.errors import DataError


class BleuEvaluator:
    def __init__(self, tokenize="none", smooth_method="none"):
        self.bleu_model = BLEU(tokenize=tokenize, smooth_method=smooth_method)

    def evaluate_corpus(self, hyps, refs):
        """
        Corpus-level BLEU.

        Args:
            hyps (list): Hypothesis sentences.
            refs (list): One reference sentence per hypothesis.

        Returns:
            dict: bleu (0-100) plus the components sacrebleu reports.
        """
        result = self.bleu_model.corpus_score(hyps, [refs])
        return {
            "bleu": float(result.score),
            "precisions": [float(p) for p in result.precisions],
            "brevity_penalty": float(result.bp),
            "hyp_len": int(result.sys_len),
            "ref_len": int(result.ref_len),
        }


def _check_aligned(hyps, refs):
    if len(hyps) != len(refs):
        raise DataError(f"hypotheses and references are not aligned: {len(hyps)} vs {len(refs)} lines")


def exact_match(hyps, refs):
    """Fraction of hypotheses whose token sequence equals the reference's."""
    _check_aligned(hyps, refs)
    if not hyps:
        return 0.0
    return sum(h.split() == r.split() for h, r in zip(hyps, refs)) / len(hyps)


def corpus_bleu(hyps, refs):
    _check_aligned(hyps, refs)
    return BleuEvaluator().evaluate_corpus([" ".join(h.split()) for h in hyps], [" ".join(r.split()) for r in refs])


def evaluate(hyps, refs):
    """
    Exact match and corpus BLEU together, as reported by the eval command.

    Returns:
        dict: exact_match, bleu, brevity_penalty, precisions, lengths and line count.
    """
    bleu = corpus_bleu(hyps, refs)
    report = {"exact_match": exact_match(hyps, refs), "lines": len(hyps), **bleu}
    logging.info(f"Evaluated {len(hyps)} lines: exact match {report['exact_match']:.4f}, BLEU {report['bleu']:.2f}")
    return report
