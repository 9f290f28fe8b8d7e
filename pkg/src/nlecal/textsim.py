"""Sentence segmentation and ROUGE-L similarity.

These are the text primitives the novelty-based aggregator is built on.
Both are deliberately rule-based and model-free: segmentation splits on
terminal punctuation followed by whitespace, and tokens are lowercase
alphanumeric runs, so results are reproducible across machines and
languages with no external resources.
"""

import re
from dataclasses import dataclass
from functools import lru_cache

# Unicode-aware alphanumeric runs (letters and digits, no underscore).
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

# A sentence boundary sits after '.', '!' or '?' when followed by
# whitespace or end-of-string. Abbreviations like "U.S." survive because
# their inner periods are followed by a letter.
_BOUNDARY_RE = re.compile(r"(?<=[.!?])(?=\s|$)")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase alphanumeric tokens of *text*, in order."""
    return tuple(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class Sentence:
    """A trimmed sentence plus its deterministic token sequence."""

    text: str
    tokens: tuple[str, ...]

    @classmethod
    def from_text(cls, text: str) -> "Sentence":
        trimmed = text.strip()
        return cls(text=trimmed, tokens=tokenize(trimmed))


def split_sentences(text: str) -> list[Sentence]:
    """Segment *text* into sentences.

    Splits after '.', '!' or '?' followed by whitespace or end-of-string,
    trims each segment, and drops empty ones. Order is preserved. A text
    without any terminal punctuation yields a single sentence.
    """
    out = []
    for segment in _BOUNDARY_RE.split(text):
        segment = segment.strip()
        if segment:
            out.append(Sentence.from_text(segment))
    return out


@lru_cache(maxsize=1 << 16)
def _lcs_length(a: tuple[str, ...], b: tuple[str, ...]) -> int:
    """Length of the longest common subsequence of two token tuples."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for token in a:
        cur = [0]
        for j, other in enumerate(b, 1):
            if token == other:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(cur[j - 1], prev[j]))
        prev = cur
    return prev[-1]


def rouge_l(a: Sentence, b: Sentence) -> float:
    """ROUGE-L F1 similarity between two sentences, in [0, 1].

    With ``l`` the LCS length over tokens, ``m = |a.tokens|`` and
    ``n = |b.tokens|``: precision = l/n, recall = l/m, and the score is
    their harmonic mean (F1, beta = 1). Zero whenever either token list is
    empty or the LCS is empty. Symmetric in its arguments.
    """
    m, n = len(a.tokens), len(b.tokens)
    if m == 0 or n == 0:
        return 0.0
    # Canonical argument order doubles the memoization hit rate.
    if a.tokens <= b.tokens:
        lcs = _lcs_length(a.tokens, b.tokens)
    else:
        lcs = _lcs_length(b.tokens, a.tokens)
    if lcs == 0:
        return 0.0
    precision = lcs / n
    recall = lcs / m
    return 2.0 * precision * recall / (precision + recall)
