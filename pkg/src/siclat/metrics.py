"""Evaluation metrics and grouped breakdown tables.

Word/character error rates are utterance-level and capped at 1 before
averaging, so a single hallucinated transcript cannot dominate the corpus
score. BLEU is corpus-level with pooled modified n-gram counts. Choice
accuracy extracts the first standalone choice letter from a generation.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

_PUNCT_RE = re.compile(r"[^\w\s']", flags=re.UNICODE)
_WS_RE = re.compile(r"\s+")


class ConservationError(Exception):
    """A complete disjoint grouping does not sum back to the overall score."""


@dataclass(frozen=True)
class TextNormalizer:
    """Pinned text normalization so reported numbers are reproducible.

    Defaults: lowercase, strip punctuation except apostrophes, collapse
    whitespace. ``remove_whitespace`` is for character-level scoring of
    languages written without spaces.
    """

    lowercase: bool = True
    strip_punct: bool = True
    collapse_whitespace: bool = True
    remove_whitespace: bool = False

    def __call__(self, text: str) -> str:
        if self.lowercase:
            text = text.lower()
        if self.strip_punct:
            text = _PUNCT_RE.sub(" ", text)
        if self.remove_whitespace:
            text = _WS_RE.sub("", text)
        elif self.collapse_whitespace:
            text = _WS_RE.sub(" ", text).strip()
        return text


WORD_NORMALIZER = TextNormalizer()
CHAR_NORMALIZER = TextNormalizer(remove_whitespace=True)


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Minimal number of substitutions, insertions and deletions turning a into b.

    Two-row iterative Levenshtein; works on any sequences of hashable tokens.
    """
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, tok_b in enumerate(b, start=1):
            cost = 0 if tok_a == tok_b else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


def capped_utterance_wer(
    hyp: str,
    ref: str,
    normalizer: TextNormalizer = WORD_NORMALIZER,
    cap: bool = True,
) -> float:
    """Word error rate of one utterance, clipped at 1.0 when ``cap`` is set.

    Raises ValueError if the reference is empty after normalization; corpus
    aggregation excludes such items with a warning instead.
    """
    ref_words = normalizer(ref).split()
    if not ref_words:
        raise ValueError("reference empty after normalization")
    hyp_words = normalizer(hyp).split()
    rate = edit_distance(hyp_words, ref_words) / len(ref_words)
    return min(1.0, rate) if cap else rate


def cer(
    hyp: str,
    ref: str,
    normalizer: TextNormalizer = CHAR_NORMALIZER,
    cap: bool = True,
) -> float:
    """Character error rate of one utterance (whitespace handling per normalizer)."""
    ref_chars = list(normalizer(ref))
    if not ref_chars:
        raise ValueError("reference empty after normalization")
    hyp_chars = list(normalizer(hyp))
    rate = edit_distance(hyp_chars, ref_chars) / len(ref_chars)
    return min(1.0, rate) if cap else rate


def corpus_error_rate(
    pairs: Iterable[tuple[str, str]],
    level: str = "word",
    normalizer: TextNormalizer | None = None,
    cap: bool = True,
) -> float:
    """Mean of per-utterance (capped) error rates, not pooled-edit WER.

    Items whose reference normalizes to nothing are excluded with a warning.
    """
    scorer = capped_utterance_wer if level == "word" else cer
    if normalizer is None:
        normalizer = WORD_NORMALIZER if level == "word" else CHAR_NORMALIZER
    scores = []
    for i, (hyp, ref) in enumerate(pairs):
        try:
            scores.append(scorer(hyp, ref, normalizer=normalizer, cap=cap))
        except ValueError:
            warnings.warn(f"item {i}: reference empty after normalization, excluded")
    if not scores:
        raise ValueError("no scorable items")
    return math.fsum(scores) / len(scores)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    pairs: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]],
    max_n: int = 4,
    smooth_eps: float | None = None,
) -> float:
    """BLEU over (hypothesis, references) token pairs with pooled counts.

    Brevity penalty times the geometric mean of modified n-gram precisions for
    n = 1..max_n. Orders with no hypothesis n-grams anywhere in the corpus are
    dropped from the mean (short-corpus behaviour); with smoothing off, any
    clipped precision of zero makes the score 0.
    """
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, refs in pairs:
        if not refs:
            raise ValueError("each hypothesis needs at least one reference")
        hyp = list(hyp)
        refs = [list(r) for r in refs]
        hyp_len += len(hyp)
        ref_len += min((len(r) for r in refs), key=lambda L: (abs(L - len(hyp)), L))
        for n in range(1, max_n + 1):
            counts = _ngram_counts(hyp, n)
            if not counts:
                continue
            max_ref = Counter()
            for r in refs:
                for gram, c in _ngram_counts(r, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            totals[n - 1] += sum(counts.values())
            matches[n - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())
    if hyp_len == 0:
        return 0.0
    log_precisions = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        if m == 0:
            if smooth_eps is None:
                return 0.0
            m = smooth_eps
        log_precisions.append(math.log(m / t))
    if not log_precisions:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(math.fsum(log_precisions) / len(log_precisions))


def bleu(
    hyp: Sequence[str] | str,
    refs: Sequence[Sequence[str] | str],
    max_n: int = 4,
    smooth_eps: float | None = None,
) -> float:
    """Sentence-level BLEU: a one-pair corpus. Strings are split on whitespace."""
    hyp_tokens = hyp.split() if isinstance(hyp, str) else list(hyp)
    ref_tokens = [r.split() if isinstance(r, str) else list(r) for r in refs]
    return corpus_bleu([(hyp_tokens, ref_tokens)], max_n=max_n, smooth_eps=smooth_eps)


def extract_choice(generation: str, labels: Sequence[str] = ("A", "B", "C", "D")) -> str | None:
    """First standalone choice label in the generation, or None."""
    pattern = re.compile(r"(?<![A-Za-z0-9])(" + "|".join(re.escape(l) for l in labels) + r")(?![A-Za-z0-9])")
    m = pattern.search(generation)
    return m.group(1) if m else None


def qa_accuracy(
    pairs: Iterable[tuple[str, str]],
    labels: Sequence[str] = ("A", "B", "C", "D"),
) -> float:
    """Exact-match accuracy over extracted answer letters."""
    total = 0
    correct = 0
    for generation, gold in pairs:
        total += 1
        if extract_choice(generation, labels) == gold:
            correct += 1
    if total == 0:
        raise ValueError("no items")
    return correct / total


@dataclass
class ScoredItem:
    """One evaluated instance with its per-item score and breakdown tags."""

    id: str
    task: str
    hyp: str
    ref: str
    score: float
    kind: str = "wer"
    tags: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "task": self.task,
                "hyp": self.hyp,
                "ref": self.ref,
                "score": self.score,
                "kind": self.kind,
                "tags": self.tags,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "ScoredItem":
        d = json.loads(line)
        return cls(
            id=d["id"],
            task=d.get("task", ""),
            hyp=d.get("hyp", ""),
            ref=d.get("ref", ""),
            score=float(d["score"]),
            kind=d.get("kind", "wer"),
            tags=dict(d.get("tags", {})),
        )


@dataclass
class BreakdownRow:
    group: str
    item: str
    n: int
    score: float


@dataclass
class BreakdownTable:
    """Per-(group, item) means plus the overall row, with a conservation check."""

    rows: list[BreakdownRow]
    overall_n: int
    overall_score: float
    score_label: str = "score"

    def validate(self, rel_tol: float = 1e-9) -> None:
        """Every complete disjoint grouping must conserve n and n*score."""
        total_mass = self.overall_n * self.overall_score
        by_group: dict[str, list[BreakdownRow]] = {}
        for row in self.rows:
            by_group.setdefault(row.group, []).append(row)
        for group, rows in by_group.items():
            n = sum(r.n for r in rows)
            if n != self.overall_n:
                continue  # incomplete grouping: not every item carried this tag
            mass = math.fsum(r.n * r.score for r in rows)
            if abs(mass - total_mass) > rel_tol * max(1.0, abs(total_mass)):
                raise ConservationError(
                    f"grouping {group!r}: sum n*score = {mass!r} != overall {total_mass!r}"
                )

    def render_text(self, percent: bool = False) -> str:
        def fmt(x: float) -> str:
            return f"{100.0 * x:.2f}%" if percent else f"{x:.4f}"

        headers = ("group", "item", "n", self.score_label)
        lines = [(r.group, r.item, str(r.n), fmt(r.score)) for r in self.rows]
        lines.append(("overall", "total", str(self.overall_n), fmt(self.overall_score)))
        widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(headers)]
        out = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        for row in lines:
            out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        return "\n".join(out)

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"group": r.group, "item": r.item, "n": r.n, "score": r.score}
                for r in self.rows
            ],
            "overall": {"n": self.overall_n, "score": self.overall_score},
            "score_label": self.score_label,
        }


def breakdown(
    items: Sequence[ScoredItem],
    groupings: Sequence[str],
    score_label: str = "score",
) -> BreakdownTable:
    """Aggregate per-item scores into per-(group, item) rows plus an overall row."""
    if not items:
        raise ValueError("no items to aggregate")
    rows: list[BreakdownRow] = []
    for group in groupings:
        buckets: dict[str, list[float]] = {}
        for it in items:
            if group in it.tags:
                buckets.setdefault(it.tags[group], []).append(it.score)
        for label in sorted(buckets):
            scores = buckets[label]
            rows.append(
                BreakdownRow(group, label, len(scores), math.fsum(scores) / len(scores))
            )
    overall = math.fsum(it.score for it in items) / len(items)
    table = BreakdownTable(rows, len(items), overall, score_label=score_label)
    table.validate()
    return table
