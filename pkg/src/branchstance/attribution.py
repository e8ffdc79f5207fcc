"""Occlusion attribution: mask each ancestor word span with mask tokens,
measure the drop in the predicted label's probability, and flag keywords
at the 20%-of-baseline-confidence threshold.

Tokenization is held fixed between the unmasked and masked runs (masking
is 1:1 token replacement), so length budgeting never changes under a mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .encoding import TokenizedBranch, split_tokens
from .errors import SegmenterFailure, SpanOutOfRange
from .model import CLASS_ORDER, StanceModel
from .thread_model import Instance, SubBranch

KEYWORD_THRESHOLD = 0.2


class Segmenter(Protocol):
    def segment(self, text: str) -> list[str]: ...


class WhitespaceCharSegmenter:
    """Fallback segmenter: whitespace chunks, CJK chunks split per character.

    Mirrors the stub tokenizers, so every word maps to exactly one token.
    """

    def segment(self, text: str) -> list[str]:
        return split_tokens(text)


@dataclass(frozen=True)
class Span:
    """One word's token range within an instance (1-based, inclusive)."""

    instance_id: str
    p: int
    q: int
    surface: str
    alignment_extended: bool = False

    def __post_init__(self):
        if not 1 <= self.p <= self.q:
            raise ValueError(f"bad span bounds p={self.p}, q={self.q}")


@dataclass(frozen=True)
class ContributionRecord:
    span: Span
    contribution: float  # baseline confidence minus masked confidence
    is_keyword: bool
    baseline_confidence: float
    predicted_label: str

    def to_dict(self) -> dict:
        return {
            "instance_id": self.span.instance_id,
            "p": self.span.p,
            "q": self.span.q,
            "word": self.span.surface,
            "contribution": self.contribution,
            "is_keyword": self.is_keyword,
        }


def segment_words(instance: Instance, segmenter: Segmenter, encoder) -> list[Span]:
    """Map each segmenter word to a contiguous token range of the instance.

    Alignment assumes word-by-word tokenization concatenates to the full
    tokenization; a trailing mismatch clamps the last spans and flags them.
    """
    try:
        words = segmenter.segment(instance.text)
    except Exception as e:
        raise SegmenterFailure(str(e)) from e
    n_total = len(encoder.tokenize(instance.text))
    spans: list[Span] = []
    pos = 0
    for word in words:
        n = len(encoder.tokenize(word))
        if n == 0:
            continue
        p, q = pos + 1, pos + n
        extended = False
        if q > n_total:
            q = n_total
            extended = True
            if p > q:
                break
        spans.append(Span(instance_id=instance.instance_id, p=p, q=q,
                          surface=word, alignment_extended=extended))
        pos += n
    return spans


def _baseline(model: StanceModel, b: SubBranch) -> tuple[TokenizedBranch, str, float]:
    tb = model.tokenized_branch(b)
    probs = model.predict_proba_tokens(tb)
    idx = int(np.argmax(probs))
    return tb, CLASS_ORDER[idx], float(probs[idx])


def _masked_confidence(model: StanceModel, tb: TokenizedBranch, span: Span, label: str) -> float:
    if span.instance_id not in tb.instance_ids:
        # Ancestor outside the model's input (no_SR / truncated): masking is a no-op.
        return float(model.predict_proba_tokens(tb)[CLASS_ORDER.index(label)])
    start, end = tb.span_for(span.instance_id)
    n_u = end - start
    if span.q > n_u:
        raise SpanOutOfRange(f"span [{span.p},{span.q}] exceeds {n_u} tokens "
                             f"of {span.instance_id!r}")
    masked = tb.with_masked(start + span.p - 1, start + span.q, model.encoder.mask_token_id)
    return float(model.predict_proba_tokens(masked)[CLASS_ORDER.index(label)])


def contribution(b: SubBranch, span: Span, model: StanceModel) -> ContributionRecord:
    """Confidence delta from masking one ancestor word span."""
    ancestor_ids = {x.instance_id for x in b.instances[:-1]}
    if span.instance_id not in ancestor_ids:
        raise SpanOutOfRange(f"{span.instance_id!r} is not an ancestor of the target")
    tb, label, y_hat = _baseline(model, b)
    c = y_hat - _masked_confidence(model, tb, span, label)
    return ContributionRecord(
        span=span,
        contribution=c,
        is_keyword=c >= KEYWORD_THRESHOLD * y_hat,
        baseline_confidence=y_hat,
        predicted_label=label,
    )


def keywords(b: SubBranch, model: StanceModel, segmenter: Segmenter) -> list[ContributionRecord]:
    """Contribution for every ancestor word span, sorted by contribution."""
    tb, label, y_hat = _baseline(model, b)
    records = []
    for ancestor in b.instances[:-1]:
        for span in segment_words(ancestor, segmenter, model.encoder):
            c = y_hat - _masked_confidence(model, tb, span, label)
            records.append(ContributionRecord(
                span=span,
                contribution=c,
                is_keyword=c >= KEYWORD_THRESHOLD * y_hat,
                baseline_confidence=y_hat,
                predicted_label=label,
            ))
    records.sort(key=lambda r: -r.contribution)
    return records


def attribution_report(b: SubBranch, model: StanceModel, segmenter: Segmenter) -> dict:
    """JSON-ready report for one branch, mirroring the rendered keyword table."""
    records = keywords(b, model, segmenter)
    _, label, y_hat = _baseline(model, b)
    return {
        "target_id": b.target.instance_id,
        "predicted_label": label,
        "confidence": y_hat,
        "records": [r.to_dict() for r in records],
    }


def render_table(report: dict) -> str:
    """Plain-text keyword table: word, translation slot, instance, contribution."""
    lines = [
        f"target: {report['target_id']}  "
        f"predicted: {report['predicted_label']}  "
        f"confidence: {report['confidence']:.4f}",
        f"{'word':<16} {'translation':<16} {'instance':<16} {'contribution':>12}",
    ]
    for r in report["records"]:
        mark = "*" if r["is_keyword"] else " "
        lines.append(
            f"{r['word']:<16} {'':<16} {r['instance_id']:<16} "
            f"{r['contribution']:>11.2%}{mark}"
        )
    return "\n".join(lines)


def save_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, ensure_ascii=False, indent=2), encoding="utf-8")
