import numpy as np
import pytest

from branchstance.attribution import (
    KEYWORD_THRESHOLD,
    Span,
    WhitespaceCharSegmenter,
    attribution_report,
    contribution,
    keywords,
    render_table,
    save_report,
    segment_words,
)
from branchstance.encoding import MASK_ID, HashedContextEncoder, budget, concat_subbranch, default_summarizer
from branchstance.errors import SpanOutOfRange
from branchstance.model import ModelConfig, StanceModel
from branchstance.thread_model import build_thread, partial_sub_branch, sub_branch
from conftest import make_instance


def chain(texts, tid="at"):
    recs = []
    parent = None
    for i, text in enumerate(texts):
        iid = f"{tid}{i}"
        recs.append(make_instance(iid, tid=tid, parent=parent, text=text,
                                  created_at=f"2021-01-01T00:{i:02d}:00"))
        parent = iid
    return sub_branch(build_thread(recs), f"{tid}{len(texts) - 1}")


class MaskFractionModel:
    """Fake model whose predicted-label confidence is (unmasked tokens) / l.

    Makes the contribution of a span analytically (q - p + 1) / l.
    """

    def __init__(self, context_k=None, encoder=None):
        self.encoder = encoder or HashedContextEncoder(hidden_size=4)
        self.config = ModelConfig(d=8, filter_sizes=(2,), filters_per_size=2,
                                  context_k=context_k,
                                  encoder_kwargs={"hidden_size": 4})
        self._k = context_k

    def input_branch(self, b):
        return b if self._k is None else partial_sub_branch(b, self._k)

    def tokenized_branch(self, b):
        bk = self.input_branch(b)
        return budget(concat_subbranch(bk, self.encoder), bk,
                      default_summarizer, self.encoder)

    def predict_proba_tokens(self, tb):
        unmasked = sum(1 for t in tb.tokens if t != MASK_ID)
        conf = unmasked / tb.total_length
        rest = (1 - conf) / 2
        return np.array([conf, rest, rest])


class TestSegmentWords:
    def test_one_span_per_word(self):
        enc = HashedContextEncoder()
        inst = make_instance("a", text="hello 疫苗 world")
        spans = segment_words(inst, WhitespaceCharSegmenter(), enc)
        # CJK segments per character, one token each
        assert [(s.p, s.q, s.surface) for s in spans] == [
            (1, 1, "hello"), (2, 2, "疫"), (3, 3, "苗"), (4, 4, "world")]

    def test_spans_are_contiguous_and_cover(self):
        enc = HashedContextEncoder()
        inst = make_instance("a", text="aa bb 好呀 cc")
        spans = segment_words(inst, WhitespaceCharSegmenter(), enc)
        assert spans[0].p == 1
        for prev, cur in zip(spans, spans[1:]):
            assert cur.p == prev.q + 1
        assert spans[-1].q == len(enc.tokenize(inst.text))

    def test_bad_span_bounds_rejected(self):
        with pytest.raises(ValueError):
            Span(instance_id="x", p=3, q=2, surface="w")


class TestContribution:
    def test_closed_form_value(self):
        b = chain(["aa bb cc", "dd ee"])
        model = MaskFractionModel()
        l = model.tokenized_branch(b).total_length  # 3 + 2 + 1 sep = 6
        assert l == 6
        rec = contribution(b, Span("at0", 1, 2, "aa bb"), model)
        assert rec.contribution == pytest.approx(2 / l)
        assert rec.baseline_confidence == pytest.approx(1.0)

    def test_keyword_threshold_arithmetic(self):
        # baseline 1.0, threshold 0.2: a 2-token span out of l=6 gives
        # c = 1/3 >= 0.2 (keyword); a 1-token span gives 1/6 < 0.2.
        b = chain(["aa bb cc", "dd ee"])
        model = MaskFractionModel()
        big = contribution(b, Span("at0", 1, 2, "aa bb"), model)
        small = contribution(b, Span("at0", 3, 3, "cc"), model)
        assert big.is_keyword
        assert not small.is_keyword
        assert KEYWORD_THRESHOLD == 0.2

    def test_span_must_be_ancestor(self):
        b = chain(["aa bb", "cc dd"])
        model = MaskFractionModel()
        with pytest.raises(SpanOutOfRange):
            contribution(b, Span("at1", 1, 1, "cc"), model)

    def test_span_out_of_range(self):
        b = chain(["aa bb", "cc"])
        model = MaskFractionModel()
        with pytest.raises(SpanOutOfRange):
            contribution(b, Span("at0", 1, 5, "aa"), model)

    def test_original_tokens_not_mutated(self):
        b = chain(["aa bb", "cc"])
        model = MaskFractionModel()
        tb = model.tokenized_branch(b)
        before = tb.tokens
        contribution(b, Span("at0", 1, 2, "aa bb"), model)
        assert model.tokenized_branch(b).tokens == before

    def test_context_stripped_model_contributes_zero(self):
        # With context_k=0 the ancestor is outside the model input, so
        # masking it changes nothing: contribution is exactly 0.0.
        b = chain(["trigger words here", "mild reply"])
        model = MaskFractionModel(context_k=0)
        rec = contribution(b, Span("at0", 1, 1, "trigger"), model)
        assert rec.contribution == 0.0
        assert not rec.is_keyword


class TestKeywords:
    def test_record_count_is_total_ancestor_words(self):
        b = chain(["aa bb cc", "dd ee", "ff"])
        recs = keywords(b, MaskFractionModel(), WhitespaceCharSegmenter())
        assert len(recs) == 5  # 3 words + 2 words; the target itself excluded

    def test_sorted_descending(self):
        b = chain(["aa bb cc", "dd ee", "ff"])
        recs = keywords(b, MaskFractionModel(), WhitespaceCharSegmenter())
        cs = [r.contribution for r in recs]
        assert cs == sorted(cs, reverse=True)

    def test_deterministic(self):
        b = chain(["aa bb cc", "dd"])
        m = MaskFractionModel()
        r1 = keywords(b, m, WhitespaceCharSegmenter())
        r2 = keywords(b, m, WhitespaceCharSegmenter())
        assert [(r.span, r.contribution) for r in r1] == [
            (r.span, r.contribution) for r in r2]

    def test_real_model_no_sr_zero_law(self):
        cfg = ModelConfig(variant="no_SR", d=8, filter_sizes=(2,), filters_per_size=4,
                          encoder_kwargs={"hidden_size": 8})
        model = StanceModel(cfg, seed=0)
        b = chain(["strong opinion words", "short reply text"])
        recs = keywords(b, model, WhitespaceCharSegmenter())
        assert len(recs) == 3
        assert all(r.contribution == 0.0 for r in recs)
        assert all(not r.is_keyword for r in recs)


class TestReport:
    def test_report_and_render(self, tmp_path):
        b = chain(["aa bb cc", "dd ee"])
        report = attribution_report(b, MaskFractionModel(), WhitespaceCharSegmenter())
        assert report["target_id"] == "at1"
        assert len(report["records"]) == 3
        text = render_table(report)
        assert "aa" in text and "contribution" in text
        p = tmp_path / "r.json"
        save_report(report, p)
        import json

        assert json.loads(p.read_text())["target_id"] == "at1"
