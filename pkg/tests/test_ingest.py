import json
import random
import tempfile
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchstance.errors import ParseError, SchemaError
from branchstance.ingest import (
    Dataset,
    KeywordList,
    NormalizeOptions,
    SplitSpec,
    dataset_stats,
    dedupe_and_drop_null,
    filter_posts,
    load_dataset,
    normalize_text,
    save_dataset,
    split,
)
from branchstance.thread_model import build_thread
from conftest import fig1_records, make_instance, random_tree_records


class TestFilterPosts:
    def test_keeps_keyword_posts(self):
        kw = KeywordList(terms=("疫苗", "BioNTech"))
        posts = [
            make_instance("p1", tid="t1", text="疫苗 好"),
            make_instance("p2", tid="t2", text="天氣 好"),
            make_instance("p3", tid="t3", text="biontech 預約"),
        ]
        kept = filter_posts(posts, kw)
        assert [p.instance_id for p in kept] == ["p1", "p3"]

    def test_rejects_non_post(self):
        kw = KeywordList(terms=("疫苗",))
        with pytest.raises(ValueError):
            filter_posts([make_instance("c", parent="p", text="疫苗")], kw)

    def test_empty_keyword_list_rejected(self):
        with pytest.raises(ValueError):
            KeywordList(terms=())

    def test_bundled_list_loads(self):
        kw = KeywordList.bundled()
        assert len(kw.terms) > 5
        assert kw.matches("我已經打咗疫苗")


class TestNormalizeText:
    def test_html_and_url_and_s2t(self):
        out = normalize_text("<b>睇</b> https://a.example/c?x=1 新闻")
        assert out == "睇 新聞"

    def test_entities(self):
        assert normalize_text("a &amp; b") == "a b"  # punctuation stripped after unescape

    def test_emoji_mapped_to_word(self):
        out = normalize_text("👍 好")
        assert "讚" in out and "👍" not in out

    def test_unmapped_emoji_dropped(self):
        out = normalize_text("好 \U0001fae0 呀")
        assert out == "好 呀"

    def test_punctuation_optional(self):
        keep = NormalizeOptions(strip_punctuation=False)
        assert "!" in normalize_text("好!", keep)
        assert "!" not in normalize_text("好!")

    def test_whitespace_collapsed(self):
        assert normalize_text("a \n\t  b") == "a b"

    @given(st.text(alphabet="ab 好新闻阵👍<>&;.!https:/ ", max_size=60))
    @settings(max_examples=80, deadline=None)
    def test_idempotent(self, raw):
        once = normalize_text(raw)
        assert normalize_text(once) == once


class TestDedupe:
    def _ds(self, records):
        return Dataset(threads=[build_thread(records)])

    def test_duplicate_collapses_to_earliest(self):
        recs = [
            make_instance("p", text="root", created_at="2021-01-01T00:00:00"),
            make_instance("a", parent="p", text="same", created_at="2021-01-01T00:01:00"),
            make_instance("b", parent="p", text="same", created_at="2021-01-01T00:02:00"),
        ]
        out = dedupe_and_drop_null(self._ds(recs))
        ids = {r.instance_id for r in out.threads[0].instances()}
        assert ids == {"p", "a"}

    def test_empty_text_mid_chain_promotes_children(self):
        recs = [
            make_instance("p", text="root", created_at="2021-01-01T00:00:00"),
            make_instance("a", parent="p", text="   ", created_at="2021-01-01T00:01:00"),
            make_instance("b", parent="a", text="leaf", created_at="2021-01-01T00:02:00"),
        ]
        out = dedupe_and_drop_null(self._ds(recs))
        t = out.threads[0]
        assert set(t.nodes) == {"p", "b"}
        assert t.nodes["b"].parent_id == "p"

    def test_removed_chain_contracts_to_nearest_survivor(self):
        recs = [
            make_instance("p", text="root", created_at="2021-01-01T00:00:00"),
            make_instance("a", parent="p", text="", created_at="2021-01-01T00:01:00"),
            make_instance("b", parent="a", text=" ", created_at="2021-01-01T00:02:00"),
            make_instance("c", parent="b", text="deep", created_at="2021-01-01T00:03:00"),
        ]
        t = dedupe_and_drop_null(self._ds(recs)).threads[0]
        assert t.nodes["c"].parent_id == "p"

    def test_root_removed_drops_thread(self):
        recs = [
            make_instance("p", text="", created_at="2021-01-01T00:00:00"),
            make_instance("a", parent="p", text="x", created_at="2021-01-01T00:01:00"),
        ]
        out = dedupe_and_drop_null(self._ds(recs))
        assert out.threads == []

    def test_clean_data_unchanged(self):
        ds = Dataset(threads=[build_thread(fig1_records())])
        out = dedupe_and_drop_null(ds)
        assert out.records() == ds.records()


class TestSaveLoad:
    def test_round_trip(self, tmp_path):
        ds = Dataset(threads=[build_thread(fig1_records())])
        p = tmp_path / "d.jsonl"
        save_dataset(ds, p)
        back = load_dataset(p)
        assert back.records() == ds.records()

    @given(st.integers(min_value=1, max_value=25), st.integers(min_value=0, max_value=9999))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_random_trees(self, n, seed):
        rng = random.Random(seed)
        ds = Dataset(threads=[build_thread(random_tree_records(rng, n))])
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "d.jsonl"
            save_dataset(ds, p)
            assert load_dataset(p).records() == ds.records()

    def test_exactly_eight_fields(self, tmp_path):
        ds = Dataset(threads=[build_thread([make_instance("p", label="favor")])])
        p = tmp_path / "d.jsonl"
        save_dataset(ds, p)
        obj = json.loads(p.read_text().splitlines()[0])
        assert set(obj) == {"instance_id", "thread_id", "parent_id", "text",
                            "raw_text", "label", "platform", "created_at"}

    def test_unknown_label_rejected(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        rec = {"instance_id": "p", "thread_id": "t", "parent_id": None, "text": "x",
               "raw_text": "x", "label": "agree", "platform": "", "created_at": ""}
        p.write_text(json.dumps(rec) + "\n")
        with pytest.raises(SchemaError) as e:
            load_dataset(p)
        assert e.value.field == "label"

    def test_missing_field_reports_line(self, tmp_path):
        good = {"instance_id": "p", "thread_id": "t", "parent_id": None, "text": "x",
                "raw_text": "x", "label": None, "platform": "", "created_at": ""}
        bad = {k: v for k, v in good.items() if k != "raw_text"}
        bad["instance_id"] = "c"
        bad["parent_id"] = "p"
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(SchemaError) as e:
            load_dataset(p)
        assert e.value.line == 2 and e.value.field == "raw_text"

    def test_invalid_json_reports_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(ParseError) as e:
            load_dataset(p)
        assert e.value.line == 1


class TestSplit:
    def _many_threads(self, n=10):
        threads = []
        for i in range(n):
            rng = random.Random(i)
            threads.append(build_thread(random_tree_records(rng, 4, tid=f"t{i}")))
        return Dataset(threads=threads)

    def test_thread_split_eight_two(self):
        ds = self._many_threads(10)
        tr, te = split(ds, SplitSpec(train_fraction=0.8, seed=3))
        assert len(tr.threads) == 8 and len(te.threads) == 2
        assert {t.thread_id for t in tr.threads} | {t.thread_id for t in te.threads} == {
            t.thread_id for t in ds.threads
        }
        assert not ({t.thread_id for t in tr.threads} & {t.thread_id for t in te.threads})

    def test_same_seed_same_split(self):
        ds = self._many_threads(10)
        a = split(ds, SplitSpec(seed=5))
        b = split(ds, SplitSpec(seed=5))
        assert [t.thread_id for t in a[0].threads] == [t.thread_id for t in b[0].threads]

    def test_different_seed_usually_differs(self):
        ds = self._many_threads(10)
        picks = {tuple(t.thread_id for t in split(ds, SplitSpec(seed=s))[1].threads)
                 for s in range(8)}
        assert len(picks) > 1

    def test_instance_split_partitions_targets(self):
        recs = [make_instance(r.instance_id, tid=r.thread_id, parent=r.parent_id,
                              text=r.text, label="favor", created_at=r.created_at)
                for r in fig1_records()]
        ds = Dataset(threads=[build_thread(recs)])
        tr, te = split(ds, SplitSpec(train_fraction=0.8, seed=1, granularity="instance"))
        assert tr.target_ids and te.target_ids
        assert not (tr.target_ids & te.target_ids)
        assert tr.target_ids | te.target_ids == {r.instance_id for r in recs}
        # every target keeps its full ancestor context on its own side
        for side in (tr, te):
            by_id = {t.thread_id: t for t in side.threads}
            for tid_inst in side.target_ids:
                t = by_id["fig1"]
                node = t.nodes[tid_inst]
                while node.parent_id is not None:
                    assert node.parent_id in t.nodes
                    node = t.nodes[node.parent_id]

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            SplitSpec(train_fraction=1.0)


class TestStats:
    def test_empty(self):
        s = dataset_stats(Dataset(threads=[]))
        assert s["threads"] == 0 and s["instances"] == 0
        assert s["label_proportions"] == {"favor": 0.0, "against": 0.0, "neither": 0.0}

    def test_chain_counts(self):
        recs = [
            make_instance("p", text="abcd", label="favor", created_at="2021-01-01T00:00:00"),
            make_instance("a", parent="p", text="ab", label="against",
                          created_at="2021-01-01T00:01:00"),
            make_instance("b", parent="a", text="abcdef", label="neither",
                          created_at="2021-01-01T00:02:00"),
        ]
        s = dataset_stats(Dataset(threads=[build_thread(recs)]))
        assert s["per_depth_bucket"] == {"1": 1, "2": 1, "3": 1}
        assert s["avg_chars_per_bucket"] == {"1": 4.0, "2": 2.0, "3": 6.0}
        assert s["label_proportions"]["favor"] == pytest.approx(1 / 3)
