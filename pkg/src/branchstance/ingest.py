"""Dataset construction pipeline: filtering, cleaning, deduplication,
serialization, splitting, and statistics.

The on-disk dataset format is line-delimited JSON, one instance per line,
with exactly the fields instance_id / thread_id / parent_id / text /
raw_text / label / platform / created_at.
"""

from __future__ import annotations

import html
import json
import logging
import random
import re
import unicodedata
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

from .errors import ParseError, SchemaError
from .thread_model import (
    Instance,
    STANCE_LABELS,
    SubBranch,
    Thread,
    build_thread,
    depth,
    depth_bucket,
    sub_branch,
)

log = logging.getLogger(__name__)

DATASET_FIELDS = (
    "instance_id", "thread_id", "parent_id", "text",
    "raw_text", "label", "platform", "created_at",
)

_TAG_RE = re.compile(r"<[^<>]+>")
_URL_RE = re.compile(r"(?:https?://|www\.)\S+")
_WS_RE = re.compile(r"\s+")
# Pictographic blocks used for the unknown-emoji fallback.
_EMOJI_RANGES = (
    (0x1F000, 0x1FAFF),
    (0x2600, 0x27BF),
    (0x2B00, 0x2BFF),
    (0xFE00, 0xFE0F),
    (0x1F1E6, 0x1F1FF),
)


def _load_data_json(name: str) -> dict:
    with resources.files("branchstance.data").joinpath(name).open(encoding="utf-8") as f:
        return json.load(f)


def load_emoji_table() -> dict[str, str]:
    """Shipped emoji -> word replacement table."""
    return _load_data_json("emoji_words.json")


def builtin_s2t_converter() -> Callable[[str], str]:
    """Deterministic simplified -> traditional converter.

    Uses the bundled character table; prefers OpenCC when installed.
    Multi-character entries are applied before single characters.
    """
    try:
        import opencc  # type: ignore

        cc = opencc.OpenCC("s2hk")
        return cc.convert
    except ImportError:
        pass
    table = _load_data_json("s2t_chars.json")
    multi = sorted((k for k in table if len(k) > 1), key=len, reverse=True)
    single = {k: v for k, v in table.items() if len(k) == 1}

    def convert(text: str) -> str:
        for k in multi:
            if k in text:
                text = text.replace(k, table[k])
        return "".join(single.get(ch, ch) for ch in text)

    return convert


@dataclass(frozen=True)
class NormalizeOptions:
    strip_punctuation: bool = True
    convert_traditional: bool = True

    def as_dict(self) -> dict:
        return {
            "strip_punctuation": self.strip_punctuation,
            "convert_traditional": self.convert_traditional,
        }


@dataclass
class Dataset:
    """A collection of validated threads plus provenance.

    ``target_ids``, when set, restricts which labeled instances count as
    examples (used by instance-granularity splits, where context threads
    may be shared between sides).
    """

    threads: list[Thread]
    provenance: dict = field(default_factory=dict)
    target_ids: Optional[frozenset[str]] = None

    def __post_init__(self):
        ids = [t.thread_id for t in self.threads]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate thread_ids in dataset")

    def instances(self) -> Iterator[Instance]:
        for t in self.threads:
            yield from t.instances()

    def records(self) -> list[Instance]:
        return sorted(self.instances(), key=lambda r: (r.thread_id, r.instance_id))

    def num_instances(self) -> int:
        return sum(len(t) for t in self.threads)

    def examples(self) -> list[tuple[Thread, Instance]]:
        """Labeled (thread, target) pairs, honoring target_ids."""
        out = []
        for t in self.threads:
            for inst in t.instances():
                if inst.label is None:
                    continue
                if self.target_ids is not None and inst.instance_id not in self.target_ids:
                    continue
                out.append((t, inst))
        return out

    def example_branches(self) -> list[tuple[SubBranch, str]]:
        return [(sub_branch(t, inst.instance_id), inst.label) for t, inst in self.examples()]


@dataclass(frozen=True)
class KeywordList:
    terms: tuple[str, ...]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("keyword list is empty")
        if any(not t.strip() for t in self.terms):
            raise ValueError("keyword list contains blank terms")

    @classmethod
    def from_file(cls, path: str | Path) -> "KeywordList":
        terms = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                terms.append(line)
        return cls(terms=tuple(terms))

    @classmethod
    def bundled(cls) -> "KeywordList":
        text = resources.files("branchstance.data").joinpath("keywords.txt").read_text("utf-8")
        terms = [l.strip() for l in text.splitlines() if l.strip() and not l.startswith("#")]
        return cls(terms=tuple(terms))

    def matches(self, text: str) -> bool:
        folded = text.casefold()
        return any(term.casefold() in folded for term in self.terms)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    granularity: str = "thread"  # or "instance"

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.granularity not in ("thread", "instance"):
            raise ValueError(f"unknown granularity {self.granularity!r}")


def filter_posts(posts: Sequence[Instance], kw: KeywordList) -> list[Instance]:
    """Keep posts whose raw text mentions at least one keyword."""
    for p in posts:
        if p.parent_id is not None:
            raise ValueError(f"{p.instance_id!r} is not a post")
    return [p for p in posts if kw.matches(p.raw_text or p.text)]


def normalize_text(
    raw: str,
    opts: NormalizeOptions = NormalizeOptions(),
    s2t: Optional[Callable[[str], str]] = None,
    emoji_table: Optional[dict[str, str]] = None,
) -> str:
    """Clean one instance's text.

    HTML entities and tags, then URLs, are always removed; emoji become
    their table words; simplified characters convert to traditional; runs
    of whitespace collapse to one space.  Idempotent on its own output.
    """
    if emoji_table is None:
        emoji_table = load_emoji_table()
    text = html.unescape(raw)
    text = _TAG_RE.sub(" ", text)
    text = _URL_RE.sub(" ", text)

    out_chars = []
    for ch in text:
        if ch in emoji_table:
            out_chars.append(f" {emoji_table[ch]} ")
        elif any(lo <= ord(ch) <= hi for lo, hi in _EMOJI_RANGES):
            log.warning("dropping unmapped emoji %r (U+%04X)", ch, ord(ch))
        else:
            out_chars.append(ch)
    text = "".join(out_chars)

    if opts.convert_traditional:
        converter = s2t if s2t is not None else builtin_s2t_converter()
        text = converter(text)
    if opts.strip_punctuation:
        text = "".join(c for c in text if not unicodedata.category(c).startswith("P"))
    return _WS_RE.sub(" ", text).strip()


def dedupe_and_drop_null(ds: Dataset) -> Dataset:
    """Collapse exact duplicates and remove empty-text instances.

    Duplicates share (thread_id, parent_id, text); the earliest survives.
    Children of removed nodes reattach to the removed node's nearest
    surviving ancestor.  A thread whose root ends up removed is dropped.
    """
    new_threads = []
    for thread in ds.threads:
        records = sorted(thread.instances(), key=lambda r: (r.created_at, r.instance_id))
        removed: set[str] = set()
        seen: set[tuple] = set()
        for r in records:
            key = (r.thread_id, r.parent_id, r.text)
            if key in seen:
                removed.add(r.instance_id)
            else:
                seen.add(key)
        for r in records:
            if not r.text.strip():
                removed.add(r.instance_id)

        if thread.root.instance_id in removed:
            log.warning("dropping thread %s: root removed", thread.thread_id)
            continue

        nodes = {r.instance_id: r for r in records}

        def surviving_parent(pid: Optional[str]) -> Optional[str]:
            while pid is not None and pid in removed:
                pid = nodes[pid].parent_id
            return pid

        kept = [
            replace(r, parent_id=surviving_parent(r.parent_id))
            for r in records
            if r.instance_id not in removed
        ]
        new_threads.append(build_thread(kept))
    return Dataset(threads=new_threads, provenance=dict(ds.provenance), target_ids=ds.target_ids)


def _record_to_json(r: Instance) -> str:
    return json.dumps(
        {
            "instance_id": r.instance_id,
            "thread_id": r.thread_id,
            "parent_id": r.parent_id,
            "text": r.text,
            "raw_text": r.raw_text,
            "label": r.label,
            "platform": r.platform,
            "created_at": r.created_at,
        },
        ensure_ascii=False,
    )


def save_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as f:
        for r in ds.records():
            f.write(_record_to_json(r) + "\n")
    tmp.replace(path)


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    by_thread: dict[str, list[Instance]] = {}
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line=lineno) from e
            if not isinstance(obj, dict):
                raise ParseError("record is not a JSON object", line=lineno)
            for fld in DATASET_FIELDS:
                if fld not in obj:
                    raise SchemaError("missing field", field=fld, line=lineno)
            for fld in obj:
                if fld not in DATASET_FIELDS:
                    raise SchemaError("unexpected field", field=fld, line=lineno)
            if obj["label"] is not None and obj["label"] not in STANCE_LABELS:
                raise SchemaError(f"unknown label {obj['label']!r}", field="label", line=lineno)
            inst = Instance(
                instance_id=str(obj["instance_id"]),
                thread_id=str(obj["thread_id"]),
                parent_id=None if obj["parent_id"] is None else str(obj["parent_id"]),
                text=obj["text"],
                raw_text=obj["raw_text"] or "",
                label=obj["label"],
                platform=obj["platform"] or "",
                created_at=obj["created_at"] or "",
            )
            by_thread.setdefault(inst.thread_id, []).append(inst)
    threads = [build_thread(records) for _, records in sorted(by_thread.items())]
    return Dataset(threads=threads, provenance={"source": str(path)})


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic train/test split.

    Thread granularity assigns whole threads (the default; avoids context
    leakage).  Instance granularity partitions labeled instances; each
    side keeps the sub-branch closure of its targets so context stays
    intact, with target_ids marking the side's own examples.
    """
    rng = random.Random(spec.seed)
    prov = dict(ds.provenance)
    prov["split"] = {"train_fraction": spec.train_fraction, "seed": spec.seed,
                     "granularity": spec.granularity}

    if spec.granularity == "thread":
        threads = sorted(ds.threads, key=lambda t: t.thread_id)
        rng.shuffle(threads)
        n_train = round(spec.train_fraction * len(threads))
        train = sorted(threads[:n_train], key=lambda t: t.thread_id)
        test = sorted(threads[n_train:], key=lambda t: t.thread_id)
        return (
            Dataset(threads=train, provenance={**prov, "side": "train"}),
            Dataset(threads=test, provenance={**prov, "side": "test"}),
        )

    labeled = [(t, i) for t, i in ((t, i) for t in ds.threads for i in t.instances())
               if i.label is not None]
    pool = labeled if labeled else [(t, i) for t in ds.threads for i in t.instances()]
    pool = sorted(pool, key=lambda ti: (ti[0].thread_id, ti[1].instance_id))
    rng.shuffle(pool)
    n_train = round(spec.train_fraction * len(pool))
    sides = (pool[:n_train], pool[n_train:])

    def closure(side: list[tuple[Thread, Instance]], tag: str) -> Dataset:
        keep: dict[str, set[str]] = {}
        for t, inst in side:
            keep.setdefault(t.thread_id, set()).update(
                x.instance_id for x in sub_branch(t, inst.instance_id)
            )
        threads = []
        for t in sorted(ds.threads, key=lambda t: t.thread_id):
            wanted = keep.get(t.thread_id)
            if wanted:
                threads.append(build_thread([t.nodes[i] for i in wanted]))
        return Dataset(
            threads=threads,
            provenance={**prov, "side": tag},
            target_ids=frozenset(i.instance_id for _, i in side),
        )

    return closure(sides[0], "train"), closure(sides[1], "test")


def dataset_stats(ds: Dataset) -> dict:
    """Per-depth-bucket counts, label proportions, average character counts."""
    bucket_counts: dict[str, int] = {}
    bucket_chars: dict[str, int] = {}
    label_counts = {lbl: 0 for lbl in STANCE_LABELS}
    total = 0
    for t in ds.threads:
        for inst in t.instances():
            total += 1
            b = depth_bucket(depth(t, inst.instance_id))
            bucket_counts[b] = bucket_counts.get(b, 0) + 1
            bucket_chars[b] = bucket_chars.get(b, 0) + len(inst.text)
            if inst.label is not None:
                label_counts[inst.label] += 1
    labeled = sum(label_counts.values())
    return {
        "threads": len(ds.threads),
        "instances": total,
        "per_depth_bucket": dict(sorted(bucket_counts.items())),
        "avg_chars_per_bucket": {
            b: bucket_chars[b] / bucket_counts[b] for b in sorted(bucket_counts)
        },
        "label_counts": label_counts,
        "label_proportions": {
            lbl: (label_counts[lbl] / labeled if labeled else 0.0) for lbl in STANCE_LABELS
        },
    }
