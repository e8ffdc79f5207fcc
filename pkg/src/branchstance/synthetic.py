"""Synthetic corpus with planted context dependence.

Every instance's text holds one trigger word plus filler.  A post's label
follows its own trigger; a comment's label is a deterministic function of
the trigger word in its *parent*, and the comment's own trigger is drawn
independently.  Context-free models therefore cannot beat the class prior
on comments, while context-aware models can recover the parent's trigger.
"""

from __future__ import annotations

import random

from .ingest import Dataset
from .thread_model import Instance, STANCE_LABELS, build_thread

TRIGGERS = {"upsig": "favor", "downsig": "against", "flatsig": "neither"}
_TRIGGER_WORDS = tuple(TRIGGERS)
FILLERS = ("lorem", "ipsum", "dolor", "sit", "amet", "sed", "quia", "neque")


def _text(trigger: str, rng: random.Random) -> str:
    words = [trigger] + [rng.choice(FILLERS) for _ in range(rng.randint(2, 4))]
    rng.shuffle(words)
    return " ".join(words)


def planted_corpus(
    n_threads: int = 200,
    seed: int = 0,
    comments_per_thread: tuple[int, int] = (2, 5),
) -> Dataset:
    """Random trees whose comment labels are planted in the parent's text."""
    rng = random.Random(seed)
    threads = []
    for t in range(n_threads):
        tid = f"t{t:04d}"
        post_trigger = rng.choice(_TRIGGER_WORDS)
        records = [Instance(
            instance_id=f"{tid}-p",
            thread_id=tid,
            parent_id=None,
            text=_text(post_trigger, rng),
            label=TRIGGERS[post_trigger],
            created_at="2021-01-01T00:00:00",
        )]
        triggers = {records[0].instance_id: post_trigger}
        n_comments = rng.randint(*comments_per_thread)
        for c in range(n_comments):
            parent = rng.choice(records)
            own_trigger = rng.choice(_TRIGGER_WORDS)
            inst = Instance(
                instance_id=f"{tid}-c{c}",
                thread_id=tid,
                parent_id=parent.instance_id,
                text=_text(own_trigger, rng),
                label=TRIGGERS[triggers[parent.instance_id]],
                created_at=f"2021-01-01T00:{c + 1:02d}:00",
            )
            triggers[inst.instance_id] = own_trigger
            records.append(inst)
        threads.append(build_thread(records))
    return Dataset(threads=threads, provenance={"source": "planted", "seed": seed})


def context_dependent_subset(ds: Dataset) -> Dataset:
    """Restrict examples to comments (instances with a parent)."""
    comment_ids = frozenset(
        inst.instance_id for inst in ds.instances() if inst.parent_id is not None
    )
    return Dataset(threads=ds.threads, provenance=dict(ds.provenance),
                   target_ids=comment_ids)


assert set(TRIGGERS.values()) == set(STANCE_LABELS)
