import random

import numpy as np
import pytest

from branchstance.thread_model import Instance, Thread, build_thread


def make_instance(iid, tid="t1", parent=None, text="hello world", label=None,
                  created_at=None, raw=None):
    return Instance(
        instance_id=iid,
        thread_id=tid,
        parent_id=parent,
        text=text,
        raw_text=raw if raw is not None else text,
        label=label,
        platform="test",
        created_at=created_at or f"2021-01-01T00:00:{hash(iid) % 60:02d}",
    )


def fig1_records() -> list[Instance]:
    """The worked-example thread: a post and nine comments.

    Branch 1 runs post -> c1 -> c2 -> c3 -> c4 -> c9 (depth 6); c5 replies
    to the post directly; c6 -> c7 -> c8 forms the third branch.
    """
    edges = {
        "post": None,
        "c1": "post", "c2": "c1", "c3": "c2", "c4": "c3", "c9": "c4",
        "c5": "post",
        "c6": "post", "c7": "c6", "c8": "c7",
    }
    order = list(edges)
    return [
        make_instance(iid, tid="fig1", parent=parent,
                      text=f"text of {iid} aa bb",
                      created_at=f"2021-01-01T00:{i:02d}:00")
        for i, (iid, parent) in enumerate(edges.items())
    ]


@pytest.fixture
def fig1_thread() -> Thread:
    return build_thread(fig1_records())


def random_tree_records(rng: random.Random, n: int, tid: str = "rt",
                        labels=(None, "favor", "against", "neither")) -> list[Instance]:
    """Random tree: node i > 0 replies to a uniformly chosen earlier node."""
    records = [make_instance(f"{tid}-0", tid=tid, parent=None,
                             text="root words here",
                             label=rng.choice(labels),
                             created_at="2021-01-01T00:00:00")]
    for i in range(1, n):
        parent = records[rng.randrange(i)].instance_id
        n_words = rng.randint(1, 6)
        text = " ".join(rng.choice(["aa", "bb", "cc", "dd", "ee"]) for _ in range(n_words))
        records.append(make_instance(
            f"{tid}-{i}", tid=tid, parent=parent, text=text,
            label=rng.choice(labels),
            created_at=f"2021-01-01T00:{i % 60:02d}:{i % 60:02d}",
        ))
    return records


def naive_conv_reference(X: np.ndarray, weights, biases, filter_sizes, filters_per_size):
    """Independent triple-loop oracle for the convolution features.

    ``weights[s]`` has shape (filters_per_size, h, k); ``biases[s]`` shape
    (filters_per_size,).  Returns the p-vector in (size, filter) order.
    """
    d, h = X.shape
    out = []
    for s, k in enumerate(filter_sizes):
        for f in range(filters_per_size):
            best = -np.inf
            for j in range(d - k + 1):
                acc = biases[s][f]
                for kk in range(k):
                    for hh in range(h):
                        acc += weights[s][f, hh, kk] * X[j + kk, hh]
                best = max(best, max(acc, 0.0))
            out.append(best)
    return np.array(out)
