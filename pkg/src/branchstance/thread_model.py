"""Immutable tree model of a conversation thread.

A thread is a post plus the comments that (transitively) reply to it.  The
post is the root; the path from the root to an instance is that instance's
sub-branch, and its depth is the length of that path (the post has depth 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from .errors import CycleDetected, DanglingParent, MultipleRoots, NoRoot, UnknownInstance

STANCE_LABELS = ("favor", "against", "neither")

DEPTH_BUCKETS = ("1", "2", "3", "4", "5plus")


@dataclass(frozen=True)
class Instance:
    """One post or comment.

    ``parent_id`` is None exactly when the instance is the post.  ``text``
    is the normalized form used by models; ``raw_text`` preserves the
    original export.
    """

    instance_id: str
    thread_id: str
    parent_id: Optional[str]
    text: str
    raw_text: str = ""
    label: Optional[str] = None
    platform: str = ""
    created_at: str = ""

    def is_post(self) -> bool:
        return self.parent_id is None


@dataclass(frozen=True)
class SubBranch:
    """Ordered root-to-target path; the model's input unit."""

    instances: tuple[Instance, ...]

    def __post_init__(self):
        if not self.instances:
            raise ValueError("sub-branch must contain at least the target")

    @property
    def target(self) -> Instance:
        return self.instances[-1]

    @property
    def target_index(self) -> int:
        return len(self.instances)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[Instance]:
        return iter(self.instances)


@dataclass(frozen=True)
class Thread:
    """Validated conversation tree.  Construct via :func:`build_thread`."""

    thread_id: str
    root: Instance
    nodes: dict[str, Instance]
    children: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def instances(self) -> Iterator[Instance]:
        """Deterministic pre-order traversal."""
        stack = [self.root.instance_id]
        while stack:
            nid = stack.pop()
            yield self.nodes[nid]
            stack.extend(reversed(self.children.get(nid, ())))

    def leaves(self) -> list[Instance]:
        return [n for n in self.instances() if not self.children.get(n.instance_id)]

    def branches(self) -> list[SubBranch]:
        """Root-to-leaf paths."""
        return [sub_branch(self, leaf.instance_id) for leaf in self.leaves()]

    def max_depth(self) -> int:
        return max(depth(self, n.instance_id) for n in self.instances())


def build_thread(records: Sequence[Instance]) -> Thread:
    """Assemble and validate a thread from an unordered record list.

    Children lists are ordered by (created_at, instance_id) so the result is
    independent of input order.
    """
    if not records:
        raise NoRoot("no records given")
    thread_ids = {r.thread_id for r in records}
    if len(thread_ids) != 1:
        raise ValueError(f"records span multiple thread_ids: {sorted(thread_ids)}")

    nodes: dict[str, Instance] = {}
    for r in records:
        if r.instance_id in nodes:
            raise ValueError(f"duplicate instance_id {r.instance_id!r}")
        nodes[r.instance_id] = r

    for r in records:
        if r.parent_id is not None and r.parent_id not in nodes:
            raise DanglingParent(f"{r.instance_id!r} replies to unknown {r.parent_id!r}")

    # Walk parent links from every node; a revisit within one walk is a cycle.
    safe: set[str] = set()
    for r in records:
        seen: set[str] = set()
        cur: Optional[Instance] = r
        while cur is not None and cur.instance_id not in safe:
            if cur.instance_id in seen:
                raise CycleDetected(f"reply cycle through {cur.instance_id!r}")
            seen.add(cur.instance_id)
            cur = nodes[cur.parent_id] if cur.parent_id is not None else None
        safe.update(seen)

    roots = [r for r in records if r.parent_id is None]
    if not roots:
        raise NoRoot("no instance without parent_id")
    if len(roots) > 1:
        raise MultipleRoots(f"{len(roots)} roots: {sorted(r.instance_id for r in roots)}")

    children: dict[str, list[str]] = {}
    for r in records:
        if r.parent_id is not None:
            children.setdefault(r.parent_id, []).append(r.instance_id)
    ordered = {
        pid: tuple(sorted(kids, key=lambda i: (nodes[i].created_at, i)))
        for pid, kids in children.items()
    }
    return Thread(thread_id=roots[0].thread_id, root=roots[0], nodes=nodes, children=ordered)


def depth(thread: Thread, instance_id: str) -> int:
    """Length of the root-to-instance path; the root has depth 1."""
    return len(sub_branch(thread, instance_id))


def sub_branch(thread: Thread, instance_id: str) -> SubBranch:
    """The unique root-to-target path."""
    if instance_id not in thread.nodes:
        raise UnknownInstance(f"{instance_id!r} not in thread {thread.thread_id!r}")
    path = []
    cur: Optional[Instance] = thread.nodes[instance_id]
    while cur is not None:
        path.append(cur)
        cur = thread.nodes[cur.parent_id] if cur.parent_id is not None else None
    return SubBranch(instances=tuple(reversed(path)))


def partial_sub_branch(b: SubBranch, k: int) -> SubBranch:
    """Truncate to at most ``k`` ancestors plus the target.

    ``k`` counts ancestors, not total instances: the result keeps the last
    min(k + 1, len(b)) instances.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    i = len(b)
    if i <= k:
        return b
    return SubBranch(instances=b.instances[i - k - 1:])


def depth_bucket(d: int) -> str:
    """Bucket a depth for reporting: 1, 2, 3, 4, or 5plus."""
    if d < 1:
        raise ValueError("depth must be positive")
    return str(d) if d <= 4 else "5plus"
