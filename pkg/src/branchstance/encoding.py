"""Turn a sub-branch into the contextualized representation of its target.

The whole sub-branch is tokenized into one sequence with separator tokens
between instances, budgeted to the encoder's input limit (abstracting the
post, then dropping the oldest comments), encoded, and the target's token
rows are sliced out and padded or cut to a fixed height.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import BudgetImpossible, EncoderFailure, ShapeMismatch, TokenizerFailure
from .thread_model import SubBranch

ELLIPSIS = "…"


@runtime_checkable
class EncoderPlugin(Protocol):
    """Contract for pluggable contextual encoders.

    ``encode`` must return one row per input token (len(tokens) x
    hidden_size).  ``reentrant`` declares whether concurrent encode calls
    are safe; the adapter serializes calls otherwise.
    """

    name: str
    hidden_size: int
    max_input_tokens: int
    sep_token_id: int
    mask_token_id: int
    reentrant: bool

    def tokenize(self, text: str) -> list[int]: ...

    def encode(self, tokens: Sequence[int]) -> np.ndarray: ...


@dataclass(frozen=True)
class EncoderSpec:
    max_input_tokens: int = 512
    hidden_size: int = 768
    separator_token: str = "[SEP]"
    mask_token: str = "[MASK]"

    def __post_init__(self):
        if self.max_input_tokens < 2:
            raise ValueError("max_input_tokens must be >= 2")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")

    @classmethod
    def from_encoder(cls, encoder: EncoderPlugin, max_input_tokens: Optional[int] = None):
        return cls(
            max_input_tokens=max_input_tokens or encoder.max_input_tokens,
            hidden_size=encoder.hidden_size,
        )


@dataclass(frozen=True)
class TruncationReport:
    post_abstracted: bool = False
    dropped_instance_ids: tuple[str, ...] = ()
    post_dropped: bool = False
    target_truncated: bool = False

    def any(self) -> bool:
        return (self.post_abstracted or self.post_dropped
                or self.target_truncated or bool(self.dropped_instance_ids))


@dataclass(frozen=True)
class TokenizedBranch:
    """Separator-joined token sequence with per-instance spans.

    ``spans[k]`` is the half-open token range of the k-th surviving
    instance (separators excluded); ``instance_ids[k]`` names it.
    """

    tokens: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    instance_ids: tuple[str, ...]
    report: TruncationReport = field(default_factory=TruncationReport)

    @property
    def total_length(self) -> int:
        return len(self.tokens)

    @property
    def target_span(self) -> tuple[int, int]:
        return self.spans[-1]

    def span_for(self, instance_id: str) -> tuple[int, int]:
        return self.spans[self.instance_ids.index(instance_id)]

    def with_masked(self, start: int, end: int, mask_token_id: int) -> "TokenizedBranch":
        """Replace tokens[start:end] with mask tokens, 1:1, length preserved."""
        toks = list(self.tokens)
        toks[start:end] = [mask_token_id] * (end - start)
        return replace(self, tokens=tuple(toks))


_encode_locks: dict[int, threading.Lock] = {}
_locks_guard = threading.Lock()


def _run_encode(encoder: EncoderPlugin, tokens: Sequence[int]) -> np.ndarray:
    if getattr(encoder, "reentrant", False):
        return encoder.encode(tokens)
    with _locks_guard:
        lock = _encode_locks.setdefault(id(encoder), threading.Lock())
    with lock:
        return encoder.encode(tokens)


def _concat(texts: Sequence[str], ids: Sequence[str], encoder: EncoderPlugin,
            report: TruncationReport = TruncationReport()) -> TokenizedBranch:
    tokens: list[int] = []
    spans: list[tuple[int, int]] = []
    for k, text in enumerate(texts):
        if k > 0:
            tokens.append(encoder.sep_token_id)
        try:
            piece = encoder.tokenize(text)
        except Exception as e:  # tokenizer plugins may raise anything
            raise TokenizerFailure(str(e)) from e
        spans.append((len(tokens), len(tokens) + len(piece)))
        tokens.extend(piece)
    return TokenizedBranch(tokens=tuple(tokens), spans=tuple(spans),
                           instance_ids=tuple(ids), report=report)


def concat_subbranch(b: SubBranch, encoder: EncoderPlugin) -> TokenizedBranch:
    """x_1 [SEP] x_2 [SEP] ... [SEP] x_i, with per-instance spans recorded."""
    return _concat([x.text for x in b], [x.instance_id for x in b], encoder)


def default_summarizer(text: str, budget_chars: int) -> str:
    """Deterministic head+tail extract used when no real summarizer is plugged in.

    Takes the first ceil(0.7 * budget) and last floor(0.3 * budget)
    characters joined by an ellipsis; idempotent by construction.
    """
    if budget_chars < 2:
        raise ValueError("budget_chars must be >= 2")
    if len(text) <= budget_chars:
        return text
    head = math.ceil(0.7 * budget_chars)
    tail = budget_chars - head
    return text[:head] + ELLIPSIS + (text[-tail:] if tail else "")


def budget(
    tb: TokenizedBranch,
    b: SubBranch,
    summarizer: Callable[[str, int], str],
    encoder: EncoderPlugin,
    max_tokens: Optional[int] = None,
    abstract_chars: int = 128,
) -> TokenizedBranch:
    """Fit a tokenized branch into the encoder's input limit.

    Over-budget branches first have the post replaced by its abstract, then
    the oldest comments dropped whole.  The target always survives; if the
    target alone exceeds the limit it is tail-truncated and flagged.
    """
    limit = max_tokens or encoder.max_input_tokens
    if tb.total_length <= limit:
        return tb

    texts = [x.text for x in b]
    ids = [x.instance_id for x in b]
    report = TruncationReport()
    out = tb
    if len(texts) > 1:  # the post is never the target here; abstract it
        report = TruncationReport(post_abstracted=True)
        texts[0] = summarizer(texts[0], abstract_chars)
        out = _concat(texts, ids, encoder, report)

        dropped: list[str] = []
        while out.total_length > limit and len(texts) > 2:
            dropped.append(ids.pop(1))
            texts.pop(1)
            report = replace(report, dropped_instance_ids=tuple(dropped))
            out = _concat(texts, ids, encoder, report)

        if out.total_length > limit and len(texts) == 2:
            texts.pop(0)
            ids.pop(0)
            report = replace(report, post_dropped=True)
            out = _concat(texts, ids, encoder, report)

    if out.total_length > limit:
        report = replace(report, target_truncated=True)
        start, _ = out.spans[-1]
        out = TokenizedBranch(
            tokens=out.tokens[:limit],
            spans=out.spans[:-1] + ((start, limit),),
            instance_ids=out.instance_ids,
            report=report,
        )
    return out


@dataclass(frozen=True)
class TargetRepresentation:
    """d x h matrix of the target's token vectors; rows past valid_rows are zero."""

    matrix: np.ndarray
    valid_rows: int

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def h(self) -> int:
        return self.matrix.shape[1]


def encode_target(tb: TokenizedBranch, encoder: EncoderPlugin, d: int) -> TargetRepresentation:
    """Encode the branch and slice out the target's rows, padded/cut to d."""
    try:
        H = _run_encode(encoder, tb.tokens)
    except Exception as e:
        raise EncoderFailure(str(e)) from e
    H = np.asarray(H, dtype=np.float32)
    if H.ndim != 2 or H.shape[0] != tb.total_length:
        raise ShapeMismatch(
            f"encoder returned shape {H.shape}, expected ({tb.total_length}, h)"
        )
    start, end = tb.target_span
    rows = H[start:end]
    out = np.zeros((d, H.shape[1]), dtype=np.float32)
    valid = min(end - start, d)
    out[:valid] = rows[:valid]  # cutting keeps the token prefix
    return TargetRepresentation(matrix=out, valid_rows=valid)


def encode_branch(
    b: SubBranch,
    encoder: EncoderPlugin,
    d: int,
    summarizer: Callable[[str, int], str] = default_summarizer,
    max_tokens: Optional[int] = None,
) -> TargetRepresentation:
    """Convenience pipeline: concat -> budget -> encode_target."""
    tb = budget(concat_subbranch(b, encoder), b, summarizer, encoder, max_tokens)
    return encode_target(tb, encoder, d)


# ---------------------------------------------------------------------------
# Built-in encoder plugins

PAD_ID = 0
SEP_ID = 1
MASK_ID = 2
_FIRST_VOCAB_ID = 16


def _stable_token_id(token: str) -> int:
    digest = hashlib.blake2s(token.encode("utf-8"), digest_size=8).digest()
    return _FIRST_VOCAB_ID + int.from_bytes(digest, "big") % (2**31 - _FIRST_VOCAB_ID)


def split_tokens(text: str) -> list[str]:
    """Whitespace chunks; non-Latin chunks split into single characters."""
    out = []
    for chunk in text.split():
        if all(ord(c) < 0x2E80 for c in chunk):
            out.append(chunk)
        else:
            out.extend(chunk)
    return out


class HashedContextEncoder:
    """Deterministic stub encoder with cheap context mixing.

    Each token id maps to a fixed random vector.  Every output row is the
    token's vector plus ``context_weight`` times the mean vector of the
    whole input plus ``parent_weight`` times the mean of the previous
    separator-delimited segment, so target rows carry information about
    ancestor tokens (the previous-instance channel crudely mimics
    attention to the parent).
    """

    name = "hashed-context"
    reentrant = True

    def __init__(self, hidden_size: int = 32, max_input_tokens: int = 512,
                 seed: int = 0, context_weight: float = 0.5,
                 parent_weight: float = 1.0):
        self.hidden_size = hidden_size
        self.max_input_tokens = max_input_tokens
        self.sep_token_id = SEP_ID
        self.mask_token_id = MASK_ID
        self.seed = seed
        self.context_weight = context_weight
        self.parent_weight = parent_weight
        self._cache: dict[int, np.ndarray] = {}

    def tokenize(self, text: str) -> list[int]:
        return [_stable_token_id(t) for t in split_tokens(text)]

    def _vector(self, token_id: int) -> np.ndarray:
        vec = self._cache.get(token_id)
        if vec is None:
            rng = np.random.default_rng((self.seed << 32) ^ token_id)
            vec = rng.standard_normal(self.hidden_size).astype(np.float32)
            self._cache[token_id] = vec
        return vec

    def encode(self, tokens: Sequence[int]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.hidden_size), dtype=np.float32)
        V = np.stack([self._vector(t) for t in tokens])
        H = V + self.context_weight * V.mean(axis=0, keepdims=True)

        # Previous-segment channel: rows of segment s get the mean of s-1.
        seg = np.zeros(len(tokens), dtype=np.int64)
        s = 0
        for idx, tok in enumerate(tokens):
            if tok == self.sep_token_id:
                s += 1
            seg[idx] = s
        if self.parent_weight and s > 0:
            for cur in range(1, s + 1):
                prev_rows = V[(seg == cur - 1) & (np.asarray(tokens) != self.sep_token_id)]
                if len(prev_rows):
                    H[seg == cur] += self.parent_weight * prev_rows.mean(axis=0)
        return H


class RowIndexEncoder:
    """Test stub: row t of the output is the constant vector t."""

    name = "row-index"
    reentrant = True

    def __init__(self, hidden_size: int = 4, max_input_tokens: int = 512):
        self.hidden_size = hidden_size
        self.max_input_tokens = max_input_tokens
        self.sep_token_id = SEP_ID
        self.mask_token_id = MASK_ID

    def tokenize(self, text: str) -> list[int]:
        return [_stable_token_id(t) for t in split_tokens(text)]

    def encode(self, tokens: Sequence[int]) -> np.ndarray:
        n = len(tokens)
        return np.repeat(np.arange(n, dtype=np.float32)[:, None], self.hidden_size, axis=1)


class HFEncoder:
    """Adapter over a HuggingFace transformer checkpoint (optional)."""

    reentrant = False

    def __init__(self, model_name: str):
        from transformers import AutoModel, AutoTokenizer  # lazy; heavy import

        self.name = f"hf:{model_name}"
        self._tok = AutoTokenizer.from_pretrained(model_name)
        self._model = AutoModel.from_pretrained(model_name)
        self._model.eval()
        self.hidden_size = self._model.config.hidden_size
        self.max_input_tokens = min(512, self._tok.model_max_length)
        self.sep_token_id = self._tok.sep_token_id
        self.mask_token_id = self._tok.mask_token_id

    def tokenize(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False)

    def encode(self, tokens: Sequence[int]) -> np.ndarray:
        import torch

        with torch.no_grad():
            ids = torch.tensor([list(tokens)])
            out = self._model(input_ids=ids).last_hidden_state[0]
        return out.numpy()


_ENCODER_FACTORIES: dict[str, Callable[..., EncoderPlugin]] = {
    "hashed-context": HashedContextEncoder,
    "row-index": RowIndexEncoder,
}


def register_encoder(name: str, factory: Callable[..., EncoderPlugin]) -> None:
    _ENCODER_FACTORIES[name] = factory


def get_encoder(name: str, **kwargs) -> EncoderPlugin:
    """Look up an encoder plugin by config name; 'hf:<model>' loads transformers."""
    if name.startswith("hf:"):
        return HFEncoder(name[3:])
    try:
        return _ENCODER_FACTORIES[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown encoder plugin {name!r}; "
                       f"known: {sorted(_ENCODER_FACTORIES)}") from None
