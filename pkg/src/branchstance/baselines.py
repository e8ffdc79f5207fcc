"""Context-free baselines: SVM over word/char n-grams, TextCNN and a
target-attention recurrent model over static word vectors, and the
fine-tuned-encoder classifier.

All of them consume only the target instance's text; they share the
evaluation harness through ``predict_labels(branches)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.sparse import csr_matrix
from sklearn.model_selection import GridSearchCV
from sklearn.svm import LinearSVC
from torch import nn

from .attribution import Segmenter, WhitespaceCharSegmenter
from .encoding import EncoderPlugin
from .errors import EmptyTrainSet, SegmenterFailure
from .model import CfeHead, CLASS_ORDER, ModelConfig, StanceModel
from .thread_model import SubBranch

DEFAULT_TARGET_PHRASE = "接种新冠疫苗"


@dataclass(frozen=True)
class TargetPhrase:
    text: str = DEFAULT_TARGET_PHRASE

    def __post_init__(self):
        if not self.text:
            raise ValueError("target phrase must be non-empty")


# ---------------------------------------------------------------------------
# n-gram features + SVM

@dataclass
class NgramFeatureSpec:
    word_ns: tuple[int, ...] = (1, 2, 3)
    char_ns: tuple[int, ...] = (2, 3, 4, 5)
    segmenter: Segmenter = field(default_factory=WhitespaceCharSegmenter)
    vocabulary: dict[str, int] = field(default_factory=dict)

    def fitted(self) -> bool:
        return bool(self.vocabulary)


def _ngram_keys(text: str, spec: NgramFeatureSpec) -> list[str]:
    try:
        words = spec.segmenter.segment(text)
    except Exception as e:
        raise SegmenterFailure(str(e)) from e
    keys = []
    for n in spec.word_ns:
        keys.extend("w:" + "▁".join(words[i:i + n]) for i in range(len(words) - n + 1))
    chars = text.replace(" ", "")
    for n in spec.char_ns:
        keys.extend("c:" + chars[i:i + n] for i in range(len(chars) - n + 1))
    return keys


def fit_ngram_vocabulary(texts: Sequence[str], spec: NgramFeatureSpec) -> NgramFeatureSpec:
    """Build the feature index on the train split only."""
    vocab: dict[str, int] = {}
    for text in texts:
        for key in _ngram_keys(text, spec):
            if key not in vocab:
                vocab[key] = len(vocab)
    spec.vocabulary = vocab
    return spec


def extract_ngrams(text: str, spec: NgramFeatureSpec) -> csr_matrix:
    """Count vector over the fitted vocabulary; unseen features are ignored."""
    if not spec.fitted():
        raise ValueError("vocabulary not fitted; call fit_ngram_vocabulary first")
    counts: dict[int, int] = {}
    for key in _ngram_keys(text, spec):
        idx = spec.vocabulary.get(key)
        if idx is not None:
            counts[idx] = counts.get(idx, 0) + 1
    cols = sorted(counts)
    data = [counts[c] for c in cols]
    return csr_matrix((data, ([0] * len(cols), cols)), shape=(1, len(spec.vocabulary)))


def _stack(texts: Sequence[str], spec: NgramFeatureSpec) -> csr_matrix:
    from scipy.sparse import vstack

    return vstack([extract_ngrams(t, spec) for t in texts])


class SvmNgramBaseline:
    """Linear one-vs-rest SVM over word + character n-grams.

    The regularization constant is picked by cross-validation on the
    train split.
    """

    def __init__(self, spec: Optional[NgramFeatureSpec] = None, seed: int = 0):
        self.spec = spec or NgramFeatureSpec()
        self.seed = seed
        self._clf: Optional[LinearSVC] = None

    def fit(self, texts: Sequence[str], labels: Sequence[str]) -> "SvmNgramBaseline":
        if not texts:
            raise EmptyTrainSet("no training texts")
        fit_ngram_vocabulary(texts, self.spec)
        X = _stack(texts, self.spec)
        y = [CLASS_ORDER.index(lbl) for lbl in labels]
        base = LinearSVC(random_state=self.seed, max_iter=10_000)
        min_class = min(y.count(c) for c in set(y))
        folds = min(5, min_class)
        if folds >= 2:
            search = GridSearchCV(base, {"C": [0.01, 0.1, 1.0, 10.0]}, cv=folds)
            search.fit(X, y)
            self._clf = search.best_estimator_
        else:
            base.fit(X, y)
            self._clf = base
        return self

    def fit_dataset(self, train_ds) -> "SvmNgramBaseline":
        pairs = [(inst.text, inst.label) for _, inst in train_ds.examples()]
        return self.fit([t for t, _ in pairs], [l for _, l in pairs])

    def predict(self, texts: Sequence[str]) -> list[str]:
        return [CLASS_ORDER[int(i)] for i in self._clf.predict(_stack(texts, self.spec))]

    def predict_labels(self, branches: Sequence[SubBranch]) -> list[str]:
        return self.predict([b.target.text for b in branches])


# ---------------------------------------------------------------------------
# static word embeddings

@dataclass
class StaticEmbeddingSpec:
    """Fixed word -> vector lookup; out-of-vocabulary words map to zero."""

    dimension: int
    lookup: dict[str, np.ndarray]

    def get(self, word: str) -> np.ndarray:
        vec = self.lookup.get(word)
        return vec if vec is not None else np.zeros(self.dimension, dtype=np.float32)


def load_embeddings(path: str | Path) -> StaticEmbeddingSpec:
    """Text format: first line 'count dim', then 'word v1 v2 ... vD' per line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    count, dim = (int(x) for x in lines[0].split())
    lookup = {}
    for line in lines[1:count + 1]:
        parts = line.rstrip().split(" ")
        lookup[parts[0]] = np.asarray([float(v) for v in parts[1:]], dtype=np.float32)
        if lookup[parts[0]].shape[0] != dim:
            raise ValueError(f"embedding for {parts[0]!r} has wrong dimension")
    return StaticEmbeddingSpec(dimension=dim, lookup=lookup)


def hashed_embeddings(dimension: int = 32, seed: int = 0) -> StaticEmbeddingSpec:
    """Deterministic pseudo-embeddings for tests and desk-scale runs."""

    class _Lazy(dict):
        def get(self, word, default=None):
            if word not in self:
                digest = hashlib.blake2s(word.encode(), digest_size=8).digest()
                rng = np.random.default_rng((seed << 32) ^ int.from_bytes(digest, "big"))
                self[word] = rng.standard_normal(dimension).astype(np.float32)
            return dict.get(self, word)

    return StaticEmbeddingSpec(dimension=dimension, lookup=_Lazy())


def _embed_text(text: str, emb: StaticEmbeddingSpec, segmenter: Segmenter,
                padding: int) -> np.ndarray:
    words = segmenter.segment(text)[:padding]
    out = np.zeros((padding, emb.dimension), dtype=np.float32)
    for i, w in enumerate(words):
        out[i] = emb.get(w)
    return out


# ---------------------------------------------------------------------------
# TextCNN baseline

class TextCnnBaseline:
    """Static word vectors through the same CFE + classifier head."""

    def __init__(self, embeddings: StaticEmbeddingSpec,
                 segmenter: Optional[Segmenter] = None,
                 padding: int = 64, lr: float = 5e-4, seed: int = 0,
                 filter_sizes: tuple[int, ...] = (2, 3, 4), filters_per_size: int = 32):
        torch.manual_seed(seed)
        self.embeddings = embeddings
        self.segmenter = segmenter or WhitespaceCharSegmenter()
        self.padding = padding
        cfg = ModelConfig(filter_sizes=filter_sizes, filters_per_size=filters_per_size,
                          d=padding)
        self.head = CfeHead(embeddings.dimension, cfg)
        self.optimizer = torch.optim.Adam(self.head.parameters(), lr=lr)

    def _tensor(self, branches: Sequence[SubBranch]) -> torch.Tensor:
        mats = [_embed_text(b.target.text, self.embeddings, self.segmenter, self.padding)
                for b in branches]
        return torch.from_numpy(np.stack(mats))

    def train_batch(self, batch: Sequence[tuple[SubBranch, str]]) -> float:
        x = self._tensor([b for b, _ in batch])
        y = torch.tensor([CLASS_ORDER.index(lbl) for _, lbl in batch])
        self.head.train(True)
        loss = nn.functional.cross_entropy(self.head(x), y)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.head.train(False)
        return float(loss.item())

    def predict_proba(self, branches: Sequence[SubBranch]) -> np.ndarray:
        self.head.train(False)
        with torch.no_grad():
            return torch.softmax(self.head(self._tensor(branches)), dim=1).numpy()

    def predict_labels(self, branches: Sequence[SubBranch]) -> list[str]:
        return [CLASS_ORDER[int(i)] for i in self.predict_proba(branches).argmax(axis=1)]

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.head.state_dict().items()}

    def load_state_dict(self, state: dict) -> None:
        self.head.load_state_dict(state)


# ---------------------------------------------------------------------------
# target-attention recurrent baseline

class _TanNet(nn.Module):
    def __init__(self, dim: int, hidden: int, layers: int):
        super().__init__()
        self.lstm = nn.LSTM(dim, hidden, num_layers=layers,
                            bidirectional=True, batch_first=True)
        self.bilinear = nn.Parameter(torch.randn(2 * hidden, dim) * 0.01)
        self.fc = nn.Linear(2 * hidden, len(CLASS_ORDER))

    def attention(self, states: torch.Tensor, target_vec: torch.Tensor,
                  lengths: torch.Tensor) -> torch.Tensor:
        """softmax of a bilinear score between each state and the target vector."""
        scores = states @ self.bilinear @ target_vec  # (batch, seq)
        mask = torch.arange(states.shape[1])[None, :] >= lengths[:, None]
        scores = scores.masked_fill(mask, float("-inf"))
        return torch.softmax(scores, dim=1)

    def forward(self, x: torch.Tensor, target_vec: torch.Tensor,
                lengths: torch.Tensor) -> torch.Tensor:
        states, _ = self.lstm(x)
        weights = self.attention(states, target_vec, lengths)
        attended = (weights[:, :, None] * states).sum(dim=1)
        return self.fc(attended)


class TanBaseline:
    """Bidirectional recurrent encoder with attention toward the target phrase."""

    def __init__(self, embeddings: StaticEmbeddingSpec,
                 target: TargetPhrase = TargetPhrase(),
                 segmenter: Optional[Segmenter] = None,
                 padding: int = 64, hidden: int = 256, layers: int = 2,
                 lr: float = 5e-4, seed: int = 0):
        torch.manual_seed(seed)
        self.embeddings = embeddings
        self.segmenter = segmenter or WhitespaceCharSegmenter()
        self.padding = padding
        self.net = _TanNet(embeddings.dimension, hidden, layers)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=lr)
        target_words = self.segmenter.segment(target.text)
        vecs = np.stack([embeddings.get(w) for w in target_words])
        self.target_vec = torch.from_numpy(vecs.mean(axis=0))

    def _batch(self, branches: Sequence[SubBranch]):
        mats, lengths = [], []
        for b in branches:
            words = self.segmenter.segment(b.target.text)
            lengths.append(max(1, min(len(words), self.padding)))
            mats.append(_embed_text(b.target.text, self.embeddings,
                                    self.segmenter, self.padding))
        return torch.from_numpy(np.stack(mats)), torch.tensor(lengths)

    def attention_weights(self, b: SubBranch) -> np.ndarray:
        x, lengths = self._batch([b])
        self.net.train(False)
        with torch.no_grad():
            states, _ = self.net.lstm(x)
            w = self.net.attention(states, self.target_vec, lengths)
        return w[0, :int(lengths[0])].numpy()

    def train_batch(self, batch: Sequence[tuple[SubBranch, str]]) -> float:
        x, lengths = self._batch([b for b, _ in batch])
        y = torch.tensor([CLASS_ORDER.index(lbl) for _, lbl in batch])
        self.net.train(True)
        loss = nn.functional.cross_entropy(self.net(x, self.target_vec, lengths), y)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.net.train(False)
        return float(loss.item())

    def predict_proba(self, branches: Sequence[SubBranch]) -> np.ndarray:
        x, lengths = self._batch(branches)
        self.net.train(False)
        with torch.no_grad():
            return torch.softmax(self.net(x, self.target_vec, lengths), dim=1).numpy()

    def predict_labels(self, branches: Sequence[SubBranch]) -> list[str]:
        return [CLASS_ORDER[int(i)] for i in self.predict_proba(branches).argmax(axis=1)]

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.net.state_dict().items()}

    def load_state_dict(self, state: dict) -> None:
        self.net.load_state_dict(state)


def finetuned_encoder_baseline(
    encoder: Optional[EncoderPlugin] = None,
    encoder_name: str = "hashed-context",
    padding: int = 64,
    lr: float = 1e-5,
    seed: int = 0,
) -> StanceModel:
    """Target instance alone through the encoder, mean-pooled, 3-way classified.

    By construction this is the no-context, no-convolution composition of
    the main model.
    """
    cfg = ModelConfig(variant="no_CFE", context_k=0, d=padding, encoder=encoder_name)
    return StanceModel(cfg, encoder=encoder, seed=seed, lr_encoder=lr, lr_head=lr)
