"""Trainable stance head: convolutional n-gram feature extraction over the
target's contextualized token matrix, followed by a dropout + linear +
softmax classifier.

Three variants are supported: ``full`` (context + CFE), ``no_SR`` (context
stripped; the target instance alone is encoded), and ``no_CFE`` (the
encoder output is global-average-pooled over valid rows and classified
directly).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .encoding import (
    EncoderPlugin,
    TargetRepresentation,
    default_summarizer,
    encode_branch,
    get_encoder,
)
from .errors import CorruptCheckpoint, ShapeMismatch, VersionMismatch
from .thread_model import STANCE_LABELS, SubBranch, partial_sub_branch

CLASS_ORDER = STANCE_LABELS  # (favor, against, neither); fixed for checkpoints

CHECKPOINT_VERSION = 1

VARIANTS = ("full", "no_SR", "no_CFE")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    filter_sizes: tuple[int, ...] = (2, 3, 4)
    filters_per_size: int = 32
    d: int = 64
    dropout_rate: float = 0.5
    context_k: Optional[int] = None  # None = unbounded (full sub-branch)
    encoder: str = "hashed-context"
    encoder_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if max(self.filter_sizes) > self.d:
            raise ValueError("largest filter size exceeds d")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def p(self) -> int:
        return self.filters_per_size * len(self.filter_sizes)


@dataclass(frozen=True)
class StanceDistribution:
    """Probability triple over (favor, against, neither)."""

    probs: tuple[float, float, float]

    def __post_init__(self):
        if abs(sum(self.probs) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {sum(self.probs)}, not 1")

    @property
    def label(self) -> str:
        # np.argmax takes the first maximum: ties break to the earliest class.
        return CLASS_ORDER[int(np.argmax(self.probs))]

    @property
    def confidence(self) -> float:
        return float(max(self.probs))

    def prob(self, label: str) -> float:
        return self.probs[CLASS_ORDER.index(label)]


class CfeHead(nn.Module):
    """Windowed filters + ReLU + max-pooling, then dropout/linear/softmax."""

    def __init__(self, h: int, cfg: ModelConfig):
        super().__init__()
        self.h = h
        self.cfg = cfg
        # Fixed (size, filter-index) ordering keeps the feature layout stable.
        self.convs = nn.ModuleList(
            nn.Conv1d(h, cfg.filters_per_size, k) for k in cfg.filter_sizes
        )
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.fc = nn.Linear(cfg.p, len(CLASS_ORDER))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """x: (batch, d, h) -> (batch, p)."""
        if x.shape[2] != self.h:
            raise ShapeMismatch(f"expected hidden size {self.h}, got {x.shape[2]}")
        x = x.transpose(1, 2)  # (batch, h, d)
        maxima = [torch.relu(conv(x)).max(dim=2).values for conv in self.convs]
        return torch.cat(maxima, dim=1)

    def forward(self, x: torch.Tensor, valid_rows=None) -> torch.Tensor:
        return self.fc(self.dropout(self.features(x)))


class PoolHead(nn.Module):
    """no_CFE head: global average over valid rows, then linear."""

    def __init__(self, h: int, cfg: ModelConfig):
        super().__init__()
        self.h = h
        self.cfg = cfg
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.fc = nn.Linear(h, len(CLASS_ORDER))

    def forward(self, x: torch.Tensor, valid_rows: torch.Tensor) -> torch.Tensor:
        # Average only non-padding rows; an all-padding input pools to zero.
        denom = valid_rows.clamp(min=1).to(x.dtype)[:, None]
        pooled = x.sum(dim=1) / denom
        return self.fc(self.dropout(pooled))


def conv_features(rep: TargetRepresentation, head: CfeHead) -> np.ndarray:
    """Feature vector z (length p) for one representation; deterministic order."""
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(rep.matrix, dtype=np.float32))[None]
        return head.features(x)[0].numpy()


def classify(features: np.ndarray, head: nn.Module, training_mode: bool = False) -> StanceDistribution:
    """Dropout (training mode only) + linear + softmax over the class order."""
    z = torch.as_tensor(np.asarray(features, dtype=np.float32))
    if z.shape[-1] != head.fc.in_features:
        raise ShapeMismatch(f"feature length {z.shape[-1]} != {head.fc.in_features}")
    head.train(training_mode)
    with torch.no_grad():
        logits = head.fc(head.dropout(z) if training_mode else z)
        probs = torch.softmax(logits, dim=-1).numpy()
    head.train(False)
    return StanceDistribution(probs=tuple(float(v) for v in probs))


class StanceModel:
    """Encoder plugin + trainable head, with per-group Adam learning rates."""

    def __init__(
        self,
        config: ModelConfig,
        encoder: Optional[EncoderPlugin] = None,
        seed: int = 0,
        lr_encoder: float = 1e-5,
        lr_head: float = 1e-4,
    ):
        torch.manual_seed(seed)
        self.config = config
        self.encoder = encoder if encoder is not None else get_encoder(
            config.encoder, **config.encoder_kwargs
        )
        self.h = self.encoder.hidden_size
        head_cls = PoolHead if config.variant == "no_CFE" else CfeHead
        self.head = head_cls(self.h, config)
        groups = [{"params": self.head.parameters(), "lr": lr_head}]
        enc_params = list(getattr(self.encoder, "torch_parameters", lambda: [])())
        if enc_params:
            groups.append({"params": enc_params, "lr": lr_encoder})
        self.optimizer = torch.optim.Adam(groups)
        self._rep_cache: dict[tuple, tuple[np.ndarray, int]] = {}

    # -- representation --

    def _context_k(self) -> Optional[int]:
        return 0 if self.config.variant == "no_SR" else self.config.context_k

    def input_branch(self, b: SubBranch) -> SubBranch:
        k = self._context_k()
        return b if k is None else partial_sub_branch(b, k)

    def represent(self, b: SubBranch) -> TargetRepresentation:
        bk = self.input_branch(b)
        key = tuple(x.instance_id for x in bk)
        hit = self._rep_cache.get(key)
        if hit is None:
            rep = encode_branch(bk, self.encoder, self.config.d, default_summarizer)
            hit = (rep.matrix, rep.valid_rows)
            self._rep_cache[key] = hit
        return TargetRepresentation(matrix=hit[0], valid_rows=hit[1])

    def _batch_tensors(self, branches: Sequence[SubBranch]):
        reps = [self.represent(b) for b in branches]
        x = torch.from_numpy(np.stack([r.matrix for r in reps]))
        valid = torch.tensor([r.valid_rows for r in reps])
        return x, valid

    # -- training / inference --

    def train_batch(self, batch: Sequence[tuple[SubBranch, str]]) -> float:
        branches = [b for b, _ in batch]
        labels = torch.tensor([CLASS_ORDER.index(lbl) for _, lbl in batch])
        x, valid = self._batch_tensors(branches)
        self.head.train(True)
        logits = self.head(x, valid)
        loss = nn.functional.cross_entropy(logits, labels)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.head.train(False)
        return float(loss.item())

    def tokenized_branch(self, b: SubBranch):
        """Budgeted tokenization of the variant's input branch."""
        from .encoding import budget, concat_subbranch

        bk = self.input_branch(b)
        return budget(concat_subbranch(bk, self.encoder), bk,
                      default_summarizer, self.encoder)

    def predict_proba_tokens(self, tb) -> np.ndarray:
        """Class probabilities for an already-tokenized (possibly masked) branch."""
        from .encoding import encode_target

        rep = encode_target(tb, self.encoder, self.config.d)
        x = torch.from_numpy(rep.matrix)[None]
        valid = torch.tensor([rep.valid_rows])
        self.head.train(False)
        with torch.no_grad():
            return torch.softmax(self.head(x, valid), dim=1).numpy()[0]

    def predict_proba_batch(self, branches: Sequence[SubBranch]) -> np.ndarray:
        x, valid = self._batch_tensors(branches)
        self.head.train(False)
        with torch.no_grad():
            return torch.softmax(self.head(x, valid), dim=1).numpy()

    def predict_labels(self, branches: Sequence[SubBranch]) -> list[str]:
        probs = self.predict_proba_batch(branches)
        return [CLASS_ORDER[int(i)] for i in probs.argmax(axis=1)]

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.head.state_dict().items()}

    def load_state_dict(self, state: dict) -> None:
        self.head.load_state_dict(state)

    def clear_cache(self) -> None:
        self._rep_cache.clear()


def predict(b: SubBranch, model: StanceModel) -> tuple[str, StanceDistribution]:
    """Predicted label (argmax, earliest-class tie-break) and distribution."""
    probs = model.predict_proba_batch([b])[0]
    probs = probs / probs.sum()  # guard against float32 rounding
    dist = StanceDistribution(probs=tuple(float(v) for v in probs))
    return dist.label, dist


def save_checkpoint(model: StanceModel, path: str | Path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "class_order": list(CLASS_ORDER),
        "config": asdict(model.config),
        "hidden_size": model.h,
        "encoder": model.config.encoder,
        "state_dict": model.head.state_dict(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, encoder: Optional[EncoderPlugin] = None) -> StanceModel:
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as e:
        raise CorruptCheckpoint(f"{path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CorruptCheckpoint(f"{path}: not a stance checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint version {payload['format_version']}, expected {CHECKPOINT_VERSION}"
        )
    cfg_dict = dict(payload["config"])
    cfg_dict["filter_sizes"] = tuple(cfg_dict["filter_sizes"])
    config = ModelConfig(**cfg_dict)
    model = StanceModel(config, encoder=encoder)
    if model.h != payload["hidden_size"]:
        raise VersionMismatch(
            f"checkpoint hidden size {payload['hidden_size']} != encoder's {model.h}"
        )
    model.head.load_state_dict(payload["state_dict"])
    return model
