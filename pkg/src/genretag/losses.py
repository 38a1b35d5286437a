"""Classification loss and the contrastive semantic-alignment objective.

All functions accept torch tensors and stay differentiable; scalars come
back as 0-d tensors so they compose into a single training graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidGamma, InvalidLabel, ShapeMismatch

PROB_FLOOR = 1e-12  # clamp before log so saturated softmax stays finite

NEGATIVE_VARIANTS = ("squared", "ccsa")


@dataclass(frozen=True)
class DaConfig:
    """Domain-adaptation knobs: margin, balance, and pairing mode."""

    margin: float = 2.0
    gamma: float = 0.7
    pair_mode: str = "single"  # "single" or "all"; all-pairs only for small pools
    negative_variant: str = "squared"  # hinge on squared distance, or "ccsa"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidGamma(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.pair_mode not in ("single", "all"):
            raise ValueError(f"pair_mode must be 'single' or 'all', got {self.pair_mode!r}")
        if self.negative_variant not in NEGATIVE_VARIANTS:
            raise ValueError(f"negative_variant must be one of {NEGATIVE_VARIANTS}")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float32)


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -ln(probs[label]) over the batch; probabilities, not logits."""
    probs = _as_tensor(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if probs.ndim != 2:
        raise ShapeMismatch(f"probs must be 2-D (batch, classes), got shape {tuple(probs.shape)}")
    if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
        raise ShapeMismatch(
            f"labels shape {tuple(labels.shape)} does not match batch of {probs.shape[0]}"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise InvalidLabel(f"labels must lie in [0, {probs.shape[1]}), got range "
                           f"[{int(labels.min())}, {int(labels.max())}]")
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def _check_pair(e_a: torch.Tensor, e_b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    e_a, e_b = _as_tensor(e_a), _as_tensor(e_b)
    if e_a.shape != e_b.shape:
        raise ShapeMismatch(f"embedding shapes differ: {tuple(e_a.shape)} vs {tuple(e_b.shape)}")
    return e_a, e_b


def positive_pair_distance(e_s: torch.Tensor, e_r: torch.Tensor) -> torch.Tensor:
    """Half squared Euclidean distance; reduces over the last axis."""
    e_s, e_r = _check_pair(e_s, e_r)
    return 0.5 * ((e_s - e_r) ** 2).sum(dim=-1)


def negative_pair_distance(
    e_s: torch.Tensor,
    e_r: torch.Tensor,
    m: float,
    variant: str = "squared",
) -> torch.Tensor:
    """Margin hinge for different-label pairs.

    "squared" hinges on the squared distance: 0.5 * max(0, m - ||d||^2).
    "ccsa" squares a hinge on the distance:   0.5 * max(0, m - ||d||)^2.
    """
    if m <= 0:
        raise ValueError(f"margin must be positive, got {m}")
    e_s, e_r = _check_pair(e_s, e_r)
    sq = ((e_s - e_r) ** 2).sum(dim=-1)
    if variant == "squared":
        return 0.5 * torch.clamp(m - sq, min=0.0)
    if variant == "ccsa":
        return 0.5 * torch.clamp(m - torch.sqrt(sq + 1e-12), min=0.0) ** 2
    raise ValueError(f"negative_variant must be one of {NEGATIVE_VARIANTS}, got {variant!r}")


def semantic_alignment_loss(
    synth_emb: torch.Tensor,
    pos_emb: torch.Tensor,
    neg_emb: torch.Tensor,
    m: float = 2.0,
    variant: str = "squared",
) -> torch.Tensor:
    """Mean over synthetic items of positive plus negative pair terms.

    An empty batch contributes zero so union-sampled batches without
    synthetic items are legal.
    """
    synth_emb = _as_tensor(synth_emb)
    if synth_emb.numel() == 0:
        return torch.zeros((), dtype=torch.float32)
    per_item = positive_pair_distance(synth_emb, pos_emb) + negative_pair_distance(
        synth_emb, neg_emb, m, variant=variant
    )
    return per_item.mean()


def semantic_alignment_loss_all_pairs(
    synth_emb: torch.Tensor,
    synth_labels: torch.Tensor,
    real_emb: torch.Tensor,
    real_labels: torch.Tensor,
    m: float = 2.0,
    variant: str = "squared",
) -> torch.Tensor:
    """All-pairs variant: average the positive term over every same-label
    real item and the negative term over every different-label real item."""
    synth_emb = _as_tensor(synth_emb)
    if synth_emb.numel() == 0:
        return torch.zeros((), dtype=torch.float32)
    real_emb = _as_tensor(real_emb)
    synth_labels = torch.as_tensor(synth_labels, dtype=torch.long)
    real_labels = torch.as_tensor(real_labels, dtype=torch.long)
    total = torch.zeros((), dtype=synth_emb.dtype)
    for i in range(synth_emb.shape[0]):
        same = real_labels == synth_labels[i]
        diff = ~same
        if not bool(same.any()):
            raise ShapeMismatch(f"no same-label real embeddings for item {i}")
        if not bool(diff.any()):
            raise ShapeMismatch(f"no different-label real embeddings for item {i}")
        e = synth_emb[i].unsqueeze(0)
        pos = positive_pair_distance(e.expand(int(same.sum()), -1), real_emb[same]).mean()
        neg = negative_pair_distance(e.expand(int(diff.sum()), -1), real_emb[diff], m, variant=variant).mean()
        total = total + pos + neg
    return total / synth_emb.shape[0]


def combined_loss(l_sa, l_cls, gamma: float):
    """gamma * alignment + (1 - gamma) * classification."""
    if not 0.0 <= gamma <= 1.0:
        raise InvalidGamma(f"gamma must lie in [0, 1], got {gamma}")
    return gamma * l_sa + (1.0 - gamma) * l_cls
