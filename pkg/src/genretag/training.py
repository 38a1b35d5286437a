"""The six training regimes with Adam, early stopping, and seeded runs.

Two independent random streams keep regimes comparable: `data` ordering and
crops draw from one generator, domain-adaptation pair sampling from another,
so an E2E-DA run with gamma=0 consumes the data stream exactly like E2E-add
and reproduces its loss trajectory bit for bit.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .audio import FeatureConfig, FeaturePipeline
from .data import FoldSplit, TrackRecord, assemble_batches, genre_index, sample_da_pairs
from .errors import ConfigMismatch, RegimeConfigError, ShapeMismatch
from .losses import (
    DaConfig,
    combined_loss,
    cross_entropy,
    semantic_alignment_loss,
    semantic_alignment_loss_all_pairs,
)
from .model import (
    ModelCheckpoint,
    ModelConfig,
    TaggerNetwork,
    build_model,
    freeze_feature_layers,
    load_checkpoint,
    network_from_checkpoint,
    save_checkpoint,
    trainable_parameters,
)

logger = logging.getLogger("genretag.training")

REGIME_KINDS = ("e2e-real", "e2e-synth", "e2e-add", "e2e-da", "tl", "ft")

DEFAULT_LEARNING_RATE = 1e-3
FINE_TUNE_LEARNING_RATE = 1e-4

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Offset separating the pair-sampling stream from the data stream.
_PAIR_STREAM = 0x9E3779B9


def normalize_regime_kind(kind: str) -> str:
    canon = kind.strip().lower().replace("_", "-")
    if canon not in REGIME_KINDS:
        raise RegimeConfigError(f"unknown regime {kind!r}; expected one of {REGIME_KINDS}")
    return canon


@dataclass(frozen=True)
class Regime:
    kind: str
    init_checkpoint: str | Path | ModelCheckpoint | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_regime_kind(self.kind))
        if self.kind in ("tl", "ft") and self.init_checkpoint is None:
            raise RegimeConfigError(f"regime {self.kind!r} requires init_checkpoint")
        if self.kind.startswith("e2e") and self.init_checkpoint is not None:
            raise RegimeConfigError(f"regime {self.kind!r} does not take init_checkpoint")


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 4
    learning_rate: float | None = None  # None resolves per regime
    patience: int = 5
    max_epochs: int = 100
    da: DaConfig = field(default_factory=DaConfig)
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise RegimeConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.patience < 1:
            raise RegimeConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise RegimeConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise RegimeConfigError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    stopped_epoch: int = 0


@dataclass(frozen=True)
class RegimeData:
    real: FoldSplit | None = None
    synth: FoldSplit | None = None


def resolve_learning_rate(kind: str, learning_rate: float | None) -> float:
    if learning_rate is not None:
        return learning_rate
    return FINE_TUNE_LEARNING_RATE if normalize_regime_kind(kind) == "ft" else DEFAULT_LEARNING_RATE


def early_stopping_monitor(val_losses: Sequence[float], patience: int = 5) -> tuple[str, int]:
    """Return ('continue'|'stop', best_epoch). Improvement means any strictly
    lower validation loss; stop once patience epochs pass without one."""
    if not val_losses:
        raise ValueError("need at least one recorded epoch")
    best_epoch, best = 1, val_losses[0]
    for epoch, value in enumerate(val_losses[1:], start=2):
        if value < best:
            best_epoch, best = epoch, value
    decision = "stop" if len(val_losses) - best_epoch >= patience else "continue"
    return decision, best_epoch


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam_state(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
        v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; reference implementation the training
    loop's torch optimizer is cross-checked against."""
    if set(params) != set(grads):
        raise ShapeMismatch("params and grads must share the same keys")
    b1, b2 = betas
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {np.shape(p)} for {key}")
        m = b1 * state.m[key] + (1 - b1) * g
        v = b2 * state.v[key] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[key] = np.asarray(p, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[key], new_v[key] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def _regime_records(
    regime: Regime, data: RegimeData
) -> tuple[list[TrackRecord], list[TrackRecord], list[TrackRecord]]:
    """Resolve (train, val, real-pair-pool) record lists for a regime."""
    kind = regime.kind
    if kind in ("e2e-real", "tl", "ft"):
        if data.real is None:
            raise RegimeConfigError(f"regime {kind!r} needs a real fold split")
        train, val = list(data.real.train), list(data.real.val)
    elif kind == "e2e-synth":
        if data.synth is None:
            raise RegimeConfigError("regime 'e2e-synth' needs a synthetic fold split")
        train, val = list(data.synth.train), list(data.synth.val)
    else:  # e2e-add, e2e-da: union of domains, validated on the real split
        if data.real is None or data.synth is None:
            raise RegimeConfigError(f"regime {kind!r} needs both real and synthetic splits")
        train = list(data.real.train) + list(data.synth.train)
        val = list(data.real.val)
    if not train:
        raise RegimeConfigError(f"regime {kind!r} has an empty training split")
    if not val:
        raise RegimeConfigError(f"regime {kind!r} has an empty validation split")
    pool = list(data.real.train) if data.real is not None else []
    return train, val, pool


def prepare_network(regime: Regime, config: TrainingConfig) -> TaggerNetwork:
    """Build or load the network a regime starts from (pre-training state)."""
    if regime.kind in ("tl", "ft"):
        ckpt = regime.init_checkpoint
        if not isinstance(ckpt, ModelCheckpoint):
            ckpt = load_checkpoint(ckpt, expect_config=config.model)
        elif ckpt.config != config.model:
            raise ConfigMismatch(
                f"init checkpoint built for {ckpt.config}, run expects {config.model}"
            )
        net = network_from_checkpoint(ckpt)
        if regime.kind == "tl":
            freeze_feature_layers(net)
        return net
    return build_model(config.model, seed=config.seed)


def _mean_ce_and_acc(net: TaggerNetwork, records, batch_size, features) -> tuple[float, float]:
    net.eval()
    total_nll, correct, count = 0.0, 0, 0
    with torch.no_grad():
        for batch in assemble_batches(records, batch_size, "val", features=features):
            x = torch.as_tensor(batch.features, dtype=torch.float32)
            _, probs = net(x)
            labels = torch.as_tensor(batch.labels)
            total_nll += float(cross_entropy(probs, labels)) * len(batch.labels)
            correct += int((probs.argmax(dim=1) == labels).sum())
            count += len(batch.labels)
    return total_nll / count, correct / count


def train(
    regime: Regime,
    data: RegimeData,
    config: TrainingConfig,
    feature_source=None,
    out_dir: str | Path | None = None,
) -> tuple[ModelCheckpoint, TrainingHistory]:
    """Run one regime to early stopping and return the best-epoch checkpoint.

    Training applies random 10 s crops, validation the central crop. Early
    stopping watches epoch-level validation cross-entropy with the
    configured patience, and the returned parameters are those of the
    lowest-validation-loss epoch. When `out_dir` is given the checkpoint and
    a per-epoch history CSV are written there.
    """
    train_records, val_records, real_pool = _regime_records(regime, data)
    if feature_source is None:
        feature_source = FeaturePipeline(config.features)
    features = feature_source.features

    torch.manual_seed(config.seed)
    net = prepare_network(regime, config)
    lr = resolve_learning_rate(regime.kind, config.learning_rate)
    optimizer = torch.optim.Adam(trainable_parameters(net), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)

    data_rng = np.random.default_rng(config.seed)
    pair_rng = np.random.default_rng([config.seed, _PAIR_STREAM])
    use_da = regime.kind == "e2e-da"

    history = TrainingHistory()
    best_val = float("inf")
    best_params: dict[str, np.ndarray] | None = None
    best_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        net.train()
        epoch_loss, n_items = 0.0, 0
        for batch in assemble_batches(
            train_records, config.batch_size, "train", features=features, rng=data_rng
        ):
            x = torch.as_tensor(batch.features, dtype=torch.float32)
            labels = torch.as_tensor(batch.labels)
            emb, probs = net(x)
            l_cls = cross_entropy(probs, labels)
            if use_da:
                synth_idx = [i for i, d in enumerate(batch.domains) if d == "synthetic"]
                if synth_idx and config.da.pair_mode == "all":
                    # Average over every real item; only viable for small pools.
                    pool = np.stack([features(r, "random", pair_rng) for r in real_pool])
                    pool_emb, _ = net(torch.as_tensor(pool, dtype=torch.float32))
                    l_sa = semantic_alignment_loss_all_pairs(
                        emb[synth_idx],
                        labels[synth_idx],
                        pool_emb,
                        torch.as_tensor([genre_index(r.genre) for r in real_pool]),
                        m=config.da.margin,
                        variant=config.da.negative_variant,
                    )
                elif synth_idx:
                    pairs = sample_da_pairs(
                        [batch.records[i] for i in synth_idx], real_pool, pair_rng
                    )
                    pos = np.stack([features(r, "random", pair_rng) for r in pairs.pos_real])
                    neg = np.stack([features(r, "random", pair_rng) for r in pairs.neg_real])
                    pos_emb, _ = net(torch.as_tensor(pos, dtype=torch.float32))
                    neg_emb, _ = net(torch.as_tensor(neg, dtype=torch.float32))
                    l_sa = semantic_alignment_loss(
                        emb[synth_idx],
                        pos_emb,
                        neg_emb,
                        m=config.da.margin,
                        variant=config.da.negative_variant,
                    )
                else:
                    l_sa = torch.zeros(())
                loss = combined_loss(l_sa, l_cls, config.da.gamma)
            else:
                loss = l_cls
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch.labels)
            n_items += len(batch.labels)

        train_loss = epoch_loss / n_items
        val_loss, val_acc = _mean_ce_and_acc(net, val_records, config.batch_size, features)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        logger.info(
            "regime=%s epoch=%d train_loss=%.6f val_loss=%.6f val_acc=%.4f",
            regime.kind, epoch, train_loss, val_loss, val_acc,
        )

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {
                name: tensor.detach().cpu().numpy().copy()
                for name, tensor in net.state_dict().items()
            }
        decision, best_epoch = early_stopping_monitor(history.val_loss, config.patience)
        history.best_epoch = best_epoch
        history.stopped_epoch = epoch
        if decision == "stop":
            break

    assert best_params is not None
    fold_ids = {s.fold_id for s in (data.real, data.synth) if s is not None}
    meta = {
        "regime": regime.kind,
        "epoch": best_epoch,
        "val_loss": best_val,
        "seed": config.seed,
        "fold": sorted(fold_ids)[0] if len(fold_ids) == 1 else sorted(fold_ids),
        "learning_rate": lr,
    }
    ckpt = ModelCheckpoint(config=config.model, params=best_params, meta=meta)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
        write_history_csv(out_dir / "history.csv", history)
    return ckpt, history


def write_history_csv(path: str | Path, history: TrainingHistory) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for i, (tr, vl, va) in enumerate(
            zip(history.train_loss, history.val_loss, history.val_acc), start=1
        ):
            writer.writerow([i, repr(tr), repr(vl), repr(va)])
    return path


def read_history_csv(path: str | Path) -> TrainingHistory:
    history = TrainingHistory()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            history.train_loss.append(float(row["train_loss"]))
            history.val_loss.append(float(row["val_loss"]))
            history.val_acc.append(float(row["val_acc"]))
    if history.val_loss:
        _, history.best_epoch = early_stopping_monitor(history.val_loss, patience=10**9)
        history.stopped_epoch = len(history.val_loss)
    return history
