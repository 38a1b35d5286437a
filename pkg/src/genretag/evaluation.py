"""Metrics, fold aggregation, embedding export, and plots."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .data import TrackRecord, assemble_batches
from .errors import EmptySplit, TooFewFolds
from .losses import cross_entropy
from .model import TaggerNetwork

# Table row order and display labels for the six regimes.
REGIME_ORDER = (
    ("e2e-real", "E2E-real"),
    ("e2e-synth", "E2E-synth"),
    ("e2e-add", "E2E-add"),
    ("e2e-da", "E2E-DA"),
    ("tl", "TL"),
    ("ft", "FT"),
)

DOMAIN_MARKERS = {"real": "o", "synthetic": "^"}


@dataclass(frozen=True)
class FoldResult:
    fold_id: int
    accuracy: float
    loss: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")
        if self.loss < 0.0:
            raise ValueError(f"loss must be non-negative, got {self.loss}")


@dataclass(frozen=True)
class RegimeSummary:
    regime: str
    accuracy_mean: float
    accuracy_std: float
    loss_mean: float
    loss_std: float


@dataclass(frozen=True)
class EmbeddingRecord:
    track_id: str
    genre: str
    domain: str
    embedding: np.ndarray


def evaluate(
    net: TaggerNetwork,
    records: Sequence[TrackRecord],
    feature_source,
    batch_size: int = 4,
    fold_id: int = 0,
) -> FoldResult:
    """Accuracy and mean cross-entropy on center-cropped inputs."""
    if not records:
        raise EmptySplit("cannot evaluate an empty split")
    net.eval()
    total_nll, correct, count = 0.0, 0, 0
    with torch.no_grad():
        for batch in assemble_batches(records, batch_size, "val", features=feature_source.features):
            x = torch.as_tensor(batch.features, dtype=torch.float32)
            _, probs = net(x)
            labels = torch.as_tensor(batch.labels)
            total_nll += float(cross_entropy(probs, labels)) * len(batch.labels)
            correct += int((probs.argmax(dim=1) == labels).sum())
            count += len(batch.labels)
    return FoldResult(fold_id=fold_id, accuracy=correct / count, loss=total_nll / count)


def aggregate_folds(results: Sequence[FoldResult]) -> RegimeSummary:
    """Arithmetic mean and population standard deviation per metric."""
    if len(results) < 2:
        raise TooFewFolds(f"need at least 2 fold results, got {len(results)}")
    acc = np.array([r.accuracy for r in results], dtype=np.float64)
    loss = np.array([r.loss for r in results], dtype=np.float64)
    return RegimeSummary(
        regime="",
        accuracy_mean=float(acc.mean()),
        accuracy_std=float(acc.std()),
        loss_mean=float(loss.mean()),
        loss_std=float(loss.std()),
    )


def extract_embeddings(
    net: TaggerNetwork,
    records: Sequence[TrackRecord],
    feature_source,
    batch_size: int = 4,
) -> list[EmbeddingRecord]:
    """One center-crop embedding per track, tagged with genre and domain."""
    if not records:
        raise EmptySplit("no records to embed")
    net.eval()
    out: list[EmbeddingRecord] = []
    with torch.no_grad():
        for batch in assemble_batches(records, batch_size, "val", features=feature_source.features):
            emb, _ = net(torch.as_tensor(batch.features, dtype=torch.float32))
            for row, record in zip(emb.numpy(), batch.records):
                out.append(
                    EmbeddingRecord(
                        track_id=record.path,
                        genre=record.genre,
                        domain=record.domain,
                        embedding=row.copy(),
                    )
                )
    return out


def write_embeddings_jsonl(path: str | Path, records: Sequence[EmbeddingRecord]) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "id": r.track_id,
                        "genre": r.genre,
                        "domain": r.domain,
                        "embedding": [float(v) for v in r.embedding],
                    }
                )
                + "\n"
            )
    return path


def read_embeddings_jsonl(path: str | Path) -> list[EmbeddingRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                EmbeddingRecord(
                    track_id=obj["id"],
                    genre=obj["genre"],
                    domain=obj["domain"],
                    embedding=np.asarray(obj["embedding"], dtype=np.float32),
                )
            )
    return records


def _f32_repr(value: float) -> str:
    # shortest decimal that recovers the exact float32 after parsing
    return repr(float(np.float32(value)))


def summarize_regimes(per_regime: Mapping[str, Sequence[FoldResult]]) -> list[RegimeSummary]:
    known = {kind for kind, _ in REGIME_ORDER}
    for name in per_regime:
        if name not in known:
            raise ValueError(f"unknown regime {name!r}; expected one of {sorted(known)}")
    summaries = []
    for kind, _label in REGIME_ORDER:
        if kind in per_regime:
            agg = aggregate_folds(per_regime[kind])
            summaries.append(
                RegimeSummary(
                    regime=kind,
                    accuracy_mean=agg.accuracy_mean,
                    accuracy_std=agg.accuracy_std,
                    loss_mean=agg.loss_mean,
                    loss_std=agg.loss_std,
                )
            )
    return summaries


def emit_report(
    per_regime: Mapping[str, Sequence[FoldResult]],
    csv_path: str | Path,
    text_path: str | Path | None = None,
) -> str:
    """Write the results table as CSV plus an aligned plain-text rendering,
    rows in the canonical regime order. Returns the text table."""
    summaries = summarize_regimes(per_regime)
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regime", "accuracy_mean", "accuracy_std", "loss_mean", "loss_std"])
        for s in summaries:
            writer.writerow(
                [
                    s.regime,
                    _f32_repr(s.accuracy_mean),
                    _f32_repr(s.accuracy_std),
                    _f32_repr(s.loss_mean),
                    _f32_repr(s.loss_std),
                ]
            )
    labels = dict(REGIME_ORDER)
    lines = [f"{'System':<10} {'Accuracy mean (std)':>22} {'Loss mean (std)':>18}"]
    for s in summaries:
        acc = f"{s.accuracy_mean:.3f} ({s.accuracy_std:.3f})"
        loss = f"{s.loss_mean:.3f} ({s.loss_std:.3f})"
        lines.append(f"{labels[s.regime]:<10} {acc:>22} {loss:>18}")
    text = "\n".join(lines) + "\n"
    if text_path is not None:
        Path(text_path).write_text(text)
    return text


def read_report_csv(path: str | Path) -> list[RegimeSummary]:
    summaries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            summaries.append(
                RegimeSummary(
                    regime=row["regime"],
                    accuracy_mean=float(row["accuracy_mean"]),
                    accuracy_std=float(row["accuracy_std"]),
                    loss_mean=float(row["loss_mean"]),
                    loss_std=float(row["loss_std"]),
                )
            )
    return summaries


def emit_scatter(
    points: np.ndarray,
    labels: Sequence[str],
    domains: Sequence[str],
    out_path: str | Path,
    genres: Sequence[str] | None = None,
) -> Path:
    """SVG scatter of projected embeddings: color = genre, marker = domain.

    `genres=None` keeps the three alphabetically-first genres present; an
    explicitly empty sequence plots every genre.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"points must be N x 2, got shape {points.shape}")
    if points.shape[0] == 0:
        raise ValueError("nothing to plot: zero points")
    if len(labels) != points.shape[0] or len(domains) != points.shape[0]:
        raise ValueError("labels and domains must match the number of points")

    present = sorted(set(labels))
    if genres is None:
        keep = present[:3]
    elif len(genres) == 0:
        keep = present
    else:
        keep = [g for g in genres if g in present]
        if not keep:
            raise ValueError(f"none of {genres!r} present in the labels")

    cmap = plt.get_cmap("tab10")
    color_of = {g: cmap(i % 10) for i, g in enumerate(sorted(keep))}
    plt.rcParams["svg.fonttype"] = "none"  # keep legend labels as text, not glyph paths
    fig, ax = plt.subplots(figsize=(6, 5))
    labels_arr = np.asarray(labels)
    domains_arr = np.asarray(domains)
    for genre in keep:
        for domain, marker in DOMAIN_MARKERS.items():
            mask = (labels_arr == genre) & (domains_arr == domain)
            if mask.any():
                ax.scatter(
                    points[mask, 0],
                    points[mask, 1],
                    c=[color_of[genre]],
                    marker=marker,
                    s=18,
                    label=f"{genre} ({domain})",
                    alpha=0.8,
                )
    ax.legend(fontsize=7, loc="best")
    ax.set_xticks([])
    ax.set_yticks([])
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out_path
