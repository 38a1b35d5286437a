"""Manifests, fold protocol, batch assembly, and domain-adaptation pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from . import audio
from .errors import ClipTooShort, EmptyManifest, MissingClassInPool, MissingFile, UnknownGenre

GENRES = (
    "blues",
    "classical",
    "country",
    "disco",
    "hiphop",
    "jazz",
    "metal",
    "pop",
    "reggae",
    "rock",
)

DOMAINS = ("real", "synthetic")

MANIFEST_HEADER = ("path", "genre", "domain", "duration_s")


@dataclass(frozen=True)
class TrackRecord:
    path: str
    genre: str
    domain: str = "real"
    duration_s: float = 0.0

    def __post_init__(self):
        if self.genre not in GENRES:
            raise UnknownGenre(f"{self.genre!r} is not one of the {len(GENRES)} genres")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train: tuple[TrackRecord, ...]
    val: tuple[TrackRecord, ...]

    def __post_init__(self):
        overlap = {r.path for r in self.train} & {r.path for r in self.val}
        if overlap:
            raise ValueError(f"train/val overlap in fold {self.fold_id}: {sorted(overlap)[:3]}")


class DaPairBatch(NamedTuple):
    """Per synthetic item: one same-label and one different-label real record."""

    synth: tuple[TrackRecord, ...]
    pos_real: tuple[TrackRecord, ...]
    neg_real: tuple[TrackRecord, ...]


class Batch(NamedTuple):
    features: np.ndarray  # (B, n_mels, T)
    labels: np.ndarray  # (B,) int64 indices into GENRES
    domains: tuple[str, ...]
    records: tuple[TrackRecord, ...]


def genre_index(genre: str) -> int:
    try:
        return GENRES.index(genre)
    except ValueError:
        raise UnknownGenre(f"{genre!r} is not one of the {len(GENRES)} genres") from None


def write_manifest(path: str | Path, records: Sequence[TrackRecord]) -> None:
    """Persist records as CSV with the path,genre,domain,duration_s header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.path, r.genre, r.domain, repr(float(r.duration_s))])


def read_manifest(path: str | Path) -> list[TrackRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(
                TrackRecord(
                    path=row["path"],
                    genre=row["genre"],
                    domain=row.get("domain", "real"),
                    duration_s=float(row.get("duration_s", 0.0)),
                )
            )
    return records


def genre_from_filename(name: str) -> str:
    """GTZAN convention: genre is the filename prefix, e.g. blues.00042.wav."""
    stem = Path(name).name
    genre = stem.split(".", 1)[0]
    if genre not in GENRES:
        raise UnknownGenre(f"cannot derive a known genre from {name!r}")
    return genre


def _resolve_track(root: Path, entry: str) -> Path:
    genre = genre_from_filename(entry)
    name = Path(entry).name
    for candidate in (root / entry, root / name, root / genre / name, root / "genres_original" / genre / name):
        if candidate.is_file():
            return candidate
    raise MissingFile(f"track {entry!r} listed in fold file but absent under {root}")


def load_gtzan_manifest(
    root: str | Path,
    fold_files: Sequence[str | Path],
    min_duration_s: float = 10.0,
) -> list[FoldSplit]:
    """Build the 3-fold protocol from published fold files.

    Each fold file lists that fold's validation tracks, one filename per
    line; the fold's training set is everything listed in the other folds.
    Labels come from the filename prefix.
    """
    root = Path(root)
    per_fold: list[list[TrackRecord]] = []
    seen: dict[str, int] = {}
    for fold_id, fold_file in enumerate(fold_files):
        fold_file = Path(fold_file)
        if not fold_file.is_file():
            raise MissingFile(f"fold file not found: {fold_file}")
        records = []
        for line in fold_file.read_text().splitlines():
            entry = line.strip()
            if not entry or entry.startswith("#"):
                continue
            track_path = _resolve_track(root, entry)
            key = track_path.name
            if key in seen:
                raise ValueError(f"track {key} appears in folds {seen[key]} and {fold_id}")
            seen[key] = fold_id
            duration = audio.probe_duration(track_path)
            if duration < min_duration_s:
                raise ClipTooShort(
                    f"{track_path} is {duration:.2f}s, below the {min_duration_s}s minimum"
                )
            records.append(
                TrackRecord(
                    path=str(track_path),
                    genre=genre_from_filename(entry),
                    domain="real",
                    duration_s=duration,
                )
            )
        per_fold.append(records)
    splits = []
    for fold_id in range(len(per_fold)):
        val = tuple(per_fold[fold_id])
        train = tuple(r for other_id, fold in enumerate(per_fold) if other_id != fold_id for r in fold)
        splits.append(FoldSplit(fold_id=fold_id, train=train, val=val))
    return splits


def random_splits(
    records: Sequence[TrackRecord],
    k: int = 3,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> list[FoldSplit]:
    """k independent stratified shuffles into train/val at val_fraction."""
    if not 0.0 < val_fraction < 1.0:
        raise EmptyManifest(f"val_fraction must lie strictly in (0, 1), got {val_fraction}")
    if not records:
        raise EmptyManifest("no records to split")
    by_genre: dict[str, list[TrackRecord]] = {}
    for r in records:
        by_genre.setdefault(r.genre, []).append(r)
    rng = np.random.default_rng(seed)
    splits = []
    for fold_id in range(k):
        train: list[TrackRecord] = []
        val: list[TrackRecord] = []
        for genre in sorted(by_genre):
            group = by_genre[genre]
            order = rng.permutation(len(group))
            n_val = int(round(len(group) * val_fraction))
            for j, idx in enumerate(order):
                (val if j < n_val else train).append(group[idx])
        splits.append(FoldSplit(fold_id=fold_id, train=tuple(train), val=tuple(val)))
    return splits


FeatureFn = Callable[[TrackRecord, str, "np.random.Generator | None"], np.ndarray]


def assemble_batches(
    records: Sequence[TrackRecord],
    batch_size: int,
    mode: str,
    features: FeatureFn,
    rng: np.random.Generator | None = None,
) -> Iterator[Batch]:
    """One epoch of batches; train mode shuffles and random-crops, val mode
    keeps manifest order and center-crops. The final short batch is kept."""
    if mode not in ("train", "val"):
        raise ValueError(f"mode must be 'train' or 'val', got {mode!r}")
    if mode == "train":
        if rng is None:
            raise ValueError("train mode requires an rng")
        order = rng.permutation(len(records))
    else:
        order = np.arange(len(records))
    crop_mode = "random" if mode == "train" else "center"
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        feats = np.stack([features(r, crop_mode, rng) for r in chunk])
        labels = np.array([genre_index(r.genre) for r in chunk], dtype=np.int64)
        yield Batch(
            features=feats,
            labels=labels,
            domains=tuple(r.domain for r in chunk),
            records=tuple(chunk),
        )


def coerce_records(
    X: Sequence,
    y: Sequence[str] | None = None,
    domain: Sequence[str] | str | None = None,
) -> list[TrackRecord]:
    """Accept TrackRecords directly, or paths plus genre labels (and an
    optional per-item or scalar domain), and validate everything."""
    items = list(X)
    if not items:
        raise EmptyManifest("no input records")
    if all(isinstance(item, TrackRecord) for item in items):
        return items
    if y is None:
        raise ValueError("genre labels y are required when X is not TrackRecords")
    labels = list(y)
    if len(labels) != len(items):
        raise ValueError(f"X has {len(items)} items but y has {len(labels)} labels")
    if domain is None:
        domains = ["real"] * len(items)
    elif isinstance(domain, str):
        domains = [domain] * len(items)
    else:
        domains = list(domain)
        if len(domains) != len(items):
            raise ValueError(f"domain has {len(domains)} entries for {len(items)} items")
    return [
        TrackRecord(path=str(item), genre=str(label), domain=dom)
        for item, label, dom in zip(items, labels, domains)
    ]


def sample_da_pairs(
    synth_records: Sequence[TrackRecord],
    real_pool: Sequence[TrackRecord],
    rng: np.random.Generator,
) -> DaPairBatch:
    """For each synthetic item draw one uniform same-genre and one uniform
    different-genre record from the real training pool."""
    by_genre: dict[str, list[TrackRecord]] = {}
    for r in real_pool:
        by_genre.setdefault(r.genre, []).append(r)
    pos, neg = [], []
    for r in synth_records:
        same = by_genre.get(r.genre)
        if not same:
            raise MissingClassInPool(f"real pool has no {r.genre!r} items for a positive pair")
        other = [p for p in real_pool if p.genre != r.genre]
        if not other:
            raise MissingClassInPool(f"real pool has no genre other than {r.genre!r} for a negative pair")
        pos.append(same[int(rng.integers(0, len(same)))])
        neg.append(other[int(rng.integers(0, len(other)))])
    return DaPairBatch(synth=tuple(synth_records), pos_real=tuple(pos), neg_real=tuple(neg))
