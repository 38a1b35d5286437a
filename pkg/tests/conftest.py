"""Shared fixtures: tiny WAV factories, miniature datasets, toy features."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np
import pytest

from genretag.data import GENRES, TrackRecord


def write_wav(
    path: Path,
    samples: np.ndarray,
    rate: int = 16000,
    channels: int = 1,
    sampwidth: int = 2,
) -> Path:
    """Write float samples in [-1, 1] as PCM WAV."""
    samples = np.asarray(samples, dtype=np.float64)
    if channels > 1 and samples.ndim == 1:
        samples = np.tile(samples[:, None], (1, channels))
    flat = samples.reshape(-1)
    if sampwidth == 2:
        pcm = (np.clip(flat, -1, 1) * 32767.0).astype("<i2").tobytes()
    elif sampwidth == 3:
        ints = (np.clip(flat, -1, 1) * (2**23 - 1)).astype("<i4")
        raw = ints.astype("<i4").tobytes()
        pcm = b"".join(raw[i : i + 3] for i in range(0, len(raw), 4))
    else:
        raise ValueError(f"unsupported sampwidth {sampwidth}")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(sampwidth)
        fh.setframerate(rate)
        fh.writeframes(pcm)
    return path


def genre_texture(genre: str, seconds: float, rate: int = 16000, seed: int = 0, synthetic: bool = False) -> np.ndarray:
    """Separable per-genre texture: genre-indexed base tone plus noise; the
    synthetic variant shifts the harmonic mix to mimic a domain gap."""
    idx = GENRES.index(genre)
    rng = np.random.default_rng([seed, idx, int(synthetic)])
    n = int(round(seconds * rate))
    t = np.arange(n) / rate
    base = 110.0 * (2.0 ** (idx / 3.0))
    detune = float(rng.uniform(0.98, 1.02))
    if synthetic:
        signal = (
            0.35 * np.sin(2 * np.pi * base * detune * t)
            + 0.35 * np.sin(2 * np.pi * 3.0 * base * detune * t)
            + 0.10 * rng.standard_normal(n)
        )
    else:
        signal = (
            0.5 * np.sin(2 * np.pi * base * detune * t)
            + 0.25 * np.sin(2 * np.pi * 2.0 * base * detune * t)
            + 0.08 * rng.standard_normal(n)
        )
    return np.clip(signal, -1.0, 1.0)


def build_track_set(
    root: Path,
    genres=GENRES,
    per_genre: int = 2,
    seconds: float = 10.5,
    rate: int = 16000,
    domain: str = "real",
    seed: int = 0,
) -> list[TrackRecord]:
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for genre in genres:
        for i in range(per_genre):
            path = root / f"{genre}.{i:05d}.wav"
            write_wav(path, genre_texture(genre, seconds, rate, seed=seed + i, synthetic=domain == "synthetic"), rate)
            records.append(TrackRecord(path=str(path), genre=genre, domain=domain, duration_s=seconds))
    return records


@pytest.fixture(scope="session")
def mini_audio(tmp_path_factory):
    """Session-wide miniature collection: 3 real and 2 synthetic clips per
    genre, 10.5 s at 16 kHz, separable textures."""
    root = tmp_path_factory.mktemp("mini_audio")
    real = build_track_set(root / "real", per_genre=3, seconds=10.5, domain="real", seed=0)
    synth = build_track_set(root / "synth", per_genre=2, seconds=10.5, domain="synthetic", seed=100)
    return {"root": root, "real": real, "synth": synth}


class ToyFeatureSource:
    """Deterministic in-memory features: per-genre mean pattern, optional
    domain offset, per-record fixed detail, rng jitter in train mode."""

    def __init__(
        self,
        n_mels: int = 24,
        frames: int = 32,
        noise: float = 0.05,
        domain_offset: float = 0.0,
        seed: int = 0,
    ):
        self.n_mels = n_mels
        self.frames = frames
        self.noise = noise
        self.domain_offset = domain_offset
        pattern_rng = np.random.default_rng(seed)
        self._patterns = {
            genre: pattern_rng.standard_normal((n_mels, frames)).astype(np.float32)
            for genre in GENRES
        }
        self._offset = pattern_rng.standard_normal((n_mels, frames)).astype(np.float32)

    def features(self, record, mode: str, rng=None) -> np.ndarray:
        base = self._patterns[record.genre].copy()
        if record.domain == "synthetic":
            base += self.domain_offset * self._offset
        detail_rng = np.random.default_rng(abs(hash(record.path)) % (2**32))
        base += 0.1 * detail_rng.standard_normal(base.shape).astype(np.float32)
        if mode == "random":
            if rng is None:
                raise ValueError("train mode requires an rng")
            base += self.noise * rng.standard_normal(base.shape).astype(np.float32)
        return base.astype(np.float32)


@pytest.fixture
def toy_source():
    return ToyFeatureSource()
