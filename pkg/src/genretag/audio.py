"""Audio ingestion and the 96-band log-mel front end.

Every operation is a pure function of its inputs (plus an explicit rng for
random cropping), so feature extraction is safe to run concurrently across
files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly
from scipy.signal.windows import hann

from .errors import ClipTooShort, ShapeMismatch, UnreadableFile, UnsupportedFormat

TARGET_SAMPLE_RATE = 16000

_PCM_SCALE = {
    np.dtype(np.int16): 2.0**15,
    np.dtype(np.int32): 2.0**31,
}


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int
    source_path: str = ""

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters mapping power-spectrum bins to mel bands."""

    weights: np.ndarray  # (n_mels, n_bins)
    fmin: float
    fmax: float
    center_hz: np.ndarray  # (n_mels,) triangle apex frequencies

    @property
    def band_count(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-compressed mel energies, bands along axis 0."""

    values: np.ndarray  # (band_count, frame_count)
    hop_seconds: float

    @property
    def band_count(self) -> int:
        return self.values.shape[0]

    @property
    def frame_count(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureConfig:
    """Front-end parameters; defaults give 96x624 features for 10 s clips."""

    sample_rate: int = TARGET_SAMPLE_RATE
    window: int = 512
    hop: int = 256
    n_mels: int = 96
    fmin: float = 0.0
    fmax: float | None = None  # defaults to Nyquist
    crop_seconds: float = 10.0

    @property
    def fmax_hz(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * self.sample_rate))


def frame_count(n_samples: int, window: int = 512, hop: int = 256) -> int:
    """Number of full analysis frames; the trailing partial window is dropped."""
    if n_samples < window:
        raise ClipTooShort(f"need at least {window} samples, got {n_samples}")
    return 1 + (n_samples - window) // hop


def load_audio(path: str | Path, target_rate: int = TARGET_SAMPLE_RATE) -> AudioClip:
    """Decode a WAV file to a mono clip at the target sample rate.

    Multi-channel input is averaged to mono; integer PCM is scaled to
    [-1, 1]; rate conversion uses band-limited polyphase resampling.
    """
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    if path.stat().st_size == 0:
        raise UnreadableFile(f"empty file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic != b"RIFF":
        raise UnsupportedFormat(f"not a RIFF/WAV container: {path}")
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise UnreadableFile(f"failed to decode {path}: {exc}") from exc
    samples = np.asarray(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.dtype in _PCM_SCALE:
        samples = samples.astype(np.float64) / _PCM_SCALE[samples.dtype]
    elif samples.dtype == np.uint8:
        samples = (samples.astype(np.float64) - 128.0) / 128.0
    else:
        samples = samples.astype(np.float64)
    if rate != target_rate:
        g = math.gcd(target_rate, rate)
        samples = resample_poly(samples, target_rate // g, rate // g)
    samples = np.clip(samples, -1.0, 1.0).astype(np.float32)
    return AudioClip(samples=samples, sample_rate=target_rate, source_path=str(path))


def probe_duration(path: str | Path) -> float:
    """Duration in seconds from the WAV header, without decoding samples."""
    import wave

    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            frames = fh.getnframes()
            rate = fh.getframerate()
    except Exception:
        # Fall back to a full decode for headers the wave module rejects.
        clip = load_audio(path)
        return clip.duration_s
    if rate <= 0:
        raise UnreadableFile(f"invalid sample rate in {path}")
    return frames / rate


def crop(clip: AudioClip, mode: str, duration_s: float = 10.0, rng: np.random.Generator | None = None) -> AudioClip:
    """Take a contiguous excerpt: uniform random start or the central window."""
    n = int(round(duration_s * clip.sample_rate))
    if len(clip.samples) < n:
        raise ClipTooShort(
            f"clip {clip.source_path or '<memory>'} has {len(clip.samples)} samples, need {n}"
        )
    max_start = len(clip.samples) - n
    if mode == "center":
        start = max_start // 2
    elif mode == "random":
        if rng is None:
            raise ValueError("random crop requires an rng")
        start = int(rng.integers(0, max_start + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return AudioClip(
        samples=clip.samples[start : start + n],
        sample_rate=clip.sample_rate,
        source_path=clip.source_path,
    )


def stft_power(clip: AudioClip, window: int = 512, hop: int = 256) -> np.ndarray:
    """Hann-windowed power spectrogram, shape (frames, window // 2 + 1).

    No padding: T = 1 + floor((len - window) / hop).
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    n_frames = frame_count(len(x), window, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n_frames]
    win = hann(window, sym=False)
    spectrum = np.fft.rfft(frames * win, axis=1)
    return np.abs(spectrum) ** 2


def _hz_to_mel(f: np.ndarray) -> np.ndarray:
    """Slaney-style mel: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    linear = f / f_sp
    logpart = min_log_hz / f_sp + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep
    return np.where(f >= min_log_hz, logpart, linear)


def _mel_to_hz(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_mel = 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    linear = m * f_sp
    logpart = 1000.0 * np.exp(logstep * (np.maximum(m, min_log_mel) - min_log_mel))
    return np.where(m >= min_log_mel, logpart, linear)


def mel_filterbank(
    n_mels: int = 96,
    window: int = 512,
    sample_rate: int = TARGET_SAMPLE_RATE,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> MelFilterbank:
    """Build triangular mel filters over the rfft bins of the given window."""
    fmax = sample_rate / 2 if fmax is None else fmax
    n_bins = window // 2 + 1
    mel_edges = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_edges = _mel_to_hz(mel_edges)
    bin_hz = np.arange(n_bins) * sample_rate / window
    weights = np.zeros((n_mels, n_bins))
    for b in range(n_mels):
        lo, mid, hi = hz_edges[b], hz_edges[b + 1], hz_edges[b + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        weights[b] = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(
        weights=weights.astype(np.float32),
        fmin=float(fmin),
        fmax=float(fmax),
        center_hz=hz_edges[1:-1].copy(),
    )


def mel_spectrogram(
    clip: AudioClip,
    fb: MelFilterbank,
    window: int = 512,
    hop: int = 256,
) -> MelSpectrogram:
    """ln(1 + mel energy) per frame, transposed to (bands, frames)."""
    power = stft_power(clip, window=window, hop=hop)
    mel = fb.weights.astype(np.float64) @ power.T
    values = np.log1p(mel).astype(np.float32)
    return MelSpectrogram(values=values, hop_seconds=hop / clip.sample_rate)


class FeaturePipeline:
    """File-to-features path used by training, evaluation, and the cache.

    Holds the filterbank and an optional in-memory waveform cache so a clip
    is decoded and resampled once per process, while crops stay sample-exact.
    """

    def __init__(self, config: FeatureConfig | None = None, cache_waveforms: bool = True):
        self.config = config or FeatureConfig()
        self.filterbank = mel_filterbank(
            n_mels=self.config.n_mels,
            window=self.config.window,
            sample_rate=self.config.sample_rate,
            fmin=self.config.fmin,
            fmax=self.config.fmax_hz,
        )
        self._waveforms: dict[str, AudioClip] | None = {} if cache_waveforms else None

    def load(self, path: str | Path) -> AudioClip:
        key = str(path)
        if self._waveforms is not None and key in self._waveforms:
            return self._waveforms[key]
        clip = load_audio(path, target_rate=self.config.sample_rate)
        if self._waveforms is not None:
            self._waveforms[key] = clip
        return clip

    def clip_features(self, clip: AudioClip, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
        cropped = crop(clip, mode, duration_s=self.config.crop_seconds, rng=rng)
        mel = mel_spectrogram(cropped, self.filterbank, window=self.config.window, hop=self.config.hop)
        return mel.values

    def features(self, record, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
        """Feature-source entry point; `record` is a path or has a .path."""
        path = getattr(record, "path", record)
        return self.clip_features(self.load(path), mode, rng)

    def full_features(self, path: str | Path) -> np.ndarray:
        """Uncropped features for the whole clip (used by the disk cache)."""
        clip = self.load(path)
        mel = mel_spectrogram(clip, self.filterbank, window=self.config.window, hop=self.config.hop)
        return mel.values


def write_feature_cache(cache_dir: str | Path, path: str | Path, values: np.ndarray, label: str) -> Path:
    """Persist one clip's features: raw little-endian float32 plus a JSON sidecar."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(path).stem
    blob = cache_dir / f"{stem}.f32"
    blob.write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())
    sidecar = {"path": str(path), "T": int(values.shape[1]), "label": label}
    (cache_dir / f"{stem}.json").write_text(json.dumps(sidecar))
    return blob


def read_feature_cache(cache_dir: str | Path, stem: str) -> tuple[np.ndarray, dict]:
    """Load one cached record back as (values, sidecar)."""
    cache_dir = Path(cache_dir)
    sidecar_path = cache_dir / f"{stem}.json"
    blob_path = cache_dir / f"{stem}.f32"
    if not sidecar_path.is_file() or not blob_path.is_file():
        raise UnreadableFile(f"missing cache record {stem} in {cache_dir}")
    sidecar = json.loads(sidecar_path.read_text())
    raw = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    n_frames = int(sidecar["T"])
    if n_frames <= 0 or raw.size % n_frames != 0:
        raise ShapeMismatch(f"cache blob for {stem} does not factor into T={n_frames} frames")
    return raw.reshape(-1, n_frames), sidecar
