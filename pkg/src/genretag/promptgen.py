"""Synthetic-dataset prompt pipeline.

Genre-conditioned track descriptions come from a chat-completion service;
the music-generation prompt prepends the genre token twice. Audio synthesis
itself sits behind an adapter boundary (subprocess or stub); embedding a
generation model in this package is out of scope.
"""

from __future__ import annotations

import json
import logging
import os
import random
import subprocess
import threading
import time
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .data import GENRES, TrackRecord, write_manifest
from .errors import (
    AdapterUnavailable,
    ClientError,
    EmptyDescription,
    GenerationFailed,
    QuotaExceeded,
    UnknownGenre,
)

logger = logging.getLogger("genretag.promptgen")

SYSTEM_PROMPT = "You are a music expert writing short textual descriptions for songs."

USER_PROMPT_TEMPLATE = (
    "Write a description for an instrumental {genre} track. "
    "The description is a single sentence. "
    "It mentions that it is an instrumental {genre} track "
    "and gives details on tempo and instruments."
)

CORPUS_TEMPERATURE = 0.5
DEFAULT_MODEL = "gpt-3.5-turbo"

API_KEY_ENV = "LLM_API_KEY"
BASE_URL_ENV = "LLM_API_BASE_URL"


@dataclass(frozen=True)
class LlmRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = CORPUS_TEMPERATURE
    model_name: str = DEFAULT_MODEL


@dataclass(frozen=True)
class PromptRecord:
    record_id: str
    genre: str
    llm_description: str
    musicgen_prompt: str
    created_at: str

    def __post_init__(self):
        expected = f"{self.genre} {self.genre} {self.llm_description}"
        if self.musicgen_prompt != expected:
            raise ValueError(
                "musicgen_prompt must be the genre token twice plus the description"
            )


def build_llm_request(genre: str, model_name: str = DEFAULT_MODEL) -> LlmRequest:
    """Fill the description-request template for one genre."""
    if genre not in GENRES:
        raise UnknownGenre(f"{genre!r} is not one of the {len(GENRES)} genres")
    return LlmRequest(
        system_prompt=SYSTEM_PROMPT,
        user_prompt=USER_PROMPT_TEMPLATE.format(genre=genre),
        temperature=CORPUS_TEMPERATURE,
        model_name=model_name,
    )


def build_musicgen_prompt(genre: str, llm_description: str) -> str:
    """Genre token twice, single-space separated, then the description verbatim."""
    if genre not in GENRES:
        raise UnknownGenre(f"{genre!r} is not one of the {len(GENRES)} genres")
    if not llm_description:
        raise EmptyDescription("llm_description must be non-empty")
    return f"{genre} {genre} {llm_description}"


class ChatCompletionClient(Protocol):
    def complete(self, request: LlmRequest) -> str: ...


class HttpChatClient:
    """OpenAI-style chat-completion endpoint over HTTP.

    Credentials come from LLM_API_KEY and LLM_API_BASE_URL unless given
    explicitly. Raises QuotaExceeded on exhausted-quota responses; any other
    failure propagates for the retry loop to classify as transient.
    """

    def __init__(
        self,
        model_name: str = DEFAULT_MODEL,
        api_key: str | None = None,
        base_url: str | None = None,
        session: requests.Session | None = None,
        timeout: float = 60.0,
    ):
        self.model_name = model_name
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        base = base_url if base_url is not None else os.environ.get(BASE_URL_ENV, "")
        if not base:
            raise ClientError(f"no endpoint configured; set {BASE_URL_ENV}")
        self.base_url = base.rstrip("/")
        self.session = session or requests.Session()
        self.timeout = timeout

    def complete(self, request: LlmRequest) -> str:
        payload = {
            "model": request.model_name,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        response = self.session.post(
            f"{self.base_url}/chat/completions", json=payload, headers=headers, timeout=self.timeout
        )
        if response.status_code in (402, 429) and "insufficient_quota" in response.text:
            raise QuotaExceeded(f"quota exhausted: {response.text[:200]}")
        response.raise_for_status()
        return response.json()["choices"][0]["message"]["content"]


class StubChatClient:
    """Deterministic offline stand-in producing varied canned descriptions."""

    _TEMPOS = ("slow", "laid-back", "mid-tempo", "upbeat", "driving", "fast")
    _INSTRUMENTS = (
        "piano and upright bass",
        "electric guitar and drums",
        "strings and woodwinds",
        "synthesizer and drum machine",
        "saxophone and rhythm section",
        "acoustic guitar and percussion",
    )

    def __init__(self, seed: int = 0):
        self._rng = random.Random(seed)

    def complete(self, request: LlmRequest) -> str:
        genre = request.user_prompt.split("instrumental ", 1)[1].split(" track", 1)[0]
        tempo = self._rng.choice(self._TEMPOS)
        instruments = self._rng.choice(self._INSTRUMENTS)
        return (
            f"An instrumental {genre} track at a {tempo} tempo featuring {instruments}."
        )


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    backoff_base_s: float = 0.5
    backoff_cap_s: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff_base_s * (2.0**attempt), self.backoff_cap_s)


@dataclass
class CorpusStats:
    written: int = 0
    skipped_existing: int = 0
    retries: int = 0


def _existing_ids(path: Path) -> set[str]:
    if not path.is_file():
        return set()
    ids = set()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                ids.add(json.loads(line)["id"])
    return ids


def record_to_json(record: PromptRecord) -> str:
    return json.dumps(
        {
            "id": record.record_id,
            "genre": record.genre,
            "llm_description": record.llm_description,
            "musicgen_prompt": record.musicgen_prompt,
            "created_at": record.created_at,
        }
    )


def read_corpus(path: str | Path) -> list[PromptRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                PromptRecord(
                    record_id=obj["id"],
                    genre=obj["genre"],
                    llm_description=obj["llm_description"],
                    musicgen_prompt=obj["musicgen_prompt"],
                    created_at=obj["created_at"],
                )
            )
    return records


def generate_prompt_corpus(
    genres: Sequence[str],
    n_per_genre: int,
    client: ChatCompletionClient,
    out_path: str | Path,
    model_name: str = DEFAULT_MODEL,
    retry: RetryPolicy = RetryPolicy(),
    sleep=time.sleep,
    max_in_flight: int = 1,
) -> CorpusStats:
    """Request n_per_genre descriptions per genre and append them as JSON
    Lines, one PromptRecord per line.

    Record ids are deterministic (genre-index), so an interrupted run can be
    resumed without duplicates. Transient client failures are retried with
    exponential backoff; QuotaExceeded aborts immediately and any other
    exhausted record raises ClientError, in both cases leaving the partial
    corpus on disk.
    """
    if n_per_genre < 1:
        raise ValueError(f"n_per_genre must be >= 1, got {n_per_genre}")
    for genre in genres:
        if genre not in GENRES:
            raise UnknownGenre(f"{genre!r} is not one of the {len(GENRES)} genres")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    done = _existing_ids(out_path)
    stats = CorpusStats(skipped_existing=0)
    todo = []
    for genre in genres:
        for i in range(n_per_genre):
            record_id = f"{genre}-{i:05d}"
            if record_id in done:
                stats.skipped_existing += 1
            else:
                todo.append((record_id, genre))

    lock = threading.Lock()

    def produce(record_id: str, genre: str) -> PromptRecord:
        request = build_llm_request(genre, model_name=model_name)
        last_error: Exception | None = None
        for attempt in range(retry.max_attempts):
            try:
                description = client.complete(request)
                break
            except QuotaExceeded:
                raise
            except Exception as exc:
                last_error = exc
                with lock:
                    stats.retries += 1
                logger.warning("retry %d for %s after %s", attempt + 1, record_id, exc)
                if attempt + 1 < retry.max_attempts:
                    sleep(retry.delay(attempt))
        else:
            raise ClientError(
                f"{record_id}: exhausted {retry.max_attempts} attempts ({last_error})"
            ) from last_error
        return PromptRecord(
            record_id=record_id,
            genre=genre,
            llm_description=description,
            musicgen_prompt=build_musicgen_prompt(genre, description),
            created_at=datetime.now(timezone.utc).isoformat(),
        )

    with open(out_path, "a") as fh:

        def write(record: PromptRecord) -> None:
            fh.write(record_to_json(record) + "\n")
            fh.flush()
            stats.written += 1

        if max_in_flight <= 1:
            for record_id, genre in todo:
                write(produce(record_id, genre))
        else:
            with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
                futures = [pool.submit(produce, rid, g) for rid, g in todo]
                try:
                    for future in futures:
                        write(future.result())
                except BaseException:
                    for future in futures:
                        future.cancel()
                    raise
    return stats


class GenerationAdapter(Protocol):
    def generate(self, prompt: str, duration_s: float) -> Path: ...


class SubprocessAdapter:
    """External generator behind the documented process contract: the prompt
    and duration are the final two arguments, the output file path comes back
    on stdout, and a nonzero exit means failure."""

    def __init__(self, command: Sequence[str], timeout_s: float = 600.0):
        if not command:
            raise AdapterUnavailable("empty adapter command")
        self.command = list(command)
        self.timeout_s = timeout_s

    def generate(self, prompt: str, duration_s: float) -> Path:
        argv = [*self.command, prompt, str(duration_s)]
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=self.timeout_s
            )
        except FileNotFoundError as exc:
            raise AdapterUnavailable(f"adapter command not found: {self.command[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise GenerationFailed(
                f"adapter timed out after {self.timeout_s}s", prompt=prompt
            ) from exc
        if proc.returncode != 0:
            raise GenerationFailed(
                f"adapter exited {proc.returncode}: {proc.stderr.strip()[:200]}", prompt=prompt
            )
        out = proc.stdout.strip().splitlines()
        if not out:
            raise GenerationFailed("adapter produced no output path", prompt=prompt)
        return Path(out[-1])


class StubAdapter:
    """Offline generator writing genre-keyed sine-plus-noise textures.

    Output is 32 kHz 16-bit mono WAV of the requested duration; the texture
    (base frequency, harmonic mix, noise floor) is a deterministic function
    of the genre token leading the prompt, so a miniature synthetic set is
    reproducible and classes stay separable.
    """

    def __init__(self, out_dir: str | Path, sample_rate: int = 32000, seed: int = 0):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.sample_rate = sample_rate
        self.seed = seed
        self._counter = 0

    def generate(self, prompt: str, duration_s: float) -> Path:
        genre = prompt.split(" ", 1)[0]
        genre_idx = GENRES.index(genre) if genre in GENRES else abs(hash(genre)) % len(GENRES)
        rng = np.random.default_rng([self.seed, genre_idx, self._counter])
        n = int(round(duration_s * self.sample_rate))
        t = np.arange(n) / self.sample_rate
        base = 110.0 * (2.0 ** (genre_idx / 3.0))
        detune = float(rng.uniform(0.98, 1.02))
        signal = (
            0.5 * np.sin(2 * np.pi * base * detune * t)
            + 0.25 * np.sin(2 * np.pi * 2 * base * detune * t)
            + 0.08 * rng.standard_normal(n)
        )
        signal = np.clip(signal, -1.0, 1.0)
        path = self.out_dir / f"{genre}-{self._counter:05d}.wav"
        pcm = (signal * 32767.0).astype("<i2")
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(self.sample_rate)
            fh.writeframes(pcm.tobytes())
        self._counter += 1
        return path


def request_audio(
    record: PromptRecord,
    adapter: GenerationAdapter,
    duration_s: float = 30.0,
) -> TrackRecord:
    """Generate one excerpt for a prompt record and return its manifest row."""
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    path = adapter.generate(record.musicgen_prompt, duration_s)
    return TrackRecord(
        path=str(path), genre=record.genre, domain="synthetic", duration_s=duration_s
    )


def build_synthetic_dataset(
    corpus: Sequence[PromptRecord],
    adapter: GenerationAdapter,
    manifest_path: str | Path,
    duration_s: float = 30.0,
) -> list[TrackRecord]:
    """Generate audio for every corpus record and persist the manifest CSV."""
    records = [request_audio(r, adapter, duration_s=duration_s) for r in corpus]
    write_manifest(manifest_path, records)
    return records
