"""Per-frame captions from a chat-completions vision endpoint, with an append-only cache."""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx

logger = logging.getLogger(__name__)

SPATIAL_FREE_PROMPT = (
    "Faithfully describe the content of the above image, avoid mentioning specific objects "
    "and try your best to provide a scene-level, holistic summary. No mention of any spatial information."
)
DEFAULT_PROMPT = "Describe this image in detail."
API_KEY_ENV = "STRUCTVIS_API_KEY"

MAX_ATTEMPTS = 5
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0


class Preset(str, Enum):
    STANDARD = "standard"
    SPATIAL_FREE = "spatial_free"


class CaptionError(RuntimeError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{message} (video_id={key[0]!r}, frame={key[1]})" if key else message)


class RetriesExhausted(CaptionError):
    pass


class MalformedResponse(CaptionError):
    pass


class CaptionBatchError(CaptionError):
    """Some frames failed; the others were fetched and cached."""

    def __init__(self, failures: dict, captions: list):
        self.failures = failures  # position -> CaptionError
        self.captions = captions  # None where failed
        super().__init__(f"{len(failures)} of {len(captions)} frames failed: {next(iter(failures.values()))}")


@dataclass(frozen=True)
class CaptionRequest:
    video_id: str
    frame: int
    image: bytes
    preset: Preset = Preset.STANDARD
    model_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "preset", Preset(self.preset))
        if not self.image:
            raise ValueError("image bytes must be non-empty")
        if self.frame < 0:
            raise ValueError(f"frame must be >= 0, got {self.frame}")

    @property
    def key(self):
        return (self.video_id, self.frame, self.preset.value, self.model_name)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "gpt-4o"
    timeout: float = 60.0
    default_prompt: str = DEFAULT_PROMPT
    api_key_env: str = API_KEY_ENV


def build_prompt(preset, default_prompt: str = DEFAULT_PROMPT) -> str:
    preset = Preset(preset)
    if preset is Preset.SPATIAL_FREE:
        return SPATIAL_FREE_PROMPT
    return default_prompt


def _media_type(image: bytes) -> str:
    if image.startswith(b"\x89PNG"):
        return "image/png"
    if image.startswith(b"\xff\xd8"):
        return "image/jpeg"
    if image[:2] in (b"P6", b"P3"):
        return "image/x-portable-pixmap"
    return "application/octet-stream"


def request_payload(req: CaptionRequest, cfg: EndpointConfig) -> dict:
    data_uri = f"data:{_media_type(req.image)};base64," + base64.b64encode(req.image).decode("ascii")
    return {
        "model": req.model_name or cfg.model,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": data_uri}},
                    {"type": "text", "text": build_prompt(req.preset, cfg.default_prompt)},
                ],
            }
        ],
    }


def _transient(exc: Exception) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    if isinstance(exc, httpx.HTTPStatusError):
        code = exc.response.status_code
        return code == 429 or code >= 500
    return False


def request_caption(
    req: CaptionRequest,
    cfg: EndpointConfig,
    client: Optional[httpx.Client] = None,
    sleep: Optional[Callable[[float], None]] = None,
) -> str:
    """One chat-completion call, retrying transient failures with exponential backoff."""
    sleep = sleep or time.sleep
    own = client is None
    if own:
        client = httpx.Client(timeout=cfg.timeout)
    headers = {}
    token = os.environ.get(cfg.api_key_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    payload = request_payload(req, cfg)
    try:
        for attempt in range(MAX_ATTEMPTS):
            try:
                resp = client.post(url, json=payload, headers=headers, timeout=cfg.timeout)
                resp.raise_for_status()
            except httpx.HTTPError as exc:
                if not _transient(exc):
                    raise CaptionError(f"request failed: {exc}", req.key) from exc
                if attempt == MAX_ATTEMPTS - 1:
                    raise RetriesExhausted(f"gave up after {MAX_ATTEMPTS} attempts: {exc}", req.key) from exc
                delay = BACKOFF_BASE * BACKOFF_FACTOR**attempt
                logger.warning("caption request %s failed (%s), retrying in %.0fs", req.key[:2], exc, delay)
                sleep(delay)
                continue
            try:
                body = resp.json()
            except ValueError as exc:
                raise MalformedResponse(f"response is not JSON: {exc}", req.key) from None
            try:
                content = body["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError):
                raise MalformedResponse(f"unexpected response shape: {str(body)[:200]}", req.key) from None
            if not isinstance(content, str):
                raise MalformedResponse("message content is not text", req.key)
            return content.strip()
    finally:
        if own:
            client.close()
    raise AssertionError("unreachable")


class CaptionCache:
    """Append-only caption store, optionally backed by a line-delimited log file."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._data = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for n, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        key = (rec["video_id"], int(rec["frame"]), rec["preset"], rec["model"])
                        caption = rec["caption"]
                    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                        raise ValueError(f"{self.path}:{n}: bad cache record ({exc})") from None
                    self._data.setdefault(key, caption)

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return tuple(key) in self._data

    def get(self, key, default=None):
        return self._data.get(tuple(key), default)

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._data)

    def items(self):
        return self.snapshot().items()

    def put(self, key, caption: str):
        key = tuple(key)
        with self._lock:
            if key in self._data:
                raise KeyError(f"cache key {key} already written")
            if self.path is not None:
                rec = {"video_id": key[0], "frame": key[1], "preset": key[2], "model": key[3], "caption": caption}
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            self._data[key] = caption


def caption_video(
    frames: Sequence[CaptionRequest],
    cache: CaptionCache,
    max_in_flight: int,
    cfg: EndpointConfig = EndpointConfig(),
    client: Optional[httpx.Client] = None,
    sleep: Optional[Callable[[float], None]] = None,
) -> list:
    """Captions in input order. Cache hits never reach the network.

    Raises :class:`CaptionBatchError` after all frames were attempted if any failed.
    """
    if max_in_flight < 1:
        raise ValueError(f"max_in_flight must be >= 1, got {max_in_flight}")
    seen = cache.snapshot()
    misses = {}
    for req in frames:
        if req.key not in seen and req.key not in misses:
            misses[req.key] = req

    results, errors = {}, {}
    if misses:
        own = client is None
        if own:
            client = httpx.Client(timeout=cfg.timeout)

        def fetch(req):
            caption = request_caption(req, cfg, client=client, sleep=sleep)
            cache.put(req.key, caption)
            return caption

        try:
            with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
                futures = {key: pool.submit(fetch, req) for key, req in misses.items()}
                for key, fut in futures.items():
                    try:
                        results[key] = fut.result()
                    except CaptionError as exc:
                        errors[key] = exc
        finally:
            if own:
                client.close()

    captions, failures = [], {}
    for i, req in enumerate(frames):
        if req.key in errors:
            failures[i] = errors[req.key]
            captions.append(None)
        else:
            captions.append(seen[req.key] if req.key in seen else results[req.key])
    if failures:
        raise CaptionBatchError(failures, captions)
    return captions
