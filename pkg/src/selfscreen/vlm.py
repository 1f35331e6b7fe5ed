"""Vision-language model gateway: prompts, chat-completions client, mock, parsing.

Providers expose ``model_name`` and ``complete(prompt, image, media_type)``.
``ChatCompletionsProvider`` speaks the OpenAI-style chat-completions wire
format with the image inlined as a base64 data URL; ``MockProvider`` answers
from a fixture keyed by the SHA-256 of the image bytes, so the whole pipeline
can run offline.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import httpx

from selfscreen.data import Dataset, Label
from selfscreen.errors import (
    AuthenticationError,
    DuplicateIdError,
    ProtocolError,
    ProviderHTTPError,
    TransportError,
    UnparseableVerdictError,
    ValidationError,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "SELFSCREEN_API_KEY"
API_BASE_ENV = "SELFSCREEN_API_BASE"

DESCRIPTION_PROMPT = (
    "Describe in detail the emotional state of the person in the photo based on "
    "her/his facial expression. Provide straight sentences in your answer."
)
# Note the plural "answers": kept exactly as it was used for zero-shot screening.
ZEROSHOT_PROMPT = (
    "Describe in detail the emotional state of the person in the photo based on "
    "her/his facial expression. Provide straight sentences in your answers. Based on "
    "your description, classify the emotional state as either 'normal', 'anxiety', or "
    "'depression'. The output must be exactly one of these words. Follow the template: "
    "Output: {result}"
)

MAX_ATTEMPTS = 5
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class PromptKind(str, enum.Enum):
    DESCRIPTION = "description"
    ZEROSHOT = "zeroshot"


@dataclass(frozen=True)
class PromptTemplate:
    kind: PromptKind
    text: str

    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def build_prompt(kind: PromptKind | str) -> PromptTemplate:
    kind = PromptKind(kind)
    text = DESCRIPTION_PROMPT if kind is PromptKind.DESCRIPTION else ZEROSHOT_PROMPT
    return PromptTemplate(kind, text)


@dataclass(frozen=True)
class Description:
    sample_id: str
    text: str
    model_name: str

    def __post_init__(self):
        text = (self.text or "").strip()
        if not text:
            raise ProtocolError(f"empty description for sample {self.sample_id!r}")
        object.__setattr__(self, "text", text)

    def to_record(self) -> dict:
        return {"sample_id": self.sample_id, "model_name": self.model_name, "text": self.text}


class VerdictClass(str, enum.Enum):
    NORMAL = "normal"
    ANXIETY = "anxiety"
    DEPRESSION = "depression"

    @property
    def label(self) -> Label:
        return Label.NEGATIVE if self is VerdictClass.NORMAL else Label.POSITIVE


@dataclass(frozen=True)
class ZeroShotVerdict:
    raw_text: str
    parsed: VerdictClass
    sample_id: str | None = None

    @property
    def label(self) -> Label:
        return self.parsed.label

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "raw_text": self.raw_text,
            "parsed": self.parsed.value,
            "label": self.label.text,
        }


_MARKER = re.compile(r"output\s*:", re.IGNORECASE)
_STRIP_CHARS = " \t\r\n.,;:!?\"'`*_{}()[]<>"


def parse_zeroshot_output(raw: str) -> ZeroShotVerdict:
    """Read the class word after the *last* ``Output:`` marker.

    The text after the marker must be exactly one class word; case, whitespace,
    quotes, braces and trailing punctuation are tolerated. Anything else
    (extra words, negations, synonyms) raises ``UnparseableVerdictError``
    rather than being guessed.
    """
    if not raw or not raw.strip():
        raise UnparseableVerdictError(raw or "", "empty completion")
    markers = list(_MARKER.finditer(raw))
    if not markers:
        raise UnparseableVerdictError(raw, "no 'Output:' marker")
    token = raw[markers[-1].end():].strip(_STRIP_CHARS).lower()
    try:
        parsed = VerdictClass(token)
    except ValueError:
        raise UnparseableVerdictError(raw, f"expected exactly one of normal/anxiety/depression after "
                                           f"'Output:', got {token[:40]!r}") from None
    return ZeroShotVerdict(raw_text=raw, parsed=parsed)


def sniff_media_type(data: bytes) -> str:
    if data.startswith(b"\xff\xd8\xff"):
        return "image/jpeg"
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return "image/png"
    if data[:6] in (b"GIF87a", b"GIF89a"):
        return "image/gif"
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    raise ValidationError("unrecognised image format (expected JPEG, PNG, GIF or WebP)")


def image_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Provider(Protocol):
    model_name: str

    def complete(self, prompt: str, image: bytes, media_type: str) -> str: ...


def build_chat_payload(model: str, prompt: str, image: bytes, media_type: str) -> dict:
    data_url = f"data:{media_type};base64,{base64.b64encode(image).decode('ascii')}"
    return {
        "model": model,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": data_url}},
                ],
            }
        ],
        # greedy decoding: always take the most probable next token
        "temperature": 0,
        "top_p": 1,
    }


class JsonHttpClient:
    """Bearer-authenticated JSON POSTs with exponential backoff.

    Retries transport errors, 429 and 5xx up to ``max_attempts`` in total;
    other 4xx responses are raised immediately with their body.
    """

    def __init__(
        self,
        api_base: str | None = None,
        api_key: str | None = None,
        *,
        timeout: float = 60.0,
        max_attempts: int = MAX_ATTEMPTS,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.api_base = (api_base or os.environ.get(API_BASE_ENV) or "https://api.openai.com/v1").rstrip("/")
        api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def post_json(self, path: str, payload: dict) -> dict:
        url = f"{self.api_base}/{path.lstrip('/')}"
        last_error = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._client.post(url, json=payload)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError:
                        raise ProtocolError(f"non-JSON response from {url}") from None
                if resp.status_code in (401, 403):
                    raise AuthenticationError(resp.status_code, resp.text)
                if resp.status_code not in RETRYABLE_STATUS:
                    raise ProviderHTTPError(resp.status_code, resp.text)
                last_error = f"HTTP {resp.status_code}"
            if attempt < self.max_attempts:
                delay = self.backoff * 2 ** (attempt - 1)
                logger.warning("request to %s failed (%s); retry %d in %.1fs", url, last_error, attempt, delay)
                self._sleep(delay)
        raise TransportError(f"{url}: {last_error}", attempts=self.max_attempts)

    def close(self) -> None:
        self._client.close()


class ChatCompletionsProvider:
    def __init__(self, model: str, api_base: str | None = None, api_key: str | None = None, **http_kwargs):
        self.model_name = model
        self.http = JsonHttpClient(api_base, api_key, **http_kwargs)

    def complete(self, prompt: str, image: bytes, media_type: str) -> str:
        body = self.http.post_json("chat/completions", build_chat_payload(self.model_name, prompt, image, media_type))
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError("chat-completions response lacks choices[0].message.content") from None
        if isinstance(content, list):  # some providers return content parts
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        if not isinstance(content, str) or not content.strip():
            raise ProtocolError("empty completion")
        return content

    def close(self) -> None:
        self.http.close()


_MOCK_PHRASES = (
    "The person appears calm and relaxed.",
    "Her eyes look slightly tired.",
    "The corners of the mouth are turned slightly downward.",
    "She is smiling gently and her expression seems content.",
    "The eyebrows are drawn together, suggesting some tension.",
    "The gaze is direct and the face looks neutral.",
    "There is a hint of sadness around the eyes.",
    "The expression seems attentive and composed.",
)


class MockProvider:
    """Offline provider answering from canned text keyed by image digest.

    Unknown images get a deterministic pseudo-description drawn from a small
    phrase pool, seeded by ``(seed, digest)``.
    """

    def __init__(
        self,
        descriptions: dict[str, str] | None = None,
        zeroshot: dict[str, str] | None = None,
        *,
        seed: int = 0,
        model_name: str = "mock-vlm",
    ):
        self.descriptions = dict(descriptions or {})
        self.zeroshot = dict(zeroshot or {})
        self.seed = seed
        self.model_name = model_name

    @classmethod
    def from_fixture(cls, path: str | Path, seed: int = 0) -> "MockProvider":
        with open(path, encoding="utf-8") as fh:
            fixture = json.load(fh)
        return cls(
            fixture.get("description", {}),
            fixture.get("zeroshot", {}),
            seed=seed,
            model_name=fixture.get("model_name", "mock-vlm"),
        )

    def complete(self, prompt: str, image: bytes, media_type: str) -> str:
        digest = image_digest(image)
        zeroshot = prompt == ZEROSHOT_PROMPT
        canned = (self.zeroshot if zeroshot else self.descriptions).get(digest)
        if canned is not None:
            return canned
        rng = random.Random(f"{self.seed}:{digest}")
        text = " ".join(rng.sample(_MOCK_PHRASES, 3))
        if zeroshot:
            text += f" Output: {rng.choice([c.value for c in VerdictClass])}"
        return text


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "chat"  # "chat" | "mock"
    model: str = "gpt-4o"
    api_base: str | None = None
    api_key: str | None = field(default=None, repr=False)
    fixture: str | None = None
    seed: int = 0
    timeout: float = 60.0

    def identity(self) -> dict:
        """Provider identity for run manifests; never includes credentials."""
        return {"kind": self.kind, "model": self.model if self.kind != "mock" else "mock-vlm",
                "api_base": self.api_base or os.environ.get(API_BASE_ENV)}


def make_provider(cfg: ProviderConfig) -> Provider:
    if cfg.kind == "mock":
        if cfg.fixture:
            return MockProvider.from_fixture(cfg.fixture, seed=cfg.seed)
        return MockProvider(seed=cfg.seed)
    if cfg.kind == "chat":
        return ChatCompletionsProvider(cfg.model, cfg.api_base, cfg.api_key, timeout=cfg.timeout)
    raise ValidationError(f"unknown VLM provider kind {cfg.kind!r}")


def _read_image(image: bytes | str | Path) -> bytes:
    if isinstance(image, (str, Path)):
        data = Path(image).read_bytes()
    else:
        data = bytes(image)
    if not data:
        raise ValidationError("image payload is empty")
    return data


def request_description(image: bytes | str | Path, provider: Provider, sample_id: str = "") -> Description:
    data = _read_image(image)
    text = provider.complete(DESCRIPTION_PROMPT, data, sniff_media_type(data))
    return Description(sample_id=sample_id, text=text, model_name=provider.model_name)


def request_zeroshot(image: bytes | str | Path, provider: Provider, sample_id: str | None = None) -> ZeroShotVerdict:
    data = _read_image(image)
    raw = provider.complete(ZEROSHOT_PROMPT, data, sniff_media_type(data))
    verdict = parse_zeroshot_output(raw)
    return ZeroShotVerdict(raw_text=verdict.raw_text, parsed=verdict.parsed, sample_id=sample_id)


@dataclass
class BatchResult:
    results: list  # successes, in input order
    failures: dict[str, str]  # sample_id -> error message
    resumed: list[str] = field(default_factory=list)  # ids taken from an earlier run


def _run_batch(
    dataset: Dataset,
    worker: Callable[[object], object],
    to_record: Callable[[object], dict],
    from_record: Callable[[dict], object],
    concurrency: int,
    out_path: str | Path | None,
) -> BatchResult:
    if concurrency < 1:
        raise ValidationError("concurrency must be >= 1")
    missing = [s.sample_id for s in dataset if not s.image_path]
    if missing:
        raise ValidationError(f"samples without image_path: {', '.join(missing[:5])}")

    done: dict[str, object] = {}
    if out_path is not None and Path(out_path).exists():
        for rec in _read_jsonl_records(out_path):
            done[rec["sample_id"]] = from_record(rec)
    pending = [s for s in dataset if s.sample_id not in done]
    resumed = [s.sample_id for s in dataset if s.sample_id in done]
    if resumed:
        logger.info("resuming: %d of %d samples already done", len(resumed), len(dataset))

    lock = threading.Lock()
    failures: dict[str, str] = {}
    fresh: dict[str, object] = {}
    auth_error: list[AuthenticationError] = []
    out_fh = open(out_path, "a", encoding="utf-8") if out_path is not None else None

    def task(sample):
        if auth_error:
            return
        try:
            result = worker(sample)
        except AuthenticationError as exc:
            auth_error.append(exc)
            return
        except Exception as exc:  # per-sample failures are aggregated, not fatal
            logger.warning("sample %s failed: %s", sample.sample_id, exc)
            with lock:
                failures[sample.sample_id] = f"{type(exc).__name__}: {exc}"
            return
        with lock:
            fresh[sample.sample_id] = result
            if out_fh is not None:
                out_fh.write(json.dumps(to_record(result), ensure_ascii=False) + "\n")
                out_fh.flush()
            logger.info("done %d/%d", len(fresh) + len(resumed), len(dataset))

    try:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            list(pool.map(task, pending))
    finally:
        if out_fh is not None:
            out_fh.close()
    if auth_error:
        raise auth_error[0]
    done.update(fresh)
    ordered = [done[s.sample_id] for s in dataset if s.sample_id in done]
    return BatchResult(ordered, {s.sample_id: failures[s.sample_id] for s in dataset if s.sample_id in failures}, resumed)


def batch_describe(
    dataset: Dataset,
    provider: Provider,
    concurrency: int = 4,
    out_path: str | Path | None = None,
) -> BatchResult:
    """Describe every sample's image with at most ``concurrency`` requests in flight.

    When ``out_path`` is given, each finished description is appended there
    immediately, and samples already present in the file are not requested
    again.
    """
    return _run_batch(
        dataset,
        lambda s: request_description(s.image_path, provider, s.sample_id),
        Description.to_record,
        lambda r: Description(r["sample_id"], r["text"], r["model_name"]),
        concurrency,
        out_path,
    )


def batch_zeroshot(
    dataset: Dataset,
    provider: Provider,
    concurrency: int = 4,
    out_path: str | Path | None = None,
) -> BatchResult:
    return _run_batch(
        dataset,
        lambda s: request_zeroshot(s.image_path, provider, s.sample_id),
        ZeroShotVerdict.to_record,
        _verdict_from_record,
        concurrency,
        out_path,
    )


def _read_jsonl_records(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: parse error: {exc.msg}") from None
    return records


def save_descriptions(descriptions: Iterable[Description], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in descriptions:
            fh.write(json.dumps(d.to_record(), ensure_ascii=False) + "\n")


def load_descriptions(path: str | Path) -> dict[str, Description]:
    out: dict[str, Description] = {}
    for rec in _read_jsonl_records(path):
        if rec["sample_id"] in out:
            raise DuplicateIdError(rec["sample_id"], str(path))
        out[rec["sample_id"]] = Description(rec["sample_id"], rec["text"], rec.get("model_name", ""))
    return out


def _verdict_from_record(rec: dict) -> ZeroShotVerdict:
    verdict = ZeroShotVerdict(rec["raw_text"], VerdictClass(rec["parsed"]), rec.get("sample_id"))
    if rec.get("label") is not None and Label.parse(rec["label"]) is not verdict.label:
        raise ValidationError(f"verdict {rec.get('sample_id')!r}: label does not match parsed class")
    return verdict


def save_verdicts(verdicts: Iterable[ZeroShotVerdict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_record(), ensure_ascii=False) + "\n")


def load_verdicts(path: str | Path) -> list[ZeroShotVerdict]:
    verdicts = [_verdict_from_record(r) for r in _read_jsonl_records(path)]
    seen = set()
    for v in verdicts:
        if v.sample_id in seen:
            raise DuplicateIdError(v.sample_id, str(path))
        seen.add(v.sample_id)
    return verdicts
