"""
LLM client with live, record and replay transports.

Every agent step is one stateless chat-completion call. In record mode each
exchange is appended to a cassette file; in replay mode replies come from the
cassette by prompt digest and no network is touched.

Cassette layout (UTF-8, LF line endings):

    === EXCHANGE ===
    digest: <hex digest of the canonical prompt>
    algorithm: sha256
    sequence: <0-based ordinal within the cassette>
    latency: <seconds>
    --- PROMPT ---
    <prompt lines>
    --- REPLY ---
    <reply lines>
    === END ===

Body lines starting with "===", "---" or a backslash are written with one
extra leading backslash.
"""

import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import requests

import config
from errors import CassetteMiss, ConfigurationError, EmptyReply, LlmError, RateLimited, TransportError

logger = logging.getLogger(__name__)

TRANSPORTS = ("live", "record", "replay")

EXCHANGE_START = "=== EXCHANGE ==="
EXCHANGE_END = "=== END ==="
PROMPT_MARK = "--- PROMPT ---"
REPLY_MARK = "--- REPLY ---"


@dataclass(frozen=True)
class ModelConfig:
    endpoint: str = config.LLM_ENDPOINT
    model_name: str = config.LLM_MODEL
    temperature: float = config.LLM_TEMPERATURE
    max_reply_tokens: int = config.LLM_MAX_REPLY_TOKENS
    timeout: float = config.LLM_TIMEOUT
    transport: str = "live"
    cassette_path: Optional[str] = None
    api_key: str = field(default=config.LLM_API_KEY, repr=False)

    def __post_init__(self):
        if self.transport not in TRANSPORTS:
            raise ConfigurationError(f"unknown transport {self.transport!r}")
        if self.transport in ("record", "replay") and not self.cassette_path:
            raise ConfigurationError(f"transport {self.transport} requires a cassette path")
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0")
        if self.max_reply_tokens <= 0:
            raise ConfigurationError("max_reply_tokens must be positive")
        if self.timeout <= 0:
            raise ConfigurationError("timeout must be positive")


@dataclass(frozen=True)
class ChatExchange:
    prompt_digest: str
    prompt_text: str
    reply_text: str
    latency: float = 0.0
    sequence_index: int = 0
    algorithm: str = config.DIGEST_ALGORITHM


def canonical_digest(text, algorithm=config.DIGEST_ALGORITHM):
    """Hex digest of text with LF line endings and trailing whitespace removed per line."""
    normalized = text.replace("\r\n", "\n").replace("\r", "\n")
    normalized = "\n".join(line.rstrip() for line in normalized.split("\n"))
    return hashlib.new(algorithm, normalized.encode("utf-8")).hexdigest()


def _prompt_text(prompt):
    return prompt if isinstance(prompt, str) else prompt.full_text


# --- cassette file ------------------------------------------------------------

def _escape(line):
    if line.startswith(("===", "---", "\\")):
        return "\\" + line
    return line


def _unescape(line):
    return line[1:] if line.startswith("\\") else line


def format_exchange(exchange):
    lines = [
        EXCHANGE_START,
        f"digest: {exchange.prompt_digest}",
        f"algorithm: {exchange.algorithm}",
        f"sequence: {exchange.sequence_index}",
        f"latency: {exchange.latency:.3f}",
        PROMPT_MARK,
        *(_escape(l) for l in exchange.prompt_text.split("\n")),
        REPLY_MARK,
        *(_escape(l) for l in exchange.reply_text.split("\n")),
        EXCHANGE_END,
    ]
    return "\n".join(lines) + "\n"


def parse_cassette(text):
    """Parse cassette text into a list of ChatExchange, verifying every digest."""
    exchanges = []
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        if lines[i] != EXCHANGE_START:
            if lines[i].strip():
                raise LlmError(f"cassette line {i + 1}: expected {EXCHANGE_START!r}")
            i += 1
            continue
        headers = {}
        i += 1
        while i < len(lines) and lines[i] != PROMPT_MARK:
            key, _, value = lines[i].partition(":")
            headers[key.strip()] = value.strip()
            i += 1
        prompt, i = _read_body(lines, i + 1, REPLY_MARK)
        reply, i = _read_body(lines, i + 1, EXCHANGE_END)
        i += 1
        try:
            exchange = ChatExchange(
                prompt_digest=headers["digest"],
                prompt_text=prompt,
                reply_text=reply,
                latency=float(headers.get("latency", 0.0)),
                sequence_index=int(headers["sequence"]),
                algorithm=headers.get("algorithm", config.DIGEST_ALGORITHM),
            )
        except (KeyError, ValueError) as exc:
            raise LlmError(f"cassette exchange {len(exchanges)}: bad header ({exc})") from exc
        if canonical_digest(exchange.prompt_text, exchange.algorithm) != exchange.prompt_digest:
            raise LlmError(f"cassette exchange {exchange.sequence_index}: digest does not match prompt")
        exchanges.append(exchange)
    return exchanges


def _read_body(lines, i, terminator):
    body = []
    while i < len(lines) and lines[i] != terminator:
        body.append(_unescape(lines[i]))
        i += 1
    if i >= len(lines):
        raise LlmError(f"cassette ended before {terminator!r}")
    return "\n".join(body), i


class Cassette:
    """
    Recorded exchanges for one session, consumed in sequence order per digest.

    Replay lookups are synchronized so concurrent sessions sharing a cassette
    never receive the same exchange twice.
    """

    def __init__(self, path, exchanges=()):
        self.path = path
        self.exchanges = list(exchanges)
        self._consumed = set()
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path):
        if not os.path.isfile(path):
            return cls(path)
        with open(path, "r", encoding="utf-8", newline="") as f:
            exchanges = parse_cassette(f.read())
        logger.debug("Loaded %d exchanges from %s", len(exchanges), path)
        return cls(path, exchanges)

    def next_reply(self, prompt_text):
        with self._lock:
            for exchange in sorted(self.exchanges, key=lambda e: e.sequence_index):
                if exchange.sequence_index in self._consumed:
                    continue
                if canonical_digest(prompt_text, exchange.algorithm) == exchange.prompt_digest:
                    self._consumed.add(exchange.sequence_index)
                    return exchange.reply_text
        raise CassetteMiss(f"no unconsumed exchange for prompt digest {canonical_digest(prompt_text)[:12]}")

    def append(self, prompt_text, reply_text, latency):
        with self._lock:
            exchange = ChatExchange(canonical_digest(prompt_text), prompt_text, reply_text,
                                    latency, len(self.exchanges))
            self.exchanges.append(exchange)
            parent = os.path.dirname(os.path.abspath(self.path))
            os.makedirs(parent, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                f.write(format_exchange(exchange))
        return exchange


def write_cassette(path, pairs):
    """Write a fresh cassette from (prompt_text, reply_text) pairs."""
    if os.path.exists(path):
        os.remove(path)
    cassette = Cassette(path)
    for prompt_text, reply_text in pairs:
        cassette.append(_prompt_text(prompt_text), reply_text, 0.0)
    return cassette


# --- clients ------------------------------------------------------------------

class LlmClient:
    """One client per session; live requests are issued one at a time."""

    def __init__(self, model_config, session=None):
        self.config = model_config
        self._session = None
        self._cassette = None
        if model_config.transport == "replay":
            self._cassette = Cassette.load(model_config.cassette_path)
        else:
            self._session = session or requests.Session()
            if model_config.transport == "record":
                self._cassette = Cassette.load(model_config.cassette_path)

    def complete(self, prompt):
        text = _prompt_text(prompt)
        if not text.strip():
            raise LlmError("refusing to send an empty prompt")
        if self.config.transport == "replay":
            reply = self._cassette.next_reply(text)
            logger.debug("Replayed reply (%d chars)", len(reply))
            return reply
        started = time.monotonic()
        reply = self._post(text)
        latency = time.monotonic() - started
        logger.info("LLM reply received in %.1fs (%d chars)", latency, len(reply))
        if self._cassette is not None:
            self._cassette.append(text, reply, latency)
        return reply

    def _post(self, text):
        cfg = self.config
        body = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": text}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_reply_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        try:
            response = self._session.post(cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"LLM request failed: {type(exc).__name__}") from None
        if response.status_code == 429:
            raise RateLimited("LLM endpoint rate limited the request",
                              retry_after=_retry_after(response.headers.get("Retry-After")))
        if response.status_code >= 400:
            raise TransportError(f"LLM endpoint returned HTTP {response.status_code}",
                                 status=response.status_code)
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected LLM response shape: {exc!r}") from None
        if not content or not content.strip():
            raise EmptyReply("LLM returned an empty reply")
        return content


def _retry_after(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


class ScriptedClient:
    """
    Offline client returning canned replies in order.

    An item that is an exception instance is raised instead of returned.
    Every prompt received is kept in `prompts`.
    """

    def __init__(self, replies):
        self._replies = list(replies)
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(_prompt_text(prompt))
        if not self._replies:
            raise CassetteMiss("scripted client has no replies left")
        reply = self._replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def make_client(model_config):
    return LlmClient(model_config)


def complete(model_config, prompt):
    """Single call through a fresh client (replay starts from the cassette head)."""
    return make_client(model_config).complete(prompt)
