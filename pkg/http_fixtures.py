"""
Recorded HTTP fixtures for offline runs.

A fixture directory holds an index.json and one body file per response:

    {"entries": [
        {"method": "POST", "url": "https://overpass-api.de/api/interpreter",
         "form": {"data": "[out:json];..."}, "status": 200,
         "headers": {"Content-Type": "application/json"},
         "body_file": "overpass_cuba.json"}
    ]}

Requests are matched on method, canonical URL (query pairs decoded and
sorted, `params` merged in) and the SHA-256 of the canonical body. Form
bodies are canonicalized as sorted decoded pairs whose values have runs of
whitespace collapsed and whitespace around QL punctuation removed, so an
Overpass query matches regardless of how it was line-wrapped.

FixtureAdapter plugs the store into a requests.Session and never opens a
socket; RecordingAdapter does live requests and appends what it sees.
"""

import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

import requests
from requests.adapters import BaseAdapter, HTTPAdapter
from requests.structures import CaseInsensitiveDict
from requests.utils import get_encoding_from_headers

import config

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"
FORM_CONTENT_TYPE = "application/x-www-form-urlencoded"

_PUNCT_SPACE = re.compile(r"\s*([;()\[\]{}=,])\s*")


def normalize_value(value):
    collapsed = " ".join(str(value).split())
    return _PUNCT_SPACE.sub(r"\1", collapsed)


def canonical_pairs(pairs):
    return sorted((str(k), normalize_value(v)) for k, v in pairs)


def canonical_url(url, params=None):
    parts = urlsplit(url)
    pairs = parse_qsl(parts.query, keep_blank_values=True)
    if params:
        pairs.extend(params.items() if isinstance(params, dict) else params)
    query = urlencode(canonical_pairs(pairs))
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), parts.path or "/", query, ""))


def canonical_body(body=None, form=None, content_type=""):
    if form is not None:
        pairs = form.items() if isinstance(form, dict) else form
        return urlencode(canonical_pairs(pairs)).encode("utf-8")
    if body is None:
        return b""
    if isinstance(body, str):
        body = body.encode("utf-8")
    if content_type and content_type.split(";")[0].strip().lower() == FORM_CONTENT_TYPE:
        pairs = parse_qsl(body.decode("utf-8"), keep_blank_values=True)
        return urlencode(canonical_pairs(pairs)).encode("utf-8")
    return body


def request_key(method, url, params=None, body=None, form=None, content_type=""):
    digest = hashlib.sha256(canonical_body(body, form, content_type)).hexdigest()
    return f"{method.upper()} {canonical_url(url, params)} {digest}"


@dataclass
class FixtureResponse:
    status: int
    headers: dict = field(default_factory=dict)
    content: bytes = b""


class FixtureStore:
    """An index of recorded responses keyed by canonical request."""

    def __init__(self, root):
        self.root = root
        self._entries = []
        self._by_key = {}
        self._lock = threading.Lock()
        index_path = os.path.join(root, INDEX_FILE)
        if os.path.isfile(index_path):
            with open(index_path, "r", encoding="utf-8") as f:
                data = json.load(f)
            for entry in data.get("entries", []):
                self._index(entry)
        logger.debug("Loaded %d HTTP fixtures from %s", len(self._entries), root)

    def __len__(self):
        return len(self._entries)

    def _index(self, entry):
        key = request_key(entry.get("method", "GET"), entry["url"], entry.get("params"),
                          entry.get("body"), entry.get("form"))
        self._entries.append(entry)
        # first recording of a request wins
        self._by_key.setdefault(key, entry)

    def lookup(self, method, url, body=None, content_type=""):
        entry = self._by_key.get(request_key(method, url, None, body, None, content_type))
        if entry is None:
            return None
        with open(os.path.join(self.root, entry["body_file"]), "rb") as f:
            content = f.read()
        return FixtureResponse(int(entry.get("status", 200)), dict(entry.get("headers", {})), content)

    def add(self, method, url, response, body=None, content_type=""):
        """Append a recorded response and rewrite index.json."""
        with self._lock:
            os.makedirs(self.root, exist_ok=True)
            body_file = f"response_{len(self._entries):04d}.bin"
            with open(os.path.join(self.root, body_file), "wb") as f:
                f.write(response.content)
            entry = {"method": method.upper(), "url": url, "status": response.status,
                     "headers": response.headers, "body_file": body_file}
            if content_type.split(";")[0].strip().lower() == FORM_CONTENT_TYPE and body:
                text = body.decode("utf-8") if isinstance(body, bytes) else body
                entry["form"] = dict(parse_qsl(text, keep_blank_values=True))
            elif body:
                entry["body"] = body.decode("utf-8") if isinstance(body, bytes) else body
            self._index(entry)
            with open(os.path.join(self.root, INDEX_FILE), "w", encoding="utf-8") as f:
                json.dump({"entries": self._entries}, f, indent=2)


def _content_type(request):
    return request.headers.get("Content-Type", "") if request.headers else ""


def build_response(request, fixture):
    response = requests.Response()
    response.status_code = fixture.status
    response.headers = CaseInsensitiveDict(fixture.headers)
    response.encoding = get_encoding_from_headers(response.headers)
    response._content = fixture.content
    response.url = request.url
    response.request = request
    response.reason = "OK" if fixture.status < 400 else "Fixture Error"
    return response


class FixtureAdapter(BaseAdapter):
    """Transport adapter answering from a FixtureStore; unknown requests fail like a dead network."""

    def __init__(self, store):
        super().__init__()
        self.store = store

    def send(self, request, stream=False, timeout=None, verify=True, cert=None, proxies=None):
        fixture = self.store.lookup(request.method, request.url, request.body, _content_type(request))
        if fixture is None:
            logger.debug("Fixture miss: %s %s", request.method, request.url)
            raise requests.ConnectionError(f"no recorded fixture for {request.method} {request.url}",
                                           request=request)
        logger.debug("Fixture hit: %s %s -> %d", request.method, request.url, fixture.status)
        return build_response(request, fixture)

    def close(self):
        pass


class RecordingAdapter(HTTPAdapter):
    """Live adapter that appends every exchange to a FixtureStore."""

    def __init__(self, store, **kwargs):
        super().__init__(**kwargs)
        self.store = store

    def send(self, request, **kwargs):
        response = super().send(request, **kwargs)
        recorded = FixtureResponse(response.status_code,
                                   {"Content-Type": response.headers.get("Content-Type", "")},
                                   response.content)
        self.store.add(request.method, request.url, recorded, request.body, _content_type(request))
        return response


def make_session(fixtures_dir=None, record_dir=None):
    """requests.Session replaying fixtures_dir, recording into record_dir, or live."""
    session = requests.Session()
    session.headers["User-Agent"] = config.USER_AGENT
    adapter = None
    if fixtures_dir:
        adapter = FixtureAdapter(FixtureStore(fixtures_dir))
    elif record_dir:
        adapter = RecordingAdapter(FixtureStore(record_dir))
    if adapter is not None:
        session.mount("http://", adapter)
        session.mount("https://", adapter)
    return session
