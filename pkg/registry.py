"""
Data Source Registry

Loads the data source index, handbook inventory and code templates from a
directory tree, one subdirectory per source:

    registry/sources/<alias>/entry.json    {"alias", "display_name", "description"}
    registry/sources/<alias>/handbook.md   numbered guideline items
    registry/sources/<alias>/template.txt  optional reference program
    registry/sources/<alias>/runtime.txt   runtime id, entry-function name

Adding, updating or removing a source is a matter of dropping or deleting a
folder. Secrets never live in this tree: handbooks reference them with
placeholder tokens of the form {{KEY:<alias>:<key_name>}}, resolved against a
SecretStore (GEODATA_KEY_* environment variables or a secrets file) only at
execution time.
"""

import json
import keyword
import logging
import os
import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional

from errors import (
    AliasMismatch,
    DuplicateAlias,
    EmptyRegistry,
    MalformedManifest,
    MalformedPlaceholder,
    MissingHandbook,
    MissingSecret,
    RegistryError,
    UnknownAlias,
)

logger = logging.getLogger(__name__)

UNKNOWN = "Unknown"
DEFAULT_RUNTIME = "python3"
DEFAULT_ENTRY_FUNCTION = "download_data"

PLACEHOLDER_PREFIX = "{{KEY:"
PLACEHOLDER_RE = re.compile(r"\{\{KEY:([^:{}\s]+):([^:{}\s]+)\}\}")
ENV_PREFIX = "GEODATA_KEY_"
INJECTION_KINDS = ("env-variable", "placeholder-substitution")

_ITEM_START = re.compile(r"^(\d+)\.\s+(.*)$")


@dataclass(frozen=True)
class DataSourceEntry:
    alias: str
    display_name: str
    description: str

    def __post_init__(self):
        if not self.alias or "\n" in self.alias or self.alias != self.alias.strip():
            raise MalformedManifest(f"invalid alias {self.alias!r}")
        if not self.display_name or "\n" in self.display_name:
            raise MalformedManifest(f"{self.alias}: display_name must be a single non-empty line")
        description = self.description.strip()
        if not description:
            raise MalformedManifest(f"{self.alias}: empty description")
        if re.search(r"\n\s*\n", description):
            raise MalformedManifest(f"{self.alias}: description must be a single paragraph")

    def to_dict(self):
        return {"alias": self.alias, "display_name": self.display_name,
                "description": self.description}


@dataclass(frozen=True)
class ReplyContract:
    """What a generated program must look like: one fenced block defining the entry function."""
    entry_function: str = DEFAULT_ENTRY_FUNCTION
    fence_tag: str = "python"

    def __post_init__(self):
        if not self.entry_function.isidentifier() or keyword.iskeyword(self.entry_function):
            raise MalformedManifest(f"entry function {self.entry_function!r} is not a valid identifier")


@dataclass(frozen=True)
class Handbook:
    alias: str
    guidelines: tuple
    template_program: Optional[str] = None
    reply_contract: ReplyContract = field(default_factory=ReplyContract)
    runtime_id: str = DEFAULT_RUNTIME
    auth_placeholders: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "guidelines", tuple(self.guidelines))
        object.__setattr__(self, "auth_placeholders", tuple(self.auth_placeholders))
        if not self.guidelines:
            raise MalformedManifest(f"{self.alias}: handbook has no guidelines")
        for token in self.auth_placeholders:
            try:
                alias, _ = parse_placeholder(token)
            except MalformedPlaceholder as exc:
                raise MalformedManifest(f"{self.alias}: bad placeholder declaration: {exc}") from exc
            if alias != self.alias:
                raise MalformedManifest(f"{self.alias}: placeholder {token} names another source")
        used = []
        for text in (*self.guidelines, self.template_program or ""):
            try:
                used.extend(find_placeholders(text))
            except MalformedPlaceholder as exc:
                raise MalformedManifest(f"{self.alias}: {exc}") from exc
        undeclared = sorted(set(used) - set(self.auth_placeholders))
        if undeclared:
            raise MalformedManifest(f"{self.alias}: undeclared placeholders {undeclared}")

    def to_dict(self):
        return {
            "alias": self.alias,
            "guidelines": list(self.guidelines),
            "template_program": self.template_program,
            "reply_contract": {"entry_function": self.reply_contract.entry_function,
                               "fence_tag": self.reply_contract.fence_tag},
            "runtime_id": self.runtime_id,
            "auth_placeholders": list(self.auth_placeholders),
        }


@dataclass(frozen=True)
class AuthRecord:
    alias: str
    key_name: str
    secret: str = field(repr=False)
    injection: str = "placeholder-substitution"

    def __post_init__(self):
        if self.injection not in INJECTION_KINDS:
            raise ValueError(f"unknown injection kind {self.injection!r}")


@dataclass(frozen=True)
class Registry:
    """Immutable view of the loaded sources; safe to share across sessions."""
    entries: Mapping = field(default_factory=dict)
    handbooks: Mapping = field(default_factory=dict)
    root: Optional[str] = None

    def __post_init__(self):
        if set(self.entries) != set(self.handbooks):
            raise RegistryError("entries and handbooks must cover the same aliases")
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))
        object.__setattr__(self, "handbooks", MappingProxyType(dict(self.handbooks)))

    @property
    def order(self):
        return tuple(sorted(self.entries))

    def __len__(self):
        return len(self.entries)

    def __contains__(self, alias):
        return alias in self.entries

    def lookup(self, name):
        """Map a selection reply to an alias: exact alias first, then exact display name."""
        if name in self.entries:
            return name
        for alias in self.order:
            if self.entries[alias].display_name == name:
                return alias
        return None


# --- placeholders & secrets ------------------------------------------------

def parse_placeholder(token):
    match = PLACEHOLDER_RE.fullmatch(token or "")
    if not match:
        raise MalformedPlaceholder(f"malformed placeholder {token!r}")
    return match.group(1), match.group(2)


def find_placeholders(text):
    """Return every placeholder token in text, rejecting half-written ones."""
    tokens = []
    start = text.find(PLACEHOLDER_PREFIX)
    while start != -1:
        match = PLACEHOLDER_RE.match(text, start)
        if not match:
            fragment = text[start:start + 40].splitlines()[0]
            raise MalformedPlaceholder(f"malformed placeholder near {fragment!r}")
        tokens.append(match.group(0))
        start = text.find(PLACEHOLDER_PREFIX, match.end())
    return tokens


def env_var_name(alias, key_name):
    def norm(value):
        return re.sub(r"[^A-Za-z0-9]", "_", value).upper()
    return f"{ENV_PREFIX}{norm(alias)}_{norm(key_name)}"


class SecretStore:
    """
    Credentials referenced by handbook placeholders.

    Environment variables (GEODATA_KEY_<ALIAS>_<KEYNAME>) take precedence over
    records read from a secrets file of "<alias>:<key_name>=<secret>" lines.
    """

    def __init__(self, records=(), environ=None):
        self._records = {(r.alias, r.key_name): r for r in records}
        self._environ = dict(environ) if environ is not None else {}

    @classmethod
    def from_sources(cls, secrets_file=None, environ=None):
        records = read_secrets_file(secrets_file) if secrets_file else []
        environ = os.environ if environ is None else environ
        env_keys = {k: v for k, v in environ.items() if k.startswith(ENV_PREFIX)}
        return cls(records, env_keys)

    def lookup(self, alias, key_name):
        value = self._environ.get(env_var_name(alias, key_name))
        if value:
            return AuthRecord(alias, key_name, value, injection="env-variable")
        return self._records.get((alias, key_name))

    def secrets(self):
        values = {r.secret for r in self._records.values()}
        values.update(v for k, v in self._environ.items() if k.startswith(ENV_PREFIX))
        return sorted((v for v in values if v), key=len, reverse=True)

    def environment(self):
        """GEODATA_KEY_* variables handed to sandboxed programs."""
        env = {env_var_name(r.alias, r.key_name): r.secret for r in self._records.values()}
        env.update({k: v for k, v in self._environ.items() if k.startswith(ENV_PREFIX) and v})
        return env

    def redact(self, text):
        if not text:
            return text
        for secret in self.secrets():
            text = text.replace(secret, "***")
        return text

    def __repr__(self):
        return f"SecretStore(records={len(self._records)}, env={len(self._environ)})"


class SecretRedactingFilter(logging.Filter):
    """Scrubs known secrets from log records before any handler sees them."""

    def __init__(self, store):
        super().__init__()
        self.store = store

    def filter(self, record):
        message = record.getMessage()
        redacted = self.store.redact(message)
        if redacted != message:
            record.msg, record.args = redacted, ()
        return True


def read_secrets_file(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            head, sep, secret = line.partition("=")
            alias, colon, key_name = head.partition(":")
            if not sep or not colon or not alias or not key_name:
                raise RegistryError(f"{path}:{lineno}: expected '<alias>:<key_name>=<secret>'")
            records.append(AuthRecord(alias.strip(), key_name.strip(), secret.strip()))
    return records


def resolve_secret(store, placeholder):
    alias, key_name = parse_placeholder(placeholder)
    record = store.lookup(alias, key_name)
    if record is None or not record.secret:
        raise MissingSecret(f"no secret bound to {placeholder} (set {env_var_name(alias, key_name)})")
    return record.secret


# --- loading ------------------------------------------------------------------

def parse_handbook(text):
    """Split handbook text into guideline items; numbering is dropped."""
    items = []
    for line in text.splitlines():
        match = _ITEM_START.match(line)
        if match:
            items.append([match.group(2)])
        elif items:
            items[-1].append(line)
        elif line.strip():
            raise MalformedManifest("handbook text before the first numbered item")
    return ["\n".join(lines).rstrip() for lines in items]


def _read_text(path):
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def load_source(folder):
    """Load one source folder into an (entry, handbook) pair."""
    manifest_path = os.path.join(folder, "entry.json")
    try:
        manifest = json.loads(_read_text(manifest_path))
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{manifest_path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise MalformedManifest(f"{manifest_path}: expected a JSON object")
    missing = [k for k in ("alias", "display_name", "description") if not isinstance(manifest.get(k), str)]
    if missing:
        raise MalformedManifest(f"{manifest_path}: missing field(s) {missing}")
    placeholders = manifest.get("auth_placeholders", [])
    if not isinstance(placeholders, list) or not all(isinstance(p, str) for p in placeholders):
        raise MalformedManifest(f"{manifest_path}: auth_placeholders must be a list of tokens")

    entry = DataSourceEntry(manifest["alias"], manifest["display_name"], manifest["description"].strip())

    handbook_path = os.path.join(folder, "handbook.md")
    if not os.path.isfile(handbook_path):
        raise MissingHandbook(f"{entry.alias}: no handbook.md in {folder}")
    guidelines = parse_handbook(_read_text(handbook_path))

    template_path = os.path.join(folder, "template.txt")
    template = _read_text(template_path).rstrip("\n") if os.path.isfile(template_path) else None

    runtime_id, entry_function = DEFAULT_RUNTIME, DEFAULT_ENTRY_FUNCTION
    runtime_path = os.path.join(folder, "runtime.txt")
    if os.path.isfile(runtime_path):
        lines = [l.strip() for l in _read_text(runtime_path).splitlines() if l.strip()]
        if len(lines) != 2:
            raise MalformedManifest(f"{runtime_path}: expected runtime id and entry function")
        runtime_id, entry_function = lines

    handbook = Handbook(
        alias=entry.alias,
        guidelines=guidelines,
        template_program=template,
        reply_contract=ReplyContract(entry_function),
        runtime_id=runtime_id,
        auth_placeholders=placeholders,
    )
    return entry, handbook


def load_registry(root):
    """
    Load every source folder under <root>/sources.

    Args:
        root: registry directory (the one containing sources/)

    Returns:
        Registry: one entry per folder holding an entry.json

    Raises:
        DuplicateAlias: two folders declare the same alias
        MalformedManifest: bad entry.json, runtime.txt or placeholder declaration
        MissingHandbook: a folder has entry.json but no handbook.md
    """
    if not os.path.isdir(root):
        raise RegistryError(f"registry directory not found: {root}")
    sources_dir = os.path.join(root, "sources")
    entries, handbooks = {}, {}
    if os.path.isdir(sources_dir):
        for name in sorted(os.listdir(sources_dir)):
            folder = os.path.join(sources_dir, name)
            if not os.path.isfile(os.path.join(folder, "entry.json")):
                continue
            entry, handbook = load_source(folder)
            if entry.alias in entries:
                raise DuplicateAlias(f"alias {entry.alias!r} declared twice (second in {folder})")
            entries[entry.alias] = entry
            handbooks[entry.alias] = handbook
    logger.info("Loaded %d data sources from %s", len(entries), root)
    return Registry(entries, handbooks, root)


def render_index(reg):
    """Numbered "N. <display_name>. <description>" lines in alias order."""
    if not len(reg):
        raise EmptyRegistry("the registry has no data sources")
    lines = []
    for number, alias in enumerate(reg.order, 1):
        entry = reg.entries[alias]
        lines.append(f"{number}. {entry.display_name}. {entry.description}")
    return "\n".join(lines)


def resolve_handbook(reg, alias):
    try:
        return reg.handbooks[alias]
    except KeyError:
        raise UnknownAlias(f"unknown data source alias {alias!r}") from None


def register_source(reg, entry, handbook):
    if entry.alias != handbook.alias:
        raise AliasMismatch(f"entry alias {entry.alias!r} != handbook alias {handbook.alias!r}")
    if entry.alias in reg.entries:
        raise DuplicateAlias(f"alias {entry.alias!r} already registered")
    entries = dict(reg.entries)
    handbooks = dict(reg.handbooks)
    entries[entry.alias] = entry
    handbooks[entry.alias] = handbook
    return Registry(entries, handbooks, reg.root)
