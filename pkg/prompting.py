"""
Prompt rendering and reply parsing.

Three prompt kinds go to the LLM (source selection, program generation,
debugging) and two reply kinds come back (the selection object and a fenced
program). Everything here is a pure function of its inputs.
"""

import ast
import json
import re
from dataclasses import dataclass

from errors import (
    AliasMismatch,
    EmptyErrorReport,
    EmptyIndex,
    EmptyRequest,
    MissingEntryFunction,
    NoCodeBlock,
    UnparsableReply,
)
from registry import UNKNOWN

FENCE = "```"
SELECTED_KEY = "Selected data source"
EXPLANATION_KEY = "Explanation"

ROLE_TEXT = (
    "Your role: A professional Python programmer in geographic information science (GIScience). "
    "You have worked on GIScience for more than 20 years and know every detail and pitfall when "
    "collecting data and coding. You know which websites you can get suitable spatial data and know "
    "the methods or tricks to download data, such as OpenStreetMap, Census Bureau, or various APIs. "
    "You are also experienced in processing the downloaded data, including saving them in suitable "
    "formats, map projections, and creating detailed and useful meta-data."
)
HANDBOOK_ROLE_TEXT = (
    " When downloading geospatial data, the technical handbook for a particular data source is "
    "provided; you can follow it, and write Python code carefully to download the data."
)

SELECTION_REQUIREMENTS = (
    "Return the exact name of the data source as the given names.",
    "If a data source is given in the task, e.g., OpenStreetMap or Census Bureau, you need to select "
    "that given data source.",
    "If you need to download the administrative boundary of a place without mentioning the data "
    "sources, you can get data from OpenStreetMap. If you need to download the US Census tract and "
    "block group boundaries, download them from Census Bureau. Follow the given JSON format.",
    "If you cannot find a suitable data source in the given sources, return a data source you think "
    "is most appropriate.",
    "DO NOT make fake data source. If you cannot find any suitable data source, return 'Unknown' as "
    "for the 'Selected data source' key in the reply JSON format. DO NOT use ```json and ```.",
)
SELECTION_REPLY_EXAMPLE = (
    "{'Explanation': \"According to the use requests of US state administrative boundary from "
    "OpenStreetMap, I should download data from OpenStreetMap.\", \"Selected data source\": "
    "'OpenStreetMap'}"
)

SELECTION_SECTIONS = ("role", "mission", "requirements", "data-sources", "reply-example")
FETCH_SECTIONS = ("role", "mission", "data-source", "reply-example", "technical-handbook")
DEBUG_SECTIONS = ("role", "mission", "technical-handbook", "failed-program", "error-report",
                  "debugging-requirements")


@dataclass(frozen=True)
class RenderedPrompt:
    kind: str
    sections: tuple

    @property
    def full_text(self):
        return "".join(text for _, text in self.sections)

    @property
    def labels(self):
        return tuple(label for label, _ in self.sections)

    def section(self, label):
        for name, text in self.sections:
            if name == label:
                return text
        raise KeyError(label)


@dataclass(frozen=True)
class SelectionReply:
    explanation: str
    selected: str

    def __post_init__(self):
        if not self.selected:
            raise UnparsableReply("selected data source is empty")

    @property
    def is_unknown(self):
        return self.selected == UNKNOWN

    def to_text(self, quote="'"):
        """Print the reply in the given quote convention (single or double)."""
        if quote == '"':
            return json.dumps({EXPLANATION_KEY: self.explanation, SELECTED_KEY: self.selected})
        return repr({EXPLANATION_KEY: self.explanation, SELECTED_KEY: self.selected})


@dataclass(frozen=True)
class GeneratedProgram:
    source_text: str
    entry_function: str
    extraction_span: tuple = (0, 0)
    # False when the reply had no usable fence and source_text is the raw reply
    extracted: bool = True

    def __post_init__(self):
        if self.extracted:
            if not defines_function(self.source_text, self.entry_function):
                raise MissingEntryFunction(f"program does not define {self.entry_function}()")
            if not ends_with_call(self.source_text, self.entry_function):
                raise MissingEntryFunction(f"program does not end by calling {self.entry_function}()")

    @classmethod
    def unextracted(cls, reply_text, entry_function):
        return cls(reply_text, entry_function, (0, len(reply_text.encode("utf-8"))), extracted=False)


def _numbered(items):
    return "\n".join(f"{n}. {item}" for n, item in enumerate(items, 1))


def _handbook_text(handbook):
    text = "Technical handbook:\n" + _numbered(handbook.guidelines) + "\n"
    if handbook.template_program:
        # the reference program is the item after the last guideline
        text += (f"{len(handbook.guidelines) + 1}. This is a program for your reference; note that you can improve it:\n"
                 f"{FENCE}{handbook.reply_contract.fence_tag}\n{handbook.template_program}\n{FENCE}\n")
    return text


def build_selection_prompt(request, index_text):
    if not request or not request.strip():
        raise EmptyRequest("the data request is empty")
    if not index_text or not index_text.strip():
        raise EmptyIndex("the data source index is empty")
    sections = (
        ("role", ROLE_TEXT + "\n\n"),
        ("mission", "Your mission: select a suitable data source from the given list to download the "
                    f"requested geospatial data for this task: {request}\n\n"),
        ("requirements", "Requirements:\n" + _numbered(SELECTION_REQUIREMENTS) + "\n\n"),
        ("data-sources", f"Data sources:\n{index_text}\n\n"),
        ("reply-example", f"Your reply example: {SELECTION_REPLY_EXAMPLE}\n"),
    )
    return RenderedPrompt("selection", sections)


def _reply_example(contract):
    name = contract.entry_function
    return (f"Your reply example:\n{FENCE}{contract.fence_tag}\n"
            f"def {name}():\n    # data downloading code\n    # data saving code\n{name}()\n{FENCE}\n\n")


def build_fetch_prompt(request, alias, handbook):
    """
    Render the program-generation prompt for one source.

    Placeholder tokens in the handbook are passed through untouched; secrets
    are only injected into the program after generation.
    """
    if handbook.alias != alias:
        raise AliasMismatch(f"handbook for {handbook.alias!r} given for source {alias!r}")
    if not request or not request.strip():
        raise EmptyRequest("the data request is empty")
    sections = (
        ("role", ROLE_TEXT + HANDBOOK_ROLE_TEXT + "\n\n"),
        ("mission", "Your mission: download geospatial data from the given data source for this "
                    f"task: {request}\n\n"),
        ("data-source", f"Data source:{alias}\n\n"),
        ("reply-example", _reply_example(handbook.reply_contract)),
        ("technical-handbook", _handbook_text(handbook)),
    )
    return RenderedPrompt("fetch", sections)


def build_debug_prompt(request, handbook, program, error_report):
    if not error_report or not error_report.strip():
        raise EmptyErrorReport("cannot debug without an error report")
    contract = handbook.reply_contract
    name = contract.entry_function
    requirements = (
        "Elaborate your reasons for revising the program as comments at the beginning of the code block.",
        f"Put your reply into one code block enclosed by {FENCE}{contract.fence_tag} and {FENCE}.",
        f"The download code is only in a function named '{name}()'. The last line is to execute this function.",
        "Correct the program so the reported error does not occur again; keep the data saving steps.",
        "Throw an error if the program fails to download the data; no need to handle the exceptions.",
    )
    sections = (
        ("role", ROLE_TEXT + HANDBOOK_ROLE_TEXT + "\n\n"),
        ("mission", "Your mission: the program below failed to download geospatial data for this "
                    f"task: {request}\nCorrect the program.\n\n"),
        ("technical-handbook", _handbook_text(handbook) + "\n"),
        ("failed-program", f"The failed program:\n{FENCE}{contract.fence_tag}\n{program.source_text}\n{FENCE}\n\n"),
        ("error-report", f"The error report:\n{error_report}\n\n"),
        ("debugging-requirements", "Debugging requirements:\n" + _numbered(requirements) + "\n"),
    )
    return RenderedPrompt("debug", sections)


# --- reply parsing --------------------------------------------------------------

def _strip_fences(text):
    return "\n".join(line for line in text.splitlines() if not line.strip().startswith(FENCE))


def _first_object(text):
    """Return the first top-level {...} span, honouring quoted braces."""
    start = text.find("{")
    while start != -1:
        depth, quote, escaped = 0, None, False
        for pos in range(start, len(text)):
            char = text[pos]
            if quote:
                if escaped:
                    escaped = False
                elif char == "\\":
                    escaped = True
                elif char == quote:
                    quote = None
            elif char in "'\"":
                quote = char
            elif char == "{":
                depth += 1
            elif char == "}":
                depth -= 1
                if depth == 0:
                    return text[start:pos + 1]
        start = text.find("{", start + 1)
    return None


_KEY_VALUE = r"""['"]{key}['"]\s*:\s*(?:"((?:[^"\\]|\\.)*)"|'((?:[^'\\]|\\.)*)')"""


def _regex_field(obj, key):
    match = re.search(_KEY_VALUE.format(key=re.escape(key)), obj, re.S)
    if not match:
        return None
    return match.group(1) if match.group(1) is not None else match.group(2)


def parse_selection_reply(text):
    """
    Parse the selection reply object.

    Accepts strict JSON, Python-literal style with single quotes (as in the
    prompt's own reply example), trailing commas, surrounding prose and a
    stray code fence.
    """
    obj = _first_object(_strip_fences(text or ""))
    if obj is None:
        raise UnparsableReply("no brace-delimited object in the reply")
    data = None
    for loader in (json.loads, ast.literal_eval):
        try:
            data = loader(obj)
            break
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            continue
    if isinstance(data, dict):
        selected, explanation = data.get(SELECTED_KEY), data.get(EXPLANATION_KEY, "")
    else:
        selected, explanation = _regex_field(obj, SELECTED_KEY), _regex_field(obj, EXPLANATION_KEY)
    if not isinstance(selected, str) or not selected.strip():
        raise UnparsableReply(f"reply object lacks a '{SELECTED_KEY}' value")
    return SelectionReply(str(explanation or ""), selected.strip())


def _fences(text):
    """Yield (tag, body, body_start, body_end) for each closed fence, in order."""
    lines = text.splitlines(keepends=True)
    offsets, pos = [], 0
    for line in lines:
        offsets.append(pos)
        pos += len(line)
    i = 0
    while i < len(lines):
        stripped = lines[i].strip()
        if not stripped.startswith(FENCE):
            i += 1
            continue
        tag = stripped[len(FENCE):].strip()
        # an untagged fence directly wrapping a tagged one: open at the inner fence
        if not tag and i + 1 < len(lines):
            inner = lines[i + 1].strip()
            if inner.startswith(FENCE) and inner[len(FENCE):].strip():
                i += 1
                tag = inner[len(FENCE):].strip()
        j = i + 1
        while j < len(lines) and lines[j].strip() != FENCE:
            j += 1
        if j >= len(lines):
            return
        start = offsets[i + 1] if i + 1 < len(lines) else len(text)
        end = offsets[j]
        body = text[start:end]
        if body.endswith("\n"):
            body = body[:-1]
            end -= 1
        if body.endswith("\r"):
            body = body[:-1]
            end -= 1
        yield tag, body, start, end
        i = j + 1


def defines_function(source, name):
    return re.search(rf"^def\s+{re.escape(name)}\s*\(", source, re.M) is not None


def _calls(statement, name):
    return (isinstance(statement, ast.Expr) and isinstance(statement.value, ast.Call)
            and isinstance(statement.value.func, ast.Name) and statement.value.func.id == name)


def _is_main_guard(statement):
    test = getattr(statement, "test", None)
    return (isinstance(statement, ast.If) and isinstance(test, ast.Compare)
            and isinstance(test.left, ast.Name) and test.left.id == "__name__"
            and any(isinstance(c, ast.Constant) and c.value == "__main__" for c in test.comparators))


def ends_with_call(source, name):
    """True when the last top-level statement calls name(), directly or under a __main__ guard."""
    try:
        body = ast.parse(source).body
    except (SyntaxError, ValueError):
        lines = [line for line in source.splitlines() if line.strip()]
        return bool(lines) and re.fullmatch(rf"{re.escape(name)}\s*\(.*\)\s*(#.*)?", lines[-1]) is not None
    if not body:
        return False
    last = body[-1]
    if _is_main_guard(last):
        return any(_calls(statement, name) for statement in last.body)
    return _calls(last, name)


def extract_program(text, contract):
    """
    Take the first fenced block defining the contract's entry function.

    A missing final invocation line is appended; extraction_span is the byte
    range of the fence body within the raw reply.
    """
    name = contract.entry_function
    found_fence = False
    for _tag, body, start, end in _fences(text or ""):
        found_fence = True
        if not defines_function(body, name):
            continue
        source = body
        if not ends_with_call(source, name):
            source = source.rstrip("\n") + f"\n{name}()"
        span = (len(text[:start].encode("utf-8")), len(text[:end].encode("utf-8")))
        return GeneratedProgram(source, name, span)
    if not found_fence:
        raise NoCodeBlock("reply contained no code block")
    raise MissingEntryFunction(f"no code block defines {name}()")
