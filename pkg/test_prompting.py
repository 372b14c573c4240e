"""Tests for prompt rendering and reply parsing."""

import pytest

from conftest import CHINA_FETCH_REQUEST, CHINA_REQUEST, read_golden
from errors import (
    AliasMismatch,
    EmptyErrorReport,
    EmptyIndex,
    EmptyRequest,
    MissingEntryFunction,
    NoCodeBlock,
    UnparsableReply,
)
from prompting import (
    DEBUG_SECTIONS,
    FETCH_SECTIONS,
    SELECTION_SECTIONS,
    GeneratedProgram,
    SelectionReply,
    build_debug_prompt,
    build_fetch_prompt,
    build_selection_prompt,
    extract_program,
    parse_selection_reply,
)
from registry import ReplyContract, render_index, resolve_handbook

CONTRACT = ReplyContract()
PROGRAM = "import requests\n\ndef download_data():\n    requests.get('https://example.org', timeout=5)\n\ndownload_data()"


def _assert_golden(prompt, golden):
    assert prompt.full_text == golden
    # section by section, in order
    position = 0
    for label, text in prompt.sections:
        assert golden.startswith(text, position), label
        position += len(text)
    assert position == len(golden)


def test_selection_prompt_matches_golden(full_registry):
    prompt = build_selection_prompt(CHINA_REQUEST, render_index(full_registry))
    assert prompt.kind == "selection"
    assert prompt.labels == SELECTION_SECTIONS
    _assert_golden(prompt, read_golden("selection_china_provinces.txt"))


def test_fetch_prompt_matches_golden(full_registry):
    handbook = resolve_handbook(full_registry, "OpenStreetMap")
    prompt = build_fetch_prompt(CHINA_FETCH_REQUEST, "OpenStreetMap", handbook)
    assert prompt.labels == FETCH_SECTIONS
    _assert_golden(prompt, read_golden("fetch_osm_china_provinces.txt"))
    assert f"18. This is a program for your reference; note that you can improve it:\n```python\n{handbook.template_program}\n```\n" in prompt.full_text


def test_fetch_prompt_keeps_guidelines_verbatim_and_in_order(full_registry):
    handbook = resolve_handbook(full_registry, "OpenStreetMap")
    section = build_fetch_prompt(CHINA_REQUEST, "OpenStreetMap", handbook).section("technical-handbook")
    positions = [section.index(f"{n}. {item}\n") for n, item in enumerate(handbook.guidelines, 1)]
    assert positions == sorted(positions)
    assert handbook.template_program in section


def test_fetch_prompt_passes_placeholders_through(full_registry):
    handbook = resolve_handbook(full_registry, "OpenWeather")
    text = build_fetch_prompt("Hourly weather for Paris", "OpenWeather", handbook).full_text
    assert "{{KEY:OpenWeather:api_key}}" in text


def test_request_is_not_escaped(full_registry):
    request = "Download {'a': 1} for Cuba"
    prompt = build_selection_prompt(request, render_index(full_registry))
    assert request in prompt.section("mission")


def test_empty_inputs(full_registry):
    with pytest.raises(EmptyRequest):
        build_selection_prompt("", render_index(full_registry))
    with pytest.raises(EmptyIndex):
        build_selection_prompt("Cuba provinces", " ")
    handbook = resolve_handbook(full_registry, "OpenStreetMap")
    with pytest.raises(AliasMismatch):
        build_fetch_prompt("Cuba provinces", "OpenWeather", handbook)


def test_debug_prompt(full_registry):
    handbook = resolve_handbook(full_registry, "OpenStreetMap")
    program = GeneratedProgram(PROGRAM, "download_data")
    error = "Traceback (most recent call last):\nKeyError: 'elements'"
    prompt = build_debug_prompt(CHINA_REQUEST, handbook, program, error)
    assert prompt.kind == "debug"
    assert prompt.labels == DEBUG_SECTIONS
    assert f"```python\n{PROGRAM}\n```" in prompt.section("failed-program")
    assert error in prompt.section("error-report")
    assert CHINA_REQUEST in prompt.section("mission")
    assert prompt.section("technical-handbook").startswith("Technical handbook:\n1. ")
    with pytest.raises(EmptyErrorReport):
        build_debug_prompt(CHINA_REQUEST, handbook, program, "  \n")


# --- selection replies ----------------------------------------------------------

def test_parse_selection_reply_styles():
    expected = "OpenStreetMap"
    replies = [
        '{"Explanation": "boundaries", "Selected data source": "OpenStreetMap"}',
        "{'Explanation': \"boundaries\", \"Selected data source\": 'OpenStreetMap'}",
        "Sure! Here it is:\n{'Explanation': 'x', 'Selected data source': 'OpenStreetMap',}\nThanks.",
        '```json\n{"Explanation": "x", "Selected data source": "OpenStreetMap"}\n```',
    ]
    for reply in replies:
        assert parse_selection_reply(reply).selected == expected, reply


def test_parse_selection_reply_keeps_braces_inside_strings():
    reply = '{"Explanation": "use {curly} filters", "Selected data source": "OpenWeather data"}'
    parsed = parse_selection_reply(reply)
    assert parsed.explanation == "use {curly} filters"
    assert parsed.selected == "OpenWeather data"


def test_unknown_selection():
    parsed = parse_selection_reply("{'Explanation': 'none fits', 'Selected data source': 'Unknown'}")
    assert parsed.is_unknown
    bare = parse_selection_reply('{"Selected data source": "Unknown"}')
    assert bare.is_unknown
    assert bare.explanation == ""


def test_unparsable_selection():
    for reply in ("I would pick OpenStreetMap.", '{"Explanation": "x"}', '{"Selected data source": ""}'):
        with pytest.raises(UnparsableReply):
            parse_selection_reply(reply)


def test_selection_reply_text_in_both_quote_styles():
    reply = SelectionReply("Boundaries come from \"OSM\"", "OpenStreetMap")
    for quote in ("'", '"'):
        assert parse_selection_reply(reply.to_text(quote)) == reply


# --- program extraction -----------------------------------------------------------

def test_extract_program():
    reply = f"Here is the code.\n```python\n{PROGRAM}\n```\nGood luck."
    program = extract_program(reply, CONTRACT)
    assert program.source_text == PROGRAM
    start, end = program.extraction_span
    assert reply.encode("utf-8")[start:end].decode("utf-8") == PROGRAM


def test_extract_program_appends_missing_call():
    body = "def download_data():\n    print('hi')\n"
    program = extract_program(f"```python\n{body}```", CONTRACT)
    assert program.source_text.splitlines()[-1] == "download_data()"


def test_extract_program_accepts_main_guard():
    body = "def download_data():\n    print('hi')\n\n\nif __name__ == \"__main__\":\n    download_data()"
    program = extract_program(f"```python\n{body}\n```", CONTRACT)
    assert program.source_text == body
    assert program.source_text.splitlines()[-1] == "    download_data()"


def test_extract_program_skips_blocks_without_entry_function():
    reply = f"```bash\npip install requests\n```\n\n```python\n{PROGRAM}\n```"
    assert extract_program(reply, CONTRACT).source_text == PROGRAM


def test_extract_program_nested_untagged_fence():
    reply = f"```\n```python\n{PROGRAM}\n```\n```"
    assert extract_program(reply, CONTRACT).source_text == PROGRAM


def test_extract_program_errors():
    with pytest.raises(NoCodeBlock):
        extract_program("def download_data():\n    pass\ndownload_data()", CONTRACT)
    with pytest.raises(MissingEntryFunction):
        extract_program("```python\ndef main():\n    pass\nmain()\n```", CONTRACT)


def test_generated_program_invariants():
    with pytest.raises(MissingEntryFunction):
        GeneratedProgram("def download_data():\n    pass\n", "download_data")
    raw = GeneratedProgram.unextracted("no code here", "download_data")
    assert raw.extracted is False
