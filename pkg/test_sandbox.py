"""Tests for secret injection and sandboxed execution."""

import os
import textwrap
from dataclasses import replace

import pytest

import config
from conftest import TEST_SECRETS
from errors import InterpreterMissing, MissingSecret
from prompting import GeneratedProgram
from registry import SecretStore
from sandbox import TRUNCATION_MARKER, RuntimeConfig, execute, inject_secrets


def program(body, imports=""):
    """Wrap a function body into a program with the download_data() contract."""
    source = f"{imports}\n\ndef download_data():\n{textwrap.indent(textwrap.dedent(body), '    ')}\n\ndownload_data()"
    return GeneratedProgram(source.lstrip("\n"), "download_data")


def test_inject_secrets(secret_store):
    plain = program("print('no keys')")
    assert inject_secrets(plain, secret_store) is plain

    keyed = program("url = 'https://api.openweathermap.org/data/2.5/weather?appid={{KEY:OpenWeather:api_key}}'")
    injected = inject_secrets(keyed, secret_store)
    secret = TEST_SECRETS[("OpenWeather", "api_key")]
    assert injected.source_text == keyed.source_text.replace("{{KEY:OpenWeather:api_key}}", secret)
    assert "{{KEY:" not in injected.source_text

    with pytest.raises(MissingSecret):
        inject_secrets(keyed, SecretStore())


def test_successful_program(runtime):
    result = execute(program("print('ok')"), runtime)
    assert result.succeeded
    assert result.exit_code == 0
    assert result.stdout == "ok\n"
    assert not result.timed_out
    assert os.path.basename(result.program_path) == "generated_step_1.py"


def test_failing_program_reports_traceback(runtime):
    result = execute(program("raise ValueError('bad bbox')"), runtime, attempt=3)
    assert not result.succeeded
    assert result.exit_code != 0
    assert "Traceback" in result.stderr
    assert "ValueError: bad bbox" in result.stderr
    assert result.program_path.endswith("generated_step_3.py")


def test_timeout_kills_the_program(runtime):
    short = replace(runtime, timeout=1.0)
    result = execute(program("time.sleep(60)", imports="import time"), short)
    assert result.timed_out
    assert not result.succeeded
    assert 1.0 <= result.duration < 1.0 + config.KILL_GRACE_SECONDS + 5


def test_produced_files_are_listed(runtime):
    target = os.path.join(runtime.output_dir, "nested", "cuba.geojson")
    content = '{"type": "FeatureCollection", "features": []}'
    body = f"""
    os.makedirs(os.path.dirname({target!r}), exist_ok=True)
    with open({target!r}, 'w') as f:
        f.write({content!r})
    with open('scratch.txt', 'w') as f:
        f.write('working file')
    """
    result = execute(program(body, imports="import os"), runtime)
    assert result.succeeded, result.stderr
    assert result.produced_files == ((os.path.abspath(target), len(content)),)


def test_stream_cap_keeps_the_tail(runtime):
    capped = replace(runtime, stream_cap=100)
    result = execute(program("print('x' * 5000)\nprint('LAST LINE')"), capped)
    assert result.stdout.startswith(TRUNCATION_MARKER.format(count=5011 - 100))
    assert result.stdout.endswith("LAST LINE\n")


def test_environment_is_controlled(runtime, monkeypatch):
    monkeypatch.setenv("GEODATA_LLM_API_KEY", "should-not-leak")
    keyed = replace(runtime, env={"GEODATA_KEY_OPENWEATHER_API_KEY": "from-store"})
    body = """
    print(os.environ.get('GEODATA_LLM_API_KEY'))
    print(os.environ.get('GEODATA_KEY_OPENWEATHER_API_KEY'))
    """
    result = execute(program(body, imports="import os"), keyed)
    assert result.stdout.split() == ["None", "from-store"]


def test_network_is_blocked(runtime):
    no_fixtures = replace(runtime, http_fixtures=None)
    result = execute(program("socket.create_connection(('93.184.216.34', 80), timeout=5)",
                             imports="import socket"), no_fixtures)
    assert not result.succeeded
    assert "network access is disabled" in result.stderr


def test_programs_read_recorded_http(runtime):
    body = """
    response = requests.get('https://nominatim.openstreetmap.org/search',
                            params={'q': 'Yellowstone National Park', 'format': 'json', 'limit': 1},
                            timeout=30)
    response.raise_for_status()
    print(response.json()[0]['boundingbox'])
    """
    result = execute(program(body, imports="import requests"), runtime)
    assert result.succeeded, result.stderr
    assert "44.1322166" in result.stdout


def test_unknown_http_request_fails_like_a_dead_network(runtime):
    body = "requests.get('https://example.org/not-recorded', timeout=5)"
    result = execute(program(body, imports="import requests"), runtime)
    assert not result.succeeded
    assert "ConnectionError" in result.stderr


def test_missing_interpreter(tmp_path):
    runtime = RuntimeConfig(("no-such-interpreter-3f9c",), str(tmp_path / "w"), str(tmp_path / "o"))
    with pytest.raises(InterpreterMissing):
        execute(program("print('x')"), runtime)
    with pytest.raises(InterpreterMissing):
        RuntimeConfig.for_runtime("cobol", str(tmp_path / "w"), str(tmp_path / "o"))
