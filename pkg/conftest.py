"""
Shared pytest fixtures.

Everything runs offline: LLM replies come from cassettes or ScriptedClient,
HTTP traffic from the recordings under data/fixtures/http.
"""

import json
import os

import pytest

import config
from http_fixtures import make_session
from registry import AuthRecord, SecretStore, load_registry
from sandbox import RuntimeConfig

PROMPTS_DIR = os.path.join(config.FIXTURES_DIR, "prompts")

CHINA_REQUEST = ("1. Download all province boundaries of China mainland.\n"
                 "2. Save the downloaded data as polygons in GeoPackage format at: "
                 "E:\\China_mainland_Province_boundary.gpkg")
CHINA_FETCH_REQUEST = ("1. Download all province boundaries of China mainland.\n"
                       "2. Save the downloaded data as polygons in GeoPackage format at: E:\\dwnloaded_data.gpkg")

TEST_SECRETS = {
    ("OpenWeather", "api_key"): "ow-5e3f9a0c71d24b8e",
    ("Census_demography", "api_key"): "census-44b1d0e2aa9f",
    ("OpenTopography", "api_key"): "topo-0c8d7e6f5a4b",
}


def read_golden(name):
    with open(os.path.join(PROMPTS_DIR, name), "r", encoding="utf-8", newline="") as f:
        return f.read()


def write_source(root, alias, display_name, description, guidelines, template=None, placeholders=()):
    """Drop one source folder into <root>/sources."""
    folder = os.path.join(root, "sources", alias)
    os.makedirs(folder, exist_ok=True)
    manifest = {"alias": alias, "display_name": display_name, "description": description}
    if placeholders:
        manifest["auth_placeholders"] = list(placeholders)
    with open(os.path.join(folder, "entry.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f)
    with open(os.path.join(folder, "handbook.md"), "w", encoding="utf-8") as f:
        f.write("".join(f"{n}. {item}\n" for n, item in enumerate(guidelines, 1)))
    if template is not None:
        with open(os.path.join(folder, "template.txt"), "w", encoding="utf-8") as f:
            f.write(template + "\n")
    return folder


@pytest.fixture(scope="session")
def full_registry():
    return load_registry(config.REGISTRY_DIR)


@pytest.fixture
def fixture_session():
    return make_session(config.HTTP_FIXTURES_DIR)


@pytest.fixture
def secret_store():
    records = [AuthRecord(alias, key, secret) for (alias, key), secret in TEST_SECRETS.items()]
    return SecretStore(records, environ={})


@pytest.fixture
def runtime(tmp_path):
    """Python sandbox replaying the recorded HTTP fixtures with the network blocked."""
    return RuntimeConfig.for_runtime(
        "python3", str(tmp_path / "work"), str(tmp_path / "out"),
        timeout=60, network_allowed=False, http_fixtures=config.HTTP_FIXTURES_DIR,
    )
