"""Tests for registry loading, the index, handbooks and secrets."""

import logging
import os
import shutil

import pytest

import config
from agent import DataRequest, run_session
from conftest import TEST_SECRETS, write_source
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
from llm_client import LlmClient, ModelConfig, write_cassette
from prompting import build_fetch_prompt, build_selection_prompt
from registry import (
    UNKNOWN,
    AuthRecord,
    DataSourceEntry,
    Handbook,
    Registry,
    SecretRedactingFilter,
    SecretStore,
    env_var_name,
    find_placeholders,
    load_registry,
    parse_handbook,
    read_secrets_file,
    register_source,
    render_index,
    resolve_handbook,
    resolve_secret,
)

ALIASES = ("Census_boundary", "Census_demography", "ESRI_world_imagery", "NYT_COVID",
           "OpenStreetMap", "OpenTopography", "OpenWeather")
OSM_LINE = ("OpenStreetMap. You can download the administrative boundaries, street networks, "
            "points of interest (POIs) from OpenStreetMap.")


def test_full_registry_loads_every_source(full_registry):
    assert full_registry.order == ALIASES
    assert len(full_registry) == 7
    assert full_registry.entries["ESRI_world_imagery"].display_name == "ESRI World Imagery (for Export)"


def test_render_index_numbers_sources_in_alias_order(full_registry):
    lines = render_index(full_registry).split("\n")
    assert len(lines) == 7
    assert lines[0].startswith("1. US Census Bureau boundary. ")
    assert lines[4] == "5. " + OSM_LINE
    assert render_index(full_registry) == render_index(full_registry)


def test_render_index_single_source():
    entry = DataSourceEntry("OpenStreetMap", "OpenStreetMap", OSM_LINE.split(". ", 1)[1])
    reg = Registry({entry.alias: entry}, {entry.alias: Handbook(entry.alias, ["Use Overpass."])})
    assert render_index(reg) == "1. " + OSM_LINE


def test_empty_registry(tmp_path):
    reg = load_registry(str(tmp_path))
    assert len(reg) == 0
    with pytest.raises(EmptyRegistry):
        render_index(reg)


def test_missing_registry_directory(tmp_path):
    with pytest.raises(RegistryError):
        load_registry(str(tmp_path / "nowhere"))


def test_osm_handbook(full_registry):
    handbook = resolve_handbook(full_registry, "OpenStreetMap")
    assert len(handbook.guidelines) == 17
    assert handbook.guidelines[0].startswith("If the requested area is given in an English name")
    assert "ox.geocode_to_gdf(query, which_result=None, by_osmid=False, buffer_dist=None)" in handbook.guidelines[1]
    assert "'ISO3166-2'='US-PA'" in handbook.guidelines[2]
    assert "'SO3166-2'" not in handbook.guidelines[2]
    assert "gpd.sjoin(gdf, boundary, how='inner', op='within')" in handbook.guidelines[4]
    assert handbook.guidelines[8] == "Use GeoPandas, rather than OSGEO package, to create vectors."
    assert "GeoPackage" in handbook.guidelines[9]
    assert "driver='GPKG'" in handbook.template_program
    assert handbook.template_program.endswith("download_data()")
    assert handbook.reply_contract.entry_function == "download_data"
    assert handbook.runtime_id == "python3"
    assert handbook.auth_placeholders == ()


def test_keyed_sources_declare_their_placeholders(full_registry):
    for alias in ("Census_demography", "OpenTopography", "OpenWeather"):
        handbook = resolve_handbook(full_registry, alias)
        assert handbook.auth_placeholders == (f"{{{{KEY:{alias}:api_key}}}}",)


def test_resolve_handbook_is_exact_match(full_registry):
    with pytest.raises(UnknownAlias):
        resolve_handbook(full_registry, UNKNOWN)
    with pytest.raises(UnknownAlias):
        resolve_handbook(full_registry, "openstreetmap")


def test_lookup_accepts_alias_or_display_name(full_registry):
    assert full_registry.lookup("NYT_COVID") == "NYT_COVID"
    assert full_registry.lookup("US COVID-19 data by New York Times") == "NYT_COVID"
    assert full_registry.lookup("Google Maps") is None


def test_duplicate_alias(tmp_path):
    write_source(str(tmp_path), "a", "osm", "First.", ["x"])
    folder = write_source(str(tmp_path), "b", "osm", "Second.", ["y"])
    with open(os.path.join(folder, "entry.json"), "w", encoding="utf-8") as f:
        f.write('{"alias": "a", "display_name": "osm", "description": "Second."}')
    with pytest.raises(DuplicateAlias):
        load_registry(str(tmp_path))


def test_missing_handbook(tmp_path):
    folder = write_source(str(tmp_path), "a", "A", "Source a.", ["x"])
    os.remove(os.path.join(folder, "handbook.md"))
    with pytest.raises(MissingHandbook):
        load_registry(str(tmp_path))


def test_undeclared_placeholder_is_rejected(tmp_path):
    write_source(str(tmp_path), "Weather", "Weather", "Weather data.", ["Use appid={{KEY:Weather:api_key}}."])
    with pytest.raises(MalformedManifest):
        load_registry(str(tmp_path))


def test_half_written_placeholder_is_rejected(tmp_path):
    write_source(str(tmp_path), "Weather", "Weather", "Weather data.", ["Use appid={{KEY:Weather."],
                 placeholders=["{{KEY:Weather:api_key}}"])
    with pytest.raises(MalformedManifest):
        load_registry(str(tmp_path))


def test_bad_runtime_file(tmp_path):
    folder = write_source(str(tmp_path), "a", "A", "Source a.", ["x"])
    with open(os.path.join(folder, "runtime.txt"), "w", encoding="utf-8") as f:
        f.write("python3\n")
    with pytest.raises(MalformedManifest):
        load_registry(str(tmp_path))


def test_description_must_be_one_paragraph():
    with pytest.raises(MalformedManifest):
        DataSourceEntry("a", "A", "First paragraph.\n\nSecond paragraph.")


def test_parse_handbook_joins_continuation_lines():
    text = "1. First item\n   continues here.\n2. Second item.\n\n"
    assert parse_handbook(text) == ["First item\n   continues here.", "Second item."]
    with pytest.raises(MalformedManifest):
        parse_handbook("Preamble\n1. Item")


def test_plug_and_play(tmp_path, full_registry, runtime):
    root = str(tmp_path / "registry")
    shutil.copytree(config.REGISTRY_DIR, root)
    before = render_index(load_registry(root))

    folder = write_source(root, "USGS_earthquakes", "USGS earthquake catalog",
                          "Earthquake events worldwide with magnitude and depth.", ["Use the FDSN event API."])
    grown = load_registry(root)
    after = render_index(grown)
    assert len(after.split("\n")) == len(before.split("\n")) + 1
    strip = lambda text: {line.split(". ", 1)[1] for line in text.split("\n")}
    assert strip(after) - strip(before) == {"USGS earthquake catalog. Earthquake events worldwide with magnitude and depth."}
    assert grown.lookup("USGS earthquake catalog") == "USGS_earthquakes"

    # selectable in a replayed session with no code changes
    out = os.path.join(runtime.output_dir, "quakes.csv")
    request = DataRequest("Download all earthquakes above magnitude 6 in 2023", out, "csv")
    program = (f"def download_data():\n    with open({out!r}, 'w') as f:\n"
               "        f.write('time,mag\\n2023-02-06T01:17:34Z,7.8\\n')\n\ndownload_data()")
    cassette = str(tmp_path / "quakes.cassette")
    write_cassette(cassette, [
        (build_selection_prompt(request.text, after),
         "{'Explanation': 'Earthquake events.', 'Selected data source': 'USGS earthquake catalog'}"),
        (build_fetch_prompt(request.prompt_text(), "USGS_earthquakes", resolve_handbook(grown, "USGS_earthquakes")),
         f"```python\n{program}\n```"),
    ])
    report = run_session(request, grown, LlmClient(ModelConfig(transport="replay", cassette_path=cassette)), runtime)
    assert report.selected_source == "USGS_earthquakes"
    assert report.status == "success"
    assert report.output_files == [out]

    shutil.rmtree(folder)
    assert render_index(load_registry(root)) == before == render_index(full_registry)


def test_register_source_returns_new_registry(full_registry):
    entry = DataSourceEntry("Zillow", "Zillow housing", "Home value indices by ZIP code.")
    handbook = Handbook("Zillow", ["Download the CSV."])
    grown = register_source(full_registry, entry, handbook)
    assert len(grown) == 8 and len(full_registry) == 7
    for alias in full_registry.order:
        assert grown.entries[alias] == full_registry.entries[alias]
        assert grown.handbooks[alias] == full_registry.handbooks[alias]
    with pytest.raises(DuplicateAlias):
        register_source(grown, entry, handbook)
    with pytest.raises(AliasMismatch):
        register_source(full_registry, entry, Handbook("Other", ["x"]))


def test_reregistering_loaded_sources_round_trips(full_registry):
    rebuilt = Registry()
    for alias in full_registry.order:
        rebuilt = register_source(rebuilt, full_registry.entries[alias], full_registry.handbooks[alias])
    assert render_index(rebuilt) == render_index(full_registry)
    assert dict(rebuilt.handbooks) == dict(full_registry.handbooks)


# --- secrets ---------------------------------------------------------------------

def test_resolve_secret(secret_store):
    assert resolve_secret(secret_store, "{{KEY:OpenWeather:api_key}}") == TEST_SECRETS[("OpenWeather", "api_key")]
    with pytest.raises(MissingSecret):
        resolve_secret(SecretStore(), "{{KEY:OpenWeather:api_key}}")
    with pytest.raises(MalformedPlaceholder):
        resolve_secret(secret_store, "{{KEY:no-colon")


def test_environment_variables_take_precedence():
    store = SecretStore([AuthRecord("OpenWeather", "api_key", "from-file")],
                        environ={"GEODATA_KEY_OPENWEATHER_API_KEY": "from-env"})
    record = store.lookup("OpenWeather", "api_key")
    assert record.secret == "from-env"
    assert record.injection == "env-variable"


def test_env_var_name():
    assert env_var_name("Census_demography", "api-key") == "GEODATA_KEY_CENSUS_DEMOGRAPHY_API_KEY"


def test_secrets_file(tmp_path):
    path = tmp_path / "secrets.txt"
    path.write_text("# keys\nOpenWeather:api_key = abc123\n\nOpenTopography:api_key=xyz\n", encoding="utf-8")
    store = SecretStore(read_secrets_file(str(path)))
    assert store.lookup("OpenWeather", "api_key").secret == "abc123"
    assert store.environment()["GEODATA_KEY_OPENTOPOGRAPHY_API_KEY"] == "xyz"

    path.write_text("OpenWeather api_key abc123\n", encoding="utf-8")
    with pytest.raises(RegistryError):
        read_secrets_file(str(path))


def test_secrets_never_show_in_reprs(secret_store):
    for (alias, key), secret in TEST_SECRETS.items():
        assert secret not in repr(secret_store.lookup(alias, key))
        assert secret not in repr(secret_store)


def test_redact(secret_store):
    secret = TEST_SECRETS[("OpenWeather", "api_key")]
    assert secret_store.redact(f"GET /weather?appid={secret}") == "GET /weather?appid=***"


def test_find_placeholders():
    text = "a {{KEY:OpenWeather:api_key}} b {{KEY:OpenTopography:api_key}}"
    assert find_placeholders(text) == ["{{KEY:OpenWeather:api_key}}", "{{KEY:OpenTopography:api_key}}"]
    with pytest.raises(MalformedPlaceholder):
        find_placeholders("{{KEY:broken}}")


def test_redacting_filter_scrubs_log_records(caplog, secret_store):
    secret = TEST_SECRETS[("OpenTopography", "api_key")]
    caplog.handler.addFilter(SecretRedactingFilter(secret_store))
    logger = logging.getLogger("test_registry.redaction")
    with caplog.at_level(logging.INFO, logger="test_registry.redaction"):
        logger.info("requesting %s", f"https://portal.opentopography.org/API/globaldem?API_Key={secret}")
    assert secret not in caplog.text
    assert "API_Key=***" in caplog.text
