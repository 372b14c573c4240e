"""
Runtime configuration for the geodata retrieval agent.

Paths are resolved from the location of this file so the CLI, the Flask server
and the tests find the registry and fixtures regardless of the working
directory. Operational values can be overridden with GEODATA_* environment
variables (a .env file next to the code is loaded first).
"""

import os
import sys

from dotenv import load_dotenv

BASE_DIR = os.path.dirname(os.path.abspath(__file__))

# .env values never override variables already set in the environment
load_dotenv(os.path.join(BASE_DIR, ".env"))


def _env(name, default):
    return os.environ.get(name, default)


def _env_int(name, default):
    return int(os.environ.get(name, default))


def _env_float(name, default):
    return float(os.environ.get(name, default))


REGISTRY_DIR = _env("GEODATA_REGISTRY", os.path.join(BASE_DIR, "registry"))
FIXTURES_DIR = os.path.join(BASE_DIR, "data", "fixtures")
HTTP_FIXTURES_DIR = os.path.join(FIXTURES_DIR, "http")
SANDBOX_SITE_DIR = os.path.join(BASE_DIR, "sandbox_site")
SECRETS_FILE = _env("GEODATA_SECRETS_FILE", "")

# LLM endpoint (chat-completion wire format)
LLM_ENDPOINT = _env("GEODATA_LLM_ENDPOINT", "https://api.openai.com/v1/chat/completions")
LLM_MODEL = _env("GEODATA_LLM_MODEL", "gpt-4o")
LLM_API_KEY = _env("GEODATA_LLM_API_KEY", "")
LLM_TEMPERATURE = _env_float("GEODATA_LLM_TEMPERATURE", 0.0)
LLM_MAX_REPLY_TOKENS = _env_int("GEODATA_LLM_MAX_TOKENS", 4096)
LLM_TIMEOUT = _env_float("GEODATA_LLM_TIMEOUT", 120.0)
DIGEST_ALGORITHM = "sha256"

# Agent loop
MAX_DEBUG_ITERATIONS = _env_int("GEODATA_MAX_DEBUG", 10)
SELECTION_RETRIES = _env_int("GEODATA_SELECTION_RETRIES", 1)
ERROR_REPORT_CAP = 16 * 1024

# Sandbox
EXECUTION_TIMEOUT = _env_float("GEODATA_TIMEOUT", 300.0)
KILL_GRACE_SECONDS = 5.0
STREAM_CAP_BYTES = _env_int("GEODATA_STREAM_CAP", 1024 * 1024)
ENV_PASSTHROUGH = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "TEMP", "TMP",
                   "SYSTEMROOT", "SSL_CERT_FILE", "REQUESTS_CA_BUNDLE", "PROJ_LIB", "GDAL_DATA")
# runtime_id -> (interpreter command, program file extension)
RUNTIMES = {
    "python3": ([sys.executable], ".py"),
}

# Tiles
TILE_SIZE = 256
MAX_ZOOM = _env_int("GEODATA_MAX_ZOOM", 19)
MAX_GRID_TILES = _env_int("GEODATA_MAX_GRID_TILES", 1024)
TILE_WORKERS = _env_int("GEODATA_TILE_WORKERS", 4)
EARTH_RADIUS = 6378137.0
WEB_MERCATOR_MAX_LAT = 85.0511

# Public services
OVERPASS_ENDPOINT = _env("GEODATA_OVERPASS_ENDPOINT", "https://overpass-api.de/api/interpreter")
NOMINATIM_SEARCH_URL = _env("GEODATA_NOMINATIM_URL", "https://nominatim.openstreetmap.org/search")
IMAGERY_TILE_TEMPLATE = _env(
    "GEODATA_TILE_TEMPLATE",
    "https://server.arcgisonline.com/ArcGIS/rest/services/World_Imagery/MapServer/tile/{z}/{y}/{x}",
)
CENSUS_BOUNDARY_TEMPLATE = "https://www2.census.gov/geo/tiger/GENZ{year}/shp/cb_{year}_{scope}_{layer}_500k.zip"
ACS_ENDPOINT_TEMPLATE = "https://api.census.gov/data/{year}/acs/acs5"
ACS_KEY_PLACEHOLDER = "{{KEY:Census_demography:api_key}}"
ACS_USE_KEY = _env("GEODATA_ACS_USE_KEY", "1") == "1"
COVID_CSV_URLS = {
    "state": "https://raw.githubusercontent.com/nytimes/covid-19-data/master/us-states.csv",
    "county": "https://raw.githubusercontent.com/nytimes/covid-19-data/master/us-counties.csv",
}
DEM_ENDPOINT = "https://portal.opentopography.org/API/globaldem"
DEM_KEY_PLACEHOLDER = "{{KEY:OpenTopography:api_key}}"
WEATHER_KEY_PLACEHOLDER = "{{KEY:OpenWeather:api_key}}"
# (kind, granularity) -> endpoint
WEATHER_ENDPOINTS = {
    ("historical", "hourly"): "https://history.openweathermap.org/data/2.5/history/city",
    ("historical", "daily"): "https://api.openweathermap.org/data/3.0/onecall/day_summary",
    ("current", "hourly"): "https://api.openweathermap.org/data/2.5/weather",
    ("current", "three_hour"): "https://api.openweathermap.org/data/2.5/weather",
    ("current", "daily"): "https://api.openweathermap.org/data/2.5/weather",
    ("forecast", "hourly"): "https://pro.openweathermap.org/data/2.5/forecast/hourly",
    ("forecast", "three_hour"): "https://api.openweathermap.org/data/2.5/forecast",
    ("forecast", "daily"): "https://api.openweathermap.org/data/2.5/forecast/daily",
}
HTTP_TIMEOUT = _env_float("GEODATA_HTTP_TIMEOUT", 60.0)
USER_AGENT = "geodata-retrieve-agent/1.0"
