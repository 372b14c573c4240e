"""
Request builders, validators and small clients for the concrete data sources:
Overpass, Nominatim geocoding, imagery tiles, Census cartographic boundaries
and ACS tables, OpenWeather, NYT COVID tables and OpenTopography DEMs.

Builders are pure. Clients take a requests.Session so tests can hand in one
backed by recorded fixtures (see http_fixtures.make_session). API keys only
ever appear as {{KEY:<alias>:<key>}} placeholder tokens.
"""

import csv
import io
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from typing import Optional, Union

import numpy as np
import pandas as pd
from PIL import Image

import config
from errors import (
    BadVariableCode,
    BBoxError,
    DimensionMismatch,
    EmptyRange,
    EmptyVariables,
    ForecastTooLong,
    GridTooLarge,
    HistoricalTooEarly,
    HttpError,
    IncompleteGrid,
    InvalidQuery,
    LatitudeOutOfRange,
    MalformedCsv,
    NoMatch,
    NotAnImage,
    OverpassRemark,
    RangeError,
    ScopeRequired,
    UnknownDemType,
)
from http_fixtures import make_session

logger = logging.getLogger(__name__)


# --- geometry primitives ----------------------------------------------------------

@dataclass(frozen=True)
class BBox:
    south: float
    west: float
    north: float
    east: float

    def __post_init__(self):
        if not (-90 <= self.south < self.north <= 90):
            raise BBoxError(f"invalid latitude span {self.south}..{self.north}")
        if not (-180 <= self.west < self.east <= 180):
            raise BBoxError(f"invalid longitude span {self.west}..{self.east} (antimeridian boxes are not supported)")

    @property
    def center(self):
        """(lat, lon) of the box center."""
        return (self.south + self.north) / 2, (self.west + self.east) / 2

    def contains(self, lon, lat):
        return self.west <= lon <= self.east and self.south <= lat <= self.north


@dataclass(frozen=True)
class TileCoord:
    z: int
    x: int
    y: int

    def __post_init__(self):
        n = 1 << self.z if self.z >= 0 else 0
        if self.z < 0 or not (0 <= self.x < n and 0 <= self.y < n):
            raise InvalidQuery(f"tile {self.z}/{self.x}/{self.y} out of range")


@dataclass(frozen=True)
class TileGrid:
    z: int
    x0: int
    y0: int
    columns: int
    rows: int

    @property
    def tiles(self):
        """Row-major: top row first, west to east."""
        return [TileCoord(self.z, self.x0 + c, self.y0 + r)
                for r in range(self.rows) for c in range(self.columns)]

    def __iter__(self):
        return iter(self.tiles)

    def __len__(self):
        return self.columns * self.rows


@dataclass(frozen=True)
class MosaicImage:
    width: int
    height: int
    pixels: np.ndarray
    geotransform: tuple

    def __post_init__(self):
        if self.width % config.TILE_SIZE or self.height % config.TILE_SIZE:
            raise DimensionMismatch("mosaic size must be a multiple of the tile size")
        if self.pixels.shape != (self.height, self.width, 4):
            raise DimensionMismatch(f"pixel array {self.pixels.shape} does not match {self.width}x{self.height} RGBA")


def _fx(lon, n):
    return (lon + 180.0) / 360.0 * n


def _fy(lat, n):
    phi = math.radians(lat)
    return (1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * n


def lonlat_to_tile(lon, lat, z):
    if abs(lat) > config.WEB_MERCATOR_MAX_LAT:
        raise LatitudeOutOfRange(f"latitude {lat} is beyond the Web Mercator limit")
    n = 1 << z
    x = min(max(int(math.floor(_fx(lon, n))), 0), n - 1)
    y = min(max(int(math.floor(_fy(lat, n))), 0), n - 1)
    return TileCoord(z, x, y)


def _tile_lat(y, n):
    return math.degrees(math.atan(math.sinh(math.pi * (1 - 2 * y / n))))


def tile_bbox(t):
    n = 1 << t.z
    return BBox(
        south=_tile_lat(t.y + 1, n),
        west=t.x / n * 360.0 - 180.0,
        north=_tile_lat(t.y, n),
        east=(t.x + 1) / n * 360.0 - 180.0,
    )


def tiles_covering(bbox, z, max_tiles=config.MAX_GRID_TILES):
    """
    Smallest tile rectangle covering bbox at zoom z.

    Tiles that only touch the box along an edge are left out.
    """
    if not 0 <= z <= config.MAX_ZOOM:
        raise InvalidQuery(f"zoom {z} outside 0..{config.MAX_ZOOM}")
    n = 1 << z
    limit = config.WEB_MERCATOR_MAX_LAT
    north, south = min(bbox.north, limit), max(bbox.south, -limit)
    x0 = max(int(math.floor(_fx(bbox.west, n))), 0)
    x1 = min(int(math.ceil(_fx(bbox.east, n))) - 1, n - 1)
    y0 = max(int(math.floor(_fy(north, n))), 0)
    y1 = min(int(math.ceil(_fy(south, n))) - 1, n - 1)
    x1, y1 = max(x1, x0), max(y1, y0)
    grid = TileGrid(z, x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    if len(grid) > max_tiles:
        raise GridTooLarge(f"{grid.columns}x{grid.rows} tiles at zoom {z} exceeds the cap of {max_tiles}")
    return grid


# --- tiles ------------------------------------------------------------------------

IMAGE_SIGNATURES = (b"\x89PNG\r\n\x1a\n", b"\xff\xd8\xff", b"GIF87a", b"GIF89a", b"II*\x00", b"MM\x00*")


def looks_like_image(data):
    return data.startswith(IMAGE_SIGNATURES) or (data[:4] == b"RIFF" and data[8:12] == b"WEBP")


def _get(session, url, **kwargs):
    response = session.get(url, timeout=config.HTTP_TIMEOUT, **kwargs)
    if response.status_code != 200:
        raise HttpError(f"HTTP {response.status_code} from {url}", status=response.status_code, url=url)
    return response


def fetch_tile(t, url_template=config.IMAGERY_TILE_TEMPLATE, session=None):
    if not all(marker in url_template for marker in ("{z}", "{x}", "{y}")):
        raise InvalidQuery("tile URL template needs {z}, {x} and {y}")
    session = session or make_session()
    url = url_template.format(z=t.z, x=t.x, y=t.y)
    data = _get(session, url).content
    if not looks_like_image(data):
        raise NotAnImage(f"tile {t.z}/{t.x}/{t.y} is not an image ({len(data)} bytes)")
    return data


def fetch_tiles(grid, url_template=config.IMAGERY_TILE_TEMPLATE, session=None, workers=config.TILE_WORKERS):
    """Fetch every tile of the grid with bounded parallelism; returns {TileCoord: bytes}."""
    session = session or make_session()
    tiles = grid.tiles
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        payloads = list(pool.map(lambda t: fetch_tile(t, url_template, session), tiles))
    logger.info("Fetched %d tiles at zoom %d", len(tiles), grid.z)
    return dict(zip(tiles, payloads))


def decode_tile(data):
    with Image.open(io.BytesIO(data)) as image:
        return np.asarray(image.convert("RGBA"), dtype=np.uint8)


def mosaic(grid, images):
    """
    Place tile rasters into one RGBA image.

    Args:
        grid: TileGrid the images belong to
        images: {TileCoord: array} or a row-major sequence of arrays

    Raises:
        IncompleteGrid: an image is missing for some cell
        DimensionMismatch: an image is not 256x256
    """
    size = config.TILE_SIZE
    tiles = grid.tiles
    if isinstance(images, dict):
        missing = [t for t in tiles if t not in images]
        if missing:
            raise IncompleteGrid(f"{len(missing)} tile(s) missing, first {missing[0]}")
        rasters = [images[t] for t in tiles]
    else:
        rasters = list(images)
        if len(rasters) != len(tiles):
            raise IncompleteGrid(f"expected {len(tiles)} images, got {len(rasters)}")

    pixels = np.zeros((grid.rows * size, grid.columns * size, 4), dtype=np.uint8)
    for index, raster in enumerate(rasters):
        raster = np.asarray(raster, dtype=np.uint8)
        if raster.shape[:2] != (size, size):
            raise DimensionMismatch(f"tile {tiles[index]} is {raster.shape[1]}x{raster.shape[0]}, expected {size}x{size}")
        if raster.ndim == 3 and raster.shape[2] == 3:
            raster = np.dstack([raster, np.full((size, size), 255, dtype=np.uint8)])
        row, col = divmod(index, grid.columns)
        pixels[row * size:(row + 1) * size, col * size:(col + 1) * size] = raster

    world = 2 * math.pi * config.EARTH_RADIUS
    tile_span = world / (1 << grid.z)
    pixel_size = tile_span / size
    origin_x = grid.x0 * tile_span - world / 2
    origin_y = world / 2 - grid.y0 * tile_span
    return MosaicImage(grid.columns * size, grid.rows * size, pixels,
                       (origin_x, origin_y, pixel_size, pixel_size))


def world_file_text(geotransform):
    origin_x, origin_y, pixel_x, pixel_y = geotransform
    values = (pixel_x, 0.0, 0.0, -pixel_y, origin_x + pixel_x / 2, origin_y - pixel_y / 2)
    return "".join(f"{v:.6f}\n" for v in values)


WORLD_FILE_EXTENSIONS = {".png": ".pgw", ".jpg": ".jgw", ".jpeg": ".jgw", ".tif": ".tfw", ".tiff": ".tfw"}


def save_mosaic(image, path):
    """Write the mosaic as PNG plus a world-file sidecar; returns both paths."""
    base, ext = os.path.splitext(path)
    sidecar = base + WORLD_FILE_EXTENSIONS.get(ext.lower(), ".wld")
    Image.fromarray(image.pixels, "RGBA").save(path, format="PNG")
    with open(sidecar, "w", encoding="ascii", newline="\n") as f:
        f.write(world_file_text(image.geotransform))
    logger.info("Saved %dx%d mosaic to %s", image.width, image.height, path)
    return path, sidecar


# --- OpenStreetMap ----------------------------------------------------------------

ISO3166_2 = re.compile(r"^[A-Z]{2}-[A-Z0-9]{1,3}$")


def build_admin_boundary_query(country_code, child_admin_level):
    """Overpass query for all relations at child_admin_level inside a country."""
    if not 1 <= int(child_admin_level) <= 11:
        raise InvalidQuery(f"admin level {child_admin_level} outside 1..11")
    code = country_code.strip().upper()
    name = code.lower()
    return "\n".join([
        "[out:json];",
        f'area["ISO3166-1"="{code}"][admin_level=2]->.{name};',
        f'relation(area.{name})["admin_level"="{int(child_admin_level)}"];',
        "out geom;",
    ])


def _quote(value):
    return value.replace("\\", "\\\\").replace("'", "\\'")


def build_poi_query(region_key, amenity):
    """
    Overpass query for amenity POIs within a region.

    region_key is an ISO3166-2 code ("US-PA" or "ISO3166-2=US-PA"); anything
    else is matched as an English place name.
    """
    if not amenity or not amenity.strip():
        raise InvalidQuery("amenity is empty")
    region = region_key.strip()
    code = region.split("=", 1)[1].strip() if region.upper().startswith("ISO3166-2=") else region
    if ISO3166_2.match(code):
        area = f"area['ISO3166-2'='{code}']"
    else:
        area = f"area[name:en='{_quote(region)}']"
    return f"{area}->.searchArea;(nwr[amenity='{_quote(amenity.strip())}'](area.searchArea));out center;"


def execute_overpass(query, endpoint=config.OVERPASS_ENDPOINT, session=None):
    """
    POST a query to an Overpass interpreter and return the body text.

    Raises:
        HttpError: non-200 status (429 when rate limited)
        OverpassRemark: the JSON body carries a remark instead of data
    """
    if not query or not query.strip():
        raise InvalidQuery("empty Overpass query")
    session = session or make_session()
    response = session.post(endpoint, data={"data": query}, timeout=config.HTTP_TIMEOUT)
    if response.status_code != 200:
        raise HttpError(f"Overpass returned HTTP {response.status_code}", status=response.status_code, url=endpoint)
    text = response.text
    try:
        document = response.json()
    except ValueError:
        return text
    if isinstance(document, dict) and document.get("remark"):
        raise OverpassRemark(document["remark"])
    logger.debug("Overpass returned %d bytes", len(text))
    return text


def geocode(place_name, session=None):
    """First Nominatim match for a free-form place name, as (BBox, display name)."""
    if not place_name or not place_name.strip():
        raise InvalidQuery("place name is empty")
    session = session or make_session()
    params = {"q": place_name.strip(), "format": "json", "limit": 1}
    results = _get(session, config.NOMINATIM_SEARCH_URL, params=params).json()
    if not results:
        raise NoMatch(f"no geocoding result for {place_name!r}")
    first = results[0]
    south, north, west, east = (float(v) for v in first["boundingbox"])
    return BBox(south, west, north, east), first.get("display_name", place_name)


# --- US Census --------------------------------------------------------------------

CENSUS_LAYERS = ("state", "county", "tract", "bg")
ACS_VARIABLE = re.compile(r"^[A-Z]+\d+[A-Z]?_\d{3}[A-Z]{1,2}$")


def _scope(scope):
    if scope is None or str(scope).lower() in ("us", "nation"):
        return "us"
    text = str(scope).strip()
    if not text.isdigit() or not 1 <= int(text) <= 78:
        raise ScopeRequired(f"scope must be 'us' or a state FIPS code, got {scope!r}")
    return f"{int(text):02d}"


def build_census_boundary_url(year, layer, scope="us"):
    if layer not in CENSUS_LAYERS:
        raise InvalidQuery(f"unknown boundary layer {layer!r}")
    scope_text = _scope(scope)
    if layer in ("tract", "bg") and scope_text == "us":
        raise ScopeRequired(f"{layer} boundaries are published per state; give a state FIPS code")
    return config.CENSUS_BOUNDARY_TEMPLATE.format(year=int(year), scope=scope_text, layer=layer)


def build_acs_url(year, variables, geography):
    """
    ACS 5-year query URL.

    Args:
        year: survey year
        variables: variable codes such as B01003_001E
        geography: (for clause, in clause or None), e.g. ("county:*", "state:42")
    """
    variables = list(variables)
    if not variables:
        raise EmptyVariables("at least one ACS variable is required")
    bad = [v for v in variables if not ACS_VARIABLE.match(v)]
    if bad:
        raise BadVariableCode(f"not ACS variable codes: {bad}")
    for_clause, in_clause = geography
    query = f"get=NAME,{','.join(variables)}&for={for_clause}"
    if in_clause:
        query += f"&in={in_clause}"
    if config.ACS_USE_KEY:
        query += f"&key={config.ACS_KEY_PLACEHOLDER}"
    return f"{config.ACS_ENDPOINT_TEMPLATE.format(year=int(year))}?{query}"


# --- weather ----------------------------------------------------------------------

WEATHER_KINDS = ("historical", "current", "forecast")
GRANULARITIES = ("hourly", "three_hour", "daily")
FORECAST_LIMITS = {"hourly": timedelta(days=4), "three_hour": timedelta(days=5), "daily": timedelta(days=16)}
FORECAST_STEPS = {"hourly": timedelta(hours=1), "three_hour": timedelta(hours=3), "daily": timedelta(days=1)}
HISTORY_START = datetime(2023, 8, 1, tzinfo=timezone.utc)


def _utc(moment):
    return moment.replace(tzinfo=timezone.utc) if moment.tzinfo is None else moment.astimezone(timezone.utc)


@dataclass(frozen=True)
class WeatherQuerySpec:
    kind: str
    granularity: str
    location: Union[BBox, tuple]
    start: datetime
    end: datetime
    reference_now: datetime

    def __post_init__(self):
        if self.kind not in WEATHER_KINDS:
            raise InvalidQuery(f"unknown weather kind {self.kind!r}")
        if self.granularity not in GRANULARITIES:
            raise InvalidQuery(f"unknown granularity {self.granularity!r}")

    @property
    def lat_lon(self):
        return self.location.center if isinstance(self.location, BBox) else tuple(self.location)


def validate_weather_request(query):
    """Check the range against the API limits; returns the query unchanged."""
    start, end, now = _utc(query.start), _utc(query.end), _utc(query.reference_now)
    if end <= start:
        raise EmptyRange(f"weather range {query.start} .. {query.end} is empty")
    if query.kind == "historical" and start < HISTORY_START:
        raise HistoricalTooEarly(f"historical data starts at {HISTORY_START:%Y-%m-%d}, asked for {start:%Y-%m-%d}")
    if query.kind == "forecast":
        limit = FORECAST_LIMITS[query.granularity]
        if end - now > limit:
            raise ForecastTooLong(f"{query.granularity} forecasts reach {limit.days} days ahead")
    return query


def build_weather_request(query):
    """URL and parameters for a validated weather query (API key as placeholder)."""
    validate_weather_request(query)
    lat, lon = query.lat_lon
    url = config.WEATHER_ENDPOINTS[(query.kind, query.granularity)]
    params = {"lat": round(lat, 6), "lon": round(lon, 6), "appid": config.WEATHER_KEY_PLACEHOLDER}
    if query.kind == "historical" and query.granularity == "daily":
        params["date"] = _utc(query.start).date().isoformat()
    elif query.kind == "historical":
        params.update(type="hour", start=int(_utc(query.start).timestamp()), end=int(_utc(query.end).timestamp()))
    elif query.kind == "forecast":
        span = _utc(query.end) - _utc(query.reference_now)
        params["cnt"] = max(1, math.ceil(span / FORECAST_STEPS[query.granularity]))
    return url, params


# --- COVID-19 ---------------------------------------------------------------------

COVID_FIRST_DAY = date(2020, 1, 21)
COVID_LAST_DAY = date(2023, 3, 23)
COVID_LEVELS = ("state", "county")


def _as_date(value):
    return date.fromisoformat(value) if isinstance(value, str) else value


@dataclass(frozen=True)
class CovidQuerySpec:
    level: str
    start: date
    end: date
    state: Optional[str] = None
    # county names repeat across states; pair with state to pin one down
    county: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "start", _as_date(self.start))
        object.__setattr__(self, "end", _as_date(self.end))
        if self.level not in COVID_LEVELS:
            raise InvalidQuery(f"unknown COVID table level {self.level!r}")
        if self.start > self.end:
            raise RangeError(f"start {self.start} is after end {self.end}")
        if self.start < COVID_FIRST_DAY or self.end > COVID_LAST_DAY:
            raise RangeError(f"COVID data covers {COVID_FIRST_DAY} .. {COVID_LAST_DAY}")
        if self.county and self.level != "county":
            raise InvalidQuery("a county filter needs the county-level table")


def check_csv_shape(text):
    """Every record must have as many fields as the header."""
    if not text.strip():
        raise MalformedCsv("empty CSV")
    try:
        reader = csv.reader(io.StringIO(text, newline=""), strict=True)
        header = next(reader)
        for record in reader:
            if record and len(record) != len(header):
                raise MalformedCsv(f"line {reader.line_num}: {len(record)} fields, header has {len(header)}")
    except csv.Error as exc:
        raise MalformedCsv(str(exc)) from exc
    return header


def fetch_covid(query, session=None):
    """
    Download the cumulative table for the query's level and keep the rows in
    its date range, narrowed to the state and county columns when given.
    """
    session = session or make_session()
    url = config.COVID_CSV_URLS[query.level]
    text = _get(session, url).text
    check_csv_shape(text)
    table = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
    # ISO dates compare correctly as strings
    mask = (table["date"] >= query.start.isoformat()) & (table["date"] <= query.end.isoformat())
    if query.state:
        mask &= table["state"] == query.state
    if query.county:
        mask &= table["county"] == query.county
    rows = table[mask].reset_index(drop=True)
    logger.info("COVID %s table: kept %d of %d rows", query.level, len(rows), len(table))
    return rows


# --- DEM --------------------------------------------------------------------------

DEM_TYPES = ("SRTMGL3", "SRTMGL1", "SRTMGL1_E", "AW3D30", "SRTM15Plus", "NASADEM", "COP30",
             "EU_DTM", "GEDI_L3", "GEBCOIceTopo", "GEBCOSubIceTopo")


@dataclass(frozen=True)
class DemQuerySpec:
    demtype: str
    bbox: BBox

    def __post_init__(self):
        if self.demtype not in DEM_TYPES:
            raise UnknownDemType(f"unknown DEM type {self.demtype!r}")


def build_dem_request(query, output_format="GTiff"):
    params = {
        "demtype": query.demtype,
        "south": query.bbox.south,
        "north": query.bbox.north,
        "west": query.bbox.west,
        "east": query.bbox.east,
        "outputFormat": output_format,
        "API_Key": config.DEM_KEY_PLACEHOLDER,
    }
    return config.DEM_ENDPOINT, params
