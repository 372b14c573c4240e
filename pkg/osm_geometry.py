"""
OpenStreetMap geometry assembly.

Parses Overpass JSON (queried with `out geom;`) into elements, joins the way
members of a relation into rings, and assembles multipolygons with holes.
The segment joining runs on a networkx multigraph whose nodes are segment
endpoints and whose edges are the segments themselves, so a relation split
into any number of ways in any direction comes back as the same rings.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import networkx as nx
import numpy as np
import shapely
from shapely.geometry import LinearRing, LineString, MultiPolygon, Point, Polygon, mapping
from shapely.geometry.polygon import orient

from errors import EmptyRelation, GeometryError, IoError, ParseError

logger = logging.getLogger(__name__)

KINDS = ("node", "way", "relation")
EXCLUDED_KEYS = frozenset({"geometry", "members"})


@dataclass(frozen=True)
class Member:
    kind: str
    role: str
    geometry: tuple = ()
    ref: Optional[int] = None


@dataclass(frozen=True)
class OsmElement:
    id: int
    kind: str
    tags: dict = field(default_factory=dict)
    geometry: Optional[tuple] = None
    members: Optional[tuple] = None
    center: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParseError(f"unknown element kind {self.kind!r}")
        if self.geometry is not None:
            if self.kind == "node" and len(self.geometry) != 1:
                raise ParseError(f"node {self.id} must have exactly one point")
            if self.kind == "way" and len(self.geometry) < 2:
                raise ParseError(f"way {self.id} has fewer than two points")


@dataclass(frozen=True)
class PathChain:
    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(tuple(p) for p in self.points))
        if len(self.points) < 2:
            raise GeometryError("a chain needs at least two points")

    @property
    def closed(self):
        return self.points[0] == self.points[-1]


@dataclass(frozen=True)
class MultiPolygonGeom:
    """Polygons as (outer ring, hole rings); rings are closed point tuples."""
    polygons: tuple
    warnings: tuple = ()

    def shapely_polygons(self):
        return [Polygon(outer, list(holes)) for outer, holes in self.polygons]

    def to_shapely(self):
        return MultiPolygon(self.shapely_polygons())

    @property
    def area(self):
        return float(sum(p.area for p in self.shapely_polygons()))

    def contains_points(self, xs, ys):
        xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
        inside = np.zeros(xs.shape, dtype=bool)
        for polygon in self.shapely_polygons():
            inside |= shapely.contains_xy(polygon, xs, ys)
        return inside


@dataclass(frozen=True)
class FeatureRecord:
    geometry: object
    properties: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, value in self.properties.items():
            if not isinstance(value, str):
                raise GeometryError(f"property {key!r} is not a flattened string")


# --- parsing ----------------------------------------------------------------------

def _points(raw_points):
    # `out geom` may emit null for members clipped by a bbox
    return tuple((p["lon"], p["lat"]) for p in raw_points if p is not None)


def _member(raw):
    kind = raw.get("type")
    if kind == "node" and "lat" in raw:
        geometry = ((raw["lon"], raw["lat"]),)
    else:
        geometry = _points(raw.get("geometry") or [])
    return Member(kind, raw.get("role", ""), geometry, raw.get("ref"))


def _element(raw):
    kind = raw.get("type")
    if kind not in KINDS:
        raise ParseError(f"unknown element kind {kind!r}")
    if "id" not in raw:
        raise ParseError(f"{kind} element without id")
    geometry = None
    if kind == "node" and "lat" in raw and "lon" in raw:
        geometry = ((raw["lon"], raw["lat"]),)
    elif "geometry" in raw:
        geometry = _points(raw["geometry"])
    members = tuple(_member(m) for m in raw["members"]) if "members" in raw else None
    center = (raw["center"]["lon"], raw["center"]["lat"]) if "center" in raw else None
    return OsmElement(raw["id"], kind, dict(raw.get("tags", {})), geometry, members, center)


def parse_overpass_json(text):
    """
    Parse an Overpass JSON response body.

    Args:
        text: response body (str or bytes)

    Returns:
        list of OsmElement, one per entry of the top-level elements array

    Raises:
        ParseError: malformed JSON, no elements key, or an unknown element kind
    """
    try:
        document = json.loads(text)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"response is not JSON: {exc}") from exc
    if not isinstance(document, dict) or not isinstance(document.get("elements"), list):
        raise ParseError("response has no elements array")
    try:
        return [_element(raw) for raw in document["elements"]]
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"malformed element: {exc!r}") from exc


def element_to_overpass(element):
    """Inverse of the parser for one element; coordinates are written back unchanged."""
    raw = {"type": element.kind, "id": element.id}
    if element.kind == "node" and element.geometry:
        (lon, lat), = element.geometry
        raw["lat"], raw["lon"] = lat, lon
    elif element.geometry is not None:
        raw["geometry"] = [{"lat": lat, "lon": lon} for lon, lat in element.geometry]
    if element.center is not None:
        raw["center"] = {"lat": element.center[1], "lon": element.center[0]}
    if element.members is not None:
        members = []
        for m in element.members:
            entry = {"type": m.kind, "ref": m.ref, "role": m.role}
            if m.kind == "node" and m.geometry:
                entry["lat"], entry["lon"] = m.geometry[0][1], m.geometry[0][0]
            else:
                entry["geometry"] = [{"lat": lat, "lon": lon} for lon, lat in m.geometry]
            members.append(entry)
        raw["members"] = members
    if element.tags:
        raw["tags"] = dict(element.tags)
    return raw


# --- ring building ----------------------------------------------------------------

def merge_lines(segments):
    """
    Join segments at shared endpoints into maximal chains.

    Chains stop at endpoints shared by other than two segments, like a
    line-merge. Coordinates must match exactly.
    """
    graph = nx.MultiGraph()
    for key, segment in enumerate(segments):
        graph.add_edge(segment.points[0], segment.points[-1], key=key, points=segment.points)

    used = set()

    def next_edge(node):
        free = [(k, v, d["points"]) for _, v, k, d in graph.edges(node, keys=True, data=True) if k not in used]
        return min(free, key=lambda e: e[0]) if free else None

    def walk(start, stop_at_start):
        current, points = start, [start]
        while True:
            edge = next_edge(current)
            if edge is None:
                break
            key, other, edge_points = edge
            used.add(key)
            if edge_points[0] != current:
                edge_points = edge_points[::-1]
            points.extend(edge_points[1:])
            current = edge_points[-1]
            if graph.degree(current) != 2 or (stop_at_start and current == start):
                break
        return PathChain(points)

    chains = []
    for node in list(graph.nodes):
        if graph.degree(node) != 2:
            while next_edge(node) is not None:
                chains.append(walk(node, stop_at_start=False))
    # what is left are cycles through degree-2 nodes
    for key in range(len(segments)):
        if key not in used:
            chains.append(walk(segments[key].points[0], stop_at_start=True))
    return chains


def polygonize(chains):
    """Closed chains of at least four points become rings; open chains are merged first."""
    closed = [c for c in chains if c.closed]
    open_chains = [c for c in chains if not c.closed]
    if open_chains:
        closed.extend(c for c in merge_lines(open_chains) if c.closed)
    rings = []
    for chain in closed:
        if len(chain.points) < 4:
            logger.debug("Dropping degenerate ring with %d points", len(chain.points))
            continue
        rings.append(chain.points)
    return rings


def is_simple_ring(ring):
    return LinearRing(ring).is_simple


def _ways(element, role):
    return [PathChain(m.geometry) for m in element.members or ()
            if m.kind == "way" and m.role == role and len(m.geometry) >= 2]


def assemble_relation(element):
    """
    Build the multipolygon of a relation from its outer and inner way members.

    Each inner ring becomes a hole of the smallest outer ring containing one of
    its interior points; inner rings inside no outer ring are dropped.

    Raises:
        EmptyRelation: no outer ring could be formed
    """
    if element.kind != "relation":
        raise ParseError(f"{element.kind} {element.id} is not a relation")
    outers = polygonize(merge_lines(_ways(element, "outer")))
    if not outers:
        raise EmptyRelation(f"relation {element.id} has no closed outer ring")
    inners = polygonize(merge_lines(_ways(element, "inner")))

    warnings = []
    for ring in (*outers, *inners):
        if not is_simple_ring(ring):
            warnings.append(f"relation {element.id}: self-intersecting ring with {len(ring)} points")
            logger.warning(warnings[-1])

    shells = [Polygon(ring) for ring in outers]
    holes = [[] for _ in outers]
    by_area = sorted(range(len(shells)), key=lambda i: shells[i].area)
    for ring in inners:
        probe = Polygon(ring).representative_point()
        owner = next((i for i in by_area if shells[i].contains(probe)), None)
        if owner is None:
            logger.debug("Relation %s: inner ring outside every outer ring dropped", element.id)
            continue
        holes[owner].append(ring)
    polygons = tuple((outer, tuple(h)) for outer, h in zip(outers, holes))
    return MultiPolygonGeom(polygons, tuple(warnings))


def flatten_tags(element):
    """Tag values as strings; lists joined with ", "."""
    return {
        key: ", ".join(map(str, value)) if isinstance(value, list) else str(value)
        for key, value in element.tags.items() if key not in EXCLUDED_KEYS
    }


# --- features -------------------------------------------------------------------

def element_to_feature(element):
    """FeatureRecord for an element, or None when it carries no usable geometry."""
    properties = flatten_tags(element)
    properties.setdefault("osm_type", element.kind)
    properties.setdefault("osm_id", str(element.id))
    if element.kind == "relation" and element.members:
        try:
            return FeatureRecord(assemble_relation(element).to_shapely(), properties)
        except EmptyRelation as exc:
            logger.warning("%s", exc)
    if element.geometry:
        if len(element.geometry) == 1:
            return FeatureRecord(Point(element.geometry[0]), properties)
        return FeatureRecord(LineString(element.geometry), properties)
    if element.center is not None:
        return FeatureRecord(Point(element.center), properties)
    return None


def overpass_to_features(text):
    features = []
    for element in parse_overpass_json(text):
        feature = element_to_feature(element)
        if feature is not None:
            features.append(feature)
    logger.info("Converted Overpass response to %d features", len(features))
    return features


def _oriented(geometry):
    if isinstance(geometry, MultiPolygonGeom):
        geometry = geometry.to_shapely()
    if isinstance(geometry, Polygon):
        return orient(geometry, sign=1.0)
    if isinstance(geometry, MultiPolygon):
        return MultiPolygon([orient(p, sign=1.0) for p in geometry.geoms])
    return geometry


def features_to_geojson(features):
    return {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "geometry": mapping(_oriented(f.geometry)), "properties": dict(f.properties)}
            for f in features
        ],
    }


def write_geojson(features, path):
    """
    Write features as a GeoJSON FeatureCollection (lon-first, outer rings
    counter-clockwise, holes clockwise).
    """
    if not features:
        raise GeometryError("no features to write")
    document = features_to_geojson(features)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    logger.info("Wrote %d features to %s", len(features), path)
    return path
