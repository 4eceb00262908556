"""Urban knowledge graph: entities, the ten relation rules, reverse edges and triple files."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import geo
from .errors import IngestError, InvalidStateError, NotFoundError, ParseError

REGION = "Region"
BC = "BC"
POI = "POI"
CATEGORY = "Category"
KINDS = (REGION, BC, POI, CATEGORY)

SPATIALITY = "Spatiality"
MOBILITY = "Mobility"
FUNCTION = "Function"
BUSINESS = "Business"
FAMILIES = (SPATIALITY, MOBILITY, FUNCTION, BUSINESS)

REVERSE_PREFIX = "~"

# name -> (knowledge family, head kind, tail kind)
RELATION_TABLE = {
    "borderBy": (SPATIALITY, REGION, REGION),
    "nearBy": (SPATIALITY, REGION, REGION),
    "locateAt": (SPATIALITY, POI, REGION),
    "flowTransition": (MOBILITY, REGION, REGION),
    "similarFunction": (FUNCTION, REGION, REGION),
    "coCheckin": (FUNCTION, POI, POI),
    "cateOf": (FUNCTION, POI, CATEGORY),
    "provideService": (BUSINESS, BC, REGION),
    "belongTo": (BUSINESS, POI, BC),
    "competitive": (BUSINESS, POI, POI),
}
SYMMETRIC = frozenset({"borderBy", "nearBy", "similarFunction", "coCheckin", "competitive"})


def base_relation(name: str) -> str:
    return name[len(REVERSE_PREFIX) :] if name.startswith(REVERSE_PREFIX) else name


def is_reverse(name: str) -> bool:
    return name.startswith(REVERSE_PREFIX)


def relation_family(name: str) -> str:
    try:
        return RELATION_TABLE[base_relation(name)][0]
    except KeyError:
        raise NotFoundError(f"unknown relation {name!r}") from None


def relation_kinds(name: str) -> tuple[str, str]:
    """(head kind, tail kind) for a base or reverse relation."""
    _, h, t = RELATION_TABLE[base_relation(name)]
    return (t, h) if is_reverse(name) else (h, t)


@dataclass(frozen=True)
class Entity:
    id: str
    kind: str
    location: geo.GeoPoint | None = None
    boundary: geo.RegionBoundary | None = None
    category_id: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"entity {self.id!r}: unknown kind {self.kind!r}")
        if self.location is not None:
            object.__setattr__(self, "location", geo.as_point(self.location))
        if self.boundary is not None and not isinstance(self.boundary, geo.RegionBoundary):
            object.__setattr__(self, "boundary", geo.RegionBoundary(tuple(self.boundary)))
        if self.kind == REGION and self.boundary is None:
            raise ValueError(f"region {self.id!r} needs a boundary")
        if self.kind in (POI, BC) and self.location is None:
            raise ValueError(f"{self.kind} {self.id!r} needs a location")
        if self.kind == POI and not self.category_id:
            raise ValueError(f"POI {self.id!r} needs a category_id")

    @property
    def center(self) -> geo.GeoPoint:
        if self.kind == REGION:
            return geo.centroid(self.boundary)
        if self.location is None:
            raise ValueError(f"{self.kind} {self.id!r} has no location")
        return self.location


class Relation(NamedTuple):
    name: str
    knowledge_family: str


class Fact(NamedTuple):
    head: str
    relation: str
    tail: str


class CheckinRecord(NamedTuple):
    poi_id: str
    actor_id: str
    time: float


@dataclass
class CategoryDistribution:
    region_id: str
    categories: tuple
    z: np.ndarray


@dataclass
class Diagnostics:
    unlocated_pois: list = field(default_factory=list)
    zero_poi_regions: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"unlocated_pois": sorted(self.unlocated_pois), "zero_poi_regions": sorted(self.zero_poi_regions)},
            indent=2,
            sort_keys=True,
        )


class UrbanKG:
    """Immutable multi-relational graph (entities, relations, facts).

    The relation set is derived from the facts present, so toggling a rule off
    removes its relation as well.
    """

    def __init__(self, entities: Iterable[Entity], facts: Iterable[Fact]):
        ents: dict[str, Entity] = {}
        for e in entities:
            if e.id in ents:
                raise ValueError(f"duplicate entity id {e.id!r}")
            ents[e.id] = e
        self._entities = MappingProxyType(dict(sorted(ents.items())))
        fs = sorted({Fact(*f) for f in facts})
        for f in fs:
            for end in (f.head, f.tail):
                if end not in ents:
                    raise NotFoundError(f"fact {tuple(f)} references unknown entity {end!r}")
            try:
                hk, tk = relation_kinds(f.relation)
            except KeyError:
                raise ValueError(f"unknown relation {f.relation!r}") from None
            if (ents[f.head].kind, ents[f.tail].kind) != (hk, tk):
                raise ValueError(
                    f"fact {tuple(f)}: kinds ({ents[f.head].kind}, {ents[f.tail].kind}) do not match {f.relation} ({hk}, {tk})"
                )
        self._facts = tuple(fs)
        names = sorted({f.relation for f in fs})
        self._relations = tuple(Relation(n, relation_family(n)) for n in names)
        adj: dict[str, list] = defaultdict(list)
        for f in fs:
            adj[f.tail].append((f.head, f.relation))
        self._adjacency = MappingProxyType({k: tuple(v) for k, v in adj.items()})

    @property
    def entities(self) -> Mapping[str, Entity]:
        return self._entities

    @property
    def facts(self) -> tuple:
        return self._facts

    @property
    def relations(self) -> tuple:
        return self._relations

    @property
    def relation_names(self) -> tuple:
        return tuple(r.name for r in self._relations)

    @property
    def adjacency(self) -> Mapping[str, tuple]:
        """Neighbourhood per entity: tuple of (head id, relation) over facts ending at it."""
        return self._adjacency

    def neighbors(self, entity_id: str) -> tuple:
        return self._adjacency.get(entity_id, ())

    @property
    def is_reverse_closed(self) -> bool:
        return any(is_reverse(r.name) for r in self._relations)

    def ids(self, kind: str | None = None) -> list[str]:
        return [e.id for e in self._entities.values() if kind is None or e.kind == kind]

    def region_ids(self) -> list[str]:
        return self.ids(REGION)

    def __eq__(self, other):
        if not isinstance(other, UrbanKG):
            return NotImplemented
        return dict(self._entities) == dict(other._entities) and self._facts == other._facts

    def __repr__(self):
        return f"UrbanKG(|E|={len(self._entities)}, |R|={len(self._relations)}, |F|={len(self._facts)})"

    def without_families(self, families: Iterable[str]) -> "UrbanKG":
        drop = set(families)
        unknown = drop - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown knowledge families: {sorted(unknown)}")
        return UrbanKG(self._entities.values(), [f for f in self._facts if relation_family(f.relation) not in drop])


@dataclass(frozen=True)
class KGParams:
    near_km: float = 1.0
    border_tol: float = 1e-9
    service_km: float = 3.0
    belong_km: float = 3.0
    compete_km: float = 0.5
    cos_min: float = 0.95
    flow_threshold_mode: str = "percentile"
    flow_threshold_value: float = 90.0
    cocheckin_threshold_mode: str = "percentile"
    cocheckin_threshold_value: float = 90.0
    distance_mode: str = geo.PLANAR
    families: tuple = FAMILIES
    disabled_relations: tuple = ()

    def __post_init__(self):
        bad = set(self.families) - set(FAMILIES)
        if bad:
            raise ValueError(f"unknown knowledge families: {sorted(bad)}")
        bad = set(self.disabled_relations) - set(RELATION_TABLE)
        if bad:
            raise ValueError(f"unknown relations: {sorted(bad)}")
        for mode in (self.flow_threshold_mode, self.cocheckin_threshold_mode):
            if mode not in ("absolute", "percentile"):
                raise ValueError(f"threshold mode must be 'absolute' or 'percentile', got {mode!r}")

    def enabled(self, relation: str) -> bool:
        return RELATION_TABLE[relation][0] in self.families and relation not in self.disabled_relations


def _canonical(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a < b else (b, a)


def _of_kind(entities: Iterable[Entity], kind: str) -> list[Entity]:
    return sorted((e for e in entities if e.kind == kind), key=lambda e: e.id)


def _threshold(values: np.ndarray, mode: str, value: float) -> float:
    if mode == "absolute":
        return float(value)
    nz = values[values > 0]
    if nz.size == 0:
        return math.inf
    return float(np.percentile(nz, value))


# ---------------------------------------------------------------- spatiality


def locate_pois(entities: Iterable[Entity], diagnostics: Diagnostics | None = None) -> dict[str, list[str]]:
    """POI id -> ids of all regions whose closed boundary contains it."""
    entities = list(entities)
    regions = _of_kind(entities, REGION)
    pois = _of_kind(entities, POI)
    out: dict[str, list[str]] = {}
    if not regions:
        if diagnostics is not None:
            diagnostics.unlocated_pois.extend(p.id for p in pois)
        return out
    boxes = [r.boundary.bbox() for r in regions]
    cell = max(float(np.median([max(b[2] - b[0], b[3] - b[1]) for b in boxes])), 1e-9)
    index = geo.BoxIndex(boxes, cell)
    for p in pois:
        hits = [regions[i].id for i in index.query(p.location) if geo.contains(regions[i].boundary, p.location)]
        if hits:
            out[p.id] = sorted(set(hits))
        elif diagnostics is not None:
            diagnostics.unlocated_pois.append(p.id)
    return out


def build_spatial_relations(entities: Iterable[Entity], params: KGParams = KGParams(), diagnostics: Diagnostics | None = None) -> list[Fact]:
    """borderBy / nearBy between regions and locateAt from POIs to regions."""
    entities = list(entities)
    regions = _of_kind(entities, REGION)
    facts: list[Fact] = []
    if params.enabled("borderBy") and regions:
        owners, verts = [], []
        for i, r in enumerate(regions):
            for v in r.boundary.points:
                owners.append(i)
                verts.append(v)
        index = geo.GridIndex(verts, max(params.border_tol, 1e-9))
        cand = set()
        for a, b in index.pairs(params.border_tol):
            ra, rb = owners[a], owners[b]
            if ra != rb:
                cand.add((min(ra, rb), max(ra, rb)))
        for i, j in cand:
            if geo.shared_vertex_count(regions[i].boundary, regions[j].boundary, params.border_tol) > 0:
                h, t = _canonical(regions[i].id, regions[j].id)
                facts.append(Fact(h, "borderBy", t))
    if params.enabled("nearBy") and regions:
        centers = [r.center for r in regions]
        index = geo.GridIndex(centers, max(params.near_km, 1e-9))
        for i, j in index.pairs(params.near_km):
            if geo.distance(centers[i], centers[j], params.distance_mode) <= params.near_km:
                h, t = _canonical(regions[i].id, regions[j].id)
                facts.append(Fact(h, "nearBy", t))
    if params.enabled("locateAt"):
        for poi_id, region_ids in locate_pois(entities, diagnostics).items():
            facts.extend(Fact(poi_id, "locateAt", rid) for rid in region_ids)
    elif diagnostics is not None:
        locate_pois(entities, diagnostics)
    return sorted(facts)


# ---------------------------------------------------------------- mobility


def build_mobility_relations(flow_matrix, region_ids: Sequence[str], params: KGParams = KGParams()) -> list[Fact]:
    """Directed flowTransition for off-diagonal flows strictly above the threshold."""
    flows = np.asarray(flow_matrix, dtype=float)
    n = len(region_ids)
    if flows.shape != (n, n):
        raise ValueError(f"flow matrix shape {flows.shape} does not match {n} regions")
    if np.any(flows < 0):
        raise ValueError("flow counts must be non-negative")
    if not params.enabled("flowTransition"):
        return []
    off = flows.copy()
    np.fill_diagonal(off, 0.0)
    thr = _threshold(off[~np.eye(n, dtype=bool)], params.flow_threshold_mode, params.flow_threshold_value)
    rows, cols = np.nonzero(off > thr)
    return sorted(Fact(region_ids[i], "flowTransition", region_ids[j]) for i, j in zip(rows, cols) if i != j)


# ---------------------------------------------------------------- function


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        return math.nan
    return float(np.dot(a, b)) / (na * nb)


def category_ids(entities: Iterable[Entity]) -> list[str]:
    return [e.id for e in _of_kind(entities, CATEGORY)]


def distribution_matrix(entities: Iterable[Entity], poi_regions: Mapping[str, Sequence[str]]):
    """(region ids, category ids, matrix of normalised category counts)."""
    entities = list(entities)
    regions = [r.id for r in _of_kind(entities, REGION)]
    cats = category_ids(entities)
    rpos = {r: i for i, r in enumerate(regions)}
    cpos = {c: i for i, c in enumerate(cats)}
    counts = np.zeros((len(regions), len(cats)))
    for p in _of_kind(entities, POI):
        if p.category_id not in cpos:
            raise IngestError(f"POI {p.id!r} has unknown category {p.category_id!r}")
        for rid in poi_regions.get(p.id, ()):
            counts[rpos[rid], cpos[p.category_id]] += 1
    totals = counts.sum(axis=1, keepdims=True)
    z = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return regions, cats, z


def cocheckin_counts(checkins: Iterable, poi_ids: Iterable[str]) -> Counter:
    """Unordered POI-pair counts of consecutive visits by the same actor."""
    known = set(poi_ids)
    by_actor: dict[str, list] = defaultdict(list)
    for n, rec in enumerate(checkins):
        rec = CheckinRecord(*rec)
        if rec.poi_id not in known:
            raise IngestError(f"check-in record {n} {tuple(rec)} references unknown POI {rec.poi_id!r}")
        by_actor[rec.actor_id].append((float(rec.time), n, rec.poi_id))
    counts: Counter = Counter()
    for visits in by_actor.values():
        visits.sort()
        for (_, _, a), (_, _, b) in zip(visits, visits[1:]):
            if a != b:
                counts[_canonical(a, b)] += 1
    return counts


def build_function_relations(
    entities: Iterable[Entity],
    checkin_records: Iterable = (),
    params: KGParams = KGParams(),
    poi_regions: Mapping[str, Sequence[str]] | None = None,
    diagnostics: Diagnostics | None = None,
) -> list[Fact]:
    """similarFunction between regions, coCheckin between POIs, cateOf from POI to category."""
    entities = list(entities)
    pois = _of_kind(entities, POI)
    facts: list[Fact] = []
    if poi_regions is None:
        poi_regions = locate_pois(entities)
    counts = cocheckin_counts(checkin_records, (p.id for p in pois))
    regions, cats, z = distribution_matrix(entities, poi_regions)
    nonzero = np.flatnonzero(z.sum(axis=1) > 0)
    if diagnostics is not None:
        has_pois = set(nonzero.tolist())
        diagnostics.zero_poi_regions.extend(r for i, r in enumerate(regions) if i not in has_pois)
    if params.enabled("similarFunction") and nonzero.size > 1:
        zn = z[nonzero] / np.linalg.norm(z[nonzero], axis=1, keepdims=True)
        approx = zn @ zn.T
        ii, jj = np.nonzero(np.triu(approx >= params.cos_min - 1e-9, k=1))
        for i, j in zip(nonzero[ii], nonzero[jj]):
            if cosine(z[i], z[j]) >= params.cos_min:
                h, t = _canonical(regions[i], regions[j])
                facts.append(Fact(h, "similarFunction", t))
    if params.enabled("coCheckin") and counts:
        values = np.array(list(counts.values()), dtype=float)
        thr = _threshold(values, params.cocheckin_threshold_mode, params.cocheckin_threshold_value)
        facts.extend(Fact(a, "coCheckin", b) for (a, b), c in counts.items() if c > thr)
    if params.enabled("cateOf"):
        known = set(cats)
        for p in pois:
            if p.category_id not in known:
                raise IngestError(f"POI {p.id!r} has unknown category {p.category_id!r}")
            facts.append(Fact(p.id, "cateOf", p.category_id))
    return sorted(facts)


# ---------------------------------------------------------------- business


def build_business_relations(entities: Iterable[Entity], params: KGParams = KGParams()) -> list[Fact]:
    """provideService (BC->Region), belongTo (POI->BC), competitive (same-category POI pairs)."""
    entities = list(entities)
    regions = _of_kind(entities, REGION)
    pois = _of_kind(entities, POI)
    bcs = _of_kind(entities, BC)
    mode = params.distance_mode
    facts: list[Fact] = []
    if params.enabled("provideService") and regions and bcs:
        centers = [r.center for r in regions]
        index = geo.GridIndex(centers, max(params.service_km, 1e-9))
        for bc in bcs:
            for i in index.near(bc.location, params.service_km):
                if geo.distance(centers[i], bc.location, mode) <= params.service_km:
                    facts.append(Fact(bc.id, "provideService", regions[i].id))
    if params.enabled("belongTo") and pois and bcs:
        index = geo.GridIndex([p.location for p in pois], max(params.belong_km, 1e-9))
        for bc in bcs:
            for i in index.near(bc.location, params.belong_km):
                if geo.distance(pois[i].location, bc.location, mode) <= params.belong_km:
                    facts.append(Fact(pois[i].id, "belongTo", bc.id))
    if params.enabled("competitive") and pois:
        by_cat: dict[str, list[Entity]] = defaultdict(list)
        for p in pois:
            by_cat[p.category_id].append(p)
        for group in by_cat.values():
            index = geo.GridIndex([p.location for p in group], max(params.compete_km, 1e-9))
            for i, j in index.pairs(params.compete_km):
                if geo.distance(group[i].location, group[j].location, mode) <= params.compete_km:
                    h, t = _canonical(group[i].id, group[j].id)
                    facts.append(Fact(h, "competitive", t))
    return sorted(facts)


# ---------------------------------------------------------------- assembly


def build_kg(
    entities: Iterable[Entity],
    flow_matrix=None,
    region_order: Sequence[str] | None = None,
    checkin_records: Iterable = (),
    params: KGParams = KGParams(),
) -> tuple[UrbanKG, Diagnostics]:
    """Run every enabled rule and assemble the (not yet reverse-closed) graph."""
    entities = list(entities)
    diag = Diagnostics()
    facts = build_spatial_relations(entities, params, diag)
    if flow_matrix is not None:
        if region_order is None:
            region_order = [r.id for r in _of_kind(entities, REGION)]
        facts += build_mobility_relations(flow_matrix, region_order, params)
    poi_regions = locate_pois(entities)
    facts += build_function_relations(entities, checkin_records, params, poi_regions, diag)
    facts += build_business_relations(entities, params)
    return UrbanKG(entities, facts), diag


def add_reverse_edges(kg: UrbanKG) -> UrbanKG:
    """Add (t, ~r, h) for every fact (h, r, t)."""
    if kg.is_reverse_closed:
        raise InvalidStateError("graph already contains reverse relations")
    rev = [Fact(f.tail, REVERSE_PREFIX + f.relation, f.head) for f in kg.facts]
    return UrbanKG(kg.entities.values(), list(kg.facts) + rev)


def category_distribution(kg: UrbanKG, region_id: str) -> CategoryDistribution:
    """Normalised category counts of POIs located in the region (zeros if none)."""
    ent = kg.entities.get(region_id)
    if ent is None or ent.kind != REGION:
        raise NotFoundError(f"unknown region {region_id!r}")
    cats = tuple(kg.ids(CATEGORY))
    pos = {c: i for i, c in enumerate(cats)}
    z = np.zeros(len(cats))
    for head, rel in kg.neighbors(region_id):
        if rel == "locateAt":
            z[pos[kg.entities[head].category_id]] += 1
    s = z.sum()
    if s > 0:
        z = z / s
    return CategoryDistribution(region_id, cats, z)


# ---------------------------------------------------------------- files


def entity_to_json(e: Entity) -> dict:
    out: dict = {"id": e.id, "kind": e.kind}
    if e.location is not None:
        out["x"], out["y"] = e.location.x, e.location.y
    if e.boundary is not None:
        out["boundary"] = [[p.x, p.y] for p in e.boundary.points]
    if e.category_id is not None:
        out["category_id"] = e.category_id
    return out


def entity_from_json(obj: dict) -> Entity:
    loc = (obj["x"], obj["y"]) if obj.get("x") is not None else None
    boundary = tuple(tuple(p) for p in obj["boundary"]) if obj.get("boundary") else None
    return Entity(obj["id"], obj["kind"], loc, boundary, obj.get("category_id"))


def write_entities(path, entities: Iterable[Entity]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in sorted(entities, key=lambda e: e.id):
            fh.write(json.dumps(entity_to_json(e), sort_keys=True) + "\n")


def read_entities(path) -> list[Entity]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(entity_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(path, n, f"bad entity record: {exc}") from None
    return out


def serialize_triples(kg: UrbanKG, path) -> None:
    lines = sorted(f"{f.head}\t{f.relation}\t{f.tail}" for f in kg.facts)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def parse_triples(path, entity_metadata) -> UrbanKG:
    """Read a TSV triple file; ``entity_metadata`` is a JSONL path or an iterable of entities."""
    if isinstance(entity_metadata, (str, Path)):
        entities = read_entities(entity_metadata)
    else:
        entities = list(entity_metadata)
    known = {e.id for e in entities}
    facts = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, n, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            if base_relation(r) not in RELATION_TABLE:
                raise ParseError(path, n, f"unknown relation {r!r}")
            for end in (h, t):
                if end not in known:
                    raise ParseError(path, n, f"unknown entity id {end!r}")
            facts.append(Fact(h, r, t))
    try:
        return UrbanKG(entities, facts)
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from None
