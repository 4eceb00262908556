"""Test-only fixture builders and brute-force oracles (no spatial indexing)."""

import itertools
from collections import Counter

import numpy as np

from urbancl import geo
from urbancl.urbankg import BC, CATEGORY, POI, REGION, Entity, Fact, cosine


def grid_regions(rows, cols, cell=0.8, jitter=0.15, rng=None, prefix="r"):
    rng = rng or np.random.default_rng(0)
    vx = np.arange(cols + 1, dtype=float)[None, :].repeat(rows + 1, 0) * cell
    vy = np.arange(rows + 1, dtype=float)[:, None].repeat(cols + 1, 1) * cell
    inner = (slice(1, rows), slice(1, cols))
    vx[inner] += rng.uniform(-jitter, jitter, vx[inner].shape) * cell
    vy[inner] += rng.uniform(-jitter, jitter, vy[inner].shape) * cell
    out = []
    for i in range(rows):
        for j in range(cols):
            ring = [(vx[i, j], vy[i, j]), (vx[i, j + 1], vy[i, j + 1]), (vx[i + 1, j + 1], vy[i + 1, j + 1]), (vx[i + 1, j], vy[i + 1, j])]
            out.append(Entity(f"{prefix}{i:02d}{j:02d}", REGION, boundary=ring))
    return out


def random_fixture(seed, n_regions_side=(3, 5), n_pois=60, n_bc=4, n_cats=4):
    """Entities, flow matrix and check-ins with planted threshold-boundary cases."""
    rng = np.random.default_rng(seed)
    rows = int(rng.integers(*n_regions_side))
    cols = int(rng.integers(*n_regions_side))
    cell = 0.8
    regions = grid_regions(rows, cols, cell, rng=rng)
    cats = [Entity(f"cat{k}", CATEGORY) for k in range(n_cats)]
    span_x, span_y = cols * cell, rows * cell
    pois = []
    for k in range(n_pois):
        x, y = rng.uniform(-0.2, span_x + 0.2), rng.uniform(-0.2, span_y + 0.2)  # some fall outside
        pois.append(Entity(f"p{k:03d}", POI, location=(x, y), category_id=f"cat{int(rng.integers(n_cats))}"))
    # exactly 0.5 km apart, same category: competitive boundary
    pois.append(Entity("pq0", POI, location=(0.25, 0.25), category_id="cat0"))
    pois.append(Entity("pq1", POI, location=(0.75, 0.25), category_id="cat0"))
    # just beyond 0.5 km
    pois.append(Entity("pq2", POI, location=(0.25, 1.25), category_id="cat1"))
    pois.append(Entity("pq3", POI, location=(0.7500001, 1.25), category_id="cat1"))
    # on a shared region vertex (outer corner) and an outer edge
    pois.append(Entity("pq4", POI, location=(0.0, 0.0), category_id="cat2"))
    pois.append(Entity("pq5", POI, location=(0.0, 0.4), category_id="cat3"))
    bcs = [Entity(f"bc{k}", BC, location=(rng.uniform(0, span_x), rng.uniform(0, span_y))) for k in range(n_bc)]
    # BC exactly 3 km from a POI
    bcs.append(Entity("bcx", BC, location=(0.25, 3.25)))
    ents = regions + cats + pois + bcs
    n = len(regions)
    flows = rng.poisson(rng.uniform(0, 3), size=(n, n)).astype(float)
    checkins = []
    poi_ids = [p.id for p in pois]
    for a in range(15):
        t = 0.0
        for _ in range(int(rng.integers(3, 20))):
            t += float(rng.integers(0, 3))  # ties exercise the stable ordering
            checkins.append((poi_ids[int(rng.integers(len(poi_ids)))], f"u{a}", t))
    return ents, flows, checkins


def kind(ents, k):
    return sorted((e for e in ents if e.kind == k), key=lambda e: e.id)


def oracle_spatial(ents, near_km=1.0, tol=1e-9):
    regs, pois = kind(ents, REGION), kind(ents, POI)
    out = set()
    for a, b in itertools.combinations(regs, 2):
        h, t = sorted((a.id, b.id))
        if geo.shared_vertex_count(a.boundary, b.boundary, tol) > 0:
            out.add(Fact(h, "borderBy", t))
        if geo.distance(geo.centroid(a.boundary), geo.centroid(b.boundary)) <= near_km:
            out.add(Fact(h, "nearBy", t))
    for p in pois:
        for r in regs:
            if geo.contains(r.boundary, p.location):
                out.add(Fact(p.id, "locateAt", r.id))
    return out


def oracle_mobility(flows, ids, mode="percentile", value=90.0):
    vals = [flows[i, j] for i in range(len(ids)) for j in range(len(ids)) if i != j and flows[i, j] > 0]
    if mode == "absolute":
        thr = value
    else:
        thr = np.percentile(vals, value) if vals else np.inf
    return {Fact(ids[i], "flowTransition", ids[j]) for i in range(len(ids)) for j in range(len(ids)) if i != j and flows[i, j] > thr}


def oracle_function(ents, checkins, cos_min=0.95, co_mode="percentile", co_value=90.0):
    regs, pois, cats = kind(ents, REGION), kind(ents, POI), kind(ents, CATEGORY)
    cat_ids = [c.id for c in cats]
    out = set()
    z = {}
    for r in regs:
        cnt = np.zeros(len(cat_ids))
        for p in pois:
            if geo.contains(r.boundary, p.location):
                cnt[cat_ids.index(p.category_id)] += 1
        z[r.id] = cnt / cnt.sum() if cnt.sum() else cnt
    for a, b in itertools.combinations(regs, 2):
        if z[a.id].sum() and z[b.id].sum() and cosine(z[a.id], z[b.id]) >= cos_min:
            h, t = sorted((a.id, b.id))
            out.add(Fact(h, "similarFunction", t))
    seqs = {}
    for n, (p, u, t) in enumerate(checkins):
        seqs.setdefault(u, []).append((t, n, p))
    counts = Counter()
    for s in seqs.values():
        s.sort()
        for x, y in zip(s, s[1:]):
            if x[2] != y[2]:
                counts[tuple(sorted((x[2], y[2])))] += 1
    if counts:
        thr = co_value if co_mode == "absolute" else np.percentile(list(counts.values()), co_value)
        out |= {Fact(a, "coCheckin", b) for (a, b), c in counts.items() if c > thr}
    out |= {Fact(p.id, "cateOf", p.category_id) for p in pois}
    return out, z


def oracle_business(ents, service_km=3.0, belong_km=3.0, compete_km=0.5):
    regs, pois, bcs = kind(ents, REGION), kind(ents, POI), kind(ents, BC)
    out = set()
    for b in bcs:
        for r in regs:
            if geo.distance(geo.centroid(r.boundary), b.location) <= service_km:
                out.add(Fact(b.id, "provideService", r.id))
        for p in pois:
            if geo.distance(p.location, b.location) <= belong_km:
                out.add(Fact(p.id, "belongTo", b.id))
    for p, q in itertools.combinations(pois, 2):
        if p.category_id == q.category_id and geo.distance(p.location, q.location) <= compete_km:
            h, t = sorted((p.id, q.id))
            out.add(Fact(h, "competitive", t))
    return out


TOY_CITY = dict(
    n_regions=8,
    grid_side_km=2.0,
    latent_dim=5,
    n_categories=3,
    pois_per_region=2.0,
    n_business_centers=2,
    sv_per_region=3,
    sat_size=16,
    sv_size=16,
    n_actors=10,
    checkins_per_actor=5,
)


def toy_city(seed=0, **overrides):
    """A tiny synthetic city and its reverse-closed KG."""
    from urbancl.synthcity import CityConfig, synthesize
    from urbancl.urbankg import KGParams, add_reverse_edges, build_kg

    cfg = CityConfig(**{**TOY_CITY, "seed": seed, **overrides})
    city = synthesize(cfg)
    kg, _ = build_kg(city.entities, city.flow_matrix, city.region_ids, city.checkins, KGParams())
    return city, add_reverse_edges(kg)
