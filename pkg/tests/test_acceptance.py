"""Acceptance criteria 1-11; each test carries a ``criterion`` mark and the
session summary prints one PASS/FAIL line per criterion."""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from helpers import TOY_CITY, oracle_business, oracle_function, oracle_mobility, oracle_spatial, random_fixture, toy_city
from urbancl import experiments as ex
from urbancl import nncore as nn
from urbancl import urbankg as ukg
from urbancl.cli import main
from urbancl.contrastive import ProjectionHeads, TrainConfig, directional_terms, image_kg_loss
from urbancl.downstream import r_squared, rmse
from urbancl.encoders import SemanticEncoder, SemanticEncoderConfig, VisualEncoder, VisualEncoderConfig
from urbancl.synthcity import CityConfig, IndicatorSpec, indicator_weights, latent_roles
from urbancl.urbankg import BC, CATEGORY, POI, REGION, Entity, Fact, KGParams

# End-to-end criteria train with default settings on the default 300-region city.
FIXTURE_TRAIN = TrainConfig()
SEEDS = (0, 1, 2, 3, 4)
TARGET_SEED = 100

# Attained values of the calibration run (seed 0, primary indicator), pinned to +-0.05.
PINNED = {"satellite": (0.965, 0.546), "streetview": (0.985, 0.551)}  # (trained, random)


def fixture_config(seed: int = 0, mode: str = "satellite") -> ex.ExperimentConfig:
    return ex.ExperimentConfig(train=replace(FIXTURE_TRAIN, mode=mode), indicators=("pop",), seed=seed)


def primary_r2(report: dict) -> float:
    return next(r["r2"] for r in report["runs"] if r["indicator"] == "pop")


def coupled_family() -> str:
    """Knowledge family carrying the latent role with the largest share of the primary indicator's weight."""
    cfg = CityConfig()
    w, _ = indicator_weights(cfg, IndicatorSpec())["pop"]
    roles = latent_roles(cfg.latent_dim)
    by_role = {"mobility": ukg.MOBILITY, "function": ukg.FUNCTION}
    share = {role: float(np.sum(w[roles[role]] ** 2)) for role in by_role}
    return by_role[max(share, key=share.get)]


# ---------------------------------------------------------------- 1-5, 10: exact checks


@pytest.mark.criterion(1)
def test_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    city, kg = toy_city()
    assert city.n_regions == 8
    sem = SemanticEncoder(kg, SemanticEncoderConfig(d=8, L=2, seed=3))
    vis = VisualEncoder(VisualEncoderConfig(d_out=8, seed=3))
    heads = ProjectionHeads(8, seed=3)
    batch = np.array([1, 3, 4, 6])
    rows = sem.rows([city.region_ids[i] for i in batch])

    def loss():
        img = heads.project_image(vis.forward(city.satellite[batch]))
        e = heads.project_kg(nn.index_rows(sem.forward(), rows))
        return image_kg_loss(img, e)

    err = nn.finite_difference_check(loss, sem.parameters() + vis.parameters() + heads.parameters())
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {err:.2e}, {elapsed:.1f}s")
    assert err < 1e-4
    assert elapsed < 30


@pytest.mark.criterion(2)
def test_loss_identities(record_property):
    rng = np.random.default_rng(0)
    assert image_kg_loss(rng.normal(size=(1, 6)), rng.normal(size=(1, 6))).item() == 0.0
    e = np.eye(2)
    assert abs(image_kg_loss(e, e).item() - 2 * math.log(1 + math.exp(-1))) < 1e-12
    worst = np.inf
    for _ in range(1000):
        m = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        a, b = directional_terms(rng.normal(size=(m, d)) * 4, rng.normal(size=(m, d)) * 4, float(rng.uniform(0.1, 2)))
        worst = min(worst, a.data.min(), b.data.min())
    record_property("detail", f"min directional term {worst:.3g}")
    assert worst >= 0


def _boundary_entities():
    sq = lambda eid, x0: Entity(eid, REGION, boundary=[(x0, 0), (x0 + 0.5, 0), (x0 + 0.5, 0.5), (x0, 0.5)])
    return [
        sq("ra", 0.0), sq("rb", 1.0), sq("rc", 2.0000001),
        Entity("food", CATEGORY),
        Entity("p0", POI, location=(5.0, 5.0), category_id="food"),
        Entity("p1", POI, location=(5.5, 5.0), category_id="food"),
        Entity("p2", POI, location=(5.0, 6.0), category_id="food"),
        Entity("p3", POI, location=(5.5000001, 6.0), category_id="food"),
        Entity("bc", BC, location=(8.0, 5.0)),
        Entity("bd", BC, location=(0.25, 3.25)),
    ]


@pytest.mark.criterion(3)
def test_kg_construction_oracle(record_property):
    t0 = time.perf_counter()
    for seed in range(20):
        ents, flows, checkins = random_fixture(seed)
        assert len(ents) <= 200
        ids = sorted(e.id for e in ents if e.kind == REGION)
        assert set(ukg.build_spatial_relations(ents)) == oracle_spatial(ents)
        assert set(ukg.build_mobility_relations(flows, ids)) == oracle_mobility(flows, ids)
        fn, z = oracle_function(ents, checkins)
        assert set(ukg.build_function_relations(ents, checkins)) == fn
        assert set(ukg.build_business_relations(ents)) == oracle_business(ents)
        # thresholds moved onto attained values
        zs = [v for v in z.values() if v.sum()]
        if len(zs) >= 2:
            c = ukg.cosine(zs[0], zs[1])
            fn_c, _ = oracle_function(ents, checkins, cos_min=c)
            assert set(ukg.build_function_relations(ents, checkins, KGParams(cos_min=c))) == fn_c
        pois = [e for e in ents if e.kind == POI]
        d = ukg.geo.distance(pois[0].location, pois[1].location)
        assert set(ukg.build_business_relations(ents, KGParams(compete_km=d, belong_km=d, service_km=d))) == oracle_business(ents, d, d, d)
    # boundary cases at exactly 1 km, 500 m, 3 km and cosine 0.95
    ents = _boundary_entities()
    sp = set(ukg.build_spatial_relations(ents))
    assert sp == oracle_spatial(ents)
    assert Fact("ra", "nearBy", "rb") in sp and Fact("rb", "nearBy", "rc") not in sp
    biz = set(ukg.build_business_relations(ents))
    assert biz == oracle_business(ents)
    assert Fact("p0", "competitive", "p1") in biz and Fact("p2", "competitive", "p3") not in biz
    assert Fact("p0", "belongTo", "bc") in biz and Fact("bd", "provideService", "ra") in biz
    # no count mix attains cosine 0.95 exactly; (3, 1) vs (1, 0) attains 0.9487, used as the threshold itself
    cats = [Entity("a", CATEGORY), Entity("b", CATEGORY)]
    two = [Entity("ga", REGION, boundary=[(20, 0), (21, 0), (21, 1), (20, 1)]), Entity("gb", REGION, boundary=[(30, 0), (31, 0), (31, 1), (30, 1)])] + cats
    two += [Entity(f"ga{i}", POI, location=(20.1 + 0.1 * i, 0.5), category_id="a" if i < 3 else "b") for i in range(4)]
    two += [Entity("gb0", POI, location=(30.5, 0.5), category_id="a")]
    c = ukg.cosine(np.array([0.75, 0.25]), np.array([1.0, 0.0]))
    on = set(ukg.build_function_relations(two, [], KGParams(cos_min=c)))
    off = set(ukg.build_function_relations(two, [], KGParams(cos_min=np.nextafter(c, 1))))
    assert Fact("ga", "similarFunction", "gb") in on and Fact("ga", "similarFunction", "gb") not in off
    assert Fact("ga", "similarFunction", "gb") not in set(ukg.build_function_relations(two))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"20 fixtures, {elapsed:.1f}s")
    assert elapsed < 60


@pytest.mark.criterion(4)
def test_reverse_edge_closure(record_property):
    n_facts = 0
    for seed in range(20):
        ents, flows, checkins = random_fixture(seed)
        kg, _ = ukg.build_kg(ents, flows, None, checkins)
        closed = ukg.add_reverse_edges(kg)
        assert len(closed.facts) == 2 * len(kg.facts)
        fs = set(closed.facts)
        assert all(Fact(f.tail, "~" + f.relation, f.head) in fs for f in kg.facts)
        n_facts += len(kg.facts)
    record_property("detail", f"{n_facts} facts over 20 fixtures")


@pytest.mark.criterion(5)
def test_pooling_invariance(record_property):
    rng = np.random.default_rng(5)
    enc = VisualEncoder(VisualEncoderConfig(d_out=16, seed=2))
    views = rng.random((7, 3, 32, 32))
    ref = enc.forward_streetview(list(views)).data.tobytes()
    for _ in range(30):
        perm = rng.permutation(7)
        assert enc.forward_streetview([views[i] for i in perm]).data.tobytes() == ref
    one = views[0]
    assert np.array_equal(enc.forward_streetview([one]).data, enc.forward_satellite(one).data)
    record_property("detail", "30 permutations bitwise equal; n=1 equals satellite path")


@pytest.mark.criterion(10)
def test_metric_correctness():
    assert abs(r_squared([1, 2, 2], [1, 2, 3]) - 0.5) < 1e-9
    assert abs(rmse([1, 2, 2], [1, 2, 3]) - 0.57735) < 1e-5
    assert abs(rmse([1, 2, 2], [1, 2, 3]) - math.sqrt(1 / 3)) < 1e-9
    t = np.array([2.0, 7.0, 1.0, 8.0])
    assert r_squared(np.full(4, t.mean()), t) == 0.0
    assert r_squared([3, 2, 1], [1, 2, 3]) < 0
    assert abs(r_squared([1.0, 2.0, 2.0, 0.0], [1.0, 2.0, 3.0, 4.0]) - (1 - 17 / 5)) < 1e-12


# ---------------------------------------------------------------- 11: CLI determinism

TOY = {
    "city": TOY_CITY,
    "train": {"m": 4, "n_iter": 3, "lr": 0.001, "k": 2},
    "semantic": {"d": 8},
    "visual": {"d_out": 8},
    "regression": {"max_epochs": 30, "patience": 5},
}

COMMANDS = [
    ["gen"],
    ["build-kg"],
    ["train"],
    ["ablate", "--drop", "Function"],
    ["kg-simclr"],
    ["transfer", "--target-seed", "2"],
    ["eval", "--checkpoint", "{ck}"],
    ["match", "--checkpoint", "{ck}"],
    ["pca", "--checkpoint", "{ck}"],
    ["scatter", "--checkpoint", "{ck}", "--indicator", "pop"],
]


@pytest.mark.criterion(11)
def test_cli_determinism(tmp_path, record_property):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TOY))
    sv = tmp_path / "sv.json"
    sv.write_text(json.dumps({**TOY, "train": {**TOY["train"], "mode": "streetview"}, "k_list": [1, 3]}))
    ck = tmp_path / "ck"
    assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(ck)]) == 0
    checked = 0
    for cmd in COMMANDS + [["sweep", "--k-list", "1,3"]]:
        conf = sv if cmd[0] == "sweep" else cfg
        outs = []
        for tag in ("a", "b"):
            d = tmp_path / f"{cmd[0]}_{tag}"
            argv = [a.format(ck=ck / "checkpoint.kcpt") for a in cmd]
            assert main(argv + ["--config", str(conf), "--seed", "4", "--out", str(d)]) == 0
            files = sorted(p for p in d.iterdir() if p.suffix in (".json", ".csv", ".tsv") and "timing" not in p.name and p.name != "loss.csv")
            assert files, cmd
            outs.append({p.name: p.read_bytes() for p in files})
        assert outs[0] == outs[1], cmd
        checked += len(outs[0])
    record_property("detail", f"{len(COMMANDS) + 1} commands, {checked} files byte-identical")


# ---------------------------------------------------------------- 6-9: synthetic recovery


@pytest.fixture(scope="module")
def seed_runs():
    """Full-KG KnowCL runs of the fixture on the default city, one per master seed."""
    return {s: ex.run_pipeline(fixture_config(s)) for s in SEEDS}


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_synthetic_recovery(seed_runs, record_property):
    t0 = time.perf_counter()
    sat = seed_runs[0]
    assert sat.city.config == CityConfig(noise_sigma=0.05)
    attained = {"satellite": (primary_r2(sat.report), primary_r2(ex.run_random_baseline(fixture_config(0), sat.city)))}
    sv_cfg = fixture_config(0, "streetview")
    sv = ex.run_pipeline(sv_cfg, city=sat.city, kg=sat.kg)
    attained["streetview"] = (primary_r2(sv.report), primary_r2(ex.run_random_baseline(sv_cfg, sat.city)))
    elapsed = time.perf_counter() - t0 + sum(sat.timing.values())
    record_property("detail", ", ".join(f"{m} {t:.3f} vs random {r:.3f}" for m, (t, r) in attained.items()) + f", {elapsed:.0f}s")
    for mode, (trained, rand) in attained.items():
        assert trained - rand >= 0.15, mode
        assert abs(trained - PINNED[mode][0]) <= 0.05, mode
        assert abs(rand - PINNED[mode][1]) <= 0.05, mode
    assert elapsed < 15 * 60


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_ablation_direction(seed_runs, record_property):
    family = coupled_family()
    wins, pairs = 0, []
    for s in SEEDS:
        full = seed_runs[s]
        cfg = fixture_config(s)
        kept = tuple(f for f in cfg.kg.families if f != family)
        ablated = ex.run_pipeline(replace(cfg, kg=replace(cfg.kg, families=kept)), city=full.city)
        a, b = primary_r2(full.report), primary_r2(ablated.report)
        pairs.append(f"{a:.3f}/{b:.3f}")
        wins += b < a
    record_property("detail", f"drop {family}: full/ablated {' '.join(pairs)}; {wins}/5 seeds")
    assert wins >= 4


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_knowledge_infusion_superiority(seed_runs, record_property):
    wins, pairs = 0, []
    for s in SEEDS:
        run = seed_runs[s]
        a = primary_r2(run.report)
        b = primary_r2(ex.run_kg_simclr(fixture_config(s), run.city, run.kg))
        pairs.append(f"{a:.3f}/{b:.3f}")
        wins += a >= b
    record_property("detail", f"KnowCL/KG-SimCLR {' '.join(pairs)}; {wins}/5 seeds")
    assert wins >= 4


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_transfer(seed_runs, record_property):
    cfg = fixture_config(0)
    src = seed_runs[0]
    diag = ex.run_transfer(cfg, source_run=src)
    assert diag["diagonal"]
    strip = lambda runs: [{k: v for k, v in r.items() if k != "config_hash"} for r in runs]
    assert strip(diag["runs"]) == strip(src.report["runs"])
    off = ex.run_transfer(replace(cfg, target_city=CityConfig(seed=TARGET_SEED)), source_run=src)
    assert not off["diagonal"] and off["target_seed"] == TARGET_SEED
    a, b = primary_r2(off), next(r["r2"] for r in off["baseline_runs"] if r["indicator"] == "pop")
    record_property("detail", f"diagonal exact; seed 0 -> {TARGET_SEED}: {a:.3f} vs random {b:.3f}")
    assert a - b >= 0.10
