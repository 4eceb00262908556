"""Seeded synthetic cities with a planted per-region latent factor.

Each region draws a latent vector whose coordinates play fixed roles:

* appearance - shifts per-channel pixel means only; invisible to the KG
* mobility   - a smooth field over the city; drives region-to-region flows
  (flowTransition)
* function   - drives POI category mixes and check-in sequences
* distractor - only changes image texture; invisible to the KG

Image textures are oriented gratings whose amplitudes are affine in the
non-appearance coordinates. Indicators are log-linear in chosen roles, so the
amount of latent information a representation carries is measurable.

Every sub-generator draws from its own stream, derived from the master seed;
the latent-to-pixel map and indicator weights come from ``family_seed`` so
cities of the same family share them.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .urbankg import BC, CATEGORY, POI, REGION, Entity, read_entities, write_entities

STREAMS = {"boundaries": 1, "latent": 2, "pois": 3, "business": 4, "flows": 5, "checkins": 6, "imagery": 7, "indicators": 8}
RASTER_MAGIC = b"KCIM"

# generator family constants (fixed by calibration, see README)
MOBILITY_DIMS = 1
FUNCTION_DIMS = 2
FLOW_BASE = 30.0
FLOW_STRENGTH = 3.0
TONE = 0.05
SIGNAL_AMP = 0.04
DISTRACTOR_AMP = 0.06


@dataclass(frozen=True)
class CityConfig:
    n_regions: int = 300
    grid_side_km: float = 10.0
    latent_dim: int = 11
    n_categories: int = 8
    pois_per_region: float = 4.0
    n_business_centers: int = 12
    sv_per_region: int = 10
    sat_size: int = 64
    sv_size: int = 32
    channels: int = 3
    noise_sigma: float = 0.05
    seed: int = 0
    family_seed: int = 0
    n_actors: int = 400
    checkins_per_actor: int = 20

    def __post_init__(self):
        counts = ("n_regions", "latent_dim", "n_categories", "n_business_centers", "sv_per_region", "sat_size", "sv_size", "channels", "n_actors", "checkins_per_actor")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.grid_side_km > 0:
            raise ValueError("grid_side_km must be positive")
        if self.pois_per_region < 0:
            raise ValueError("pois_per_region must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if min(self.sat_size, self.sv_size) < 7:
            raise ValueError("rasters must be at least 7 pixels wide")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CityConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def latent_roles(latent_dim: int) -> dict[str, slice]:
    n_sp = min(2, latent_dim)
    rest = latent_dim - n_sp
    n_mob = min(MOBILITY_DIMS, rest)
    n_fun = min(FUNCTION_DIMS, rest - n_mob)
    a, b, c = n_sp, n_sp + n_mob, n_sp + n_mob + n_fun
    return {"appearance": slice(0, a), "mobility": slice(a, b), "function": slice(b, c), "distractor": slice(c, latent_dim)}


@dataclass
class SyntheticCity:
    config: CityConfig
    entities: list
    region_ids: list
    flow_matrix: np.ndarray
    checkins: list
    latent: np.ndarray | None = None
    satellite: np.ndarray | None = None  # (R, C, S, S) float32
    streetview: np.ndarray | None = None  # (R, V, C, s, s) float32
    indicators: dict = field(default_factory=dict)

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    def region_entities(self) -> list:
        return [e for e in self.entities if e.kind == REGION]


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), STREAMS[stream]])


def _family_rng(family_seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(family_seed) & (2**64 - 1), 1000 + k])


def grid_shape(n: int) -> tuple[int, int]:
    rows = max(d for d in range(1, int(math.isqrt(n)) + 1) if n % d == 0)
    return rows, n // rows


def _lattice(cfg: CityConfig):
    rows, cols = grid_shape(cfg.n_regions)
    rng = _rng(cfg.seed, "boundaries")
    cw, ch = cfg.grid_side_km / cols, cfg.grid_side_km / rows
    vx = np.tile(np.arange(cols + 1) * cw, (rows + 1, 1))
    vy = np.tile((np.arange(rows + 1) * ch)[:, None], (1, cols + 1))
    jit = 0.2
    vx[1:rows, 1:cols] += rng.uniform(-jit, jit, (rows - 1, cols - 1)) * cw
    vy[1:rows, 1:cols] += rng.uniform(-jit, jit, (rows - 1, cols - 1)) * ch
    return rows, cols, vx, vy


def _latent(cfg: CityConfig, centers: np.ndarray) -> np.ndarray:
    rng = _rng(cfg.seed, "latent")
    roles = latent_roles(cfg.latent_dim)
    z = rng.normal(size=(cfg.n_regions, cfg.latent_dim))
    side = cfg.grid_side_km
    # mobility varies smoothly over the city; the rest are i.i.d. per region
    for k in range(roles["mobility"].start, roles["mobility"].stop):
        field_ = np.zeros(cfg.n_regions)
        for _ in range(4):
            ang = rng.uniform(0, 2 * np.pi)
            wavelength = side * rng.uniform(0.6, 1.6)
            kvec = 2 * np.pi / wavelength * np.array([np.cos(ang), np.sin(ang)])
            field_ += rng.normal() * np.cos(centers @ kvec + rng.uniform(0, 2 * np.pi))
        sd = field_.std()
        z[:, k] = (field_ - field_.mean()) / sd if sd > 0 else 0.0
    return z


def _category_logits(cfg: CityConfig, latent: np.ndarray) -> np.ndarray:
    roles = latent_roles(cfg.latent_dim)
    fun = latent[:, roles["function"]]
    rng = _family_rng(cfg.family_seed, 1)
    mix = rng.normal(scale=1.5, size=(fun.shape[1], cfg.n_categories))
    bias = rng.normal(scale=0.3, size=cfg.n_categories)
    return fun @ mix + bias


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _affinity(x: np.ndarray, strength: float) -> np.ndarray:
    """exp(-strength * squared distance / (2 * dim)) between rows; ones when dim is 0."""
    if x.shape[1] == 0:
        return np.ones((x.shape[0], x.shape[0]))
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    return np.exp(-strength * d2 / (2 * x.shape[1]))


def generate_city(config: CityConfig) -> SyntheticCity:
    """Regions, POIs, business centers, flows, check-ins and the latent factor (no imagery)."""
    cfg = config
    rows, cols, vx, vy = _lattice(cfg)
    region_ids = [f"r{k:04d}" for k in range(cfg.n_regions)]
    regions, corners = [], []
    for i in range(rows):
        for j in range(cols):
            ring = [(vx[i, j], vy[i, j]), (vx[i, j + 1], vy[i, j + 1]), (vx[i + 1, j + 1], vy[i + 1, j + 1]), (vx[i + 1, j], vy[i + 1, j])]
            corners.append(np.array(ring))
            regions.append(Entity(region_ids[i * cols + j], REGION, boundary=tuple(tuple(map(float, p)) for p in ring)))
    centers = np.array([c.mean(axis=0) for c in corners])
    latent = _latent(cfg, centers)
    roles = latent_roles(cfg.latent_dim)

    cat_ids = [f"cat{k:02d}" for k in range(cfg.n_categories)]
    categories = [Entity(c, CATEGORY) for c in cat_ids]

    rng = _rng(cfg.seed, "pois")
    probs = _softmax(_category_logits(cfg, latent))
    pois, poi_region = [], []
    for r in range(cfg.n_regions):
        n = int(rng.poisson(cfg.pois_per_region))
        cats = rng.choice(cfg.n_categories, size=n, p=probs[r])
        uv = rng.uniform(0.05, 0.95, size=(n, 2))
        v00, v01, v11, v10 = corners[r]
        for k in range(n):
            u, v = uv[k]
            p = (1 - u) * (1 - v) * v00 + u * (1 - v) * v01 + u * v * v11 + (1 - u) * v * v10
            pois.append(Entity(f"p{len(pois):05d}", POI, location=(float(p[0]), float(p[1])), category_id=cat_ids[cats[k]]))
            poi_region.append(r)

    rng = _rng(cfg.seed, "business")
    xy = rng.uniform(0, cfg.grid_side_km, size=(cfg.n_business_centers, 2))
    bcs = [Entity(f"bc{k:03d}", BC, location=(float(x), float(y))) for k, (x, y) in enumerate(xy)]

    rng = _rng(cfg.seed, "flows")
    rate = FLOW_BASE * _affinity(latent[:, roles["mobility"]], FLOW_STRENGTH)
    np.fill_diagonal(rate, 0.0)
    flows = rng.poisson(rate).astype(float)

    rng = _rng(cfg.seed, "checkins")
    checkins = []
    by_region: list[list[int]] = [[] for _ in range(cfg.n_regions)]
    for k, r in enumerate(poi_region):
        by_region[r].append(k)
    occupied = np.array([r for r in range(cfg.n_regions) if by_region[r]])
    if occupied.size:
        pref = _affinity(latent[:, roles["function"]], 4.0)[:, occupied]
        pref = pref / pref.sum(axis=1, keepdims=True)
        for a in range(cfg.n_actors):
            home = int(rng.integers(cfg.n_regions))
            visited = rng.choice(occupied, size=cfg.checkins_per_actor, p=pref[home])
            for t, r in enumerate(visited):
                poi = by_region[r][int(rng.integers(len(by_region[r])))]
                checkins.append((pois[poi].id, f"u{a:04d}", float(t)))

    return SyntheticCity(cfg, regions + categories + pois + bcs, region_ids, flows, checkins, latent)


# ---------------------------------------------------------------- imagery


@dataclass
class TextureBank:
    """Family-level latent-to-pixel map for one raster size."""

    mean_map: np.ndarray  # (C, n_appearance)
    colors: np.ndarray  # (J, C)
    freqs: np.ndarray  # (J,)
    angles: np.ndarray  # (J,)
    amp0: np.ndarray  # (J,)
    amp1: np.ndarray  # (J,)
    dims: np.ndarray  # (J,) latent coordinate driving each grating


def texture_bank(config: CityConfig, which: str) -> TextureBank:
    roles = latent_roles(config.latent_dim)
    rng = _family_rng(config.family_seed, 10 if which == "satellite" else 11)
    n_sp = roles["appearance"].stop
    c = config.channels
    mean_map = rng.uniform(-1, 1, size=(c, n_sp)) * TONE
    dims = np.arange(n_sp, config.latent_dim)
    j = dims.size
    colors = rng.normal(size=(j, c))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    freqs = rng.uniform(0.06, 0.3, size=j)
    angles = rng.uniform(0, np.pi, size=j)
    distract = (dims >= roles["distractor"].start) & (dims < roles["distractor"].stop)
    amp0 = np.where(distract, 0.12, 0.07)
    amp1 = np.where(distract, DISTRACTOR_AMP, SIGNAL_AMP)
    return TextureBank(mean_map, colors, freqs, angles, amp0, amp1, dims)


def _gratings(bank: TextureBank, size: int, phases: np.ndarray) -> np.ndarray:
    """(J, size, size) unit-amplitude gratings."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    out = np.empty((bank.dims.size, size, size))
    for k in range(bank.dims.size):
        proj = xx * np.cos(bank.angles[k]) + yy * np.sin(bank.angles[k])
        out[k] = np.cos(2 * np.pi * bank.freqs[k] * proj + phases[k])
    return out


def _compose(bank: TextureBank, latent: np.ndarray, pattern: np.ndarray, channels: int) -> np.ndarray:
    """Noise-free rasters (R, C, S, S) for all regions given one grating set."""
    roles_sp = bank.mean_map.shape[1]
    means = 0.5 + latent[:, :roles_sp] @ bank.mean_map.T  # (R, C)
    amps = np.clip(bank.amp0 + bank.amp1 * latent[:, bank.dims], 0.0, None)  # (R, J)
    weights = amps[:, :, None] * bank.colors[None, :, :]  # (R, J, C)
    tex = np.tensordot(weights, pattern, axes=([1], [0]))  # (R, C, S, S)
    return means[:, :, None, None] + tex


def render_imagery(city: SyntheticCity, config: CityConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Satellite (R, C, S, S) and street-view (R, V, C, s, s) rasters in [0, 1], float32."""
    cfg = config or city.config
    if city.latent is None:
        raise DataError("city has no latent factor to render from")
    rng = _rng(cfg.seed, "imagery")
    lat = city.latent
    n = lat.shape[0]
    sat_bank = texture_bank(cfg, "satellite")
    sat = _compose(sat_bank, lat, _gratings(sat_bank, cfg.sat_size, np.zeros(sat_bank.dims.size)), cfg.channels)
    sat = sat + rng.normal(scale=cfg.noise_sigma, size=sat.shape) if cfg.noise_sigma > 0 else sat
    sat = np.clip(sat, 0.0, 1.0).astype(np.float32)

    sv_bank = texture_bank(cfg, "streetview")
    golden = (math.sqrt(5) - 1) / 2
    sv = np.empty((n, cfg.sv_per_region, cfg.channels, cfg.sv_size, cfg.sv_size), dtype=np.float32)
    for v in range(cfg.sv_per_region):
        phases = 2 * np.pi * ((golden * (v + 1) * (np.arange(sv_bank.dims.size) + 1)) % 1.0)
        view = _compose(sv_bank, lat, _gratings(sv_bank, cfg.sv_size, phases), cfg.channels)
        if cfg.noise_sigma > 0:
            view = view + rng.normal(scale=cfg.noise_sigma, size=view.shape)
        sv[:, v] = np.clip(view, 0.0, 1.0)
    return sat, sv


# ---------------------------------------------------------------- indicators


@dataclass(frozen=True)
class IndicatorSpec:
    """Indicator name -> latent roles it depends on, with optional per-role weights
    (default 1); ``noise`` is the std of the log-scale noise."""

    roles: tuple = (("pop", ("mobility",)), ("econ", ("function",)), ("edu", ("mobility", "function")))
    weight_scale: float = 0.6
    offset: float = 2.5
    noise: float = 0.1

    def __post_init__(self):
        canon = []
        for entry in self.roles:
            name, used = entry[0], tuple(entry[1])
            wts = tuple(float(x) for x in entry[2]) if len(entry) > 2 else (1.0,) * len(used)
            if len(wts) != len(used):
                raise ValueError(f"indicator {name!r}: {len(used)} roles but {len(wts)} weights")
            canon.append((name, used, wts))
        object.__setattr__(self, "roles", tuple(canon))

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self.roles]

    def role_weights(self, name: str) -> dict[str, float]:
        for n, used, wts in self.roles:
            if n == name:
                return dict(zip(used, wts))
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"roles": [[n, list(r), list(w)] for n, r, w in self.roles], "weight_scale": self.weight_scale, "offset": self.offset, "noise": self.noise}

    @classmethod
    def from_dict(cls, d: dict) -> "IndicatorSpec":
        return cls(tuple(d.get("roles", cls().roles)), d.get("weight_scale", 0.6), d.get("offset", 2.5), d.get("noise", 0.1))


def indicator_weights(config: CityConfig, spec: IndicatorSpec) -> dict[str, tuple[np.ndarray, float]]:
    roles = latent_roles(config.latent_dim)
    out = {}
    for k, name in enumerate(spec.names):
        rng = _family_rng(config.family_seed, 100 + k)
        w = np.zeros(config.latent_dim)
        norm = 0.0
        for role, scale in spec.role_weights(name).items():
            if role not in roles:
                raise ValueError(f"indicator {name!r}: unknown latent role {role!r}")
            sl = roles[role]
            n = sl.stop - sl.start
            w[sl] = scale * rng.choice([-1.0, 1.0], size=n) * rng.uniform(0.7, 1.3, size=n)
            norm += scale**2 * n
        w *= spec.weight_scale * math.sqrt(3) / math.sqrt(norm or 1.0)
        out[name] = (w, spec.offset)
    return out


def log_linear(latent: np.ndarray, w: np.ndarray, b: float, eps) -> np.ndarray:
    """y_raw = exp(w.latent + b + eps) - 1, clipped at 0."""
    return np.maximum(np.exp(latent @ w + b + eps) - 1.0, 0.0)


def make_indicators(city: SyntheticCity, spec: IndicatorSpec = IndicatorSpec()) -> dict[str, np.ndarray]:
    if city.latent is None:
        raise DataError("city has no latent factor")
    rng = _rng(city.config.seed, "indicators")
    out = {}
    for name, (w, b) in indicator_weights(city.config, spec).items():
        eps = rng.normal(scale=spec.noise, size=city.latent.shape[0]) if spec.noise > 0 else 0.0
        out[name] = log_linear(city.latent, w, b, eps)
    return out


def synthesize(config: CityConfig, spec: IndicatorSpec = IndicatorSpec()) -> SyntheticCity:
    """generate -> render -> indicators."""
    city = generate_city(config)
    city.satellite, city.streetview = render_imagery(city)
    city.indicators = make_indicators(city, spec)
    return city


def with_seed(config: CityConfig, seed: int) -> CityConfig:
    return replace(config, seed=seed)


# ---------------------------------------------------------------- files


def write_raster(path, raster: np.ndarray) -> None:
    """raster: (C, H, W). Stored as KCIM header + float32 LE, row-major, channel-interleaved."""
    c, h, w = raster.shape
    body = np.ascontiguousarray(np.transpose(raster, (1, 2, 0))).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<III", w, h, c) + body)


def read_raster(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != RASTER_MAGIC:
        raise DataError(f"{path}: not a KCIM raster")
    w, h, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != w * h * c:
        raise DataError(f"{path}: expected {w * h * c} values, found {data.size}")
    return np.transpose(data.reshape(h, w, c), (2, 0, 1)).astype(np.float32)


def save_city(city: SyntheticCity, out_dir, spec: IndicatorSpec | None = None) -> None:
    out = Path(out_dir)
    (out / "imagery" / "satellite").mkdir(parents=True, exist_ok=True)
    (out / "imagery" / "streetview").mkdir(parents=True, exist_ok=True)
    meta = {"config": city.config.to_dict(), "region_ids": city.region_ids}
    if spec is not None:
        meta["indicator_spec"] = spec.to_dict()
    (out / "city.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_entities(out / "entities.jsonl", city.entities)
    with open(out / "flows.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["head", "tail", "count"])
        rows, cols = np.nonzero(city.flow_matrix)
        for i, j in zip(rows, cols):
            wr.writerow([city.region_ids[i], city.region_ids[j], repr(float(city.flow_matrix[i, j]))])
    with open(out / "checkins.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["poi", "actor", "t"])
        for p, a, t in city.checkins:
            wr.writerow([p, a, repr(float(t))])
    if city.indicators:
        write_indicators(out / "indicators.csv", city.region_ids, city.indicators)
    if city.latent is not None:
        np.savetxt(out / "latent.csv", city.latent, delimiter=",", fmt="%.17g")
    if city.satellite is not None:
        for r, rid in enumerate(city.region_ids):
            write_raster(out / "imagery" / "satellite" / f"{rid}.kcim", city.satellite[r])
    if city.streetview is not None:
        for r, rid in enumerate(city.region_ids):
            for v in range(city.streetview.shape[1]):
                write_raster(out / "imagery" / "streetview" / f"{rid}_{v:03d}.kcim", city.streetview[r, v])


def write_indicators(path, region_ids, indicators: dict) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["region", "indicator", "y_raw"])
        for name in sorted(indicators):
            for rid, y in zip(region_ids, indicators[name]):
                wr.writerow([rid, name, repr(float(y))])


def read_indicators(path, region_ids) -> dict[str, np.ndarray]:
    pos = {r: i for i, r in enumerate(region_ids)}
    out: dict[str, np.ndarray] = {}
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.DictReader(fh), 2):
            try:
                arr = out.setdefault(row["indicator"], np.full(len(region_ids), np.nan))
                arr[pos[row["region"]]] = float(row["y_raw"])
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{n}: bad indicator row ({exc})") from None
    for name, arr in out.items():
        if np.isnan(arr).any():
            raise DataError(f"{path}: indicator {name!r} missing for some regions")
    return out


def load_city(in_dir, with_kg_sources: bool = True) -> SyntheticCity:
    """Read a city written by :func:`save_city`. Without KG sources only imagery and labels are read."""
    d = Path(in_dir)
    if not (d / "city.json").exists():
        raise DataError(f"{d}: no city.json")
    meta = json.loads((d / "city.json").read_text())
    cfg = CityConfig.from_dict(meta["config"])
    region_ids = meta["region_ids"]
    pos = {r: i for i, r in enumerate(region_ids)}
    entities: list = []
    flows = np.zeros((len(region_ids), len(region_ids)))
    checkins: list = []
    if with_kg_sources:
        entities = read_entities(d / "entities.jsonl")
        with open(d / "flows.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                flows[pos[row["head"]], pos[row["tail"]]] = float(row["count"])
        with open(d / "checkins.csv", newline="") as fh:
            checkins = [(row["poi"], row["actor"], float(row["t"])) for row in csv.DictReader(fh)]
    latent = np.loadtxt(d / "latent.csv", delimiter=",", ndmin=2) if (d / "latent.csv").exists() else None
    indicators = read_indicators(d / "indicators.csv", region_ids) if (d / "indicators.csv").exists() else {}
    sat_dir, sv_dir = d / "imagery" / "satellite", d / "imagery" / "streetview"
    satellite = streetview = None
    if sat_dir.exists():
        try:
            satellite = np.stack([read_raster(sat_dir / f"{rid}.kcim") for rid in region_ids])
        except FileNotFoundError as exc:
            raise DataError(f"missing satellite raster: {exc.filename}") from None
    if sv_dir.exists():
        views = []
        for rid in region_ids:
            files = sorted(sv_dir.glob(f"{rid}_*.kcim"))
            if not files:
                raise DataError(f"region {rid} has no street-view rasters")
            views.append(np.stack([read_raster(f) for f in files]))
        if len({v.shape for v in views}) != 1:
            raise DataError("regions have differing street-view counts")
        streetview = np.stack(views)
    return SyntheticCity(cfg, entities, region_ids, flows, checkins, latent, satellite, streetview, indicators)
