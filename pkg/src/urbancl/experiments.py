"""Experiment runners: train/evaluate, ablation, KG-SimCLR, transfer, matching, PCA, sweeps, scatter."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from . import nncore as nn
from .contrastive import TrainConfig, TrainResult, select_views, train_contrastive
from .downstream import SplitSpec, log_transform, r_squared, rmse, split_regions, train_regression
from .encoders import SemanticEncoderConfig, VisualEncoder, VisualEncoderConfig
from .errors import ConfigError, DataError, NotFoundError
from .synthcity import CityConfig, IndicatorSpec, SyntheticCity, synthesize
from .urbankg import FAMILIES, KGParams, UrbanKG, add_reverse_edges, build_kg

VERSION = f"v{__version__}"
TRANSFER_VIEWS = 40


def kg_params_from_dict(d: dict) -> KGParams:
    known = {f.name for f in fields(KGParams)}
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
    return KGParams(**kw)


def kg_params_to_dict(p: KGParams) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(p).items()}


@dataclass(frozen=True)
class RegressionConfig:
    max_epochs: int = 2000
    patience: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    city: CityConfig = CityConfig()
    indicator_spec: IndicatorSpec = IndicatorSpec()
    kg: KGParams = KGParams()
    train: TrainConfig = TrainConfig()
    semantic: SemanticEncoderConfig = SemanticEncoderConfig()
    visual: VisualEncoderConfig = VisualEncoderConfig()
    indicators: tuple = ("pop", "econ", "edu")
    primary: str = "pop"
    seed: int = 0
    split_seed: int | None = None
    regression: RegressionConfig = RegressionConfig()
    target_city: CityConfig | None = None
    k_list: tuple = (1, 2, 5, 10)

    def __post_init__(self):
        object.__setattr__(self, "indicators", tuple(self.indicators))
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        known = set(self.indicator_spec.names)
        unknown = [i for i in self.indicators if i not in known]
        if unknown:
            raise ConfigError(f"indicators not produced by the generator: {unknown}")
        if self.primary not in self.indicators:
            raise ConfigError(f"primary indicator {self.primary!r} is not in the indicator list")
        if self.visual.channels != self.city.channels:
            raise ConfigError("visual encoder channels must match the city imagery")
        if self.visual.d_out != self.semantic.d:
            raise ConfigError("visual output width must equal the KG embedding width")
        if self.train.mode == "streetview" and self.train.k > self.city.sv_per_region:
            raise ConfigError(f"k={self.train.k} exceeds the {self.city.sv_per_region} street views generated")

    def seeded(self) -> "ExperimentConfig":
        """Propagate the master seed into every seeded component (the generator family is kept)."""
        s = self.seed
        target = replace(self.target_city, family_seed=self.city.family_seed) if self.target_city else None
        return replace(
            self,
            city=replace(self.city, seed=s),
            train=replace(self.train, seed=s),
            semantic=replace(self.semantic, seed=s),
            visual=replace(self.visual, seed=s),
            target_city=target,
        )

    def to_dict(self) -> dict:
        return {
            "city": self.city.to_dict(),
            "indicator_spec": self.indicator_spec.to_dict(),
            "kg": kg_params_to_dict(self.kg),
            "train": self.train.to_dict(),
            "semantic": self.semantic.to_dict(),
            "visual": self.visual.to_dict(),
            "indicators": list(self.indicators),
            "primary": self.primary,
            "seed": self.seed,
            "split_seed": self.split_seed,
            "regression": asdict(self.regression),
            "target_city": self.target_city.to_dict() if self.target_city else None,
            "k_list": list(self.k_list),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        base = cls()
        try:
            return cls(
                city=CityConfig.from_dict({**base.city.to_dict(), **d.get("city", {})}),
                indicator_spec=IndicatorSpec.from_dict(d["indicator_spec"]) if "indicator_spec" in d else base.indicator_spec,
                kg=kg_params_from_dict({**kg_params_to_dict(base.kg), **d.get("kg", {})}),
                train=TrainConfig.from_dict({**base.train.to_dict(), **d.get("train", {})}),
                semantic=SemanticEncoderConfig.from_dict({**base.semantic.to_dict(), **d.get("semantic", {})}),
                visual=VisualEncoderConfig.from_dict({**base.visual.to_dict(), **d.get("visual", {})}),
                indicators=tuple(d.get("indicators", base.indicators)),
                primary=d.get("primary", base.primary),
                seed=int(d.get("seed", base.seed)),
                split_seed=None if d.get("split_seed") is None else int(d["split_seed"]),
                regression=RegressionConfig(**{**asdict(base.regression), **d.get("regression", {})}),
                target_city=CityConfig.from_dict({**base.city.to_dict(), **d["target_city"]}) if d.get("target_city") else None,
                k_list=tuple(d.get("k_list", base.k_list)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from None

    @property
    def effective_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def round_sig(obj, digits: int = 6):
    """Round every float in a nested structure to ``digits`` significant digits."""
    if isinstance(obj, float):
        if not math.isfinite(obj) or obj == 0.0:
            return obj
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, dict):
        return {k: round_sig(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_sig(v, digits) for v in obj]
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(round_sig(report), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- pipeline pieces


def build_city_kg(city: SyntheticCity, params: KGParams) -> UrbanKG:
    kg, _ = build_kg(city.entities, city.flow_matrix, city.region_ids, city.checkins, params)
    return add_reverse_edges(kg) if kg.facts else kg


def train_on_city(city: SyntheticCity, kg: UrbanKG, cfg: ExperimentConfig, log_every: int = 0) -> TrainResult:
    return train_contrastive(kg, city.region_ids, city.satellite, city.streetview, cfg.train, cfg.semantic, cfg.visual, log_every)


def imagery_for(city: SyntheticCity, mode: str, k: int, seed: int) -> np.ndarray:
    if mode == "satellite":
        if city.satellite is None:
            raise DataError("city has no satellite imagery")
        return city.satellite
    if city.streetview is None:
        raise DataError("city has no street-view imagery")
    views = select_views(city.n_regions, city.streetview.shape[1], k, seed)
    return np.stack([city.streetview[i][views[i]] for i in range(city.n_regions)])


def representations(visual: VisualEncoder, city: SyntheticCity, mode: str, k: int, seed: int) -> np.ndarray:
    """Pre-projection visual representations for every region."""
    return visual.embed(imagery_for(city, mode, k, seed))


@dataclass
class IndicatorFit:
    report: dict
    predictions: np.ndarray
    truth: np.ndarray
    split: tuple


def evaluate_indicator(x: np.ndarray, city: SyntheticCity, indicator: str, cfg: ExperimentConfig) -> IndicatorFit:
    if indicator not in city.indicators:
        raise NotFoundError(f"unknown indicator {indicator!r}")
    y = log_transform(city.indicators[indicator])
    split_seed = cfg.effective_split_seed
    tr, va, te = split_regions(range(city.n_regions), SplitSpec(seed=split_seed))
    fit = train_regression(x, y, (tr, va), seed=split_seed, max_epochs=cfg.regression.max_epochs, patience=cfg.regression.patience)
    pred = fit.head.predict(x)
    report = {
        "indicator": indicator,
        "r2": r_squared(pred[te], y[te]),
        "rmse": rmse(pred[te], y[te]),
        "chosen_hp": dict(fit.hp),
        "split_sizes": [len(tr), len(va), len(te)],
        "seeds": {"master": cfg.seed, "city": city.config.seed, "split": split_seed, "train": cfg.train.seed},
        "config_hash": cfg.config_hash(),
    }
    return IndicatorFit(report, pred, y, (tr, va, te))


def evaluate(x: np.ndarray, city: SyntheticCity, cfg: ExperimentConfig) -> list[dict]:
    return [evaluate_indicator(x, city, ind, cfg).report for ind in cfg.indicators]


def loss_summary(result: TrainResult) -> list[float]:
    return [l for _, l, _ in result.losses]


def _envelope(kind: str, cfg: ExperimentConfig, **body) -> dict:
    return {"experiment": kind, "version": VERSION, "config_hash": cfg.config_hash(), "config": cfg.to_dict(), **body}


# ---------------------------------------------------------------- experiments


@dataclass
class RunOutput:
    report: dict
    result: TrainResult | None = None
    city: SyntheticCity | None = None
    kg: UrbanKG | None = None
    timing: dict = field(default_factory=dict)


def run_pipeline(cfg: ExperimentConfig, city: SyntheticCity | None = None, kg: UrbanKG | None = None, log_every: int = 0) -> RunOutput:
    """Generate (or reuse) a city, build its KG, pretrain, then evaluate every indicator."""
    import time

    cfg = cfg.seeded()
    t0 = time.perf_counter()
    city = city or synthesize(cfg.city, cfg.indicator_spec)
    kg = kg or build_city_kg(city, cfg.kg)
    t1 = time.perf_counter()
    result = train_on_city(city, kg, cfg, log_every)
    t2 = time.perf_counter()
    x = representations(result.visual, city, cfg.train.mode, cfg.train.k, cfg.train.seed)
    reports = evaluate(x, city, cfg)
    t3 = time.perf_counter()
    report = _envelope(
        "train-eval",
        cfg,
        relations=list(kg.relation_names),
        n_facts=len(kg.facts),
        loss_curve=loss_summary(result),
        runs=reports,
    )
    return RunOutput(report, result, city, kg, {"prepare_s": t1 - t0, "train_s": t2 - t1, "evaluate_s": t3 - t2})


def run_random_baseline(cfg: ExperimentConfig, city: SyntheticCity | None = None) -> dict:
    """Same evaluation with the visual encoder frozen at its seeded initialisation."""
    cfg = cfg.seeded()
    city = city or synthesize(cfg.city, cfg.indicator_spec)
    x = representations(VisualEncoder(cfg.visual), city, cfg.train.mode, cfg.train.k, cfg.train.seed)
    return _envelope("random-baseline", cfg, runs=evaluate(x, city, cfg))


def run_ablation(cfg: ExperimentConfig, drop_family: str | None) -> dict:
    """Paired full-KG and family-ablated runs from identical seeds."""
    if drop_family is not None and drop_family not in FAMILIES:
        raise ConfigError(f"unknown knowledge family {drop_family!r}; expected one of {list(FAMILIES)}")
    full = run_pipeline(cfg)
    if drop_family is None:
        ablated_report = full.report
    else:
        families = tuple(f for f in cfg.kg.families if f != drop_family)
        ablated = run_pipeline(replace(cfg, kg=replace(cfg.kg, families=families)), city=full.city)
        ablated_report = ablated.report
    return _envelope("ablation", cfg.seeded(), dropped=drop_family, full=full.report, ablated=ablated_report)


def run_kg_simclr(cfg: ExperimentConfig, city: SyntheticCity | None = None, kg: UrbanKG | None = None) -> dict:
    out = run_pipeline(replace(cfg, train=replace(cfg.train, objective="kg-simclr")), city, kg)
    return out.report


def _transfer_k(source: CityConfig, target: SyntheticCity, mode: str, train_k: int, diagonal: bool) -> int:
    if mode != "streetview":
        return train_k
    if diagonal:
        return train_k
    available = target.streetview.shape[1]
    if available < TRANSFER_VIEWS:
        warnings.warn(f"target city has {available} street views per region; using {available} instead of {TRANSFER_VIEWS}")
        return available
    return TRANSFER_VIEWS


def check_geometry(source: CityConfig, target: SyntheticCity, mode: str) -> None:
    if mode == "satellite":
        want = (source.channels, source.sat_size, source.sat_size)
        got = None if target.satellite is None else tuple(target.satellite.shape[1:])
    else:
        want = (source.channels, source.sv_size, source.sv_size)
        got = None if target.streetview is None else tuple(target.streetview.shape[2:])
    if got != want:
        raise ConfigError(f"target {mode} imagery has shape {got}, source encoder expects {want}")


def run_transfer(cfg: ExperimentConfig, target: SyntheticCity | None = None, source_run: RunOutput | None = None) -> dict:
    """Pretrain on the source city, then fit and test regressors on the target from imagery alone.

    The target is ``target`` if given (its KG sources are never used), else
    generated from ``cfg.target_city`` (defaulting to the source city).
    """
    seeded = cfg.seeded()
    diagonal = target is None and (seeded.target_city is None or seeded.target_city == seeded.city)
    if target is None:
        target = synthesize(seeded.target_city or seeded.city, seeded.indicator_spec)
    check_geometry(seeded.city, target, seeded.train.mode)
    src = source_run or run_pipeline(cfg)
    k = _transfer_k(seeded.city, target, seeded.train.mode, seeded.train.k, diagonal)
    x = representations(src.result.visual, target, seeded.train.mode, k, seeded.train.seed)
    xb = representations(VisualEncoder(seeded.visual), target, seeded.train.mode, k, seeded.train.seed)
    return _envelope(
        "transfer",
        seeded,
        diagonal=diagonal,
        target_seed=target.config.seed,
        views=k if seeded.train.mode == "streetview" else None,
        runs=evaluate(x, target, seeded),
        baseline_runs=evaluate(xb, target, seeded),
    )


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / np.where(na == 0, 1, na)) @ (b / np.where(nb == 0, 1, nb)).T


def similarity_match(rep_a: np.ndarray, ids_a, rep_b: np.ndarray, ids_b, top_k: int, ind_a: dict | None = None, ind_b: dict | None = None) -> list[dict]:
    """Top-k most similar regions of B for each region of A, by cosine of visual representations."""
    if top_k < 1 or top_k > len(ids_b):
        raise ValueError(f"top_k must be in [1, {len(ids_b)}], got {top_k}")
    sim = cosine_matrix(np.asarray(rep_a, float), np.asarray(rep_b, float))
    rows = []
    for i, a in enumerate(ids_a):
        order = sorted(range(len(ids_b)), key=lambda j: (-sim[i, j], j))[:top_k]
        for rank, j in enumerate(order, 1):
            row = {"region_a": a, "rank": rank, "region_b": ids_b[j], "similarity": float(sim[i, j])}
            for name, vals in (ind_a or {}).items():
                row[f"a_{name}"] = float(vals[i])
            for name, vals in (ind_b or {}).items():
                row[f"b_{name}"] = float(vals[j])
            rows.append(row)
    return rows


def _power_iteration(c: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    v = rng.normal(size=c.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = c @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            break
        v = w
    lam = float(v @ c @ v)
    return lam, v


def pca_export(x, n_components: int = 2, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0):
    """Projected coordinates, components (rows) and explained-variance ratios via deflated power iteration."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if n_components < 1 or n_components > d:
        raise ValueError(f"n_components must be in [1, {d}]")
    if n < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} samples, got {n}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    work = cov.copy()
    comps, lams = [], []
    for _ in range(n_components):
        lam, v = _power_iteration(work, rng, tol, max_iter)
        if lam <= 0.0 and comps:
            # remaining spectrum is null: any unit vector orthogonal to the found components
            basis = np.linalg.qr(np.column_stack(comps + [rng.normal(size=d)]))[0]
            v = basis[:, -1]
            lam = 0.0
        v = v - sum((v @ u) * u for u in comps) if comps else v
        v /= np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        lams.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
    comps_arr = np.array(comps)
    ratios = np.array(lams) / total if total > 0 else np.zeros(n_components)
    return xc @ comps_arr.T, comps_arr, ratios


def run_sweep(cfg: ExperimentConfig, k_list=None, source_run: RunOutput | None = None) -> dict:
    """Train once with the configured k, then evaluate with k street views per region for each k."""
    seeded = cfg.seeded()
    k_list = tuple(k_list or seeded.k_list)
    if seeded.train.mode != "streetview":
        raise ConfigError("the street-view sweep needs train.mode = 'streetview'")
    bad = [k for k in k_list if k < 1 or k > seeded.city.sv_per_region]
    if bad:
        raise ValueError(f"invalid street-view counts {bad}; allowed 1..{seeded.city.sv_per_region}")
    src = source_run or run_pipeline(cfg)
    points = []
    for k in k_list:
        x = representations(src.result.visual, src.city, "streetview", k, seeded.train.seed)
        points.append({"k": k, "runs": evaluate(x, src.city, seeded)})
    return _envelope("sweep", seeded, train_k=seeded.train.k, points=points)


def scatter_rows(visual: VisualEncoder, city: SyntheticCity, cfg: ExperimentConfig, indicator: str) -> tuple[list[dict], dict]:
    """Per-region (true, predicted, split) rows plus test and all-region R^2."""
    seeded = cfg.seeded()
    if indicator not in city.indicators:
        raise NotFoundError(f"unknown indicator {indicator!r}")
    x = representations(visual, city, seeded.train.mode, seeded.train.k, seeded.train.seed)
    fit = evaluate_indicator(x, city, indicator, seeded)
    label = {}
    for name, part in zip(("train", "valid", "test"), fit.split):
        for i in part:
            label[i] = name
    rows = [
        {"region": rid, "true": float(fit.truth[i]), "predicted": float(fit.predictions[i]), "split": label[i]}
        for i, rid in enumerate(city.region_ids)
    ]
    summary = {"indicator": indicator, "r2_test": fit.report["r2"], "r2_all": r_squared(fit.predictions, fit.truth), "config_hash": seeded.config_hash()}
    return rows, summary


# ---------------------------------------------------------------- checkpoints


def save_run_checkpoint(path, result: TrainResult, cfg: ExperimentConfig) -> None:
    """All encoder and head parameters, Adam moments if any, and the seeded config in the header."""
    nn.save_checkpoint(path, result.parameters(), len(result.losses), result.optimizer, extra={"experiment": cfg.seeded().to_dict()})


def load_visual(path) -> tuple[VisualEncoder, ExperimentConfig]:
    """Rebuild the frozen visual encoder and the config it was trained with."""
    ck = nn.load_checkpoint(path)
    if "experiment" not in ck["extra"]:
        raise DataError(f"{path}: checkpoint carries no experiment config")
    cfg = ExperimentConfig.from_dict(ck["extra"]["experiment"])
    visual = VisualEncoder(cfg.visual)
    for p in visual.parameters():
        if p.id not in ck["values"]:
            raise DataError(f"{path}: parameter {p.id} missing from checkpoint")
        if ck["values"][p.id].shape != p.data.shape:
            raise DataError(f"{path}: parameter {p.id} has shape {ck['values'][p.id].shape}, expected {p.data.shape}")
        p.data = np.array(ck["values"][p.id], dtype=float)
    return visual, cfg
