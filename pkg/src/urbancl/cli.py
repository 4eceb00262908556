"""Command-line entry point: ``urbancl <command> [--config cfg.json] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .errors import ConfigError, DataError, NotFoundError
from .synthcity import load_city, save_city, synthesize
from .urbankg import FAMILIES, serialize_triples

EXIT_CONFIG = 2
EXIT_DATA = 3


def load_config(args) -> ex.ExperimentConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = ex.ExperimentConfig.from_dict(data)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def with_train_flags(cfg: ex.ExperimentConfig, args) -> ex.ExperimentConfig:
    train = {k: getattr(args, k) for k in ("mode", "m", "n_iter", "lr", "tau", "k") if getattr(args, k, None) is not None}
    sem = {k: v for k, v in (("L", getattr(args, "L", None)), ("composition", getattr(args, "composition", None))) if v is not None}
    try:
        d = cfg.to_dict()
        d["train"].update(train)
        d["semantic"].update(sem)
        return ex.ExperimentConfig.from_dict(d)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def city_for(cfg: ex.ExperimentConfig, city_dir: str | None, kg_sources: bool = True):
    if city_dir:
        return load_city(city_dir, with_kg_sources=kg_sources)
    seeded = cfg.seeded()
    return synthesize(seeded.city, seeded.indicator_spec)


def out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_json(path: Path, report: dict) -> None:
    path.write_text(ex.dumps_report(report))


def write_csv(path: Path, rows: list[dict], header: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_timing(path: Path, **seconds) -> None:
    path.write_text(json.dumps(seconds, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen(args, cfg):
    seeded = cfg.seeded()
    city = synthesize(seeded.city, seeded.indicator_spec)
    save_city(city, out_dir(args), seeded.indicator_spec)
    print(f"wrote {city.n_regions} regions to {args.out}")


def cmd_build_kg(args, cfg):
    city = city_for(cfg, args.city)
    kg = ex.build_city_kg(city, cfg.kg)
    d = out_dir(args)
    serialize_triples(kg, d / "kg.tsv")
    counts = {}
    for f in kg.facts:
        counts[f.relation] = counts.get(f.relation, 0) + 1
    write_json(d / "kg_report.json", {"version": ex.VERSION, "config_hash": cfg.seeded().config_hash(), "n_entities": len(kg.entities), "n_facts": len(kg.facts), "relations": counts})
    print(f"{kg!r} -> {d / 'kg.tsv'}")


def cmd_train(args, cfg):
    cfg = with_train_flags(cfg, args)
    d = out_dir(args)
    t0 = time.perf_counter()
    city = city_for(cfg, args.city)
    kg = ex.build_city_kg(city, cfg.kg)
    result = ex.train_on_city(city, kg, cfg.seeded(), args.log_every)
    ex.save_run_checkpoint(args.checkpoint_out or d / "checkpoint.kcpt", result, cfg)
    with open(args.loss_log or d / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iteration", "loss", "wall_time_ms"])
        for it, loss, ms in result.losses:
            wr.writerow([it, repr(loss), f"{ms:.3f}"])
    losses = ex.loss_summary(result)
    report = ex._envelope("train", cfg.seeded(), n_facts=len(kg.facts), relations=list(kg.relation_names), loss_curve=losses)
    write_json(d / "train_report.json", report)
    write_timing(d / "train_timing.json", total_s=time.perf_counter() - t0)
    print(f"trained {len(losses)} iterations; final loss {losses[-1] if losses else float('nan'):.6f}")


def cmd_eval(args, cfg):
    d = out_dir(args)
    visual, ck_cfg = ex.load_visual(args.checkpoint)
    if args.split_seed is not None:
        ck_cfg = replace(ck_cfg, split_seed=args.split_seed)
    city = city_for(ck_cfg, args.city, kg_sources=False)
    if args.indicators:
        from .synthcity import read_indicators

        city = replace(city, indicators=read_indicators(args.indicators, city.region_ids))
    seeded = ck_cfg.seeded()
    x = ex.representations(visual, city, seeded.train.mode, seeded.train.k, seeded.train.seed)
    names = [n for n in seeded.indicators if n in city.indicators] or sorted(city.indicators)
    runs = [ex.evaluate_indicator(x, city, n, seeded).report for n in names]
    write_json(d / "eval_report.json", ex._envelope("eval", seeded, runs=runs))
    for r in runs:
        print(f"{r['indicator']}: R2 {r['r2']:.4f} RMSE {r['rmse']:.4f}")


def cmd_ablate(args, cfg):
    drop = None if args.drop in (None, "none") else args.drop
    report = ex.run_ablation(cfg, drop)
    write_json(out_dir(args) / "ablation_report.json", report)
    for tag in ("full", "ablated"):
        print(tag, " ".join(f"{r['indicator']}={r['r2']:.4f}" for r in report[tag]["runs"]))


def cmd_kg_simclr(args, cfg):
    report = ex.run_kg_simclr(cfg)
    write_json(out_dir(args) / "kg_simclr_report.json", report)
    print(" ".join(f"{r['indicator']}={r['r2']:.4f}" for r in report["runs"]))


def cmd_transfer(args, cfg):
    target = None
    if args.target_city:
        target = load_city(args.target_city, with_kg_sources=False)
    elif args.target_seed is not None:
        cfg = replace(cfg, target_city=replace(cfg.city, seed=args.target_seed))
    report = ex.run_transfer(cfg, target)
    write_json(out_dir(args) / "transfer_report.json", report)
    print("transfer", " ".join(f"{r['indicator']}={r['r2']:.4f}" for r in report["runs"]))
    print("baseline", " ".join(f"{r['indicator']}={r['r2']:.4f}" for r in report["baseline_runs"]))


def cmd_match(args, cfg):
    visual, ck_cfg = ex.load_visual(args.checkpoint)
    seeded = ck_cfg.seeded()
    a = city_for(ck_cfg, args.city_a, kg_sources=False)
    b = city_for(ck_cfg, args.city_b, kg_sources=False) if args.city_b else a
    mode, k, s = seeded.train.mode, seeded.train.k, seeded.train.seed
    rows = ex.similarity_match(ex.representations(visual, a, mode, k, s), a.region_ids, ex.representations(visual, b, mode, k, s), b.region_ids, args.top_k, a.indicators, b.indicators)
    header = ["region_a", "rank", "region_b", "similarity"] + [f"a_{n}" for n in sorted(a.indicators)] + [f"b_{n}" for n in sorted(b.indicators)]
    write_csv(out_dir(args) / "matches.csv", rows, header)
    print(f"wrote {len(rows)} matches")


def cmd_pca(args, cfg):
    visual, ck_cfg = ex.load_visual(args.checkpoint)
    seeded = ck_cfg.seeded()
    city = city_for(ck_cfg, args.city, kg_sources=False)
    x = ex.representations(visual, city, seeded.train.mode, seeded.train.k, seeded.train.seed)
    coords, comps, ratios = ex.pca_export(x, args.components)
    d = out_dir(args)
    names = [f"pc{i + 1}" for i in range(args.components)]
    rows = [{"region": rid, **{n: float(c) for n, c in zip(names, coords[i])}} for i, rid in enumerate(city.region_ids)]
    write_csv(d / "pca.csv", rows, ["region"] + names)
    write_json(d / "pca_report.json", {"version": ex.VERSION, "config_hash": seeded.config_hash(), "explained_variance_ratio": ratios.tolist(), "components": comps.tolist()})
    print("explained variance", " ".join(f"{r:.4f}" for r in ratios))


def cmd_sweep(args, cfg):
    k_list = [int(k) for k in args.k_list.split(",")] if args.k_list else None
    report = ex.run_sweep(cfg, k_list)
    write_json(out_dir(args) / "sweep_report.json", report)
    for p in report["points"]:
        print(f"k={p['k']}", " ".join(f"{r['indicator']}={r['r2']:.4f}" for r in p["runs"]))


def cmd_scatter(args, cfg):
    visual, ck_cfg = ex.load_visual(args.checkpoint)
    city = city_for(ck_cfg, args.city, kg_sources=False)
    rows, summary = ex.scatter_rows(visual, city, ck_cfg, args.indicator)
    d = out_dir(args)
    write_csv(d / "scatter.csv", rows, ["region", "true", "predicted", "split"])
    write_json(d / "scatter_report.json", {"version": ex.VERSION, **summary})
    print(f"{args.indicator}: R2 test {summary['r2_test']:.4f}, all {summary['r2_all']:.4f}")


COMMANDS = {
    "gen": cmd_gen,
    "build-kg": cmd_build_kg,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "kg-simclr": cmd_kg_simclr,
    "transfer": cmd_transfer,
    "match": cmd_match,
    "pca": cmd_pca,
    "sweep": cmd_sweep,
    "scatter": cmd_scatter,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = argparse.ArgumentParser(prog="urbancl", description=__doc__)
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--out", default="out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate a synthetic city")

    s = sub.add_parser("build-kg", parents=[common], help="build the urban KG")
    s.add_argument("--city", help="city directory written by gen (default: generate from config)")

    s = sub.add_parser("train", parents=[common], help="contrastive pretraining")
    s.add_argument("--city")
    s.add_argument("--mode", choices=["satellite", "streetview"])
    s.add_argument("--m", type=int)
    s.add_argument("--n-iter", dest="n_iter", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--L", type=int)
    s.add_argument("--composition", choices=["sum", "product"])
    s.add_argument("--tau", type=float)
    s.add_argument("--k", type=int)
    s.add_argument("--checkpoint-out")
    s.add_argument("--loss-log")
    s.add_argument("--log-every", type=int, default=0)

    s = sub.add_parser("eval", parents=[common], help="indicator regression on frozen representations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--city")
    s.add_argument("--indicators", help="indicators CSV (region,indicator,y_raw)")
    s.add_argument("--split-seed", type=int)

    s = sub.add_parser("ablate", parents=[common], help="full vs family-ablated KG")
    s.add_argument("--drop", choices=list(FAMILIES) + ["none"], default=None)

    sub.add_parser("kg-simclr", parents=[common], help="KG-SimCLR baseline")

    s = sub.add_parser("transfer", parents=[common], help="cross-city transfer")
    s.add_argument("--target-city", help="target city directory (its KG files are not read)")
    s.add_argument("--target-seed", type=int, help="generate the target from the same family with this seed")

    s = sub.add_parser("match", parents=[common], help="cross-city similarity matching")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--city-a")
    s.add_argument("--city-b")
    s.add_argument("--top-k", type=int, default=5)

    s = sub.add_parser("pca", parents=[common], help="PCA of visual representations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--city")
    s.add_argument("--components", type=int, default=2)

    s = sub.add_parser("sweep", parents=[common], help="street-view count sweep")
    s.add_argument("--k-list", help="comma-separated view counts")

    s = sub.add_parser("scatter", parents=[common], help="predicted vs true export")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--city")
    s.add_argument("--indicator", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, NotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
