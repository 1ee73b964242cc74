"""Command-line front end: gen-stream, train-base, run, sweep, report.

Exit codes: 0 ok, 1 config error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfgmod
from . import nncore as nn
from .adaptation import AdaptationError, build_base, build_model, default_engagement_layer
from .evaluation import (MEASURE_LABELS, MEASURES, aggregate, arch_sweep, engagement_sweep,
                         meta_table, prequential_run, render_measure, summarize, write_runs_csv)
from .seeding import derive_seed
from .streams import (LabeledImages, StreamError, build_scenario, load_mnist, load_stream, save_stream)

log = logging.getLogger("driftpatch")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# cell plumbing
# ---------------------------------------------------------------------------

def cell_seed(cfg: cfgmod.ExperimentConfig, scenario: str, seed: int) -> int:
    return derive_seed(cfg.run.master_seed, scenario, seed)


def cell_name(scenario: str, seed: int) -> str:
    return f"{scenario}__seed{seed}"


def _load_data(cfg: cfgmod.ExperimentConfig) -> tuple[LabeledImages, LabeledImages]:
    root = cfg.data_root()
    try:
        return load_mnist(root)
    except (OSError, StreamError) as exc:
        raise DataError(str(exc)) from exc


def _pool(cfg) -> LabeledImages:
    return LabeledImages.concat(_load_data(cfg))


def _stream_for(cfg, scen, seed, pool, out: Path):
    spec = scen.to_spec(derive_seed(cell_seed(cfg, scen.name, seed), "stream"))
    cached = out / "streams" / f"{cell_name(scen.name, seed)}.drft"
    if cached.exists():
        try:
            stream = load_stream(cached)
            if stream.spec == spec:
                return stream
        except StreamError:
            log.warning("ignoring unreadable stream cache %s", cached)
    return build_scenario(pool, spec)


def _base_path(out: Path, scenario: str, seed: int) -> Path:
    return out / "bases" / f"{cell_name(scenario, seed)}.nnpk"


def _train_base(cfg, init_set, num_classes, seed):
    b = cfg.base
    stagnation = (b.stagnation_window, b.stagnation_tol) if b.stagnation_window >= 2 else None
    return build_base(b.arch, init_set, num_classes, b.epochs, b.minibatch, seed, cfg.optimizer,
                      stagnation, b.max_retries)


def _base_for(cfg, scen, seed, stream, out: Path, force: bool = False):
    path = _base_path(out, scen.name, seed)
    if path.exists() and not force:
        return nn.load_network(path), True
    net = _train_base(cfg, stream.init_set, stream.num_classes,
                      derive_seed(cell_seed(cfg, scen.name, seed), "base"))
    path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_network(net, path)
    return net, False


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_stream(cfg: cfgmod.ExperimentConfig) -> int:
    out = Path(cfg.run.out)
    (out / "streams").mkdir(parents=True, exist_ok=True)
    pool = _pool(cfg)
    for scen in cfg.scenarios:
        for seed in cfg.run.seeds:
            spec = scen.to_spec(derive_seed(cell_seed(cfg, scen.name, seed), "stream"))
            stream = build_scenario(pool, spec)
            path = out / "streams" / f"{cell_name(scen.name, seed)}.drft"
            save_stream(stream, path)
            sizes = sorted(set(stream.chunk_sizes))
            print(f"{scen.name} seed={seed}: init={len(stream.init_set)} chunks={len(stream.chunks)} "
                  f"chunk_size={'/'.join(map(str, sizes))} change_point_chunks={stream.change_points} -> {path}")
    return EXIT_OK


def cmd_train_base(cfg: cfgmod.ExperimentConfig, force: bool = False) -> int:
    out = Path(cfg.run.out)
    if cfg.base.train_on == "mnist_train":
        train, test = _load_data(cfg)
        for seed in cfg.run.seeds:
            path = _base_path(out, "mnist_train", seed)
            if path.exists() and not force:
                net = nn.load_network(path)
                print(f"mnist_train seed={seed}: using cached checkpoint {path}")
            else:
                net = _train_base(cfg, train, int(train.labels.max()) + 1,
                                  derive_seed(cell_seed(cfg, "mnist_train", seed), "base"))
                path.parent.mkdir(parents=True, exist_ok=True)
                nn.save_network(net, path)
                _report_retries(net)
            print(f"mnist_train seed={seed}: test accuracy {100 * nn.accuracy(net, test.images, test.labels):.2f}% -> {path}")
        return EXIT_OK
    pool = _pool(cfg)
    for scen in cfg.scenarios:
        for seed in cfg.run.seeds:
            stream = _stream_for(cfg, scen, seed, pool, out)
            net, cached = _base_for(cfg, scen, seed, stream, out, force)
            if cached:
                print(f"{scen.name} seed={seed}: using cached checkpoint {_base_path(out, scen.name, seed)}")
            else:
                _report_retries(net)
            held = LabeledImages.concat(stream.chunks[: stream.first_cp]) if stream.first_cp else None
            acc = "n/a" if held is None else f"{100 * nn.accuracy(net, held.images, held.labels):.2f}%"
            print(f"{scen.name} seed={seed}: held-out pre-drift accuracy {acc} -> {_base_path(out, scen.name, seed)}")
    return EXIT_OK


def _report_retries(net):
    attempts = getattr(net, "training_log", [])
    for (seed, hist), (new_seed, _) in zip(attempts, attempts[1:]):
        print(f"stagnation detected (seed {seed}, final loss {hist[-1]:.4f}); reinitialized with seed {new_seed}")


def _run_cell(cfg_dict: dict, scen_name: str, seed: int) -> dict:
    """Run every configured model on one (scenario, seed) cell; never raises."""
    cfg = cfgmod.from_dict(cfg_dict)
    out = Path(cfg.run.out)
    scen = next(s for s in cfg.scenarios if s.name == scen_name)
    name = cell_name(scen_name, seed)
    result = {"scenario": scen_name, "seed": seed, "status": "ok", "error": None, "models": {}}
    try:
        pool = _pool(cfg)
        stream = _stream_for(cfg, scen, seed, pool, out)
        base, _ = _base_for(cfg, scen, seed, stream, out)
        cs = cell_seed(cfg, scen_name, seed)
        pcfg = cfg.patch_config()
        models = [build_model(m, base, pcfg, stream.num_classes, derive_seed(cs, "model", m),
                              cfg.patch.freezing_tail) for m in cfg.run.models]
        records = prequential_run(models, stream, seed, cfg.run.models)
        (out / "runs").mkdir(parents=True, exist_ok=True)
        write_runs_csv(records, out / "runs" / f"{name}.csv")
        reports = summarize(records, stream.first_cp, cfg.run.recovery_mode)
        result["models"] = {m: vars(r) for m, r in reports.items()}
    except Exception as exc:  # recorded as a failed cell
        result.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        log.error("cell %s failed:\n%s", name, traceback.format_exc())
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "cells" / f"{name}.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def cmd_run(cfg: cfgmod.ExperimentConfig) -> int:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.data_root()
    (out / "effective_config.toml").write_text(cfgmod.dumps(cfg))
    raw = cfgmod.to_dict(cfg)
    cells = [(s.name, seed) for s in cfg.scenarios for seed in cfg.run.seeds]
    if cfg.run.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.jobs) as ex:
            results = list(ex.map(_run_cell, [raw] * len(cells), *zip(*cells)))
    else:
        results = [_run_cell(raw, s, seed) for s, seed in cells]
    summary = merge_results(cfg, results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _merge_csv(out, cells)
    failed = [c for c in summary["cells"] if c["status"] != "ok"]
    print(render_grid(summary))
    if failed:
        print(f"{len(failed)} of {len(summary['cells'])} cells failed; see summary.json", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def merge_results(cfg: cfgmod.ExperimentConfig, results: list[dict]) -> dict:
    scenarios = {}
    cells = []
    for scen in cfg.scenarios:
        per_model = {}
        for m in cfg.run.models:
            reps, seeds = [], []
            for r in results:
                if r["scenario"] != scen.name:
                    continue
                ok = r["status"] == "ok" and m in r["models"]
                cells.append({"scenario": scen.name, "model_id": m, "seed": r["seed"],
                              "status": "ok" if ok else "failed", "error": None if ok else r["error"]})
                if ok:
                    reps.append(r["models"][m])
                    seeds.append(r["seed"])
            if reps:
                agg = aggregate([_Report(**x) for x in reps], seeds)
                entry = dict(agg.mean)
                entry["stddev"] = agg.stddev
                entry["seeds"] = seeds
                entry["recovery_reached"] = agg.recovery_reached
                entry["recovery_speed_display"] = render_measure(agg.mean["recovery_speed"], "recovery_speed")
                per_model[m] = entry
        scenarios[scen.name] = per_model
    return {"scenarios": scenarios, "cells": cells, "recovery_mode": cfg.run.recovery_mode,
            "models": list(cfg.run.models), "master_seed": cfg.run.master_seed}


class _Report:
    def __init__(self, **kw):
        self.__dict__.update(kw)


def _merge_csv(out: Path, cells) -> None:
    rows_out = out / "runs.csv"
    header_written = False
    with open(rows_out, "w", newline="") as dst:
        for scen, seed in cells:
            src = out / "runs" / f"{cell_name(scen, seed)}.csv"
            if not src.exists():
                continue
            lines = src.read_text().splitlines(keepends=True)
            if not header_written:
                dst.write(lines[0])
                header_written = True
            dst.writelines(lines[1:])


def render_grid(summary: dict) -> str:
    """Per-scenario tables with the five measures, seed-averaged."""
    lines = []
    header = f"{'model':<28}" + "".join(f"{MEASURE_LABELS[m]:>9}" for m in MEASURES)
    for scen, models in summary["scenarios"].items():
        lines.append(f"== {scen}")
        lines.append(header)
        for m, e in models.items():
            lines.append(f"{m:<28}" + "".join(f"{render_measure(e.get(k), k):>9}" for k in MEASURES))
    return "\n".join(lines)


def cmd_sweep(cfg: cfgmod.ExperimentConfig, kind: str | None = None) -> int:
    kind = kind or cfg.sweep.kind
    if kind == "arch" and not cfg.sweep.architectures:
        raise cfgmod.ConfigError("[sweep] architectures is empty")
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = _pool(cfg)
    pcfg = cfg.patch_config()
    rows = []
    for scen in cfg.scenarios:
        for seed in cfg.run.seeds:
            stream = _stream_for(cfg, scen, seed, pool, out)
            base, _ = _base_for(cfg, scen, seed, stream, out)
            ms = derive_seed(cell_seed(cfg, scen.name, seed), "sweep")
            if kind == "layers":
                layers = cfg.sweep.layers or None
                for r in engagement_sweep(base, stream, pcfg, cfg.sweep.taps, ms, layers):
                    for m in ("avg_acc", "final_acc", "recovery_speed"):
                        rows.append({"scenario": scen.name, "seed": seed, "arch": r.hidden, "layer": r.layer_name,
                                     "tap": r.tap_point, "measure": m, "value": _fmt(getattr(r, m))})
            else:
                from .adaptation import arch_of
                layers = cfg.sweep.layers or list(default_engagement_layer(arch_of(base)).candidates)
                res = arch_sweep(base, stream, layers, cfg.sweep.architectures, [ms], pcfg)
                for e in res.rows:
                    for m in ("avg_acc", "final_acc", "recovery_speed"):
                        rows.append({"scenario": scen.name, "seed": seed, "arch": e["arch"], "layer": e["layer"],
                                     "tap": pcfg.tap_point, "measure": m, "value": _fmt(e[m])})
                with open(out / f"arch_ranking__{cell_name(scen.name, seed)}.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["arch", "rank_avg_acc", "rank_final_acc", "rank_recovery_speed", "rank_mean"])
                    for a, rk in sorted(res.ranking.items(), key=lambda kv: kv[1]["mean"]):
                        w.writerow([a, *(f"{rk[k]:.3f}" for k in ("avg_acc", "final_acc", "recovery_speed", "mean"))])
    path = out / f"sweep_{kind}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["scenario", "seed", "arch", "layer", "tap", "measure", "value"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def _fmt(v) -> str:
    return "" if v is None else (str(v) if isinstance(v, int) else f"{v:.6f}")


def cmd_report(results_dir: str | Path) -> int:
    results_dir = Path(results_dir)
    files = sorted(results_dir.rglob("summary.json"))
    grids = {}
    for f in files:
        try:
            data = json.loads(f.read_text())
            scen_map = data["scenarios"]
            if not isinstance(scen_map, dict):
                raise ValueError("scenarios is not a mapping")
        except (ValueError, KeyError, OSError) as exc:
            print(f"warning: skipping {f}: {exc}", file=sys.stderr)
            continue
        for scen, models in scen_map.items():
            if models:
                grids[scen] = models
    if not grids:
        raise DataError(f"no readable summary.json under {results_dir}")
    print(render_grid({"scenarios": grids}))
    models = sorted({m for g in grids.values() for m in g})
    complete = {s: g for s, g in grids.items() if all(m in g for m in models)}
    skipped = sorted(set(grids) - set(complete))
    if skipped:
        print(f"warning: scenarios without every model left out of the counts: {skipped}", file=sys.stderr)
    counts = meta_table(complete) if complete else {m: {k: 0 for k in MEASURES} for m in models}
    print(f"\n== top-1 counts over {len(complete)} scenario(s)")
    print(f"{'model':<28}" + "".join(f"{MEASURE_LABELS[m]:>9}" for m in MEASURES))
    for m in models:
        print(f"{m:<28}" + "".join(f"{counts[m][k]:>9}" for k in MEASURES))
    with open(results_dir / "meta_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", *(MEASURE_LABELS[m] for m in MEASURES)])
        for m in models:
            w.writerow([m, *(counts[m][k] for k in MEASURES)])
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML experiment config")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--jobs", type=int, help="worker processes for independent cells")
    common.add_argument("--recovery-mode", choices=["final", "predrift"], help="recovery-speed reference")
    p = argparse.ArgumentParser(prog="driftpatch", description="Neural-network patching experiments on drifting image streams.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-stream", parents=[common], help="compile scenarios into DRFT stream files")
    tb = sub.add_parser("train-base", parents=[common], help="train and checkpoint base classifiers")
    tb.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")
    sub.add_parser("run", parents=[common], help="prequential runs for every scenario, model and seed")
    sw = sub.add_parser("sweep", parents=[common], help="engagement-layer or patch-architecture sweep")
    sw.add_argument("--kind", choices=["layers", "arch"], help="overrides [sweep] kind")
    rp = sub.add_parser("report", help="top-1 meta table over result directories")
    rp.add_argument("results_dir")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.results_dir)
        cfg = cfgmod.with_overrides(cfgmod.load(args.config), args.seed, args.out, args.jobs, args.recovery_mode)
        if args.command == "gen-stream":
            return cmd_gen_stream(cfg)
        if args.command == "train-base":
            return cmd_train_base(cfg, args.force)
        if args.command == "run":
            return cmd_run(cfg)
        return cmd_sweep(cfg, args.kind)
    except (cfgmod.ConfigError, AdaptationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StreamError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
