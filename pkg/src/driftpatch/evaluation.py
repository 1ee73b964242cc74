"""Prequential evaluation, the five stream measures, ranks and sweep experiments."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import nncore as nn
from .adaptation import (EXCLUSIVE, INCLUSIVE, AdaptiveModel, ChunkView, PatchConfig, PatchingModel,
                         VariantSpec, perfect_ensemble_accuracy, resolve_engagement)
from .streams import FINISH_CHUNKS, Stream, phase_map

FINAL, PREDRIFT = "final_relative", "predrift_base_relative"
RECOVERY_MODES = {"final": FINAL, FINAL: FINAL, "predrift": PREDRIFT, PREDRIFT: PREDRIFT}
MEASURES = ("avg_acc", "final_acc", "recovery_speed", "adaptation_rank", "final_rank")
MEASURE_LABELS = {"avg_acc": "A.Acc", "final_acc": "F.Acc", "recovery_speed": "R.Spd",
                  "adaptation_rank": "Ad.Rk", "final_rank": "F.Rk"}
HIGHER_IS_BETTER = {"avg_acc": True, "final_acc": True, "recovery_speed": False,
                    "adaptation_rank": False, "final_rank": False}
MISSING = "---"


class EvaluationError(ValueError):
    pass


@dataclass
class RunRecord:
    model_id: str
    scenario_id: str
    seed: int
    per_chunk_accuracy: list
    diverted_fraction: list = field(default_factory=list)
    change_points: list = field(default_factory=list)

    def __post_init__(self):
        acc = np.asarray(self.per_chunk_accuracy, dtype=np.float64)
        if acc.size and (acc.min() < 0 or acc.max() > 1):
            raise EvaluationError("accuracies must lie in [0, 1]")


@dataclass
class MetricsReport:
    final_acc: float
    avg_acc: float
    recovery_speed: int | None
    adaptation_rank: float | None
    final_rank: float


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

def prequential_run(models: Sequence[AdaptiveModel], stream: Stream, seed: int = 0,
                    model_ids: Sequence[str] | None = None) -> list[RunRecord]:
    """Test-then-train over every chunk.

    Every model classifies the chunk first; then drift is signaled if the
    chunk is a change point, and finally labels are revealed for training.
    """
    ids = list(model_ids) if model_ids is not None else [m.model_id for m in models]
    if len(ids) != len(models):
        raise EvaluationError("one model id per model required")
    cps = set(stream.change_points)
    acc = [[] for _ in models]
    diverted = [[] for _ in models]
    for t, chunk in enumerate(stream.chunks):
        view = ChunkView(chunk.images)
        _prefetch(view, models)
        for k, model in enumerate(models):
            preds, mask = model.classify(view)
            acc[k].append(float(np.mean(preds == chunk.labels)) if len(chunk) else 0.0)
            diverted[k].append(None if mask is None else (float(np.mean(mask)) if len(mask) else 0.0))
        if t in cps:
            for model in models:
                model.signal_drift(t)
        for model in models:
            model.train_on_chunk(view, chunk.labels)
    return [RunRecord(mid, stream.spec.name, seed, a, d, list(stream.change_points))
            for mid, a, d in zip(ids, acc, diverted)]


def _prefetch(view: ChunkView, models: Sequence[AdaptiveModel]) -> None:
    # one forward pass per distinct frozen base, gathering every tap the models need
    groups: dict = {}
    for m in models:
        key = tuple(id(p) for p in m.base.params)
        net, taps = groups.setdefault(key, (m.base, set()))
        taps.update(m.required_taps())
    for net, taps in groups.values():
        view.prefetch(net, sorted(taps))


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------

def _trace(rec) -> np.ndarray:
    acc = rec.per_chunk_accuracy if isinstance(rec, RunRecord) else rec
    return np.asarray(acc, dtype=np.float64)


def final_accuracy(rec) -> float:
    """Mean accuracy over the last five chunks."""
    acc = _trace(rec)
    if len(acc) < FINISH_CHUNKS:
        raise EvaluationError(f"final accuracy needs at least {FINISH_CHUNKS} chunks, got {len(acc)}")
    return float(np.mean(acc[-FINISH_CHUNKS:]))


def average_accuracy(rec, first_cp_chunk: int) -> float:
    """Mean accuracy from the first change point (inclusive) to the end."""
    acc = _trace(rec)
    if not 0 <= first_cp_chunk < len(acc):
        raise EvaluationError(f"change point {first_cp_chunk} outside a {len(acc)}-chunk trace")
    return float(np.mean(acc[first_cp_chunk:]))


def recovery_speed(rec, first_cp_chunk: int, mode: str = FINAL, reference: float | None = None) -> int | None:
    """Chunks after the change point until accuracy reaches 90% of the reference.

    The reference is the final accuracy, or in pre-drift mode the supplied
    base accuracy before drift.  None when the threshold is never met.
    """
    acc = _trace(rec)
    mode = RECOVERY_MODES.get(mode)
    if mode is None:
        raise EvaluationError("recovery mode must be final or predrift")
    if not 0 <= first_cp_chunk < len(acc):
        raise EvaluationError(f"change point {first_cp_chunk} outside a {len(acc)}-chunk trace")
    if mode == FINAL:
        reference = final_accuracy(acc)
    elif reference is None:
        raise EvaluationError("pre-drift recovery speed needs the base accuracy as reference")
    hits = np.flatnonzero(acc[first_cp_chunk:] >= 0.9 * reference)
    return int(hits[0]) if len(hits) else None


def ranks(traces: Mapping[str, Sequence[float]], phase_range: range | Sequence[int]) -> dict[str, float]:
    """Mean per-chunk rank of each model over ``phase_range`` (1 = best, ties averaged)."""
    names = list(traces)
    if len(names) < 2:
        raise EvaluationError("ranking needs at least two models")
    mat = np.array([_trace(traces[n]) for n in names])
    idx = list(phase_range)
    if not idx:
        raise EvaluationError("empty phase range")
    per_chunk = np.array([rankdata(-mat[:, t], method="average") for t in idx])
    return {n: float(v) for n, v in zip(names, per_chunk.mean(axis=0))}


def predrift_accuracy(rec, first_cp_chunk: int) -> float:
    acc = _trace(rec)
    if first_cp_chunk == 0:
        raise EvaluationError("no pre-drift chunks")
    return float(np.mean(acc[:first_cp_chunk]))


def summarize(records: Sequence[RunRecord], first_cp: int | None = None, mode: str = FINAL,
              predrift_reference: float | None = None) -> dict[str, MetricsReport]:
    """Measures for every model of one (scenario, seed) cell.

    In pre-drift mode the reference defaults to the FrozenBaseline's mean
    accuracy before the change point, if that model is present.
    """
    if not records:
        raise EvaluationError("no run records")
    first_cp = records[0].change_points[0] if first_cp is None else first_cp
    n = len(records[0].per_chunk_accuracy)
    phases = phase_map(n, first_cp)
    traces = {r.model_id: r.per_chunk_accuracy for r in records}
    if len(traces) != len(records):
        raise EvaluationError("duplicate model ids within one cell")
    mode = RECOVERY_MODES.get(mode, mode)
    if mode == PREDRIFT and predrift_reference is None:
        ref_rec = next((r for r in records if r.model_id == "baseline"), records[0])
        predrift_reference = predrift_accuracy(ref_rec, first_cp)
    multi = len(records) >= 2
    ad = ranks(traces, phases.adaptation_range) if multi and len(phases.adaptation_range) else {}
    fin = ranks(traces, phases.finish_range) if multi else {}
    out = {}
    for r in records:
        out[r.model_id] = MetricsReport(
            final_acc=final_accuracy(r), avg_acc=average_accuracy(r, first_cp),
            recovery_speed=recovery_speed(r, first_cp, mode, predrift_reference),
            adaptation_rank=ad.get(r.model_id), final_rank=fin.get(r.model_id, 1.0))
    return out


@dataclass
class AggregateReport:
    """Seed-averaged measures with their standard deviations."""
    seeds: list
    mean: dict
    stddev: dict
    recovery_reached: int = 0


def aggregate(reports: Sequence[MetricsReport], seeds: Sequence[int]) -> AggregateReport:
    """Mean and population stddev of each measure across seeds.

    Recovery speed averages the seeds that recovered; it is None when none did.
    """
    mean, std = {}, {}
    reached = 0
    for m in MEASURES:
        vals = [getattr(r, m) for r in reports]
        vals = [v for v in vals if v is not None]
        if m == "recovery_speed":
            reached = len(vals)
        mean[m] = float(np.mean(vals)) if vals else None
        std[m] = float(np.std(vals)) if vals else None
    return AggregateReport(list(seeds), mean, std, reached)


def render_measure(value, measure: str) -> str:
    if value is None:
        return MISSING
    if measure in ("avg_acc", "final_acc"):
        return f"{100 * value:.2f}"
    return f"{value:.2f}"


# ---------------------------------------------------------------------------
# sweeps and bounds
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    layer_index: int
    layer_name: str
    tap_point: str
    hidden: str
    avg_acc: float
    final_acc: float
    recovery_speed: int | None
    seed: int


def eligible_layers(base: nn.Network) -> list[int]:
    """Layers that produce their own output (Flatten and Dropout are skipped)."""
    return [i for i, s in enumerate(base.layers) if not isinstance(s, (nn.Flatten, nn.Dropout))]


def _tap_name(tap: str) -> str:
    return "pre" if nn._TAP_ALIASES[tap] == nn.PRE else "post"


def engagement_sweep(base: nn.Network, stream: Stream, patch_cfg_template: PatchConfig | None = None,
                     tap_points: Sequence[str] = ("pre", "post"), seed: int = 0,
                     layers: Sequence[int | str] | None = None) -> list[SweepRow]:
    """Inclusive patch without estimator at every eligible layer and tap point.

    All configurations share the stream pass and the same model seed, so the
    pre/post rows of a layer differ only in the tap.
    """
    template = patch_cfg_template or PatchConfig()
    idxs = eligible_layers(base) if layers is None else [resolve_engagement(base, l) for l in layers]
    configs, models = [], []
    for i in idxs:
        for tap in tap_points:
            cfg = replace(template, engagement_layer=i, tap_point=_tap_name(tap))
            configs.append((i, _tap_name(tap)))
            models.append(PatchingModel(base, VariantSpec(INCLUSIVE, None), cfg, stream.num_classes, seed,
                                        model_id=f"{base.names[i]}:{_tap_name(tap)}"))
    records = prequential_run(models, stream, seed)
    cp = stream.first_cp
    hidden = "x".join(str(w) for w in template.hidden)
    return [SweepRow(i, base.names[i], tap, hidden, average_accuracy(r, cp), final_accuracy(r),
                     recovery_speed(r, cp), seed)
            for (i, tap), r in zip(configs, records)]


def parse_arch(text: str) -> tuple[int, ...]:
    """'2048x512x256' -> (2048, 512, 256)."""
    parts = str(text).strip().lower().split("x")
    try:
        widths = tuple(int(p) for p in parts)
    except ValueError:
        raise EvaluationError(f"malformed architecture string {text!r}") from None
    if not widths or any(w <= 0 for w in widths):
        raise EvaluationError(f"malformed architecture string {text!r}")
    return widths


STANDARD_ARCHITECTURES = (
    "128", "256", "512", "1024", "1536", "2048",
    "256x128", "512x128", "512x256", "1024x256", "1024x512", "1536x256", "1536x512", "2048x256", "2048x512",
    "512x256x128", "1024x256x128", "1024x512x128", "1024x512x256", "1536x256x128", "1536x512x128",
    "1536x512x256", "2048x256x128", "2048x512x128", "2048x512x256",
)


@dataclass
class ArchSweepResult:
    rows: list          # one dict per (arch, layer) with seed-averaged measures
    ranking: dict       # arch -> {measure: mean rank across layers, "mean": overall}


def rank_table(values: Mapping[str, Mapping[str, float | None]]) -> dict[str, dict[str, float]]:
    """Rank entries per measure (ties averaged, None ranks last)."""
    names = list(values)
    out = {n: {} for n in names}
    for m in ("avg_acc", "final_acc", "recovery_speed"):
        raw = []
        for n in names:
            v = values[n].get(m)
            if v is None:
                raw.append(math.inf)
            else:
                raw.append(-v if HIGHER_IS_BETTER[m] else v)
        for n, r in zip(names, rankdata(raw, method="average")):
            out[n][m] = float(r)
    return out


def arch_sweep(base: nn.Network, stream: Stream, layers: Sequence[int | str], arch_list: Sequence[str],
               seeds: Sequence[int], template: PatchConfig | None = None) -> ArchSweepResult:
    """Patch architectures at each engagement candidate, averaged over seeds and ranked."""
    if not arch_list:
        raise EvaluationError("architecture list is empty")
    widths = {a: parse_arch(a) for a in arch_list}
    template = template or PatchConfig()
    idxs = [resolve_engagement(base, l) for l in layers]
    rows = []
    for seed in seeds:
        models, keys = [], []
        for a in arch_list:
            for i in idxs:
                cfg = replace(template, engagement_layer=i, hidden=widths[a])
                models.append(PatchingModel(base, VariantSpec(INCLUSIVE, None), cfg, stream.num_classes, seed,
                                            model_id=f"{a}@{base.names[i]}"))
                keys.append((a, i))
        for (a, i), r in zip(keys, prequential_run(models, stream, seed)):
            cp = stream.first_cp
            rows.append({"arch": a, "layer": base.names[i], "seed": seed,
                         "avg_acc": average_accuracy(r, cp), "final_acc": final_accuracy(r),
                         "recovery_speed": recovery_speed(r, cp)})
    return summarize_arch_rows(rows, arch_list, [base.names[i] for i in idxs])


def summarize_arch_rows(rows: Sequence[dict], arch_list: Sequence[str], layer_names: Sequence[str]) -> ArchSweepResult:
    averaged = []
    for a in arch_list:
        for layer in layer_names:
            sel = [r for r in rows if r["arch"] == a and r["layer"] == layer]
            entry = {"arch": a, "layer": layer, "seeds": len(sel)}
            for m in ("avg_acc", "final_acc", "recovery_speed"):
                vals = [r[m] for r in sel if r[m] is not None]
                entry[m] = float(np.mean(vals)) if vals else None
            averaged.append(entry)
    per_measure = {a: {m: [] for m in ("avg_acc", "final_acc", "recovery_speed")} for a in arch_list}
    for layer in layer_names:
        table = rank_table({e["arch"]: e for e in averaged if e["layer"] == layer})
        for a, rk in table.items():
            for m, v in rk.items():
                per_measure[a][m].append(v)
    ranking = {}
    for a, ms in per_measure.items():
        ranking[a] = {m: float(np.mean(v)) for m, v in ms.items()}
        ranking[a]["mean"] = float(np.mean(list(ranking[a].values())))
    return ArchSweepResult(averaged, ranking)


@dataclass
class BoundRow:
    chunk_index: int
    base_acc: float
    patch_acc: float
    ensemble_bound: float


def bound_experiment(base: nn.Network, stream: Stream, scheme: str, seed: int = 0,
                     cfg: PatchConfig | None = None) -> list[BoundRow]:
    """Per-chunk base, patch and perfect-ensemble accuracy after the first drift.

    The patch is trained on all instances (inclusive) or only on the base's
    error region (exclusive).  Rows start at the first chunk the patch has
    seen training data for.
    """
    if scheme not in (INCLUSIVE, EXCLUSIVE):
        raise EvaluationError("bound experiment compares inclusive and exclusive training")
    model = PatchingModel(base, VariantSpec(scheme, None), cfg or PatchConfig(), stream.num_classes, seed)
    cps = set(stream.change_points)
    rows = []
    for t, chunk in enumerate(stream.chunks):
        view = ChunkView(chunk.images)
        _prefetch(view, [model])
        if model.drift_seen:
            base_preds = view.predictions(model.base)
            patch_preds = nn.predict(model.patch, model.features(view))
            y = chunk.labels
            rows.append(BoundRow(t, float(np.mean(base_preds == y)), float(np.mean(patch_preds == y)),
                                 perfect_ensemble_accuracy(base_preds, patch_preds, y)))
        if t in cps:
            model.signal_drift(t)
        model.train_on_chunk(view, chunk.labels)
    return rows


# ---------------------------------------------------------------------------
# meta table
# ---------------------------------------------------------------------------

def meta_table(reports: Mapping[str, Mapping[str, MetricsReport | Mapping]]) -> dict[str, dict[str, int]]:
    """Per measure, how many scenarios each model is (jointly) best in.

    Values are compared after rounding to two decimals (accuracies as
    percentages), so near-equal results count as ties and every tied model
    scores.
    """
    if not reports:
        raise EvaluationError("no scenarios")
    models = sorted({m for rows in reports.values() for m in rows})
    for scen, rows in reports.items():
        missing = [m for m in models if m not in rows]
        if missing:
            raise EvaluationError(f"scenario {scen} lacks results for {missing}")
    counts = {m: {k: 0 for k in MEASURES} for m in models}
    for rows in reports.values():
        for measure in MEASURES:
            vals = {}
            for m in models:
                v = _get(rows[m], measure)
                if v is None:
                    continue
                scale = 100.0 if measure in ("avg_acc", "final_acc") else 1.0
                vals[m] = round(v * scale, 2)
            if not vals:
                continue
            best = max(vals.values()) if HIGHER_IS_BETTER[measure] else min(vals.values())
            for m, v in vals.items():
                if v == best:
                    counts[m][measure] += 1
    return counts


def _get(report, measure):
    return report.get(measure) if isinstance(report, Mapping) else getattr(report, measure)


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

RUN_COLUMNS = ("run_id", "scenario", "model_id", "seed", "chunk_index", "accuracy", "diverted_fraction")


def run_rows(records: Iterable[RunRecord]) -> list[dict]:
    rows = []
    for r in records:
        run_id = f"{r.scenario_id}/{r.model_id}/{r.seed}"
        div = r.diverted_fraction or [None] * len(r.per_chunk_accuracy)
        for t, (a, d) in enumerate(zip(r.per_chunk_accuracy, div)):
            rows.append({"run_id": run_id, "scenario": r.scenario_id, "model_id": r.model_id, "seed": r.seed,
                         "chunk_index": t, "accuracy": f"{a:.6f}", "diverted_fraction": "" if d is None else f"{d:.6f}"})
    return rows


def write_runs_csv(records: Iterable[RunRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RUN_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(run_rows(records))


def read_runs_csv(path: str | Path) -> list[RunRecord]:
    groups: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["scenario"], row["model_id"], int(row["seed"]))
            acc, div = groups.setdefault(key, ([], []))
            acc.append(float(row["accuracy"]))
            div.append(float(row["diverted_fraction"]) if row["diverted_fraction"] else None)
    return [RunRecord(m, s, seed, a, d) for (s, m, seed), (a, d) in groups.items()]


def report_to_json(report: MetricsReport) -> dict:
    return asdict(report)


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
