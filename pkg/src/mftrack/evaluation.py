"""Benchmark protocols and metrics.

Two protocols are supported:

* re-initialization (VOT style): a frame whose overlap with the ground truth
  is at or below ``threshold`` is a failure; the tracker is restarted from the
  ground truth ``gap`` frames later. Reports EAO, accuracy and robustness.
* one-pass (OPE): a single run per sequence; reports precision and success
  curves, the precision at 20 px and the area under the success curve.

All metrics are pure functions of box trajectories, so they can be recomputed
from result files. Result-file codes follow the VOT convention: a line ``0``
marks a skipped frame, ``2`` a failure; initialization frames echo the
ground-truth box.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data_model import ATTRIBUTES, BoundingBox, center_error_array, iou_array

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 101)
SKIPPED, FAILURE = 0, 2


# ------------------------------------------------------------------ OPE

def precision_curve(errors, thresholds=PRECISION_THRESHOLDS) -> np.ndarray:
    """Fraction of frames whose centre error is at most each threshold."""
    e = np.asarray(errors, dtype=np.float64)
    return (e[None, :] <= np.asarray(thresholds)[:, None]).mean(1)


def success_curve(overlaps, thresholds=SUCCESS_THRESHOLDS) -> np.ndarray:
    """Fraction of frames whose overlap exceeds each threshold (perfect frames always count)."""
    o = np.asarray(overlaps, dtype=np.float64)
    t = np.asarray(thresholds)[:, None]
    return ((o[None, :] > t) | (o[None, :] >= 1.0)).mean(1)


@dataclass
class OpeCurves:
    precision: np.ndarray
    success: np.ndarray
    per_sequence: dict = field(default_factory=dict)  # name -> (precision, success)
    per_run: list = field(default_factory=list)  # [{"pr20", "sr_auc"}]

    @property
    def pr20(self) -> float:
        return float(self.precision[20])

    @property
    def sr_auc(self) -> float:
        return float(self.success.mean())


def _boxes_array(boxes) -> np.ndarray:
    return np.stack([b.as_array() if isinstance(b, BoundingBox) else np.asarray(b, float)
                     for b in boxes])


def sequence_curves(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Precision and success curves of one trajectory."""
    p, g = _boxes_array(pred), _boxes_array(gt)
    if len(p) != len(g):
        raise ValueError(f"{len(p)} predicted boxes for {len(g)} ground-truth boxes")
    return precision_curve(center_error_array(p, g)), success_curve(iou_array(p, g))


def ope_metrics(runs: list, sequences) -> OpeCurves:
    """``runs``: one ``{sequence name: boxes}`` map per run.

    Curves are computed per sequence, averaged over sequences, then over runs.
    """
    if not runs or not sequences:
        raise ValueError("OPE evaluation needs at least one run and one sequence")
    per_run_curves, per_seq = [], {s.name: [] for s in sequences}
    for result in runs:
        pcs, scs = [], []
        for seq in sequences:
            pc, sc = sequence_curves(result[seq.name], seq.groundtruth)
            pcs.append(pc)
            scs.append(sc)
            per_seq[seq.name].append((pc, sc))
        per_run_curves.append((np.mean(pcs, 0), np.mean(scs, 0)))
    precision = np.mean([p for p, _ in per_run_curves], 0)
    success = np.mean([s for _, s in per_run_curves], 0)
    per_sequence = {n: (np.mean([p for p, _ in v], 0), np.mean([s for _, s in v], 0))
                    for n, v in per_seq.items()}
    per_run = [{"pr20": float(p[20]), "sr_auc": float(s.mean())} for p, s in per_run_curves]
    return OpeCurves(precision, success, per_sequence, per_run)


def attribute_breakdown(per_sequence: dict, sequences) -> dict:
    """PR/SR over the sequences carrying each attribute; empty tags are omitted."""
    out = {}
    for tag in ATTRIBUTES:
        names = [s.name for s in sequences if tag in s.attributes]
        if names:
            p = np.mean([per_sequence[n][0] for n in names], 0)
            s = np.mean([per_sequence[n][1] for n in names], 0)
            out[tag] = (float(p[20]), float(s.mean()))
    for s in sequences:
        unknown = set(s.attributes) - set(ATTRIBUTES)
        if unknown:
            raise ValueError(f"{s.name}: unknown attribute tags {sorted(unknown)}")
    return out


# ------------------------------------------------------------------ VOT

@dataclass
class VotRunResult:
    """One sequence under the re-initialization protocol.

    ``overlaps`` holds NaN for frames that were not tracked (initialization,
    skipped and failure frames keep their own flags).
    """

    name: str
    outputs: list
    overlaps: np.ndarray
    failures: list
    inits: list
    valid: np.ndarray  # frames counted for accuracy

    @property
    def length(self) -> int:
        return len(self.outputs)


def vot_record(name: str, outputs, groundtruth, threshold: float = 0.0, gap: int = 5,
               burn_in: int = 5) -> VotRunResult:
    """Rebuild protocol bookkeeping from a result trajectory.

    ``outputs`` uses the result-file convention: boxes for tracked and
    initialization frames, ``2`` for a failure, ``0`` for skipped frames.
    """
    n = len(groundtruth)
    if len(outputs) != n:
        raise ValueError(f"{name}: {len(outputs)} result lines for {n} frames")
    overlaps = np.full(n, np.nan)
    valid = np.zeros(n, dtype=bool)
    failures, inits = [], []
    next_init, last_init = 0, 0
    for t, out in enumerate(outputs):
        if t == next_init:
            if not isinstance(out, BoundingBox):
                raise ValueError(f"{name}: frame {t} should be an initialization box")
            inits.append(t)
            last_init = t
            overlaps[t] = 1.0
            continue
        if t < next_init:
            if out != SKIPPED:
                raise ValueError(f"{name}: frame {t} should be skipped after a failure")
            continue
        if out == FAILURE:
            failures.append(t)
            overlaps[t] = 0.0
            next_init = t + gap
            continue
        if not isinstance(out, BoundingBox):
            raise ValueError(f"{name}: unexpected code {out!r} at frame {t}")
        o = float(iou_array(out.as_array(), groundtruth[t].as_array())[0])
        if o <= threshold:
            raise ValueError(f"{name}: frame {t} has overlap {o} but is not marked as a failure")
        overlaps[t] = o
        valid[t] = t >= last_init + burn_in
    return VotRunResult(name, list(outputs), overlaps, failures, inits, valid)


def segments(record: VotRunResult) -> list[tuple[np.ndarray, bool]]:
    """``(overlap curve, failed)`` for each segment starting at an initialization."""
    out = []
    for i, start in enumerate(record.inits):
        fail = next((f for f in record.failures if f > start), None)
        end = fail + 1 if fail is not None else record.length
        out.append((record.overlaps[start:end].copy(), fail is not None))
    return out


def eao_interval(lengths) -> tuple[int, int]:
    lengths = np.asarray(lengths, dtype=np.float64)
    return int(math.floor(np.percentile(lengths, 15))), int(math.ceil(np.percentile(lengths, 85)))


def expected_overlap_curve(segs, max_len: int) -> np.ndarray:
    """Mean overlap at each frame index ``0..max_len-1`` of a segment.

    Failed segments are zero after their failure frame; segments that ended
    at the sequence end only contribute while they have frames. Indices with
    no contributing segment are NaN.
    """
    total = np.zeros(max_len)
    count = np.zeros(max_len)
    for curve, failed in segs:
        n = min(len(curve), max_len)
        total[:n] += curve[:n]
        count[:n] += 1
        if failed:
            count[n:] += 1
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def eao(records, interval) -> float:
    """Mean of the expected-overlap curve over segment lengths ``lo..hi`` (1-based)."""
    lo, hi = interval
    segs = [s for r in records for s in segments(r)]
    curve = expected_overlap_curve(segs, hi)
    vals = curve[max(lo, 1) - 1:hi]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if len(vals) else 0.0


@dataclass
class VotReport:
    eao: float
    accuracy: float
    robustness: float
    per_run: list
    records: list  # per run: {name: VotRunResult}


def vot_run_metrics(records: dict, interval) -> dict:
    recs = list(records.values())
    n_valid = sum(int(r.valid.sum()) for r in recs)
    acc = float(sum(np.nansum(r.overlaps[r.valid]) for r in recs) / n_valid) if n_valid else 0.0
    frames = sum(r.length for r in recs)
    rob = 100.0 * sum(len(r.failures) for r in recs) / frames
    return {"eao": eao(recs, interval), "accuracy": acc, "robustness": rob,
            "failures": sum(len(r.failures) for r in recs)}


def vot_metrics(runs: list, sequences, threshold: float = 0.0, gap: int = 5,
                burn_in: int = 5) -> VotReport:
    """``runs``: one ``{sequence name: outputs}`` map per run (result-file convention)."""
    if not runs or not sequences:
        raise ValueError("VOT evaluation needs at least one run and one sequence")
    interval = eao_interval([len(s) for s in sequences])
    all_records, per_run = [], []
    for result in runs:
        recs = {s.name: vot_record(s.name, result[s.name], s.groundtruth, threshold, gap, burn_in)
                for s in sequences}
        all_records.append(recs)
        per_run.append(vot_run_metrics(recs, interval))
    mean = lambda k: float(np.mean([m[k] for m in per_run]))
    return VotReport(mean("eao"), mean("accuracy"), mean("robustness"), per_run, all_records)


# ------------------------------------------------------------- running

def track_vot_sequence(tracker, seq, threshold: float = 0.0, gap: int = 5) -> list:
    """Run the re-initialization protocol on one sequence; returns result-file outputs."""
    outputs, next_init = [], 0
    for t, (frame, gt) in enumerate(zip(seq.frames, seq.groundtruth)):
        if t == next_init:
            tracker.initialize(frame, gt)
            outputs.append(gt)
        elif t < next_init:
            outputs.append(SKIPPED)
        else:
            box = tracker.track(frame)
            if float(iou_array(box.as_array(), gt.as_array())[0]) <= threshold:
                outputs.append(FAILURE)
                next_init = t + gap
            else:
                outputs.append(box)
    return outputs


def track_ope_sequence(tracker, seq) -> list:
    tracker.initialize(seq.frames[0], seq.groundtruth[0])
    return [seq.groundtruth[0]] + [tracker.track(f) for f in seq.frames[1:]]


def run_seed(seed: int, run: int) -> int:
    return int(seed) * 1000 + int(run)


def run_trackers(factory: Callable, sequences, runs: int, seed: int, fn, jobs: int = 1) -> list:
    """``fn(tracker, seq)`` for every (run, sequence); fresh tracker per job."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no sequences to evaluate")
    jobs_list = [(r, s) for r in range(runs) for s in sequences]
    work = lambda rs: fn(factory(run_seed(seed, rs[0])), rs[1])
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            outs = list(ex.map(work, jobs_list))
    else:
        outs = [work(j) for j in jobs_list]
    results = [dict() for _ in range(runs)]
    for (r, s), o in zip(jobs_list, outs):
        results[r][s.name] = o
    return results


def run_vot_protocol(factory: Callable, sequences, runs: int = 15, seed: int = 0,
                     threshold: float = 0.0, gap: int = 5, burn_in: int = 5, jobs: int = 1):
    """Returns ``(report, raw outputs per run)``."""
    results = run_trackers(factory, sequences, runs, seed,
                           lambda tr, s: track_vot_sequence(tr, s, threshold, gap), jobs)
    return vot_metrics(results, sequences, threshold, gap, burn_in), results


def run_ope(factory: Callable, sequences, runs: int = 5, seed: int = 0, jobs: int = 1):
    """Returns ``(curves, raw boxes per run)``."""
    results = run_trackers(factory, sequences, runs, seed, track_ope_sequence, jobs)
    return ope_metrics(results, sequences), results


# ------------------------------------------------------------ aggregation

def aggregate_runs(per_run: list) -> dict:
    """Mean and population standard deviation per metric."""
    if not per_run:
        raise ValueError("need at least one run")
    out = {}
    for k in per_run[0]:
        x = np.asarray([float(m[k]) for m in per_run])
        d = x - x[0]  # shifted so identical runs give exactly zero spread
        mu = d.mean()
        out[k] = (float(x[0] + mu), float(np.sqrt(np.mean((d - mu) ** 2))))
    return out


# ------------------------------------------------------------ reporting

def report_dict(vot: VotReport | None = None, ope: OpeCurves | None = None,
                per_attribute: dict | None = None) -> dict:
    nan = float("nan")
    per_run = []
    n = max(len(vot.per_run) if vot else 0, len(ope.per_run) if ope else 0)
    for i in range(n):
        row = {}
        if vot and i < len(vot.per_run):
            row.update(vot.per_run[i])
        if ope and i < len(ope.per_run):
            row.update(ope.per_run[i])
        per_run.append(row)
    return {
        "eao": vot.eao if vot else nan,
        "accuracy": vot.accuracy if vot else nan,
        "robustness": vot.robustness if vot else nan,
        "pr20": ope.pr20 if ope else nan,
        "sr_auc": ope.sr_auc if ope else nan,
        "per_attribute": {k: {"pr20": p, "sr_auc": s} for k, (p, s) in (per_attribute or {}).items()},
        "per_run": per_run,
        "aggregate": {k: {"mean": m, "sd": sd} for k, (m, sd) in aggregate_runs(per_run).items()}
        if per_run else {},
    }


def write_report(out_dir, report: dict, ope: OpeCurves | None = None) -> Path:
    """``report.json`` plus ``precision.csv`` / ``success.csv`` curve files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True, allow_nan=True))
    if ope is not None:
        for fname, thr, curve, key in (("precision.csv", PRECISION_THRESHOLDS, ope.precision, "px"),
                                       ("success.csv", SUCCESS_THRESHOLDS, ope.success, "overlap")):
            names = sorted(ope.per_sequence)
            idx = 0 if fname == "precision.csv" else 1
            with open(out_dir / fname, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([key, "mean"] + names)
                for i, t in enumerate(thr):
                    w.writerow([repr(float(t)), repr(float(curve[i]))]
                               + [repr(float(ope.per_sequence[n][idx][i])) for n in names])
    return path


def read_run_results(results_dir, sequences) -> list:
    """Load ``run_<k>/<sequence>.txt`` files into per-run output maps."""
    from .tracker import read_results

    results_dir = Path(results_dir)
    run_dirs = sorted((p for p in results_dir.glob("run_*") if p.is_dir()),
                      key=lambda p: int(p.name.split("_")[1]))
    if not run_dirs:
        raise FileNotFoundError(f"no run_<k> directories under {results_dir}")
    runs = []
    for d in run_dirs:
        runs.append({s.name: read_results(d / f"{s.name}.txt") for s in sequences})
    return runs


def write_run_results(results_dir, runs: list) -> list[Path]:
    from .tracker import write_results

    paths = []
    for k, result in enumerate(runs):
        for name, outputs in result.items():
            paths.append(write_results(Path(results_dir) / f"run_{k}" / f"{name}.txt", outputs))
    return paths
