"""Deterministic CSV/JSON result files, run manifests and BRC plots."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import SteerSweepError
from .svg import LineChart, Series
from .sweep import BiasResponseCurve, SweepResult

CSV_HEADER = (
    "alpha",
    "vector_kind",
    "eval_pair_id",
    "logit_diff",
    "prob_diff",
    "odds_ratio",
    "kl",
    "perplexity",
    "rank_matching",
    "rank_not_matching",
)
MANIFEST_FORMAT = "steersweep.manifest"


class OutputError(SteerSweepError):
    exit_code = 1


def _num(v) -> str:
    # repr gives the shortest string that round-trips
    return repr(float(v)) if isinstance(v, float) else str(v)


def atomic_write(path: Path, data: bytes):
    """Write via a sibling temp file so a failed write leaves no partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise OutputError(f"could not write {path}: {e.strerror or e}") from e


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=False, ensure_ascii=False) + "\n").encode("utf-8")


def csv_name(inject_layer: int, read_layer: int) -> str:
    return f"inj{inject_layer}_read{read_layer}.csv"


def rows_to_csv(rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(
            [
                _num(r.alpha),
                r.vector_kind,
                r.eval_pair_id,
                _num(r.logit_diff),
                _num(r.prob_diff),
                _num(r.odds_ratio),
                _num(r.kl),
                _num(r.perplexity),
                r.rank_matching,
                r.rank_not_matching,
            ]
        )
    return buf.getvalue().encode("utf-8")


def curve_record(c: BiasResponseCurve) -> dict:
    return {
        "inject_layer": c.inject_layer,
        "read_layer": c.read_layer,
        "vector_kind": c.vector_kind,
        "aggregation": "mean",
        "n_eval_pairs": c.n_eval_pairs,
        "tipping_alpha": c.tipping_alpha,
        "rank_crossing_alpha": c.rank_crossing_alpha,
        "alphas": list(c.alphas),
        "values": {k: list(v) for k, v in c.values.items()},
    }


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_timestamp() -> str:
    """UTC timestamp, pinned by ``SOURCE_DATE_EPOCH`` when set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    config: dict
    model_fingerprint: str
    dataset: dict
    steering_vectors: dict
    controls: dict
    build_pair_ids: list
    eval_pair_ids: list
    stats: dict
    complete: bool = True
    error: Optional[str] = None
    warnings: list = field(default_factory=list)
    timestamp: str = field(default_factory=run_timestamp)
    files: list = field(default_factory=list)

    @classmethod
    def from_result(cls, result: SweepResult, model_fingerprint: str, dataset) -> "RunManifest":
        return cls(
            config=result.config.to_dict(),
            model_fingerprint=model_fingerprint,
            dataset={
                "behavior": dataset.behavior_name,
                "fingerprint": dataset.fingerprint,
                "n_pairs": len(dataset),
            },
            steering_vectors={str(l): v.build_fingerprint for l, v in sorted(result.steering.items())},
            controls={
                f"{l}/{k}": {"seed": c.seed, "norm_policy": c.norm_policy.value, "fingerprint": c.fingerprint}
                for (l, k), c in sorted(result.controls.items())
            },
            build_pair_ids=list(result.build_pair_ids),
            eval_pair_ids=list(result.eval_pair_ids),
            stats=dict(result.stats),
            complete=result.complete,
            error=result.error,
        )

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "timestamp": self.timestamp,
            "complete": self.complete,
            "error": self.error,
            "warnings": list(self.warnings),
            "config": self.config,
            "model_fingerprint": self.model_fingerprint,
            "dataset": self.dataset,
            "steering_vectors": self.steering_vectors,
            "controls": self.controls,
            "build_pair_ids": self.build_pair_ids,
            "eval_pair_ids": self.eval_pair_ids,
            "stats": self.stats,
            "files": self.files,
        }


def write_results(rows, curves, manifest: RunManifest, out_dir, pairs=None, extra_files=()) -> list[Path]:
    """Write per-pair CSVs, ``curves.json`` and ``manifest.json``.

    ``pairs`` fixes the set of CSV files (defaults to the pairs present in
    ``rows``). ``extra_files`` are already-written artifacts under ``out_dir``
    to list in the manifest. Returns every path written or listed.
    """
    out_dir = Path(out_dir)
    if not rows and manifest.complete:
        raise OutputError("no rows to write for a run marked complete")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create output directory {out_dir}: {e.strerror or e}") from e
    if pairs is None:
        pairs = sorted({(r.inject_layer, r.read_layer) for r in rows})
    grouped: dict = {}
    for r in rows:
        grouped.setdefault((r.inject_layer, r.read_layer), []).append(r)
    written = []
    for inj, rd in pairs:
        path = out_dir / csv_name(inj, rd)
        atomic_write(path, rows_to_csv(grouped.get((inj, rd), [])))
        written.append(path)
    curves_path = out_dir / "curves.json"
    atomic_write(
        curves_path,
        dumps_json({"format": "steersweep.curves", "version": 1, "curves": [curve_record(c) for c in curves]}),
    )
    written.append(curves_path)
    listed = written + [Path(p) for p in extra_files]
    known = {p.resolve() for p in listed} | {(out_dir / "manifest.json").resolve()}
    stray = sorted(
        p.relative_to(out_dir).as_posix() for p in out_dir.rglob("*") if p.is_file() and p.resolve() not in known
    )
    if stray:
        manifest.warnings.append(f"files from an earlier run are not part of this run: {', '.join(stray)}")
    manifest.files = [
        {"path": p.relative_to(out_dir).as_posix(), "sha256": file_digest(p), "bytes": p.stat().st_size}
        for p in sorted(listed, key=lambda p: p.relative_to(out_dir).as_posix())
    ]
    manifest_path = out_dir / "manifest.json"
    atomic_write(manifest_path, dumps_json(manifest.to_dict()))
    return listed + [manifest_path]


PLOT_METRICS = {
    "logit_diff": ("logit difference (matching - not matching)", False),
    "kl": ("KL(p0 || p_alpha)", False),
}


def emit_plots(curves, out_dir, metrics=("logit_diff", "kl", "rank_matching", "rank_not_matching")):
    """Write per-(inject, read) SVG charts into ``out_dir/plots``.

    Returns ``(paths, warnings)``. Logit-difference and KL charts overlay all
    vector kinds; the rank chart shows the steered candidates' ranks.
    """
    out_dir = Path(out_dir)
    if not curves:
        return [], ["no curves to plot; no SVG files written"]
    by_pair: dict = {}
    for c in curves:
        by_pair.setdefault((c.inject_layer, c.read_layer), []).append(c)
    paths = []
    for (inj, rd), group in sorted(by_pair.items()):
        stem = f"inj{inj}_read{rd}"
        for metric, (ylabel, log_y) in PLOT_METRICS.items():
            if metric not in metrics:
                continue
            chart = LineChart(
                title=f"{metric} vs alpha (inject L{inj}, read L{rd})", x_label="alpha", y_label=ylabel, log_y=log_y
            )
            for c in group:
                chart.add(Series(c.vector_kind, list(c.alphas), list(c.values[metric]), dashed=c.vector_kind != "steered"))
                if metric == "logit_diff" and c.vector_kind == "steered" and c.tipping_alpha is not None:
                    chart.vlines.append((c.tipping_alpha, f"tipping alpha={c.tipping_alpha:.3g}"))
            path = out_dir / "plots" / f"{stem}_{metric}.svg"
            atomic_write(path, chart.render().encode("utf-8"))
            paths.append(path)
        if "rank_matching" in metrics or "rank_not_matching" in metrics:
            steered = next((c for c in group if c.vector_kind == "steered"), None)
            if steered is not None:
                chart = LineChart(
                    title=f"candidate rank vs alpha (inject L{inj}, read L{rd})",
                    x_label="alpha",
                    y_label="rank (log scale, 1 = top)",
                    log_y=True,
                )
                chart.add(Series("rank matching", list(steered.alphas), list(steered.values["rank_matching"]), "#1f77b4"))
                chart.add(
                    Series("rank not matching", list(steered.alphas), list(steered.values["rank_not_matching"]), "#d62728")
                )
                if steered.rank_crossing_alpha is not None:
                    chart.vlines.append((steered.rank_crossing_alpha, f"rank crossing alpha={steered.rank_crossing_alpha:.3g}"))
                path = out_dir / "plots" / f"{stem}_rank.svg"
                atomic_write(path, chart.render().encode("utf-8"))
                paths.append(path)
    return paths, []
