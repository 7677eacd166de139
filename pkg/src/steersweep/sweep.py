"""Bias Response Curve sweeps over an alpha grid and an inject x read layer grid."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import BehaviorDataset, EvalPrompt, render_eval_prompt
from .errors import ConfigError, DatasetError, NumericError
from .metrics import METRIC_NAMES, MetricsRow, log_softmax, point_metrics
from .model import HookSite, Intervention, ModelBundle, SiteKind, TokenScope
from .vectors import (
    ControlKind,
    ControlVector,
    NormPolicy,
    SteeringVector,
    build_steering_vectors,
    check_control,
    make_control,
    steering_fingerprint,
)

log = logging.getLogger(__name__)

STEERED = "steered"
RANDOM = "random"
ORTHOGONAL = "orthogonal"
VECTOR_KINDS = (STEERED, RANDOM, ORTHOGONAL)
_CONTROL_KIND = {RANDOM: ControlKind.RANDOM_UNIT, ORTHOGONAL: ControlKind.ORTHOGONAL}


@dataclass(frozen=True)
class SweepConfig:
    alpha_start: float = -10.0
    alpha_step: float = 0.5
    alpha_stop: float = 10.0
    inject_layers: Optional[tuple] = None  # None: every layer
    read_layers: Optional[tuple] = None
    inject_site: SiteKind = SiteKind.RESID_MID
    read_site: SiteKind = SiteKind.RESID_POST
    token_scope: TokenScope = TokenScope.ALL_TOKENS
    seed: int = 42
    metrics: tuple = METRIC_NAMES
    eval_pair_limit: int = 10
    eval_fraction: float = 0.1
    controls: tuple = (RANDOM, ORTHOGONAL)
    norm_policy: NormPolicy = NormPolicy.MATCH_STEERING_NORM
    perplexity_target: str = "matching"
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("alpha_start", "alpha_step", "alpha_stop"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"{name} must be a finite number, got {value!r}")
        if not self.alpha_step > 0:
            raise ConfigError("alpha_step: step must be positive")
        if self.alpha_start > self.alpha_stop:
            raise ConfigError("alpha_start must not exceed alpha_stop")
        object.__setattr__(self, "inject_site", SiteKind.parse(self.inject_site))
        object.__setattr__(self, "read_site", SiteKind.parse(self.read_site))
        object.__setattr__(self, "token_scope", TokenScope(self.token_scope))
        object.__setattr__(self, "norm_policy", NormPolicy(self.norm_policy))
        for name in ("inject_layers", "read_layers"):
            layers = getattr(self, name)
            if layers is not None:
                layers = tuple(sorted(set(int(x) for x in layers)))
                if not layers:
                    raise ConfigError(f"{name} must not be empty")
                if layers[0] < 0:
                    raise ConfigError(f"{name}: layer indices must be non-negative")
                object.__setattr__(self, name, layers)
        unknown = set(self.metrics) - set(METRIC_NAMES)
        if unknown:
            raise ConfigError(f"metrics: unknown metric(s) {sorted(unknown)}; choose from {list(METRIC_NAMES)}")
        object.__setattr__(self, "metrics", tuple(m for m in METRIC_NAMES if m in self.metrics))
        bad = set(self.controls) - {RANDOM, ORTHOGONAL}
        if bad:
            raise ConfigError(f"controls: unknown control kind(s) {sorted(bad)}")
        object.__setattr__(self, "controls", tuple(k for k in (RANDOM, ORTHOGONAL) if k in self.controls))
        if self.eval_pair_limit < 1:
            raise ConfigError("eval_pair_limit must be at least 1")
        if self.perplexity_target not in ("matching", "not_matching"):
            raise ConfigError("perplexity_target must be 'matching' or 'not_matching'")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be at least 1")

    @property
    def vector_kinds(self) -> tuple:
        return (STEERED,) + self.controls

    def to_dict(self) -> dict:
        return {
            "alpha_start": self.alpha_start,
            "alpha_step": self.alpha_step,
            "alpha_stop": self.alpha_stop,
            "inject_layers": None if self.inject_layers is None else list(self.inject_layers),
            "read_layers": None if self.read_layers is None else list(self.read_layers),
            "inject_site": self.inject_site.value,
            "read_site": self.read_site.value,
            "token_scope": self.token_scope.value,
            "seed": self.seed,
            "metrics": list(self.metrics),
            "eval_pair_limit": self.eval_pair_limit,
            "eval_fraction": self.eval_fraction,
            "controls": list(self.controls),
            "norm_policy": self.norm_policy.value,
            "perplexity_target": self.perplexity_target,
        }


def alpha_grid(config: SweepConfig) -> list[float]:
    """``start + k * step`` for every integer k that stays within ``stop``.

    Values are rounded to 12 decimals so grid points print cleanly and the
    stop value is hit exactly when it lies on the grid.
    """
    start, step, stop = float(config.alpha_start), float(config.alpha_step), float(config.alpha_stop)
    if not step > 0:
        raise ConfigError("alpha_step: step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 12) + 0.0 for k in range(n)]


def layer_pairs(config: SweepConfig, n_layers: int) -> list[tuple[int, int]]:
    """Every (inject, read) combination with read strictly deeper than inject."""
    inject = _resolve_layers(config.inject_layers, n_layers, "inject_layers")
    read = _resolve_layers(config.read_layers, n_layers, "read_layers")
    pairs = [(i, r) for i in inject for r in read if r > i]
    if not pairs:
        raise ConfigError(
            f"no layer pair with read > inject (inject={list(inject)}, read={list(read)})"
        )
    return pairs


def _resolve_layers(layers, n_layers, name) -> tuple:
    if layers is None:
        return tuple(range(n_layers))
    out = tuple(sorted(set(layers)))
    bad = [l for l in out if not 0 <= l < n_layers]
    if bad:
        raise ConfigError(f"{name}: layer(s) {bad} out of range for a {n_layers}-layer model")
    return out


@dataclass(frozen=True)
class BiasResponseCurve:
    inject_layer: int
    read_layer: int
    vector_kind: str
    n_eval_pairs: int
    alphas: tuple
    values: dict  # metric name -> tuple of per-alpha means over eval pairs
    tipping_alpha: Optional[float] = None
    rank_crossing_alpha: Optional[float] = None

    @property
    def logit_diff(self) -> tuple:
        return self.values["logit_diff"]

    @property
    def key(self) -> tuple:
        return (self.inject_layer, self.read_layer, self.vector_kind, "mean")


def detect_tipping(curve) -> Optional[float]:
    """Smallest alpha where the logit difference changes sign.

    Accepts a :class:`BiasResponseCurve` or a sequence of ``(alpha, value)``
    points. Grid points that are exactly zero are returned as-is; otherwise
    the crossing is linearly interpolated between bracketing points.
    """
    if isinstance(curve, BiasResponseCurve):
        points = list(zip(curve.alphas, curve.logit_diff))
    else:
        points = [(float(a), float(y)) for a, y in curve]
    if len(points) < 2:
        raise ConfigError("tipping detection needs at least two points")
    for (a0, y0), (a1, y1) in zip(points, points[1:]):
        if y0 == 0.0:
            return a0
        if (y0 < 0.0) != (y1 < 0.0) and y1 != 0.0:
            return a0 + (a1 - a0) * (-y0) / (y1 - y0)
    if points[-1][1] == 0.0:
        return points[-1][0]
    return None


def detect_rank_crossing(alphas, rank_matching, rank_not_matching) -> Optional[float]:
    """First grid alpha where the matching token moves ahead of the other candidate."""
    for k in range(1, len(alphas)):
        if rank_matching[k - 1] >= rank_not_matching[k - 1] and rank_matching[k] < rank_not_matching[k]:
            return alphas[k]
    return None


@dataclass
class SweepResult:
    config: SweepConfig
    alphas: list
    pairs: list
    rows: list
    curves: list
    steering: dict  # inject layer -> SteeringVector
    controls: dict  # (inject layer, kind) -> ControlVector
    eval_pair_ids: list
    build_pair_ids: list
    stats: dict = field(default_factory=dict)
    complete: bool = True
    error: Optional[str] = None


class SweepAborted(NumericError):
    """Raised when a sweep fails part-way; ``partial`` holds what was computed."""

    def __init__(self, message, partial: SweepResult):
        super().__init__(message)
        self.partial = partial


def prepare_eval_prompts(model: ModelBundle, dataset: BehaviorDataset, ids) -> list[EvalPrompt]:
    return [render_eval_prompt(dataset.pairs[i], model.tokenizer) for i in ids]


def run_sweep(
    model: ModelBundle,
    dataset: BehaviorDataset,
    config: SweepConfig = SweepConfig(),
    steering: Optional[dict] = None,
    progress: Optional[Callable[[int, int], None]] = None,
) -> SweepResult:
    """Run the full protocol and aggregate curves.

    Each (inject layer, vector kind, alpha, eval prompt) gets one forward pass
    that records every read site, so all read layers deeper than the
    injection share it. ``steering`` may supply prebuilt vectors keyed by
    inject layer; missing ones are built from the dataset's build split.
    """
    n_layers = model.config.n_layers
    pairs = layer_pairs(config, n_layers)
    inject_layers = _resolve_layers(config.inject_layers, n_layers, "inject_layers")
    alphas = alpha_grid(config)
    split = dataset.split(config.seed, config.eval_fraction)
    eval_ids = list(split.eval[: config.eval_pair_limit])
    prompts = prepare_eval_prompts(model, dataset, eval_ids)

    stats = {"build_forwards": 0, "baseline_forwards": 0, "sweep_forwards": 0}

    # steering vectors
    steering = dict(steering or {})
    for layer, vec in steering.items():
        site = HookSite(layer, config.inject_site)
        if vec.site != site:
            raise ConfigError(f"supplied steering vector for layer {layer} was built at {vec.site}")
        if vec.build_fingerprint != steering_fingerprint(model, dataset, site, split.build):
            raise DatasetError(
                f"steering vector for {site} does not match this model, dataset and build split (fingerprint mismatch)"
            )
    missing = [HookSite(l, config.inject_site) for l in inject_layers if l not in steering]
    if missing:
        before = model.forward_count
        built = build_steering_vectors(model, dataset, missing, split.build, n_jobs=config.n_jobs)
        stats["build_forwards"] = model.forward_count - before
        steering.update({s.layer: v for s, v in built.items()})
        log.info("built %d steering vectors from %d pairs", len(built), len(split.build))

    controls: dict = {}
    for layer in inject_layers:
        for kind in config.controls:
            controls[(layer, kind)] = make_control(_CONTROL_KIND[kind], steering[layer], config.seed, config.norm_policy)
    # contract re-check right before the run
    for (layer, kind), ctl in controls.items():
        check_control(ctl, steering[layer])

    read_by_inject = {l: [r for (i, r) in pairs if i == l] for l in inject_layers}
    read_layers = sorted({r for _, r in pairs})
    read_sites = [HookSite(r, config.read_site) for r in read_layers]

    # baseline (alpha = 0, no intervention) log-distribution at every read layer
    # the same pass caches each inject site's residual, from which every
    # intervened pass resumes instead of recomputing the unchanged prefix
    inject_sites = [HookSite(l, config.inject_site) for l in inject_layers]
    baselines, prefixes = [], []
    for prompt in prompts:
        _, cache = model.forward(prompt.tokens, read_sites=read_sites + inject_sites)
        stats["baseline_forwards"] += 1
        baselines.append({s.layer: log_softmax(model.logit_lens(cache[s][-1])) for s in read_sites})
        prefixes.append({s.layer: cache[s] for s in inject_sites})

    def direction(layer, kind) -> np.ndarray:
        return steering[layer].direction if kind == STEERED else controls[(layer, kind)].direction

    tasks = [
        (layer, kind, alpha, p_idx)
        for layer in inject_layers
        for kind in config.vector_kinds
        for alpha in alphas
        for p_idx in range(len(prompts))
    ]

    def run_task(task):
        layer, kind, alpha, p_idx = task
        prompt = prompts[p_idx]
        inject = HookSite(layer, config.inject_site)
        iv = Intervention(inject, direction(layer, kind), alpha, config.token_scope)
        wanted = [HookSite(r, config.read_site) for r in read_by_inject[layer]]
        where = "final logits"
        try:
            _, cache = model.forward(prompt.tokens, [iv], wanted, start=(inject, prefixes[p_idx][layer]))
            out = []
            for site in wanted:
                where = f"read layer {site.layer}"
                m = point_metrics(
                    model.logit_lens(cache[site][-1]),
                    prompt.token_matching,
                    prompt.token_not_matching,
                    baselines[p_idx][site.layer],
                    config.perplexity_target,
                )
                out.append(MetricsRow(alpha, layer, site.layer, kind, eval_ids[p_idx], **m))
        except NumericError:
            raise NumericError(
                f"non-finite logits at alpha={alpha}, inject layer {layer}, {where}, "
                f"vector {kind}, eval pair {eval_ids[p_idx]}"
            ) from None
        return out

    rows: list = []
    error = None
    done = 0
    try:
        if config.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
                for result in pool.map(run_task, tasks):
                    rows.extend(result)
                    done += 1
                    if progress:
                        progress(done, len(tasks))
        else:
            for task in tasks:
                rows.extend(run_task(task))
                done += 1
                if progress:
                    progress(done, len(tasks))
    except NumericError as e:
        error = str(e)
    stats["sweep_forwards"] = done
    stats["planned_sweep_forwards"] = len(tasks)

    kind_order = {k: i for i, k in enumerate(VECTOR_KINDS)}
    rows.sort(key=lambda r: (r.inject_layer, r.read_layer, kind_order[r.vector_kind], r.alpha, r.eval_pair_id))
    result = SweepResult(
        config=config,
        alphas=alphas,
        pairs=pairs,
        rows=rows,
        curves=aggregate_curves(rows, alphas, pairs, config.vector_kinds) if error is None else [],
        steering=steering,
        controls=controls,
        eval_pair_ids=eval_ids,
        build_pair_ids=list(split.build),
        stats=stats,
        complete=error is None,
        error=error,
    )
    if error is not None:
        raise SweepAborted(error, result)
    return result


def aggregate_curves(rows, alphas, pairs, kinds) -> list[BiasResponseCurve]:
    """Mean over eval pairs for every (inject, read, kind) and alpha."""
    grouped: dict = {}
    for r in rows:
        grouped.setdefault((r.inject_layer, r.read_layer, r.vector_kind), {}).setdefault(r.alpha, []).append(r)
    curves = []
    for inj, rd in pairs:
        for kind in kinds:
            by_alpha = grouped.get((inj, rd, kind))
            if not by_alpha:
                continue
            present = [a for a in alphas if a in by_alpha]
            values = {
                name: tuple(float(np.mean([getattr(r, name) for r in by_alpha[a]])) for a in present)
                for name in METRIC_NAMES
            }
            curve = BiasResponseCurve(
                inject_layer=inj,
                read_layer=rd,
                vector_kind=kind,
                n_eval_pairs=len(by_alpha[present[0]]),
                alphas=tuple(present),
                values=values,
            )
            tipping = detect_tipping(curve) if len(present) >= 2 else (present[0] if values["logit_diff"][0] == 0.0 else None)
            crossing = detect_rank_crossing(present, values["rank_matching"], values["rank_not_matching"])
            curves.append(replace(curve, tipping_alpha=tipping, rank_crossing_alpha=crossing))
    return curves


def least_squares_slope(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
