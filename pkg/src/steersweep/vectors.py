"""Steering vectors from contrastive pairs, and random/orthogonal controls."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import BehaviorDataset, render_pair
from .errors import ConfigError, DatasetError, NumericError
from .model import HookSite, ModelBundle

VECTOR_FORMAT = "steersweep.steering_vector"
VECTOR_FORMAT_VERSION = 1
ORTHOGONALITY_TOL = 1e-6
MAX_CONTROL_RETRIES = 16


@dataclass(frozen=True, eq=False)
class SteeringVector:
    site: HookSite
    direction: np.ndarray
    n_pairs: int
    behavior_name: str
    build_fingerprint: str

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if d.ndim != 1 or not np.all(np.isfinite(d)):
            raise NumericError(f"steering vector at {self.site} must be a finite 1-D array")
        if self.n_pairs < 1:
            raise DatasetError("steering vector needs at least one pair")
        d.setflags(write=False)
        object.__setattr__(self, "direction", d)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.direction))

    def to_record(self) -> dict:
        return {
            "format": VECTOR_FORMAT,
            "version": VECTOR_FORMAT_VERSION,
            "site": {"layer": self.site.layer, "kind": self.site.kind.value},
            "behavior": self.behavior_name,
            "n_pairs": self.n_pairs,
            "fingerprint": self.build_fingerprint,
            "direction": [float(x) for x in self.direction],
        }

    @classmethod
    def from_record(cls, record: dict) -> "SteeringVector":
        if record.get("format") != VECTOR_FORMAT or record.get("version") != VECTOR_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported steering-vector record (format={record.get('format')!r}, version={record.get('version')!r})"
            )
        return cls(
            site=HookSite(record["site"]["layer"], record["site"]["kind"]),
            direction=np.array(record["direction"], dtype=np.float64),
            n_pairs=record["n_pairs"],
            behavior_name=record["behavior"],
            build_fingerprint=record["fingerprint"],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_record(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SteeringVector":
        return cls.from_record(json.loads(Path(path).read_text(encoding="utf-8")))


def _fingerprint(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def steering_fingerprint(model: ModelBundle, dataset: BehaviorDataset, site: HookSite, indices) -> str:
    """Provenance hash of (dataset, model, site, build subset)."""
    return _fingerprint("steering", dataset.fingerprint, model.fingerprint, site.name, ",".join(map(str, indices)))


def build_steering_vectors(
    model: ModelBundle,
    dataset: BehaviorDataset,
    sites: Iterable[HookSite],
    subset: Optional[Sequence[int]] = None,
    n_jobs: int = 1,
) -> dict[HookSite, SteeringVector]:
    """Mean matching-minus-not-matching residual at the final token, per site.

    One forward pass per rendered prompt records every requested site. The
    per-pair differences are summed in float64 in dataset order, so the
    result does not depend on ``n_jobs``.
    """
    sites = sorted(set(sites), key=HookSite.sort_key)
    if not sites:
        raise ConfigError("no hook sites requested for steering-vector construction")
    indices = list(range(len(dataset))) if subset is None else [int(i) for i in subset]
    if not indices:
        raise DatasetError("steering-vector build subset is empty")

    def final_residuals(text):
        _, cache = model.forward(model.encode(text), read_sites=sites)
        return {s: cache[s][-1].astype(np.float64) for s in sites}

    def pair_diff(i):
        prompt_matching, prompt_not_matching = render_pair(dataset.pairs[i])
        pos, neg = final_residuals(prompt_matching), final_residuals(prompt_not_matching)
        return {s: pos[s] - neg[s] for s in sites}

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            diffs = list(pool.map(pair_diff, indices))
    else:
        diffs = [pair_diff(i) for i in indices]

    out = {}
    for s in sites:
        total = np.zeros(model.config.d_model, dtype=np.float64)
        for d in diffs:
            total += d[s]
        out[s] = SteeringVector(
            site=s,
            direction=total / len(indices),
            n_pairs=len(indices),
            behavior_name=dataset.behavior_name,
            build_fingerprint=steering_fingerprint(model, dataset, s, indices),
        )
    return out


def build_steering_vector(
    model: ModelBundle,
    dataset: BehaviorDataset,
    site: HookSite,
    subset: Optional[Sequence[int]] = None,
) -> SteeringVector:
    return build_steering_vectors(model, dataset, [site], subset)[site]


class ControlKind(str, Enum):
    RANDOM_UNIT = "random_unit"
    ORTHOGONAL = "orthogonal"


class NormPolicy(str, Enum):
    UNIT = "unit"
    MATCH_STEERING_NORM = "match_steering_norm"


@dataclass(frozen=True, eq=False)
class ControlVector:
    kind: ControlKind
    direction: np.ndarray
    seed: int
    norm_policy: NormPolicy
    steering_fingerprint: str = ""

    @property
    def fingerprint(self) -> str:
        return _fingerprint(
            "control", self.kind.value, self.seed, self.norm_policy.value, self.steering_fingerprint,
            hashlib.sha256(self.direction.tobytes()).hexdigest(),
        )


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def make_control(
    kind,
    steering: SteeringVector,
    seed: int = 42,
    norm_policy=NormPolicy.MATCH_STEERING_NORM,
) -> ControlVector:
    """Draw a seeded control direction for ``steering``.

    ``random_unit`` is an isotropic Gaussian draw; ``orthogonal`` additionally
    has its component along the steering direction removed. Both are then
    scaled to unit norm or to the steering norm. A degenerate draw is retried
    with ``seed + 1``, ``seed + 2``, ...; the returned ``seed`` is the one used.
    """
    kind, norm_policy = ControlKind(kind), NormPolicy(norm_policy)
    v = steering.direction
    v_norm = np.linalg.norm(v)
    if v_norm == 0.0:
        raise NumericError(f"cannot build a control for the zero steering vector at {steering.site}")
    unit_v = v / v_norm
    target_norm = 1.0 if norm_policy is NormPolicy.UNIT else float(v_norm)
    for attempt in range(MAX_CONTROL_RETRIES):
        s = seed + attempt
        g = np.random.default_rng(s).standard_normal(v.shape[0])
        if kind is ControlKind.ORTHOGONAL:
            g = g - np.dot(g, unit_v) * unit_v
            g = g - np.dot(g, unit_v) * unit_v  # second pass mops up rounding
        g_norm = np.linalg.norm(g)
        if g_norm < 1e-8 * np.sqrt(v.shape[0]):
            continue
        direction = g * (target_norm / g_norm)
        control = ControlVector(kind, direction, s, norm_policy, steering.build_fingerprint)
        if kind is ControlKind.ORTHOGONAL and abs(cosine(direction, v)) >= ORTHOGONALITY_TOL:
            continue
        return control
    raise NumericError(f"could not draw a non-degenerate {kind.value} control after {MAX_CONTROL_RETRIES} seeds")


def check_control(control: ControlVector, steering: SteeringVector):
    """Re-verify the norm and orthogonality contracts; raises :class:`NumericError`."""
    d = control.direction
    if not np.all(np.isfinite(d)):
        raise NumericError(f"{control.kind.value} control has non-finite components")
    expected = 1.0 if control.norm_policy is NormPolicy.UNIT else steering.norm
    if abs(np.linalg.norm(d) - expected) > 1e-6 * expected:
        raise NumericError(f"{control.kind.value} control norm {np.linalg.norm(d)} != {expected}")
    if control.kind is ControlKind.ORTHOGONAL and abs(cosine(d, steering.direction)) >= ORTHOGONALITY_TOL:
        raise NumericError(f"orthogonal control is not orthogonal to the steering vector at {steering.site}")
