"""Per-point bias-response metrics on a logit-lens readout.

All distribution math is float64 with max-subtraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import NumericError
from .model import HookSite, Intervention, ModelBundle

METRIC_NAMES = ("logit_diff", "prob_diff", "odds_ratio", "kl", "perplexity", "rank_matching", "rank_not_matching")


def log_softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_divergence(log_p0, log_pa) -> float:
    """KL(p0 || pa) from log-probabilities, baseline first.

    Zero-probability baseline entries contribute nothing. Rounding can leave
    a result of order -1e-17 for near-identical inputs; it is floored at 0.
    """
    log_p0 = np.asarray(log_p0, dtype=np.float64)
    log_pa = np.asarray(log_pa, dtype=np.float64)
    p0 = np.exp(log_p0)
    support = p0 > 0
    kl = float(np.sum(p0[support] * (log_p0[support] - log_pa[support])))
    return max(kl, 0.0)


def _safe_exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def token_rank(logits, token_id: int) -> int:
    """1-based rank; ties go to the smaller token id."""
    logits = np.asarray(logits)
    value = logits[token_id]
    ahead = np.count_nonzero(logits > value)
    tied_before = np.count_nonzero(logits[:token_id] == value)
    return int(1 + ahead + tied_before)


@dataclass(frozen=True)
class MetricsRow:
    alpha: float
    inject_layer: int
    read_layer: int
    vector_kind: str
    eval_pair_id: int
    logit_diff: float
    prob_diff: float
    odds_ratio: float
    kl: float
    perplexity: float
    rank_matching: int
    rank_not_matching: int

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def point_metrics(
    lens_logits,
    token_matching: int,
    token_not_matching: int,
    baseline_log_probs,
    target: str = "matching",
) -> dict:
    """Metrics for one readout given the baseline log-distribution at the same read site."""
    logits = np.asarray(lens_logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in readout")
    log_p = log_softmax(logits)
    logit_diff = float(np.float64(logits[token_matching]) - np.float64(logits[token_not_matching]))
    target_id = token_matching if target == "matching" else token_not_matching
    return {
        "logit_diff": logit_diff,
        "prob_diff": float(np.exp(log_p[token_matching]) - np.exp(log_p[token_not_matching])),
        "odds_ratio": _safe_exp(logit_diff),
        "kl": kl_divergence(baseline_log_probs, log_p),
        "perplexity": float(np.exp(-log_p[target_id])),
        "rank_matching": token_rank(logits, token_matching),
        "rank_not_matching": token_rank(logits, token_not_matching),
    }


def compute_point(
    model: ModelBundle,
    tokens,
    token_matching: int,
    token_not_matching: int,
    intervention: Optional[Intervention],
    read_site: HookSite,
    baseline_log_probs,
    target: str = "matching",
) -> dict:
    """One forward pass, read ``read_site`` at the final position through the logit lens."""
    interventions = [] if intervention is None else [intervention]
    try:
        _, cache = model.forward(tokens, interventions, [read_site])
        lens = model.logit_lens(cache[read_site][-1])
        return point_metrics(lens, token_matching, token_not_matching, baseline_log_probs, target)
    except NumericError:
        alpha = None if intervention is None else intervention.alpha
        inj = None if intervention is None else intervention.site
        raise NumericError(f"non-finite logits at alpha={alpha}, inject={inj}, read={read_site}") from None
