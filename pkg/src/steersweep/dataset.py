"""Contrastive behavior datasets and the three prompt renderings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DatasetError, TokenizationError

CHOICE_LABELS = ("(A)", "(B)")
REQUIRED_KEYS = ("question", "answer_matching_behavior", "answer_not_matching_behavior")
CHOICE_PREFIX = "I choose "
EVAL_SUFFIX = "I choose ("


@dataclass(frozen=True)
class ContrastivePair:
    question: str
    answer_matching_behavior: str
    answer_not_matching_behavior: str

    def __post_init__(self):
        problems = _pair_problems(self.question, self.answer_matching_behavior, self.answer_not_matching_behavior)
        if problems:
            raise DatasetError("; ".join(problems))

    @property
    def matching_letter(self) -> str:
        return self.answer_matching_behavior[1]

    @property
    def not_matching_letter(self) -> str:
        return self.answer_not_matching_behavior[1]

    def swapped(self) -> "ContrastivePair":
        """The same question with the behavior labels exchanged."""
        return ContrastivePair(self.question, self.answer_not_matching_behavior, self.answer_matching_behavior)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REQUIRED_KEYS}


def _pair_problems(question, matching, not_matching) -> list[str]:
    problems = []
    if not isinstance(question, str) or not question.strip():
        problems.append("question must be a non-empty string")
    else:
        for label in CHOICE_LABELS:
            if label not in question:
                problems.append(f"question is missing the {label} choice marker")
    for field, value in (("answer_matching_behavior", matching), ("answer_not_matching_behavior", not_matching)):
        if value not in CHOICE_LABELS:
            problems.append(f"{field} must be one of {CHOICE_LABELS}, got {value!r}")
    if matching == not_matching and matching in CHOICE_LABELS:
        problems.append(f"both answers are {matching!r}")
    return problems


@dataclass(frozen=True)
class BehaviorDataset:
    behavior_name: str
    pairs: tuple

    def __post_init__(self):
        if len(self.pairs) == 0:
            raise DatasetError("empty dataset")
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def __len__(self):
        return len(self.pairs)

    @property
    def fingerprint(self) -> str:
        canon = json.dumps(
            {"behavior": self.behavior_name, "pairs": [p.to_dict() for p in self.pairs]},
            sort_keys=True,
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def split(self, seed: int = 42, eval_fraction: float = 0.1) -> "DatasetSplit":
        """Seeded shuffle into build and held-out eval indices.

        At least one pair lands on each side; a single-pair dataset cannot be split.
        """
        n = len(self.pairs)
        if n < 2:
            raise DatasetError("need at least 2 pairs to split into build and eval subsets")
        if not 0.0 < eval_fraction < 1.0:
            raise DatasetError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
        n_eval = min(n - 1, max(1, int(round(n * eval_fraction))))
        order = np.random.default_rng(seed).permutation(n)
        return DatasetSplit(
            build=tuple(int(i) for i in order[: n - n_eval]),
            eval=tuple(int(i) for i in order[n - n_eval :]),
        )


@dataclass(frozen=True)
class DatasetSplit:
    build: tuple
    eval: tuple


def load_dataset(path, behavior_name: Optional[str] = None) -> BehaviorDataset:
    """Read and validate a JSON array of contrastive pairs.

    All invalid entries are collected and reported together, each with its
    index and offending field.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"dataset file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: JSON parse error: {e}") from None
    if not isinstance(raw, list):
        raise DatasetError(f"{path}: expected a JSON array of entries, got {type(raw).__name__}")
    if not raw:
        raise DatasetError(f"{path}: empty dataset")
    pairs, errors = [], []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            errors.append(f"entry {i}: expected an object, got {type(entry).__name__}")
            continue
        missing = [k for k in REQUIRED_KEYS if k not in entry]
        if missing:
            errors.append(f"entry {i}: missing field(s) {', '.join(missing)}")
            continue
        problems = _pair_problems(*(entry[k] for k in REQUIRED_KEYS))
        if problems:
            errors.extend(f"entry {i}: {p}" for p in problems)
            continue
        pairs.append(ContrastivePair(*(entry[k] for k in REQUIRED_KEYS)))
    if errors:
        raise DatasetError(f"{path}: schema violation(s):\n  " + "\n  ".join(errors))
    return BehaviorDataset(behavior_name or path.stem, tuple(pairs))


def render_pair(pair: ContrastivePair) -> tuple[str, str]:
    """Return ``(prompt_matching, prompt_not_matching)``, behavior-matching first."""
    base = pair.question + "\n\n" + CHOICE_PREFIX
    return base + pair.answer_matching_behavior, base + pair.answer_not_matching_behavior


@dataclass(frozen=True)
class EvalPrompt:
    text: str
    tokens: tuple
    token_matching: int
    token_not_matching: int


def render_eval_prompt(pair: ContrastivePair, tokenizer) -> EvalPrompt:
    """Render the evaluation prompt that stops right before the choice letter.

    The candidate ids are the first tokens produced by appending each letter
    to the prompt. Raises :class:`TokenizationError` if a letter merges into
    the preceding text or both letters start with the same token.
    """
    text = pair.question + "\n\n" + EVAL_SUFFIX
    prompt_ids = tokenizer.encode(text)
    candidates = {}
    for letter in "AB":
        full = tokenizer.encode(text + letter)
        n = len(prompt_ids)
        if full[:n] != prompt_ids or len(full) <= n:
            raise TokenizationError(
                f"continuation {letter!r} does not tokenize as a clean extension of the eval prompt"
            )
        candidates[letter] = full[n]
    if candidates["A"] == candidates["B"]:
        raise TokenizationError(f"choices A and B share the first token id {candidates['A']}")
    return EvalPrompt(
        text=text,
        tokens=tuple(prompt_ids),
        token_matching=candidates[pair.matching_letter],
        token_not_matching=candidates[pair.not_matching_letter],
    )
