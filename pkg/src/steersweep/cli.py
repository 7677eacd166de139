"""Command-line entry point: ``steersweep --model-dir ... --dataset ... --out-dir ...``.

Exit codes: 0 success, 2 configuration error, 3 data/schema error,
4 numeric failure during the sweep.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .errors import ConfigError, SteerSweepError
from .metrics import METRIC_NAMES
from .sweep import ORTHOGONAL, RANDOM, SweepAborted, SweepConfig

log = logging.getLogger("steersweep")

DEFAULTS = {
    "alpha_start": -10.0,
    "alpha_step": 0.5,
    "alpha_stop": 10.0,
    "inject_layers": "all",
    "read_layers": "all",
    "inject_site": "hook_resid_mid",
    "read_site": "hook_resid_post",
    "steer_all_tokens": True,
    "metrics": "all",
    "seed": 42,
    "eval_pairs": 10,
    "eval_fraction": 0.1,
    "controls": "random,orthogonal",
    "norm_policy": "match_steering_norm",
    "perplexity_target": "matching",
    "jobs": 1,
    "single_prompt": False,
    "plots": True,
    "load_vectors": None,
}
PATH_KEYS = ("model_dir", "dataset", "out_dir")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="steersweep", description="Bias Response Curve sweeps for activation steering on GPT-2.")
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON or key=value file; explicit flags take precedence over it")
    p.add_argument("--model-dir", default=S, help="directory with model.safetensors, config.json, vocab.json, merges.txt")
    p.add_argument("--dataset", default=S, help="contrastive-pair JSON file")
    p.add_argument("--out-dir", default=S, help="output directory")
    p.add_argument("--alpha-start", type=float, default=S, help="first alpha (default -10.0)")
    p.add_argument("--alpha-step", type=float, default=S, help="alpha step (default 0.5)")
    p.add_argument("--alpha-stop", type=float, default=S, help="last alpha (default 10.0)")
    p.add_argument("--inject-layers", default=S, help="'all', '3', '0,1,3' or '0-5' (default all)")
    p.add_argument("--read-layers", default=S, help="same syntax as --inject-layers (default all)")
    p.add_argument("--inject-site", default=S, help="hook_resid_pre | hook_resid_mid | hook_resid_post (default hook_resid_mid)")
    p.add_argument("--read-site", default=S, help="default hook_resid_post")
    p.add_argument(
        "--steer-all-tokens", action=argparse.BooleanOptionalAction, default=S,
        help="add the vector at every position (default) or only at the final token",
    )
    p.add_argument("--metrics", default=S, help=f"'all' or comma list of {','.join(METRIC_NAMES)}")
    p.add_argument("--seed", type=int, default=S, help="default 42")
    p.add_argument("--eval-pairs", type=int, default=S, help="held-out prompts per curve (default 10)")
    p.add_argument("--eval-fraction", type=float, default=S, help="held-out share of the dataset (default 0.1)")
    p.add_argument("--single-prompt", action="store_true", default=S, help="use one eval prompt per curve")
    p.add_argument("--controls", default=S, help="'random,orthogonal' (default), one of them, or 'none'")
    p.add_argument("--norm-policy", default=S, help="match_steering_norm (default) | unit")
    p.add_argument("--perplexity-target", default=S, help="matching (default) | not_matching")
    p.add_argument("--jobs", type=int, default=S, help="worker threads for forward passes (default 1)")
    p.add_argument("--load-vectors", default=S, help="directory of previously saved steering_L*.json records")
    p.add_argument("--no-plots", dest="plots", action="store_false", default=S, help="skip SVG output")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_layers(value, flag: str) -> Optional[tuple]:
    if value is None or (isinstance(value, str) and value.strip().lower() == "all"):
        return None
    if isinstance(value, int):
        return (value,)
    if isinstance(value, (list, tuple)):
        items = list(value)
    else:
        items = []
        for part in str(value).split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                try:
                    items.extend(range(int(lo), int(hi) + 1))
                except ValueError:
                    raise ConfigError(f"--{flag}: invalid layer range {part!r}") from None
            elif part:
                items.append(part)
    try:
        layers = tuple(int(x) for x in items)
    except (TypeError, ValueError):
        raise ConfigError(f"--{flag}: layers must be integers, got {value!r}") from None
    if not layers:
        raise ConfigError(f"--{flag}: no layers given")
    if min(layers) < 0:
        raise ConfigError(f"--{flag}: layer indices must be non-negative")
    return layers


def _split_list(value, flag, choices):
    if isinstance(value, (list, tuple)):
        items = [str(v) for v in value]
    else:
        text = str(value).strip().lower()
        if text == "all":
            return tuple(choices)
        if text in ("none", ""):
            return ()
        items = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in items if v not in choices]
    if bad:
        raise ConfigError(f"--{flag}: unknown value(s) {bad}; choose from {list(choices)}")
    return tuple(items)


def read_config_file(path) -> dict:
    """JSON object or ``key = value`` lines; keys may use dashes or underscores."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"--config: cannot read {path}: {e.strerror or e}") from None
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"--config: {path} is not valid JSON: {e}") from None
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"--config: {path}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            raw[k] = _coerce(v)
    out = {}
    known = set(DEFAULTS) | set(PATH_KEYS)
    for k, v in raw.items():
        key = k.replace("-", "_").lstrip("_")
        if key == "no_plots":
            key, v = "plots", not v
        if key not in known:
            raise ConfigError(f"--config: unknown key {k!r} in {path}")
        out[key] = v
    return out


def _coerce(v: str):
    low = v.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def parse_cli(argv=None) -> tuple[SweepConfig, dict]:
    """Resolve defaults < config file < explicit flags into a SweepConfig and paths."""
    ns = vars(build_parser().parse_args(argv))
    verbose = ns.pop("verbose", False)
    config_path = ns.pop("config", None)
    merged = dict(DEFAULTS)
    if config_path:
        merged.update(read_config_file(config_path))
    merged.update(ns)
    for key in PATH_KEYS:
        if not merged.get(key):
            raise ConfigError(f"--{key.replace('_', '-')} is required")
    try:
        alpha_start = float(merged["alpha_start"])
        alpha_step = float(merged["alpha_step"])
        alpha_stop = float(merged["alpha_stop"])
    except (TypeError, ValueError):
        raise ConfigError("--alpha-start/--alpha-step/--alpha-stop must be numbers") from None
    if not alpha_step > 0:
        raise ConfigError("--alpha-step: step must be positive")
    if alpha_start > alpha_stop:
        raise ConfigError("--alpha-start must not exceed --alpha-stop")
    eval_pairs = int(merged["eval_pairs"])
    if merged.get("single_prompt"):
        eval_pairs = 1
    if eval_pairs < 1:
        raise ConfigError("--eval-pairs must be at least 1")
    if int(merged["jobs"]) < 1:
        raise ConfigError("--jobs must be at least 1")
    if not 0.0 < float(merged["eval_fraction"]) < 1.0:
        raise ConfigError("--eval-fraction must be strictly between 0 and 1")
    if merged["norm_policy"] not in ("unit", "match_steering_norm"):
        raise ConfigError("--norm-policy must be 'unit' or 'match_steering_norm'")
    try:
        config = SweepConfig(
            alpha_start=alpha_start,
            alpha_step=alpha_step,
            alpha_stop=alpha_stop,
            inject_layers=parse_layers(merged["inject_layers"], "inject-layers"),
            read_layers=parse_layers(merged["read_layers"], "read-layers"),
            inject_site=merged["inject_site"],
            read_site=merged["read_site"],
            token_scope="all_tokens" if merged["steer_all_tokens"] else "final_token",
            seed=int(merged["seed"]),
            metrics=_split_list(merged["metrics"], "metrics", METRIC_NAMES),
            eval_pair_limit=eval_pairs,
            eval_fraction=float(merged["eval_fraction"]),
            controls=_split_list(merged["controls"], "controls", (RANDOM, ORTHOGONAL)),
            norm_policy=merged["norm_policy"],
            perplexity_target=merged["perplexity_target"],
            n_jobs=int(merged["jobs"]),
        )
    except ConfigError as e:
        raise ConfigError(str(e).replace("alpha_step:", "--alpha-step:")) from None
    paths = {k: Path(merged[k]) for k in PATH_KEYS}
    paths["load_vectors"] = Path(merged["load_vectors"]) if merged.get("load_vectors") else None
    paths["plots"] = bool(merged["plots"])
    paths["verbose"] = verbose
    return config, paths


def vector_filename(layer: int, kind: str) -> str:
    return f"steering_L{layer}_{kind}.json"


def run(config: SweepConfig, paths: dict) -> int:
    from .dataset import load_dataset
    from .model import HookSite, load_model_dir
    from .report import RunManifest, atomic_write, dumps_json, emit_plots, write_results
    from .sweep import run_sweep
    from .vectors import SteeringVector

    model = load_model_dir(paths["model_dir"])
    if model.tokenizer is None:
        raise ConfigError(f"--model-dir: {paths['model_dir']} has no vocab.json/merges.txt")
    dataset = load_dataset(paths["dataset"])
    log.info("model: %d layers, d_model=%d; dataset %r with %d pairs",
             model.config.n_layers, model.config.d_model, dataset.behavior_name, len(dataset))

    steering = {}
    if paths.get("load_vectors"):
        for path in sorted(Path(paths["load_vectors"]).glob("steering_L*.json")):
            vec = SteeringVector.load(path)
            if vec.site.kind == config.inject_site:
                steering[vec.site.layer] = vec
        log.info("loaded %d steering vectors from %s", len(steering), paths["load_vectors"])

    def progress(done, total):
        if done == total or done % 50 == 0:
            log.info("sweep %d/%d forward passes", done, total)

    exit_code = 0
    try:
        result = run_sweep(model, dataset, config, steering=steering, progress=progress)
    except SweepAborted as e:
        log.error("sweep aborted: %s", e)
        result = e.partial
        exit_code = e.exit_code

    out_dir = Path(paths["out_dir"])
    extra = []
    for layer, vec in sorted(result.steering.items()):
        path = out_dir / "vectors" / vector_filename(layer, vec.site.kind.value)
        atomic_write(path, dumps_json(vec.to_record()))
        extra.append(path)
    manifest = RunManifest.from_result(result, model.fingerprint, dataset)
    if paths.get("plots", True):
        plot_paths, warnings = emit_plots(result.curves, out_dir, config.metrics)
        extra.extend(plot_paths)
        manifest.warnings.extend(warnings)
    written = write_results(result.rows, result.curves, manifest, out_dir, pairs=result.pairs, extra_files=extra)
    log.info("wrote %d files to %s", len(written), out_dir)
    return exit_code


def main(argv=None) -> int:
    try:
        config, paths = parse_cli(argv)
        logging.basicConfig(
            level=logging.DEBUG if paths["verbose"] else logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return run(config, paths)
    except SteerSweepError as e:
        print(f"steersweep: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
