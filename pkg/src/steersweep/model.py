"""GPT-2 forward pass with residual-stream hooks and a logit-lens readout.

The engine is plain numpy in float32. A forward call never mutates the
bundle; all scratch arrays are local, so one bundle can serve many threads.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError
from .tokenizer import BPETokenizer


class SiteKind(str, Enum):
    RESID_PRE = "resid_pre"
    RESID_MID = "resid_mid"
    RESID_POST = "resid_post"

    @classmethod
    def parse(cls, value) -> "SiteKind":
        if isinstance(value, cls):
            return value
        name = str(value)
        if name.startswith("hook_"):
            name = name[len("hook_"):]
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(
                f"unknown hook site {value!r}; expected one of "
                + ", ".join(k.value for k in cls)
            ) from None


# position of each site inside a block, for ordering
_SITE_ORDER = {SiteKind.RESID_PRE: 0, SiteKind.RESID_MID: 1, SiteKind.RESID_POST: 2}


def _stage(site: "HookSite") -> int:
    return 3 * site.layer + _SITE_ORDER[site.kind]


@dataclass(frozen=True, order=False)
class HookSite:
    """A residual-stream location: ``layer`` plus where in the block."""

    layer: int
    kind: SiteKind

    def __post_init__(self):
        object.__setattr__(self, "kind", SiteKind.parse(self.kind))
        if int(self.layer) != self.layer or self.layer < 0:
            raise ConfigError(f"layer index must be a non-negative integer, got {self.layer!r}")

    @property
    def name(self) -> str:
        return f"blocks.{self.layer}.hook_{self.kind.value}"

    def sort_key(self):
        return (self.layer, _SITE_ORDER[self.kind])

    def __str__(self):
        return f"L{self.layer}/{self.kind.value}"


class TokenScope(str, Enum):
    ALL_TOKENS = "all_tokens"
    FINAL_TOKEN = "final_token"


@dataclass(frozen=True)
class Intervention:
    """Add ``alpha * direction`` to the residual at ``site``."""

    site: HookSite
    direction: np.ndarray
    alpha: float
    token_scope: TokenScope = TokenScope.ALL_TOKENS

    def __post_init__(self):
        d = np.asarray(self.direction)
        if d.ndim != 1:
            raise ConfigError(f"intervention direction must be 1-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ConfigError(f"intervention direction at {self.site} has non-finite components")
        if not math.isfinite(self.alpha):
            raise ConfigError(f"intervention alpha must be finite, got {self.alpha!r}")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "token_scope", TokenScope(self.token_scope))

    def delta(self, dtype=np.float32) -> np.ndarray:
        # product taken in float64, then rounded once to the residual dtype
        return (float(self.alpha) * self.direction.astype(np.float64)).astype(dtype)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_vocab: int
    n_ctx: int
    layer_norm_eps: float = 1e-5
    d_mlp: Optional[int] = None

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_vocab", "n_ctx"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise CheckpointError(f"config field {name} must be a positive integer, got {value!r}")
        if self.d_mlp is None:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)
        if self.d_model % self.n_heads != 0:
            raise CheckpointError(
                f"shape mismatch: d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if not self.layer_norm_eps > 0:
            raise CheckpointError("layer_norm_eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        try:
            return cls(
                n_layers=raw["n_layer"],
                d_model=raw["n_embd"],
                n_heads=raw["n_head"],
                d_vocab=raw["vocab_size"],
                n_ctx=raw.get("n_positions", raw.get("n_ctx")),
                layer_norm_eps=raw.get("layer_norm_epsilon", 1e-5),
                d_mlp=raw.get("n_inner"),
            )
        except KeyError as e:
            raise CheckpointError(f"{path}: missing architecture field {e.args[0]!r}") from None


@dataclass(frozen=True)
class LayerWeights:
    ln1_w: np.ndarray
    ln1_b: np.ndarray
    attn_w: np.ndarray  # (d_model, 3 * d_model), columns q | k | v
    attn_b: np.ndarray
    attn_proj_w: np.ndarray
    attn_proj_b: np.ndarray
    ln2_w: np.ndarray
    ln2_b: np.ndarray
    mlp_in_w: np.ndarray
    mlp_in_b: np.ndarray
    mlp_out_w: np.ndarray
    mlp_out_b: np.ndarray


# ---------------------------------------------------------------- safetensors

_ST_DTYPES = {
    "F64": np.float64,
    "F32": np.float32,
    "F16": np.float16,
    "BF16": np.uint16,  # widened to float32 below
}


def read_safetensors(path) -> dict[str, np.ndarray]:
    """Read a safetensors archive into float32 arrays.

    Errors name the tensor whose byte range is missing or malformed so a
    truncated download is easy to diagnose.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"weights file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: file too short to hold a safetensors header")
    header_len = int.from_bytes(blob[:8], "little")
    if 8 + header_len > len(blob):
        raise CheckpointError(f"{path}: header of {header_len} bytes runs past end of file")
    try:
        header = json.loads(blob[8 : 8 + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unparseable safetensors header ({e})") from None
    data = memoryview(blob)[8 + header_len :]
    out = {}
    for name, meta in header.items():
        if name == "__metadata__":
            continue
        dtype = _ST_DTYPES.get(meta.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {meta.get('dtype')!r}")
        start, stop = meta["data_offsets"]
        shape = tuple(meta["shape"])
        if stop > len(data):
            raise CheckpointError(
                f"{path}: truncated file, tensor {name!r} needs bytes [{start}, {stop}) "
                f"but only {len(data)} data bytes are present"
            )
        n_items = int(np.prod(shape, dtype=np.int64))
        if (stop - start) != n_items * np.dtype(dtype).itemsize:
            raise CheckpointError(f"{path}: tensor {name!r} byte range does not match shape {shape}")
        arr = np.frombuffer(data[start:stop], dtype=np.dtype(dtype).newbyteorder("<")).reshape(shape)
        if meta["dtype"] == "BF16":
            arr = (arr.astype(np.uint32) << 16).view(np.float32)
        out[name] = np.ascontiguousarray(arr, dtype=np.float32)
    return out


# ---------------------------------------------------------------- numerics


def layer_norm(x: np.ndarray, w: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + np.float32(eps)) * w + b


def gelu_tanh(x: np.ndarray) -> np.ndarray:
    """Tanh-approximated GELU used by GPT-2."""
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------- the model


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Immutable GPT-2 weights, config and (optionally) tokenizer.

    ``W_U`` is ``(d_model, d_vocab)``; for tied checkpoints it is a view of
    ``W_E.T``.
    """

    config: ModelConfig
    W_E: np.ndarray
    W_pos: np.ndarray
    layers: tuple
    ln_f_w: np.ndarray
    ln_f_b: np.ndarray
    W_U: np.ndarray
    tokenizer: Optional[BPETokenizer] = None
    fingerprint: str = ""
    _counter: list = field(default_factory=lambda: [0], repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    # -- construction

    @classmethod
    def from_state_dict(
        cls,
        config: ModelConfig,
        tensors: Mapping[str, np.ndarray],
        tokenizer: Optional[BPETokenizer] = None,
        fingerprint: str = "",
    ) -> "ModelBundle":
        """Build a bundle from GPT-2 style tensor names (``h.{i}.attn.c_attn.weight`` ...).

        A leading ``transformer.`` prefix is accepted.
        """
        c = config
        tensors = {k[len("transformer."):] if k.startswith("transformer.") else k: v for k, v in tensors.items()}

        def get(name, shape):
            if name not in tensors:
                raise CheckpointError(f"missing tensor {name!r} in checkpoint")
            arr = np.asarray(tensors[name])
            if tuple(arr.shape) != tuple(shape):
                raise CheckpointError(
                    f"shape mismatch for tensor {name!r}: checkpoint has {tuple(arr.shape)}, config implies {tuple(shape)}"
                )
            return _freeze(arr)

        d, v, m = c.d_model, c.d_vocab, c.d_mlp
        layers = []
        for i in range(c.n_layers):
            p = f"h.{i}."
            layers.append(
                LayerWeights(
                    ln1_w=get(p + "ln_1.weight", (d,)),
                    ln1_b=get(p + "ln_1.bias", (d,)),
                    attn_w=get(p + "attn.c_attn.weight", (d, 3 * d)),
                    attn_b=get(p + "attn.c_attn.bias", (3 * d,)),
                    attn_proj_w=get(p + "attn.c_proj.weight", (d, d)),
                    attn_proj_b=get(p + "attn.c_proj.bias", (d,)),
                    ln2_w=get(p + "ln_2.weight", (d,)),
                    ln2_b=get(p + "ln_2.bias", (d,)),
                    mlp_in_w=get(p + "mlp.c_fc.weight", (d, m)),
                    mlp_in_b=get(p + "mlp.c_fc.bias", (m,)),
                    mlp_out_w=get(p + "mlp.c_proj.weight", (m, d)),
                    mlp_out_b=get(p + "mlp.c_proj.bias", (d,)),
                )
            )
        if f"h.{c.n_layers}.ln_1.weight" in tensors:
            raise CheckpointError(f"checkpoint holds more than n_layers={c.n_layers} blocks")
        W_E = get("wte.weight", (v, d))
        if "lm_head.weight" in tensors:
            W_U = _freeze(get("lm_head.weight", (v, d)).T)
        else:
            W_U = W_E.T  # tied embeddings
        return cls(
            config=c,
            W_E=W_E,
            W_pos=get("wpe.weight", (c.n_ctx, d)),
            layers=tuple(layers),
            ln_f_w=get("ln_f.weight", (d,)),
            ln_f_b=get("ln_f.bias", (d,)),
            W_U=W_U,
            tokenizer=tokenizer,
            fingerprint=fingerprint,
        )

    # -- tokenizer passthrough

    def encode(self, text: str) -> list[int]:
        if self.tokenizer is None:
            raise ConfigError("model bundle has no tokenizer")
        return self.tokenizer.encode(text)

    def decode(self, ids) -> str:
        if self.tokenizer is None:
            raise ConfigError("model bundle has no tokenizer")
        return self.tokenizer.decode(ids)

    # -- inference

    @property
    def forward_count(self) -> int:
        """Number of forward passes run against this bundle (diagnostic only)."""
        return self._counter[0]

    def reset_forward_count(self):
        with self._lock:
            self._counter[0] = 0

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size == 0:
            raise ConfigError("forward needs at least one token")
        if tokens.size > self.config.n_ctx:
            raise ConfigError(f"sequence of {tokens.size} tokens exceeds n_ctx={self.config.n_ctx}")
        bad = (tokens < 0) | (tokens >= self.config.d_vocab)
        if bad.any():
            raise ConfigError(f"token id {int(tokens[bad][0])} outside vocabulary range [0, {self.config.d_vocab})")
        return tokens

    def _check_site(self, site: HookSite):
        if site.layer >= self.config.n_layers:
            raise ConfigError(f"hook site {site} is out of range for a {self.config.n_layers}-layer model")

    def forward(
        self,
        tokens: Sequence[int],
        interventions: Iterable[Intervention] = (),
        read_sites: Iterable[HookSite] = (),
        start: Optional[tuple[HookSite, np.ndarray]] = None,
    ) -> tuple[np.ndarray, dict[HookSite, np.ndarray]]:
        """Run the model once.

        Returns the final-position logits ``(d_vocab,)`` and a cache mapping
        each requested site to its ``(seq_len, d_model)`` residual, recorded
        after any intervention at that site was applied.

        ``start=(site, residual)`` resumes from a residual previously cached
        at ``site`` by an un-intervened pass over the same tokens, skipping
        the computation before it. Interventions and reads must then lie at
        or after ``site``. The result is bit-identical to a full pass.
        """
        tokens = self._check_tokens(tokens)
        cfg = self.config
        by_site: dict[HookSite, Intervention] = {}
        for iv in interventions:
            self._check_site(iv.site)
            if iv.site in by_site:
                raise ConfigError(f"duplicate intervention at site {iv.site}")
            if iv.direction.shape != (cfg.d_model,):
                raise ConfigError(
                    f"intervention direction has length {iv.direction.shape[0]}, expected d_model={cfg.d_model}"
                )
            by_site[iv.site] = iv
        wanted = set(read_sites)
        for s in wanted:
            self._check_site(s)
        cache: dict[HookSite, np.ndarray] = {}

        def hook(x, layer, kind):
            site = HookSite(layer, kind)
            iv = by_site.get(site)
            if iv is not None:
                delta = iv.delta(x.dtype)
                x = x.copy()
                if iv.token_scope is TokenScope.ALL_TOKENS:
                    x += delta
                else:
                    x[-1] += delta
            if site in wanted:
                cache[site] = x.copy()
            return x

        T = tokens.size
        if start is None:
            s = 0
            x = self.W_E[tokens] + self.W_pos[:T]
        else:
            start_site, x = start
            self._check_site(start_site)
            x = np.asarray(x)
            if x.shape != (T, cfg.d_model) or x.dtype != np.float32:
                raise ConfigError(f"start residual must be float32 of shape ({T}, {cfg.d_model})")
            s = _stage(start_site)
            early = [site for site in list(by_site) + list(wanted) if _stage(site) < s]
            if early:
                raise ConfigError(f"site {early[0]} lies before the start site {start_site}")
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        # stage 3i, 3i+1, 3i+2 = pre, mid, post hooks of layer i
        for i, lw in enumerate(self.layers):
            if 3 * i + 2 < s:
                continue
            if 3 * i >= s:
                x = hook(x, i, SiteKind.RESID_PRE)
            if 3 * i + 1 > s:
                x = x + self._attention(layer_norm(x, lw.ln1_w, lw.ln1_b, cfg.layer_norm_eps), lw, mask)
            if 3 * i + 1 >= s:
                x = hook(x, i, SiteKind.RESID_MID)
            if 3 * i + 2 > s:
                h = layer_norm(x, lw.ln2_w, lw.ln2_b, cfg.layer_norm_eps)
                x = x + (gelu_tanh(h @ lw.mlp_in_w + lw.mlp_in_b) @ lw.mlp_out_w + lw.mlp_out_b)
            x = hook(x, i, SiteKind.RESID_POST)
        logits = self.logit_lens(x[-1])
        with self._lock:
            self._counter[0] += 1
        return logits, cache

    def _attention(self, h: np.ndarray, lw: LayerWeights, mask: np.ndarray) -> np.ndarray:
        cfg = self.config
        T = h.shape[0]
        qkv = h @ lw.attn_w + lw.attn_b
        q, k, v = np.split(qkv, 3, axis=-1)
        # (heads, T, d_head)
        q = q.reshape(T, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
        k = k.reshape(T, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
        v = v.reshape(T, cfg.n_heads, cfg.d_head).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) / np.float32(math.sqrt(cfg.d_head))
        scores = np.where(mask, np.float32(-np.inf), scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        z = (weights @ v).transpose(1, 0, 2).reshape(T, cfg.d_model)
        return z @ lw.attn_proj_w + lw.attn_proj_b

    def logit_lens(self, residual: np.ndarray) -> np.ndarray:
        """Decode a residual vector (or stack of them) through ``ln_f`` and the unembedding."""
        residual = np.asarray(residual, dtype=np.float32)
        if residual.shape[-1] != self.config.d_model:
            raise ConfigError(f"residual has width {residual.shape[-1]}, expected d_model={self.config.d_model}")
        if not np.all(np.isfinite(residual)):
            raise NumericError("logit lens received a non-finite residual")
        normed = layer_norm(residual, self.ln_f_w, self.ln_f_b, self.config.layer_norm_eps)
        return normed @ self.W_U


def logit_lens(residual: np.ndarray, model: ModelBundle) -> np.ndarray:
    return model.logit_lens(residual)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_model(weights_path, config_path, vocab_path=None, merges_path=None) -> ModelBundle:
    """Load a GPT-2 checkpoint (safetensors + ``config.json``) and its tokenizer.

    The tokenizer paths may be omitted for models used only with raw token ids.
    """
    config = ModelConfig.from_json(config_path)
    weights_path = Path(weights_path)
    tensors = read_safetensors(weights_path)
    tokenizer = None
    if vocab_path is not None or merges_path is not None:
        if vocab_path is None or merges_path is None:
            raise CheckpointError("vocab and merges files must be given together")
        tokenizer = BPETokenizer.from_files(vocab_path, merges_path)
        if tokenizer.vocab_size > config.d_vocab:
            raise CheckpointError(
                f"tokenizer has {tokenizer.vocab_size} entries but the model vocabulary is {config.d_vocab}"
            )
    h = hashlib.sha256()
    h.update(_sha256_file(weights_path).encode())
    h.update(_sha256_file(Path(config_path)).encode())
    return ModelBundle.from_state_dict(config, tensors, tokenizer=tokenizer, fingerprint=h.hexdigest())


def load_model_dir(model_dir) -> ModelBundle:
    """Load the Hugging Face GPT-2 directory layout.

    Expects ``model.safetensors``, ``config.json``, ``vocab.json`` and
    ``merges.txt``; tokenizer files are optional.
    """
    model_dir = Path(model_dir)
    vocab, merges = model_dir / "vocab.json", model_dir / "merges.txt"
    has_tok = vocab.is_file() and merges.is_file()
    return load_model(
        model_dir / "model.safetensors",
        model_dir / "config.json",
        vocab if has_tok else None,
        merges if has_tok else None,
    )
