"""Continuous activation-steering diagnostics for GPT-2 style models."""

from .dataset import BehaviorDataset, ContrastivePair, load_dataset, render_eval_prompt, render_pair
from .errors import CheckpointError, ConfigError, DatasetError, NumericError, SteerSweepError, TokenizationError
from .metrics import MetricsRow, compute_point, kl_divergence, log_softmax, token_rank
from .model import HookSite, Intervention, ModelBundle, ModelConfig, SiteKind, TokenScope, load_model, load_model_dir, logit_lens
from .sweep import BiasResponseCurve, SweepConfig, alpha_grid, detect_tipping, layer_pairs, run_sweep
from .tokenizer import BPETokenizer
from .vectors import ControlVector, SteeringVector, build_steering_vector, build_steering_vectors, make_control

__version__ = "0.1.0"
