"""
Configuration for the Polychromic PPO toolkit.

Defaults come from the process environment (a `.env` file is honoured),
training settings from JSON documents, and every field can be overridden
from the command line.

Environment variables:
    POLYPPO_RUNS_DIR    output root for training / evaluation runs
    POLYPPO_METRICS_DB  SQLite database browsed by the dashboard
    POLYPPO_SEED        root seed used when none is given
    POLYPPO_WORKERS     rollout worker processes (1 = serial)
"""

import json
import os
from dataclasses import dataclass, fields, asdict, replace
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

RUNS_DIR = os.getenv("POLYPPO_RUNS_DIR", "runs")
METRICS_DB = os.getenv("POLYPPO_METRICS_DB", "polyppo_metrics.db")
DEFAULT_SEED = int(os.getenv("POLYPPO_SEED", "0"))
DEFAULT_WORKERS = int(os.getenv("POLYPPO_WORKERS", "1"))

METHODS = ("ppo", "vine_ppo", "poly_ppo", "reinforce")
ENV_KINDS = ("rooms", "triangle")
KL_SWEEP = (0.005, 0.01, 0.05, 0.1)

# Success rate a pretrained rooms policy is calibrated into
PRETRAIN_SUCCESS_BAND = (0.2, 0.4)

# Polychrome window per environment kind
DEFAULT_WINDOW = {"rooms": 5, "triangle": 0}


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass
class TrainConfig:
    """Fine-tuning hyperparameters (defaults are the Polychromic PPO table)."""

    ppo_epochs: int = 2
    minibatch_size: int = 64
    gamma: float = 1.0
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    actor_lr: float = 1e-5
    critic_lr: float = 1e-4
    value_coef: float = 0.5
    kl_coef: float = 0.01
    max_grad_norm: float = 0.5
    temperature: float | None = None  # None -> keep the checkpoint's
    num_vines: int = 8          # N
    set_size: int = 4           # n
    num_sets: int = 4           # M
    rollout_states: int = 2     # p
    window: int | None = None   # W; None -> per-environment default
    budget: int = 136           # B
    lambda_ucb: float = 0.0
    ucb_schedule: str = "global"
    method: str = "poly_ppo"
    env_kind: str = "rooms"
    rollout_criterion: str = "equal_spacing"
    optimizer: str = "sgd"
    iterations: int = 300
    seed: int = DEFAULT_SEED
    workers: int = DEFAULT_WORKERS
    checkpoint_every: int = 50

    @property
    def polychrome_window(self) -> int:
        if self.window is not None:
            return self.window
        return DEFAULT_WINDOW[self.env_kind]

    @property
    def use_vines(self) -> bool:
        return self.method in ("vine_ppo", "poly_ppo")

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method '{self.method}'. Choose one of {METHODS}")
        if self.env_kind not in ENV_KINDS:
            raise ConfigError(f"Unknown env_kind '{self.env_kind}'. Choose one of {ENV_KINDS}")
        if self.num_vines <= self.set_size:
            raise ConfigError(f"N must exceed n (got N={self.num_vines}, n={self.set_size})")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.clip_epsilon <= 0:
            raise ConfigError(f"clip epsilon must be positive, got {self.clip_epsilon}")
        if self.num_sets < 2:
            raise ConfigError("at least two sets are needed for the Monte Carlo baseline")
        if self.polychrome_window < 0:
            raise ConfigError(f"window must be >= 0, got {self.polychrome_window}")
        if self.ucb_schedule not in ("global", "per_iteration"):
            raise ConfigError(f"Unknown UCB schedule '{self.ucb_schedule}'")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"Unknown optimizer '{self.optimizer}'")
        if self.temperature is not None and self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **overrides) -> "TrainConfig":
        """Return a copy with the non-None overrides applied."""
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"Unknown config fields: {sorted(unknown)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def load_train_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    """Load a TrainConfig from a JSON document, then apply overrides."""
    config = TrainConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path) as f:
            document = json.load(f)
        config = config.with_overrides(**document)
    return config.with_overrides(**overrides).validate()


def save_train_config(config: TrainConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
