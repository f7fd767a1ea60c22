"""Experiment configuration.

Flat `key = value` text files; '#' starts a comment. Unknown or duplicate
keys fail fast. Every key has a default, so a config file only states
what it changes.
"""

import sys
from dataclasses import dataclass, fields

from fedfair.errors import ConfigError

STRATEGIES = (
    "fedavg",
    "finp_client_only",
    "finp_server_pca",
    "finp_server_ala",
    "finp_full_pca",
    "finp_full_ala",
)

# Strategies whose clients train with the rank-gated penalty.
CLIENT_REGULARIZED = ("finp_client_only", "finp_full_pca", "finp_full_ala")
PCA_STRATEGIES = ("finp_server_pca", "finp_full_pca")
ALA_STRATEGIES = ("finp_server_ala", "finp_full_ala")


@dataclass
class ExperimentConfig:
    seed: int = 0
    rounds: int = 5
    clients: int = 4
    strategy: str = "fedavg"
    beta: float = 0.0
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.001
    optimizer: str = "adam"
    power_iters: int = 5
    alpha: float = 0.5
    dataset: str = "synthetic"
    classes: int = 4
    dim: int = 16
    n_per_class: int = 400
    separation: float = 2.0
    csv_path: str = ""
    csv_paths: str = ""
    partition: str = "dirichlet"
    test_fraction: float = 0.3
    hidden: str = "32"
    activation: str = "relu"
    n_per_client: int = 50
    convergence_delta: float = 0.01
    curvature_iters: int = 20
    curvature_tol: float = 1e-4
    curvature_probes: int = 100
    curvature_subsample: int = 256
    save_checkpoints: bool = False
    workers: int = 1
    force_uniform_weights: bool = False
    force_equal_rho: bool = False
    sia_random_tiebreak: bool = False

    def __post_init__(self):
        self.validate()

    # -- derived views --------------------------------------------------

    @property
    def hidden_sizes(self):
        if not self.hidden.strip():
            return []
        try:
            return [int(h) for h in self.hidden.split(",")]
        except ValueError as exc:
            raise ConfigError(f"hidden must be comma-separated ints, got {self.hidden!r}") from exc

    @property
    def client_regularized(self) -> bool:
        return self.strategy in CLIENT_REGULARIZED

    @property
    def effective_beta(self) -> float:
        return self.beta if self.client_regularized else 0.0

    @property
    def aggregation(self) -> str:
        if self.strategy in PCA_STRATEGIES:
            return "pca"
        if self.strategy in ALA_STRATEGIES:
            return "ala"
        return "fedavg"

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.clients < 2:
            raise ConfigError("clients must be >= 2")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.dataset not in ("synthetic", "csv", "csv_per_client"):
            raise ConfigError(f"dataset must be synthetic|csv|csv_per_client, got {self.dataset!r}")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigError("dataset=csv requires csv_path")
        if self.dataset == "csv_per_client" and not self.csv_paths:
            raise ConfigError("dataset=csv_per_client requires csv_paths")
        if self.partition not in ("dirichlet", "equal"):
            raise ConfigError(f"partition must be dirichlet|equal, got {self.partition!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("activation must be relu|tanh")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam|sgd")
        if self.n_per_client < 0:
            raise ConfigError("n_per_client must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for name in ("local_epochs", "batch_size", "power_iters", "curvature_iters",
                     "curvature_probes", "curvature_subsample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0 or self.curvature_tol <= 0 or self.convergence_delta <= 0:
            raise ConfigError("lr, curvature_tol, convergence_delta must be > 0")
        self.hidden_sizes  # raises on malformed value
        if self.beta != 0.0 and not self.client_regularized:
            print(
                f"warning: beta={self.beta} is ignored under strategy={self.strategy}",
                file=sys.stderr,
            )


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name: str, value: str, target_type):
    try:
        if target_type is bool:
            return _BOOL[value.strip().lower()]
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        return value
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    type_map = {"int": int, "float": float, "str": str, "bool": bool}
    field_types = {
        f.name: (type_map[f.type] if isinstance(f.type, str) else f.type)
        for f in fields(ExperimentConfig)
    }
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in field_types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = _coerce(key, value, field_types[key])
    if overrides:
        for key, value in overrides.items():
            if key not in field_types:
                raise ConfigError(f"unknown config key {key!r}")
            seen[key] = value
    return ExperimentConfig(**seen)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, overrides)


def config_echo_text(cfg: ExperimentConfig) -> str:
    """Resolved config as config-file text.

    workers is excluded: it must not influence any output, and the echo
    participates in deterministic-output comparisons.
    """
    lines = []
    for f in fields(ExperimentConfig):
        if f.name == "workers":
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
