"""Configuration: flat ``key=value`` text files mapped onto dataclasses.

One file configures one command. Lines are ``key = value``; blank lines and
``#`` comments are ignored. Unknown keys are errors so that typos in sweep
configs fail loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Bad key, value, or range in a config file."""


@dataclass
class TrainConfig:
    """Hyperparameters for the recommender, the transfer filter, and the
    three-phase training schedule."""

    embed_dim: int = 16            # item/position embedding width
    attn_hidden: int = 16          # attention MLP hidden width
    batch_size: int = 256
    n_negatives: int = 4           # negatives sampled per positive
    lr_pretrain: float = 0.01      # recommender, pretraining phase
    lr_joint: float = 0.0001       # recommender, joint phase
    lr_filter_pretrain: float = 0.05
    lr_filter_joint: float = 0.0001
    soft_update_rate: float = 0.0005   # blend weight for policy soft updates
    dropout: float = 0.1
    n_episode_samples: int = 3     # trajectories sampled per policy-gradient step
    policy_hidden: int = 8         # hidden width of both policy networks
    n_users_a: int = 2             # latent users per account, domain A
    n_users_b: int = 4             # latent users per account, domain B
    attn_smoothing: float = 0.5    # attention normalizer exponent, in [0.1, 1]
    l2_reg: float = 1e-6
    max_seq_len: int = 50
    epochs_pretrain: int = 30
    epochs_filter: int = 10
    epochs_joint: int = 20
    optimizer: str = "adam"        # adam | adagrad
    filter_mode: str = "full"      # full | high_only | low_only | greedy
    greedy_mu1: float = 0.0        # greedy mode: revise when log(prob) < mu1
    greedy_mu2: float = 0.0        # greedy mode: drop item when cosine < mu2
    eval_cutoffs: str = "5,10"
    candidate_mode: str = "full"   # full | sampled
    n_candidates: int = 100        # candidate count for sampled mode
    workers: int = 0               # worker threads for batch prep; 0 = auto
    seed: int = 0

    def validate(self) -> None:
        positive = ["embed_dim", "attn_hidden", "batch_size", "lr_pretrain",
                    "lr_joint", "lr_filter_pretrain", "lr_filter_joint",
                    "policy_hidden", "n_users_a", "n_users_b", "max_seq_len",
                    "n_episode_samples"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.soft_update_rate < 1.0:
            raise ConfigError("soft_update_rate must be in (0, 1)")
        if not 0.1 <= self.attn_smoothing <= 1.0:
            raise ConfigError("attn_smoothing must be in [0.1, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.optimizer not in ("adam", "adagrad"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.filter_mode not in ("full", "high_only", "low_only", "greedy"):
            raise ConfigError(f"unknown filter_mode '{self.filter_mode}'")
        if self.candidate_mode not in ("full", "sampled"):
            raise ConfigError(f"unknown candidate_mode '{self.candidate_mode}'")
        if not self.cutoffs():
            raise ConfigError("eval_cutoffs must list at least one positive integer")

    def cutoffs(self) -> list[int]:
        try:
            ns = [int(tok) for tok in self.eval_cutoffs.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad eval_cutoffs '{self.eval_cutoffs}'") from exc
        if any(n <= 0 for n in ns):
            raise ConfigError("eval_cutoffs must be positive")
        return ns


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic shared-account corpus generator."""

    n_accounts: int = 1000
    users_min: int = 2
    users_max: int = 4
    n_items_a: int = 400
    n_items_b: int = 400
    seq_len_min: int = 16
    seq_len_max: int = 32
    n_topics: int = 20             # catalog partitions per domain
    topics_per_user: int = 1
    cross_correlation: float = 0.9  # P(a user's topics align across domains)
    noise_rate: float = 0.1        # P(an event is drawn off-topic, uniform)
    user_switch_prob: float = 0.2  # P(the active user changes between events)
    seed: int = 0

    def validate(self) -> None:
        if self.n_accounts <= 0:
            raise ConfigError("n_accounts must be positive")
        if not 1 <= self.users_min <= self.users_max:
            raise ConfigError("need 1 <= users_min <= users_max")
        if self.n_items_a <= 0 or self.n_items_b <= 0:
            raise ConfigError("catalog sizes must be positive")
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ConfigError("need 1 <= seq_len_min <= seq_len_max")
        if self.n_topics <= 0 or self.topics_per_user <= 0:
            raise ConfigError("topic counts must be positive")
        if self.topics_per_user > self.n_topics:
            raise ConfigError("topics_per_user cannot exceed n_topics")
        if self.n_topics > min(self.n_items_a, self.n_items_b):
            raise ConfigError("more topics than items")
        if not 0.0 <= self.cross_correlation <= 1.0:
            raise ConfigError("cross_correlation must be in [0, 1]")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must be in [0, 1]")
        if not 0.0 <= self.user_switch_prob <= 1.0:
            raise ConfigError("user_switch_prob must be in [0, 1]")


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for '{name}': {raw!r}") from exc
    raise ConfigError(f"unsupported config field type for '{name}'")


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def load_config(path, cls, overrides: dict[str, str] | None = None):
    """Load config of type ``cls`` from a key=value file, applying overrides
    (already-parsed key/value strings, e.g. from command-line flags) on top.
    """
    kv = parse_kv_text(Path(path).read_text(encoding="utf-8")) if path else {}
    if overrides:
        kv.update(overrides)
    field_types = {f.name: f.type for f in fields(cls)}
    # dataclass field types are strings under `from __future__ import annotations`
    typemap = {"int": int, "float": float, "str": str}
    cfg = cls()
    for key, raw in kv.items():
        if key not in field_types:
            raise ConfigError(f"unknown config key '{key}'")
        typ = field_types[key]
        typ = typemap.get(typ, typ) if isinstance(typ, str) else typ
        setattr(cfg, key, _coerce(key, raw, typ))
    cfg.validate()
    return cfg


def dump_config(cfg) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = cls(**d)
    cfg.validate()
    return cfg
