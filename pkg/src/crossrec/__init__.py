"""Shared-account cross-domain sequential recommendation with a
reinforcement-learned transfer filter.

The library has three layers: a basic cross-domain recommender that
identifies latent users behind a shared account (``recommender``), a
hierarchical policy that prunes noisy items from sequences transferred
between domains (``domain_filter``), and a three-phase trainer gluing them
together (``training``). ``data`` loads and synthesizes corpora,
``evaluation`` scores held-out targets with HR@N / NDCG@N, and ``cli``
exposes the whole pipeline as a command-line tool.
"""

from .config import GeneratorConfig, TrainConfig
from .data import (AccountSequence, Catalog, Dataset, TrainingInstance,
                   build_instances, generate_synthetic_corpus, load_corpus,
                   save_corpus)
from .domain_filter import EpisodeTrace, PolicyParams, sample_episode
from .evaluation import EvalResult, evaluate
from .recommender import ModelParams
from .training import Trainer

__all__ = [
    "AccountSequence", "Catalog", "Dataset", "EpisodeTrace", "EvalResult",
    "GeneratorConfig", "ModelParams", "PolicyParams", "TrainConfig",
    "Trainer", "TrainingInstance", "build_instances",
    "generate_synthetic_corpus", "load_corpus", "save_corpus",
    "sample_episode", "evaluate",
]
