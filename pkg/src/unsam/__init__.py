"""Prompt-free multi-domain nuclei segmentation with domain adapters and domain queries."""

from .core import DomainRegistry, ImageSample, RunConfig, TokenGrid, load_config, seed_all
from .data import Dataset, DomainSpec, generate_domain, load_dataset, make_registry, save_dataset
from .pipeline import (UNSAM, TrainState, evaluate, load_checkpoint, predict, save_checkpoint,
                       train_all, train_domain, train_step)

__version__ = "0.1.0"
