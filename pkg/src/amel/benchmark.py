"""Desk-scale benchmark presets shared by the acceptance suite, the
experiment scripts and the CLI examples.

The benchmark builds K well-separated source domains plus one target cloned
from a designated source (style distance ``delta``), trains one of the three
component-ablation variants on the sources, and evaluates on the target.
Learning rates here are tuned for the small synthetic setup and deliberately
differ from the TrainConfig reference defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, DomainRelevanceKnob, make_benchmark
from .evaluation import EvalReport, evaluate_backbone_only, evaluate_model
from .model import AmelModel, ModelConfig
from .training import TrainConfig, train

VARIANTS = ("baseline", "dse_dea", "full")


@dataclass
class BenchmarkConfig:
    k_sources: int = 3
    n_live: int = 1000
    n_spoof: int = 1000
    source_index: int = 0
    delta: float = 0.0
    input_hw: int = 32
    channels: int = 32
    depth_map_hw: int = 16
    iters: int = 300
    batch_per_domain: int = 8
    beta: float = 1e-3
    gamma: float = 1e-3
    lambda_con: float = 0.1


def benchmark_dataset(bench: BenchmarkConfig, seed: int) -> Dataset:
    """Sources plus target; the target is the last domain."""
    return make_benchmark(
        bench.k_sources,
        DomainRelevanceKnob(source_index=bench.source_index, delta=bench.delta),
        n_live=bench.n_live,
        n_spoof=bench.n_spoof,
        image_hw=bench.input_hw,
        depth_hw=bench.depth_map_hw,
        seed=seed,
    )


def model_config(bench: BenchmarkConfig) -> ModelConfig:
    return ModelConfig(
        input_hw=bench.input_hw,
        channels=bench.channels,
        num_domains=bench.k_sources,
        depth_map_hw=bench.depth_map_hw,
    )


def train_config(bench: BenchmarkConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        beta=bench.beta,
        gamma=bench.gamma,
        lambda_con=bench.lambda_con,
        batch_per_domain=bench.batch_per_domain,
        max_iters=bench.iters,
        seed=seed,
    )


def run_variant(
    variant: str,
    seed: int,
    bench: BenchmarkConfig | None = None,
    dataset: Dataset | None = None,
    strategies: Sequence[str] = (),
) -> tuple[AmelModel, EvalReport]:
    """Train one ablation variant on the benchmark sources and evaluate on
    the target domain. The seed drives data generation, model init and the
    episodic schedule together."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown benchmark variant {variant!r}")
    bench = bench or BenchmarkConfig()
    if dataset is None:
        dataset = benchmark_dataset(bench, seed)
    sources = dataset.subset(range(bench.k_sources))
    model = AmelModel(model_config(bench), np.random.default_rng(seed + 1_000_003))
    train(model, sources, train_config(bench, seed), mode=variant)
    images, labels, _ = dataset.domain_arrays(bench.k_sources)
    if variant == "baseline":
        report = evaluate_backbone_only(model, images, labels)
    else:
        report = evaluate_model(model, images, labels, strategies=strategies)
    return model, report
