"""Closed-form FLOPs bills per strategy, computed without training.

Every figure here is produced by walking the same step schedule the trainer
walks (batch sizes, tail batches, sampled pairs), so predictions reconcile
with measured bills to the integer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import connectors
from . import hypernet as hn
from . import trainer as tr
from .embeddings import ModelZoo
from .errors import ConfigurationError
from .search import cgs_subset, random_trial_pairs, unit1_pair


def direct_bill(zoo: ModelZoo, layouts: dict, config: tr.TrainConfig, train_count: int, k: int) -> int:
    """Bill of training pair ``k`` alone for the full schedule."""
    cfg = config.replace(model_batch=1, mode="direct-pair")
    return tr.predicted_flops(zoo, layouts, cfg, train_count, pairs=[k])


def hyma_bill(zoo: ModelZoo, layouts: dict, config: tr.TrainConfig, train_count: int,
              hyper_config: hn.HyperNetConfig) -> int:
    return tr.predicted_flops(zoo, layouts, config.replace(mode="hypernet"), train_count,
                              hyper_config=hyper_config)


def hyma_exposure(num_pairs: int, model_batch: int, epochs: int, train_count: int) -> dict:
    """Samples seen by each pair under model mini-batching.

    Every step shows one data batch to ``model_batch`` of the ``num_pairs``
    pairs, so each pair sees ``total / (num_pairs / model_batch)`` samples.
    """
    total = epochs * train_count
    return {"total_samples": total, "reduction": num_pairs / model_batch,
            "per_pair_samples": total * model_batch / num_pairs}


def predict_bills(zoo: ModelZoo, layouts: dict, config: tr.TrainConfig, train_count: int, *,
                  hyma_config: tr.TrainConfig | None = None,
                  hyper_config: hn.HyperNetConfig | None = None,
                  random_trials: int = 5, cgs_fraction: float = 1 / 3,
                  autopair_budget: int | None = None) -> dict:
    """Predicted bill of every strategy.

    ``config`` drives the direct-training strategies and ``hyma_config``
    (default: ``config``) the hypernetwork. Strategies whose bill depends on
    an outcome (Best Guess, Ask) report the per-pair range instead.
    """
    per_pair = {k: direct_bill(zoo, layouts, config, train_count, k) for k in range(zoo.num_pairs)}
    out = {"per_pair": per_pair, "grid": sum(per_pair.values())}
    out["best_guess_range"] = (min(per_pair.values()), max(per_pair.values()))
    out["ask_range"] = out["best_guess_range"]
    out["random"] = sum(per_pair[k] for k in random_trial_pairs(zoo.num_pairs, random_trials, config.seed))
    try:
        out["unit1"] = per_pair[unit1_pair(zoo)]
    except ConfigurationError:
        out["unit1"] = None
    subset = len(cgs_subset(np.arange(train_count), cgs_fraction, config.seed))
    cgs_cfg = config.replace(batch_size=min(config.batch_size, subset))
    out["cgs"] = sum(direct_bill(zoo, layouts, cgs_cfg, subset, k) for k in range(zoo.num_pairs))
    if hyper_config is not None:
        hcfg = hyma_config or config
        out["hyma"] = hyma_bill(zoo, layouts, hcfg, train_count, hyper_config)
        out["hyma_exposure"] = hyma_exposure(zoo.num_pairs, hcfg.model_batch, hcfg.epochs, train_count)
    out["autopair"] = autopair_budget if autopair_budget is not None else out.get("hyma")
    return out


# ---------------------------------------------------------------------------
# worked example at the original training scale


@dataclass(frozen=True)
class ScaleSetup:
    """Three image encoders, one text encoder, MLP1 connectors, ten epochs."""

    samples: int = 558_128
    epochs: int = 10
    num_pairs: int = 3
    model_batch: int = 1
    direct_batch: int = 2 ** 14
    hyma_batch: int = 2 ** 9
    in_dim: int = 384
    out_dim: int = 384
    hidden: int = 1024


def per_sample_direct(setup: ScaleSetup) -> float:
    """Connector train-step FLOPs per sample plus the per-sample share of the
    similarity matrix (which grows with the batch)."""
    layout = connectors.make_layout("mlp1", setup.in_dim, setup.out_dim, setup.hidden)
    return (3 * connectors.flops_per_forward(layout, 1)
            + connectors.similarity_flops(setup.direct_batch, setup.out_dim) / setup.direct_batch)


def per_sample_hyma(setup: ScaleSetup, generator_flops_per_sample: float) -> float:
    layout = connectors.make_layout("mlp1", setup.in_dim, setup.out_dim, setup.hidden)
    return (3 * connectors.flops_per_forward(layout, 1)
            + connectors.similarity_flops(setup.hyma_batch, setup.out_dim) / setup.hyma_batch
            + generator_flops_per_sample)


def scale_bills(setup: ScaleSetup, generator_flops_per_sample: float) -> dict:
    """Grid, Best Guess and HYMA bills for the setup (encoder cost excluded)."""
    per_pair_samples = setup.samples * setup.epochs
    best = per_pair_samples * per_sample_direct(setup)
    grid = setup.num_pairs * best
    # each step shows one batch to model_batch pairs: pair-samples shrink by NM / B_m
    hyma = per_pair_samples * setup.model_batch * per_sample_hyma(setup, generator_flops_per_sample)
    return {"grid": grid, "best_guess": best, "hyma": hyma,
            "grid_over_hyma": grid / hyma, "best_guess_over_hyma": best / hyma}


def generator_cost_for_ratio(setup: ScaleSetup, best_guess_over_hyma: float) -> float:
    """Per-sample generator FLOPs at which Best Guess / HYMA hits the target."""
    base = per_sample_hyma(setup, 0.0)
    return per_sample_direct(setup) / (best_guess_over_hyma * setup.model_batch) - base
