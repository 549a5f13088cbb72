"""Desk-scale synthetic training that exercises the MoE block end to end.

The task draws token sequences from a handful of latent unigram clusters, so
routing has structure to discover. The model is deliberately tiny: embedding,
a plain linear mixing layer standing in for attention, one MoE block (both
with residual connections), and a linear read-out head. Training is plain
momentum SGD with a manual backward pass through the whole stack; given a
seed, runs are bit-deterministic.

Reported loss is mean next-token cross-entropy in nats; the summary also
converts it to bits/token (ce / ln 2). That unit is a stand-in for corpus
bits-per-character metrics and is labeled distinctly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .kernel import (
    BlockParams,
    KernelError,
    balance_stats_from_cache,
    init_block_params,
    moe_batch_backward,
    moe_batch_forward,
    named_gradients,
    named_parameters,
    replace_parameter,
    softmax_cross_entropy,
)


class ToyConfigError(ValueError):
    """Invalid toy-training configuration."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``step`` names when."""

    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class ToyTask:
    """Synthetic token stream drawn from latent unigram clusters."""

    vocab: int = 64
    seq_len: int = 17
    clusters: int = 4
    seed: int = 0
    concentration: float = 1.0  # sharper cluster distributions for larger values

    def __post_init__(self) -> None:
        if self.clusters < 2:
            raise ToyConfigError(f"clusters must be >= 2, got {self.clusters}")
        if self.vocab < 2 or self.seq_len < 2:
            raise ToyConfigError("vocab and seq_len must be >= 2")

    def cluster_distributions(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        logits = rng.normal(0.0, self.concentration, size=(self.clusters, self.vocab))
        exp = np.exp(logits - logits.max(axis=1, keepdims=True))
        return exp / exp.sum(axis=1, keepdims=True)

    def sample_batch(self, rng: np.random.Generator, sequences: int,
                     distributions: np.ndarray) -> np.ndarray:
        which = rng.integers(0, self.clusters, size=sequences)
        batch = np.empty((sequences, self.seq_len), dtype=np.int64)
        for row, cluster in enumerate(which):
            batch[row] = rng.choice(self.vocab, size=self.seq_len,
                                    p=distributions[cluster])
        return batch


@dataclass(frozen=True)
class ToyTrainConfig:
    task: ToyTask = field(default_factory=ToyTask)
    model_dim: int = 32
    expert_dim: int = 16
    shared_dim: int = 16
    experts: int = 8
    top_k: int = 2
    normalized: bool = False
    lam: float = 0.01
    lr: float = 0.2
    momentum: float = 0.9
    batch_sequences: int = 32
    steps: int = 2000
    seed: int = 0
    init_scale: float = 0.02

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ToyConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lam < 0:
            raise ToyConfigError(f"lam must be >= 0, got {self.lam}")
        if not 1 <= self.top_k <= self.experts:
            raise ToyConfigError("need 1 <= top_k <= experts")
        if self.normalized and self.top_k < 2:
            raise ToyConfigError("normalized gating requires top_k >= 2")


@dataclass(frozen=True)
class StepRecord:
    step: int
    ce_loss: float
    balance_loss: float
    expert_load_histogram: tuple[int, ...]
    load_cv: float

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "step": self.step, "ce_loss": self.ce_loss,
            "balance_loss": self.balance_loss,
            "expert_load_histogram": list(self.expert_load_histogram),
            "load_cv": self.load_cv,
        }


@dataclass(frozen=True)
class TrainReport:
    config: ToyTrainConfig
    steps: tuple[StepRecord, ...]
    optimizer: str

    @property
    def initial(self) -> StepRecord:
        return self.steps[0]

    @property
    def final(self) -> StepRecord:
        return self.steps[-1]

    @property
    def final_bits_per_token(self) -> float:
        return self.final.ce_loss / math.log(2)

    def mean_balance_loss(self) -> float:
        return float(np.mean([s.balance_loss for s in self.steps]))

    def summary_dict(self) -> dict[str, Any]:
        return {
            "optimizer": self.optimizer,
            "steps": len(self.steps) - 1,
            "initial_ce_loss": self.initial.ce_loss,
            "final_ce_loss": self.final.ce_loss,
            "final_bits_per_token": self.final_bits_per_token,
            "final_balance_loss": self.final.balance_loss,
            "mean_balance_loss": self.mean_balance_loss(),
            "final_load_cv": self.final.load_cv,
            "final_load_histogram": list(self.final.expert_load_histogram),
            "lam": self.config.lam,
            "seed": self.config.seed,
        }

    def write(self, out_dir: str | Path) -> None:
        """JSON-lines step series plus a summary JSON."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "steps.jsonl", "w") as fh:
            for record in self.steps:
                fh.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
        (out / "summary.json").write_text(
            json.dumps(self.summary_dict(), sort_keys=True, indent=2) + "\n")


@dataclass
class _ToyModel:
    embed: np.ndarray    # (vocab, model_dim)
    mix: np.ndarray      # (model_dim, model_dim)
    block: BlockParams
    head: np.ndarray     # (vocab, model_dim)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return ([("embed", self.embed), ("mix", self.mix)]
                + [(f"block.{n}", a) for n, a in named_parameters(self.block)]
                + [("head", self.head)])


def _init_model(config: ToyTrainConfig, rng: np.random.Generator) -> _ToyModel:
    scale = config.init_scale
    return _ToyModel(
        embed=rng.normal(0.0, scale, size=(config.task.vocab, config.model_dim)),
        mix=rng.normal(0.0, scale, size=(config.model_dim, config.model_dim)),
        block=init_block_params(rng, config.experts, config.top_k, config.model_dim,
                                config.expert_dim, config.shared_dim,
                                config.normalized, scale=1.0),
        head=rng.normal(0.0, scale, size=(config.task.vocab, config.model_dim)),
    )


def _forward_backward(model: _ToyModel, inputs: np.ndarray, targets: np.ndarray,
                      lam: float) -> tuple[float, float, np.ndarray,
                                           dict[str, np.ndarray]]:
    """One pass over flattened (input, next-token) pairs; returns losses,
    the routed-load histogram, and gradients for every model parameter."""
    n = inputs.shape[0]
    h = model.embed[inputs]
    m = h + h @ model.mix.T
    y, cache = moe_batch_forward(model.block, m)
    z = m + y
    logits = z @ model.head.T
    ce, d_logits = softmax_cross_entropy(logits, targets)
    stats = balance_stats_from_cache(cache)

    d_head = d_logits.T @ z
    dz = d_logits @ model.head
    extra = lam * model.block.expert_count * stats.load_fraction / n if lam else None
    block_grads = moe_batch_backward(model.block, cache, dz, extra_score_grad=extra)
    dm = dz + block_grads.x
    d_mix = dm.T @ h
    dh = dm + dm @ model.mix
    d_embed = np.zeros_like(model.embed)
    np.add.at(d_embed, inputs, dh)

    grads = {"embed": d_embed, "mix": d_mix, "head": d_head}
    for name, grad in named_gradients(model.block, block_grads):
        grads[f"block.{name}"] = grad
    histogram = cache.mask.sum(axis=0)
    return ce, stats.balance_loss, histogram, grads


def _load_cv(histogram: np.ndarray) -> float:
    mean = histogram.mean()
    if mean == 0:
        return 0.0
    return float(histogram.std() / mean)


def run_toy_training(config: ToyTrainConfig) -> TrainReport:
    """Train the toy stack; deterministic given the config seed.

    The report holds one record for the initial evaluation batch plus one per
    optimizer step (losses measured on the step's batch before the update).
    Raises DivergenceError with the offending step if the loss leaves the
    reals.
    """
    rng = np.random.default_rng(config.seed)
    distributions = config.task.cluster_distributions()
    model = _init_model(config, rng)
    velocity = {name: np.zeros_like(arr) for name, arr in model.parameters()}
    records: list[StepRecord] = []

    def sample() -> tuple[np.ndarray, np.ndarray]:
        batch = config.task.sample_batch(rng, config.batch_sequences, distributions)
        return batch[:, :-1].ravel(), batch[:, 1:].ravel()

    inputs, targets = sample()
    ce, bal, hist, _ = _forward_backward(model, inputs, targets, config.lam)
    records.append(StepRecord(step=0, ce_loss=ce, balance_loss=bal,
                              expert_load_histogram=tuple(int(c) for c in hist),
                              load_cv=_load_cv(hist)))

    for step in range(1, config.steps + 1):
        inputs, targets = sample()
        try:
            ce, bal, hist, grads = _forward_backward(model, inputs, targets,
                                                     config.lam)
        except KernelError as exc:  # exploded weights surface as non-finite inputs
            raise DivergenceError(step) from exc
        if not (math.isfinite(ce) and math.isfinite(bal)):
            raise DivergenceError(step)
        new_block = model.block
        for name, arr in model.parameters():
            v = velocity[name]
            v *= config.momentum
            v += grads[name]
            if name.startswith("block."):
                updated = dict(named_parameters(new_block))[name.split(".", 1)[1]] \
                    - config.lr * v
                new_block = replace_parameter(new_block, name.split(".", 1)[1], updated)
            else:
                arr -= config.lr * v
        model.block = new_block
        records.append(StepRecord(step=step, ce_loss=ce, balance_loss=bal,
                                  expert_load_histogram=tuple(int(c) for c in hist),
                                  load_cv=_load_cv(hist)))
    return TrainReport(config=config, steps=tuple(records), optimizer="sgd-momentum")


@dataclass(frozen=True)
class GatingComparison:
    non_normalized: TrainReport
    normalized: TrainReport

    def mean_balance_losses(self) -> dict[str, float]:
        return {
            "non_normalized": self.non_normalized.mean_balance_loss(),
            "normalized": self.normalized.mean_balance_loss(),
        }

    def summary_dict(self) -> dict[str, Any]:
        return {
            "mean_balance_loss": self.mean_balance_losses(),
            "final_ce_loss": {
                "non_normalized": self.non_normalized.final.ce_loss,
                "normalized": self.normalized.final.ce_loss,
            },
        }


def compare_gating(config: ToyTrainConfig) -> GatingComparison:
    """Train normalized and non-normalized variants on identical seeds/data."""
    if config.top_k < 2:
        raise ToyConfigError("gating comparison requires top_k >= 2")
    plain = run_toy_training(dataclasses.replace(config, normalized=False))
    normed = run_toy_training(dataclasses.replace(config, normalized=True))
    return GatingComparison(non_normalized=plain, normalized=normed)
