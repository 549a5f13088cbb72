"""Closed-form parameter and FLOP accounting for dense and MoE transformers.

All counts follow the non-vocabulary convention: embeddings, norm scales and
router weights are excluded. Per-token forward cost uses the linear-plus-
attention approximation ``2 * active_params + 4 * model_dim * seq_len * layers``
and training cost is three forward passes. Parameter counts and FLOP totals
are computed in exact (arbitrary-width) integer arithmetic; ratios are floats.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

ARRANGEMENTS = ("full", "one_dense", "interleave")


class ShapeError(ValueError):
    """A shape or budget violates one of its structural invariants."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeError(message)


@dataclass(frozen=True)
class DenseShape:
    """Dense transformer shape; every layer is attention plus one FFN."""

    layers: int
    model_dim: int
    ffn_dim: int
    heads: int
    head_dim: int
    seq_len: int = 2048

    def __post_init__(self) -> None:
        _require(self.layers >= 1, f"layers must be >= 1, got {self.layers}")
        _require(self.model_dim >= 1, f"model_dim must be >= 1, got {self.model_dim}")
        _require(self.ffn_dim >= 1, f"ffn_dim must be >= 1, got {self.ffn_dim}")
        _require(self.seq_len >= 1, f"seq_len must be >= 1, got {self.seq_len}")
        _require(self.heads >= 1 and self.head_dim >= 1,
                 f"heads and head_dim must be >= 1, got {self.heads}, {self.head_dim}")
        _require(self.heads * self.head_dim == self.model_dim,
                 f"heads * head_dim must equal model_dim: "
                 f"{self.heads} * {self.head_dim} != {self.model_dim}")

    @property
    def ffn_ratio(self) -> float:
        """FFN width over model width (alpha)."""
        return self.ffn_dim / self.model_dim

    @property
    def seq_ratio(self) -> float:
        """Sequence length over model width (gamma)."""
        return self.seq_len / self.model_dim

    @property
    def aspect_ratio(self) -> float:
        """Model width over depth (zeta)."""
        return self.model_dim / self.layers


@dataclass(frozen=True)
class MoEShape:
    """MoE transformer shape.

    ``base`` carries the common dimensions; ``base.ffn_dim`` applies to the
    dense layers only. ``moe_layers + dense_layers`` must equal ``base.layers``.
    A ``shared_expert_dim`` of 0 means no shared expert.
    """

    base: DenseShape
    moe_layers: int
    dense_layers: int
    experts: int
    top_k: int
    expert_dim: int
    shared_expert_dim: int = 0
    arrangement: str = "one_dense"
    gate_normalized: bool = False

    def __post_init__(self) -> None:
        _require(self.moe_layers >= 1, f"moe_layers must be >= 1, got {self.moe_layers}")
        _require(self.dense_layers >= 0,
                 f"dense_layers must be >= 0, got {self.dense_layers}")
        _require(self.moe_layers + self.dense_layers == self.base.layers,
                 f"moe_layers + dense_layers must equal layers: "
                 f"{self.moe_layers} + {self.dense_layers} != {self.base.layers}")
        _require(self.experts >= 1, f"experts must be >= 1, got {self.experts}")
        _require(1 <= self.top_k <= self.experts,
                 f"top_k must be in [1, experts]: got {self.top_k} of {self.experts}")
        _require(self.expert_dim >= 1, f"expert_dim must be >= 1, got {self.expert_dim}")
        _require(self.shared_expert_dim >= 0,
                 f"shared_expert_dim must be >= 0, got {self.shared_expert_dim}")
        _require(self.arrangement in ARRANGEMENTS,
                 f"arrangement must be one of {ARRANGEMENTS}, got {self.arrangement!r}")
        # Renormalizing a single selected score is the constant 1 and carries
        # no gradient, so top_k == 1 with normalization is rejected here.
        _require(not (self.gate_normalized and self.top_k < 2),
                 "gate_normalized requires top_k >= 2")

    @property
    def model_dim(self) -> int:
        return self.base.model_dim

    @property
    def seq_len(self) -> int:
        return self.base.seq_len

    @property
    def total_expert_ratio(self) -> float:
        """All-expert width over model width (mu)."""
        return (self.shared_expert_dim + self.experts * self.expert_dim) / self.model_dim

    @property
    def active_expert_ratio(self) -> float:
        """Active-expert width over model width (beta)."""
        return (self.shared_expert_dim + self.top_k * self.expert_dim) / self.model_dim


def dense_params(shape: DenseShape) -> int:
    """Non-vocabulary parameter count: (4 + 3*alpha) * model_dim^2 * layers."""
    d, l = shape.model_dim, shape.layers
    return (4 * d * d + 3 * shape.ffn_dim * d) * l


def dense_fwd_flops(shape: DenseShape) -> int:
    """Per-token forward FLOPs: 2N plus the 4 * model_dim * seq_len * layers attention term."""
    return 2 * dense_params(shape) + 4 * shape.model_dim * shape.seq_len * shape.layers


def moe_params(shape: MoEShape) -> tuple[int, int]:
    """Total and active non-vocabulary parameter counts.

    MoE layers contribute (4 + 3*mu) * model_dim^2 each to the total and
    (4 + 3*beta) * model_dim^2 to the active count; dense layers contribute
    the dense formula to both. Router weights are not counted.
    """
    d = shape.model_dim
    attn = 4 * d * d
    dense_layer = attn + 3 * shape.base.ffn_dim * d
    total_expert_width = shape.shared_expert_dim + shape.experts * shape.expert_dim
    active_expert_width = shape.shared_expert_dim + shape.top_k * shape.expert_dim
    total = (attn + 3 * total_expert_width * d) * shape.moe_layers \
        + dense_layer * shape.dense_layers
    active = (attn + 3 * active_expert_width * d) * shape.moe_layers \
        + dense_layer * shape.dense_layers
    return total, active


def activation_rate(shape: MoEShape) -> float:
    """Active over total parameters; equals (4+3*beta)/(4+3*mu) when fully MoE."""
    total, active = moe_params(shape)
    return active / total


def moe_fwd_flops(shape: MoEShape) -> int:
    """Per-token forward FLOPs: 2 * active_params + 4 * model_dim * seq_len * layers."""
    _, active = moe_params(shape)
    return 2 * active + 4 * shape.model_dim * shape.seq_len * shape.base.layers


def training_compute(fwd_flops_per_token: int | float, tokens: int) -> int:
    """Training FLOPs for a token budget: 3 forward passes per token."""
    if tokens < 0:
        raise ShapeError(f"tokens must be >= 0, got {tokens}")
    return 3 * int(fwd_flops_per_token) * int(tokens)


@dataclass(frozen=True)
class ComputeRatio:
    """Per-token cost of an MoE model relative to a dense baseline of equal size.

    ``formula`` is the closed-form ratio of the two per-token cost expressions
    at equal total parameters, r_a * (1 + 2*gamma_m/(4+3*beta)) /
    (1 + 2*gamma_d/(4+3*alpha)); ``direct`` is the actual FLOP ratio of the two
    concrete shapes, for cross-checking.
    """

    formula: float
    direct: float
    activation_rate: float


def compute_ratio(moe: MoEShape, dense: DenseShape, seq_len: int | None = None) -> ComputeRatio:
    """Evaluate the MoE/dense per-token compute ratio at a shared sequence length."""
    s = seq_len if seq_len is not None else moe.seq_len
    _require(s >= 1, f"seq_len must be >= 1, got {s}")
    r_a = activation_rate(moe)
    alpha = dense.ffn_ratio
    beta = moe.active_expert_ratio
    gamma_d = s / dense.model_dim
    gamma_m = s / moe.model_dim
    formula = r_a * (1 + 2 * gamma_m / (4 + 3 * beta)) / (1 + 2 * gamma_d / (4 + 3 * alpha))
    moe_at_s = dataclasses.replace(moe, base=dataclasses.replace(moe.base, seq_len=s))
    dense_at_s = dataclasses.replace(dense, seq_len=s)
    direct = moe_fwd_flops(moe_at_s) / dense_fwd_flops(dense_at_s)
    return ComputeRatio(formula=formula, direct=direct, activation_rate=r_a)


@dataclass(frozen=True)
class DerivedBudget:
    """Parameter, FLOP and data budget derived from a shape.

    ``train_flops_per_token`` is exactly three times ``fwd_flops_per_token``
    and ``train_compute`` is exactly ``train_flops_per_token * tokens``.
    """

    total_params: int
    active_params: int
    activation_rate: float
    fwd_flops_per_token: int
    train_flops_per_token: int
    train_compute: int
    tokens: int
    tokens_per_param: float

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "N": self.total_params,
            "N_a": self.active_params,
            "r_a": self.activation_rate,
            "M_fwd": self.fwd_flops_per_token,
            "M_train": self.train_flops_per_token,
            "C": self.train_compute,
            "D": self.tokens,
            "D_over_N": self.tokens_per_param,
        }


def derive_budget(shape: DenseShape | MoEShape, tokens: int = 0) -> DerivedBudget:
    """Full budget record for a shape at an optional token count."""
    if isinstance(shape, MoEShape):
        total, active = moe_params(shape)
        fwd = moe_fwd_flops(shape)
    elif isinstance(shape, DenseShape):
        total = active = dense_params(shape)
        fwd = dense_fwd_flops(shape)
    else:
        raise ShapeError(f"unsupported shape type {type(shape).__name__}")
    tokens = int(tokens)
    return DerivedBudget(
        total_params=total,
        active_params=active,
        activation_rate=active / total,
        fwd_flops_per_token=fwd,
        train_flops_per_token=3 * fwd,
        train_compute=training_compute(fwd, tokens),
        tokens=tokens,
        tokens_per_param=tokens / total,
    )


def shape_to_json(shape: DenseShape | MoEShape) -> dict[str, Any]:
    """Flat JSON object; MoE-only keys are absent for dense shapes."""
    if isinstance(shape, MoEShape):
        base = shape.base
        return {
            "L": base.layers, "D_m": base.model_dim, "D_ffn": base.ffn_dim,
            "H": base.heads, "D_h": base.head_dim, "S": base.seq_len,
            "L_e": shape.moe_layers, "L_d": shape.dense_layers,
            "E": shape.experts, "K": shape.top_k,
            "D_e": shape.expert_dim, "D_se": shape.shared_expert_dim,
            "arrangement": shape.arrangement,
            "gate_normalized": shape.gate_normalized,
        }
    if isinstance(shape, DenseShape):
        return {
            "L": shape.layers, "D_m": shape.model_dim, "D_ffn": shape.ffn_dim,
            "H": shape.heads, "D_h": shape.head_dim, "S": shape.seq_len,
        }
    raise ShapeError(f"unsupported shape type {type(shape).__name__}")


def shape_from_json(obj: dict[str, Any]) -> DenseShape | MoEShape:
    """Inverse of shape_to_json; presence of an "E" key selects MoE."""
    try:
        base = DenseShape(
            layers=int(obj["L"]), model_dim=int(obj["D_m"]), ffn_dim=int(obj["D_ffn"]),
            heads=int(obj["H"]), head_dim=int(obj["D_h"]), seq_len=int(obj.get("S", 2048)),
        )
    except KeyError as exc:
        raise ShapeError(f"shape object is missing key {exc.args[0]!r}") from None
    if "E" not in obj:
        return base
    try:
        return MoEShape(
            base=base,
            moe_layers=int(obj["L_e"]), dense_layers=int(obj["L_d"]),
            experts=int(obj["E"]), top_k=int(obj["K"]),
            expert_dim=int(obj["D_e"]), shared_expert_dim=int(obj.get("D_se", 0)),
            arrangement=obj.get("arrangement", "one_dense"),
            gate_normalized=bool(obj.get("gate_normalized", False)),
        )
    except KeyError as exc:
        raise ShapeError(f"MoE shape object is missing key {exc.args[0]!r}") from None


def layer_split(layers: int, arrangement: str) -> tuple[int, int]:
    """(moe_layers, dense_layers) for an arrangement at a given depth."""
    _require(arrangement in ARRANGEMENTS,
             f"arrangement must be one of {ARRANGEMENTS}, got {arrangement!r}")
    if arrangement == "full":
        return layers, 0
    if arrangement == "one_dense":
        _require(layers >= 2, f"one_dense needs at least 2 layers, got {layers}")
        return layers - 1, 1
    # interleave: alternate starting with a dense layer
    return layers // 2, layers - layers // 2
