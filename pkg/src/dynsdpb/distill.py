"""Self-distillation from the previous mini-batch.

The previous iteration's outputs on the samples that are repeated in the
current batch act as soft targets. Per sample, the distillation weight is
scaled down by prediction entropy and the temperature is scaled by a
sigmoid of the negated cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    AlignmentError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    ValidationError,
)
from .tensor import EPS, Tensor

TAU_MIN_FRAC = 0.05
MAP_TOL = 1e-9


class LogitsCache:
    """Detached per-sample outputs from the previous iteration.

    Values are raw logit rows (classifier), vocabulary maps (decoder, VMM)
    or per-position logits (decoder, token mode). ``None`` marks a sample
    whose generation was empty.
    """

    def __init__(self):
        self.entries: dict = {}
        self.stamp = None

    def __len__(self):
        return len(self.entries)

    @property
    def empty(self) -> bool:
        return not self.entries

    @property
    def ids(self) -> tuple:
        return tuple(self.entries)

    def store(self, ids, rows, t: int):
        ids = list(ids)
        if len(ids) != len(rows):
            raise DimensionError(f"{len(ids)} ids but {len(rows)} rows")
        self.entries = {
            i: None if r is None else np.array(r.data if isinstance(r, Tensor) else r,
                                               dtype=np.float64)
            for i, r in zip(ids, rows)
        }
        self.stamp = t

    def lookup(self, ids) -> list:
        out = []
        for i in ids:
            if i not in self.entries:
                raise AlignmentError(f"no cached entry for sample id {i}")
            out.append(self.entries[i])
        return out

    def clear(self):
        self.entries = {}
        self.stamp = None

    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.entries.values() if v is not None)


@dataclass
class DynamicFactors:
    u: np.ndarray
    U: float
    d: np.ndarray
    alpha_eff: np.ndarray
    tau_eff: np.ndarray
    dynamic: bool = True

    @property
    def u_over_U(self):
        return self.u / self.U


# ---------------------------------------------------------------------------
# scalar factors


def uncertainty(probs) -> np.ndarray:
    """Entropy in nats of each probability row."""
    return T.entropy(probs)


def normalizer(cardinality: int) -> float:
    """Largest possible entropy over ``cardinality`` outcomes."""
    return math.log(cardinality)


def normalize_by(u, U: float):
    return np.asarray(u, dtype=np.float64) / U


def discrimination(per_sample_ce) -> np.ndarray:
    ce = np.asarray(per_sample_ce, dtype=np.float64)
    if np.any(ce < -1e-9):
        raise ContractError("cross-entropy must be non-negative")
    ce = np.maximum(ce, 0.0)
    # 1 / (1 + exp(ce)), written to stay finite for large ce
    return np.exp(-np.logaddexp(0.0, ce))


def dynamic_factors(u, U, per_sample_ce, alpha, tau, tau_min_frac=TAU_MIN_FRAC) -> DynamicFactors:
    u = np.asarray(u, dtype=np.float64)
    d = discrimination(per_sample_ce)
    alpha_eff = np.clip((1.0 - u / U) * alpha, 0.0, alpha)
    tau_eff = np.maximum(d * tau, tau_min_frac * tau)
    return DynamicFactors(u=u, U=U, d=d, alpha_eff=alpha_eff, tau_eff=tau_eff, dynamic=True)


def static_factors(k, alpha, tau, U=1.0) -> DynamicFactors:
    """Fixed ``alpha`` and ``tau`` for every sample (no dynamic adjustment)."""
    return DynamicFactors(
        u=np.zeros(k), U=U, d=np.full(k, np.nan), alpha_eff=np.full(k, float(alpha)),
        tau_eff=np.full(k, float(tau)), dynamic=False,
    )


def dynamic_ce_weights(u, U) -> np.ndarray:
    """Per-sample CE weights ``1 - u/U`` rescaled to mean 1 (uniform if all vanish)."""
    w = np.clip(1.0 - np.asarray(u, dtype=np.float64) / U, 0.0, 1.0)
    total = w.sum()
    if total <= 0:
        return np.ones_like(w)
    return w * (len(w) / total)


# ---------------------------------------------------------------------------
# losses


def _tau_column(tau, k):
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 0:
        tau = np.full(k, float(tau))
    if tau.shape != (k,):
        raise DimensionError(f"expected {k} temperatures, got shape {tau.shape}")
    return tau


def lmbc_loss(cached, current_logits: Tensor, tau, ids=None, reduction="mean") -> Tensor:
    """Temperature-squared KL from cached soft targets to current predictions.

    ``cached`` is either an array of logit rows aligned with
    ``current_logits`` or a :class:`LogitsCache` together with ``ids``.
    ``tau`` is a scalar or one temperature per row.
    """
    if isinstance(cached, LogitsCache):
        if ids is None:
            raise ContractError("ids are required when passing a LogitsCache")
        cached = np.stack(cached.lookup(ids))
    if isinstance(cached, Tensor):
        cached = cached.data
    cached = np.asarray(cached, dtype=np.float64)
    if cached.shape != current_logits.shape:
        raise DimensionError(
            f"cached rows {cached.shape} do not match current logits {current_logits.shape}")
    k = current_logits.shape[0]
    tau = _tau_column(tau, k)
    col = tau[:, None]
    teacher = T.tempered_softmax(cached, col).data
    student = T.tempered_softmax(current_logits, col)
    per_sample = T.kl_divergence(teacher, student, reduction="none") * (tau * tau)
    if reduction == "none":
        return per_sample
    return per_sample.mean()


@dataclass
class VocabularyMap:
    values: Tensor  # [|V|]
    length: int

    def __post_init__(self):
        v = self.values.data
        if v.ndim != 1 or v.min() < 0 or abs(v.sum() - 1.0) > MAP_TOL:
            raise ValidationError("vocabulary map must be a non-negative vector summing to 1")


def vocabulary_map(gen) -> VocabularyMap:
    """Mean of the per-step probability rows of a generation."""
    rows = gen.probs if hasattr(gen, "probs") else gen
    rows = T.as_tensor(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DegenerateInputError("cannot build a vocabulary map from an empty generation")
    T.check_distribution(rows, "generation rows")
    return VocabularyMap(rows.mean(axis=0), rows.shape[0])


def temper_map(values, tau):
    return T.tempered_softmax(T.log(T.as_tensor(values) + EPS), tau)


def vmm_lmbc_loss(cached_map, current_map, tau_eff) -> Tensor:
    """``tau^2 * KL(temper(cached) || temper(current))`` on vocabulary maps."""
    if isinstance(cached_map, VocabularyMap):
        cached_map = cached_map.values
    cached_vals = np.array(cached_map.data if isinstance(cached_map, Tensor) else cached_map,
                           dtype=np.float64)
    current = current_map.values if isinstance(current_map, VocabularyMap) \
        else T.as_tensor(current_map)
    for name, v in (("cached", cached_vals), ("current", current.data)):
        if v.ndim != 1 or v.min() < 0 or abs(v.sum() - 1.0) > 1e-6:
            raise ValidationError(f"{name} vocabulary map is not a distribution")
    if cached_vals.shape != current.shape:
        raise DimensionError(f"map sizes differ: {cached_vals.shape} vs {current.shape}")
    tau = float(tau_eff)
    teacher = temper_map(cached_vals, tau).data
    student = temper_map(current, tau)
    return T.kl_divergence(teacher, student, reduction="mean") * (tau * tau)


def total_loss(ce_per_sample: Tensor, lmbc_per_sample=None, factors: DynamicFactors = None,
               mode: str = "dynamic") -> Tensor:
    """Batch-mean CE plus the mean of per-sample weighted consistency terms.

    ``mode`` is ``"finetune"`` (CE only), ``"static"`` (weight ``alpha``)
    or ``"dynamic"`` (weight ``(1 - u/U) * alpha``).
    """
    ce = ce_per_sample.mean()
    if mode == "finetune":
        if lmbc_per_sample is not None:
            raise ConfigError("finetune mode takes no consistency term")
        return ce
    if mode not in ("static", "dynamic"):
        raise ConfigError(f"unknown loss mode {mode!r}")
    if lmbc_per_sample is None:
        return ce
    if factors is None or factors.dynamic != (mode == "dynamic"):
        raise ConfigError(f"{mode} mode needs matching {'dynamic' if mode == 'dynamic' else 'static'} factors")
    if len(factors.alpha_eff) != lmbc_per_sample.shape[0]:
        raise DimensionError("factor count does not match consistency terms")
    return ce + (lmbc_per_sample * factors.alpha_eff).mean()
