"""Classification loss, the salience-constraint family and the joint objective.

Every auxiliary loss takes a salience tensor ``s`` shaped ``(..., n)`` and a
binary rationale mask of the same shape, and returns one value per leading
index (a scalar for a single sentence). An optional ``valid`` mask marks the
non-padding positions of a padded batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import (
    Tensor,
    div,
    getitem,
    log_softmax,
    mask_mul,
    max_,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    square,
    sub,
    sum_,
    add,
)
from .salience import SalienceResult, word_gradients

METHODS = ("none", "base", "order", "gate", "gate_order", "soft_gate", "marginal_gate", "sl")
ORDER_EPS = 1e-12
_GATED = ("gate", "gate_order")


class ConfigError(ValueError):
    """Invalid loss or training configuration."""


@dataclass
class LossConfig:
    method: str = "none"
    lam: float = 1.0
    threshold: float = 0.9
    gate_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown auxiliary loss {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.lam >= 0:
            raise ConfigError(f"lam: must be >= 0, got {self.lam}")
        if not 0 < self.threshold <= 1:
            raise ConfigError(f"threshold: must lie in (0, 1], got {self.threshold}")


def _as_tensor(s) -> Tensor:
    return s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))


def _masks(s: Tensor, mask, valid):
    z = np.asarray(mask, dtype=np.float64)
    if z.shape != s.shape:
        raise ValueError(f"rationale mask shape {z.shape} != salience shape {s.shape}")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("rationale mask must be binary")
    v = np.ones_like(z) if valid is None else np.asarray(valid, dtype=np.float64)
    z = z * v
    return z, v


def rationale_counts(mask, valid=None) -> np.ndarray:
    z = np.asarray(mask, dtype=np.float64)
    if valid is not None:
        z = z * valid
    return z.sum(axis=-1)


# ---------------------------------------------------------------------------
# classification

def cross_entropy(logits, gold) -> Tensor:
    """Per-instance ``-log softmax(logits)[gold]``."""
    logits = _as_tensor(logits)
    gold = np.asarray(gold, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return neg(getitem(logp, int(gold)))
    return neg(getitem(logp, (np.arange(logits.shape[0]), gold)))


# ---------------------------------------------------------------------------
# auxiliary losses

def base_loss(s, mask, valid=None) -> Tensor:
    """Sum over rationale words of ``(s_i - 1/k)^2``; zero where ``k = 0``."""
    s = _as_tensor(s)
    z, _ = _masks(s, mask, valid)
    k = z.sum(axis=-1, keepdims=True)
    target = np.where(k > 0, 1.0 / np.maximum(k, 1.0), 0.0)
    return sum_(mask_mul(square(sub(s, Tensor(target))), z), axis=-1)


def order_loss(s, mask, valid=None) -> Tensor:
    """Sum over rationale words of ``min(s_i / max(m, eps) - 1, 0)^2``.

    ``m`` is the largest non-rationale salience. Sentences without any
    non-rationale word (or without rationales) contribute zero.
    """
    s = _as_tensor(s)
    z, v = _masks(s, mask, valid)
    other = v * (1.0 - z)
    has_other = other.sum(axis=-1) > 0
    shifted = add(s, Tensor(np.where(other > 0, 0.0, -2.0)))
    m, _ = max_(shifted, axis=-1, keepdims=True)
    # rows with no non-rationale word get a dummy unit divisor and are masked out
    m = add(mask_mul(m, has_other[..., None].astype(float)), Tensor((~has_other[..., None]).astype(float)))
    # eps acts as a floor so that m > eps gives exact ratios
    ratio = div(s, maximum(m, ORDER_EPS))
    shortfall = square(minimum(sub(ratio, 1.0), 0.0))
    per = sum_(mask_mul(shortfall, z), axis=-1)
    return mask_mul(per, has_other.astype(float))


def rationale_mass(s, mask, valid=None) -> Tensor:
    s = _as_tensor(s)
    z, _ = _masks(s, mask, valid)
    return sum_(mask_mul(s, z), axis=-1)


def _unit_target_loss(s: Tensor, z: np.ndarray) -> Tensor:
    return sum_(mask_mul(square(sub(s, 1.0)), z), axis=-1)


def gate_probability(s, mask, valid=None) -> np.ndarray:
    """``clamp(1 - sum of rationale salience, 0, 1)``; a constant, not a tensor."""
    s = _as_tensor(s)
    p = 1.0 - rationale_mass(s, mask, valid).data
    if np.any(p < -1e-9) or np.any(p > 1.0 + 1e-9):
        raise ValueError("gate probability outside [0, 1]: salience does not sum to at most 1")
    p = np.clip(p, 0.0, 1.0)
    return float(p) if np.ndim(p) == 0 else p


def draw_gates(p, seed: int, step: int, instance_index: Sequence[int]) -> np.ndarray:
    """One Bernoulli draw per instance from a stream keyed by (seed, step, index)."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    idx = np.atleast_1d(np.asarray(instance_index, dtype=np.int64))
    u = np.array([np.random.default_rng([seed, step, int(i)]).random() for i in idx])
    return (u < p).astype(np.float64)


def _resolve_gate(s, mask, valid, gate, rng):
    if gate is not None:
        return np.asarray(gate, dtype=np.float64)
    p = gate_probability(s, mask, valid)
    rng = rng if rng is not None else np.random.default_rng()
    return (rng.random(np.shape(p)) < p).astype(np.float64)


def gate_loss(s, mask, valid=None, gate=None, rng: Optional[np.random.Generator] = None) -> Tensor:
    """``b * sum over rationales of (s_i - 1)^2`` with ``b ~ Bernoulli(1 - rationale mass)``.

    ``gate`` fixes ``b`` explicitly; otherwise it is drawn from ``rng``. The
    draw is a constant factor in the graph.
    """
    s = _as_tensor(s)
    z, _ = _masks(s, mask, valid)
    b = _resolve_gate(s, mask, valid, gate, rng)
    return mask_mul(_unit_target_loss(s, z), b)


def gate_order_loss(s, mask, valid=None, gate=None, rng: Optional[np.random.Generator] = None) -> Tensor:
    s = _as_tensor(s)
    b = _resolve_gate(s, mask, valid, gate, rng)
    return mask_mul(order_loss(s, mask, valid), b)


def soft_gate_loss(s, mask, valid=None) -> Tensor:
    """Rationale mass times the unit-target penalty."""
    s = _as_tensor(s)
    z, _ = _masks(s, mask, valid)
    return mul(rationale_mass(s, mask, valid), _unit_target_loss(s, z))


def marginal_gate_loss(s, mask, threshold: float, valid=None) -> Tensor:
    """Unit-target penalty switched on while rationale mass is ``<= threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    s = _as_tensor(s)
    z, _ = _masks(s, mask, valid)
    on = (rationale_mass(s, mask, valid).data <= threshold).astype(np.float64)
    return mask_mul(_unit_target_loss(s, z), on)


def sl_baseline_loss(signed, mask, valid=None) -> Tensor:
    """Hinge ``sum over rationales of max(0, -g_i)`` on signed word gradients."""
    signed = _as_tensor(signed)
    z, _ = _masks(signed, mask, valid)
    return sum_(mask_mul(maximum(neg(signed), 0.0), z), axis=-1)


# ---------------------------------------------------------------------------
# joint objective

@dataclass
class AuxiliaryResult:
    per_instance: Tensor
    eligible: np.ndarray
    gates: Optional[np.ndarray] = None
    n_with_rationales: int = 0


def auxiliary_terms(
    config: LossConfig,
    s: Tensor,
    signed: Tensor,
    mask: np.ndarray,
    valid: np.ndarray,
    degenerate: np.ndarray,
    step: int = 0,
    instance_index: Optional[Sequence[int]] = None,
) -> AuxiliaryResult:
    """Per-instance auxiliary values for a padded batch and which rows count."""
    z = np.asarray(mask, dtype=np.float64) * valid
    k = z.sum(axis=-1)
    has_r = k >= 1
    eligible = has_r & ~np.asarray(degenerate, dtype=bool)
    method = config.method
    gates = None
    if method == "base":
        per = base_loss(s, z, valid)
    elif method == "order":
        per = order_loss(s, z, valid)
        eligible &= (valid * (1 - z)).sum(axis=-1) > 0
    elif method in _GATED:
        if instance_index is None:
            instance_index = np.arange(len(k))
        p = np.where(eligible, gate_probability(s, z, valid) if eligible.any() else 1.0, 0.0)
        gates = draw_gates(p, config.gate_seed, step, instance_index) * eligible
        if method == "gate":
            per = gate_loss(s, z, valid, gate=gates)
        else:
            per = gate_order_loss(s, z, valid, gate=gates)
            eligible &= (valid * (1 - z)).sum(axis=-1) > 0
    elif method == "soft_gate":
        per = soft_gate_loss(s, z, valid)
    elif method == "marginal_gate":
        per = marginal_gate_loss(s, z, config.threshold, valid)
    elif method == "sl":
        per = sl_baseline_loss(signed, z, valid)
        eligible = has_r
    else:
        raise ConfigError(f"method: no auxiliary term for {method!r}")
    return AuxiliaryResult(per_instance=per, eligible=eligible, gates=gates, n_with_rationales=int(has_r.sum()))


def aggregate(ce: Tensor, aux: Optional[AuxiliaryResult], lam: float) -> tuple:
    """Batch objective: mean cross-entropy plus ``lam`` times the mean
    auxiliary value over eligible instances. Returns ``(total, ce_mean, aux_mean)``."""
    ce_mean = mean(ce)
    if aux is None or lam == 0 or not aux.eligible.any():
        aux_mean = None
        return ce_mean, ce_mean, aux_mean
    w = aux.eligible.astype(np.float64) / aux.eligible.sum()
    aux_mean = sum_(mask_mul(aux.per_instance, w))
    return add(ce_mean, mul(aux_mean, lam)), ce_mean, aux_mean


@dataclass
class JointResult:
    total: Tensor
    ce: Tensor
    aux: Optional[Tensor]
    salience: Optional[SalienceResult] = None
    terms: Optional[AuxiliaryResult] = None
    masks: Optional[np.ndarray] = None


def pad_masks(masks: Sequence[Sequence[int]], width: int) -> np.ndarray:
    out = np.zeros((len(masks), width))
    for b, m in enumerate(masks):
        out[b, : len(m)] = m
    return out


def joint_loss(
    model,
    token_ids: Sequence[Sequence[int]],
    labels: Sequence[int],
    masks: Sequence[Sequence[int]],
    config: LossConfig,
    dropout_active: bool = False,
    dropout_seed: Optional[int] = None,
    step: int = 0,
    instance_index: Optional[Sequence[int]] = None,
    track_salience: bool = False,
) -> JointResult:
    """Cross-entropy plus ``lam`` times the configured auxiliary loss.

    Salience comes from the same (possibly dropout-active) forward pass as
    the classification loss, with the gradient graph retained so the
    auxiliary term can be differentiated with respect to the parameters.
    """

    use_aux = config.method != "none" and config.lam > 0
    if use_aux or track_salience:
        sal = word_gradients(model, token_ids, labels, target="gold", retain_graph=True,
                             dropout_active=dropout_active, seed=dropout_seed)
        logits = sal.logits
        z = pad_masks(masks, sal.valid.shape[1])
    else:
        ids, valid = model.pad_batch(token_ids)
        logits, _ = model.forward(model.embed(ids), valid, dropout_active=dropout_active, seed=dropout_seed)
        sal, z = None, None
    ce = cross_entropy(logits, labels)
    terms = None
    if use_aux:
        terms = auxiliary_terms(config, sal.s, sal.signed, z, sal.valid, sal.degenerate,
                                step=step, instance_index=instance_index)
    total, ce_mean, aux_mean = aggregate(ce, terms, config.lam)
    return JointResult(total=total, ce=ce_mean, aux=aux_mean, salience=sal, terms=terms, masks=z)
