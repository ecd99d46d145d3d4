"""Gradient-based word salience.

A word's raw importance is the L1 norm, over embedding dimensions, of the
gradient of a class logit with respect to that word's embedding row. The
salience vector is the raw importance divided by its sentence total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import Tensor, abs_, backward, div, getitem, mask_mul, sum_
from .model import TextCNN

SALIENCE_EPS = 1e-12


@dataclass
class SalienceResult:
    """One salience pass over a padded batch.

    ``g`` and ``s`` are ``(B, L)`` tensors that are zero on padding;
    ``signed`` is the un-absolute per-word gradient sum used by the
    saliency-learning hinge. ``degenerate`` flags rows whose raw gradient
    total is at most 1e-12.
    """

    logits: Tensor
    attention: Tensor
    embedded: Tensor
    g: Tensor
    s: Tensor
    signed: Tensor
    valid: np.ndarray
    degenerate: np.ndarray
    targets: np.ndarray

    def per_instance(self, b: int) -> np.ndarray:
        """Salience of row ``b`` with padding stripped."""
        n = int(self.valid[b].sum())
        return self.s.data[b, :n].copy()


def normalize(g, valid: Optional[np.ndarray] = None):
    """``s_i = g_i / (sum_j g_j + 1e-12)`` over the last axis.

    Returns ``(s, degenerate)``. ``degenerate`` is True where the total is at
    most 1e-12; such rows are skipped by the auxiliary losses.
    """
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
    if np.any(g.data < 0):
        raise ValueError("normalize: raw gradient magnitudes must be non-negative")
    if valid is not None:
        g = mask_mul(g, valid)
    total = sum_(g, axis=-1, keepdims=True)
    s = div(g, total, eps=SALIENCE_EPS)
    degenerate = total.data[..., 0] <= SALIENCE_EPS
    if degenerate.ndim == 0:
        degenerate = bool(degenerate)
    return s, degenerate


def select_targets(logits: Tensor, labels: Optional[Sequence[int]], target: str) -> np.ndarray:
    if target == "gold":
        if labels is None:
            raise ValueError("gold-class salience needs labels")
        return np.asarray(labels, dtype=np.int64)
    if target == "predicted":
        return np.argmax(logits.data, axis=-1)
    raise ValueError(f"unknown salience target {target!r}; expected 'gold' or 'predicted'")


def word_gradients(
    model: TextCNN,
    token_ids: Sequence[Sequence[int]],
    labels: Optional[Sequence[int]] = None,
    target: str = "gold",
    retain_graph: bool = False,
    dropout_active: bool = False,
    seed: Optional[int] = None,
) -> SalienceResult:
    """Forward a batch and compute per-word gradient magnitudes and salience.

    With ``retain_graph`` the returned ``g``/``s`` are differentiable with
    respect to the model parameters, and the logits graph is kept for the
    classification loss.
    """
    ids, valid = model.pad_batch(token_ids)
    embedded = model.embed(ids)
    logits, attn = model.forward(embedded, valid, dropout_active=dropout_active, seed=seed)
    targets = select_targets(logits, labels, target)
    picked = getitem(logits, (np.arange(len(targets)), targets))
    # rows are independent, so the gradient of the summed target logits
    # gives each sentence its own input gradient
    grad_e = backward(sum_(picked), [embedded], retain_graph=retain_graph)[embedded]
    g = mask_mul(sum_(abs_(grad_e), axis=-1), valid)
    signed = mask_mul(sum_(grad_e, axis=-1), valid)
    s, degenerate = normalize(g, valid)
    return SalienceResult(
        logits=logits,
        attention=attn,
        embedded=embedded,
        g=g,
        s=s,
        signed=signed,
        valid=valid,
        degenerate=np.atleast_1d(degenerate),
        targets=targets,
    )


def analysis_salience(model: TextCNN, token_ids: Sequence[Sequence[int]], batch_size: int = 256):
    """Dropout-free, predicted-class salience, one array per sentence."""
    out = []
    for lo in range(0, len(token_ids), batch_size):
        chunk = token_ids[lo:lo + batch_size]
        res = word_gradients(model, chunk, target="predicted")
        out.extend(res.per_instance(b) for b in range(len(chunk)))
    return out
