"""Reverse-mode sweep over recorded lineage."""

from __future__ import annotations

import warnings
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, add, enable_grad, no_grad


class GradientMap(dict):
    """``{target tensor: gradient tensor}`` keyed by tensor identity.

    ``unreachable`` lists targets that the output does not depend on; their
    entries hold zeros.
    """

    def __init__(self):
        super().__init__()
        self.unreachable: List[Tensor] = []

    def __getitem__(self, key: Tensor) -> Tensor:
        return super().__getitem__(id(key))

    def __contains__(self, key) -> bool:
        return super().__contains__(id(key))

    def get(self, key, default=None):
        return super().get(id(key), default)


def _topo_order(output: Tensor, wanted: set) -> List[Tensor]:
    """Nodes on some path from a wanted tensor to ``output``, output first."""
    needed: Dict[int, bool] = {}
    order: List[Tensor] = []
    stack = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        tid = id(t)
        if expanded:
            hit = tid in wanted
            if t.node is not None:
                for p in t.node.parents:
                    if needed.get(id(p)):
                        hit = True
            needed[tid] = hit
            if hit:
                order.append(t)
            continue
        if tid in needed:
            continue
        needed[tid] = False  # visiting
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in needed:
                    stack.append((p, False))
    order.reverse()
    return order


def backward(output: Tensor, targets: Iterable[Tensor], retain_graph: bool = False) -> GradientMap:
    """Gradients of a scalar ``output`` with respect to each of ``targets``.

    With ``retain_graph`` the returned gradients carry lineage and can be
    differentiated again, and the forward graph stays intact. Without it the
    sweep runs without recording and the traversed graph is released.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    targets = list(targets)
    wanted = {id(t) for t in targets}
    result = GradientMap()

    grads: Dict[int, Tensor] = {}
    if output.requires_grad or id(output) in wanted:
        order = _topo_order(output, wanted)
        grads[id(output)] = Tensor(np.ones_like(output.data))
        ctx = enable_grad() if retain_graph else no_grad()
        with ctx:
            for t in order:
                g = grads.get(id(t))
                if g is None or t.node is None:
                    continue
                if id(t) not in wanted:
                    # intermediate gradients are not needed once propagated
                    del grads[id(t)]
                parent_grads = t.node.vjp(g)
                for p, pg in zip(t.node.parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    if pg.shape != p.shape:
                        raise ShapeError(
                            f"backward: {t.node.op} produced gradient {pg.shape} for input {p.shape}"
                        )
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
        if not retain_graph:
            for t in order:
                if t.node is not None and id(t) not in wanted:
                    t.node = None

    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
            result.unreachable.append(t)
        dict.__setitem__(result, id(t), g)
    if result.unreachable:
        warnings.warn(
            f"backward: {len(result.unreachable)} target(s) unreachable from output; zero gradients returned",
            RuntimeWarning,
            stacklevel=2,
        )
    return result


def grad(output: Tensor, targets: Sequence[Tensor], retain_graph: bool = False) -> List[Tensor]:
    """List form of :func:`backward`, in the order of ``targets``."""
    gm = backward(output, targets, retain_graph=retain_graph)
    return [gm[t] for t in targets]
