"""Dynamic routing by agreement between child votes and parent capsules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deepcaps import autodiff as ad
from deepcaps.autodiff import Tensor, make_op
from deepcaps.capsules import squash
from deepcaps.errors import ShapeError

PARENTS = "parents"
CHILDREN = "children"


@dataclass
class RoutingState:
    logits: np.ndarray  # b: [N, K, M]
    couplings: np.ndarray  # c: [N, K, M]


def couplings(logits, axis: str = PARENTS):
    """Coupling coefficients: softmax of the logits over parents (or children)."""
    ax = 2 if axis == PARENTS else 1
    if isinstance(logits, Tensor):
        return ad.softmax(logits, axis=ax)
    z = logits - logits.max(axis=ax, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=ax, keepdims=True)


def agreement_update(logits, votes, parents):
    """``b_ij + <v_j, vote_ij>`` for logits ``[N,K,M]``, votes ``[N,K,M,D]``, parents ``[N,M,D]``."""
    if isinstance(votes, Tensor):
        return logits + (votes * parents.reshape(parents.shape[0], 1, *parents.shape[1:])).sum(axis=-1)
    return logits + (votes * parents[:, None]).sum(axis=-1)


def _np_squash(s):
    n = np.sqrt((s * s).sum(axis=-1, keepdims=True))
    return s * (n / (1 + n * n))


def _child_sum_np(x, canonical):
    return np.sort(x, axis=1).sum(axis=1) if canonical else x.sum(axis=1)


def child_sum(x: Tensor, canonical: bool = False) -> Tensor:
    """Sum over the child axis (1).

    With ``canonical`` the terms are sorted first, making the result bitwise
    independent of child order.
    """
    shape = x.shape
    out = _child_sum_np(x.data, canonical)
    return make_op(out, (x,), lambda g: (np.broadcast_to(g[:, None], shape),), "child_sum")


def _check_votes(votes, iterations):
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    if votes.ndim != 4:
        raise ShapeError(f"votes must be [N, K_children, M_parents, D], got shape {votes.shape}")
    if votes.shape[1] < 1 or votes.shape[2] < 1:
        raise ShapeError(f"votes need at least one child and one parent, got shape {votes.shape}")


def route_preactivation(votes: Tensor, iterations: int = 3, axis: str = PARENTS,
                        full_grad: bool = False, canonical: bool = False,
                        return_state: bool = False):
    """Run the routing recurrence and return the final weighted vote sum ``s`` ``[N, M, D]``.

    Logits start at zero on every call. Unless ``full_grad`` is set, couplings
    from the agreement iterations are constants for differentiation and
    gradients reach the votes only through the final weighted sum.
    """
    _check_votes(votes, iterations)
    if axis not in (PARENTS, CHILDREN):
        raise ValueError(f"coupling axis must be {PARENTS!r} or {CHILDREN!r}, got {axis!r}")
    n, k, m, _ = votes.shape
    if full_grad:
        b = Tensor(np.zeros((n, k, m), dtype=votes.dtype))
        for it in range(iterations):
            c = couplings(b, axis)
            s = child_sum(c.reshape(n, k, m, 1) * votes, canonical)
            if it == iterations - 1:
                break
            b = agreement_update(b, votes, squash(s))
        state = RoutingState(b.data, c.data)
    else:
        vd = votes.data
        b = np.zeros((n, k, m), dtype=vd.dtype)
        for it in range(iterations):
            c = couplings(b, axis)
            if it == iterations - 1:
                break
            v = _np_squash(_child_sum_np(c[..., None] * vd, canonical))
            b = agreement_update(b, vd, v)
        s = child_sum(Tensor(c[..., None]) * votes, canonical)
        state = RoutingState(b, c)
    return (s, state) if return_state else s


def route(votes: Tensor, iterations: int = 3, axis: str = PARENTS, full_grad: bool = False,
          canonical: bool = False, return_state: bool = False):
    """Parent capsules ``squash(s_j)`` after ``iterations`` rounds of routing by agreement."""
    s, state = route_preactivation(votes, iterations, axis, full_grad, canonical, return_state=True)
    v = squash(s)
    return (v, state) if return_state else v
