"""Layer primitives: spliced temporal convolution, its low-rank factorized
form, statistics pooling, and the semi-orthogonal projection applied to
factor matrices."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError

VARIANCE_FLOOR = 1e-10


def validate_context(context) -> tuple[int, ...]:
    ctx = tuple(int(o) for o in context)
    if not ctx:
        raise InvalidInputError("context must contain at least one offset")
    if any(b <= a for a, b in zip(ctx, ctx[1:])):
        raise InvalidInputError(f"context offsets must be strictly increasing: {ctx}")
    return ctx


def context_span(context) -> int:
    return context[-1] - context[0]


def splice(x: np.ndarray, context) -> np.ndarray:
    """Stack the rows of x at each context offset: (T, D) -> (T', D*len(context)).

    Output row t gathers input rows t + (offset - min_offset), i.e. the valid
    positions only; T' = T - (max - min).
    """
    ctx = validate_context(context)
    span = context_span(ctx)
    total = x.shape[0]
    if total <= span:
        raise InvalidInputError(f"need more than {span} frames for context {ctx}, got {total}")
    base = ctx[0]
    out_len = total - span
    return np.concatenate([x[o - base : o - base + out_len] for o in ctx], axis=1)


def unsplice(grad_spliced: np.ndarray, context, total: int, dim: int) -> np.ndarray:
    """Scatter a gradient w.r.t. spliced rows back onto the input rows."""
    ctx = validate_context(context)
    base = ctx[0]
    out_len = total - context_span(ctx)
    grad = np.zeros((total, dim))
    for i, o in enumerate(ctx):
        grad[o - base : o - base + out_len] += grad_spliced[:, i * dim : (i + 1) * dim]
    return grad


def tdnn_forward(weights: np.ndarray, bias: np.ndarray, context, x: np.ndarray) -> np.ndarray:
    """Valid (un-padded) temporal convolution: affine map over spliced rows."""
    return splice(x, context) @ weights.T + bias


def factor_contexts(context) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split a layer context into the two factor contexts.

    A symmetric 3-point context {-k, 0, +k} becomes {-k, 0} for the first
    factor and {0, +k} for the second; the singleton context {0} stays {0}
    for both."""
    ctx = validate_context(context)
    if ctx == (0,):
        return (0,), (0,)
    if len(ctx) == 3 and ctx[1] == 0 and ctx[2] == -ctx[0]:
        k = ctx[2]
        return (-k, 0), (0, k)
    raise InvalidInputError(f"factorized layers need context {{0}} or {{-k,0,+k}}, got {ctx}")


def factorized_tdnn_forward(factor1: np.ndarray, factor2: np.ndarray, context, x: np.ndarray) -> np.ndarray:
    """Two chained spliced linear maps; equivalent to one wider convolution.

    The first factor is the one held semi-orthogonal during training. No bias
    here; an enclosing layer adds its bias after the second factor.
    """
    c1, c2 = factor_contexts(context)
    hidden = splice(x, c1) @ factor1.T
    return splice(hidden, c2) @ factor2.T


def semi_orthogonalize(m: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Nearest matrix with orthonormal rows (Frobenius sense): U V^T from the SVD."""
    if m.ndim != 2 or m.shape[0] > m.shape[1]:
        raise InvalidInputError(f"matrix of shape {m.shape} has more rows than columns")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s[-1] <= rank_tol * max(1.0, s[0]):
        raise InvalidInputError("rank-deficient matrix has no semi-orthogonal projection")
    return u @ vt


def ortho_residual(m: np.ndarray) -> float:
    """Frobenius distance of M M^T from the identity."""
    gram = m @ m.T
    return float(np.linalg.norm(gram - np.eye(gram.shape[0])))


def stats_pool(frames: np.ndarray) -> np.ndarray:
    """Mean and per-dimension standard deviation over the frame axis.

    The population variance is floored at 1e-10 so the std gradient stays
    finite for constant input.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise InvalidInputError("statistics pooling needs a non-empty (T, D) matrix")
    mean = frames.mean(axis=0)
    var = np.maximum(((frames - mean) ** 2).mean(axis=0), VARIANCE_FLOOR)
    return np.concatenate([mean, np.sqrt(var)])
