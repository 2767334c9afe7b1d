"""Dimensionality-compression objective and its building blocks.

The per-block goodness treats channels as neurons and feature-map positions
(and noisy copies) as samples.  Effective dimensionality of a sample set is
computed from the second uncentered moment M = E[x x^T] as trace(M)^2 / |M|_F^2,
which equals (sum lambda)^2 / (sum lambda^2) for PSD M without ever forming an
eigendecomposition, so it stays cheap and smoothly differentiable.  The loss
trades a consistency term (ED over noisy copies of one input, batch-averaged)
against a diversity term (ED over copy-mean responses across the batch).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, index_select0, matmul, tmean, trace_last2, transpose, tsum

GRADED_DIMS = {
    "mnist": (30, 20, 10),
    "cifar10": (30, 20, 10),
    "cifar100": (90, 150, 100),
}

RANDOM_DIM_RANGES = {
    "mnist": (10, 60),
    "cifar10": (10, 60),
    "cifar100": (100, 300),
}


@dataclass
class MomentSummary:
    """Second uncentered moment of a sample set, with its two scalar stats."""

    matrix: Tensor        # [d, d]
    trace: Tensor         # scalar
    frob_sq: Tensor       # scalar, sum of squared entries


@dataclass
class ProjectionBasis:
    """A fixed k x d matrix with orthonormal rows, tied to one block."""

    matrix: np.ndarray
    seed: int
    block_index: int

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


@dataclass
class GoodnessConfig:
    alpha: float = 0.5
    n_copies: int = 20
    projection_strategy: str = "graded"
    projection_dims: tuple[int, ...] | None = None
    eps: float = 1e-12
    supervision: str = "unsup"
    dropout_p: float = 0.2

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.n_copies < 1:
            raise ValueError("n_copies must be >= 1")
        if self.projection_strategy not in ("graded", "fixed", "random", "none"):
            raise ValueError(f"unknown projection strategy {self.projection_strategy!r}")
        if self.supervision not in ("unsup", "sup_sampling", "sup"):
            raise ValueError(f"unknown supervision mode {self.supervision!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        return self


def second_moment(samples: Tensor | np.ndarray) -> MomentSummary:
    """M = (1/n) sum_s x_s x_s^T for samples given as rows of an [n, d] array."""
    samples = samples if isinstance(samples, Tensor) else Tensor(samples)
    if samples.data.ndim != 2:
        raise ValueError(f"expected [n, d] samples, got shape {samples.data.shape}")
    n = samples.data.shape[0]
    if n < 1:
        raise ValueError("second_moment needs at least one sample")
    m = matmul(transpose(samples, (1, 0)), samples) * (1.0 / n)
    return MomentSummary(matrix=m, trace=trace_last2(m), frob_sq=tsum(m * m))


def effective_dim(m: MomentSummary, eps: float = 1e-12) -> Tensor:
    """trace(M)^2 / (|M|_F^2 + eps); equals (sum lambda)^2 / sum lambda^2."""
    return (m.trace * m.trace) / (m.frob_sq + eps)


def _batched_moments(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-instance trace and squared Frobenius norm of X_i^T X_i / n."""
    n = x.data.shape[1]
    m = matmul(transpose(x, (0, 2, 1)), x) * (1.0 / n)
    return trace_last2(m), tsum(m * m, axis=(-2, -1))


def channels_as_samples(acts: Tensor) -> tuple[Tensor, Tensor]:
    """Reshape block activations [B,N,C,H,W] into the two ED sample sets.

    Returns ``(per_input, pooled)`` where ``per_input`` is [B, N*H*W, C]
    (noisy copies and spatial positions jointly sample each input's response)
    and ``pooled`` is [B*H*W, C] built from the copy-mean responses, whose
    spatial positions across the whole batch sample the data distribution.
    """
    if acts.data.ndim != 5:
        raise ValueError(f"expected [B,N,C,H,W] activations, got shape {acts.data.shape}")
    b, n, c, h, w = acts.data.shape
    per_input = transpose(acts, (0, 1, 3, 4, 2)).reshape(b, n * h * w, c)
    means = tmean(acts, axis=1)  # [B,C,H,W]
    pooled = transpose(means, (0, 2, 3, 1)).reshape(b * h * w, c)
    return per_input, pooled


def haar_basis(k: int, d: int, seed: int, block_index: int = 0) -> ProjectionBasis:
    """First k rows of a Haar-distributed d x d orthogonal matrix.

    QR of a standard Gaussian matrix with the R-diagonal sign correction that
    makes the factorization unique (and the Q factor Haar).
    """
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[None, :]
    return ProjectionBasis(matrix=np.ascontiguousarray(q[:k]), seed=seed, block_index=block_index)


def project(samples: Tensor, basis: ProjectionBasis) -> Tensor:
    """Map each row v to P v; the basis is a constant, gradients pass to v."""
    d = samples.data.shape[-1]
    if d != basis.d:
        raise ValueError(f"basis expects dimension {basis.d}, samples have {d}")
    pt = Tensor(basis.matrix.T.astype(samples.data.dtype, copy=False))
    return matmul(samples, pt)


def ed_consistency(projected: Tensor, labels: np.ndarray | None = None,
                   supervision: str = "unsup", eps: float = 1e-12) -> Tensor:
    """Consistency term: mean effective dimensionality of per-group responses.

    Unsupervised, each input's [n, k] block of rows is one group.  With
    class supervision the rows of same-label inputs are merged before the
    moment is taken; label groups with fewer than two sample rows are skipped.
    """
    if projected.data.ndim != 3:
        raise ValueError(f"expected [B, n, k] samples, got shape {projected.data.shape}")
    b, n, _ = projected.data.shape
    if supervision == "unsup" or labels is None:
        if n < 2:
            raise ValueError("consistency needs at least 2 samples per input")
        tr, fr = _batched_moments(projected)
        return tmean((tr * tr) / (fr + eps))

    labels = np.asarray(labels)
    group_eds = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size * n < 2:
            warnings.warn(f"skipping singleton group for label {int(cls)}", stacklevel=2)
            continue
        rows = index_select0(projected, idx).reshape(idx.size * n, projected.data.shape[2])
        group_eds.append(effective_dim(second_moment(rows), eps=eps))
    if not group_eds:
        raise ValueError("no label group has 2 or more samples")
    total = group_eds[0]
    for ed in group_eds[1:]:
        total = total + ed
    return total * (1.0 / len(group_eds))


def ed_diversity(copy_means: Tensor, eps: float = 1e-12) -> Tensor:
    """Diversity term: ED of the second moment of copy-mean responses."""
    if copy_means.data.ndim != 2:
        raise ValueError(f"expected [M, k] samples, got shape {copy_means.data.shape}")
    if copy_means.data.shape[0] < 1:
        raise ValueError("diversity needs a non-empty batch")
    return effective_dim(second_moment(copy_means), eps=eps)


def dc_loss(ed_c: Tensor, ed_d: Tensor, alpha: float) -> Tensor:
    """alpha * ED_c - (1 - alpha) * ED_d, minimized during block training."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return ed_c * alpha - ed_d * (1.0 - alpha)


def block_goodness(acts: Tensor, basis: ProjectionBasis | None, cfg: GoodnessConfig,
                   labels: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Full per-block objective: returns (loss, ed_c, ed_d) graph nodes."""
    per_input, pooled = channels_as_samples(acts)
    if basis is not None:
        per_input = project(per_input, basis)
        pooled = project(pooled, basis)
    sup_labels = labels if cfg.supervision in ("sup", "sup_sampling") else None
    edc = ed_consistency(per_input, labels=sup_labels, supervision=cfg.supervision, eps=cfg.eps)
    edd = ed_diversity(pooled, eps=cfg.eps)
    return dc_loss(edc, edd, cfg.alpha), edc, edd


def cos_score(kernels: np.ndarray) -> float:
    """Pairwise-cosine orthogonality summary of a kernel stack [d, ...].

    1 for mutually orthogonal kernels, 1/d when all kernels coincide; each
    row i >= 2 contributes the average of (1 - cos) against earlier rows.
    """
    k = np.asarray(kernels, dtype=np.float64).reshape(kernels.shape[0], -1)
    d = k.shape[0]
    if d < 2:
        raise ValueError("need at least 2 kernels")
    norms = np.linalg.norm(k, axis=1)
    dead = np.flatnonzero(norms == 0)
    if dead.size:
        raise ValueError(f"zero-norm kernel at channel {int(dead[0])}")
    unit = k / norms[:, None]
    cosines = unit @ unit.T
    total = 1.0
    for i in range(1, d):
        total += np.sum(1.0 - cosines[i, :i]) / i
    return float(total / d)


def resolve_projection_dims(cfg: GoodnessConfig, dataset: str, n_classes: int,
                            channels: tuple[int, ...], seed: int) -> tuple[int, ...] | None:
    """Per-block projection dimensions implied by the configured strategy.

    Explicit ``projection_dims`` win.  ``graded`` walks the per-dataset
    schedule, ``fixed`` targets the class count (falling back to the graded
    value where a block has too few channels), ``random`` draws uniformly
    from the per-dataset range, and ``none`` disables projection entirely.
    Every dimension is capped at the block's channel count.
    """
    if cfg.projection_dims is not None:
        dims = tuple(int(v) for v in cfg.projection_dims)
        if len(dims) != len(channels):
            raise ValueError(f"need {len(channels)} projection dims, got {len(dims)}")
        for b, (dim, c) in enumerate(zip(dims, channels)):
            if not 1 <= dim <= c:
                raise ValueError(f"projection dim {dim} invalid for block {b + 1} with {c} channels")
        return dims
    if cfg.projection_strategy == "none":
        return None
    graded = GRADED_DIMS.get(dataset, GRADED_DIMS["mnist"])
    if cfg.projection_strategy == "graded":
        dims = graded
    elif cfg.projection_strategy == "fixed":
        dims = tuple(n_classes if n_classes <= c else g for g, c in zip(graded, channels))
    else:  # random
        lo, hi = RANDOM_DIM_RANGES.get(dataset, RANDOM_DIM_RANGES["mnist"])
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD1)))
        dims = tuple(
            g if hi > c else int(rng.integers(lo, hi + 1))
            for g, c in zip(graded, channels)
        )
    return tuple(min(dim, c) for dim, c in zip(dims, channels))
