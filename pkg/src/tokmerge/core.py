"""Core token-merge types and the mechanics of applying a merge plan.

A merge plan partitions the token index set {0..N-1} into three groups:
destination anchors (dst), independent tokens, and merged tokens.  Applying
a plan reduces the token count to ``n_out = n_dst + n_independent``; the
unmerge step restores the original count by copying each destination's
processed value back to every position that was merged into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

STRATEGY_NONE = "none"
STRATEGY_GRID = "tome-random-grid"
STRATEGY_POOL = "importance-pool"
STRATEGY_TOPK = "topk-dst"
STRATEGIES = (STRATEGY_NONE, STRATEGY_GRID, STRATEGY_POOL, STRATEGY_TOPK)

# Decimal ratios are not exactly representable in binary (10 * 0.7 evaluates
# to 6.999...), so floors of count formulas get a small upward guard.
_FLOOR_EPS = 1e-9


class InvalidPlanError(ValueError):
    """A merge plan disagrees with the tokens it is applied to."""


class ConfigInfeasibleError(ValueError):
    """The requested fractions cannot produce a valid token partition."""


def _floor_count(x: float) -> int:
    return int(math.floor(x + _FLOOR_EPS))


@dataclass(frozen=True)
class TokenMatrix:
    """An ordered set of token feature vectors with stable positional indices.

    ``data`` is ``(n_tokens, n_channels)``; an optional ``grid`` of
    ``(height, width)`` declares the row-major spatial layout, in which case
    token ``i`` sits at row ``i // width``, column ``i % width``.
    """

    data: np.ndarray
    grid: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(
                f"token data must be (n_tokens, n_channels), got shape {data.shape}"
            )
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("token data must be finite")
        object.__setattr__(self, "data", data)
        if self.grid is not None:
            h, w = self.grid
            if h < 1 or w < 1 or h * w != data.shape[0]:
                raise ValueError(
                    f"grid {self.grid} incompatible with {data.shape[0]} tokens"
                )
            object.__setattr__(self, "grid", (int(h), int(w)))

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ImportanceMap:
    """One non-negative relevance score per token position."""

    scores: np.ndarray
    source_timestep: int = 0

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.shape[0] < 1:
            raise ValueError(f"scores must be 1-D, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ValueError("importance scores must be finite")
        if np.any(scores < 0):
            raise ValueError("importance scores must be non-negative")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "source_timestep", int(self.source_timestep))

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class MergeConfig:
    """Strategy choice plus the merge hyper-parameters.

    ``r`` is the fraction of tokens removed by merging, ``k`` the destination
    fraction, ``p`` the pool-size headroom factor, ``prune_steps`` the number
    of early sampling steps that drop (rather than average) merged tokens.
    """

    strategy: str
    r: float
    k: float = 0.25
    p: float = 0.4
    prune_steps: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigInfeasibleError(
                f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        if not 0.0 <= self.r < 1.0:
            raise ConfigInfeasibleError(f"merge ratio r={self.r} must be in [0, 1)")
        if not 0.0 < self.k < 1.0:
            raise ConfigInfeasibleError(f"dst fraction k={self.k} must be in (0, 1)")
        # k + r == 1 is allowed: it just leaves zero independent tokens.
        if self.k + self.r > 1.0 + _FLOOR_EPS:
            raise ConfigInfeasibleError(
                f"k + r = {self.k + self.r} > 1 would need a negative "
                "independent-token count"
            )
        if self.p < 0.0:
            raise ConfigInfeasibleError(f"pool factor p={self.p} must be >= 0")
        if self.prune_steps < 0:
            raise ConfigInfeasibleError("prune_steps must be >= 0")
        object.__setattr__(self, "prune_steps", int(self.prune_steps))
        object.__setattr__(self, "seed", int(self.seed))


class PlanCounts(NamedTuple):
    """Token counts implied by (n, r, k, p): pool, dst, independent, reduced."""

    pool_size: int
    n_dst: int
    n_independent: int
    n_out: int


def counts_for(n: int, config: MergeConfig) -> PlanCounts:
    """Derive the token-partition counts for ``n`` input tokens.

    All fractional counts floor; the independent count is defined residually
    as ``n_out - n_dst`` so the reduced count is exactly ``floor(n * (1-r))``.
    The pool is clamped into ``[n_out, n]``.

    Raises:
        ConfigInfeasibleError: if rounding produces no destinations or a
            negative independent count.
    """
    if n < 4:
        raise ConfigInfeasibleError(f"need at least 4 tokens, got {n}")
    n_dst = _floor_count(n * config.k)
    n_out = _floor_count(n * (1.0 - config.r))
    n_independent = n_out - n_dst
    pool_size = min(n, _floor_count(n * (1.0 - config.r) * (1.0 + config.p)))
    pool_size = max(pool_size, n_out)
    if n_dst <= 0:
        raise ConfigInfeasibleError(f"k={config.k} yields no dst tokens for n={n}")
    if n_independent < 0:
        raise ConfigInfeasibleError(
            f"r={config.r}, k={config.k} yield negative independent count "
            f"({n_independent}) for n={n}"
        )
    return PlanCounts(pool_size, n_dst, n_independent, n_out)


@dataclass(eq=False)
class MergePlan:
    """The computed partition plus the src-to-dst assignment.

    Reusable for merge, prune, and unmerge.  ``dst_indices`` and
    ``independent_indices`` are stored in ascending order; the reduced
    matrix is laid out ``[dst..., independent...]`` in that order.
    """

    n_in: int
    dst_indices: np.ndarray
    independent_indices: np.ndarray
    merged_assignment: dict[int, int]

    # Derived lookup tables, filled in __post_init__.
    _merged_src: np.ndarray = field(repr=False, default=None)
    _merged_dst_pos: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        self.n_in = int(self.n_in)
        dst = np.asarray(self.dst_indices, dtype=np.int64)
        ind = np.asarray(self.independent_indices, dtype=np.int64)
        if dst.size == 0:
            raise InvalidPlanError("plan needs at least one dst token")
        src = np.fromiter(
            sorted(self.merged_assignment), dtype=np.int64, count=len(self.merged_assignment)
        )
        targets = np.fromiter(
            (self.merged_assignment[i] for i in src), dtype=np.int64, count=src.size
        )
        all_idx = np.concatenate([dst, ind, src])
        if all_idx.size != self.n_in or not np.array_equal(
            np.sort(all_idx), np.arange(self.n_in)
        ):
            raise InvalidPlanError(
                "dst, independent, and merged indices must partition the token set"
            )
        pos = np.full(self.n_in, -1, dtype=np.int64)
        pos[dst] = np.arange(dst.size)
        if src.size and np.any(pos[targets] < 0):
            raise InvalidPlanError("merged tokens must be assigned to dst indices")
        self.dst_indices = dst
        self.independent_indices = ind
        self.merged_assignment = {int(s): int(t) for s, t in zip(src, targets)}
        self._merged_src = src
        self._merged_dst_pos = pos[targets] if src.size else np.empty(0, dtype=np.int64)

    @property
    def n_out(self) -> int:
        return self.dst_indices.size + self.independent_indices.size

    @property
    def n_merged(self) -> int:
        return self._merged_src.size

    @property
    def merged_sources(self) -> np.ndarray:
        """Merged token indices, ascending."""
        return self._merged_src

    @property
    def merged_targets(self) -> np.ndarray:
        """The dst token index each merged token is assigned to, aligned with
        :attr:`merged_sources`."""
        return self.dst_indices[self._merged_dst_pos]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MergePlan):
            return NotImplemented
        return (
            self.n_in == other.n_in
            and np.array_equal(self.dst_indices, other.dst_indices)
            and np.array_equal(self.independent_indices, other.independent_indices)
            and self.merged_assignment == other.merged_assignment
        )


def identity_plan(n: int) -> MergePlan:
    """A plan that keeps every token as its own dst and merges nothing."""
    return MergePlan(n, np.arange(n, dtype=np.int64), np.empty(0, dtype=np.int64), {})


def _check_plan_input(tokens: TokenMatrix, plan: MergePlan) -> None:
    if plan.n_in != tokens.n_tokens:
        raise InvalidPlanError(
            f"plan built for {plan.n_in} tokens applied to {tokens.n_tokens}"
        )


def apply_merge(tokens: TokenMatrix, plan: MergePlan) -> TokenMatrix:
    """Reduce tokens per plan, averaging each dst with the tokens merged into it.

    Returns ``plan.n_out`` tokens ordered ``[dst..., independent...]``.
    Group means accumulate in float64 and round once to the input dtype.
    """
    _check_plan_input(tokens, plan)
    data = tokens.data
    dst = data[plan.dst_indices].astype(np.float64)
    if plan.n_merged:
        counts = np.ones(plan.dst_indices.size, dtype=np.float64)
        np.add.at(dst, plan._merged_dst_pos, data[plan._merged_src].astype(np.float64))
        np.add.at(counts, plan._merged_dst_pos, 1.0)
        dst /= counts[:, None]
    out = np.concatenate(
        [dst.astype(data.dtype, copy=False), data[plan.independent_indices]], axis=0
    )
    return TokenMatrix(out)


def apply_prune(tokens: TokenMatrix, plan: MergePlan) -> TokenMatrix:
    """Reduce tokens per plan, dropping merged tokens instead of averaging.

    Destinations pass through unchanged; unmerging a pruned matrix uses
    :func:`apply_unmerge` exactly as for a merged one.
    """
    _check_plan_input(tokens, plan)
    data = tokens.data
    out = np.concatenate(
        [data[plan.dst_indices], data[plan.independent_indices]], axis=0
    )
    return TokenMatrix(out)


def apply_unmerge(processed: TokenMatrix, plan: MergePlan) -> TokenMatrix:
    """Restore the original token count from a reduced, processed matrix.

    Dst and independent positions receive their processed values; every
    merged position receives its assigned dst's processed value.
    """
    if processed.n_tokens != plan.n_out:
        raise InvalidPlanError(
            f"plan expects {plan.n_out} processed tokens, got {processed.n_tokens}"
        )
    data = processed.data
    n_dst = plan.dst_indices.size
    out = np.empty((plan.n_in, processed.n_channels), dtype=data.dtype)
    out[plan.dst_indices] = data[:n_dst]
    out[plan.independent_indices] = data[n_dst:]
    if plan.n_merged:
        out[plan._merged_src] = data[plan._merged_dst_pos]
    return TokenMatrix(out)
