"""Cosine similarity kernels and bipartite matching of src tokens to dst tokens."""

from __future__ import annotations

import numpy as np

from .core import TokenMatrix


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    A zero-norm vector compares as 0 to everything, so degenerate tokens
    never poison an argmax with NaN.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0.0, norms, 1.0)


def cosine_kernel(src_rows: np.ndarray, dst_rows: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, shape (n_src, n_dst), computed in float64."""
    sims = _unit_rows(src_rows) @ _unit_rows(dst_rows).T
    return np.clip(sims, -1.0, 1.0)


def paired_cosine(a_rows: np.ndarray, b_rows: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two equally shaped stacks of vectors."""
    a = np.asarray(a_rows)
    b = np.asarray(b_rows)
    if a.shape != b.shape:
        raise ValueError(f"row stacks differ in shape: {a.shape} vs {b.shape}")
    sims = np.sum(_unit_rows(a) * _unit_rows(b), axis=1)
    return np.clip(sims, -1.0, 1.0)


def link_best(
    src_rows: np.ndarray, dst_rows: np.ndarray, similarity=cosine_kernel
) -> tuple[np.ndarray, np.ndarray]:
    """Link every src row to its most similar dst row.

    Ties break toward the lower dst index.  Returns the per-src dst index and
    the per-src maximum similarity.
    """
    src_rows = np.asarray(src_rows)
    dst_rows = np.asarray(dst_rows)
    if dst_rows.shape[0] == 0:
        raise ValueError("dst set must be nonempty")
    if src_rows.shape[1] != dst_rows.shape[1]:
        raise ValueError(
            f"channel mismatch: src {src_rows.shape[1]} vs dst {dst_rows.shape[1]}"
        )
    sims = similarity(src_rows, dst_rows)
    assignment = np.argmax(sims, axis=1).astype(np.int64)
    scores = sims[np.arange(assignment.size), assignment]
    return assignment, scores


def bipartite_match(
    src: TokenMatrix, dst: TokenMatrix, similarity=cosine_kernel
) -> tuple[np.ndarray, np.ndarray]:
    """Assign each src token to its argmax-similarity dst token."""
    return link_best(src.data, dst.data, similarity)
