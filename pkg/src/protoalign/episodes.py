"""N-way K-shot episode construction, deterministic under a seed.

Episode i of a stream is a pure function of (master seed, i): the per-episode
generator is seeded with ``SeedSequence(master_seed, spawn_key=(i,))``, so any
episode is reproducible in isolation and streams can be consumed from
multiple workers without shared RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import SamplingError


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task with episode-local query labels."""

    class_ids: tuple  # N global class ids; local label i maps to class_ids[i]
    support_images: np.ndarray  # (N, K, H, W, C)
    support_indices: np.ndarray  # (N, K) global dataset indices
    query_images: np.ndarray  # (N*Q, H, W, C)
    query_labels: np.ndarray  # (N*Q,) values in [0, N)
    query_indices: np.ndarray  # (N*Q,) global dataset indices
    n_way: int
    k_shot: int
    q_per_class: int

    def fingerprint(self) -> tuple:
        """Identity of the sampled examples (for pairing guarantees)."""
        return (
            self.class_ids,
            tuple(self.support_indices.reshape(-1).tolist()),
            tuple(self.query_indices.tolist()),
        )


def sample_episode(
    split_classes,
    dataset: Dataset,
    n_way: int,
    k_shot: int,
    q_per_class: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw one episode: N distinct classes, then K+Q distinct examples each.

    Classes and examples are sampled uniformly without replacement; the first
    K examples of each class form the support set and the next Q the queries.
    """
    if n_way < 1 or k_shot < 1 or q_per_class < 1:
        raise SamplingError("n_way, k_shot and q_per_class must all be >= 1")
    classes = np.array(sorted(int(c) for c in split_classes), dtype=np.int64)
    if classes.size < n_way:
        raise SamplingError(
            f"cannot sample {n_way}-way episodes from {classes.size} classes"
        )
    chosen = rng.choice(classes, size=n_way, replace=False)

    need = k_shot + q_per_class
    support_idx = np.empty((n_way, k_shot), dtype=np.int64)
    query_idx = np.empty((n_way, q_per_class), dtype=np.int64)
    for local, cid in enumerate(chosen):
        pool = dataset.indices_of(int(cid))
        if pool.size < need:
            raise SamplingError(
                f"class {int(cid)} has {pool.size} examples, "
                f"needs {need} (K={k_shot} + Q={q_per_class})"
            )
        picked = rng.choice(pool, size=need, replace=False)
        support_idx[local] = picked[:k_shot]
        query_idx[local] = picked[k_shot:]

    flat_query = query_idx.reshape(-1)
    return Episode(
        class_ids=tuple(int(c) for c in chosen),
        support_images=dataset.images[support_idx],
        support_indices=support_idx,
        query_images=dataset.images[flat_query],
        query_labels=np.repeat(np.arange(n_way, dtype=np.int64), q_per_class),
        query_indices=flat_query,
        n_way=n_way,
        k_shot=k_shot,
        q_per_class=q_per_class,
    )


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """The RNG behind episode ``index`` of a stream with master ``seed``."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))
    )


def episode_at(
    split_classes,
    dataset: Dataset,
    n_way: int,
    k_shot: int,
    q_per_class: int,
    seed: int,
    index: int,
) -> Episode:
    """Episode ``index`` of the stream, reproducible in isolation."""
    return sample_episode(
        split_classes, dataset, n_way, k_shot, q_per_class, episode_rng(seed, index)
    )


def episode_stream(
    split_classes,
    dataset: Dataset,
    n_way: int,
    k_shot: int,
    q_per_class: int,
    count: int,
    seed: int,
):
    """Lazily yield ``count`` independent episodes from one master seed."""
    if count < 1:
        raise SamplingError(f"episode count must be >= 1, got {count}")
    for i in range(count):
        yield episode_at(split_classes, dataset, n_way, k_shot, q_per_class, seed, i)
