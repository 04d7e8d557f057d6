"""Hierarchical, path-addressed random streams for reproducible pipelines.

A stream is identified by a master seed plus an integer path. Distinct paths
yield statistically independent generators regardless of creation order or
worker scheduling, so any pipeline stage can be re-derived in isolation.
"""

import numpy as np


class RngStream:
    """A deterministic random stream keyed by (master_seed, path)."""

    def __init__(self, master_seed: int, path: tuple[int, ...] = ()):
        self.master_seed = int(master_seed)
        self.path = tuple(int(p) for p in path)
        self._gen: np.random.Generator | None = None

    def child(self, *indices: int) -> "RngStream":
        """Derive an independent sub-stream by extending the path."""
        return RngStream(self.master_seed, self.path + tuple(int(i) for i in indices))

    @property
    def gen(self) -> np.random.Generator:
        """The underlying generator; lazily created, draws advance its state."""
        if self._gen is None:
            seq = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.PCG64(seq))
        return self._gen

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, path={self.path})"
