"""Deterministic random streams.

Every stochastic draw in the package (trajectory simulation, noise sampling,
parameter initialization, data shuffling, the tuner) goes through a `Stream`.
A Stream is a PCG64 generator (O'Neill's pcg64, as shipped by numpy) consuming
a 64-bit seed. Gaussian variates are produced by an explicit Box-Muller
transform of the generator's 53-bit uniforms rather than numpy's ziggurat, so
the exact draw sequence is pinned by this file and reproducible from the
uniform stream alone:

    u1 = 1 - random()        # in (0, 1], avoids log(0)
    u2 = random()
    z0 = sqrt(-2 ln u1) * cos(2 pi u2)
    z1 = sqrt(-2 ln u1) * sin(2 pi u2)

`normal(n)` generates ceil(n/2) pairs and truncates; no spare is carried
between calls. Per-episode streams are derived as `base_seed XOR episode
index`, which keeps episode i identical no matter how many episodes surround
it in a dataset.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Stream"]

_TWO_PI = 2.0 * np.pi
_MASK64 = (1 << 64) - 1


class Stream:
    """A seeded random stream with a pinned draw discipline."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, index: int) -> "Stream":
        """Child stream for episode `index`: seeded with seed XOR index."""
        return Stream(self.seed ^ (int(index) & _MASK64))

    def random(self, size=None):
        """Uniforms in [0, 1) straight from the generator."""
        return self._gen.random(size)

    def uniform(self, lo: float, hi: float, size=None):
        return lo + (hi - lo) * self._gen.random(size)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def normal(self, size=None):
        """Standard normals via the documented Box-Muller transform."""
        if size is None:
            return self.normal(1)[0]
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = rad * np.cos(_TWO_PI * u2)
        z[1::2] = rad * np.sin(_TWO_PI * u2)
        z = z[:n]
        return z.reshape(size) if not np.isscalar(size) else z

    def mvn(self, chol_lower: np.ndarray):
        """Draw from N(0, L L^T) given the lower Cholesky factor L."""
        return chol_lower @ self.normal(chol_lower.shape[1])

    def shuffle(self, items: list) -> list:
        """Fisher-Yates on a copy, driven by the uniform stream."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = int(self._gen.random() * (i + 1))
            out[i], out[j] = out[j], out[i]
        return out
