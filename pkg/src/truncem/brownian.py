"""Reproducible Wiener increments with exact coarsening.

Algorithm (pinned; golden tests depend on it):

1. Draw ``j`` of path ``(seed, path_id)`` is the ``j``-th 64-bit output of
   ``numpy.random.Philox`` keyed by ``seed + 2**64 * path_id``.  Philox is
   counter based, so any block of draws can be produced without generating
   the ones before it.
2. The draw becomes a uniform ``u = ((raw >> 11) + 0.5) / 2**53`` and then a
   standard normal ``z = ndtri(u)``.
3. The increment is ``sqrt(step) * z`` rounded to the nearest multiple of
   ``QUANTUM = 2**-36``.

Because every increment lies on a dyadic lattice, sums of increments are
exact in double precision as long as the running total stays below
``2**53 * QUANTUM = 2**17``.  Coarsening therefore represents the same
path on every grid and is associative to the last bit.

Increments of a multi-dimensional driver are laid out row-major: draw
``j * dim_w + c`` feeds component ``c`` of step ``j``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .core import ConfigurationError, steps_per

__all__ = [
    "QUANTUM",
    "BrownianGrid",
    "generate",
    "coarsen",
    "increment_block",
    "increment_blocks",
    "dump",
    "load",
]

QUANTUM = 2.0**-36
_EXACT_LIMIT = 2.0**53 * QUANTUM
_HEADER = struct.Struct("<QQddQ")


def _key(seed: int, path_id: int) -> int:
    if not 0 <= seed < 2**64:
        raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    if not 0 <= path_id < 2**64:
        raise ConfigurationError(f"path_id must be an unsigned 64-bit integer, got {path_id}")
    return int(seed) + (int(path_id) << 64)


def _raw(seed: int, path_id: int, first: int, count: int) -> np.ndarray:
    # Philox4x64 emits four words per counter value
    bitgen = np.random.Philox(key=_key(seed, path_id), counter=first // 4)
    skip = first % 4
    return bitgen.random_raw(count + skip)[skip:]


def _to_increments(raw: np.ndarray, step: float) -> np.ndarray:
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    z = ndtri(u)
    return np.rint(z * (np.sqrt(step) / QUANTUM)) * QUANTUM


def increment_block(seed: int, path_id: int, step: float, start: int, stop: int, dim_w: int = 1) -> np.ndarray:
    """Increments for steps ``start .. stop-1`` of one path, shape ``(stop-start, dim_w)``."""
    n = stop - start
    raw = _raw(seed, path_id, start * dim_w, n * dim_w)
    return _to_increments(raw, step).reshape(n, dim_w)


def increment_blocks(seed: int, path_ids, step: float, start: int, stop: int, dim_w: int = 1) -> np.ndarray:
    """Stacked :func:`increment_block` for many paths, shape ``(P, stop-start, dim_w)``."""
    n = stop - start
    raw = np.stack([_raw(seed, int(p), start * dim_w, n * dim_w) for p in path_ids])
    return _to_increments(raw, step).reshape(len(raw), n, dim_w)


@dataclass(frozen=True, eq=False)
class BrownianGrid:
    """Increments of one Brownian path on a uniform grid of ``[0, horizon]``."""

    finest_step: float
    horizon: float
    dim_w: int
    increments: np.ndarray
    seed: int
    path_id: int

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def path(self) -> np.ndarray:
        """Values ``B(t_k)`` for ``k = 0..n_steps`` (``B(0) = 0``)."""
        out = np.zeros((self.n_steps + 1, self.dim_w))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out

    def __eq__(self, other):
        if not isinstance(other, BrownianGrid):
            return NotImplemented
        return (
            self.finest_step == other.finest_step
            and self.horizon == other.horizon
            and self.dim_w == other.dim_w
            and self.seed == other.seed
            and self.path_id == other.path_id
            and np.array_equal(self.increments, other.increments)
        )


def generate(seed: int, path_id: int, finest_step: float, horizon: float, dim_w: int = 1) -> BrownianGrid:
    """Generate the increments of path ``path_id`` for stream ``seed``."""
    n = steps_per(horizon, finest_step, "horizon")
    inc = increment_block(seed, path_id, finest_step, 0, n, dim_w)
    if np.abs(inc).sum(axis=0).max() >= _EXACT_LIMIT:
        raise ConfigurationError("horizon too long for exact dyadic summation of increments")
    inc.setflags(write=False)
    return BrownianGrid(float(finest_step), float(horizon), int(dim_w), inc, int(seed), int(path_id))


def _coarsen_array(inc: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` steps along axis ``-2``."""
    if factor == 1:
        return inc
    shape = inc.shape[:-2] + (inc.shape[-2] // factor, factor, inc.shape[-1])
    return inc.reshape(shape).sum(axis=-2)


def coarsen(grid: BrownianGrid, factor: int) -> BrownianGrid:
    """Same Brownian path on a grid ``factor`` times coarser."""
    if factor < 1 or grid.n_steps % factor:
        raise ConfigurationError(f"factor {factor} does not divide the {grid.n_steps} steps of the grid")
    if factor == 1:
        return grid
    inc = _coarsen_array(grid.increments, factor)
    inc.setflags(write=False)
    return BrownianGrid(grid.finest_step * factor, grid.horizon, grid.dim_w, inc, grid.seed, grid.path_id)


def dump(grid: BrownianGrid, path) -> None:
    """Write header ``(seed, path_id, finest_step, horizon, dim_w)`` and the
    increments as little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(grid.seed, grid.path_id, grid.finest_step, grid.horizon, grid.dim_w))
        fh.write(np.ascontiguousarray(grid.increments, dtype="<f8").tobytes())


def load(path) -> BrownianGrid:
    data = Path(path).read_bytes()
    seed, path_id, step, horizon, dim_w = _HEADER.unpack_from(data)
    inc = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    if inc.size % dim_w:
        raise ConfigurationError("payload size is not a multiple of dim_w")
    inc = inc.reshape(-1, dim_w)
    inc.setflags(write=False)
    return BrownianGrid(step, horizon, dim_w, inc, seed, path_id)
