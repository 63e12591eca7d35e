"""Counter-based normal draws addressed by (seed, stream, time, factor, path).

Every draw is a pure function of its coordinates, so any block of paths can
be produced by any worker in any order and still match a serial run bit for
bit.  Backed by numpy's Philox-4x64 bijection: the key holds (seed, stream),
the counter holds (path block, time index, factor index, 0).
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
_LANES = 4  # Philox emits four 64-bit words per counter value

# stream identifiers; never renumber, files on disk depend on them
MARKET_SYSTEMATIC = 1
MARKET_IDIOSYNCRATIC = 2
MARKET_INTEGRAL = 3
CREDIT_IDIOSYNCRATIC = 16
THRESHOLD = 32


def uniforms(seed: int, stream: int, time_index: int, factor_index: int,
             start: int, count: int) -> np.ndarray:
    """Uniforms in the open interval (0, 1) for paths ``start .. start+count-1``."""
    if count <= 0:
        return np.empty(0)
    block, offset = divmod(int(start), _LANES)
    bitgen = np.random.Philox(
        key=[int(seed) & _MASK64, int(stream) & _MASK64],
        counter=[block, int(time_index), int(factor_index), 0],
    )
    raw = bitgen.random_raw(offset + count)[offset:]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def normals(seed: int, stream: int, time_index: int, factor_index: int,
            start: int, count: int) -> np.ndarray:
    """Standard normal draws by inverse-CDF of :func:`uniforms`."""
    return ndtri(uniforms(seed, stream, time_index, factor_index, start, count))


def normal_block(seed: int, stream: int, n_times: int, n_factors: int,
                 start: int, count: int, first_time: int = 1) -> np.ndarray:
    """Draws shaped ``(n_times, count, n_factors)``.

    Row ``k`` holds time index ``first_time + k``; with the default
    ``first_time=1`` row 0 of the caller's grid-aligned array is left for t=0.
    """
    out = np.empty((n_times, count, n_factors))
    for k in range(n_times):
        for f in range(n_factors):
            out[k, :, f] = normals(seed, stream, first_time + k, f, start, count)
    return out
