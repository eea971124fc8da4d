"""Counter-based seed derivation.

Every random number in a run is a pure function of integer keys, so any
single sample (or site) can be regenerated in isolation and results do not
depend on evaluation order or worker count.

The mixing function is SplitMix64: for a stream key ``k`` the value at
position ``i`` is ``mix(k + (i + 1) * GOLDEN)``, i.e. the i-th output of a
SplitMix64 generator seeded with ``k``.  Nested keys are folded with
``derive_seed``.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _C1) & MASK64
    z = ((z ^ (z >> 27)) * _C2) & MASK64
    return z ^ (z >> 31)


def derive_seed(*keys: int) -> int:
    """Fold integer keys into one 64-bit seed, order-sensitively."""
    h = 0
    for key in keys:
        h = mix64(h + GOLDEN + mix64(int(key) & MASK64))
    return h


def _mix64_array(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_C1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_C2)
        return z ^ (z >> np.uint64(31))


def uniforms(seed: int, n: int, stream: int = 0) -> np.ndarray:
    """``n`` open-interval uniforms on (0, 1) for positions 0..n-1 of a stream."""
    key = np.uint64(derive_seed(seed, stream))
    counters = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64_array(key + counters * np.uint64(GOLDEN))
    # top 53 bits, shifted half an ulp off zero so log/inverse-CDF stay finite
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
