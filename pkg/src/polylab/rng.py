"""Counter-based randomness with documented stream derivation.

Per-site potential values must not depend on iteration order or box shape:
regenerating any sub-box from (seed, site) has to reproduce the same value.
We therefore hash (seed, coordinates) into a 64-bit word with the splitmix64
finalizer (the avalanche used by SplittableRandom / xoshiro seeding) and map
it to a uniform in [0, 1).  Stream rule, fixed forever:

    state = mix64(seed ^ SALT)
    for c in coords:  state = mix64(state ^ to_u64(c) ^ GOLDEN)
    u = (mix64(state) >> 11) * 2**-53

Everything that is not a per-site field (path sampling, replica draws,
bootstrap) uses numpy Generators seeded through ``derive_seed`` so that one
master seed determines the whole experiment.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SALT = np.uint64(0x5851F42D4C957F2D)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def site_uniforms(seed: int, coords) -> np.ndarray:
    """Uniform [0,1) per site; coords is an (n, d) integer array."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim == 1:
        coords = coords[None, :]
    with np.errstate(over="ignore"):
        state = np.full(coords.shape[0], _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _SALT),
                        dtype=np.uint64)
        for j in range(coords.shape[1]):
            state = _mix64(state ^ coords[:, j].astype(np.uint64) ^ _GOLDEN)
        out = _mix64(state)
    return (out >> np.uint64(11)).astype(np.float64) * 2.0**-53


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit sub-seed for a named stream (tags: ints or short strings)."""
    with np.errstate(over="ignore"):
        state = _mix64(np.uint64(master & 0xFFFFFFFFFFFFFFFF) ^ _GOLDEN)
        for t in tags:
            if isinstance(t, str):
                for ch in t.encode():
                    state = _mix64(state ^ np.uint64(ch) ^ _SALT)
            else:
                state = _mix64(state ^ np.uint64(int(t) & 0xFFFFFFFFFFFFFFFF))
    return int(state & np.uint64(0x7FFFFFFFFFFFFFFF))


def generator(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
