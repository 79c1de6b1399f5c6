"""Counter-based random streams usable inside compiled kernels.

Output n of a stream with key K is ``mix(K + n * GAMMA)`` (SplitMix64), so
replicate streams are independent of scheduling and trivially reproducible.
"""
import numpy as np
from numba import njit

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_SALT = np.uint64(0xD1B54A32D192ED03)


@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def stream_key(master, replicate):
    """Key of the stream used by ``replicate`` under ``master`` seed."""
    a = mix64(np.uint64(master) * _SALT + GAMMA)
    return mix64(a + np.uint64(replicate) * GAMMA + _SALT)


@njit(cache=True)
def next_u64(state):
    state[0] += GAMMA
    return mix64(state[0])


@njit(cache=True)
def uniform(state):
    """Uniform double on [0, 1)."""
    return float(next_u64(state) >> _S11) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def exponential(state):
    return -np.log(1.0 - uniform(state))


@njit(cache=True)
def randbelow(state, n):
    return min(int(uniform(state) * n), n - 1)


def new_state(master: int, replicate: int) -> np.ndarray:
    return np.array([stream_key(np.uint64(master), np.uint64(replicate))], dtype=np.uint64)


def generator(master: int, replicate: int) -> np.random.Generator:
    """numpy Generator for Python-level draws tied to one replicate."""
    return np.random.Generator(np.random.Philox(key=int(stream_key(np.uint64(master), np.uint64(replicate)))
                                                ^ 0x5851F42D4C957F2D))
