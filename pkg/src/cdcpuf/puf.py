"""Additive delay model for arbiter, XOR and CDC-XOR PUFs.

A component arbiter PUF with ``n`` stages is a weight vector ``w`` of length
``n + 1``. Its delay difference on challenge ``c`` is ``w[:n] . phi(c) + w[n]``
where ``phi`` is the parity feature transform, and it answers 1 iff the delay
difference is strictly positive.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

_PUF_MAGIC = b"PUFI"
_PUF_VERSION = 1
_PUF_HEADER = struct.Struct("<4sBHBd")


def _as_bits(c, name="challenge"):
    c = np.asarray(c)
    if c.ndim == 0 or c.shape[-1] == 0:
        raise InvalidInputError(f"{name} must contain at least one bit")
    if c.dtype != np.uint8:
        if not np.all((c == 0) | (c == 1)):
            raise InvalidInputError(f"{name} bits must be 0 or 1")
        c = c.astype(np.uint8)
    elif c.size and c.max() > 1:
        raise InvalidInputError(f"{name} bits must be 0 or 1")
    return c


def transform_challenge(c, dtype=np.float64):
    """Parity feature transform over the last axis of ``c``.

    ``phi[i] = prod_{j >= i} (1 - 2 c[j])``, so every feature is +1 or -1.
    Works on a single challenge or on any batch shape ``(..., n)``.
    """
    c = _as_bits(c)
    signs = (1 - 2 * c.astype(np.int8)).astype(np.int8)
    phi = np.flip(np.cumprod(np.flip(signs, axis=-1), axis=-1, dtype=np.int8), axis=-1)
    return phi.astype(dtype, copy=False)


def features_with_bias(c, dtype=np.float64):
    """``[phi(c); 1]`` over the last axis, length ``n + 1``."""
    phi = transform_challenge(c, dtype=dtype)
    ones = np.ones(phi.shape[:-1] + (1,), dtype=dtype)
    return np.concatenate([phi, ones], axis=-1)


@dataclass(frozen=True, eq=False)
class ArbiterPuf:
    weights: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 2:
            raise InvalidInputError("arbiter weights must be a vector of length n + 1 >= 2")
        if not self.noise_sigma >= 0:
            raise InvalidInputError("noise_sigma must be nonnegative")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))

    @property
    def n(self):
        return self.weights.size - 1

    def __eq__(self, other):
        if not isinstance(other, ArbiterPuf):
            return NotImplemented
        return self.noise_sigma == other.noise_sigma and np.array_equal(self.weights, other.weights)


@dataclass(frozen=True, eq=False)
class CdcXorPuf:
    """``k`` arbiter PUFs of equal length whose responses are XORed.

    ``weights`` has shape ``(k, n + 1)``; all components share ``noise_sigma``.
    A plain XOR PUF is the same object evaluated with one challenge broadcast
    to every component (see :func:`eval_xor`).
    """

    weights: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 2:
            raise InvalidInputError("weights must have shape (k, n + 1) with k >= 1, n >= 1")
        if not self.noise_sigma >= 0:
            raise InvalidInputError("noise_sigma must be nonnegative")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))

    @classmethod
    def from_components(cls, components):
        components = list(components)
        if not components:
            raise InvalidInputError("need at least one component")
        sizes = {p.n for p in components}
        sigmas = {p.noise_sigma for p in components}
        if len(sizes) != 1:
            raise InvalidInputError("all components must share the stage count")
        if len(sigmas) != 1:
            raise InvalidInputError("all components must share noise_sigma")
        return cls(np.stack([p.weights for p in components]), sigmas.pop())

    @property
    def n(self):
        return self.weights.shape[1] - 1

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def components(self):
        return tuple(ArbiterPuf(w, self.noise_sigma) for w in self.weights)

    def __eq__(self, other):
        if not isinstance(other, CdcXorPuf):
            return NotImplemented
        return self.noise_sigma == other.noise_sigma and np.array_equal(self.weights, other.weights)


def sample_cdc_xpuf(n, k, seed, noise_sigma=0.0):
    """Draw ``k`` components with ``n + 1`` i.i.d. N(0, 1) weights each.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if n < 1 or k < 1:
        raise InvalidInputError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return CdcXorPuf(rng.standard_normal((k, n + 1)), noise_sigma)


def sample_arbiter(n, seed, noise_sigma=0.0):
    return sample_cdc_xpuf(n, 1, seed, noise_sigma).components[0]


def _noise(sigma, shape, rng):
    if sigma == 0:
        return 0.0
    if rng is None:
        rng = np.random.default_rng()
    return rng.normal(0.0, sigma, size=shape)


def eval_arbiter(puf, c, rng=None):
    """Return ``(response, delta)`` for one challenge or a batch ``(..., n)``.

    The response is 1 iff ``delta > 0``; an exact zero maps to 0.
    """
    c = _as_bits(c)
    if c.shape[-1] != puf.n:
        raise InvalidInputError(f"challenge length {c.shape[-1]} does not match {puf.n} stages")
    delta = transform_challenge(c) @ puf.weights[:-1] + puf.weights[-1]
    delta = delta + _noise(puf.noise_sigma, np.shape(delta), rng)
    response = (delta > 0).astype(np.uint8)
    if response.ndim == 0:
        return int(response), float(delta)
    return response, delta


def component_deltas(puf, cc, rng=None):
    """Delay differences of every component, shape ``(..., k)``."""
    cc = _as_bits(cc)
    if cc.ndim < 2 or cc.shape[-2:] != (puf.k, puf.n):
        raise InvalidInputError(
            f"challenge tuple must have shape (..., {puf.k}, {puf.n}), got {cc.shape}"
        )
    phi = transform_challenge(cc)
    delta = np.einsum("...kn,kn->...k", phi, puf.weights[:, :-1]) + puf.weights[:, -1]
    return delta + _noise(puf.noise_sigma, delta.shape, rng)


def eval_cdc(puf, cc, rng=None):
    """XOR of the component responses, component ``l`` evaluated on ``cc[..., l, :]``."""
    bits = (component_deltas(puf, cc, rng) > 0).astype(np.uint8)
    out = np.bitwise_xor.reduce(bits, axis=-1)
    return int(out) if out.ndim == 0 else out


def broadcast_challenge(c, k):
    """Repeat challenge(s) ``(..., n)`` into tuples ``(..., k, n)``."""
    c = _as_bits(c)
    return np.repeat(c[..., None, :], k, axis=-2)


def eval_xor(puf, c, rng=None):
    """Conventional XOR PUF: every component receives the same challenge."""
    c = _as_bits(c)
    if c.shape[-1] != puf.n:
        raise InvalidInputError(f"challenge length {c.shape[-1]} does not match {puf.n} stages")
    delta = transform_challenge(c) @ puf.weights[:, :-1].T + puf.weights[:, -1]
    delta = delta + _noise(puf.noise_sigma, delta.shape, rng)
    out = np.bitwise_xor.reduce((delta > 0).astype(np.uint8), axis=-1)
    return int(out) if out.ndim == 0 else out


def puf_to_bytes(puf):
    header = _PUF_HEADER.pack(_PUF_MAGIC, _PUF_VERSION, puf.n, puf.k, puf.noise_sigma)
    return header + puf.weights.astype("<f8").tobytes()


def puf_from_bytes(data):
    if len(data) < _PUF_HEADER.size:
        raise FormatError("truncated PUF header", len(data))
    magic, version, n, k, sigma = _PUF_HEADER.unpack_from(data)
    if magic != _PUF_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != _PUF_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = _PUF_HEADER.size + 8 * k * (n + 1)
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(data)}", min(len(data), expected))
    w = np.frombuffer(data, dtype="<f8", offset=_PUF_HEADER.size).reshape(k, n + 1)
    return CdcXorPuf(w.astype(np.float64), sigma)


def save_puf(puf, path):
    Path(path).write_bytes(puf_to_bytes(puf))


def load_puf(path):
    return puf_from_bytes(Path(path).read_bytes())
