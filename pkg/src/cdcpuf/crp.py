"""Challenge sources, CRP datasets, protocol splits and the on-disk format.

Binary CRP file, version 1 (little-endian)::

    magic "CRPX" | version u8 | n u16 | k u8 | source u8 | seed u64
    | reserved 16 bytes | count u64

followed by ``count`` records of ``k * ceil(n / 8)`` packed challenge bytes
(component-major, bit 0 of each component's first byte is challenge bit 1)
and one response byte.

The reserved bytes hold the LCG ``a`` and ``g`` as u64 when the source is
lcg. For the uniform source byte 0 is a flag field (bit 0: one challenge
broadcast to every component, i.e. a plain XOR PUF dataset) and the rest
are zero.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .puf import broadcast_challenge, eval_cdc

MAGIC = b"CRPX"
VERSION = 1
HEADER = struct.Struct("<4sBHBBQ16sQ")
SOURCE_TAGS = {"uniform": 0, "lcg": 1}

# default LCG constants, reduced modulo 2**n
LCG_A = 6364136223846793005
LCG_G = 1442695040888963407

_CHUNK = 1 << 16
_U64 = 1 << 64


@dataclass(frozen=True)
class LcgParams:
    a: int
    g: int
    m: int
    c0: int = 0

    def __post_init__(self):
        if self.m < 1 or self.m & (self.m - 1):
            raise InvalidInputError(f"LCG modulus must be a power of two, got {self.m}")
        if not 0 <= self.c0 < self.m:
            raise InvalidInputError(f"LCG seed state must satisfy 0 <= c0 < m, got {self.c0}")
        if self.a < 0 or self.g < 0:
            raise InvalidInputError("LCG multiplier and increment must be nonnegative")

    @classmethod
    def for_stages(cls, n, a=LCG_A, g=LCG_G, c0=0):
        """Modulus ``2**n``; ``a``, ``g`` and ``c0`` are reduced into range."""
        m = 1 << n
        return cls(a % m, g % m, m, c0 % m)

    @property
    def width(self):
        return self.m.bit_length() - 1


@dataclass(frozen=True)
class Provenance:
    source: str = "uniform"
    seed: int = 0
    a: int = 0
    g: int = 0
    broadcast: bool = False

    def __post_init__(self):
        if self.source not in SOURCE_TAGS:
            raise InvalidInputError(f"unknown challenge source {self.source!r}")
        if self.broadcast and self.source != "uniform":
            raise InvalidInputError("broadcast datasets are only supported for the uniform source")
        for name in ("seed", "a", "g"):
            v = getattr(self, name)
            if not 0 <= v < _U64:
                raise InvalidInputError(f"provenance {name} must fit in 64 bits, got {v}")


@dataclass(eq=False)
class CrpSet:
    """Challenge tuples ``(N, k, n)`` and response bits ``(N,)``, both uint8.

    ``indices`` are positions in the originating challenge stream; splits keep
    them so disjointness can be checked. They are not part of equality and are
    not serialized.
    """

    n: int
    k: int
    challenges: np.ndarray
    responses: np.ndarray
    provenance: Provenance = field(default_factory=Provenance)
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.challenges = np.ascontiguousarray(self.challenges, dtype=np.uint8)
        self.responses = np.ascontiguousarray(self.responses, dtype=np.uint8).reshape(-1)
        if self.challenges.shape != (len(self.responses), self.k, self.n):
            raise InvalidInputError(
                f"challenges shape {self.challenges.shape} does not match "
                f"({len(self.responses)}, {self.k}, {self.n})"
            )
        if self.indices is None:
            self.indices = np.arange(len(self.responses), dtype=np.int64)

    def __len__(self):
        return len(self.responses)

    def __getitem__(self, idx):
        return self.challenges[idx], int(self.responses[idx])

    def __eq__(self, other):
        if not isinstance(other, CrpSet):
            return NotImplemented
        return (
            (self.n, self.k, self.provenance) == (other.n, other.k, other.provenance)
            and np.array_equal(self.challenges, other.challenges)
            and np.array_equal(self.responses, other.responses)
        )

    def subset(self, idx):
        if not isinstance(idx, slice):
            idx = np.asarray(idx, dtype=np.int64)
        return CrpSet(
            self.n, self.k, self.challenges[idx], self.responses[idx],
            self.provenance, self.indices[idx],
        )

    def head(self, count):
        if count > len(self):
            raise InvalidInputError(f"requested {count} records from a set of {len(self)}")
        return self.subset(slice(0, count))


def _check_sizes(n, k, count):
    if n < 1 or k < 1:
        raise InvalidInputError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    if count < 1:
        raise InvalidInputError(f"count must be >= 1, got {count}")


def gen_uniform_challenges(n, k, count, seed):
    """``count`` challenge tuples of fair coin bits, shape ``(count, k, n)``.

    Bits come straight from the raw 64-bit output of a seeded PCG64, one
    whole number of words per tuple, so a longer stream under the same seed
    always starts with the shorter one.
    """
    _check_sizes(n, k, count)
    bits_per = k * n
    words_per = -(-bits_per // 64)
    bitgen = np.random.PCG64(seed)
    out = np.empty((count, k, n), dtype=np.uint8)
    for start in range(0, count, _CHUNK):
        stop = min(count, start + _CHUNK)
        raw = bitgen.random_raw((stop - start) * words_per).astype("<u8")
        bits = np.unpackbits(raw.view(np.uint8), bitorder="little")
        bits = bits.reshape(stop - start, words_per * 64)[:, :bits_per]
        out[start:stop] = bits.reshape(stop - start, k, n)
    return out


def lcg_states(params, steps):
    """Yield ``steps`` successive states, starting with ``c0``."""
    state, a, g, m = params.c0, params.a, params.g, params.m
    for _ in range(steps):
        yield state
        state = (a * state + g) % m


def gen_lcg_challenges(n, k, count, params):
    """One LCG state per sub-challenge, ``k`` consecutive states per tuple.

    Each state is expanded little-endian into ``n`` bits (bit ``j`` of the state
    is challenge bit ``j + 1``); bits above the modulus width are zero.
    """
    _check_sizes(n, k, count)
    nbytes = -(-n // 8)
    if params.width > 8 * nbytes:
        raise InvalidInputError(f"LCG modulus width {params.width} exceeds {n} stages")
    buf = bytearray()
    for state in lcg_states(params, count * k):
        buf += state.to_bytes(nbytes, "little")
    bits = np.unpackbits(np.frombuffer(bytes(buf), dtype=np.uint8), bitorder="little")
    return bits.reshape(count, k, 8 * nbytes)[:, :, :n].copy()


def build_crpset(puf, challenges, provenance=None):
    """Evaluate ``puf`` on challenge tuples ``(N, k, n)``; order is preserved."""
    challenges = np.asarray(challenges, dtype=np.uint8)
    if challenges.ndim != 3 or challenges.shape[1:] != (puf.k, puf.n):
        raise InvalidInputError(
            f"challenges must have shape (N, {puf.k}, {puf.n}), got {challenges.shape}"
        )
    responses = np.empty(len(challenges), dtype=np.uint8)
    for start in range(0, len(challenges), _CHUNK):
        responses[start:start + _CHUNK] = eval_cdc(puf, challenges[start:start + _CHUNK])
    return CrpSet(puf.n, puf.k, challenges, responses, provenance or Provenance())


def generate_crpset(puf, count, source="uniform", seed=0, lcg=None, broadcast=False):
    """Draw challenges from ``source`` and evaluate them on ``puf``.

    For the LCG source ``lcg`` may supply :class:`LcgParams`; otherwise the
    default constants are used with ``c0 = seed``. With ``broadcast`` every
    component receives the same challenge (conventional XOR PUF).
    """
    if source == "uniform" and broadcast:
        ch = broadcast_challenge(gen_uniform_challenges(puf.n, 1, count, seed)[:, 0, :], puf.k)
        prov = Provenance("uniform", seed, broadcast=True)
    elif source == "uniform":
        ch = gen_uniform_challenges(puf.n, puf.k, count, seed)
        prov = Provenance("uniform", seed)
    elif source == "lcg":
        params = lcg or LcgParams.for_stages(puf.n, c0=seed)
        ch = gen_lcg_challenges(puf.n, puf.k, count, params)
        prov = Provenance("lcg", params.c0, params.a, params.g)
    else:
        raise InvalidInputError(f"unknown challenge source {source!r}")
    return build_crpset(puf, ch, prov)


def regenerate(puf, provenance, count):
    """Rebuild a dataset from its recorded provenance."""
    if provenance.source == "lcg":
        # for the LCG source the seed field holds c0
        params = LcgParams(provenance.a, provenance.g, 1 << puf.n, provenance.seed)
        return generate_crpset(puf, count, "lcg", provenance.seed, params)
    return generate_crpset(puf, count, "uniform", provenance.seed, broadcast=provenance.broadcast)


def split_sizes(total, train_frac=0.8, val_frac_of_train=0.01):
    """``(train, validation, test)`` sizes under the fixed rounding rule.

    test = floor((1 - train_frac) * N), validation = max(1, floor(val_frac * (N - test))).
    """
    for name, f in (("train_frac", train_frac), ("val_frac_of_train", val_frac_of_train)):
        if not 0 < f < 1:
            raise InvalidInputError(f"{name} must lie in (0, 1), got {f}")
    tf = Fraction(train_frac).limit_denominator(10**9)
    vf = Fraction(val_frac_of_train).limit_denominator(10**9)
    test = math.floor((1 - tf) * total)
    val = max(1, math.floor(vf * (total - test)))
    train = total - test - val
    if train < 1:
        raise InvalidInputError(f"{total} records are too few to split")
    return train, val, test


def split_crpset(crps, train_frac=0.8, val_frac_of_train=0.01, shuffle_seed=0):
    """Shuffle and partition into disjoint ``(train, validation, test)`` sets."""
    if len(crps) == 0:
        raise InvalidInputError("cannot split an empty CRP set")
    n_train, n_val, n_test = split_sizes(len(crps), train_frac, val_frac_of_train)
    perm = np.random.default_rng(shuffle_seed).permutation(len(crps))
    test = perm[:n_test]
    val = perm[n_test:n_test + n_val]
    train = perm[n_test + n_val:]
    return crps.subset(train), crps.subset(val), crps.subset(test)


def record_size(n, k):
    return k * (-(-n // 8)) + 1


def crpset_to_bytes(crps):
    prov = crps.provenance
    if prov.source == "lcg":
        reserved = struct.pack("<QQ", prov.a, prov.g)
    else:
        reserved = bytes([int(prov.broadcast)]) + bytes(15)
    header = HEADER.pack(
        MAGIC, VERSION, crps.n, crps.k, SOURCE_TAGS[prov.source], prov.seed, reserved, len(crps)
    )
    packed = np.packbits(crps.challenges, axis=-1, bitorder="little").reshape(
        len(crps), record_size(crps.n, crps.k) - 1
    )
    body = np.concatenate([packed, crps.responses[:, None]], axis=1)
    return header + body.tobytes()


def crpset_from_bytes(data):
    if len(data) < HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, n, k, tag, seed, reserved, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n < 1 or k < 1:
        raise FormatError(f"invalid dimensions n={n}, k={k}", 5)
    sources = {v: s for s, v in SOURCE_TAGS.items()}
    if tag not in sources:
        raise FormatError(f"unknown source tag {tag}", 9)
    source = sources[tag]
    a, g, broadcast = 0, 0, False
    if source == "lcg":
        a, g = struct.unpack("<QQ", reserved)
    elif reserved[0] > 1 or any(reserved[1:]):
        raise FormatError("unknown flags in reserved header bytes", 17)
    else:
        broadcast = bool(reserved[0])
    rsize = record_size(n, k)
    expected = HEADER.size + count * rsize
    if len(data) != expected:
        offset = HEADER.size + (len(data) - HEADER.size) // rsize * rsize
        raise FormatError(
            f"expected {count} records ({expected} bytes), file has {len(data)} bytes",
            min(offset, len(data)),
        )
    body = np.frombuffer(data, dtype=np.uint8, offset=HEADER.size).reshape(count, rsize)
    responses = body[:, -1]
    bad = np.flatnonzero(responses > 1)
    if bad.size:
        raise FormatError(f"response byte {responses[bad[0]]} is not 0 or 1",
                          HEADER.size + bad[0] * rsize + rsize - 1)
    packed = body[:, :-1].reshape(count, k, (n + 7) // 8)
    bits = np.unpackbits(packed, axis=-1, bitorder="little")
    if bits.shape[-1] > n and bits[:, :, n:].any():
        rec = int(np.flatnonzero(bits[:, :, n:].any(axis=(1, 2)))[0])
        raise FormatError("nonzero padding bits in challenge", HEADER.size + rec * rsize)
    return CrpSet(n, k, bits[:, :, :n], responses, Provenance(source, seed, a, g, broadcast))


def write_crpset(crps, path):
    Path(path).write_bytes(crpset_to_bytes(crps))


def read_crpset(path):
    return crpset_from_bytes(Path(path).read_bytes())


def csv_header(n, k):
    return [f"c{l}_{i}" for l in range(1, k + 1) for i in range(1, n + 1)] + ["r"]


def write_csv(crps, path):
    flat = crps.challenges.reshape(len(crps), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(crps.n, crps.k))
        for row, r in zip(flat, crps.responses):
            w.writerow([*row.tolist(), int(r)])
