"""Deterministic weight initialisation and the ``.hlwt`` weights file.

File layout (little-endian, no padding)::

    b"HLWT"  u32 version=1  u64 tensor_count
    per tensor: u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f32 data[prod(dims)]
"""

import math
import os
import struct

import numba
import numpy as np

from .errors import FormatError

__all__ = [
    "WeightStore",
    "Xoshiro256pp",
    "splitmix64",
    "init_weights",
    "save_weights",
    "load_weights",
    "dump_weights",
    "parse_weights",
    "MAGIC",
    "VERSION",
]

MAGIC = b"HLWT"
VERSION = 1
_MASK = (1 << 64) - 1


class WeightStore(dict):
    """Ordered mapping of qualified parameter name to float32 array."""

    def num_trainable(self, trainable_names):
        return sum(self[n].size for n in self if n in trainable_names)


# -- PRNG -----------------------------------------------------------------------


def splitmix64(state):
    """One SplitMix64 step on a Python int. Returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256pp:
    """Reference (pure Python) xoshiro256++ generator."""

    def __init__(self, seed=None, state=None):
        if state is None:
            sm = seed & _MASK
            state = []
            for _ in range(4):
                sm, out = splitmix64(sm)
                state.append(out)
        self.s = list(state)

    def next_u64(self):
        s = self.s
        result = (_rotl((s[0] + s[3]) & _MASK, 23) + s[0]) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self):
        """Double strictly inside (0, 1)."""
        return ((self.next_u64() >> 11) + 0.5) * 2.0**-53

    def state_array(self):
        return np.array(self.s, dtype=np.uint64)


@numba.njit(cache=True)
def _fill_uniform(state, out):
    # same algorithm as Xoshiro256pp.uniform, in place over `out`
    for i in range(out.size):
        s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
        x = s0 + s3
        result = ((x << np.uint64(23)) | (x >> np.uint64(41))) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        state[0], state[1], state[2], state[3] = s0, s1, s2, s3
        out[i] = (float(result >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16


def init_weights(graph, seed):
    """Seeded initialisation of every tensor the graph declares.

    Conv weights are uniform in (-b, b), b = sqrt(6 / fan_in) with
    fan_in = (c_in / groups) * k * k, drawn from a single xoshiro256++ stream
    in canonical parameter order.  Biases and BN shifts are 0, BN scales 1,
    running means 0 and running variances 1.
    """
    state = Xoshiro256pp(seed).state_array()
    store = WeightStore()
    for name, shape in graph.param_specs():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            u = np.empty(math.prod(shape))
            _fill_uniform(state, u)
            store[name] = ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape)
        elif leaf in ("gamma", "var"):
            store[name] = np.ones(shape, np.float32)
        else:
            store[name] = np.zeros(shape, np.float32)
    return store


# -- file format ------------------------------------------------------------------


def dump_weights(store):
    """Serialise a store to bytes."""
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float32)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def save_weights(store, path):
    data = dump_weights(store)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what, tensor=None):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated file: need {n} bytes for {what}, {len(self.data) - self.pos} left", self.pos, tensor
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what, tensor=None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, tensor))


def parse_weights(data, graph=None):
    """Inverse of :func:`dump_weights`; validates against `graph` when given."""
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", 4)
    (count,) = r.unpack("<Q", "tensor count")
    expected = dict(graph.param_specs()) if graph is not None else None
    store = WeightStore()
    for i in range(count):
        start = r.pos
        (nlen,) = r.unpack("<I", f"name length of tensor #{i}")
        try:
            name = r.take(nlen, f"name of tensor #{i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor #{i} name is not valid UTF-8", start + 4) from None
        if name in store:
            raise FormatError("duplicate tensor name", start, name)
        (rank,) = r.unpack("<I", "rank", name)
        dims = r.unpack(f"<{rank}Q", "dims", name)
        payload_at = r.pos
        payload = r.take(4 * math.prod(dims), "payload", name)
        if expected is not None:
            if name not in expected:
                raise FormatError("tensor not declared by the graph", start, name)
            if tuple(dims) != tuple(expected[name]):
                raise FormatError(f"shape {tuple(dims)} does not match graph shape {expected[name]}", payload_at, name)
        store[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after last tensor", r.pos)
    if expected is not None and len(store) != len(expected):
        missing = next(n for n in expected if n not in store)
        raise FormatError("tensor required by the graph is missing", r.pos, missing)
    return store


def load_weights(path, graph=None):
    with open(path, "rb") as fh:
        return parse_weights(fh.read(), graph)
