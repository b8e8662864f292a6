"""Named parameter storage, initialisation, Adam, and checkpoint I/O.

A ``ParamBundle`` maps unique names to ``Value`` leaves with declared shapes.
Checkpoints are a single file: one JSON header line (name/shape/offset table
plus optional opaque metadata) followed by the concatenated little-endian
float64 payload.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Value
from .errors import DimensionError, NumericError, ParseError, ValidationError

CKPT_FORMAT = "motionmix-ckpt"
CKPT_VERSION = 1


@dataclass
class _Entry:
    value: Value
    shape: tuple
    trainable: bool


class ParamBundle:
    """Ordered collection of named parameters.

    Names are unique and shapes are fixed at creation; both are enforced so a
    checkpoint written from one bundle always loads into a freshly built model
    of the same architecture.
    """

    def __init__(self):
        self._entries: dict[str, _Entry] = {}

    def add(self, name: str, array, trainable: bool = True) -> Value:
        if name in self._entries:
            raise ValidationError(f"duplicate parameter name {name!r}")
        arr = np.asarray(array, dtype=np.float64)
        v = Value(arr)
        v._op = f"param:{name}"
        self._entries[name] = _Entry(v, arr.shape, trainable)
        return v

    def __getitem__(self, name: str) -> Value:
        try:
            return self._entries[name].value
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def shape(self, name: str) -> tuple:
        return self._entries[name].shape

    def trainable_items(self):
        return [(n, e.value) for n, e in self._entries.items() if e.trainable]

    def n_scalars(self) -> int:
        return sum(e.value.data.size for e in self._entries.values())

    def zero_grad(self):
        for e in self._entries.values():
            e.value.grad = np.zeros_like(e.value.data)

    # flat views, used by finite-difference tests
    def get_vector(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([e.value.data.reshape(-1) for e in self._entries.values()])

    def set_vector(self, vec: np.ndarray):
        if vec.size != self.n_scalars():
            raise DimensionError(
                f"vector of size {vec.size} does not match bundle ({self.n_scalars()})")
        off = 0
        for e in self._entries.values():
            n = e.value.data.size
            e.value.data = vec[off : off + n].reshape(e.shape).astype(np.float64).copy()
            off += n


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialisation."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def he_uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """uniform(+-sqrt(6/fan_in)): unit rms layer gain for relu stacks, so
    signal differences survive deep element->gating->head paths."""
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_mlp_params(params: ParamBundle, prefix: str, layer_sizes,
                    rng: np.random.Generator, w_init=uniform_init):
    for i in range(len(layer_sizes) - 1):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        params.add(f"{prefix}W{i}", w_init(rng, (fan_out, fan_in), fan_in))
        params.add(f"{prefix}b{i}", uniform_init(rng, (fan_out,), fan_in))


def init_lstm_params(params: ParamBundle, prefix: str, input_size: int, hidden_size: int,
                     rng: np.random.Generator):
    params.add(f"{prefix}W_ih", uniform_init(rng, (4 * hidden_size, input_size), input_size))
    params.add(f"{prefix}W_hh", uniform_init(rng, (4 * hidden_size, hidden_size), hidden_size))
    params.add(f"{prefix}b", uniform_init(rng, (4 * hidden_size,), hidden_size))


def clip_grads_global_norm(params: ParamBundle, max_norm: float = 10.0) -> float:
    """Scale all trainable gradients so their global L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    sq = 0.0
    for _, v in params.trainable_items():
        sq += float((v.grad * v.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, v in params.trainable_items():
            v.grad = v.grad * scale
    return norm


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: ParamBundle, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update with bias correction over the trainable parameters."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, v in params.trainable_items():
        g = v.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(v.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(v.data)
        s = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = s / (1.0 - b2**t)
        v.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def save_checkpoint(params: ParamBundle, path, meta: dict | None = None):
    """Write the bundle to a single file: JSON header line + raw <f8 payload."""
    entries = []
    chunks = []
    offset = 0
    for name in params.names():
        e = params._entries[name]
        raw = e.value.data.astype("<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(e.shape),
            "trainable": e.trainable,
            "offset": offset,
            "size": e.value.data.size,
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "meta": meta or {},
        "params": entries,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> tuple[ParamBundle, dict]:
    """Read a checkpoint; returns (bundle, meta)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: not a checkpoint file ({exc})") from None
    if header.get("format") != CKPT_FORMAT:
        raise ParseError(f"{path}: unexpected format {header.get('format')!r}")
    if header.get("version") != CKPT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    bundle = ParamBundle()
    for ent in header["params"]:
        shape = tuple(ent["shape"])
        size = int(ent["size"])
        start = int(ent["offset"])
        raw = payload[start : start + 8 * size]
        if len(raw) != 8 * size:
            raise ParseError(f"{path}: truncated payload for parameter {ent['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        bundle.add(ent["name"], arr, trainable=bool(ent.get("trainable", True)))
    return bundle, header.get("meta", {})
