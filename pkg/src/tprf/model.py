"""The TPRF query encoder: a small post-norm transformer over the stacked
query + feedback embedding matrix, read out at the query position.

Weights follow the ``y = x @ W + b`` convention, so ``W_1`` is
``(d, ffn_dim)`` and ``W_2`` is ``(ffn_dim, d)``.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Node, Tape
from .errors import CorruptionError, FormatError, ValidationError

PARAM_NAMES = (
    "W_Q", "b_Q", "W_K", "b_K", "W_V", "b_V", "W_O", "b_O",
    "W_1", "b_1", "W_2", "b_2",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
)  # fmt: skip
WEIGHT_NAMES = ("W_Q", "W_K", "W_V", "W_O", "W_1", "W_2")
# excluded from weight decay
NO_DECAY = frozenset(n for n in PARAM_NAMES if not n.startswith("W_"))
POOLINGS = ("query", "mean")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    heads: int = 12
    model_dim: int = 768
    ffn_dim: int = 1024
    dropout: float = 0.2
    pooling: str = "query"

    def __post_init__(self):
        for name in ("layers", "heads", "model_dim", "ffn_dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if self.model_dim % self.heads:
            raise ValidationError(
                f"model_dim {self.model_dim} is not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.model_dim, self.ffn_dim
        out = {}
        for n in PARAM_NAMES:
            if n in ("W_1",):
                out[n] = (d, f)
            elif n == "W_2":
                out[n] = (f, d)
            elif n.startswith("W_"):
                out[n] = (d, d)
            elif n == "b_1":
                out[n] = (f,)
            else:
                out[n] = (d,)
        return out


def param_count(config: ModelConfig) -> int:
    d, f = config.model_dim, config.ffn_dim
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    return config.layers * per_layer


def size_bytes(config: ModelConfig) -> int:
    """Raw float32 parameter bytes (no header, no optimizer state)."""
    return 4 * param_count(config)


@dataclass
class Parameters:
    """Full weight set: one ``{name: array}`` dict per layer."""

    config: ModelConfig
    layers: list[dict[str, np.ndarray]]

    def __post_init__(self):
        if len(self.layers) != self.config.layers:
            raise ValidationError(f"expected {self.config.layers} layers, got {len(self.layers)}")
        shapes = self.config.shapes()
        for i, layer in enumerate(self.layers):
            if set(layer) != set(PARAM_NAMES):
                raise ValidationError(f"layer {i} has wrong parameter names")
            for n, arr in layer.items():
                if arr.shape != shapes[n]:
                    raise ValidationError(f"layer {i} {n}: shape {arr.shape} != {shapes[n]}")

    def arrays(self) -> Iterator[tuple[int, str, np.ndarray]]:
        """Yield ``(layer, name, array)`` in checkpoint order."""
        for i, layer in enumerate(self.layers):
            for n in PARAM_NAMES:
                yield i, n, layer[n]

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0]["W_Q"].dtype

    def size(self) -> int:
        return sum(a.size for _, _, a in self.arrays())

    def astype(self, dtype) -> Parameters:
        return Parameters(
            self.config,
            [{n: a.astype(dtype, copy=True) for n, a in layer.items()} for layer in self.layers],
        )

    def copy(self) -> Parameters:
        return self.astype(self.dtype)

    def zeros_like(self) -> Parameters:
        return Parameters(
            self.config, [{n: np.zeros_like(a) for n, a in layer.items()} for layer in self.layers]
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, _, a in self.arrays())

    def equals(self, other: Parameters) -> bool:
        return self.config == other.config and all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for (_, _, a), (_, _, b) in zip(self.arrays(), other.arrays())
        )


def init_params(config: ModelConfig, seed: int = 0) -> Parameters:
    """Xavier-uniform weights, zero biases, unit layer-norm gains (float32)."""
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(config.layers):
        layer = {}
        for n, shape in config.shapes().items():
            if n.startswith("W_"):
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                layer[n] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            elif n.endswith("_gain"):
                layer[n] = np.ones(shape, dtype=np.float32)
            else:
                layer[n] = np.zeros(shape, dtype=np.float32)
        layers.append(layer)
    return Parameters(config, layers)


# -- forward pass ----------------------------------------------------------------------------------


def positional_table(n: int, d: int) -> np.ndarray:
    """Sinusoidal table: sin at even columns, cos at odd, shared frequency per pair."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    two_i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def positional_encode(m: np.ndarray) -> np.ndarray:
    """Add the rank-position sinusoid to each row; row 0 (the query) is position 0."""
    m = np.asarray(m)
    return m + positional_table(m.shape[-2], m.shape[-1]).astype(m.dtype, copy=False)


def _dropout(tape: Tape, x: Node, rate: float, rng: np.random.Generator) -> Node:
    keep = (rng.random(x.value.shape) >= rate).astype(x.value.dtype) / (1.0 - rate)
    return tape.mul_const(x, keep)


def layer_forward(
    tape: Tape,
    x: Node,
    p: dict[str, Node],
    heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    attention: list | None = None,
) -> Node:
    """One post-norm encoder layer on a ``(..., n, d)`` node."""
    *lead, n, d = x.shape
    dh = d // heads

    def split(z: Node) -> Node:  # (..., n, d) -> (..., h, n, dh)
        z = tape.reshape(z, (*lead, n, heads, dh))
        return tape.transpose(z, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))

    def merge(z: Node) -> Node:
        z = tape.transpose(z, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))
        return tape.reshape(z, (*lead, n, d))

    q = split(tape.add(tape.matmul(x, p["W_Q"]), p["b_Q"]))
    k = split(tape.add(tape.matmul(x, p["W_K"]), p["b_K"]))
    v = split(tape.add(tape.matmul(x, p["W_V"]), p["b_V"]))
    kt = tape.transpose(k, (*range(len(lead) + 1), len(lead) + 2, len(lead) + 1))
    weights = tape.softmax(tape.scale(tape.matmul(q, kt), 1.0 / math.sqrt(dh)))
    if attention is not None:
        attention.append(weights.value)
    if dropout > 0.0:
        weights = _dropout(tape, weights, dropout, rng)
    attn = tape.add(tape.matmul(merge(tape.matmul(weights, v)), p["W_O"]), p["b_O"])
    y1 = tape.layer_norm(tape.add(x, attn), p["ln1_gain"], p["ln1_bias"])

    hidden = tape.relu(tape.add(tape.matmul(y1, p["W_1"]), p["b_1"]))
    if dropout > 0.0:
        hidden = _dropout(tape, hidden, dropout, rng)
    ffn = tape.add(tape.matmul(hidden, p["W_2"]), p["b_2"])
    return tape.layer_norm(tape.add(y1, ffn), p["ln2_gain"], p["ln2_bias"])


def encoder_forward(
    tape: Tape,
    stacked: np.ndarray,
    layer_nodes: Sequence[dict[str, Node]],
    config: ModelConfig,
    dropout_active: bool = False,
    rng: np.random.Generator | None = None,
    attention: list | None = None,
) -> Node:
    """Positional encoding, all layers and the pooling readout.

    ``stacked`` is ``(..., k+1, d)``; returns a ``(..., d)`` node.
    """
    rate = config.dropout if dropout_active else 0.0
    if rate > 0.0 and rng is None:
        raise ValidationError("dropout_active requires an rng")
    x = tape.const(positional_encode(stacked))
    for p in layer_nodes:
        x = layer_forward(tape, x, p, config.heads, rate, rng, attention)
    if config.pooling == "mean":
        return tape.mean(x, axis=-2)
    return tape.select(x, 0, axis=-2)


def _const_layers(tape: Tape, params: Parameters) -> list[dict[str, Node]]:
    return [{n: tape.const(a) for n, a in layer.items()} for layer in params.layers]


def encoder_layer(
    x: np.ndarray,
    layer: dict[str, np.ndarray],
    heads: int,
    dropout: float = 0.0,
    dropout_active: bool = False,
    rng: np.random.Generator | None = None,
    return_attention: bool = False,
):
    """Apply one encoder layer to a ``(k+1, d)`` (or batched) matrix."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d % heads:
        raise ValidationError(f"dim {d} not divisible by {heads} heads")
    if layer["W_Q"].shape != (d, d) or layer["W_1"].shape[0] != d:
        raise ValidationError(f"layer weights do not match input dim {d}")
    tape = Tape(record=False)
    attention: list = []
    out = layer_forward(
        tape,
        tape.const(x),
        {n: tape.const(a) for n, a in layer.items()},
        heads,
        dropout if dropout_active else 0.0,
        rng,
        attention,
    )
    return (out.value, attention[0]) if return_attention else out.value


def stack_inputs(query: np.ndarray, feedback) -> np.ndarray:
    q = np.asarray(query)
    fb = np.asarray(feedback)
    if fb.ndim == 1 and fb.size:
        fb = fb[None, :]
    if fb.ndim != 2 or fb.shape[0] == 0:
        raise ValidationError(
            "TPRF needs at least one feedback passage (k >= 1); with k = 0 use the raw query"
        )
    if q.ndim != 1 or fb.shape[1] != q.shape[0]:
        raise ValidationError(f"dimension mismatch: query {q.shape}, feedback {fb.shape}")
    return np.concatenate([q[None, :], fb], axis=0)


def encode(query: np.ndarray, feedback, params: Parameters) -> np.ndarray:
    """New query embedding from the query and its ``k`` feedback embeddings."""
    stacked = stack_inputs(query, feedback).astype(params.dtype, copy=False)
    if stacked.shape[1] != params.config.model_dim:
        raise ValidationError(
            f"input dim {stacked.shape[1]} != model dim {params.config.model_dim}"
        )
    tape = Tape(record=False)
    return encoder_forward(tape, stacked, _const_layers(tape, params), params.config).value


def encode_batch(queries: np.ndarray, feedback: np.ndarray, params: Parameters) -> np.ndarray:
    """Vectorized :func:`encode` for ``queries (B, d)`` and ``feedback (B, k, d)``."""
    queries = np.asarray(queries, dtype=params.dtype)
    feedback = np.asarray(feedback, dtype=params.dtype)
    if feedback.ndim != 3 or feedback.shape[1] == 0:
        raise ValidationError("feedback must be (B, k, d) with k >= 1")
    stacked = np.concatenate([queries[:, None, :], feedback], axis=1)
    tape = Tape(record=False)
    return encoder_forward(tape, stacked, _const_layers(tape, params), params.config).value


# -- checkpoints -----------------------------------------------------------------------------------

CKPT_MAGIC = b"TPRF"
_CKPT_HEAD = struct.Struct("<4sIIIIIf")
_ADAM_MAGIC = b"ADAM"


def save_checkpoint(
    path: str | Path,
    params: Parameters,
    adam: tuple[int, Parameters, Parameters] | None = None,
) -> int:
    """Write parameters (and optionally ``(step, m, v)`` Adam moments); return bytes written.

    Version 1 is the plain layout; version 2 appends a ``u32`` pooling flag
    to the header and is only used for mean-pooling models.
    """
    cfg = params.config
    version = 1 if cfg.pooling == "query" else 2
    chunks = [
        _CKPT_HEAD.pack(
            CKPT_MAGIC, version, cfg.layers, cfg.heads, cfg.model_dim, cfg.ffn_dim, cfg.dropout
        )
    ]
    if version == 2:
        chunks.append(struct.pack("<I", POOLINGS.index(cfg.pooling)))
    chunks.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a in params.arrays())
    if adam is not None:
        step, m, v = adam
        chunks.append(_ADAM_MAGIC + struct.pack("<Q", step))
        for moments in (m, v):
            chunks.extend(
                np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a in moments.arrays()
            )
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return len(blob)


def _read_param_block(raw: bytes, pos: int, config: ModelConfig, path) -> tuple[Parameters, int]:
    shapes = config.shapes()
    layers = []
    for _ in range(config.layers):
        layer = {}
        for n in PARAM_NAMES:
            size = math.prod(shapes[n])
            if pos + 4 * size > len(raw):
                raise CorruptionError(f"{path}: truncated parameter payload")
            layer[n] = np.frombuffer(raw, "<f4", size, pos).reshape(shapes[n]).astype(np.float32)
            pos += 4 * size
        layers.append(layer)
    return Parameters(config, layers), pos


def load_checkpoint_full(path: str | Path):
    """Return ``(params, adam)`` where ``adam`` is ``(step, m, v)`` or ``None``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(raw) < _CKPT_HEAD.size:
        raise CorruptionError(f"{path}: truncated header")
    _, version, l, h, d, f, dropout = _CKPT_HEAD.unpack_from(raw)
    pos = _CKPT_HEAD.size
    pooling = "query"
    if version == 2:
        if len(raw) < pos + 4:
            raise CorruptionError(f"{path}: truncated header")
        (flag,) = struct.unpack_from("<I", raw, pos)
        if flag >= len(POOLINGS):
            raise FormatError(f"{path}: unknown pooling flag {flag}")
        pooling = POOLINGS[flag]
        pos += 4
    elif version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig(l, h, d, f, float(f"{dropout:.7g}"), pooling)
    params, pos = _read_param_block(raw, pos, config, path)
    adam = None
    if pos < len(raw):
        if raw[pos : pos + 4] != _ADAM_MAGIC or len(raw) < pos + 12:
            raise CorruptionError(f"{path}: {len(raw) - pos} trailing bytes after parameters")
        (step,) = struct.unpack_from("<Q", raw, pos + 4)
        m, pos = _read_param_block(raw, pos + 12, config, path)
        v, pos = _read_param_block(raw, pos, config, path)
        if pos != len(raw):
            raise CorruptionError(f"{path}: trailing bytes after optimizer state")
        adam = (step, m, v)
    if not params.is_finite():
        raise CorruptionError(f"{path}: non-finite parameter values")
    return params, adam


def load_checkpoint(path: str | Path) -> Parameters:
    return load_checkpoint_full(path)[0]


def with_pooling(params: Parameters, pooling: str) -> Parameters:
    return Parameters(replace(params.config, pooling=pooling), params.layers)
