"""Neural building blocks: MLPs, the RevNet generating function, the pairwise
encoder used by binary models, and the flat binary parameter checkpoint."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import ShapeError, Tensor, broadcast, concat

__all__ = [
    "ConfigError",
    "MlpSpec",
    "Mlp",
    "mlp_forward",
    "RevNetSpec",
    "RevNet",
    "revnet_forward",
    "revnet_inverse",
    "PairwiseEncoder",
    "pairwise_encode",
    "write_checkpoint",
    "read_checkpoint",
    "CheckpointError",
]


class ConfigError(ValueError):
    """Invalid architecture or model configuration."""


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, input first and output last. ReLU on hidden layers only."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ConfigError(f"all layer widths must be >= 1, got {widths}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def param_count(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))


def mlp_forward(spec: MlpSpec, params, x: Tensor) -> Tensor:
    """Alternating affine + relu, affine only on the last layer."""
    if x.shape[-1] != spec.in_width:
        raise ShapeError(f"MLP expects width {spec.in_width}, got input shape {x.shape}")
    h = x
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        h = h @ w + b
        if i < last:
            h = h.relu()
    return h


class Mlp:
    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None, zero: bool = False):
        self.spec = spec
        self.params: list[tuple[Tensor, Tensor]] = []
        widths = spec.layer_widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if zero or rng is None:
                w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
            else:
                w, b = _uniform(rng, fan_in, (fan_in, fan_out)), _uniform(rng, fan_in, fan_out)
            self.params.append((Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.spec, self.params, x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(self.params):
            yield f"{prefix}{i}.weight", w
            yield f"{prefix}{i}.bias", b

    @classmethod
    def identity(cls, width: int) -> "Mlp":
        """Single affine layer initialised to the identity map."""
        m = cls(MlpSpec((width, width)), zero=True)
        m.params[0][0].data[...] = np.eye(width)
        return m


# ---------------------------------------------------------------------------
# RevNet
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RevNetSpec:
    dim: int
    num_blocks: int = 4
    subnet_hidden: tuple[int, ...] = (16,)

    def __post_init__(self):
        object.__setattr__(self, "subnet_hidden", tuple(int(h) for h in self.subnet_hidden))
        if self.dim < 2 or self.dim % 2:
            raise ConfigError(f"RevNet width must be an even positive integer, got {self.dim}")
        if self.num_blocks < 1:
            raise ConfigError("RevNet needs at least one block")

    @property
    def half(self) -> int:
        return self.dim // 2

    @property
    def subnet_spec(self) -> MlpSpec:
        return MlpSpec((self.half, *self.subnet_hidden, self.half))

    @property
    def param_count(self) -> int:
        return 2 * self.num_blocks * self.subnet_spec.param_count


def _split(spec: RevNetSpec, x: Tensor) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != spec.dim:
        if x.shape[-1] % 2:
            raise ShapeError(f"RevNet input width must be even, got {x.shape[-1]}")
        raise ShapeError(f"RevNet expects width {spec.dim}, got input shape {x.shape}")
    h = spec.half
    return x[..., :h], x[..., h:]


def revnet_forward(spec: RevNetSpec, params, x: Tensor) -> Tensor:
    """Additive coupling: x1 += f(x2); x2 += g(x1), block by block."""
    x1, x2 = _split(spec, x)
    fspec = spec.subnet_spec
    for f, g in params:
        x1 = x1 + mlp_forward(fspec, f, x2)
        x2 = x2 + mlp_forward(fspec, g, x1)
    return concat((x1, x2), axis=-1)


def revnet_inverse(spec: RevNetSpec, params, y: Tensor) -> Tensor:
    """Exact inverse: undo the blocks in reverse order by subtraction."""
    y1, y2 = _split(spec, y)
    fspec = spec.subnet_spec
    for f, g in reversed(params):
        y2 = y2 - mlp_forward(fspec, g, y1)
        y1 = y1 - mlp_forward(fspec, f, y2)
    return concat((y1, y2), axis=-1)


class RevNet:
    """Invertible generating function built from additive coupling blocks."""

    def __init__(self, spec: RevNetSpec, rng: np.random.Generator | None = None, zero: bool = False):
        self.spec = spec
        self.blocks = [(Mlp(spec.subnet_spec, rng, zero), Mlp(spec.subnet_spec, rng, zero))
                       for _ in range(spec.num_blocks)]

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def params(self):
        return [(f.params, g.params) for f, g in self.blocks]

    def forward(self, x: Tensor) -> Tensor:
        return revnet_forward(self.spec, self.params, x)

    def inverse(self, y: Tensor) -> Tensor:
        return revnet_inverse(self.spec, self.params, y)

    __call__ = forward

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, (f, g) in enumerate(self.blocks):
            yield from f.named_parameters(f"{prefix}block{i}.f.")
            yield from g.named_parameters(f"{prefix}block{i}.g.")


# ---------------------------------------------------------------------------
# Pairwise encoder
# ---------------------------------------------------------------------------


@dataclass
class PairwiseEncoder:
    """Learnable, order-sensitive map of ordered pairs (x_i, x_j) to latents.

    A single scaled dot-product score gates the projected partner,
    ``s = <Q x_i, K x_j> / sqrt(a)``, and an MLP reads
    ``concat(x_i, s * V x_j)``. No softmax: each pair is encoded on its own.
    """

    element_width: int
    attn_width: int
    mlp: Mlp
    query: Tensor = field(repr=False, default=None)
    key: Tensor = field(repr=False, default=None)
    value: Tensor = field(repr=False, default=None)

    @classmethod
    def build(cls, element_width: int, attn_width: int, mlp_spec: MlpSpec,
              rng: np.random.Generator | None = None, zero: bool = False) -> "PairwiseEncoder":
        if mlp_spec.in_width != element_width + attn_width:
            raise ConfigError(
                f"pair MLP input must be element_width + attn_width = {element_width + attn_width}, "
                f"got {mlp_spec.in_width}")
        mlp = Mlp(mlp_spec, rng, zero)

        def proj():
            if zero or rng is None:
                return Tensor(np.zeros((element_width, attn_width)), requires_grad=True)
            return Tensor(_uniform(rng, element_width, (element_width, attn_width)), requires_grad=True)

        return cls(element_width, attn_width, mlp, proj(), proj(), proj())

    @property
    def out_width(self) -> int:
        return self.mlp.spec.out_width

    def __call__(self, x_i: Tensor, x_j: Tensor) -> Tensor:
        return pairwise_encode(self, x_i, x_j)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}query", self.query
        yield f"{prefix}key", self.key
        yield f"{prefix}value", self.value
        yield from self.mlp.named_parameters(f"{prefix}mlp.")


def pairwise_encode(params: PairwiseEncoder, x_i: Tensor, x_j: Tensor) -> Tensor:
    if x_i.shape != x_j.shape:
        raise ShapeError(f"pair members differ in shape: {x_i.shape} vs {x_j.shape}")
    if x_i.shape[-1] != params.element_width:
        raise ShapeError(f"pair encoder expects width {params.element_width}, got {x_i.shape[-1]}")
    q = x_i @ params.query
    k = x_j @ params.key
    v = x_j @ params.value
    score = (q * k).sum(axis=-1, keepdims=True) * (1.0 / np.sqrt(params.attn_width))
    gated = broadcast(score, v.shape) * v
    return params.mlp(concat((x_i, gated), axis=-1))


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

MAGIC = b"QNN1"
_VERSION_PLAIN = 1
_VERSION_TAGGED = 2  # adds a family tag after the tensor count


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, tensors: dict, family: str | None = None) -> None:
    """Write named float64 arrays. Layout (little-endian)::

        "QNN1" | version u32 | count u32 | [family: len u16, utf-8]   (version 2 only)
        per tensor: name len u16 | name | rank u8 | dims u32 * rank | data f64 * prod(dims)
    """
    version = _VERSION_PLAIN if family is None else _VERSION_TAGGED
    chunks = [MAGIC, struct.pack("<II", version, len(tensors))]
    if family is not None:
        fam = family.encode()
        chunks.append(struct.pack("<H", len(fam)) + fam)
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode()
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], str | None]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version not in (_VERSION_PLAIN, _VERSION_TAGGED):
        raise CheckpointError(f"{path}: unsupported version {version}")
    family = None
    if version == _VERSION_TAGGED:
        (flen,) = take("<H")
        family = buf[pos:pos + flen].decode()
        pos += flen
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out, family
