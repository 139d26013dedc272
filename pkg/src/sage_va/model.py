"""TCN encoders, reliability-guided fusion, transformer refinement and the regression head."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import numerics as nx
from .dataio import atomic_write
from .errors import (
    AlignmentError,
    BadMagicError,
    ConfigError,
    DimensionError,
    FormatError,
    TruncatedError,
)
from .numerics import Tensor


@dataclass
class ModelConfig:
    dim_visual: int = 16
    dim_audio: int = 8
    tcn_layers: int = 2
    tcn_kernel: int = 3
    tcn_residual: bool = True
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    head_hidden: int | None = None
    use_rgf: bool = True
    rgf_rescale: bool = False
    output_projection: bool = True
    positional_encoding: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def dim(self) -> int:
        return self.dim_visual + self.dim_audio

    @property
    def hidden(self) -> int:
        return self.head_hidden if self.head_hidden is not None else max(1, self.dim // 2)

    @property
    def dilations(self) -> list[int]:
        return [2 ** i for i in range(self.tcn_layers)]

    def validate(self) -> None:
        if self.dim_visual < 1 or self.dim_audio < 1:
            raise ConfigError("both modalities need at least one feature dimension")
        if self.tcn_kernel < 1 or self.tcn_kernel % 2 == 0:
            raise ConfigError(f"tcn_kernel must be odd, got {self.tcn_kernel}")
        if self.tcn_layers < 0 or self.n_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.n_heads < 1 or self.dim % self.n_heads:
            raise ConfigError(f"feature width {self.dim} is not divisible by {self.n_heads} heads")
        if not self.output_projection and self.n_heads != 1:
            raise ConfigError("output_projection may only be disabled in single-head mode")
        if self.ffn_mult < 1 or self.hidden < 1:
            raise ConfigError("ffn_mult and head_hidden must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class SageParams(Mapping[str, Tensor]):
    """Named parameter tensors. Updates produce a new instance; tensors are never mutated."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def replace(self, updates: Mapping[str, np.ndarray], requires_grad: bool = True) -> "SageParams":
        new = {}
        for name, t in self._tensors.items():
            data = updates.get(name, t.data)
            new[name] = Tensor(data, requires_grad=requires_grad, name=name)
        return SageParams(new)

    def detached(self) -> "SageParams":
        return self.replace({}, requires_grad=False)

    def trainable(self) -> "SageParams":
        return self.replace({}, requires_grad=True)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def n_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def bit_equal(self, other: "SageParams") -> bool:
        return list(self) == list(other) and all(
            self[k].data.tobytes() == other[k].data.tobytes() and self[k].shape == other[k].shape
            for k in self)


def init_params(config: ModelConfig, seed: int = 0) -> SageParams:
    """Scaled-Gaussian initialization, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    D, K = config.dim, config.tcn_kernel
    p: dict[str, np.ndarray] = {}

    def normal(shape, fan_in):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    for mod, width in (("v", config.dim_visual), ("a", config.dim_audio)):
        for i in range(config.tcn_layers):
            p[f"tcn_{mod}.{i}.kernel"] = 0.5 * normal((K, width, width), K * width)
            p[f"tcn_{mod}.{i}.bias"] = np.zeros(width)
    if config.use_rgf:
        p["rgf.W_r"] = normal((1, D), D)
        p["rgf.b_r"] = np.zeros(1)
    ff = config.ffn_mult * D
    for i in range(config.n_layers):
        pre = f"transformer.{i}"
        for w in ("W_Q", "W_K", "W_V"):
            p[f"{pre}.{w}"] = normal((D, D), D)
        if config.output_projection:
            p[f"{pre}.W_O"] = normal((D, D), D)
        p[f"{pre}.ln1.gamma"] = np.ones(D)
        p[f"{pre}.ln1.beta"] = np.zeros(D)
        p[f"{pre}.ffn.W1"] = normal((D, ff), D) * math.sqrt(2.0)
        p[f"{pre}.ffn.b1"] = np.zeros(ff)
        p[f"{pre}.ffn.W2"] = normal((ff, D), ff)
        p[f"{pre}.ffn.b2"] = np.zeros(D)
        p[f"{pre}.ln2.gamma"] = np.ones(D)
        p[f"{pre}.ln2.beta"] = np.zeros(D)
    Dh = config.hidden
    p["head.W1"] = normal((D, Dh), D) * math.sqrt(2.0)
    p["head.b1"] = np.zeros(Dh)
    p["head.W2"] = normal((Dh, 2), Dh)
    p["head.b2"] = np.zeros(2)
    return SageParams({k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})


# ---------------------------------------------------------------------------
# forward pieces


def tcn_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str, config: ModelConfig) -> Tensor:
    """Stack of dilated convolutions (dilation 1, 2, 4, ...), each followed by ReLU.

    A residual connection wraps every layer when ``config.tcn_residual`` is set.
    """
    for i, dilation in enumerate(config.dilations):
        kernel = params[f"{prefix}.{i}.kernel"]
        if x.shape[1] != kernel.shape[1]:
            raise ConfigError(f"{prefix}.{i}: input has {x.shape[1]} channels, "
                              f"kernel expects {kernel.shape[1]}")
        h = nx.relu(nx.conv1d(x, kernel, dilation) + params[f"{prefix}.{i}.bias"])
        x = x + h if config.tcn_residual and h.shape == x.shape else h
    return x


def concat_modalities(xv: Tensor, xa: Tensor) -> Tensor:
    if xv.ndim != 2 or xa.ndim != 2:
        raise DimensionError(f"expected two T x D matrices, got {xv.shape} and {xa.shape}")
    if xv.shape[0] != xa.shape[0]:
        raise AlignmentError(f"visual has {xv.shape[0]} frames but audio has {xa.shape[0]}")
    return nx.concat([xv, xa], axis=1)


def rgf_forward(X: Tensor, W_r: Tensor, b_r: Tensor, rescale: bool = False) -> tuple[Tensor, Tensor]:
    """Score every time step, softmax the scores over time, and scale each row by its weight.

    Returns the reweighted sequence and the reliability weights ``alpha``
    (length T, summing to one).  With ``rescale`` the rows are additionally
    multiplied by T so a uniform ``alpha`` leaves ``X`` unchanged.
    """
    T, D = X.shape
    if W_r.shape != (1, D):
        raise DimensionError(f"W_r must be 1 x {D}, got {W_r.shape}")
    # b_r shifts every logit equally and cancels in the softmax; adding it
    # first would only inject rounding noise into alpha.
    alpha = nx.softmax(nx.reshape(X @ W_r.T, (T,)))
    weights = nx.reshape(alpha, (T, 1))
    if rescale:
        weights = weights * float(T)
    return X * weights, alpha


def reliability_logits(X, W_r, b_r) -> np.ndarray:
    """Per-time-step scores ``X W_r^T + b_r`` (diagnostic; ``rgf_forward`` softmaxes these)."""
    data = lambda t: t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)  # noqa: E731
    return (data(X) @ data(W_r).T).reshape(-1) + data(b_r).reshape(-1)[0]


def positional_encoding(T: int, D: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def attention_forward(Z: Tensor, layer: Mapping[str, Tensor], n_heads: int,
                      weights_out: list | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention.

    ``layer`` holds ``W_Q``, ``W_K``, ``W_V`` and optionally ``W_O``.  Head ``h``
    uses columns ``[h*d, (h+1)*d)`` of the projections with ``d = D / n_heads``.
    The row-stochastic attention matrices are appended to ``weights_out``.
    """
    T, D = Z.shape
    if n_heads < 1 or D % n_heads:
        raise ConfigError(f"width {D} is not divisible by {n_heads} heads")
    d = D // n_heads
    Q, K, V = Z @ layer["W_Q"], Z @ layer["W_K"], Z @ layer["W_V"]
    scale = 1.0 / math.sqrt(d)
    heads = []
    for h in range(n_heads):
        cols = slice(h * d, (h + 1) * d)
        q, k, v = Q[:, cols], K[:, cols], V[:, cols]
        a = nx.softmax((q @ k.T) * scale)
        if weights_out is not None:
            weights_out.append(a.data)
        heads.append(a @ v)
    out = heads[0] if n_heads == 1 else nx.concat(heads, axis=1)
    if "W_O" in layer:
        out = out @ layer["W_O"]
    return out


def _layer_view(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def transformer_forward(Z: Tensor, params: Mapping[str, Tensor], config: ModelConfig,
                        weights_out: list | None = None) -> Tensor:
    """Positional encoding, then post-norm blocks of attention and a ReLU feed-forward."""
    T, D = Z.shape
    H = Z + positional_encoding(T, D) if config.positional_encoding else Z
    for i in range(config.n_layers):
        layer = _layer_view(params, f"transformer.{i}")
        H = nx.layer_norm(H + attention_forward(H, layer, config.n_heads, weights_out),
                          layer["ln1.gamma"], layer["ln1.beta"])
        ff = nx.relu(H @ layer["ffn.W1"] + layer["ffn.b1"]) @ layer["ffn.W2"] + layer["ffn.b2"]
        H = nx.layer_norm(H + ff, layer["ln2.gamma"], layer["ln2.beta"])
    return H


def regression_head(H: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Frame-wise MLP mapping each row of ``H`` to (valence, arousal) in (-1, 1)."""
    hidden = nx.relu(H @ params["head.W1"] + params["head.b1"])
    return nx.tanh(hidden @ params["head.W2"] + params["head.b2"])


@dataclass
class SageOutput:
    predictions: Tensor
    alpha: Tensor | None
    refined: Tensor
    attention: list = field(default_factory=list)


def sage_forward(xv, xa, params: Mapping[str, Tensor], config: ModelConfig,
                 keep_attention: bool = False) -> SageOutput:
    """Full pipeline for one aligned clip.

    ``alpha`` is ``None`` when the model was built without the fusion stage.
    """
    xv = xv if isinstance(xv, Tensor) else Tensor(xv)
    xa = xa if isinstance(xa, Tensor) else Tensor(xa)
    enc_v = tcn_forward(xv, params, "tcn_v", config)
    enc_a = tcn_forward(xa, params, "tcn_a", config)
    X = concat_modalities(enc_v, enc_a)
    if config.use_rgf:
        Z, alpha = rgf_forward(X, params["rgf.W_r"], params["rgf.b_r"], config.rgf_rescale)
    else:
        Z, alpha = X, None
    attention: list = [] if keep_attention else None
    H = transformer_forward(Z, params, config, attention)
    return SageOutput(regression_head(H, params), alpha, H, attention or [])


# ---------------------------------------------------------------------------
# checkpoints


SAGC_MAGIC = b"SAGC"
SAGC_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: SageParams
    meta: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """``SAGC`` | version u16 | count u32 | tensors | config length u32 | config JSON.

    Each tensor: name length u16, UTF-8 name, rank u8, dims u32 each, f64 payload.
    """
    parts = [SAGC_MAGIC, struct.pack("<HI", SAGC_VERSION, len(ckpt.params))]
    for name, t in ckpt.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    blob = json.dumps({"model": ckpt.config.to_dict(), "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if buf[:4] != SAGC_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {SAGC_MAGIC!r}", 0)
    r.take(4)
    version, count = r.unpack("HI")
    if version != SAGC_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}I")
        size = int(np.prod(dims)) if rank else 1
        at = r.pos
        values = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        if not np.all(np.isfinite(values)):
            raise FormatError(f"non-finite value in parameter {name!r}", at)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    (n,) = r.unpack("I")
    at = r.pos
    raw = r.take(n)
    try:
        blob = json.loads(raw.decode("utf-8"))
        config = ModelConfig.from_dict(blob["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad config blob: {exc}", at) from None
    if r.pos != len(buf):
        raise FormatError("trailing bytes after config blob", r.pos)
    return Checkpoint(config, SageParams(tensors), blob.get("meta", {}))


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
