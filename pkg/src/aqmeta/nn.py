"""Backbones, linear heads, losses and the parameter container.

Parameters are stored as an ordered name -> Tensor map. Every entry is tagged
``backbone`` or ``head``; the fine-tuning code decides what to adapt by tag.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant

BACKBONE = "backbone"
HEAD = "head"
_SCOPE_CODES = {BACKBONE: 0, HEAD: 1}
_SCOPE_NAMES = {v: k for k, v in _SCOPE_CODES.items()}

CHECKPOINT_MAGIC = b"AQCP"
CHECKPOINT_VERSION = 1


class ShapeMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "relu"


@dataclass(frozen=True)
class Conv:
    """Naive 2-D convolution over channels-last images (valid padding)."""

    channels: int
    kernel: int = 3
    stride: int = 1
    activation: str = "relu"


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple
    layers: tuple = (Dense(64), Dense(64))
    n_way: int = 5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shape = self.input_shape
        for spec in self.layers:
            if spec.activation not in ("relu", "none"):
                raise ValueError(f"unknown activation {spec.activation!r}")
            shape = _layer_output_shape(spec, shape)
        if int(np.prod(shape)) <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.n_way < 0:
            raise ValueError("n_way must be >= 0")

    @property
    def embedding_dim(self) -> int:
        shape = self.input_shape
        for spec in self.layers:
            shape = _layer_output_shape(spec, shape)
        return int(np.prod(shape))

    def with_n_way(self, n_way: int) -> "Architecture":
        return Architecture(self.input_shape, self.layers, n_way)


def _layer_output_shape(spec, shape: tuple) -> tuple:
    if isinstance(spec, Dense):
        return (spec.width,)
    if isinstance(spec, Conv):
        if len(shape) != 3:
            raise ValueError(f"conv layer needs an (H, W, C) input, got {shape}")
        h, w, _ = shape
        ho = (h - spec.kernel) // spec.stride + 1
        wo = (w - spec.kernel) // spec.stride + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"conv kernel {spec.kernel} does not fit input {shape}")
        return (ho, wo, spec.channels)
    raise TypeError(f"unknown layer spec {spec!r}")


class ParameterSet(Mapping):
    """Immutable ordered map of named parameters with backbone/head scopes."""

    def __init__(self, entries: Mapping[str, Tensor], scopes: Mapping[str, str], arch=None):
        self._entries = dict(entries)
        self._scopes = {k: scopes[k] for k in self._entries}
        for k, s in self._scopes.items():
            if s not in _SCOPE_CODES:
                raise ValueError(f"bad scope {s!r} for {k!r}")
        self.arch = arch

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def scope(self, name: str) -> str:
        return self._scopes[name]

    @property
    def scopes(self) -> dict:
        return dict(self._scopes)

    def names(self, scope: str | None = None) -> list[str]:
        return [k for k in self._entries if scope is None or self._scopes[k] == scope]

    def replace(self, updates: Mapping[str, Tensor]) -> "ParameterSet":
        entries = dict(self._entries)
        for k, v in updates.items():
            if k not in entries:
                raise KeyError(k)
            entries[k] = v
        return ParameterSet(entries, self._scopes, self.arch)

    def detach(self) -> "ParameterSet":
        return ParameterSet({k: v.detach() for k, v in self._entries.items()}, self._scopes, self.arch)

    def track(self) -> "ParameterSet":
        """Fresh tracked leaves with the same values (differentiation roots)."""
        return ParameterSet(
            {k: Tensor(v.data, name=k) for k, v in self._entries.items()}, self._scopes, self.arch
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._entries.items()}

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.data.reshape(-1) for v in self._entries.values()])

    def unflatten(self, vector: np.ndarray) -> "ParameterSet":
        vector = np.asarray(vector, dtype=np.float64)
        entries, start = {}, 0
        for k, v in self._entries.items():
            n = v.size
            entries[k] = constant(vector[start : start + n].reshape(v.shape))
            start += n
        if start != vector.size:
            raise ValueError(f"vector has {vector.size} values, parameter set needs {start}")
        return ParameterSet(entries, self._scopes, self.arch)

    def equals(self, other: "ParameterSet") -> bool:
        """Same names, scopes, shapes and bitwise-equal values."""
        return (
            list(self) == list(other)
            and self._scopes == other._scopes
            and all(np.array_equal(self[k].data, other[k].data) for k in self)
        )

    def __repr__(self):
        items = ", ".join(f"{k}{list(v.shape)}" for k, v in self._entries.items())
        return f"ParameterSet({items})"


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(arch: Architecture, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    entries, scopes = {}, {}
    shape = arch.input_shape
    for i, spec in enumerate(arch.layers):
        out_shape = _layer_output_shape(spec, shape)
        if isinstance(spec, Dense):
            fan_in = int(np.prod(shape))
            w = _glorot(rng, (spec.width, fan_in), fan_in, spec.width)
            b = np.zeros(spec.width)
        else:
            cin = shape[2]
            k = spec.kernel
            w = _glorot(rng, (spec.channels, k, k, cin), cin * k * k, spec.channels * k * k)
            b = np.zeros(spec.channels)
        entries[f"layer{i}.weight"] = w
        entries[f"layer{i}.bias"] = b
        scopes[f"layer{i}.weight"] = scopes[f"layer{i}.bias"] = BACKBONE
        shape = out_shape
    if arch.n_way > 0:
        d = arch.embedding_dim
        entries["head.weight"] = _glorot(rng, (arch.n_way, d), d, arch.n_way)
        entries["head.bias"] = np.zeros(arch.n_way)
        scopes["head.weight"] = scopes["head.bias"] = HEAD
    return ParameterSet({k: Tensor(v, name=k) for k, v in entries.items()}, scopes, arch)


def _activate(x: Tensor, activation: str) -> Tensor:
    return ad.relu(x) if activation == "relu" else x


def _im2col_index(n, h, w, c, kernel, stride):
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    bi = np.arange(n)[:, None, None, None, None, None]
    ri = (np.arange(ho) * stride)[None, :, None, None, None, None] + np.arange(kernel)[
        None, None, None, :, None, None
    ]
    ci = (np.arange(wo) * stride)[None, None, :, None, None, None] + np.arange(kernel)[
        None, None, None, None, :, None
    ]
    chi = np.arange(c)[None, None, None, None, None, :]
    return (bi, ri, ci, chi), ho, wo


def _conv(x: Tensor, weight: Tensor, bias: Tensor, spec: Conv) -> Tensor:
    n, h, w, c = x.shape
    index, ho, wo = _im2col_index(n, h, w, c, spec.kernel, spec.stride)
    patches = ad.getitem(x, index).reshape(n * ho * wo, spec.kernel * spec.kernel * c)
    kernel = weight.reshape(spec.channels, spec.kernel * spec.kernel * c)
    out = patches @ kernel.T + bias
    return out.reshape(n, ho, wo, spec.channels)


def forward_backbone(params: ParameterSet, batch, arch: Architecture | None = None) -> Tensor:
    """Feature extractor: returns ``[batch, embedding_dim]`` features."""
    arch = arch or params.arch
    if arch is None:
        raise ValueError("no architecture bound to the parameter set")
    x = ad.as_tensor(batch)
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ShapeMismatchError(
            f"batch shape {x.shape} does not match input shape {arch.input_shape}"
        )
    n = x.shape[0]
    for i, spec in enumerate(arch.layers):
        w, b = params[f"layer{i}.weight"], params[f"layer{i}.bias"]
        if isinstance(spec, Dense):
            if x.ndim != 2:
                x = x.reshape(n, int(np.prod(x.shape[1:])))
            x = x @ w.T + b
        else:
            x = _conv(x, w, b, spec)
        x = _activate(x, spec.activation)
    if x.ndim != 2:
        x = x.reshape(n, int(np.prod(x.shape[1:])))
    return x


def forward_linear_head(head: Mapping[str, Tensor], features) -> Tensor:
    """``logits = features @ W.T + b``."""
    w, b = head["head.weight"], head["head.bias"]
    features = ad.as_tensor(features)
    if features.ndim != 2 or features.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"features {features.shape} do not match head weight {w.shape}")
    return features @ w.T + b


def forward(params: ParameterSet, batch) -> Tensor:
    return forward_linear_head(params, forward_backbone(params, batch))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got {labels.min()}..{labels.max()}")
    return labels


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Mean (or summed) negative log-likelihood via logsumexp."""
    logits = ad.as_tensor(logits)
    labels = _check_labels(labels, logits.shape[1])
    if labels.size != logits.shape[0]:
        raise ShapeMismatchError(f"{labels.size} labels for {logits.shape[0]} rows")
    picked = (logits * constant(one_hot(labels, logits.shape[1]))).sum(axis=1)
    per_row = ad.logsumexp(logits, axis=1) - picked
    return per_row.mean() if reduction == "mean" else per_row.sum()


def kl_divergence(p_logits: Tensor, q_logits: Tensor, reduction: str = "mean") -> Tensor:
    """Row-wise KL(softmax(p) || softmax(q))."""
    log_p = ad.log_softmax(p_logits, axis=1)
    log_q = ad.log_softmax(q_logits, axis=1)
    per_row = (ad.exp(log_p) * (log_p - log_q)).sum(axis=1)
    return per_row.mean() if reduction == "mean" else per_row.sum()


def predict(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ParameterSet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def checkpoint_bytes(params: ParameterSet) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name in params:
        t = params[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _SCOPE_CODES[params.scope(name)], t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, arch: Architecture | None = None) -> ParameterSet:
    """Read an AQCP file; with ``arch``, verify names and shapes against ``init_params(arch)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError("bad checkpoint magic (expected b'AQCP')")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries, scopes = {}, {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        scope, rank = r.unpack("<BB")
        if scope not in _SCOPE_NAMES:
            raise CheckpointError(f"bad scope byte {scope} for {name!r}")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
        entries[name] = Tensor(data, name=name)
        scopes[name] = _SCOPE_NAMES[scope]
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after last entry")
    params = ParameterSet(entries, scopes, arch)
    if arch is not None:
        check_compatible(params, arch)
    return params


def check_compatible(params: ParameterSet, arch: Architecture) -> None:
    reference = init_params(arch, 0)
    expected = {k: (reference[k].shape, reference.scope(k)) for k in reference}
    got = {k: (params[k].shape, params.scope(k)) for k in params}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise ShapeMismatchError(
            f"checkpoint does not match architecture (missing={missing}, extra={extra}, mismatched={wrong})"
        )
