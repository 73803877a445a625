"""Numeric core: layers, gradients, momentum SGD, init, serialization.

All tensors are float32 numpy arrays in C (row-major) order with the batch
dimension leading. Layer contractions accumulate in float64 internally and
round results back to float32, so sharded-plus-summed gradients stay within a
few ulps of a monolithic pass over the same samples. Backward passes return
gradient *sums* over the batch; division by the global batch size happens
exactly once, inside sgd_step.

Conv2d is implemented as direct loops over kernel positions (no im2col or FFT
tricks); speed of the numeric core is a non-goal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

FLOAT = np.float32


class ShapeMismatch(ValueError):
    """Input shape is incompatible with the layer."""


class CorruptCheckpoint(ValueError):
    """Serialized parameter blob failed validation."""


# ---------------------------------------------------------------------------
# Layer kinds (architecture only; parameters live in separate arrays)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FullyConnected:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class SoftmaxCrossEntropy:
    pass


LayerKind = Union[Conv2d, MaxPool2d, Flatten, FullyConnected, ReLU,
                  SoftmaxCrossEntropy]


def has_params(layer: LayerKind) -> bool:
    return isinstance(layer, (Conv2d, FullyConnected))


def param_shapes(layer: LayerKind) -> list[tuple[int, ...]]:
    """Shapes of the layer's parameter tensors (weight first, then bias)."""
    if isinstance(layer, Conv2d):
        return [(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel),
                (layer.out_ch,)]
    if isinstance(layer, FullyConnected):
        return [(layer.in_dim, layer.out_dim), (layer.out_dim,)]
    return []


def param_count(layer: LayerKind) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(layer))


def fan_in(layer: LayerKind) -> int:
    if isinstance(layer, Conv2d):
        return layer.in_ch * layer.kernel * layer.kernel
    if isinstance(layer, FullyConnected):
        return layer.in_dim
    raise ValueError(f"{layer!r} has no parameters")


def out_shape(layer: LayerKind, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape given a per-sample input shape.

    Raises ShapeMismatch when the input cannot feed the layer. Conv inputs are
    (C, H, W); FullyConnected inputs are (D,).
    """
    if isinstance(layer, Conv2d):
        if len(in_shape) != 3 or in_shape[0] != layer.in_ch:
            raise ShapeMismatch(f"Conv2d expects ({layer.in_ch}, H, W), got {in_shape}")
        _, h, w = in_shape
        oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeMismatch(f"Conv2d kernel {layer.kernel} too large for {in_shape}")
        return (layer.out_ch, oh, ow)
    if isinstance(layer, MaxPool2d):
        if len(in_shape) != 3:
            raise ShapeMismatch(f"MaxPool2d expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        oh = (h - layer.kernel) // layer.stride + 1
        ow = (w - layer.kernel) // layer.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeMismatch(f"MaxPool2d kernel {layer.kernel} too large for {in_shape}")
        return (c, oh, ow)
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    if isinstance(layer, FullyConnected):
        if len(in_shape) != 1 or in_shape[0] != layer.in_dim:
            raise ShapeMismatch(f"FullyConnected expects ({layer.in_dim},), got {in_shape}")
        return (layer.out_dim,)
    if isinstance(layer, ReLU):
        return in_shape
    if isinstance(layer, SoftmaxCrossEntropy):
        # per-sample scalar loss
        if len(in_shape) != 1:
            raise ShapeMismatch(f"SoftmaxCrossEntropy expects logits (C,), got {in_shape}")
        return ()
    raise TypeError(f"unknown layer kind {layer!r}")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _check_batch(layer: LayerKind, x: np.ndarray, rank: int) -> None:
    if x.ndim != rank:
        raise ShapeMismatch(f"{type(layer).__name__} expects {rank}-d batched input, "
                            f"got shape {x.shape}")


def forward(layer: LayerKind, params: Sequence[np.ndarray], x: np.ndarray,
            labels: np.ndarray | None = None):
    """Run one layer over a batch. Returns (output, cache).

    The cache is whatever backward() for the same layer needs. For
    SoftmaxCrossEntropy the output is the per-sample loss vector and `labels`
    (integer class ids) is required.
    """
    if isinstance(layer, Conv2d):
        _check_batch(layer, x, 4)
        if x.shape[1] != layer.in_ch:
            raise ShapeMismatch(f"Conv2d expects {layer.in_ch} channels, got {x.shape[1]}")
        w, b = params
        p, s, k = layer.padding, layer.stride, layer.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        n, _, hp, wp = xp.shape
        oh = (hp - k) // s + 1
        ow = (wp - k) // s + 1
        if oh <= 0 or ow <= 0:
            raise ShapeMismatch(f"Conv2d kernel {k} too large for input {x.shape}")
        x64 = xp.astype(np.float64)
        w64 = w.astype(np.float64)
        acc = np.zeros((n, layer.out_ch, oh, ow), dtype=np.float64)
        for kh in range(k):
            for kw in range(k):
                patch = x64[:, :, kh:kh + s * oh:s, kw:kw + s * ow:s]
                acc += np.einsum("nchw,oc->nohw", patch, w64[:, :, kh, kw])
        acc += b.astype(np.float64)[None, :, None, None]
        return acc.astype(FLOAT), xp

    if isinstance(layer, MaxPool2d):
        _check_batch(layer, x, 4)
        n, c, h, w = x.shape
        k, s = layer.kernel, layer.stride
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        if oh <= 0 or ow <= 0:
            raise ShapeMismatch(f"MaxPool2d kernel {k} too large for input {x.shape}")
        # gather the k*k candidates per output cell, argmax picks the first max
        cand = np.empty((n, c, oh, ow, k * k), dtype=x.dtype)
        for kh in range(k):
            for kw in range(k):
                cand[..., kh * k + kw] = x[:, :, kh:kh + s * oh:s, kw:kw + s * ow:s]
        arg = cand.argmax(axis=-1)
        out = np.take_along_axis(cand, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    if isinstance(layer, Flatten):
        if x.ndim < 2:
            raise ShapeMismatch(f"Flatten expects batched input, got shape {x.shape}")
        return np.ascontiguousarray(x).reshape(x.shape[0], -1), x.shape

    if isinstance(layer, FullyConnected):
        _check_batch(layer, x, 2)
        if x.shape[1] != layer.in_dim:
            raise ShapeMismatch(f"FullyConnected expects dim {layer.in_dim}, got {x.shape[1]}")
        w, b = params
        y = x.astype(np.float64) @ w.astype(np.float64) + b.astype(np.float64)
        return y.astype(FLOAT), x

    if isinstance(layer, ReLU):
        return np.maximum(x, 0), (x > 0)

    if isinstance(layer, SoftmaxCrossEntropy):
        _check_batch(layer, x, 2)
        if labels is None:
            raise ValueError("SoftmaxCrossEntropy needs labels")
        if labels.shape[0] != x.shape[0]:
            raise ShapeMismatch(f"{labels.shape[0]} labels for batch of {x.shape[0]}")
        z = x.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        probs = ez / ez.sum(axis=1, keepdims=True)
        idx = np.arange(x.shape[0])
        losses = -np.log(probs[idx, labels])
        return losses.astype(FLOAT), (probs, labels)

    raise TypeError(f"unknown layer kind {layer!r}")


def backward(layer: LayerKind, params: Sequence[np.ndarray], cache,
             gy: np.ndarray | None):
    """Backward pass for one layer. Returns (grad_input, param_grad_list).

    gy is the gradient of the summed loss w.r.t. the layer output. For
    SoftmaxCrossEntropy gy is ignored (the layer is the loss head; its
    backward emits the gradient of the per-batch loss sum w.r.t. the logits).
    Param grads are sums over the batch.
    """
    if isinstance(layer, Conv2d):
        w, _ = params
        xp = cache
        k, s, p = layer.kernel, layer.stride, layer.padding
        _, _, hp, wp = xp.shape
        oh, ow = gy.shape[2], gy.shape[3]
        g64 = gy.astype(np.float64)
        x64 = xp.astype(np.float64)
        w64 = w.astype(np.float64)
        gw = np.zeros_like(w64)
        gxp = np.zeros_like(x64)
        for kh in range(k):
            for kw in range(k):
                patch = x64[:, :, kh:kh + s * oh:s, kw:kw + s * ow:s]
                gw[:, :, kh, kw] = np.einsum("nohw,nchw->oc", g64, patch)
                gxp[:, :, kh:kh + s * oh:s, kw:kw + s * ow:s] += np.einsum(
                    "nohw,oc->nchw", g64, w64[:, :, kh, kw])
        gb = g64.sum(axis=(0, 2, 3))
        gx = gxp[:, :, p:hp - p, p:wp - p] if p else gxp
        return gx.astype(FLOAT), [gw.astype(FLOAT), gb.astype(FLOAT)]

    if isinstance(layer, MaxPool2d):
        arg, x_shape = cache
        n, c, h, w = x_shape
        k, s = layer.kernel, layer.stride
        oh, ow = arg.shape[2], arg.shape[3]
        gx = np.zeros(x_shape, dtype=np.float64)
        g64 = gy.astype(np.float64)
        for kh in range(k):
            for kw in range(k):
                # windows overlap across (kh, kw) but never within one slice,
                # so += accumulates correctly
                mask = arg == (kh * k + kw)
                gx[:, :, kh:kh + s * oh:s, kw:kw + s * ow:s] += np.where(mask, g64, 0.0)
        return gx.astype(FLOAT), []

    if isinstance(layer, Flatten):
        x_shape = cache
        return np.ascontiguousarray(gy).reshape(x_shape), []

    if isinstance(layer, FullyConnected):
        w, _ = params
        x = cache
        g64 = gy.astype(np.float64)
        gx = g64 @ w.astype(np.float64).T
        gw = x.astype(np.float64).T @ g64
        gb = g64.sum(axis=0)
        return gx.astype(FLOAT), [gw.astype(FLOAT), gb.astype(FLOAT)]

    if isinstance(layer, ReLU):
        mask = cache
        return np.where(mask, gy, 0).astype(FLOAT), []

    if isinstance(layer, SoftmaxCrossEntropy):
        probs, labels = cache
        g = probs.copy()
        g[np.arange(len(labels)), labels] -= 1.0
        return g.astype(FLOAT), []

    raise TypeError(f"unknown layer kind {layer!r}")


def block_forward(layers: Sequence[LayerKind], params: Sequence[Sequence[np.ndarray]],
                  x: np.ndarray, labels: np.ndarray | None = None):
    """Forward through a list of layers. Returns (output, caches)."""
    caches = []
    for layer, p in zip(layers, params):
        x, cache = forward(layer, p, x, labels=labels)
        caches.append(cache)
    return x, caches


def block_backward(layers: Sequence[LayerKind], params: Sequence[Sequence[np.ndarray]],
                   caches, gy: np.ndarray | None):
    """Backward through a block. Returns (grad_input, per-layer param grads).

    gy is the upstream gradient w.r.t. the block output; pass None when the
    block ends with SoftmaxCrossEntropy.
    """
    grads: list[list[np.ndarray]] = [[] for _ in layers]
    for i in range(len(layers) - 1, -1, -1):
        gy, g = backward(layers[i], params[i], caches[i], gy)
        grads[i] = g
    return gy, grads


# ---------------------------------------------------------------------------
# Init and optimizer
# ---------------------------------------------------------------------------

def seeded_init(layers: Sequence[LayerKind], seed: int) -> list[list[np.ndarray]]:
    """Deterministic fan-in uniform init: U[-s, s] with s = sqrt(1/fan_in).

    One generator seeded once; tensors drawn in layer order, weight before
    bias, so the same (layers, seed) always yields bit-identical parameters.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params: list[list[np.ndarray]] = []
    for layer in layers:
        tensors = []
        for shape in param_shapes(layer):
            s = float(np.sqrt(1.0 / fan_in(layer)))
            tensors.append(rng.uniform(-s, s, size=shape).astype(FLOAT))
        params.append(tensors)
    return params


@dataclass
class OptimizerState:
    """Momentum-SGD state for one parameter set (a list of layer param lists)."""
    lr: float
    momentum: float = 0.9
    velocity: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_params(cls, params, lr: float, momentum: float = 0.9) -> "OptimizerState":
        vel = [[np.zeros_like(t) for t in layer] for layer in params]
        return cls(lr=lr, momentum=momentum, velocity=vel)


def sgd_step(params, grads_sum, n: int, opt: OptimizerState):
    """One momentum-SGD step from gradient *sums* over n samples.

    v <- momentum * v + grads_sum / n
    w <- w - lr * v

    Updates params and opt.velocity in place (float32 arithmetic throughout)
    and returns params. With momentum 0 this is exactly
    w - (lr / n) * grads_sum.
    """
    inv_n = FLOAT(1.0) / FLOAT(n)
    lr = FLOAT(opt.lr)
    mu = FLOAT(opt.momentum)
    for li, layer_params in enumerate(params):
        for ti, w in enumerate(layer_params):
            g = grads_sum[li][ti]
            if g.shape != w.shape:
                raise ShapeMismatch(f"grad shape {g.shape} vs param shape {w.shape}")
            v = opt.velocity[li][ti]
            v *= mu
            v += g * inv_n
            w -= lr * v
    return params


# ---------------------------------------------------------------------------
# Serialization: flat little-endian binary
# ---------------------------------------------------------------------------

_MAGIC = b"STZT"
_VERSION = 1


def serialize_params(params) -> bytes:
    """Flat binary encoding of a parameter set.

    Layout (all little-endian): magic 'STZT', u32 version, u32 tensor count,
    then per tensor u32 ndim + u32 dims + raw float32 data in row-major order.
    Layer grouping is encoded as a leading u32 per layer via a layer-count
    header so the nested structure round-trips.
    """
    flat = []
    layer_sizes = []
    for layer_params in params:
        layer_sizes.append(len(layer_params))
        flat.extend(layer_params)
    out = [_MAGIC, struct.pack("<II", _VERSION, len(flat))]
    out.append(struct.pack("<I", len(layer_sizes)))
    out.append(struct.pack(f"<{len(layer_sizes)}I", *layer_sizes) if layer_sizes else b"")
    for t in flat:
        a = np.ascontiguousarray(t, dtype=FLOAT)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        out.append(a.tobytes())
    return b"".join(out)


def deserialize_params(blob: bytes) -> list[list[np.ndarray]]:
    """Inverse of serialize_params. Raises CorruptCheckpoint on bad data."""
    try:
        if blob[:4] != _MAGIC:
            raise CorruptCheckpoint("bad magic")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != _VERSION:
            raise CorruptCheckpoint(f"unsupported version {version}")
        off = 12
        (n_layers,) = struct.unpack_from("<I", blob, off)
        off += 4
        layer_sizes = struct.unpack_from(f"<{n_layers}I", blob, off)
        off += 4 * n_layers
        if sum(layer_sizes) != count:
            raise CorruptCheckpoint("tensor count disagrees with layer table")
        tensors = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            nbytes = 4 * size
            if off + nbytes > len(blob):
                raise CorruptCheckpoint("truncated tensor data")
            a = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
            tensors.append(a.astype(FLOAT))
            off += nbytes
        if off != len(blob):
            raise CorruptCheckpoint(f"{len(blob) - off} trailing bytes")
    except struct.error as exc:
        raise CorruptCheckpoint(str(exc)) from exc
    params: list[list[np.ndarray]] = []
    i = 0
    for sz in layer_sizes:
        params.append(tensors[i:i + sz])
        i += sz
    return params


# ---------------------------------------------------------------------------
# Nested parameter-set utilities
# ---------------------------------------------------------------------------

def flatten_params(params) -> list[np.ndarray]:
    """All tensors of a nested parameter set, in layer order."""
    return [t for layer in params for t in layer]


def param_index_pairs(params) -> list[tuple[int, int]]:
    """(layer, slot) address of every tensor, aligned with flatten_params."""
    return [(li, ti) for li, layer in enumerate(params)
            for ti in range(len(layer))]


def rebuild_params(flat, pairs, n_layers: int) -> list[list[np.ndarray]]:
    """Inverse of flatten_params given the index pairs."""
    nested: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
    for (li, ti), t in zip(pairs, flat):
        if ti != len(nested[li]):
            raise ShapeMismatch("tensor index pairs out of order")
        nested[li].append(t)
    return nested


def check_same_structure(reference, candidate, what: str) -> None:
    """Raise ShapeMismatch unless two nested sets have identical shapes."""
    ref_flat = flatten_params(reference)
    cand_flat = flatten_params(candidate)
    if len(ref_flat) != len(cand_flat):
        raise ShapeMismatch(f"{what}: expected {len(ref_flat)} tensors, "
                            f"got {len(cand_flat)}")
    for r, c in zip(ref_flat, cand_flat):
        if r.shape != c.shape:
            raise ShapeMismatch(f"{what}: tensor shape {c.shape} does not "
                                f"match model shape {r.shape}")


def pack_vector(params) -> np.ndarray:
    """Concatenate a nested parameter set into one flat float32 vector."""
    flat = flatten_params(params)
    if not flat:
        return np.zeros(0, dtype=FLOAT)
    return np.concatenate([np.ascontiguousarray(t, dtype=FLOAT).ravel()
                           for t in flat])


def unpack_vector(vec: np.ndarray, like) -> list[list[np.ndarray]]:
    """Slice a flat vector back into the nested shape of `like`."""
    nested: list[list[np.ndarray]] = []
    off = 0
    for layer in like:
        slots = []
        for t in layer:
            n = t.size
            slots.append(vec[off:off + n].reshape(t.shape))
            off += n
        nested.append(slots)
    if off != vec.size:
        raise ShapeMismatch(f"vector has {vec.size} elements, "
                            f"structure needs {off}")
    return nested
