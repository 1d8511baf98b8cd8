"""
Minimal CNN core: tensors, layers with hand-written backward passes, and the
two binary-classification architectures (five and eight convolutional layers).

Everything is plain numpy, float32 by default, with fixed reduction order so
repeated runs are bit-identical. Layers preserve the dtype of their input,
which lets the gradient checks run the same code in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

ARCH_VARIANTS = ("five_layer", "eight_layer")
PROB_CLAMP = 1e-7
BUNDLE_MAGIC = b"TILECNN1"


@dataclass
class Tensor:
    """A named parameter: float32 values plus an optional same-shape gradient."""

    values: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.grad is not None and self.grad.shape != self.values.shape:
            raise ValueError("gradient shape must match values shape")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel_side: int
    out_channels: int
    pool: bool
    pad: int = 0


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: str
    input_side: int
    conv_layers: Tuple[ConvLayerSpec, ...]

    def __post_init__(self):
        if self.variant not in ARCH_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        n = len(self.conv_layers)
        if self.variant == "five_layer" and n != 5:
            raise ValueError("five_layer must have exactly 5 conv layers")
        if self.variant == "eight_layer":
            if n != 8:
                raise ValueError("eight_layer must have exactly 8 conv layers")
            early = [l.kernel_side for l in self.conv_layers[:2]]
            late = [l.kernel_side for l in self.conv_layers[2:]]
            if min(early) <= max(late):
                raise ValueError("eight_layer early kernels must be strictly "
                                 "larger than later kernels")


def make_spec(variant: str, input_side: int = 128) -> ArchitectureSpec:
    """Concrete layer stacks for the two variants.

    eight_layer uses zero-padded ("same") convolutions throughout; with valid
    convolutions its spatial extent would hit zero before the last layer at
    the default input side.
    """
    if variant == "five_layer":
        layers = (
            ConvLayerSpec(3, 16, pool=True),
            ConvLayerSpec(3, 32, pool=True),
            ConvLayerSpec(3, 64, pool=True),
            ConvLayerSpec(3, 128, pool=True),
            ConvLayerSpec(3, 128, pool=False),
        )
    elif variant == "eight_layer":
        layers = (
            ConvLayerSpec(7, 16, pool=True, pad=3),
            ConvLayerSpec(5, 32, pool=True, pad=2),
            ConvLayerSpec(3, 64, pool=False, pad=1),
            ConvLayerSpec(3, 64, pool=True, pad=1),
            ConvLayerSpec(3, 128, pool=False, pad=1),
            ConvLayerSpec(3, 128, pool=True, pad=1),
            ConvLayerSpec(3, 256, pool=False, pad=1),
            ConvLayerSpec(3, 256, pool=False, pad=1),
        )
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return ArchitectureSpec(variant=variant, input_side=input_side, conv_layers=layers)


# ---------------------------------------------------------------------------
# primitive ops (functional forms; each has a layer class with backward below)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, OH*OW) patch matrix, stride-tricks view copy."""
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride))
    return np.ascontiguousarray(view).reshape(n, c * k * k, oh * ow), oh, ow


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
           stride: int = 1) -> np.ndarray:
    """Valid-padding cross-correlation.

    x: (N, C, H, W); weights: (O, C, k, k); bias: (O,). Output (N, O, OH, OW).
    """
    n, c, h, w = x.shape
    o, cw, k, k2 = weights.shape
    if cw != c or k != k2:
        raise ValueError(f"weight shape {weights.shape} incompatible with input "
                         f"channels {c}")
    if h < k or w < k:
        raise ValueError("input smaller than kernel")
    cols, oh, ow = _im2col(x, k, stride)
    wmat = weights.reshape(o, c * k * k)
    out = np.einsum("ox,nxp->nop", wmat, cols, optimize=True)
    out += bias[None, :, None]
    return out.reshape(n, o, oh, ow)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling, stride 2; odd trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    v = x[:, :, :h2 * 2, :w2 * 2].reshape(n, c, h2, 2, w2, 2)
    return v.max(axis=(3, 5))


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x: (N, F); weights: (F, O); bias: (O,)."""
    if x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense input width {x.shape[1]} != weight rows "
                         f"{weights.shape[0]}")
    return x @ weights + bias


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def binary_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [1e-7, 1 - 1e-7]."""
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = labels.astype(p.dtype)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def binary_cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean BCE)/d(probs); zero where the clamp is active."""
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels).astype(p.dtype)
    g = (p - y) / (p * (1 - p)) / p.size
    g = np.where((probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP), g, 0.0)
    return g.astype(probs.dtype)


# ---------------------------------------------------------------------------
# layers with backward passes
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, weights: Tensor, bias: Tensor, stride: int = 1, pad: int = 0):
        self.w = weights
        self.b = bias
        self.stride = stride
        self.pad = pad
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        w = self.w.values.astype(x.dtype, copy=False)
        b = self.b.values.astype(x.dtype, copy=False)
        cols, oh, ow = _im2col(x, w.shape[2], self.stride)
        o = w.shape[0]
        out = np.einsum("ox,nxp->nop", w.reshape(o, -1), cols, optimize=True)
        out += b[None, :, None]
        self._cache = (x.shape, cols, oh, ow, x.dtype)
        return out.reshape(x.shape[0], o, oh, ow)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xshape, cols, oh, ow, dtype = self._cache
        n, c, hp, wp = xshape
        o, _, k, _ = self.w.shape
        s = self.stride
        dmat = dout.reshape(n, o, oh * ow)
        dw = np.einsum("nop,nxp->ox", dmat, cols, optimize=True).reshape(self.w.shape)
        db = dmat.sum(axis=(0, 2))
        self.w.grad = self.w.grad + dw if self.w.grad is not None else dw
        self.b.grad = self.b.grad + db if self.b.grad is not None else db
        wmat = self.w.values.astype(dtype, copy=False).reshape(o, -1)
        dcols = np.einsum("ox,nop->nxp", wmat, dmat, optimize=True)
        dcols = dcols.reshape(n, c, k, k, oh, ow)
        dx = np.zeros(xshape, dtype=dtype)
        for p in range(k):
            for q in range(k):
                dx[:, :, p:p + s * oh:s, q:q + s * ow:s] += dcols[:, :, p, q]
        if self.pad:
            dx = dx[:, :, self.pad:hp - self.pad, self.pad:wp - self.pad]
        return dx


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0)


class MaxPool2x2:
    """2x2/stride-2 max pooling; gradient ties route to the first element in
    row-major scan order within each window."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        v = x[:, :, :h2 * 2, :w2 * 2].reshape(n, c, h2, 2, w2, 2)
        flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        idx = flat.argmax(axis=-1)  # argmax returns first occurrence: the tie rule
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xshape, idx = self._cache
        n, c, h, w = xshape
        h2, w2 = h // 2, w // 2
        dflat = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
        np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(xshape, dtype=dout.dtype)
        dx[:, :, :h2 * 2, :w2 * 2] = (
            dflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2 * 2, w2 * 2))
        return dx


class GlobalAvgPool:
    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), self._shape).astype(dout.dtype)


class Dense:
    def __init__(self, weights: Tensor, bias: Tensor):
        self.w = weights
        self.b = bias
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        w = self.w.values.astype(x.dtype, copy=False)
        b = self.b.values.astype(x.dtype, copy=False)
        return dense(x, w, b)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dw = self._x.T @ dout
        db = dout.sum(axis=0)
        self.w.grad = self.w.grad + dw if self.w.grad is not None else dw
        self.b.grad = self.b.grad + db if self.b.grad is not None else db
        return dout @ self.w.values.astype(dout.dtype, copy=False).T


class Sigmoid:
    def __init__(self):
        self._out = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._out = sigmoid(x)
        return self._out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._out * (1 - self._out)


# ---------------------------------------------------------------------------
# parameters and the assembled network
# ---------------------------------------------------------------------------

class Parameters:
    """Ordered, named parameter tensors consistent with an ArchitectureSpec."""

    def __init__(self, tensors: Dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors.keys())

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "Parameters":
        return Parameters({k: Tensor(v.values.copy()) for k, v in self.tensors.items()})


def init_parameters(spec: ArchitectureSpec, seed: int) -> Parameters:
    """He-uniform weights, zero biases, fully determined by the seed."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    in_ch = 1
    for i, layer in enumerate(spec.conv_layers):
        k, o = layer.kernel_side, layer.out_channels
        fan_in = in_ch * k * k
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(o, in_ch, k, k)).astype(np.float32)
        tensors[f"conv{i}_w"] = Tensor(w)
        tensors[f"conv{i}_b"] = Tensor(np.zeros(o, dtype=np.float32))
        in_ch = o
    limit = np.sqrt(6.0 / in_ch)
    tensors["dense_w"] = Tensor(
        rng.uniform(-limit, limit, size=(in_ch, 1)).astype(np.float32))
    tensors["dense_b"] = Tensor(np.zeros(1, dtype=np.float32))
    return Parameters(tensors)


class Network:
    """Tile classifier: conv stack -> global average pool -> dense -> sigmoid."""

    def __init__(self, spec: ArchitectureSpec, params: Parameters):
        self.spec = spec
        self.params = params
        self.layers = []
        for i, ls in enumerate(spec.conv_layers):
            self.layers.append(Conv2d(params[f"conv{i}_w"], params[f"conv{i}_b"],
                                      stride=1, pad=ls.pad))
            self.layers.append(ReLU())
            if ls.pool:
                self.layers.append(MaxPool2x2())
        self.layers.append(GlobalAvgPool())
        self.layers.append(Dense(params["dense_w"], params["dense_b"]))
        self.layers.append(Sigmoid())

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Probabilities in [0, 1], one per tile; batch order preserved.

        batch: (N, 1, S, S) floats in [0, 1] with S == spec.input_side.
        """
        if batch.ndim != 4 or batch.shape[2] != self.spec.input_side \
                or batch.shape[3] != self.spec.input_side:
            raise ValueError(f"expected (N, 1, {self.spec.input_side}, "
                             f"{self.spec.input_side}) input, got {batch.shape}")
        x = batch
        for layer in self.layers:
            x = layer.forward(x)
        return x[:, 0]

    def forward_backward(self, batch: np.ndarray,
                         labels: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """One training step: returns (loss, probabilities, input gradient);
        parameter gradients accumulate into the Tensors."""
        probs = self.forward(batch)
        loss = binary_cross_entropy(probs, labels)
        d = binary_cross_entropy_grad(probs, labels)[:, None]
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return loss, probs, d


def preprocess_tiles(crops: List[np.ndarray], input_side: int) -> np.ndarray:
    """Resize uint8 single-channel crops to the network input side, scale to [0, 1]."""
    from PIL import Image

    batch = np.empty((len(crops), 1, input_side, input_side), dtype=np.float32)
    for i, c in enumerate(crops):
        if c.shape != (input_side, input_side):
            c = np.asarray(Image.fromarray(c).resize(
                (input_side, input_side), resample=Image.Resampling.BOX
                if c.shape[0] > input_side else Image.Resampling.BILINEAR),
                dtype=np.uint8)
        batch[i, 0] = c.astype(np.float32) / 255.0
    return batch


# ---------------------------------------------------------------------------
# model bundle I/O: JSON header + raw little-endian float32 tensor data
# ---------------------------------------------------------------------------

def save_bundle(path: Union[str, Path], spec: ArchitectureSpec, params: Parameters,
                meta: dict) -> None:
    """Self-describing binary bundle; byte-identical for identical inputs."""
    header = {
        "format_version": 1,
        "spec": {
            "variant": spec.variant,
            "input_side": spec.input_side,
            "conv_layers": [[l.kernel_side, l.out_channels, l.pool, l.pad]
                            for l in spec.conv_layers],
        },
        "meta": meta,
        "tensors": [{"name": n, "shape": list(params[n].shape)}
                    for n in params.names()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for n in params.names():
            f.write(np.ascontiguousarray(
                params[n].values, dtype="<f4").tobytes())


def load_bundle(path: Union[str, Path]) -> Tuple[ArchitectureSpec, Parameters, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(BUNDLE_MAGIC))
        if magic != BUNDLE_MAGIC:
            raise ValueError(f"not a model bundle: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        spec = ArchitectureSpec(
            variant=header["spec"]["variant"],
            input_side=header["spec"]["input_side"],
            conv_layers=tuple(ConvLayerSpec(*row)
                              for row in header["spec"]["conv_layers"]))
        tensors: Dict[str, Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 4), dtype="<f4").reshape(shape)
            tensors[entry["name"]] = Tensor(data.astype(np.float32))
    return spec, Parameters(tensors), header["meta"]
