"""Small convolutional classifiers and their encrypted evaluation.

A model is a plain description: input geometry plus a layer list drawn
from strided valid-mode convolution, squaring, global average pooling,
and one fully connected head.  ``infer_plain`` evaluates it with straight
numpy loops and is the reference the encrypted path is measured against.
``infer_encrypted`` evaluates the same description over any backend using
the slot kernels, consuming one multiplicative level per convolution,
square, and dense layer.

The module also owns the two file formats the command line uses: a
weights container (magic ``HEW1``, JSON architecture header, raw float64
arrays) and grayscale images as binary or ASCII PGM, or CSV.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .enc_tensor import (
    EncImage,
    conv2d,
    conv_rotation_steps,
    dense_rotation_steps,
    dense_with_fold,
    global_avg_pool,
    pool_rotation_steps,
    square_activation,
)
from .errors import BudgetExhausted, GeometryMismatch
from .he_backend import HeBackend, HeVector

__all__ = [
    "Conv2d",
    "SquareAct",
    "GlobalAvgPool",
    "Dense",
    "ModelSpec",
    "depth_required",
    "infer_plain",
    "encode_image_rows",
    "infer_encrypted",
    "read_logits",
    "required_rotation_steps",
    "save_model",
    "load_model",
    "load_image",
    "save_image_pgm",
    "make_demo_spec",
    "DEMO_ARCHS",
]


@dataclass
class Conv2d:
    filters: np.ndarray  # (kh, kw, c_in, c_out)
    stride: int = 1
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=np.float64)
        if self.filters.ndim != 4:
            raise GeometryMismatch("conv filters must be 4-D (kh, kw, c_in, c_out)")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
            if self.bias.size != self.filters.shape[3]:
                raise GeometryMismatch("conv bias must have one entry per output channel")


@dataclass
class SquareAct:
    pass


@dataclass
class GlobalAvgPool:
    pass


@dataclass
class Dense:
    weights: np.ndarray  # (n_out, n_in)
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        if self.weights.ndim != 2 or self.bias.size != self.weights.shape[0]:
            raise GeometryMismatch("dense needs (n_out, n_in) weights and n_out bias")


Layer = Conv2d | SquareAct | GlobalAvgPool | Dense


@dataclass
class ModelSpec:
    input_height: int
    input_width: int
    input_channels: int
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        self.trace()  # validate geometry eagerly

    def trace(self) -> list[tuple[int, int, int]]:
        """Shape after every layer; raises if the stack is inconsistent."""
        h, w, c = self.input_height, self.input_width, self.input_channels
        pooled = False
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if pooled:
                    raise GeometryMismatch(f"layer {i}: convolution after pooling")
                kh, kw, ci, co = layer.filters.shape
                if ci != c:
                    raise GeometryMismatch(f"layer {i}: expects {ci} channels, has {c}")
                if kh > h or kw > w:
                    raise GeometryMismatch(f"layer {i}: {kh}x{kw} filter exceeds {h}x{w} input")
                h = (h - kh) // layer.stride + 1
                w = (w - kw) // layer.stride + 1
                c = co
            elif isinstance(layer, SquareAct):
                if pooled:
                    raise GeometryMismatch(f"layer {i}: squaring after pooling unsupported")
            elif isinstance(layer, GlobalAvgPool):
                if pooled:
                    raise GeometryMismatch(f"layer {i}: repeated pooling")
                pooled = True
            elif isinstance(layer, Dense):
                if not pooled:
                    raise GeometryMismatch(f"layer {i}: dense head requires pooled features")
                if layer.weights.shape[1] != c:
                    raise GeometryMismatch(
                        f"layer {i}: dense expects {layer.weights.shape[1]} features, has {c}"
                    )
                c = layer.weights.shape[0]
            else:
                raise GeometryMismatch(f"layer {i}: unknown layer {type(layer).__name__}")
            shapes.append((h, w, c) if not pooled else (1, 1, c))
        return shapes


def depth_required(spec: ModelSpec) -> int:
    """Multiplicative levels one pass consumes: conv, square, dense are 1 each."""
    return sum(isinstance(l, (Conv2d, SquareAct, Dense)) for l in spec.layers)


def infer_plain(spec: ModelSpec, image: np.ndarray) -> np.ndarray:
    """Reference forward pass with explicit loops; returns the logits."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape != (spec.input_height, spec.input_width, spec.input_channels):
        raise GeometryMismatch(f"image shape {x.shape} does not match the model input")
    vec: np.ndarray | None = None
    for layer in spec.layers:
        if isinstance(layer, Conv2d):
            kh, kw, ci, co = layer.filters.shape
            s = layer.stride
            oh = (x.shape[0] - kh) // s + 1
            ow = (x.shape[1] - kw) // s + 1
            out = np.zeros((oh, ow, co))
            for i in range(oh):
                for u in range(ow):
                    patch = x[i * s : i * s + kh, u * s : u * s + kw, :]
                    for k in range(co):
                        out[i, u, k] = np.sum(patch * layer.filters[:, :, :, k])
            if layer.bias is not None:
                out += layer.bias
            x = out
        elif isinstance(layer, SquareAct):
            x = x * x
        elif isinstance(layer, GlobalAvgPool):
            vec = x.mean(axis=(0, 1))
        elif isinstance(layer, Dense):
            vec = layer.weights @ vec + layer.bias
    if vec is None:
        raise GeometryMismatch("model has no pooling stage")
    return vec


# -- encrypted path ----------------------------------------------------

def encode_image_rows(backend: HeBackend, image: np.ndarray) -> EncImage:
    """Encrypt one ciphertext per image row, channel-strided within the row:
    pixel (x, c) of row i sits in slot c * width + x."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    rows = []
    for i in range(h):
        rows.append(backend.encrypt_vec(img[i].T.ravel()))
    return EncImage(rows=rows, height=h, width=w, channels=c)


def _dense_stride(valid: frozenset[int], n_out: int, slot_count: int) -> int:
    slots = sorted(valid)
    if len(slots) > 1:
        gap = slots[1] - slots[0]
        if gap > 0 and all(b - a == gap for a, b in zip(slots, slots[1:])):
            if (n_out - 1) * gap < slot_count:
                return gap
    return 1


def infer_encrypted(
    backend: HeBackend,
    spec: ModelSpec,
    image: EncImage,
    timings: list[tuple[str, float]] | None = None,
) -> HeVector:
    """Forward pass over ciphertexts; the result carries the logits in its
    layout's valid slots (ascending slot order = logit order).

    Depth exhaustion is re-raised with the failing layer named.  Pass a
    list as `timings` to collect (layer tag, seconds) pairs.
    """
    x: EncImage | None = image
    vec: HeVector | None = None
    for i, layer in enumerate(spec.layers):
        tag = f"{type(layer).__name__}[{i}]"
        t0 = time.perf_counter()
        try:
            if isinstance(layer, Conv2d):
                x = conv2d(backend, layer.filters, layer.stride, x)
                if layer.bias is not None:
                    spread = np.zeros(backend.slot_count)
                    for k in range(x.channels):
                        spread[k * x.width : k * x.width + x.width] = layer.bias[k]
                    x = EncImage(
                        rows=[backend.add_plain(r, spread) for r in x.rows],
                        height=x.height,
                        width=x.width,
                        channels=x.channels,
                    )
            elif isinstance(layer, SquareAct):
                x = square_activation(backend, x)
            elif isinstance(layer, GlobalAvgPool):
                vec = global_avg_pool(backend, x)
                x = None
            elif isinstance(layer, Dense):
                stride = _dense_stride(vec.layout.valid, layer.weights.shape[0], backend.slot_count)
                vec = dense_with_fold(backend, layer.weights, layer.bias, vec, out_stride=stride)
        except BudgetExhausted as exc:
            raise BudgetExhausted(
                f"multiplicative budget exhausted at {tag}: {exc}", layer=tag
            ) from None
        if timings is not None:
            timings.append((tag, time.perf_counter() - t0))
    if vec is None:
        raise GeometryMismatch("model has no pooling stage")
    return vec


def read_logits(backend: HeBackend, vec: HeVector, secret) -> np.ndarray:
    """Decrypt and pick the valid slots in ascending order."""
    slots = backend.decrypt_vec(vec, secret)
    idx = sorted(vec.layout.valid)
    out = slots[idx]
    if vec.layout.pending_scale != 1.0:
        out = out * vec.layout.pending_scale
    return out


def required_rotation_steps(spec: ModelSpec, slot_count: int) -> set[int]:
    """Every rotation step the encrypted pass may need, from geometry alone."""
    steps: set[int] = set()
    h, w, c = spec.input_height, spec.input_width, spec.input_channels
    for layer in spec.layers:
        if isinstance(layer, Conv2d):
            kh, kw, ci, co = layer.filters.shape
            steps |= conv_rotation_steps(w, c, kh, kw, co, layer.stride, slot_count)
            h = (h - kh) // layer.stride + 1
            w = (w - kw) // layer.stride + 1
            c = co
        elif isinstance(layer, GlobalAvgPool):
            steps |= pool_rotation_steps(w)
            feature_slots = [k * w for k in range(c)]
        elif isinstance(layer, Dense):
            n_out = layer.weights.shape[0]
            stride = _dense_stride(frozenset(feature_slots), n_out, slot_count)
            steps |= dense_rotation_steps(n_out, feature_slots, slot_count, stride)
    return {s % slot_count for s in steps} - {0}


# -- weights container -------------------------------------------------

_WEIGHTS_MAGIC = b"HEW1"


def save_model(spec: ModelSpec, path: str) -> None:
    header: dict = {
        "input": [spec.input_height, spec.input_width, spec.input_channels],
        "layers": [],
    }
    blobs: list[bytes] = []
    for layer in spec.layers:
        if isinstance(layer, Conv2d):
            header["layers"].append(
                {
                    "kind": "conv",
                    "shape": list(layer.filters.shape),
                    "stride": layer.stride,
                    "bias": layer.bias is not None,
                }
            )
            blobs.append(layer.filters.astype("<f8").tobytes())
            if layer.bias is not None:
                blobs.append(layer.bias.astype("<f8").tobytes())
        elif isinstance(layer, SquareAct):
            header["layers"].append({"kind": "square"})
        elif isinstance(layer, GlobalAvgPool):
            header["layers"].append({"kind": "gap"})
        elif isinstance(layer, Dense):
            header["layers"].append({"kind": "dense", "shape": list(layer.weights.shape)})
            blobs.append(layer.weights.astype("<f8").tobytes())
            blobs.append(layer.bias.astype("<f8").tobytes())
    blob = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC + struct.pack("<I", len(blob)) + blob)
        for b in blobs:
            fh.write(b)


def load_model(path: str) -> ModelSpec:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _WEIGHTS_MAGIC:
        raise GeometryMismatch("not a weights file")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    off = 8 + hlen

    def take(count: int) -> np.ndarray:
        nonlocal off
        nbytes = count * 8
        if off + nbytes > len(data):
            raise GeometryMismatch("weights file truncated")
        arr = np.frombuffer(data[off : off + nbytes], dtype="<f8").astype(np.float64)
        off += nbytes
        return arr

    layers: list[Layer] = []
    for entry in header["layers"]:
        kind = entry["kind"]
        if kind == "conv":
            kh, kw, ci, co = entry["shape"]
            f = take(kh * kw * ci * co).reshape(kh, kw, ci, co)
            bias = take(co) if entry.get("bias") else None
            layers.append(Conv2d(filters=f, stride=int(entry["stride"]), bias=bias))
        elif kind == "square":
            layers.append(SquareAct())
        elif kind == "gap":
            layers.append(GlobalAvgPool())
        elif kind == "dense":
            n_out, n_in = entry["shape"]
            w = take(n_out * n_in).reshape(n_out, n_in)
            layers.append(Dense(weights=w, bias=take(n_out)))
        else:
            raise GeometryMismatch(f"unknown layer kind {kind!r}")
    ih, iw, ic = header["input"]
    return ModelSpec(input_height=ih, input_width=iw, input_channels=ic, layers=layers)


# -- images ------------------------------------------------------------

def load_image(path: str) -> np.ndarray:
    """Grayscale image as floats in [0, 1]; PGM (P2/P5) or CSV by extension."""
    if path.endswith(".csv"):
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append([float(v) for v in line.split(",")])
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise GeometryMismatch("CSV image must be rectangular and non-empty")
        return np.asarray(rows, dtype=np.float64)[:, :, None]
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(data):
        # headers allow '#' comments between whitespace-separated fields
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if len(tokens) < 4 or tokens[0] not in (b"P2", b"P5"):
        raise GeometryMismatch("unsupported image format (want PGM P2/P5 or CSV)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval <= 0 or maxval > 65535:
        raise GeometryMismatch("bad PGM maxval")
    if tokens[0] == b"P5":
        pos += 1  # single whitespace byte after maxval
        if maxval < 256:
            raw = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
        else:
            raw = np.frombuffer(data[pos : pos + 2 * w * h], dtype=">u2")
        if raw.size != w * h:
            raise GeometryMismatch("PGM pixel data truncated")
        img = raw.reshape(h, w).astype(np.float64)
    else:
        values = data[pos:].split()
        if len(values) != w * h:
            raise GeometryMismatch("PGM pixel count mismatch")
        img = np.array([int(v) for v in values], dtype=np.float64).reshape(h, w)
    return (img / maxval)[:, :, None]


def save_image_pgm(image: np.ndarray, path: str) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise GeometryMismatch("PGM output is single-channel")
        img = img[:, :, 0]
    pixels = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


# -- demo catalog ------------------------------------------------------

DEMO_ARCHS = ("2conv", "3conv")


def make_demo_spec(arch: str = "2conv", size: int = 32, seed: int = 0) -> ModelSpec:
    """Seeded random model of one of the catalog shapes.

    `2conv` is a 5-layer-deep stack (5x5/4 conv, square, 3x3 conv, square,
    pool, 10-way head); `3conv` adds a third conv+square pair with 3x3/2
    convolutions throughout, for 7 levels.  Weights scale with fan-in so
    activations stay near unit size at any supported image size.
    """
    rng = np.random.default_rng(seed)

    def conv(kh, kw, ci, co, stride):
        f = rng.normal(0.0, 1.0 / np.sqrt(kh * kw * ci), (kh, kw, ci, co))
        return Conv2d(filters=f, stride=stride, bias=rng.normal(0.0, 0.05, co))

    if arch == "2conv":
        if size < 8:
            raise GeometryMismatch("2conv needs at least 8x8 input")
        layers: list[Layer] = [
            conv(5, 5, 1, 4, 4),
            SquareAct(),
            conv(3, 3, 4, 8, 1),
            SquareAct(),
            GlobalAvgPool(),
        ]
        feat = 8
    elif arch == "3conv":
        if size < 15:
            raise GeometryMismatch("3conv needs at least 15x15 input")
        layers = [
            conv(3, 3, 1, 4, 2),
            SquareAct(),
            conv(3, 3, 4, 8, 2),
            SquareAct(),
            conv(3, 3, 8, 8, 2),
            SquareAct(),
            GlobalAvgPool(),
        ]
        feat = 8
    else:
        raise GeometryMismatch(f"unknown architecture {arch!r}; have {DEMO_ARCHS}")
    layers.append(
        Dense(
            weights=rng.normal(0.0, 1.0 / np.sqrt(feat), (10, feat)),
            bias=rng.normal(0.0, 0.1, 10),
        )
    )
    return ModelSpec(input_height=size, input_width=size, input_channels=1, layers=layers)
