"""Feed-forward classifiers with an embedding head, plus resolution degradation.

A model flattens its image input, applies relu hidden layers, a linear
embedding layer (these embeddings are what distillation compares), and a
linear classifier on top of the embedding.  Teacher, assistant and student
differ only in width; any pair used together must share the embedding
dimension.

Degradation is non-overlapping box average pooling, so each output pixel is
the exact mean of its factor x factor block and image-level statistics are
preserved.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add_bias, matmul, relu


@dataclass(frozen=True)
class ModelSpec:
    input_dims: tuple[int, int, int]  # (height, width, channels)
    hidden_layers: tuple[int, ...]
    embedding_dim: int
    num_classes: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        object.__setattr__(self, "hidden_layers",
                           tuple(int(v) for v in self.hidden_layers))
        if len(self.input_dims) != 3 or any(v < 1 for v in self.input_dims):
            raise ValueError(f"input_dims must be three positive extents, "
                             f"got {self.input_dims}")
        if not self.hidden_layers:
            raise ValueError("at least one hidden layer is required")
        if any(w < 1 for w in self.hidden_layers):
            raise ValueError(f"zero-width hidden layer in {self.hidden_layers}")
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be positive, got {self.embedding_dim}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")

    @property
    def input_size(self) -> int:
        h, w, c = self.input_dims
        return h * w * c

    def layer_widths(self) -> list[int]:
        return [self.input_size, *self.hidden_layers, self.embedding_dim,
                self.num_classes]


@dataclass
class ImageBatch:
    """m images of shape (h, w, c) with values in [0, 1] and aligned labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (m, h, w, c), got shape "
                             f"{self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"{self.images.shape[0]} images but labels shape "
                             f"{self.labels.shape}")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain non-finite values")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "ImageBatch":
        return ImageBatch(self.images[indices], self.labels[indices])


class Model:
    """Parameter container for one classifier; frozen models never get grads."""

    def __init__(self, spec: ModelSpec, parameters: list[Tensor], frozen: bool = False):
        self.spec = spec
        self.parameters = parameters
        self.frozen = frozen
        if frozen:
            self.freeze()

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters:
            p.requires_grad = False

    def parameter_values(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters]

    def clone(self) -> "Model":
        params = [Tensor(p.values, requires_grad=not self.frozen)
                  for p in self.parameters]
        return Model(self.spec, params, frozen=self.frozen)


def build_model(spec: ModelSpec) -> Model:
    """Seeded He-style uniform init: weights in +-sqrt(6/fan_in), zero biases."""
    rng = np.random.default_rng(spec.seed)
    widths = spec.layer_widths()
    params: list[Tensor] = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / fan_in)
        params.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                             requires_grad=True))
        params.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Model(spec, params)


def forward(model: Model, batch: ImageBatch):
    """Run the batch through the model: (embeddings, logits) graph tensors."""
    m, h, w, c = batch.images.shape
    if (h, w, c) != model.spec.input_dims:
        raise ValueError(f"input-dimension mismatch: batch {(h, w, c)} vs "
                         f"model {model.spec.input_dims}")
    x = Tensor(batch.images.reshape(m, -1))
    n_hidden = len(model.spec.hidden_layers)
    out = x
    for layer in range(n_hidden):
        weight, bias = model.parameters[2 * layer], model.parameters[2 * layer + 1]
        out = relu(add_bias(matmul(out, weight), bias))
    w_emb, b_emb = model.parameters[2 * n_hidden], model.parameters[2 * n_hidden + 1]
    embeddings = add_bias(matmul(out, w_emb), b_emb)
    w_cls, b_cls = model.parameters[2 * n_hidden + 2], model.parameters[2 * n_hidden + 3]
    logits = add_bias(matmul(embeddings, w_cls), b_cls)
    return embeddings, logits


def degrade(batch: ImageBatch, factor: int) -> ImageBatch:
    """Non-overlapping factor x factor average pooling; labels unchanged."""
    if factor < 1:
        raise ValueError(f"degrade factor must be >= 1, got {factor}")
    if factor == 1:
        return ImageBatch(batch.images.copy(), batch.labels.copy())
    m, h, w, c = batch.images.shape
    if h % factor or w % factor:
        raise ValueError(f"degrade factor {factor} does not divide image "
                         f"dims ({h}, {w})")
    blocks = batch.images.reshape(m, h // factor, factor, w // factor, factor, c)
    pooled = blocks.mean(axis=(2, 4))
    return ImageBatch(pooled, batch.labels.copy())


_HEADER_RE = re.compile(
    r"^horkd-model input=(\d+),(\d+),(\d+) hidden=([\d,]+) embedding=(\d+) "
    r"classes=(\d+) seed=(-?\d+) frozen=([01])$")


def save_model(model: Model, path) -> None:
    """One text header line, then every parameter as little-endian float64."""
    s = model.spec
    header = (f"horkd-model input={s.input_dims[0]},{s.input_dims[1]},"
              f"{s.input_dims[2]} hidden={','.join(map(str, s.hidden_layers))} "
              f"embedding={s.embedding_dim} classes={s.num_classes} "
              f"seed={s.seed} frozen={int(model.frozen)}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for p in model.parameters:
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").rstrip("\n")
        match = _HEADER_RE.match(header)
        if not match:
            raise ValueError(f"not a model checkpoint: bad header {header!r}")
        h, w, c, hidden, emb, classes, seed, frozen = match.groups()
        spec = ModelSpec(input_dims=(int(h), int(w), int(c)),
                         hidden_layers=tuple(int(v) for v in hidden.split(",")),
                         embedding_dim=int(emb), num_classes=int(classes),
                         seed=int(seed))
        raw = fh.read()
    widths = spec.layer_widths()
    expected = sum(fi * fo + fo for fi, fo in zip(widths[:-1], widths[1:]))
    flat = np.frombuffer(raw, dtype="<f8")
    if flat.size != expected:
        raise ValueError(f"checkpoint holds {flat.size} floats, spec needs {expected}")
    params: list[Tensor] = []
    offset = 0
    is_frozen = bool(int(frozen))
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weight = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = flat[offset:offset + fan_out]
        offset += fan_out
        params.append(Tensor(weight, requires_grad=not is_frozen))
        params.append(Tensor(bias, requires_grad=not is_frozen))
    return Model(spec, params, frozen=is_frozen)
