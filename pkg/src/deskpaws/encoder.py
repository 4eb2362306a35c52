"""MLP encoder (trunk + projection head), optional prediction head, and the
binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deskpaws import autodiff as ad
from deskpaws.autodiff import Node

MAGIC = b"PAWS"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int = 16
    hidden_dim: int = 64
    trunk_layers: int = 2
    proj_hidden: int = 64
    proj_layers: int = 3
    embed_dim: int = 32
    pred_head: bool = False
    pred_hidden: int = 16

    def validate(self):
        for name in ("input_dim", "hidden_dim", "proj_hidden", "embed_dim", "pred_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder {name} must be positive, got {getattr(self, name)}")
        if self.trunk_layers < 0 or self.proj_layers < 0:
            raise ConfigError("layer counts must be non-negative")

    @property
    def output_dim(self) -> int:
        if self.proj_layers:
            return self.embed_dim
        return self.hidden_dim if self.trunk_layers else self.input_dim


@dataclass
class Layer:
    weight: Node
    bias: Node

    @property
    def fan_in(self):
        return self.weight.shape[0]

    @property
    def fan_out(self):
        return self.weight.shape[1]


@dataclass
class EncoderParams:
    trunk: list[Layer] = field(default_factory=list)
    projection: list[Layer] = field(default_factory=list)
    prediction: list[Layer] = field(default_factory=list)

    def layers(self) -> list[Layer]:
        return [*self.trunk, *self.projection, *self.prediction]

    def parameters(self) -> list[Node]:
        out = []
        for layer in self.layers():
            out += [layer.weight, layer.bias]
        return out

    def bias_ids(self) -> set[int]:
        return {id(layer.bias) for layer in self.layers()}

    @property
    def input_dim(self):
        layers = self.layers()
        return layers[0].fan_in if layers else None

    @property
    def has_prediction_head(self):
        return bool(self.prediction)

    def copy(self) -> EncoderParams:
        def dup(layers):
            return [Layer(ad.parameter(l.weight.value.copy()), ad.parameter(l.bias.value.copy())) for l in layers]

        return EncoderParams(dup(self.trunk), dup(self.projection), dup(self.prediction))

    def validate(self):
        layers = self.layers()
        for a, b in zip(self.trunk + self.projection, (self.trunk + self.projection)[1:]):
            if a.fan_out != b.fan_in:
                raise ConfigError(f"layer dimensions do not chain: {a.weight.shape} -> {b.weight.shape}")
        for layer in layers:
            if layer.bias.shape != (1, layer.fan_out):
                raise ConfigError(f"bias shape {layer.bias.shape} does not match weight {layer.weight.shape}")
        if self.prediction:
            d_in = self.prediction[0].fan_in
            if self.prediction[-1].fan_out != d_in:
                raise ConfigError("prediction head must map d -> d")
            for a, b in zip(self.prediction, self.prediction[1:]):
                if a.fan_out != b.fan_in:
                    raise ConfigError("prediction head dimensions do not chain")


def _glorot_layer(rng, fan_in, fan_out) -> Layer:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Layer(ad.parameter(w), ad.parameter(np.zeros((1, fan_out))))


def init_params(config: EncoderConfig, rng_seed: int) -> EncoderParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    dims = [config.input_dim] + [config.hidden_dim] * config.trunk_layers
    trunk = [_glorot_layer(rng, a, b) for a, b in zip(dims, dims[1:])]
    if config.proj_layers:
        pdims = [dims[-1]] + [config.proj_hidden] * (config.proj_layers - 1) + [config.embed_dim]
    else:
        pdims = [dims[-1]]
    projection = [_glorot_layer(rng, a, b) for a, b in zip(pdims, pdims[1:])]
    prediction = []
    if config.pred_head:
        d = pdims[-1]
        prediction = [_glorot_layer(rng, d, config.pred_hidden), _glorot_layer(rng, config.pred_hidden, d)]
    return EncoderParams(trunk, projection, prediction)


def _dense(x: Node, layer: Layer) -> Node:
    return ad.add(ad.matmul(x, layer.weight), layer.bias)


def _check_input(params: EncoderParams, x):
    d = params.input_dim
    cols = x.shape[1]
    if d is not None and cols != d:
        raise ad.ShapeError(f"encoder expects {d} input columns, got {cols}")


def encode(params: EncoderParams, x) -> Node:
    """Trunk followed by projection head; ReLU after every layer but the last.

    With no layers at all the encoder is a passthrough.
    """
    x = x if isinstance(x, Node) else ad.constant(x)
    _check_input(params, x)
    layers = params.trunk + params.projection
    h = x
    for i, layer in enumerate(layers):
        h = _dense(h, layer)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def embed(params: EncoderParams, x) -> np.ndarray:
    """Array-only forward pass of :func:`encode` (no graph is built)."""
    h = ad.as_matrix(x)
    d = params.input_dim
    if d is not None and h.shape[1] != d:
        raise ad.ShapeError(f"encoder expects {d} input columns, got {h.shape[1]}")
    layers = params.trunk + params.projection
    for i, layer in enumerate(layers):
        h = h @ layer.weight.value + layer.bias.value
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def first_projection_features(params: EncoderParams, x) -> Node:
    """Output of the first projection layer (post-ReLU); used for fine-tuning."""
    if not params.projection:
        raise ConfigError("encoder has no projection head")
    x = x if isinstance(x, Node) else ad.constant(x)
    _check_input(params, x)
    h = x
    for layer in params.trunk:
        h = ad.relu(_dense(h, layer))
    return ad.relu(_dense(h, params.projection[0]))


def predict_head(params: EncoderParams, z: Node, enabled: bool = True) -> Node:
    """Apply the prediction head; pass-through when ``enabled`` is False."""
    if not enabled:
        return z
    if not params.prediction:
        raise ConfigError("prediction head requested but not configured")
    h = z
    for i, layer in enumerate(params.prediction):
        h = _dense(h, layer)
        if i < len(params.prediction) - 1:
            h = ad.relu(h)
    return h


# ---------------------------------------------------------------------------
# checkpoints
#
# header: magic "PAWS", u32 version, u32 matrix count; then per matrix
# u64 rows, u64 cols, rows*cols little-endian f64. The first matrix is a 1x4
# layout row [trunk layers, projection layers, prediction layers, has
# optimizer state]; then weight/bias pairs in layer order; then, if present,
# one velocity matrix per parameter and a 1x2 [global step, epoch] row.


@dataclass
class Checkpoint:
    params: EncoderParams
    velocity: list[np.ndarray] | None = None
    step: int = 0
    epoch: int = 0


def checkpoint_bytes(params: EncoderParams, velocity=None, step: int = 0, epoch: int = 0) -> bytes:
    layout = np.array([[len(params.trunk), len(params.projection), len(params.prediction), velocity is not None]], float)
    mats = [layout] + [p.value for p in params.parameters()]
    if velocity is not None:
        if len(velocity) != len(params.parameters()):
            raise ValueError("velocity list does not match parameter count")
        mats += list(velocity) + [np.array([[step, epoch]], float)]
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(mats))]
    for m in mats:
        m = np.ascontiguousarray(m, dtype="<f8")
        out.append(struct.pack("<QQ", *m.shape))
        out.append(m.tobytes())
    return b"".join(out)


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic bytes)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos, mats = 12, []
    for _ in range(count):
        if pos + 16 > len(blob):
            raise CheckpointFormatError("truncated checkpoint")
        rows, cols = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        nbytes = rows * cols * 8
        if pos + nbytes > len(blob):
            raise CheckpointFormatError("truncated checkpoint payload")
        mats.append(np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64))
        pos += nbytes
    if pos != len(blob):
        raise CheckpointFormatError("trailing bytes after last matrix")

    n_trunk, n_proj, n_pred, has_opt = (int(v) for v in mats[0][0])
    n_layers = n_trunk + n_proj + n_pred
    flat = mats[1 : 1 + 2 * n_layers]
    layers = [Layer(ad.parameter(flat[2 * i]), ad.parameter(flat[2 * i + 1])) for i in range(n_layers)]
    params = EncoderParams(layers[:n_trunk], layers[n_trunk : n_trunk + n_proj], layers[n_trunk + n_proj :])
    params.validate()
    ckpt = Checkpoint(params)
    if has_opt:
        rest = mats[1 + 2 * n_layers :]
        ckpt.velocity = [m.copy() for m in rest[: 2 * n_layers]]
        ckpt.step, ckpt.epoch = (int(v) for v in rest[2 * n_layers][0])
    return ckpt


def save_checkpoint(path, params: EncoderParams, velocity=None, step: int = 0, epoch: int = 0) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, velocity, step, epoch))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
