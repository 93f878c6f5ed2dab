###############################################################################
# Copyright 2024 The kan_mixers Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
###############################################################################
"""KAN-Mixers, MLP-Mixer and the flat MLP / KAN baselines."""
import logging
import pathlib
from typing import Any, Optional, Sequence, Union

import numpy as np
import pydantic

from kan_mixers import tensor as T
from kan_mixers.config import MixerConfig, ModelKind, SplineGrid
from kan_mixers.kan import KanLinear, init_kan_linear
from kan_mixers.nn import Dropout, LayerNorm, Linear, Module, ModuleList
from kan_mixers.tensor import DimensionError, Tensor

logger = logging.getLogger(__name__)

MLP_HIDDEN = (256, 128)
KAN_HIDDEN = (64,)

ImageBatch = Union[Tensor, np.ndarray]


def patchify(images: ImageBatch, p: int) -> Tensor:
    """Cuts images into non-overlapping p x p patches.

    Patches are ordered row-major over the image; inside a patch, values are
    ordered channel-major, then row-major over pixels.

    Args:
        images: [c, H, W] or [b, c, H, W]
        p: patch side

    Returns:
        Tensor [S, p*p*c] or [b, S, p*p*c] with S = (H/p) * (W/p)
    """
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = data.ndim == 3
    if single:
        data = data[None]
    if data.ndim != 4:
        raise DimensionError(f'patchify expects [c, H, W] or [b, c, H, W], got '
                             f'{data.shape}')
    b, c, h, w = data.shape
    if h % p or w % p:
        raise DimensionError(f'image extents {h}x{w} are not divisible by '
                             f'patch size {p}')
    out = data.reshape(b, c, h // p, p, w // p, p) \
        .transpose(0, 2, 4, 1, 3, 5) \
        .reshape(b, (h // p) * (w // p), c * p * p)
    return Tensor(out[0] if single else out)


def unpatchify(tokens: ImageBatch, p: int, channels: int, height: int,
               width: int) -> np.ndarray:
    """Inverse of `patchify`."""
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    single = data.ndim == 2
    if single:
        data = data[None]
    b = data.shape[0]
    out = data.reshape(b, height // p, width // p, channels, p, p) \
        .transpose(0, 3, 1, 4, 2, 5) \
        .reshape(b, channels, height, width)
    return out[0] if single else out


class FeedForward(Module):
    """Two-layer mixer: first layer, (GELU for linear layers), dropout,
    second layer."""

    def __init__(self, n_in: int, hidden: int, kind: ModelKind,
                 grid: SplineGrid, dropout_rate: float,
                 rng: np.random.Generator):
        super().__init__()
        self.use_kan = kind is ModelKind.KAN_MIXERS
        self.fc1: Union[KanLinear, Linear]
        self.fc2: Union[KanLinear, Linear]
        if self.use_kan:
            self.fc1 = init_kan_linear(n_in, hidden, grid, rng)
            self.fc2 = init_kan_linear(hidden, n_in, grid, rng)
        else:
            self.fc1 = Linear(n_in, hidden, rng)
            self.fc2 = Linear(hidden, n_in, rng)
        self.drop = Dropout(dropout_rate, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        if not self.use_kan:
            h = T.gelu(h)
        return self.fc2(self.drop(h))


class MixerBlock(Module):
    """Token mixing followed by channel mixing, each with a residual.

    Layer normalization is applied over channels before the transposition.
    """

    def __init__(self, config: MixerConfig, kind: ModelKind,
                 rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(config.dim)
        self.token_mixer = FeedForward(config.num_tokens, config.token_width,
                                       kind, config.grid, config.dropout_rate, rng)
        self.norm2 = LayerNorm(config.dim)
        self.channel_mixer = FeedForward(config.dim, config.channel_width, kind,
                                         config.grid, config.dropout_rate, rng)

    def forward(self, x: Tensor) -> Tensor:
        mixed = self.token_mixer(T.transpose_tokens(self.norm1(x)))
        u = x + T.transpose_tokens(mixed)
        return u + self.channel_mixer(self.norm2(u))

    def zero_output_layers(self) -> None:
        """Zeroes both second layers, turning the block into the identity."""
        for mixer in (self.token_mixer, self.channel_mixer):
            mixer.fc2.zero_()


class Classifier(Module):
    kind: ModelKind

    def forward(self, *args: Any) -> Tensor:
        raise NotImplementedError


class MixerModel(Classifier):
    """patchify -> embedding -> mixer blocks -> mean pool -> head."""

    def __init__(self, config: MixerConfig, kind: ModelKind,
                 rng: np.random.Generator):
        super().__init__()
        if kind not in (ModelKind.KAN_MIXERS, ModelKind.MLP_MIXER):
            raise ValueError(f'{kind} is not a mixer architecture')
        self.kind = kind
        self.config = config
        use_kan = kind is ModelKind.KAN_MIXERS
        self.embedding: Union[KanLinear, Linear]
        self.head: Union[KanLinear, Linear]
        if use_kan and config.embedding == 'kan':
            self.embedding = init_kan_linear(config.patch_dim, config.dim,
                                             config.grid, rng)
        else:
            self.embedding = Linear(config.patch_dim, config.dim, rng)
        self.blocks = ModuleList([MixerBlock(config, kind, rng)
                                  for _ in range(config.depth)])
        if use_kan:
            self.head = init_kan_linear(config.dim, config.num_classes,
                                        config.grid, rng)
        else:
            self.head = Linear(config.dim, config.num_classes, rng)

    def embed(self, images: ImageBatch) -> Tensor:
        return self.embedding(patchify(images, self.config.patch_size))

    def forward(self, *args: Any) -> Tensor:
        (images,) = args
        data = images.data if isinstance(images, Tensor) else images
        c = self.config
        if data.ndim != 4 or data.shape[1:] != (c.in_channels, c.image_size,
                                                c.image_size):
            raise DimensionError(
                f'{self.kind} expects batches of shape [b, {c.in_channels}, '
                f'{c.image_size}, {c.image_size}], got {data.shape}')
        x = self.embed(images)
        for block in self.blocks:
            x = block(x)
        return self.head(T.global_mean_pool(x))


class FlatClassifier(Classifier):
    """Flattened-pixel baseline: dense layers (ReLU between) or KAN layers."""

    def __init__(self, kind: ModelKind, input_dims: Sequence[int],
                 num_classes: int, rng: np.random.Generator,
                 grid: Optional[SplineGrid] = None):
        super().__init__()
        if kind not in (ModelKind.MLP, ModelKind.KAN):
            raise ValueError(f'{kind} is not a flat baseline')
        self.kind = kind
        self.input_dims = tuple(input_dims)
        n_in = int(np.prod(self.input_dims))
        hidden = MLP_HIDDEN if kind is ModelKind.MLP else KAN_HIDDEN
        widths = (n_in, *hidden, num_classes)
        grid = grid or SplineGrid()
        self.layers = ModuleList([
            Linear(a, b, rng) if kind is ModelKind.MLP
            else init_kan_linear(a, b, grid, rng)
            for a, b in zip(widths, widths[1:])])

    def forward(self, *args: Any) -> Tensor:
        (images,) = args
        x = images if isinstance(images, Tensor) else Tensor(images)
        if tuple(x.shape[1:]) != self.input_dims:
            raise DimensionError(f'{self.kind} expects inputs of shape '
                                 f'[b, {", ".join(map(str, self.input_dims))}]'
                                 f', got {x.shape}')
        x = T.reshape(x, (x.shape[0], -1))
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.kind is ModelKind.MLP and i < last:
                x = T.relu(x)
        return x


def build_baseline(kind: Union[ModelKind, str], input_dims: Sequence[int],
                   num_classes: int, rng: np.random.Generator,
                   config: Optional[MixerConfig] = None) -> Classifier:
    """Builds one of the four compared architectures.

    Args:
        kind: architecture name
        input_dims: (channels, height, width) of the images
        num_classes: number of output logits
        rng: source of initial weights and dropout masks
        config: mixer hyperparameters for the mixer kinds; defaults derived
            from `input_dims` when omitted

    Raises:
        ValueError for unknown kinds
    """
    try:
        kind = ModelKind(kind)
    except ValueError as e:
        raise ValueError(f"unknown model kind '{kind}', expected one of "
                         f"{[k.value for k in ModelKind]}") from e
    if kind in (ModelKind.MLP, ModelKind.KAN):
        return FlatClassifier(kind, input_dims, num_classes, rng,
                              config.grid if config else None)
    if config is None:
        c, h, _ = input_dims
        config = MixerConfig(in_channels=c, image_size=h, num_classes=num_classes)
    return MixerModel(config, kind, rng)


def build_model(kind: Union[ModelKind, str], config: MixerConfig,
                rng: np.random.Generator) -> Classifier:
    """Builds `kind` for images described by `config`."""
    dims = (config.in_channels, config.image_size, config.image_size)
    return build_baseline(kind, dims, config.num_classes, rng, config)


def count_params(model: Module) -> int:
    return sum(p.size for p in model.parameters())


class ParameterRecord(pydantic.BaseModel, extra='forbid'):
    name: str
    shape: list[int]
    offset: int
    nbytes: int


class CheckpointManifest(pydantic.BaseModel, extra='forbid'):
    """JSON side of a checkpoint; the values live in the companion blob."""
    kind: ModelKind
    config: MixerConfig
    input_dims: list[int]
    precision: str
    seed: int
    parameters: list[ParameterRecord]


def save_checkpoint(model: Classifier, stem: pathlib.Path, config: MixerConfig,
                    seed: int) -> tuple[pathlib.Path, pathlib.Path]:
    """Writes `<stem>.json` and a little-endian `<stem>.bin`.

    Returns:
        (manifest path, blob path)
    """
    dtype = np.dtype(T.get_dtype()).newbyteorder('<')
    records, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = p.data.astype(dtype).tobytes()
        records.append(ParameterRecord(name=name, shape=list(p.shape),
                                       offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    manifest = CheckpointManifest(
        kind=model.kind, config=config,
        input_dims=[config.in_channels, config.image_size, config.image_size],
        precision=T.get_precision(), seed=seed, parameters=records)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest_path = stem.with_suffix('.json')
    blob_path = stem.with_suffix('.bin')
    manifest_path.write_text(manifest.model_dump_json(indent=2))
    blob_path.write_bytes(b''.join(chunks))
    logger.debug(f"Saved {len(records)} parameters ({offset} bytes) to "
                 f"'{blob_path}'")
    return manifest_path, blob_path


def load_checkpoint(stem: pathlib.Path) -> Classifier:
    """Rebuilds a model from `save_checkpoint` output, bit for bit.

    Raises:
        ValueError if the blob does not match the manifest
    """
    manifest = CheckpointManifest.model_validate_json(
        stem.with_suffix('.json').read_text())
    blob = stem.with_suffix('.bin').read_bytes()
    dtype = np.dtype(T.PRECISIONS[manifest.precision]).newbyteorder('<')
    with T.precision(manifest.precision):
        model = build_baseline(manifest.kind, manifest.input_dims,
                               manifest.config.num_classes,
                               np.random.default_rng(manifest.seed),
                               manifest.config)
        params = dict(model.named_parameters())
        if [r.name for r in manifest.parameters] != list(params):
            raise ValueError(f"checkpoint '{stem}' parameters do not match "
                             f"a {manifest.kind} model")
        for r in manifest.parameters:
            if r.offset + r.nbytes > len(blob):
                raise ValueError(f"checkpoint blob '{stem}.bin' is truncated "
                                 f"at parameter {r.name}")
            values = np.frombuffer(blob, dtype=dtype, count=r.nbytes // dtype.itemsize,
                                   offset=r.offset).reshape(r.shape)
            params[r.name].data = np.ascontiguousarray(values, dtype=T.get_dtype())
    return model
