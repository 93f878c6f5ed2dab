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
"""Fashion-MNIST / CIFAR-10 decoding, resizing, augmentation and batching.

Pixels are served in [-1, 1] (x / 127.5 - 1), the range of the default
spline grid.
"""
import dataclasses
import gzip
import logging
import pathlib
import struct
from typing import Iterator, Literal, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from kan_mixers.config import AugmentationConfig, DatasetName

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b'\x1f\x8b'
CIFAR_RECORD = 1 + 3 * 32 * 32
BACKGROUND = -1.0

PathLike = Union[str, pathlib.Path]
Split = Literal['train', 'test']


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not follow its binary format."""


@dataclasses.dataclass(frozen=True)
class ImageDataset:
    """Decoded labeled images.

    Attributes:
        images: float32 [N, c, H, W] in [-1, 1]
        labels: int64 [N] in [0, 10)
        name: dataset id
        split: 'train' or 'test'
    """
    images: np.ndarray
    labels: np.ndarray
    name: str
    split: Split

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c, h, w = self.images.shape[1:]
        return int(c), int(h), int(w)


def _read_maybe_gzip(path: PathLike) -> bytes:
    raw = pathlib.Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        return gzip.decompress(raw)
    return raw


def _scale(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def _parse_idx(raw: bytes, path: PathLike, magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise DatasetFormatError(f"'{path}' is too short for an IDX header")
    (found,) = struct.unpack('>I', raw[:4])
    if found != magic:
        raise DatasetFormatError(f"'{path}': bad IDX magic 0x{found:08x}, "
                                 f"expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"'{path}' is truncated inside the IDX header")
    dims = struct.unpack(f'>{ndim}I', raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise DatasetFormatError(
            f"'{path}' is truncated: expected {expected} bytes of data after "
            f"offset {header}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected,
                         offset=header).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike,
             name: str = DatasetName.FASHION_MNIST,
             split: Split = 'train') -> ImageDataset:
    """Decodes an IDX image file and its label file (plain or gzip).

    Raises:
        DatasetFormatError on a bad magic number, truncated data or a count
        mismatch between the two files
    """
    images = _parse_idx(_read_maybe_gzip(images_path), images_path,
                        IDX_IMAGES_MAGIC)
    labels = _parse_idx(_read_maybe_gzip(labels_path), labels_path,
                        IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"'{images_path}' holds {images.shape[0]} images but "
            f"'{labels_path}' holds {labels.shape[0]} labels")
    if labels.size and labels.max() >= 10:
        raise DatasetFormatError(f"'{labels_path}': label {labels.max()} is "
                                 f"out of range [0, 10)")
    logger.debug(f"Decoded {images.shape[0]} images of "
                 f"{images.shape[1]}x{images.shape[2]} from '{images_path}'")
    return ImageDataset(images=_scale(images)[:, None, :, :],
                        labels=labels.astype(np.int64), name=str(name),
                        split=split)


def load_cifar10(batch_paths: Sequence[PathLike],
                 split: Split = 'train') -> ImageDataset:
    """Decodes and concatenates CIFAR-10 binary batches.

    Each record is one label byte followed by 1024 red, 1024 green and 1024
    blue bytes, each plane row-major.

    Raises:
        DatasetFormatError if a file does not hold whole records
    """
    images, labels = [], []
    for path in batch_paths:
        raw = _read_maybe_gzip(path)
        if len(raw) % CIFAR_RECORD:
            offset = len(raw) - len(raw) % CIFAR_RECORD
            raise DatasetFormatError(
                f"'{path}': truncated record at byte offset {offset} (file "
                f"length {len(raw)} is not a multiple of {CIFAR_RECORD})")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records.size and records[:, 0].max() >= 10:
            raise DatasetFormatError(f"'{path}': label {records[:, 0].max()} "
                                     f"is out of range [0, 10)")
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    return ImageDataset(images=_scale(np.concatenate(images)),
                        labels=np.concatenate(labels),
                        name=str(DatasetName.CIFAR10), split=split)


def _first_existing(directory: pathlib.Path, name: str) -> pathlib.Path:
    for candidate in (directory / name, directory / f'{name}.gz'):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing dataset file '{directory / name}'")


def load_dataset(name: Union[DatasetName, str], data_dir: PathLike,
                 split: Split = 'train') -> ImageDataset:
    """Loads a dataset from its canonical file names under `data_dir`.

    Fashion-MNIST files may sit in `data_dir` or `data_dir/fashion-mnist`;
    CIFAR-10 batches in `data_dir/cifar-10-batches-bin`.

    Raises:
        FileNotFoundError naming the first missing file
    """
    name = DatasetName(name)
    root = pathlib.Path(data_dir)
    if name is DatasetName.FASHION_MNIST:
        prefix = 'train' if split == 'train' else 't10k'
        directory = root / 'fashion-mnist' if (root / 'fashion-mnist').is_dir() else root
        return load_idx(_first_existing(directory, f'{prefix}-images-idx3-ubyte'),
                        _first_existing(directory, f'{prefix}-labels-idx1-ubyte'),
                        name=name, split=split)
    directory = root / 'cifar-10-batches-bin'
    names = [f'data_batch_{i}.bin' for i in range(1, 6)] if split == 'train' \
        else ['test_batch.bin']
    return load_cifar10([_first_existing(directory, n) for n in names], split)


def subset(dataset: ImageDataset, n: Optional[int]) -> ImageDataset:
    """First `n` images; the dataset itself when `n` is None or too large."""
    if n is None or n >= len(dataset):
        return dataset
    return dataclasses.replace(dataset, images=dataset.images[:n],
                               labels=dataset.labels[:n])


def resize_to(dataset: ImageDataset, size: int = 32) -> ImageDataset:
    """Bilinear resampling of every image to size x size."""
    _, h, w = dataset.image_shape
    if (h, w) == (size, size):
        return dataset
    zoom = (1.0, 1.0, size / h, size / w)
    images = ndimage.zoom(dataset.images, zoom, order=1, mode='nearest',
                          grid_mode=False)
    np.clip(images, -1.0, 1.0, out=images)
    logger.debug(f'Resized {len(dataset)} images from {h}x{w} to {size}x{size}')
    return dataclasses.replace(dataset, images=images.astype(np.float32))


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotates a [c, H, W] image about its center with bilinear sampling;
    uncovered pixels are filled with black (-1)."""
    if degrees == 0.0:
        return image
    return ndimage.rotate(image, degrees, axes=(2, 1), reshape=False, order=1,
                          mode='constant', cval=BACKGROUND)


def augment(image: np.ndarray, cfg: AugmentationConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip followed by a random rotation in
    [-rotation_degrees, rotation_degrees]. Both draws are always consumed so
    the random stream does not depend on the outcomes."""
    flip = rng.random() < cfg.hflip_prob
    theta = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
    if flip:
        image = hflip(image)
    return rotate(image, float(theta))


def kfold_split(n: int, k: int,
                seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Partitions a seeded permutation of range(n) into k folds.

    Fold sizes differ by at most one, larger folds first. Entry i holds
    (training indices, validation indices) with fold i as validation.
    """
    if k < 2:
        raise ValueError(f'k-fold needs k >= 2, got {k}')
    if k > n:
        raise ValueError(f'cannot split {n} samples into {k} folds')
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    return [(np.concatenate([f for j, f in enumerate(folds) if j != i]), folds[i])
            for i in range(k)]


def batch_iter(dataset: ImageDataset, indices: np.ndarray, batch_size: int,
               shuffle: bool, rng: Optional[np.random.Generator] = None,
               augmentation: Optional[AugmentationConfig] = None) \
        -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yields (images, labels) batches over `indices`; the last batch may be
    short. Without shuffling, indices are served in ascending order.

    Args:
        dataset: source images
        indices: dataset positions to serve
        batch_size: maximum batch length
        shuffle: permute indices with `rng` before batching
        rng: randomness for shuffling and augmentation
        augmentation: applied per image when given and enabled
    """
    if batch_size < 1:
        raise ValueError(f'batch size must be positive, got {batch_size}')
    if (shuffle or augmentation) and rng is None:
        raise ValueError('shuffling and augmentation need a random generator')
    order = rng.permutation(indices) if shuffle and rng is not None \
        else np.sort(indices)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images = dataset.images[idx]
        if augmentation is not None and augmentation.enabled and rng is not None:
            images = np.stack([augment(img, augmentation, rng) for img in images])
        yield images, dataset.labels[idx]
