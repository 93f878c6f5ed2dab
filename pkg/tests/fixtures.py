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
"""Synthetic dataset files and result trees shared by the test modules."""
import gzip
import os
import pathlib
import struct
from typing import Sequence

import numpy as np

SLOW = os.environ.get('KANMIX_SLOW_TESTS') == '1'
REAL_DATA_DIR = pathlib.Path(os.environ.get('KANMIX_DATA_DIR', 'data'))


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    header = struct.pack('>I', magic) + struct.pack(f'>{array.ndim}I', *array.shape)
    return header + array.astype(np.uint8).tobytes()


def write_idx_pair(directory: pathlib.Path, prefix: str, images: np.ndarray,
                   labels: np.ndarray, gz: bool = False) -> tuple[pathlib.Path,
                                                                  pathlib.Path]:
    directory.mkdir(parents=True, exist_ok=True)
    suffix = '.gz' if gz else ''
    paths = (directory / f'{prefix}-images-idx3-ubyte{suffix}',
             directory / f'{prefix}-labels-idx1-ubyte{suffix}')
    for path, raw in zip(paths, (idx_bytes(images, 0x803), idx_bytes(labels, 0x801))):
        path.write_bytes(gzip.compress(raw, mtime=0) if gz else raw)
    return paths


def class_images(labels: np.ndarray, shape: Sequence[int],
                 rng: np.random.Generator) -> np.ndarray:
    """uint8 images whose mean brightness encodes the label, plus noise."""
    base = (labels.astype(np.float64) * 25.0).reshape(-1, *([1] * len(shape)))
    noise = rng.integers(0, 20, (len(labels), *shape))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def make_fashion_dir(root: pathlib.Path, n_train: int = 40, n_test: int = 20,
                     seed: int = 0) -> pathlib.Path:
    """Writes train / t10k IDX files under `root/fashion-mnist`."""
    rng = np.random.default_rng(seed)
    directory = root / 'fashion-mnist'
    for prefix, n in (('train', n_train), ('t10k', n_test)):
        labels = np.arange(n) % 10
        write_idx_pair(directory, prefix, class_images(labels, (28, 28), rng),
                       labels.astype(np.uint8))
    return root


def cifar_bytes(images: np.ndarray, labels: np.ndarray) -> bytes:
    records = np.concatenate([labels.astype(np.uint8)[:, None],
                              images.reshape(len(labels), -1).astype(np.uint8)],
                             axis=1)
    return records.tobytes()


def make_cifar_dir(root: pathlib.Path, per_batch: int = 10,
                   n_test: int = 10, seed: int = 0) -> pathlib.Path:
    """Writes the five training batches and the test batch."""
    rng = np.random.default_rng(seed)
    directory = root / 'cifar-10-batches-bin'
    directory.mkdir(parents=True, exist_ok=True)
    names = [f'data_batch_{i}.bin' for i in range(1, 6)] + ['test_batch.bin']
    for name in names:
        n = n_test if name == 'test_batch.bin' else per_batch
        labels = np.arange(n) % 10
        (directory / name).write_bytes(
            cifar_bytes(class_images(labels, (3, 32, 32), rng), labels))
    return root


def write_run(directory: pathlib.Path, accuracies: Sequence[float],
              epoch_accuracies: Sequence[Sequence[float]] = (),
              split_seed: int = 0, pool_size: int = 100) -> pathlib.Path:
    """Writes fold result files for a run with the given fold accuracies."""
    from kan_mixers.train import (  # pylint: disable=import-outside-toplevel
        EpochRecord, EvaluationMetrics, FoldResult, write_fold_results)
    results = []
    for fold, acc in enumerate(accuracies):
        per_epoch = epoch_accuracies[fold] if epoch_accuracies else [acc]
        results.append(FoldResult(
            fold=fold, split_seed=split_seed, num_folds=len(accuracies),
            pool_size=pool_size,
            epochs=[EpochRecord(epoch=e + 1, train_loss=1.0, train_accuracy=a,
                                val_accuracy=a) for e, a in enumerate(per_epoch)],
            validation=EvaluationMetrics(accuracy=acc, precision=acc, recall=acc,
                                         f1=acc, confusion=[[1]])))
    write_fold_results(directory, results)
    return directory
