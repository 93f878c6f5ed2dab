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
"""Adam, the training loop, evaluation metrics and k-fold cross-validation."""
import concurrent.futures
import csv
import logging
import pathlib
import time
from typing import Callable, Optional, Sequence

import numpy as np
import pydantic

from kan_mixers import tensor as T
from kan_mixers.config import TrainConfig
from kan_mixers.data import ImageDataset, batch_iter, kfold_split
from kan_mixers.mixer import Classifier, build_model
from kan_mixers.tensor import Tensor

logger = logging.getLogger(__name__)

EPOCH_CSV_FIELDS = ['epoch', 'fold', 'train_loss', 'train_acc', 'val_acc']

# invoked once per trained fold with the model and its result
FoldCallback = Callable[[Classifier, 'FoldResult'], None]


class NonFiniteError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


class AdamState:
    """Per-parameter moment buffers, aligned with the order of `params`."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    A missing gradient counts as zero. Every gradient is checked before any
    parameter moves.

    Raises:
        NonFiniteError naming the first offending parameter
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient for parameter "
                                 f"{p.name or i} {p.shape}: {bad} bad values, "
                                 f"step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, **kwargs: float):
        self.params = list(params)
        self.state = AdamState(self.params, lr, **kwargs)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class EvaluationMetrics(pydantic.BaseModel, extra='forbid'):
    """Accuracy and macro-averaged precision / recall / F1; 0/0 counts as 0."""
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list[list[int]]


class EpochRecord(pydantic.BaseModel, extra='forbid'):
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: Optional[float] = None


class FoldResult(pydantic.BaseModel, extra='forbid'):
    fold: int
    split_seed: int
    num_folds: int
    pool_size: int
    epochs: list[EpochRecord] = []
    validation: EvaluationMetrics
    test: Optional[EvaluationMetrics] = None
    wall_time: float = 0.0

    @property
    def accuracy(self) -> float:
        return self.validation.accuracy


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def metrics_from_predictions(labels: np.ndarray, predictions: np.ndarray,
                             num_classes: int = 10) -> EvaluationMetrics:
    """Confusion matrix (rows: true class, columns: predicted) and the
    metrics derived from it."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise ValueError('cannot evaluate an empty set of samples')
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    tp = np.diag(confusion).astype(np.float64)
    precision = _safe_ratio(tp, confusion.sum(axis=0))
    recall = _safe_ratio(tp, confusion.sum(axis=1))
    f1 = _safe_ratio(2.0 * precision * recall, precision + recall)
    return EvaluationMetrics(accuracy=float(tp.sum() / confusion.sum()),
                             precision=float(precision.mean()),
                             recall=float(recall.mean()),
                             f1=float(f1.mean()),
                             confusion=confusion.tolist())


def predict(model: Classifier, images: np.ndarray) -> np.ndarray:
    """Argmax class per image; ties go to the lowest class index."""
    with T.no_grad():
        logits = model(Tensor(images))
    return np.argmax(logits.data, axis=1)


def evaluate(model: Classifier, dataset: ImageDataset, idx: np.ndarray,
             batch_size: int = 256, num_classes: int = 10) -> EvaluationMetrics:
    """Evaluates `model` on `dataset[idx]` in eval mode, without augmentation.

    Raises:
        ValueError if `idx` is empty
    """
    if len(idx) == 0:
        raise ValueError('cannot evaluate an empty index set')
    was_training = model.training
    model.eval()
    preds, labels = [], []
    for images, y in batch_iter(dataset, idx, batch_size, shuffle=False):
        preds.append(predict(model, images))
        labels.append(y)
    model.train(was_training)
    return metrics_from_predictions(np.concatenate(labels),
                                    np.concatenate(preds), num_classes)


def train_model(model: Classifier, dataset: ImageDataset, train_idx: np.ndarray,
                val_idx: np.ndarray, cfg: TrainConfig,
                rng: np.random.Generator, fold: int = 0,
                test_set: Optional[ImageDataset] = None) -> FoldResult:
    """Trains on `train_idx` for `cfg.epochs` epochs, then evaluates the final
    weights on `val_idx` (and on `test_set` when given).

    Raises:
        NonFiniteError with epoch / batch coordinates if the loss diverges
    """
    started = time.perf_counter()
    optimizer = Adam(model.parameters(), cfg.lr)
    augmentation = cfg.augmentation if cfg.augmentation.enabled else None
    history: list[EpochRecord] = []

    for epoch in range(cfg.epochs):
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        batches = batch_iter(dataset, train_idx, cfg.batch_size, shuffle=True,
                             rng=rng, augmentation=augmentation)
        for b, (images, labels) in enumerate(batches):
            logits = model(Tensor(images))
            loss = T.softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss.item()):
                T.current_tape().reset()
                raise NonFiniteError(f'fold {fold}: non-finite loss at epoch '
                                     f'{epoch + 1}, batch {b + 1}')
            T.backward(loss)
            try:
                optimizer.step()
            except NonFiniteError as e:
                raise NonFiniteError(f'fold {fold}, epoch {epoch + 1}, batch '
                                     f'{b + 1}: {e}') from e
            optimizer.zero_grad()

            total_loss += loss.item() * len(labels)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            seen += len(labels)
            if (b + 1) % 100 == 0:
                logger.debug(f'fold {fold} epoch {epoch + 1} batch {b + 1}: '
                             f'loss {total_loss / seen:.4f}')

        record = EpochRecord(epoch=epoch + 1, train_loss=total_loss / max(seen, 1),
                             train_accuracy=correct / max(seen, 1))
        if cfg.eval_every_epoch:
            record.val_accuracy = evaluate(model, dataset, val_idx,
                                           num_classes=cfg.mixer.num_classes).accuracy
        history.append(record)
        val = 'n/a' if record.val_accuracy is None else f'{record.val_accuracy:.4f}'
        logger.info(f'fold {fold} epoch {epoch + 1}/{cfg.epochs}: loss '
                    f'{record.train_loss:.4f}, train acc '
                    f'{record.train_accuracy:.4f}, val acc {val}')

    validation = evaluate(model, dataset, val_idx, num_classes=cfg.mixer.num_classes)
    test = None
    if test_set is not None:
        test = evaluate(model, test_set, np.arange(len(test_set)),
                        num_classes=cfg.mixer.num_classes)
    return FoldResult(fold=fold, split_seed=cfg.seed, num_folds=cfg.folds,
                      pool_size=len(dataset), epochs=history,
                      validation=validation, test=test,
                      wall_time=time.perf_counter() - started)


def fold_generators(seed: int, fold: int) -> tuple[np.random.Generator,
                                                    np.random.Generator]:
    """Independent (initialization, data order) streams for one fold."""
    init_seq, data_seq = np.random.SeedSequence([seed, fold]).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(data_seq)


def run_fold(cfg: TrainConfig, dataset: ImageDataset, fold: int,
             split: tuple[np.ndarray, np.ndarray],
             test_set: Optional[ImageDataset] = None) \
        -> tuple[Classifier, FoldResult]:
    init_rng, data_rng = fold_generators(cfg.seed, fold)
    model = build_model(cfg.model, cfg.mixer, init_rng)
    train_idx, val_idx = split
    logger.info(f'fold {fold}: training {cfg.model} on {len(train_idx)} '
                f'images, validating on {len(val_idx)}')
    return model, train_model(model, dataset, train_idx, val_idx, cfg, data_rng,
                              fold=fold, test_set=test_set)


def cross_validate(cfg: TrainConfig, dataset: ImageDataset, workers: int = 1,
                   test_set: Optional[ImageDataset] = None,
                   on_fold: Optional[FoldCallback] = None) -> list[FoldResult]:
    """Trains a fresh model per fold; each fold is seeded from (seed, fold)
    so results do not depend on execution order.

    Args:
        cfg: training configuration
        dataset: training pool to split into `cfg.folds` folds
        workers: folds trained concurrently
        test_set: optional held-out split evaluated after every fold
        on_fold: called from the calling thread as folds complete, in fold
            order

    Returns:
        FoldResults ordered by fold
    """
    splits = kfold_split(len(dataset), cfg.folds, cfg.seed)
    results: dict[int, FoldResult] = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(run_fold, cfg, dataset, i, s, test_set): i
                   for i, s in enumerate(splits)}
        outcomes = {futures[f]: f.result()
                    for f in concurrent.futures.as_completed(futures)}
    for i in sorted(outcomes):
        model, result = outcomes[i]
        results[i] = result
        if on_fold is not None:
            on_fold(model, result)
    ordered = [results[i] for i in sorted(results)]
    mean, std = summarize_folds([r.accuracy for r in ordered], cfg.population_std)
    logger.info(f'{cfg.model} on {cfg.dataset}: validation accuracy '
                f'{format_mean_std(mean, std)} over {len(ordered)} folds')
    return ordered


def summarize_folds(accuracies: Sequence[float],
                    population: bool = True) -> tuple[float, float]:
    """Mean and standard deviation (population by default) over folds."""
    values = np.asarray(accuracies, dtype=np.float64)
    if values.size == 0:
        raise ValueError('no fold accuracies to summarize')
    ddof = 0 if population or values.size == 1 else 1
    return float(values.mean()), float(values.std(ddof=ddof))


def format_mean_std(mean: float, std: float) -> str:
    return f'{mean:.4f} ± {std:.4f}'


def write_fold_results(directory: pathlib.Path,
                       results: Sequence[FoldResult]) -> None:
    """Writes `fold_<i>.json` per fold and `epochs.csv`. Wall time is left out
    so deterministic runs produce identical files."""
    directory.mkdir(parents=True, exist_ok=True)
    for r in results:
        (directory / f'fold_{r.fold}.json').write_text(
            r.model_dump_json(indent=2, exclude={'wall_time'}))
    with open(directory / 'epochs.csv', 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, EPOCH_CSV_FIELDS, dialect='excel')
        writer.writeheader()
        for r in results:
            for e in r.epochs:
                writer.writerow({
                    'epoch': e.epoch, 'fold': r.fold,
                    'train_loss': repr(e.train_loss),
                    'train_acc': repr(e.train_accuracy),
                    'val_acc': '' if e.val_accuracy is None else repr(e.val_accuracy)})


def read_fold_results(directory: pathlib.Path) -> list[FoldResult]:
    paths = sorted(directory.glob('fold_*.json'),
                   key=lambda p: int(p.stem.split('_')[1]))
    return [FoldResult.model_validate_json(p.read_text()) for p in paths]
