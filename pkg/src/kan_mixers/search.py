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
"""Random hyperparameter search over patch size, width, depth and lr."""
import logging
import math
import pathlib
from typing import Any, Literal, Optional

import numpy as np
import pydantic

from kan_mixers.config import SearchBudget, SearchSpace, TrainConfig
from kan_mixers.data import ImageDataset, subset
from kan_mixers.train import cross_validate

logger = logging.getLogger(__name__)


class SampledConfig(pydantic.BaseModel, extra='forbid'):
    patch_size: int
    dim: int
    layers: int
    lr: float
    lr_scale: Literal['linear', 'log']


class TrialResult(pydantic.BaseModel, extra='forbid'):
    trial: int
    config: SampledConfig
    fold_accuracies: list[float] = []
    mean_accuracy: Optional[float] = None
    rank: Optional[int] = None
    failed: bool = False
    error: Optional[str] = None


class SearchResult(pydantic.BaseModel, extra='forbid'):
    seed: int
    budget: SearchBudget
    trials: list[TrialResult]
    best: Optional[TrialResult] = None

    def best_config(self, base_cfg: TrainConfig) -> TrainConfig:
        if self.best is None:
            raise RuntimeError('every search trial failed')
        return apply_sample(base_cfg, self.best.config)

    def write(self, directory: pathlib.Path, base_cfg: TrainConfig) -> None:
        """Writes `search_trials.json` and, when a trial succeeded,
        `best_config.json`."""
        directory.mkdir(parents=True, exist_ok=True)
        (directory / 'search_trials.json').write_text(self.model_dump_json(indent=2))
        if self.best is not None:
            (directory / 'best_config.json').write_text(
                self.best_config(base_cfg).model_dump_json(indent=2))


def sample_config(space: SearchSpace, rng: np.random.Generator) -> SampledConfig:
    """Discrete fields uniform over their sets, lr uniform on the linear or
    log scale of [lr_min, lr_max]."""
    patch_size = int(space.patch_sizes[rng.integers(len(space.patch_sizes))])
    dim = int(space.dims[rng.integers(len(space.dims))])
    layers = int(space.layers[rng.integers(len(space.layers))])
    if space.lr_scale == 'log':
        lr = math.exp(rng.uniform(math.log(space.lr_min), math.log(space.lr_max)))
    else:
        lr = float(rng.uniform(space.lr_min, space.lr_max))
    lr = min(max(lr, space.lr_min), space.lr_max)
    return SampledConfig(patch_size=patch_size, dim=dim, layers=layers, lr=lr,
                         lr_scale=space.lr_scale)


def apply_sample(base_cfg: TrainConfig, sample: SampledConfig,
                 budget: Optional[SearchBudget] = None) -> TrainConfig:
    data: dict[str, Any] = base_cfg.model_dump()
    data['mixer'].update(patch_size=sample.patch_size, dim=sample.dim,
                         depth=sample.layers)
    data['lr'] = sample.lr
    if budget is not None:
        if budget.epochs is not None:
            data['epochs'] = budget.epochs
        if budget.subset is not None:
            data['subset'] = budget.subset
    return TrainConfig.model_validate(data)


def _rank(trials: list[TrialResult]) -> Optional[TrialResult]:
    scored = [t for t in trials if not t.failed and t.mean_accuracy is not None]
    # stable sort keeps the earlier trial ahead on ties
    scored.sort(key=lambda t: -t.mean_accuracy)  # type: ignore[operator]
    for position, t in enumerate(scored, start=1):
        t.rank = position
    return scored[0] if scored else None


def random_search(space: SearchSpace, base_cfg: TrainConfig,
                  dataset: ImageDataset, trials: int = 10, seed: int = 0,
                  budget: Optional[SearchBudget] = None,
                  workers: int = 1) -> SearchResult:
    """Evaluates `trials` sampled configurations by k-fold mean validation
    accuracy.

    All configurations are drawn up front so the sampled set depends on the
    seed only. A trial whose training raises is recorded as failed and
    excluded from ranking.

    Raises:
        ValueError if trials < 1
    """
    if trials < 1:
        raise ValueError(f'random search needs at least one trial, got {trials}')
    budget = budget or SearchBudget()
    rng = np.random.default_rng(seed)
    samples = [sample_config(space, rng) for _ in range(trials)]
    pool = subset(dataset, budget.subset)

    results = []
    for i, sample in enumerate(samples):
        result = TrialResult(trial=i, config=sample)
        try:
            cfg = apply_sample(base_cfg, sample, budget)
            logger.info(f'trial {i + 1}/{trials}: patch {sample.patch_size}, '
                        f'dim {sample.dim}, layers {sample.layers}, '
                        f'lr {sample.lr:.6g}')
            folds = cross_validate(cfg, pool, workers=workers)
            result.fold_accuracies = [f.accuracy for f in folds]
            result.mean_accuracy = float(np.mean(result.fold_accuracies))
        except (ValueError, RuntimeError) as e:
            logger.warning(f'trial {i + 1}/{trials} failed: {e}')
            result.failed = True
            result.error = str(e)
        results.append(result)

    best = _rank(results)
    if best is None:
        logger.error('Every search trial failed')
    else:
        logger.info(f'best trial {best.trial + 1}: mean accuracy '
                    f'{best.mean_accuracy:.4f}')
    return SearchResult(seed=seed, budget=budget, trials=results, best=best)
