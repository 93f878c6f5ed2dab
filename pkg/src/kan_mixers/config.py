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
"""Configuration schemas. Defaults reproduce the published training setup:
Table-2 architecture, 50 epochs, batch 64, 5 folds."""
import datetime
import enum
from typing import Any, Literal, Optional, Self

import numpy as np
import pydantic

from kan_mixers.helpers import (DropoutRate, OptionalPositiveInt, PatchSize,
                                Probability)

# best learning rate found by the random search
KAN_MIXERS_LR = 0.00012820100418916918
DEFAULT_LR = 0.001


class ModelKind(enum.StrEnum):
    """ Architectures that can be trained and compared """
    KAN_MIXERS = 'kan-mixers'
    MLP_MIXER = 'mlp-mixer'
    MLP = 'mlp'
    KAN = 'kan'


class DatasetName(enum.StrEnum):
    FASHION_MNIST = 'fashion-mnist'
    CIFAR10 = 'cifar10'

    @property
    def channels(self) -> int:
        return 1 if self is DatasetName.FASHION_MNIST else 3


class SplineGrid(pydantic.BaseModel, extra='forbid', frozen=True):
    """Uniform knot grid over [x_min, x_max] with `grid_size` intervals,
    extended by `order` knots beyond each end."""
    x_min: float = -1.0
    x_max: float = 1.0
    grid_size: pydantic.PositiveInt = 5
    order: pydantic.PositiveInt = 3

    @pydantic.model_validator(mode='after')
    def check_range(self) -> Self:
        if self.x_max <= self.x_min:
            raise ValueError(f'grid range [{self.x_min}, {self.x_max}] is empty')
        return self

    @property
    def spacing(self) -> float:
        return (self.x_max - self.x_min) / self.grid_size

    @property
    def num_basis(self) -> int:
        return self.grid_size + self.order

    @property
    def knots(self) -> np.ndarray:
        """Extended knot vector of length grid_size + 2 * order + 1."""
        steps = np.arange(-self.order, self.grid_size + self.order + 1)
        return steps * self.spacing + self.x_min


class MixerConfig(pydantic.BaseModel, extra='forbid'):
    """Architecture hyperparameters shared by KAN-Mixers and MLP-Mixer.

    `token_hidden` defaults to the number of tokens and `channel_hidden` to
    twice `dim` when left unset.
    """
    image_size: pydantic.PositiveInt = 32
    in_channels: Literal[1, 3] = 3
    patch_size: PatchSize = 4
    dim: pydantic.PositiveInt = 256
    depth: pydantic.PositiveInt = 8
    token_hidden: OptionalPositiveInt = None
    channel_hidden: OptionalPositiveInt = None
    dropout_rate: DropoutRate = 0.1
    num_classes: pydantic.PositiveInt = 10
    embedding: Literal['kan', 'linear'] = 'kan'
    grid: SplineGrid = SplineGrid()

    @pydantic.model_validator(mode='after')
    def check_patches(self) -> Self:
        if self.image_size % self.patch_size:
            raise ValueError(f'image size {self.image_size} is not divisible '
                             f'by patch size {self.patch_size}')
        return self

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def token_width(self) -> int:
        return self.token_hidden or self.num_tokens

    @property
    def channel_width(self) -> int:
        return self.channel_hidden or 2 * self.dim


class AugmentationConfig(pydantic.BaseModel, extra='forbid'):
    enabled: bool = True
    hflip_prob: Probability = 0.5
    rotation_degrees: pydantic.NonNegativeFloat = 10.0


class TrainConfig(pydantic.BaseModel, extra='forbid'):
    """Everything needed to reproduce one cross-validated training run.

    When `lr` is omitted it is filled with the per-architecture default, so a
    dumped config always carries the learning rate it ran with.
    """
    dataset: DatasetName = DatasetName.CIFAR10
    model: ModelKind = ModelKind.KAN_MIXERS
    mixer: MixerConfig = MixerConfig()
    epochs: pydantic.PositiveInt = 50
    batch_size: pydantic.PositiveInt = 64
    lr: pydantic.PositiveFloat
    folds: int = pydantic.Field(default=5, ge=2)
    seed: int = 0
    subset: OptionalPositiveInt = None
    augmentation: AugmentationConfig = AugmentationConfig()
    eval_every_epoch: bool = True
    population_std: bool = True

    @pydantic.model_validator(mode='before')
    @classmethod
    def default_lr(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get('lr') is None:
            kind = ModelKind(data.get('model', ModelKind.KAN_MIXERS))
            data = {**data,
                    'lr': KAN_MIXERS_LR if kind is ModelKind.KAN_MIXERS
                    else DEFAULT_LR}
        return data

    @pydantic.model_validator(mode='after')
    def check_channels(self) -> Self:
        if self.mixer.in_channels != self.dataset.channels:
            raise ValueError(f'{self.dataset} images have '
                             f'{self.dataset.channels} channel(s), mixer '
                             f'config expects {self.mixer.in_channels}')
        return self


class SearchSpace(pydantic.BaseModel, extra='forbid'):
    """Random-search value sets; lr is drawn from [lr_min, lr_max]."""
    patch_sizes: list[PatchSize] = pydantic.Field(default=[4, 8, 16], min_length=1)
    dims: list[pydantic.PositiveInt] = pydantic.Field(default=[64, 128, 256],
                                                      min_length=1)
    layers: list[pydantic.PositiveInt] = pydantic.Field(default=[6, 8, 10],
                                                        min_length=1)
    lr_min: pydantic.PositiveFloat = 0.0001
    lr_max: pydantic.PositiveFloat = 0.001
    lr_scale: Literal['linear', 'log'] = 'linear'

    @pydantic.model_validator(mode='after')
    def check_lr_interval(self) -> Self:
        if self.lr_max < self.lr_min:
            raise ValueError(f'empty learning rate interval '
                             f'[{self.lr_min}, {self.lr_max}]')
        return self


class SearchBudget(pydantic.BaseModel, extra='forbid'):
    """Per-trial reductions; unset fields keep the full protocol."""
    epochs: OptionalPositiveInt = None
    subset: OptionalPositiveInt = None


class RunManifest(pydantic.BaseModel, extra='forbid'):
    """Written once per CLI run next to its outputs."""
    command: str
    config: dict[str, Any]
    seed: Optional[int] = None
    precision: str
    git_describe: str
    started_at: datetime.datetime
    finished_at: Optional[datetime.datetime] = None
    out_dir: str
    fold_wall_times: list[float] = []
