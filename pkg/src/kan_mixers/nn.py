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
import math
from typing import Any, Iterator, Sequence

import numpy as np

from kan_mixers import tensor as T
from kan_mixers.tensor import Tensor


class Module:
    """Base for layers and models.

    Parameters and submodules are registered in assignment order, which fixes
    the enumeration order used by checkpoints and optimizer state.
    """
    training: bool

    def __init__(self) -> None:
        object.__setattr__(self, '_parameters', {})
        object.__setattr__(self, '_modules', {})
        object.__setattr__(self, 'training', True)

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
            value.name = name
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args: Any) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args: Any) -> Tensor:
        return self.forward(*args)

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Tensor]]:
        for name, p in self._parameters.items():
            yield f'{prefix}{name}', p
        for name, m in self._modules.items():
            yield from m.named_parameters(f'{prefix}{name}.')

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> 'Module':
        object.__setattr__(self, 'training', mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """Affine layer `y = x W^T + b`, initialized uniformly in +-1/sqrt(n_in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        bound = 1.0 / math.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, (n_out, n_in)))
        self.bias = parameter(rng.uniform(-bound, bound, (n_out,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.linear(x, self.weight)
        return y if self.bias is None else y + self.bias

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f'dropout rate must be in [0, 1), got {rate}')
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, self.training, self.rng)
