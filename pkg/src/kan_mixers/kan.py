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
"""KAN linear layer in the batched ("efficient") formulation.

Each connection i -> j carries `w_b * silu(x_i) + sum_m c_m B_m(x_i)` where the
B_m are degree-k B-splines on a shared uniform grid. Evaluating all bases of a
batch at once turns the layer into two matrix products.
"""
import math
from typing import Optional

import numpy as np

from kan_mixers import tensor as T
from kan_mixers.config import SplineGrid
from kan_mixers.nn import Module, parameter
from kan_mixers.tensor import DimensionError, Tensor


def _cox_de_boor(x: np.ndarray, knots: np.ndarray,
                 order: int) -> tuple[np.ndarray, np.ndarray]:
    """Evaluates B-spline bases of degree `order` and `order - 1`.

    Args:
        x: points, any shape
        knots: strictly increasing knot vector
        order: spline degree k >= 1

    Returns:
        (bases of degree k, shape x.shape + (len(knots) - k - 1,),
         bases of degree k-1, shape x.shape + (len(knots) - k,))
    """
    t = knots.astype(x.dtype)
    xe = x[..., None]
    bases = ((xe >= t[:-1]) & (xe < t[1:])).astype(x.dtype)
    previous = bases
    for j in range(1, order + 1):
        previous = bases
        left = (xe - t[:-(j + 1)]) / (t[j:-1] - t[:-(j + 1)])
        right = (t[j + 1:] - xe) / (t[j + 1:] - t[1:-j])
        bases = left * bases[..., :-1] + right * bases[..., 1:]
    return bases, previous


def bspline_basis(x: Tensor, grid: SplineGrid) -> Tensor:
    """Degree-k B-spline basis values for every scalar of `x`.

    Inputs outside the grid range are evaluated against the extended knots;
    far enough out every basis vanishes. At most k+1 values per scalar are
    non-zero.

    Args:
        x: Tensor[..., n_in]
        grid: spline grid shared by all inputs

    Returns:
        Tensor[..., n_in, grid_size + order]
    """
    if grid.grid_size < 1 or grid.order < 1:
        raise ValueError(f'grid needs grid_size >= 1 and order >= 1, got '
                         f'{grid.grid_size} and {grid.order}')
    k = grid.order
    knots = grid.knots
    bases, lower = _cox_de_boor(x.data, knots, k)

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        t = knots.astype(x.data.dtype)
        # derivative of a degree-k basis in terms of two degree-(k-1) bases
        d = k * (lower[..., :-1] / (t[k:-1] - t[:-(k + 1)])
                 - lower[..., 1:] / (t[k + 1:] - t[1:-k]))
        return ((g * d).sum(axis=-1),)

    return T.record('bspline_basis', (x,), bases, backward)


def curve_to_coefficients(grid: SplineGrid, x: np.ndarray,
                          y: np.ndarray) -> np.ndarray:
    """Least-squares spline coefficients reproducing samples `y` at `x`.

    Args:
        grid: spline grid
        x: sample points, shape (n,)
        y: sample values, shape (n, m) for m independent curves

    Returns:
        coefficients, shape (grid.num_basis, m)
    """
    a, _ = _cox_de_boor(np.asarray(x, dtype=np.float64), grid.knots, grid.order)
    solution, *_ = np.linalg.lstsq(a, np.asarray(y, dtype=np.float64), rcond=None)
    return solution


class KanLinear(Module):
    """Layer mapping `[..., n_in]` to `[..., n_out]`.

    Parameters: `base_weight[n_out, n_in]` and
    `spline_weight[n_out, n_in, grid_size + order]`; there is no bias.
    """

    def __init__(self, n_in: int, n_out: int, grid: SplineGrid,
                 base_weight: np.ndarray, spline_weight: np.ndarray):
        super().__init__()
        if base_weight.shape != (n_out, n_in) or \
                spline_weight.shape != (n_out, n_in, grid.num_basis):
            raise DimensionError(
                f'KanLinear({n_in}, {n_out}) got base weight '
                f'{base_weight.shape} and spline weight {spline_weight.shape}')
        self.n_in, self.n_out = n_in, n_out
        self.grid = grid
        self.base_weight = parameter(base_weight)
        self.spline_weight = parameter(spline_weight)

    @property
    def num_parameters(self) -> int:
        return self.n_out * self.n_in * (self.grid.num_basis + 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 1 or x.shape[-1] != self.n_in:
            raise DimensionError(f'KanLinear expects last extent {self.n_in}, '
                                 f'got input {x.shape}')
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.n_in))
        base = T.linear(T.silu(flat), self.base_weight)
        bases = T.reshape(bspline_basis(flat, self.grid),
                          (-1, self.n_in * self.grid.num_basis))
        coeffs = T.reshape(self.spline_weight,
                           (self.n_out, self.n_in * self.grid.num_basis))
        y = base + T.linear(bases, coeffs)
        return T.reshape(y, (*lead, self.n_out))

    def zero_(self) -> None:
        self.base_weight.data[...] = 0.0
        self.spline_weight.data[...] = 0.0


def init_kan_linear(n_in: int, n_out: int, grid: SplineGrid,
                    rng: np.random.Generator, noise_scale: float = 0.1,
                    base_scale: float = 1.0) -> KanLinear:
    """Builds a freshly initialized layer.

    The base weight is uniform in +-sqrt(6 / n_in) * base_scale. Spline
    coefficients are fitted to uniform noise of width `noise_scale / grid_size`
    sampled at the interior grid points, so every spline starts as a small
    random curve.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f'KanLinear extents must be positive, got {n_in}, {n_out}')
    bound = math.sqrt(6.0 / n_in) * base_scale
    base_weight = rng.uniform(-bound, bound, (n_out, n_in))

    points = grid.knots[grid.order:-grid.order]
    noise = (rng.random((grid.grid_size + 1, n_in * n_out)) - 0.5) \
        * noise_scale / grid.grid_size
    coeffs = curve_to_coefficients(grid, points, noise)
    spline_weight = coeffs.T.reshape(n_in, n_out, grid.num_basis).transpose(1, 0, 2)
    return KanLinear(n_in, n_out, grid, base_weight, np.ascontiguousarray(spline_weight))
