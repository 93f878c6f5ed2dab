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
from typing import Annotated, Any, Optional

import pydantic


def coerce_split_commas_rtn_floats(s: Any) -> Any:
    """Splits a string on commas, strips whitespace off split strings and
    returns them as a list of floats. Non-string input is returned unchanged so
    that lists coming from JSON pass straight through.

    Args:
        s: string such as '0.05, 0.10'

    Returns:
        list of floats, or the unchanged input
    """
    if isinstance(s, str):
        return [float(e.strip()) for e in s.split(',') if e.strip()]
    return s


def coerce_patch_size(v: Any) -> Any:
    """Accepts a patch size as `4`, `'4'`, `'(4,4)'`, `'4x4'` or `[4, 4]` and
    returns the side length. Only square patches are supported.

    Raises:
        ValueError if the two sides differ
    """
    if isinstance(v, str):
        parts = [p for p in v.strip('()[] ').replace('x', ',').split(',') if p.strip()]
        v = [int(p) for p in parts]
    if isinstance(v, (list, tuple)):
        if len(v) == 1:
            return v[0]
        if len(v) != 2 or v[0] != v[1]:
            raise ValueError(f'patch size must be square, got {v}')
        return v[0]
    return v


def validate_probability(p: float) -> float:
    """Validates a probability in the closed unit interval."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f'probability must be in [0, 1], got {p}')
    return p


def validate_dropout_rate(p: float) -> float:
    """Dropout keeps at least one survivor in expectation: rate in [0, 1)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f'dropout rate must be in [0, 1), got {p}')
    return p


def validate_alpha(a: float) -> float:
    if not 0.0 < a < 1.0:
        raise ValueError(f'significance level must be in (0, 1), got {a}')
    return a


def coerce_empty_str_to_none(s: Any) -> Optional[Any]:
    """Takes a value and returns None if it is an empty string, otherwise
    returns the value unchanged"""
    if s == '':
        return None
    return s


Probability = Annotated[float, pydantic.AfterValidator(validate_probability)]

DropoutRate = Annotated[float, pydantic.AfterValidator(validate_dropout_rate)]

Alpha = Annotated[float, pydantic.AfterValidator(validate_alpha)]

# list of significance levels; accepts '0.05,0.10' from the command line
AlphaList = Annotated[
    list[Alpha],
    pydantic.BeforeValidator(coerce_split_commas_rtn_floats),
    pydantic.Field(min_length=1)]

PatchSize = Annotated[
    pydantic.PositiveInt, pydantic.BeforeValidator(coerce_patch_size)]

OptionalPositiveInt = Annotated[
    Optional[pydantic.PositiveInt],
    pydantic.BeforeValidator(coerce_empty_str_to_none)]
