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
"""Paired significance testing and result tables / plots across models."""
import csv
import enum
import logging
import pathlib
from typing import TYPE_CHECKING, NamedTuple, Optional, Sequence

import numpy as np
import pydantic
from scipy import stats

from kan_mixers.config import ModelKind
from kan_mixers.train import read_fold_results, summarize_folds

if TYPE_CHECKING:
    from matplotlib.figure import Figure

logger = logging.getLogger(__name__)

MAX_EXACT_PAIRS = 20
_CHUNK = 1 << 16
VIOLIN_CSV_FIELDS = ['model', 'fold', 'epoch', 'val_accuracy']


class PairingError(ValueError):
    """Raised when model results were not produced on the same folds."""


class Verdict(enum.StrEnum):
    """ Outcome for a model compared against the reference model """
    EQUIVALENT = '='
    INFERIOR = '+'
    SUPERIOR = '-'


class WilcoxonResult(NamedTuple):
    statistic: float
    p_value: float
    n: int
    all_zero: bool = False


def wilcoxon_signed_rank(diffs: Sequence[float]) -> WilcoxonResult:
    """Exact two-sided Wilcoxon signed-rank test.

    Zero differences are dropped, absolute differences ranked with mid-ranks
    for ties, and W = min(W+, W-). The p-value is 2 * P(W+ <= W) under the
    null, counted over all 2^n sign assignments and capped at 1.

    Raises:
        ValueError for more than MAX_EXACT_PAIRS non-zero differences
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0.0]
    if d.size == 0:
        logger.warning('All paired differences are zero; reporting p = 1')
        return WilcoxonResult(statistic=0.0, p_value=1.0, n=0, all_zero=True)
    n = int(d.size)
    if n > MAX_EXACT_PAIRS:
        raise ValueError(f'exact enumeration supports at most '
                         f'{MAX_EXACT_PAIRS} pairs, got {n}')
    ranks = stats.rankdata(np.abs(d))
    w = float(min(ranks[d > 0].sum(), ranks[d < 0].sum()))

    total = 1 << n
    bits = np.arange(n)
    at_most = 0
    for start in range(0, total, _CHUNK):
        codes = np.arange(start, min(total, start + _CHUNK))
        positive = ((codes[:, None] >> bits) & 1).astype(np.float64)
        # mid-ranks are multiples of 1/2, so these sums are exact
        at_most += int(np.count_nonzero(positive @ ranks <= w))
    return WilcoxonResult(statistic=w, p_value=min(1.0, 2.0 * at_most / total),
                          n=n)


def significance_verdict(p: float, alpha: float, mean_model: float,
                         mean_reference: float) -> Verdict:
    """'=' when not significant at `alpha`, otherwise '+' if the model is
    worse than the reference and '-' if it is better."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f'alpha must be in (0, 1), got {alpha}')
    if p >= alpha:
        return Verdict.EQUIVALENT
    return Verdict.INFERIOR if mean_model < mean_reference else Verdict.SUPERIOR


def percent_difference(acc_reference: float, acc_model: float) -> float:
    """Relative accuracy gap of a model behind the reference, in percent."""
    if acc_reference <= 0:
        raise ValueError(f'reference accuracy must be positive, got '
                         f'{acc_reference}')
    return 100.0 * (acc_reference - acc_model) / acc_reference


class ModelRun(pydantic.BaseModel, extra='forbid'):
    """Cross-validation outcome of one model, as read back from disk."""
    name: str
    fold_accuracies: list[float]
    epoch_accuracies: list[list[float]] = []
    split_seed: int
    num_folds: int
    pool_size: int

    @property
    def fold_definition(self) -> tuple[int, int, int, int]:
        return (self.split_seed, self.num_folds, self.pool_size,
                len(self.fold_accuracies))


def load_model_run(directory: pathlib.Path) -> ModelRun:
    """Collects the fold result files in `directory` into a ModelRun.

    Raises:
        FileNotFoundError if the directory holds no fold results
    """
    results = read_fold_results(directory)
    if not results:
        raise FileNotFoundError(f"no fold results in '{directory}'")
    first = results[0]
    return ModelRun(
        name=directory.name,
        fold_accuracies=[r.accuracy for r in results],
        epoch_accuracies=[[e.val_accuracy for e in r.epochs
                           if e.val_accuracy is not None] for r in results],
        split_seed=first.split_seed, num_folds=first.num_folds,
        pool_size=first.pool_size)


class SignificanceRow(pydantic.BaseModel, extra='forbid'):
    model: str
    mean: float
    std: float
    verdicts: dict[str, Verdict] = {}
    p_value: Optional[float] = None
    statistic: Optional[float] = None
    difference_percent: Optional[float] = None


def _alpha_label(alpha: float) -> str:
    return f'{alpha:.2f}'


class SignificanceTable(pydantic.BaseModel, extra='forbid'):
    """Comparison rows sorted by ascending mean accuracy; the reference row,
    which carries mean and std only, comes last."""
    reference: str
    alphas: list[float]
    rows: list[SignificanceRow]

    @property
    def comparisons(self) -> list[SignificanceRow]:
        return [r for r in self.rows if r.model != self.reference]

    def to_text(self) -> str:
        headers = ['Model', 'Average accuracy', 'Standard deviation',
                   *[f'p = {_alpha_label(a)}' for a in self.alphas],
                   'Difference (%)']
        lines = [headers]
        for r in self.rows:
            lines.append([
                r.model, f'{r.mean:.4f}', f'{r.std:.4f}',
                *[str(r.verdicts.get(_alpha_label(a), '')) for a in self.alphas],
                '' if r.difference_percent is None
                else f'{r.difference_percent:.2f}%'])
        widths = [max(len(row[i]) for row in lines) for i in range(len(headers))]
        return '\n'.join('  '.join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                         for row in lines) + '\n'

    def write_csv(self, path: pathlib.Path) -> None:
        fields = ['model', 'mean', 'std',
                  *[f'p_{_alpha_label(a)}' for a in self.alphas],
                  'p_value', 'statistic', 'difference_percent']
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fields, dialect='excel')
            writer.writeheader()
            for r in self.rows:
                writer.writerow({
                    'model': r.model, 'mean': repr(r.mean), 'std': repr(r.std),
                    **{f'p_{_alpha_label(a)}': str(r.verdicts.get(_alpha_label(a), ''))
                       for a in self.alphas},
                    'p_value': '' if r.p_value is None else repr(r.p_value),
                    'statistic': '' if r.statistic is None else repr(r.statistic),
                    'difference_percent': '' if r.difference_percent is None
                    else repr(r.difference_percent)})


def tabulate_results(runs: Sequence[ModelRun],
                     reference: str = ModelKind.KAN_MIXERS,
                     alphas: Sequence[float] = (0.05, 0.10),
                     population_std: bool = True) -> SignificanceTable:
    """Compares every run with the reference run fold by fold.

    Raises:
        PairingError if runs differ in fold definition or the reference run
        is missing
    """
    by_name = {r.name: r for r in runs}
    if reference not in by_name:
        raise PairingError(f"no results for reference model '{reference}'")
    ref = by_name[reference]
    for r in runs:
        if r.fold_definition != ref.fold_definition:
            raise PairingError(
                f"'{r.name}' folds (seed, k, pool, folds) = {r.fold_definition} "
                f"do not match '{reference}' folds {ref.fold_definition}")

    ref_mean, ref_std = summarize_folds(ref.fold_accuracies, population_std)
    ref_acc = np.asarray(ref.fold_accuracies)
    rows = []
    for r in runs:
        if r.name == reference:
            continue
        mean, std = summarize_folds(r.fold_accuracies, population_std)
        test = wilcoxon_signed_rank(ref_acc - np.asarray(r.fold_accuracies))
        rows.append(SignificanceRow(
            model=r.name, mean=mean, std=std, p_value=test.p_value,
            statistic=test.statistic,
            verdicts={_alpha_label(a): significance_verdict(test.p_value, a, mean,
                                                            ref_mean)
                      for a in alphas},
            difference_percent=percent_difference(ref_mean, mean)))
    rows.sort(key=lambda row: row.mean)
    rows.append(SignificanceRow(model=reference, mean=ref_mean, std=ref_std))
    return SignificanceTable(reference=reference, alphas=list(alphas), rows=rows)


class ViolinRecord(NamedTuple):
    model: str
    fold: int
    epoch: int
    val_accuracy: float


def violin_records(runs: Sequence[ModelRun]) -> list[ViolinRecord]:
    return [ViolinRecord(run.name, fold, epoch + 1, acc)
            for run in runs
            for fold, accs in enumerate(run.epoch_accuracies)
            for epoch, acc in enumerate(accs)]


def _draw_violin(fig: 'Figure', groups: dict[str, np.ndarray],
                 medians: dict[str, float], title: str) -> None:
    ax = fig.add_subplot(1, 1, 1)
    jitter = np.random.default_rng(0)
    for pos, (model, values) in enumerate(groups.items()):
        try:
            if values.size < 2 or np.ptp(values) == 0:
                raise np.linalg.LinAlgError('degenerate sample')
            kde = stats.gaussian_kde(values, bw_method='silverman')
            ys = np.linspace(values.min(), values.max(), 128)
            density = kde(ys)
            half = 0.4 * density / density.max()
            ax.fill_betweenx(ys, pos - half, pos + half, alpha=0.4,
                             gid=f'violin-{model}')
        except np.linalg.LinAlgError:
            ax.vlines(pos, values.min(), values.max(), gid=f'violin-{model}')
        ax.scatter(pos + jitter.uniform(-0.08, 0.08, values.size), values, s=4,
                   color='black', gid=f'strip-{model}')
        m = medians[model]
        ax.hlines(m, pos - 0.25, pos + 0.25, color='white', linewidth=2,
                  gid=f'median-{model}')
        ax.text(pos, m, f'median {m:.4f}', ha='center', va='bottom', fontsize=7)
    ax.set_xticks(range(len(groups)), list(groups))
    ax.set_ylabel('validation accuracy')
    ax.set_title(title)


def emit_violin(records: Sequence[ViolinRecord], csv_path: pathlib.Path,
                svg_path: pathlib.Path, title: str = '') -> dict[str, float]:
    """Writes the per-epoch validation accuracies as CSV and renders one
    violin (Gaussian KDE, Silverman bandwidth) with strip points and a median
    line per model.

    Returns:
        median validation accuracy per model

    Raises:
        ValueError if `records` is empty
    """
    if not records:
        raise ValueError('no accuracy records to plot')
    # only the report command plots
    import matplotlib  # pylint: disable=import-outside-toplevel
    from matplotlib.figure import Figure  # pylint: disable=import-outside-toplevel,redefined-outer-name

    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, VIOLIN_CSV_FIELDS, dialect='excel')
        writer.writeheader()
        for r in records:
            writer.writerow({'model': r.model, 'fold': r.fold, 'epoch': r.epoch,
                             'val_accuracy': repr(r.val_accuracy)})

    groups: dict[str, list[float]] = {}
    for r in records:
        groups.setdefault(r.model, []).append(r.val_accuracy)
    arrays = {m: np.asarray(v, dtype=np.float64) for m, v in groups.items()}
    medians = {m: float(np.median(v)) for m, v in arrays.items()}

    with matplotlib.rc_context({'svg.fonttype': 'none',
                                'svg.hashsalt': 'kan_mixers'}):
        fig = Figure(figsize=(2 + 1.5 * len(arrays), 4))
        _draw_violin(fig, arrays, medians, title)
        fig.savefig(svg_path, format='svg', metadata={'Date': None})
    logger.info(f"Wrote {len(records)} records to '{csv_path}' and '{svg_path}'")
    return medians
