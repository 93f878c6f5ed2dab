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
import csv
import pathlib
import re
import tempfile
import xml.etree.ElementTree as ET
from unittest import TestCase

import numpy as np
from scipy import stats as scipy_stats

from kan_mixers.stats import (ModelRun, PairingError, Verdict, ViolinRecord,
                              emit_violin, load_model_run, percent_difference,
                              significance_verdict, tabulate_results,
                              violin_records, wilcoxon_signed_rank)
from tests import fixtures

# zero-sum per-fold offsets, so every model's fold mean is its table mean
OFFSETS = np.array([0.002, -0.001, 0.0, -0.002, 0.001])

FASHION_MEANS = {'mlp': 0.8873, 'kan': 0.8916, 'mlp-mixer': 0.8980,
                 'kan-mixers': 0.9030}
CIFAR_MEANS = {'mlp': 0.5055, 'kan': 0.5400, 'mlp-mixer': 0.6741,
               'kan-mixers': 0.6980}


def runs_from_means(means: dict[str, float], split_seed: int = 0) -> list[ModelRun]:
    return [ModelRun(name=name, fold_accuracies=list(mean + OFFSETS),
                     split_seed=split_seed, num_folds=5, pool_size=100)
            for name, mean in means.items()]


class TestWilcoxon(TestCase):
    def test_all_positive_five_pairs(self):
        result = wilcoxon_signed_rank([0.01, 0.02, 0.015, 0.03, 0.005])
        self.assertEqual(0.0, result.statistic)
        self.assertAlmostEqual(0.0625, result.p_value)
        self.assertEqual(5, result.n)
        self.assertFalse(result.all_zero)

    def test_symmetric(self):
        self.assertEqual(1.0, wilcoxon_signed_rank([0.02, -0.02]).p_value)

    def test_all_zero(self):
        with self.assertLogs('kan_mixers.stats', level='WARNING'):
            result = wilcoxon_signed_rank([0.0, 0.0, 0.0])
        self.assertTrue(result.all_zero)
        self.assertEqual(1.0, result.p_value)

    def test_zeros_dropped(self):
        with_zeros = wilcoxon_signed_rank([0.0, 0.01, 0.02, 0.0, 0.03])
        self.assertEqual(3, with_zeros.n)
        self.assertAlmostEqual(0.25, with_zeros.p_value)

    def test_matches_scipy_exact(self):
        rng = np.random.default_rng(2)
        for n in (5, 8, 12):
            d = rng.standard_normal(n) + 0.3
            ours = wilcoxon_signed_rank(d)
            ref = scipy_stats.wilcoxon(d, method='exact')
            with self.subTest(n=n):
                self.assertAlmostEqual(ref.statistic, ours.statistic)
                self.assertAlmostEqual(ref.pvalue, ours.p_value)

    def test_ties_use_mid_ranks(self):
        result = wilcoxon_signed_rank([1.0, 1.0, -2.0, 3.0])
        # ranks 1.5, 1.5, 3, 4: W+ = 7, W- = 3
        self.assertEqual(3.0, result.statistic)

    def test_too_many_pairs(self):
        with self.assertRaises(ValueError):
            wilcoxon_signed_rank(np.arange(1, 22, dtype=float))


class TestVerdicts(TestCase):
    def test_levels(self):
        self.assertEqual(Verdict.EQUIVALENT, significance_verdict(0.0625, 0.05, 0.88, 0.90))
        self.assertEqual(Verdict.INFERIOR, significance_verdict(0.0625, 0.10, 0.88, 0.90))
        self.assertEqual(Verdict.SUPERIOR, significance_verdict(0.01, 0.05, 0.91, 0.90))
        self.assertEqual(Verdict.EQUIVALENT, significance_verdict(0.05, 0.05, 0.8, 0.9))

    def test_invalid_alpha(self):
        for alpha in (0.0, 1.0):
            with self.assertRaises(ValueError):
                significance_verdict(0.5, alpha, 0.8, 0.9)


class TestPercentDifference(TestCase):
    def test_table_cells(self):
        for means, cells in ((FASHION_MEANS, {'mlp': '1.74', 'kan': '1.26',
                                              'mlp-mixer': '0.55'}),
                             (CIFAR_MEANS, {'mlp': '27.58', 'kan': '22.64',
                                            'mlp-mixer': '3.42'})):
            for model, expected in cells.items():
                with self.subTest(model=model, expected=expected):
                    value = percent_difference(means['kan-mixers'], means[model])
                    self.assertEqual(expected, f'{value:.2f}')

    def test_equal_accuracies(self):
        self.assertEqual(0.0, percent_difference(0.8, 0.8))

    def test_invalid_reference(self):
        with self.assertRaises(ValueError):
            percent_difference(0.0, 0.5)


class TestTabulate(TestCase):
    def test_fashion_table(self):
        table = tabulate_results(runs_from_means(FASHION_MEANS))
        self.assertEqual(['mlp', 'kan', 'mlp-mixer', 'kan-mixers'],
                         [r.model for r in table.rows])
        for row in table.comparisons:
            with self.subTest(model=row.model):
                self.assertEqual(Verdict.EQUIVALENT, row.verdicts['0.05'])
                self.assertEqual(Verdict.INFERIOR, row.verdicts['0.10'])
                self.assertAlmostEqual(0.0625, row.p_value)
                self.assertAlmostEqual(FASHION_MEANS[row.model], row.mean)
        reference = table.rows[-1]
        self.assertEqual({}, reference.verdicts)
        self.assertIsNone(reference.difference_percent)
        self.assertAlmostEqual(np.std(OFFSETS), reference.std)

    def test_cifar_text(self):
        text = tabulate_results(runs_from_means(CIFAR_MEANS)).to_text()
        lines = text.splitlines()
        self.assertIn('p = 0.05', lines[0])
        self.assertIn('p = 0.10', lines[0])
        self.assertIn('Difference (%)', lines[0])
        self.assertTrue(lines[1].startswith('mlp '))
        self.assertIn('0.5055', lines[1])
        self.assertIn('27.58%', lines[1])
        self.assertRegex(lines[1], r'\s=\s+\+\s')
        self.assertTrue(lines[-1].startswith('kan-mixers'))

    def test_order_independent_of_input(self):
        runs = runs_from_means(FASHION_MEANS)
        a = tabulate_results(runs)
        b = tabulate_results(list(reversed(runs)))
        self.assertEqual(a, b)

    def test_reference_only(self):
        runs = [r for r in runs_from_means(FASHION_MEANS) if r.name == 'kan-mixers']
        table = tabulate_results(runs)
        self.assertEqual([], table.comparisons)
        self.assertEqual(['kan-mixers'], [r.model for r in table.rows])

    def test_missing_reference(self):
        runs = [r for r in runs_from_means(FASHION_MEANS) if r.name != 'kan-mixers']
        with self.assertRaises(PairingError):
            tabulate_results(runs)

    def test_mismatched_folds(self):
        runs = runs_from_means(FASHION_MEANS)
        runs[0] = runs[0].model_copy(update={'split_seed': 9})
        with self.assertRaises(PairingError):
            tabulate_results(runs)
        short = runs_from_means(FASHION_MEANS)
        short[1] = short[1].model_copy(
            update={'fold_accuracies': short[1].fold_accuracies[:3]})
        with self.assertRaises(PairingError):
            tabulate_results(short)

    def test_write_csv(self):
        table = tabulate_results(runs_from_means(FASHION_MEANS), alphas=[0.05])
        with tempfile.TemporaryDirectory() as d:
            path = pathlib.Path(d) / 'significance.csv'
            table.write_csv(path)
            with open(path, newline='') as f:
                rows = list(csv.DictReader(f))
        self.assertEqual(['model', 'mean', 'std', 'p_0.05', 'p_value', 'statistic',
                          'difference_percent'], list(rows[0]))
        self.assertEqual('=', rows[0]['p_0.05'])
        self.assertEqual('', rows[-1]['p_value'])


class TestModelRun(TestCase):
    def test_load(self):
        with tempfile.TemporaryDirectory() as d:
            directory = fixtures.write_run(pathlib.Path(d) / 'mlp', [0.8, 0.9],
                                           epoch_accuracies=[[0.5, 0.8], [0.6, 0.9]])
            run = load_model_run(directory)
        self.assertEqual('mlp', run.name)
        self.assertEqual([0.8, 0.9], run.fold_accuracies)
        self.assertEqual((0, 2, 100, 2), run.fold_definition)
        self.assertEqual([ViolinRecord('mlp', 1, 2, 0.9)],
                         [r for r in violin_records([run]) if r.fold == 1
                          and r.epoch == 2])

    def test_empty_directory(self):
        with tempfile.TemporaryDirectory() as d, self.assertRaises(FileNotFoundError):
            load_model_run(pathlib.Path(d))


class TestViolin(TestCase):
    def setUp(self):
        self.tempdir = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.tempdir.name)

    def tearDown(self):
        self.tempdir.cleanup()

    def _runs(self):
        rng = np.random.default_rng(4)
        return [ModelRun(name=name, fold_accuracies=[0.8, 0.8, 0.8],
                         epoch_accuracies=rng.uniform(lo, lo + 0.1, (3, 4)).tolist(),
                         split_seed=0, num_folds=3, pool_size=30)
                for name, lo in (('mlp-mixer', 0.6), ('kan-mixers', 0.7))]

    def test_outputs(self):
        records = violin_records(self._runs())
        csv_path, svg_path = self.root / 'violin.csv', self.root / 'violin.svg'
        medians = emit_violin(records, csv_path, svg_path, title='cifar10')
        with open(csv_path, newline='') as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(2 * 3 * 4, len(rows))
        self.assertEqual({'1', '2', '3', '4'}, {r['epoch'] for r in rows})
        for model, median in medians.items():
            values = [float(r['val_accuracy']) for r in rows if r['model'] == model]
            self.assertAlmostEqual(float(np.median(values)), median)

        root = ET.parse(svg_path).getroot()
        texts = [''.join(t.itertext()) for t in root.iter('{http://www.w3.org/2000/svg}text')]
        labels = sorted(float(m) for t in texts
                        for m in re.findall(r'median (\d\.\d{4})', t))
        self.assertEqual(sorted(round(m, 4) for m in medians.values()), labels)
        ids = {e.get('id') for e in root.iter()}
        self.assertIn('median-kan-mixers', ids)
        self.assertIn('violin-mlp-mixer', ids)

    def test_reproducible_svg(self):
        records = violin_records(self._runs())
        emit_violin(records, self.root / 'a.csv', self.root / 'a.svg')
        emit_violin(records, self.root / 'b.csv', self.root / 'b.svg')
        self.assertEqual((self.root / 'a.svg').read_bytes(),
                         (self.root / 'b.svg').read_bytes())

    def test_degenerate_group(self):
        run = ModelRun(name='mlp', fold_accuracies=[0.5], epoch_accuracies=[[0.5, 0.5]],
                       split_seed=0, num_folds=1, pool_size=10)
        medians = emit_violin(violin_records([run]), self.root / 'v.csv',
                              self.root / 'v.svg')
        self.assertEqual({'mlp': 0.5}, medians)

    def test_empty(self):
        with self.assertRaises(ValueError):
            emit_violin([], self.root / 'v.csv', self.root / 'v.svg')
