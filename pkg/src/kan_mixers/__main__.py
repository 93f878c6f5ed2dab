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
import argparse
import datetime
import json
import logging
import os
import pathlib
import subprocess
import sys
from typing import IO, Any, NoReturn, Optional, Self

import pydantic

from kan_mixers import tensor as T
from kan_mixers.config import (DatasetName, ModelKind, RunManifest,
                               SearchBudget, SearchSpace, TrainConfig)
from kan_mixers.data import (DatasetFormatError, ImageDataset, load_dataset,
                             resize_to, subset)
from kan_mixers.helpers import AlphaList
from kan_mixers.mixer import Classifier, save_checkpoint
from kan_mixers.search import random_search
from kan_mixers.stats import (ModelRun, PairingError, emit_violin,
                              load_model_run, tabulate_results, violin_records)
from kan_mixers.train import (FoldResult, NonFiniteError, cross_validate,
                              format_mean_std, summarize_folds,
                              write_fold_results)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING_INPUT = 2
EXIT_PAIRING = 3
EXIT_USAGE = 64

DEFAULT_DATA_DIR = 'data'
DEFAULT_OUT_DIR = 'results'
STATS_MANIFEST = 'stats_manifest.json'
REPORT_MANIFEST = 'report_manifest.json'


class LazyFileType(argparse.FileType):
    """Subclasses `argparse.FileType` in order to provide a way to lazily open
    files for reading from arguments.  Initializes the same as the parent, but
    provides `open` method which returns the file object.

    Usage:
    ```
    parser = argparse.ArgumentParser()
    parser.add_argument('--config', type=LazyFileType())
    args = parser.parse_args()

    with args.config.open() as f:
        cfg = json.load(f)
    ```
    """

    def __call__(self, string: str) -> Self:  # type: ignore
        self.filename = string  # pylint: disable=attribute-defined-outside-init

        if 'r' in self._mode or 'x' in self._mode:
            if not pathlib.Path(self.filename).exists():
                m = (f"can't open {self.filename}:  No such file or directory: "
                     f"'{self.filename}'")
                raise argparse.ArgumentTypeError(m)

        return self

    def open(self) -> IO:
        """Opens and returns file for reading
                :rtype: io.TextIOWrapper
        """
        return open(self.filename, self._mode, self._bufsize, self._encoding,
                    self._errors)


class UsageArgumentParser(argparse.ArgumentParser):
    """Argument parser exiting with EXIT_USAGE on invalid flags."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def setup_logger(verbosity: int) -> logging.Logger:
    """Sets up logger, setting log level higher for increased verbosity

    Args:
        verbosity: int as the level of expected verbosity; higher = more verbose

    Returns:
        logger
    """
    # sets up a default standard out logger and level
    log_format = "%(levelname)-7s %(message)s"
    logging.basicConfig(stream=sys.stdout, format=log_format)
    logger = logging.getLogger()

    if verbosity == 1:
        logger.setLevel(logging.INFO)
    elif verbosity >= 2:
        logger.setLevel(logging.DEBUG)
    else:
        logger.setLevel(logging.WARN)

    return logger


def git_describe() -> str:
    """`git describe` of the source tree, or 'unknown' outside a checkout."""
    try:
        out = subprocess.run(['git', 'describe', '--always', '--dirty'],
                             cwd=pathlib.Path(__file__).parent,
                             capture_output=True, text=True, check=True,
                             timeout=10)
    except (OSError, subprocess.SubprocessError):
        return 'unknown'
    return out.stdout.strip() or 'unknown'


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        '-v', '--verbose',
        action='count',
        help='increase output verbosity; -vv for max verbosity',
        default=0)
    parser.add_argument(
        '--precision',
        choices=sorted(T.PRECISIONS),
        default='float32',
        help='floating point precision of every tensor in the run')


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    """Flags shared by `train` and `search`; None means 'not given' so config
    file values survive."""
    parser.add_argument('--config', type=LazyFileType(), metavar='CONFIG.JSON',
                        help='JSON TrainConfig, e.g. a best_config.json written '
                             'by search; flags override its values')
    parser.add_argument('--dataset', choices=[d.value for d in DatasetName])
    parser.add_argument('--model', choices=[m.value for m in ModelKind])
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--lr', type=float,
                        help='learning rate; defaults per model kind')
    parser.add_argument('--folds', type=int)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--data-dir', type=pathlib.Path,
                        help='dataset directory; falls back to $KANMIX_DATA_DIR, '
                             f'then ./{DEFAULT_DATA_DIR}')
    parser.add_argument('--out-dir', type=pathlib.Path,
                        default=pathlib.Path(DEFAULT_OUT_DIR))
    parser.add_argument('--workers', type=int, default=1,
                        help='folds trained concurrently')
    parser.add_argument('--deterministic', action='store_true',
                        help='single worker; result files are byte-identical '
                             'across runs with the same seed')
    parser.add_argument('--augment', action=argparse.BooleanOptionalAction,
                        default=None,
                        help='random horizontal flip and rotation while training')


def parse_args(argv: Optional[list[str]] = None) -> argparse.Namespace:
    """
    Constructs an argument parser, parses args, and returns the arg namespace.
    Returns:
        object: argparse.Namespace.
    """
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common)

    parser = UsageArgumentParser(
        prog='kan_mixers',
        description='Train, search and compare KAN-Mixers and baseline image '
                    'classifiers with k-fold cross-validation')
    commands = parser.add_subparsers(dest='command', required=True,
                                     metavar='COMMAND')

    train = commands.add_parser('train', parents=[common],
                                help='cross-validate one model on one dataset')
    _add_run_flags(train)
    train.add_argument('--epochs', type=int)
    train.add_argument('--subset', type=int, metavar='N',
                       help='use the first N training images')
    train.add_argument('--eval-test', action='store_true',
                       help='also evaluate every fold on the test split')

    search = commands.add_parser('search', parents=[common],
                                 help='random hyperparameter search')
    _add_run_flags(search)
    search.add_argument('--trials', type=int, default=10)
    search.add_argument('--lr-scale', choices=['linear', 'log'], default='linear')
    search.add_argument('--epochs', type=int,
                        help='per-trial epoch budget; full protocol when unset')
    search.add_argument('--subset', type=int, metavar='N',
                        help='per-trial budget of training images')

    stats = commands.add_parser('stats', parents=[common],
                                help='Wilcoxon comparison against a reference model')
    stats.add_argument('runs', nargs='*', type=pathlib.Path, metavar='RUN_DIR',
                       help='model result directories; defaults to every model '
                            'under RESULTS_DIR/DATASET')
    stats.add_argument('--results-dir', type=pathlib.Path,
                       default=pathlib.Path(DEFAULT_OUT_DIR))
    stats.add_argument('--dataset', choices=[d.value for d in DatasetName],
                       default=DatasetName.CIFAR10.value)
    stats.add_argument('--reference', default=ModelKind.KAN_MIXERS.value)
    stats.add_argument('--alpha', default='0.05,0.10',
                       help='comma-separated significance levels')

    report = commands.add_parser('report', parents=[common],
                                 help='violin/strip plot data per dataset')
    report.add_argument('--results-dir', type=pathlib.Path,
                        default=pathlib.Path(DEFAULT_OUT_DIR))
    report.add_argument('--dataset', choices=[d.value for d in DatasetName],
                        help='only this dataset; default every dataset found')

    args = parser.parse_args(argv)
    for flag in ('batch_size', 'epochs', 'folds', 'subset', 'workers', 'trials'):
        value = getattr(args, flag, None)
        if value is not None and value < 1:
            parser.error(f"argument --{flag.replace('_', '-')}: must be "
                         f"positive, got {value}")
    return args


def _model_order(name: str) -> tuple[int, str]:
    kinds = [m.value for m in ModelKind]
    return (kinds.index(name) if name in kinds else len(kinds), name)


def _find_runs(dataset_dir: pathlib.Path) -> list[pathlib.Path]:
    dirs = [d for d in dataset_dir.iterdir()
            if d.is_dir() and any(d.glob('fold_*.json'))] \
        if dataset_dir.is_dir() else []
    return sorted(dirs, key=lambda d: _model_order(d.name))


# pylint: disable-next=too-few-public-methods
class CLI:
    """Contains the CLI workflow.
    """
    _args: argparse.Namespace
    _logger: logging.Logger

    def __init__(self, *, args: argparse.Namespace, logger: logging.Logger):
        self._args = args
        self._logger = logger

    def run(self) -> int:
        """Entry point for CLI; dispatches to the selected command and maps
        failures to exit codes.

        Returns:
            CLI exit code as int
        """
        T.set_precision(self._args.precision)
        command = {'train': self._train, 'search': self._search,
                   'stats': self._stats, 'report': self._report}[self._args.command]
        try:
            return command()
        except pydantic.ValidationError as e:
            for err in e.errors():
                loc = '.'.join(str(p) for p in err['loc']) or 'config'
                self._logger.error(f"Invalid configuration '{loc}', error: "
                                   f"'{err['msg']}', received '{err.get('input')}'")
            return EXIT_USAGE
        except FileNotFoundError as e:
            self._logger.error(f'Missing input: {e}')
            return EXIT_MISSING_INPUT
        except DatasetFormatError as e:
            self._logger.error(f'Malformed dataset file: {e}')
            return EXIT_MISSING_INPUT
        except PairingError as e:
            self._logger.error(f'Cannot pair results: {e}')
            return EXIT_PAIRING
        except NonFiniteError as e:
            self._logger.error(f'Training diverged: {e}')
            return EXIT_FAILURE
        except Exception as e:  # pylint: disable=broad-exception-caught
            self._logger.exception(f'{self._args.command} failed', exc_info=e)
            return EXIT_FAILURE

    def _resolve_config(self) -> TrainConfig:
        """Built-in defaults, overridden by --config, overridden by flags."""
        args = self._args
        data: dict[str, Any] = {}
        if args.config is not None:
            self._logger.debug(f"Using config file '{args.config.filename}'")
            with args.config.open() as f:
                data = json.load(f)
        overrides = {'dataset': args.dataset, 'model': args.model,
                     'batch_size': args.batch_size, 'lr': args.lr,
                     'folds': args.folds, 'seed': args.seed}
        if args.command == 'train':
            overrides.update(epochs=args.epochs, subset=args.subset)
        data.update({k: v for k, v in overrides.items() if v is not None})
        if args.augment is not None:
            data.setdefault('augmentation', {})['enabled'] = args.augment

        mixer = data.setdefault('mixer', {})
        if 'in_channels' not in mixer:
            mixer['in_channels'] = DatasetName(
                data.get('dataset', DatasetName.CIFAR10)).channels
        return TrainConfig.model_validate(data)

    def _data_dir(self) -> pathlib.Path:
        if self._args.data_dir is not None:
            return self._args.data_dir
        return pathlib.Path(os.environ.get('KANMIX_DATA_DIR', DEFAULT_DATA_DIR))

    def _load(self, cfg: TrainConfig, split: str,
              n: Optional[int] = None) -> ImageDataset:
        dataset = load_dataset(cfg.dataset, self._data_dir(), split)  # type: ignore[arg-type]
        dataset = resize_to(subset(dataset, n), cfg.mixer.image_size)
        self._logger.info(f'Loaded {len(dataset)} {split} images of {cfg.dataset} '
                          f'at {dataset.image_shape}')
        return dataset

    def _workers(self) -> int:
        return 1 if self._args.deterministic else self._args.workers

    def _manifest(self, config: dict[str, Any], out_dir: pathlib.Path,
                  started: datetime.datetime,
                  seed: Optional[int] = None) -> RunManifest:
        return RunManifest(command=self._args.command, config=config, seed=seed,
                           precision=T.get_precision(), git_describe=git_describe(),
                           started_at=started, out_dir=str(out_dir))

    def _write_manifest(self, manifest: RunManifest, path: pathlib.Path) -> None:
        manifest.finished_at = datetime.datetime.now(datetime.timezone.utc)
        path.write_text(manifest.model_dump_json(indent=2))
        self._logger.debug(f"Wrote manifest '{path}'")

    def _train(self) -> int:
        started = datetime.datetime.now(datetime.timezone.utc)
        cfg = self._resolve_config()
        dataset = self._load(cfg, 'train', cfg.subset)
        test_set = self._load(cfg, 'test') if self._args.eval_test else None

        out_dir = self._args.out_dir / str(cfg.dataset) / str(cfg.model)
        checkpoints = out_dir / 'checkpoints'
        checkpoints.mkdir(parents=True, exist_ok=True)

        def on_fold(model: Classifier, result: FoldResult) -> None:
            save_checkpoint(model, checkpoints / f'fold_{result.fold}',
                            cfg.mixer, cfg.seed)

        results = cross_validate(cfg, dataset, workers=self._workers(),
                                 test_set=test_set, on_fold=on_fold)
        write_fold_results(out_dir, results)

        manifest = self._manifest(cfg.model_dump(mode='json'), out_dir, started,
                                  seed=cfg.seed)
        manifest.fold_wall_times = [r.wall_time for r in results]
        self._write_manifest(manifest, out_dir / 'manifest.json')

        mean, std = summarize_folds([r.accuracy for r in results],
                                    cfg.population_std)
        print(f'{cfg.model} {cfg.dataset}: {format_mean_std(mean, std)}')
        self._logger.info(f"Wrote results to '{out_dir}'")
        return EXIT_OK

    def _search(self) -> int:
        started = datetime.datetime.now(datetime.timezone.utc)
        cfg = self._resolve_config()
        dataset = self._load(cfg, 'train')
        if self._args.subset is None and cfg.subset is not None:
            self._logger.info(f'Using subset {cfg.subset} from the config file '
                              f'as the per-trial budget')
        budget = SearchBudget(epochs=self._args.epochs,
                              subset=self._args.subset or cfg.subset)
        space = SearchSpace(lr_scale=self._args.lr_scale)

        result = random_search(space, cfg, dataset, trials=self._args.trials,
                               seed=cfg.seed, budget=budget,
                               workers=self._workers())
        out_dir = self._args.out_dir / str(cfg.dataset) / 'search'
        result.write(out_dir, cfg)

        manifest = self._manifest(cfg.model_dump(mode='json'), out_dir, started,
                                  seed=cfg.seed)
        self._write_manifest(manifest, out_dir / 'manifest.json')

        if result.best is None:
            self._logger.error('No search trial completed')
            return EXIT_FAILURE
        print(f'best trial {result.best.trial + 1}: mean accuracy '
              f'{result.best.mean_accuracy:.4f}')
        self._logger.info(f"Wrote search results to '{out_dir}'")
        return EXIT_OK

    def _stats(self) -> int:
        started = datetime.datetime.now(datetime.timezone.utc)
        args = self._args
        alphas = pydantic.TypeAdapter(AlphaList).validate_python(args.alpha)
        if args.runs:
            run_dirs = list(args.runs)
            out_dir = run_dirs[0].parent
        else:
            out_dir = args.results_dir / args.dataset
            run_dirs = _find_runs(out_dir)
        if len(run_dirs) < 2:
            raise FileNotFoundError(f"need at least two model result "
                                    f"directories, found {len(run_dirs)} "
                                    f"(looked in '{out_dir}')")
        runs = [load_model_run(d) for d in run_dirs]
        table = tabulate_results(runs, reference=args.reference, alphas=alphas)
        table.write_csv(out_dir / 'significance.csv')
        print(table.to_text(), end='')
        self._logger.info(f"Wrote '{out_dir / 'significance.csv'}'")

        config = {'runs': [str(d) for d in run_dirs], 'reference': args.reference,
                  'alphas': alphas, 'population_std': True}
        self._write_manifest(self._manifest(config, out_dir, started),
                             out_dir / STATS_MANIFEST)
        return EXIT_OK

    def _report(self) -> int:
        started = datetime.datetime.now(datetime.timezone.utc)
        args = self._args
        if args.dataset:
            dataset_dirs = [args.results_dir / args.dataset]
        else:
            dataset_dirs = [args.results_dir / d.value for d in DatasetName
                            if (args.results_dir / d.value).is_dir()]
        written = 0
        for dataset_dir in dataset_dirs:
            runs: list[ModelRun] = [load_model_run(d) for d in _find_runs(dataset_dir)]
            records = violin_records(runs)
            if not records:
                self._logger.warning(f"No per-epoch results under '{dataset_dir}'")
                continue
            medians = emit_violin(records, dataset_dir / 'violin.csv',
                                  dataset_dir / 'violin.svg',
                                  title=dataset_dir.name)
            for model, median in medians.items():
                self._logger.info(f'{dataset_dir.name} {model}: median '
                                  f'validation accuracy {median:.4f}')
            config = {'results_dir': str(args.results_dir),
                      'runs': [r.name for r in runs], 'medians': medians}
            self._write_manifest(self._manifest(config, dataset_dir, started),
                                 dataset_dir / REPORT_MANIFEST)
            written += 1
        if not written:
            raise FileNotFoundError(f"no results to report under '{args.results_dir}'")
        return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    """Main entry point of the kan_mixers CLI - delegates CLI workflow and
    logic to CLI class.

    Returns:
        object: int exit code
    """
    args = parse_args(argv)

    logger = setup_logger(args.verbose)

    cli = CLI(args=args, logger=logger)

    return cli.run()


if __name__ == '__main__':
    sys.exit(main())
