"""
Command line front end.

    python cli.py synth --seed 7 --out data/synth
    python cli.py train --dataset data/synth/manifest.json --preset synthetic --out runs/a
    python cli.py eval --checkpoint runs/a/checkpoint.ckpt --dataset data/synth/manifest.json
    python cli.py infer --checkpoint runs/a/checkpoint.ckpt --features one.txt --topk 3
    python cli.py gradcheck --seeds 5
    python cli.py retrieve --checkpoint ... --dataset ... --record 12 --remove attr0 --add attr3

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""

import os
import sys
import logging
import argparse
from dataclasses import fields
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.neighbors import NearestNeighbors

from config import Config, get_config, load_config_file
from data import SynthConfig, compute_correlation, load_dataset, save_dataset, stack_features, synth_generate
from errors import ConfigurationError, DataLoadError, NumericError, SymNetError, UsageError
from evaluate import (correlation_distance_scatter, evaluate_model, pair_scores, render_table,
                      write_bias_sweep)
from losses import GRADCHECK_TERMS, check_loss_gradients
from models import SymNet, attr_decisions, attr_prob
from numgrad import no_grad
from train import TrainConfig, fit
from utils import ensure_directory, open_input, save_json, vocab_hash, write_tsv

logger = logging.getLogger(__name__)

# TrainConfig fields that have their own common flag
COMMON_FIELDS = ('seed', 'output_dir')


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='random seed (default from SYMNET_SEED)')
    common.add_argument('--config', default=None, help='flat key=value settings file')
    common.add_argument('--preset', default=None, help='named hyper-parameter preset')
    common.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')
    common.add_argument('--out', default=None, help='output directory')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = _Parser(prog='symnet', description='Attribute-object composition learning with symmetry')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    synth = sub.add_parser('synth', parents=[common], help='generate a synthetic dataset')
    synth.add_argument('--n-attrs', type=int, default=6)
    synth.add_argument('--n-objects', type=int, default=5)
    synth.add_argument('--feature-dim', type=int, default=32)
    synth.add_argument('--per-pair', type=int, default=40)
    synth.add_argument('--noise', type=float, default=0.05)
    synth.add_argument('--unseen-pairs', type=int, default=0)
    synth.add_argument('--multi', action='store_true', help='records carry attribute sets')
    synth.add_argument('--groups', default='', help="correlated attribute groups, e.g. '0,1,2;3,4'")
    synth.add_argument('--test-fraction', type=float, default=0.2)
    synth.add_argument('--val-fraction', type=float, default=0.0)

    train = sub.add_parser('train', parents=[common], help='train a model')
    for f in fields(TrainConfig):
        if f.name not in COMMON_FIELDS:
            train.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                               metavar=f.type.__name__.upper())

    evaluate = sub.add_parser('eval', parents=[common], help='evaluate a checkpoint')
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--dataset', required=True)
    evaluate.add_argument('--split', default='test')
    evaluate.add_argument('--gamma', type=float, default=None)

    infer = sub.add_parser('infer', parents=[common], help='score attribute presence for feature vectors')
    infer.add_argument('--checkpoint', required=True)
    infer.add_argument('--features', required=True, help='one whitespace separated feature vector per line')
    infer.add_argument('--dataset', default=None, help='dataset for vocabulary names and the pair space')
    infer.add_argument('--gamma', type=float, default=None)
    infer.add_argument('--topk', type=int, default=3)

    gradcheck = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of every loss')
    gradcheck.add_argument('--seeds', type=int, default=5)
    gradcheck.add_argument('--tol', type=float, default=1e-5)
    gradcheck.add_argument('--terms', default=','.join(GRADCHECK_TERMS))
    gradcheck.add_argument('--dtype', choices=('float64', 'float32'), default='float64')

    retrieve = sub.add_parser('retrieve', parents=[common], help='edit a feature and find its neighbours')
    retrieve.add_argument('--checkpoint', required=True)
    retrieve.add_argument('--dataset', required=True)
    query = retrieve.add_mutually_exclusive_group(required=True)
    query.add_argument('--record', type=int, help='dataset record id to start from')
    query.add_argument('--feature', help='file holding one feature vector')
    retrieve.add_argument('--remove', action='append', default=[], help='attribute to remove (repeatable)')
    retrieve.add_argument('--add', action='append', default=[], help='attribute to add (repeatable)')
    retrieve.add_argument('--k', type=int, default=5)
    retrieve.add_argument('--split', default='train')
    return parser


def resolve_config(args) -> TrainConfig:
    """Preset, then config file, then command line flags"""
    preset = get_config(args.preset or 'default')
    cfg = TrainConfig.from_object(preset)
    if args.config:
        cfg = cfg.with_overrides(load_config_file(args.config))
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig) if f.name not in COMMON_FIELDS}
    overrides['seed'] = args.seed
    overrides['output_dir'] = args.out
    return cfg.with_overrides(overrides)


def _read_vectors(path: str) -> np.ndarray:
    rows = []
    with open_input(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError:
                raise DataLoadError(f"{path}:{lineno}: non-numeric feature value") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataLoadError(f"{path}:{lineno}: expected {len(rows[0])} values, found {len(rows[-1])}")
    if not rows:
        raise DataLoadError(f"{path}: no feature vectors")
    return np.array(rows)


def _load_model(path: str, dataset=None):
    if dataset is None:
        return SymNet.load(path)
    return SymNet.load(path, vocab_hash(dataset.attr_vocab), vocab_hash(dataset.object_vocab))


def _attr_index(name: str, vocab: Sequence[str], flag: str) -> int:
    if name in vocab:
        return vocab.index(name)
    raise ConfigurationError(f"{flag} {name}: not an attribute of the dataset")


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> Dict:
    try:
        groups = [tuple(int(a) for a in g.split(',') if a.strip()) for g in args.groups.split(';') if g.strip()]
    except ValueError:
        raise UsageError(f"--groups {args.groups}: expected comma separated attribute ids split by ';'") from None
    cfg = SynthConfig(n_attrs=args.n_attrs, n_objects=args.n_objects, feature_dim=args.feature_dim,
                      per_pair_count=args.per_pair, noise_sigma=args.noise, corr_structure=groups,
                      seed=args.seed if args.seed is not None else Config.SEED, multi_attr=args.multi,
                      n_unseen_pairs=args.unseen_pairs, test_fraction=args.test_fraction,
                      val_fraction=args.val_fraction, dtype=Config.DTYPE)
    dataset = synth_generate(cfg)
    manifest = save_dataset(dataset, args.out or os.path.join(Config.OUTPUT_DIR, 'synth'))
    print(f"wrote {len(dataset.records)} records to {manifest}")
    return {'manifest': manifest}


def cmd_train(args) -> Dict:
    cfg = resolve_config(args)
    result = fit(cfg)
    print(f"trained {result.epochs_run} epoch(s); final total loss {result.final.as_floats()['total']:.6f}")
    print(f"negatives: {result.used} sampled, {result.skipped} skipped")
    print(render_table(result.evaluation))
    print(f"checkpoint: {result.checkpoint}")
    return {'checkpoint': result.checkpoint}


def cmd_eval(args) -> Dict:
    cfg = resolve_config(args)
    gamma = args.gamma if args.gamma is not None else cfg.gamma
    dataset = load_dataset(args.dataset)
    model, _ = _load_model(args.checkpoint, dataset)
    report = evaluate_model(model, dataset, args.split, gamma)
    out_dir = ensure_directory(args.out or os.path.dirname(os.path.abspath(args.checkpoint)))
    outputs = {'report': save_json(report.to_json(), os.path.join(out_dir, f'eval_{args.split}.json'))}
    if report.bias_curve:
        outputs['bias_sweep'] = write_bias_sweep(report, os.path.join(out_dir, f'bias_sweep_{args.split}.tsv'))
    if dataset.multi_attr:
        corr = compute_correlation(dataset.split('train'), dataset.n_attrs)
        points, rho = correlation_distance_scatter(model, dataset.split(args.split), corr)
        outputs['scatter'] = write_tsv(points.tolist(), ['corr_to_set', 'd_minus'],
                                       os.path.join(out_dir, f'corr_distance_{args.split}.tsv'))
        print(f"rank correlation of corr(a, X) with removal distance: {rho:.3f}")
    print(render_table(report))
    return outputs


def _check_width(features: np.ndarray, model: SymNet) -> np.ndarray:
    if features.shape[1] != model.cfg.feature_dim:
        raise DataLoadError(f"feature vectors have {features.shape[1]} values, model expects "
                            f"{model.cfg.feature_dim}")
    return features


def infer_rows(model: SymNet, features: np.ndarray, gamma: float = 1.0, topk: int = 3,
               dataset=None) -> List[Dict]:
    """Per-row attribute distances, probabilities, decisions and (with a pair space) top pairs"""
    features = _check_width(np.atleast_2d(features), model)
    with no_grad():
        scores = model.rmd(features, gamma)
    d, p, present = scores.d.data, attr_prob(scores), attr_decisions(scores)
    attr_names = dataset.attr_vocab if dataset else [str(i) for i in range(model.cfg.n_attrs)]
    pairs = None
    if dataset is not None and dataset.pairs is not None:
        space = dataset.pair_space()
        pairs = pair_scores(model, features, space, gamma)
    rows = []
    for i in range(len(features)):
        row = {'attributes': [{'name': attr_names[a], 'd': float(d[i, a]), 'p': float(p[i, a]),
                               'present': bool(present[i, a])} for a in range(model.cfg.n_attrs)]}
        if pairs is not None:
            order = np.argsort(-pairs[i], kind='stable')[:topk]
            row['pairs'] = [{'attr': dataset.attr_vocab[j // space.n_objects],
                             'object': dataset.object_vocab[j % space.n_objects], 'p': float(pairs[i, j])}
                            for j in order if np.isfinite(pairs[i, j])]
        rows.append(row)
    return rows


def cmd_infer(args) -> Dict:
    cfg = resolve_config(args)
    gamma = args.gamma if args.gamma is not None else cfg.gamma
    if args.topk < 1:
        raise ConfigurationError(f"--topk must be at least 1, got {args.topk}")
    dataset = load_dataset(args.dataset) if args.dataset else None
    model, _ = _load_model(args.checkpoint, dataset)
    rows = infer_rows(model, _read_vectors(args.features), gamma, args.topk, dataset)
    for i, row in enumerate(rows):
        print(f"# row {i}")
        print('attribute\td\tp\tpresent')
        for entry in row['attributes']:
            print(f"{entry['name']}\t{entry['d']:.6f}\t{entry['p']:.6f}\t{int(entry['present'])}")
        for entry in row.get('pairs', []):
            print(f"pair\t{entry['attr']} {entry['object']}\t{entry['p']:.6f}")
    if args.out:
        save_json(rows, os.path.join(ensure_directory(args.out), 'infer.json'))
    return {'rows': rows}


def cmd_gradcheck(args) -> Dict:
    terms = [t.strip() for t in args.terms.split(',') if t.strip()]
    base = args.seed if args.seed is not None else 0
    failures = []
    for seed in range(base, base + args.seeds):
        for term, report in check_loss_gradients(seed, terms, args.tol, args.dtype).items():
            print(f"seed {seed} {term:<9} {report.summary()}")
            if not report.passed:
                failures.append(f"{term} (seed {seed})")
    if failures:
        raise NumericError(f"gradient check failed for {', '.join(failures)}")
    return {'checked': len(terms) * args.seeds}


def cmd_retrieve(args) -> Dict:
    dataset = load_dataset(args.dataset)
    model, _ = _load_model(args.checkpoint, dataset)
    if args.k < 1:
        raise ConfigurationError(f"--k must be at least 1, got {args.k}")
    if args.feature:
        query = _check_width(_read_vectors(args.feature)[:1], model)
    else:
        try:
            query = dataset.record(args.record).feature[None, :]
        except KeyError:
            raise DataLoadError(f"--record {args.record}: no such record in {args.dataset}") from None
    removals = [_attr_index(name, dataset.attr_vocab, '--remove') for name in args.remove]
    additions = [_attr_index(name, dataset.attr_vocab, '--add') for name in args.add]

    with no_grad():
        edited = query.astype(model.store.dtype)
        for a in removals:
            edited = model.decouple(edited, [a]).data
        for a in additions:
            edited = model.couple(edited, [a]).data

    candidates = dataset.split(args.split)
    bank = stack_features(candidates, model.store.dtype)
    k = min(args.k, len(candidates))
    index = NearestNeighbors(n_neighbors=k, metric='euclidean').fit(bank)
    distances, positions = index.kneighbors(edited)
    results = []
    for dist, pos in zip(distances[0], positions[0]):
        record = candidates[int(pos)]
        attrs = ' '.join(dataset.attr_vocab[a] for a in sorted(record.attrs))
        results.append({'record_id': record.record_id, 'distance': float(dist),
                        'object': dataset.object_vocab[record.object_id], 'attrs': attrs})
        print(f"{record.record_id}\t{dist:.6f}\t{attrs} {dataset.object_vocab[record.object_id]}")
    return {'neighbours': results}


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'infer': cmd_infer,
    'gradcheck': cmd_gradcheck,
    'retrieve': cmd_retrieve,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, dispatch, and map failures to exit codes"""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        return int(e.code or 0)

    level = (args.log_level or Config.LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"error: --log-level {args.log_level}: unknown level", file=sys.stderr)
        return UsageError.exit_code
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.getLogger().setLevel(level)

    try:
        COMMANDS[args.command](args)
    except SymNetError as e:
        logger.debug('command failed', exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return DataLoadError.exit_code
    return 0


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
