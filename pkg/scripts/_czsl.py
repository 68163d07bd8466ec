# SPDX-License-Identifier: LGPL-3.0-or-later

import argparse
import logging
import os
import sys

from promptcompvl.checkpoint import (
    checkpoint_to_snapshot,
    describe_checkpoint,
    load_checkpoint,
)
from promptcompvl.config import resolve_config
from promptcompvl.data import (
    CzslSetting,
    format_statistics,
    load_splits,
    save_splits,
    synth_generate,
    target_set,
)
from promptcompvl.encoders import (
    FrozenEncoders,
    ImageFeatureTable,
    init_frozen,
    load_feature_table,
    save_feature_table,
)
from promptcompvl.errors import (
    CheckpointIntegrityError,
    ConfigurationError,
    ContractError,
    CzslError,
    DataValidationError,
    FeatureLookupError,
    GenerationError,
)
from promptcompvl.evaluation import evaluate, feasibility_scores, format_report
from promptcompvl.io import atomic_write
from promptcompvl.model import predict, rank, text_matrix
from promptcompvl.prompt import PromptMode
from promptcompvl.training import compare_modes, initial_snapshot, train


PROG = 'promptcompvl'
FEATURES_FILE = 'features.bin'

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; usage errors exit 1 here.
    def error(self, message):
        raise UsageError(message)


def _shared_flags():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('--config', help='key=value config file')
    shared.add_argument('--seed', type=int)
    shared.add_argument('--data-dir', dest='data_dir',
                        help='Directory holding the split files')
    shared.add_argument('--features',
                        help=f'Feature-table file (default: DATA_DIR/{FEATURES_FILE})')
    shared.add_argument('--out', help='Output directory or file')
    shared.add_argument('--log-level', dest='log_level', type=str.upper,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'])
    return shared


def _model_flags():
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument('--mode', choices=[m.value for m in PromptMode])
    model.add_argument('--tau', type=float, help='Logit temperature')
    model.add_argument('--prompt-len', dest='prompt_length', type=int)
    model.add_argument('--prompt-init', dest='prompt_init', choices=['random', 'hard'])
    model.add_argument('--context-length', dest='context_length', type=int)
    model.add_argument('--width', type=int)
    model.add_argument('--heads', type=int)
    model.add_argument('--blocks', type=int)
    return model


def _train_flags():
    training = argparse.ArgumentParser(add_help=False)
    training.add_argument('--epochs', type=int)
    training.add_argument('--batch-size', dest='batch_size', type=int)
    training.add_argument('--lr', dest='learning_rate', type=float)
    training.add_argument('--optimizer', choices=['sgd', 'adam'])
    training.add_argument('--schedule', choices=['constant', 'cosine'])
    training.add_argument('--checkpoint-every', dest='checkpoint_every', type=int)
    return training


def _eval_flags():
    evaluation = argparse.ArgumentParser(add_help=False)
    evaluation.add_argument('--setting', choices=[s.value for s in CzslSetting])
    evaluation.add_argument('--phase', choices=['val', 'test'])
    evaluation.add_argument('--feasibility-threshold', dest='feasibility_threshold', type=float)
    evaluation.add_argument('--checkpoint',
                            help='Checkpoint to evaluate; without one the untrained model is used')
    return evaluation


def build_parser():
    shared, model, training, evaluation = _shared_flags(), _model_flags(), _train_flags(), _eval_flags()
    ap = _Parser(prog=PROG, description='Soft-prompt compositional zero-shot learning.')
    sub = ap.add_subparsers(dest='command', required=True, parser_class=_Parser)

    p = sub.add_parser('synth', parents=[shared], help='Generate a synthetic dataset')
    p.add_argument('--attrs', type=int)
    p.add_argument('--objs', type=int)
    p.add_argument('--image-dim', dest='image_dim', type=int)
    p.add_argument('--noise', type=float)
    p.add_argument('--images-per-pair', dest='images_per_pair', type=int)
    p.add_argument('--unseen-frac', dest='unseen_frac', type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('train', parents=[shared, model, training], help='Train prompt layers')
    p.add_argument('--resume', help='Epoch checkpoint to resume from')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', parents=[shared, model, evaluation], help='Evaluate a checkpoint')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('predict', parents=[shared, model, evaluation], help='Predict one image')
    p.add_argument('--image-id', dest='image_id', required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser('inspect', parents=[shared], help='Summarise a checkpoint')
    p.add_argument('checkpoint')
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser('compare', parents=[shared, model, training],
                       help='Validation metrics of all four prompting strategies')
    p.set_defaults(func=cmd_compare)
    return ap


_NOT_CONFIG = frozenset({'command', 'func', 'config', 'resume', 'image_id'})


def _resolve(args):
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    return resolve_config(args.config, overrides)


def _require_data_dir(cfg):
    if cfg.data_dir is None:
        raise ConfigurationError('--data-dir is required')
    return cfg.data_dir


def _features_path(cfg, data_dir):
    return cfg.features or os.path.join(data_dir, FEATURES_FILE)


def _load_inputs(cfg):
    data_dir = _require_data_dir(cfg)
    space = load_splits(data_dir)
    features = load_feature_table(_features_path(cfg, data_dir))
    return space, features


def _fresh_encoders(cfg, features):
    image_dim = next(iter(features.values())).size
    text, projection = init_frozen(cfg.seed, cfg.encoder_dims(image_dim))
    return FrozenEncoders(text=text, images=ImageFeatureTable(features=features, projection=projection))


def _snapshot(args, cfg, space, features):
    if cfg.checkpoint is None:
        return initial_snapshot(space, _fresh_encoders(cfg, features), cfg.train_config())
    snapshot = checkpoint_to_snapshot(load_checkpoint(cfg.checkpoint), space, features)
    if args.tau is not None:
        snapshot = snapshot.with_tau(args.tau)
    return snapshot


def _threshold(cfg):
    setting = cfg.setting
    if setting is CzslSetting.OPEN_WORLD and cfg.feasibility_threshold is None:
        raise ConfigurationError('--setting open_world requires --feasibility-threshold')
    if setting is not CzslSetting.OPEN_WORLD and cfg.feasibility_threshold is not None:
        raise ConfigurationError(f'--feasibility-threshold only applies to --setting open_world, not {setting.value}')
    return cfg.feasibility_threshold


# ── Subcommands ──────────────────────────────────────────────────────────────

def cmd_synth(args, cfg):
    out = cfg.out or _require_data_dir(cfg)
    dataset = synth_generate(cfg.synth_config())
    save_splits(dataset.space, out)
    save_feature_table(_features_path(cfg, out), dataset.features)
    print(format_statistics(dataset.space, 'synthetic'))
    return EXIT_OK


def cmd_train(args, cfg):
    if cfg.mode is PromptMode.CLIP_HARD:
        raise ContractError('mode clip_hard has no trainable parameters; '
                            'evaluate it directly with "promptcompvl eval --mode clip_hard"')
    if cfg.out is None:
        raise ConfigurationError('train needs --out for its checkpoint directory')
    space, features = _load_inputs(cfg)
    _, stats = train(cfg.train_config(), space, _fresh_encoders(cfg, features),
                     checkpoint_dir=cfg.out, resume_from=args.resume)
    best = next((e.validation for e in stats.epochs if e.epoch == stats.best_epoch), None)
    if best is not None:
        print(f'best validation (epoch {stats.best_epoch}): '
              f'S={best.S:.4f} U={best.U:.4f} HM={best.HM:.4f} AUC={best.AUC:.4f}')
    elif stats.best_epoch is not None:
        # best epoch predates the resume point; only its AUC survives in the checkpoint
        print(f'best validation (epoch {stats.best_epoch}): AUC={stats.best_auc:.4f}')
    else:
        last = stats.epochs[-1] if stats.epochs else None
        print('training finished' if last is None else
              f'training finished: epoch={last.epoch} loss={last.loss:.6f} seen_acc={last.seen_acc:.4f}')
    return EXIT_OK


def cmd_eval(args, cfg):
    threshold = _threshold(cfg)
    space, features = _load_inputs(cfg)
    snapshot = _snapshot(args, cfg, space, features)
    text = format_report(evaluate(snapshot, space, cfg.setting, cfg.phase, threshold))
    if cfg.out is not None:
        with atomic_write(cfg.out) as f:
            f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args, cfg):
    threshold = _threshold(cfg)
    space, features = _load_inputs(cfg)
    snapshot = _snapshot(args, cfg, space, features)
    targets = target_set(space, cfg.setting, cfg.phase)
    mask = None
    if threshold is not None:
        mask = feasibility_scores(space, snapshot.prompt.phi).mask(targets, threshold)
    texts = text_matrix(targets, snapshot)
    print(space.pair_name(predict(args.image_id, targets, snapshot, mask, texts=texts)))
    for n, (pair, cos) in enumerate(rank(args.image_id, targets, snapshot, mask, texts=texts), start=1):
        print(f'{n}. {space.pair_name(pair)} {cos:.6f}')
    return EXIT_OK


def cmd_inspect(args, cfg):
    sys.stdout.write(describe_checkpoint(load_checkpoint(args.checkpoint)))
    return EXIT_OK


def cmd_compare(args, cfg):
    space, features = _load_inputs(cfg)
    reports = compare_modes(space, _fresh_encoders(cfg, features), cfg.train_config())
    print(f'{"mode":<20} {"S":>7} {"U":>7} {"HM":>7} {"AUC":>7}')
    for mode, report in reports.items():
        print(f'{mode.value:<20} {report.S:7.4f} {report.U:7.4f} {report.HM:7.4f} {report.AUC:7.4f}')
    return EXIT_OK


# ── Entry point ──────────────────────────────────────────────────────────────

def _fail(message, rc):
    print(f'{PROG}: {message}', file=sys.stderr)
    return rc


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve(args)
    except UsageError as e:
        return _fail(e, EXIT_USAGE)
    except ConfigurationError as e:
        return _fail(e, EXIT_USAGE)
    except OSError as e:
        return _fail(e, EXIT_IO)

    default_level = 'INFO' if args.command == 'train' else 'WARNING'
    logging.basicConfig(level=cfg.log_level or default_level, stream=sys.stderr,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        return args.func(args, cfg)
    except (ConfigurationError, ContractError) as e:
        return _fail(e, EXIT_USAGE)
    except (DataValidationError, GenerationError, FeatureLookupError, CheckpointIntegrityError) as e:
        return _fail(e, EXIT_DATA)
    except OSError as e:
        return _fail(e, EXIT_IO)
    except CzslError as e:
        return _fail(e, EXIT_DATA)


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
