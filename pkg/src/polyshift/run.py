import argparse
import csv
import os
import sys
from dataclasses import replace
from logging import DEBUG, INFO, Formatter, StreamHandler, getLogger

import numpy as np

from . import PolyshiftError
from .config import DEFAULT_CONFIG_PATH, Config, ConfigError
from .experiments import Augmentation, bench_forward, generate, save_dataset, train
from .metrics import SamplerKind, ShiftSampler, accuracy, consistency, random_erase, stability, vertical_flip
from .network import DownsampleKind, build, calibrate_readout, save_network
from .polyphase import aps_margin
from .spectral import (ImproperSignalLength, antialiased_sum_check, cosine_relu_sums, cosine_signal, polynomial_sum_check,
                       polyphase_spectrum_check, relu_sum_gap)
from .tensor import Activation, PadMode

COMMANDS = ('invariance', 'oracle', 'train', 'stability', 'ood', 'criteria', 'oddsize', 'bench')
EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2
TIE_MARGIN = 1e-6

CONSISTENCY_HEADER = ('model', 'sampler', 'trials', 'fraction')
ORACLE_HEADER = ('identity', 'n', 'residual', 'threshold', 'status')
TRAIN_HEADER = ('epoch', 'train_loss', 'val_acc', 'val_consistency')
TRAIN_SUMMARY_HEADER = ('model', 'seed', 'test_acc', 'test_consistency')
STABILITY_HEADER = ('model', 'tap', 'channel', 'max_delta', 'mean_delta', 'jx', 'jy')
OOD_HEADER = ('model', 'perturbation', 'level', 'consistency', 'accuracy')
CRITERIA_HEADER = ('criterion', 'trials', 'fraction')
ODDSIZE_HEADER = ('model', 'size', 'trials', 'fraction')
BENCH_HEADER = ('model_a', 'model_b', 'repetitions', 'median_a', 'mad_a', 'median_b', 'mad_b', 'ratio', 'rss_bytes')

logger = getLogger('polyshift.run')


def setup_logger(debug=False):
    logger = getLogger()
    stream_formatter = Formatter('%(asctime)s [%(levelname)s] %(name)s: %(message)s')
    stream_handler = StreamHandler()
    stream_handler.setFormatter(stream_formatter)
    if debug:
        logger.setLevel(DEBUG)
        stream_handler.setLevel(DEBUG)
    else:
        logger.setLevel(INFO)
        stream_handler.setLevel(INFO)
    if not any(type(h) is StreamHandler for h in logger.handlers):
        logger.addHandler(stream_handler)
    return logger


def parse_args(argv=None):
    parser = argparse.ArgumentParser(prog='polyshift', description='Shift-invariance experiments for adaptive polyphase sampling')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('-c', '--config', default=DEFAULT_CONFIG_PATH, metavar='config.yaml')
    parser.add_argument('-o', '--out', default='results', metavar='DIR')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--precision', choices=('f32', 'f64'))
    parser.add_argument('-d', '--debug', action='store_true')
    return parser.parse_args(argv)


def write_csv(out, name, header, rows):
    path = os.path.join(out, name)
    with open(path, 'w', newline='') as stream:
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f'Wrote {len(rows)} rows to {path}')
    return path


def evaluation_images(config:Config, count:int, family=None, size=None):
    classes = config['dataset']['classes']
    overrides = {'per_class': -(-count // classes)}
    if family is not None:
        overrides['family'] = family
    if size is not None:
        overrides['size'] = size
    data = generate(config.dataset_spec(**overrides))
    return np.concatenate([data.train.images, data.val.images, data.test.images])[:count]


def asserts_invariance(kind:DownsampleKind, config:Config, sampler_kind=SamplerKind.CIRCULAR):
    return kind.adaptive and sampler_kind == SamplerKind.CIRCULAR and config['network']['pad_const'] == PadMode.CIRCULAR


def untrained_net(config:Config, images, kind:DownsampleKind, **overrides):
    return calibrate_readout(build(config.network_spec(kind, **overrides)), images)


def _label_violations(name, report):
    if report.distinct_labels < 2:
        return [f'{name} predicts a single class on every image {report.label_counts}']
    return []


def cmd_invariance(config:Config, out):
    section = config['invariance']
    images = evaluation_images(config, section['images'], section['family_const'])
    sampler_kind = SamplerKind(section['sampler'])
    sampler = ShiftSampler(sampler_kind, section['max_shift'], section['pad'], config['seed'])
    criterion = config['network']['criterion_const']
    ties = int(np.sum(aps_margin(images, 2, criterion) < TIE_MARGIN))
    if ties:
        logger.warning(f'{ties} inputs have near-tied stride-2 polyphase scores under {criterion.name}')
    rows = []
    violations = []
    for kind in section['kinds_const']:
        net = untrained_net(config, images, kind)
        report = consistency(net, images, sampler, section['trials'], workers=config['workers'])
        rows.append((kind.value, sampler.name, section['trials'], report.fraction))
        logger.info(f'{kind.value}: consistency {report.fraction:.4f}, max logit gap {report.max_logit_gap:.3e}, labels {report.label_counts}')
        violations += _label_violations(kind.value, report)
        if asserts_invariance(kind, config, sampler_kind):
            if report.fraction != 1.0:
                violations.append(f'{kind.value} consistency {report.fraction}')
            if report.max_logit_gap >= section['logit_tolerance']:
                violations.append(f'{kind.value} logit gap {report.max_logit_gap:.3e}')
    write_csv(out, 'consistency.csv', CONSISTENCY_HEADER, rows)
    return _report(violations)


def _threshold_row(identity, n, residual, threshold, below=True):
    passed = residual < threshold if below else residual > threshold
    return (identity, n, residual, threshold, 'pass' if passed else 'fail')


def cmd_oracle(config:Config, out):
    section = config['oracle']
    rng = np.random.default_rng(config['seed'])
    length = section['signal_length']
    signals = [rng.standard_normal(length) for _ in range(section['signals'])]
    rows = []
    spectrum = [polyphase_spectrum_check(x) for x in signals]
    rows.append(_threshold_row('polyphase_even', length, max(r.even for r in spectrum), section['spectrum_threshold']))
    rows.append(_threshold_row('polyphase_odd', length, max(r.odd for r in spectrum), section['spectrum_threshold']))
    rows.append(_threshold_row('antialiased_sum', length, max(antialiased_sum_check(x) for x in signals), section['polynomial_threshold']))
    for m in section['degrees']:
        residual = max(polynomial_sum_check(x, m) for x in signals)
        rows.append(_threshold_row(f'power_{m}', length, residual, section['polynomial_threshold']))
    for k in range(section['polynomials']):
        degree = int(rng.integers(2, 5))
        activation = Activation.polynomial(*rng.standard_normal(degree + 1))
        residual = max(polynomial_sum_check(x, activation) for x in signals)
        rows.append(_threshold_row(f'polynomial_{k}_degree_{degree}', length, residual, section['polynomial_threshold']))
    rows.append(_threshold_row('relu_gap', length, relu_sum_gap(cosine_signal(length)), section['relu_gap_minimum'], below=False))
    for n in section['lengths']:
        try:
            sums = cosine_relu_sums(n)
        except ImproperSignalLength as e:
            logger.info(f'Skipping closed forms for N={n}: {e}')
            rows.append(('cosine_relu_sum0', n, '', section['closed_form_threshold'], 'skipped'))
            rows.append(('cosine_relu_sum1', n, '', section['closed_form_threshold'], 'skipped'))
            continue
        rows.append(_threshold_row('cosine_relu_sum0', n, sums.residual0, section['closed_form_threshold']))
        rows.append(_threshold_row('cosine_relu_sum1', n, sums.residual1, section['closed_form_threshold']))
    write_csv(out, 'oracle.csv', ORACLE_HEADER, rows)
    return _report([f'{row[0]} (N={row[1]}) residual {row[2]}' for row in rows if row[4] == 'fail'])


def cmd_train(config:Config, out):
    section = config['train']
    sampler = ShiftSampler(SamplerKind.CIRCULAR if config['network']['pad_const'] == PadMode.CIRCULAR else SamplerKind.ZEROPAD,
                           section['max_shift'], section['pad'], config['seed'])
    summary = []
    violations = []
    for seed in section['seeds']:
        data = generate(config.dataset_spec(seed=seed))
        save_dataset(data, os.path.join(out, 'datasets', f'seed{seed}'))
        for kind in section['kinds_const']:
            net, log = train(build(config.network_spec(kind, seed=seed)), data, config.train_config(seed))
            save_network(net, os.path.join(out, 'networks', f'{kind.value}_seed{seed}'))
            write_csv(out, f'train_{kind.value}_seed{seed}.csv', TRAIN_HEADER,
                      [(r.epoch, r.train_loss, r.val_acc, r.val_consistency) for r in log])
            test_acc = accuracy(net, data.test.images, data.test.labels)
            test_consistency = consistency(net, data.test.images, sampler, workers=config['workers']).fraction
            summary.append((kind.value, seed, test_acc, test_consistency))
            if asserts_invariance(kind, config, sampler.kind):
                broken = [r.epoch for r in log if r.val_consistency != 1.0] + ([] if test_consistency == 1.0 else ['test'])
                if broken:
                    violations.append(f'{kind.value} seed {seed} lost consistency at {broken}')
    write_csv(out, 'train.csv', TRAIN_SUMMARY_HEADER, summary)
    return _report(violations)


def cmd_stability(config:Config, out):
    section = config['stability']
    x = evaluation_images(config, 1)
    rows = []
    violations = []
    for kind in section['kinds_const']:
        net = build(config.network_spec(kind, blur_size=section['blur_size'], precision=section['precision']))
        report = stability(net, x, tuple(section['shift']))
        for tap, entry in report.entries.items():
            jy, jx = entry.shift
            rows.append((kind.value, tap, 'all', entry.max_delta, entry.mean_delta, jx, jy))
            channel = entry.max_energy_channel
            rows.append((kind.value, tap, channel, entry.channel_max(channel), entry.channel_mean(channel), jx, jy))
        logger.info(f'{kind.value}: max shift-compensated error {report.max_delta:.3e}')
        if asserts_invariance(kind, config) and report.max_delta >= section['threshold']:
            violations.append(f'{kind.value} max delta {report.max_delta:.3e}')
    write_csv(out, 'stability.csv', STABILITY_HEADER, rows)
    return _report(violations)


def _ood_models(config:Config):
    section = config['ood']
    models = [(kind.value, kind, Augmentation.NONE) for kind in section['kinds_const']]
    if section['augmented']:
        models.append(('baseline_da', DownsampleKind.BASELINE, Augmentation.SHIFT))
    return models


def cmd_ood(config:Config, out):
    """Consistency of trained nets on erased and flipped test images; perturbations come before the shift pairs."""
    section = config['ood']
    data = generate(config.dataset_spec())
    images = data.test.images[:section['images']]
    labels = data.test.labels[:section['images']]
    sampler = ShiftSampler(SamplerKind.CIRCULAR, config['train']['max_shift'], config['train']['pad'], config['seed'])
    perturbations = [('clean', 0, images)]
    perturbations += [('erase', patch, random_erase(images, patch, config['seed'])) for patch in section['patches']]
    if section['flip']:
        perturbations.append(('flip', 0, vertical_flip(images)))
    rows = []
    violations = []
    for name, kind, augmentation in _ood_models(config):
        cfg = replace(config.train_config(epochs=section["epochs"]), augmentation=augmentation)
        net, _ = train(build(config.network_spec(kind)), data, cfg)
        for perturbation, level, x in perturbations:
            fraction = consistency(net, x, sampler, section['trials'], workers=config['workers']).fraction
            rows.append((name, perturbation, level, fraction, accuracy(net, x, labels)))
            if asserts_invariance(kind, config) and fraction != 1.0:
                violations.append(f'{name} consistency {fraction} on {perturbation} {level}')
    write_csv(out, 'ood.csv', OOD_HEADER, rows)
    return _report(violations)


def cmd_criteria(config:Config, out):
    section = config['criteria']
    invariance = config['invariance']
    images = evaluation_images(config, section['images'], invariance['family_const'])
    sampler = ShiftSampler(SamplerKind.CIRCULAR, invariance['max_shift'], invariance['pad'], config['seed'])
    rows = []
    violations = []
    for criterion in section['criteria_const']:
        net = untrained_net(config, images, DownsampleKind.APS, criterion=criterion)
        report = consistency(net, images, sampler, section['trials'], workers=config['workers'])
        fraction = report.fraction
        violations += _label_violations(criterion.name, report)
        rows.append((criterion.name, section['trials'], fraction))
        if asserts_invariance(DownsampleKind.APS, config) and fraction != 1.0:
            violations.append(f'{criterion.name} consistency {fraction}')
    write_csv(out, 'criteria.csv', CRITERIA_HEADER, rows)
    return _report(violations)


def cmd_oddsize(config:Config, out):
    section = config['oddsize']
    images = evaluation_images(config, section['images'], size=section['size'])
    sampler = ShiftSampler(SamplerKind.CIRCULAR, config['invariance']['max_shift'], config['invariance']['pad'], config['seed'])
    rows = []
    fractions = {}
    violations = []
    for kind in section['kinds_const']:
        net = untrained_net(config, images, kind, size=section['size'])
        report = consistency(net, images, sampler, section['trials'], workers=config['workers'])
        fractions[kind] = report.fraction
        violations += _label_violations(kind.value, report)
        rows.append((kind.value, section['size'], section['trials'], fractions[kind]))
    write_csv(out, 'oddsize.csv', ODDSIZE_HEADER, rows)
    if DownsampleKind.APS in fractions and DownsampleKind.BASELINE in fractions:
        if fractions[DownsampleKind.APS] < fractions[DownsampleKind.BASELINE]:
            violations.append(f'APS consistency {fractions[DownsampleKind.APS]} below baseline {fractions[DownsampleKind.BASELINE]}')
    return _report(violations)


def cmd_bench(config:Config, out):
    section = config['bench']
    kind_a, kind_b = section['kinds_const']
    net_a = build(config.network_spec(kind_a, size=section['size']))
    net_b = build(config.network_spec(kind_b, size=section['size']))
    shape = (section['batch'], config['dataset']['channels'], section['size'], section['size'])
    record = bench_forward(net_a, net_b, shape, section['repetitions'], section['warmup'], config['seed'])
    write_csv(out, 'bench.csv', BENCH_HEADER, [(
        kind_a.value, kind_b.value, record.repetitions, record.median_a, record.mad_a,
        record.median_b, record.mad_b, record.ratio, record.rss_bytes,
    )])
    if record.ratio > section['max_ratio']:
        return _report([f'forward time ratio {record.ratio:.3f} exceeds {section["max_ratio"]}'])
    return EXIT_OK


def _report(violations):
    for violation in violations:
        logger.error(f'Check failed: {violation}')
    return EXIT_VIOLATION if violations else EXIT_OK


COMMAND_TABLE = {
    'invariance': cmd_invariance,
    'oracle': cmd_oracle,
    'train': cmd_train,
    'stability': cmd_stability,
    'ood': cmd_ood,
    'criteria': cmd_criteria,
    'oddsize': cmd_oddsize,
    'bench': cmd_bench,
}


def main(argv=None):
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return e.code
    setup_logger(args.debug)
    try:
        config = Config(args.config)
        config.override(args.seed, args.precision)
        os.makedirs(args.out, exist_ok=True)
        config.save(args.out)
    except ConfigError as e:
        logger.error(e)
        return EXIT_USAGE
    except OSError as e:
        logger.error(f'Cannot write to output directory {args.out}: {e}')
        return EXIT_USAGE
    logger.info(f'Running {args.command} with seed {config["seed"]} at precision {config["precision"]}')
    try:
        code = COMMAND_TABLE[args.command](config, args.out)
    except ConfigError as e:
        logger.error(e)
        return EXIT_USAGE
    except PolyshiftError as e:
        logger.error(e)
        return EXIT_VIOLATION
    logger.info(f'{args.command} finished with exit code {code}')
    return code


if __name__ == '__main__':
    sys.exit(main())
