import copy
import os
from logging import getLogger

import yaml

from . import PolyshiftError
from .experiments import Augmentation, DatasetSpec, Family, TrainConfig
from .network import DownsampleKind, toy_resnet
from .polyphase import ImproperCriterion, SelectionCriterion
from .tensor import Activation, ImproperActivation, ImproperPrecision, PadMode, string_to_dtype

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(__file__), 'config.yaml')
USED_CONFIG_NAME = 'config.used.yaml'
CONSTANT_SUFFIX = '_const'
ALL_KINDS = ['baseline', 'lpf', 'aps', 'aps_lpf']
MIN_DATASET_PER_CLASS = 10

DEFAULT_SEED = 0
DEFAULT_PRECISION = 'f32'
DEFAULT_WORKERS = 1
DEFAULT_NETWORK_CHANNELS = [8, 16, 32]
DEFAULT_NETWORK_KERNEL = 3
DEFAULT_NETWORK_ACTIVATION = 'relu'
DEFAULT_NETWORK_PAD = 'circular'
DEFAULT_NETWORK_CRITERION = 'argmax_l2'
DEFAULT_NETWORK_BLUR_SIZE = 3
DEFAULT_DATASET_FAMILY = 'shapes'
DEFAULT_DATASET_CLASSES = 4
DEFAULT_DATASET_PER_CLASS = 100
DEFAULT_DATASET_SIZE = 32
DEFAULT_DATASET_CHANNELS = 1
DEFAULT_DATASET_NOISE = 0.05
DEFAULT_TRAIN_EPOCHS = 30
DEFAULT_TRAIN_BATCH_SIZE = 32
DEFAULT_TRAIN_LEARNING_RATE = 0.05
DEFAULT_TRAIN_MOMENTUM = 0.9
DEFAULT_TRAIN_WEIGHT_DECAY = 5e-4
DEFAULT_TRAIN_DECAY_FACTOR = 0.1
DEFAULT_TRAIN_DECAY_PERIOD = 20
DEFAULT_TRAIN_AUGMENTATION = 'none'
DEFAULT_TRAIN_MAX_SHIFT = 3
DEFAULT_TRAIN_PAD = 3
DEFAULT_TRAIN_KINDS = ['baseline', 'aps']
DEFAULT_TRAIN_SEEDS = [0, 1, 2]
DEFAULT_INVARIANCE_KINDS = ALL_KINDS
DEFAULT_INVARIANCE_FAMILY = 'checkerboard'
DEFAULT_INVARIANCE_IMAGES = 200
DEFAULT_INVARIANCE_TRIALS = 5
DEFAULT_INVARIANCE_SAMPLER = 'circular'
DEFAULT_INVARIANCE_MAX_SHIFT = 3
DEFAULT_INVARIANCE_PAD = 3
DEFAULT_INVARIANCE_LOGIT_TOLERANCE = 1e-4
DEFAULT_ORACLE_LENGTHS = [16, 32, 64, 128]
DEFAULT_ORACLE_SIGNALS = 100
DEFAULT_ORACLE_SIGNAL_LENGTH = 64
DEFAULT_ORACLE_DEGREES = [2, 3, 4]
DEFAULT_ORACLE_POLYNOMIALS = 3
DEFAULT_ORACLE_SPECTRUM_THRESHOLD = 1e-10
DEFAULT_ORACLE_POLYNOMIAL_THRESHOLD = 1e-9
DEFAULT_ORACLE_CLOSED_FORM_THRESHOLD = 1e-10
DEFAULT_ORACLE_RELU_GAP_MINIMUM = 1e-3
DEFAULT_STABILITY_KINDS = ['aps', 'lpf']
DEFAULT_STABILITY_BLUR_SIZE = 5
DEFAULT_STABILITY_SHIFT = [1, 1]
DEFAULT_STABILITY_THRESHOLD = 1e-8
DEFAULT_STABILITY_PRECISION = 'f64'
DEFAULT_OOD_KINDS = ALL_KINDS
DEFAULT_OOD_AUGMENTED = True
DEFAULT_OOD_PATCHES = [2, 4, 6, 8]
DEFAULT_OOD_FLIP = True
DEFAULT_OOD_IMAGES = 100
DEFAULT_OOD_TRIALS = 1
DEFAULT_OOD_EPOCHS = 2
DEFAULT_CRITERIA_CRITERIA = ['argmax_l1', 'argmax_l2', 'argmax_linf', 'argmin_l1', 'argmin_l2']
DEFAULT_CRITERIA_IMAGES = 100
DEFAULT_CRITERIA_TRIALS = 5
DEFAULT_ODDSIZE_SIZE = 31
DEFAULT_ODDSIZE_KINDS = ['baseline', 'aps']
DEFAULT_ODDSIZE_IMAGES = 100
DEFAULT_ODDSIZE_TRIALS = 5
DEFAULT_BENCH_KINDS = ['aps', 'baseline']
DEFAULT_BENCH_SIZE = 64
DEFAULT_BENCH_BATCH = 8
DEFAULT_BENCH_REPETITIONS = 50
DEFAULT_BENCH_WARMUP = 10
DEFAULT_BENCH_MAX_RATIO = 3.0

TOP_LEVEL_KEYS = ('seed', 'precision', 'workers')


class Config(dict):

    logger = getLogger('polyshift.config')

    def __init__(self, path=None, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.path = path
        self.load_defaults()
        if path is not None:
            if not os.path.isfile(path):
                raise ConfigFileMissing(f'No config file at {path}')
            self.load()
        self.init_constants()
        self.logger.debug(f'Config from {path or "defaults"} has been initialized')

    def load_defaults(self):
        self.setdefault('seed', DEFAULT_SEED)
        self.setdefault('precision', DEFAULT_PRECISION)
        self.setdefault('workers', DEFAULT_WORKERS)
        network_configs = {
            'channels': list(DEFAULT_NETWORK_CHANNELS),
            'kernel': DEFAULT_NETWORK_KERNEL,
            'activation': DEFAULT_NETWORK_ACTIVATION,
            'pad': DEFAULT_NETWORK_PAD,
            'criterion': DEFAULT_NETWORK_CRITERION,
            'blur_size': DEFAULT_NETWORK_BLUR_SIZE,
        }
        self.setdefault('network', network_configs)
        dataset_configs = {
            'family': DEFAULT_DATASET_FAMILY,
            'classes': DEFAULT_DATASET_CLASSES,
            'per_class': DEFAULT_DATASET_PER_CLASS,
            'size': DEFAULT_DATASET_SIZE,
            'channels': DEFAULT_DATASET_CHANNELS,
            'noise': DEFAULT_DATASET_NOISE,
        }
        self.setdefault('dataset', dataset_configs)
        train_configs = {
            'epochs': DEFAULT_TRAIN_EPOCHS,
            'batch_size': DEFAULT_TRAIN_BATCH_SIZE,
            'learning_rate': DEFAULT_TRAIN_LEARNING_RATE,
            'momentum': DEFAULT_TRAIN_MOMENTUM,
            'weight_decay': DEFAULT_TRAIN_WEIGHT_DECAY,
            'decay_factor': DEFAULT_TRAIN_DECAY_FACTOR,
            'decay_period': DEFAULT_TRAIN_DECAY_PERIOD,
            'augmentation': DEFAULT_TRAIN_AUGMENTATION,
            'max_shift': DEFAULT_TRAIN_MAX_SHIFT,
            'pad': DEFAULT_TRAIN_PAD,
            'kinds': list(DEFAULT_TRAIN_KINDS),
            'seeds': list(DEFAULT_TRAIN_SEEDS),
        }
        self.setdefault('train', train_configs)
        invariance_configs = {
            'kinds': list(DEFAULT_INVARIANCE_KINDS),
            'family': DEFAULT_INVARIANCE_FAMILY,
            'images': DEFAULT_INVARIANCE_IMAGES,
            'trials': DEFAULT_INVARIANCE_TRIALS,
            'sampler': DEFAULT_INVARIANCE_SAMPLER,
            'max_shift': DEFAULT_INVARIANCE_MAX_SHIFT,
            'pad': DEFAULT_INVARIANCE_PAD,
            'logit_tolerance': DEFAULT_INVARIANCE_LOGIT_TOLERANCE,
        }
        self.setdefault('invariance', invariance_configs)
        oracle_configs = {
            'lengths': list(DEFAULT_ORACLE_LENGTHS),
            'signals': DEFAULT_ORACLE_SIGNALS,
            'signal_length': DEFAULT_ORACLE_SIGNAL_LENGTH,
            'degrees': list(DEFAULT_ORACLE_DEGREES),
            'polynomials': DEFAULT_ORACLE_POLYNOMIALS,
            'spectrum_threshold': DEFAULT_ORACLE_SPECTRUM_THRESHOLD,
            'polynomial_threshold': DEFAULT_ORACLE_POLYNOMIAL_THRESHOLD,
            'closed_form_threshold': DEFAULT_ORACLE_CLOSED_FORM_THRESHOLD,
            'relu_gap_minimum': DEFAULT_ORACLE_RELU_GAP_MINIMUM,
        }
        self.setdefault('oracle', oracle_configs)
        stability_configs = {
            'kinds': list(DEFAULT_STABILITY_KINDS),
            'blur_size': DEFAULT_STABILITY_BLUR_SIZE,
            'shift': list(DEFAULT_STABILITY_SHIFT),
            'threshold': DEFAULT_STABILITY_THRESHOLD,
            'precision': DEFAULT_STABILITY_PRECISION,
        }
        self.setdefault('stability', stability_configs)
        ood_configs = {
            'kinds': list(DEFAULT_OOD_KINDS),
            'augmented': DEFAULT_OOD_AUGMENTED,
            'patches': list(DEFAULT_OOD_PATCHES),
            'flip': DEFAULT_OOD_FLIP,
            'images': DEFAULT_OOD_IMAGES,
            'trials': DEFAULT_OOD_TRIALS,
            'epochs': DEFAULT_OOD_EPOCHS,
        }
        self.setdefault('ood', ood_configs)
        criteria_configs = {
            'criteria': list(DEFAULT_CRITERIA_CRITERIA),
            'images': DEFAULT_CRITERIA_IMAGES,
            'trials': DEFAULT_CRITERIA_TRIALS,
        }
        self.setdefault('criteria', criteria_configs)
        oddsize_configs = {
            'size': DEFAULT_ODDSIZE_SIZE,
            'kinds': list(DEFAULT_ODDSIZE_KINDS),
            'images': DEFAULT_ODDSIZE_IMAGES,
            'trials': DEFAULT_ODDSIZE_TRIALS,
        }
        self.setdefault('oddsize', oddsize_configs)
        bench_configs = {
            'kinds': list(DEFAULT_BENCH_KINDS),
            'size': DEFAULT_BENCH_SIZE,
            'batch': DEFAULT_BENCH_BATCH,
            'repetitions': DEFAULT_BENCH_REPETITIONS,
            'warmup': DEFAULT_BENCH_WARMUP,
            'max_ratio': DEFAULT_BENCH_MAX_RATIO,
        }
        self.setdefault('bench', bench_configs)

    def load(self):
        with open(self.path, 'r') as stream:
            try:
                contents = yaml.safe_load(stream) or {}
            except yaml.YAMLError as e:
                raise ImproperConfigFile(f'{self.path} is not valid YAML: {e}')
        if not isinstance(contents, dict):
            raise ImproperConfigFile(f'{self.path} must hold a mapping of sections')
        self.merge(contents)
        self.logger.debug(f'Loaded config from {self.path}')

    def merge(self, contents:dict):
        """Overlay ``contents`` section by section; unknown sections or keys are rejected."""
        for key, value in contents.items():
            if key not in self:
                raise ImproperConfigKey(f'Unknown config section {key!r}')
            if key in TOP_LEVEL_KEYS:
                self[key] = value
                continue
            if not isinstance(value, dict):
                raise ImproperConfigFile(f'Config section {key!r} must be a mapping')
            unknown = set(value) - set(self[key])
            if unknown:
                raise ImproperConfigKey(f'Unknown keys {sorted(unknown)} in config section {key!r}')
            self[key].update(value)

    def override(self, seed=None, precision=None):
        if seed is not None:
            self['seed'] = int(seed)
        if precision is not None:
            self['precision'] = precision
        self.init_constants()

    def init_constants(self):
        self['precision_const'] = string_to_precision(self['precision'])
        string_to_precision(self['stability']['precision'])
        self['network']['pad_const'] = string_to_padmode(self['network']['pad'])
        self['network']['activation_const'] = string_to_activation(self['network']['activation'])
        self['network']['criterion_const'] = string_to_criterion(self['network']['criterion'])
        self['dataset']['family_const'] = string_to_family(self['dataset']['family'])
        self['train']['augmentation_const'] = string_to_augmentation(self['train']['augmentation'])
        for section in ('train', 'invariance', 'stability', 'ood', 'oddsize', 'bench'):
            self[section]['kinds_const'] = [string_to_kind(kind) for kind in self[section]['kinds']]
        self['invariance']['family_const'] = string_to_family(self['invariance']['family'])
        self['criteria']['criteria_const'] = [string_to_criterion(c) for c in self['criteria']['criteria']]
        if len(self['bench']['kinds']) != 2:
            raise ImproperConfigValue(f'bench.kinds names exactly two networks, got {self["bench"]["kinds"]}')
        if self['invariance']['sampler'] not in ('circular', 'zeropad'):
            raise ImproperConfigValue(f'Unknown sampler {self["invariance"]["sampler"]!r}')
        if self['dataset']['per_class'] < MIN_DATASET_PER_CLASS:
            raise ImproperConfigValue(f'dataset.per_class must be at least {MIN_DATASET_PER_CLASS} , got {self["dataset"]["per_class"]}')
        self.logger.debug('Config constants have been initialized')

    def plain(self) -> dict:
        def strip(d):
            return {k: strip(v) if isinstance(v, dict) else copy.deepcopy(v) for k, v in d.items() if not k.endswith(CONSTANT_SUFFIX)}
        return strip(self)

    def save(self, directory):
        path = os.path.join(directory, USED_CONFIG_NAME)
        with open(path, 'w') as stream:
            stream.write(yaml.safe_dump(self.plain()))
        self.logger.debug(f'Saved config to {path}')
        return path

    def dataset_spec(self, **overrides) -> DatasetSpec:
        section = self['dataset']
        values = {
            'classes': section['classes'],
            'per_class': section['per_class'],
            'size': section['size'],
            'family': section['family_const'],
            'channels': section['channels'],
            'noise': section['noise'],
            'seed': self['seed'],
        }
        values.update(overrides)
        return DatasetSpec(**values)

    def network_spec(self, kind, size=None, seed=None, blur_size=None, criterion=None, precision=None):
        section = self['network']
        return toy_resnet(
            kind,
            tuple(section['channels']),
            self['dataset']['channels'],
            self['dataset']['size'] if size is None else size,
            self['dataset']['classes'],
            section['criterion_const'] if criterion is None else criterion,
            section['blur_size'] if blur_size is None else blur_size,
            section['activation_const'],
            section['pad_const'],
            self['precision'] if precision is None else precision,
            self['seed'] if seed is None else seed,
            section['kernel'],
        )

    def train_config(self, seed=None, epochs=None) -> TrainConfig:
        section = self['train']
        return TrainConfig(
            section['epochs'] if epochs is None else epochs,
            section['batch_size'],
            section['learning_rate'],
            section['momentum'],
            section['weight_decay'],
            section['decay_factor'],
            section['decay_period'],
            section['augmentation_const'],
            section['max_shift'],
            section['pad'],
            self['seed'] if seed is None else seed,
        )


def string_to_precision(precision:str):
    try:
        return string_to_dtype(precision)
    except ImproperPrecision as e:
        raise ImproperConfigValue(str(e))

def string_to_padmode(pad:str) -> PadMode:
    try:
        return PadMode(str(pad).lower())
    except ValueError:
        raise ImproperConfigValue(f'Unknown pad mode {pad!r}, expected one of {[m.value for m in PadMode]}')

def string_to_kind(kind:str) -> DownsampleKind:
    try:
        return DownsampleKind(str(kind).lower())
    except ValueError:
        raise ImproperConfigValue(f'Unknown downsample kind {kind!r}, expected one of {[k.value for k in DownsampleKind]}')

def string_to_criterion(criterion:str) -> SelectionCriterion:
    try:
        return SelectionCriterion.parse(criterion)
    except ImproperCriterion as e:
        raise ImproperConfigValue(str(e))

def string_to_family(family:str) -> Family:
    try:
        return Family(str(family).lower())
    except ValueError:
        raise ImproperConfigValue(f'Unknown dataset family {family!r}, expected one of {[f.value for f in Family]}')

def string_to_augmentation(augmentation:str) -> Augmentation:
    try:
        return Augmentation(str(augmentation).lower())
    except ValueError:
        raise ImproperConfigValue(f'Unknown augmentation {augmentation!r}, expected one of {[a.value for a in Augmentation]}')

def string_to_activation(activation) -> Activation:
    """'relu', 'identity', or a list of polynomial coefficients a_0..a_m."""
    try:
        if isinstance(activation, (list, tuple)):
            return Activation.polynomial(*activation)
        return Activation(str(activation).lower())
    except ImproperActivation as e:
        raise ImproperConfigValue(str(e))


class ConfigError(PolyshiftError):
    pass

class ConfigFileMissing(ConfigError):
    pass

class ImproperConfigFile(ConfigError):
    pass

class ImproperConfigKey(ConfigError):
    pass

class ImproperConfigValue(ConfigError):
    pass
