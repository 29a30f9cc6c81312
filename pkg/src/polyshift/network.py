"""Declarative residual CNNs with pluggable downsampling, their executor and reverse pass.

Every strided operation is a ``Downsample`` entry: convolutions and dense max
pooling always run at stride 1. Inside a ``ResidualBlock`` the main branch
picks the polyphase index and the shortcut samples the component with that
same index, so both branches stay aligned for any input shift.
"""
import os
from dataclasses import dataclass, replace
from enum import Enum
from logging import getLogger
from typing import Optional, Union

import numpy as np
import yaml

from . import PolyshiftError
from .antialias import ImproperBlurSize, aps_blurpool, binomial_kernel, blur, blur_vjp, blurpool
from .polyphase import (ApsIndex, SelectionCriterion, aps_backward, aps_downsample,
                        conventional_downsample, downsample_with_index)
from .tensor import (Activation, PadMode, ShapeMismatch, activate, activate_vjp, as_tensor, conv2d,
                     conv2d_vjp, fully_connected, fully_connected_vjp, global_average_pool,
                     global_average_pool_vjp, load_tensor, max_pool_dense, max_pool_dense_vjp,
                     save_tensor, softmax_cross_entropy, string_to_dtype)

SPEC_FILE = 'spec.yaml'
MANIFEST_FILE = 'manifest.yaml'
PARAMS_DIR = 'params'


class DownsampleKind(Enum):
    BASELINE = 'baseline'
    LPF = 'lpf'
    APS = 'aps'
    APS_LPF = 'aps_lpf'

    @property
    def blurred(self):
        return self in (DownsampleKind.LPF, DownsampleKind.APS_LPF)

    @property
    def adaptive(self):
        return self in (DownsampleKind.APS, DownsampleKind.APS_LPF)


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.stride != 1:
            raise ImproperLayer(f'Conv layers run at stride 1, got stride {self.stride}; use a Downsample entry')
        if self.kernel < 1 or self.out_channels < 1:
            raise ImproperLayer(f'Conv needs positive kernel and channels, got {self}')


@dataclass(frozen=True)
class Act:
    activation: Activation = Activation()


@dataclass(frozen=True)
class MaxPoolDense:
    kernel: int = 2


@dataclass(frozen=True)
class Downsample:
    kind: DownsampleKind = DownsampleKind.APS
    stride: int = 2
    criterion: SelectionCriterion = SelectionCriterion()
    blur_size: int = 3


@dataclass(frozen=True)
class ResidualBlock:
    out_channels: int
    inner: tuple = ()
    downsample: Optional[Downsample] = None


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class FullyConnected:
    classes: int


LayerSpec = Union[Conv, Act, MaxPoolDense, Downsample, ResidualBlock, GlobalAvgPool, FullyConnected]

LAYER_LABELS = {
    Conv: 'conv',
    Act: 'act',
    MaxPoolDense: 'maxpool',
    Downsample: 'down',
    ResidualBlock: 'block',
    GlobalAvgPool: 'gap',
    FullyConnected: 'fc',
}
INNER_LAYERS = (Conv, Act, MaxPoolDense)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    precision: str = 'f32'
    pad: PadMode = PadMode.CIRCULAR
    seed: int = 0


def layer_name(layer, index:int) -> str:
    return f'{LAYER_LABELS[type(layer)]}{index}'


class Network():

    logger = getLogger('polyshift.network')

    def __init__(self, spec:NetworkSpec, params:dict, names:list, shapes:dict):
        self.spec = spec
        self.params = params
        self.names = names
        self.shapes = shapes

    @property
    def dtype(self):
        return string_to_dtype(self.spec.precision)

    @property
    def tap_names(self):
        return list(self.shapes)

    @property
    def classes(self):
        return self.shapes[self.names[-1]][0]

    def layer(self, name:str):
        try:
            return self.spec.layers[self.names.index(name)]
        except ValueError:
            raise UnknownTap(f'Network has no layer named {name!r}')

    def copy(self):
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()}, list(self.names), dict(self.shapes))


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _check_downsample(ds:Downsample, shape, name):
    C, H, W = shape
    if int(ds.stride) != ds.stride or ds.stride < 1 or ds.stride > H or ds.stride > W:
        raise ImproperNetworkSpec(f'{name}: stride {ds.stride} does not fit spatial extent {(H, W)}')
    if ds.kind.blurred:
        try:
            binomial_kernel(ds.blur_size)
        except ImproperBlurSize as e:
            raise ImproperNetworkSpec(f'{name}: {e}')
    return C, -(-H // ds.stride), -(-W // ds.stride)


def _init_layer(layer, name, shape, rng, dtype, params, shapes):
    if len(shape) != 3:
        raise ImproperNetworkSpec(f'{name}: no layer may follow the fully connected head')
    C, H, W = shape
    match layer:
        case Conv(out_channels=out, kernel=k, bias=bias):
            params[f'{name}.weight'] = _he_normal(rng, (out, C, k, k), C * k * k, dtype)
            if bias:
                params[f'{name}.bias'] = np.zeros(out, dtype=dtype)
            shape = (out, H, W)
        case Act():
            pass
        case MaxPoolDense(kernel=k):
            if k < 1 or k > H or k > W:
                raise ImproperNetworkSpec(f'{name}: pooling window {k} does not fit spatial extent {(H, W)}')
        case Downsample():
            shape = _check_downsample(layer, shape, name)
        case ResidualBlock(out_channels=out, inner=inner, downsample=ds):
            inner_shape = shape
            for k, inner_layer in enumerate(inner):
                if not isinstance(inner_layer, INNER_LAYERS):
                    raise ImproperNetworkSpec(f'{name}: residual branches hold only conv, activation and pooling layers, got {inner_layer}')
                inner_name = f'{name}.{layer_name(inner_layer, k)}'
                inner_shape = _init_layer(inner_layer, inner_name, inner_shape, rng, dtype, params, shapes)
            if inner_shape[0] != out:
                raise ImproperNetworkSpec(f'{name}: main branch ends with {inner_shape[0]} channels, block declares {out}')
            if C != out:
                params[f'{name}.proj.weight'] = _he_normal(rng, (out, C, 1, 1), C, dtype)
            shape = (out, H, W) if ds is None else _check_downsample(ds, (out, H, W), name)
        case GlobalAvgPool():
            shape = (C, 1, 1)
        case FullyConnected(classes=classes):
            features = C * H * W
            params[f'{name}.weight'] = _he_normal(rng, (classes, features), features, dtype)
            params[f'{name}.bias'] = np.zeros(classes, dtype=dtype)
            shape = (classes,)
        case _:
            raise ImproperNetworkSpec(f'{name}: unknown layer {layer!r}')
    shapes[name] = shape
    return shape


def build(spec:NetworkSpec) -> Network:
    """Instantiate parameters: He fan-in normal weights, zero biases, drawn in layer order from ``spec.seed``."""
    dtype = string_to_dtype(spec.precision)
    if len(spec.input_shape) != 3:
        raise ImproperNetworkSpec(f'Input shape must be (C, H, W), got {spec.input_shape}')
    rng = np.random.default_rng(spec.seed)
    params = {}
    shapes = {'input': tuple(spec.input_shape)}
    names = []
    shape = tuple(spec.input_shape)
    for index, layer in enumerate(spec.layers):
        name = layer_name(layer, index)
        shape = _init_layer(layer, name, shape, rng, dtype, params, shapes)
        names.append(name)
    if len(shape) != 1:
        raise ImproperNetworkSpec(f'Network must end with a fully connected head, last layer yields shape {shape}')
    Network.logger.debug(f'Built network with {len(names)} layers and {sum(p.size for p in params.values())} parameters')
    return Network(spec, params, names, shapes)


def _downsample(x, ds:Downsample, pad_mode):
    N = x.shape[0]
    match ds.kind:
        case DownsampleKind.BASELINE:
            return conventional_downsample(x, ds.stride), (ApsIndex(0, 0),) * N
        case DownsampleKind.LPF:
            return blurpool(x, ds.blur_size, ds.stride, pad_mode), (ApsIndex(0, 0),) * N
        case DownsampleKind.APS:
            return aps_downsample(x, ds.stride, ds.criterion)
        case DownsampleKind.APS_LPF:
            return aps_blurpool(x, ds.blur_size, ds.stride, ds.criterion, pad_mode)


def _shortcut_downsample(x, ds:Downsample, pad_mode, idx):
    if ds.kind.blurred:
        x = blur(x, binomial_kernel(ds.blur_size), pad_mode)
    if ds.kind.adaptive:
        return downsample_with_index(x, ds.stride, idx)
    return conventional_downsample(x, ds.stride)


def _downsample_vjp(g, ds:Downsample, pad_mode, in_shape, idx):
    dx = aps_backward(g, idx, ds.stride, in_shape)
    if ds.kind.blurred:
        dx = blur_vjp(dx, binomial_kernel(ds.blur_size), pad_mode)
    return dx


def _residual_forward(net, name, block:ResidualBlock, x, taps):
    pad_mode = net.spec.pad
    u = x
    inner_tape = []
    for k, layer in enumerate(block.inner):
        inner_name = f'{name}.{layer_name(layer, k)}'
        v, cache = _layer_forward(net, inner_name, layer, u, taps)
        inner_tape.append((inner_name, layer, cache))
        u = v
    shortcut = x
    projection = f'{name}.proj.weight'
    if projection in net.params:
        shortcut = conv2d(x, net.params[projection], None, 1, pad_mode)
    idx = None
    main = u
    if block.downsample is not None:
        main, idx = _downsample(u, block.downsample, pad_mode)
        shortcut = _shortcut_downsample(shortcut, block.downsample, pad_mode, idx)
    return main + shortcut, (x, u.shape, inner_tape, idx)


def _residual_backward(net, name, block:ResidualBlock, cache, g, grads):
    x, u_shape, inner_tape, idx = cache
    pad_mode = net.spec.pad
    if block.downsample is not None:
        # both branches were sampled with the same index and blur
        g = _downsample_vjp(g, block.downsample, pad_mode, u_shape, idx)
    g_main = g
    for inner_name, layer, inner_cache in reversed(inner_tape):
        g_main = _layer_backward(net, inner_name, layer, inner_cache, g_main, grads)
    projection = f'{name}.proj.weight'
    if projection in net.params:
        g_short, grads[projection], _ = conv2d_vjp(x, net.params[projection], g, 1, pad_mode)
    else:
        g_short = g
    return g_main + g_short


def _layer_forward(net, name, layer, x, taps):
    pad_mode = net.spec.pad
    params = net.params
    match layer:
        case Conv():
            y = conv2d(x, params[f'{name}.weight'], params.get(f'{name}.bias'), 1, pad_mode)
            cache = x
        case Act(activation=a):
            y = activate(x, a)
            cache = x
        case MaxPoolDense(kernel=k):
            y = max_pool_dense(x, k, pad_mode)
            cache = x
        case Downsample():
            y, idx = _downsample(x, layer, pad_mode)
            cache = (x.shape, idx)
        case ResidualBlock():
            y, cache = _residual_forward(net, name, layer, x, taps)
        case GlobalAvgPool():
            y = global_average_pool(x)
            cache = x.shape
        case FullyConnected():
            y = fully_connected(x, params[f'{name}.weight'], params[f'{name}.bias'])
            cache = x
    if taps is not None:
        taps[name] = y
    return y, cache


def _layer_backward(net, name, layer, cache, g, grads):
    pad_mode = net.spec.pad
    params = net.params
    match layer:
        case Conv():
            dx, grads[f'{name}.weight'], db = conv2d_vjp(cache, params[f'{name}.weight'], g, 1, pad_mode)
            if layer.bias:
                grads[f'{name}.bias'] = db
            return dx
        case Act(activation=a):
            return activate_vjp(cache, a, g)
        case MaxPoolDense(kernel=k):
            return max_pool_dense_vjp(cache, k, g, pad_mode)
        case Downsample():
            in_shape, idx = cache
            return _downsample_vjp(g, layer, pad_mode, in_shape, idx)
        case ResidualBlock():
            return _residual_backward(net, name, layer, cache, g, grads)
        case GlobalAvgPool():
            return global_average_pool_vjp(cache, g)
        case FullyConnected():
            dx, grads[f'{name}.weight'], grads[f'{name}.bias'] = fully_connected_vjp(cache, params[f'{name}.weight'], g)
            return dx


def _prepare_input(net, x):
    x = as_tensor(x, net.spec.precision)
    if x.shape[1:] != tuple(net.spec.input_shape):
        raise ShapeMismatch(f'Network expects inputs of shape (N, {", ".join(map(str, net.spec.input_shape))}), got {x.shape}')
    return x


def _run(net, x, taps=None):
    x = _prepare_input(net, x)
    if taps is not None:
        taps['input'] = x
    tape = []
    for name, layer in zip(net.names, net.spec.layers):
        x, cache = _layer_forward(net, name, layer, x, taps)
        tape.append((name, layer, cache))
    return x, tape


def forward(net:Network, x) -> np.ndarray:
    logits, _ = _run(net, x)
    return logits


def forward_with_taps(net:Network, x, tap_ids=()):
    unknown = [t for t in tap_ids if t not in net.shapes]
    if unknown:
        raise UnknownTap(f'Unknown taps {unknown}; available: {net.tap_names}')
    if not tap_ids:
        return forward(net, x), {}
    taps = {}
    logits, _ = _run(net, x, taps)
    return logits, {t: taps[t] for t in tap_ids}


def residual_block_forward(net:Network, name:str, x) -> np.ndarray:
    block = net.layer(name)
    if not isinstance(block, ResidualBlock):
        raise UnknownTap(f'{name} is not a residual block')
    y, _ = _residual_forward(net, name, block, as_tensor(x, net.spec.precision), None)
    return y


def residual_taps(net:Network):
    return [name for name, layer in zip(net.names, net.spec.layers) if isinstance(layer, ResidualBlock)]


def predict(net:Network, x, batch_size:int=64) -> np.ndarray:
    """Hard labels; logit ties resolve to the lowest class index."""
    labels = [forward(net, x[start:start + batch_size]).argmax(axis=1) for start in range(0, len(x), batch_size)]
    return np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)


def calibrate_readout(net:Network, x, batch_size:int=64) -> Network:
    """Copy of ``net`` whose head logits are centred on ``x`` and share one spread, so hard labels vary with the input."""
    x = _prepare_input(net, x)
    if len(x) < 2:
        raise ImproperCalibration(f'Calibration needs at least two images, got {len(x)}')
    head = net.names[-1]
    if not isinstance(net.spec.layers[-1], FullyConnected):
        raise ImproperCalibration(f'Calibration needs a fully connected head, got {head}')
    source = net.names[-2] if len(net.names) > 1 else 'input'
    chunks = []
    for start in range(0, len(x), batch_size):
        batch = x[start:start + batch_size]
        chunks.append(forward_with_taps(net, batch, [source])[1][source].reshape(len(batch), -1))
    features = np.concatenate(chunks).astype(np.float64)
    weight = net.params[f'{head}.weight'].astype(np.float64)
    logits = features @ weight.T
    spread = logits.std(axis=0)
    positive = spread > np.finfo(net.dtype).eps * np.abs(logits).max()
    if not np.any(positive):
        raise ImproperCalibration('Every calibration image yields the same features')
    scale = np.ones_like(spread)
    scale[positive] = spread[positive].mean() / spread[positive]
    calibrated = net.copy()
    calibrated.params[f'{head}.weight'] = (weight * scale[:, None]).astype(net.dtype)
    calibrated.params[f'{head}.bias'] = (-logits.mean(axis=0) * scale).astype(net.dtype)
    net.logger.debug(f'Calibrated {head} on {len(x)} images, logit spread {spread.min():.3e} to {spread.max():.3e}')
    return calibrated


def backward(net:Network, x, labels=None, dlogits=None):
    """Returns (loss, gradients) for softmax cross-entropy, or for an explicit ``dlogits`` upstream.

    Gradients are float64 and keyed like ``net.params``.
    """
    logits, tape = _run(net, x)
    loss = None
    if labels is not None:
        loss, g = softmax_cross_entropy(logits, labels)
    if dlogits is not None:
        g = np.asarray(dlogits, dtype=np.float64)
    elif labels is None:
        raise MissingLabels('backward needs labels or an explicit upstream gradient')
    if g.shape != logits.shape:
        raise ShapeMismatch(f'Upstream gradient shape {g.shape} does not match logits {logits.shape}')
    grads = {}
    for name, layer, cache in reversed(tape):
        g = _layer_backward(net, name, layer, cache, g, grads)
    return loss, {k: grads[k] for k in net.params}


def toy_resnet(kind, channels=(8, 16, 32), in_channels:int=1, size:int=32, classes:int=4,
               criterion:SelectionCriterion=SelectionCriterion(), blur_size:int=3,
               activation:Activation=Activation(), pad:PadMode=PadMode.CIRCULAR,
               precision:str='f32', seed:int=0, kernel:int=3) -> NetworkSpec:
    """Stride-1 stem, one residual block per channel width, a stride-2 downsample in every block after the first."""
    kind = DownsampleKind(kind) if isinstance(kind, str) else kind
    act = Act(activation)
    layers = [Conv(channels[0], kernel), act]
    for stage, width in enumerate(channels):
        inner = (Conv(width, kernel), act, Conv(width, kernel))
        ds = None if stage == 0 else Downsample(kind, 2, criterion, blur_size)
        layers += [ResidualBlock(width, inner, ds), act]
    layers += [GlobalAvgPool(), FullyConnected(classes)]
    return NetworkSpec(tuple(layers), (in_channels, size, size), precision, pad, seed)


def with_downsample_kind(spec:NetworkSpec, kind) -> NetworkSpec:
    kind = DownsampleKind(kind) if isinstance(kind, str) else kind

    def swap(layer):
        match layer:
            case Downsample():
                return replace(layer, kind=kind)
            case ResidualBlock(downsample=Downsample() as ds):
                return replace(layer, downsample=replace(ds, kind=kind))
        return layer

    return replace(spec, layers=tuple(swap(layer) for layer in spec.layers))


def _activation_to_dict(a:Activation):
    if a.kind == 'polynomial':
        return {'activation': a.kind, 'coefficients': list(a.coefficients)}
    return {'activation': a.kind}


def _downsample_to_dict(ds:Downsample):
    return {'kind': ds.kind.value, 'stride': ds.stride, 'criterion': ds.criterion.name, 'blur_size': ds.blur_size}


def layer_to_dict(layer) -> dict:
    match layer:
        case Conv():
            return {'type': 'conv', 'out_channels': layer.out_channels, 'kernel': layer.kernel, 'bias': layer.bias}
        case Act(activation=a):
            return {'type': 'act', **_activation_to_dict(a)}
        case MaxPoolDense(kernel=k):
            return {'type': 'maxpool', 'kernel': k}
        case Downsample():
            return {'type': 'downsample', **_downsample_to_dict(layer)}
        case ResidualBlock():
            return {
                'type': 'residual',
                'out_channels': layer.out_channels,
                'inner': [layer_to_dict(inner) for inner in layer.inner],
                'downsample': None if layer.downsample is None else _downsample_to_dict(layer.downsample),
            }
        case GlobalAvgPool():
            return {'type': 'gap'}
        case FullyConnected(classes=classes):
            return {'type': 'fc', 'classes': classes}


LAYER_KEYS = {
    'conv': {'out_channels', 'kernel', 'bias'},
    'act': {'activation', 'coefficients'},
    'maxpool': {'kernel'},
    'downsample': {'kind', 'stride', 'criterion', 'blur_size'},
    'residual': {'out_channels', 'inner', 'downsample'},
    'gap': set(),
    'fc': {'classes'},
}


def _downsample_from_dict(d:dict) -> Downsample:
    unknown = set(d) - LAYER_KEYS['downsample']
    if unknown:
        raise ImproperNetworkSpec(f'Unknown downsample keys {sorted(unknown)}')
    try:
        return Downsample(
            DownsampleKind(d.get('kind', 'aps')),
            int(d.get('stride', 2)),
            SelectionCriterion.parse(d.get('criterion', 'argmax_l2')),
            int(d.get('blur_size', 3)),
        )
    except ValueError as e:
        raise ImproperNetworkSpec(f'Bad downsample entry {d}: {e}')


def layer_from_dict(d:dict):
    kind = d.get('type')
    if kind not in LAYER_KEYS:
        raise ImproperNetworkSpec(f'Unknown layer type {kind!r}')
    unknown = set(d) - LAYER_KEYS[kind] - {'type'}
    if unknown:
        raise ImproperNetworkSpec(f'Unknown keys {sorted(unknown)} for layer type {kind!r}')
    match kind:
        case 'conv':
            return Conv(int(d['out_channels']), int(d.get('kernel', 3)), 1, bool(d.get('bias', True)))
        case 'act':
            return Act(Activation(d.get('activation', 'relu'), tuple(d.get('coefficients', ()))))
        case 'maxpool':
            return MaxPoolDense(int(d.get('kernel', 2)))
        case 'downsample':
            return _downsample_from_dict({k: v for k, v in d.items() if k != 'type'})
        case 'residual':
            ds = d.get('downsample')
            return ResidualBlock(
                int(d['out_channels']),
                tuple(layer_from_dict(inner) for inner in d.get('inner', ())),
                None if ds is None else _downsample_from_dict(ds),
            )
        case 'gap':
            return GlobalAvgPool()
        case 'fc':
            return FullyConnected(int(d['classes']))


def spec_to_dict(spec:NetworkSpec) -> dict:
    return {
        'input_shape': list(spec.input_shape),
        'precision': spec.precision,
        'pad': spec.pad.value,
        'seed': spec.seed,
        'layers': [layer_to_dict(layer) for layer in spec.layers],
    }


def spec_from_dict(d:dict) -> NetworkSpec:
    unknown = set(d) - {'input_shape', 'precision', 'pad', 'seed', 'layers'}
    if unknown:
        raise ImproperNetworkSpec(f'Unknown network spec keys {sorted(unknown)}')
    try:
        return NetworkSpec(
            tuple(layer_from_dict(layer) for layer in d['layers']),
            tuple(int(v) for v in d['input_shape']),
            d.get('precision', 'f32'),
            PadMode(d.get('pad', 'circular')),
            int(d.get('seed', 0)),
        )
    except KeyError as e:
        raise ImproperNetworkSpec(f'Network spec is missing {e}')
    except ValueError as e:
        raise ImproperNetworkSpec(f'Bad network spec: {e}')


def save_spec(spec:NetworkSpec, path):
    with open(path, 'w') as stream:
        stream.write(yaml.safe_dump(spec_to_dict(spec), sort_keys=False))


def load_spec(path) -> NetworkSpec:
    with open(path, 'r') as stream:
        try:
            return spec_from_dict(yaml.safe_load(stream))
        except yaml.YAMLError as e:
            raise ImproperNetworkSpec(f'{path} is not valid YAML: {e}')


def save_network(net:Network, directory):
    os.makedirs(os.path.join(directory, PARAMS_DIR), exist_ok=True)
    save_spec(net.spec, os.path.join(directory, SPEC_FILE))
    manifest = {'precision': net.spec.precision, 'parameters': {}}
    for name, value in net.params.items():
        filename = os.path.join(PARAMS_DIR, f'{name}.psft')
        save_tensor(os.path.join(directory, filename), value.reshape((1,) * (4 - value.ndim) + value.shape))
        manifest['parameters'][name] = {'file': filename, 'shape': list(value.shape)}
    with open(os.path.join(directory, MANIFEST_FILE), 'w') as stream:
        stream.write(yaml.safe_dump(manifest, sort_keys=False))
    Network.logger.info(f'Saved network with {len(net.params)} parameter tensors to {directory}')


def load_network(directory) -> Network:
    net = build(load_spec(os.path.join(directory, SPEC_FILE)))
    with open(os.path.join(directory, MANIFEST_FILE), 'r') as stream:
        manifest = yaml.safe_load(stream)
    missing = set(net.params) - set(manifest['parameters'])
    if missing:
        raise ImproperNetworkSpec(f'Manifest in {directory} lacks parameters {sorted(missing)}')
    for name, entry in manifest['parameters'].items():
        if name not in net.params:
            raise ImproperNetworkSpec(f'Manifest parameter {name} does not belong to the network')
        value = load_tensor(os.path.join(directory, entry['file'])).reshape(entry['shape'])
        if value.shape != net.params[name].shape:
            raise ImproperNetworkSpec(f'Parameter {name} has shape {value.shape}, expected {net.params[name].shape}')
        net.params[name] = value.astype(net.dtype)
    return net


class NetworkError(PolyshiftError):
    pass

class ImproperLayer(NetworkError):
    pass

class ImproperNetworkSpec(NetworkError):
    pass

class UnknownTap(NetworkError):
    pass

class MissingLabels(NetworkError):
    pass

class ImproperCalibration(NetworkError):
    pass
