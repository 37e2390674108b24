"""
Deep convolutional network trained with minibatch SGD + momentum and used
as a feature extractor for the forest stage.

Architecture: [conv -> ReLU -> max-pool -> dropout] per ConvLayerSpec,
then a ReLU dense layer (the extraction point) with dropout, then a
softmax output layer. Inputs are the square grids built by preprocessing,
optionally upsampled by an integer factor so the layer chain fits.
"""

import json
import time
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace, asdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from tqdm import tqdm

import cnn_layers as layers
import seeding
from config_loader import (NETWORK_PRESETS, BATCH_SIZE, LEARNING_RATE, MOMENTUM, INPUT_DROPOUT,
                           HIDDEN_DROPOUT, EPOCHS, INIT_SCALE, SEED, DIVERGED_RETRIES, PROGRESS_BARS)
from dataset import Dataset
from preprocessing import GridShape, Preprocessor, grid_shape, to_grid_batch

logger = logging.getLogger('dcnnfrf.dcnn')

INIT_POLICIES = ('fan-in-scaled', 'uniform-unit')
MAX_AUTO_UPSAMPLE = 64
CHECKPOINT_FORMAT = 'dcnnfrf-checkpoint/1'


class NetworkError(ValueError):
    """Base class for network configuration and training failures."""


class InvalidConfig(NetworkError):
    pass


class ShapeMismatch(NetworkError):
    pass


class DivergedLoss(NetworkError):
    def __init__(self, message, learning_rate=None, epoch=None):
        super().__init__(message)
        self.learning_rate = learning_rate
        self.epoch = epoch


@dataclass(frozen=True)
class ConvLayerSpec:
    feature_maps: int
    patch_w: int
    patch_h: int
    pool_w: int
    pool_h: int

    def __post_init__(self):
        for name in ('feature_maps', 'patch_w', 'patch_h', 'pool_w', 'pool_h'):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidConfig(f"conv layer {name} must be a positive integer, got {value!r}")

    @classmethod
    def parse(cls, text: str) -> 'ConvLayerSpec':
        """Parse the 'maps-patchW-patchH-poolW-poolH' notation, e.g. '6-3-3-2-2'."""
        parts = str(text).strip().split('-')
        if len(parts) != 5:
            raise InvalidConfig(f"conv layer '{text}' needs five dash-separated integers")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError:
            raise InvalidConfig(f"conv layer '{text}' needs five dash-separated integers")

    def __str__(self):
        return f"{self.feature_maps}-{self.patch_w}-{self.patch_h}-{self.pool_w}-{self.pool_h}"


@dataclass(frozen=True)
class NetworkConfig:
    conv_layers: Tuple[ConvLayerSpec, ...]
    dense_units: int = 64
    batch_size: int = BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    momentum: float = MOMENTUM
    input_dropout: float = INPUT_DROPOUT
    hidden_dropout: float = HIDDEN_DROPOUT
    epochs: int = EPOCHS
    seed: int = SEED
    init_scale: str = INIT_SCALE
    input_upsample: Union[int, str] = 1

    def __post_init__(self):
        layers_ = tuple(l if isinstance(l, ConvLayerSpec) else ConvLayerSpec.parse(l) for l in self.conv_layers)
        object.__setattr__(self, 'conv_layers', layers_)
        if not layers_:
            raise InvalidConfig("at least one convolutional layer is required")
        for name in ('dense_units', 'batch_size', 'epochs'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise InvalidConfig(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ('input_dropout', 'hidden_dropout'):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.init_scale not in INIT_POLICIES:
            raise InvalidConfig(f"init_scale must be one of {INIT_POLICIES}, got {self.init_scale!r}")
        upsample = self.input_upsample
        if upsample != 'auto' and (isinstance(upsample, bool) or not isinstance(upsample, (int, np.integer))
                                   or upsample < 1):
            raise InvalidConfig(f"input_upsample must be 'auto' or a positive integer, got {upsample!r}")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> 'NetworkConfig':
        if name not in NETWORK_PRESETS:
            raise InvalidConfig(f"unknown network preset '{name}' (known: {', '.join(sorted(NETWORK_PRESETS))})")
        settings = dict(NETWORK_PRESETS[name])
        settings.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(settings)

    @classmethod
    def from_dict(cls, settings: Dict) -> 'NetworkConfig':
        settings = dict(settings)
        if 'preset' in settings:
            preset = settings.pop('preset')
            return cls.from_preset(preset, **settings)
        settings['conv_layers'] = tuple(
            ConvLayerSpec(**l) if isinstance(l, dict) else ConvLayerSpec.parse(l)
            for l in settings.get('conv_layers', ()))
        unknown = set(settings) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown network settings: {', '.join(sorted(unknown))}")
        return cls(**settings)

    @classmethod
    def from_yaml(cls, path: str) -> 'NetworkConfig':
        with open(path, 'r', encoding='utf-8') as f:
            settings = yaml.safe_load(f) or {}
        if not isinstance(settings, dict):
            raise InvalidConfig(f"{path}: expected a mapping of network settings")
        return cls.from_dict(settings)

    def to_dict(self) -> Dict:
        settings = asdict(self)
        settings['conv_layers'] = [str(l) for l in self.conv_layers]
        return settings

    def fingerprint(self) -> str:
        layers_ = '/'.join(str(l) for l in self.conv_layers)
        return (f"{layers_} dense={self.dense_units} bs={self.batch_size} lr={self.learning_rate:g} "
                f"mom={self.momentum:g} drop={self.input_dropout:g}/{self.hidden_dropout:g} "
                f"epochs={self.epochs} init={self.init_scale} up={self.input_upsample}")


def shape_chain(config: NetworkConfig, height: int, width: int) -> List[Tuple[int, int, int]]:
    """Output (maps, height, width) of every conv block; rejects any non-positive dimension."""
    chain = []
    for index, spec in enumerate(config.conv_layers):
        conv_h, conv_w = height - spec.patch_h + 1, width - spec.patch_w + 1
        if conv_h < 1 or conv_w < 1:
            raise InvalidConfig(
                f"layer {index} ({spec}): {spec.patch_h}x{spec.patch_w} patch exceeds {height}x{width} input")
        height, width = conv_h // spec.pool_h, conv_w // spec.pool_w
        if height < 1 or width < 1:
            raise InvalidConfig(
                f"layer {index} ({spec}): {spec.pool_h}x{spec.pool_w} pool exceeds {conv_h}x{conv_w} feature map")
        chain.append((spec.feature_maps, height, width))
    return chain


def resolve_upsample(config: NetworkConfig, grid: GridShape) -> int:
    """Integer input upsampling factor for ``grid``; 'auto' picks the smallest that fits."""
    if config.input_upsample != 'auto':
        return int(config.input_upsample)
    for factor in range(1, MAX_AUTO_UPSAMPLE + 1):
        try:
            shape_chain(config, grid.height * factor, grid.width * factor)
            return factor
        except InvalidConfig:
            continue
    raise InvalidConfig(f"no upsampling factor up to {MAX_AUTO_UPSAMPLE} fits {grid.height}x{grid.width} grids")


def validate_shape_chain(config: NetworkConfig, grid: GridShape) -> List[Tuple[int, int, int]]:
    factor = resolve_upsample(config, grid)
    return shape_chain(config, grid.height * factor, grid.width * factor)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    source: str

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass
class TrainedNetwork:
    config: NetworkConfig
    grid: GridShape
    upsample: int
    n_classes: int
    params: 'OrderedDict[str, np.ndarray]'
    loss_history: List[float] = field(default_factory=list)
    preprocessor: Optional[Preprocessor] = None
    class_names: Optional[List[str]] = None
    nominal_values: Dict[int, List[str]] = field(default_factory=dict)

    @property
    def conv_filters(self) -> List[np.ndarray]:
        return [self.params[f'conv{i}_w'] for i in range(len(self.config.conv_layers))]

    @property
    def conv_biases(self) -> List[np.ndarray]:
        return [self.params[f'conv{i}_b'] for i in range(len(self.config.conv_layers))]

    @property
    def dense_weights(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.params['dense_w'], self.params['dense_b']

    @property
    def output_weights(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.params['out_w'], self.params['out_b']

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def init_network(config: NetworkConfig, grid: GridShape, n_classes: int) -> TrainedNetwork:
    """Fresh weights drawn from the (seed, init) stream; biases start at zero."""
    if n_classes < 2:
        raise InvalidConfig(f"need at least two classes, got {n_classes}")
    factor = resolve_upsample(config, grid)
    chain = shape_chain(config, grid.height * factor, grid.width * factor)
    rng = seeding.derive_rng(config.seed, seeding.NETWORK_INIT)

    params = OrderedDict()
    channels = 1
    for index, spec in enumerate(config.conv_layers):
        fan_in = channels * spec.patch_h * spec.patch_w
        limit = 1.0 if config.init_scale == 'uniform-unit' else np.sqrt(1.0 / fan_in)
        params[f'conv{index}_w'] = rng.uniform(-limit, limit, (spec.feature_maps, channels, spec.patch_h, spec.patch_w))
        params[f'conv{index}_b'] = np.zeros(spec.feature_maps)
        channels = spec.feature_maps

    maps, height, width = chain[-1]
    flat = maps * height * width
    limit = np.sqrt(1.0 / flat)
    params['dense_w'] = rng.uniform(-limit, limit, (flat, config.dense_units))
    params['dense_b'] = np.zeros(config.dense_units)
    limit = np.sqrt(1.0 / config.dense_units)
    params['out_w'] = rng.uniform(-limit, limit, (config.dense_units, n_classes))
    params['out_b'] = np.zeros(n_classes)
    return TrainedNetwork(config=config, grid=grid, upsample=factor, n_classes=n_classes, params=params)


def prepare_inputs(net: TrainedNetwork, grids: np.ndarray) -> np.ndarray:
    """Check grid shape and apply the network's input upsampling (N x 1 x H x W)."""
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim == 3:
        grids = grids[:, None]
    if grids.shape[1:] != (1, net.grid.height, net.grid.width):
        raise ShapeMismatch(
            f"network was trained on 1x{net.grid.height}x{net.grid.width} grids, got {'x'.join(map(str, grids.shape[1:]))}")
    if net.upsample > 1:
        grids = np.repeat(np.repeat(grids, net.upsample, axis=2), net.upsample, axis=3)
    return grids


@dataclass
class ForwardRecord:
    """Everything a forward pass keeps for the backward pass."""
    conv_inputs: List[np.ndarray]
    conv_outputs: List[np.ndarray]
    pools: List[layers.PoolRecord]
    masks: Dict[str, Optional[np.ndarray]]
    pooled_shape: Tuple[int, ...]
    flat: np.ndarray
    dense_pre: np.ndarray
    dense_out: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def sample_dropout_masks(net: TrainedNetwork, batch: int, rng: np.random.Generator) -> Dict[str, Optional[np.ndarray]]:
    """Training-mode masks for a batch, keyed by the layer they follow."""
    cfg = net.config
    height, width = net.grid.height * net.upsample, net.grid.width * net.upsample
    masks = {'input': layers.dropout_mask((batch, 1, height, width), cfg.input_dropout, rng)
             if cfg.input_dropout > 0 else None}
    for index, (maps, h, w) in enumerate(shape_chain(cfg, height, width)):
        masks[f'conv{index}'] = (layers.dropout_mask((batch, maps, h, w), cfg.hidden_dropout, rng)
                                 if cfg.hidden_dropout > 0 else None)
    masks['dense'] = (layers.dropout_mask((batch, cfg.dense_units), cfg.hidden_dropout, rng)
                      if cfg.hidden_dropout > 0 else None)
    return masks


def forward_pass(net: TrainedNetwork, inputs: np.ndarray,
                 masks: Optional[Dict[str, Optional[np.ndarray]]] = None) -> ForwardRecord:
    """Forward pass over prepared inputs. ``masks=None`` means inference (no dropout)."""
    masks = masks or {}
    p = net.params
    activation = inputs if masks.get('input') is None else inputs * masks['input']
    conv_inputs, conv_outputs, pools = [], [], []
    for index, spec in enumerate(net.config.conv_layers):
        conv_inputs.append(activation)
        z = layers.conv_forward(activation, p[f'conv{index}_w'], p[f'conv{index}_b'])
        conv_outputs.append(z)
        pooled, record = layers.maxpool_forward(layers.relu_forward(z), spec.pool_w, spec.pool_h)
        pools.append(record)
        mask = masks.get(f'conv{index}')
        activation = pooled if mask is None else pooled * mask

    pooled_shape = activation.shape
    flat = activation.reshape(activation.shape[0], -1)
    dense_pre = layers.dense_forward(flat, p['dense_w'], p['dense_b'])
    dense_out = layers.relu_forward(dense_pre)
    if masks.get('dense') is not None:
        dense_out = dense_out * masks['dense']
    logits = layers.dense_forward(dense_out, p['out_w'], p['out_b'])
    return ForwardRecord(conv_inputs=conv_inputs, conv_outputs=conv_outputs, pools=pools, masks=dict(masks),
                         pooled_shape=pooled_shape, flat=flat, dense_pre=dense_pre, dense_out=dense_out,
                         logits=logits, probs=layers.softmax(logits))


def backward(net: TrainedNetwork, record: ForwardRecord, labels: np.ndarray) -> 'OrderedDict[str, np.ndarray]':
    """Gradients of the mean cross-entropy of ``record`` with respect to every parameter."""
    p = net.params
    labels = np.asarray(labels, dtype=np.int64)
    batch = labels.size
    grads = OrderedDict((name, None) for name in p)

    grad_logits = record.probs.copy()
    grad_logits[np.arange(batch), labels] -= 1.0
    grad_logits /= batch

    grad_dense_out, grads['out_w'], grads['out_b'] = layers.dense_backward(record.dense_out, p['out_w'], grad_logits)
    if record.masks.get('dense') is not None:
        grad_dense_out = grad_dense_out * record.masks['dense']
    grad_dense_pre = layers.relu_backward(record.dense_pre, grad_dense_out)
    grad_flat, grads['dense_w'], grads['dense_b'] = layers.dense_backward(record.flat, p['dense_w'], grad_dense_pre)

    grad = grad_flat.reshape(record.pooled_shape)
    for index in range(len(net.config.conv_layers) - 1, -1, -1):
        mask = record.masks.get(f'conv{index}')
        if mask is not None:
            grad = grad * mask
        grad = layers.maxpool_backward(grad, record.pools[index])
        grad = layers.relu_backward(record.conv_outputs[index], grad)
        grad, grads[f'conv{index}_w'], grads[f'conv{index}_b'] = layers.conv_backward(
            record.conv_inputs[index], p[f'conv{index}_w'], grad)
    return grads


def batch_loss(net: TrainedNetwork, inputs: np.ndarray, labels: np.ndarray,
               masks: Optional[Dict[str, Optional[np.ndarray]]] = None) -> float:
    return layers.cross_entropy(forward_pass(net, inputs, masks).logits, np.asarray(labels, dtype=np.int64))


def sgd_momentum_step(weights: Dict[str, np.ndarray], gradients: Dict[str, np.ndarray],
                      velocity: Dict[str, np.ndarray], lr: float, momentum: float):
    """In place: v <- momentum*v - lr*g ; w <- w + v."""
    for name, w in weights.items():
        v = velocity[name]
        v *= momentum
        v -= lr * gradients[name]
        w += v
    return weights, velocity


def _all_finite(params: Dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(w)) for w in params.values())


def fit_network(grids: np.ndarray, labels: np.ndarray, n_classes: int, config: NetworkConfig,
                name: str = 'dataset', progress: bool = PROGRESS_BARS) -> TrainedNetwork:
    """Train on already-gridded inputs (N x 1 x s x s)."""
    grids = np.asarray(grids, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    grid = GridShape(height=grids.shape[-2], width=grids.shape[-1], pad_count=0)
    net = init_network(config, grid, n_classes)
    inputs = prepare_inputs(net, grids)
    n = labels.size

    order_rng = seeding.derive_rng(config.seed, seeding.MINIBATCH_ORDER)
    dropout_rng = seeding.derive_rng(config.seed, seeding.DROPOUT)
    velocity = OrderedDict((k, np.zeros_like(v)) for k, v in net.params.items())
    logger.info(f"🧠 Training {config.fingerprint()} on {name}: n={n}, grid {grid.height}x{grid.width} "
                f"(x{net.upsample}), {net.parameter_count()} parameters")

    started = time.perf_counter()
    epochs = tqdm(range(config.epochs), desc=f"dcnn {name}", unit="epoch", disable=not progress, leave=False)
    for epoch in epochs:
        order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            masks = sample_dropout_masks(net, rows.size, dropout_rng)
            record = forward_pass(net, inputs[rows], masks)
            total += layers.cross_entropy(record.logits, labels[rows]) * rows.size
            grads = backward(net, record, labels[rows])
            sgd_momentum_step(net.params, grads, velocity, config.learning_rate, config.momentum)

        epoch_loss = total / n
        if not np.isfinite(epoch_loss) or not _all_finite(net.params):
            logger.warning(f"⚠️ Loss diverged at epoch {epoch + 1} with lr={config.learning_rate:g}")
            raise DivergedLoss(f"{name}: loss became non-finite at epoch {epoch + 1} "
                               f"(learning rate {config.learning_rate:g}); retry with a smaller learning rate",
                               learning_rate=config.learning_rate, epoch=epoch + 1)
        net.loss_history.append(float(epoch_loss))
        epochs.set_postfix(loss=f"{epoch_loss:.4f}")

    logger.info(f"✅ Trained {name} in {time.perf_counter() - started:.2f}s, final loss {net.loss_history[-1]:.4f}")
    return net


def train(ds: Dataset, config: NetworkConfig, progress: bool = PROGRESS_BARS) -> TrainedNetwork:
    """Train on a normalised Dataset; rows are placed on square grids first."""
    grids = to_grid_batch(ds.instances)
    net = fit_network(grids, ds.labels, ds.c, config, name=ds.name, progress=progress)
    net.grid = grid_shape(ds.d)
    return net


def train_with_retry(ds: Dataset, config: NetworkConfig, retries: int = DIVERGED_RETRIES,
                     progress: bool = PROGRESS_BARS) -> Tuple[TrainedNetwork, List[float]]:
    """Train, dividing the learning rate by 10 after each divergence, up to ``retries`` times.

    Returns the network and every learning rate tried, last one used.
    """
    tried = []
    current = config
    for attempt in range(retries + 1):
        tried.append(current.learning_rate)
        try:
            return train(ds, current, progress=progress), tried
        except DivergedLoss:
            if attempt == retries:
                raise
            current = replace(current, learning_rate=current.learning_rate / 10.0)
            logger.info(f"🔁 Retrying {ds.name} with lr={current.learning_rate:g}")


def _inference_batches(net: TrainedNetwork, ds_or_grids, chunk: int = 512):
    grids = to_grid_batch(ds_or_grids.instances) if isinstance(ds_or_grids, Dataset) else ds_or_grids
    inputs = prepare_inputs(net, grids)
    for start in range(0, inputs.shape[0], chunk):
        yield forward_pass(net, inputs[start:start + chunk])


def extract_features(net: TrainedNetwork, ds) -> FeatureMatrix:
    """Post-ReLU activations of the dense layer, inference mode, one row per instance."""
    values = np.vstack([record.dense_out for record in _inference_batches(net, ds)])
    return FeatureMatrix(values=values, source=f"dense ReLU layer ({net.config.dense_units} units)")


def predict_proba_dcnn(net: TrainedNetwork, ds) -> np.ndarray:
    """Softmax head applied to the extracted dense features."""
    return layers.dense_softmax_forward(extract_features(net, ds).values, *net.output_weights)


def predict_dcnn(net: TrainedNetwork, ds) -> np.ndarray:
    """Argmax of the softmax head; ties go to the lowest class index."""
    return np.argmax(predict_proba_dcnn(net, ds), axis=1)


# --- checkpoints ---
#
# A checkpoint is a sequence of .npy records written back to back into one file:
#   1. 0-d unicode array: JSON header {format, config, grid, upsample, n_classes, params: [names],
#      preprocessor: {fill, minimum, maximum} or null, class_names, nominal_values}
#   2. one float64 array per parameter, in header order (conv0_w, conv0_b, ..., out_w, out_b)
#   3. float64 loss_history
# .npy headers carry dtype and shape, so the file is self-describing and
# float64 values round-trip bit-exactly.

def save_checkpoint(net: TrainedNetwork, path: str) -> None:
    header = {
        'format': CHECKPOINT_FORMAT,
        'config': net.config.to_dict(),
        'grid': asdict(net.grid),
        'upsample': net.upsample,
        'n_classes': net.n_classes,
        'params': list(net.params),
        'preprocessor': net.preprocessor.to_dict() if net.preprocessor is not None else None,
        'class_names': net.class_names,
        'nominal_values': {str(j): values for j, values in sorted(net.nominal_values.items())},
    }
    with open(path, 'wb') as f:
        np.save(f, np.array(json.dumps(header, sort_keys=True)), allow_pickle=False)
        for name in net.params:
            np.save(f, np.ascontiguousarray(net.params[name], dtype=np.float64), allow_pickle=False)
        np.save(f, np.asarray(net.loss_history, dtype=np.float64), allow_pickle=False)
    logger.info(f"💾 Checkpoint written to {path}")


def load_checkpoint(path: str) -> TrainedNetwork:
    with open(path, 'rb') as f:
        try:
            header = json.loads(str(np.load(f, allow_pickle=False)))
        except (ValueError, OSError) as e:
            raise NetworkError(f"{path}: not a network checkpoint ({e})")
        if header.get('format') != CHECKPOINT_FORMAT:
            raise NetworkError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        params = OrderedDict((name, np.load(f, allow_pickle=False)) for name in header['params'])
        loss_history = np.load(f, allow_pickle=False).tolist()
    return TrainedNetwork(
        config=NetworkConfig.from_dict(header['config']),
        grid=GridShape(**header['grid']),
        upsample=int(header['upsample']),
        n_classes=int(header['n_classes']),
        params=params,
        loss_history=loss_history,
        preprocessor=Preprocessor.from_dict(header['preprocessor']) if header.get('preprocessor') else None,
        class_names=header.get('class_names'),
        nominal_values={int(j): values for j, values in (header.get('nominal_values') or {}).items()},
    )
