"""AENet: encoder -> spatial attention -> decoder -> channel attention -> feature fusion -> logits.

The module also holds the training machinery: pixel cross-entropy, the
three-phase learning-rate schedule, an Adam optimizer, a single training step
and checkpoint persistence.
"""
import json
import pickle
from collections import namedtuple

import numpy as np
import torch

from aenet.config import OUTPUT_STRIDE, NUM_CLASSES, CELL_CLASS, FUSION_WIDTH, SAM_REDUCTION, \
    ENCODER_VGG16, ENCODER_TOY, \
    INIT_LR, MAX_EPOCHS, BATCH_SIZE, HALVE_EPOCH, POLY_EPOCH, POLY_POWER, \
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, CHECKPOINT_VERSION
from aenet.errors import ShapeError, DataError, NumericError
from aenet.tensor_core import to_batch, softmax_rows, concat_channels, split_channels, \
    global_avg_pool_forward, global_avg_pool_backward
from aenet.layers import Module, Sequential, Conv2d, ConvBNReLU, MaxPool2d, Upsample
from aenet.attention import SpatialAttention, ChannelAttention
from aenet.utils import derive_rng

POOL_QTY = 4
DECODER_FACTOR = 4

EncoderConfig = namedtuple('EncoderConfig', ['widths', 'convs_per_stage', 'batch_norm'])

ENCODER_PRESETS = {
    ENCODER_VGG16: EncoderConfig(widths=(64, 128, 256, 512, 512), convs_per_stage=(2, 2, 3, 3, 3), batch_norm=True),
    ENCODER_TOY: EncoderConfig(widths=(8, 16, 32, 64, 64), convs_per_stage=(2, 2, 3, 3, 3), batch_norm=True),
}

AENetConfig = namedtuple('AENetConfig',
                         ['encoder', 'decoder_widths', 'sam_reduction', 'fusion_width',
                          'use_sam', 'use_cam', 'use_ffb', 'seed'],
                         defaults=[ENCODER_PRESETS[ENCODER_VGG16], (256, 64), SAM_REDUCTION, FUSION_WIDTH,
                                   True, True, True, 0])

DECODER_PRESETS = {
    ENCODER_VGG16: (256, 64),
    ENCODER_TOY: (32, 16),
}

TrainConfig = namedtuple('TrainConfig',
                         ['init_lr', 'max_epochs', 'batch_size', 'halve_epoch', 'poly_epoch', 'poly_power',
                          'beta1', 'beta2', 'adam_eps', 'class_weights', 'patience'],
                         defaults=[INIT_LR, MAX_EPOCHS, BATCH_SIZE, HALVE_EPOCH, POLY_EPOCH, POLY_POWER,
                                   ADAM_BETA1, ADAM_BETA2, ADAM_EPS, None, None])


def make_model_config(preset=ENCODER_VGG16, **kwargs):
    """A model configuration from an encoder preset name plus field overrides."""
    if preset not in ENCODER_PRESETS:
        raise ValueError(f'Unknown encoder preset: {preset}, expected one of {sorted(ENCODER_PRESETS)}')
    conf = AENetConfig(encoder=ENCODER_PRESETS[preset], decoder_widths=DECODER_PRESETS[preset])
    return conf._replace(**kwargs)


def config_to_dict(conf):
    res = conf._asdict()
    res['encoder'] = {k: list(v) if isinstance(v, tuple) else v for k, v in conf.encoder._asdict().items()}
    res['decoder_widths'] = list(conf.decoder_widths)
    return res


def config_from_dict(data):
    data = dict(data)
    enc = data.pop('encoder')
    encoder = EncoderConfig(widths=tuple(enc['widths']), convs_per_stage=tuple(enc['convs_per_stage']),
                            batch_norm=bool(enc['batch_norm']))
    data['decoder_widths'] = tuple(data['decoder_widths'])
    return AENetConfig(encoder=encoder, **data)


class Encoder(Module):
    """VGG16-topology convolution stack with four 2x2 max-pools (output stride 16).

    The forward pass returns the top feature map f1 and its global average v1.
    """
    def __init__(self, conf, rng):
        super().__init__()
        if len(conf.widths) != POOL_QTY + 1 or len(conf.convs_per_stage) != len(conf.widths):
            raise ValueError(f'Encoder needs {POOL_QTY + 1} stages, got widths {conf.widths} '
                             f'and conv counts {conf.convs_per_stage}')
        if min(conf.widths) < 1 or min(conf.convs_per_stage) < 1:
            raise ValueError(f'Invalid encoder widths {conf.widths} or conv counts {conf.convs_per_stage}')
        self.out_channels = conf.widths[-1]
        self.stages = Sequential()
        in_channels = 3
        for stage_id, (width, qty) in enumerate(zip(conf.widths, conf.convs_per_stage)):
            stage = Sequential()
            for _ in range(qty):
                stage.append(ConvBNReLU(in_channels, width, 3, conf.batch_norm, rng))
                in_channels = width
            if stage_id < POOL_QTY:
                stage.append(MaxPool2d())
            self.stages.append(stage)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ShapeError(f'Input sides must be divisible by {OUTPUT_STRIDE}, got {h}x{w}')
        f1 = self.stages.forward(x)
        v1, self._cache = global_avg_pool_forward(f1)
        return f1, v1

    def backward(self, df1, dv1=None):
        if dv1 is not None:
            df1 = df1 + global_avg_pool_backward(dv1, self._cache)
        return self.stages.backward(df1)


class Decoder(Module):
    """Two stages of bilinear x4 up-sampling followed by 3x3 conv + BN + ReLU."""
    def __init__(self, in_channels, widths, batch_norm, rng):
        super().__init__()
        if len(widths) != 2:
            raise ValueError(f'Decoder needs exactly two stages to undo stride {OUTPUT_STRIDE}, got {widths}')
        self.out_channels = widths[-1]
        self.stages = Sequential()
        for width in widths:
            self.stages.append(Sequential(Upsample(DECODER_FACTOR),
                                          ConvBNReLU(in_channels, width, 3, batch_norm, rng)))
            in_channels = width

    def forward(self, x):
        return self.stages.forward(x)

    def backward(self, dout):
        return self.stages.backward(dout)


class FeatureFusion(Module):
    """Full-resolution low-level path gated by a global vector, plus the classifier head.

    f_low = BN-ReLU(conv3x3(image)), f_high = conv1x1(v1) broadcast over space,
    f_low_map = conv1x1(concat(f_low, f2)), f_high_map = f_low_map * f_high.
    """
    def __init__(self, f2_channels, v1_len, width=FUSION_WIDTH, batch_norm=True, rng=None):
        super().__init__()
        self.width = width
        self.v1_len = v1_len
        self.low = ConvBNReLU(3, width, 3, batch_norm, rng)
        self.high = Conv2d(v1_len, width, 1, rng=rng)
        self.merge = Conv2d(width + f2_channels, width, 1, rng=rng)
        self.classifier = Conv2d(width, NUM_CLASSES, 1, rng=rng)
        self.maps = {}

    def fuse(self, image, f2, v1):
        if v1.shape[-1] != self.v1_len:
            raise ShapeError(f'v1 length {v1.shape[-1]} does not match the high-path kernel ({self.v1_len})')
        f_low = self.low.forward(image)
        if f_low.shape[-2:] != f2.shape[-2:]:
            raise ShapeError(f'f_low {f_low.shape[-2:]} and f2 {f2.shape[-2:]} spatial sizes differ')
        f_high = self.high.forward(v1[..., None, None])
        cat, sizes = concat_channels([f_low, f2])
        f_low_map = self.merge.forward(cat)
        f_high_map = f_low_map * f_high
        self.maps = {'f_low': f_low, 'f_high': f_high, 'f_low_map': f_low_map, 'f_high_map': f_high_map}
        self._cache = (sizes, f_low_map, f_high)
        return f_high_map

    def forward(self, image, f2, v1):
        return self.classifier.forward(self.fuse(image, f2, v1))

    def backward(self, dlogits):
        """:return: gradients w.r.t. image, f2 and v1"""
        sizes, f_low_map, f_high = self._cache
        dmap = self.classifier.backward(dlogits)
        dlow_map = dmap * f_high
        dhigh = (dmap * f_low_map).sum(axis=(-2, -1), keepdims=True)
        dflow, df2 = split_channels(self.merge.backward(dlow_map), sizes)
        dimage = self.low.backward(dflow)
        dv1 = self.high.backward(dhigh)[..., 0, 0]
        return dimage, df2, dv1


class AENet(Module):
    def __init__(self, conf):
        super().__init__()
        self.conf = conf
        seed = conf.seed
        batch_norm = conf.encoder.batch_norm
        self.encoder = Encoder(conf.encoder, derive_rng(seed, 'encoder'))
        top = self.encoder.out_channels
        if conf.use_sam:
            self.sam = SpatialAttention(top, conf.sam_reduction, rng=derive_rng(seed, 'sam'))
        self.decoder = Decoder(top, conf.decoder_widths, batch_norm, derive_rng(seed, 'decoder'))
        if conf.use_cam:
            self.cam = ChannelAttention()
        if conf.use_ffb:
            self.fusion = FeatureFusion(self.decoder.out_channels, top, conf.fusion_width, batch_norm,
                                        derive_rng(seed, 'fusion'))
        else:
            self.head = Conv2d(self.decoder.out_channels, NUM_CLASSES, 1, rng=derive_rng(seed, 'head'))

    def forward(self, x):
        """Batch (or single image) of normalized 3-channel images -> 2-channel logits."""
        if x.shape[-3] != 3:
            raise ShapeError(f'Expected 3-channel input, got shape {x.shape}')
        f1, v1 = self.encoder.forward(x)
        if self.conf.use_sam:
            f1 = self.sam.forward(f1)
        f2 = self.decoder.forward(f1)
        if self.conf.use_cam:
            f2 = self.cam.forward(f2)
        if self.conf.use_ffb:
            return self.fusion.forward(x, f2, v1)
        return self.head.forward(f2)

    def backward(self, dlogits):
        dv1 = None
        dimage = None
        if self.conf.use_ffb:
            dimage, df2, dv1 = self.fusion.backward(dlogits)
        else:
            df2 = self.head.backward(dlogits)
        if self.conf.use_cam:
            df2 = self.cam.backward(df2)
        df1 = self.decoder.backward(df2)
        if self.conf.use_sam:
            df1 = self.sam.backward(df1)
        dx = self.encoder.backward(df1, dv1)
        return dx if dimage is None else dx + dimage

    def predict_proba(self, x):
        """Probability of the cell class, N x 1 x H x W (1 x H x W for a single image)."""
        logits = self.forward(x)
        return class_probabilities(logits)[..., CELL_CLASS:CELL_CLASS + 1, :, :]


def class_probabilities(logits):
    """Softmax over the class axis of N x K x H x W (or K x H x W) logits."""
    return np.moveaxis(softmax_rows(np.moveaxis(logits, -3, -1)), -1, -3)


def encoder_forward(model, image):
    return model.encoder.forward(image)


def decoder_forward(model, f):
    return model.decoder.forward(f)


def feature_fusion(model, image, f2, v1):
    """Fusion-branch logits for a model built with the fusion branch enabled."""
    if not model.conf.use_ffb:
        raise ValueError('The model was built without the feature fusion branch')
    return model.fusion.forward(image, f2, v1)


def aenet_forward(model, image):
    return model.predict_proba(image)


def segmentation_loss(logits, mask, class_weights=None):
    """Mean pixel cross-entropy of the true class.

    :param logits:         N x 2 x H x W (or 2 x H x W) logits
    :param mask:           N x H x W (or H x W) labels: 0 cell, 1 background
    :param class_weights:  optional per-class weights, the mean becomes weighted

    :return: loss value, gradient w.r.t. logits
    """
    lb, squeeze = to_batch(logits)
    mb = mask[None] if squeeze else mask
    if mb.shape != (lb.shape[0],) + lb.shape[2:]:
        raise ShapeError(f'Mask shape {mask.shape} does not match logits shape {logits.shape}')
    if lb.shape[1] != NUM_CLASSES:
        raise ShapeError(f'Expected {NUM_CLASSES} logit channels, got {lb.shape[1]}')
    labels = np.asarray(mb)
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError('Mask values must be 0 (cell) or 1 (background)')
    labels = labels.astype(np.int64)

    z = lb - lb.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    nll = -np.take_along_axis(log_p, labels[:, None], axis=1)[:, 0]
    if class_weights is None:
        weights = np.ones_like(nll)
    else:
        weights = np.asarray(class_weights, dtype=nll.dtype)[labels]
    total = weights.sum()
    value = float((weights * nll).sum() / total)

    onehot = np.zeros_like(lb)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    grad = (np.exp(log_p) - onehot) * (weights / total)[:, None]
    grad = grad.astype(lb.dtype, copy=False)
    return value, (grad[0] if squeeze else grad)


def lr_schedule(epoch, it, total_iter, conf):
    """Learning rate: constant, then halved, then poly decay over global iterations."""
    if epoch < 0 or epoch >= conf.max_epochs:
        raise ValueError(f'Epoch {epoch} is outside [0, {conf.max_epochs})')
    if epoch < conf.halve_epoch:
        return conf.init_lr
    if epoch < conf.poly_epoch:
        return conf.init_lr * 0.5
    frac = min(max(it / total_iter, 0.0), 1.0)
    return conf.init_lr * (1.0 - frac) ** conf.poly_power


ADAM_MOMENT_KEYS = ('m', 'v')


class Adam:
    def __init__(self, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, named_params, lr):
        self.t += 1
        corr1 = 1.0 - self.beta1 ** self.t
        corr2 = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= (lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.value.dtype, copy=False)

    def state_dict(self):
        return {'t': self.t, 'm': dict(self.m), 'v': dict(self.v),
                'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps}

    def load_state_dict(self, state):
        self.t = int(state['t'])
        self.m = {k: np.array(v) for k, v in state['m'].items()}
        self.v = {k: np.array(v) for k, v in state['v'].items()}
        self.beta1 = float(state['beta1'])
        self.beta2 = float(state['beta2'])
        self.eps = float(state['eps'])


def train_step(model, optimizer, images, masks, lr, class_weights=None):
    """One optimizer update on a batch, returns the loss before the update."""
    model.train()
    model.zero_grad()
    logits = model.forward(images)
    value, dlogits = segmentation_loss(logits, masks, class_weights)
    if not np.isfinite(value):
        raise NumericError(f'Non-finite loss: {value}')
    model.backward(dlogits)
    optimizer.step(model.named_parameters(), lr)
    return value


def _to_torch(arr):
    return torch.from_numpy(np.ascontiguousarray(arr).copy())


def save_checkpoint(file_name, model, optimizer=None, epoch=0, extra=None):
    """Save model parameters, buffers, optimizer moments and counters.

    :param file_name:  output file
    :param model:      AENet
    :param optimizer:  Adam or None
    :param epoch:      # of completed epochs
    :param extra:      JSON-serializable dictionary (step counters, RNG state, etc.)
    """
    state = {
        'format_version': CHECKPOINT_VERSION,
        'model_config': json.dumps(config_to_dict(model.conf), sort_keys=True),
        'params': {name: _to_torch(p.value) for name, p in model.named_parameters()},
        'buffers': {name: _to_torch(b) for name, b in model.named_buffers()},
        'epoch': int(epoch),
        'extra': json.dumps(extra if extra is not None else {}, sort_keys=True),
    }
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        for key in ADAM_MOMENT_KEYS:
            opt_state[key] = {k: _to_torch(v) for k, v in opt_state[key].items()}
        state['optimizer'] = opt_state
    torch.save(state, file_name)


def load_checkpoint(file_name):
    """:return: model, optimizer (None if absent), epoch, extra dictionary"""
    try:
        state = torch.load(file_name, map_location='cpu', weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise DataError(f'Cannot load checkpoint {file_name}: {e}')
    version = state.get('format_version') if isinstance(state, dict) else None
    if version != CHECKPOINT_VERSION:
        raise DataError(f'Unsupported checkpoint version {version} in {file_name}')

    model = AENet(config_from_dict(json.loads(state['model_config'])))
    params = dict(model.named_parameters())
    if set(params) != set(state['params']):
        raise DataError(f'Checkpoint {file_name} parameter names do not match the model configuration')
    for name, p in params.items():
        value = state['params'][name].numpy()
        if value.shape != p.value.shape:
            raise DataError(f'Parameter {name} shape {value.shape} != {p.value.shape} in {file_name}')
        p.value = value.copy()
        p.zero_grad()
    for name, value in state['buffers'].items():
        model.set_buffer(name, value.numpy().copy())

    optimizer = None
    if 'optimizer' in state:
        opt_state = dict(state['optimizer'])
        for key in ADAM_MOMENT_KEYS:
            opt_state[key] = {k: v.numpy() for k, v in opt_state[key].items()}
        optimizer = Adam()
        optimizer.load_state_dict(opt_state)

    return model, optimizer, int(state['epoch']), json.loads(state['extra'])
