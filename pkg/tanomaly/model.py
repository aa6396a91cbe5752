# Copyright (C) 2022 by the tanomaly authors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful, but
# WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the GNU
# General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see
# <http://www.gnu.org/licenses/>.

import collections
import logging
import struct

import numpy as np

from tanomaly import config
from tanomaly import exceptions


LOG = logging.getLogger(__name__)

# Parameter tensors, in declaration (and checkpoint) order
PARAM_NAMES = (
    'conv_w', 'conv_b',
    'attn_w1', 'attn_b1', 'attn_w2', 'attn_b2',
    'clf_w1', 'clf_b1', 'clf_w2', 'clf_b2',
)

# Checkpoint layout
CHECKPOINT_MAGIC = b'TANM'
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct('<4sH')
CHECKPOINT_CONFIG = struct.Struct('<IIIIIQ')
CHECKPOINT_DTYPE = np.dtype('<f4')

# Logits are clamped so the sigmoid stays strictly inside (0, 1) in
# double precision
LOGIT_LIMIT = 35.0


def sigmoid(z):
    """
    Compute the logistic function, elementwise, without overflow.

    :param z: A scalar or array of logits.

    :returns: The logistic function of ``z``; strictly inside (0, 1).
    """

    z = np.clip(np.asarray(z, dtype=np.float64), -LOGIT_LIMIT, LOGIT_LIMIT)
    return 1.0 / (1.0 + np.exp(-z))


def relu(z):
    return np.maximum(z, 0.0)


class ModelConfig(config.Config):
    """
    Configuration of the attention network: the causal convolution,
    the two-layer attention head and the two-layer classifier.
    """

    config_args = set(['D', 'conv_kernel', 'conv_channels', 'attn_hidden',
                       'clf_hidden', 'seed'])
    defaults = {
        'conv_kernel': 3,
        'conv_channels': None,
        'attn_hidden': 64,
        'clf_hidden': 32,
        'seed': 0,
    }
    xforms = {
        'D': int,
        'conv_kernel': int,
        'conv_channels': lambda x: None if x is None else int(x),
        'attn_hidden': int,
        'clf_hidden': int,
        'seed': config.uint64,
    }

    def __init__(self, **kwargs):
        """
        Initialize a ``ModelConfig`` instance.  The number of
        convolution channels defaults to the feature dimension, so
        the convolution preserves the shape of the sequence.

        :param **kwargs: The configuration values.
        """

        if kwargs.get('conv_channels') is None and 'D' in kwargs:
            kwargs['conv_channels'] = kwargs['D']
        super(ModelConfig, self).__init__(**kwargs)

    def validate(self):
        for name in ('D', 'conv_kernel', 'conv_channels', 'attn_hidden',
                     'clf_hidden'):
            config.require(getattr(self, name) >= 1,
                           '%s must be positive', name)

    def shapes(self):
        """
        Compute the shape of every parameter tensor.

        :returns: An ordered mapping of parameter name to shape.
        :rtype: ``collections.OrderedDict``
        """

        return collections.OrderedDict([
            ('conv_w', (self.conv_kernel, self.D, self.conv_channels)),
            ('conv_b', (self.conv_channels,)),
            ('attn_w1', (self.conv_channels, self.attn_hidden)),
            ('attn_b1', (self.attn_hidden,)),
            ('attn_w2', (self.attn_hidden, 1)),
            ('attn_b2', (1,)),
            ('clf_w1', (self.D, self.clf_hidden)),
            ('clf_b1', (self.clf_hidden,)),
            ('clf_w2', (self.clf_hidden, 1)),
            ('clf_b2', (1,)),
        ])


class ParamSet(object):
    """
    A named, ordered collection of float64 tensors laid out according
    to a ``ModelConfig``.  This is the common base of ``ModelParams``
    and ``ParamGrads``; the tensors are read-only.
    """

    __slots__ = ['cfg', 'arrays']

    # Whether non-finite entries are rejected on construction
    require_finite = True

    @classmethod
    def zeros(cls, cfg):
        """
        Construct a collection of zero tensors.

        :param cfg: The model configuration.
        :type cfg: ``ModelConfig``

        :returns: The new collection.
        """

        return cls(cfg, dict((name, np.zeros(shape)) for name, shape in
                             cfg.shapes().items()))

    def __init__(self, cfg, arrays):
        """
        Initialize a ``ParamSet`` instance.

        :param cfg: The model configuration.
        :type cfg: ``ModelConfig``
        :param dict arrays: A mapping of parameter name to tensor.

        :raises tanomaly.exceptions.DimensionError:
            A tensor is missing or has the wrong shape.
        :raises tanomaly.exceptions.NonFiniteError:
            A tensor has non-finite entries.
        """

        shapes = cfg.shapes()
        if set(arrays) != set(shapes):
            raise exceptions.DimensionError(
                'expected tensors %s, got %s' %
                (', '.join(shapes), ', '.join(sorted(arrays))))

        self.cfg = cfg
        self.arrays = collections.OrderedDict()
        for name, shape in shapes.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise exceptions.DimensionError(
                    '%s must have shape %s, got %s' %
                    (name, shape, arr.shape))
            if self.require_finite and not np.all(np.isfinite(arr)):
                raise exceptions.NonFiniteError(
                    '%s has non-finite entries' % name)
            arr.setflags(write=False)
            self.arrays[name] = arr

    def __getattr__(self, attr):
        """
        Retrieve a tensor by name.

        :param str attr: The parameter name.

        :returns: The tensor.
        """

        if attr in ('cfg', 'arrays'):
            raise AttributeError(attr)

        try:
            return self.arrays[attr]
        except KeyError:
            raise AttributeError("'%s' object has no attribute '%s'" %
                                 (self.__class__.__name__, attr))

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays.items())

    def __eq__(self, other):
        """
        Compare for equality.  Two collections are equal if they have
        the same configuration and bitwise identical tensors.

        :param other: Another object to compare to.

        :returns: The result of the comparison.
        :rtype: ``bool``
        """

        if not isinstance(other, ParamSet):
            return NotImplemented
        return (self.cfg == other.cfg and
                all(self.arrays[n].tobytes() == other.arrays[n].tobytes()
                    for n in PARAM_NAMES))

    def __ne__(self, other):
        result = self.__eq__(other)
        if result is NotImplemented:
            return result
        return not result

    __hash__ = None

    def map(self, func, *others):
        """
        Apply a function to corresponding tensors of this and other
        collections, producing a new collection of this class.

        :param func: A function taking one tensor per collection and
                     returning the new tensor.
        :param *others: Other collections with the same layout.

        :returns: The new collection.
        """

        return self.__class__(self.cfg, dict(
            (name, func(arr, *[o.arrays[name] for o in others]))
            for name, arr in self.arrays.items()))

    def added(self, other):
        return self.map(lambda a, b: a + b, other)

    def scaled(self, factor):
        return self.map(lambda a: a * factor)

    def max_abs(self):
        """
        Compute the largest absolute entry over all tensors.

        :returns: The largest absolute entry.
        :rtype: ``float``
        """

        return max(float(np.max(np.abs(arr))) for arr in
                   self.arrays.values())


class ModelParams(ParamSet):
    """
    All learnable weights of the attention network and classifier.
    """

    __slots__ = []


class ParamGrads(ParamSet):
    """
    Gradients of an objective with respect to every entry of a
    ``ModelParams``; same layout as the parameters.
    """

    __slots__ = []

    require_finite = False


def init_params(cfg):
    """
    Initialize the model parameters.  Weights are drawn uniformly from
    ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` and rounded to float32 so
    that they survive a checkpoint exactly; biases are zero.

    :param cfg: The model configuration.
    :type cfg: ``ModelConfig``

    :returns: The initial parameters; a pure function of ``cfg``.
    :rtype: ``ModelParams``
    """

    rng = np.random.default_rng(cfg.seed)

    arrays = {}
    for name, shape in cfg.shapes().items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
            continue

        # The fan-in is everything except the output axis
        fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(
            np.float32).astype(np.float64)

    return ModelParams(cfg, arrays)


def _check_seq(params, seq):
    """
    Check a feature sequence against the model configuration and
    convert it to double precision.

    :param params: The model parameters.
    :param seq: The feature sequence.

    :returns: The ``T x D`` float64 feature matrix.
    """

    if seq.D != params.cfg.D:
        raise exceptions.DimensionError(
            'sequence %s has dimension %d, model expects %d' %
            (seq.id, seq.D, params.cfg.D))
    return seq.data.astype(np.float64)


def _attention(params, x):
    """
    Compute the attention coefficients for a feature matrix, keeping
    the intermediate values needed for back-propagation.

    :param params: The model parameters.
    :param x: The ``T x D`` float64 feature matrix.

    :returns: A dictionary of intermediate tensors; the attention
              coefficients are under ``lam``.
    :rtype: ``dict``
    """

    seq_t = x.shape[0]
    kernel = params.cfg.conv_kernel

    # Causal convolution: left zero-padding, so output t only sees
    # inputs up to t
    xp = np.concatenate([np.zeros((kernel - 1, x.shape[1])), x])
    h = np.zeros((seq_t, params.cfg.conv_channels))
    for k in range(kernel):
        h = h + xp[k:k + seq_t].dot(params.conv_w[k])
    h = h + params.conv_b
    r = relu(h)

    # Two-layer attention head, applied per time step
    z1 = r.dot(params.attn_w1) + params.attn_b1
    u = relu(z1)
    s = u.dot(params.attn_w2)[:, 0] + params.attn_b2[0]
    lam = sigmoid(s)

    return {
        'xp': xp, 'h': h, 'r': r, 'z1': z1, 'u': u, 's': s, 'lam': lam,
    }


def _classify(params, v):
    """
    Apply the classifier to a single vector, keeping intermediates.

    :param params: The model parameters.
    :param v: A length-D float64 vector.

    :returns: A dictionary with the hidden pre-activation ``zq``, the
              hidden activation ``q`` and the probability ``prob``.
    :rtype: ``dict``
    """

    zq = v.dot(params.clf_w1) + params.clf_b1
    q = relu(zq)
    logit = q.dot(params.clf_w2[:, 0]) + params.clf_b2[0]

    return {'zq': zq, 'q': q, 'logit': float(logit),
            'prob': float(sigmoid(logit))}


def pooled_with(lam, x):
    """
    Temporal weighted pooling: ``sum_t lam_t * x_t``, summed left to
    right over ``t`` so the result is reproducible bit for bit.

    :param lam: The length-T weight vector.
    :param x: The ``T x D`` feature matrix.

    :returns: The length-D pooled vector.
    :rtype: ``numpy.ndarray``
    """

    x = np.asarray(x, dtype=np.float64)
    if len(lam) != x.shape[0]:
        raise exceptions.DimensionError(
            'have %d weights for %d feature vectors' % (len(lam), x.shape[0]))

    pooled = np.zeros(x.shape[1])
    for t in range(x.shape[0]):
        pooled = pooled + lam[t] * x[t]

    return pooled


def attention_scores(params, seq):
    """
    Compute the attention coefficients of a sequence.

    :param params: The model parameters.
    :type params: ``ModelParams``
    :param seq: The feature sequence.
    :type seq: ``tanomaly.datastore.FeatureSequence``

    :returns: The length-T vector of coefficients, each in (0, 1).
    :rtype: ``numpy.ndarray``
    """

    return _attention(params, _check_seq(params, seq))['lam']


class ForwardTrace(object):
    """
    The outputs of a forward pass over one sequence: attention
    coefficients, the pooled vector and the video-level probability,
    along with everything needed for an exact backward pass.
    """

    def __init__(self, params, x, attn, pooled, clf):
        self.params = params
        self.x = x
        self.attn = attn
        self.pooled = pooled
        self.clf = clf

    @property
    def lam(self):
        """
        The attention coefficients.
        """

        return self.attn['lam']

    @property
    def prob(self):
        """
        The probability that the sequence contains an anomaly.
        """

        return self.clf['prob']

    @property
    def T(self):
        return self.x.shape[0]


def forward(params, seq):
    """
    Run the network on a sequence.

    :param params: The model parameters.
    :type params: ``ModelParams``
    :param seq: The feature sequence.
    :type seq: ``tanomaly.datastore.FeatureSequence``

    :returns: The forward trace.
    :rtype: ``ForwardTrace``
    """

    x = _check_seq(params, seq)
    attn = _attention(params, x)
    pooled = pooled_with(attn['lam'], x)

    return ForwardTrace(params, x, attn, pooled, _classify(params, pooled))


def classify_single(params, x):
    """
    Apply the classifier (with its final sigmoid) to a single feature
    vector.

    :param params: The model parameters.
    :type params: ``ModelParams``
    :param x: A length-D vector.

    :returns: The classifier's probability for the vector.
    :rtype: ``float``
    """

    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.cfg.D,):
        raise exceptions.DimensionError(
            'expected a vector of length %d, got shape %s' %
            (params.cfg.D, x.shape))
    if not np.all(np.isfinite(x)):
        raise exceptions.NonFiniteError('vector has non-finite entries')

    return _classify(params, x)['prob']


class TraceGrad(object):
    """
    Upstream gradients for one forward trace: the derivative of the
    objective with respect to each attention coefficient and with
    respect to the video-level probability.
    """

    __slots__ = ['dlam', 'dprob']

    def __init__(self, dlam, dprob):
        self.dlam = np.asarray(dlam, dtype=np.float64)
        self.dprob = float(dprob)


def _backward_one(params, trace, grad, acc):
    """
    Back-propagate one trace, accumulating into ``acc``.

    :param params: The model parameters.
    :param trace: The forward trace.
    :param grad: The upstream gradients.
    :param dict acc: Mutable gradient accumulators, keyed by
                     parameter name.
    """

    attn = trace.attn
    clf = trace.clf
    x = trace.x
    seq_t = trace.T
    kernel = params.cfg.conv_kernel

    # Classifier: prob = sigmoid(q . w2 + b2), q = relu(pooled W1 + b1)
    prob = clf['prob']
    # The sigmoid is flat beyond the logit clamp
    dlogit = (grad.dprob * prob * (1.0 - prob)
              if abs(clf['logit']) <= LOGIT_LIMIT else 0.0)
    acc['clf_w2'][:, 0] += clf['q'] * dlogit
    acc['clf_b2'][0] += dlogit
    dzq = params.clf_w2[:, 0] * dlogit * (clf['zq'] > 0)
    acc['clf_w1'] += np.outer(trace.pooled, dzq)
    acc['clf_b1'] += dzq
    dpooled = params.clf_w1.dot(dzq)

    # Pooling: pooled = sum_t lam_t x_t
    lam = attn['lam']
    dlam = grad.dlam + x.dot(dpooled)

    # Attention head
    ds = dlam * lam * (1.0 - lam) * (np.abs(attn['s']) <= LOGIT_LIMIT)
    acc['attn_w2'][:, 0] += attn['u'].T.dot(ds)
    acc['attn_b2'][0] += ds.sum()
    dz1 = np.outer(ds, params.attn_w2[:, 0]) * (attn['z1'] > 0)
    acc['attn_w1'] += attn['r'].T.dot(dz1)
    acc['attn_b1'] += dz1.sum(axis=0)
    dh = dz1.dot(params.attn_w1.T) * (attn['h'] > 0)

    # Causal convolution
    xp = attn['xp']
    for k in range(kernel):
        acc['conv_w'][k] += xp[k:k + seq_t].T.dot(dh)
    acc['conv_b'] += dh.sum(axis=0)


def backward(params, traces, grads):
    """
    Compute exact reverse-mode gradients of an objective with respect
    to every model parameter.  Contributions of the traces are summed;
    callers average over a batch themselves.

    :param params: The model parameters that produced the traces.
    :type params: ``ModelParams``
    :param traces: The forward traces.
    :param grads: The upstream gradients, one ``TraceGrad`` per trace.

    :returns: The parameter gradients.
    :rtype: ``ParamGrads``

    :raises tanomaly.exceptions.TraceMismatchError:
        A trace was produced by other parameters, or its upstream
        gradient has the wrong length.
    """

    if len(traces) != len(grads):
        raise exceptions.TraceMismatchError(
            'have %d traces but %d upstream gradients' %
            (len(traces), len(grads)))

    acc = dict((name, np.zeros(shape)) for name, shape in
               params.cfg.shapes().items())
    for trace, grad in zip(traces, grads):
        if trace.params is not params:
            raise exceptions.TraceMismatchError(
                'trace was produced by different parameters')
        if grad.dlam.shape != (trace.T,):
            raise exceptions.TraceMismatchError(
                'upstream gradient has shape %s for a trace of length %d' %
                (grad.dlam.shape, trace.T))
        _backward_one(params, trace, grad, acc)

    return ParamGrads(params.cfg, acc)


def save_checkpoint(params, path):
    """
    Write model parameters to a checkpoint file: the magic and version,
    the model configuration, then every tensor in declaration order
    as float32, each prefixed by its rank and dimensions.

    :param params: The parameters to save.
    :type params: ``ModelParams``
    :param str path: The checkpoint file.
    """

    cfg = params.cfg
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        f.write(CHECKPOINT_CONFIG.pack(cfg.D, cfg.conv_kernel,
                                       cfg.conv_channels, cfg.attn_hidden,
                                       cfg.clf_hidden, cfg.seed))
        for name in PARAM_NAMES:
            arr = params[name]
            f.write(struct.pack('<I%dI' % arr.ndim, arr.ndim, *arr.shape))
            f.write(arr.astype(CHECKPOINT_DTYPE).tobytes())

    LOG.debug('wrote checkpoint %s', path)


def load_checkpoint(path):
    """
    Read model parameters from a checkpoint file.

    :param str path: The checkpoint file.

    :returns: The parameters.
    :rtype: ``ModelParams``

    :raises tanomaly.exceptions.FormatError:
        The file is not a valid checkpoint.
    """

    with open(path, 'rb') as f:
        raw = f.read()

    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise exceptions.BadMagicError('not a checkpoint', path)

    offset = 0
    try:
        _magic, version = CHECKPOINT_HEADER.unpack_from(raw, offset)
        offset += CHECKPOINT_HEADER.size
        if version != CHECKPOINT_VERSION:
            raise exceptions.UnsupportedVersionError(
                'unsupported checkpoint version %d' % version, path)

        fields = CHECKPOINT_CONFIG.unpack_from(raw, offset)
        offset += CHECKPOINT_CONFIG.size
        cfg = ModelConfig(**dict(zip(
            ('D', 'conv_kernel', 'conv_channels', 'attn_hidden',
             'clf_hidden', 'seed'), fields)))

        arrays = {}
        for name, shape in cfg.shapes().items():
            (rank,) = struct.unpack_from('<I', raw, offset)
            offset += 4
            dims = struct.unpack_from('<%dI' % rank, raw, offset)
            offset += 4 * rank
            if dims != shape:
                raise exceptions.SizeMismatchError(
                    '%s has shape %s, configuration requires %s' %
                    (name, dims, shape), path)

            count = int(np.prod(dims))
            if len(raw) < offset + count * CHECKPOINT_DTYPE.itemsize:
                raise exceptions.TruncatedError('truncated tensor %s' % name,
                                                path)
            arrays[name] = np.frombuffer(raw, dtype=CHECKPOINT_DTYPE,
                                         count=count,
                                         offset=offset).reshape(dims)
            offset += count * CHECKPOINT_DTYPE.itemsize
    except struct.error:
        raise exceptions.TruncatedError('truncated checkpoint', path)
    except exceptions.ConfigError as exc:
        raise exceptions.FormatError('bad model configuration: %s' % exc,
                                     path)

    if offset != len(raw):
        raise exceptions.SizeMismatchError(
            '%d trailing bytes' % (len(raw) - offset), path)

    return ModelParams(cfg, arrays)
