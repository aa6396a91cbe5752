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

import io
import json
import logging
import time

import numpy as np
import six

from tanomaly import augment
from tanomaly import config
from tanomaly import datastore
from tanomaly import exceptions
from tanomaly import losses
from tanomaly import model


LOG = logging.getLogger(__name__)


class TrainConfig(config.Config):
    """
    Configuration of the training loop.  The defaults reproduce the
    published schedule: Adam at 1e-4 for 10 epochs, then 1e-5 for 40
    more, in batches of 8.
    """

    config_args = set(['lr_phase1', 'epochs_phase1', 'lr_phase2',
                       'epochs_phase2', 'batch_size', 'weights', 'augment',
                       'adam_beta1', 'adam_beta2', 'adam_eps', 'seed'])
    defaults = {
        'lr_phase1': 1e-4,
        'epochs_phase1': 10,
        'lr_phase2': 1e-5,
        'epochs_phase2': 40,
        'batch_size': 8,
        'weights': None,
        'augment': None,
        'adam_beta1': 0.9,
        'adam_beta2': 0.999,
        'adam_eps': 1e-8,
        'seed': 0,
    }
    xforms = {
        'lr_phase1': float,
        'epochs_phase1': int,
        'lr_phase2': float,
        'epochs_phase2': int,
        'batch_size': int,
        'weights': config.nested(losses.LossWeights),
        'augment': config.nested(augment.AugmentConfig),
        'adam_beta1': float,
        'adam_beta2': float,
        'adam_eps': float,
        'seed': config.uint64,
    }

    def validate(self):
        for name in ('lr_phase1', 'lr_phase2', 'adam_eps'):
            value = getattr(self, name)
            config.require(config.finite(value) and value > 0.0,
                           '%s must be positive', name)
        for name in ('epochs_phase1', 'epochs_phase2'):
            config.require(getattr(self, name) >= 0,
                           '%s must be nonnegative', name)
        config.require(self.batch_size >= 1, 'batch_size must be positive')
        for name in ('adam_beta1', 'adam_beta2'):
            config.require(0.0 <= getattr(self, name) < 1.0,
                           '%s must lie in [0, 1)', name)

    @property
    def epochs(self):
        """
        The total number of epochs.
        """

        return self.epochs_phase1 + self.epochs_phase2

    def lr_for_epoch(self, epoch):
        """
        Select the learning rate for an epoch.

        :param int epoch: The 1-based epoch number.

        :returns: ``lr_phase1`` during the first phase, ``lr_phase2``
                  afterward.
        :rtype: ``float``
        """

        return self.lr_phase1 if epoch <= self.epochs_phase1 else \
            self.lr_phase2


class AdamState(object):
    """
    The Adam optimizer's moment accumulators and step counter.  The
    moments are laid out like the model parameters.
    """

    __slots__ = ['m', 'v', 'step']

    @classmethod
    def zeros(cls, cfg):
        """
        Construct a fresh optimizer state.

        :param cfg: The model configuration.
        :type cfg: ``tanomaly.model.ModelConfig``

        :returns: The state, with zero moments and step 0.
        :rtype: ``AdamState``
        """

        return cls(model.ParamGrads.zeros(cfg), model.ParamGrads.zeros(cfg),
                   0)

    def __init__(self, m, v, step):
        self.m = m
        self.v = v
        self.step = step


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    Apply one bias-corrected Adam update.

    :param params: The current parameters.
    :type params: ``tanomaly.model.ModelParams``
    :param grads: The gradients of the objective.
    :type grads: ``tanomaly.model.ParamGrads``
    :param state: The optimizer state.
    :type state: ``AdamState``
    :param float lr: The learning rate.
    :param float beta1: The first-moment decay.
    :param float beta2: The second-moment decay.
    :param float eps: The denominator offset.

    :returns: A tuple of the new parameters and the new state.  The
              inputs are not modified.
    :rtype: ``tuple``

    :raises tanomaly.exceptions.DimensionError:
        The gradients are laid out differently from the parameters.
    :raises tanomaly.exceptions.DivergenceError:
        A gradient or updated parameter is not finite.
    """

    if grads.cfg != params.cfg or state.m.cfg != params.cfg:
        raise exceptions.DimensionError(
            'gradient/optimizer layout does not match the parameters')
    for name, arr in grads:
        if not np.all(np.isfinite(arr)):
            raise exceptions.DivergenceError(
                'non-finite gradient in %s (%d bad entries)' %
                (name, int(np.count_nonzero(~np.isfinite(arr)))))

    step = state.step + 1
    m = state.m.map(lambda m, g: beta1 * m + (1.0 - beta1) * g, grads)
    v = state.v.map(lambda v, g: beta2 * v + (1.0 - beta2) * g * g, grads)

    # Bias corrections
    corr1 = 1.0 - beta1 ** step
    corr2 = 1.0 - beta2 ** step

    def update(p, m, v):
        return p - lr * (m / corr1) / (np.sqrt(v / corr2) + eps)

    try:
        new_params = params.map(update, m, v)
    except exceptions.NonFiniteError as exc:
        raise exceptions.DivergenceError('update produced %s' % exc)

    return new_params, AdamState(m, v, step)


class TrainLog(object):
    """
    Per-epoch record of a training run.
    """

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, epoch, breakdown, lr, seconds):
        """
        Record a completed epoch.

        :param int epoch: The 1-based epoch number.
        :param breakdown: The mean loss breakdown over the epoch.
        :type breakdown: ``tanomaly.losses.LossBreakdown``
        :param float lr: The learning rate used.
        :param float seconds: The wall-clock duration of the epoch.
        """

        entry = {'epoch': epoch}
        entry.update(breakdown.as_dict())
        entry['lr'] = lr
        entry['seconds'] = seconds
        self.entries.append(entry)

    def write(self, path):
        """
        Write the log as JSON lines.

        :param str path: The log file.
        """

        with io.open(path, 'w', encoding='utf-8') as f:
            for entry in self.entries:
                f.write(six.text_type(json.dumps(entry, sort_keys=True)))
                f.write(u'\n')


def batch_objective(params, examples, weights):
    """
    Evaluate the objective and its gradient over a batch of view pairs.

    :param params: The model parameters.
    :type params: ``tanomaly.model.ModelParams``
    :param examples: A sequence of ``(ViewPair, label)`` tuples.
    :param weights: The loss weights.
    :type weights: ``tanomaly.losses.LossWeights``

    :returns: A tuple of the per-example loss breakdowns and the
              batch-mean parameter gradients.
    :rtype: ``tuple``
    """

    breakdowns = []
    traces = []
    grads = []
    for pair, label in examples:
        trace_a = model.forward(params, pair.view_a)
        trace_b = model.forward(params, pair.view_b)

        breakdowns.append(losses.total_loss(trace_a, trace_b, label,
                                            weights))
        traces.extend([trace_a, trace_b])
        grads.extend(losses.trace_grads(
            losses.loss_grads(trace_a, trace_b, label, weights)))

    param_grads = model.backward(params, traces, grads)

    return breakdowns, param_grads.scaled(1.0 / len(examples))


def _load_sequences(records, model_cfg, cache):
    """
    Load the feature sequences for some records and check their
    dimension against the model.
    """

    sequences = [cache.load(record) for record in records]
    for seq in sequences:
        if seq.D != model_cfg.D:
            raise exceptions.DimensionError(
                'video %s has dimension %d, model expects %d' %
                (seq.id, seq.D, model_cfg.D))

    return sequences


def train(model_cfg, train_records, cfg, cache=None, checkpoint=None):
    """
    Train the model with mini-batch Adam.  Each epoch shuffles the
    videos, draws a fresh view pair per video, and takes one Adam step
    per batch.  The run is a pure function of the configurations and
    data.

    :param model_cfg: The model configuration.
    :type model_cfg: ``tanomaly.model.ModelConfig``
    :param train_records: The training videos.
    :param cfg: The training configuration.
    :type cfg: ``TrainConfig``
    :param cache: An optional ``tanomaly.datastore.FeatureCache``.
    :param str checkpoint: If given, the final parameters are saved
                           here, and the parameters at the end of the
                           first phase to ``<checkpoint>.phase1``.

    :returns: A tuple of the trained parameters and the training log.
    :rtype: ``tuple``

    :raises tanomaly.exceptions.ConfigError:
        There are no training records.
    :raises tanomaly.exceptions.DivergenceError:
        A loss, gradient or parameter became non-finite.
    """

    if not train_records:
        raise exceptions.ConfigError('no training records')

    if cache is None:
        cache = datastore.FeatureCache()
    sequences = _load_sequences(train_records, model_cfg, cache)

    params = model.init_params(model_cfg)
    state = AdamState.zeros(model_cfg)
    log = TrainLog()

    shuffle_rng = np.random.default_rng(cfg.seed)
    augment_rng = np.random.default_rng(cfg.augment.seed)

    for epoch in range(1, cfg.epochs + 1):
        started = time.time()
        lr = cfg.lr_for_epoch(epoch)

        order = shuffle_rng.permutation(len(sequences))
        epoch_losses = []
        for batch, lo in enumerate(range(0, len(order), cfg.batch_size)):
            examples = [
                (augment.make_views(sequences[i], cfg.augment, augment_rng),
                 train_records[i].label)
                for i in order[lo:lo + cfg.batch_size]
            ]

            breakdowns, grads = batch_objective(params, examples,
                                                cfg.weights)
            mean = losses.LossBreakdown.mean(breakdowns, cfg.weights)
            if not config.finite(mean.total):
                raise exceptions.DivergenceError('non-finite loss', epoch,
                                                 batch)

            try:
                params, state = adam_step(params, grads, state, lr,
                                          cfg.adam_beta1, cfg.adam_beta2,
                                          cfg.adam_eps)
            except exceptions.DivergenceError as exc:
                raise exceptions.DivergenceError(str(exc), epoch, batch)

            LOG.debug('epoch %d batch %d: total %.6g', epoch, batch,
                      mean.total)
            epoch_losses.extend(breakdowns)

        summary = losses.LossBreakdown.mean(epoch_losses, cfg.weights)
        seconds = time.time() - started
        log.append(epoch, summary, lr, seconds)
        LOG.info('epoch %d/%d lr %g: cl %.6f sp %.4f sm %.6f a %.6f '
                 'total %.6f (%.2fs)', epoch, cfg.epochs, lr, summary.cl,
                 summary.sp, summary.sm, summary.a, summary.total, seconds)

        if (checkpoint and epoch == cfg.epochs_phase1 and
                cfg.epochs_phase2 > 0):
            model.save_checkpoint(params, checkpoint + '.phase1')

    if checkpoint:
        model.save_checkpoint(params, checkpoint)

    return params, log


def evaluate_epoch(params, records, weights=None, augment_cfg=None,
                   cache=None):
    """
    Compute the mean objective over a set of videos without touching
    the parameters.  Both views are the deterministic identity view,
    so the result is reproducible and the alignment term is zero.

    :param params: The model parameters.
    :type params: ``tanomaly.model.ModelParams``
    :param records: The videos to evaluate.
    :param weights: The loss weights; defaults to the published ones.
    :param augment_cfg: The augmentation configuration giving the
                        block length.
    :param cache: An optional ``tanomaly.datastore.FeatureCache``.

    :returns: The mean loss breakdown.
    :rtype: ``tanomaly.losses.LossBreakdown``

    :raises tanomaly.exceptions.MetricError:
        There are no records.
    """

    if not records:
        raise exceptions.MetricError('cannot evaluate an empty set of '
                                     'videos')

    weights = weights or losses.LossWeights()
    augment_cfg = augment_cfg or augment.AugmentConfig()
    if cache is None:
        cache = datastore.FeatureCache()

    breakdowns = []
    for record, seq in zip(records,
                           _load_sequences(records, params.cfg, cache)):
        trace = model.forward(params, augment.identity_view(seq,
                                                            augment_cfg))
        breakdowns.append(losses.total_loss(trace, trace, record.label,
                                            weights))

    return losses.LossBreakdown.mean(breakdowns, weights)
