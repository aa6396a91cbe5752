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

import numpy as np

from tanomaly import augment
from tanomaly import datastore
from tanomaly import losses
from tanomaly import model


LOG = logging.getLogger(__name__)

# Loss weights used by the check; large enough that every term moves
# the objective measurably
CHECK_WEIGHTS = losses.LossWeights(alpha=0.1, beta=0.5, gamma=0.5)

# Pass threshold on the maximum relative error
TOLERANCE = 1e-4

# Floor of the relative error denominator; finite differences of an
# O(1) objective carry absolute errors near 1e-10 and worse on the
# occasional coordinate with a large third derivative
REL_FLOOR = 1e-5

MAX_T = 16
MAX_D = 8

GradCheckResult = collections.namedtuple(
    'GradCheckResult',
    ['max_rel_error', 'worst', 'analytic', 'numeric', 'instances',
     'checked', 'skipped'])


def rel_error(analytic, numeric):
    """
    Compute the relative error between an analytic and a numeric
    derivative.

    :param float analytic: The analytic derivative.
    :param float numeric: The finite-difference estimate.

    :returns: ``|a - n| / max(REL_FLOOR, |a| + |n|)``.
    :rtype: ``float``
    """

    return abs(analytic - numeric) / max(REL_FLOOR,
                                         abs(analytic) + abs(numeric))


def random_instance(rng):
    """
    Draw a random gradient-check instance: a small model with random
    weights and biases, a view pair of a random sequence and a label.

    :param rng: The random number generator.
    :type rng: ``numpy.random.Generator``

    :returns: A tuple of the parameters, the ``ViewPair`` and the label.
    :rtype: ``tuple``
    """

    dim = int(rng.integers(2, MAX_D + 1))
    cfg = model.ModelConfig(D=dim, attn_hidden=int(rng.integers(2, 7)),
                            clf_hidden=int(rng.integers(2, 7)))
    params = model.ModelParams(cfg, dict(
        (name, rng.normal(scale=0.4, size=shape))
        for name, shape in cfg.shapes().items()))

    seq_t = int(rng.integers(2, MAX_T + 1))
    seq = datastore.FeatureSequence(
        'check', rng.normal(size=(seq_t, dim)).astype(np.float32))
    aug = augment.AugmentConfig(block_len=int(rng.integers(1, 4)))

    return params, augment.make_views(seq, aug, rng), int(rng.integers(2))


def _evaluate(params, pair, y, weights):
    """
    Evaluate the objective of a view pair, along with the on/off
    pattern of every piecewise-linear unit.
    """

    trace_a = model.forward(params, pair.view_a)
    trace_b = model.forward(params, pair.view_b)
    total = losses.total_loss(trace_a, trace_b, y, weights).total

    pattern = []
    for trace in (trace_a, trace_b):
        pattern.extend([trace.attn['h'] > 0, trace.attn['z1'] > 0,
                        trace.clf['zq'] > 0,
                        np.abs(trace.attn['s']) <= model.LOGIT_LIMIT,
                        np.array([abs(trace.clf['logit']) <=
                                  model.LOGIT_LIMIT])])
        pattern.append(np.array([
            losses.BCE_EPS <= trace.prob <= 1.0 - losses.BCE_EPS]))

    return total, pattern


def _same_pattern(pat1, pat2):
    return all(np.array_equal(a, b) for a, b in zip(pat1, pat2))


def analytic_grads(params, pair, y, weights):
    """
    Compute the gradients of the objective of a view pair by
    back-propagation.

    :returns: The gradients.
    :rtype: ``tanomaly.model.ParamGrads``
    """

    trace_a = model.forward(params, pair.view_a)
    trace_b = model.forward(params, pair.view_b)
    grads = losses.loss_grads(trace_a, trace_b, y, weights)

    return model.backward(params, [trace_a, trace_b],
                          losses.trace_grads(grads))


def check_instance(params, pair, y, weights=CHECK_WEIGHTS, eps=1e-5,
                   perturb=False):
    """
    Compare analytic and central finite-difference gradients of one
    instance, coordinate by coordinate.  Coordinates whose
    perturbation flips a ReLU or the probability clamp are skipped,
    since the objective is not differentiable across them.

    :returns: A tuple of the maximum relative error, the worst
              coordinate as ``(name, index)``, its analytic and
              numeric values, and the numbers of checked and skipped
              coordinates.
    :rtype: ``tuple``
    """

    grads = analytic_grads(params, pair, y, weights)
    if perturb:
        grads = grads.scaled(1.01)

    worst = (0.0, None, 0.0, 0.0)
    checked = skipped = 0
    for name, arr in params:
        for idx in np.ndindex(arr.shape):
            values = {}
            patterns = []
            for sign in (1, -1):
                moved = arr.copy()
                moved[idx] += sign * eps
                values[sign], pattern = _evaluate(
                    model.ModelParams(params.cfg,
                                      dict(params.arrays, **{name: moved})),
                    pair, y, weights)
                patterns.append(pattern)

            if not _same_pattern(*patterns):
                skipped += 1
                continue

            checked += 1
            numeric = (values[1] - values[-1]) / (2.0 * eps)
            analytic = float(grads[name][idx])
            err = rel_error(analytic, numeric)
            if err > worst[0] or worst[1] is None:
                worst = (err, (name, idx), analytic, numeric)

    return worst + (checked, skipped)


def check_gradients(instances=20, seed=0, eps=1e-5, perturb=False,
                    weights=CHECK_WEIGHTS):
    """
    Run the finite-difference suite on random instances.

    :param int instances: The number of random instances.
    :param int seed: The seed of the instance generator.
    :param float eps: The finite-difference step.
    :param bool perturb: If ``True``, corrupt the analytic gradients
                         so the check must fail.
    :param weights: The loss weights.
    :type weights: ``tanomaly.losses.LossWeights``

    :returns: The overall result.
    :rtype: ``GradCheckResult``
    """

    rng = np.random.default_rng(seed)

    best = (0.0, None, 0.0, 0.0)
    checked = skipped = 0
    for i in range(instances):
        params, pair, y = random_instance(rng)
        result = check_instance(params, pair, y, weights, eps, perturb)
        LOG.debug('instance %d: T=%d D=%d max error %.3g (%d checked, '
                  '%d skipped)', i, pair.view_a.T, params.cfg.D,
                  result[0], result[4], result[5])

        checked += result[4]
        skipped += result[5]
        if result[0] > best[0] or best[1] is None:
            best = result[:4]

    return GradCheckResult(best[0], best[1], best[2], best[3], instances,
                           checked, skipped)
