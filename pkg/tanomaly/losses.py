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
import math

import numpy as np

from tanomaly import config
from tanomaly import exceptions
from tanomaly import model


# Probabilities are clamped to this margin before taking logarithms
BCE_EPS = 1e-7


class LossWeights(config.Config):
    """
    Weights of the sparsity, smoothness and alignment terms of the
    objective.
    """

    config_args = set(['alpha', 'beta', 'gamma'])
    defaults = {
        'alpha': 2e-8,
        'beta': 0.002,
        'gamma': 0.5,
    }
    xforms = {
        'alpha': float,
        'beta': float,
        'gamma': float,
    }

    def validate(self):
        for name in ('alpha', 'beta', 'gamma'):
            value = getattr(self, name)
            config.require(config.finite(value) and value >= 0.0,
                           '%s must be nonnegative and finite', name)


class LossBreakdown(object):
    """
    The four terms of the objective and their weighted total.
    """

    __slots__ = ['cl', 'sp', 'sm', 'a', 'total']

    @classmethod
    def mean(cls, breakdowns, weights):
        """
        Average several breakdowns term by term.  The total is
        recomputed from the averaged terms.

        :param breakdowns: A non-empty sequence of breakdowns.
        :param weights: The loss weights.
        :type weights: ``LossWeights``

        :returns: The averaged breakdown.
        :rtype: ``LossBreakdown``
        """

        if not breakdowns:
            raise ValueError('cannot average zero loss breakdowns')

        count = float(len(breakdowns))
        return cls(
            _lsum(b.cl for b in breakdowns) / count,
            _lsum(b.sp for b in breakdowns) / count,
            _lsum(b.sm for b in breakdowns) / count,
            _lsum(b.a for b in breakdowns) / count,
            weights,
        )

    def __init__(self, cl, sp, sm, a, weights):
        """
        Initialize a ``LossBreakdown`` instance.

        :param float cl: The classification term.
        :param float sp: The sparsity term.
        :param float sm: The smoothness term.
        :param float a: The alignment term.
        :param weights: The loss weights used to form the total.
        :type weights: ``LossWeights``
        """

        self.cl = float(cl)
        self.sp = float(sp)
        self.sm = float(sm)
        self.a = float(a)
        self.total = (self.cl + weights.alpha * self.sp +
                      weights.beta * self.sm + weights.gamma * self.a)

    def __repr__(self):
        return ('<LossBreakdown cl=%g sp=%g sm=%g a=%g total=%g>' %
                (self.cl, self.sp, self.sm, self.a, self.total))

    def as_dict(self):
        return collections.OrderedDict(
            (name, getattr(self, name)) for name in self.__slots__)


def _lsum(values):
    """
    Sum values strictly left to right.
    """

    total = 0.0
    for value in values:
        total += float(value)
    return total


def _check_prob(prob):
    if not 0.0 < prob < 1.0:
        raise ValueError('probability %r outside (0, 1)' % (prob,))


def bce(prob, y):
    """
    Binary cross entropy of a probability against a 0/1 label.  The
    probability is clamped to ``[1e-7, 1 - 1e-7]`` before the
    logarithm.

    :param float prob: The predicted probability, in (0, 1).
    :param int y: The label.

    :returns: The loss.
    :rtype: ``float``

    :raises ValueError:
        The probability lies outside the open unit interval.
    """

    _check_prob(prob)
    prob = min(max(prob, BCE_EPS), 1.0 - BCE_EPS)

    if y:
        return -math.log(prob)
    return -math.log(1.0 - prob)


def bce_grad(prob, y):
    """
    Derivative of ``bce()`` with respect to the probability.  The
    derivative vanishes where the clamp is active.

    :param float prob: The predicted probability, in (0, 1).
    :param int y: The label.

    :returns: The derivative.
    :rtype: ``float``
    """

    _check_prob(prob)
    if prob < BCE_EPS or prob > 1.0 - BCE_EPS:
        return 0.0

    if y:
        return -1.0 / prob
    return 1.0 / (1.0 - prob)


def sparsity(lam):
    """
    The l1 norm of the attention coefficients; since they are all
    positive this is simply their sum.

    :param lam: The attention coefficients.

    :returns: The sparsity term.
    :rtype: ``float``
    """

    return _lsum(abs(v) for v in lam)


def sparsity_grad(lam):
    return np.sign(np.asarray(lam, dtype=np.float64))


def smoothness(lam):
    """
    Sum of squared differences of adjacent attention coefficients.

    :param lam: The attention coefficients.

    :returns: The smoothness term; 0 for a single coefficient.
    :rtype: ``float``
    """

    lam = np.asarray(lam, dtype=np.float64)
    return _lsum(np.square(lam[:-1] - lam[1:]))


def smoothness_grad(lam):
    """
    Gradient of ``smoothness()`` with respect to each coefficient.

    :param lam: The attention coefficients.

    :returns: The gradient vector.
    :rtype: ``numpy.ndarray``
    """

    lam = np.asarray(lam, dtype=np.float64)
    diff = lam[:-1] - lam[1:]

    grad = np.zeros_like(lam)
    grad[:-1] += 2.0 * diff
    grad[1:] -= 2.0 * diff
    return grad


def _check_lengths(lam_a, lam_b):
    if len(lam_a) != len(lam_b):
        raise exceptions.DimensionError(
            'attention vectors differ in length: %d != %d' %
            (len(lam_a), len(lam_b)))


def alignment(lam_a, lam_b):
    """
    Squared distance between the attention coefficients of two views
    of the same sequence.

    :param lam_a: The coefficients of the first view.
    :param lam_b: The coefficients of the second view.

    :returns: The alignment term.
    :rtype: ``float``

    :raises tanomaly.exceptions.DimensionError:
        The vectors differ in length.
    """

    _check_lengths(lam_a, lam_b)
    diff = np.asarray(lam_a, dtype=np.float64) - np.asarray(lam_b,
                                                            dtype=np.float64)
    return _lsum(np.square(diff))


def alignment_grad(lam_a, lam_b):
    """
    Gradient of ``alignment()`` with respect to the first argument;
    the gradient with respect to the second is its negation.
    """

    _check_lengths(lam_a, lam_b)
    return 2.0 * (np.asarray(lam_a, dtype=np.float64) -
                  np.asarray(lam_b, dtype=np.float64))


def total_loss(trace_a, trace_b, y, w):
    """
    Evaluate the full objective on the two views of one sequence.  The
    classification, sparsity and smoothness terms are averaged over
    both views; alignment is the only term linking them.

    :param trace_a: The forward trace of the first view.
    :type trace_a: ``tanomaly.model.ForwardTrace``
    :param trace_b: The forward trace of the second view.
    :type trace_b: ``tanomaly.model.ForwardTrace``
    :param int y: The video-level label.
    :param w: The loss weights.
    :type w: ``LossWeights``

    :returns: The loss breakdown.
    :rtype: ``LossBreakdown``
    """

    _check_lengths(trace_a.lam, trace_b.lam)

    return LossBreakdown(
        (bce(trace_a.prob, y) + bce(trace_b.prob, y)) / 2.0,
        (sparsity(trace_a.lam) + sparsity(trace_b.lam)) / 2.0,
        (smoothness(trace_a.lam) + smoothness(trace_b.lam)) / 2.0,
        alignment(trace_a.lam, trace_b.lam),
        w,
    )


# Partial derivatives of the objective of one view pair
LossGrads = collections.namedtuple('LossGrads',
                                   ['dlam_a', 'dlam_b', 'dprob_a', 'dprob_b'])


def loss_grads(trace_a, trace_b, y, w):
    """
    Compute the exact partial derivatives of ``total_loss()`` with
    respect to both views' attention coefficients and probabilities.

    :param trace_a: The forward trace of the first view.
    :param trace_b: The forward trace of the second view.
    :param int y: The video-level label.
    :param w: The loss weights.
    :type w: ``LossWeights``

    :returns: The gradients.
    :rtype: ``LossGrads``
    """

    _check_lengths(trace_a.lam, trace_b.lam)

    dalign = alignment_grad(trace_a.lam, trace_b.lam)
    dlam_a = (0.5 * w.alpha * sparsity_grad(trace_a.lam) +
              0.5 * w.beta * smoothness_grad(trace_a.lam) +
              w.gamma * dalign)
    dlam_b = (0.5 * w.alpha * sparsity_grad(trace_b.lam) +
              0.5 * w.beta * smoothness_grad(trace_b.lam) -
              w.gamma * dalign)

    return LossGrads(dlam_a, dlam_b,
                     0.5 * bce_grad(trace_a.prob, y),
                     0.5 * bce_grad(trace_b.prob, y))


def trace_grads(grads):
    """
    Split ``LossGrads`` into the per-trace upstream gradients consumed
    by ``tanomaly.model.backward()``.

    :param grads: The loss gradients.
    :type grads: ``LossGrads``

    :returns: A list of two ``tanomaly.model.TraceGrad``, for the
              first and second view.
    :rtype: ``list``
    """

    return [model.TraceGrad(grads.dlam_a, grads.dprob_a),
            model.TraceGrad(grads.dlam_b, grads.dprob_b)]
