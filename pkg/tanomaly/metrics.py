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
import json
import logging

import numpy as np
from scipy import stats

from tanomaly import datastore
from tanomaly import exceptions
from tanomaly import model
from tanomaly import proposals


LOG = logging.getLogger(__name__)

# The report granularities, in table order
LEVELS = ('video', 'segment', 'frame_proposal', 'frame')

# The per-segment scores that may feed the segment and frame rows
SEGMENT_SCORES = ('lam', 'tcam', 'wtcam')

LevelScore = collections.namedtuple('LevelScore', ['auc', 'ap'])


class ScoredSet(object):
    """
    A set of scored items with binary ground truth.
    """

    __slots__ = ['scores', 'labels']

    def __init__(self, scores, labels):
        """
        Initialize a ``ScoredSet`` instance.

        :param scores: The item scores; finite reals.
        :param labels: The item labels; each 0 or 1.

        :raises tanomaly.exceptions.MetricError:
            The vectors differ in length, a score is not finite, or a
            label is not binary.
        """

        self.scores = np.asarray(scores, dtype=np.float64).ravel()
        labels = np.asarray(labels).ravel()

        if len(self.scores) != len(labels):
            raise exceptions.MetricError(
                'have %d scores for %d labels' %
                (len(self.scores), len(labels)))
        if not np.all(np.isfinite(self.scores)):
            raise exceptions.MetricError('scores must be finite')
        if not np.all((labels == 0) | (labels == 1)):
            raise exceptions.MetricError('labels must be 0 or 1')

        self.labels = labels.astype(np.int8)

    def __len__(self):
        return len(self.scores)

    @property
    def positives(self):
        return int(np.count_nonzero(self.labels))

    @property
    def negatives(self):
        return len(self) - self.positives


def auc(scored):
    """
    Compute the area under the ROC curve: the probability that a
    random positive outscores a random negative, ties counting one
    half.

    :param scored: The scored set.
    :type scored: ``ScoredSet``

    :returns: The AUC.
    :rtype: ``float``

    :raises tanomaly.exceptions.MetricError:
        The set does not contain both classes.
    """

    pos = scored.positives
    neg = scored.negatives
    if not pos or not neg:
        raise exceptions.MetricError(
            'AUC needs both classes (have %d positive, %d negative)' %
            (pos, neg))

    # Mann-Whitney U from average ranks
    ranks = stats.rankdata(scored.scores)
    rank_sum = np.sum(ranks[scored.labels == 1])

    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def ap(scored):
    """
    Compute the average precision: the area under the non-interpolated
    precision-recall step curve.  Items are ranked by descending score
    with ascending index breaking ties; a group of equal scores forms a
    single step of the curve, so the order within it does not matter.

    :param scored: The scored set.
    :type scored: ``ScoredSet``

    :returns: The average precision.
    :rtype: ``float``

    :raises tanomaly.exceptions.MetricError:
        The set contains no positives.
    """

    pos = scored.positives
    if not pos:
        raise exceptions.MetricError('AP needs at least one positive')

    order = np.lexsort((np.arange(len(scored)), -scored.scores))
    scores = scored.scores[order]
    labels = scored.labels[order]

    # The last index of each group of equal scores
    ends = np.append(np.flatnonzero(np.diff(scores)), len(scores) - 1)

    tps = np.cumsum(labels)[ends]
    precision = tps / (ends + 1.0)
    # New true positives per step; recall grows by gained / pos
    gained = np.diff(np.append(0, tps))

    total = 0.0
    for count, prec in zip(gained, precision):
        total += int(count) * prec

    return min(1.0, float(total) / pos)


class EvalReport(object):
    """
    AUC and AP at the four granularities: video, segment, frame-level
    proposal and frame.  ``macro`` holds the per-video means of the
    three temporal granularities over the videos whose ground truth
    contains both classes.
    """

    def __init__(self, video, segment, frame_proposal, frame, macro=None,
                 label=None):
        self.video = LevelScore(*video)
        self.segment = LevelScore(*segment)
        self.frame_proposal = LevelScore(*frame_proposal)
        self.frame = LevelScore(*frame)
        self.macro = dict((level, LevelScore(*value))
                          for level, value in (macro or {}).items())
        self.label = label

        for level in LEVELS:
            for value in getattr(self, level):
                if not 0.0 <= value <= 1.0:
                    raise exceptions.MetricError(
                        '%s metric %r out of range' % (level, value))

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __ne__(self, other):
        result = self.__eq__(other)
        return result if result is NotImplemented else not result

    def as_dict(self):
        """
        Produce a JSON-serializable form of the report.

        :returns: The report as a dictionary.
        :rtype: ``dict``
        """

        result = dict((level, getattr(self, level)._asdict())
                      for level in LEVELS)
        result['macro'] = dict((level, value._asdict())
                               for level, value in self.macro.items())
        if self.label is not None:
            result['label'] = self.label
        return result


def _level(scores, labels):
    scored = ScoredSet(scores, labels)
    return LevelScore(auc(scored), ap(scored))


def _macro(per_video):
    """
    Average per-video metrics, skipping videos with single-class
    ground truth.
    """

    values = []
    for scores, labels in per_video:
        labels = np.asarray(labels)
        if labels.min() != labels.max():
            values.append(_level(scores, labels))

    if not values:
        return None
    return LevelScore(float(np.mean([v.auc for v in values])),
                      float(np.mean([v.ap for v in values])))


def evaluate(params, records, thr=proposals.DEFAULT_THRESHOLD,
             score='wtcam', cache=None, label=None):
    """
    Evaluate a model at the four granularities.  Scores and labels are
    pooled over all videos in record order.

    :param params: The model parameters.
    :type params: ``tanomaly.model.ModelParams``
    :param records: The ``tanomaly.datastore.VideoRecord`` instances;
                    each must carry segment labels.
    :param float thr: The proposal threshold.
    :param str score: The segment score feeding the segment and frame
                      rows: ``lam`` (attention), ``tcam`` or ``wtcam``.
    :param cache: An optional ``tanomaly.datastore.FeatureCache``.
    :param str label: An optional name for the report.

    :returns: The report.
    :rtype: ``EvalReport``

    :raises tanomaly.exceptions.MetricError:
        A record lacks segment labels, or a pooled granularity does
        not contain both classes.
    """

    if score not in SEGMENT_SCORES:
        raise exceptions.MetricError('unknown segment score %r' % score)
    if not records:
        raise exceptions.MetricError('no records to evaluate')
    for rec in records:
        if rec.segment_labels is None:
            raise exceptions.MetricError(
                'video %s has no segment labels' % rec.id)

    if cache is None:
        cache = datastore.FeatureCache()

    pooled = dict((level, ([], [])) for level in LEVELS)
    per_video = dict((level, []) for level in LEVELS[1:])

    def collect(level, scores, labels):
        pooled[level][0].append(np.atleast_1d(scores))
        pooled[level][1].append(np.atleast_1d(labels))
        if level in per_video:
            per_video[level].append((scores, labels))

    for rec in records:
        seq = cache.load(rec)
        fps = rec.frames_per_segment
        trace = proposals.compute_tcam(params, seq)
        seg_scores = getattr(trace, score)
        frame_labels = rec.frame_labels()
        props = proposals.proposals_from_trace(trace, thr, fps, rec.id)

        collect('video', model.forward(params, seq).prob, rec.label)
        collect('segment', seg_scores, rec.segment_labels)
        collect('frame', proposals.interpolate_frames(seg_scores, fps),
                frame_labels)
        collect('frame_proposal',
                proposals.rasterize_proposals(props, seq.T, fps),
                frame_labels)

        LOG.debug('scored video %s: %d segments, %d proposals',
                  rec.id, seq.T, len(props))

    levels = {}
    for level in LEVELS:
        scores, labels = pooled[level]
        try:
            levels[level] = _level(np.concatenate(scores),
                                   np.concatenate(labels))
        except exceptions.MetricError as err:
            raise exceptions.MetricError('%s level: %s' % (level, err))

    macro = {}
    for level, items in per_video.items():
        value = _macro(items)
        if value is not None:
            macro[level] = value

    return EvalReport(macro=macro, label=label, **levels)


_TABLE_HEADS = ('Video Level', 'Segment Level', 'Frame Level Proposal',
                'Frame Level')


def format_report(reports):
    """
    Render reports as a text table, one row per report and one AUC/AP
    column pair per granularity.

    :param reports: A list of ``EvalReport`` instances.

    :returns: The table.
    :rtype: ``str``
    """

    names = [r.label or 'model' for r in reports]
    width = max([len('Model')] + [len(n) for n in names])

    head1 = ' ' * width + ''.join(' | %-15s' % h[:15] for h in _TABLE_HEADS)
    head2 = '%-*s' % (width, 'Model') + ' |   AUC     AP  ' * len(LEVELS)
    lines = [head1, head2, '-' * len(head2)]

    for name, report in zip(names, reports):
        cells = ''.join(' | %6.2f %6.2f ' % (100.0 * getattr(report, lvl).auc,
                                             100.0 * getattr(report, lvl).ap)
                        for lvl in LEVELS)
        lines.append('%-*s%s' % (width, name, cells))

    return '\n'.join(lines) + '\n'


def report_line(report):
    """
    Render a report as a single machine-readable JSON line.

    :param report: The report.
    :type report: ``EvalReport``

    :returns: The JSON text, without a trailing newline.
    :rtype: ``str``
    """

    return json.dumps(report.as_dict(), sort_keys=True)
