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

import numpy as np
import six

from tanomaly import datastore
from tanomaly import intervals
from tanomaly import model


LOG = logging.getLogger(__name__)

# Weighted T-CAM scores below this are dropped from the candidates
DEFAULT_THRESHOLD = 0.35

# Columns of the per-segment score dump
DUMP_COLUMNS = ('t', 'lambda', 'tcam', 'wtcam', 'proposal', 'truth')


class ScoreTrace(object):
    """
    Per-segment scores of one sequence: the attention coefficients, the
    temporal class activation map (the classifier's guess on each
    segment alone) and their product, the weighted T-CAM.
    """

    __slots__ = ['lam', 'tcam', 'wtcam']

    def __init__(self, lam, tcam):
        """
        Initialize a ``ScoreTrace`` instance.

        :param lam: The attention coefficients.
        :param tcam: The T-CAM values.
        """

        self.lam = np.asarray(lam, dtype=np.float64)
        self.tcam = np.asarray(tcam, dtype=np.float64)
        if self.lam.shape != self.tcam.shape or self.lam.ndim != 1:
            raise ValueError('attention and T-CAM must be vectors of the '
                             'same length')
        self.wtcam = self.lam * self.tcam

    @property
    def T(self):
        return len(self.lam)


class Proposal(object):
    """
    A temporal interval hypothesized to contain an anomaly.  Segment
    indices are 0-based and inclusive.
    """

    __slots__ = ['video_id', 't_start', 't_end', 'score',
                 'frames_per_segment', 'largest']

    def __init__(self, t_start, t_end, score, frames_per_segment=16,
                 largest=False, video_id=None):
        self.video_id = video_id
        self.t_start = int(t_start)
        self.t_end = int(t_end)
        self.score = float(score)
        self.frames_per_segment = frames_per_segment
        self.largest = bool(largest)

    def __repr__(self):
        return '<Proposal %d-%d score=%.4f%s>' % (
            self.t_start, self.t_end, self.score,
            ' largest' if self.largest else '')

    def __len__(self):
        return self.t_end - self.t_start + 1

    @property
    def frame_start(self):
        """
        The first frame covered by the proposal.
        """

        return self.t_start * self.frames_per_segment

    @property
    def frame_end(self):
        """
        The last frame covered by the proposal (inclusive).
        """

        return (self.t_end + 1) * self.frames_per_segment - 1

    def to_dict(self):
        return {
            'id': self.video_id,
            't_start': self.t_start,
            't_end': self.t_end,
            'frame_start': self.frame_start,
            'frame_end': self.frame_end,
            'score': self.score,
            'largest': self.largest,
        }


def compute_tcam(params, seq):
    """
    Compute the score trace of a sequence.  Each T-CAM value is the
    classifier applied to that segment's feature vector alone.

    :param params: The model parameters.
    :type params: ``tanomaly.model.ModelParams``
    :param seq: The feature sequence.
    :type seq: ``tanomaly.datastore.FeatureSequence``

    :returns: The score trace.
    :rtype: ``ScoreTrace``
    """

    lam = model.attention_scores(params, seq)
    tcam = np.array([model.classify_single(params, row)
                     for row in seq.data.astype(np.float64)])

    return ScoreTrace(lam, tcam)


def threshold_filter(trace, thr=DEFAULT_THRESHOLD):
    """
    Select the segments whose weighted T-CAM reaches a threshold.

    :param trace: The score trace.
    :type trace: ``ScoreTrace``
    :param float thr: The threshold.

    :returns: A boolean mask of kept segments.
    :rtype: ``numpy.ndarray``
    """

    return trace.wtcam >= thr


def interpolate_frames(values, frames_per_segment):
    """
    Interpolate segment scores to frame resolution.  Segment scores
    sit at segment centers; frames between two centers are linearly
    interpolated, frames outside the first and last centers take the
    nearest segment's score.

    :param values: The length-T segment scores.
    :param int frames_per_segment: The number of frames per segment.

    :returns: The ``T * frames_per_segment`` frame scores.
    :rtype: ``numpy.ndarray``
    """

    values = np.asarray(values, dtype=np.float64)
    centers = (np.arange(len(values)) + 0.5) * frames_per_segment
    frames = np.arange(len(values) * frames_per_segment, dtype=np.float64)

    return np.interp(frames, centers, values)


def connected_components(mask):
    """
    Find the maximal runs of true values in a mask.

    :param mask: A boolean vector.

    :returns: The runs, as inclusive ``(start, end)`` ranges in
              increasing order.
    :rtype: ``list`` of ``tanomaly.intervals.Range``
    """

    return list(intervals.IntervalSet.from_mask(mask).ranges)


def score_proposal(trace, interval):
    """
    Score a proposal as the mean weighted T-CAM over its interval.

    :param trace: The score trace.
    :type trace: ``ScoreTrace``
    :param interval: The inclusive ``(t_start, t_end)`` interval.

    :returns: The proposal score.
    :rtype: ``float``

    :raises ValueError:
        The interval is empty or out of range.
    """

    t_start, t_end = interval
    if not 0 <= t_start <= t_end < trace.T:
        raise ValueError('invalid interval %d-%d for %d segments' %
                         (t_start, t_end, trace.T))

    total = 0.0
    for value in trace.wtcam[t_start:t_end + 1]:
        total += float(value)

    return total / max(1, t_end - t_start + 1)


def proposals_from_trace(trace, thr=DEFAULT_THRESHOLD,
                         frames_per_segment=datastore.FRAMES_PER_SEGMENT,
                         video_id=None):
    """
    Generate proposals from a score trace: threshold, extract the
    connected components, and score each one.  The longest component
    (the earliest, on ties) is flagged as the largest.

    :param trace: The score trace.
    :type trace: ``ScoreTrace``
    :param float thr: The threshold on the weighted T-CAM.
    :param int frames_per_segment: The number of frames per segment.
    :param str video_id: The video the proposals belong to.

    :returns: The proposals, sorted by descending score, then by
              start.
    :rtype: ``list`` of ``Proposal``
    """

    components = connected_components(threshold_filter(trace, thr))

    largest = None
    for rng in components:
        if largest is None or (rng.end - rng.start >
                               largest.end - largest.start):
            largest = rng

    result = [Proposal(rng.start, rng.end, score_proposal(trace, rng),
                       frames_per_segment, rng is largest, video_id)
              for rng in components]
    result.sort(key=lambda p: (-p.score, p.t_start))

    return result


def generate_proposals(params, seq, thr=DEFAULT_THRESHOLD,
                       frames_per_segment=datastore.FRAMES_PER_SEGMENT):
    """
    Run the complete proposal pipeline on a sequence.

    :param params: The model parameters.
    :type params: ``tanomaly.model.ModelParams``
    :param seq: The feature sequence.
    :type seq: ``tanomaly.datastore.FeatureSequence``
    :param float thr: The threshold on the weighted T-CAM.
    :param int frames_per_segment: The number of frames per segment.

    :returns: The proposals, sorted by descending score.
    :rtype: ``list`` of ``Proposal``
    """

    return proposals_from_trace(compute_tcam(params, seq), thr,
                                frames_per_segment, seq.id)


def rasterize_proposals(proposals, seq_t, frames_per_segment):
    """
    Convert proposals to frame scores: frames inside a proposal take
    its score, all others score 0.

    :param proposals: The proposals of one video; disjoint.
    :param int seq_t: The number of segments of the video.
    :param int frames_per_segment: The number of frames per segment.

    :returns: The ``seq_t * frames_per_segment`` frame scores.
    :rtype: ``numpy.ndarray``
    """

    frames = np.zeros(seq_t * frames_per_segment)
    for prop in proposals:
        frames[prop.t_start * frames_per_segment:
               (prop.t_end + 1) * frames_per_segment] = prop.score

    return frames


def write_proposals(path, proposals):
    """
    Write proposals as JSON lines, one line per proposal.

    :param str path: The output file.
    :param proposals: An iterable of ``Proposal`` instances.
    """

    count = 0
    with io.open(path, 'w', encoding='utf-8') as f:
        for prop in proposals:
            f.write(six.text_type(json.dumps(prop.to_dict(),
                                             sort_keys=True)))
            f.write(u'\n')
            count += 1

    LOG.debug('wrote %d proposals to %s', count, path)


def score_dump(trace, proposals, truth=None):
    """
    Tabulate a video's scores per segment for plotting: segment index,
    attention, T-CAM, weighted T-CAM, the score of the proposal
    covering the segment (0 outside proposals) and the ground truth
    (-1 when unknown).

    :param trace: The score trace.
    :type trace: ``ScoreTrace``
    :param proposals: The video's proposals.
    :param truth: The optional segment labels.

    :returns: A ``T x 6`` array with the columns of ``DUMP_COLUMNS``.
    :rtype: ``numpy.ndarray``
    """

    prop_scores = rasterize_proposals(proposals, trace.T, 1)
    truth = (np.full(trace.T, -1.0) if truth is None
             else np.asarray(truth, dtype=np.float64))

    return np.column_stack([np.arange(trace.T), trace.lam, trace.tcam,
                            trace.wtcam, prop_scores, truth])


def write_score_dump(path, rows):
    """
    Write a score dump as whitespace-separated text with a header.

    :param str path: The output file.
    :param rows: The rows produced by ``score_dump()``.
    """

    np.savetxt(path, rows, fmt=['%d', '%.8g', '%.8g', '%.8g', '%.8g', '%d'],
               header=' '.join(DUMP_COLUMNS))
