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
import os
import struct

import numpy as np
import six

from tanomaly import config
from tanomaly import exceptions


LOG = logging.getLogger(__name__)

# Feature file layout: magic, version, T, D, then T*D little-endian
# float32 values in time-major order
FEATURE_MAGIC = b'FSEQ'
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct('<4sHII')
FEATURE_DTYPE = np.dtype('<f4')
FEATURE_EXT = '.fseq'

# Frames covered by one feature vector
FRAMES_PER_SEGMENT = 16


def _check_finite(data, path=None):
    """
    Ensure all entries of an array are finite.

    :param data: The array to check.
    :param str path: The associated file, for error reporting.

    :raises tanomaly.exceptions.NonFiniteError:
        The array contains NaN or infinite values.
    """

    if not np.all(np.isfinite(data)):
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise exceptions.NonFiniteError(
            '%d non-finite feature values' % bad, path)


class FeatureSequence(object):
    """
    Represent a variable-length sequence of ``T`` feature vectors of
    dimension ``D``, one vector per video segment.  The data is held
    as a read-only ``T x D`` float32 array.
    """

    __slots__ = ['id', 'data']

    def __init__(self, seq_id, data):
        """
        Initialize a ``FeatureSequence`` instance.

        :param str seq_id: The identifier of the sequence; usually the
                           video identifier.
        :param data: The ``T x D`` feature matrix.  It is converted to
                     float32; the conversion must be exact for the
                     binary format to round-trip.

        :raises tanomaly.exceptions.DimensionError:
            The data is not a non-empty matrix.
        :raises tanomaly.exceptions.NonFiniteError:
            The data contains non-finite values.
        """

        data = np.array(data, dtype=np.float32, order='C')
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise exceptions.DimensionError(
                'feature data must be a non-empty T x D matrix, got '
                'shape %s' % (data.shape,))
        _check_finite(data)
        data.setflags(write=False)

        self.id = seq_id
        self.data = data

    def __eq__(self, other):
        """
        Compare for equality.  Sequences are equal if their identifiers
        match and their data is bitwise identical.

        :param other: Another object to compare to.

        :returns: The result of the comparison.
        :rtype: ``bool``
        """

        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (self.id == other.id and
                self.data.shape == other.data.shape and
                self.data.tobytes() == other.data.tobytes())

    def __ne__(self, other):
        result = self.__eq__(other)
        if result is NotImplemented:
            return result
        return not result

    __hash__ = None

    def __repr__(self):
        return '<FeatureSequence %s T=%d D=%d>' % (self.id, self.T, self.D)

    @property
    def T(self):
        """
        The number of segments in the sequence.
        """

        return self.data.shape[0]

    @property
    def D(self):
        """
        The feature dimension.
        """

        return self.data.shape[1]

    def take(self, indices, seq_id=None):
        """
        Construct a new sequence from selected rows of this one.

        :param indices: The row indices to select, in order.
        :param str seq_id: The identifier of the new sequence.
                           Defaults to this sequence's identifier.

        :returns: The new sequence.  Its rows are bitwise copies of
                  the selected rows.
        :rtype: ``FeatureSequence``
        """

        return FeatureSequence(self.id if seq_id is None else seq_id,
                               self.data[np.asarray(indices, dtype=int)])


def write_features(seq, path):
    """
    Write a feature sequence to a binary feature file.

    :param seq: The sequence to write.
    :type seq: ``FeatureSequence``
    :param str path: The file to write.

    :raises tanomaly.exceptions.NonFiniteError:
        The sequence contains non-finite values; nothing is written.
    """

    # Refuse to write garbage even if someone mutated the data
    _check_finite(seq.data, path)

    payload = np.ascontiguousarray(seq.data, dtype=FEATURE_DTYPE).tobytes()
    with open(path, 'wb') as f:
        f.write(FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION,
                                    seq.T, seq.D))
        f.write(payload)

    LOG.debug('wrote %s (T=%d, D=%d) to %s', seq.id, seq.T, seq.D, path)


def _parse_header(raw, path):
    """
    Parse and validate a feature file header.

    :param bytes raw: At least the header bytes of the file.
    :param str path: The file, for error reporting.

    :returns: A tuple of ``(T, D)``.
    :rtype: ``tuple``
    """

    if raw[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise exceptions.BadMagicError('not a feature file', path)
    if len(raw) < FEATURE_HEADER.size:
        raise exceptions.TruncatedError('truncated header', path)

    _magic, version, seq_t, seq_d = FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise exceptions.UnsupportedVersionError(
            'unsupported feature file version %d' % version, path)
    if seq_t < 1 or seq_d < 1:
        raise exceptions.FormatError(
            'empty sequence (T=%d, D=%d)' % (seq_t, seq_d), path)

    return seq_t, seq_d


def read_header(path):
    """
    Read only the header of a feature file.

    :param str path: The feature file.

    :returns: A tuple of ``(T, D)``.
    :rtype: ``tuple``
    """

    with open(path, 'rb') as f:
        raw = f.read(FEATURE_HEADER.size)

    return _parse_header(raw, path)


def read_features(path, seq_id=None):
    """
    Read a feature sequence from a binary feature file.

    :param str path: The feature file.
    :param str seq_id: The identifier to give the sequence.  Defaults
                       to the file name without its extension.

    :returns: The sequence.
    :rtype: ``FeatureSequence``

    :raises tanomaly.exceptions.BadMagicError:
        The file does not begin with the magic bytes.
    :raises tanomaly.exceptions.TruncatedError:
        The header or payload is incomplete.
    :raises tanomaly.exceptions.SizeMismatchError:
        The file holds more bytes than the header declares.
    :raises tanomaly.exceptions.NonFiniteError:
        The payload contains non-finite values.
    """

    with open(path, 'rb') as f:
        raw = f.read()

    seq_t, seq_d = _parse_header(raw, path)

    # Check the payload length against the header
    expected = seq_t * seq_d * FEATURE_DTYPE.itemsize
    actual = len(raw) - FEATURE_HEADER.size
    if actual < expected:
        raise exceptions.TruncatedError(
            'payload truncated: expected %d bytes, found %d' %
            (expected, actual), path)
    elif actual > expected:
        raise exceptions.SizeMismatchError(
            'payload size mismatch: expected %d bytes, found %d' %
            (expected, actual), path)

    data = np.frombuffer(raw, dtype=FEATURE_DTYPE, count=seq_t * seq_d,
                         offset=FEATURE_HEADER.size).reshape(seq_t, seq_d)
    _check_finite(data, path)

    if seq_id is None:
        seq_id = os.path.splitext(os.path.basename(path))[0]

    LOG.debug('read %s (T=%d, D=%d) from %s', seq_id, seq_t, seq_d, path)

    return FeatureSequence(seq_id, data)


class VideoRecord(object):
    """
    Represent one video of a dataset: its identifier, the location of
    its feature file, its video-level anomaly label, and, optionally,
    its per-segment ground truth.
    """

    __slots__ = ['id', 'feature_path', 'label', 'segment_labels',
                 'frames_per_segment']

    def __init__(self, video_id, feature_path, label, segment_labels=None,
                 frames_per_segment=FRAMES_PER_SEGMENT):
        """
        Initialize a ``VideoRecord`` instance.

        :param str video_id: The video identifier.
        :param str feature_path: The path of the feature file.
        :param int label: The video-level label; 1 if an anomaly
                          appears anywhere in the video.
        :param segment_labels: An optional sequence of per-segment
                               0/1 labels.
        :param int frames_per_segment: The number of frames each
                                       segment covers.

        :raises ValueError:
            A label is not 0 or 1, or ``frames_per_segment`` is not
            positive.
        :raises tanomaly.exceptions.MILConsistencyError:
            The video label is not the logical OR of the segment
            labels.
        """

        if label not in (0, 1):
            raise ValueError('label must be 0 or 1, got %r' % (label,))
        if (not isinstance(frames_per_segment, six.integer_types) or
                frames_per_segment < 1):
            raise ValueError('frames_per_segment must be a positive '
                             'integer, got %r' % (frames_per_segment,))

        if segment_labels is not None:
            segment_labels = np.array(segment_labels, dtype=np.int8)
            if segment_labels.ndim != 1 or not np.all(
                    (segment_labels == 0) | (segment_labels == 1)):
                raise ValueError('segment labels must be a vector of 0/1')
            if int(segment_labels.max(initial=0)) != label:
                raise exceptions.MILConsistencyError(
                    'video %s has label %d but segment labels say %d' %
                    (video_id, label, int(segment_labels.max(initial=0))))
            segment_labels.setflags(write=False)

        self.id = video_id
        self.feature_path = feature_path
        self.label = int(label)
        self.segment_labels = segment_labels
        self.frames_per_segment = frames_per_segment

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (self.id == other.id and
                self.feature_path == other.feature_path and
                self.label == other.label and
                self.frames_per_segment == other.frames_per_segment and
                _labels_key(self.segment_labels) ==
                _labels_key(other.segment_labels))

    def __ne__(self, other):
        result = self.__eq__(other)
        if result is NotImplemented:
            return result
        return not result

    __hash__ = None

    def __repr__(self):
        return '<VideoRecord %s label=%d>' % (self.id, self.label)

    def frame_labels(self):
        """
        Rasterize the segment labels to frame resolution by repeating
        each segment label ``frames_per_segment`` times.

        :returns: The frame labels.
        :rtype: ``numpy.ndarray``

        :raises tanomaly.exceptions.MetricError:
            The record carries no segment labels.
        """

        if self.segment_labels is None:
            raise exceptions.MetricError(
                'video %s has no segment labels' % self.id)
        return np.repeat(self.segment_labels, self.frames_per_segment)

    def to_dict(self, base=None):
        """
        Produce the manifest representation of the record.

        :param str base: The directory the manifest lives in.  Feature
                         paths inside it are written relative to it.

        :returns: The manifest fields.
        :rtype: ``dict``
        """

        path = self.feature_path
        if base is not None:
            rel = os.path.relpath(os.path.abspath(path),
                                  os.path.abspath(base))
            if not rel.startswith(os.pardir):
                path = rel

        result = {
            'id': self.id,
            'features': path.replace(os.sep, '/'),
            'label': self.label,
        }
        if self.segment_labels is not None:
            result['segment_labels'] = ','.join(
                str(int(v)) for v in self.segment_labels)
        if self.frames_per_segment != FRAMES_PER_SEGMENT:
            result['frames_per_segment'] = self.frames_per_segment

        return result


def _labels_key(labels):
    """
    Compute a comparable key for an optional label vector.
    """

    return None if labels is None else tuple(int(v) for v in labels)


def _parse_record(line, base, path, lineno):
    """
    Parse one manifest line into a ``VideoRecord``.

    :param str line: The manifest line.
    :param str base: The directory relative feature paths are
                     resolved against.
    :param str path: The manifest file, for error reporting.
    :param int lineno: The line number, for error reporting.

    :returns: The record.
    :rtype: ``VideoRecord``
    """

    try:
        fields = json.loads(line)
    except ValueError as exc:
        raise exceptions.ManifestError('cannot parse record: %s' % exc,
                                       path, lineno)
    if not isinstance(fields, dict):
        raise exceptions.ManifestError('record must be an object',
                                       path, lineno)

    # Check the required and permitted fields
    missing = set(['id', 'features', 'label']) - set(fields)
    if missing:
        raise exceptions.ManifestError(
            'missing fields: %s' % ', '.join(sorted(missing)), path, lineno)
    extra = set(fields) - set(['id', 'features', 'label', 'segment_labels',
                               'frames_per_segment'])
    if extra:
        raise exceptions.ManifestError(
            'unknown fields: %s' % ', '.join(sorted(extra)), path, lineno)

    seg = fields.get('segment_labels')
    try:
        if isinstance(seg, six.string_types):
            seg = [int(v) for v in seg.split(',')] if seg.strip() else []
        record = VideoRecord(
            fields['id'],
            os.path.join(base, fields['features']),
            fields['label'],
            seg,
            fields.get('frames_per_segment', FRAMES_PER_SEGMENT),
        )
    except exceptions.MILConsistencyError as exc:
        raise exceptions.MILConsistencyError(str(exc), path, lineno)
    except (TypeError, ValueError) as exc:
        raise exceptions.ManifestError(str(exc), path, lineno)

    return record


def load_manifest(path):
    """
    Load and validate a dataset manifest.  Each non-blank line of the
    manifest is a JSON object with the fields ``id``, ``features``,
    ``label`` and, optionally, ``segment_labels`` (comma-separated
    0/1 values) and ``frames_per_segment``.  Relative feature paths
    are resolved against the manifest's directory.

    :param str path: The manifest file.

    :returns: The records, in manifest order.
    :rtype: ``list`` of ``VideoRecord``

    :raises tanomaly.exceptions.ManifestError:
        A line cannot be parsed.
    :raises tanomaly.exceptions.DanglingFeatureError:
        A record's feature file does not exist.
    :raises tanomaly.exceptions.SegmentCountError:
        A record's segment labels disagree with its feature file's
        length.
    :raises tanomaly.exceptions.MILConsistencyError:
        A record's label disagrees with its segment labels.
    """

    base = os.path.dirname(os.path.abspath(path))

    records = []
    with io.open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue

            record = _parse_record(line, base, path, lineno)

            # Validate against the feature file
            if not os.path.isfile(record.feature_path):
                raise exceptions.DanglingFeatureError(
                    'feature file %s does not exist' % record.feature_path,
                    path, lineno)
            seq_t, _seq_d = read_header(record.feature_path)
            if (record.segment_labels is not None and
                    len(record.segment_labels) != seq_t):
                raise exceptions.SegmentCountError(
                    'video %s has %d segment labels but %d segments' %
                    (record.id, len(record.segment_labels), seq_t),
                    path, lineno)

            records.append(record)

    LOG.debug('loaded %d records from %s', len(records), path)

    return records


def write_manifest(records, path):
    """
    Write a dataset manifest.  This is the inverse of
    ``load_manifest()``.

    :param records: The records to write.
    :param str path: The manifest file.
    """

    base = os.path.dirname(os.path.abspath(path))
    with io.open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(six.text_type(json.dumps(record.to_dict(base),
                                             sort_keys=True)))
            f.write(u'\n')


def write_dataset(sequences, records, directory, name='manifest'):
    """
    Write a complete dataset: one feature file per sequence under a
    ``features`` subdirectory, plus a manifest.  The records'
    feature paths are rewritten to point at the new files.

    :param sequences: The feature sequences.
    :param records: The corresponding records.
    :param str directory: The dataset directory; created if needed.
    :param str name: The manifest file name, without the ``.jsonl``
                     extension.

    :returns: A tuple of the manifest path and the rewritten records.
    :rtype: ``tuple``
    """

    feat_dir = os.path.join(directory, 'features')
    if not os.path.isdir(feat_dir):
        os.makedirs(feat_dir)

    written = []
    for seq, record in zip(sequences, records):
        feat_path = os.path.join(feat_dir, seq.id + FEATURE_EXT)
        write_features(seq, feat_path)
        written.append(VideoRecord(record.id, feat_path, record.label,
                                   record.segment_labels,
                                   record.frames_per_segment))

    manifest = os.path.join(directory, name + '.jsonl')
    write_manifest(written, manifest)

    LOG.info('wrote %d videos to %s', len(written), manifest)

    return manifest, written


class FeatureCache(dict):
    """
    A subclass of ``dict`` that loads feature sequences lazily.  Keys
    are ``VideoRecord`` feature paths; a missing key is read from disk
    on first access and kept for later lookups.
    """

    def __missing__(self, key):
        """
        Load a feature sequence on the fly.

        :param str key: The feature file path.

        :returns: The loaded sequence.
        :rtype: ``FeatureSequence``
        """

        seq = read_features(key)

        # Save it to the mapping
        self[key] = seq

        return seq

    def load(self, record):
        """
        Retrieve the sequence for a record, checking it against the
        record's ground truth.

        :param record: The record.
        :type record: ``VideoRecord``

        :returns: The sequence, carrying the record's identifier.
        :rtype: ``FeatureSequence``
        """

        seq = self[record.feature_path]
        if (record.segment_labels is not None and
                len(record.segment_labels) != seq.T):
            raise exceptions.SegmentCountError(
                'video %s has %d segment labels but %d segments' %
                (record.id, len(record.segment_labels), seq.T))
        if seq.id != record.id:
            seq = FeatureSequence(record.id, seq.data)
            self[record.feature_path] = seq

        return seq


class SynthConfig(config.Config):
    """
    Configuration of a synthetic planted-anomaly dataset.  Normal
    segments are isotropic noise around a fixed "normal" direction;
    each anomalous video additionally has one contiguous window
    shifted along an orthogonal "anomaly" direction.
    """

    config_args = set(['num_videos', 'T_range', 'D', 'anomaly_fraction',
                       'anomaly_window_range', 'noise_scale', 'seed',
                       'anomaly_shift', 'normal_scale',
                       'frames_per_segment', 'prefix', 'direction_seed'])
    defaults = {
        'num_videos': 40,
        'T_range': (20, 40),
        'D': 16,
        'anomaly_fraction': 0.5,
        'anomaly_window_range': (4, 8),
        'noise_scale': 0.1,
        'seed': 0,
        'anomaly_shift': 1.0,
        'normal_scale': 1.0,
        'frames_per_segment': FRAMES_PER_SEGMENT,
        'prefix': 'vid',
        'direction_seed': None,
    }
    xforms = {
        'num_videos': int,
        'T_range': config.interval,
        'D': int,
        'anomaly_fraction': float,
        'anomaly_window_range': config.interval,
        'noise_scale': float,
        'seed': config.uint64,
        'anomaly_shift': float,
        'normal_scale': float,
        'frames_per_segment': int,
        'prefix': str,
        'direction_seed': config.uint64,
    }

    def __init__(self, **kwargs):
        """
        Initialize a ``SynthConfig`` instance.  The normal and anomaly
        directions are drawn from ``direction_seed``, which defaults
        to ``seed``.  It is kept by ``replace()``, so a split derived
        from a configuration with another seed shares its directions.

        :param **kwargs: The configuration values.
        """

        if kwargs.get('direction_seed') is None:
            kwargs['direction_seed'] = kwargs.get('seed',
                                                  self.defaults['seed'])
        super(SynthConfig, self).__init__(**kwargs)

    def validate(self):
        t_lo, t_hi = self.T_range
        w_lo, w_hi = self.anomaly_window_range

        config.require(self.num_videos >= 1, 'num_videos must be positive')
        config.require(1 <= t_lo <= t_hi, 'invalid T_range %s' %
                       (self.T_range,))
        config.require(self.D >= 2, 'D must be at least 2 to hold '
                       'orthogonal normal and anomaly directions')
        config.require(0.0 <= self.anomaly_fraction <= 1.0,
                       'anomaly_fraction must lie in [0, 1]')
        config.require(1 <= w_lo <= w_hi, 'invalid anomaly_window_range %s' %
                       (self.anomaly_window_range,))
        config.require(w_hi <= t_lo, 'infeasible anomaly window: maximum '
                       'window %d exceeds minimum length %d', w_hi, t_lo)
        config.require(config.finite(self.noise_scale) and
                       self.noise_scale >= 0.0,
                       'noise_scale must be nonnegative')
        config.require(config.finite(self.anomaly_shift) and
                       self.anomaly_shift > self.noise_scale,
                       'anomaly_shift must exceed noise_scale')
        config.require(config.finite(self.normal_scale),
                       'normal_scale must be finite')
        config.require(self.frames_per_segment >= 1,
                       'frames_per_segment must be positive')


def _directions(rng, dim):
    """
    Draw a random unit "normal" direction and a unit "anomaly"
    direction orthogonal to it.

    :param rng: The random generator.
    :param int dim: The feature dimension; at least 2.

    :returns: A tuple of two unit vectors.
    """

    normal = rng.standard_normal(dim)
    normal /= np.linalg.norm(normal)

    anomaly = rng.standard_normal(dim)
    anomaly -= anomaly.dot(normal) * normal
    anomaly /= np.linalg.norm(anomaly)

    return normal, anomaly


def generate_synthetic(cfg):
    """
    Generate a synthetic dataset with planted anomalies.  The result
    is a pure function of the configuration.

    :param cfg: The dataset configuration.
    :type cfg: ``SynthConfig``

    :returns: A tuple of the list of feature sequences and the list
              of corresponding records.  Record feature paths are
              relative (``features/<id>.fseq``); use
              ``write_dataset()`` to place them on disk.
    :rtype: ``tuple``
    """

    normal, anomaly = _directions(np.random.default_rng(cfg.direction_seed),
                                  cfg.D)
    rng = np.random.default_rng(cfg.seed)

    # Pick exactly which videos are anomalous
    num_anomalous = int(round(cfg.anomaly_fraction * cfg.num_videos))
    anomalous = set(int(i) for i in
                    rng.permutation(cfg.num_videos)[:num_anomalous])

    t_lo, t_hi = cfg.T_range
    w_lo, w_hi = cfg.anomaly_window_range

    sequences = []
    records = []
    for i in range(cfg.num_videos):
        video_id = '%s%04d' % (cfg.prefix, i)
        seq_t = int(rng.integers(t_lo, t_hi + 1))

        data = (cfg.normal_scale * normal +
                cfg.noise_scale * rng.standard_normal((seq_t, cfg.D)))
        labels = np.zeros(seq_t, dtype=np.int8)

        if i in anomalous:
            window = int(rng.integers(w_lo, w_hi + 1))
            start = int(rng.integers(0, seq_t - window + 1))
            data[start:start + window] += cfg.anomaly_shift * anomaly
            labels[start:start + window] = 1

        sequences.append(FeatureSequence(video_id, data))
        records.append(VideoRecord(
            video_id, 'features/%s%s' % (video_id, FEATURE_EXT),
            int(labels.max()), labels, cfg.frames_per_segment))

    LOG.debug('generated %d synthetic videos (%d anomalous)',
              cfg.num_videos, num_anomalous)

    return sequences, records
