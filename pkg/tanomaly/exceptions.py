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


class TanomalyError(Exception):
    """
    Base class for all errors raised by ``tanomaly``.
    """

    pass


class ConfigError(TanomalyError, ValueError):
    """
    A configuration object was constructed with values violating its
    invariants.
    """

    pass


class FormatError(TanomalyError, ValueError):
    """
    A file does not conform to the expected on-disk format.
    """

    def __init__(self, msg, path=None):
        """
        Initialize a ``FormatError`` instance.

        :param str msg: The error message.
        :param str path: The offending file, if known.
        """

        super(FormatError, self).__init__(
            msg if path is None else '%s: %s' % (path, msg))
        self.path = path


class BadMagicError(FormatError):
    """
    The file does not begin with the expected magic bytes.
    """

    pass


class UnsupportedVersionError(FormatError):
    """
    The file format version is not one we can read.
    """

    pass


class TruncatedError(FormatError):
    """
    The file ended before the header or payload was complete.
    """

    pass


class SizeMismatchError(FormatError):
    """
    The payload size does not agree with the header (including
    forbidden trailing bytes).
    """

    pass


class NonFiniteError(FormatError):
    """
    An array contains NaN or infinite values.
    """

    pass


class ManifestError(FormatError):
    """
    A manifest line could not be parsed or validated.
    """

    def __init__(self, msg, path=None, lineno=None):
        """
        Initialize a ``ManifestError`` instance.

        :param str msg: The error message.
        :param str path: The manifest file.
        :param int lineno: The 1-based line number of the offending
                           record.
        """

        if lineno is not None:
            msg = 'line %d: %s' % (lineno, msg)
        super(ManifestError, self).__init__(msg, path)
        self.lineno = lineno


class DanglingFeatureError(ManifestError):
    """
    A manifest record references a feature file that does not exist.
    """

    pass


class MILConsistencyError(ManifestError):
    """
    A record's video label disagrees with its segment labels.
    """

    pass


class SegmentCountError(ManifestError):
    """
    A record's segment labels do not match the length of its feature
    sequence.
    """

    pass


class DimensionError(TanomalyError, ValueError):
    """
    Array shapes are inconsistent with each other or with the model
    configuration.
    """

    pass


class TraceMismatchError(TanomalyError, ValueError):
    """
    A forward trace was paired with parameters other than those that
    produced it.
    """

    pass


class DivergenceError(TanomalyError, ArithmeticError):
    """
    Training produced a non-finite loss, gradient or parameter.
    """

    def __init__(self, msg, epoch=None, batch=None):
        """
        Initialize a ``DivergenceError`` instance.

        :param str msg: The error message.
        :param int epoch: The epoch in which training diverged.
        :param int batch: The index of the offending batch within the
                          epoch.
        """

        if epoch is not None:
            msg = 'epoch %d, batch %s: %s' % (epoch, batch, msg)
        super(DivergenceError, self).__init__(msg)
        self.epoch = epoch
        self.batch = batch


class MetricError(TanomalyError, ValueError):
    """
    A metric is undefined for the given inputs.
    """

    pass
