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

import abc
import math

import six

from tanomaly import exceptions


def interval(value):
    """
    Coerce a value into an integer interval.  Accepts a 2-element
    sequence or a string of the form "lo,hi"; a single integer (or a
    string without a comma) is the degenerate interval ``(n, n)``.

    :param value: The value to coerce.

    :returns: A ``(lo, hi)`` tuple of integers.
    :rtype: ``tuple``

    :raises ValueError:
        The value cannot be interpreted as an interval.
    """

    if isinstance(value, six.string_types):
        value = [v.strip() for v in value.split(',')]
    elif isinstance(value, six.integer_types):
        value = [value]

    value = [int(v) for v in value]
    if len(value) == 1:
        value = value * 2
    if len(value) != 2:
        raise ValueError('cannot understand interval %r' % (value,))

    return tuple(value)


def uint64(value):
    """
    Coerce a seed into the range of a 64-bit unsigned integer.

    :param value: The seed value.

    :returns: The seed, as an ``int``.
    :rtype: ``int``

    :raises ValueError:
        The seed is out of range.
    """

    value = int(value)
    if value < 0 or value >= 2 ** 64:
        raise ValueError('seed %d out of range' % value)

    return value


def require(cond, msg, *args):
    """
    Raise a ``tanomaly.exceptions.ConfigError`` unless the condition
    holds.

    :param cond: The condition to check.
    :param str msg: The error message format string.
    :param *args: Arguments for the format string.
    """

    if not cond:
        raise exceptions.ConfigError(msg % args if args else msg)


def finite(value):
    """
    Determine whether a numeric value is finite.

    :param value: The value to check.

    :returns: A ``True`` value if the value is neither NaN nor
              infinite.
    :rtype: ``bool``
    """

    return not (math.isinf(value) or math.isnan(value))


@six.add_metaclass(abc.ABCMeta)
class Config(object):
    """
    An abstract base class for all configuration objects.  A
    configuration is an immutable bag of named values; subclasses
    declare which names are accepted, which have defaults, and how
    raw values (e.g., strings from the command line) are coerced.
    """

    # Defaults for configuration arguments.
    defaults = {}

    # Transforms for configuration arguments.  Defaults go through
    # the transforms as well, so nested configurations may default to
    # plain dictionaries.
    xforms = {}

    def __init__(self, **kwargs):
        """
        Initialize a ``Config`` instance.

        :param **kwargs: The configuration values.  Values not given
                         are taken from the ``defaults`` class
                         attribute.

        :raises TypeError:
            A required argument is missing, or an unknown argument
            was passed.
        :raises tanomaly.exceptions.ConfigError:
            The resulting configuration violates an invariant.
        """

        # Build the configuration arguments; start with a copy of the
        # defaults
        args = self.defaults.copy()
        args.update(kwargs)

        # Check if any required arguments are missing
        missing = self.config_args - set(args.keys())
        if missing:
            raise TypeError('missing required keyword arguments: "%s"' %
                            '", "'.join(arg for arg in sorted(missing)))

        # Check if there are any extra arguments
        extra = set(args.keys()) - self.config_args
        if extra:
            raise TypeError('unknown extra keyword arguments: "%s"' %
                            '", "'.join(arg for arg in sorted(extra)))

        # Apply the transformations
        for name, value in args.items():
            if name in self.xforms:
                try:
                    args[name] = self.xforms[name](value)
                except (TypeError, ValueError) as exc:
                    raise exceptions.ConfigError(
                        'bad value for %s: %s' % (name, exc))

        # Save the arguments and make sure they make sense
        self.args = args
        self.validate()

    def __getattr__(self, attr):
        """
        Retrieve configuration values.

        :param str attr: The name of the value to retrieve.

        :returns: The value of the designated configuration argument.
        """

        # Avoid recursion before args is set (e.g., during copy)
        if attr == 'args':
            raise AttributeError(attr)

        try:
            return self.args[attr]
        except KeyError:
            raise AttributeError("'%s' object has no attribute '%s'" %
                                 (self.__class__.__name__, attr))

    def __eq__(self, other):
        """
        Compare for equality.  Two configurations are equal if they are
        of the same class and carry the same values.

        :param other: Another object to compare to.

        :returns: The result of the comparison.
        :rtype: ``bool``
        """

        if not isinstance(other, Config):
            return NotImplemented
        return (self.__class__ is other.__class__ and
                self.as_dict() == other.as_dict())

    def __ne__(self, other):
        """
        Compare for inequality.

        :param other: Another object to compare to.

        :returns: The result of the comparison.
        :rtype: ``bool``
        """

        result = self.__eq__(other)
        if result is NotImplemented:
            return result
        return not result

    __hash__ = None

    def __repr__(self):
        """
        Return a representation of the configuration.

        :returns: The representation.
        :rtype: ``str``
        """

        return '%s(%s)' % (
            self.__class__.__name__,
            ', '.join('%s=%r' % (k, self.args[k]) for k in sorted(self.args)),
        )

    def as_dict(self):
        """
        Produce a plain dictionary of the configuration, suitable for
        JSON serialization.  Nested configurations are converted
        recursively; tuples become lists.

        :returns: The configuration values.
        :rtype: ``dict``
        """

        result = {}
        for name, value in self.args.items():
            if isinstance(value, Config):
                value = value.as_dict()
            elif isinstance(value, tuple):
                value = list(value)
            result[name] = value

        return result

    @classmethod
    def from_dict(cls, values):
        """
        Construct a configuration from a dictionary, such as one
        produced by ``as_dict()``.

        :param dict values: The configuration values.

        :returns: The new configuration.
        """

        return cls(**values)

    def replace(self, **kwargs):
        """
        Construct a copy of this configuration with some values changed.

        :param **kwargs: The values to change.

        :returns: A new configuration of the same class.
        """

        args = self.args.copy()
        args.update(kwargs)
        return self.__class__(**args)

    @abc.abstractproperty
    def config_args(self):
        """
        The ``set`` of accepted configuration argument names.  This
        should be the full list; to provide defaults for some
        arguments, override the ``defaults`` class attribute with a
        dictionary mapping those argument names to the appropriate
        default.
        """

        pass  # pragma: no cover

    @abc.abstractmethod
    def validate(self):
        """
        Check the configuration invariants.  Called at the end of
        construction.

        :raises tanomaly.exceptions.ConfigError:
            An invariant is violated.
        """

        pass  # pragma: no cover


def nested(cls):
    """
    Construct a transform that coerces a dictionary into a nested
    configuration of the given class.  Configuration instances are
    passed through unchanged.

    :param cls: The configuration class.

    :returns: A transform function.
    """

    def xform(value):
        if isinstance(value, cls):
            return value
        return cls(**dict(value or {}))

    return xform
