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


# Representation of an inclusive interval of segment indices
Range = collections.namedtuple('Range', ['start', 'end'])


def _search_ranges(ranges, item, lo=0, hi=None):
    """
    Locate a segment index among sorted, disjoint runs by bisection.

    :param list ranges: The sorted ``Range`` list.
    :param int item: The segment index.
    :param int lo: The first run to consider.  Default is 0.
    :param int hi: One past the last run to consider.  Default is
                   ``len(ranges)``.

    :returns: A tuple of a position and a flag.  If the flag is
              ``True``, the run at the position covers ``item``;
              otherwise the position is where a run starting at
              ``item`` would be inserted.

    :raises IndexError:
        ``lo`` or ``hi`` lies outside the list.
    """

    if hi is None:
        hi = len(ranges)
    if hi > len(ranges):
        raise IndexError('hi out of range')
    if not 0 <= lo <= hi:
        raise IndexError('lo out of range')

    while lo < hi:
        mid = (lo + hi) // 2
        run = ranges[mid]

        if item < run.start:
            hi = mid
        elif item > run.end:
            lo = mid + 1
        else:
            return mid, True

    return lo, False


def _add_range(ranges, start, end):
    """
    Cover the segments ``start`` through ``end`` (inclusive).  Runs
    that overlap or touch the new one are folded into it, so the list
    stays maximal.

    :param list ranges: The sorted ``Range`` list; updated in place.
    :param int start: The first segment to cover.
    :param int end: The last segment to cover.

    :returns: ``ranges``.
    :rtype: ``list``
    """

    first, first_inside = _search_ranges(ranges, start)
    last, last_inside = _search_ranges(ranges, end, first)

    if first == last and first_inside and last_inside:
        return ranges

    if first_inside:
        start = ranges[first].start
    if last_inside:
        end = ranges[last].end
        last += 1

    # Adjoining runs are one run
    if first > 0 and ranges[first - 1].end == start - 1:
        first -= 1
        start = ranges[first].start
    if last < len(ranges) and ranges[last].start == end + 1:
        end = ranges[last].end
        last += 1

    ranges[first:last] = [Range(start, end)]

    return ranges


class IntervalSet(object):
    """
    Represent a set of segment indices as a sorted list of maximal,
    disjoint, inclusive ``Range`` instances.  Adjoining ranges are
    always merged, so the ranges of an ``IntervalSet`` built from a
    boolean mask are exactly the mask's connected components.
    """

    __slots__ = ['_ranges']

    @classmethod
    def from_mask(cls, mask):
        """
        Construct an ``IntervalSet`` covering the true positions of a
        boolean mask.

        :param mask: An iterable of booleans.

        :returns: The interval set.
        :rtype: ``IntervalSet``
        """

        result = cls()

        # Walk the mask, adding each maximal run as it closes
        start = None
        idx = -1
        for idx, flag in enumerate(mask):
            if flag and start is None:
                start = idx
            elif not flag and start is not None:
                result.add(start, idx - 1)
                start = None

        if start is not None:
            result.add(start, idx)

        return result

    def __init__(self, ranges=None):
        """
        Initialize an ``IntervalSet`` instance.

        :param ranges: An optional iterable of ``(start, end)`` pairs
                       to initialize the set with.  Pairs may overlap
                       and may be given in any order.
        """

        self._ranges = []
        for start, end in (ranges or []):
            self.add(start, end)

    def __contains__(self, item):
        """
        Determine if an index is covered by the set.

        :param int item: The index.

        :returns: A ``True`` value if the index is covered.
        :rtype: ``bool``
        """

        return _search_ranges(self._ranges, item)[1]

    def __iter__(self):
        """
        Iterate over the covered indices, in increasing order.

        :returns: A generator producing integers.
        """

        for rng in self._ranges:
            for i in range(rng.start, rng.end + 1):
                yield i

    def __len__(self):
        """
        The length of an interval set is the number of covered indices.

        :returns: The number of covered indices.
        :rtype: ``int``
        """

        return sum(rng.end - rng.start + 1 for rng in self._ranges)

    def __bool__(self):
        """
        Convert an ``IntervalSet`` instance to boolean.

        :returns: A ``True`` value if any index is covered.
        :rtype: ``bool``
        """

        return bool(self._ranges)
    __nonzero__ = __bool__

    def __eq__(self, other):
        """
        Compare for equality.

        :param other: Another object to compare to.

        :returns: The result of the comparison.
        :rtype: ``bool``
        """

        if not isinstance(other, IntervalSet):
            return NotImplemented
        return self._ranges == other._ranges

    def __ne__(self, other):
        """
        Compare for inequality.

        :param other: Another object to compare to.

        :returns: The result of the comparison.
        :rtype: ``bool``
        """

        if not isinstance(other, IntervalSet):
            return NotImplemented
        return self._ranges != other._ranges

    __hash__ = None

    def __repr__(self):
        """
        Return a representation of the interval set.

        :returns: The representation.
        :rtype: ``str``
        """

        return 'IntervalSet(%r)' % [tuple(rng) for rng in self._ranges]

    @property
    def ranges(self):
        """
        A tuple of the maximal ``Range`` instances, sorted by start.
        """

        return tuple(self._ranges)

    def add(self, start, end=None):
        """
        Add a range of indices to the set.

        :param int start: The first index of the range.
        :param int end: The last index of the range (inclusive).
                        Defaults to ``start``.

        :raises ValueError:
            The range is empty.
        """

        if end is None:
            end = start
        if end < start:
            raise ValueError('invalid range %d-%d' % (start, end))

        _add_range(self._ranges, start, end)

    def issubset(self, other):
        """
        Determine if this interval set is a subset of another.  This is
        performed by comparing ranges, for efficiency.

        :param other: Another interval set to compare to.
        :type other: ``IntervalSet``

        :returns: A ``True`` value if this interval set is a subset of
                  the other.
        :rtype: ``bool``
        """

        # Search our ranges
        idx = 0
        for rng in self._ranges:
            # Search for the starting point in the other set
            idx, contained = _search_ranges(other._ranges, rng.start, lo=idx)
            if not contained or rng.end > other._ranges[idx].end:
                # Can't be a subset, then
                return False

        return True
