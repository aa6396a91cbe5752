import unittest

import numpy as np

from tanomaly import intervals


class TestSearchRanges(unittest.TestCase):
    ranges = [
        intervals.Range(2, 4),
        intervals.Range(7, 7),
        intervals.Range(10, 12),
    ]

    def test_found(self):
        self.assertEqual(intervals._search_ranges(self.ranges, 3), (0, True))
        self.assertEqual(intervals._search_ranges(self.ranges, 7), (1, True))
        self.assertEqual(intervals._search_ranges(self.ranges, 12),
                         (2, True))

    def test_not_found(self):
        self.assertEqual(intervals._search_ranges(self.ranges, 0),
                         (0, False))
        self.assertEqual(intervals._search_ranges(self.ranges, 5),
                         (1, False))
        self.assertEqual(intervals._search_ranges(self.ranges, 20),
                         (3, False))

    def test_bad_lo(self):
        self.assertRaises(IndexError, intervals._search_ranges,
                          self.ranges, 3, lo=-1)
        self.assertRaises(IndexError, intervals._search_ranges,
                          self.ranges, 3, lo=4)

    def test_bad_hi(self):
        self.assertRaises(IndexError, intervals._search_ranges,
                          self.ranges, 3, hi=4)


class TestAddRange(unittest.TestCase):
    def test_empty(self):
        result = intervals._add_range([], 3, 5)

        self.assertEqual(result, [(3, 5)])

    def test_disjoint(self):
        ranges = [intervals.Range(0, 1), intervals.Range(10, 11)]

        result = intervals._add_range(ranges, 4, 6)

        self.assertEqual(result, [(0, 1), (4, 6), (10, 11)])

    def test_contained(self):
        ranges = [intervals.Range(0, 10)]

        result = intervals._add_range(ranges, 3, 5)

        self.assertEqual(result, [(0, 10)])

    def test_overlapping(self):
        ranges = [intervals.Range(0, 3), intervals.Range(8, 10)]

        result = intervals._add_range(ranges, 2, 9)

        self.assertEqual(result, [(0, 10)])

    def test_adjoining_left(self):
        ranges = [intervals.Range(0, 3)]

        result = intervals._add_range(ranges, 4, 6)

        self.assertEqual(result, [(0, 6)])

    def test_adjoining_right(self):
        ranges = [intervals.Range(7, 9)]

        result = intervals._add_range(ranges, 4, 6)

        self.assertEqual(result, [(4, 9)])

    def test_bridging(self):
        ranges = [intervals.Range(0, 3), intervals.Range(7, 9)]

        result = intervals._add_range(ranges, 4, 6)

        self.assertEqual(result, [(0, 9)])


class TestIntervalSet(unittest.TestCase):
    def test_from_mask(self):
        result = intervals.IntervalSet.from_mask(
            [False, True, True, False, True, False, False, True])

        self.assertEqual(result.ranges, ((1, 2), (4, 4), (7, 7)))

    def test_from_mask_empty(self):
        self.assertEqual(intervals.IntervalSet.from_mask([]).ranges, ())
        self.assertEqual(
            intervals.IntervalSet.from_mask([False] * 4).ranges, ())

    def test_from_mask_full(self):
        result = intervals.IntervalSet.from_mask(np.ones(6, dtype=bool))

        self.assertEqual(result.ranges, ((0, 5),))

    def test_from_mask_random(self):
        rng = np.random.default_rng(3)
        for _i in range(50):
            mask = rng.random(int(rng.integers(1, 40))) < 0.4

            result = intervals.IntervalSet.from_mask(mask)

            # Covered indices are exactly the true positions, and no
            # two ranges touch
            self.assertEqual(list(result), list(np.flatnonzero(mask)))
            for left, right in zip(result.ranges, result.ranges[1:]):
                self.assertGreater(right.start, left.end + 1)

    def test_init(self):
        result = intervals.IntervalSet([(5, 6), (0, 2), (3, 3)])

        self.assertEqual(result.ranges, ((0, 3), (5, 6)))

    def test_contains(self):
        obj = intervals.IntervalSet([(0, 2), (5, 6)])

        self.assertIn(1, obj)
        self.assertNotIn(3, obj)
        self.assertIn(6, obj)

    def test_len_iter(self):
        obj = intervals.IntervalSet([(0, 2), (5, 6)])

        self.assertEqual(len(obj), 5)
        self.assertEqual(list(obj), [0, 1, 2, 5, 6])

    def test_bool(self):
        self.assertFalse(intervals.IntervalSet())
        self.assertTrue(intervals.IntervalSet([(1, 1)]))

    def test_eq(self):
        self.assertEqual(intervals.IntervalSet([(0, 1), (2, 3)]),
                         intervals.IntervalSet([(0, 3)]))
        self.assertNotEqual(intervals.IntervalSet([(0, 1)]),
                            intervals.IntervalSet([(0, 2)]))

    def test_add(self):
        obj = intervals.IntervalSet()

        obj.add(3)
        obj.add(6, 8)
        obj.add(4, 4)

        self.assertEqual(obj.ranges, ((3, 4), (6, 8)))

    def test_add_invalid(self):
        obj = intervals.IntervalSet()

        self.assertRaises(ValueError, obj.add, 5, 4)

    def test_issubset(self):
        outer = intervals.IntervalSet([(0, 5), (8, 12)])

        self.assertTrue(intervals.IntervalSet([(1, 2), (9, 12)])
                        .issubset(outer))
        self.assertFalse(intervals.IntervalSet([(4, 8)]).issubset(outer))
        self.assertFalse(intervals.IntervalSet([(13, 13)]).issubset(outer))
        self.assertTrue(intervals.IntervalSet().issubset(outer))
